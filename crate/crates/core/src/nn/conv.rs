//! Strided 2D convolution and transposed convolution via column gathering
//! plus GEMM.
//!
//! `fill_cols` gathers one sample's receptive fields into a
//! `(C*K*K, OH*OW)` matrix; `cols_scatter_add` is its exact adjoint. The
//! same pair drives all four passes: conv forward/backward and transposed
//! conv backward/forward respectively.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array4, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use super::{Elem, GradStore, InitRule, ParamGroup, ParamKind, ParamSpec, ParamStore};

pub fn conv_out(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Gathers receptive fields of one `(c, h, w)` sample into `cols` with
/// layout `(c*k*k, oh*ow)`; out-of-bounds taps read as zero.
pub(crate) fn fill_cols<E: Elem>(
    x: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [E],
) {
    debug_assert_eq!(x.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let ohw = oh * ow;
    for ci in 0..c {
        let xc = ci * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let r = ((ci * k + ky) * k + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let row = r + oy * ow;
                    if iy < 0 || iy >= h as isize {
                        cols[row..row + ow].fill(E::zero());
                        continue;
                    }
                    let xrow = xc + iy as usize * w;
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let lo = ((-shift).max(0) as usize).min(ow);
                        let hi = (((w as isize - shift).max(0)) as usize).min(ow).max(lo);
                        cols[row..row + lo].fill(E::zero());
                        if hi > lo {
                            let src = (xrow as isize + lo as isize + shift) as usize;
                            cols[row + lo..row + hi].copy_from_slice(&x[src..src + (hi - lo)]);
                        }
                        cols[row + hi..row + ow].fill(E::zero());
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            cols[row + ox] = if ix < 0 || ix >= w as isize {
                                E::zero()
                            } else {
                                x[xrow + ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`fill_cols`]: scatter-adds `cols` back onto a `(c, h, w)`
/// canvas. The caller zeroes `out` beforehand when overwrite is intended.
pub(crate) fn cols_scatter_add<E: Elem>(
    cols: &[E],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    out: &mut [E],
) {
    debug_assert_eq!(out.len(), c * h * w);
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    let ohw = oh * ow;
    for ci in 0..c {
        let oc = ci * h * w;
        for ky in 0..k {
            for kx in 0..k {
                let r = ((ci * k + ky) * k + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let orow = oc + iy as usize * w;
                    let crow = r + oy * ow;
                    if stride == 1 {
                        let shift = kx as isize - pad as isize;
                        let lo = ((-shift).max(0) as usize).min(ow);
                        let hi = (((w as isize - shift).max(0)) as usize).min(ow).max(lo);
                        let mut dst = (orow as isize + lo as isize + shift) as usize;
                        for ox in lo..hi {
                            out[dst] = out[dst] + cols[crow + ox];
                            dst += 1;
                        }
                    } else {
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                let dst = orow + ix as usize;
                                out[dst] = out[dst] + cols[crow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn add_channel_bias<E: Elem>(y: &mut [E], n: usize, c: usize, hw: usize, bias: &[E]) {
    for ni in 0..n {
        for ci in 0..c {
            let b = bias[ci];
            let base = (ni * c + ci) * hw;
            for v in &mut y[base..base + hw] {
                *v = *v + b;
            }
        }
    }
}

fn channel_grad_sum<E: Elem>(dy: &[E], n: usize, c: usize, hw: usize) -> Array1<E> {
    let mut db = Array1::zeros(c);
    for ni in 0..n {
        for ci in 0..c {
            let base = (ni * c + ci) * hw;
            let mut s = E::zero();
            for &v in &dy[base..base + hw] {
                s = s + v;
            }
            db[ci] = db[ci] + s;
        }
    }
    db
}

#[derive(Debug)]
pub struct Conv2dCache<E> {
    pub x: Array4<E>,
}

/// 2D convolution, weight layout `(out_c, in_c, k, k)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub name: String,
    pub group: ParamGroup,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: impl Into<String>,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self { name: name.into(), group, in_c, out_c, k, stride, pad }
    }

    fn wname(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bname(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.wname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.out_c, self.in_c, self.k, self.k],
                init: InitRule::FanInNormal { fan_in: self.in_c * self.k * self.k },
            },
            ParamSpec {
                name: self.bname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.out_c],
                init: InitRule::Zeros,
            },
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (conv_out(h, self.k, self.stride, self.pad), conv_out(w, self.k, self.stride, self.pad))
    }

    pub fn forward<E: Elem>(&self, ps: &ParamStore<E>, x: Array4<E>) -> (Array4<E>, Conv2dCache<E>) {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_c, "{}: input channels", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let ohw = oh * ow;
        let ckk = self.in_c * self.k * self.k;
        let mut y = Array4::zeros((n, self.out_c, oh, ow));
        {
            let wd = ps.get(&self.wname());
            let w_flat = ArrayView2::from_shape((self.out_c, ckk), wd.as_slice().unwrap()).unwrap();
            let xs = x.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let mut cols = vec![E::zero(); ckk * ohw];
            for ni in 0..n {
                fill_cols(
                    &xs[ni * cin * h * w..(ni + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                    &mut cols,
                );
                let cview = ArrayView2::from_shape((ckk, ohw), &cols[..]).unwrap();
                let mut yview = ArrayViewMut2::from_shape(
                    (self.out_c, ohw),
                    &mut ys[ni * self.out_c * ohw..(ni + 1) * self.out_c * ohw],
                )
                .unwrap();
                general_mat_mul(E::one(), &w_flat, &cview, E::zero(), &mut yview);
            }
            let bias = ps.get(&self.bname());
            add_channel_bias(ys, n, self.out_c, ohw, bias.as_slice().unwrap());
        }
        (y, Conv2dCache { x })
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: &Conv2dCache<E>,
        dy: &Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let x = &cache.x;
        let (n, cin, h, w) = x.dim();
        let (dn, dco, oh, ow) = dy.dim();
        assert_eq!((dn, dco), (n, self.out_c), "{}: dy shape", self.name);
        let ohw = oh * ow;
        let ckk = self.in_c * self.k * self.k;

        let wd = ps.get(&self.wname());
        let w_flat = ArrayView2::from_shape((self.out_c, ckk), wd.as_slice().unwrap()).unwrap();
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        let mut dx = Array4::zeros((n, cin, h, w));
        let mut dw = vec![E::zero(); self.out_c * ckk];
        let mut cols = vec![E::zero(); ckk * ohw];
        let mut dcols = vec![E::zero(); ckk * ohw];
        {
            let dxs = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                fill_cols(
                    &xs[ni * cin * h * w..(ni + 1) * cin * h * w],
                    cin,
                    h,
                    w,
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                    &mut cols,
                );
                let cview = ArrayView2::from_shape((ckk, ohw), &cols[..]).unwrap();
                let dyv = ArrayView2::from_shape(
                    (self.out_c, ohw),
                    &dys[ni * self.out_c * ohw..(ni + 1) * self.out_c * ohw],
                )
                .unwrap();
                {
                    let mut dwv = ArrayViewMut2::from_shape((self.out_c, ckk), &mut dw[..]).unwrap();
                    general_mat_mul(E::one(), &dyv, &cview.t(), E::one(), &mut dwv);
                }
                {
                    let mut dcv = ArrayViewMut2::from_shape((ckk, ohw), &mut dcols[..]).unwrap();
                    general_mat_mul(E::one(), &w_flat.t(), &dyv, E::zero(), &mut dcv);
                }
                cols_scatter_add(
                    &dcols,
                    cin,
                    h,
                    w,
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                    &mut dxs[ni * cin * h * w..(ni + 1) * cin * h * w],
                );
            }
        }
        let db = channel_grad_sum(dys, n, self.out_c, ohw);
        grads.accumulate(
            &self.wname(),
            ArrayD::from_shape_vec(IxDyn(&[self.out_c, self.in_c, self.k, self.k]), dw).unwrap(),
        );
        grads.accumulate(&self.bname(), db.into_dyn());
        dx
    }
}

#[derive(Debug)]
pub struct ConvTranspose2dCache<E> {
    pub x: Array4<E>,
}

/// Transposed 2D convolution, weight layout `(in_c, out_c, k, k)`.
///
/// Output size is `(h - 1) * stride - 2 * pad + k`, so the 4x4/stride-2/
/// pad-1 configuration exactly doubles spatial extent.
#[derive(Debug, Clone)]
pub struct ConvTranspose2d {
    pub name: String,
    pub group: ParamGroup,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    pub fn new(
        name: impl Into<String>,
        group: ParamGroup,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        Self { name: name.into(), group, in_c, out_c, k, stride, pad }
    }

    fn wname(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bname(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.wname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.in_c, self.out_c, self.k, self.k],
                init: InitRule::FanInNormal { fan_in: self.in_c * self.k * self.k },
            },
            ParamSpec {
                name: self.bname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.out_c],
                init: InitRule::Zeros,
            },
        ]
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h - 1) * self.stride + self.k - 2 * self.pad,
            (w - 1) * self.stride + self.k - 2 * self.pad,
        )
    }

    pub fn forward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        x: Array4<E>,
    ) -> (Array4<E>, ConvTranspose2dCache<E>) {
        let (n, cin, h, w) = x.dim();
        assert_eq!(cin, self.in_c, "{}: input channels", self.name);
        let (oh, ow) = self.out_hw(h, w);
        let hw = h * w;
        let okk = self.out_c * self.k * self.k;
        let mut y = Array4::zeros((n, self.out_c, oh, ow));
        {
            let wd = ps.get(&self.wname());
            let w_flat = ArrayView2::from_shape((self.in_c, okk), wd.as_slice().unwrap()).unwrap();
            let xs = x.as_slice().unwrap();
            let ys = y.as_slice_mut().unwrap();
            let mut cols = vec![E::zero(); okk * hw];
            for ni in 0..n {
                let xv = ArrayView2::from_shape((self.in_c, hw), &xs[ni * cin * hw..(ni + 1) * cin * hw])
                    .unwrap();
                {
                    let mut cv = ArrayViewMut2::from_shape((okk, hw), &mut cols[..]).unwrap();
                    general_mat_mul(E::one(), &w_flat.t(), &xv, E::zero(), &mut cv);
                }
                cols_scatter_add(
                    &cols,
                    self.out_c,
                    oh,
                    ow,
                    self.k,
                    self.stride,
                    self.pad,
                    h,
                    w,
                    &mut ys[ni * self.out_c * oh * ow..(ni + 1) * self.out_c * oh * ow],
                );
            }
            let bias = ps.get(&self.bname());
            add_channel_bias(ys, n, self.out_c, oh * ow, bias.as_slice().unwrap());
        }
        (y, ConvTranspose2dCache { x })
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: &ConvTranspose2dCache<E>,
        dy: &Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let x = &cache.x;
        let (n, cin, h, w) = x.dim();
        let (dn, dco, oh, ow) = dy.dim();
        assert_eq!((dn, dco), (n, self.out_c), "{}: dy shape", self.name);
        let hw = h * w;
        let okk = self.out_c * self.k * self.k;

        let wd = ps.get(&self.wname());
        let w_flat = ArrayView2::from_shape((self.in_c, okk), wd.as_slice().unwrap()).unwrap();
        let xs = x.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        let mut dx = Array4::zeros((n, cin, h, w));
        let mut dw = vec![E::zero(); self.in_c * okk];
        let mut dcols = vec![E::zero(); okk * hw];
        {
            let dxs = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                fill_cols(
                    &dys[ni * self.out_c * oh * ow..(ni + 1) * self.out_c * oh * ow],
                    self.out_c,
                    oh,
                    ow,
                    self.k,
                    self.stride,
                    self.pad,
                    h,
                    w,
                    &mut dcols,
                );
                let dcv = ArrayView2::from_shape((okk, hw), &dcols[..]).unwrap();
                let xv = ArrayView2::from_shape((self.in_c, hw), &xs[ni * cin * hw..(ni + 1) * cin * hw])
                    .unwrap();
                {
                    let mut dwv = ArrayViewMut2::from_shape((self.in_c, okk), &mut dw[..]).unwrap();
                    general_mat_mul(E::one(), &xv, &dcv.t(), E::one(), &mut dwv);
                }
                {
                    let mut dxv = ArrayViewMut2::from_shape(
                        (self.in_c, hw),
                        &mut dxs[ni * cin * hw..(ni + 1) * cin * hw],
                    )
                    .unwrap();
                    general_mat_mul(E::one(), &w_flat, &dcv, E::zero(), &mut dxv);
                }
            }
        }
        let db = channel_grad_sum(dys, n, self.out_c, oh * ow);
        grads.accumulate(
            &self.wname(),
            ArrayD::from_shape_vec(IxDyn(&[self.in_c, self.out_c, self.k, self.k]), dw).unwrap(),
        );
        grads.accumulate(&self.bname(), db.into_dyn());
        dx
    }
}

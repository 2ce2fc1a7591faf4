//! Residual downsampling and upsampling blocks.
//!
//! [`DownBlock`] halves spatial extent: 3x3 stride-2 conv, norm, ReLU,
//! 3x3 conv, norm on the main path; 1x1 stride-2 conv plus norm on the
//! skip; ReLU after the sum. [`UpBlock`] is its inverse: 4x4 stride-2
//! transposed conv on the main path and nearest-neighbor x2 upsampling
//! plus 1x1 conv on the skip.

use ndarray::Array4;

use super::act::{relu, relu_backward};
use super::conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache};
use super::norm::{BatchNorm2d, BnCache};
use super::{Elem, GradStore, ParamGroup, ParamSpec, ParamStore};

pub fn upsample2x<E: Elem>(x: &Array4<E>) -> Array4<E> {
    let (n, c, h, w) = x.dim();
    let mut y = Array4::zeros((n, c, 2 * h, 2 * w));
    let xs = x.as_slice().unwrap();
    let ys = y.as_slice_mut().unwrap();
    let w2 = 2 * w;
    for nc in 0..n * c {
        let xb = nc * h * w;
        let yb = nc * 4 * h * w;
        for iy in 0..h {
            let row = &xs[xb + iy * w..xb + (iy + 1) * w];
            for (ix, &v) in row.iter().enumerate() {
                let base = yb + 2 * iy * w2 + 2 * ix;
                ys[base] = v;
                ys[base + 1] = v;
                ys[base + w2] = v;
                ys[base + w2 + 1] = v;
            }
        }
    }
    y
}

/// Adjoint of [`upsample2x`]: each input cell receives the sum of its 2x2
/// output cell.
pub fn upsample2x_backward<E: Elem>(dy: &Array4<E>) -> Array4<E> {
    let (n, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((n, c, h, w));
    let dys = dy.as_slice().unwrap();
    let dxs = dx.as_slice_mut().unwrap();
    for nc in 0..n * c {
        let yb = nc * h2 * w2;
        let xb = nc * h * w;
        for iy in 0..h {
            for ix in 0..w {
                let base = yb + 2 * iy * w2 + 2 * ix;
                dxs[xb + iy * w + ix] =
                    dys[base] + dys[base + 1] + dys[base + w2] + dys[base + w2 + 1];
            }
        }
    }
    dx
}

pub(crate) fn bn_forward_train_opt<E: Elem>(
    bn: &Option<BatchNorm2d>,
    ps: &mut ParamStore<E>,
    x: Array4<E>,
) -> (Array4<E>, Option<BnCache<E>>) {
    match bn {
        Some(b) => {
            let (y, c) = b.forward_train(ps, x);
            (y, Some(c))
        }
        None => (x, None),
    }
}

pub(crate) fn bn_forward_eval_opt<E: Elem>(
    bn: &Option<BatchNorm2d>,
    ps: &ParamStore<E>,
    x: Array4<E>,
) -> Array4<E> {
    match bn {
        Some(b) => b.forward_eval(ps, &x),
        None => x,
    }
}

pub(crate) fn bn_backward_opt<E: Elem>(
    bn: &Option<BatchNorm2d>,
    cache: &Option<BnCache<E>>,
    ps: &ParamStore<E>,
    d: Array4<E>,
    grads: &mut GradStore<E>,
) -> Array4<E> {
    match (bn, cache) {
        (Some(b), Some(c)) => b.backward(ps, c, &d, grads),
        _ => d,
    }
}

#[derive(Debug)]
pub struct DownBlockCache<E> {
    c1: Conv2dCache<E>,
    b1: Option<BnCache<E>>,
    c2: Conv2dCache<E>,
    b2: Option<BnCache<E>>,
    sk: Conv2dCache<E>,
    skb: Option<BnCache<E>>,
    y: Array4<E>,
}

#[derive(Debug, Clone)]
pub struct DownBlock {
    pub conv1: Conv2d,
    pub bn1: Option<BatchNorm2d>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm2d>,
    pub skip: Conv2d,
    pub skip_bn: Option<BatchNorm2d>,
}

impl DownBlock {
    pub fn new(name: &str, group: ParamGroup, in_c: usize, out_c: usize, norm: bool) -> Self {
        Self {
            conv1: Conv2d::new(format!("{name}.conv1"), group, in_c, out_c, 3, 2, 1),
            bn1: norm.then(|| BatchNorm2d::new(format!("{name}.bn1"), group, out_c)),
            conv2: Conv2d::new(format!("{name}.conv2"), group, out_c, out_c, 3, 1, 1),
            bn2: norm.then(|| BatchNorm2d::new(format!("{name}.bn2"), group, out_c)),
            skip: Conv2d::new(format!("{name}.skip"), group, in_c, out_c, 1, 2, 0),
            skip_bn: norm.then(|| BatchNorm2d::new(format!("{name}.skip_bn"), group, out_c)),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.conv1.param_specs();
        if let Some(bn) = &self.bn1 {
            specs.extend(bn.param_specs());
        }
        specs.extend(self.conv2.param_specs());
        if let Some(bn) = &self.bn2 {
            specs.extend(bn.param_specs());
        }
        specs.extend(self.skip.param_specs());
        if let Some(bn) = &self.skip_bn {
            specs.extend(bn.param_specs());
        }
        specs
    }

    pub fn forward_train<E: Elem>(
        &self,
        ps: &mut ParamStore<E>,
        x: Array4<E>,
    ) -> (Array4<E>, DownBlockCache<E>) {
        let (a, c1) = self.conv1.forward(ps, x.clone());
        let (mut a, b1) = bn_forward_train_opt(&self.bn1, ps, a);
        relu(&mut a);
        let (b, c2) = self.conv2.forward(ps, a);
        let (b, b2) = bn_forward_train_opt(&self.bn2, ps, b);
        let (s, sk) = self.skip.forward(ps, x);
        let (s, skb) = bn_forward_train_opt(&self.skip_bn, ps, s);
        let mut y = b + s;
        relu(&mut y);
        (y.clone(), DownBlockCache { c1, b1, c2, b2, sk, skb, y })
    }

    pub fn forward_eval<E: Elem>(&self, ps: &ParamStore<E>, x: &Array4<E>) -> Array4<E> {
        let (a, _) = self.conv1.forward(ps, x.clone());
        let mut a = bn_forward_eval_opt(&self.bn1, ps, a);
        relu(&mut a);
        let (b, _) = self.conv2.forward(ps, a);
        let b = bn_forward_eval_opt(&self.bn2, ps, b);
        let (s, _) = self.skip.forward(ps, x.clone());
        let s = bn_forward_eval_opt(&self.skip_bn, ps, s);
        let mut y = b + s;
        relu(&mut y);
        y
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: DownBlockCache<E>,
        dy: &Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let mut dpre = dy.clone();
        relu_backward(&mut dpre, &cache.y);

        let dmain = bn_backward_opt(&self.bn2, &cache.b2, ps, dpre.clone(), grads);
        let mut da = self.conv2.backward(ps, &cache.c2, &dmain, grads);
        relu_backward(&mut da, &cache.c2.x);
        let d1 = bn_backward_opt(&self.bn1, &cache.b1, ps, da, grads);
        let dx_main = self.conv1.backward(ps, &cache.c1, &d1, grads);

        let ds = bn_backward_opt(&self.skip_bn, &cache.skb, ps, dpre, grads);
        let dx_skip = self.skip.backward(ps, &cache.sk, &ds, grads);

        dx_main + dx_skip
    }
}

#[derive(Debug)]
pub struct UpBlockCache<E> {
    d1: ConvTranspose2dCache<E>,
    b1: Option<BnCache<E>>,
    c2: Conv2dCache<E>,
    b2: Option<BnCache<E>>,
    sk: Conv2dCache<E>,
    skb: Option<BnCache<E>>,
    y: Array4<E>,
}

#[derive(Debug, Clone)]
pub struct UpBlock {
    pub deconv1: ConvTranspose2d,
    pub bn1: Option<BatchNorm2d>,
    pub conv2: Conv2d,
    pub bn2: Option<BatchNorm2d>,
    pub skip: Conv2d,
    pub skip_bn: Option<BatchNorm2d>,
}

impl UpBlock {
    pub fn new(name: &str, group: ParamGroup, in_c: usize, out_c: usize, norm: bool) -> Self {
        Self {
            deconv1: ConvTranspose2d::new(format!("{name}.deconv1"), group, in_c, out_c, 4, 2, 1),
            bn1: norm.then(|| BatchNorm2d::new(format!("{name}.bn1"), group, out_c)),
            conv2: Conv2d::new(format!("{name}.conv2"), group, out_c, out_c, 3, 1, 1),
            bn2: norm.then(|| BatchNorm2d::new(format!("{name}.bn2"), group, out_c)),
            skip: Conv2d::new(format!("{name}.skip"), group, in_c, out_c, 1, 1, 0),
            skip_bn: norm.then(|| BatchNorm2d::new(format!("{name}.skip_bn"), group, out_c)),
        }
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = self.deconv1.param_specs();
        if let Some(bn) = &self.bn1 {
            specs.extend(bn.param_specs());
        }
        specs.extend(self.conv2.param_specs());
        if let Some(bn) = &self.bn2 {
            specs.extend(bn.param_specs());
        }
        specs.extend(self.skip.param_specs());
        if let Some(bn) = &self.skip_bn {
            specs.extend(bn.param_specs());
        }
        specs
    }

    pub fn forward_train<E: Elem>(
        &self,
        ps: &mut ParamStore<E>,
        x: Array4<E>,
    ) -> (Array4<E>, UpBlockCache<E>) {
        let up = upsample2x(&x);
        let (a, d1) = self.deconv1.forward(ps, x);
        let (mut a, b1) = bn_forward_train_opt(&self.bn1, ps, a);
        relu(&mut a);
        let (b, c2) = self.conv2.forward(ps, a);
        let (b, b2) = bn_forward_train_opt(&self.bn2, ps, b);
        let (s, sk) = self.skip.forward(ps, up);
        let (s, skb) = bn_forward_train_opt(&self.skip_bn, ps, s);
        let mut y = b + s;
        relu(&mut y);
        (y.clone(), UpBlockCache { d1, b1, c2, b2, sk, skb, y })
    }

    pub fn forward_eval<E: Elem>(&self, ps: &ParamStore<E>, x: &Array4<E>) -> Array4<E> {
        let up = upsample2x(x);
        let (a, _) = self.deconv1.forward(ps, x.clone());
        let mut a = bn_forward_eval_opt(&self.bn1, ps, a);
        relu(&mut a);
        let (b, _) = self.conv2.forward(ps, a);
        let b = bn_forward_eval_opt(&self.bn2, ps, b);
        let (s, _) = self.skip.forward(ps, up);
        let s = bn_forward_eval_opt(&self.skip_bn, ps, s);
        let mut y = b + s;
        relu(&mut y);
        y
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: UpBlockCache<E>,
        dy: &Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let mut dpre = dy.clone();
        relu_backward(&mut dpre, &cache.y);

        let dmain = bn_backward_opt(&self.bn2, &cache.b2, ps, dpre.clone(), grads);
        let mut da = self.conv2.backward(ps, &cache.c2, &dmain, grads);
        relu_backward(&mut da, &cache.c2.x);
        let d1 = bn_backward_opt(&self.bn1, &cache.b1, ps, da, grads);
        let dx_main = self.deconv1.backward(ps, &cache.d1, &d1, grads);

        let ds = bn_backward_opt(&self.skip_bn, &cache.skb, ps, dpre, grads);
        let dup = self.skip.backward(ps, &cache.sk, &ds, grads);
        let dx_skip = upsample2x_backward(&dup);

        dx_main + dx_skip
    }
}

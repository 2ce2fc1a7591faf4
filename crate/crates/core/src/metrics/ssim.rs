//! Single-scale SSIM on a separable Gaussian window, with the analytic
//! gradient of the map with respect to the first image.
//!
//! Everything here is generic over [`Elem`] so the loss side can run the
//! same code in f32 for training and f64 for finite-difference checks.

use ndarray::{Array2, ArrayView2, Zip};

use crate::nn::Elem;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;
/// Dynamic range of unit-range images.
pub const SSIM_L: f64 = 1.0;

pub(crate) fn ssim_c1() -> f64 {
    (SSIM_K1 * SSIM_L) * (SSIM_K1 * SSIM_L)
}

pub(crate) fn ssim_c2() -> f64 {
    (SSIM_K2 * SSIM_L) * (SSIM_K2 * SSIM_L)
}

/// Normalized 1D Gaussian taps; the 2D window is their outer product.
pub(crate) fn gaussian_kernel<E: Elem>() -> [E; SSIM_WINDOW] {
    let mid = (SSIM_WINDOW / 2) as f64;
    let mut taps = [0.0f64; SSIM_WINDOW];
    let mut sum = 0.0;
    for (i, t) in taps.iter_mut().enumerate() {
        let d = i as f64 - mid;
        *t = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *t;
    }
    let mut out = [E::zero(); SSIM_WINDOW];
    for (o, t) in out.iter_mut().zip(taps) {
        *o = E::from_f64(t / sum);
    }
    out
}

/// Valid-mode separable filter: output is `(H-10) x (W-10)`.
pub(crate) fn filter_valid<E: Elem>(x: &ArrayView2<E>, k: &[E; SSIM_WINDOW]) -> Array2<E> {
    let (h, w) = x.dim();
    let (vh, vw) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = Array2::<E>::zeros((h, vw));
    for y in 0..h {
        for ox in 0..vw {
            let mut acc = E::zero();
            for (dx, &kv) in k.iter().enumerate() {
                acc += kv * x[[y, ox + dx]];
            }
            rows[[y, ox]] = acc;
        }
    }
    let mut out = Array2::<E>::zeros((vh, vw));
    for oy in 0..vh {
        for ox in 0..vw {
            let mut acc = E::zero();
            for (dy, &kv) in k.iter().enumerate() {
                acc += kv * rows[[oy + dy, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

/// Adjoint of [`filter_valid`]: scatters a valid-size gradient back onto
/// the full `h x w` plane.
pub(crate) fn filter_valid_adjoint<E: Elem>(
    g: &ArrayView2<E>,
    k: &[E; SSIM_WINDOW],
    h: usize,
    w: usize,
) -> Array2<E> {
    let (vh, vw) = g.dim();
    debug_assert_eq!((vh, vw), (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1));
    let mut cols = Array2::<E>::zeros((h, vw));
    for oy in 0..vh {
        for ox in 0..vw {
            let gv = g[[oy, ox]];
            for (dy, &kv) in k.iter().enumerate() {
                cols[[oy + dy, ox]] += kv * gv;
            }
        }
    }
    let mut out = Array2::<E>::zeros((h, w));
    for y in 0..h {
        for ox in 0..vw {
            let cv = cols[[y, ox]];
            for (dx, &kv) in k.iter().enumerate() {
                out[[y, ox + dx]] += kv * cv;
            }
        }
    }
    out
}

/// SSIM map of one channel plus the intermediates its gradient needs.
pub(crate) struct ChannelSsim<E: Elem> {
    pub map: Array2<E>,
    mu_x: Array2<E>,
    mu_y: Array2<E>,
    a1: Array2<E>,
    a2: Array2<E>,
    b1: Array2<E>,
    b2: Array2<E>,
}

/// Computes the SSIM map between two unit-range planes of equal shape,
/// both at least [`SSIM_WINDOW`] on each side.
pub(crate) fn channel_ssim<E: Elem>(x: &ArrayView2<E>, y: &ArrayView2<E>) -> ChannelSsim<E> {
    let k = gaussian_kernel::<E>();
    let c1 = E::from_f64(ssim_c1());
    let c2 = E::from_f64(ssim_c2());
    let two = E::from_f64(2.0);

    let mu_x = filter_valid(x, &k);
    let mu_y = filter_valid(y, &k);
    let fxx = filter_valid(&x.map(|&v| v * v).view(), &k);
    let fyy = filter_valid(&y.map(|&v| v * v).view(), &k);
    let fxy = filter_valid(&Zip::from(x).and(y).map_collect(|&a, &b| a * b).view(), &k);

    let (vh, vw) = mu_x.dim();
    let mut a1 = Array2::<E>::zeros((vh, vw));
    let mut a2 = Array2::<E>::zeros((vh, vw));
    let mut b1 = Array2::<E>::zeros((vh, vw));
    let mut b2 = Array2::<E>::zeros((vh, vw));
    let mut map = Array2::<E>::zeros((vh, vw));
    for oy in 0..vh {
        for ox in 0..vw {
            let i = [oy, ox];
            let (mx, my) = (mu_x[i], mu_y[i]);
            let sxx = fxx[i] - mx * mx;
            let syy = fyy[i] - my * my;
            let sxy = fxy[i] - mx * my;
            a1[i] = two * mx * my + c1;
            a2[i] = two * sxy + c2;
            b1[i] = mx * mx + my * my + c1;
            b2[i] = sxx + syy + c2;
            map[i] = (a1[i] * a2[i]) / (b1[i] * b2[i]);
        }
    }
    ChannelSsim { map, mu_x, mu_y, a1, a2, b1, b2 }
}

/// Gradient of `sum(dmap . map)` with respect to `x` (the first image).
pub(crate) fn channel_ssim_backward<E: Elem>(
    c: &ChannelSsim<E>,
    x: &ArrayView2<E>,
    y: &ArrayView2<E>,
    dmap: &ArrayView2<E>,
) -> Array2<E> {
    let k = gaussian_kernel::<E>();
    let (h, w) = x.dim();
    let two = E::from_f64(2.0);

    let (vh, vw) = c.map.dim();
    let mut d_mu = Array2::<E>::zeros((vh, vw));
    let mut d_fxx = Array2::<E>::zeros((vh, vw));
    let mut d_fxy = Array2::<E>::zeros((vh, vw));
    for oy in 0..vh {
        for ox in 0..vw {
            let i = [oy, ox];
            let (ds, s) = (dmap[i], c.map[i]);
            let (mx, my) = (c.mu_x[i], c.mu_y[i]);
            let inv = E::one() / (c.b1[i] * c.b2[i]);
            let g_a1 = ds * c.a2[i] * inv;
            let g_a2 = ds * c.a1[i] * inv;
            let g_b1 = E::zero() - ds * s / c.b1[i];
            let g_b2 = E::zero() - ds * s / c.b2[i];
            d_mu[i] = two * (my * (g_a1 - g_a2) + mx * (g_b1 - g_b2));
            d_fxx[i] = g_b2;
            d_fxy[i] = two * g_a2;
        }
    }

    let mut dx = filter_valid_adjoint(&d_mu.view(), &k, h, w);
    let axx = filter_valid_adjoint(&d_fxx.view(), &k, h, w);
    let axy = filter_valid_adjoint(&d_fxy.view(), &k, h, w);
    Zip::from(&mut dx).and(&axx).and(&axy).and(x).and(y).for_each(|d, &gxx, &gxy, &xv, &yv| {
        *d += two * xv * gxx + yv * gxy;
    });
    dx
}

//! Batch normalization over the channel axis of `(N, C, H, W)` tensors.
//!
//! Training mode normalizes with biased batch statistics and updates the
//! running buffers in place; eval mode normalizes with the stored running
//! statistics and needs no cache. The backward pass differentiates through
//! the batch statistics.

use ndarray::{Array1, Array4};

use super::{Elem, GradStore, InitRule, ParamGroup, ParamKind, ParamSpec, ParamStore};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug)]
pub struct BnCache<E> {
    xhat: Array4<E>,
    invstd: Array1<E>,
}

#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub name: String,
    pub group: ParamGroup,
    pub c: usize,
}

impl BatchNorm2d {
    pub fn new(name: impl Into<String>, group: ParamGroup, c: usize) -> Self {
        Self { name: name.into(), group, c }
    }

    fn gname(&self) -> String {
        format!("{}.gamma", self.name)
    }

    fn bname(&self) -> String {
        format!("{}.beta", self.name)
    }

    fn rm_name(&self) -> String {
        format!("{}.running_mean", self.name)
    }

    fn rv_name(&self) -> String {
        format!("{}.running_var", self.name)
    }

    pub fn param_specs(&self) -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: self.gname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.c],
                init: InitRule::Ones,
            },
            ParamSpec {
                name: self.bname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.c],
                init: InitRule::Zeros,
            },
            ParamSpec {
                name: self.rm_name(),
                group: self.group,
                kind: ParamKind::Buffer,
                shape: vec![self.c],
                init: InitRule::Zeros,
            },
            ParamSpec {
                name: self.rv_name(),
                group: self.group,
                kind: ParamKind::Buffer,
                shape: vec![self.c],
                init: InitRule::Ones,
            },
        ]
    }

    pub fn forward_train<E: Elem>(
        &self,
        ps: &mut ParamStore<E>,
        x: Array4<E>,
    ) -> (Array4<E>, BnCache<E>) {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "{}: channels", self.name);
        let hw = h * w;
        let m = (n * hw) as f64;

        let xs = x.as_slice().unwrap();
        let mut mean = vec![0.0f64; c];
        let mut var = vec![0.0f64; c];
        for ci in 0..c {
            let mut s = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &xs[base..base + hw] {
                    s += v.to_f64();
                }
            }
            let mu = s / m;
            let mut sq = 0.0f64;
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for &v in &xs[base..base + hw] {
                    let d = v.to_f64() - mu;
                    sq += d * d;
                }
            }
            mean[ci] = mu;
            var[ci] = sq / m;
        }

        let invstd: Array1<E> =
            Array1::from_iter(var.iter().map(|&v| E::from_f64(1.0 / (v + BN_EPS).sqrt())));
        let gamma = ps.get(&self.gname()).as_slice().unwrap().to_vec();
        let beta = ps.get(&self.bname()).as_slice().unwrap().to_vec();

        let mut xhat = Array4::zeros((n, c, h, w));
        let mut y = Array4::zeros((n, c, h, w));
        {
            let xh = xhat.as_slice_mut().unwrap();
            let ys = y.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let mu = E::from_f64(mean[ci]);
                    let is = invstd[ci];
                    let g = gamma[ci];
                    let b = beta[ci];
                    for i in base..base + hw {
                        let xn = (xs[i] - mu) * is;
                        xh[i] = xn;
                        ys[i] = g * xn + b;
                    }
                }
            }
        }

        {
            let rm = ps.get_mut(&self.rm_name());
            let rms = rm.as_slice_mut().unwrap();
            for ci in 0..c {
                rms[ci] =
                    E::from_f64((1.0 - BN_MOMENTUM) * rms[ci].to_f64() + BN_MOMENTUM * mean[ci]);
            }
        }
        {
            let rv = ps.get_mut(&self.rv_name());
            let rvs = rv.as_slice_mut().unwrap();
            for ci in 0..c {
                rvs[ci] =
                    E::from_f64((1.0 - BN_MOMENTUM) * rvs[ci].to_f64() + BN_MOMENTUM * var[ci]);
            }
        }

        (y, BnCache { xhat, invstd })
    }

    pub fn forward_eval<E: Elem>(&self, ps: &ParamStore<E>, x: &Array4<E>) -> Array4<E> {
        let (n, c, h, w) = x.dim();
        assert_eq!(c, self.c, "{}: channels", self.name);
        let hw = h * w;
        let gamma = ps.get(&self.gname()).as_slice().unwrap().to_vec();
        let beta = ps.get(&self.bname()).as_slice().unwrap().to_vec();
        let rm = ps.get(&self.rm_name()).as_slice().unwrap().to_vec();
        let rv = ps.get(&self.rv_name()).as_slice().unwrap().to_vec();

        let xs = x.as_slice().unwrap();
        let mut y = Array4::zeros((n, c, h, w));
        let ys = y.as_slice_mut().unwrap();
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let is = E::from_f64(1.0 / (rv[ci].to_f64() + BN_EPS).sqrt());
                let mu = rm[ci];
                let g = gamma[ci];
                let b = beta[ci];
                for i in base..base + hw {
                    ys[i] = g * (xs[i] - mu) * is + b;
                }
            }
        }
        y
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: &BnCache<E>,
        dy: &Array4<E>,
        grads: &mut GradStore<E>,
    ) -> Array4<E> {
        let (n, c, h, w) = dy.dim();
        assert_eq!(c, self.c, "{}: channels", self.name);
        let hw = h * w;
        let m = E::from_f64((n * hw) as f64);

        let gamma = ps.get(&self.gname()).as_slice().unwrap().to_vec();
        let xh = cache.xhat.as_slice().unwrap();
        let dys = dy.as_slice().unwrap();

        let mut dgamma = Array1::<E>::zeros(c);
        let mut dbeta = Array1::<E>::zeros(c);
        // Per-channel sums of dxhat and dxhat * xhat, needed by the batch
        // statistics terms.
        let mut sum_dxh = vec![E::zero(); c];
        let mut sum_dxh_xh = vec![E::zero(); c];
        for ci in 0..c {
            let mut dg = E::zero();
            let mut db = E::zero();
            for ni in 0..n {
                let base = (ni * c + ci) * hw;
                for i in base..base + hw {
                    dg = dg + dys[i] * xh[i];
                    db = db + dys[i];
                }
            }
            dgamma[ci] = dg;
            dbeta[ci] = db;
            sum_dxh[ci] = gamma[ci] * db;
            sum_dxh_xh[ci] = gamma[ci] * dg;
        }

        let mut dx = Array4::zeros((n, c, h, w));
        {
            let dxs = dx.as_slice_mut().unwrap();
            for ni in 0..n {
                for ci in 0..c {
                    let base = (ni * c + ci) * hw;
                    let g = gamma[ci];
                    let is = cache.invstd[ci];
                    let s1 = sum_dxh[ci];
                    let s2 = sum_dxh_xh[ci];
                    for i in base..base + hw {
                        let dxhat = dys[i] * g;
                        dxs[i] = is * (m * dxhat - s1 - xh[i] * s2) / m;
                    }
                }
            }
        }

        grads.accumulate(&self.gname(), dgamma.into_dyn());
        grads.accumulate(&self.bname(), dbeta.into_dyn());
        dx
    }
}

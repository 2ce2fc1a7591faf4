//! Fully connected layer.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array1, Array2, ArrayView2};

use super::{Elem, GradStore, InitRule, ParamGroup, ParamKind, ParamSpec, ParamStore};

#[derive(Debug)]
pub struct LinearCache<E> {
    pub x: Array2<E>,
}

/// Affine map `y = x W^T + b`, weight layout `(out_f, in_f)`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub name: String,
    pub group: ParamGroup,
    pub in_f: usize,
    pub out_f: usize,
}

impl Linear {
    pub fn new(name: impl Into<String>, group: ParamGroup, in_f: usize, out_f: usize) -> Self {
        Self { name: name.into(), group, in_f, out_f }
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
                shape: vec![self.out_f, self.in_f],
                init: InitRule::FanInNormal { fan_in: self.in_f },
            },
            ParamSpec {
                name: self.bname(),
                group: self.group,
                kind: ParamKind::Learnable,
                shape: vec![self.out_f],
                init: InitRule::Zeros,
            },
        ]
    }

    pub fn forward<E: Elem>(&self, ps: &ParamStore<E>, x: Array2<E>) -> (Array2<E>, LinearCache<E>) {
        let (n, inf) = x.dim();
        assert_eq!(inf, self.in_f, "{}: input features", self.name);
        let wd = ps.get(&self.wname());
        let w = ArrayView2::from_shape((self.out_f, self.in_f), wd.as_slice().unwrap()).unwrap();
        let mut y = Array2::zeros((n, self.out_f));
        general_mat_mul(E::one(), &x, &w.t(), E::zero(), &mut y);
        let bias = ps.get(&self.bname());
        let bs = bias.as_slice().unwrap();
        for mut row in y.rows_mut() {
            for (v, &b) in row.iter_mut().zip(bs) {
                *v = *v + b;
            }
        }
        (y, LinearCache { x })
    }

    pub fn backward<E: Elem>(
        &self,
        ps: &ParamStore<E>,
        cache: &LinearCache<E>,
        dy: &Array2<E>,
        grads: &mut GradStore<E>,
    ) -> Array2<E> {
        let x = &cache.x;
        let (n, _) = x.dim();
        assert_eq!(dy.dim(), (n, self.out_f), "{}: dy shape", self.name);
        let wd = ps.get(&self.wname());
        let w = ArrayView2::from_shape((self.out_f, self.in_f), wd.as_slice().unwrap()).unwrap();

        let mut dw = Array2::zeros((self.out_f, self.in_f));
        general_mat_mul(E::one(), &dy.t(), &x, E::zero(), &mut dw);
        let mut db = Array1::zeros(self.out_f);
        for row in dy.rows() {
            for (s, &v) in db.iter_mut().zip(row.iter()) {
                *s = *s + v;
            }
        }
        let mut dx = Array2::zeros((n, self.in_f));
        general_mat_mul(E::one(), dy, &w, E::zero(), &mut dx);

        grads.accumulate(&self.wname(), dw.into_dyn());
        grads.accumulate(&self.bname(), db.into_dyn());
        dx
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::materialize;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(53);
        let lin = Linear::new("fc", ParamGroup::Encoder, 5, 4);
        let mut ps: ParamStore<f64> = materialize(&lin.param_specs(), &mut rng);
        let x = Array2::from_shape_fn((3, 5), |_| rng.random_range(-1.0..1.0));
        let target = Array2::from_shape_fn((3, 4), |_| rng.random_range(-1.0..1.0));

        let loss = |ps: &ParamStore<f64>, x: &Array2<f64>| -> f64 {
            let (y, _) = lin.forward(ps, x.clone());
            y.iter().zip(target.iter()).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };

        let (y, cache) = lin.forward(&ps, x.clone());
        let dy = &y - &target;
        let mut grads = GradStore::new();
        let dx = lin.backward(&ps, &cache, &dy, &mut grads);

        let h = 1e-6;
        let mut worst = 0.0f64;
        for r in 0..3 {
            for c in 0..5 {
                let mut xp = x.clone();
                xp[[r, c]] += h;
                let mut xm = x.clone();
                xm[[r, c]] -= h;
                let fd = (loss(&ps, &xp) - loss(&ps, &xm)) / (2.0 * h);
                let a = dx[[r, c]];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
            }
        }
        assert!(worst < 1e-6, "dx rel err {worst}");

        for pname in ["fc.weight", "fc.bias"] {
            let g = grads.get(pname).unwrap().clone();
            let mut worst = 0.0f64;
            for flat in 0..g.len() {
                let orig = ps.get(pname).as_slice().unwrap()[flat];
                ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig + h;
                let lp = loss(&ps, &x);
                ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig - h;
                let lm = loss(&ps, &x);
                ps.get_mut(pname).as_slice_mut().unwrap()[flat] = orig;
                let fd = (lp - lm) / (2.0 * h);
                let a = g.as_slice().unwrap()[flat];
                worst = worst.max((fd - a).abs() / fd.abs().max(a.abs()).max(1e-8));
            }
            assert!(worst < 1e-6, "{pname} rel err {worst}");
        }
    }
}

//! Adam over the parameter store, scoped to explicit group sets.

use std::collections::BTreeMap;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use super::TrainingError;
use crate::nn::{Elem, GradStore, ParamGroup, ParamKind, ParamStore};

/// Optimizer hyperparameters; defaults follow the training recipe.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamHyper {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamHyper {
    fn default() -> Self {
        Self { lr: 2e-5, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment estimates plus the shared step counter.
///
/// Moment tensors appear lazily on the first update that touches a
/// parameter, so after a [`reset`](Self::reset) the state holds moments
/// for exactly the parameters the current stage trains.
#[derive(Debug, Clone, Default)]
pub struct AdamState<E> {
    pub t: u64,
    pub(crate) m: BTreeMap<String, ArrayD<E>>,
    pub(crate) v: BTreeMap<String, ArrayD<E>>,
}

impl<E: Elem> AdamState<E> {
    pub fn new() -> Self {
        Self { t: 0, m: BTreeMap::new(), v: BTreeMap::new() }
    }

    /// Drops all moments and the step counter (stage entry semantics).
    pub fn reset(&mut self) {
        self.t = 0;
        self.m.clear();
        self.v.clear();
    }

    pub fn tracked(&self) -> usize {
        self.m.len()
    }
}

/// One bias-corrected Adam update over `groups`.
///
/// The gradient set must cover the learnable parameters of `groups`
/// exactly: a gradient for a frozen or foreign group is an error, as is
/// a missing gradient for a covered parameter. Buffers (running
/// statistics) are never touched.
pub fn adam_step<E: Elem>(
    params: &mut ParamStore<E>,
    grads: &GradStore<E>,
    opt: &mut AdamState<E>,
    hyper: &AdamHyper,
    groups: &[ParamGroup],
) -> Result<(), TrainingError> {
    for (name, g) in grads.iter() {
        let entry = match params.try_entry(name) {
            Some(e) => e,
            None => return Err(TrainingError::UnknownParam(name.clone())),
        };
        if entry.kind != ParamKind::Learnable {
            return Err(TrainingError::BufferGrad(name.clone()));
        }
        if !groups.contains(&entry.group) || !params.is_trainable(entry.group) {
            return Err(TrainingError::FrozenGroup { name: name.clone(), group: entry.group });
        }
        if g.shape() != entry.data.shape() {
            return Err(TrainingError::GradShape { name: name.clone() });
        }
    }
    let missing = params.iter().find(|(name, e)| {
        e.kind == ParamKind::Learnable && groups.contains(&e.group) && grads.get(name).is_none()
    });
    if let Some((name, _)) = missing {
        return Err(TrainingError::MissingGrad(name.clone()));
    }

    opt.t += 1;
    let lr = E::from_f64(hyper.lr);
    let b1 = E::from_f64(hyper.beta1);
    let b2 = E::from_f64(hyper.beta2);
    let nb1 = E::from_f64(1.0 - hyper.beta1);
    let nb2 = E::from_f64(1.0 - hyper.beta2);
    let eps = E::from_f64(hyper.eps);
    let bc1 = E::from_f64(1.0 - hyper.beta1.powi(opt.t as i32));
    let bc2 = E::from_f64(1.0 - hyper.beta2.powi(opt.t as i32));
    for (name, g) in grads.iter() {
        let m = opt.m.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let v = opt.v.entry(name.clone()).or_insert_with(|| ArrayD::zeros(g.raw_dim()));
        let p = params.get_mut(name);
        ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
            *m = b1 * *m + nb1 * g;
            *v = b2 * *v + nb2 * g * g;
            let mhat = *m / bc1;
            let vhat = *v / bc2;
            *p -= lr * mhat / (vhat.sqrt() + eps);
        });
    }
    Ok(())
}

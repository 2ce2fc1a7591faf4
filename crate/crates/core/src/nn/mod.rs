//! Parameter storage and hand-backpropagated layer primitives.
//!
//! Layers are stateless wiring descriptions; every tensor lives in a
//! [`ParamStore`] keyed by a stable dotted name. Forward passes return an
//! output plus an owned cache, backward passes consume the cache, take the
//! upstream gradient, accumulate parameter gradients into a [`GradStore`],
//! and return the input gradient. All math is generic over [`Elem`] so the
//! same code runs in f32 for training and f64 for finite-difference checks.

mod act;
mod blocks;
mod conv;
mod linear;
mod norm;

pub use act::{leaky_relu, leaky_relu_backward, relu, relu_backward, sigmoid, sigmoid_backward, tanh_forward, tanh_backward};
pub use blocks::{DownBlock, DownBlockCache, UpBlock, UpBlockCache, upsample2x, upsample2x_backward};
pub(crate) use blocks::{bn_backward_opt, bn_forward_eval_opt, bn_forward_train_opt};
pub use conv::{Conv2d, Conv2dCache, ConvTranspose2d, ConvTranspose2dCache, conv_out};
pub use linear::{Linear, LinearCache};
pub use norm::{BatchNorm2d, BnCache, BN_EPS, BN_MOMENTUM};

use std::collections::BTreeMap;
use std::fmt;

use ndarray::{ArrayD, IxDyn, LinalgScalar};
use num_traits::Float;
use serde::{Deserialize, Serialize};
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};

/// Scalar element type for network math.
///
/// Weight initialization always draws in f64 and converts, so stores built
/// from the same seed hold the same values in every element type.
pub trait Elem:
    LinalgScalar
    + Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + fmt::Debug
    + fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Elem for f32 {
    fn from_f64(v: f64) -> f32 {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Elem for f64 {
    fn from_f64(v: f64) -> f64 {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Parameter group a tensor belongs to; freezing acts on whole groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Encoder,
    Decoder,
    Attention,
    Discriminator,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Encoder,
        ParamGroup::Decoder,
        ParamGroup::Attention,
        ParamGroup::Discriminator,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Encoder => "encoder",
            ParamGroup::Decoder => "decoder",
            ParamGroup::Attention => "attention",
            ParamGroup::Discriminator => "discriminator",
        }
    }

    pub fn code(self) -> u8 {
        match self {
            ParamGroup::Encoder => 0,
            ParamGroup::Decoder => 1,
            ParamGroup::Attention => 2,
            ParamGroup::Discriminator => 3,
        }
    }

    pub fn from_code(code: u8) -> Option<ParamGroup> {
        Self::ALL.into_iter().find(|g| g.code() == code)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Learnable weights receive optimizer updates; buffers (batch-norm running
/// statistics) are written by forward passes only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ParamKind {
    Learnable,
    Buffer,
}

impl ParamKind {
    pub fn code(self) -> u8 {
        match self {
            ParamKind::Learnable => 0,
            ParamKind::Buffer => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<ParamKind> {
        match code {
            0 => Some(ParamKind::Learnable),
            1 => Some(ParamKind::Buffer),
            _ => None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamEntry<E> {
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub data: ArrayD<E>,
}

/// How a parameter tensor is filled at initialization.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitRule {
    /// Zero-mean normal with std `sqrt(2 / fan_in)`.
    FanInNormal { fan_in: usize },
    Zeros,
    Ones,
}

/// Declares one parameter tensor: its name, group, kind, shape, and init.
#[derive(Debug, Clone)]
pub struct ParamSpec {
    pub name: String,
    pub group: ParamGroup,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub init: InitRule,
}

impl ParamSpec {
    pub fn numel(&self) -> usize {
        self.shape.iter().product()
    }
}

/// Materializes specs into a store, drawing weights in spec order from the
/// given RNG. Identical seed and spec list yield bit-identical stores.
pub fn materialize<E: Elem>(specs: &[ParamSpec], rng: &mut ChaCha20Rng) -> ParamStore<E> {
    let mut store = ParamStore::new();
    for spec in specs {
        let dim = IxDyn(&spec.shape);
        let data = match spec.init {
            InitRule::FanInNormal { fan_in } => {
                let std = (2.0 / fan_in as f64).sqrt();
                let normal = Normal::new(0.0f64, std).expect("valid normal");
                ArrayD::from_shape_simple_fn(dim, || E::from_f64(normal.sample(rng)))
            }
            InitRule::Zeros => ArrayD::zeros(dim),
            InitRule::Ones => ArrayD::from_elem(dim, E::one()),
        };
        store.insert(&spec.name, spec.group, spec.kind, data);
    }
    store
}

/// Named parameter tensors with per-group trainability flags.
///
/// Iteration order is always lexicographic in the parameter name, which
/// makes fingerprints, checkpoints, and optimizer sweeps deterministic.
#[derive(Debug, Clone)]
pub struct ParamStore<E> {
    entries: BTreeMap<String, ParamEntry<E>>,
    trainable: BTreeMap<ParamGroup, bool>,
}

impl<E: Elem> Default for ParamStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> ParamStore<E> {
    pub fn new() -> Self {
        let trainable = ParamGroup::ALL.into_iter().map(|g| (g, true)).collect();
        Self { entries: BTreeMap::new(), trainable }
    }

    /// Adds a tensor. Duplicate names are a wiring bug, hence a panic.
    pub fn insert(&mut self, name: &str, group: ParamGroup, kind: ParamKind, data: ArrayD<E>) {
        let prev = self.entries.insert(name.to_string(), ParamEntry { group, kind, data });
        assert!(prev.is_none(), "duplicate parameter name '{name}'");
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn entry(&self, name: &str) -> &ParamEntry<E> {
        self.entries
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
    }

    pub fn try_entry(&self, name: &str) -> Option<&ParamEntry<E>> {
        self.entries.get(name)
    }

    pub fn get(&self, name: &str) -> &ArrayD<E> {
        &self.entry(name).data
    }

    pub fn get_mut(&mut self, name: &str) -> &mut ArrayD<E> {
        &mut self
            .entries
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter '{name}'"))
            .data
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<E>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    pub fn set_trainable(&mut self, group: ParamGroup, trainable: bool) {
        self.trainable.insert(group, trainable);
    }

    pub fn is_trainable(&self, group: ParamGroup) -> bool {
        *self.trainable.get(&group).unwrap_or(&true)
    }

    /// Names of learnable parameters in `group`, lexicographic order.
    pub fn group_names(&self, group: ParamGroup) -> Vec<String> {
        self.entries
            .iter()
            .filter(|(_, e)| e.group == group && e.kind == ParamKind::Learnable)
            .map(|(n, _)| n.clone())
            .collect()
    }

    /// FNV-1a hash over names and exact value bits of everything in `group`
    /// (buffers included), so any bitwise change is observable.
    pub fn group_fingerprint(&self, group: ParamGroup) -> u64 {
        let mut h = FNV_OFFSET;
        for (name, e) in &self.entries {
            if e.group != group {
                continue;
            }
            fnv1a_update(&mut h, name.as_bytes());
            for &v in e.data.iter() {
                fnv1a_update(&mut h, &v.to_f64().to_bits().to_le_bytes());
            }
        }
        h
    }

    pub fn fingerprint(&self) -> u64 {
        let mut h = FNV_OFFSET;
        for g in ParamGroup::ALL {
            fnv1a_update(&mut h, &self.group_fingerprint(g).to_le_bytes());
        }
        h
    }
}

/// Accumulated parameter gradients keyed by parameter name.
#[derive(Debug, Clone)]
pub struct GradStore<E> {
    grads: BTreeMap<String, ArrayD<E>>,
}

impl<E: Elem> Default for GradStore<E> {
    fn default() -> Self {
        Self::new()
    }
}

impl<E: Elem> GradStore<E> {
    pub fn new() -> Self {
        Self { grads: BTreeMap::new() }
    }

    /// Adds `grad` into the slot for `name` (element-wise if present).
    pub fn accumulate(&mut self, name: &str, grad: ArrayD<E>) {
        match self.grads.get_mut(name) {
            Some(existing) => {
                assert_eq!(existing.shape(), grad.shape(), "gradient shape changed for '{name}'");
                *existing += &grad;
            }
            None => {
                self.grads.insert(name.to_string(), grad);
            }
        }
    }

    pub fn get(&self, name: &str) -> Option<&ArrayD<E>> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ArrayD<E>)> {
        self.grads.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.grads.keys()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn clear(&mut self) {
        self.grads.clear();
    }
}

pub const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x1000_0000_01b3;

pub fn fnv1a_update(hash: &mut u64, bytes: &[u8]) {
    for &b in bytes {
        *hash ^= b as u64;
        *hash = hash.wrapping_mul(FNV_PRIME);
    }
}

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET;
    fnv1a_update(&mut h, bytes);
    h
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_specs() -> Vec<ParamSpec> {
        vec![
            ParamSpec {
                name: "enc.w".into(),
                group: ParamGroup::Encoder,
                kind: ParamKind::Learnable,
                shape: vec![4, 3],
                init: InitRule::FanInNormal { fan_in: 3 },
            },
            ParamSpec {
                name: "enc.b".into(),
                group: ParamGroup::Encoder,
                kind: ParamKind::Buffer,
                shape: vec![4],
                init: InitRule::Ones,
            },
            ParamSpec {
                name: "attn.w".into(),
                group: ParamGroup::Attention,
                kind: ParamKind::Learnable,
                shape: vec![2, 2],
                init: InitRule::Zeros,
            },
        ]
    }

    #[test]
    fn materialize_is_seed_deterministic_across_elem_types() {
        let specs = toy_specs();
        let a: ParamStore<f32> = materialize(&specs, &mut ChaCha20Rng::seed_from_u64(7));
        let b: ParamStore<f32> = materialize(&specs, &mut ChaCha20Rng::seed_from_u64(7));
        let c: ParamStore<f64> = materialize(&specs, &mut ChaCha20Rng::seed_from_u64(7));
        assert_eq!(a.fingerprint(), b.fingerprint());
        for (name, e) in a.iter() {
            let wide = c.get(name);
            for (x, y) in e.data.iter().zip(wide.iter()) {
                assert_eq!(x.to_f64() as f32, *y as f32, "{name} differs across elem types");
            }
        }

        let d: ParamStore<f32> = materialize(&specs, &mut ChaCha20Rng::seed_from_u64(8));
        assert_ne!(a.fingerprint(), d.fingerprint());
    }

    #[test]
    fn fingerprint_sees_single_bit_changes() {
        let specs = toy_specs();
        let mut store: ParamStore<f32> = materialize(&specs, &mut ChaCha20Rng::seed_from_u64(1));
        let before = store.group_fingerprint(ParamGroup::Encoder);
        let attn_before = store.group_fingerprint(ParamGroup::Attention);

        let w = store.get_mut("enc.w");
        let old = w[[0, 0]];
        w[[0, 0]] = f32::from_bits(old.to_bits() ^ 1);
        assert_ne!(store.group_fingerprint(ParamGroup::Encoder), before);
        assert_eq!(store.group_fingerprint(ParamGroup::Attention), attn_before);
    }

    #[test]
    fn grad_store_accumulates() {
        let mut g: GradStore<f64> = GradStore::new();
        g.accumulate("w", ArrayD::from_elem(IxDyn(&[2]), 1.5));
        g.accumulate("w", ArrayD::from_elem(IxDyn(&[2]), 0.5));
        let got = g.get("w").unwrap();
        assert!(got.iter().all(|&v| v == 2.0));
    }

    #[test]
    fn trainable_flags_default_on() {
        let store: ParamStore<f32> = ParamStore::new();
        for g in ParamGroup::ALL {
            assert!(store.is_trainable(g));
        }
    }
}

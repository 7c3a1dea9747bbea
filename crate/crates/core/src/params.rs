//! Named parameter tensors grouped by sub-network.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::graph::{Graph, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Encoder,
    Adapter,
    Decoder,
    Lora,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Encoder,
        ParamGroup::Adapter,
        ParamGroup::Decoder,
        ParamGroup::Lora,
        ParamGroup::Classifier,
    ];

    /// Parameters only needed while training; inference loaders may skip them.
    pub fn train_only(self) -> bool {
        self == ParamGroup::Classifier
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub value: Tensor,
    pub group: ParamGroup,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) {
        self.params.insert(name.into(), Param { value, group });
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.params.get(name)
    }

    /// Value of a parameter that must exist.
    pub fn value(&self, name: &str) -> &Tensor {
        &self
            .params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
            .value
    }

    pub fn value_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.params.get_mut(name).map(|p| &mut p.value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn remove_group(&mut self, group: ParamGroup) {
        self.params.retain(|_, p| p.group != group);
    }

    pub fn has_group(&self, group: ParamGroup) -> bool {
        self.params.values().any(|p| p.group == group)
    }

    /// Copies every parameter of `other` into `self`, replacing existing ones.
    pub fn merge_from(&mut self, other: &ParamStore) {
        for (k, p) in &other.params {
            self.params.insert(k.clone(), p.clone());
        }
    }

    pub fn num_scalars(&self, groups: &[ParamGroup]) -> usize {
        self.params
            .values()
            .filter(|p| groups.contains(&p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// SHA-256 over names, shapes and exact `f64` bits of one group.
    pub fn digest(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, p) in self.params.iter().filter(|(_, p)| p.group == group) {
            h.update(name.as_bytes());
            h.update((p.value.nrows() as u64).to_le_bytes());
            h.update((p.value.ncols() as u64).to_le_bytes());
            for v in p.value.iter() {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// SHA-256 over every group's digest, in group order.
    pub fn digest_all(&self) -> String {
        let mut h = Sha256::new();
        for (g, d) in self.digests() {
            h.update(format!("{g:?}:{d};").as_bytes());
        }
        hex::encode(h.finalize())
    }

    pub fn digests(&self) -> BTreeMap<ParamGroup, String> {
        ParamGroup::ALL
            .iter()
            .filter(|g| self.has_group(**g))
            .map(|g| (*g, self.digest(*g)))
            .collect()
    }

    /// Rounds every value through `f32`, matching what a checkpoint stores.
    pub fn round_to_f32(&mut self) {
        for p in self.params.values_mut() {
            p.value.mapv_inplace(|v| v as f32 as f64);
        }
    }
}

/// Lazily binds store parameters into a graph, once per name.
pub struct Bindings<'a> {
    store: &'a ParamStore,
    trainable: &'a BTreeSet<ParamGroup>,
    vars: HashMap<String, Var>,
}

impl<'a> Bindings<'a> {
    pub fn new(store: &'a ParamStore, trainable: &'a BTreeSet<ParamGroup>) -> Self {
        Bindings {
            store,
            trainable,
            vars: HashMap::new(),
        }
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn var(&mut self, g: &mut Graph, name: &str) -> Var {
        if let Some(v) = self.vars.get(name) {
            return *v;
        }
        let p = self
            .store
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        let v = g.leaf(p.value.clone(), self.trainable.contains(&p.group));
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Bound variables, for collecting gradients after backward.
    pub fn bound(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn into_vars(self) -> HashMap<String, Var> {
        self.vars
    }
}

/// Parameter initialisers, all driven by a caller-owned seeded RNG.
pub struct Init<'r> {
    pub rng: &'r mut ChaCha8Rng,
}

impl<'r> Init<'r> {
    pub fn uniform(&mut self, shape: (usize, usize), bound: f64) -> Tensor {
        Tensor::from_shape_fn(shape, |_| self.rng.random_range(-bound..=bound))
    }

    /// Uniform in `±1/sqrt(fan_in)` with `fan_in = rows`.
    pub fn linear(&mut self, rows: usize, cols: usize) -> Tensor {
        self.uniform((rows, cols), 1.0 / (rows as f64).sqrt())
    }

    pub fn normal(&mut self, shape: (usize, usize), std: f64) -> Tensor {
        use rand_distr::StandardNormal;
        Tensor::from_shape_fn(shape, |_| std * self.rng.sample::<f64, _>(StandardNormal))
    }
}

pub fn seeded_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Central-difference check of a scalar loss against analytic gradients for
/// `per_group` random coordinates of each listed group. `loss` builds the
/// graph from a store and returns it with the loss and the bound variables.
#[cfg(test)]
pub(crate) fn gradcheck_store<F>(
    store: &ParamStore,
    groups: &[ParamGroup],
    per_group: usize,
    seed: u64,
    loss: F,
) -> f64
where
    F: Fn(&ParamStore) -> (Graph, Var, HashMap<String, Var>),
{
    let (g, root, vars) = loss(store);
    let grads = g.backward(root);
    let mut rng = seeded_rng(seed);
    let h = 1e-6;
    let mut worst = 0.0f64;
    for group in groups {
        let names: Vec<&String> = store
            .iter()
            .filter(|(_, p)| p.group == *group)
            .map(|(n, _)| n)
            .collect();
        assert!(!names.is_empty(), "no parameters in {group:?}");
        for _ in 0..per_group {
            let name = names[rng.random_range(0..names.len())];
            let shape = store.value(name).dim();
            let (r, c) = (rng.random_range(0..shape.0), rng.random_range(0..shape.1));
            let analytic = vars
                .get(name)
                .and_then(|v| grads.get(*v))
                .map_or(0.0, |t| t[[r, c]]);
            let eval = |delta: f64| {
                let mut s = store.clone();
                s.value_mut(name).unwrap()[[r, c]] += delta;
                let (g, root, _) = loss(&s);
                g.scalar(root)
            };
            let numeric = (eval(h) - eval(-h)) / (2.0 * h);
            let err = (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-7);
            worst = worst.max(err);
        }
    }
    worst
}

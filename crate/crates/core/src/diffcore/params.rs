//! Named parameter storage partitioned into feature, word-predictor and
//! discriminator groups, plus the matching gradient buffer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Partition {
    /// theta_f: everything that produces word features.
    Feature,
    /// theta_w: the boundary, unified and opinion heads.
    WordPredictor,
    /// theta_d: the domain discriminator.
    Discriminator,
}

impl Partition {
    pub const ALL: [Partition; 3] = [
        Partition::Feature,
        Partition::WordPredictor,
        Partition::Discriminator,
    ];

    pub fn code(self) -> u8 {
        match self {
            Partition::Feature => 0,
            Partition::WordPredictor => 1,
            Partition::Discriminator => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Partition::ALL.get(code as usize).copied()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry<F> {
    pub name: String,
    pub value: Tensor<F>,
    pub partition: Partition,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<F> {
    entries: Vec<ParamEntry<F>>,
    index: BTreeMap<String, ParamId>,
}

impl<F: Real> ParamStore<F> {
    pub fn new() -> Self {
        ParamStore {
            entries: Vec::new(),
            index: BTreeMap::new(),
        }
    }

    pub fn add(&mut self, name: &str, value: Tensor<F>, partition: Partition) -> Result<ParamId> {
        self.insert(name, value, partition, true)
    }

    pub fn insert(
        &mut self,
        name: &str,
        value: Tensor<F>,
        partition: Partition,
        trainable: bool,
    ) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        let id = ParamId(self.entries.len());
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value,
            partition,
            trainable,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry<F> {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry<F>] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &Tensor<F> {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<F> {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn partition(&self, id: ParamId) -> Partition {
        self.entries[id.0].partition
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.entries[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.entries[id.0].trainable = trainable;
    }

    /// Trainable parameters whose partition is in `subset`, in registration order.
    pub fn select(&self, subset: &[Partition]) -> Vec<ParamId> {
        self.ids()
            .filter(|&id| self.is_trainable(id) && subset.contains(&self.partition(id)))
            .collect()
    }

    pub fn cast<G: Real>(&self) -> ParamStore<G> {
        ParamStore {
            entries: self
                .entries
                .iter()
                .map(|e| ParamEntry {
                    name: e.name.clone(),
                    value: e.value.cast(),
                    partition: e.partition,
                    trainable: e.trainable,
                })
                .collect(),
            index: self.index.clone(),
        }
    }
}

/// Per-parameter gradient slots aligned with a [`ParamStore`]. A slot that was
/// never allocated is "missing", which the optimizer treats as an error.
#[derive(Clone, Debug)]
pub struct Gradients<F> {
    slots: Vec<Option<Tensor<F>>>,
}

impl<F: Real> Gradients<F> {
    pub fn empty(store: &ParamStore<F>) -> Self {
        Gradients {
            slots: vec![None; store.len()],
        }
    }

    /// Zero-filled slots for every trainable member of `subset`.
    pub fn zeros_for(store: &ParamStore<F>, subset: &[Partition]) -> Self {
        let mut g = Self::empty(store);
        for id in store.select(subset) {
            g.slots[id.0] = Some(Tensor::zeros(store.value(id).shape()));
        }
        g
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.slots.get(id.0).and_then(|s| s.as_ref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<F>> {
        self.slots.get_mut(id.0).and_then(|s| s.as_mut())
    }

    pub fn accumulate(&mut self, store: &ParamStore<F>, id: ParamId, grad: &[F]) {
        let slot = &mut self.slots[id.0];
        match slot {
            Some(t) => super::tensor::add_into(grad, t.data_mut()),
            None => {
                let shape = store.value(id).shape().to_vec();
                *slot = Some(Tensor::new(shape, grad.to_vec()).expect("grad matches param shape"));
            }
        }
    }

    pub fn present(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.slots
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.as_ref().map(|t| (ParamId(i), t)))
    }

    /// l2 norm over every present slot, accumulated in 64-bit.
    pub fn global_norm(&self) -> f64 {
        self.present()
            .flat_map(|(_, t)| t.data().iter())
            .map(|x| x.f64() * x.f64())
            .sum::<f64>()
            .sqrt()
    }

    /// Multiply every entry by `factor`, rounding each product once.
    pub fn scale(&mut self, factor: f64) {
        for t in self.slots.iter_mut().flatten() {
            for x in t.data_mut() {
                *x = F::of(x.f64() * factor);
            }
        }
    }

    pub fn zero(&mut self, ids: &[ParamId]) {
        for id in ids {
            if let Some(t) = self.slots[id.0].as_mut() {
                t.data_mut().iter_mut().for_each(|x| *x = F::zero());
            }
        }
    }
}

/// Rescale every gradient so the global l2 norm is at most `max_norm`.
/// Returns the factor that was applied (1 when under the threshold).
pub fn clip_global_norm<F: Real>(grads: &mut Gradients<F>, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        let factor = max_norm / norm;
        grads.scale(factor);
        factor
    } else {
        1.0
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(vals: &[(&str, Vec<f64>)]) -> ParamStore<f64> {
        let mut s = ParamStore::new();
        for (n, v) in vals {
            s.add(n, Tensor::vector(v.clone()), Partition::Feature).unwrap();
        }
        s
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut s = store_with(&[("a", vec![1.0])]);
        assert!(matches!(
            s.add("a", Tensor::vector(vec![0.0]), Partition::Feature),
            Err(Error::DuplicateParam(_))
        ));
    }

    #[test]
    fn clip_scales_to_threshold() {
        let s = store_with(&[("a", vec![0.0, 0.0])]);
        let mut g = Gradients::empty(&s);
        g.accumulate(&s, ParamId(0), &[30.0, 40.0]);
        let f = clip_global_norm(&mut g, 40.0);
        assert!((f - 0.8).abs() < 1e-15);
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[24.0, 32.0]);
    }

    #[test]
    fn clip_factor_for_norm_80_and_10() {
        let s = store_with(&[("a", vec![0.0])]);
        let mut g = Gradients::empty(&s);
        g.accumulate(&s, ParamId(0), &[80.0]);
        assert_eq!(clip_global_norm(&mut g, 40.0), 0.5);
        let mut g = Gradients::empty(&s);
        g.accumulate(&s, ParamId(0), &[10.0]);
        assert_eq!(clip_global_norm(&mut g, 40.0), 1.0);
        assert_eq!(g.get(ParamId(0)).unwrap().data(), &[10.0]);
    }

    #[test]
    fn select_skips_frozen_and_other_partitions() {
        let mut s = ParamStore::<f32>::new();
        s.add("f", Tensor::zeros(&[1]), Partition::Feature).unwrap();
        s.insert("e", Tensor::zeros(&[1]), Partition::Feature, false).unwrap();
        s.add("d", Tensor::zeros(&[1]), Partition::Discriminator).unwrap();
        assert_eq!(s.select(&[Partition::Feature]), vec![ParamId(0)]);
        assert_eq!(s.select(&Partition::ALL), vec![ParamId(0), ParamId(2)]);
    }
}

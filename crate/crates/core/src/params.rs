//! Named learnable parameters and normalization running statistics.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::prng::Prng;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StatsId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Running mean/variance of one normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub name: String,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// A pending running-statistics update recorded during a training forward pass.
#[derive(Clone, Debug)]
pub struct StatsUpdate {
    pub id: StatsId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

pub const BN_MOMENTUM: f64 = 0.1;

/// The full parameter set of a model, keyed by hierarchical names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, ParamId>,
    stats: Vec<RunningStats>,
    stats_index: HashMap<String, StatsId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: &str, value: Tensor) -> Result<ParamId> {
        if self.index.contains_key(name) {
            return Err(Error::config(format!("duplicate parameter name {name}")));
        }
        let id = ParamId(self.params.len());
        self.params.push(Parameter {
            name: name.to_string(),
            value,
            trainable: true,
        });
        self.index.insert(name.to_string(), id);
        Ok(id)
    }

    /// Weight drawn from `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`.
    pub fn add_uniform(&mut self, name: &str, shape: &[usize], fan_in: usize, rng: &mut Prng) -> Result<ParamId> {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let t = Tensor::from_fn(shape, |_| rng.uniform(-bound, bound));
        self.add(name, t)
    }

    pub fn add_stats(&mut self, name: &str, channels: usize) -> Result<StatsId> {
        if self.stats_index.contains_key(name) {
            return Err(Error::config(format!("duplicate statistics name {name}")));
        }
        let id = StatsId(self.stats.len());
        self.stats.push(RunningStats {
            name: name.to_string(),
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
        });
        self.stats_index.insert(name.to_string(), id);
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.id(name).map(|id| &mut self.params[id.0])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn stats(&self, id: StatsId) -> &RunningStats {
        &self.stats[id.0]
    }

    pub fn all_stats(&self) -> &[RunningStats] {
        &self.stats
    }

    pub fn stats_by_name_mut(&mut self, name: &str) -> Option<&mut RunningStats> {
        self.stats_index.get(name).map(|id| &mut self.stats[id.0])
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) {
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
        }
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Exponential-moving-average update with momentum [`BN_MOMENTUM`].
    pub fn apply_stats_updates(&mut self, updates: &[StatsUpdate]) {
        for u in updates {
            let s = &mut self.stats[u.id.0];
            for (r, m) in s.mean.iter_mut().zip(&u.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            for (r, v) in s.var.iter_mut().zip(&u.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_are_unique() {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::zeros(&[2])).unwrap();
        assert!(s.add("a.w", Tensor::zeros(&[2])).is_err());
        assert!(s.add_stats("a.bn", 2).is_ok());
        assert!(s.add_stats("a.bn", 2).is_err());
    }

    #[test]
    fn uniform_init_respects_fan_in_bound() {
        let mut s = ParamStore::new();
        let mut rng = Prng::new(1);
        let id = s.add_uniform("w", &[8, 4, 3, 3], 36, &mut rng).unwrap();
        let bound = 1.0 / 6.0;
        assert!(s.value(id).data().iter().all(|v| v.abs() <= bound));
    }

    #[test]
    fn running_stats_momentum() {
        let mut s = ParamStore::new();
        let id = s.add_stats("bn", 1).unwrap();
        s.apply_stats_updates(&[StatsUpdate { id, mean: vec![1.0], var: vec![3.0] }]);
        assert!((s.stats(id).mean[0] - 0.1).abs() < 1e-15);
        assert!((s.stats(id).var[0] - 1.2).abs() < 1e-15);
    }
}

//! Parameter storage: a built model is the static graph plus one tensor
//! per parameter spec and a trainability mask driven by the freeze
//! schedule.

use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::config::ModelConfig;
use crate::network::graph::{build_graph, Graph, Init};
use crate::tensor::Tensor;

#[derive(Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub graph: Graph,
    params: Vec<Tensor<f32>>,
    trainable: Vec<bool>,
    name_index: HashMap<String, usize>,
}

impl Model {
    /// Builds the network and initializes parameters deterministically
    /// from the seed (He-uniform for conv weights, zeros/ones for affine
    /// and running statistics).
    pub fn build(config: ModelConfig, seed: u64) -> Result<Model> {
        let graph = build_graph(&config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::with_capacity(graph.params.len());
        for spec in &graph.params {
            let t = match spec.init {
                Init::Zeros => Tensor::zeros(spec.dims),
                Init::Ones => Tensor::full(spec.dims, 1.0),
                Init::HeUniform => {
                    let fan_in = (spec.dims[1] * spec.dims[2] * spec.dims[3]).max(1);
                    let bound = (6.0 / fan_in as f64).sqrt() as f32;
                    Tensor::from_fn(spec.dims, |_, _, _, _| rng.gen_range(-bound..bound))
                }
            };
            params.push(t);
        }
        let trainable = graph.params.iter().map(|p| p.trainable).collect();
        let name_index = graph
            .params
            .iter()
            .enumerate()
            .map(|(i, p)| (p.name.clone(), i))
            .collect();
        Ok(Model {
            config,
            graph,
            params,
            trainable,
            name_index,
        })
    }

    pub fn params(&self) -> &[Tensor<f32>] {
        &self.params
    }

    pub fn param(&self, i: usize) -> &Tensor<f32> {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Tensor<f32> {
        &mut self.params[i]
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.name_index.get(name).copied()
    }

    /// Replaces a parameter by name, validating the shape. Used by
    /// checkpoint loading.
    pub fn set_param(&mut self, name: &str, value: Tensor<f32>) -> Result<()> {
        let i = self
            .param_index(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown tensor '{name}'")))?;
        if value.dims() != self.graph.params[i].dims {
            return Err(Error::Checkpoint(format!(
                "tensor '{name}' has dims {:?}, expected {:?}",
                value.dims(),
                self.graph.params[i].dims
            )));
        }
        self.params[i] = value;
        Ok(())
    }

    /// Total scalar parameter count, including batchnorm running
    /// statistics (they are serialized, so they count toward model size).
    pub fn total_params(&self) -> usize {
        self.graph.params.iter().map(|p| p.numel()).sum()
    }

    pub fn is_trainable(&self, i: usize) -> bool {
        self.trainable[i]
    }

    pub fn trainable_mask(&self) -> &[bool] {
        &self.trainable
    }

    /// Marks every spec-trainable parameter trainable again (running
    /// statistics stay non-trainable regardless).
    pub fn unfreeze_all(&mut self) {
        for (t, spec) in self.trainable.iter_mut().zip(&self.graph.params) {
            *t = spec.trainable;
        }
    }

    /// Freezes every parameter whose name starts with the prefix.
    pub fn freeze_prefix(&mut self, prefix: &str) {
        for (t, spec) in self.trainable.iter_mut().zip(&self.graph.params) {
            if spec.name.starts_with(prefix) {
                *t = false;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::config::BackboneKind;

    #[test]
    fn same_seed_builds_bitwise_identical_models() {
        let a = Model::build(ModelConfig::default(), 7).unwrap();
        let b = Model::build(ModelConfig::default(), 7).unwrap();
        for (x, y) in a.params().iter().zip(b.params()) {
            assert_eq!(x.data(), y.data());
        }
        let c = Model::build(ModelConfig::default(), 8).unwrap();
        assert!(a
            .params()
            .iter()
            .zip(c.params())
            .any(|(x, y)| x.data() != y.data()));
    }

    #[test]
    fn init_is_finite_and_he_bounded() {
        let m = Model::build(ModelConfig::with_backbone(BackboneKind::Resnet50), 1).unwrap();
        for (spec, t) in m.graph.params.iter().zip(m.params()) {
            assert!(t.all_finite(), "{} has non-finite init", spec.name);
            if spec.init == Init::HeUniform {
                let fan_in = (spec.dims[1] * spec.dims[2] * spec.dims[3]) as f64;
                let bound = (6.0 / fan_in).sqrt() as f32;
                assert!(t.data().iter().all(|v| v.abs() <= bound));
            }
        }
    }

    #[test]
    fn freeze_prefix_only_hits_that_prefix() {
        let mut m = Model::build(ModelConfig::default(), 1).unwrap();
        m.freeze_prefix("seg.");
        for (i, spec) in m.graph.params.iter().enumerate() {
            if spec.name.starts_with("seg.") {
                assert!(!m.is_trainable(i));
            } else {
                assert_eq!(m.is_trainable(i), spec.trainable);
            }
        }
        m.unfreeze_all();
        for (i, spec) in m.graph.params.iter().enumerate() {
            assert_eq!(m.is_trainable(i), spec.trainable);
        }
    }

    #[test]
    fn set_param_validates_name_and_shape() {
        let mut m = Model::build(ModelConfig::default(), 1).unwrap();
        assert!(m.set_param("nope", Tensor::zeros([1, 1, 1, 1])).is_err());
        let name = m.graph.params[0].name.clone();
        assert!(m.set_param(&name, Tensor::zeros([1, 1, 1, 7])).is_err());
    }
}

//! Built-in models with hand-derived gradients, SGD, and the client-side
//! training and evaluation loops.
//!
//! Both model kinds are stacks of dense layers named `layer{i}.weight`
//! (`[out, in]`) and `layer{i}.bias` (`[out]`). Hidden layers are rectified;
//! the last layer emits raw outputs. Activations are stored as `f32` between
//! layers and every dot product accumulates in `f64`, so composing two halves
//! of a split model reproduces the unsplit computation bit for bit.

mod network;
mod optim;
mod split;
mod train;

pub use network::{forward, loss_and_grad, predict};
pub use optim::{sgd_step, OptimizerSettings, OptimizerState};
pub use split::{
    activation_bytes, back_forward_backward, front_backward, front_forward, split_forward_backward, split_model, SplitGrads,
};
pub use train::{batch_order, evaluate, local_train, Evaluation, TrainOutcome};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::LossKind;
use crate::params::{Block, ParamError, ParameterSet};

#[derive(Debug, Error, PartialEq)]
pub enum LearnerError {
    #[error("parameters do not match the model: {0}")]
    Shape(String),
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("empty batch or dataset")]
    Empty,
    #[error("split layer {split} invalid for a {layers}-layer model")]
    InvalidSplit { split: usize, layers: usize },
    #[error("proximal anchor must be present iff mu > 0 and match the parameters")]
    Anchor,
    #[error("invalid model spec: {0}")]
    Spec(String),
    #[error(transparent)]
    Param(#[from] ParamError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    LinearSoftmax,
    Mlp,
}

/// Architecture of a built-in model; `layer_widths` runs input to output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub layer_widths: Vec<usize>,
}

impl ModelSpec {
    pub fn linear(inputs: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::LinearSoftmax,
            layer_widths: vec![inputs, classes],
        }
    }

    pub fn mlp(inputs: usize, hidden: &[usize], classes: usize) -> Self {
        let mut layer_widths = vec![inputs];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(classes);
        Self {
            kind: ModelKind::Mlp,
            layer_widths,
        }
    }

    pub fn validate(&self) -> Result<(), LearnerError> {
        if self.layer_widths.contains(&0) {
            return Err(LearnerError::Spec("zero-width layer".into()));
        }
        match self.kind {
            ModelKind::LinearSoftmax if self.layer_widths.len() != 2 => {
                Err(LearnerError::Spec("linear model maps inputs straight to classes".into()))
            }
            ModelKind::Mlp if self.layer_widths.len() < 3 => Err(LearnerError::Spec("mlp needs a hidden layer".into())),
            _ => Ok(()),
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_widths.len() - 1
    }

    pub fn num_inputs(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn num_classes(&self) -> usize {
        *self.layer_widths.last().expect("validated spec")
    }

    pub fn weight_name(layer: usize) -> String {
        format!("layer{layer}.weight")
    }

    pub fn bias_name(layer: usize) -> String {
        format!("layer{layer}.bias")
    }

    /// Block names of the given layers, weight before bias.
    pub fn block_names(&self, layers: std::ops::Range<usize>) -> Vec<String> {
        layers.flat_map(|l| [Self::weight_name(l), Self::bias_name(l)]).collect()
    }

    /// Zero-filled parameters with this architecture's layout.
    pub fn zeros(&self) -> ParameterSet {
        let blocks = (0..self.num_layers())
            .flat_map(|l| {
                let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
                [Block::zeros(Self::weight_name(l), vec![o, i]), Block::zeros(Self::bias_name(l), vec![o])]
            })
            .collect();
        ParameterSet::new(blocks).expect("generated names are unique")
    }

    /// Weights uniform in `±sqrt(6 / (fan_in + fan_out))`, biases zero.
    pub fn init(&self, seed: u64) -> ParameterSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = self.zeros();
        for l in 0..self.num_layers() {
            let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
            let bound = (6.0 / (i + o) as f64).sqrt() as f32;
            let w = p.block_mut(&Self::weight_name(l)).expect("layout");
            for v in w.values_mut() {
                *v = rng.random_range(-bound..bound);
            }
        }
        p
    }

    pub fn check_params(&self, params: &ParameterSet) -> Result<(), LearnerError> {
        let blocks = params.blocks();
        let layout_ok = blocks.len() == 2 * self.num_layers()
            && (0..self.num_layers()).all(|l| {
                let (i, o) = (self.layer_widths[l], self.layer_widths[l + 1]);
                let (w, b) = (&blocks[2 * l], &blocks[2 * l + 1]);
                w.name() == Self::weight_name(l) && w.shape() == [o, i] && b.name() == Self::bias_name(l) && b.shape() == [o]
            });
        if layout_ok {
            Ok(())
        } else {
            Err(LearnerError::Shape("parameter layout differs from the model spec".into()))
        }
    }
}

/// Client objective: task loss plus an optional proximal penalty
/// `mu/2 * ||w - anchor||^2`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalObjective {
    pub loss: LossKind,
    pub proximal_mu: f64,
    pub anchor: Option<ParameterSet>,
}

impl LocalObjective {
    pub fn cross_entropy() -> Self {
        Self {
            loss: LossKind::CrossEntropy,
            proximal_mu: 0.0,
            anchor: None,
        }
    }

    pub fn new(loss: LossKind, proximal_mu: f64, anchor: Option<ParameterSet>) -> Result<Self, LearnerError> {
        if (proximal_mu > 0.0) != anchor.is_some() || proximal_mu < 0.0 {
            return Err(LearnerError::Anchor);
        }
        Ok(Self {
            loss,
            proximal_mu,
            anchor,
        })
    }

    /// Objective anchored at `global` when `mu > 0`.
    pub fn anchored(loss: LossKind, proximal_mu: f64, global: &ParameterSet) -> Self {
        Self {
            loss,
            proximal_mu,
            anchor: (proximal_mu > 0.0).then(|| global.clone()),
        }
    }

    fn check(&self, params: &ParameterSet) -> Result<(), LearnerError> {
        match (&self.anchor, self.proximal_mu > 0.0) {
            (None, false) => Ok(()),
            (Some(a), true) if a.congruent(params) => Ok(()),
            _ => Err(LearnerError::Anchor),
        }
    }

    /// Restricts the anchor to the named blocks.
    pub(crate) fn restricted(&self, names: &[String]) -> Result<LocalObjective, LearnerError> {
        Ok(LocalObjective {
            loss: self.loss,
            proximal_mu: self.proximal_mu,
            anchor: self.anchor.as_ref().map(|a| a.select(names)).transpose()?,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(ModelSpec::linear(4, 3).validate().is_ok());
        assert!(ModelSpec::mlp(4, &[5], 3).validate().is_ok());
        let bad = ModelSpec {
            kind: ModelKind::Mlp,
            layer_widths: vec![4, 3],
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = ModelSpec::mlp(4, &[6], 3);
        let a = spec.init(1);
        assert_eq!(a, spec.init(1));
        assert_ne!(a, spec.init(2));
        let bound = (6.0f32 / 10.0).sqrt();
        assert!(a.block("layer0.weight").unwrap().values().iter().all(|v| v.abs() <= bound));
        assert!(a.block("layer0.bias").unwrap().values().iter().all(|&v| v == 0.0));
        spec.check_params(&a).unwrap();
    }

    #[test]
    fn objective_anchor_rules() {
        let p = ModelSpec::linear(2, 2).zeros();
        assert!(LocalObjective::new(LossKind::CrossEntropy, 0.1, None).is_err());
        assert!(LocalObjective::new(LossKind::CrossEntropy, 0.0, Some(p.clone())).is_err());
        assert!(LocalObjective::new(LossKind::CrossEntropy, 0.1, Some(p)).is_ok());
    }
}

//! Split execution: the client runs layers `[0, split)`, the server runs
//! `[split, L)`, and only cut-layer activations and their gradients cross.

use super::network::{add_proximal, output_loss, Segment};
use super::{LearnerError, LocalObjective, ModelSpec};
use crate::data::Samples;
use crate::params::ParameterSet;

fn check_split(spec: &ModelSpec, split: usize) -> Result<(), LearnerError> {
    if split == 0 || split >= spec.num_layers() {
        return Err(LearnerError::InvalidSplit {
            split,
            layers: spec.num_layers(),
        });
    }
    Ok(())
}

/// `(front, back)` block sets; front holds layers below `split`.
pub fn split_model(spec: &ModelSpec, params: &ParameterSet, split: usize) -> Result<(ParameterSet, ParameterSet), LearnerError> {
    check_split(spec, split)?;
    spec.check_params(params)?;
    let front = params.select(&spec.block_names(0..split))?;
    let back = params.select(&spec.block_names(split..spec.num_layers()))?;
    Ok((front, back))
}

/// Bytes of `f32` activations crossing the cut for one batch.
pub fn activation_bytes(spec: &ModelSpec, split: usize, batch: usize) -> usize {
    batch * spec.layer_widths[split] * std::mem::size_of::<f32>()
}

fn check_half(spec: &ModelSpec, params: &ParameterSet, layers: std::ops::Range<usize>) -> Result<(), LearnerError> {
    let names = spec.block_names(layers);
    if params.blocks().len() != names.len() || params.names().zip(&names).any(|(a, b)| a != b) {
        return Err(LearnerError::Shape("half-model blocks do not match the split".into()));
    }
    Ok(())
}

/// Client side: cut-layer activations, `batch x width(split)`.
pub fn front_forward(spec: &ModelSpec, split: usize, front: &ParameterSet, features: &[f32]) -> Result<Vec<f32>, LearnerError> {
    check_split(spec, split)?;
    check_half(spec, front, 0..split)?;
    let batch = features.len() / spec.num_inputs();
    let seg = Segment {
        spec,
        params: front,
        layers: 0..split,
    };
    Ok(seg.forward(features, batch)?.pop().expect("split >= 1"))
}

/// Server side: loss, back-half gradient, and the gradient with respect to
/// the received activations.
pub fn back_forward_backward(
    spec: &ModelSpec,
    split: usize,
    back: &ParameterSet,
    activations: &[f32],
    labels: &[usize],
    objective: &LocalObjective,
) -> Result<(f64, ParameterSet, Vec<f32>), LearnerError> {
    check_split(spec, split)?;
    check_half(spec, back, split..spec.num_layers())?;
    let batch = labels.len();
    if batch == 0 {
        return Err(LearnerError::Empty);
    }
    if activations.len() != batch * spec.layer_widths[split] {
        return Err(LearnerError::Shape("activation shape mismatch at the cut".into()));
    }
    let seg = Segment {
        spec,
        params: back,
        layers: split..spec.num_layers(),
    };
    let outs = seg.forward(activations, batch)?;
    let (loss, grad_out) = output_loss(objective.loss, outs.last().expect("layers"), labels, spec.num_classes())?;
    let (blocks, grad_acts) = seg.backward(activations, &outs, grad_out, batch)?;
    let mut grad = ParameterSet::new(blocks)?;
    let prox = add_proximal(&objective.restricted(&spec.block_names(split..spec.num_layers()))?, back, &mut grad)?;
    Ok((loss + prox, grad, grad_acts))
}

/// Client side: front-half gradient from the activation gradient.
pub fn front_backward(
    spec: &ModelSpec,
    split: usize,
    front: &ParameterSet,
    features: &[f32],
    grad_activations: Vec<f32>,
    objective: &LocalObjective,
) -> Result<(f64, ParameterSet), LearnerError> {
    check_split(spec, split)?;
    check_half(spec, front, 0..split)?;
    let batch = features.len() / spec.num_inputs();
    if grad_activations.len() != batch * spec.layer_widths[split] {
        return Err(LearnerError::Shape("activation gradient shape mismatch at the cut".into()));
    }
    let seg = Segment {
        spec,
        params: front,
        layers: 0..split,
    };
    let outs = seg.forward(features, batch)?;
    let (blocks, _) = seg.backward(features, &outs, grad_activations, batch)?;
    let mut grad = ParameterSet::new(blocks)?;
    let prox = add_proximal(&objective.restricted(&spec.block_names(0..split))?, front, &mut grad)?;
    Ok((prox, grad))
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitGrads {
    pub loss: f64,
    pub grad_front: ParameterSet,
    pub grad_back: ParameterSet,
    pub activation_bytes: usize,
}

/// Front forward, back forward and backward, then front backward.
pub fn split_forward_backward(
    spec: &ModelSpec,
    split: usize,
    front: &ParameterSet,
    back: &ParameterSet,
    batch: &Samples,
    objective: &LocalObjective,
) -> Result<SplitGrads, LearnerError> {
    let acts = front_forward(spec, split, front, &batch.features)?;
    let (back_loss, grad_back, grad_acts) = back_forward_backward(spec, split, back, &acts, &batch.labels, objective)?;
    let (front_prox, grad_front) = front_backward(spec, split, front, &batch.features, grad_acts, objective)?;
    Ok(SplitGrads {
        loss: back_loss + front_prox,
        grad_front,
        grad_back,
        activation_bytes: acts.len() * std::mem::size_of::<f32>(),
    })
}

use std::ops::Range;

use super::{LearnerError, LocalObjective, ModelSpec};
use crate::config::LossKind;
use crate::data::Samples;
use crate::params::{Block, ParameterSet};

/// A contiguous run of dense layers evaluated against one parameter set.
pub(crate) struct Segment<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a ParameterSet,
    pub layers: Range<usize>,
}

impl Segment<'_> {
    fn is_output_layer(&self, l: usize) -> bool {
        l + 1 == self.spec.num_layers()
    }

    fn weights(&self, l: usize) -> Result<(&[f32], &[f32]), LearnerError> {
        let w = self
            .params
            .block(&ModelSpec::weight_name(l))
            .ok_or_else(|| LearnerError::Shape(format!("missing layer {l} weight")))?;
        let b = self
            .params
            .block(&ModelSpec::bias_name(l))
            .ok_or_else(|| LearnerError::Shape(format!("missing layer {l} bias")))?;
        let (i, o) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
        if w.shape() != [o, i] || b.shape() != [o] {
            return Err(LearnerError::Shape(format!("layer {l} has the wrong shape")));
        }
        Ok((w.values(), b.values()))
    }

    /// Outputs of every layer in the segment, post-activation.
    pub fn forward(&self, input: &[f32], batch: usize) -> Result<Vec<Vec<f32>>, LearnerError> {
        let in_width = self.spec.layer_widths[self.layers.start];
        if input.len() != batch * in_width {
            return Err(LearnerError::Shape(format!(
                "input has {} values, expected {batch} x {in_width}",
                input.len()
            )));
        }
        let mut outs: Vec<Vec<f32>> = Vec::with_capacity(self.layers.len());
        for l in self.layers.clone() {
            let (w, b) = self.weights(l)?;
            let (ni, no) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            let prev: &[f32] = outs.last().map_or(input, Vec::as_slice);
            let rectify = !self.is_output_layer(l);
            let mut out = vec![0f32; batch * no];
            for r in 0..batch {
                let x = &prev[r * ni..(r + 1) * ni];
                for o in 0..no {
                    let row = &w[o * ni..(o + 1) * ni];
                    let mut acc = f64::from(b[o]);
                    for (&wv, &xv) in row.iter().zip(x) {
                        acc += f64::from(wv) * f64::from(xv);
                    }
                    let z = acc as f32;
                    out[r * no + o] = if rectify { z.max(0.0) } else { z };
                }
            }
            outs.push(out);
        }
        Ok(outs)
    }

    /// Gradients of every block in the segment and of the segment input,
    /// given the gradient with respect to the segment output.
    pub fn backward(
        &self,
        input: &[f32],
        outs: &[Vec<f32>],
        grad_out: Vec<f32>,
        batch: usize,
    ) -> Result<(Vec<Block>, Vec<f32>), LearnerError> {
        let mut grad = grad_out;
        let mut blocks = Vec::with_capacity(2 * self.layers.len());
        for (k, l) in self.layers.clone().enumerate().rev() {
            let (w, _) = self.weights(l)?;
            let (ni, no) = (self.spec.layer_widths[l], self.spec.layer_widths[l + 1]);
            if !self.is_output_layer(l) {
                for (g, &a) in grad.iter_mut().zip(&outs[k]) {
                    if a <= 0.0 {
                        *g = 0.0;
                    }
                }
            }
            let prev: &[f32] = if k == 0 { input } else { &outs[k - 1] };
            let mut gw = vec![0f64; no * ni];
            let mut gb = vec![0f64; no];
            let mut gin = vec![0f32; batch * ni];
            for r in 0..batch {
                let x = &prev[r * ni..(r + 1) * ni];
                let dz = &grad[r * no..(r + 1) * no];
                for o in 0..no {
                    let d = f64::from(dz[o]);
                    gb[o] += d;
                    if d != 0.0 {
                        for (g, &xv) in gw[o * ni..(o + 1) * ni].iter_mut().zip(x) {
                            *g += d * f64::from(xv);
                        }
                    }
                }
                for i in 0..ni {
                    let mut acc = 0f64;
                    for o in 0..no {
                        acc += f64::from(w[o * ni + i]) * f64::from(dz[o]);
                    }
                    gin[r * ni + i] = acc as f32;
                }
            }
            blocks.push(Block::new(
                ModelSpec::bias_name(l),
                vec![no],
                gb.into_iter().map(|v| v as f32).collect(),
            )?);
            blocks.push(Block::new(
                ModelSpec::weight_name(l),
                vec![no, ni],
                gw.into_iter().map(|v| v as f32).collect(),
            )?);
            grad = gin;
        }
        blocks.reverse();
        Ok((blocks, grad))
    }
}

/// Batch-mean task loss and its gradient with respect to the model outputs.
pub(crate) fn output_loss(
    loss: LossKind,
    outputs: &[f32],
    labels: &[usize],
    classes: usize,
) -> Result<(f64, Vec<f32>), LearnerError> {
    let batch = labels.len();
    if batch == 0 {
        return Err(LearnerError::Empty);
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= classes) {
        return Err(LearnerError::LabelOutOfRange { label, classes });
    }
    let mut total = 0f64;
    let mut grad = vec![0f32; outputs.len()];
    let scale = 1.0 / batch as f64;
    for (r, &y) in labels.iter().enumerate() {
        let row = &outputs[r * classes..(r + 1) * classes];
        let g = &mut grad[r * classes..(r + 1) * classes];
        match loss {
            LossKind::CrossEntropy => {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
                let sum: f64 = row.iter().map(|&z| (f64::from(z) - max).exp()).sum();
                let log_norm = max + sum.ln();
                total += log_norm - f64::from(row[y]);
                for (k, (gk, &z)) in g.iter_mut().zip(row).enumerate() {
                    let p = (f64::from(z) - log_norm).exp();
                    let target = if k == y { 1.0 } else { 0.0 };
                    *gk = ((p - target) * scale) as f32;
                }
            }
            LossKind::Mse => {
                let per = 1.0 / classes as f64;
                for (k, (gk, &z)) in g.iter_mut().zip(row).enumerate() {
                    let target = if k == y { 1.0 } else { 0.0 };
                    let diff = f64::from(z) - target;
                    total += per * diff * diff;
                    *gk = (2.0 * per * diff * scale) as f32;
                }
            }
        }
    }
    Ok((total * scale, grad))
}

/// Adds `mu/2 ||w - anchor||^2` to the loss and `mu (w - anchor)` to `grad`.
pub(crate) fn add_proximal(
    objective: &LocalObjective,
    params: &ParameterSet,
    grad: &mut ParameterSet,
) -> Result<f64, LearnerError> {
    objective.check(params)?;
    let Some(anchor) = objective.anchor.as_ref() else {
        return Ok(0.0);
    };
    let mu = objective.proximal_mu;
    let mut penalty = 0f64;
    for ((p, a), g) in params.blocks().iter().zip(anchor.blocks()).zip(grad.blocks_mut()) {
        for ((&pv, &av), gv) in p.values().iter().zip(a.values()).zip(g.values_mut()) {
            let d = f64::from(pv) - f64::from(av);
            penalty += d * d;
            *gv = (f64::from(*gv) + mu * d) as f32;
        }
    }
    Ok(0.5 * mu * penalty)
}

/// Model outputs (logits for classifiers), `batch x classes`.
pub fn forward(spec: &ModelSpec, params: &ParameterSet, features: &[f32]) -> Result<Vec<f32>, LearnerError> {
    spec.check_params(params)?;
    let width = spec.num_inputs();
    if !features.len().is_multiple_of(width) {
        return Err(LearnerError::Shape(format!("feature width does not divide {} values", features.len())));
    }
    let seg = Segment {
        spec,
        params,
        layers: 0..spec.num_layers(),
    };
    let mut outs = seg.forward(features, features.len() / width)?;
    Ok(outs.pop().expect("at least one layer"))
}

/// Predicted class (ties to the lowest index) and its softmax probability.
pub fn predict(spec: &ModelSpec, params: &ParameterSet, features: &[f32]) -> Result<Vec<(usize, f64)>, LearnerError> {
    let logits = forward(spec, params, features)?;
    Ok(logits
        .chunks(spec.num_classes())
        .map(|row| {
            let mut best = 0;
            for (k, &z) in row.iter().enumerate() {
                if z > row[best] {
                    best = k;
                }
            }
            let max = f64::from(row[best]);
            let sum: f64 = row.iter().map(|&z| (f64::from(z) - max).exp()).sum();
            (best, 1.0 / sum)
        })
        .collect())
}

/// Batch-mean loss plus proximal term, and the gradient for every block.
pub fn loss_and_grad(
    objective: &LocalObjective,
    spec: &ModelSpec,
    params: &ParameterSet,
    batch: &Samples,
) -> Result<(f64, ParameterSet), LearnerError> {
    spec.check_params(params)?;
    if batch.is_empty() {
        return Err(LearnerError::Empty);
    }
    if batch.num_features != spec.num_inputs() {
        return Err(LearnerError::Shape("feature width mismatch".into()));
    }
    let n = batch.len();
    let seg = Segment {
        spec,
        params,
        layers: 0..spec.num_layers(),
    };
    let outs = seg.forward(&batch.features, n)?;
    let (loss, grad_out) = output_loss(objective.loss, outs.last().expect("layers"), &batch.labels, spec.num_classes())?;
    let (blocks, _) = seg.backward(&batch.features, &outs, grad_out, n)?;
    let mut grad = ParameterSet::new(blocks)?;
    let prox = add_proximal(objective, params, &mut grad)?;
    Ok((loss + prox, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::learner::ModelKind;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn samples(features: Vec<f32>, labels: Vec<usize>, width: usize) -> Samples {
        Samples {
            features,
            labels,
            num_features: width,
        }
    }

    #[test]
    fn zero_linear_model_is_uniform() {
        let spec = ModelSpec::linear(3, 4);
        let p = spec.zeros();
        let out = forward(&spec, &p, &[1.0, 2.0, 3.0, -1.0, 0.0, 5.0]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
        for (_, prob) in predict(&spec, &p, &[1.0, 2.0, 3.0]).unwrap() {
            assert!((prob - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn identity_mlp_rectifies_input() {
        let spec = ModelSpec::mlp(3, &[3], 3);
        let mut p = spec.zeros();
        for l in 0..2 {
            let w = p.block_mut(&ModelSpec::weight_name(l)).unwrap();
            for i in 0..3 {
                w.values_mut()[i * 3 + i] = 1.0;
            }
        }
        let x = [1.5, -2.0, 0.25, -0.5, 3.0, -1.0];
        let out = forward(&spec, &p, &x).unwrap();
        let expected: Vec<f32> = x.iter().map(|v| v.max(0.0)).collect();
        assert_eq!(out, expected);
    }

    /// Naive triple loop over f64 copies of the weights.
    fn naive_forward(spec: &ModelSpec, p: &ParameterSet, x: &[f32]) -> Vec<f64> {
        let batch = x.len() / spec.num_inputs();
        let mut act: Vec<Vec<f64>> = x.chunks(spec.num_inputs()).map(|r| r.iter().map(|&v| v as f64).collect()).collect();
        for l in 0..spec.num_layers() {
            let w = p.block(&ModelSpec::weight_name(l)).unwrap().values();
            let b = p.block(&ModelSpec::bias_name(l)).unwrap().values();
            let (ni, no) = (spec.layer_widths[l], spec.layer_widths[l + 1]);
            let mut next = vec![vec![0.0; no]; batch];
            for r in 0..batch {
                for o in 0..no {
                    let mut s = b[o] as f64;
                    for i in 0..ni {
                        s += w[o * ni + i] as f64 * act[r][i];
                    }
                    next[r][o] = if l + 1 < spec.num_layers() { s.max(0.0) } else { s };
                }
            }
            act = next;
        }
        act.into_iter().flatten().collect()
    }

    #[test]
    fn forward_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (i, spec) in [ModelSpec::linear(5, 3), ModelSpec::mlp(5, &[7, 4], 3)].iter().enumerate() {
            for seed in 0..10 {
                let p = spec.init(seed + 100 * i as u64);
                let x: Vec<f32> = (0..4 * 5).map(|_| rng.random_range(-2.0..2.0)).collect();
                let fast = forward(spec, &p, &x).unwrap();
                let slow = naive_forward(spec, &p, &x);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((*a as f64 - b).abs() < 1e-5, "{a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn forward_rejects_bad_shapes() {
        let spec = ModelSpec::linear(3, 2);
        assert!(forward(&spec, &spec.zeros(), &[1.0, 2.0]).is_err());
        assert!(forward(&spec, &ModelSpec::linear(2, 2).zeros(), &[1.0, 2.0, 3.0]).is_err());
    }

    #[test]
    fn uniform_prediction_loss_is_ln_c() {
        let spec = ModelSpec::linear(2, 5);
        let (loss, _) = loss_and_grad(
            &LocalObjective::cross_entropy(),
            &spec,
            &spec.zeros(),
            &samples(vec![1.0, 1.0, 0.0, 2.0], vec![0, 3], 2),
        )
        .unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn proximal_vanishes_at_anchor() {
        let spec = ModelSpec::mlp(2, &[3], 2);
        let p = spec.init(4);
        let batch = samples(vec![0.5, -1.0, 1.0, 2.0], vec![0, 1], 2);
        let plain = loss_and_grad(&LocalObjective::cross_entropy(), &spec, &p, &batch).unwrap();
        let prox = LocalObjective::new(LossKind::CrossEntropy, 0.7, Some(p.clone())).unwrap();
        let with = loss_and_grad(&prox, &spec, &p, &batch).unwrap();
        assert_eq!(plain, with);
    }

    #[test]
    fn label_out_of_range() {
        let spec = ModelSpec::linear(1, 2);
        let err = loss_and_grad(&LocalObjective::cross_entropy(), &spec, &spec.zeros(), &samples(vec![1.0], vec![2], 1));
        assert_eq!(err.unwrap_err(), LearnerError::LabelOutOfRange { label: 2, classes: 2 });
    }

    #[test]
    fn mse_loss_value() {
        let spec = ModelSpec::linear(1, 2);
        let (loss, _) = loss_and_grad(
            &LocalObjective {
                loss: LossKind::Mse,
                proximal_mu: 0.0,
                anchor: None,
            },
            &spec,
            &spec.zeros(),
            &samples(vec![1.0], vec![1], 1),
        )
        .unwrap();
        // outputs (0, 0) vs one-hot (0, 1): mean squared error 0.5
        assert!((loss - 0.5).abs() < 1e-12);
        assert_eq!(spec.kind, ModelKind::LinearSoftmax);
    }
}

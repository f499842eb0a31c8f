use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::network::{loss_and_grad, predict};
use super::{LearnerError, LocalObjective, ModelSpec, OptimizerSettings, OptimizerState};
use crate::data::Samples;
use crate::params::ParameterSet;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub params: ParameterSet,
    pub num_samples: usize,
    /// Sample-weighted mean loss of the last epoch.
    pub mean_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Evaluation {
    pub accuracy: f64,
    pub mean_loss: f64,
    pub num_samples: usize,
}

/// Seeded mini-batch index lists for every epoch; the last batch of an
/// epoch may be short.
pub fn batch_order(n: usize, batch_size: usize, epochs: usize, seed: u64) -> Vec<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    (0..epochs)
        .map(|_| {
            order.shuffle(&mut rng);
            order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
        })
        .collect()
}

/// Runs `epochs` passes of mini-batch SGD from a fresh optimizer state.
#[allow(clippy::too_many_arguments)]
pub fn local_train(
    spec: &ModelSpec,
    params: &ParameterSet,
    data: &Samples,
    objective: &LocalObjective,
    optimizer: OptimizerSettings,
    epochs: usize,
    batch_size: usize,
    seed: u64,
) -> Result<TrainOutcome, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::Empty);
    }
    let mut params = params.clone();
    if epochs == 0 {
        let (mean_loss, _) = loss_and_grad(objective, spec, &params, data)?;
        return Ok(TrainOutcome {
            params,
            num_samples: data.len(),
            mean_loss,
        });
    }
    let mut state = OptimizerState::new(optimizer, &params);
    let mut mean_loss = 0.0;
    for epoch in batch_order(data.len(), batch_size, epochs, seed) {
        let mut total = 0.0;
        for idx in epoch {
            let batch = data.select(&idx);
            let (loss, grad) = loss_and_grad(objective, spec, &params, &batch)?;
            total += loss * idx.len() as f64;
            state.step(&mut params, &grad)?;
        }
        mean_loss = total / data.len() as f64;
    }
    params.check_finite()?;
    Ok(TrainOutcome {
        params,
        num_samples: data.len(),
        mean_loss,
    })
}

/// Argmax accuracy (ties to the lowest class) and mean cross-entropy.
pub fn evaluate(spec: &ModelSpec, params: &ParameterSet, data: &Samples) -> Result<Evaluation, LearnerError> {
    if data.is_empty() {
        return Err(LearnerError::Empty);
    }
    let predictions = predict(spec, params, &data.features)?;
    let correct = predictions.iter().zip(&data.labels).filter(|((p, _), &y)| *p == y).count();
    let (mean_loss, _) = loss_and_grad(&LocalObjective::cross_entropy(), spec, params, data)?;
    Ok(Evaluation {
        accuracy: correct as f64 / data.len() as f64,
        mean_loss,
        num_samples: data.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_blobs;
    use crate::learner::forward;

    fn settings() -> OptimizerSettings {
        OptimizerSettings {
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }

    #[test]
    fn batches_cover_everything_once() {
        let epochs = batch_order(10, 3, 2, 1);
        for e in &epochs {
            assert_eq!(e.iter().map(Vec::len).collect::<Vec<_>>(), vec![3, 3, 3, 1]);
            let mut all: Vec<usize> = e.iter().flatten().copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..10).collect::<Vec<_>>());
        }
    }

    #[test]
    fn zero_epochs_is_noop() {
        let (d, _) = generate_blobs(2, 10, 2, 1, 0);
        let spec = ModelSpec::linear(2, 2);
        let p = spec.init(0);
        let out = local_train(&spec, &p, &d.all_samples(), &LocalObjective::cross_entropy(), settings(), 0, 4, 0).unwrap();
        assert_eq!(out.params, p);
        assert_eq!(out.num_samples, 20);
        let eval = evaluate(&spec, &p, &d.all_samples()).unwrap();
        assert!((out.mean_loss - eval.mean_loss).abs() < 1e-12);
    }

    #[test]
    fn separable_blobs_are_learned() {
        let mut blobs = crate::data::BlobSpec::new(2, 100, 2, 1, 3);
        blobs.class_separation = 12.0;
        let (d, _) = crate::data::generate(&blobs);
        let spec = ModelSpec::mlp(2, &[8], 2);
        let data = d.all_samples();
        let out =
            local_train(&spec, &spec.init(1), &data, &LocalObjective::cross_entropy(), settings(), 5, 32, 2).unwrap();
        assert_eq!(out.num_samples, 200);
        let acc = evaluate(&spec, &out.params, &data).unwrap().accuracy;
        assert!(acc >= 0.95, "{acc}");
    }

    #[test]
    fn training_is_deterministic() {
        let (d, _) = generate_blobs(3, 30, 4, 1, 3);
        let spec = ModelSpec::mlp(4, &[6], 3);
        let run = |seed| {
            local_train(&spec, &spec.init(0), &d.all_samples(), &LocalObjective::cross_entropy(), settings(), 2, 7, seed)
                .unwrap()
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5).params, run(6).params);
    }

    #[test]
    fn empty_data_rejected() {
        let spec = ModelSpec::linear(2, 2);
        let empty = Samples {
            num_features: 2,
            ..Samples::default()
        };
        assert_eq!(
            local_train(&spec, &spec.zeros(), &empty, &LocalObjective::cross_entropy(), settings(), 1, 1, 0),
            Err(LearnerError::Empty)
        );
        assert_eq!(evaluate(&spec, &spec.zeros(), &empty), Err(LearnerError::Empty));
    }

    #[test]
    fn zero_model_accuracy_is_class_zero_frequency() {
        let (d, _) = generate_blobs(4, 10, 2, 1, 0);
        let keep: Vec<usize> = (0..40).filter(|i| i % 3 != 0 || *i < 10).collect();
        let data = d.all_samples().select(&keep);
        let spec = ModelSpec::linear(2, 4);
        let eval = evaluate(&spec, &spec.zeros(), &data).unwrap();
        let zeros = data.labels.iter().filter(|&&y| y == 0).count() as f64 / data.len() as f64;
        assert_eq!(eval.accuracy, zeros);
    }

    #[test]
    fn accuracy_matches_per_sample_oracle() {
        let (d, _) = generate_blobs(3, 40, 3, 1, 8);
        let spec = ModelSpec::mlp(3, &[5], 3);
        let p = spec.init(9);
        let data = d.all_samples();
        let logits = forward(&spec, &p, &data.features).unwrap();
        let mut correct = 0;
        for (i, row) in logits.chunks(3).enumerate() {
            let mut best = 0;
            for k in 1..3 {
                if row[k] > row[best] {
                    best = k;
                }
            }
            correct += usize::from(best == data.labels[i]);
        }
        assert_eq!(evaluate(&spec, &p, &data).unwrap().accuracy, correct as f64 / data.len() as f64);
    }

    #[test]
    fn perfect_labels_give_full_accuracy() {
        let (d, _) = generate_blobs(3, 20, 3, 1, 8);
        let spec = ModelSpec::mlp(3, &[5], 3);
        let p = spec.init(9);
        let mut data = d.all_samples();
        data.labels = predict(&spec, &p, &data.features).unwrap().into_iter().map(|(c, _)| c).collect();
        assert_eq!(evaluate(&spec, &p, &data).unwrap().accuracy, 1.0);
    }
}

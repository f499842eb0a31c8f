use thiserror::Error;

use crate::data::{js_divergence, normalize, DataError};

#[derive(Debug, Error, PartialEq)]
pub enum ScheduleError {
    #[error("schedule has no tasks")]
    Empty,
    #[error("task {0} has no labels")]
    EmptyTask(usize),
    #[error("label {label} appears in tasks {first} and {second}")]
    Overlap { label: usize, first: usize, second: usize },
    #[error("label {label} out of range for {classes} classes")]
    OutOfRange { label: usize, classes: usize },
    #[error("tasks need at least one round")]
    ZeroRounds,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContinualTask {
    pub labels: Vec<usize>,
    pub rounds: usize,
}

/// Class-incremental task sequence with pairwise disjoint label sets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ContinualSchedule {
    tasks: Vec<ContinualTask>,
}

impl ContinualSchedule {
    pub fn new(tasks: Vec<Vec<usize>>, rounds_per_task: usize, num_classes: usize) -> Result<Self, ScheduleError> {
        if tasks.is_empty() {
            return Err(ScheduleError::Empty);
        }
        if rounds_per_task == 0 {
            return Err(ScheduleError::ZeroRounds);
        }
        let mut owner: Vec<Option<usize>> = vec![None; num_classes];
        for (t, labels) in tasks.iter().enumerate() {
            if labels.is_empty() {
                return Err(ScheduleError::EmptyTask(t));
            }
            for &label in labels {
                let slot = owner.get_mut(label).ok_or(ScheduleError::OutOfRange {
                    label,
                    classes: num_classes,
                })?;
                if let Some(first) = *slot {
                    return Err(ScheduleError::Overlap {
                        label,
                        first,
                        second: t,
                    });
                }
                *slot = Some(t);
            }
        }
        Ok(Self {
            tasks: tasks
                .into_iter()
                .map(|mut labels| {
                    labels.sort_unstable();
                    ContinualTask {
                        labels,
                        rounds: rounds_per_task,
                    }
                })
                .collect(),
        })
    }

    pub fn tasks(&self) -> &[ContinualTask] {
        &self.tasks
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }

    pub fn total_rounds(&self) -> usize {
        self.tasks.iter().map(|t| t.rounds).sum()
    }
}

/// Reference label distribution of one client and its drift threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftState {
    reference: Vec<f64>,
    threshold: f64,
}

impl DriftState {
    pub fn new(reference: Vec<f64>, threshold: f64) -> Result<Self, DataError> {
        let sum: f64 = reference.iter().sum();
        if (sum - 1.0).abs() > 1e-9 || reference.iter().any(|&p| p < 0.0) {
            return Err(DataError::NotNormalized(sum));
        }
        Ok(Self { reference, threshold })
    }

    pub fn from_counts(counts: &[usize], threshold: f64) -> Option<Self> {
        normalize(counts).map(|reference| Self { reference, threshold })
    }

    pub fn reference(&self) -> &[f64] {
        &self.reference
    }

    pub fn threshold(&self) -> f64 {
        self.threshold
    }

    /// Adopts `current` as the new reference.
    pub fn rebase(&mut self, current: Vec<f64>) {
        self.reference = current;
    }
}

/// `(js > threshold, js)` between the reference and `current`.
pub fn detect_drift(state: &DriftState, current: &[f64]) -> Result<(bool, f64), DataError> {
    let js = js_divergence(&state.reference, current)?;
    Ok((js > state.threshold, js))
}

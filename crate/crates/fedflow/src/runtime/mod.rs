//! Orchestration: component registries, client selection, the round
//! driver for each workflow, client workers, and the task queue.

mod client;
mod engine;
mod hooks;
mod net;
mod registry;
mod schedule;
mod server;
mod setup;

use thiserror::Error;

pub use client::{ClientOutcome, ClientWorker};
pub use engine::{run_materialized, run_task, Engine, TaskQueueEntry, TaskStatus};
pub use hooks::{
    default_aggregate, default_client_test, default_client_train, default_construct_upload, default_on_round_start,
    default_post_aggregate, AggregateHook, ClientHooks, HookError, PostAggregateHook, RoundStartHook, ServerContext,
    ServerHooks, TestHook, TrainContext, TrainHook, UploadContext, UploadHook, WorkflowHooks,
};
pub use net::{join_tcp, serve_tcp};
pub use registry::{
    select_clients, ClientEntry, ClientRegistry, Component, ComponentKind, ComponentRegistry, DatasetFactory,
    ModelFactory, DOMAINNET_ANALOG_DOMAINS,
};
pub use schedule::{detect_drift, ContinualSchedule, ContinualTask, DriftState, ScheduleError};
pub use server::{EvalSummary, Federation};
pub use setup::{labeled_split, materialize, Materialized};

use crate::aggregation::AggregationError;
use crate::comms::CommsError;
use crate::config::{ConfigError, Workflow};
use crate::data::DataError;
use crate::learner::LearnerError;
use crate::params::{ParamError, ParameterSet};
use crate::protocol::UploadEnvelope;
use crate::tracker::TrackerError;

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Learner(#[from] LearnerError),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error(transparent)]
    Aggregation(#[from] AggregationError),
    #[error(transparent)]
    Comms(#[from] CommsError),
    #[error(transparent)]
    Tracker(#[from] TrackerError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("registry: {0}")]
    Registry(String),
    #[error("no available clients")]
    NoAvailableClients,
    #[error("protocol: {0}")]
    Protocol(String),
    #[error("component: {0}")]
    Component(String),
    #[error("hook failed: {0}")]
    Hook(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

/// Mixes three values into one well-spread seed.
pub fn mix_seed(a: u64, b: u64, c: u64) -> u64 {
    let mut z = a
        .wrapping_add(b.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(c.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Nominal training time at one GFLOP/s, counting six flops per parameter
/// per sample (forward plus backward).
pub fn simulated_seconds(params: &ParameterSet, samples: usize, epochs: usize) -> f64 {
    6.0 * params.num_values() as f64 * samples as f64 * epochs as f64 / 1e9
}

/// What happened in one round.
#[derive(Debug, Clone, PartialEq)]
pub struct RoundSummary {
    pub round_index: u64,
    pub selected: Vec<usize>,
    pub received: usize,
    pub failed: bool,
    /// Sample-weighted mean local training loss.
    pub train_loss: Option<f64>,
    pub accuracy: Option<f64>,
    /// Bytes the server received and sent during the round.
    pub bytes_up: u64,
    pub bytes_down: u64,
    pub activation_bytes: u64,
}

impl RoundSummary {
    pub fn new(round_index: u64, selected: Vec<usize>, uploads: &[UploadEnvelope], failed: bool) -> Self {
        let n: usize = uploads.iter().map(|u| u.num_samples).sum();
        let train_loss = (n > 0).then(|| {
            uploads
                .iter()
                .map(|u| u.train_loss * u.num_samples as f64)
                .sum::<f64>()
                / n as f64
        });
        Self {
            round_index,
            selected,
            received: uploads.len(),
            failed,
            train_loss,
            accuracy: None,
            bytes_up: 0,
            bytes_down: 0,
            activation_bytes: 0,
        }
    }

    pub fn bytes(&self) -> u64 {
        self.bytes_up + self.bytes_down
    }
}

/// Outcome of a finished task.
#[derive(Debug, Clone)]
pub struct RunReport {
    pub task_id: String,
    pub workflow: Workflow,
    pub rounds: Vec<RoundSummary>,
    pub final_model: ParameterSet,
    /// Per-cluster full models for clustered runs.
    pub cluster_models: Vec<ParameterSet>,
    pub best_accuracy: Option<f64>,
    pub best_round: Option<u64>,
    pub final_accuracy: Option<f64>,
    pub final_unweighted_accuracy: Option<f64>,
    pub final_fine_tuned_accuracy: Option<f64>,
    /// Row `t` holds accuracy on tasks `0..=t` after training task `t`.
    pub accuracy_matrix: Vec<Vec<f64>>,
    pub average_accuracy: Option<f64>,
}

impl RunReport {
    pub fn total_bytes(&self) -> u64 {
        self.rounds.iter().map(RoundSummary::bytes).sum()
    }

    /// Drop in accuracy on task `j` from right after learning it to the end.
    pub fn forgetting(&self, j: usize) -> Option<f64> {
        let first = self.accuracy_matrix.get(j)?.get(j)?;
        let last = self.accuracy_matrix.last()?.get(j)?;
        Some(first - last)
    }
}

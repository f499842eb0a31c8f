//! Overridable steps of the round workflow. Each hook left unset falls
//! through to the matching `default_*` function.

use std::sync::Arc;

use crate::aggregation::{AggregationError, AggregatorState};
use crate::config::{TaskConfig, Workflow};
use crate::data::Samples;
use crate::learner::{evaluate, local_train, Evaluation, LocalObjective, ModelSpec, OptimizerSettings, TrainOutcome};
use crate::params::ParameterSet;
use crate::protocol::{RoundPlan, UploadEnvelope};
use crate::tracker::MetricRecord;

pub type HookError = Box<dyn std::error::Error + Send + Sync>;

/// Inputs to one local training run.
pub struct TrainContext<'a> {
    pub client_id: usize,
    pub config: &'a TaskConfig,
    pub spec: &'a ModelSpec,
    /// Starting point: the client's model with the received blocks merged in.
    pub params: &'a ParameterSet,
    pub data: &'a Samples,
    pub objective: LocalObjective,
    pub epochs: usize,
    pub seed: u64,
}

/// Inputs to building the upload after training.
pub struct UploadContext<'a> {
    pub client_id: usize,
    pub round_index: u64,
    pub outcome: &'a TrainOutcome,
    /// Block names the server distributed and expects back.
    pub exchange_blocks: &'a [String],
    pub metrics: Vec<MetricRecord>,
    pub cluster_id: Option<usize>,
}

/// Server-side state visible to round hooks.
pub struct ServerContext<'a> {
    pub task_id: &'a str,
    pub round_index: u64,
    pub config: &'a TaskConfig,
    pub spec: &'a ModelSpec,
    /// Labeled server data, when the workflow has any.
    pub server_data: Option<&'a Samples>,
}

pub type TrainHook = Arc<dyn Fn(&TrainContext<'_>) -> Result<TrainOutcome, HookError> + Send + Sync>;
pub type TestHook = Arc<dyn Fn(&ModelSpec, &ParameterSet, &Samples) -> Result<Evaluation, HookError> + Send + Sync>;
pub type UploadHook = Arc<dyn Fn(UploadContext<'_>) -> Result<UploadEnvelope, HookError> + Send + Sync>;
pub type RoundStartHook = Arc<dyn Fn(&ServerContext<'_>, &mut RoundPlan) + Send + Sync>;
pub type AggregateHook = Arc<
    dyn Fn(&mut AggregatorState, &ParameterSet, &[UploadEnvelope], &[String]) -> Result<ParameterSet, HookError>
        + Send
        + Sync,
>;
pub type PostAggregateHook = Arc<dyn Fn(&ServerContext<'_>, &mut ParameterSet) -> Result<(), HookError> + Send + Sync>;

#[derive(Clone, Default)]
pub struct ClientHooks {
    pub client_train: Option<TrainHook>,
    pub client_test: Option<TestHook>,
    pub construct_upload: Option<UploadHook>,
}

#[derive(Clone, Default)]
pub struct ServerHooks {
    pub on_round_start: Option<RoundStartHook>,
    pub aggregate: Option<AggregateHook>,
    pub post_aggregate: Option<PostAggregateHook>,
}

/// Both halves of the workflow customization surface.
#[derive(Clone, Default)]
pub struct WorkflowHooks {
    pub client: ClientHooks,
    pub server: ServerHooks,
}

impl WorkflowHooks {
    /// Every hook set explicitly to its default.
    pub fn explicit_defaults() -> Self {
        Self {
            client: ClientHooks {
                client_train: Some(Arc::new(default_client_train)),
                client_test: Some(Arc::new(default_client_test)),
                construct_upload: Some(Arc::new(default_construct_upload)),
            },
            server: ServerHooks {
                on_round_start: Some(Arc::new(default_on_round_start)),
                aggregate: Some(Arc::new(default_aggregate)),
                post_aggregate: Some(Arc::new(default_post_aggregate)),
            },
        }
    }
}

impl ClientHooks {
    pub fn train(&self, ctx: &TrainContext<'_>) -> Result<TrainOutcome, HookError> {
        match &self.client_train {
            Some(h) => h(ctx),
            None => default_client_train(ctx),
        }
    }

    pub fn test(&self, spec: &ModelSpec, params: &ParameterSet, data: &Samples) -> Result<Evaluation, HookError> {
        match &self.client_test {
            Some(h) => h(spec, params, data),
            None => default_client_test(spec, params, data),
        }
    }

    pub fn upload(&self, ctx: UploadContext<'_>) -> Result<UploadEnvelope, HookError> {
        match &self.construct_upload {
            Some(h) => h(ctx),
            None => default_construct_upload(ctx),
        }
    }
}

impl ServerHooks {
    pub fn round_start(&self, ctx: &ServerContext<'_>, plan: &mut RoundPlan) {
        match &self.on_round_start {
            Some(h) => h(ctx, plan),
            None => default_on_round_start(ctx, plan),
        }
    }

    pub fn aggregate(
        &self,
        state: &mut AggregatorState,
        global: &ParameterSet,
        uploads: &[UploadEnvelope],
        exchange: &[String],
    ) -> Result<ParameterSet, HookError> {
        match &self.aggregate {
            Some(h) => h(state, global, uploads, exchange),
            None => default_aggregate(state, global, uploads, exchange),
        }
    }

    pub fn post_aggregate(&self, ctx: &ServerContext<'_>, global: &mut ParameterSet) -> Result<(), HookError> {
        match &self.post_aggregate {
            Some(h) => h(ctx, global),
            None => default_post_aggregate(ctx, global),
        }
    }
}

/// Mini-batch SGD per the client config.
pub fn default_client_train(ctx: &TrainContext<'_>) -> Result<TrainOutcome, HookError> {
    let c = &ctx.config.client;
    Ok(local_train(
        ctx.spec,
        ctx.params,
        ctx.data,
        &ctx.objective,
        OptimizerSettings::from(&c.optimizer),
        ctx.epochs,
        c.batch_size,
        ctx.seed,
    )?)
}

pub fn default_client_test(spec: &ModelSpec, params: &ParameterSet, data: &Samples) -> Result<Evaluation, HookError> {
    Ok(evaluate(spec, params, data)?)
}

/// Uploads the exchanged blocks of the trained model.
pub fn default_construct_upload(ctx: UploadContext<'_>) -> Result<UploadEnvelope, HookError> {
    Ok(UploadEnvelope {
        client_id: ctx.client_id,
        round_index: ctx.round_index,
        parameters: ctx.outcome.params.select(ctx.exchange_blocks)?,
        num_samples: ctx.outcome.num_samples,
        train_loss: ctx.outcome.mean_loss,
        metrics: ctx.metrics,
        cluster_id: ctx.cluster_id,
    })
}

pub fn default_on_round_start(_ctx: &ServerContext<'_>, _plan: &mut RoundPlan) {}

/// Steps the configured aggregator over the exchanged blocks and writes
/// the result back into the global model.
pub fn default_aggregate(
    state: &mut AggregatorState,
    global: &ParameterSet,
    uploads: &[UploadEnvelope],
    exchange: &[String],
) -> Result<ParameterSet, HookError> {
    let current = global.select(exchange).map_err(AggregationError::from)?;
    let next = state.step(&current, uploads)?;
    let mut out = global.clone();
    out.overwrite_from(&next)?;
    Ok(out)
}

/// Fine-tunes on the labeled server data in the semi-supervised workflow;
/// a no-op otherwise.
pub fn default_post_aggregate(ctx: &ServerContext<'_>, global: &mut ParameterSet) -> Result<(), HookError> {
    let (Workflow::SemiServer, Some(data)) = (ctx.config.workflow, ctx.server_data) else {
        return Ok(());
    };
    let epochs = ctx.config.semi.finetune_epochs;
    if epochs == 0 || data.is_empty() {
        return Ok(());
    }
    let c = &ctx.config.client;
    let out = local_train(
        ctx.spec,
        global,
        data,
        &LocalObjective::cross_entropy(),
        OptimizerSettings::from(&c.optimizer),
        epochs,
        c.batch_size,
        crate::runtime::mix_seed(ctx.config.data.seed, ctx.round_index, u64::MAX),
    )?;
    *global = out.params;
    Ok(())
}

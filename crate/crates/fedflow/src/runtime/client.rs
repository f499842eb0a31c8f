use std::sync::Arc;

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hooks::{ClientHooks, HookError, TrainContext, UploadContext};
use super::schedule::{detect_drift, DriftState};
use super::{mix_seed, simulated_seconds};
use crate::aggregation::assign_cluster;
use crate::comms::{CommsError, Endpoint, Message, MessageKind};
use crate::config::TaskConfig;
use crate::data::{normalize, Samples};
use crate::learner::{
    front_backward, front_forward, local_train, predict, LocalObjective, ModelSpec, OptimizerSettings, OptimizerState,
};
use crate::params::ParameterSet;
use crate::protocol::{
    ActivationBatch, ActivationGrads, Body, Directive, DriftNotice, EvalReply, EvalReport, Register, RoundPlan, UploadReply,
};
use crate::tracker::{MetricRecord, Scope};

/// A client: its data shard, its local model, and the executor hooks.
pub struct ClientWorker {
    pub id: usize,
    task_id: String,
    config: Arc<TaskConfig>,
    spec: ModelSpec,
    hooks: ClientHooks,
    train: Samples,
    test: Samples,
    /// Full local model; blocks outside the exchanged set never leave it.
    local: ParameterSet,
    drift: Option<DriftState>,
    current_labels: Option<Vec<usize>>,
    replay: Samples,
}

/// What a training directive produced.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientOutcome {
    pub drift: Option<DriftNotice>,
    pub reply: UploadReply,
}

impl ClientWorker {
    pub fn new(
        id: usize,
        task_id: impl Into<String>,
        config: Arc<TaskConfig>,
        spec: ModelSpec,
        hooks: ClientHooks,
        train: Samples,
        test: Samples,
    ) -> Self {
        let local = spec.init(config.data.seed);
        let num_features = train.num_features;
        Self {
            id,
            task_id: task_id.into(),
            config,
            spec,
            hooks,
            train,
            test,
            local,
            drift: None,
            current_labels: None,
            replay: Samples {
                num_features,
                ..Samples::default()
            },
        }
    }

    pub fn local_model(&self) -> &ParameterSet {
        &self.local
    }

    pub fn replay_len(&self) -> usize {
        self.replay.len()
    }

    fn seed(&self, base: u64) -> u64 {
        mix_seed(base, self.id as u64, 0x5eed)
    }

    fn failed(&self, e: impl std::fmt::Display) -> UploadReply {
        UploadReply::Failed {
            client_id: self.id,
            error: e.to_string(),
        }
    }

    /// Runs a training directive and builds the reply.
    pub fn execute(&mut self, plan: &RoundPlan) -> ClientOutcome {
        match self.try_execute(plan) {
            Ok(out) => out,
            Err(e) => ClientOutcome {
                drift: None,
                reply: self.failed(e),
            },
        }
    }

    fn try_execute(&mut self, plan: &RoundPlan) -> Result<ClientOutcome, HookError> {
        let (seed, labels, threshold, cluster) = match &plan.directive {
            Directive::Train {
                seed,
                label_subset,
                pseudo_label_threshold,
            } => (*seed, label_subset.clone(), *pseudo_label_threshold, None),
            Directive::ClusterTrain { seed } => {
                let c = self.pick_cluster(&plan.models)?;
                (*seed, None, None, Some(c))
            }
            other => return Err(format!("directive {other:?} is not a training directive").into()),
        };
        let received = plan.models.get(cluster.unwrap_or(0)).ok_or("plan carries no model")?;
        self.local.overwrite_from(received)?;
        let exchange: Vec<String> = received.names().map(str::to_string).collect();
        let seed = self.seed(seed);

        let drift = labels.as_ref().and_then(|l| self.track_labels(l, seed));
        let mut data = match &labels {
            Some(l) => self.train.filter_labels(l),
            None => self.train.clone(),
        };
        // Replayed samples are repeated until they match the new data in count.
        if !self.replay.is_empty() {
            let copies = (data.len() / self.replay.len()).max(1);
            for _ in 0..copies {
                data.extend(&self.replay);
            }
        }
        if let Some(t) = threshold {
            data = self.pseudo_label(&data, t)?;
        }
        if data.is_empty() {
            return Ok(ClientOutcome {
                drift,
                reply: UploadReply::Skipped {
                    client_id: self.id,
                    reason: "no usable training samples".into(),
                },
            });
        }
        let c = &self.config.client;
        let ctx = TrainContext {
            client_id: self.id,
            config: &self.config,
            spec: &self.spec,
            params: &self.local,
            data: &data,
            objective: LocalObjective::anchored(c.loss, c.proximal_mu, &self.local),
            epochs: c.local_epoch,
            seed,
        };
        let outcome = self.hooks.train(&ctx)?;
        self.spec.check_params(&outcome.params)?;
        self.local = outcome.params.clone();
        let metrics = vec![
            self.metric(plan.round_index, "train_seconds", simulated_seconds(&self.local, outcome.num_samples, c.local_epoch)),
            self.metric(plan.round_index, "memory_bytes", self.local.byte_size() as f64),
        ];
        let envelope = self.hooks.upload(UploadContext {
            client_id: self.id,
            round_index: plan.round_index,
            outcome: &outcome,
            exchange_blocks: &exchange,
            metrics,
            cluster_id: cluster,
        })?;
        Ok(ClientOutcome {
            drift,
            reply: UploadReply::Envelope(envelope),
        })
    }

    fn metric(&self, round: u64, name: &str, value: f64) -> MetricRecord {
        MetricRecord::new(self.task_id.clone(), round, Scope::Client(self.id), name, value)
    }

    /// Lowest training loss among the cluster models.
    fn pick_cluster(&self, models: &[ParameterSet]) -> Result<usize, HookError> {
        if models.len() == 1 {
            return Ok(0);
        }
        let data = if self.train.is_empty() { &self.test } else { &self.train };
        let mut losses = Vec::with_capacity(models.len());
        for m in models {
            let mut candidate = self.local.clone();
            candidate.overwrite_from(m)?;
            losses.push(self.hooks.test(&self.spec, &candidate, data)?.mean_loss);
        }
        Ok(assign_cluster(&losses)?)
    }

    /// Compares the label mix of the new task's data with the reference.
    /// On drift, caches a share of the previous task's samples for replay.
    fn track_labels(&mut self, labels: &[usize], seed: u64) -> Option<DriftNotice> {
        if self.current_labels.as_deref() == Some(labels) {
            return None;
        }
        let classes = self.spec.num_classes();
        let hist = |s: &Samples| {
            let mut h = vec![0usize; classes];
            for &y in &s.labels {
                h[y] += 1;
            }
            h
        };
        let new_data = self.train.filter_labels(labels);
        let current = normalize(&hist(&new_data));
        let previous = self.current_labels.replace(labels.to_vec());
        let threshold = self.config.continual.drift_threshold;
        let (Some(current), Some(state)) = (current, self.drift.as_mut()) else {
            self.drift = DriftState::from_counts(&hist(&new_data), threshold);
            return None;
        };
        let (flagged, divergence) = detect_drift(state, &current).ok()?;
        state.rebase(current);
        let mut cached = 0;
        if flagged && self.config.continual.replay_fraction > 0.0 {
            if let Some(prev) = previous {
                let old = self.train.filter_labels(&prev);
                let mut idx: Vec<usize> = (0..old.len()).collect();
                idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
                let keep = (self.config.continual.replay_fraction * old.len() as f64).round() as usize;
                idx.truncate(keep);
                idx.sort_unstable();
                let cache = old.select(&idx);
                cached = cache.len();
                self.replay.extend(&cache);
            }
        }
        debug!("client {} drift js={divergence:.4} flagged={flagged} cached={cached}", self.id);
        Some(DriftNotice {
            client_id: self.id,
            divergence,
            flagged,
            cached_samples: cached,
        })
    }

    /// Samples whose top predicted probability exceeds `threshold`,
    /// relabeled with the prediction.
    fn pseudo_label(&self, data: &Samples, threshold: f64) -> Result<Samples, HookError> {
        if data.is_empty() {
            return Ok(data.clone());
        }
        let preds = predict(&self.spec, &self.local, &data.features)?;
        let keep: Vec<usize> = (0..data.len()).filter(|&i| preds[i].1 > threshold).collect();
        let mut out = data.select(&keep);
        out.labels = keep.iter().map(|&i| preds[i].0).collect();
        Ok(out)
    }

    /// Runs an evaluation directive on the local test data.
    pub fn evaluate(&self, plan: &RoundPlan) -> EvalReply {
        self.try_evaluate(plan).unwrap_or_else(|e| EvalReply::Failed {
            client_id: self.id,
            error: e.to_string(),
        })
    }

    fn try_evaluate(&self, plan: &RoundPlan) -> Result<EvalReply, HookError> {
        let Directive::Evaluate {
            seed,
            fine_tune_epochs,
            label_subset,
        } = &plan.directive
        else {
            return Err("not an evaluation directive".into());
        };
        let cluster = self.pick_cluster(&plan.models)?;
        let mut model = self.local.clone();
        model.overwrite_from(plan.models.get(cluster).ok_or("plan carries no model")?)?;
        let (test, train) = match label_subset {
            Some(l) => (self.test.filter_labels(l), self.train.filter_labels(l)),
            None => (self.test.clone(), self.train.clone()),
        };
        if test.is_empty() {
            return Ok(EvalReply::Report(EvalReport {
                client_id: self.id,
                accuracy: 0.0,
                loss: 0.0,
                num_samples: 0,
                cluster_id: (plan.models.len() > 1).then_some(cluster),
                fine_tuned_accuracy: None,
            }));
        }
        let eval = self.hooks.test(&self.spec, &model, &test)?;
        let fine_tuned_accuracy = if *fine_tune_epochs > 0 && !train.is_empty() {
            let c = &self.config.client;
            let tuned = local_train(
                &self.spec,
                &model,
                &train,
                &LocalObjective::cross_entropy(),
                OptimizerSettings::from(&c.optimizer),
                *fine_tune_epochs as usize,
                c.batch_size,
                self.seed(*seed),
            )?;
            Some(self.hooks.test(&self.spec, &tuned.params, &test)?.accuracy)
        } else {
            None
        };
        Ok(EvalReply::Report(EvalReport {
            client_id: self.id,
            accuracy: eval.accuracy,
            loss: eval.mean_loss,
            num_samples: eval.num_samples,
            cluster_id: (plan.models.len() > 1).then_some(cluster),
            fine_tuned_accuracy,
        }))
    }

    /// Trains the front half batch by batch, exchanging cut-layer
    /// activations and their gradients with the server.
    fn split_round(&mut self, ep: &mut dyn Endpoint, task: &str, plan: &RoundPlan) -> Result<(), CommsError> {
        let reply = match self.try_split(ep, task, plan) {
            Ok(r) => r,
            Err(SplitFailure::Comms(e)) => return Err(e),
            Err(SplitFailure::Local(e)) => self.failed(e),
        };
        ep.send(&reply.to_message(task, plan.round_index))
    }

    fn try_split(&mut self, ep: &mut dyn Endpoint, task: &str, plan: &RoundPlan) -> Result<UploadReply, SplitFailure> {
        let Directive::SplitTrain { seed } = plan.directive else {
            return Err(SplitFailure::Local("not a split directive".into()));
        };
        let split = self
            .config
            .model
            .split_layer
            .ok_or_else(|| SplitFailure::Local("split layer not configured".into()))?;
        let mut front = plan.models.first().cloned().ok_or_else(|| SplitFailure::Local("no front model".into()))?;
        if self.train.is_empty() {
            return Ok(UploadReply::Skipped {
                client_id: self.id,
                reason: "no training samples".into(),
            });
        }
        let c = &self.config.client;
        let objective = LocalObjective::anchored(c.loss, c.proximal_mu, &front);
        let mut state = OptimizerState::new(OptimizerSettings::from(&c.optimizer), &front);
        let width = self.spec.layer_widths[split];
        let mut batch_index = 0u64;
        let mut mean_loss = 0.0;
        for epoch in crate::learner::batch_order(self.train.len(), c.batch_size, c.local_epoch, self.seed(seed)) {
            let mut total = 0.0;
            for idx in epoch {
                let batch = self.train.select(&idx);
                let acts = front_forward(&self.spec, split, &front, &batch.features).map_err(local)?;
                let msg = ActivationBatch {
                    client_id: self.id,
                    batch_index,
                    cols: width,
                    values: acts,
                    labels: batch.labels.clone(),
                }
                .to_message(task, plan.round_index);
                ep.send(&msg)?;
                let grads = loop {
                    let m = ep.recv(None)?;
                    match m.kind {
                        MessageKind::ActGrads if m.round_index == plan.round_index => {
                            break ActivationGrads::from_message(&m)?;
                        }
                        MessageKind::Stop => return Err(SplitFailure::Comms(CommsError::Disconnected)),
                        _ => warn!("client {} dropped unexpected {:?} during split round", self.id, m.kind),
                    }
                };
                if grads.batch_index != batch_index {
                    return Err(SplitFailure::Local("activation gradients out of order".into()));
                }
                let (prox, grad) =
                    front_backward(&self.spec, split, &front, &batch.features, grads.values, &objective).map_err(local)?;
                state.step(&mut front, &grad).map_err(local)?;
                total += (grads.loss + prox) * idx.len() as f64;
                batch_index += 1;
            }
            mean_loss = total / self.train.len() as f64;
        }
        self.local.overwrite_from(&front).map_err(local)?;
        let metrics = vec![
            self.metric(plan.round_index, "train_seconds", simulated_seconds(&front, self.train.len(), c.local_epoch)),
            self.metric(plan.round_index, "memory_bytes", front.byte_size() as f64),
        ];
        Ok(UploadReply::Envelope(crate::protocol::UploadEnvelope {
            client_id: self.id,
            round_index: plan.round_index,
            parameters: front,
            num_samples: self.train.len(),
            train_loss: mean_loss,
            metrics,
            cluster_id: None,
        }))
    }

    pub fn register_message(&self) -> Message {
        Register {
            client_id: self.id,
            num_train: self.train.len(),
            num_test: self.test.len(),
        }
        .to_message(&self.task_id, 0)
    }

    /// Registers, then answers plans until STOP or disconnection.
    pub fn serve(mut self, ep: &mut dyn Endpoint) -> Result<(), CommsError> {
        ep.send(&self.register_message())?;
        loop {
            let msg = match ep.recv(None) {
                Ok(m) => m,
                Err(CommsError::Disconnected) => return Ok(()),
                Err(e) => return Err(e),
            };
            match msg.kind {
                MessageKind::Stop => return Ok(()),
                MessageKind::Plan => {
                    let plan = RoundPlan::from_message(&msg)?;
                    let task = msg.task_id.clone();
                    match plan.directive {
                        Directive::Evaluate { .. } => ep.send(&self.evaluate(&plan).to_message(&task, plan.round_index))?,
                        Directive::SplitTrain { .. } => self.split_round(ep, &task, &plan)?,
                        _ => {
                            let out = self.execute(&plan);
                            if let Some(d) = out.drift {
                                ep.send(&d.to_message(&task, plan.round_index))?;
                            }
                            ep.send(&out.reply.to_message(&task, plan.round_index))?;
                        }
                    }
                }
                other => warn!("client {} ignored unexpected {other:?}", self.id),
            }
        }
    }
}

enum SplitFailure {
    Comms(CommsError),
    Local(String),
}

impl From<CommsError> for SplitFailure {
    fn from(e: CommsError) -> Self {
        SplitFailure::Comms(e)
    }
}

fn local(e: impl std::fmt::Display) -> SplitFailure {
    SplitFailure::Local(e.to_string())
}

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::{Duration, Instant};

use log::{debug, info, warn};

use super::hooks::{ServerContext, ServerHooks};
use super::registry::{select_clients, ClientEntry, ClientRegistry};
use super::schedule::ContinualSchedule;
use super::{mix_seed, RoundSummary, RunReport, RuntimeError};
use crate::aggregation::{aggregate_clusters, AggregatorState, ClusterBook};
use crate::comms::{CommsError, Direction, Endpoint, Message, MessageKind};
use crate::config::{Exchange, TaskConfig, TestMode, Workflow};
use crate::data::Samples;
use crate::learner::{
    back_forward_backward, evaluate, local_train, split_model, LocalObjective, ModelSpec, OptimizerSettings, OptimizerState,
};
use crate::params::ParameterSet;
use crate::protocol::{
    ActivationBatch, ActivationGrads, Body, Directive, DriftNotice, EvalReply, Register, RoundPlan, UploadEnvelope, UploadReply,
};
use crate::tracker::{Scope, Tracker};

const REGISTER_TIMEOUT: Duration = Duration::from_secs(60);

/// Test metrics of one evaluation pass.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    /// Sample-weighted accuracy.
    pub accuracy: f64,
    pub unweighted_accuracy: f64,
    pub loss: f64,
    pub num_samples: usize,
    pub fine_tuned_accuracy: Option<f64>,
}

/// The server side of one running task: client links, the registry, and
/// the round driver.
pub struct Federation {
    task_id: String,
    config: Arc<TaskConfig>,
    spec: ModelSpec,
    hooks: ServerHooks,
    tracker: Arc<Tracker>,
    pub registry: ClientRegistry,
    links: BTreeMap<usize, Box<dyn Endpoint>>,
    server_test: Samples,
    server_labeled: Option<Samples>,
    deadline: Option<Duration>,
}

struct RunState {
    global: ParameterSet,
    agg: AggregatorState,
    rounds: Vec<RoundSummary>,
    evals: Vec<(u64, EvalSummary)>,
}

impl Federation {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        task_id: impl Into<String>,
        config: Arc<TaskConfig>,
        spec: ModelSpec,
        hooks: ServerHooks,
        tracker: Arc<Tracker>,
        server_test: Samples,
        server_labeled: Option<Samples>,
    ) -> Self {
        let deadline = (config.server.round_deadline_ms > 0).then(|| Duration::from_millis(config.server.round_deadline_ms));
        Self {
            task_id: task_id.into(),
            config,
            spec,
            hooks,
            tracker,
            registry: ClientRegistry::new(),
            links: BTreeMap::new(),
            server_test,
            server_labeled,
            deadline,
        }
    }

    /// Waits for each endpoint's REGISTER and adds the client.
    pub fn accept(&mut self, endpoints: Vec<Box<dyn Endpoint>>) -> Result<(), RuntimeError> {
        for mut ep in endpoints {
            let msg = ep.recv(Some(REGISTER_TIMEOUT))?;
            if msg.kind != MessageKind::Register {
                return Err(RuntimeError::Protocol(format!("expected REGISTER, got {:?}", msg.kind)));
            }
            let reg = Register::from_message(&msg)?;
            self.registry.insert(
                reg.client_id,
                ClientEntry {
                    num_train: reg.num_train,
                    num_test: reg.num_test,
                    available: true,
                    address: format!("client:{}", reg.client_id),
                },
            )?;
            self.links.insert(reg.client_id, ep);
            debug!("registered client {} ({} train samples)", reg.client_id, reg.num_train);
        }
        Ok(())
    }

    pub fn stop_all(&mut self) {
        let stop = Message::stop(self.task_id.clone());
        for ep in self.links.values_mut() {
            let _ = ep.send(&stop);
        }
    }

    fn log(&self, round: u64, scope: Scope, name: &str, value: f64) -> Result<(), RuntimeError> {
        Ok(self.tracker.log(&self.task_id, round, scope, name, value)?)
    }

    fn ctx(&self, round: u64) -> ServerContext<'_> {
        ServerContext {
            task_id: &self.task_id,
            round_index: round,
            config: &self.config,
            spec: &self.spec,
            server_data: self.server_labeled.as_ref(),
        }
    }

    fn exchange_blocks(&self) -> Vec<String> {
        match self.config.model.exchange {
            Exchange::Full => self.spec.block_names(0..self.spec.num_layers()),
            Exchange::Partial => self.config.model.partial_blocks.clone(),
        }
    }

    fn drop_client(&mut self, id: usize, why: &CommsError) {
        warn!("client {id} unavailable: {why}");
        self.registry.set_available(id, false);
    }

    /// Sends `msg` to each id; returns the ids it reached.
    fn broadcast(&mut self, ids: &[usize], msg: &Message) -> Vec<usize> {
        let mut reached = Vec::with_capacity(ids.len());
        for &id in ids {
            let Some(ep) = self.links.get_mut(&id) else { continue };
            match ep.send(msg) {
                Ok(()) => reached.push(id),
                Err(e) => self.drop_client(id, &e),
            }
        }
        reached
    }

    fn recv_from(&mut self, id: usize, deadline: Option<Instant>) -> Result<Message, CommsError> {
        let timeout = deadline.map(|d| d.saturating_duration_since(Instant::now()));
        let ep = self.links.get_mut(&id).ok_or(CommsError::Disconnected)?;
        ep.recv(timeout)
    }

    fn round_deadline(&self) -> Option<Instant> {
        self.deadline.map(|d| Instant::now() + d)
    }

    fn note_drift(&self, round: u64, notice: &DriftNotice) -> Result<(), RuntimeError> {
        let scope = Scope::Client(notice.client_id);
        self.log(round, scope, "drift_js", notice.divergence)?;
        self.log(round, scope, "drift_flag", f64::from(u8::from(notice.flagged)))?;
        if notice.flagged {
            info!("client {} reports drift (js {:.3})", notice.client_id, notice.divergence);
        }
        Ok(())
    }

    /// Waits for one message of `kind` for `round` from each id, in id
    /// order. Stale messages are discarded; drift notices are recorded.
    fn collect(&mut self, ids: &[usize], round: u64, kind: MessageKind) -> Result<Vec<Message>, RuntimeError> {
        let deadline = self.round_deadline();
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            loop {
                match self.recv_from(id, deadline) {
                    Ok(m) if m.round_index != round => debug!("dropped stale {:?} from client {id}", m.kind),
                    Ok(m) if m.kind == MessageKind::DriftNotice => self.note_drift(round, &DriftNotice::from_message(&m)?)?,
                    Ok(m) if m.kind == kind => {
                        out.push(m);
                        break;
                    }
                    Ok(m) => debug!("ignored {:?} from client {id}", m.kind),
                    Err(CommsError::Timeout) => {
                        self.log(round, Scope::Client(id), "client_timeout", 1.0)?;
                        break;
                    }
                    Err(e) => {
                        self.drop_client(id, &e);
                        self.log(round, Scope::Client(id), "client_disconnected", 1.0)?;
                        break;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Keeps well-formed envelopes, at most one per selected client.
    fn accept_uploads(&self, plan: &RoundPlan, messages: &[Message]) -> Result<Vec<UploadEnvelope>, RuntimeError> {
        let mut seen = BTreeMap::new();
        for m in messages {
            let reply = match UploadReply::from_message(m) {
                Ok(r) => r,
                Err(e) => {
                    warn!("undecodable upload: {e}");
                    continue;
                }
            };
            let id = reply.client_id();
            match reply {
                UploadReply::Envelope(e) => {
                    let expected = plan.models.get(e.cluster_id.unwrap_or(0));
                    let valid = plan.selected_client_ids.contains(&id)
                        && e.round_index == plan.round_index
                        && e.num_samples > 0
                        && expected.is_some_and(|x| x.congruent(&e.parameters))
                        && e.parameters.all_finite();
                    if !valid || seen.contains_key(&id) {
                        self.log(plan.round_index, Scope::Client(id), "client_failed", 1.0)?;
                        continue;
                    }
                    for r in &e.metrics {
                        self.log(plan.round_index, Scope::Client(id), &r.name, r.value)?;
                    }
                    seen.insert(id, e);
                }
                UploadReply::Skipped { reason, .. } => {
                    debug!("client {id} skipped: {reason}");
                    self.log(plan.round_index, Scope::Client(id), "client_skipped", 1.0)?;
                }
                UploadReply::Failed { error, .. } => {
                    warn!("client {id} failed: {error}");
                    self.log(plan.round_index, Scope::Client(id), "client_failed", 1.0)?;
                }
            }
        }
        Ok(seen.into_values().collect())
    }

    fn select(&self, round: u64) -> Result<Vec<usize>, RuntimeError> {
        select_clients(
            &self.registry,
            self.config.server.clients_per_round,
            round,
            self.config.data.seed,
        )
    }

    fn plan_seed(&self, round: u64) -> u64 {
        mix_seed(self.config.data.seed, round, 1)
    }

    /// Sends the plan to its clients and returns the accepted envelopes.
    fn run_plan(&mut self, plan: &RoundPlan) -> Result<Vec<UploadEnvelope>, RuntimeError> {
        let msg = plan.to_message(&self.task_id, plan.round_index);
        for &id in &plan.selected_client_ids {
            self.log(plan.round_index, Scope::Client(id), "selected", 1.0)?;
        }
        let reached = self.broadcast(&plan.selected_client_ids, &msg);
        let replies = self.collect(&reached, plan.round_index, MessageKind::Upload)?;
        self.accept_uploads(plan, &replies)
    }

    fn is_eval_round(&self, round: u64, total: u64) -> bool {
        (round + 1).is_multiple_of(self.config.server.test_every as u64) || round + 1 == total
    }

    /// Evaluates on the server test set or on every available client.
    /// `client_models` are sent to clients; `server_model` is used locally.
    fn evaluate(
        &mut self,
        round: u64,
        server_model: &ParameterSet,
        client_models: Vec<ParameterSet>,
        label_subset: Option<Vec<usize>>,
        in_client: bool,
    ) -> Result<Option<EvalSummary>, RuntimeError> {
        if !in_client {
            let data = match &label_subset {
                Some(l) => self.server_test.filter_labels(l),
                None => self.server_test.clone(),
            };
            if data.is_empty() {
                return Ok(None);
            }
            let e = evaluate(&self.spec, server_model, &data)?;
            return Ok(Some(EvalSummary {
                accuracy: e.accuracy,
                unweighted_accuracy: e.accuracy,
                loss: e.mean_loss,
                num_samples: e.num_samples,
                fine_tuned_accuracy: None,
            }));
        }
        let ids = self.registry.available_ids();
        let plan = RoundPlan {
            round_index: round,
            selected_client_ids: ids.clone(),
            models: client_models,
            directive: Directive::Evaluate {
                seed: mix_seed(self.config.data.seed, round, 2),
                fine_tune_epochs: self.config.client.fine_tune_epochs as u32,
                label_subset,
            },
        };
        let reached = self.broadcast(&ids, &plan.to_message(&self.task_id, round));
        let replies = self.collect(&reached, round, MessageKind::EvalResult)?;
        let (mut n, mut acc, mut loss, mut ft, mut ft_n) = (0usize, 0.0, 0.0, 0.0, 0usize);
        let mut per_client = Vec::new();
        for m in &replies {
            match EvalReply::from_message(m)? {
                EvalReply::Report(r) if r.num_samples > 0 => {
                    n += r.num_samples;
                    acc += r.accuracy * r.num_samples as f64;
                    loss += r.loss * r.num_samples as f64;
                    if let Some(f) = r.fine_tuned_accuracy {
                        ft += f * r.num_samples as f64;
                        ft_n += r.num_samples;
                    }
                    per_client.push(r.accuracy);
                    self.log(round, Scope::Client(r.client_id), "accuracy", r.accuracy)?;
                    if let Some(c) = r.cluster_id {
                        self.log(round, Scope::Client(r.client_id), "cluster", c as f64)?;
                    }
                }
                EvalReply::Report(_) => {}
                EvalReply::Failed { client_id, error } => {
                    warn!("client {client_id} evaluation failed: {error}");
                    self.log(round, Scope::Client(client_id), "client_failed", 1.0)?;
                }
            }
        }
        if n == 0 {
            return Ok(None);
        }
        Ok(Some(EvalSummary {
            accuracy: acc / n as f64,
            unweighted_accuracy: per_client.iter().sum::<f64>() / per_client.len() as f64,
            loss: loss / n as f64,
            num_samples: n,
            fine_tuned_accuracy: (ft_n > 0).then(|| ft / ft_n as f64),
        }))
    }

    fn record_eval(&self, round: u64, e: &EvalSummary) -> Result<(), RuntimeError> {
        self.log(round, Scope::Server, "accuracy", e.accuracy)?;
        self.log(round, Scope::Server, "accuracy_unweighted", e.unweighted_accuracy)?;
        self.log(round, Scope::Server, "loss", e.loss)?;
        if let Some(f) = e.fine_tuned_accuracy {
            self.log(round, Scope::Server, "accuracy_ft", f)?;
        }
        Ok(())
    }

    fn finish_round(&self, st: &mut RunState, mut summary: RoundSummary) -> Result<(), RuntimeError> {
        let r = summary.round_index;
        let (up, down) = self.links.values().fold((0, 0), |(u, d), ep| {
            (u + ep.meter().bytes(r, Direction::Received), d + ep.meter().bytes(r, Direction::Sent))
        });
        summary.bytes_up = up;
        summary.bytes_down = down;
        self.log(r, Scope::Server, "received", summary.received as f64)?;
        self.log(r, Scope::Server, "round_failed", f64::from(u8::from(summary.failed)))?;
        if let Some(l) = summary.train_loss {
            self.log(r, Scope::Server, "train_loss", l)?;
        }
        self.log(r, Scope::Server, "comm_bytes_up", up as f64)?;
        self.log(r, Scope::Server, "comm_bytes_down", down as f64)?;
        self.log(r, Scope::Server, "memory_bytes", st.global.byte_size() as f64)?;
        st.rounds.push(summary);
        Ok(())
    }

    fn new_state(&self) -> RunState {
        RunState {
            global: self.spec.init(self.config.data.seed),
            agg: AggregatorState::from_config(&self.config.server),
            rounds: Vec::new(),
            evals: Vec::new(),
        }
    }

    /// One standard round: plan, local training, aggregation, and the
    /// post-aggregation hook. The global model changes only at the end.
    fn train_round(
        &mut self,
        st: &mut RunState,
        round: u64,
        label_subset: Option<Vec<usize>>,
        threshold: Option<f64>,
    ) -> Result<RoundSummary, RuntimeError> {
        let exchange = self.exchange_blocks();
        let mut plan = RoundPlan {
            round_index: round,
            selected_client_ids: self.select(round)?,
            models: vec![st.global.select(&exchange)?],
            directive: Directive::Train {
                seed: self.plan_seed(round),
                label_subset,
                pseudo_label_threshold: threshold,
            },
        };
        self.hooks.round_start(&self.ctx(round), &mut plan);
        let uploads = self.run_plan(&plan)?;
        let failed = uploads.is_empty();
        let mut next = st.global.clone();
        if !failed {
            next = self
                .hooks
                .aggregate(&mut st.agg, &st.global, &uploads, &exchange)
                .map_err(|e| RuntimeError::Hook(e.to_string()))?;
            self.spec.check_params(&next)?;
        }
        // Server-side fine-tuning advances the model even when no client contributes.
        if !failed || self.config.workflow == Workflow::SemiServer {
            self.hooks
                .post_aggregate(&self.ctx(round), &mut next)
                .map_err(|e| RuntimeError::Hook(e.to_string()))?;
            self.spec.check_params(&next)?;
            next.check_finite()?;
        }
        st.global = next;
        Ok(RoundSummary::new(round, plan.selected_client_ids.clone(), &uploads, failed))
    }

    fn eval_global(&mut self, st: &mut RunState, round: u64, label_subset: Option<Vec<usize>>) -> Result<Option<EvalSummary>, RuntimeError> {
        let exchange = self.exchange_blocks();
        let client_models = vec![st.global.select(&exchange)?];
        let global = st.global.clone();
        let in_client = self.config.test_mode == TestMode::TestInClient;
        let e = self.evaluate(round, &global, client_models, label_subset, in_client)?;
        if let Some(e) = &e {
            self.record_eval(round, e)?;
            st.evals.push((round, e.clone()));
        }
        Ok(e)
    }

    /// Plain federated training for the configured number of rounds.
    pub fn run_standard(&mut self) -> Result<RunReport, RuntimeError> {
        let mut st = self.new_state();
        let total = self.config.server.rounds as u64;
        for round in 0..total {
            let mut summary = self.train_round(&mut st, round, None, None)?;
            if self.is_eval_round(round, total) {
                summary.accuracy = self.eval_global(&mut st, round, None)?.map(|e| e.accuracy);
            }
            self.finish_round(&mut st, summary)?;
        }
        Ok(self.report(st, Vec::new(), Vec::new()))
    }

    /// Label-in-server semi-supervised training: supervised warm-up on the
    /// server's labeled data, pseudo-labeled client rounds, and server
    /// fine-tuning after every aggregation.
    pub fn run_semi_server(&mut self) -> Result<RunReport, RuntimeError> {
        let mut st = self.new_state();
        let labeled = self
            .server_labeled
            .clone()
            .ok_or_else(|| RuntimeError::Protocol("semi-supervised run without server data".into()))?;
        let c = &self.config.client;
        if self.config.semi.warmup_epochs > 0 {
            st.global = local_train(
                &self.spec,
                &st.global,
                &labeled,
                &LocalObjective::cross_entropy(),
                OptimizerSettings::from(&c.optimizer),
                self.config.semi.warmup_epochs,
                c.batch_size,
                mix_seed(self.config.data.seed, 0, 3),
            )?
            .params;
        }
        let threshold = Some(self.config.semi.pseudo_label_threshold);
        let total = self.config.server.rounds as u64;
        for round in 0..total {
            let mut summary = self.train_round(&mut st, round, None, threshold)?;
            if self.is_eval_round(round, total) {
                summary.accuracy = self.eval_global(&mut st, round, None)?.map(|e| e.accuracy);
            }
            self.finish_round(&mut st, summary)?;
        }
        Ok(self.report(st, Vec::new(), Vec::new()))
    }

    /// Class-incremental tasks in sequence. After each task the model is
    /// tested on every task seen so far.
    pub fn run_continual(&mut self, schedule: &ContinualSchedule) -> Result<RunReport, RuntimeError> {
        let mut st = self.new_state();
        let mut matrix: Vec<Vec<f64>> = Vec::with_capacity(schedule.len());
        let total = schedule.total_rounds() as u64;
        let mut round = 0u64;
        let mut seen: Vec<usize> = Vec::new();
        for (t, task) in schedule.tasks().iter().enumerate() {
            seen.extend_from_slice(&task.labels);
            seen.sort_unstable();
            for _ in 0..task.rounds {
                let mut summary = self.train_round(&mut st, round, Some(task.labels.clone()), None)?;
                if self.is_eval_round(round, total) {
                    summary.accuracy = self.eval_global(&mut st, round, Some(seen.clone()))?.map(|e| e.accuracy);
                }
                let last_of_task = summary.round_index + 1
                    == schedule.tasks()[..=t].iter().map(|x| x.rounds as u64).sum::<u64>();
                if last_of_task {
                    let mut row = Vec::with_capacity(t + 1);
                    for (j, prev) in schedule.tasks()[..=t].iter().enumerate() {
                        let acc = self.task_accuracy(&st, round, &prev.labels)?;
                        self.log(round, Scope::Server, &format!("accuracy_task{j}"), acc)?;
                        row.push(acc);
                    }
                    matrix.push(row);
                }
                self.finish_round(&mut st, summary)?;
                round += 1;
            }
        }
        Ok(self.report(st, Vec::new(), matrix))
    }

    fn task_accuracy(&mut self, st: &RunState, round: u64, labels: &[usize]) -> Result<f64, RuntimeError> {
        let exchange = self.exchange_blocks();
        let client_models = vec![st.global.select(&exchange)?];
        let in_client = self.config.test_mode == TestMode::TestInClient;
        Ok(self
            .evaluate(round, &st.global.clone(), client_models, Some(labels.to_vec()), in_client)?
            .map_or(0.0, |e| e.accuracy))
    }

    /// Split learning: clients train front halves against a shared back
    /// half on the server, which steps once per received batch.
    pub fn run_split(&mut self) -> Result<RunReport, RuntimeError> {
        let mut st = self.new_state();
        let split = self
            .config
            .model
            .split_layer
            .ok_or_else(|| RuntimeError::Protocol("split run without split_layer".into()))?;
        let (mut front, mut back) = split_model(&self.spec, &st.global, split)?;
        let front_names: Vec<String> = front.names().map(str::to_string).collect();
        let mut back_state = OptimizerState::new(OptimizerSettings::from(&self.config.client.optimizer), &back);
        let total = self.config.server.rounds as u64;
        for round in 0..total {
            let mut plan = RoundPlan {
                round_index: round,
                selected_client_ids: self.select(round)?,
                models: vec![front.clone()],
                directive: Directive::SplitTrain {
                    seed: self.plan_seed(round),
                },
            };
            self.hooks.round_start(&self.ctx(round), &mut plan);
            for &id in &plan.selected_client_ids {
                self.log(round, Scope::Client(id), "selected", 1.0)?;
            }
            let (back_before, state_before) = (back.clone(), back_state.clone());
            let reached = self.broadcast(&plan.selected_client_ids, &plan.to_message(&self.task_id, round));
            let (replies, act_bytes) = self.serve_split_batches(&reached, round, split, &mut back, &mut back_state)?;
            let uploads = self.accept_uploads(&plan, &replies)?;
            let failed = uploads.is_empty();
            if failed {
                back = back_before;
                back_state = state_before;
            } else {
                front = self
                    .hooks
                    .aggregate(&mut st.agg, &front, &uploads, &front_names)
                    .map_err(|e| RuntimeError::Hook(e.to_string()))?;
                front.check_finite()?;
            }
            st.global = front.concat(&back)?;
            self.log(round, Scope::Server, "activation_bytes", act_bytes as f64)?;
            let mut summary = RoundSummary::new(round, plan.selected_client_ids.clone(), &uploads, failed);
            summary.activation_bytes = act_bytes;
            if self.is_eval_round(round, total) {
                summary.accuracy = self.eval_global(&mut st, round, None)?.map(|e| e.accuracy);
            }
            self.finish_round(&mut st, summary)?;
        }
        Ok(self.report(st, Vec::new(), Vec::new()))
    }

    /// Serves activation batches round-robin over clients in id order until
    /// each has uploaded or dropped out. Returns the upload messages and the
    /// activation payload bytes received.
    fn serve_split_batches(
        &mut self,
        ids: &[usize],
        round: u64,
        split: usize,
        back: &mut ParameterSet,
        state: &mut OptimizerState,
    ) -> Result<(Vec<Message>, u64), RuntimeError> {
        let c = &self.config.client;
        let objective = LocalObjective::anchored(c.loss, c.proximal_mu, back);
        let deadline = self.round_deadline();
        let mut active: Vec<usize> = ids.to_vec();
        let mut uploads = Vec::new();
        let mut act_bytes = 0u64;
        while !active.is_empty() {
            let mut still = Vec::with_capacity(active.len());
            for id in active {
                match self.recv_from(id, deadline) {
                    Ok(m) if m.round_index != round => {
                        debug!("dropped stale {:?} from client {id}", m.kind);
                        still.push(id);
                    }
                    Ok(m) if m.kind == MessageKind::Activations => {
                        let batch = ActivationBatch::from_message(&m)?;
                        act_bytes += (batch.values.len() * std::mem::size_of::<f32>()) as u64;
                        let reply = match back_forward_backward(&self.spec, split, back, &batch.values, &batch.labels, &objective) {
                            Ok((loss, grad, grad_acts)) => {
                                state.step(back, &grad)?;
                                ActivationGrads {
                                    batch_index: batch.batch_index,
                                    loss,
                                    values: grad_acts,
                                }
                            }
                            Err(e) => {
                                warn!("client {id} sent an unusable batch: {e}");
                                self.log(round, Scope::Client(id), "client_failed", 1.0)?;
                                continue;
                            }
                        };
                        let ep = self.links.get_mut(&id).expect("active clients have links");
                        match ep.send(&reply.to_message(&self.task_id, round)) {
                            Ok(()) => still.push(id),
                            Err(e) => self.drop_client(id, &e),
                        }
                    }
                    Ok(m) if m.kind == MessageKind::Upload => uploads.push(m),
                    Ok(m) => {
                        debug!("ignored {:?} from client {id}", m.kind);
                        still.push(id);
                    }
                    Err(CommsError::Timeout) => self.log(round, Scope::Client(id), "client_timeout", 1.0)?,
                    Err(e) => {
                        self.drop_client(id, &e);
                        self.log(round, Scope::Client(id), "client_disconnected", 1.0)?;
                    }
                }
            }
            active = still;
        }
        Ok((uploads, act_bytes))
    }

    /// IFCA-style clustered training with `num_clusters` models. Round 0
    /// trains one shared model and seeds the clusters by grouping its
    /// uploads around mutually distant representatives.
    pub fn run_clustered(&mut self) -> Result<RunReport, RuntimeError> {
        let mut st = self.new_state();
        let k = self.config.num_clusters;
        let exchange = self.exchange_blocks();
        let mut book = ClusterBook::new(vec![st.global.select(&exchange)?; k]);
        let total = self.config.server.rounds as u64;
        for round in 0..total {
            let directive = if round == 0 {
                Directive::Train {
                    seed: self.plan_seed(round),
                    label_subset: None,
                    pseudo_label_threshold: None,
                }
            } else {
                Directive::ClusterTrain {
                    seed: self.plan_seed(round),
                }
            };
            let mut plan = RoundPlan {
                round_index: round,
                selected_client_ids: self.select(round)?,
                models: if round == 0 { vec![book.models[0].clone()] } else { book.models.clone() },
                directive,
            };
            self.hooks.round_start(&self.ctx(round), &mut plan);
            let mut uploads = self.run_plan(&plan)?;
            let failed = uploads.is_empty();
            if !failed {
                if round == 0 {
                    let groups = seed_clusters(book.k(), &uploads_params(&uploads))?;
                    for (u, c) in uploads.iter_mut().zip(groups) {
                        u.cluster_id = Some(c);
                    }
                }
                book = aggregate_clusters(&book, &uploads)?;
                for (&id, &c) in &book.assignment {
                    if uploads.iter().any(|u| u.client_id == id) {
                        self.log(round, Scope::Client(id), "cluster", c as f64)?;
                    }
                }
            }
            st.global.overwrite_from(&book.models[0])?;
            let mut summary = RoundSummary::new(round, plan.selected_client_ids.clone(), &uploads, failed);
            if self.is_eval_round(round, total) {
                let e = self.evaluate(round, &st.global.clone(), book.models.clone(), None, true)?;
                if let Some(e) = &e {
                    self.record_eval(round, e)?;
                    st.evals.push((round, e.clone()));
                }
                summary.accuracy = e.map(|e| e.accuracy);
            }
            self.finish_round(&mut st, summary)?;
        }
        let models = book
            .models
            .iter()
            .map(|m| {
                let mut full = st.global.clone();
                full.overwrite_from(m).map(|_| full)
            })
            .collect::<Result<Vec<_>, _>>()?;
        Ok(self.report(st, models, Vec::new()))
    }

    pub fn run(&mut self) -> Result<RunReport, RuntimeError> {
        match self.config.workflow {
            Workflow::Standard => self.run_standard(),
            Workflow::SemiServer => self.run_semi_server(),
            Workflow::Split => self.run_split(),
            Workflow::Clustered => self.run_clustered(),
            Workflow::Continual => {
                let c = &self.config.continual;
                let schedule = ContinualSchedule::new(c.tasks.clone(), c.rounds_per_task, self.spec.num_classes())
                    .map_err(|e| RuntimeError::Protocol(e.to_string()))?;
                self.run_continual(&schedule)
            }
        }
    }

    fn report(&self, st: RunState, cluster_models: Vec<ParameterSet>, accuracy_matrix: Vec<Vec<f64>>) -> RunReport {
        let best = st
            .evals
            .iter()
            .fold(None::<&(u64, EvalSummary)>, |b, e| match b {
                Some(b) if b.1.accuracy >= e.1.accuracy => Some(b),
                _ => Some(e),
            });
        let last = st.evals.last().map(|(_, e)| e.clone());
        let average_accuracy = accuracy_matrix
            .last()
            .map(|row| row.iter().sum::<f64>() / row.len() as f64);
        RunReport {
            task_id: self.task_id.clone(),
            workflow: self.config.workflow,
            rounds: st.rounds,
            final_model: st.global,
            cluster_models,
            best_accuracy: best.map(|b| b.1.accuracy),
            best_round: best.map(|b| b.0),
            final_accuracy: last.as_ref().map(|e| e.accuracy),
            final_unweighted_accuracy: last.as_ref().map(|e| e.unweighted_accuracy),
            final_fine_tuned_accuracy: last.and_then(|e| e.fine_tuned_accuracy),
            accuracy_matrix,
            average_accuracy,
        }
    }
}

fn uploads_params(uploads: &[UploadEnvelope]) -> Vec<&ParameterSet> {
    uploads.iter().map(|u| &u.parameters).collect()
}

/// Groups first-round uploads into `k` clusters: representatives are chosen
/// greedily by largest distance to those already chosen, and every upload
/// joins its nearest representative.
fn seed_clusters(k: usize, params: &[&ParameterSet]) -> Result<Vec<usize>, RuntimeError> {
    let k = k.min(params.len());
    let mut centers = vec![0usize];
    while centers.len() < k {
        let mut best = (0usize, -1.0f64);
        for (i, p) in params.iter().enumerate() {
            let d = centers
                .iter()
                .map(|&c| p.squared_distance(params[c]))
                .collect::<Result<Vec<_>, _>>()?
                .into_iter()
                .fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (i, d);
            }
        }
        centers.push(best.0);
    }
    params
        .iter()
        .map(|p| {
            let mut best = (0usize, f64::INFINITY);
            for (ci, &c) in centers.iter().enumerate() {
                let d = p.squared_distance(params[c])?;
                if d < best.1 {
                    best = (ci, d);
                }
            }
            Ok(best.0)
        })
        .collect()
}

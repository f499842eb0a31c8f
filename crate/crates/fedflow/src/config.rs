//! Experiment configuration.
//!
//! Configs are TOML documents with a handful of top-level keys and one table
//! per concern (`[data]`, `[server]`, `[client]`, `[model]`, `[semi]`,
//! `[continual]`). Every key is optional; unspecified keys take the defaults
//! listed in the README. Unknown keys are rejected.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("syntax error at line {line}, column {column}: {message}")]
    Syntax {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid config ({invariant}): {detail}")]
    Invalid {
        invariant: &'static str,
        detail: String,
    },
}

fn invalid(invariant: &'static str, detail: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        invariant,
        detail: detail.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitType {
    Iid,
    Dir,
    Shard,
    Hdir,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregatorKind {
    Fedavg,
    Fedyogi,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Exchange {
    Full,
    Partial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Workflow {
    Standard,
    SemiServer,
    Continual,
    Split,
    Clustered,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TestMode {
    TestInClient,
    TestInServer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OptimizerKind {
    #[serde(rename = "sgd", alias = "SGD")]
    Sgd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub dataset: String,
    pub split_type: SplitType,
    pub num_of_clients: usize,
    pub alpha: f64,
    pub shards_per_client: usize,
    pub seed: u64,
    /// Attribute that drives `dir` grouping and the first `hdir` stage.
    /// Unset means `dir` groups by label and `hdir` uses the first attribute.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub main_attribute: Option<String>,
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub num_features: usize,
    pub num_domains: usize,
    pub class_separation: f64,
    pub domain_shift: f64,
    /// Client populations with permuted label semantics (planted clusters).
    pub populations: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dataset: "blobs".into(),
            split_type: SplitType::Iid,
            num_of_clients: 10,
            alpha: 0.5,
            shards_per_client: 2,
            seed: 0,
            main_attribute: None,
            num_classes: 10,
            samples_per_class: 100,
            test_samples_per_class: 50,
            num_features: 8,
            num_domains: 1,
            class_separation: 3.0,
            domain_shift: 1.0,
            populations: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServerConfig {
    pub rounds: usize,
    pub clients_per_round: usize,
    pub aggregator: AggregatorKind,
    pub test_every: usize,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    /// Upload deadline per round in milliseconds; 0 waits indefinitely.
    pub round_deadline_ms: u64,
    pub executor: String,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            rounds: 100,
            clients_per_round: 10,
            aggregator: AggregatorKind::Fedavg,
            test_every: 1,
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            round_deadline_ms: 0,
            executor: "default".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerConfig {
    #[serde(rename = "type")]
    pub kind: OptimizerKind,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0005,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClientConfig {
    pub local_epoch: usize,
    pub batch_size: usize,
    pub proximal_mu: f64,
    pub loss: LossKind,
    pub executor: String,
    pub optimizer: OptimizerConfig,
    /// Local fine-tuning epochs before client-side evaluation.
    pub fine_tune_epochs: usize,
}

impl Default for ClientConfig {
    fn default() -> Self {
        Self {
            local_epoch: 5,
            batch_size: 32,
            proximal_mu: 0.0,
            loss: LossKind::CrossEntropy,
            executor: "default".into(),
            optimizer: OptimizerConfig::default(),
            fine_tune_epochs: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub hidden: Vec<usize>,
    pub exchange: Exchange,
    pub partial_blocks: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub split_layer: Option<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            name: "mlp".into(),
            hidden: vec![32],
            exchange: Exchange::Full,
            partial_blocks: Vec::new(),
            split_layer: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemiConfig {
    /// Fraction of the training set held, labeled, by the server.
    pub labeled_fraction: f64,
    pub pseudo_label_threshold: f64,
    pub warmup_epochs: usize,
    pub finetune_epochs: usize,
}

impl Default for SemiConfig {
    fn default() -> Self {
        Self {
            labeled_fraction: 0.1,
            pseudo_label_threshold: 0.95,
            warmup_epochs: 5,
            finetune_epochs: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ContinualConfig {
    /// Label subsets, one per task, in learning order.
    pub tasks: Vec<Vec<usize>>,
    pub rounds_per_task: usize,
    /// Share of each finished task's local samples cached for replay.
    pub replay_fraction: f64,
    pub drift_threshold: f64,
}

impl Default for ContinualConfig {
    fn default() -> Self {
        Self {
            tasks: Vec::new(),
            rounds_per_task: 10,
            replay_fraction: 0.0,
            drift_threshold: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskConfig {
    pub workflow: Workflow,
    pub test_mode: TestMode,
    pub num_clusters: usize,
    pub data: DataConfig,
    pub server: ServerConfig,
    pub client: ClientConfig,
    pub model: ModelConfig,
    pub semi: SemiConfig,
    pub continual: ContinualConfig,
}

impl Default for TaskConfig {
    fn default() -> Self {
        Self {
            workflow: Workflow::Standard,
            test_mode: TestMode::TestInClient,
            num_clusters: 2,
            data: DataConfig::default(),
            server: ServerConfig::default(),
            client: ClientConfig::default(),
            model: ModelConfig::default(),
            semi: SemiConfig::default(),
            continual: ContinualConfig::default(),
        }
    }
}

pub const BUILTIN_MODELS: [&str; 2] = ["linear_softmax", "mlp"];

impl TaskConfig {
    pub fn parse(source: &str) -> Result<TaskConfig, ConfigError> {
        let cfg: TaskConfig = toml::from_str(source).map_err(|e| {
            let (line, column) = e
                .span()
                .map(|s| line_col(source, s.start))
                .unwrap_or((1, 1));
            ConfigError::Syntax {
                line,
                column,
                message: e.message().to_string(),
            }
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is always representable as TOML")
    }

    /// Number of dense layers of the configured built-in model.
    pub fn layer_count(&self) -> usize {
        self.model.hidden.len() + 1
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let d = &self.data;
        let s = &self.server;
        let c = &self.client;
        let m = &self.model;
        if d.num_of_clients == 0 {
            return Err(invalid("num_of_clients >= 1", "no clients configured"));
        }
        if s.clients_per_round == 0 || s.clients_per_round > d.num_of_clients {
            return Err(invalid(
                "clients_per_round <= num_of_clients",
                format!(
                    "clients_per_round = {} with num_of_clients = {}",
                    s.clients_per_round, d.num_of_clients
                ),
            ));
        }
        if s.rounds == 0 {
            return Err(invalid("rounds >= 1", "rounds = 0"));
        }
        if c.local_epoch == 0 {
            return Err(invalid("local_epoch >= 1", "local_epoch = 0"));
        }
        if !(d.alpha > 0.0 && d.alpha.is_finite()) {
            return Err(invalid("alpha > 0", format!("alpha = {}", d.alpha)));
        }
        if d.shards_per_client == 0 {
            return Err(invalid("shards_per_client >= 1", "shards_per_client = 0"));
        }
        if c.batch_size == 0 {
            return Err(invalid("batch_size >= 1", "batch_size = 0"));
        }
        if !(c.proximal_mu >= 0.0 && c.proximal_mu.is_finite()) {
            return Err(invalid("proximal_mu >= 0", format!("proximal_mu = {}", c.proximal_mu)));
        }
        let o = &c.optimizer;
        if !(o.lr >= 0.0 && o.lr.is_finite())
            || !(o.momentum >= 0.0 && o.momentum < 1.0)
            || !(o.weight_decay >= 0.0 && o.weight_decay.is_finite())
        {
            return Err(invalid(
                "optimizer hyperparameters in range",
                format!("lr = {}, momentum = {}, weight_decay = {}", o.lr, o.momentum, o.weight_decay),
            ));
        }
        if s.test_every == 0 {
            return Err(invalid("test_every >= 1", "test_every = 0"));
        }
        if !(s.beta1 >= 0.0 && s.beta1 < 1.0) || !(s.beta2 > 0.0 && s.beta2 < 1.0) || !(s.tau > 0.0) || !(s.server_lr > 0.0)
        {
            return Err(invalid(
                "server optimizer hyperparameters in range",
                format!("beta1 = {}, beta2 = {}, tau = {}, server_lr = {}", s.beta1, s.beta2, s.tau, s.server_lr),
            ));
        }
        if d.num_classes < 2 {
            return Err(invalid("num_classes >= 2", format!("num_classes = {}", d.num_classes)));
        }
        if d.samples_per_class == 0 || d.test_samples_per_class == 0 || d.num_features == 0 || d.num_domains == 0 {
            return Err(invalid("dataset sizes positive", "a dataset size is zero"));
        }
        if d.populations == 0 || d.populations > d.num_of_clients {
            return Err(invalid(
                "1 <= populations <= num_of_clients",
                format!("populations = {}", d.populations),
            ));
        }
        if m.name.is_empty() {
            return Err(invalid("model name nonempty", "empty model name"));
        }
        if m.name == "linear_softmax" && !m.hidden.is_empty() {
            return Err(invalid("linear_softmax has no hidden layers", format!("hidden = {:?}", m.hidden)));
        }
        if m.name == "mlp" && m.hidden.is_empty() {
            return Err(invalid("mlp has >= 1 hidden layer", "hidden = []"));
        }
        if m.hidden.contains(&0) {
            return Err(invalid("hidden widths positive", format!("hidden = {:?}", m.hidden)));
        }
        match (m.exchange, m.partial_blocks.is_empty()) {
            (Exchange::Partial, true) => {
                return Err(invalid("partial_blocks nonempty iff exchange = partial", "exchange = partial with no blocks"))
            }
            (Exchange::Full, false) => {
                return Err(invalid("partial_blocks nonempty iff exchange = partial", "partial_blocks set with exchange = full"))
            }
            _ => {}
        }
        match (self.workflow, m.split_layer) {
            (Workflow::Split, None) => return Err(invalid("split_layer set iff workflow = split", "split workflow without split_layer")),
            (Workflow::Split, Some(l)) => {
                if l == 0 || l >= self.layer_count() {
                    return Err(invalid(
                        "1 <= split_layer < layer count",
                        format!("split_layer = {} with {} layers", l, self.layer_count()),
                    ));
                }
            }
            (_, Some(_)) => return Err(invalid("split_layer set iff workflow = split", "split_layer set outside split workflow")),
            _ => {}
        }
        if self.workflow == Workflow::Clustered && self.num_clusters == 0 {
            return Err(invalid("num_clusters >= 1", "num_clusters = 0"));
        }
        let semi = &self.semi;
        if !(semi.labeled_fraction > 0.0 && semi.labeled_fraction < 1.0) {
            return Err(invalid(
                "0 < labeled_fraction < 1",
                format!("labeled_fraction = {}", semi.labeled_fraction),
            ));
        }
        if !(0.0..=1.0).contains(&semi.pseudo_label_threshold) {
            return Err(invalid(
                "0 <= pseudo_label_threshold <= 1",
                format!("pseudo_label_threshold = {}", semi.pseudo_label_threshold),
            ));
        }
        let cont = &self.continual;
        if !(0.0..=1.0).contains(&cont.replay_fraction) {
            return Err(invalid("0 <= replay_fraction <= 1", format!("replay_fraction = {}", cont.replay_fraction)));
        }
        if !(cont.drift_threshold > 0.0 && cont.drift_threshold <= std::f64::consts::LN_2) {
            return Err(invalid("0 < drift_threshold <= ln 2", format!("drift_threshold = {}", cont.drift_threshold)));
        }
        if self.workflow == Workflow::Continual {
            if cont.tasks.is_empty() {
                return Err(invalid("continual schedule nonempty", "no continual tasks"));
            }
            if cont.rounds_per_task == 0 {
                return Err(invalid("rounds_per_task >= 1", "rounds_per_task = 0"));
            }
            crate::runtime::ContinualSchedule::new(cont.tasks.clone(), cont.rounds_per_task, d.num_classes)
                .map_err(|e| invalid("continual label subsets disjoint", e.to_string()))?;
        }
        Ok(())
    }
}

fn line_col(source: &str, offset: usize) -> (usize, usize) {
    let prefix = &source[..offset.min(source.len())];
    let line = prefix.matches('\n').count() + 1;
    let column = prefix.rfind('\n').map_or(prefix.len(), |nl| prefix.len() - nl - 1) + 1;
    (line, column)
}

#[cfg(test)]
mod tests {
    use super::*;

    const REFERENCE: &str = r#"
test_mode = "test_in_client"

[data]
dataset = "domainnet-analog"
split_type = "iid"
num_of_clients = 6

[server]
rounds = 100
clients_per_round = 6

[client]
local_epoch = 5

[client.optimizer]
type = "SGD"
lr = 0.01
momentum = 0.9
weight_decay = 0.0005
"#;

    #[test]
    fn reference_document() {
        let c = TaskConfig::parse(REFERENCE).unwrap();
        assert_eq!(c.data.dataset, "domainnet-analog");
        assert_eq!(c.data.split_type, SplitType::Iid);
        assert_eq!(c.data.num_of_clients, 6);
        assert_eq!(c.server.rounds, 100);
        assert_eq!(c.server.clients_per_round, 6);
        assert_eq!(c.client.local_epoch, 5);
        assert_eq!(c.client.optimizer.lr, 0.01);
        assert_eq!(c.client.optimizer.momentum, 0.9);
        assert_eq!(c.client.optimizer.weight_decay, 0.0005);
        assert_eq!(c.test_mode, TestMode::TestInClient);
    }

    #[test]
    fn empty_document_is_defaults() {
        let c = TaskConfig::parse("").unwrap();
        assert_eq!(c, TaskConfig::default());
        assert_eq!(c.client.batch_size, 32);
        assert_eq!(c.client.optimizer.lr, 0.01);
        assert_eq!(c.client.optimizer.momentum, 0.9);
        assert_eq!(c.client.optimizer.weight_decay, 0.0005);
        assert_eq!(c.client.local_epoch, 5);
    }

    #[test]
    fn too_many_clients_per_round() {
        let err = TaskConfig::parse("[data]\nnum_of_clients = 10\n[server]\nclients_per_round = 20\n").unwrap_err();
        assert!(matches!(
            err,
            ConfigError::Invalid { invariant: "clients_per_round <= num_of_clients", .. }
        ));
    }

    #[test]
    fn syntax_error_reports_position() {
        let err = TaskConfig::parse("[data]\nnum_of_clients = = 3\n").unwrap_err();
        match err {
            ConfigError::Syntax { line, .. } => assert_eq!(line, 2),
            other => panic!("expected syntax error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_keys_are_errors() {
        assert!(matches!(
            TaskConfig::parse("[server]\nround = 3\n"),
            Err(ConfigError::Syntax { .. })
        ));
        assert!(TaskConfig::parse("colour = 1\n").is_err());
    }

    #[test]
    fn partial_exchange_needs_blocks() {
        let err = TaskConfig::parse("[model]\nexchange = \"partial\"\n").unwrap_err();
        assert!(matches!(err, ConfigError::Invalid { invariant: "partial_blocks nonempty iff exchange = partial", .. }));
        assert!(TaskConfig::parse("[model]\npartial_blocks = [\"layer0.weight\"]\n").is_err());
        assert!(TaskConfig::parse("[model]\nexchange = \"partial\"\npartial_blocks = [\"layer0.weight\"]\n").is_ok());
    }

    #[test]
    fn split_layer_only_with_split_workflow() {
        assert!(TaskConfig::parse("[model]\nsplit_layer = 1\n").is_err());
        assert!(TaskConfig::parse("workflow = \"split\"\n").is_err());
        assert!(TaskConfig::parse("workflow = \"split\"\n[model]\nhidden = [8, 8]\nsplit_layer = 2\n").is_ok());
        assert!(TaskConfig::parse("workflow = \"split\"\n[model]\nhidden = [8]\nsplit_layer = 2\n").is_err());
    }

    #[test]
    fn other_invariants() {
        for doc in [
            "[data]\nalpha = 0.0\n",
            "[server]\nrounds = 0\n",
            "[client]\nlocal_epoch = 0\n",
            "[client]\nproximal_mu = -1.0\n",
            "[model]\nname = \"linear_softmax\"\n",
            "[model]\nhidden = []\n",
            "workflow = \"continual\"\n[continual]\ntasks = [[0, 1], [1, 2]]\n",
            "[data]\nnum_classes = 1\n",
        ] {
            assert!(matches!(TaskConfig::parse(doc), Err(ConfigError::Invalid { .. })), "{doc}");
        }
        assert!(TaskConfig::parse("[model]\nname = \"linear_softmax\"\nhidden = []\n").is_ok());
    }

    #[test]
    fn round_trip_is_fixed_point() {
        let mut c = TaskConfig::parse(REFERENCE).unwrap();
        c.model.split_layer = None;
        c.data.main_attribute = Some("attr_a".into());
        c.continual.tasks = vec![vec![0, 1], vec![2]];
        let text = c.to_toml();
        let back = TaskConfig::parse(&text).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_toml(), text);
    }
}

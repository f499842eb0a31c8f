use std::collections::BTreeMap;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::hooks::{ClientHooks, HookError, ServerHooks};
use super::RuntimeError;
use crate::config::{DataConfig, ModelConfig};
use crate::data::{generate, BlobSpec, Dataset};
use crate::learner::ModelSpec;

/// Builds `(train, test)` from the data config.
pub type DatasetFactory = Arc<dyn Fn(&DataConfig) -> Result<(Dataset, Dataset), HookError> + Send + Sync>;
/// Builds a model for `(inputs, classes)` from the model config.
pub type ModelFactory = Arc<dyn Fn(&ModelConfig, usize, usize) -> Result<ModelSpec, HookError> + Send + Sync>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ComponentKind {
    Dataset,
    Model,
    Client,
    Server,
}

#[derive(Clone)]
pub enum Component {
    Dataset(DatasetFactory),
    Model(ModelFactory),
    Client(ClientHooks),
    Server(ServerHooks),
}

impl Component {
    pub fn kind(&self) -> ComponentKind {
        match self {
            Component::Dataset(_) => ComponentKind::Dataset,
            Component::Model(_) => ComponentKind::Model,
            Component::Client(_) => ComponentKind::Client,
            Component::Server(_) => ComponentKind::Server,
        }
    }
}

/// Named datasets, models, and client/server executors that configs refer
/// to by name.
#[derive(Clone, Default)]
pub struct ComponentRegistry {
    entries: BTreeMap<(ComponentKind, String), Component>,
}

pub const DOMAINNET_ANALOG_DOMAINS: usize = 6;

impl ComponentRegistry {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Registry holding the built-in components: datasets `blobs` and
    /// `domainnet-analog`, models `linear_softmax` and `mlp`, executors
    /// `default`.
    pub fn with_builtins() -> Self {
        let mut r = Self::empty();
        let blobs: DatasetFactory = Arc::new(|d: &DataConfig| Ok(generate(&BlobSpec::from_config(d))));
        let domains: DatasetFactory = Arc::new(|d: &DataConfig| {
            let mut spec = BlobSpec::from_config(d);
            spec.num_domains = DOMAINNET_ANALOG_DOMAINS;
            Ok(generate(&spec))
        });
        let linear: ModelFactory = Arc::new(|_: &ModelConfig, inputs, classes| Ok(ModelSpec::linear(inputs, classes)));
        let mlp: ModelFactory =
            Arc::new(|m: &ModelConfig, inputs, classes| Ok(ModelSpec::mlp(inputs, &m.hidden, classes)));
        for (name, c) in [
            ("blobs", Component::Dataset(blobs)),
            ("domainnet-analog", Component::Dataset(domains)),
            ("linear_softmax", Component::Model(linear)),
            ("mlp", Component::Model(mlp)),
            ("default", Component::Client(ClientHooks::default())),
            ("default", Component::Server(ServerHooks::default())),
        ] {
            r.register(name, c).expect("builtin names are distinct");
        }
        r
    }

    /// Adds a component; a second registration under the same kind and
    /// name is rejected.
    pub fn register(&mut self, name: &str, component: Component) -> Result<(), RuntimeError> {
        let key = (component.kind(), name.to_string());
        if self.entries.contains_key(&key) {
            return Err(RuntimeError::Registry(format!("{:?} `{name}` is already registered", key.0)));
        }
        self.entries.insert(key, component);
        Ok(())
    }

    pub fn register_dataset(&mut self, name: &str, f: DatasetFactory) -> Result<(), RuntimeError> {
        self.register(name, Component::Dataset(f))
    }

    pub fn register_model(&mut self, name: &str, f: ModelFactory) -> Result<(), RuntimeError> {
        self.register(name, Component::Model(f))
    }

    pub fn register_client(&mut self, name: &str, hooks: ClientHooks) -> Result<(), RuntimeError> {
        self.register(name, Component::Client(hooks))
    }

    pub fn register_server(&mut self, name: &str, hooks: ServerHooks) -> Result<(), RuntimeError> {
        self.register(name, Component::Server(hooks))
    }

    fn get(&self, kind: ComponentKind, name: &str) -> Result<&Component, RuntimeError> {
        self.entries
            .get(&(kind, name.to_string()))
            .ok_or_else(|| RuntimeError::Registry(format!("no {kind:?} named `{name}`")))
    }

    pub fn dataset(&self, name: &str) -> Result<DatasetFactory, RuntimeError> {
        match self.get(ComponentKind::Dataset, name)? {
            Component::Dataset(f) => Ok(f.clone()),
            _ => unreachable!("keyed by kind"),
        }
    }

    pub fn model(&self, name: &str) -> Result<ModelFactory, RuntimeError> {
        match self.get(ComponentKind::Model, name)? {
            Component::Model(f) => Ok(f.clone()),
            _ => unreachable!("keyed by kind"),
        }
    }

    pub fn client(&self, name: &str) -> Result<ClientHooks, RuntimeError> {
        match self.get(ComponentKind::Client, name)? {
            Component::Client(h) => Ok(h.clone()),
            _ => unreachable!("keyed by kind"),
        }
    }

    pub fn server(&self, name: &str) -> Result<ServerHooks, RuntimeError> {
        match self.get(ComponentKind::Server, name)? {
            Component::Server(h) => Ok(h.clone()),
            _ => unreachable!("keyed by kind"),
        }
    }

    pub fn names(&self, kind: ComponentKind) -> Vec<String> {
        self.entries
            .keys()
            .filter(|(k, _)| *k == kind)
            .map(|(_, n)| n.clone())
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClientEntry {
    pub num_train: usize,
    pub num_test: usize,
    pub available: bool,
    pub address: String,
}

/// Known clients and their availability.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ClientRegistry {
    entries: BTreeMap<usize, ClientEntry>,
}

impl ClientRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: usize, entry: ClientEntry) -> Result<(), RuntimeError> {
        if self.entries.contains_key(&id) {
            return Err(RuntimeError::Registry(format!("client {id} registered twice")));
        }
        self.entries.insert(id, entry);
        Ok(())
    }

    pub fn get(&self, id: usize) -> Option<&ClientEntry> {
        self.entries.get(&id)
    }

    pub fn set_available(&mut self, id: usize, available: bool) {
        if let Some(e) = self.entries.get_mut(&id) {
            e.available = available;
        }
    }

    pub fn ids(&self) -> Vec<usize> {
        self.entries.keys().copied().collect()
    }

    pub fn available_ids(&self) -> Vec<usize> {
        self.entries.iter().filter(|(_, e)| e.available).map(|(&id, _)| id).collect()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Uniform sample without replacement of `min(k, available)` available
/// clients, returned sorted. Deterministic in `(seed, round)`.
pub fn select_clients(registry: &ClientRegistry, k: usize, round: u64, seed: u64) -> Result<Vec<usize>, RuntimeError> {
    let available = registry.available_ids();
    if available.is_empty() {
        return Err(RuntimeError::NoAvailableClients);
    }
    if k >= available.len() {
        return Ok(available);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(round);
    let mut picked: Vec<usize> = rand::seq::index::sample(&mut rng, available.len(), k)
        .into_iter()
        .map(|i| available[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::registry::ComponentRegistry;
use super::RuntimeError;
use crate::config::{SplitType, TaskConfig, Workflow};
use crate::data::{
    heterogeneity_report, partition_populations, partition_subset, Dataset, HeterogeneityReport, HistogramSource, Partition,
    PartitionSpec, Samples,
};
use crate::learner::ModelSpec;

/// Everything a task needs before its first round: data, partitions, and
/// the model architecture.
#[derive(Debug, Clone)]
pub struct Materialized {
    pub spec: ModelSpec,
    pub train: Dataset,
    pub test: Dataset,
    /// Client shards of the training set.
    pub partition: Partition,
    /// Client shards of the test set, drawn with the same spec.
    pub test_partition: Partition,
    /// Training indices held, labeled, by the server.
    pub server_labeled: Option<Vec<usize>>,
}

impl Materialized {
    pub fn client_samples(&self, id: usize) -> Result<(Samples, Samples), RuntimeError> {
        let train = self
            .partition
            .clients
            .get(id)
            .ok_or_else(|| RuntimeError::Protocol(format!("unknown client id {id}")))?;
        let test = &self.test_partition.clients[id];
        Ok((self.train.samples(&train.sample_indices), self.test.samples(&test.sample_indices)))
    }

    pub fn server_samples(&self) -> Option<Samples> {
        self.server_labeled.as_ref().map(|idx| self.train.samples(idx))
    }

    /// Pairwise label divergence, or attribute divergence when the split
    /// is driven by an attribute.
    pub fn heterogeneity(&self) -> Result<HeterogeneityReport, RuntimeError> {
        let spec = &self.partition.spec;
        let source = match (&spec.main_attribute, spec.split_type) {
            (Some(a), SplitType::Dir | SplitType::Hdir) => HistogramSource::Attribute(a.clone()),
            (None, SplitType::Hdir) => HistogramSource::Attribute(
                self.train
                    .attributes
                    .first()
                    .map(|a| a.name.clone())
                    .unwrap_or_default(),
            ),
            _ => HistogramSource::Label,
        };
        Ok(heterogeneity_report(&self.partition, &self.train, &source)?)
    }
}

/// Per class, a seeded `fraction` of the samples (at least one) goes to the
/// server; returns `(server, rest)`, both sorted.
pub fn labeled_split(d: &Dataset, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(7);
    let mut server = Vec::new();
    let mut rest = Vec::new();
    for c in 0..d.num_classes {
        let mut idx: Vec<usize> = (0..d.len()).filter(|&i| d.labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        idx.shuffle(&mut rng);
        let take = ((fraction * idx.len() as f64).round() as usize).clamp(1, idx.len());
        server.extend_from_slice(&idx[..take]);
        rest.extend_from_slice(&idx[take..]);
    }
    server.sort_unstable();
    rest.sort_unstable();
    (server, rest)
}

fn split_test(test: &Dataset, spec: &PartitionSpec, populations: usize) -> Result<Partition, RuntimeError> {
    match partition_populations(test, spec, populations) {
        Ok(p) => Ok(p),
        Err(_) => {
            let mut iid = spec.clone();
            iid.split_type = SplitType::Iid;
            Ok(partition_populations(test, &iid, populations)?)
        }
    }
}

pub fn materialize(config: &TaskConfig, registry: &ComponentRegistry) -> Result<Materialized, RuntimeError> {
    let d = &config.data;
    let (train, test) = registry.dataset(&d.dataset)?(d).map_err(|e| RuntimeError::Component(e.to_string()))?;
    for (what, ds) in [("training", &train), ("test", &test)] {
        ds.validate()
            .map_err(|e| RuntimeError::Component(format!("dataset `{}` {what} split: {e}", d.dataset)))?;
    }
    if train.num_features != test.num_features || train.num_classes != test.num_classes {
        return Err(RuntimeError::Component(format!(
            "dataset `{}` train and test splits disagree on shape",
            d.dataset
        )));
    }
    let spec = registry.model(&config.model.name)?(&config.model, train.num_features, train.num_classes)
        .map_err(|e| RuntimeError::Component(e.to_string()))?;
    spec.validate()
        .map_err(|e| RuntimeError::Component(format!("model `{}`: {e}", config.model.name)))?;
    if spec.num_inputs() != train.num_features || spec.num_classes() != train.num_classes {
        return Err(RuntimeError::Component(format!(
            "model `{}` does not fit {} features and {} classes",
            config.model.name, train.num_features, train.num_classes
        )));
    }
    for name in &config.model.partial_blocks {
        if !spec.block_names(0..spec.num_layers()).contains(name) {
            return Err(RuntimeError::Component(format!("partial block `{name}` is not a model block")));
        }
    }
    if let Some(s) = config.model.split_layer {
        if s >= spec.num_layers() {
            return Err(RuntimeError::Component(format!(
                "split_layer {s} invalid for a {}-layer model",
                spec.num_layers()
            )));
        }
    }
    let pspec = PartitionSpec::from_config(d);
    let (partition, server_labeled) = if config.workflow == Workflow::SemiServer {
        let (server, rest) = labeled_split(&train, config.semi.labeled_fraction, d.seed);
        (partition_subset(&train, &rest, &pspec)?, Some(server))
    } else {
        (partition_populations(&train, &pspec, d.populations)?, None)
    };
    let populations = if server_labeled.is_some() { 1 } else { d.populations };
    let test_partition = split_test(&test, &pspec, populations)?;
    Ok(Materialized {
        spec,
        train,
        test,
        partition,
        test_partition,
        server_labeled,
    })
}

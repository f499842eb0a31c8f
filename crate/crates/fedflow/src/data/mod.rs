//! Synthetic datasets, client partitioning, and heterogeneity measurement.

mod divergence;
mod mapping;
mod partition;

pub use divergence::{heterogeneity_report, js_divergence, normalize, HeterogeneityReport, HistogramSource};
pub use partition::{
    partition, partition_dirichlet, partition_hdir, partition_iid, partition_populations, partition_shard, partition_subset, ClientPartition,
    Partition, PartitionSpec,
};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DataError {
    #[error("{clients} clients requested but only {samples} samples available")]
    TooFewSamples { clients: usize, samples: usize },
    #[error("could not give every client a sample")]
    Infeasible,
    #[error("{samples} samples cannot be cut into {shards} equal shards")]
    ShardsIndivisible { samples: usize, shards: usize },
    #[error("split type {0:?} does not match the partition routine")]
    WrongSplitType(crate::config::SplitType),
    #[error("dataset has no attribute `{0}`")]
    MissingAttribute(String),
    #[error("hierarchical split needs at least 3 attributes, dataset has {0}")]
    TooFewAttributes(usize),
    #[error("client {0} has no samples")]
    EmptyClient(usize),
    #[error("distribution lengths differ ({0} vs {1})")]
    LengthMismatch(usize, usize),
    #[error("input is not a probability vector (sum = {0})")]
    NotNormalized(f64),
    #[error("malformed {what}: {detail}")]
    Malformed { what: &'static str, detail: String },
    #[error("inconsistent dataset: {0}")]
    Inconsistent(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Test,
}

/// Per-sample categorical attribute.
#[derive(Debug, Clone, PartialEq)]
pub struct Attribute {
    pub name: String,
    pub num_categories: usize,
    pub values: Vec<usize>,
}

/// Labeled feature matrix with per-sample metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Vec<f32>,
    pub num_features: usize,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub attributes: Vec<Attribute>,
    pub domain_ids: Option<Vec<usize>>,
    /// Planted population of each sample, when the dataset has several.
    pub populations: Option<Vec<usize>>,
    pub split: SplitTag,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn attribute(&self, name: &str) -> Option<&Attribute> {
        self.attributes.iter().find(|a| a.name == name)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let n = self.labels.len();
        if self.num_classes < 2 {
            return Err(DataError::Inconsistent("fewer than two classes".into()));
        }
        if self.num_features == 0 || self.features.len() != n * self.num_features {
            return Err(DataError::Inconsistent("feature matrix does not match label count".into()));
        }
        if self.labels.iter().any(|&l| l >= self.num_classes) {
            return Err(DataError::Inconsistent("label out of range".into()));
        }
        for a in &self.attributes {
            if a.values.len() != n || a.values.iter().any(|&v| v >= a.num_categories) {
                return Err(DataError::Inconsistent(format!("attribute `{}` malformed", a.name)));
            }
        }
        for extra in [&self.domain_ids, &self.populations].into_iter().flatten() {
            if extra.len() != n {
                return Err(DataError::Inconsistent("per-sample metadata length mismatch".into()));
            }
        }
        Ok(())
    }

    pub fn samples(&self, indices: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Samples {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_features: self.num_features,
        }
    }

    pub fn all_samples(&self) -> Samples {
        Samples {
            features: self.features.clone(),
            labels: self.labels.clone(),
            num_features: self.num_features,
        }
    }

    pub fn label_histogram(&self, indices: &[usize]) -> Vec<usize> {
        let mut h = vec![0; self.num_classes];
        for &i in indices {
            h[self.labels[i]] += 1;
        }
        h
    }
}

/// A materialized training or evaluation batch source.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Samples {
    pub features: Vec<f32>,
    pub labels: Vec<usize>,
    pub num_features: usize,
}

impl Samples {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.features[i * self.num_features..(i + 1) * self.num_features]
    }

    pub fn select(&self, indices: &[usize]) -> Samples {
        let mut features = Vec::with_capacity(indices.len() * self.num_features);
        for &i in indices {
            features.extend_from_slice(self.row(i));
        }
        Samples {
            features,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_features: self.num_features,
        }
    }

    /// Keeps samples whose label is in `labels`.
    pub fn filter_labels(&self, labels: &[usize]) -> Samples {
        let keep: Vec<usize> = (0..self.len()).filter(|&i| labels.contains(&self.labels[i])).collect();
        self.select(&keep)
    }

    pub fn extend(&mut self, other: &Samples) {
        if self.is_empty() {
            self.num_features = other.num_features;
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
    }
}

/// Parameters of the Gaussian-blob generator.
#[derive(Debug, Clone, PartialEq)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_samples_per_class: usize,
    pub num_features: usize,
    pub num_domains: usize,
    /// Expected distance between two class means, in units of the noise scale.
    pub class_separation: f64,
    /// Per-feature offset added for each successive domain.
    pub domain_shift: f64,
    pub populations: usize,
    pub seed: u64,
}

impl BlobSpec {
    pub fn new(num_classes: usize, samples_per_class: usize, num_features: usize, num_domains: usize, seed: u64) -> Self {
        Self {
            num_classes,
            samples_per_class,
            test_samples_per_class: samples_per_class,
            num_features,
            num_domains,
            class_separation: 4.0,
            domain_shift: 1.0,
            populations: 1,
            seed,
        }
    }

    pub fn from_config(d: &crate::config::DataConfig) -> Self {
        Self {
            num_classes: d.num_classes,
            samples_per_class: d.samples_per_class,
            test_samples_per_class: d.test_samples_per_class,
            num_features: d.num_features,
            num_domains: d.num_domains,
            class_separation: d.class_separation,
            domain_shift: d.domain_shift,
            populations: d.populations,
            seed: d.seed,
        }
    }
}

/// Names and category priors of the three synthetic attributes.
pub const ATTRIBUTES: [(&str, &[f64]); 3] = [
    ("attr_a", &[0.40, 0.25, 0.15, 0.12, 0.08]),
    ("attr_b", &[0.45, 0.30, 0.15, 0.10]),
    ("attr_c", &[0.55, 0.30, 0.15]),
];

/// Convenience form of [`generate`] with default separation and shift.
pub fn generate_blobs(
    num_classes: usize,
    samples_per_class: usize,
    num_features: usize,
    num_domains: usize,
    seed: u64,
) -> (Dataset, Dataset) {
    generate(&BlobSpec::new(num_classes, samples_per_class, num_features, num_domains, seed))
}

/// Class-conditional Gaussian blobs with unit noise.
///
/// Domain `d` adds `d * domain_shift` to every feature. Population `p`
/// relabels class `c` as `(c + p) % num_classes`. Attributes are drawn
/// independently of the label from the priors in [`ATTRIBUTES`], with
/// `attr_b` partially tied to `attr_a`.
pub fn generate(spec: &BlobSpec) -> (Dataset, Dataset) {
    assert!(spec.num_classes >= 2 && spec.num_features > 0 && spec.num_domains > 0 && spec.populations > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let scale = spec.class_separation / (2.0 * spec.num_features as f64).sqrt();
    let means: Vec<Vec<f64>> = (0..spec.num_classes)
        .map(|_| {
            (0..spec.num_features)
                .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
                .collect()
        })
        .collect();
    let train = sample_split(spec, &means, spec.samples_per_class, SplitTag::Train, &mut rng);
    let test = sample_split(spec, &means, spec.test_samples_per_class, SplitTag::Test, &mut rng);
    (train, test)
}

fn sample_split(spec: &BlobSpec, means: &[Vec<f64>], per_class: usize, split: SplitTag, rng: &mut ChaCha8Rng) -> Dataset {
    let n = spec.num_classes * per_class;
    let mut features = Vec::with_capacity(n * spec.num_features);
    let mut labels = Vec::with_capacity(n);
    let mut domains = Vec::with_capacity(n);
    let mut pops = Vec::with_capacity(n);
    let mut attrs: Vec<Vec<usize>> = vec![Vec::with_capacity(n); ATTRIBUTES.len()];
    for (class, mean) in means.iter().enumerate() {
        for i in 0..per_class {
            let domain = i % spec.num_domains;
            let pop = (i / spec.num_domains) % spec.populations;
            let shift = spec.domain_shift * domain as f64;
            for &m in mean {
                let noise: f64 = rng.sample(StandardNormal);
                features.push((m + noise + shift) as f32);
            }
            labels.push((class + pop) % spec.num_classes);
            domains.push(domain);
            pops.push(pop);
            let a = categorical(ATTRIBUTES[0].1, rng);
            let b = if rng.random::<f64>() < 0.5 {
                a % ATTRIBUTES[1].1.len()
            } else {
                categorical(ATTRIBUTES[1].1, rng)
            };
            let c = categorical(ATTRIBUTES[2].1, rng);
            attrs[0].push(a);
            attrs[1].push(b);
            attrs[2].push(c);
        }
    }
    Dataset {
        features,
        num_features: spec.num_features,
        labels,
        num_classes: spec.num_classes,
        attributes: ATTRIBUTES
            .iter()
            .zip(attrs)
            .map(|((name, prior), values)| Attribute {
                name: name.to_string(),
                num_categories: prior.len(),
                values,
            })
            .collect(),
        domain_ids: (spec.num_domains > 1).then_some(domains),
        populations: (spec.populations > 1).then_some(pops),
        split,
    }
}

fn categorical(weights: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let dist = rand::distr::weighted::WeightedIndex::new(weights).expect("static weights are valid");
    dist.sample(rng)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn two_class_blobs_are_balanced() {
        let (train, test) = generate_blobs(2, 50, 2, 1, 3);
        assert_eq!(train.len(), 100);
        assert_eq!(train.label_histogram(&(0..100).collect::<Vec<_>>()), vec![50, 50]);
        assert_eq!(test.split, SplitTag::Test);
        train.validate().unwrap();
        test.validate().unwrap();
    }

    #[test]
    fn generation_is_deterministic() {
        assert_eq!(generate_blobs(3, 20, 4, 2, 9), generate_blobs(3, 20, 4, 2, 9));
        assert_ne!(generate_blobs(3, 20, 4, 2, 9).0, generate_blobs(3, 20, 4, 2, 10).0);
    }

    #[test]
    fn domain_means_differ_by_shift() {
        let mut spec = BlobSpec::new(10, 100, 8, 6, 21);
        spec.domain_shift = 2.0;
        let (train, _) = generate(&spec);
        let domains = train.domain_ids.as_ref().unwrap();
        let mut sums = vec![vec![0.0f64; 8]; 6];
        let mut counts = vec![0usize; 6];
        for i in 0..train.len() {
            counts[domains[i]] += 1;
            for (s, &x) in sums[domains[i]].iter_mut().zip(train.row(i)) {
                *s += f64::from(x);
            }
        }
        for d in 1..6 {
            for j in 0..8 {
                let diff = sums[d][j] / counts[d] as f64 - sums[0][j] / counts[0] as f64;
                // 1000/6 samples per domain: noise std of a mean difference is ~0.11
                assert!((diff - 2.0 * d as f64).abs() < 0.5, "domain {d} feature {j}: {diff}");
            }
        }
    }

    #[test]
    fn populations_permute_labels() {
        let mut spec = BlobSpec::new(4, 10, 2, 1, 1);
        spec.populations = 2;
        let (train, _) = generate(&spec);
        let pops = train.populations.as_ref().unwrap();
        for i in 0..train.len() {
            let class = i / 10;
            assert_eq!(train.labels[i], (class + pops[i]) % 4);
        }
    }

    #[test]
    fn samples_select_and_filter() {
        let (train, _) = generate_blobs(3, 4, 2, 1, 0);
        let s = train.samples(&[0, 5, 11]);
        assert_eq!(s.labels, vec![0, 1, 2]);
        assert_eq!(s.row(1), train.row(5));
        let f = s.filter_labels(&[1, 2]);
        assert_eq!(f.labels, vec![1, 2]);
    }
}

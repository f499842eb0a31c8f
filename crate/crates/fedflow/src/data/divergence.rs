use std::fmt::Write as _;

use super::{DataError, Dataset, Partition};

const NORMALIZATION_TOLERANCE: f64 = 1e-9;

/// Jensen–Shannon divergence in nats, bounded by `ln 2`.
pub fn js_divergence(p: &[f64], q: &[f64]) -> Result<f64, DataError> {
    if p.len() != q.len() {
        return Err(DataError::LengthMismatch(p.len(), q.len()));
    }
    for dist in [p, q] {
        let sum: f64 = dist.iter().sum();
        if dist.iter().any(|&x| !(x >= 0.0)) || (sum - 1.0).abs() > NORMALIZATION_TOLERANCE {
            return Err(DataError::NotNormalized(sum));
        }
    }
    let mut js = 0.0;
    for (&a, &b) in p.iter().zip(q) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            js += 0.5 * a * (a / m).ln();
        }
        if b > 0.0 {
            js += 0.5 * b * (b / m).ln();
        }
    }
    Ok(js.clamp(0.0, std::f64::consts::LN_2))
}

/// Counts to proportions; `None` for an all-zero histogram.
pub fn normalize(counts: &[usize]) -> Option<Vec<f64>> {
    let total: usize = counts.iter().sum();
    (total > 0).then(|| counts.iter().map(|&c| c as f64 / total as f64).collect())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum HistogramSource {
    Label,
    Attribute(String),
}

impl HistogramSource {
    pub fn name(&self) -> &str {
        match self {
            HistogramSource::Label => "label",
            HistogramSource::Attribute(a) => a,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeterogeneityReport {
    pub source: String,
    pub pairwise_js: Vec<Vec<f64>>,
    pub sample_counts: Vec<usize>,
    /// Largest client size over smallest.
    pub imbalance_ratio: f64,
    pub repairs: usize,
}

impl HeterogeneityReport {
    /// Mean over off-diagonal pairs; zero for a single client.
    pub fn mean_js(&self) -> f64 {
        let k = self.pairwise_js.len();
        if k < 2 {
            return 0.0;
        }
        let mut sum = 0.0;
        for i in 0..k {
            for j in (i + 1)..k {
                sum += self.pairwise_js[i][j];
            }
        }
        sum / (k * (k - 1) / 2) as f64
    }

    pub fn max_js(&self) -> f64 {
        self.pairwise_js.iter().flatten().copied().fold(0.0, f64::max)
    }

    /// Text form: a header of summary statistics followed by the matrix,
    /// one row per line, values in shortest round-trip notation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        writeln!(out, "source {}", self.source).unwrap();
        writeln!(out, "clients {}", self.sample_counts.len()).unwrap();
        writeln!(out, "mean_js {:?}", self.mean_js()).unwrap();
        writeln!(out, "max_js {:?}", self.max_js()).unwrap();
        writeln!(out, "imbalance_ratio {:?}", self.imbalance_ratio).unwrap();
        writeln!(out, "repairs {}", self.repairs).unwrap();
        writeln!(out, "counts {}", join(self.sample_counts.iter())).unwrap();
        writeln!(out, "matrix").unwrap();
        for row in &self.pairwise_js {
            writeln!(out, "{}", row.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(" ")).unwrap();
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self, DataError> {
        let bad = |detail: String| DataError::Malformed {
            what: "heterogeneity report",
            detail,
        };
        let mut lines = text.lines();
        let mut field = |key: &str| -> Result<String, DataError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or(Some(r)))
                .map(str::to_string)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let source = field("source")?;
        let clients: usize = field("clients")?.parse().map_err(|e| bad(format!("{e}")))?;
        field("mean_js")?;
        field("max_js")?;
        let imbalance_ratio: f64 = field("imbalance_ratio")?.parse().map_err(|e| bad(format!("{e}")))?;
        let repairs: usize = field("repairs")?.parse().map_err(|e| bad(format!("{e}")))?;
        let sample_counts = field("counts")?
            .split_whitespace()
            .map(|t| t.parse::<usize>().map_err(|e| bad(format!("{e}"))))
            .collect::<Result<Vec<_>, _>>()?;
        field("matrix")?;
        let pairwise_js = lines
            .take(clients)
            .map(|l| {
                l.split_whitespace()
                    .map(|t| t.parse::<f64>().map_err(|e| bad(format!("{e}"))))
                    .collect::<Result<Vec<_>, _>>()
            })
            .collect::<Result<Vec<_>, _>>()?;
        if pairwise_js.len() != clients || sample_counts.len() != clients {
            return Err(bad("client count does not match matrix".into()));
        }
        Ok(Self {
            source,
            pairwise_js,
            sample_counts,
            imbalance_ratio,
            repairs,
        })
    }
}

fn join<T: ToString>(it: impl Iterator<Item = T>) -> String {
    it.map(|x| x.to_string()).collect::<Vec<_>>().join(" ")
}

/// Pairwise JS divergence of per-client label or attribute distributions.
pub fn heterogeneity_report(
    partition: &Partition,
    d: &Dataset,
    source: &HistogramSource,
) -> Result<HeterogeneityReport, DataError> {
    let hists: Vec<Vec<f64>> = partition
        .clients
        .iter()
        .map(|c| {
            let counts = match source {
                HistogramSource::Label => c.label_histogram.as_slice(),
                HistogramSource::Attribute(name) => c
                    .attribute_histogram(name)
                    .ok_or_else(|| DataError::MissingAttribute(name.clone()))?,
            };
            normalize(counts).ok_or(DataError::EmptyClient(c.client_id))
        })
        .collect::<Result<_, _>>()?;
    if let HistogramSource::Attribute(name) = source {
        d.attribute(name).ok_or_else(|| DataError::MissingAttribute(name.clone()))?;
    }
    let k = hists.len();
    let mut pairwise_js = vec![vec![0.0; k]; k];
    for i in 0..k {
        for j in (i + 1)..k {
            let v = js_divergence(&hists[i], &hists[j])?;
            pairwise_js[i][j] = v;
            pairwise_js[j][i] = v;
        }
    }
    let sample_counts = partition.sizes();
    let max = *sample_counts.iter().max().unwrap_or(&0);
    let min = *sample_counts.iter().min().unwrap_or(&0);
    if min == 0 {
        return Err(DataError::EmptyClient(sample_counts.iter().position(|&c| c == 0).unwrap_or(0)));
    }
    Ok(HeterogeneityReport {
        source: source.name().to_string(),
        pairwise_js,
        sample_counts,
        imbalance_ratio: max as f64 / min as f64,
        repairs: partition.repairs,
    })
}

//! Text serialization of a [`Partition`] (the `mapping.txt` file).

use std::fmt::Write as _;

use super::{ClientPartition, DataError, Partition, PartitionSpec};
use crate::config::SplitType;

const HEADER: &str = "fedflow-mapping 1";

fn split_name(s: SplitType) -> &'static str {
    match s {
        SplitType::Iid => "iid",
        SplitType::Dir => "dir",
        SplitType::Shard => "shard",
        SplitType::Hdir => "hdir",
    }
}

fn join(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ")
}

impl Partition {
    pub fn to_mapping_text(&self) -> String {
        let s = &self.spec;
        let mut out = String::new();
        writeln!(out, "{HEADER}").unwrap();
        writeln!(out, "split_type {}", split_name(s.split_type)).unwrap();
        writeln!(out, "num_clients {}", s.num_clients).unwrap();
        writeln!(out, "alpha {:?}", s.alpha).unwrap();
        writeln!(out, "shards_per_client {}", s.shards_per_client).unwrap();
        writeln!(out, "main_attribute {}", s.main_attribute.as_deref().unwrap_or("-")).unwrap();
        writeln!(out, "seed {}", s.seed).unwrap();
        writeln!(out, "repairs {}", self.repairs).unwrap();
        for c in &self.clients {
            writeln!(out, "client {}", c.client_id).unwrap();
            writeln!(out, "indices {}", join(&c.sample_indices)).unwrap();
            writeln!(out, "labels {}", join(&c.label_histogram)).unwrap();
            for (name, h) in &c.attribute_histograms {
                writeln!(out, "attr {} {}", name, join(h)).unwrap();
            }
        }
        out
    }

    pub fn from_mapping_text(text: &str) -> Result<Partition, DataError> {
        let bad = |detail: String| DataError::Malformed { what: "mapping", detail };
        let mut lines = text.lines().peekable();
        if lines.next() != Some(HEADER) {
            return Err(bad("missing header".into()));
        }
        let mut kv = |key: &str| -> Result<String, DataError> {
            let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
            let (k, v) = line.split_once(' ').unwrap_or((line, ""));
            if k != key {
                return Err(bad(format!("expected `{key}`, found `{k}`")));
            }
            Ok(v.to_string())
        };
        let split_type = match kv("split_type")?.as_str() {
            "iid" => SplitType::Iid,
            "dir" => SplitType::Dir,
            "shard" => SplitType::Shard,
            "hdir" => SplitType::Hdir,
            other => return Err(bad(format!("unknown split type `{other}`"))),
        };
        let num = |s: String| s.parse::<usize>().map_err(|e| bad(e.to_string()));
        let num_clients = num(kv("num_clients")?)?;
        let alpha = kv("alpha")?.parse::<f64>().map_err(|e| bad(e.to_string()))?;
        let shards_per_client = num(kv("shards_per_client")?)?;
        let main_attribute = Some(kv("main_attribute")?).filter(|m| m != "-");
        let seed = kv("seed")?.parse::<u64>().map_err(|e| bad(e.to_string()))?;
        let repairs = num(kv("repairs")?)?;
        let list = |s: &str| -> Result<Vec<usize>, DataError> {
            s.split_whitespace()
                .map(|t| t.parse::<usize>().map_err(|e| bad(e.to_string())))
                .collect()
        };
        let mut clients = Vec::with_capacity(num_clients);
        while let Some(line) = lines.next() {
            let id = line
                .strip_prefix("client ")
                .ok_or_else(|| bad(format!("expected client record, found `{line}`")))?;
            let client_id = num(id.to_string())?;
            let mut field = |key: &str| -> Result<String, DataError> {
                let line = lines.next().ok_or_else(|| bad(format!("missing `{key}`")))?;
                line.strip_prefix(key)
                    .map(|r| r.trim_start().to_string())
                    .ok_or_else(|| bad(format!("expected `{key}`")))
            };
            let sample_indices = list(&field("indices")?)?;
            let label_histogram = list(&field("labels")?)?;
            let mut attribute_histograms = Vec::new();
            while lines.peek().is_some_and(|l| l.starts_with("attr ")) {
                let rest = &lines.next().expect("peeked")["attr ".len()..];
                let (name, counts) = rest.split_once(' ').unwrap_or((rest, ""));
                attribute_histograms.push((name.to_string(), list(counts)?));
            }
            clients.push(ClientPartition {
                client_id,
                sample_indices,
                label_histogram,
                attribute_histograms,
            });
        }
        if clients.len() != num_clients {
            return Err(bad(format!("{} client records for {num_clients} clients", clients.len())));
        }
        Ok(Partition {
            spec: PartitionSpec {
                split_type,
                num_clients,
                alpha,
                shards_per_client,
                main_attribute,
                seed,
            },
            clients,
            repairs,
        })
    }
}

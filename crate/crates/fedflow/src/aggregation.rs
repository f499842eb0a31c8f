//! Server-side aggregation: sample-weighted averaging, the Yogi server
//! optimizer, partial-model merging, and clustered multi-model updates.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::config::{AggregatorKind, ServerConfig};
use crate::params::{ParamError, ParameterSet};
use crate::protocol::UploadEnvelope;

#[derive(Debug, Error, PartialEq)]
pub enum AggregationError {
    #[error("no uploads to aggregate")]
    NoUploads,
    #[error("uploads report zero samples in total")]
    ZeroSamples,
    #[error("uploads are not congruent with each other or with the global model")]
    Incongruent,
    #[error("upload from client {client_id} carries blocks outside the exchanged set")]
    UnexpectedBlocks { client_id: usize },
    #[error("cluster id {id:?} invalid for {k} clusters")]
    InvalidCluster { id: Option<usize>, k: usize },
    #[error("cluster losses must be finite and nonempty")]
    BadLosses,
    #[error(transparent)]
    Param(#[from] ParamError),
}

/// `Σ (n_i / Σn) · w_i`, summed in ascending client id order.
pub fn fedavg(uploads: &[UploadEnvelope]) -> Result<ParameterSet, AggregationError> {
    let mut sorted: Vec<&UploadEnvelope> = uploads.iter().collect();
    sorted.sort_by_key(|u| u.client_id);
    let first = sorted.first().ok_or(AggregationError::NoUploads)?;
    if sorted.iter().any(|u| !u.parameters.congruent(&first.parameters)) {
        return Err(AggregationError::Incongruent);
    }
    let total: usize = sorted.iter().map(|u| u.num_samples).sum();
    if total == 0 {
        return Err(AggregationError::ZeroSamples);
    }
    let terms: Vec<(f64, &ParameterSet)> = sorted
        .iter()
        .map(|u| (u.num_samples as f64 / total as f64, &u.parameters))
        .collect();
    Ok(ParameterSet::linear_combine(&terms)?)
}

/// Averages the listed blocks and leaves every other block of `global`
/// untouched.
pub fn merge_partial(
    global: &ParameterSet,
    uploads: &[UploadEnvelope],
    partial_blocks: &[String],
) -> Result<ParameterSet, AggregationError> {
    let expected = global.select(partial_blocks)?;
    for u in uploads {
        if !u.parameters.congruent(&expected) {
            return Err(AggregationError::UnexpectedBlocks { client_id: u.client_id });
        }
    }
    let mut out = global.clone();
    out.overwrite_from(&fedavg(uploads)?)?;
    Ok(out)
}

/// Aggregator configuration plus Yogi moments.
#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorState {
    pub kind: AggregatorKind,
    pub server_lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub tau: f64,
    pub first_moment: Option<ParameterSet>,
    pub second_moment: Option<ParameterSet>,
}

impl AggregatorState {
    pub fn fedavg() -> Self {
        Self {
            kind: AggregatorKind::Fedavg,
            server_lr: 1.0,
            beta1: 0.9,
            beta2: 0.99,
            tau: 1e-3,
            first_moment: None,
            second_moment: None,
        }
    }

    pub fn fedyogi(server_lr: f64, beta1: f64, beta2: f64, tau: f64) -> Self {
        Self {
            kind: AggregatorKind::Fedyogi,
            server_lr,
            beta1,
            beta2,
            tau,
            first_moment: None,
            second_moment: None,
        }
    }

    pub fn from_config(s: &ServerConfig) -> Self {
        Self {
            kind: s.aggregator,
            ..Self::fedyogi(s.server_lr, s.beta1, s.beta2, s.tau)
        }
    }

    /// New global blocks from `global` and the uploads of one round.
    pub fn step(&mut self, global: &ParameterSet, uploads: &[UploadEnvelope]) -> Result<ParameterSet, AggregationError> {
        let avg = fedavg(uploads)?;
        if !avg.congruent(global) {
            return Err(AggregationError::Incongruent);
        }
        match self.kind {
            AggregatorKind::Fedavg => Ok(avg),
            AggregatorKind::Fedyogi => self.yogi(global, &avg),
        }
    }

    fn yogi(&mut self, global: &ParameterSet, avg: &ParameterSet) -> Result<ParameterSet, AggregationError> {
        let tau = self.tau;
        let m = self.first_moment.get_or_insert_with(|| global.zeros_like());
        let v = self
            .second_moment
            .get_or_insert_with(|| global.filled_like((tau * tau) as f32));
        if !m.congruent(global) || !v.congruent(global) {
            return Err(AggregationError::Incongruent);
        }
        let mut out = global.clone();
        let (b1, b2, lr) = (self.beta1, self.beta2, self.server_lr);
        for (((ob, ab), mb), vb) in out
            .blocks_mut()
            .iter_mut()
            .zip(avg.blocks())
            .zip(m.blocks_mut())
            .zip(v.blocks_mut())
        {
            for (((o, &a), mv), vv) in ob.values_mut().iter_mut().zip(ab.values()).zip(mb.values_mut()).zip(vb.values_mut()) {
                let g = f64::from(*o);
                let delta = f64::from(a) - g;
                let d2 = delta * delta;
                let m_new = b1 * f64::from(*mv) + (1.0 - b1) * delta;
                let v_old = f64::from(*vv);
                let sign = match v_old.partial_cmp(&d2) {
                    Some(std::cmp::Ordering::Greater) => 1.0,
                    Some(std::cmp::Ordering::Less) => -1.0,
                    _ => 0.0,
                };
                let v_new = v_old - (1.0 - b2) * d2 * sign;
                *mv = m_new as f32;
                *vv = v_new as f32;
                *o = (g + lr * m_new / (v_new.sqrt() + tau)) as f32;
            }
        }
        out.check_finite()?;
        Ok(out)
    }
}

/// `k` cluster models and the latest cluster of every client seen so far.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterBook {
    pub models: Vec<ParameterSet>,
    pub assignment: BTreeMap<usize, usize>,
}

impl ClusterBook {
    pub fn new(models: Vec<ParameterSet>) -> Self {
        Self {
            models,
            assignment: BTreeMap::new(),
        }
    }

    pub fn k(&self) -> usize {
        self.models.len()
    }
}

/// Index of the smallest loss; ties go to the lowest index.
pub fn assign_cluster(losses: &[f64]) -> Result<usize, AggregationError> {
    if losses.is_empty() || losses.iter().any(|l| !l.is_finite()) {
        return Err(AggregationError::BadLosses);
    }
    let mut best = 0;
    for (i, &l) in losses.iter().enumerate().skip(1) {
        if l < losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-cluster FedAvg; clusters without uploads keep their parameters.
pub fn aggregate_clusters(book: &ClusterBook, uploads: &[UploadEnvelope]) -> Result<ClusterBook, AggregationError> {
    let k = book.k();
    let mut groups: Vec<Vec<UploadEnvelope>> = vec![Vec::new(); k];
    for u in uploads {
        match u.cluster_id {
            Some(c) if c < k => groups[c].push(u.clone()),
            id => return Err(AggregationError::InvalidCluster { id, k }),
        }
    }
    let mut next = book.clone();
    for (c, group) in groups.iter().enumerate() {
        for u in group {
            next.assignment.insert(u.client_id, c);
        }
        if !group.is_empty() {
            let avg = fedavg(group)?;
            if !avg.congruent(&book.models[c]) {
                return Err(AggregationError::Incongruent);
            }
            next.models[c] = avg;
        }
    }
    Ok(next)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Block;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn set(vals: &[f32]) -> ParameterSet {
        ParameterSet::new(vec![Block::new("w", vec![vals.len()], vals.to_vec()).unwrap()]).unwrap()
    }

    fn up(client_id: usize, vals: &[f32], n: usize) -> UploadEnvelope {
        UploadEnvelope {
            client_id,
            round_index: 0,
            parameters: set(vals),
            num_samples: n,
            train_loss: 0.0,
            metrics: Vec::new(),
            cluster_id: None,
        }
    }

    #[test]
    fn fedavg_examples() {
        assert_eq!(fedavg(&[up(0, &[1.0, -2.0], 5)]).unwrap(), set(&[1.0, -2.0]));
        assert_eq!(fedavg(&[up(0, &[1.0, 3.0], 1), up(1, &[3.0, 5.0], 3)]).unwrap(), set(&[2.5, 4.5]));
        let same = [up(0, &[0.1, 0.7], 2), up(1, &[0.1, 0.7], 9), up(2, &[0.1, 0.7], 4)];
        assert_eq!(fedavg(&same).unwrap(), set(&[0.1, 0.7]));
    }

    #[test]
    fn fedavg_errors() {
        assert_eq!(fedavg(&[]), Err(AggregationError::NoUploads));
        assert_eq!(fedavg(&[up(0, &[1.0], 0)]), Err(AggregationError::ZeroSamples));
        assert_eq!(fedavg(&[up(0, &[1.0], 1), up(1, &[1.0, 2.0], 1)]), Err(AggregationError::Incongruent));
    }

    #[test]
    fn yogi_zero_delta_is_fixed_point() {
        let g = set(&[0.3, -1.2]);
        let mut s = AggregatorState::fedyogi(1.0, 0.9, 0.99, 1e-3);
        assert_eq!(s.step(&g, &[up(0, &[0.3, -1.2], 4)]).unwrap(), g);
    }

    #[test]
    fn yogi_single_step_golden() {
        // Direct evaluation: delta 0.5, m 0.05, v 1e-6 + 0.01 * 0.25 = 0.002501,
        // 0.5 + 0.05 / (sqrt(0.002501) + 0.001) = 1.4801999800039982.
        let mut s = AggregatorState::fedyogi(1.0, 0.9, 0.99, 1e-3);
        let out = s.step(&set(&[0.5]), &[up(0, &[1.0], 1)]).unwrap();
        assert_eq!(out.to_flat()[0], 1.480_199_980_003_998_2_f64 as f32);
        assert!((s.first_moment.unwrap().to_flat()[0] - 0.05).abs() < 1e-9);
        assert!((f64::from(s.second_moment.unwrap().to_flat()[0]) - 0.002501).abs() < 1e-9);
    }

    #[test]
    fn yogi_second_moment_stays_positive() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut s = AggregatorState::fedyogi(0.1, 0.9, 0.99, 1e-3);
        let mut g = set(&[0.0; 8]);
        for step in 0..1000 {
            let scale = if step % 100 < 50 { 1.0 } else { 1e-4 };
            let vals: Vec<f32> = (0..8).map(|_| rng.random_range(-scale..scale)).collect();
            g = s.step(&g, &[up(0, &vals, 1)]).unwrap();
            assert!(s.second_moment.as_ref().unwrap().iter_values().all(|v| v > 0.0), "step {step}");
        }
    }

    #[test]
    fn yogi_direction_follows_delta_with_large_tau() {
        let mut s = AggregatorState::fedyogi(1.0, 0.0, 0.99, 100.0);
        let g = set(&[0.0, 1.0, -1.0]);
        let out = s.step(&g, &[up(0, &[0.5, 0.2, -0.4], 1)]).unwrap();
        let delta = [0.5f32, -0.8, 0.6];
        for ((o, gv), d) in out.iter_values().zip(g.iter_values()).zip(delta) {
            assert_eq!((o - gv).signum(), d.signum());
            assert!((o - gv).abs() < d.abs());
        }
    }

    #[test]
    fn merge_partial_leaves_other_blocks_bitwise() {
        let global = ParameterSet::new(vec![
            Block::new("a", vec![2], vec![1.0, 2.0]).unwrap(),
            Block::new("b", vec![1], vec![0.123_456_79]).unwrap(),
        ])
        .unwrap();
        let names = vec!["a".to_string()];
        let u = |id, v: [f32; 2], n| UploadEnvelope {
            parameters: ParameterSet::new(vec![Block::new("a", vec![2], v.to_vec()).unwrap()]).unwrap(),
            ..up(id, &[0.0], n)
        };
        let merged = merge_partial(&global, &[u(0, [1.0, 3.0], 1), u(1, [3.0, 5.0], 3)], &names).unwrap();
        assert_eq!(merged.block("a").unwrap().values(), &[2.5, 4.5]);
        assert_eq!(
            merged.block("b").unwrap().values()[0].to_bits(),
            global.block("b").unwrap().values()[0].to_bits()
        );
        let full = vec!["a".to_string(), "b".to_string()];
        let ups = [
            UploadEnvelope {
                parameters: global.clone(),
                ..up(0, &[0.0], 2)
            },
            UploadEnvelope {
                parameters: global.filled_like(1.0),
                ..up(1, &[0.0], 2)
            },
        ];
        assert_eq!(merge_partial(&global, &ups, &full).unwrap(), fedavg(&ups).unwrap());
        assert_eq!(
            merge_partial(&global, &ups, &names),
            Err(AggregationError::UnexpectedBlocks { client_id: 0 })
        );
    }

    #[test]
    fn cluster_assignment() {
        assert_eq!(assign_cluster(&[3.0]).unwrap(), 0);
        assert_eq!(assign_cluster(&[0.5, 0.2, 0.9]).unwrap(), 1);
        assert_eq!(assign_cluster(&[0.2, 0.2]).unwrap(), 0);
        assert_eq!(assign_cluster(&[0.2, f64::NAN]), Err(AggregationError::BadLosses));
        assert_eq!(assign_cluster(&[]), Err(AggregationError::BadLosses));
    }

    #[test]
    fn clusters_without_uploads_keep_parameters() {
        let book = ClusterBook::new(vec![set(&[0.0]), set(&[1.0]), set(&[2.0])]);
        let mut a = up(4, &[5.0], 1);
        a.cluster_id = Some(1);
        let mut b = up(2, &[7.0], 1);
        b.cluster_id = Some(1);
        let next = aggregate_clusters(&book, &[a.clone(), b]).unwrap();
        assert_eq!(next.models[0], book.models[0]);
        assert_eq!(next.models[2], book.models[2]);
        assert_eq!(next.models[1], set(&[6.0]));
        assert_eq!(next.assignment[&4], 1);
        a.cluster_id = Some(3);
        assert!(aggregate_clusters(&book, &[a.clone()]).is_err());
        a.cluster_id = None;
        assert!(aggregate_clusters(&book, &[a]).is_err());
    }

    fn uploads_strategy() -> impl Strategy<Value = Vec<UploadEnvelope>> {
        proptest::collection::vec((proptest::collection::vec(-100f32..100.0, 4), 1usize..50), 1..8).prop_map(|v| {
            v.into_iter()
                .enumerate()
                .map(|(i, (vals, n))| up(i * 3, &vals, n))
                .collect()
        })
    }

    proptest! {
        #[test]
        fn fedavg_is_permutation_invariant(ups in uploads_strategy(), rot in 0usize..8) {
            let mut shuffled = ups.clone();
            shuffled.reverse();
            let r = rot % shuffled.len();
            shuffled.rotate_left(r);
            let a = fedavg(&ups).unwrap();
            let b = fedavg(&shuffled).unwrap();
            prop_assert!(a.iter_values().zip(b.iter_values()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }

        #[test]
        fn fedavg_is_convex(ups in uploads_strategy()) {
            let avg = fedavg(&ups).unwrap().to_flat();
            for (j, v) in avg.iter().enumerate() {
                let col: Vec<f32> = ups.iter().map(|u| u.parameters.to_flat()[j]).collect();
                let lo = col.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = col.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                prop_assert!(*v >= lo && *v <= hi);
            }
        }

        #[test]
        fn argmin_ignores_constant_shift(losses in proptest::collection::vec(0f64..10.0, 1..6), c in -5f64..5.0) {
            let shifted: Vec<f64> = losses.iter().map(|l| l + c).collect();
            let a = assign_cluster(&losses).unwrap();
            let b = assign_cluster(&shifted).unwrap();
            prop_assert!(a == b || (losses[a] - losses[b]).abs() < 1e-9);
        }
    }
}

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma};

use super::{DataError, Dataset};
use crate::config::{DataConfig, SplitType};

const MAX_RESAMPLES: usize = 100;

// Independent generator streams so that proportion draws do not depend on
// how many shuffles happened before them.
const STREAM_PROPORTIONS: u64 = 1;
const STREAM_SHUFFLE: u64 = 2;
const STREAM_CELLS: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSpec {
    pub split_type: SplitType,
    pub num_clients: usize,
    pub alpha: f64,
    pub shards_per_client: usize,
    pub main_attribute: Option<String>,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn new(split_type: SplitType, num_clients: usize, seed: u64) -> Self {
        Self {
            split_type,
            num_clients,
            alpha: 0.5,
            shards_per_client: 2,
            main_attribute: None,
            seed,
        }
    }

    pub fn with_alpha(mut self, alpha: f64) -> Self {
        self.alpha = alpha;
        self
    }

    pub fn from_config(d: &DataConfig) -> Self {
        Self {
            split_type: d.split_type,
            num_clients: d.num_of_clients,
            alpha: d.alpha,
            shards_per_client: d.shards_per_client,
            main_attribute: d.main_attribute.clone(),
            seed: d.seed,
        }
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClientPartition {
    pub client_id: usize,
    pub sample_indices: Vec<usize>,
    pub label_histogram: Vec<usize>,
    /// `(attribute name, count per category)` for every dataset attribute.
    pub attribute_histograms: Vec<(String, Vec<usize>)>,
}

impl ClientPartition {
    pub(crate) fn build(client_id: usize, mut sample_indices: Vec<usize>, d: &Dataset) -> Self {
        sample_indices.sort_unstable();
        let label_histogram = d.label_histogram(&sample_indices);
        let attribute_histograms = d
            .attributes
            .iter()
            .map(|a| {
                let mut h = vec![0; a.num_categories];
                for &i in &sample_indices {
                    h[a.values[i]] += 1;
                }
                (a.name.clone(), h)
            })
            .collect();
        Self {
            client_id,
            sample_indices,
            label_histogram,
            attribute_histograms,
        }
    }

    pub fn len(&self) -> usize {
        self.sample_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sample_indices.is_empty()
    }

    pub fn attribute_histogram(&self, name: &str) -> Option<&[usize]> {
        self.attribute_histograms
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, h)| h.as_slice())
    }
}

/// Result of partitioning one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub spec: PartitionSpec,
    pub clients: Vec<ClientPartition>,
    /// Samples moved to fill clients left empty after all resamples.
    pub repairs: usize,
}

impl Partition {
    pub fn sizes(&self) -> Vec<usize> {
        self.clients.iter().map(ClientPartition::len).collect()
    }
}

/// Dispatches on `spec.split_type`.
pub fn partition(d: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    match spec.split_type {
        SplitType::Iid => partition_iid(d, spec),
        SplitType::Dir => partition_dirichlet(d, spec),
        SplitType::Shard => partition_shard(d, spec),
        SplitType::Hdir => partition_hdir(d, spec),
    }
}

/// Partitions each planted population separately; client `i` belongs to
/// population `i % populations`.
pub fn partition_populations(d: &Dataset, spec: &PartitionSpec, populations: usize) -> Result<Partition, DataError> {
    let Some(pops) = d.populations.as_ref().filter(|_| populations > 1) else {
        return partition(d, spec);
    };
    let mut clients: Vec<Option<ClientPartition>> = vec![None; spec.num_clients];
    let mut repairs = 0;
    for p in 0..populations {
        let members: Vec<usize> = (0..spec.num_clients).filter(|c| c % populations == p).collect();
        let pool: Vec<usize> = (0..d.len()).filter(|&i| pops[i] == p).collect();
        let mut sub = spec.clone();
        sub.num_clients = members.len();
        sub.seed = spec.seed.wrapping_add(p as u64);
        let (lists, rep) = assign(d, &pool, &sub)?;
        repairs += rep;
        for (local, idx) in lists.into_iter().enumerate() {
            let id = members[local];
            clients[id] = Some(ClientPartition::build(id, idx, d));
        }
    }
    Ok(Partition {
        spec: spec.clone(),
        clients: clients.into_iter().map(|c| c.expect("every client belongs to a population")).collect(),
        repairs,
    })
}

/// Partitions only the samples listed in `pool`; indices stay global.
pub fn partition_subset(d: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<Partition, DataError> {
    let (lists, repairs) = assign(d, pool, spec)?;
    Ok(finish(d, spec, lists, repairs))
}

fn finish(d: &Dataset, spec: &PartitionSpec, lists: Vec<Vec<usize>>, repairs: usize) -> Partition {
    Partition {
        spec: spec.clone(),
        clients: lists
            .into_iter()
            .enumerate()
            .map(|(id, idx)| ClientPartition::build(id, idx, d))
            .collect(),
        repairs,
    }
}

fn check(spec: &PartitionSpec, want: SplitType, pool: usize) -> Result<(), DataError> {
    if spec.split_type != want {
        return Err(DataError::WrongSplitType(spec.split_type));
    }
    if spec.num_clients == 0 || spec.num_clients > pool {
        return Err(DataError::TooFewSamples {
            clients: spec.num_clients,
            samples: pool,
        });
    }
    Ok(())
}

fn assign(d: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<(Vec<Vec<usize>>, usize), DataError> {
    match spec.split_type {
        SplitType::Iid => iid(pool, spec).map(|l| (l, 0)),
        SplitType::Dir => dirichlet(d, pool, spec),
        SplitType::Shard => shard(d, pool, spec).map(|l| (l, 0)),
        SplitType::Hdir => hdir(d, pool, spec),
    }
}

/// Random permutation cut into near-equal contiguous chunks.
pub fn partition_iid(d: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    let pool: Vec<usize> = (0..d.len()).collect();
    let lists = iid(&pool, spec)?;
    Ok(finish(d, spec, lists, 0))
}

fn iid(pool: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    check(spec, SplitType::Iid, pool.len())?;
    let mut order = pool.to_vec();
    order.shuffle(&mut spec.rng(STREAM_SHUFFLE));
    let k = spec.num_clients;
    let base = order.len() / k;
    let extra = order.len() % k;
    let mut lists = Vec::with_capacity(k);
    let mut start = 0;
    for c in 0..k {
        // the remainder goes to the last clients
        let size = base + usize::from(c >= k - extra);
        lists.push(order[start..start + size].to_vec());
        start += size;
    }
    Ok(lists)
}

/// Per-class (or per main-attribute category) Dirichlet allocation.
pub fn partition_dirichlet(d: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    let pool: Vec<usize> = (0..d.len()).collect();
    let (lists, repairs) = dirichlet(d, &pool, spec)?;
    Ok(finish(d, spec, lists, repairs))
}

fn group_key<'a>(d: &'a Dataset, spec: &PartitionSpec) -> Result<(&'a [usize], usize), DataError> {
    match &spec.main_attribute {
        None => Ok((&d.labels, d.num_classes)),
        Some(name) => d
            .attribute(name)
            .map(|a| (a.values.as_slice(), a.num_categories))
            .ok_or_else(|| DataError::MissingAttribute(name.clone())),
    }
}

fn group_pool(pool: &[usize], keys: &[usize], groups: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); groups];
    for &i in pool {
        out[keys[i]].push(i);
    }
    out
}

/// Draws per-group client counts until no client is empty, or gives up after
/// [`MAX_RESAMPLES`] draws and returns the last one.
fn dirichlet_counts(group_sizes: &[usize], spec: &PartitionSpec, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let k = spec.num_clients;
    let mut counts = Vec::new();
    for _ in 0..MAX_RESAMPLES {
        counts = group_sizes
            .iter()
            .map(|&n| {
                let p = sample_dirichlet(&vec![spec.alpha; k], rng);
                largest_remainder(&p, n)
            })
            .collect::<Vec<_>>();
        let all_nonempty = (0..k).all(|c| counts.iter().any(|g| g[c] > 0));
        if all_nonempty {
            break;
        }
    }
    counts
}

fn dirichlet(d: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<(Vec<Vec<usize>>, usize), DataError> {
    check(spec, SplitType::Dir, pool.len())?;
    let (keys, ngroups) = group_key(d, spec)?;
    let groups = group_pool(pool, keys, ngroups);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let counts = dirichlet_counts(&sizes, spec, &mut spec.rng(STREAM_PROPORTIONS));
    let mut shuffle = spec.rng(STREAM_SHUFFLE);
    let mut lists = vec![Vec::new(); spec.num_clients];
    for (mut members, per_client) in groups.into_iter().zip(&counts) {
        members.shuffle(&mut shuffle);
        let mut start = 0;
        for (c, &n) in per_client.iter().enumerate() {
            lists[c].extend_from_slice(&members[start..start + n]);
            start += n;
        }
    }
    let repairs = repair_empty(&mut lists)?;
    Ok((lists, repairs))
}

/// Label-sorted equal shards dealt without replacement.
pub fn partition_shard(d: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    let pool: Vec<usize> = (0..d.len()).collect();
    let lists = shard(d, &pool, spec)?;
    Ok(finish(d, spec, lists, 0))
}

fn shard(d: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<Vec<Vec<usize>>, DataError> {
    check(spec, SplitType::Shard, pool.len())?;
    let shards = spec.num_clients * spec.shards_per_client;
    if shards == 0 || !pool.len().is_multiple_of(shards) {
        return Err(DataError::ShardsIndivisible {
            samples: pool.len(),
            shards,
        });
    }
    let mut sorted = pool.to_vec();
    sorted.sort_by_key(|&i| (d.labels[i], i));
    let size = sorted.len() / shards;
    let mut order: Vec<usize> = (0..shards).collect();
    order.shuffle(&mut spec.rng(STREAM_SHUFFLE));
    Ok(order
        .chunks(spec.shards_per_client)
        .map(|mine| mine.iter().flat_map(|&s| sorted[s * size..(s + 1) * size].iter().copied()).collect())
        .collect())
}

/// Two-stage hierarchical Dirichlet allocation over sample attributes.
///
/// Stage one allocates each category of the main attribute across clients.
/// Stage two splits every `(client, main category)` cell over the joint
/// categories of the two remaining attributes, with concentration
/// `alpha * K * freq(k)` for joint category `k` out of `K`. Requests beyond
/// what a triplet pool still holds are clamped; the cell is then topped up
/// from the leftovers of its main category so stage-one counts are kept and
/// every sample is assigned.
pub fn partition_hdir(d: &Dataset, spec: &PartitionSpec) -> Result<Partition, DataError> {
    let pool: Vec<usize> = (0..d.len()).collect();
    let (lists, repairs) = hdir(d, &pool, spec)?;
    Ok(finish(d, spec, lists, repairs))
}

fn hdir(d: &Dataset, pool: &[usize], spec: &PartitionSpec) -> Result<(Vec<Vec<usize>>, usize), DataError> {
    check(spec, SplitType::Hdir, pool.len())?;
    if d.attributes.len() < 3 {
        return Err(DataError::TooFewAttributes(d.attributes.len()));
    }
    let main_pos = match &spec.main_attribute {
        None => 0,
        Some(name) => d
            .attributes
            .iter()
            .position(|a| &a.name == name)
            .ok_or_else(|| DataError::MissingAttribute(name.clone()))?,
    };
    let main = &d.attributes[main_pos];
    let rest: Vec<_> = d.attributes.iter().enumerate().filter(|(i, _)| *i != main_pos).map(|(_, a)| a).collect();
    let (second, third) = (rest[0], rest[1]);
    let joint_k = second.num_categories * third.num_categories;
    let joint = |i: usize| second.values[i] * third.num_categories + third.values[i];

    let mut freq = vec![0usize; joint_k];
    for &i in pool {
        freq[joint(i)] += 1;
    }
    let concentration: Vec<f64> = freq
        .iter()
        .map(|&f| spec.alpha * joint_k as f64 * f as f64 / pool.len() as f64)
        .collect();

    let groups = group_pool(pool, &main.values, main.num_categories);
    let sizes: Vec<usize> = groups.iter().map(Vec::len).collect();
    let counts = dirichlet_counts(&sizes, spec, &mut spec.rng(STREAM_PROPORTIONS));

    let mut shuffle = spec.rng(STREAM_SHUFFLE);
    let mut cells = spec.rng(STREAM_CELLS);
    let k = spec.num_clients;
    let mut lists = vec![Vec::new(); k];
    for (members, per_client) in groups.into_iter().zip(&counts) {
        let mut pools: Vec<Vec<usize>> = vec![Vec::new(); joint_k];
        for i in members {
            pools[joint(i)].push(i);
        }
        for p in &mut pools {
            p.shuffle(&mut shuffle);
        }
        let mut order: Vec<usize> = (0..k).collect();
        order.shuffle(&mut shuffle);
        let mut deficits = vec![0usize; k];
        for &c in &order {
            let want = per_client[c];
            if want == 0 {
                continue;
            }
            let q = sample_dirichlet(&concentration, &mut cells);
            let request = largest_remainder(&q, want);
            let mut got = 0;
            for (jk, &r) in request.iter().enumerate() {
                let take = r.min(pools[jk].len());
                let from = pools[jk].len() - take;
                lists[c].extend(pools[jk].drain(from..));
                got += take;
            }
            deficits[c] = want - got;
        }
        let mut leftover: Vec<usize> = pools.into_iter().flatten().collect();
        leftover.shuffle(&mut shuffle);
        let mut start = 0;
        for &c in &order {
            lists[c].extend_from_slice(&leftover[start..start + deficits[c]]);
            start += deficits[c];
        }
        debug_assert_eq!(start, leftover.len());
    }
    let repairs = repair_empty(&mut lists)?;
    Ok((lists, repairs))
}

/// Moves one sample from the currently largest client into each empty one.
fn repair_empty(lists: &mut [Vec<usize>]) -> Result<usize, DataError> {
    let mut moves = 0;
    while let Some(empty) = lists.iter().position(Vec::is_empty) {
        let donor = (0..lists.len())
            .max_by_key(|&c| (lists[c].len(), std::cmp::Reverse(c)))
            .expect("at least one client");
        if lists[donor].len() < 2 {
            return Err(DataError::Infeasible);
        }
        let moved = lists[donor].pop().expect("donor has samples");
        lists[empty].push(moved);
        moves += 1;
    }
    Ok(moves)
}

/// Dirichlet sample via normalized Gamma draws. Zero concentrations get zero
/// mass; if every draw underflows the mass goes to one random eligible entry.
pub(crate) fn sample_dirichlet(alpha: &[f64], rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut draws: Vec<f64> = alpha
        .iter()
        .map(|&a| {
            if a > 0.0 {
                Gamma::new(a, 1.0).expect("positive shape").sample(rng)
            } else {
                0.0
            }
        })
        .collect();
    let total: f64 = draws.iter().sum();
    if total > 0.0 && total.is_finite() {
        draws.iter_mut().for_each(|x| *x /= total);
    } else {
        let eligible: Vec<usize> = (0..alpha.len()).filter(|&i| alpha[i] > 0.0).collect();
        draws.iter_mut().for_each(|x| *x = 0.0);
        if !eligible.is_empty() {
            draws[eligible[rng.random_range(0..eligible.len())]] = 1.0;
        }
    }
    draws
}

/// Integer counts summing to `total`, proportional to `p`: floors first, then
/// the remaining units go to the largest fractional parts (lowest index wins ties).
pub(crate) fn largest_remainder(p: &[f64], total: usize) -> Vec<usize> {
    let raw: Vec<f64> = p.iter().map(|&x| x * total as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|&r| r.floor() as usize).collect();
    let assigned: usize = counts.iter().sum();
    let mut left = total.saturating_sub(assigned);
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| {
        let fa = raw[a] - raw[a].floor();
        let fb = raw[b] - raw[b].floor();
        fb.partial_cmp(&fa).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    // floating error can push the floors past the total
    let mut over: usize = counts.iter().sum::<usize>().saturating_sub(total);
    while over > 0 {
        let i = (0..counts.len()).max_by_key(|&i| counts[i]).expect("nonempty");
        counts[i] -= 1;
        over -= 1;
    }
    counts
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, generate_blobs, BlobSpec};

    fn audit(p: &Partition, n: usize) {
        let mut all: Vec<usize> = p.clients.iter().flat_map(|c| c.sample_indices.iter().copied()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
        for c in &p.clients {
            assert!(c.sample_indices.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn iid_even_split() {
        let (d, _) = generate_blobs(10, 10, 2, 1, 0);
        let p = partition_iid(&d, &PartitionSpec::new(SplitType::Iid, 10, 1)).unwrap();
        assert!(p.sizes().iter().all(|&s| s == 10));
        audit(&p, 100);
    }

    #[test]
    fn iid_remainder() {
        let (mut d, _) = generate_blobs(2, 51, 2, 1, 0);
        // drop one sample to get 101
        d.labels.pop();
        d.features.truncate(101 * 2);
        for a in &mut d.attributes {
            a.values.pop();
        }
        let p = partition_iid(&d, &PartitionSpec::new(SplitType::Iid, 10, 1)).unwrap();
        let mut sizes = p.sizes();
        sizes.sort_unstable();
        assert_eq!(sizes, [vec![10; 9], vec![11]].concat());
        audit(&p, 101);
    }

    #[test]
    fn iid_too_many_clients() {
        let (d, _) = generate_blobs(2, 2, 2, 1, 0);
        assert!(matches!(
            partition_iid(&d, &PartitionSpec::new(SplitType::Iid, 5, 0)),
            Err(DataError::TooFewSamples { .. })
        ));
    }

    #[test]
    fn iid_label_histograms_match_global() {
        // chi-square goodness of fit of each client's labels against the global proportions
        let (d, _) = generate_blobs(10, 1000, 2, 1, 4);
        let p = partition_iid(&d, &PartitionSpec::new(SplitType::Iid, 10, 4)).unwrap();
        for c in &p.clients {
            let expected = c.len() as f64 / 10.0;
            let chi2: f64 = c
                .label_histogram
                .iter()
                .map(|&o| (o as f64 - expected).powi(2) / expected)
                .sum();
            // 9 degrees of freedom, p = 0.001 critical value
            assert!(chi2 < 27.88, "client {} chi2 {chi2}", c.client_id);
        }
    }

    #[test]
    fn dirichlet_huge_alpha_is_uniform() {
        let (d, _) = generate_blobs(10, 200, 2, 1, 5);
        let spec = PartitionSpec::new(SplitType::Dir, 4, 5).with_alpha(1e6);
        let p = partition_dirichlet(&d, &spec).unwrap();
        for c in &p.clients {
            for &h in &c.label_histogram {
                assert!((h as f64 - 50.0).abs() <= 2.5, "{:?}", c.label_histogram);
            }
        }
        audit(&p, 2000);
    }

    #[test]
    fn dirichlet_conserves_class_totals() {
        let (d, _) = generate_blobs(5, 20, 2, 1, 0);
        for seed in 0..1000 {
            let spec = PartitionSpec::new(SplitType::Dir, 7, seed).with_alpha(0.5);
            let p = partition_dirichlet(&d, &spec).unwrap();
            for class in 0..5 {
                let total: usize = p.clients.iter().map(|c| c.label_histogram[class]).sum();
                assert_eq!(total, 20);
            }
            assert!(p.clients.iter().all(|c| !c.is_empty()));
        }
    }

    #[test]
    fn dirichlet_tiny_alpha_repairs_empty_clients() {
        let (d, _) = generate_blobs(2, 10, 2, 1, 0);
        let spec = PartitionSpec::new(SplitType::Dir, 15, 3).with_alpha(1e-3);
        let p = partition_dirichlet(&d, &spec).unwrap();
        assert!(p.repairs > 0);
        assert!(p.clients.iter().all(|c| !c.is_empty()));
        audit(&p, 20);
    }

    #[test]
    fn shard_deal() {
        let (d, _) = generate_blobs(10, 100, 2, 1, 0);
        for seed in 0..50 {
            let mut spec = PartitionSpec::new(SplitType::Shard, 20, seed);
            spec.shards_per_client = 2;
            let p = partition_shard(&d, &spec).unwrap();
            for c in &p.clients {
                assert_eq!(c.len(), 50);
                assert!(c.label_histogram.iter().filter(|&&h| h > 0).count() <= 2);
            }
            audit(&p, 1000);
        }
    }

    #[test]
    fn shard_single_client_is_identity() {
        let (d, _) = generate_blobs(4, 10, 2, 1, 0);
        let mut spec = PartitionSpec::new(SplitType::Shard, 1, 0);
        spec.shards_per_client = 4;
        let p = partition_shard(&d, &spec).unwrap();
        assert_eq!(p.clients[0].sample_indices, (0..40).collect::<Vec<_>>());
    }

    #[test]
    fn shard_indivisible() {
        let (d, _) = generate_blobs(3, 10, 2, 1, 0);
        let mut spec = PartitionSpec::new(SplitType::Shard, 4, 0);
        spec.shards_per_client = 2;
        assert!(matches!(partition_shard(&d, &spec), Err(DataError::ShardsIndivisible { .. })));
    }

    #[test]
    fn hdir_index_audit() {
        let (d, _) = generate(&BlobSpec::new(10, 200, 2, 1, 8));
        for seed in 0..20 {
            let spec = PartitionSpec::new(SplitType::Hdir, 30, seed);
            let p = partition_hdir(&d, &spec).unwrap();
            audit(&p, d.len());
            // per triplet totals conserved
            let key = |i: usize| (d.attributes[0].values[i], d.attributes[1].values[i], d.attributes[2].values[i]);
            let mut global = std::collections::BTreeMap::new();
            for i in 0..d.len() {
                *global.entry(key(i)).or_insert(0usize) += 1;
            }
            let mut assigned = std::collections::BTreeMap::new();
            for c in &p.clients {
                for &i in &c.sample_indices {
                    *assigned.entry(key(i)).or_insert(0usize) += 1;
                }
            }
            assert_eq!(global, assigned);
        }
    }

    #[test]
    fn hdir_keeps_stage_one_counts() {
        // stage one is the same draw as a main-attribute Dirichlet split
        let (d, _) = generate(&BlobSpec::new(10, 100, 2, 1, 2));
        let hd = partition_hdir(&d, &PartitionSpec::new(SplitType::Hdir, 12, 6)).unwrap();
        let mut dir_spec = PartitionSpec::new(SplitType::Dir, 12, 6);
        dir_spec.main_attribute = Some("attr_a".into());
        let dir = partition_dirichlet(&d, &dir_spec).unwrap();
        for (a, b) in hd.clients.iter().zip(&dir.clients) {
            assert_eq!(a.attribute_histogram("attr_a"), b.attribute_histogram("attr_a"));
        }
    }

    #[test]
    fn hdir_degenerate_hierarchy_is_plain_dirichlet() {
        let (mut d, _) = generate_blobs(2, 50, 2, 1, 0);
        for a in &mut d.attributes {
            a.num_categories = 1;
            a.values.iter_mut().for_each(|v| *v = 0);
        }
        let hd = partition_hdir(&d, &PartitionSpec::new(SplitType::Hdir, 5, 11)).unwrap();
        let mut dir_spec = PartitionSpec::new(SplitType::Dir, 5, 11);
        dir_spec.main_attribute = Some("attr_a".into());
        let dir = partition_dirichlet(&d, &dir_spec).unwrap();
        assert_eq!(hd.sizes(), dir.sizes());
        audit(&hd, 100);
    }

    #[test]
    fn hdir_needs_attributes() {
        let (mut d, _) = generate_blobs(2, 10, 2, 1, 0);
        d.attributes.truncate(2);
        assert_eq!(
            partition_hdir(&d, &PartitionSpec::new(SplitType::Hdir, 2, 0)),
            Err(DataError::TooFewAttributes(2))
        );
        let (d, _) = generate_blobs(2, 10, 2, 1, 0);
        let mut spec = PartitionSpec::new(SplitType::Hdir, 2, 0);
        spec.main_attribute = Some("missing".into());
        assert!(matches!(partition_hdir(&d, &spec), Err(DataError::MissingAttribute(_))));
    }

    #[test]
    fn wrong_split_type_rejected() {
        let (d, _) = generate_blobs(2, 10, 2, 1, 0);
        assert!(matches!(
            partition_dirichlet(&d, &PartitionSpec::new(SplitType::Iid, 2, 0)),
            Err(DataError::WrongSplitType(SplitType::Iid))
        ));
    }

    #[test]
    fn deterministic_partitions() {
        let (d, _) = generate_blobs(5, 40, 2, 1, 0);
        for st in [SplitType::Iid, SplitType::Dir, SplitType::Shard, SplitType::Hdir] {
            let spec = PartitionSpec::new(st, 5, 77);
            assert_eq!(partition(&d, &spec).unwrap(), partition(&d, &spec).unwrap());
        }
    }

    #[test]
    fn populations_keep_clients_pure() {
        let mut spec = BlobSpec::new(4, 40, 2, 1, 0);
        spec.populations = 2;
        let (d, _) = generate(&spec);
        let p = partition_populations(&d, &PartitionSpec::new(SplitType::Iid, 6, 0), 2).unwrap();
        let pops = d.populations.as_ref().unwrap();
        for c in &p.clients {
            assert!(c.sample_indices.iter().all(|&i| pops[i] == c.client_id % 2));
        }
        audit(&p, d.len());
    }

    #[test]
    fn largest_remainder_sums() {
        assert_eq!(largest_remainder(&[0.5, 0.5], 3), vec![2, 1]);
        assert_eq!(largest_remainder(&[0.2, 0.3, 0.5], 10), vec![2, 3, 5]);
        assert_eq!(largest_remainder(&[1.0, 0.0], 0), vec![0, 0]);
    }
}

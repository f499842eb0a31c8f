use std::collections::BTreeMap;
use std::sync::{Arc, Mutex};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Direction {
    Sent,
    Received,
}

/// Cumulative frame bytes per `(round, direction)`. Clones share counters.
#[derive(Debug, Clone, Default)]
pub struct TrafficMeter {
    counts: Arc<Mutex<BTreeMap<(u64, Direction), u64>>>,
}

impl TrafficMeter {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, round: u64, direction: Direction, bytes: usize) {
        *self.counts.lock().unwrap().entry((round, direction)).or_default() += bytes as u64;
    }

    pub fn bytes(&self, round: u64, direction: Direction) -> u64 {
        self.counts.lock().unwrap().get(&(round, direction)).copied().unwrap_or(0)
    }

    pub fn total(&self, direction: Direction) -> u64 {
        self.counts
            .lock()
            .unwrap()
            .iter()
            .filter(|((_, d), _)| *d == direction)
            .map(|(_, v)| v)
            .sum()
    }

    pub fn snapshot(&self) -> BTreeMap<(u64, Direction), u64> {
        self.counts.lock().unwrap().clone()
    }
}

use std::collections::VecDeque;
use std::sync::Arc;
use std::thread;

use log::{info, warn};

use super::client::ClientWorker;
use super::registry::ComponentRegistry;
use super::server::Federation;
use super::setup::{materialize, Materialized};
use super::{RunReport, RuntimeError};
use crate::comms::{in_process_pair, Endpoint};
use crate::config::TaskConfig;
use crate::tracker::Tracker;

/// Runs a task over in-process links, one thread per client.
pub fn run_materialized(
    task_id: &str,
    config: &TaskConfig,
    registry: &ComponentRegistry,
    m: &Materialized,
    tracker: Arc<Tracker>,
) -> Result<RunReport, RuntimeError> {
    let client_hooks = registry.client(&config.client.executor)?;
    let server_hooks = registry.server(&config.server.executor)?;
    let cfg = Arc::new(config.clone());
    let mut links: Vec<Box<dyn Endpoint>> = Vec::new();
    let mut handles = Vec::new();
    for id in 0..m.partition.clients.len() {
        let (server_end, mut client_end) = in_process_pair();
        let (train, test) = m.client_samples(id)?;
        let worker = ClientWorker::new(id, task_id, cfg.clone(), m.spec.clone(), client_hooks.clone(), train, test);
        handles.push(thread::spawn(move || worker.serve(&mut client_end)));
        links.push(Box::new(server_end));
    }
    let server_test = m.test.samples(&(0..m.test.len()).collect::<Vec<_>>());
    let mut fed = Federation::new(task_id, cfg, m.spec.clone(), server_hooks, tracker, server_test, m.server_samples());
    let result = fed.accept(links).and_then(|_| fed.run());
    fed.stop_all();
    drop(fed);
    for h in handles {
        match h.join() {
            Ok(Err(e)) => warn!("client worker ended with {e}"),
            Err(_) => warn!("client worker panicked"),
            Ok(Ok(())) => {}
        }
    }
    result
}

/// Materializes and runs a task in process.
pub fn run_task(
    task_id: &str,
    config: &TaskConfig,
    registry: &ComponentRegistry,
    tracker: Arc<Tracker>,
) -> Result<RunReport, RuntimeError> {
    config.validate()?;
    let m = materialize(config, registry)?;
    run_materialized(task_id, config, registry, &m, tracker)
}

#[derive(Debug, Clone, PartialEq)]
pub enum TaskStatus {
    Queued,
    Running,
    Finished,
    Failed(String),
}

#[derive(Debug, Clone)]
pub struct TaskQueueEntry {
    pub task_id: String,
    pub config: TaskConfig,
    pub status: TaskStatus,
}

/// First-in first-out queue of tasks that share one registry and tracker.
/// Tasks run one at a time.
pub struct Engine {
    registry: ComponentRegistry,
    tracker: Arc<Tracker>,
    queue: VecDeque<TaskQueueEntry>,
    done: Vec<TaskQueueEntry>,
    next_id: u64,
}

impl Engine {
    pub fn new(registry: ComponentRegistry, tracker: Arc<Tracker>) -> Self {
        Self {
            registry,
            tracker,
            queue: VecDeque::new(),
            done: Vec::new(),
            next_id: 0,
        }
    }

    pub fn registry_mut(&mut self) -> &mut ComponentRegistry {
        &mut self.registry
    }

    pub fn tracker(&self) -> &Arc<Tracker> {
        &self.tracker
    }

    /// Validates and enqueues a task; returns its id.
    pub fn submit_task(&mut self, config: TaskConfig) -> Result<String, RuntimeError> {
        config.validate()?;
        let task_id = format!("task-{}", self.next_id);
        self.next_id += 1;
        self.queue.push_back(TaskQueueEntry {
            task_id: task_id.clone(),
            config,
            status: TaskStatus::Queued,
        });
        Ok(task_id)
    }

    /// Runs the oldest queued task to completion.
    pub fn run_next(&mut self) -> Option<(String, Result<RunReport, RuntimeError>)> {
        let mut entry = self.queue.pop_front()?;
        entry.status = TaskStatus::Running;
        info!("running {}", entry.task_id);
        let result = run_task(&entry.task_id, &entry.config, &self.registry, self.tracker.clone());
        entry.status = match &result {
            Ok(_) => TaskStatus::Finished,
            Err(e) => TaskStatus::Failed(e.to_string()),
        };
        let id = entry.task_id.clone();
        self.done.push(entry);
        Some((id, result))
    }

    pub fn run_all(&mut self) -> Vec<(String, Result<RunReport, RuntimeError>)> {
        std::iter::from_fn(|| self.run_next()).collect()
    }

    /// `(task_id, status)` for finished tasks then queued ones.
    pub fn statuses(&self) -> Vec<(String, TaskStatus)> {
        self.done
            .iter()
            .chain(self.queue.iter())
            .map(|e| (e.task_id.clone(), e.status.clone()))
            .collect()
    }
}

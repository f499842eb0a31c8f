use std::net::{TcpListener, ToSocketAddrs};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use log::info;

use super::client::ClientWorker;
use super::registry::ComponentRegistry;
use super::server::Federation;
use super::setup::Materialized;
use super::{RunReport, RuntimeError};
use crate::comms::{connect_tcp, Endpoint, TcpEndpoint};
use crate::config::TaskConfig;
use crate::tracker::Tracker;

const CONNECT_RETRY: Duration = Duration::from_millis(100);

/// Accepts one connection per client on `listener`, then runs the task.
pub fn serve_tcp(
    task_id: &str,
    config: &TaskConfig,
    registry: &ComponentRegistry,
    m: &Materialized,
    listener: TcpListener,
    tracker: Arc<Tracker>,
) -> Result<RunReport, RuntimeError> {
    let server_hooks = registry.server(&config.server.executor)?;
    let expected = m.partition.clients.len();
    let mut links: Vec<Box<dyn Endpoint>> = Vec::with_capacity(expected);
    while links.len() < expected {
        let (stream, addr) = listener.accept()?;
        info!("connection from {addr}");
        links.push(Box::new(TcpEndpoint::new(stream)?));
    }
    let server_test = m.test.samples(&(0..m.test.len()).collect::<Vec<_>>());
    let mut fed = Federation::new(
        task_id,
        Arc::new(config.clone()),
        m.spec.clone(),
        server_hooks,
        tracker,
        server_test,
        m.server_samples(),
    );
    let result = fed.accept(links).and_then(|_| fed.run());
    fed.stop_all();
    result
}

/// Connects to a server as client `client_id` and serves plans until told
/// to stop. Retries the connection for up to `patience`.
pub fn join_tcp(
    task_id: &str,
    config: &TaskConfig,
    registry: &ComponentRegistry,
    m: &Materialized,
    addr: impl ToSocketAddrs + Clone,
    client_id: usize,
    patience: Duration,
) -> Result<(), RuntimeError> {
    let hooks = registry.client(&config.client.executor)?;
    let (train, test) = m.client_samples(client_id)?;
    let worker = ClientWorker::new(client_id, task_id, Arc::new(config.clone()), m.spec.clone(), hooks, train, test);
    let start = Instant::now();
    let mut ep = loop {
        match connect_tcp(addr.clone()) {
            Ok(ep) => break ep,
            Err(e) if start.elapsed() >= patience => return Err(e.into()),
            Err(_) => thread::sleep(CONNECT_RETRY),
        }
    };
    Ok(worker.serve(&mut ep)?)
}

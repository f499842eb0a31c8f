//! Runtime behavior across workflows: hook defaults, fault handling,
//! partial exchange, traffic accounting, and the task queue.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use fedflow::config::{AggregatorKind, Exchange, SplitType, TaskConfig, TestMode, Workflow};
use fedflow::learner::activation_bytes;
use fedflow::runtime::{
    default_aggregate, default_client_train, join_tcp, materialize, run_materialized, run_task, serve_tcp,
    ComponentRegistry, Engine, RunReport, TaskStatus, WorkflowHooks,
};
use fedflow::tracker::{MetricRecord, Scope, Tracker};

fn base() -> TaskConfig {
    let mut c = TaskConfig::default();
    c.data.num_of_clients = 6;
    c.data.num_classes = 4;
    c.data.samples_per_class = 60;
    c.data.test_samples_per_class = 20;
    c.data.num_features = 6;
    c.data.seed = 5;
    c.server.rounds = 4;
    c.server.clients_per_round = 6;
    c.client.local_epoch = 1;
    c.client.batch_size = 16;
    c.model.hidden = vec![8];
    c.test_mode = TestMode::TestInServer;
    c
}

fn run_with(config: &TaskConfig, registry: &ComponentRegistry) -> (RunReport, Vec<MetricRecord>) {
    let tracker = Arc::new(Tracker::new());
    let report = run_task("task-0", config, registry, tracker.clone()).expect("run succeeds");
    (report, tracker.records())
}

fn run(config: &TaskConfig) -> (RunReport, Vec<MetricRecord>) {
    run_with(config, &ComponentRegistry::with_builtins())
}

fn strip_wall_time(records: Vec<MetricRecord>) -> Vec<MetricRecord> {
    records.into_iter().map(|r| MetricRecord { wall_time: 0.0, ..r }).collect()
}

fn server_values(records: &[MetricRecord], name: &str) -> Vec<f64> {
    records
        .iter()
        .filter(|r| r.scope == Scope::Server && r.name == name)
        .map(|r| r.value)
        .collect()
}

fn client_flags(records: &[MetricRecord], name: &str) -> Vec<(u64, Scope)> {
    records.iter().filter(|r| r.name == name).map(|r| (r.round_index, r.scope)).collect()
}

fn registry_with(name: &str, hooks: WorkflowHooks) -> ComponentRegistry {
    let mut r = ComponentRegistry::with_builtins();
    r.register_client(name, hooks.client).unwrap();
    r.register_server(name, hooks.server).unwrap();
    r
}

fn use_executor(config: &mut TaskConfig, name: &str) {
    config.client.executor = name.into();
    config.server.executor = name.into();
}

#[test]
fn explicit_default_hooks_match_unset_hooks() {
    for workflow in [Workflow::Standard, Workflow::SemiServer, Workflow::Clustered] {
        let mut config = base();
        config.workflow = workflow;
        config.semi.warmup_epochs = 1;
        let (plain, plain_records) = run(&config);
        use_executor(&mut config, "explicit");
        let registry = registry_with("explicit", WorkflowHooks::explicit_defaults());
        let (explicit, explicit_records) = run_with(&config, &registry);
        assert_eq!(plain.final_model, explicit.final_model, "{workflow:?}");
        assert_eq!(strip_wall_time(plain_records), strip_wall_time(explicit_records), "{workflow:?}");
    }
}

#[test]
fn planted_clusters_are_recovered_within_three_rounds() {
    const SEEDS: u64 = 10;
    const REQUIRED: u64 = 8;
    const WITHIN_ROUNDS: u64 = 3;
    let mut recovered = 0;
    for seed in 0..SEEDS {
        let mut config = base();
        config.workflow = Workflow::Clustered;
        config.test_mode = TestMode::TestInClient;
        config.data.populations = 2;
        config.data.num_of_clients = 12;
        config.data.class_separation = 5.0;
        config.data.seed = seed;
        config.server.clients_per_round = 12;
        config.server.rounds = WITHIN_ROUNDS as usize;
        config.client.local_epoch = 2;
        config.client.optimizer.lr = 0.05;
        let (_, records) = run(&config);
        let last: BTreeMap<usize, usize> = records
            .iter()
            .filter(|r| r.name == "cluster" && r.round_index == WITHIN_ROUNDS - 1)
            .filter_map(|r| match r.scope {
                Scope::Client(id) => Some((id, r.value as usize)),
                _ => None,
            })
            .collect();
        assert_eq!(last.len(), 12, "every client reports a cluster");
        // Cluster labels may be permuted relative to populations.
        let same = last.iter().all(|(&id, &c)| c == id % 2);
        let swapped = last.iter().all(|(&id, &c)| c == 1 - id % 2);
        if same || swapped {
            recovered += 1;
        }
    }
    assert!(recovered >= REQUIRED, "recovered {recovered} of {SEEDS}");
}

fn semi_config(threshold: f64) -> TaskConfig {
    let mut config = base();
    config.workflow = Workflow::SemiServer;
    config.semi.pseudo_label_threshold = threshold;
    config.semi.warmup_epochs = 1;
    config.server.rounds = 3;
    config
}

#[test]
fn semi_threshold_one_excludes_every_client_but_fine_tuning_continues() {
    let config = semi_config(1.0);
    let (report, records) = run(&config);
    assert_eq!(server_values(&records, "received"), vec![0.0; 3]);
    assert_eq!(server_values(&records, "round_failed"), vec![1.0; 3]);
    let m = materialize(&config, &ComponentRegistry::with_builtins()).unwrap();
    assert_ne!(report.final_model, m.spec.init(config.data.seed));

    let mut no_tune = config.clone();
    no_tune.semi.finetune_epochs = 0;
    let (still, _) = run(&no_tune);
    assert_ne!(report.final_model, still.final_model);
}

#[test]
fn semi_threshold_zero_uses_every_sample() {
    let config = semi_config(0.0);
    let seen = Arc::new(Mutex::new(Vec::new()));
    let mut hooks = WorkflowHooks::default();
    let sink = seen.clone();
    hooks.server.aggregate = Some(Arc::new(move |state, global, uploads, exchange| {
        sink.lock()
            .unwrap()
            .push(uploads.iter().map(|u| (u.client_id, u.num_samples)).collect::<Vec<_>>());
        default_aggregate(state, global, uploads, exchange)
    }));
    let mut cfg = config.clone();
    use_executor(&mut cfg, "capture");
    run_with(&cfg, &registry_with("capture", hooks));
    let m = materialize(&config, &ComponentRegistry::with_builtins()).unwrap();
    let rounds = seen.lock().unwrap();
    assert_eq!(rounds.len(), 3);
    for round in rounds.iter() {
        assert_eq!(round.len(), 6);
        for &(id, n) in round {
            assert_eq!(n, m.client_samples(id).unwrap().0.len(), "client {id}");
        }
    }
}

#[test]
fn continual_with_one_full_task_matches_standard() {
    let mut standard = base();
    standard.server.rounds = 3;
    let mut continual = standard.clone();
    continual.workflow = Workflow::Continual;
    continual.continual.tasks = vec![(0..4).collect()];
    continual.continual.rounds_per_task = 3;
    let (a, _) = run(&standard);
    let (b, _) = run(&continual);
    assert_eq!(a.final_model, b.final_model);
}

#[test]
fn failed_rounds_leave_the_global_model_unchanged() {
    let mut config = base();
    config.server.rounds = 2;
    use_executor(&mut config, "broken");
    let mut hooks = WorkflowHooks::default();
    hooks.client.client_train = Some(Arc::new(|_| Err("disk on fire".into())));
    let (report, records) = run_with(&config, &registry_with("broken", hooks));
    let m = materialize(&config, &ComponentRegistry::with_builtins()).unwrap();
    assert_eq!(report.final_model, m.spec.init(config.data.seed));
    assert_eq!(server_values(&records, "round_failed"), vec![1.0, 1.0]);
    assert_eq!(client_flags(&records, "client_failed").len(), 12);
}

#[test]
fn partial_exchange_keeps_private_blocks_at_their_initial_values() {
    let mut config = base();
    config.model.exchange = Exchange::Partial;
    config.model.partial_blocks = vec!["layer1.weight".into(), "layer1.bias".into()];
    let (report, _) = run(&config);
    let m = materialize(&config, &ComponentRegistry::with_builtins()).unwrap();
    let init = m.spec.init(config.data.seed);
    for name in ["layer0.weight", "layer0.bias"] {
        assert_eq!(report.final_model.block(name), init.block(name), "{name}");
    }
    assert_ne!(report.final_model.block("layer1.weight"), init.block("layer1.weight"));
}

#[test]
fn fedyogi_run_stays_finite_and_learns() {
    let mut config = base();
    config.server.aggregator = AggregatorKind::Fedyogi;
    config.server.server_lr = 0.01;
    config.server.rounds = 6;
    let (report, _) = run(&config);
    assert!(report.final_model.all_finite());
    assert!(report.final_accuracy.unwrap() > 1.0 / 4.0);
}

#[test]
fn slow_clients_miss_the_deadline_and_the_round_proceeds() {
    let mut config = base();
    config.server.rounds = 2;
    config.server.round_deadline_ms = 300;
    use_executor(&mut config, "slow");
    let mut hooks = WorkflowHooks::default();
    hooks.client.client_train = Some(Arc::new(|ctx| {
        if ctx.client_id == 0 {
            thread::sleep(Duration::from_millis(800));
        }
        default_client_train(ctx)
    }));
    let (_, records) = run_with(&config, &registry_with("slow", hooks));
    let timeouts = client_flags(&records, "client_timeout");
    assert!(timeouts.contains(&(0, Scope::Client(0))), "{timeouts:?}");
    assert!(timeouts.iter().all(|&(_, s)| s == Scope::Client(0)));
    assert_eq!(server_values(&records, "received")[0], 5.0);
    assert_eq!(server_values(&records, "round_failed"), vec![0.0, 0.0]);
}

#[test]
fn tcp_client_that_drops_out_is_marked_unavailable() {
    let mut config = base();
    config.server.rounds = 4;
    use_executor(&mut config, "flaky");
    let calls = Arc::new(AtomicUsize::new(0));
    let mut hooks = WorkflowHooks::default();
    hooks.client.client_train = Some(Arc::new(move |ctx| {
        if ctx.client_id == 2 && calls.fetch_add(1, Ordering::SeqCst) == 1 {
            std::panic::panic_any("client lost power");
        }
        default_client_train(ctx)
    }));
    let registry = registry_with("flaky", hooks);
    let m = materialize(&config, &registry).unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let tracker = Arc::new(Tracker::new());
    let report = thread::scope(|s| {
        for id in 0..config.data.num_of_clients {
            let (config, registry, m) = (&config, &registry, &m);
            s.spawn(move || {
                let _ = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
                    join_tcp("task-0", config, registry, m, addr, id, Duration::from_secs(10))
                }));
            });
        }
        serve_tcp("task-0", &config, &registry, &m, listener, tracker.clone())
    })
    .expect("the task survives a lost client");
    let records = tracker.records();
    assert_eq!(report.rounds.len(), 4);
    let dropped = client_flags(&records, "client_disconnected");
    assert_eq!(dropped.len(), 1, "{dropped:?}");
    assert_eq!(dropped[0].1, Scope::Client(2));
    let after: Vec<_> = records
        .iter()
        .filter(|r| r.scope == Scope::Client(2) && r.name == "selected" && r.round_index > dropped[0].0)
        .collect();
    assert!(after.is_empty(), "client 2 selected after dropping out");
    assert!(report.final_model.all_finite());
}

#[test]
fn split_activation_traffic_matches_sample_counts() {
    let mut config = base();
    config.workflow = Workflow::Split;
    config.model.hidden = vec![8, 5];
    config.model.split_layer = Some(2);
    config.client.local_epoch = 2;
    config.data.split_type = SplitType::Dir;
    let registry = ComponentRegistry::with_builtins();
    let m = materialize(&config, &registry).unwrap();
    let tracker = Arc::new(Tracker::new());
    run_materialized("task-0", &config, &registry, &m, tracker.clone()).unwrap();
    let records = tracker.records();
    let samples: usize = (0..config.data.num_of_clients)
        .map(|id| m.client_samples(id).unwrap().0.len())
        .sum();
    let expected = activation_bytes(&m.spec, 2, samples * config.client.local_epoch);
    assert_eq!(server_values(&records, "activation_bytes"), vec![expected as f64; config.server.rounds]);
}

#[test]
fn engine_runs_tasks_in_submission_order() {
    let mut engine = Engine::new(ComponentRegistry::with_builtins(), Arc::new(Tracker::new()));
    let mut bad = base();
    bad.server.clients_per_round = 99;
    assert!(engine.submit_task(bad).is_err());
    let mut quick = base();
    quick.server.rounds = 1;
    let a = engine.submit_task(quick.clone()).unwrap();
    let b = engine.submit_task(quick).unwrap();
    assert_eq!((a.as_str(), b.as_str()), ("task-0", "task-1"));
    assert!(engine.statuses().iter().all(|(_, s)| *s == TaskStatus::Queued));
    let (first, result) = engine.run_next().unwrap();
    assert_eq!(first, "task-0");
    assert!(result.is_ok());
    assert_eq!(
        engine.statuses(),
        vec![("task-0".to_string(), TaskStatus::Finished), ("task-1".to_string(), TaskStatus::Queued)]
    );
    assert_eq!(engine.run_all().len(), 1);
    assert!(engine.run_next().is_none());
    let tasks: std::collections::BTreeSet<String> = engine.tracker().records().into_iter().map(|r| r.task_id).collect();
    assert_eq!(tasks.len(), 2);
}

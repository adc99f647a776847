//! Wires workload, schedulers, policies and telemetry onto the event kernel.

use std::collections::HashMap;

use thiserror::Error;

use crate::engine::{EventKind, HandlerTable, Kernel, SimEvent, SimSummary};
use crate::model::{Cluster, InstanceId, ModelError, ServiceGraph, ServiceId};
use crate::policies::{
    deploy, migration_check, retire_instance, Migration, PolicyContext, PolicyRegistry,
    Provisioner, ScalingDecision, ScalingPolicy, Trigger,
};
use crate::registry::{Scenario, ScenarioConfig};
use crate::scheduling::{BalancerRegistry, CloudletKey, Executor};
use crate::telemetry::{finalize_request, Report, UsageModel, UsageRecord, UsageTracker};
use crate::workload::{GeneratorParams, Request, RequestGenerator, RequestStatus};

#[derive(Debug, Error)]
pub enum SimError {
    #[error("{0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invariant violated: {0}")]
    Invariant(String),
}

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    None,
    Request(u64),
    Service(ServiceId),
    Instance { instance: InstanceId, version: u64 },
    Cloudlet(CloudletKey),
}

struct Live {
    root: CloudletKey,
    outstanding: usize,
}

struct World {
    cfg: ScenarioConfig,
    graph: ServiceGraph,
    cluster: Cluster,
    prov: Provisioner,
    exec: Executor,
    generator: RequestGenerator,
    tracker: UsageTracker,
    trigger: Trigger,
    policy: Option<Box<dyn ScalingPolicy>>,
    requests: Vec<Request>,
    live: HashMap<u64, Live>,
    undispatched: usize,
    start_pending: Vec<bool>,
    generating: bool,
    usage: Vec<UsageRecord>,
    decisions: Vec<ScalingDecision>,
    migrations: Vec<Migration>,
    starved: u64,
    error: Option<String>,
}

impl World {
    fn request_start(&mut self, s: ServiceId, k: &mut Kernel<Payload>) {
        if !self.start_pending[s.index()] {
            self.start_pending[s.index()] = true;
            k.schedule_in(0.0, EventKind::StartExecution, Payload::Service(s));
        }
    }

    fn schedule_completion(&mut self, i: InstanceId, k: &mut Kernel<Payload>) {
        if let Some((at, version)) = self.exec.next_completion(i) {
            let at = at.max(k.now());
            k.schedule(
                at,
                EventKind::CloudletComplete,
                Payload::Instance {
                    instance: i,
                    version,
                },
            )
            .expect("completion is never in the past");
        }
    }

    fn maybe_finish(&mut self, k: &mut Kernel<Payload>) {
        if !self.generating && self.live.is_empty() && self.undispatched == 0 {
            k.stop();
        }
    }

    fn fail(&mut self, msg: String, k: &mut Kernel<Payload>) {
        if self.error.is_none() {
            self.error = Some(msg);
        }
        k.stop();
    }
}

fn on_generate(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let t = ev.fire_at.secs();
    let fresh = w.generator.tick(t, k.rng());
    for r in fresh {
        let id = r.id;
        debug_assert_eq!(id as usize, w.requests.len());
        w.requests.push(r);
        w.undispatched += 1;
        k.schedule_in(0.0, EventKind::Dispatch, Payload::Request(id));
    }
    if w.generator.active_at(t + 1.0) {
        k.schedule_in(1.0, EventKind::Generate, Payload::None);
    } else {
        w.generating = false;
        if let Some(limit) = w.cfg.drain_limit {
            k.schedule_in(limit, EventKind::EndSimulation, Payload::None);
        }
        w.maybe_finish(k);
    }
}

fn on_dispatch(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let Payload::Request(id) = ev.payload else { unreachable!() };
    let t = ev.fire_at.secs();
    w.undispatched -= 1;
    let entry = w.graph.entry(w.requests[id as usize].api);
    if w.cluster.live_instances_of(entry).next().is_none() {
        let r = &mut w.requests[id as usize];
        r.status = RequestStatus::Failed;
        w.maybe_finish(k);
        return;
    }
    let root = w.exec.create(id, entry, None, t, k.rng());
    w.exec.admit(root, t);
    w.live.insert(
        id,
        Live {
            root,
            outstanding: 1,
        },
    );
    w.request_start(entry, k);
}

fn on_start(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let Payload::Service(s) = ev.payload else { unreachable!() };
    let t = ev.fire_at.secs();
    w.start_pending[s.index()] = false;
    let touched = w.exec.try_start(s, t, &w.cluster, k.rng());
    for i in touched {
        w.tracker.advance(i, t);
        let n = w.exec.executing_on(i);
        w.tracker.refresh(&w.cluster, i, n, t);
        w.schedule_completion(i, k);
    }
}

fn on_complete(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let Payload::Instance { instance: i, version } = ev.payload else { unreachable!() };
    if w.exec.cpu(i).map(|c| c.version()) != Some(version) {
        return;
    }
    let t = ev.fire_at.secs();
    w.tracker.advance(i, t);
    let done = w.exec.finish_due(i, t);
    for key in done {
        k.schedule_in(0.0, EventKind::Derive, Payload::Cloudlet(key));
    }
    let n = w.exec.executing_on(i);
    if n == 0 && w.cluster.instance(i).draining {
        retire_instance(&mut w.prov, &mut w.cluster, i);
    }
    w.tracker.refresh(&w.cluster, i, n, t);
    w.schedule_completion(i, k);
    let services: Vec<ServiceId> = w.cluster.mappings.services_of(i).collect();
    for s in services {
        if w.exec.scheduler(s).waiting_len() > 0 {
            w.request_start(s, k);
        }
    }
}

fn on_derive(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let Payload::Cloudlet(key) = ev.payload else { unreachable!() };
    let t = ev.fire_at.secs();
    let children = w.exec.derive(key, &w.graph, t, k.rng());
    let parent = w.exec.cloudlet(key);
    let (request_id, host) = (parent.request_id, parent.instance);
    if let Some(i) = host {
        w.tracker.count_derivations(i, children.len() as u64, t);
    }
    for &c in &children {
        let s = w.exec.cloudlet(c).service;
        w.request_start(s, k);
    }
    let live = w.live.get_mut(&request_id).expect("live request");
    live.outstanding = live.outstanding + children.len() - 1;
    if live.outstanding > 0 {
        return;
    }
    let root = live.root;
    w.live.remove(&request_id);
    let req = &w.requests[request_id as usize];
    match finalize_request(&w.exec, &w.graph, req, root, w.cfg.include_wait_in_delay) {
        Ok(f) => {
            let r = &mut w.requests[request_id as usize];
            r.status = RequestStatus::Completed;
            r.response_time = Some(f.response_ms);
            r.cp_estimate = Some(f.cp_estimate_ms);
            r.critical_path = Some(f.critical_path);
            r.completed_at = Some(f.completed_at);
        }
        Err(e) => return w.fail(e.to_string(), k),
    }
    w.exec.release_tree(root);
    w.maybe_finish(k);
}

fn on_scaling(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let t = ev.fire_at.secs();
    if let Some(policy) = w.policy.as_mut() {
        w.tracker.advance_all(&w.cluster, t);
        let before = w.cluster.instances.len();
        for s in w.graph.ids().collect::<Vec<_>>() {
            let Some(u) = w.tracker.take_window(&w.cluster, s) else { continue };
            let Some(p) = w.trigger.observe(s, u) else { continue };
            let mut ctx = PolicyContext {
                prov: &mut w.prov,
                cluster: &mut w.cluster,
                graph: &w.graph,
                exec: &mut w.exec,
                t,
                vs_factor: w.cfg.vs_factor,
            };
            let d = policy.apply(&mut ctx, s, p, u);
            log::debug!(
                "t={t:.1} {} {} {} -> {} replicas",
                w.graph.name(s),
                d.direction,
                d.outcome,
                d.replicas_after
            );
            w.decisions.push(d);
        }
        debug_assert!(w.cluster.instances.len() >= before);
        w.tracker.refresh_all(&w.cluster, &w.exec, t);
        for i in 0..w.cluster.instances.len() {
            w.schedule_completion(InstanceId::from(i), k);
        }
        for s in w.graph.ids().collect::<Vec<_>>() {
            if w.exec.scheduler(s).waiting_len() > 0 {
                w.request_start(s, k);
            }
        }
        if cfg!(debug_assertions) {
            if let Err(e) = w.prov.check(&w.cluster) {
                return w.fail(e, k);
            }
        }
    }
    if w.cfg.vm_overload_threshold.is_some() {
        k.schedule_in(0.0, EventKind::MigrationCheck, Payload::None);
    }
    k.schedule_in(w.cfg.check_interval, EventKind::ScalingCheck, Payload::None);
}

fn on_migration(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let t = ev.fire_at.secs();
    let Some(th) = w.cfg.vm_overload_threshold else { return };
    let moves = migration_check(&mut w.prov, &mut w.cluster, &mut w.exec, t, th);
    for m in &moves {
        if m.result.is_ok() {
            w.schedule_completion(m.instance, k);
        }
    }
    w.migrations.extend(moves);
    if cfg!(debug_assertions) {
        if let Err(e) = w.prov.check(&w.cluster) {
            w.fail(e, k);
        }
    }
}

fn on_sample(w: &mut World, ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    let t = ev.fire_at.secs();
    if w.cfg.record_usage {
        let rows = w.tracker.sample(&w.cluster, t);
        w.usage.extend(rows);
    }
    for s in w.graph.ids().collect::<Vec<_>>() {
        w.starved += w.exec.sweep_starved(s, t, w.cfg.starvation_timeout);
    }
    k.schedule_in(w.cfg.metrics_sample_interval, EventKind::MetricsSample, Payload::None);
}

fn on_end(_w: &mut World, _ev: SimEvent<Payload>, k: &mut Kernel<Payload>) {
    k.stop();
}

/// One configured run, ready to execute.
pub struct Simulation {
    table: HandlerTable<World, Payload>,
    kernel: Kernel<Payload>,
    allocation_failures: Vec<String>,
}

/// Result of a finished run.
pub struct RunOutput {
    pub report: Report,
    pub summary: SimSummary,
    pub cluster: Cluster,
}

impl Simulation {
    pub fn new(scenario: &Scenario) -> Result<Self, SimError> {
        Self::with_registries(scenario, &BalancerRegistry::default(), &PolicyRegistry::default())
    }

    pub fn with_registries(
        scenario: &Scenario,
        balancers: &BalancerRegistry,
        policies: &PolicyRegistry,
    ) -> Result<Self, SimError> {
        let cfg = scenario.config.clone();
        let graph = ServiceGraph::build_with_limit(
            scenario.services.clone(),
            scenario.apis.clone(),
            cfg.path_limit,
        )?;
        let balancer = balancers.create(&cfg.lb_policy).ok_or_else(|| {
            SimError::Config(format!("scenario.toml (lb_policy): unknown balancer {:?}", cfg.lb_policy))
        })?;
        let policy = match cfg.scaling_policy.as_str() {
            "none" => None,
            name => Some(policies.create(name).ok_or_else(|| {
                SimError::Config(format!("scenario.toml (scaling_policy): unknown policy {name:?}"))
            })?),
        };

        let mut cluster = Cluster::new(&graph, scenario.vms.clone(), scenario.replica_sets.clone());
        let mut prov = Provisioner::new(&cluster, cfg.gate_bandwidth);
        let mut allocation_failures = Vec::new();
        for (s, alloc) in deploy(&mut prov, &mut cluster, &graph) {
            for i in &alloc.failed {
                allocation_failures.push(format!(
                    "{} (service {})",
                    cluster.instance(*i).id,
                    graph.name(s)
                ));
            }
            if !alloc.deployed() {
                log::warn!("service {} has no placed instance", graph.name(s));
            }
        }
        prov.check(&cluster).map_err(SimError::Invariant)?;

        let mut exec = Executor::new(&graph, &cfg, balancer);
        let mut tracker = UsageTracker::new(UsageModel::from_config(&cfg));
        for (i, inst) in cluster.instances.iter().enumerate() {
            let iid = InstanceId::from(i);
            let mips = inst
                .host_vm
                .map_or(0.0, |v| cluster.vm(v).mips_for_shares(inst.limit_shares));
            exec.ensure_cpu(iid, mips);
            tracker.refresh(&cluster, iid, 0, 0.0);
        }
        let weights: Vec<f64> = graph.apis().iter().map(|a| a.weight).collect();
        let generator = RequestGenerator::new(GeneratorParams::from_config(&cfg), &weights);
        let trigger = Trigger::new(
            graph.len(),
            cfg.consecutive_breaches as usize,
            cfg.upper_threshold,
            cfg.lower_threshold,
        );

        let mut kernel = Kernel::new(cfg.seed);
        kernel
            .schedule(0.0, EventKind::Generate, Payload::None)
            .expect("t=0");
        if policy.is_some() || cfg.vm_overload_threshold.is_some() {
            kernel
                .schedule(cfg.check_interval, EventKind::ScalingCheck, Payload::None)
                .expect("positive interval");
        }
        if cfg.record_usage {
            kernel
                .schedule(0.0, EventKind::MetricsSample, Payload::None)
                .expect("t=0");
        } else {
            // starvation sweeps still need a clock
            kernel
                .schedule(cfg.metrics_sample_interval, EventKind::MetricsSample, Payload::None)
                .expect("positive interval");
        }

        let start_pending = vec![false; graph.len()];
        let world = World {
            cfg,
            graph,
            cluster,
            prov,
            exec,
            generator,
            tracker,
            trigger,
            policy,
            requests: Vec::new(),
            live: HashMap::new(),
            undispatched: 0,
            start_pending,
            generating: true,
            usage: Vec::new(),
            decisions: Vec::new(),
            migrations: Vec::new(),
            starved: 0,
            error: None,
        };
        let mut table = HandlerTable::new(world);
        table
            .register(EventKind::Generate, on_generate)
            .register(EventKind::Dispatch, on_dispatch)
            .register(EventKind::StartExecution, on_start)
            .register(EventKind::CloudletComplete, on_complete)
            .register(EventKind::Derive, on_derive)
            .register(EventKind::ScalingCheck, on_scaling)
            .register(EventKind::MigrationCheck, on_migration)
            .register(EventKind::MetricsSample, on_sample)
            .register(EventKind::EndSimulation, on_end);
        Ok(Simulation {
            table,
            kernel,
            allocation_failures,
        })
    }

    pub fn run(mut self) -> Result<RunOutput, SimError> {
        let summary = self.kernel.run(&mut self.table, None);
        let mut w = self.table.into_state();
        if let Some(e) = w.error.take() {
            return Err(SimError::Invariant(e));
        }
        let end = summary.clock.secs();
        w.tracker.advance_all(&w.cluster, end);
        w.exec
            .check_conservation()
            .map_err(SimError::Invariant)?;
        w.prov.check(&w.cluster).map_err(SimError::Invariant)?;
        let report = Report {
            api_names: w.graph.apis().iter().map(|a| a.name.clone()).collect(),
            service_names: w.graph.services().iter().map(|s| s.name.clone()).collect(),
            instance_names: w.cluster.instances.iter().map(|i| i.id.clone()).collect(),
            vm_names: w.cluster.vms.iter().map(|v| v.id.clone()).collect(),
            requests: w.requests,
            usage: w.usage,
            decisions: w.decisions,
            migrations: w.migrations,
            starved: w.starved,
            slo_threshold_ms: w.cfg.slo_threshold_ms,
            policy: w.cfg.scaling_policy.clone(),
            seed: w.cfg.seed,
            mean_cpu: w.tracker.mean_cpu_per_instance(),
            mean_ram: w.tracker.mean_ram_per_instance(),
            end_time: end,
            events: summary.processed,
            cloudlets: w.exec.created(),
            allocation_failures: self.allocation_failures,
        };
        Ok(RunOutput {
            report,
            summary,
            cluster: w.cluster,
        })
    }
}

/// Build and run a scenario with the built-in registries.
pub fn run_scenario(scenario: &Scenario) -> Result<RunOutput, SimError> {
    Simulation::new(scenario)?.run()
}

//! Usage accounting, response-time finalization with critical-path
//! attribution, QoS aggregation and CSV export.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::model::{ApiId, Cluster, Instance, InstanceId, ServiceGraph, ServiceId, VmId};
use crate::policies::{Migration, ScalingDecision};
use crate::registry::ScenarioConfig;
use crate::scheduling::{CloudletKey, CloudletStatus, Executor};
use crate::workload::{Request, RequestStatus};

#[derive(Debug, Error)]
pub enum TelemetryError {
    #[error("request {0} still has unfinished cloudlets")]
    IncompleteRequest(u64),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

// ---------------------------------------------------------------------------
// usage

/// Linear resource model: usage grows with the number of executing
/// cloudlets and is capped at the instance's limits.
#[derive(Clone, Debug, PartialEq)]
pub struct UsageModel {
    pub cpu_per_cloudlet: Option<f64>,
    pub cpu_parallelism: f64,
    pub idle_cpu_floor: f64,
    pub idle_cpu_fraction: f64,
    pub ram_per_cloudlet: f64,
    pub idle_ram_floor: f64,
    pub bw_per_derivation: f64,
}

impl UsageModel {
    pub fn from_config(cfg: &ScenarioConfig) -> Self {
        UsageModel {
            cpu_per_cloudlet: cfg.cpu_per_cloudlet,
            cpu_parallelism: cfg.cpu_parallelism,
            idle_cpu_floor: cfg.idle_cpu_floor,
            idle_cpu_fraction: cfg.idle_cpu_fraction,
            ram_per_cloudlet: cfg.ram_per_cloudlet,
            idle_ram_floor: cfg.idle_ram_floor,
            bw_per_derivation: cfg.bw_per_derivation,
        }
    }

    pub fn cpu(&self, inst: &Instance, n: usize) -> f64 {
        let per = self
            .cpu_per_cloudlet
            .unwrap_or(inst.requested_shares as f64 / self.cpu_parallelism);
        let idle = self.idle_cpu_floor + self.idle_cpu_fraction * inst.requested_shares as f64;
        (idle + per * n as f64).min(inst.limit_shares as f64)
    }

    pub fn ram(&self, inst: &Instance, n: usize) -> f64 {
        (self.idle_ram_floor + self.ram_per_cloudlet * n as f64).min(inst.limit_ram as f64)
    }

    pub fn bw(&self, derivations: u64) -> f64 {
        self.bw_per_derivation * derivations as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Entity {
    Instance(InstanceId),
    Vm(VmId),
}

#[derive(Clone, Debug, PartialEq)]
pub struct UsageRecord {
    pub t: f64,
    pub entity: Entity,
    pub cpu: f64,
    pub ram: f64,
    pub bw: f64,
    pub n_executing: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
struct Meter {
    last: f64,
    alive: bool,
    n: usize,
    cpu: f64,
    ram: f64,
    util: f64,
    cpu_total: f64,
    ram_total: f64,
    alive_total: f64,
    win_util: f64,
    win_alive: f64,
    derivations: u64,
}

/// Exact time integrals of per-instance usage. Before any change that
/// affects an instance's usage call [`UsageTracker::advance`]; afterwards
/// call [`UsageTracker::refresh`].
#[derive(Clone, Debug)]
pub struct UsageTracker {
    model: UsageModel,
    meters: Vec<Meter>,
}

impl UsageTracker {
    pub fn new(model: UsageModel) -> Self {
        UsageTracker {
            model,
            meters: Vec::new(),
        }
    }

    pub fn model(&self) -> &UsageModel {
        &self.model
    }

    fn meter(&mut self, i: InstanceId, t: f64) -> &mut Meter {
        while self.meters.len() <= i.index() {
            self.meters.push(Meter {
                last: t,
                ..Meter::default()
            });
        }
        &mut self.meters[i.index()]
    }

    pub fn advance(&mut self, i: InstanceId, t: f64) {
        let m = self.meter(i, t);
        let dt = t - m.last;
        if dt > 0.0 {
            if m.alive {
                m.cpu_total += m.cpu * dt;
                m.ram_total += m.ram * dt;
                m.alive_total += dt;
                m.win_util += m.util * dt;
                m.win_alive += dt;
            }
            m.last = t;
        }
    }

    pub fn advance_all(&mut self, cluster: &Cluster, t: f64) {
        for i in 0..cluster.instances.len() {
            self.advance(InstanceId::from(i), t);
        }
    }

    pub fn refresh(&mut self, cluster: &Cluster, i: InstanceId, n: usize, t: f64) {
        let inst = cluster.instance(i);
        let (cpu, ram) = (self.model.cpu(inst, n), self.model.ram(inst, n));
        let limit = inst.limit_shares as f64;
        let alive = inst.live();
        let m = self.meter(i, t);
        m.alive = alive;
        m.n = n;
        m.cpu = cpu;
        m.ram = ram;
        m.util = if limit > 0.0 { cpu / limit } else { 0.0 };
    }

    pub fn refresh_all(&mut self, cluster: &Cluster, exec: &Executor, t: f64) {
        for i in 0..cluster.instances.len() {
            let iid = InstanceId::from(i);
            self.refresh(cluster, iid, exec.executing_on(iid), t);
        }
    }

    pub fn count_derivations(&mut self, i: InstanceId, k: u64, t: f64) {
        self.meter(i, t).derivations += k;
    }

    /// Time-weighted mean utilization (usage / limit) of the service's live
    /// instances since the last call, then reset their windows.
    pub fn take_window(&mut self, cluster: &Cluster, service: ServiceId) -> Option<f64> {
        let (mut num, mut den) = (0.0, 0.0);
        for &i in cluster.mappings.instances_of(service) {
            if let Some(m) = self.meters.get_mut(i.index()) {
                num += m.win_util;
                den += m.win_alive;
                m.win_util = 0.0;
                m.win_alive = 0.0;
            }
        }
        (den > 0.0).then(|| num / den)
    }

    /// Current usage of every live instance plus per-VM sums. Resets the
    /// derivation counters.
    pub fn sample(&mut self, cluster: &Cluster, t: f64) -> Vec<UsageRecord> {
        let mut rows = Vec::new();
        let mut per_vm = vec![(0.0, 0.0, 0.0, 0usize); cluster.vms.len()];
        for (i, inst) in cluster.instances.iter().enumerate() {
            let iid = InstanceId::from(i);
            let bw_model = self.model.bw_per_derivation;
            let m = self.meter(iid, t);
            let bw = bw_model * m.derivations as f64;
            m.derivations = 0;
            if !inst.live() {
                continue;
            }
            rows.push(UsageRecord {
                t,
                entity: Entity::Instance(iid),
                cpu: m.cpu,
                ram: m.ram,
                bw,
                n_executing: m.n,
            });
            if let Some(vm) = inst.host_vm {
                let acc = &mut per_vm[vm.index()];
                acc.0 += m.cpu;
                acc.1 += m.ram;
                acc.2 += bw;
                acc.3 += m.n;
            }
        }
        for (v, (cpu, ram, bw, n)) in per_vm.into_iter().enumerate() {
            rows.push(UsageRecord {
                t,
                entity: Entity::Vm(VmId::from(v)),
                cpu,
                ram,
                bw,
                n_executing: n,
            });
        }
        rows
    }

    /// Mean CPU per live instance over the whole run: total CPU integral
    /// over total instance lifetime.
    pub fn mean_cpu_per_instance(&self) -> f64 {
        let cpu: f64 = self.meters.iter().map(|m| m.cpu_total).sum();
        let alive: f64 = self.meters.iter().map(|m| m.alive_total).sum();
        if alive > 0.0 {
            cpu / alive
        } else {
            0.0
        }
    }

    pub fn mean_ram_per_instance(&self) -> f64 {
        let ram: f64 = self.meters.iter().map(|m| m.ram_total).sum();
        let alive: f64 = self.meters.iter().map(|m| m.alive_total).sum();
        if alive > 0.0 {
            ram / alive
        } else {
            0.0
        }
    }

    /// `(cpu integral, lifetime)` of one instance.
    pub fn totals(&self, i: InstanceId) -> (f64, f64) {
        self.meters
            .get(i.index())
            .map_or((0.0, 0.0), |m| (m.cpu_total, m.alive_total))
    }
}

// ---------------------------------------------------------------------------
// critical path

/// Sum node delays along every chain and return `(index, total)` of the
/// first chain with the largest sum. `delay(c, k)` is the delay of the
/// `k`-th node as reached along chain `c`.
pub fn critical_path<F>(chains: &[Vec<ServiceId>], mut delay: F) -> Option<(usize, f64)>
where
    F: FnMut(usize, usize) -> f64,
{
    let mut best: Option<(usize, f64)> = None;
    for (c, chain) in chains.iter().enumerate() {
        let total: f64 = (0..chain.len()).map(|k| delay(c, k)).sum();
        if best.is_none_or(|(_, b)| total > b) {
            best = Some((c, total));
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq)]
pub struct Finalized {
    /// Last finish minus arrival, ms.
    pub response_ms: f64,
    /// Largest per-chain delay sum, ms.
    pub cp_estimate_ms: f64,
    pub critical_path: Vec<ServiceId>,
    pub completed_at: f64,
}

/// Cloudlets of a request along one chain, following the derivation tree.
fn chain_cloudlets(exec: &Executor, root: CloudletKey, chain: &[ServiceId]) -> Option<Vec<CloudletKey>> {
    let mut out = Vec::with_capacity(chain.len());
    let mut cur = root;
    if exec.cloudlet(cur).service != chain[0] {
        return None;
    }
    out.push(cur);
    for s in &chain[1..] {
        cur = *exec
            .cloudlet(cur)
            .children
            .iter()
            .find(|k| exec.cloudlet(**k).service == *s)?;
        out.push(cur);
    }
    Some(out)
}

pub fn finalize_request(
    exec: &Executor,
    graph: &ServiceGraph,
    request: &Request,
    root: CloudletKey,
    include_wait: bool,
) -> Result<Finalized, TelemetryError> {
    let incomplete = || TelemetryError::IncompleteRequest(request.id);
    let mut last = request.arrival;
    let mut stack = vec![root];
    while let Some(k) = stack.pop() {
        let c = exec.cloudlet(k);
        if c.status != CloudletStatus::Finished {
            return Err(incomplete());
        }
        last = last.max(c.finished_at.expect("finished"));
        stack.extend(c.children.iter().copied());
    }
    let chains = graph.chains(request.api);
    let mut walks = Vec::with_capacity(chains.len());
    for chain in chains {
        walks.push(chain_cloudlets(exec, root, chain).ok_or_else(incomplete)?);
    }
    let (idx, total) = critical_path(chains, |c, k| exec.cloudlet(walks[c][k]).delay(include_wait))
        .ok_or_else(incomplete)?;
    Ok(Finalized {
        response_ms: (last - request.arrival) * 1000.0,
        cp_estimate_ms: total * 1000.0,
        critical_path: chains[idx].clone(),
        completed_at: last,
    })
}

// ---------------------------------------------------------------------------
// aggregation

/// Nearest-rank percentile of an ascending slice.
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Clone, Debug, PartialEq)]
pub struct ApiStats {
    pub api: String,
    pub completed: u64,
    pub failed: u64,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p95_ms: f64,
    pub p99_ms: f64,
    pub slo_violation_rate: f64,
    pub mean_rps: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QosReport {
    pub apis: Vec<ApiStats>,
    pub completed: u64,
    pub failed: u64,
    pub unfinished: u64,
    pub mean_ms: f64,
    pub slo_violation_rate: f64,
}

/// Everything a run produced, with the names needed to print it.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub api_names: Vec<String>,
    pub service_names: Vec<String>,
    pub instance_names: Vec<String>,
    pub vm_names: Vec<String>,
    pub requests: Vec<Request>,
    pub usage: Vec<UsageRecord>,
    pub decisions: Vec<ScalingDecision>,
    pub migrations: Vec<Migration>,
    pub starved: u64,
    pub slo_threshold_ms: f64,
    pub policy: String,
    pub seed: u64,
    /// Time-weighted mean over instance lifetimes, milicores.
    pub mean_cpu: f64,
    pub mean_ram: f64,
    pub end_time: f64,
    pub events: u64,
    pub cloudlets: u64,
    pub allocation_failures: Vec<String>,
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

impl Report {
    pub fn empty(api_names: Vec<String>) -> Self {
        Report {
            api_names,
            service_names: Vec::new(),
            instance_names: Vec::new(),
            vm_names: Vec::new(),
            requests: Vec::new(),
            usage: Vec::new(),
            decisions: Vec::new(),
            migrations: Vec::new(),
            starved: 0,
            slo_threshold_ms: 3000.0,
            policy: "none".into(),
            seed: 0,
            mean_cpu: 0.0,
            mean_ram: 0.0,
            end_time: 0.0,
            events: 0,
            cloudlets: 0,
            allocation_failures: Vec::new(),
        }
    }

    fn completed(&self) -> impl Iterator<Item = &Request> {
        self.requests
            .iter()
            .filter(|r| r.status == RequestStatus::Completed)
    }

    pub fn violated(&self, r: &Request) -> bool {
        r.response_time.is_some_and(|ms| ms > self.slo_threshold_ms)
    }

    /// Completions per API in one-second windows `[k, k+1)`, from 0 to the
    /// last completion.
    pub fn rps_series(&self) -> Vec<(u64, ApiId, u64)> {
        let horizon = self
            .completed()
            .filter_map(|r| r.completed_at)
            .fold(None, |a: Option<f64>, t| Some(a.map_or(t, |a| a.max(t))));
        let Some(h) = horizon else { return Vec::new() };
        let windows = h.floor() as usize + 1;
        let mut counts = vec![vec![0u64; windows]; self.api_names.len()];
        for r in self.completed() {
            let w = r.completed_at.expect("completed").floor() as usize;
            counts[r.api.index()][w] += 1;
        }
        let mut out = Vec::with_capacity(windows * self.api_names.len());
        for w in 0..windows {
            for (a, c) in counts.iter().enumerate() {
                out.push((w as u64, ApiId::from(a), c[w]));
            }
        }
        out
    }

    pub fn qos(&self) -> QosReport {
        let mut apis = Vec::new();
        let windows = self.rps_series().len() / self.api_names.len().max(1);
        for (a, name) in self.api_names.iter().enumerate() {
            let api = ApiId::from(a);
            let mut lat: Vec<f64> = self
                .completed()
                .filter(|r| r.api == api)
                .map(|r| r.response_time.expect("completed"))
                .collect();
            lat.sort_by(f64::total_cmp);
            let failed = self
                .requests
                .iter()
                .filter(|r| r.api == api && r.status == RequestStatus::Failed)
                .count() as u64;
            let violations = self
                .completed()
                .filter(|r| r.api == api && self.violated(r))
                .count();
            let n = lat.len();
            apis.push(ApiStats {
                api: name.clone(),
                completed: n as u64,
                failed,
                mean_ms: mean(&lat),
                median_ms: percentile(&lat, 50.0).unwrap_or(0.0),
                p95_ms: percentile(&lat, 95.0).unwrap_or(0.0),
                p99_ms: percentile(&lat, 99.0).unwrap_or(0.0),
                slo_violation_rate: if n > 0 { violations as f64 / n as f64 } else { 0.0 },
                mean_rps: if windows > 0 { n as f64 / windows as f64 } else { 0.0 },
            });
        }
        let all: Vec<f64> = self
            .completed()
            .map(|r| r.response_time.expect("completed"))
            .collect();
        let completed = all.len() as u64;
        let violations = self.completed().filter(|r| self.violated(r)).count();
        QosReport {
            apis,
            completed,
            failed: self
                .requests
                .iter()
                .filter(|r| r.status == RequestStatus::Failed)
                .count() as u64,
            unfinished: self
                .requests
                .iter()
                .filter(|r| r.status == RequestStatus::InFlight)
                .count() as u64,
            mean_ms: mean(&all),
            slo_violation_rate: if completed > 0 {
                violations as f64 / completed as f64
            } else {
                0.0
            },
        }
    }

    pub fn requests_csv(&self) -> String {
        let mut s = String::from(
            "req_id,api,arrival_s,response_ms,cp_estimate_ms,slo_violated,critical_path\n",
        );
        for r in &self.requests {
            let fmt_opt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
            let path = r
                .critical_path
                .as_ref()
                .map(|p| {
                    p.iter()
                        .map(|s| self.service_names[s.index()].as_str())
                        .collect::<Vec<_>>()
                        .join(">")
                })
                .unwrap_or_default();
            let violated = match r.status {
                RequestStatus::Completed => self.violated(r).to_string(),
                _ => String::new(),
            };
            let _ = writeln!(
                s,
                "{},{},{:.6},{},{},{},{}",
                r.id,
                self.api_names[r.api.index()],
                r.arrival,
                fmt_opt(r.response_time),
                fmt_opt(r.cp_estimate),
                violated,
                path
            );
        }
        s
    }

    pub fn usage_csv(&self) -> String {
        let mut s = String::from("t_s,entity_kind,entity_id,cpu_milicores,ram_mb,bw_mbps,n_executing\n");
        for u in &self.usage {
            let (kind, id) = match u.entity {
                Entity::Instance(i) => ("instance", self.instance_names[i.index()].as_str()),
                Entity::Vm(v) => ("vm", self.vm_names[v.index()].as_str()),
            };
            let _ = writeln!(
                s,
                "{:.6},{kind},{id},{:.6},{:.6},{:.6},{}",
                u.t, u.cpu, u.ram, u.bw, u.n_executing
            );
        }
        s
    }

    pub fn rps_csv(&self) -> String {
        let mut s = String::from("t_s,api,rps\n");
        for (w, api, n) in self.rps_series() {
            let _ = writeln!(s, "{w},{},{n}", self.api_names[api.index()]);
        }
        s
    }

    pub fn scaling_csv(&self) -> String {
        let mut s = String::from("t_s,service,direction,outcome,replicas_after,limits_after\n");
        for d in &self.decisions {
            let _ = writeln!(
                s,
                "{:.6},{},{},{},{},{:.6}",
                d.t,
                self.service_names[d.service.index()],
                d.direction,
                d.outcome,
                d.replicas_after,
                d.limits_after
            );
        }
        s
    }

    pub fn summary_text(&self) -> String {
        let q = self.qos();
        let mut s = String::new();
        let _ = writeln!(s, "seed: {}", self.seed);
        let _ = writeln!(s, "policy: {}", self.policy);
        let _ = writeln!(s, "simulated_s: {:.6}", self.end_time);
        let _ = writeln!(s, "events: {}", self.events);
        let _ = writeln!(s, "cloudlets: {}", self.cloudlets);
        let _ = writeln!(s, "requests: {}", self.requests.len());
        let _ = writeln!(s, "completed: {}", q.completed);
        let _ = writeln!(s, "failed: {}", q.failed);
        let _ = writeln!(s, "unfinished: {}", q.unfinished);
        let _ = writeln!(s, "starved_cloudlets: {}", self.starved);
        let _ = writeln!(s, "mean_response_ms: {:.6}", q.mean_ms);
        let _ = writeln!(s, "slo_threshold_ms: {:.6}", self.slo_threshold_ms);
        let _ = writeln!(s, "slo_violation_rate: {:.6}", q.slo_violation_rate);
        let _ = writeln!(s, "mean_cpu_milicores: {:.6}", self.mean_cpu);
        let _ = writeln!(s, "mean_ram_mb: {:.6}", self.mean_ram);
        let applied = self
            .decisions
            .iter()
            .filter(|d| d.outcome == crate::policies::Outcome::Applied)
            .count();
        let _ = writeln!(s, "scaling_decisions: {} ({applied} applied)", self.decisions.len());
        let moved = self.migrations.iter().filter(|m| m.result.is_ok()).count();
        let _ = writeln!(s, "migrations: {} ({moved} moved)", self.migrations.len());
        for f in &self.allocation_failures {
            let _ = writeln!(s, "allocation_failed: {f}");
        }
        let _ = writeln!(s);
        let _ = writeln!(
            s,
            "{:<24} {:>8} {:>8} {:>12} {:>12} {:>12} {:>12} {:>8} {:>8}",
            "api", "count", "failed", "mean_ms", "p50_ms", "p95_ms", "p99_ms", "slo_viol", "rps"
        );
        for a in &q.apis {
            let _ = writeln!(
                s,
                "{:<24} {:>8} {:>8} {:>12.3} {:>12.3} {:>12.3} {:>12.3} {:>8.4} {:>8.3}",
                a.api,
                a.completed,
                a.failed,
                a.mean_ms,
                a.median_ms,
                a.p95_ms,
                a.p99_ms,
                a.slo_violation_rate,
                a.mean_rps
            );
        }
        s
    }

    pub fn write_dir(&self, dir: &Path) -> Result<(), TelemetryError> {
        let io = |path: &Path| {
            let path = path.to_path_buf();
            move |source| TelemetryError::Io { path, source }
        };
        fs::create_dir_all(dir).map_err(io(dir))?;
        for (name, body) in [
            ("requests.csv", self.requests_csv()),
            ("usage.csv", self.usage_csv()),
            ("rps.csv", self.rps_csv()),
            ("scaling.csv", self.scaling_csv()),
            ("summary.txt", self.summary_text()),
        ] {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io(&p))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Api, InstanceKind, InstanceTemplate, Service};
    use proptest::prelude::*;

    fn inst(limit: u64) -> Instance {
        Instance::from_template(
            "i".into(),
            &InstanceTemplate {
                name: "i".into(),
                kind: InstanceKind::Pod,
                labels: Default::default(),
                requested_shares: limit,
                limit_shares: limit,
                requested_ram: 100,
                limit_ram: 256,
                bandwidth: 0,
                size: 0,
            },
            0,
        )
    }

    fn model(per: f64) -> UsageModel {
        UsageModel {
            cpu_per_cloudlet: Some(per),
            cpu_parallelism: 1.0,
            idle_cpu_floor: 0.0,
            idle_cpu_fraction: 0.0,
            ram_per_cloudlet: 0.0,
            idle_ram_floor: 0.0,
            bw_per_derivation: 0.0,
        }
    }

    #[test]
    fn cpu_usage_is_linear_then_capped() {
        let m = model(50.0);
        let i = inst(500);
        assert_eq!(m.cpu(&i, 0), 0.0);
        assert_eq!(m.cpu(&i, 3), 150.0);
        assert_eq!(m.cpu(&i, 20), 500.0);
        let floor = UsageModel {
            idle_cpu_floor: 5.0,
            ..m
        };
        assert_eq!(floor.cpu(&i, 0), 5.0);
        assert_eq!(floor.cpu(&i, 2), 105.0);
    }

    #[test]
    fn default_cpu_per_cloudlet_comes_from_requests() {
        let m = UsageModel {
            cpu_per_cloudlet: None,
            cpu_parallelism: 4.0,
            ..model(0.0)
        };
        assert_eq!(m.cpu(&inst(400), 1), 100.0);
    }

    #[test]
    fn ram_is_capped_at_limit() {
        let m = UsageModel {
            ram_per_cloudlet: 40.0,
            idle_ram_floor: 16.0,
            ..model(0.0)
        };
        assert_eq!(m.ram(&inst(100), 2), 96.0);
        assert_eq!(m.ram(&inst(100), 10), 256.0);
    }

    proptest! {
        #[test]
        fn usage_is_affine_below_cap(per in 1u32..200, n in 0usize..50) {
            let m = model(per as f64);
            let i = inst(1_000_000);
            prop_assert_eq!(m.cpu(&i, n + 1) - m.cpu(&i, n), per as f64);
        }
    }

    #[test]
    fn nearest_rank() {
        let xs: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(percentile(&xs, 99.0), Some(99.0));
        assert_eq!(percentile(&xs, 50.0), Some(50.0));
        assert_eq!(percentile(&[7.0], 99.0), Some(7.0));
        assert_eq!(percentile(&[], 50.0), None);
        // oracle: smallest x with at least p% of values <= x
        let ys = [3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0, 6.0];
        let mut sorted = ys.to_vec();
        sorted.sort_by(f64::total_cmp);
        for p in [10.0, 25.0, 50.0, 95.0, 99.0] {
            let oracle = *sorted
                .iter()
                .find(|x| {
                    let below = ys.iter().filter(|y| *y <= *x).count() as f64;
                    below / ys.len() as f64 >= p / 100.0
                })
                .unwrap();
            assert_eq!(percentile(&sorted, p), Some(oracle), "p{p}");
        }
    }

    fn done(id: u64, api: u32, arrival: f64, ms: f64) -> Request {
        let mut r = Request::new(id, ApiId(api), arrival);
        r.status = RequestStatus::Completed;
        r.response_time = Some(ms);
        r.cp_estimate = Some(ms);
        r.completed_at = Some(arrival + ms / 1000.0);
        r.critical_path = Some(vec![ServiceId(0)]);
        r
    }

    fn report(requests: Vec<Request>) -> Report {
        Report {
            service_names: vec!["front".into()],
            requests,
            ..Report::empty(vec!["api".into()])
        }
    }

    #[test]
    fn rps_over_ten_seconds() {
        let reqs = (0..100).map(|i| done(i, 0, (i / 10) as f64, 100.0)).collect();
        let r = report(reqs);
        let q = r.qos();
        assert_eq!(q.apis[0].mean_rps, 10.0);
        assert!(r.rps_series().iter().all(|x| x.2 == 10));
    }

    #[test]
    fn slo_rate() {
        let r = report(vec![done(0, 0, 0.0, 2900.0), done(1, 0, 0.0, 3100.0)]);
        assert_eq!(r.qos().slo_violation_rate, 0.5);
    }

    #[test]
    fn empty_report_has_headers_only() {
        let r = report(vec![]);
        assert_eq!(r.requests_csv().lines().count(), 1);
        assert_eq!(r.usage_csv().lines().count(), 1);
        assert_eq!(r.rps_csv().lines().count(), 1);
        assert_eq!(r.scaling_csv().lines().count(), 1);
        let s = r.summary_text();
        assert!(s.contains("completed: 0\n") && s.contains("failed: 0\n"));
    }

    #[test]
    fn critical_path_prefers_first_of_equal_maxima() {
        let chains = vec![vec![ServiceId(0), ServiceId(1)], vec![ServiceId(0), ServiceId(2)]];
        let d = [[1.0, 2.0], [1.0, 2.0]];
        assert_eq!(critical_path(&chains, |c, k| d[c][k]), Some((0, 3.0)));
        let d = [[1.0, 2.0], [1.0, 5.0]];
        assert_eq!(critical_path(&chains, |c, k| d[c][k]), Some((1, 6.0)));
        assert_eq!(critical_path(&[], |_, _| 0.0), None);
    }

    #[test]
    fn longest_branch_of_a_forked_chain() {
        // A -> {B, C}; B -> E -> F; C -> F
        let g = ServiceGraph::build(
            vec![
                Service::new("A", ["A"], &["B", "C"]),
                Service::new("B", ["B"], &["E"]),
                Service::new("C", ["C"], &["F"]),
                Service::new("E", ["E"], &["F"]),
                Service::new("F", ["F"], &[]),
            ],
            vec![Api {
                name: "x".into(),
                weight: 1.0,
                entry_service: "A".into(),
            }],
        )
        .unwrap();
        let delay = |name: &str| match name {
            "A" => 1.0,
            "B" => 3.0,
            "C" => 2.0,
            "E" => 2.0,
            _ => 1.0,
        };
        let chains = g.chains(ApiId(0));
        let (idx, total) =
            critical_path(chains, |c, k| delay(g.name(chains[c][k]))).unwrap();
        assert_eq!(g.path_names(&chains[idx]), vec!["A", "B", "E", "F"]);
        assert_eq!(total, 7.0);
    }
}

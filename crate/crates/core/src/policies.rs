//! Resource bookkeeping and the policies built on it: first-fit placement in
//! descending idle-share order, overload migration, and horizontal / vertical
//! scaling with rollback.

use std::collections::{BTreeMap, VecDeque};
use std::fmt;

use thiserror::Error;

use crate::model::{labels_intersect, Cluster, InstanceId, ServiceGraph, ServiceId, VmId};
use crate::scheduling::Executor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, PartialOrd, Ord)]
pub struct Grant {
    pub shares: u64,
    pub ram: u64,
    pub bw: u64,
}

impl Grant {
    fn add(self, o: Grant) -> Grant {
        Grant {
            shares: self.shares + o.shares,
            ram: self.ram + o.ram,
            bw: self.bw + o.bw,
        }
    }

    fn sub(self, o: Grant) -> Grant {
        Grant {
            shares: self.shares - o.shares,
            ram: self.ram - o.ram,
            bw: self.bw - o.bw,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VmLedger {
    pub total: Grant,
    pub allocated: Grant,
    pub grants: BTreeMap<InstanceId, Grant>,
}

impl VmLedger {
    pub fn idle(&self) -> Grant {
        self.total.sub(self.allocated)
    }

    pub fn utilization(&self) -> f64 {
        if self.total.shares == 0 {
            return 0.0;
        }
        self.allocated.shares as f64 / self.total.shares as f64
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum PolicyError {
    #[error("instance {0:?} does not fit on any VM")]
    NoCapacity(InstanceId),
    #[error("no VM can take instance {0:?} without exceeding the overload threshold")]
    NoTargetVm(InstanceId),
}

/// Per-VM ledgers of total, granted and idle shares / RAM / bandwidth.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Provisioner {
    ledgers: Vec<VmLedger>,
    gate_bandwidth: bool,
}

impl Provisioner {
    pub fn new(cluster: &Cluster, gate_bandwidth: bool) -> Self {
        Provisioner {
            ledgers: cluster
                .vms
                .iter()
                .map(|vm| VmLedger {
                    total: Grant {
                        shares: vm.total_shares,
                        ram: vm.ram,
                        bw: vm.bw,
                    },
                    allocated: Grant::default(),
                    grants: BTreeMap::new(),
                })
                .collect(),
            gate_bandwidth,
        }
    }

    pub fn ledger(&self, vm: VmId) -> &VmLedger {
        &self.ledgers[vm.index()]
    }

    pub fn ledgers(&self) -> &[VmLedger] {
        &self.ledgers
    }

    pub fn grant_of(&self, cluster: &Cluster, i: InstanceId) -> Option<Grant> {
        let vm = cluster.instance(i).host_vm?;
        self.ledgers[vm.index()].grants.get(&i).copied()
    }

    pub fn fits(&self, vm: VmId, g: Grant) -> bool {
        let idle = self.ledgers[vm.index()].idle();
        idle.shares >= g.shares && idle.ram >= g.ram && (!self.gate_bandwidth || idle.bw >= g.bw)
    }

    /// What an instance asks for at its current size.
    pub fn demand(cluster: &Cluster, i: InstanceId) -> Grant {
        let inst = cluster.instance(i);
        Grant {
            shares: inst.requested_shares,
            ram: inst.requested_ram,
            bw: inst.bandwidth,
        }
    }

    /// Grant `g` to `i` on `vm` and record the placement in the cluster.
    pub fn grant(&mut self, cluster: &mut Cluster, vm: VmId, i: InstanceId, g: Grant) {
        assert!(self.fits(vm, g), "grant exceeds idle resources");
        let led = &mut self.ledgers[vm.index()];
        assert!(led.grants.insert(i, g).is_none(), "instance already granted");
        led.allocated = led.allocated.add(g);
        let inst = &mut cluster.instances[i.index()];
        inst.host_vm = Some(vm);
        inst.allocated = true;
        cluster.vms[vm.index()].hosted.insert(i);
    }

    /// Take back everything granted to `i`. Returns where it was and what it
    /// held.
    pub fn release(&mut self, cluster: &mut Cluster, i: InstanceId) -> Option<(VmId, Grant)> {
        let vm = cluster.instance(i).host_vm?;
        let led = &mut self.ledgers[vm.index()];
        let g = led.grants.remove(&i).expect("hosted instance has a grant");
        led.allocated = led.allocated.sub(g);
        let inst = &mut cluster.instances[i.index()];
        inst.host_vm = None;
        inst.allocated = false;
        cluster.vms[vm.index()].hosted.remove(&i);
        Some((vm, g))
    }

    /// VMs in placement visiting order: idle shares descending, index ascending.
    pub fn vm_order(&self) -> Vec<VmId> {
        let mut order: Vec<VmId> = (0..self.ledgers.len()).map(VmId::from).collect();
        order.sort_by(|a, b| {
            self.ledgers[b.index()]
                .idle()
                .shares
                .cmp(&self.ledgers[a.index()].idle().shares)
        });
        order
    }

    pub fn first_fit(&self, g: Grant) -> Option<VmId> {
        self.vm_order().into_iter().find(|vm| self.fits(*vm, g))
    }

    /// Recompute every ledger from its grants and compare with the cluster's
    /// host sets.
    pub fn check(&self, cluster: &Cluster) -> Result<(), String> {
        for (v, led) in self.ledgers.iter().enumerate() {
            let sum = led.grants.values().fold(Grant::default(), |a, g| a.add(*g));
            if sum != led.allocated {
                return Err(format!("vm {v}: allocated {:?} != sum of grants {sum:?}", led.allocated));
            }
            if sum.shares > led.total.shares || sum.ram > led.total.ram {
                return Err(format!("vm {v}: over-committed"));
            }
            let hosted: Vec<InstanceId> = cluster.vms[v].hosted.iter().copied().collect();
            let granted: Vec<InstanceId> = led.grants.keys().copied().collect();
            if hosted != granted {
                return Err(format!("vm {v}: hosted {hosted:?} != granted {granted:?}"));
            }
        }
        cluster.check_consistency()
    }
}

/// Place one unallocated instance on the first VM (idle shares descending)
/// that has room for its requests.
pub fn place_instance(prov: &mut Provisioner, cluster: &mut Cluster, i: InstanceId) -> Option<VmId> {
    assert!(!cluster.instance(i).allocated, "instance already placed");
    let g = Provisioner::demand(cluster, i);
    let vm = prov.first_fit(g)?;
    prov.grant(cluster, vm, i, g);
    Some(vm)
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Allocation {
    pub placed: Vec<(InstanceId, VmId)>,
    pub failed: Vec<InstanceId>,
    /// Matched instances that some other service had already placed.
    pub already: Vec<InstanceId>,
}

impl Allocation {
    pub fn deployed(&self) -> bool {
        !self.placed.is_empty() || !self.already.is_empty()
    }
}

/// Bind the service to its label-matched instances and place each unplaced
/// one in list order.
pub fn allocate_service(
    prov: &mut Provisioner,
    cluster: &mut Cluster,
    graph: &ServiceGraph,
    service: ServiceId,
) -> Allocation {
    let mut out = Allocation::default();
    for i in cluster.match_instances(graph, service) {
        if cluster.instance(i).allocated {
            out.already.push(i);
            continue;
        }
        match place_instance(prov, cluster, i) {
            Some(vm) => out.placed.push((i, vm)),
            None => out.failed.push(i),
        }
    }
    out
}

/// Initial deployment of every service in id order.
pub fn deploy(
    prov: &mut Provisioner,
    cluster: &mut Cluster,
    graph: &ServiceGraph,
) -> Vec<(ServiceId, Allocation)> {
    graph
        .ids()
        .map(|s| (s, allocate_service(prov, cluster, graph, s)))
        .collect()
}

// ---------------------------------------------------------------------------
// migration

#[derive(Clone, Debug, PartialEq)]
pub struct Migration {
    pub t: f64,
    pub instance: InstanceId,
    pub from: VmId,
    pub result: Result<VmId, PolicyError>,
}

/// Move the largest grant off every VM whose share utilization exceeds
/// `threshold`, onto the least-utilized VM that stays at or under it.
pub fn migration_check(
    prov: &mut Provisioner,
    cluster: &mut Cluster,
    exec: &mut Executor,
    t: f64,
    threshold: f64,
) -> Vec<Migration> {
    let mut out = Vec::new();
    for v in 0..prov.ledgers.len() {
        let from = VmId::from(v);
        if prov.ledgers[v].utilization() <= threshold {
            continue;
        }
        let victim = prov.ledgers[v]
            .grants
            .iter()
            .max_by(|a, b| a.1.shares.cmp(&b.1.shares).then(b.0.cmp(a.0)))
            .map(|(i, g)| (*i, *g));
        let Some((i, g)) = victim else { continue };
        let target = (0..prov.ledgers.len())
            .map(VmId::from)
            .filter(|w| *w != from && prov.fits(*w, g))
            .map(|w| {
                let led = &prov.ledgers[w.index()];
                let after = (led.allocated.shares + g.shares) as f64 / led.total.shares as f64;
                (w, led.utilization(), after)
            })
            .filter(|(_, _, after)| *after <= threshold)
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
        let result = match target {
            Some((to, _, _)) => {
                prov.release(cluster, i);
                prov.grant(cluster, to, i, g);
                let mips = cluster.vm(to).mips_for_shares(cluster.instance(i).limit_shares);
                exec.set_mips(i, t, mips);
                Ok(to)
            }
            None => Err(PolicyError::NoTargetVm(i)),
        };
        out.push(Migration {
            t,
            instance: i,
            from,
            result,
        });
    }
    out
}

// ---------------------------------------------------------------------------
// scaling

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Direction {
    Out,
    In,
    Up,
    Down,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Applied,
    Failed,
    Skipped,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Out => "out",
            Direction::In => "in",
            Direction::Up => "up",
            Direction::Down => "down",
        })
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Applied => "applied",
            Outcome::Failed => "failed",
            Outcome::Skipped => "skipped",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Pressure {
    High,
    Low,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ScalingDecision {
    pub t: f64,
    pub service: ServiceId,
    pub direction: Direction,
    /// Mean utilization that fired the trigger.
    pub utilization: f64,
    pub outcome: Outcome,
    pub replicas_after: usize,
    /// Mean limit shares over the service's serving instances afterwards.
    pub limits_after: f64,
    /// Instances whose vertical resize had to be rolled back.
    pub failed: Vec<InstanceId>,
}

/// Fires when the last `k` window values are all above `upper` or all below
/// `lower`.
pub fn evaluate_window(window: &[f64], k: usize, upper: f64, lower: f64) -> Option<Pressure> {
    if k == 0 || window.len() < k {
        return None;
    }
    let tail = &window[window.len() - k..];
    if tail.iter().all(|u| *u > upper) {
        Some(Pressure::High)
    } else if tail.iter().all(|u| *u < lower) {
        Some(Pressure::Low)
    } else {
        None
    }
}

/// Per-service utilization history; a service's history is cleared each
/// time it fires so the next trigger needs `k` fresh breaches.
#[derive(Clone, Debug)]
pub struct Trigger {
    k: usize,
    upper: f64,
    lower: f64,
    history: Vec<VecDeque<f64>>,
}

impl Trigger {
    pub fn new(services: usize, k: usize, upper: f64, lower: f64) -> Self {
        Trigger {
            k,
            upper,
            lower,
            history: vec![VecDeque::new(); services],
        }
    }

    pub fn observe(&mut self, service: ServiceId, utilization: f64) -> Option<Pressure> {
        let h = &mut self.history[service.index()];
        h.push_back(utilization);
        while h.len() > self.k {
            h.pop_front();
        }
        let fired = evaluate_window(h.make_contiguous(), self.k, self.upper, self.lower);
        if fired.is_some() {
            h.clear();
        }
        fired
    }
}

/// Everything a scaling policy may touch.
pub struct PolicyContext<'a> {
    pub prov: &'a mut Provisioner,
    pub cluster: &'a mut Cluster,
    pub graph: &'a ServiceGraph,
    pub exec: &'a mut Executor,
    pub t: f64,
    pub vs_factor: f64,
}

impl PolicyContext<'_> {
    /// Replica sets whose template labels match the service.
    pub fn replica_sets_of(&self, service: ServiceId) -> Vec<usize> {
        let labels = &self.graph.service(service).labels;
        self.cluster
            .replica_sets
            .iter()
            .enumerate()
            .filter(|(_, rs)| labels_intersect(labels, &rs.template.labels))
            .map(|(i, _)| i)
            .collect()
    }

    fn serving(&self, rs: usize) -> Vec<InstanceId> {
        self.cluster.replica_sets[rs]
            .replicas
            .iter()
            .copied()
            .filter(|i| {
                let inst = self.cluster.instance(*i);
                !inst.retired && !inst.draining
            })
            .collect()
    }

    fn decision(
        &self,
        service: ServiceId,
        direction: Direction,
        utilization: f64,
        outcome: Outcome,
        failed: Vec<InstanceId>,
    ) -> ScalingDecision {
        let serving: Vec<InstanceId> = self
            .cluster
            .live_instances_of(service)
            .filter(|i| !self.cluster.instance(*i).draining)
            .collect();
        let limits_after = if serving.is_empty() {
            0.0
        } else {
            serving
                .iter()
                .map(|i| self.cluster.instance(*i).limit_shares as f64)
                .sum::<f64>()
                / serving.len() as f64
        };
        ScalingDecision {
            t: self.t,
            service,
            direction,
            utilization,
            outcome,
            replicas_after: serving.len(),
            limits_after,
            failed,
        }
    }

    pub fn retire(&mut self, i: InstanceId) {
        retire_instance(self.prov, self.cluster, i);
    }
}

/// Remove a drained (or idle) replica from the cluster for good.
pub fn retire_instance(prov: &mut Provisioner, cluster: &mut Cluster, i: InstanceId) {
    prov.release(cluster, i);
    let inst = &mut cluster.instances[i.index()];
    inst.retired = true;
    inst.draining = false;
    cluster.mappings.unbind_instance(i);
}

/// Add one replica to the first replica set of the service that is below
/// its maximum and has room somewhere; a replica that cannot be placed is
/// discarded again.
pub fn scale_out(ctx: &mut PolicyContext, service: ServiceId, utilization: f64) -> ScalingDecision {
    let mut attempted = false;
    for rs in ctx.replica_sets_of(service) {
        let count = ctx.serving(rs).len();
        if count >= ctx.cluster.replica_sets[rs].max_replicas as usize {
            continue;
        }
        attempted = true;
        let i = ctx.cluster.mint_replica(rs);
        if place_instance(ctx.prov, ctx.cluster, i).is_some() {
            ctx.cluster.bind_by_labels(ctx.graph, i);
            let inst = ctx.cluster.instance(i);
            let mips = ctx
                .cluster
                .vm(inst.host_vm.expect("placed"))
                .mips_for_shares(inst.limit_shares);
            ctx.exec.ensure_cpu(i, mips);
            return ctx.decision(service, Direction::Out, utilization, Outcome::Applied, vec![]);
        }
        ctx.cluster.discard_last_replica(rs);
    }
    let outcome = if attempted {
        Outcome::Failed
    } else {
        Outcome::Skipped
    };
    ctx.decision(service, Direction::Out, utilization, outcome, vec![])
}

/// Drain the least busy replica of the first replica set above its minimum.
/// An idle replica is retired at once; a busy one stops taking cloudlets and
/// is retired when its last cloudlet finishes.
pub fn scale_in(ctx: &mut PolicyContext, service: ServiceId, utilization: f64) -> ScalingDecision {
    for rs in ctx.replica_sets_of(service) {
        let serving = ctx.serving(rs);
        if serving.len() <= ctx.cluster.replica_sets[rs].min_replicas as usize {
            continue;
        }
        // fewest executing, newest on ties
        let victim = *serving
            .iter()
            .min_by(|a, b| {
                ctx.exec
                    .executing_on(**a)
                    .cmp(&ctx.exec.executing_on(**b))
                    .then(b.cmp(a))
            })
            .expect("non-empty");
        if ctx.exec.executing_on(victim) == 0 {
            ctx.retire(victim);
        } else {
            ctx.cluster.instances[victim.index()].draining = true;
        }
        return ctx.decision(service, Direction::In, utilization, Outcome::Applied, vec![]);
    }
    ctx.decision(service, Direction::In, utilization, Outcome::Skipped, vec![])
}

fn scaled(v: u64, f: f64) -> u64 {
    (v as f64 * f).round() as u64
}

/// Resize every serving instance of the service. Up multiplies limit and
/// request shares by `vs_factor`; Down divides them, never going below the
/// template's size. Each instance first tries to stay on its VM, then any VM
/// in first-fit order; if neither works its old grant is restored.
pub fn scale_vertical(
    ctx: &mut PolicyContext,
    service: ServiceId,
    direction: Direction,
    utilization: f64,
) -> ScalingDecision {
    assert!(matches!(direction, Direction::Up | Direction::Down));
    let f = ctx.vs_factor;
    let targets: Vec<InstanceId> = ctx
        .cluster
        .live_instances_of(service)
        .filter(|i| !ctx.cluster.instance(*i).draining)
        .collect();
    let mut applied = 0;
    let mut failed = Vec::new();
    for i in targets {
        let inst = ctx.cluster.instance(i);
        let tpl = &ctx.cluster.replica_sets[inst.replica_set].template;
        let (req, lim) = match direction {
            Direction::Up => (scaled(inst.requested_shares, f), scaled(inst.limit_shares, f)),
            _ => (
                scaled(inst.requested_shares, 1.0 / f).max(tpl.requested_shares),
                scaled(inst.limit_shares, 1.0 / f).max(tpl.limit_shares),
            ),
        };
        if req == inst.requested_shares && lim == inst.limit_shares {
            continue;
        }
        let (old_vm, old_grant) = ctx.prov.release(ctx.cluster, i).expect("live instance");
        let want = Grant {
            shares: req,
            ..old_grant
        };
        let target = if ctx.prov.fits(old_vm, want) {
            Some(old_vm)
        } else {
            ctx.prov.first_fit(want)
        };
        match target {
            Some(vm) => {
                ctx.prov.grant(ctx.cluster, vm, i, want);
                let inst = &mut ctx.cluster.instances[i.index()];
                inst.requested_shares = req;
                inst.limit_shares = lim;
                let mips = ctx.cluster.vm(vm).mips_for_shares(lim);
                ctx.exec.set_mips(i, ctx.t, mips);
                applied += 1;
            }
            None => {
                ctx.prov.grant(ctx.cluster, old_vm, i, old_grant);
                failed.push(i);
            }
        }
    }
    let outcome = if applied > 0 {
        Outcome::Applied
    } else if failed.is_empty() {
        Outcome::Skipped
    } else {
        Outcome::Failed
    };
    ctx.decision(service, direction, utilization, outcome, failed)
}

/// A scaling strategy reacting to a fired trigger.
pub trait ScalingPolicy {
    fn apply(
        &mut self,
        ctx: &mut PolicyContext,
        service: ServiceId,
        pressure: Pressure,
        utilization: f64,
    ) -> ScalingDecision;
}

pub struct Horizontal;

impl ScalingPolicy for Horizontal {
    fn apply(
        &mut self,
        ctx: &mut PolicyContext,
        service: ServiceId,
        pressure: Pressure,
        utilization: f64,
    ) -> ScalingDecision {
        match pressure {
            Pressure::High => scale_out(ctx, service, utilization),
            Pressure::Low => scale_in(ctx, service, utilization),
        }
    }
}

pub struct Vertical;

impl ScalingPolicy for Vertical {
    fn apply(
        &mut self,
        ctx: &mut PolicyContext,
        service: ServiceId,
        pressure: Pressure,
        utilization: f64,
    ) -> ScalingDecision {
        let d = match pressure {
            Pressure::High => Direction::Up,
            Pressure::Low => Direction::Down,
        };
        scale_vertical(ctx, service, d, utilization)
    }
}

pub type PolicyFactory = Box<dyn Fn() -> Box<dyn ScalingPolicy>>;

/// Scaling policies selectable by name. `none` is not registered: it means
/// no trigger evaluation at all.
pub struct PolicyRegistry {
    factories: BTreeMap<String, PolicyFactory>,
}

impl Default for PolicyRegistry {
    fn default() -> Self {
        let mut r = PolicyRegistry {
            factories: BTreeMap::new(),
        };
        r.register("horizontal", Box::new(|| Box::new(Horizontal)));
        r.register("vertical", Box::new(|| Box::new(Vertical)));
        r
    }
}

impl PolicyRegistry {
    pub fn register(&mut self, name: &str, factory: PolicyFactory) {
        self.factories.insert(name.to_string(), factory);
    }

    pub fn create(&self, name: &str) -> Option<Box<dyn ScalingPolicy>> {
        self.factories.get(name).map(|f| f())
    }

    pub fn contains(&self, name: &str) -> bool {
        name == "none" || self.factories.contains_key(name)
    }
}

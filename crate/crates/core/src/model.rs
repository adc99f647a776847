//! Domain entities: APIs, services and their call graph, instances, replica
//! sets and VMs, plus the name/label based mappings that tie them together.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Default bound on enumerated root-to-leaf paths per API.
pub const DEFAULT_PATH_LIMIT: usize = 10_000;

macro_rules! index_type {
    ($(#[$m:meta])* $name:ident) => {
        $(#[$m])*
        #[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        pub struct $name(pub u32);

        impl $name {
            pub fn index(self) -> usize {
                self.0 as usize
            }
        }

        impl From<usize> for $name {
            fn from(i: usize) -> Self {
                $name(u32::try_from(i).expect("index overflow"))
            }
        }
    };
}

index_type!(ServiceId);
index_type!(InstanceId);
index_type!(VmId);
index_type!(ApiId);

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("unknown service {0:?}")]
    UnknownService(String),
    #[error("duplicate service {0:?}")]
    DuplicateService(String),
    #[error("duplicate api {0:?}")]
    DuplicateApi(String),
    #[error("service {service:?} lists {callee:?} more than once in calls")]
    DuplicateCall { service: String, callee: String },
    #[error("dependency cycle: {}", .0.join(" -> "))]
    CycleDetected(Vec<String>),
    #[error("api {api:?} has a non-positive or non-finite weight {weight}")]
    InvalidWeight { api: String, weight: f64 },
    #[error("api {api:?} expands to more than {limit} call chains")]
    PathLimitExceeded { api: String, limit: usize },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Api {
    pub name: String,
    pub weight: f64,
    pub entry_service: String,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Service {
    pub name: String,
    pub labels: BTreeSet<String>,
    pub calls: Vec<String>,
}

impl Service {
    pub fn new<I, S>(name: &str, labels: I, calls: &[&str]) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        Service {
            name: name.to_string(),
            labels: labels.into_iter().map(Into::into).collect(),
            calls: calls.iter().map(|s| s.to_string()).collect(),
        }
    }
}

/// Service call DAG with forward and reverse adjacency and the call chains of
/// every API enumerated up front.
#[derive(Clone, Debug, PartialEq)]
pub struct ServiceGraph {
    services: Vec<Service>,
    by_name: HashMap<String, ServiceId>,
    forward: Vec<Vec<ServiceId>>,
    reverse: Vec<Vec<ServiceId>>,
    apis: Vec<Api>,
    api_entry: Vec<ServiceId>,
    api_probability: Vec<f64>,
    chains: Vec<Vec<Vec<ServiceId>>>,
    topo: Vec<ServiceId>,
}

impl ServiceGraph {
    pub fn build(services: Vec<Service>, apis: Vec<Api>) -> Result<Self, ModelError> {
        Self::build_with_limit(services, apis, DEFAULT_PATH_LIMIT)
    }

    pub fn build_with_limit(
        services: Vec<Service>,
        apis: Vec<Api>,
        path_limit: usize,
    ) -> Result<Self, ModelError> {
        let mut by_name = HashMap::with_capacity(services.len());
        for (i, s) in services.iter().enumerate() {
            if by_name.insert(s.name.clone(), ServiceId::from(i)).is_some() {
                return Err(ModelError::DuplicateService(s.name.clone()));
            }
        }
        let mut forward = vec![Vec::new(); services.len()];
        let mut reverse = vec![Vec::new(); services.len()];
        for (i, s) in services.iter().enumerate() {
            for callee in &s.calls {
                let c = *by_name
                    .get(callee)
                    .ok_or_else(|| ModelError::UnknownService(callee.clone()))?;
                if forward[i].contains(&c) {
                    return Err(ModelError::DuplicateCall {
                        service: s.name.clone(),
                        callee: callee.clone(),
                    });
                }
                forward[i].push(c);
                reverse[c.index()].push(ServiceId::from(i));
            }
        }

        let topo = topological_order(&services, &forward)?;

        let mut seen_api = BTreeSet::new();
        let mut api_entry = Vec::with_capacity(apis.len());
        for api in &apis {
            if !seen_api.insert(api.name.as_str()) {
                return Err(ModelError::DuplicateApi(api.name.clone()));
            }
            if !(api.weight.is_finite() && api.weight > 0.0) {
                return Err(ModelError::InvalidWeight {
                    api: api.name.clone(),
                    weight: api.weight,
                });
            }
            let entry = *by_name
                .get(&api.entry_service)
                .ok_or_else(|| ModelError::UnknownService(api.entry_service.clone()))?;
            api_entry.push(entry);
        }
        let total: f64 = apis.iter().map(|a| a.weight).sum();
        let api_probability = apis.iter().map(|a| a.weight / total).collect();

        let mut chains = Vec::with_capacity(apis.len());
        for (api, &entry) in apis.iter().zip(&api_entry) {
            let paths = enumerate_paths(&forward, entry, path_limit).ok_or_else(|| {
                ModelError::PathLimitExceeded {
                    api: api.name.clone(),
                    limit: path_limit,
                }
            })?;
            chains.push(paths);
        }

        Ok(ServiceGraph {
            services,
            by_name,
            forward,
            reverse,
            apis,
            api_entry,
            api_probability,
            chains,
            topo,
        })
    }

    pub fn len(&self) -> usize {
        self.services.len()
    }

    pub fn is_empty(&self) -> bool {
        self.services.is_empty()
    }

    pub fn services(&self) -> &[Service] {
        &self.services
    }

    pub fn service(&self, id: ServiceId) -> &Service {
        &self.services[id.index()]
    }

    pub fn name(&self, id: ServiceId) -> &str {
        &self.services[id.index()].name
    }

    pub fn id(&self, name: &str) -> Option<ServiceId> {
        self.by_name.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ServiceId> {
        (0..self.services.len()).map(ServiceId::from)
    }

    pub fn callees(&self, id: ServiceId) -> &[ServiceId] {
        &self.forward[id.index()]
    }

    pub fn callers(&self, id: ServiceId) -> &[ServiceId] {
        &self.reverse[id.index()]
    }

    pub fn is_leaf(&self, id: ServiceId) -> bool {
        self.forward[id.index()].is_empty()
    }

    pub fn topological_order(&self) -> &[ServiceId] {
        &self.topo
    }

    pub fn apis(&self) -> &[Api] {
        &self.apis
    }

    pub fn api(&self, id: ApiId) -> &Api {
        &self.apis[id.index()]
    }

    pub fn api_id(&self, name: &str) -> Option<ApiId> {
        self.apis.iter().position(|a| a.name == name).map(ApiId::from)
    }

    pub fn entry(&self, api: ApiId) -> ServiceId {
        self.api_entry[api.index()]
    }

    /// Normalized selection probabilities, in API order.
    pub fn api_probabilities(&self) -> &[f64] {
        &self.api_probability
    }

    /// Root-to-leaf call chains of an API, in depth-first `calls` order.
    pub fn chains(&self, api: ApiId) -> &[Vec<ServiceId>] {
        &self.chains[api.index()]
    }

    pub fn path_names(&self, path: &[ServiceId]) -> Vec<String> {
        path.iter().map(|&s| self.name(s).to_string()).collect()
    }
}

/// Kahn's algorithm; on failure walks the leftover subgraph to report one cycle.
fn topological_order(
    services: &[Service],
    forward: &[Vec<ServiceId>],
) -> Result<Vec<ServiceId>, ModelError> {
    let n = forward.len();
    let mut indeg = vec![0usize; n];
    for outs in forward {
        for c in outs {
            indeg[c.index()] += 1;
        }
    }
    let mut ready: Vec<usize> = (0..n).rev().filter(|&i| indeg[i] == 0).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(i) = ready.pop() {
        order.push(ServiceId::from(i));
        for c in forward[i].iter().rev() {
            indeg[c.index()] -= 1;
            if indeg[c.index()] == 0 {
                ready.push(c.index());
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Every leftover node has a leftover successor, so walking successors
    // must revisit a node.
    let start = (0..n).find(|&i| indeg[i] > 0).expect("leftover node");
    let mut pos = vec![usize::MAX; n];
    let mut walk = Vec::new();
    let mut cur = start;
    while pos[cur] == usize::MAX {
        pos[cur] = walk.len();
        walk.push(cur);
        cur = forward[cur]
            .iter()
            .map(|c| c.index())
            .find(|&c| indeg[c] > 0)
            .expect("leftover successor");
    }
    let mut cycle: Vec<String> = walk[pos[cur]..]
        .iter()
        .map(|&i| services[i].name.clone())
        .collect();
    cycle.push(services[cur].name.clone());
    Err(ModelError::CycleDetected(cycle))
}

/// All root-to-leaf paths from `entry`, or `None` when more than `limit`.
fn enumerate_paths(
    forward: &[Vec<ServiceId>],
    entry: ServiceId,
    limit: usize,
) -> Option<Vec<Vec<ServiceId>>> {
    let mut out = Vec::new();
    let mut path = vec![entry];
    // (node, next child index)
    let mut stack = vec![(entry, 0usize)];
    while let Some(&mut (node, ref mut next)) = stack.last_mut() {
        let outs = &forward[node.index()];
        if outs.is_empty() {
            if out.len() == limit {
                return None;
            }
            out.push(path.clone());
        }
        if *next < outs.len() {
            let child = outs[*next];
            *next += 1;
            path.push(child);
            stack.push((child, 0));
        } else {
            stack.pop();
            path.pop();
        }
    }
    Some(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InstanceKind {
    Pod,
    Container,
    UserDefined,
}

/// Resource profile shared by every replica of a replica set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceTemplate {
    pub name: String,
    pub kind: InstanceKind,
    pub labels: BTreeSet<String>,
    pub requested_shares: u64,
    pub limit_shares: u64,
    pub requested_ram: u64,
    pub limit_ram: u64,
    pub bandwidth: u64,
    pub size: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Instance {
    pub id: String,
    pub kind: InstanceKind,
    pub labels: BTreeSet<String>,
    pub requested_shares: u64,
    pub limit_shares: u64,
    pub requested_ram: u64,
    pub limit_ram: u64,
    pub bandwidth: u64,
    pub size: u64,
    pub host_vm: Option<VmId>,
    pub allocated: bool,
    pub replica_set: usize,
    /// Removed by scale-in; kept so ids stay stable in usage history.
    pub retired: bool,
    /// Scale-in picked this replica; it finishes its work but takes no more.
    pub draining: bool,
}

impl Instance {
    pub fn from_template(id: String, t: &InstanceTemplate, replica_set: usize) -> Self {
        Instance {
            id,
            kind: t.kind,
            labels: t.labels.clone(),
            requested_shares: t.requested_shares,
            limit_shares: t.limit_shares,
            requested_ram: t.requested_ram,
            limit_ram: t.limit_ram,
            bandwidth: t.bandwidth,
            size: t.size,
            host_vm: None,
            allocated: false,
            replica_set,
            retired: false,
            draining: false,
        }
    }

    pub fn live(&self) -> bool {
        self.allocated && !self.retired
    }

    pub fn accepting(&self) -> bool {
        self.live() && !self.draining
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaSet {
    pub template: InstanceTemplate,
    pub replicas: Vec<InstanceId>,
    pub min_replicas: u32,
    pub max_replicas: u32,
    /// Ordinal for the next minted replica id (`name-<ordinal>`).
    pub next_ordinal: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Vm {
    pub id: String,
    pub mips_per_pe: f64,
    pub num_pes: u32,
    pub total_shares: u64,
    pub ram: u64,
    pub bw: u64,
    pub hosted: BTreeSet<InstanceId>,
}

impl Vm {
    pub fn new(id: &str, mips_per_pe: f64, num_pes: u32, ram: u64, bw: u64) -> Self {
        Vm {
            id: id.to_string(),
            mips_per_pe,
            num_pes,
            total_shares: u64::from(num_pes) * 1000,
            ram,
            bw,
            hosted: BTreeSet::new(),
        }
    }

    /// MIPS delivered by `shares` milicores on this VM: one full core of
    /// shares runs at one PE's MIPS.
    pub fn mips_for_shares(&self, shares: u64) -> f64 {
        shares as f64 / 1000.0 * self.mips_per_pe
    }
}

/// Service <-> instance relation established by label intersection.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Mappings {
    service_instances: Vec<BTreeSet<InstanceId>>,
    instance_services: Vec<BTreeSet<ServiceId>>,
}

impl Mappings {
    pub fn new(services: usize) -> Self {
        Mappings {
            service_instances: vec![BTreeSet::new(); services],
            instance_services: Vec::new(),
        }
    }

    fn ensure_instance(&mut self, i: InstanceId) {
        if self.instance_services.len() <= i.index() {
            self.instance_services.resize(i.index() + 1, BTreeSet::new());
        }
    }

    pub fn bind(&mut self, s: ServiceId, i: InstanceId) {
        self.ensure_instance(i);
        self.service_instances[s.index()].insert(i);
        self.instance_services[i.index()].insert(s);
    }

    pub fn unbind_instance(&mut self, i: InstanceId) {
        if let Some(services) = self.instance_services.get_mut(i.index()) {
            for s in std::mem::take(services) {
                self.service_instances[s.index()].remove(&i);
            }
        }
    }

    pub fn instances_of(&self, s: ServiceId) -> &BTreeSet<InstanceId> {
        &self.service_instances[s.index()]
    }

    pub fn services_of(&self, i: InstanceId) -> impl Iterator<Item = ServiceId> + '_ {
        self.instance_services
            .get(i.index())
            .into_iter()
            .flat_map(|s| s.iter().copied())
    }

    /// Drops trailing empty instance rows so a bind/unbind of the last
    /// instance leaves the value equal to what it was before.
    pub fn truncate_instances(&mut self, len: usize) {
        self.instance_services.truncate(len);
    }

    pub fn is_consistent(&self) -> bool {
        self.service_instances.iter().enumerate().all(|(s, is)| {
            is.iter().all(|i| {
                self.instance_services
                    .get(i.index())
                    .is_some_and(|ss| ss.contains(&ServiceId::from(s)))
            })
        }) && self.instance_services.iter().enumerate().all(|(i, ss)| {
            ss.iter()
                .all(|s| self.service_instances[s.index()].contains(&InstanceId::from(i)))
        })
    }
}

pub fn labels_intersect(a: &BTreeSet<String>, b: &BTreeSet<String>) -> bool {
    a.iter().any(|l| b.contains(l))
}

/// All instances, VMs and replica sets of a deployment plus their mappings.
#[derive(Clone, Debug, PartialEq)]
pub struct Cluster {
    pub vms: Vec<Vm>,
    pub instances: Vec<Instance>,
    pub replica_sets: Vec<ReplicaSet>,
    pub mappings: Mappings,
}

impl Cluster {
    /// Mint every replica of every set; nothing is placed yet.
    pub fn new(graph: &ServiceGraph, vms: Vec<Vm>, sets: Vec<ReplicaSetSpec>) -> Self {
        let mut cluster = Cluster {
            vms,
            instances: Vec::new(),
            replica_sets: Vec::with_capacity(sets.len()),
            mappings: Mappings::new(graph.len()),
        };
        for spec in sets {
            let rs_index = cluster.replica_sets.len();
            cluster.replica_sets.push(ReplicaSet {
                template: spec.template,
                replicas: Vec::new(),
                min_replicas: spec.min_replicas,
                max_replicas: spec.max_replicas,
                next_ordinal: 0,
            });
            for _ in 0..spec.replicas {
                cluster.mint_replica(rs_index);
            }
        }
        cluster
    }

    /// Create one more (unplaced, unbound) replica of a set.
    pub fn mint_replica(&mut self, rs_index: usize) -> InstanceId {
        let rs = &mut self.replica_sets[rs_index];
        let id = format!("{}-{}", rs.template.name, rs.next_ordinal);
        rs.next_ordinal += 1;
        let iid = InstanceId::from(self.instances.len());
        rs.replicas.push(iid);
        self.instances
            .push(Instance::from_template(id, &rs.template, rs_index));
        iid
    }

    /// Undo the most recent [`Cluster::mint_replica`] for a set. The replica
    /// must still be unplaced and unbound.
    pub fn discard_last_replica(&mut self, rs_index: usize) {
        let iid = self.replica_sets[rs_index].replicas.pop().expect("replica");
        assert_eq!(iid.index() + 1, self.instances.len(), "not the newest instance");
        let inst = self.instances.pop().expect("instance");
        assert!(!inst.allocated);
        self.replica_sets[rs_index].next_ordinal -= 1;
        self.mappings.truncate_instances(self.instances.len());
    }

    pub fn instance(&self, id: InstanceId) -> &Instance {
        &self.instances[id.index()]
    }

    pub fn vm(&self, id: VmId) -> &Vm {
        &self.vms[id.index()]
    }

    /// Bind `service` to every non-retired instance whose labels intersect the
    /// service's labels. Returns the matched instances.
    pub fn match_instances(&mut self, graph: &ServiceGraph, service: ServiceId) -> Vec<InstanceId> {
        let labels = &graph.service(service).labels;
        let matched: Vec<InstanceId> = self
            .instances
            .iter()
            .enumerate()
            .filter(|(_, inst)| !inst.retired && labels_intersect(labels, &inst.labels))
            .map(|(i, _)| InstanceId::from(i))
            .collect();
        for &i in &matched {
            self.mappings.bind(service, i);
        }
        matched
    }

    /// Bind one instance to every service whose labels it shares.
    pub fn bind_by_labels(&mut self, graph: &ServiceGraph, i: InstanceId) {
        for s in graph.ids() {
            if labels_intersect(&graph.service(s).labels, &self.instances[i.index()].labels) {
                self.mappings.bind(s, i);
            }
        }
    }

    /// Instances that can currently take work for `service`.
    pub fn live_instances_of(&self, service: ServiceId) -> impl Iterator<Item = InstanceId> + '_ {
        self.mappings
            .instances_of(service)
            .iter()
            .copied()
            .filter(|i| self.instances[i.index()].live())
    }

    pub fn total_pes(&self) -> u64 {
        self.vms.iter().map(|v| u64::from(v.num_pes)).sum()
    }

    /// Checks allocated <=> host set, VM host sets mirror instance hosts and
    /// the service/instance mapping is symmetric.
    pub fn check_consistency(&self) -> Result<(), String> {
        for (i, inst) in self.instances.iter().enumerate() {
            let iid = InstanceId::from(i);
            if inst.allocated != inst.host_vm.is_some() {
                return Err(format!("{}: allocated flag disagrees with host", inst.id));
            }
            if let Some(vm) = inst.host_vm {
                if !self.vms[vm.index()].hosted.contains(&iid) {
                    return Err(format!("{} missing from {}", inst.id, self.vms[vm.index()].id));
                }
            }
            if inst.requested_shares > inst.limit_shares || inst.requested_ram > inst.limit_ram {
                return Err(format!("{}: requests exceed limits", inst.id));
            }
        }
        for (v, vm) in self.vms.iter().enumerate() {
            for i in &vm.hosted {
                if self.instances[i.index()].host_vm != Some(VmId::from(v)) {
                    return Err(format!("{} lists foreign instance {:?}", vm.id, i));
                }
            }
        }
        if !self.mappings.is_consistent() {
            return Err("service/instance mapping is not symmetric".into());
        }
        Ok(())
    }
}

/// Parsed replica set before instances are minted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ReplicaSetSpec {
    pub template: InstanceTemplate,
    pub replicas: u32,
    pub min_replicas: u32,
    pub max_replicas: u32,
}

impl fmt::Display for ServiceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "s{}", self.0)
    }
}

//! File-based registration: `application.json`, multi-document
//! `instances.yaml`, `cluster.json` and a flat `scenario.toml`.
//!
//! Every loader reports failures with the file and the path of the offending
//! field (for example `services[2].calls[0]`).

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    Api, InstanceKind, InstanceTemplate, ModelError, ReplicaSetSpec, Service, ServiceGraph, Vm,
};

pub const APPLICATION_FILE: &str = "application.json";
pub const INSTANCES_FILE: &str = "instances.yaml";
pub const CLUSTER_FILE: &str = "cluster.json";
pub const SCENARIO_FILE: &str = "scenario.toml";

#[derive(Debug, Error)]
pub enum RegistryError {
    #[error("{file}: schema error at {path}: {message}")]
    Schema {
        file: String,
        path: String,
        message: String,
    },
    #[error("{file}: invalid value at {path}: {message}")]
    Validation {
        file: String,
        path: String,
        message: String,
    },
    #[error("{file}: {source}")]
    Model {
        file: String,
        #[source]
        source: ModelError,
    },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl RegistryError {
    /// File name the error refers to.
    pub fn file(&self) -> String {
        match self {
            RegistryError::Schema { file, .. }
            | RegistryError::Validation { file, .. }
            | RegistryError::Model { file, .. } => file.clone(),
            RegistryError::Io { path, .. } => path.display().to_string(),
        }
    }

    /// Field path inside the document, when known.
    pub fn path(&self) -> Option<&str> {
        match self {
            RegistryError::Schema { path, .. } | RegistryError::Validation { path, .. } => {
                Some(path)
            }
            _ => None,
        }
    }
}

fn validation(file: &str, path: impl Into<String>, message: impl Into<String>) -> RegistryError {
    RegistryError::Validation {
        file: file.to_string(),
        path: path.into(),
        message: message.into(),
    }
}

fn schema(file: &str, path: impl Into<String>, message: impl Into<String>) -> RegistryError {
    let path = path.into();
    RegistryError::Schema {
        file: file.to_string(),
        path: if path.is_empty() || path == "." {
            "$".to_string()
        } else {
            path
        },
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// application.json

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApplicationDoc {
    apis: Vec<ApiDoc>,
    services: Vec<ServiceDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ApiDoc {
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<f64>,
    entry: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ServiceDoc {
    name: String,
    #[serde(default)]
    labels: Vec<String>,
    #[serde(default)]
    calls: Vec<String>,
}

/// Parse and validate an application description. APIs without a weight get
/// 1.0; services without labels are labelled with their own name. The graph
/// is built once to check references and acyclicity.
pub fn load_application(text: &str) -> Result<(Vec<Api>, Vec<Service>), RegistryError> {
    let file = APPLICATION_FILE;
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ApplicationDoc = serde_path_to_error::deserialize(de)
        .map_err(|e| schema(file, e.path().to_string(), e.inner().to_string()))?;

    let names: HashSet<&str> = doc.services.iter().map(|s| s.name.as_str()).collect();
    for (i, s) in doc.services.iter().enumerate() {
        if s.name.is_empty() {
            return Err(validation(file, format!("services[{i}].name"), "empty service name"));
        }
        for (j, c) in s.calls.iter().enumerate() {
            if !names.contains(c.as_str()) {
                return Err(RegistryError::Model {
                    file: format!("{file} (services[{i}].calls[{j}])"),
                    source: ModelError::UnknownService(c.clone()),
                });
            }
        }
    }
    for (i, a) in doc.apis.iter().enumerate() {
        if let Some(w) = a.weight {
            if !(w.is_finite() && w > 0.0) {
                return Err(validation(file, format!("apis[{i}].weight"), "weight must be > 0"));
            }
        }
        if !names.contains(a.entry.as_str()) {
            return Err(RegistryError::Model {
                file: format!("{file} (apis[{i}].entry)"),
                source: ModelError::UnknownService(a.entry.clone()),
            });
        }
    }

    let apis: Vec<Api> = doc
        .apis
        .into_iter()
        .map(|a| Api {
            name: a.name,
            weight: a.weight.unwrap_or(1.0),
            entry_service: a.entry,
        })
        .collect();
    let services: Vec<Service> = doc
        .services
        .into_iter()
        .map(|s| {
            let labels: BTreeSet<String> = if s.labels.is_empty() {
                [s.name.clone()].into()
            } else {
                s.labels.into_iter().collect()
            };
            Service {
                name: s.name,
                labels,
                calls: s.calls,
            }
        })
        .collect();
    ServiceGraph::build(services.clone(), apis.clone()).map_err(|source| RegistryError::Model {
        file: file.to_string(),
        source,
    })?;
    Ok((apis, services))
}

pub fn application_to_json(apis: &[Api], services: &[Service]) -> String {
    let doc = ApplicationDoc {
        apis: apis
            .iter()
            .map(|a| ApiDoc {
                name: a.name.clone(),
                weight: Some(a.weight),
                entry: a.entry_service.clone(),
            })
            .collect(),
        services: services
            .iter()
            .map(|s| ServiceDoc {
                name: s.name.clone(),
                labels: s.labels.iter().cloned().collect(),
                calls: s.calls.clone(),
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

// ---------------------------------------------------------------------------
// instances.yaml

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct InstanceDoc {
    api_version: String,
    kind: InstanceKind,
    metadata: MetadataDoc,
    spec: InstanceSpecDoc,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetadataDoc {
    name: String,
    labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct InstanceSpecDoc {
    replicas: u32,
    #[serde(default)]
    size: u64,
    #[serde(default)]
    bandwidth: u64,
    requests: ResourcesDoc,
    limits: ResourcesDoc,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    min_replicas: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    max_replicas: Option<u32>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ResourcesDoc {
    shares: u64,
    ram: u64,
}

/// Parse a multi-document YAML stream into replica sets. `minReplicas`
/// defaults to `replicas`, `maxReplicas` to `max(replicas, minReplicas)`.
pub fn load_instances(text: &str) -> Result<Vec<ReplicaSetSpec>, RegistryError> {
    let file = INSTANCES_FILE;
    let mut out = Vec::new();
    let mut names = HashSet::new();
    for (d, doc) in serde_yaml::Deserializer::from_str(text).enumerate() {
        let parsed: Result<Option<InstanceDoc>, _> = serde_path_to_error::deserialize(doc);
        let doc = match parsed {
            Ok(Some(doc)) => doc,
            // an empty document between separators
            Ok(None) => continue,
            Err(e) => {
                let inner = e.path().to_string();
                let path = if inner == "." || inner.is_empty() {
                    format!("doc[{d}]")
                } else {
                    format!("doc[{d}].{inner}")
                };
                return Err(schema(file, path, e.inner().to_string()));
            }
        };
        if doc.api_version != "sim/v1" {
            return Err(validation(
                file,
                format!("doc[{d}].apiVersion"),
                format!("unsupported apiVersion {:?}", doc.api_version),
            ));
        }
        let name = doc.metadata.name;
        if name.is_empty() {
            return Err(validation(file, format!("doc[{d}].metadata.name"), "empty name"));
        }
        if !names.insert(name.clone()) {
            return Err(validation(
                file,
                format!("doc[{d}].metadata.name"),
                format!("duplicate instance name {name:?}"),
            ));
        }
        let spec = doc.spec;
        if spec.requests.shares > spec.limits.shares {
            return Err(validation(
                file,
                format!("doc[{d}].spec.requests.shares"),
                format!("request {} exceeds limit {}", spec.requests.shares, spec.limits.shares),
            ));
        }
        if spec.requests.ram > spec.limits.ram {
            return Err(validation(
                file,
                format!("doc[{d}].spec.requests.ram"),
                format!("request {} exceeds limit {}", spec.requests.ram, spec.limits.ram),
            ));
        }
        if spec.limits.shares == 0 {
            return Err(validation(file, format!("doc[{d}].spec.limits.shares"), "must be > 0"));
        }
        let min = spec.min_replicas.unwrap_or(spec.replicas);
        let max = spec.max_replicas.unwrap_or(spec.replicas.max(min));
        if min == 0 {
            return Err(validation(file, format!("doc[{d}].spec.minReplicas"), "must be >= 1"));
        }
        if !(min <= spec.replicas && spec.replicas <= max) {
            return Err(validation(
                file,
                format!("doc[{d}].spec.replicas"),
                format!("need minReplicas <= replicas <= maxReplicas, got {min} <= {} <= {max}", spec.replicas),
            ));
        }
        out.push(ReplicaSetSpec {
            template: InstanceTemplate {
                name,
                kind: doc.kind,
                labels: doc.metadata.labels.into_iter().collect(),
                requested_shares: spec.requests.shares,
                limit_shares: spec.limits.shares,
                requested_ram: spec.requests.ram,
                limit_ram: spec.limits.ram,
                bandwidth: spec.bandwidth,
                size: spec.size,
            },
            replicas: spec.replicas,
            min_replicas: min,
            max_replicas: max,
        });
    }
    Ok(out)
}

pub fn instances_to_yaml(sets: &[ReplicaSetSpec]) -> String {
    let mut out = String::new();
    for rs in sets {
        let t = &rs.template;
        let doc = InstanceDoc {
            api_version: "sim/v1".into(),
            kind: t.kind,
            metadata: MetadataDoc {
                name: t.name.clone(),
                labels: t.labels.iter().cloned().collect(),
            },
            spec: InstanceSpecDoc {
                replicas: rs.replicas,
                size: t.size,
                bandwidth: t.bandwidth,
                requests: ResourcesDoc {
                    shares: t.requested_shares,
                    ram: t.requested_ram,
                },
                limits: ResourcesDoc {
                    shares: t.limit_shares,
                    ram: t.limit_ram,
                },
                min_replicas: Some(rs.min_replicas),
                max_replicas: Some(rs.max_replicas),
            },
        };
        out.push_str("---\n");
        out.push_str(&serde_yaml::to_string(&doc).expect("serializable"));
    }
    out
}

// ---------------------------------------------------------------------------
// cluster.json

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ClusterDoc {
    vms: Vec<VmDoc>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, rename_all = "camelCase")]
struct VmDoc {
    id: String,
    mips_per_pe: f64,
    num_pes: u32,
    ram: u64,
    bw: u64,
}

/// Parse the cluster description. Each PE contributes 1000 shares.
pub fn load_cluster(text: &str) -> Result<Vec<Vm>, RegistryError> {
    let file = CLUSTER_FILE;
    let de = &mut serde_json::Deserializer::from_str(text);
    let doc: ClusterDoc = serde_path_to_error::deserialize(de)
        .map_err(|e| schema(file, e.path().to_string(), e.inner().to_string()))?;
    if doc.vms.is_empty() {
        return Err(validation(file, "vms", "cluster must contain at least one VM"));
    }
    let mut ids = HashSet::new();
    for (i, v) in doc.vms.iter().enumerate() {
        if !ids.insert(v.id.as_str()) {
            return Err(validation(file, format!("vms[{i}].id"), format!("duplicate VM id {:?}", v.id)));
        }
        if !(v.mips_per_pe.is_finite() && v.mips_per_pe > 0.0) {
            return Err(validation(file, format!("vms[{i}].mipsPerPe"), "must be > 0"));
        }
        if v.num_pes == 0 {
            return Err(validation(file, format!("vms[{i}].numPes"), "must be >= 1"));
        }
    }
    Ok(doc
        .vms
        .into_iter()
        .map(|v| Vm::new(&v.id, v.mips_per_pe, v.num_pes, v.ram, v.bw))
        .collect())
}

pub fn cluster_to_json(vms: &[Vm]) -> String {
    let doc = ClusterDoc {
        vms: vms
            .iter()
            .map(|v| VmDoc {
                id: v.id.clone(),
                mips_per_pe: v.mips_per_pe,
                num_pes: v.num_pes,
                ram: v.ram,
                bw: v.bw,
            })
            .collect(),
    };
    serde_json::to_string_pretty(&doc).expect("serializable")
}

// ---------------------------------------------------------------------------
// scenario.toml

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum QueueOrder {
    #[default]
    Fifo,
    Priority,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LengthSpec {
    pub mean: f64,
    #[serde(default)]
    pub std_dev: f64,
}

/// Simulation parameters. Every field has a default; `scenario.toml` is a flat
/// table that overrides any subset of them.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub seed: u64,

    /// Final number of clients.
    pub num_clients: u64,
    /// Clients added per second.
    pub spawn_rate: f64,
    /// Per-client wait between requests, seconds `[min, max]`.
    pub wait_interval: [f64; 2],
    /// Last generation tick is strictly below this many seconds.
    pub time_limit: Option<f64>,
    pub num_limit: Option<u64>,

    /// Cloudlet length distribution in MI.
    pub cloudlet_mean_length: f64,
    pub cloudlet_std_dev: f64,
    pub cloudlet_overrides: BTreeMap<String, LengthSpec>,

    pub slo_threshold_ms: f64,

    /// `none`, `horizontal`, `vertical` or a registered policy id.
    pub scaling_policy: String,
    pub check_interval: f64,
    pub upper_threshold: f64,
    pub lower_threshold: f64,
    pub consecutive_breaches: u32,
    pub vs_factor: f64,

    /// VM share utilization above which an instance is migrated away.
    /// Absent disables migration checks.
    pub vm_overload_threshold: Option<f64>,

    pub metrics_sample_interval: f64,

    /// `max-idle`, `random` or a registered balancer id.
    pub lb_policy: String,
    pub queue_order: QueueOrder,
    /// Cap on concurrently executing cloudlets per instance.
    pub max_concurrency: Option<u32>,
    pub starvation_timeout: f64,

    /// Milicores charged per executing cloudlet. Absent means
    /// `requested_shares / cpu_parallelism` of the instance.
    pub cpu_per_cloudlet: Option<f64>,
    pub cpu_parallelism: f64,
    pub idle_cpu_floor: f64,
    /// Extra idle milicores as a fraction of the instance's requested shares
    /// (runtime overhead that grows with the allocation).
    pub idle_cpu_fraction: f64,
    pub ram_per_cloudlet: f64,
    pub idle_ram_floor: f64,
    pub bw_per_derivation: f64,

    /// Count queueing wait as part of a node's delay in critical-path sums.
    pub include_wait_in_delay: bool,
    /// Let bandwidth gate placement in addition to shares and RAM.
    pub gate_bandwidth: bool,
    pub path_limit: usize,
    /// Seconds after generation ends before the run is cut off.
    pub drain_limit: Option<f64>,
    /// Keep per-scheduler finished-cloudlet logs (large runs turn this off).
    pub record_finished: bool,
    /// Collect per-instance usage samples for `usage.csv`.
    pub record_usage: bool,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        ScenarioConfig {
            seed: 1,
            num_clients: 100,
            spawn_rate: 10.0,
            wait_interval: [5.0, 15.0],
            time_limit: Some(600.0),
            num_limit: None,
            cloudlet_mean_length: 1000.0,
            cloudlet_std_dev: 0.0,
            cloudlet_overrides: BTreeMap::new(),
            slo_threshold_ms: 3000.0,
            scaling_policy: "none".into(),
            check_interval: 10.0,
            upper_threshold: 0.8,
            lower_threshold: 0.2,
            consecutive_breaches: 3,
            vs_factor: 2.0,
            vm_overload_threshold: None,
            metrics_sample_interval: 1.0,
            lb_policy: "max-idle".into(),
            queue_order: QueueOrder::Fifo,
            max_concurrency: None,
            starvation_timeout: 60.0,
            cpu_per_cloudlet: None,
            cpu_parallelism: 1.0,
            idle_cpu_floor: 0.0,
            idle_cpu_fraction: 0.0,
            ram_per_cloudlet: 0.0,
            idle_ram_floor: 0.0,
            bw_per_derivation: 0.0,
            include_wait_in_delay: true,
            gate_bandwidth: false,
            path_limit: crate::model::DEFAULT_PATH_LIMIT,
            drain_limit: Some(3600.0),
            record_finished: true,
            record_usage: true,
        }
    }
}

impl ScenarioConfig {
    // negated comparisons so that NaN fails every check
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<(), RegistryError> {
        let file = SCENARIO_FILE;
        let [p0, p1] = self.wait_interval;
        if !(p0 > 0.0 && p0 <= p1 && p1.is_finite()) {
            return Err(validation(file, "wait_interval", "need 0 < min <= max"));
        }
        if self.num_clients == 0 {
            return Err(validation(file, "num_clients", "must be >= 1"));
        }
        if !(self.spawn_rate > 0.0 && self.spawn_rate.is_finite()) {
            return Err(validation(file, "spawn_rate", "must be > 0"));
        }
        match (self.time_limit, self.num_limit) {
            (None, None) => {
                return Err(validation(file, "time_limit", "set time_limit or num_limit"))
            }
            (Some(t), _) if !(t.is_finite() && t > 0.0) => {
                return Err(validation(file, "time_limit", "must be a positive number"))
            }
            (_, Some(0)) => return Err(validation(file, "num_limit", "must be >= 1")),
            _ => {}
        }
        if !(self.cloudlet_mean_length > 0.0) || !(self.cloudlet_std_dev >= 0.0) {
            return Err(validation(file, "cloudlet_mean_length", "need mean > 0 and std_dev >= 0"));
        }
        for (name, l) in &self.cloudlet_overrides {
            if !(l.mean > 0.0) || !(l.std_dev >= 0.0) {
                return Err(validation(
                    file,
                    format!("cloudlet_overrides.{name}"),
                    "need mean > 0 and std_dev >= 0",
                ));
            }
        }
        if !(self.upper_threshold > 0.0 && self.upper_threshold <= 1.0) {
            return Err(validation(file, "upper_threshold", "must lie in (0, 1]"));
        }
        if !(self.lower_threshold >= 0.0 && self.lower_threshold < self.upper_threshold) {
            return Err(validation(file, "lower_threshold", "need 0 <= lower < upper"));
        }
        if self.consecutive_breaches == 0 {
            return Err(validation(file, "consecutive_breaches", "must be >= 1"));
        }
        if !(self.vs_factor > 0.0 && self.vs_factor.is_finite()) {
            return Err(validation(file, "vs_factor", "must be > 0"));
        }
        for (key, v) in [
            ("check_interval", self.check_interval),
            ("metrics_sample_interval", self.metrics_sample_interval),
            ("starvation_timeout", self.starvation_timeout),
            ("cpu_parallelism", self.cpu_parallelism),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(validation(file, key, "must be > 0"));
            }
        }
        if let Some(th) = self.vm_overload_threshold {
            if !(th > 0.0 && th <= 1.0) {
                return Err(validation(file, "vm_overload_threshold", "must lie in (0, 1]"));
            }
        }
        if self.max_concurrency == Some(0) {
            return Err(validation(file, "max_concurrency", "must be >= 1"));
        }
        Ok(())
    }

    /// Mean and standard deviation of cloudlet lengths for a service.
    pub fn length_for(&self, service: &str) -> LengthSpec {
        match self.cloudlet_overrides.get(service) {
            Some(l) => l.clone(),
            None => LengthSpec {
                mean: self.cloudlet_mean_length,
                std_dev: self.cloudlet_std_dev,
            },
        }
    }
}

pub fn load_scenario(text: &str) -> Result<ScenarioConfig, RegistryError> {
    let file = SCENARIO_FILE;
    let de = toml::Deserializer::new(text);
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(de)
        .map_err(|e| schema(file, e.path().to_string(), e.inner().message().to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

/// Fails only for values TOML cannot hold, such as a seed above `i64::MAX`.
pub fn scenario_to_toml(cfg: &ScenarioConfig) -> Result<String, RegistryError> {
    toml::to_string(cfg).map_err(|e| validation(SCENARIO_FILE, "", e.to_string()))
}

// ---------------------------------------------------------------------------

/// Everything needed to start a simulation.
#[derive(Clone, Debug)]
pub struct Scenario {
    pub apis: Vec<Api>,
    pub services: Vec<Service>,
    pub replica_sets: Vec<ReplicaSetSpec>,
    pub vms: Vec<Vm>,
    pub config: ScenarioConfig,
}

impl Scenario {
    pub fn from_texts(
        application: &str,
        instances: &str,
        cluster: &str,
        scenario: &str,
    ) -> Result<Self, RegistryError> {
        let (apis, services) = load_application(application)?;
        let replica_sets = load_instances(instances)?;
        let vms = load_cluster(cluster)?;
        let config = load_scenario(scenario)?;
        Ok(Scenario {
            apis,
            services,
            replica_sets,
            vms,
            config,
        })
    }

    pub fn load_files(
        application: &Path,
        instances: &Path,
        cluster: &Path,
        scenario: &Path,
    ) -> Result<Self, RegistryError> {
        let read = |p: &Path| {
            fs::read_to_string(p).map_err(|source| RegistryError::Io {
                path: p.to_path_buf(),
                source,
            })
        };
        let (a, i, c, s) = (read(application)?, read(instances)?, read(cluster)?, read(scenario)?);
        Self::from_texts(&a, &i, &c, &s)
    }

    /// Load the four standard files from a directory.
    pub fn load_dir(dir: &Path) -> Result<Self, RegistryError> {
        Self::load_files(
            &dir.join(APPLICATION_FILE),
            &dir.join(INSTANCES_FILE),
            &dir.join(CLUSTER_FILE),
            &dir.join(SCENARIO_FILE),
        )
    }

    pub fn graph(&self) -> Result<ServiceGraph, ModelError> {
        ServiceGraph::build_with_limit(
            self.services.clone(),
            self.apis.clone(),
            self.config.path_limit,
        )
    }

    /// Write the scenario back out in the on-disk schema.
    pub fn write_dir(&self, dir: &Path) -> Result<(), RegistryError> {
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(|source| RegistryError::Io { path: p, source })
        };
        fs::create_dir_all(dir).map_err(|source| RegistryError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
        write(APPLICATION_FILE, application_to_json(&self.apis, &self.services))?;
        write(INSTANCES_FILE, instances_to_yaml(&self.replica_sets))?;
        write(CLUSTER_FILE, cluster_to_json(&self.vms))?;
        write(SCENARIO_FILE, scenario_to_toml(&self.config)?)?;
        Ok(())
    }
}

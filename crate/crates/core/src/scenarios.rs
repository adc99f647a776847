//! Built-in example scenarios and synthetic capacity workloads.

use std::collections::BTreeSet;

use crate::model::{Api, InstanceKind, InstanceTemplate, ReplicaSetSpec, Service, Vm};
use crate::registry::{RegistryError, Scenario, ScenarioConfig};

struct Embedded {
    name: &'static str,
    application: &'static str,
    instances: &'static str,
    cluster: &'static str,
    scenario: &'static str,
}

macro_rules! embed {
    ($name:literal) => {
        Embedded {
            name: $name,
            application: include_str!(concat!("../scenarios/", $name, "/application.json")),
            instances: include_str!(concat!("../scenarios/", $name, "/instances.yaml")),
            cluster: include_str!(concat!("../scenarios/", $name, "/cluster.json")),
            scenario: include_str!(concat!("../scenarios/", $name, "/scenario.toml")),
        }
    };
}

const EMBEDDED: &[Embedded] = &[embed!("minimal"), embed!("sockshop")];

pub const BUILTIN: &[&str] = &["minimal", "sockshop"];

/// Load a built-in scenario by name.
pub fn builtin(name: &str) -> Option<Result<Scenario, RegistryError>> {
    EMBEDDED.iter().find(|e| e.name == name).map(|e| {
        Scenario::from_texts(e.application, e.instances, e.cluster, e.scenario)
    })
}

/// Built-in scenarios plus derived presets, as accepted by [`preset`].
pub const PRESETS: &[&str] = &["minimal", "sockshop", "sockshop-testbed"];

pub fn preset(name: &str) -> Option<Result<Scenario, RegistryError>> {
    match name {
        "sockshop-testbed" => Some(Ok(sockshop_testbed())),
        _ => builtin(name),
    }
}

/// Client counts of the response-time curve.
pub const CURVE_CLIENTS: [u64; 5] = [100, 150, 200, 250, 300];

/// Mean response times (ms) of a 10-node SockShop testbed at 100 and 300
/// clients, the endpoints the testbed preset is tuned towards.
pub const TESTBED_ENDPOINTS_MS: (f64, f64) = (749.0, 2574.0);

/// `sockshop` with every cloudlet 7.4x longer and clients waiting 10-30 s
/// between requests. Under this setting the mean response time climbs from
/// about 750 ms at 100 clients to about 2.6 s at 300 as the front services
/// approach saturation.
pub fn sockshop_testbed() -> Scenario {
    let mut sc = builtin("sockshop")
        .expect("sockshop is built in")
        .expect("built-in scenarios parse");
    let c = &mut sc.config;
    let k = 7.4;
    c.cloudlet_mean_length *= k;
    c.cloudlet_std_dev *= k;
    for l in c.cloudlet_overrides.values_mut() {
        l.mean *= k;
        l.std_dev *= k;
    }
    c.wait_interval = [10.0, 30.0];
    sc
}

/// Entity counts of one synthetic capacity case.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CapacityCase {
    pub id: &'static str,
    pub requests: u64,
    pub services: usize,
    pub instances: usize,
}

impl CapacityCase {
    /// Every request visits every service once.
    pub fn cloudlets(&self) -> u64 {
        self.requests * self.services as u64
    }
}

pub const CAPACITY_CASES: &[CapacityCase] = &[
    CapacityCase { id: "smoke", requests: 100, services: 5, instances: 5 },
    CapacityCase { id: "1a", requests: 100_000, services: 1, instances: 1_000 },
    CapacityCase { id: "1b", requests: 1_000_000, services: 1, instances: 1_000 },
    CapacityCase { id: "2a", requests: 1_000, services: 5_000, instances: 1 },
    CapacityCase { id: "2b", requests: 1_000, services: 50_000, instances: 1 },
    CapacityCase { id: "3a", requests: 10_000, services: 100, instances: 300 },
    CapacityCase { id: "3b", requests: 10_000, services: 1_000, instances: 3_000 },
    CapacityCase { id: "4a", requests: 1_000, services: 5_000, instances: 15_000 },
    CapacityCase { id: "4b", requests: 10_000, services: 5_000, instances: 15_000 },
];

pub fn capacity_case(id: &str) -> Option<CapacityCase> {
    CAPACITY_CASES.iter().copied().find(|c| c.id == id)
}

/// A linear chain `s0 -> s1 -> ... -> s(n-1)` behind one API. Instances
/// are spread round-robin over the services; with fewer instances than
/// services every instance serves every service.
pub fn synthesize(case: &CapacityCase, seed: u64) -> Scenario {
    let n = case.services;
    let shared = case.instances < n;
    let services: Vec<Service> = (0..n)
        .map(|i| {
            let name = format!("s{i}");
            let calls: Vec<String> = if i + 1 < n {
                vec![format!("s{}", i + 1)]
            } else {
                vec![]
            };
            let label = if shared { "all".to_string() } else { name.clone() };
            Service {
                name,
                labels: BTreeSet::from([label]),
                calls,
            }
        })
        .collect();
    let apis = vec![Api {
        name: "GET /chain".into(),
        weight: 1.0,
        entry_service: "s0".into(),
    }];

    let shares = 100;
    let replica_sets: Vec<ReplicaSetSpec> = if shared {
        vec![set("all", "all", case.instances as u32, shares)]
    } else {
        // per-service replica count, first services take the remainder
        let base = case.instances / n;
        let extra = case.instances % n;
        (0..n)
            .map(|i| {
                let r = (base + usize::from(i < extra)) as u32;
                set(&format!("s{i}"), &format!("s{i}"), r, shares)
            })
            .collect()
    };
    let pes_needed = (case.instances as u64 * shares).div_ceil(1000).max(1);
    let vm_count = pes_needed.div_ceil(64);
    let vms = (0..vm_count)
        .map(|v| Vm::new(&format!("vm-{v}"), 10_000.0, 64, 1 << 30, 1 << 20))
        .collect();

    let config = ScenarioConfig {
        seed,
        num_clients: 1_000,
        spawn_rate: 1_000.0,
        wait_interval: [1.0, 1.0],
        time_limit: None,
        num_limit: Some(case.requests),
        cloudlet_mean_length: 1.0,
        cloudlet_std_dev: 0.0,
        metrics_sample_interval: 60.0,
        drain_limit: None,
        record_finished: false,
        record_usage: false,
        path_limit: 10,
        ..ScenarioConfig::default()
    };
    Scenario {
        apis,
        services,
        replica_sets,
        vms,
        config,
    }
}

fn set(name: &str, label: &str, replicas: u32, shares: u64) -> ReplicaSetSpec {
    ReplicaSetSpec {
        template: InstanceTemplate {
            name: name.into(),
            kind: InstanceKind::Pod,
            labels: BTreeSet::from([label.to_string()]),
            requested_shares: shares,
            limit_shares: shares,
            requested_ram: 1,
            limit_ram: 1,
            bandwidth: 0,
            size: 0,
        },
        replicas,
        min_replicas: replicas,
        max_replicas: replicas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn builtins_parse() {
        for name in BUILTIN {
            let s = builtin(name).unwrap().unwrap();
            s.graph().unwrap();
        }
        assert!(builtin("nope").is_none());
    }

    #[test]
    fn testbed_preset_only_stretches_lengths_and_waits() {
        let base = builtin("sockshop").unwrap().unwrap();
        let t = sockshop_testbed();
        assert_eq!(t.config.wait_interval, [10.0, 30.0]);
        assert!((t.config.cloudlet_mean_length - base.config.cloudlet_mean_length * 7.4).abs() < 1e-9);
        assert_eq!(t.config.seed, base.config.seed);
        assert_eq!(t.services.len(), base.services.len());
    }

    #[test]
    fn synthesized_counts_match_the_case() {
        for id in ["smoke", "3a", "2a"] {
            let case = capacity_case(id).unwrap();
            let s = synthesize(&case, 1);
            assert_eq!(s.services.len(), case.services);
            let inst: u32 = s.replica_sets.iter().map(|r| r.replicas).sum();
            assert_eq!(inst as usize, case.instances);
            let g = s.graph().unwrap();
            assert_eq!(g.chains(crate::model::ApiId(0)).len(), 1);
        }
    }
}

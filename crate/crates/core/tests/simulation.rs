use std::collections::BTreeMap;

use microsim_core::model::{Api, InstanceKind, InstanceTemplate, ReplicaSetSpec, Service, Vm};
use microsim_core::registry::ScenarioConfig;
use microsim_core::scenarios;
use microsim_core::workload::{run_generator, GeneratorParams};
use microsim_core::{run_scenario, RequestStatus, Scenario};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ChiSquared, ContinuousCDF};

fn dag_scenario(n: usize, edges: &[bool], entries: &[usize], seed: u64) -> Scenario {
    let names: Vec<String> = (0..n).map(|i| format!("s{i}")).collect();
    let services = (0..n)
        .map(|i| {
            let calls: Vec<&str> =
                (i + 1..n).filter(|&j| edges[i * n + j]).map(|j| names[j].as_str()).collect();
            Service::new(&names[i], [names[i].as_str()], &calls)
        })
        .collect();
    let apis = entries
        .iter()
        .enumerate()
        .map(|(k, &e)| Api {
            name: format!("api{k}"),
            weight: 1.0 + k as f64,
            entry_service: names[e].clone(),
        })
        .collect();
    let replica_sets = names
        .iter()
        .map(|name| ReplicaSetSpec {
            template: InstanceTemplate {
                name: name.clone(),
                kind: InstanceKind::Pod,
                labels: [name.clone()].into(),
                requested_shares: 500,
                limit_shares: 1000,
                requested_ram: 64,
                limit_ram: 128,
                bandwidth: 0,
                size: 0,
            },
            replicas: 1,
            min_replicas: 1,
            max_replicas: 1,
        })
        .collect();
    Scenario {
        apis,
        services,
        replica_sets,
        vms: vec![Vm::new("vm", 1000.0, 16, 1 << 20, 1000)],
        config: ScenarioConfig {
            seed,
            num_clients: 5,
            spawn_rate: 5.0,
            wait_interval: [1.0, 2.0],
            time_limit: None,
            num_limit: Some(40),
            cloudlet_mean_length: 50.0,
            cloudlet_std_dev: 10.0,
            ..ScenarioConfig::default()
        },
    }
}

/// Cloudlets one request creates: the call DAG unfolded into a tree.
fn tree_size(n: usize, edges: &[bool], node: usize) -> u64 {
    1 + (node + 1..n)
        .filter(|&j| edges[node * n + j])
        .map(|j| tree_size(n, edges, j))
        .sum::<u64>()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn cloudlet_count_matches_unfolded_call_trees(
        n in 1usize..7,
        edges in prop::collection::vec(any::<bool>(), 36),
        seed in 0u64..1000,
    ) {
        let edges: Vec<bool> = (0..n * n).map(|k| edges[k % 36]).collect();
        let entries: Vec<usize> = (0..n.min(3)).collect();
        let s = dag_scenario(n, &edges, &entries, seed);
        let out = run_scenario(&s).unwrap();
        let r = &out.report;
        prop_assert_eq!(r.requests.len(), 40);
        let mut expected = 0;
        for req in &r.requests {
            prop_assert_eq!(req.status, RequestStatus::Completed);
            expected += tree_size(n, &edges, entries[req.api.index()]);
            let (resp, cp) = (req.response_time.unwrap(), req.cp_estimate.unwrap());
            // path delays telescope to one leaf's finish, the response waits for all
            prop_assert!(cp <= resp + 1e-6, "cp {} > response {}", cp, resp);
            prop_assert!(cp > 0.0);
        }
        prop_assert_eq!(r.cloudlets, expected);
    }
}

#[test]
fn chain_graph_response_equals_critical_path() {
    // s0 -> s1 -> s2: one path, so the estimate is the response itself
    let edges = [false, true, false, false, false, true, false, false, false];
    let out = run_scenario(&dag_scenario(3, &edges, &[0], 5)).unwrap();
    for req in &out.report.requests {
        let (resp, cp) = (req.response_time.unwrap(), req.cp_estimate.unwrap());
        assert!((resp - cp).abs() < 1e-6, "{resp} vs {cp}");
        assert_eq!(req.critical_path.as_ref().unwrap().len(), 3);
    }
}

#[test]
fn summary_agrees_with_requests_csv() {
    let s = scenarios::builtin("minimal").unwrap().unwrap();
    let out = run_scenario(&s).unwrap();
    let csv = out.report.requests_csv();
    let mut lines = csv.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    let col = |name: &str| header.iter().position(|h| *h == name).unwrap();
    let (resp, viol) = (col("response_ms"), col("slo_violated"));
    let mut n = 0u64;
    let mut sum = 0.0;
    let mut violated = 0u64;
    for line in lines {
        let f: Vec<&str> = line.split(',').collect();
        if f[resp].is_empty() {
            continue;
        }
        n += 1;
        sum += f[resp].parse::<f64>().unwrap();
        violated += u64::from(f[viol] == "true");
    }
    let summary = out.report.summary_text();
    let field = |key: &str| -> f64 {
        summary
            .lines()
            .find_map(|l| l.strip_prefix(&format!("{key}: ")))
            .unwrap_or_else(|| panic!("{key} missing"))
            .split_whitespace()
            .next()
            .unwrap()
            .parse()
            .unwrap()
    };
    assert_eq!(field("completed"), n as f64);
    assert!((field("mean_response_ms") - sum / n as f64).abs() < 1e-3);
    assert!((field("slo_violation_rate") - violated as f64 / n as f64).abs() < 1e-6);
}

#[test]
fn usage_csv_rows_cover_every_sample() {
    let s = scenarios::builtin("minimal").unwrap().unwrap();
    let out = run_scenario(&s).unwrap();
    let csv = out.report.usage_csv();
    let mut per_t: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for line in csv.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let e = per_t.entry(f[0].to_string()).or_default();
        match f[1] {
            "instance" => e.0 += 1,
            "vm" => e.1 += 1,
            other => panic!("entity kind {other}"),
        }
        let cpu: f64 = f[3].parse().unwrap();
        assert!(cpu >= 0.0);
    }
    assert!(!per_t.is_empty());
    // minimal: four pods on one VM
    assert!(per_t.values().all(|&c| c == (4, 1)), "{per_t:?}");
}

#[test]
fn api_mix_follows_the_weights() {
    let params = GeneratorParams {
        num_clients: 500,
        spawn_rate: 100.0,
        wait_min: 1.0,
        wait_max: 3.0,
        time_limit: Some(300.0),
        num_limit: None,
    };
    let weights = [1.0, 3.0, 2.0, 1.0];
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0u64; 4];
    for (_, _, reqs) in run_generator(params, &weights, &mut rng, 300) {
        for r in reqs {
            counts[r.api.index()] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let wsum: f64 = weights.iter().sum();
    let chi2: f64 = counts
        .iter()
        .zip(weights)
        .map(|(&o, w)| {
            let e = total as f64 * w / wsum;
            (o as f64 - e).powi(2) / e
        })
        .sum();
    let p = 1.0 - ChiSquared::new(3.0).unwrap().cdf(chi2);
    assert!(total > 50_000);
    assert!(p > 1e-3, "chi2 {chi2:.2}, p {p:.2e}, counts {counts:?}");
}

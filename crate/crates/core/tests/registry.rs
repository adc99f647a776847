use std::fs;
use std::path::{Path, PathBuf};

use microsim_core::model::{Api, InstanceKind, InstanceTemplate, ReplicaSetSpec, Service, Vm};
use microsim_core::registry::{load_cluster, ScenarioConfig};
use microsim_core::{RegistryError, Scenario};
use proptest::prelude::*;

fn manifest_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

fn copy_minimal(to: &Path) {
    let from = manifest_dir().join("scenarios/minimal");
    for e in fs::read_dir(from).unwrap() {
        let e = e.unwrap();
        fs::copy(e.path(), to.join(e.file_name())).unwrap();
    }
}

#[test]
fn every_error_fixture_names_its_file_and_field() {
    let corpus = manifest_dir().join("tests/fixtures/errors");
    let mut cases: Vec<_> = fs::read_dir(&corpus).unwrap().map(|e| e.unwrap().path()).collect();
    cases.sort();
    assert!(cases.len() >= 10, "corpus went missing");
    for case in cases {
        let expect = fs::read_to_string(case.join("expect.txt")).unwrap();
        let (file, needle) = expect.trim().split_once('|').unwrap();

        let dir = tempfile::tempdir().unwrap();
        copy_minimal(dir.path());
        fs::copy(case.join(file), dir.path().join(file)).unwrap();

        let err = match Scenario::load_dir(dir.path()) {
            Ok(_) => panic!("{}: loaded without error", case.display()),
            Err(e) => e,
        };
        let text = err.to_string();
        assert!(err.file().starts_with(file), "{}: {text}", case.display());
        assert!(text.starts_with(file), "{}: {text}", case.display());
        assert!(text.contains(needle), "{}: {text:?} lacks {needle:?}", case.display());
    }
}

#[test]
fn seeds_beyond_toml_range_are_an_error_not_a_panic() {
    let mut s = microsim_core::scenarios::builtin("minimal").unwrap().unwrap();
    s.config.seed = u64::MAX;
    let dir = tempfile::tempdir().unwrap();
    let err = s.write_dir(dir.path()).unwrap_err();
    assert_eq!(err.file(), "scenario.toml");
}

#[test]
fn missing_file_is_an_io_error_naming_it() {
    let dir = tempfile::tempdir().unwrap();
    copy_minimal(dir.path());
    fs::remove_file(dir.path().join("cluster.json")).unwrap();
    let err = Scenario::load_dir(dir.path()).unwrap_err();
    assert!(matches!(err, RegistryError::Io { .. }));
    assert!(err.to_string().contains("cluster.json"));
}

#[test]
fn small_cluster_fixture_totals() {
    let text = fs::read_to_string(manifest_dir().join("tests/fixtures/cluster-small.json")).unwrap();
    let vms = load_cluster(&text).unwrap();
    // hand sums over the fixture: PEs 2 + 16 + 6, RAM 2048 + 32768 + 8192,
    // MIPS 2*1000 + 16*2500 + 6*1500
    assert_eq!(vms.len(), 3);
    assert_eq!(vms.iter().map(|v| v.num_pes).sum::<u32>(), 24);
    assert_eq!(vms.iter().map(|v| v.total_shares).sum::<u64>(), 24_000);
    assert_eq!(vms.iter().map(|v| v.ram).sum::<u64>(), 43_008);
    assert_eq!(vms.iter().map(|v| v.bw).sum::<u64>(), 1_600);
    let mips: f64 = vms.iter().map(|v| v.mips_per_pe * v.num_pes as f64).sum();
    assert_eq!(mips, 51_000.0);
}

fn scenario_strategy() -> impl Strategy<Value = Scenario> {
    (2usize..7, 1usize..4, 0..=i64::MAX as u64, 1u32..4).prop_flat_map(|(n, vms, seed, replicas)| {
        let edges = prop::collection::vec(any::<bool>(), n * n);
        let weights = prop::collection::vec(1u32..10, 1..=n);
        (Just((n, vms, seed, replicas)), edges, weights)
    })
    .prop_map(|((n, vms, seed, replicas), edges, weights)| {
        let names: Vec<String> = (0..n).map(|i| format!("svc-{i}")).collect();
        let services = (0..n)
            .map(|i| {
                let calls: Vec<&str> =
                    (i + 1..n).filter(|&j| edges[i * n + j]).map(|j| names[j].as_str()).collect();
                Service::new(&names[i], [names[i].as_str()], &calls)
            })
            .collect();
        let apis = weights
            .iter()
            .enumerate()
            .map(|(k, &w)| Api {
                name: format!("GET /{k}"),
                weight: w as f64,
                entry_service: names[k].clone(),
            })
            .collect();
        let replica_sets = names
            .iter()
            .map(|name| ReplicaSetSpec {
                template: InstanceTemplate {
                    name: name.clone(),
                    kind: InstanceKind::Pod,
                    labels: [name.clone()].into(),
                    requested_shares: 250,
                    limit_shares: 500,
                    requested_ram: 64,
                    limit_ram: 128,
                    bandwidth: 5,
                    size: 32,
                },
                replicas,
                min_replicas: 1,
                max_replicas: replicas + 2,
            })
            .collect();
        let vms = (0..vms)
            .map(|v| Vm::new(&format!("vm-{v}"), 1000.0 + v as f64, 4 + v as u32, 4096, 1000))
            .collect();
        Scenario {
            apis,
            services,
            replica_sets,
            vms,
            config: ScenarioConfig {
                seed,
                ..ScenarioConfig::default()
            },
        }
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn written_scenarios_load_back_unchanged(s in scenario_strategy()) {
        let dir = tempfile::tempdir().unwrap();
        s.write_dir(dir.path()).unwrap();
        let back = Scenario::load_dir(dir.path()).unwrap();
        prop_assert_eq!(&back.apis, &s.apis);
        prop_assert_eq!(&back.services, &s.services);
        prop_assert_eq!(&back.replica_sets, &s.replica_sets);
        prop_assert_eq!(&back.vms, &s.vms);
        prop_assert_eq!(&back.config, &s.config);
        prop_assert_eq!(back.graph().unwrap(), s.graph().unwrap());
    }
}

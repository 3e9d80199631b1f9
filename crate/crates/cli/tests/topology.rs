mod common;

use std::net::TcpStream;
use std::time::Duration;

use common::{run_scenario, scenarios_dir, ProcessMode, Scenario, Topology, TopologySpec};

fn scenario(name: &str) -> Scenario {
    Scenario::load(&scenarios_dir().join(format!("{name}.json"))).unwrap()
}

fn run_both(name: &str) {
    for mode in [ProcessMode::Inprocess, ProcessMode::Subprocess] {
        run_scenario(&scenario(name).with_process(mode)).unwrap().assert_passed();
    }
}

#[test]
fn outage_two_level() {
    run_both("outage_two_level");
}

#[test]
fn chain_three_level() {
    run_both("chain_three_level");
}

#[test]
fn leaf_restart_l2() {
    run_both("leaf_restart_l2");
}

// Keeps the root's L1 across the outage, so in-process only: a subprocess
// root is restarted to change the switch.
#[test]
fn backend_fail_switch() {
    run_scenario(&scenario("backend_fail_switch")).unwrap().assert_passed();
}

#[test]
fn admin_reconfigure() {
    run_scenario(&scenario("admin_reconfigure")).unwrap().assert_passed();
}

#[test]
fn every_fixture_parses() {
    let mut n = 0;
    for entry in std::fs::read_dir(scenarios_dir()).unwrap() {
        let path = entry.unwrap().path();
        Scenario::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 5);
}

#[test]
fn assertion_failures_are_reported_not_raised() {
    let mut s = scenario("chain_three_level");
    s.actions.truncate(1);
    if let common::Action::Get { source, .. } = &mut s.actions[0] {
        *source = Some("L2".into());
    }
    let report = run_scenario(&s).unwrap();
    assert_eq!(report.failures.len(), 1, "{:?}", report.failures);
}

#[test]
fn harness_errors_are_distinct() {
    let mut s = scenario("chain_three_level");
    s.topology.levels = 1;
    assert!(run_scenario(&s).is_err());
}

#[test]
fn teardown_releases_every_port() {
    let spec: TopologySpec = serde_json::from_str(r#"{"levels": 3, "process": "subprocess"}"#).unwrap();
    let topo = Topology::start(spec).unwrap();
    let addrs: Vec<String> = (0..topo.len()).map(|l| topo.addr(l).to_string()).collect();
    for a in &addrs {
        assert!(TcpStream::connect(a).is_ok());
    }
    drop(topo);
    for a in &addrs {
        let addr = a.parse().unwrap();
        assert!(TcpStream::connect_timeout(&addr, Duration::from_millis(500)).is_err(), "{a} still open");
    }
}

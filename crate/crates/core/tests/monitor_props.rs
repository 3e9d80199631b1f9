mod support;

use std::time::{Duration, Instant};

use proptest::prelude::*;
use rand::rngs::StdRng;
use rand::SeedableRng;

use dan_core::monitor::{Event, Monitor, MonitorConfig, Severity, ThresholdRule};
use support::{check_xml, filter_check, nasty_event, random_timeline, threshold_actual, threshold_oracle};

#[test]
fn severity_filter_random_streams() {
    for seed in 0..50 {
        filter_check(seed, 500).unwrap();
    }
}

#[test]
fn xml_is_well_formed_under_fuzz() {
    let mut rng = StdRng::seed_from_u64(7);
    for _ in 0..5000 {
        let ev = nasty_event(&mut rng);
        check_xml(&ev.to_xml(), &ev).unwrap();
    }
}

#[test]
fn threshold_matches_oracle_on_timelines() {
    let mut rng = StdRng::seed_from_u64(11);
    for i in 0..300 {
        let rule = ThresholdRule {
            counter: "backend.errors".into(),
            window_s: 1 + i % 90,
            limit: 1 + i % 12,
        };
        let timeline = random_timeline(&mut rng, 200);
        assert_eq!(threshold_actual(&rule, &timeline), threshold_oracle(&rule, &timeline), "rule {rule:?}");
    }
}

#[test]
fn threshold_scripted_examples() {
    let rule = ThresholdRule {
        counter: "backend.errors".into(),
        window_s: 60,
        limit: 5,
    };
    let secs = |v: &[i64]| v.iter().map(|s| (s * 1000, 1)).collect::<Vec<_>>();
    let six: Vec<i64> = (0..6).map(|i| i * 2).collect();
    assert_eq!(threshold_oracle(&rule, &secs(&six)).len(), 1);
    assert_eq!(threshold_actual(&rule, &secs(&six)).len(), 1);
    assert_eq!(threshold_actual(&rule, &secs(&[0, 10, 20, 30, 59])).len(), 0);
    let mut twice = six.clone();
    twice.extend(six.iter().map(|t| t + 10 + 61));
    assert_eq!(threshold_oracle(&rule, &secs(&twice)).len(), 2);
    assert_eq!(threshold_actual(&rule, &secs(&twice)).len(), 2);
}

proptest! {
    #[test]
    fn threshold_property(
        window_s in 1u64..30,
        limit in 1u64..8,
        gaps in prop::collection::vec((0i64..20_000, 1u64..4), 0..120),
    ) {
        let rule = ThresholdRule { counter: "x.y".into(), window_s, limit };
        let mut t = 0;
        let incs: Vec<_> = gaps.iter().map(|(g, n)| { t += g; (t, *n) }).collect();
        prop_assert_eq!(threshold_actual(&rule, &incs), threshold_oracle(&rule, &incs));
    }
}

#[test]
fn emit_does_not_wait_for_stalled_subscriber() {
    let monitor = Monitor::new(MonitorConfig::default()).unwrap();
    let stalled = monitor.subscribe(1, Severity::Debug);
    let start = Instant::now();
    for i in 0..20_000 {
        monitor.emit(Event::new(Severity::Info, "test", "test.flood").attr("i", i));
    }
    assert!(start.elapsed() < Duration::from_secs(5));
    assert_eq!(stalled.len(), 1024);
    assert_eq!(stalled.dropped(), 20_000 - 1024);
    assert_eq!(monitor.counters().subscriber_drops, 20_000 - 1024);
}

#[test]
fn counters_are_monotone() {
    use dan_core::monitor::RequestClass;
    let monitor = std::sync::Arc::new(Monitor::default());
    let m = monitor.clone();
    let writer = std::thread::spawn(move || {
        for i in 0..5000u64 {
            let class = [RequestClass::L1Hit, RequestClass::Backend, RequestClass::Error][(i % 3) as usize];
            m.record_request("t", class, 10);
        }
    });
    let mut last = monitor.counters();
    while !writer.is_finished() {
        let now = monitor.counters();
        assert!(now.conservation_holds());
        assert!(now.requests_total >= last.requests_total);
        assert!(now.l1_hits >= last.l1_hits && now.errors_total >= last.errors_total);
        assert!(now.bytes_served >= last.bytes_served);
        last = now;
    }
    writer.join().unwrap();
    assert_eq!(monitor.counters().requests_total, 5000);
}

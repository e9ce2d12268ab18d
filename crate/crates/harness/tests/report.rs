use baton_harness::report::{read_records, write_records, InvocationRecord, Outcome, Report};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;

fn rec(function: &str, at: f64, e2e: f64, reference: f64) -> InvocationRecord {
    InvocationRecord {
        function: function.into(),
        t_scheduled: at,
        t_submit: at,
        t_response: at + e2e,
        outcome: Outcome::Ok,
        queued: false,
        exec_reference: reference,
    }
}

/// Independent nearest-rank: the smallest k with k/n >= p, on p in
/// thousandths to stay in integers.
fn oracle(values: &[f64], p_milli: u64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = v.len() as u64;
    let k = (1..=n).find(|k| k * 100_000 >= p_milli * n).unwrap();
    v[(k - 1) as usize]
}

#[test]
fn uniform_percentiles_match_analytic_values() {
    let mut e2e: Vec<f64> = (1..=1000).map(f64::from).collect();
    e2e.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(3));
    let records: Vec<_> = e2e.iter().map(|v| rec("f", 0.0, *v, 1.0)).collect();
    let r = Report::build(&records, 0.0, 10);
    assert_eq!(r.e2e.p50, Some(500.0));
    assert_eq!(r.e2e.p90, Some(900.0));
    assert_eq!(r.e2e.p99, Some(990.0));
    assert_eq!(r.e2e.p999, Some(999.0));
}

proptest! {
    #[test]
    fn percentiles_follow_sorted_order_oracle(e2e in prop::collection::vec(0.5f64..1e4, 1..400)) {
        let records: Vec<_> = e2e.iter().map(|v| rec("f", 0.0, *v, 0.5)).collect();
        let r = Report::build(&records, 0.0, 10);
        prop_assert_eq!(r.e2e.p50, Some(oracle(&e2e, 50_000)));
        prop_assert_eq!(r.e2e.p90, Some(oracle(&e2e, 90_000)));
        prop_assert_eq!(r.e2e.p99, Some(oracle(&e2e, 99_000)));
        prop_assert_eq!(r.e2e.p999, Some(oracle(&e2e, 99_900)));
    }
}

#[test]
fn warmup_is_discarded() {
    // 30 minutes of records; the first 10 carry a huge latency.
    let records: Vec<_> = (0..30 * 60)
        .map(|s| {
            let at = s as f64 * 1000.0;
            rec("f", at, if s < 600 { 1e6 } else { 20.0 }, 10.0)
        })
        .collect();
    let r = Report::build(&records, 10.0 * 60_000.0, 60);
    assert_eq!(r.invocations, 20 * 60);
    assert_eq!(r.e2e.p999, Some(20.0));
    assert_eq!(r.series.first().unwrap().start_s, 600);
    assert_eq!(r.series.len(), 20);
}

#[test]
fn per_function_geomean_and_failure_rate() {
    let mut records = vec![
        rec("a", 0.0, 10.0, 10.0),
        rec("a", 0.0, 40.0, 10.0),
        rec("b", 0.0, 90.0, 10.0),
    ];
    let mut failed = rec("b", 0.0, 5.0, 10.0);
    failed.outcome = Outcome::Error;
    records.push(failed);
    let r = Report::build(&records, 0.0, 10);
    assert_eq!(r.functions.len(), 2);
    assert!((r.functions[0].geomean_slowdown.unwrap() - 2.0).abs() < 1e-12);
    assert!((r.functions[1].geomean_slowdown.unwrap() - 9.0).abs() < 1e-12);
    assert_eq!(r.functions[1].failures, 1);
    assert_eq!(r.failure_rate, 0.25);
    assert_eq!(r.scheduling.p50, Some(30.0));
}

#[test]
fn records_round_trip_and_outputs_exist() {
    let dir = tempfile::tempdir().unwrap();
    let records: Vec<_> = (0..50)
        .map(|i| rec(&format!("f{}", i % 3), i as f64, 12.5 + i as f64, 10.0))
        .collect();
    let path = dir.path().join("records.csv");
    write_records(&path, &records).unwrap();
    assert_eq!(read_records(&path).unwrap(), records);
    let summary = Report::build(&records, 0.0, 1).write(dir.path()).unwrap();
    assert!(summary.contains("per-function geomean"));
    for f in ["functions.csv", "series.csv", "summary.txt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
}

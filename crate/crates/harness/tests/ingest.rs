use std::path::PathBuf;

use baton_harness::ingest::{ingest, IngestOptions};
use baton_harness::trace::TraceError;

fn fixture(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("tests/fixtures/azure")
        .join(name)
}

fn run(opts: &IngestOptions) -> Result<baton_harness::trace::Trace, TraceError> {
    ingest(
        &fixture("invocations.csv"),
        &fixture("durations.csv"),
        &fixture("memory.csv"),
        opts,
    )
}

fn total(trace: &baton_harness::trace::Trace, name: &str) -> usize {
    trace
        .functions
        .iter()
        .find(|f| f.name == name)
        .map_or(0, |f| f.arrivals_ms.len())
}

// Hand-built fixture: fa has 2/min over minutes 480..510 plus 5 at minute
// 100; fb has 1 every tenth minute; fc has 3 at minute 485; fd has no
// duration row.
#[test]
fn toy_fixture_totals() {
    let t = run(&IngestOptions::default()).unwrap();
    let names: Vec<&str> = t.functions.iter().map(|f| f.name.as_str()).collect();
    assert_eq!(names, ["fa", "fb", "fc"]);
    assert_eq!(total(&t, "fa"), 65);
    assert_eq!(total(&t, "fb"), 144);
    assert_eq!(total(&t, "fc"), 3);
    assert_eq!(t.horizon_ms, 1440 * 60_000);

    let fa = &t.functions[0];
    assert_eq!(fa.exec_ms, 10.0);
    assert_eq!(fa.memory_mb, 140);
    // A zero median falls back to the average.
    assert_eq!(t.functions[2].exec_ms, 5.0);
    assert_eq!(t.functions[2].memory_mb, 96);
    for f in &t.functions {
        assert!(f.arrivals_ms.windows(2).all(|w| w[0] <= w[1]));
        assert!(f.arrivals_ms.iter().all(|a| *a < t.horizon_ms));
    }
}

#[test]
fn window_excludes_outside_counts() {
    let opts = IngestOptions {
        window_start_min: 480,
        window_len_min: Some(30),
        ..IngestOptions::default()
    };
    let t = run(&opts).unwrap();
    assert_eq!(t.horizon_ms, 30 * 60_000);
    assert_eq!(total(&t, "fa"), 60);
    assert_eq!(total(&t, "fb"), 3);
    assert_eq!(total(&t, "fc"), 3);
    // fc's minute 485 lands in the sixth minute of the window.
    let fc = t.functions.iter().find(|f| f.name == "fc").unwrap();
    assert!(fc
        .arrivals_ms
        .iter()
        .all(|a| (5 * 60_000..6 * 60_000).contains(a)));
}

#[test]
fn sampling_keeps_active_functions() {
    let opts = IngestOptions {
        window_start_min: 480,
        window_len_min: Some(30),
        max_functions: Some(2),
        seed: 7,
    };
    let t = run(&opts).unwrap();
    assert_eq!(t.functions.len(), 2);
    assert_eq!(t, run(&opts).unwrap());
}

#[test]
fn malformed_row_names_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("durations.csv");
    let text = std::fs::read_to_string(fixture("durations.csv"))
        .unwrap()
        .replace("28,33", "many,33");
    std::fs::write(&bad, text).unwrap();
    let err = ingest(
        &fixture("invocations.csv"),
        &bad,
        &fixture("memory.csv"),
        &IngestOptions::default(),
    )
    .unwrap_err();
    match &err {
        TraceError::Row { line, .. } => assert_eq!(*line, 3),
        other => panic!("expected a row error, got {other}"),
    }
    assert!(err.to_string().contains("line 3"), "{err}");
}

#[test]
fn missing_column_is_schema_error() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("memory.csv");
    std::fs::write(&bad, "HashOwner,Other\nown1,3\n").unwrap();
    let err = ingest(
        &fixture("invocations.csv"),
        &fixture("durations.csv"),
        &bad,
        &IngestOptions::default(),
    )
    .unwrap_err();
    assert!(matches!(err, TraceError::Invalid(_)), "{err}");
}

//! Kept in its own test binary: it sets the process environment.

use tracehound::live::{
    capability_probe, record, LiveError, LiveOutput, LiveSessionConfig, FORCE_NO_LIVE_ENV,
};

#[test]
fn forced_off_probe_denies_before_spawning() {
    std::env::set_var(FORCE_NO_LIVE_ENV, "1");

    let report = capability_probe();
    assert!(!report.tracing_available);
    assert!(report.reasons.iter().any(|r| r.contains(FORCE_NO_LIVE_ENV)));
    assert_eq!(report, capability_probe());

    let dir = tempfile::tempdir().unwrap();
    let marker = dir.path().join("ran");
    let script = format!("touch {}", marker.display());
    let mut cfg = LiveSessionConfig::new(
        vec!["sh".into(), "-c".into(), script.into()],
        LiveOutput::File(dir.path().join("events.jsonl")),
    );
    cfg.enable_lifecycle = true;
    match record(&cfg) {
        Err(LiveError::CapabilityDenied(reasons)) => assert!(!reasons.is_empty()),
        other => panic!("expected CapabilityDenied, got {other:?}"),
    }
    assert!(!marker.exists());
    assert!(!dir.path().join("events.jsonl").exists());
}

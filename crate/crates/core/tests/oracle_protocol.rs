use std::time::{Duration, Instant};

use flowgen_core::fraggraph::MoleculeJson;
use flowgen_core::oracle::{OracleClient, OracleConfig, OracleError};

fn stub(args: &[&str], timeout: Duration) -> Result<OracleClient, OracleError> {
    let mut command = vec![env!("CARGO_BIN_EXE_flowgen-oracle-stub").to_string()];
    command.extend(args.iter().map(|s| s.to_string()));
    OracleClient::spawn(&OracleConfig { command, timeout })
}

fn batch(n: usize) -> Vec<(String, MoleculeJson)> {
    let mol = MoleculeJson { nodes: vec![0], links: vec![], attachments: vec![], terminal: true };
    (0..n).map(|i| (format!("p{i}"), mol.clone())).collect()
}

#[test]
fn fixed_scores_come_back_for_every_request() {
    let mut c = stub(&["fixed", "-9.5", "0.6", "2.5"], Duration::from_secs(10)).unwrap();
    let out = c.score(&batch(5)).unwrap();
    assert_eq!(out.len(), 5);
    assert!(out.iter().all(|t| t.ds == -9.5 && t.qed == 0.6 && t.sa_raw == 2.5));
}

#[test]
fn out_of_order_responses_are_matched_by_seq() {
    let mut c = stub(&["reverse", "4"], Duration::from_secs(10)).unwrap();
    let first = c.score(&batch(4)).unwrap();
    assert_eq!(first.iter().map(|t| t.ds).collect::<Vec<_>>(), vec![0.0, -1.0, -2.0, -3.0]);
    // seqs keep increasing across batches
    let second = c.score(&batch(4)).unwrap();
    assert_eq!(second.iter().map(|t| t.ds).collect::<Vec<_>>(), vec![-4.0, -5.0, -6.0, -7.0]);
}

#[test]
fn process_exit_reports_unanswered_seqs() {
    let mut c = stub(&["die-after", "2"], Duration::from_secs(10)).unwrap();
    let err = c.score(&batch(5)).unwrap_err();
    assert!(matches!(err, OracleError::Exited { .. }), "{err}");
    assert_eq!(err.unanswered(), &[2, 3, 4]);
}

#[test]
fn silent_oracle_times_out_with_unanswered_seqs() {
    let mut c = stub(&["hang-after", "1"], Duration::from_millis(300)).unwrap();
    let t0 = Instant::now();
    let err = c.score(&batch(3)).unwrap_err();
    assert!(t0.elapsed() < Duration::from_secs(5));
    assert!(matches!(err, OracleError::Timeout { .. }), "{err}");
    assert_eq!(err.unanswered(), &[1, 2]);
}

#[test]
fn malformed_response_is_an_error() {
    let mut c = stub(&["garbage"], Duration::from_secs(10)).unwrap();
    let err = c.score(&batch(1)).unwrap_err();
    assert!(matches!(err, OracleError::Malformed { .. }), "{err}");
}

#[test]
fn missing_pong_fails_the_handshake() {
    let err = stub(&["no-pong"], Duration::from_millis(300)).err().unwrap();
    assert!(matches!(err, OracleError::Handshake(_)), "{err}");
}

#[test]
fn missing_executable_fails_to_spawn() {
    let cfg = OracleConfig::new(vec!["/nonexistent/oracle-binary".into()]);
    assert!(matches!(OracleClient::spawn(&cfg), Err(OracleError::Spawn { .. })));
}

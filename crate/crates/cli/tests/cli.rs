use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;

fn scenarios() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn ddcs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ddcs"))
        .args(args)
        .env_remove("DDCS_SERVER")
        .output()
        .expect("spawn ddcs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Runs a bundled scenario with `--state` into a fresh directory.
fn run_with_state(name: &str) -> (tempfile::TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let state = dir.path().join("state");
    let o = ddcs(&["run", p(&scenarios().join(name)), "--state", p(&state)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    (dir, state)
}

#[test]
fn every_bundled_scenario_passes() {
    for e in std::fs::read_dir(scenarios()).unwrap() {
        let path = e.unwrap().path();
        let o = ddcs(&["run", p(&path)]);
        assert_eq!(code(&o), 0, "{}: {}", path.display(), stdout(&o));
        assert!(stdout(&o).starts_with("PASS"));
    }
}

#[test]
fn failed_expectation_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("bad.scn");
    std::fs::write(&f, "enroll 1\nissue 1 10\nexpect balance 1 99\n").unwrap();
    let o = ddcs(&["run", p(&f)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("FAIL step 3"), "{}", stdout(&o));
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let f = dir.path().join("garbled.scn");
    std::fs::write(&f, "enroll 1\nteleport 1\n").unwrap();
    let o = ddcs(&["run", p(&f)]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 2"));
    assert_eq!(code(&ddcs(&["run", "/no/such/file.scn"])), 2);
    assert_eq!(code(&ddcs(&["frobnicate"])), 2);
    assert_eq!(code(&ddcs(&["prove", "/tmp", "--pair", "1:2"])), 2);
    assert_eq!(code(&ddcs(&["export-balances", p(dir.path())])), 2);
}

#[test]
fn log_is_deterministic_per_seed() {
    let dir = tempfile::tempdir().unwrap();
    let f = scenarios().join("lossy.scn");
    let log = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        assert_eq!(code(&ddcs(&["run", p(&f), "--seed", seed, "--log", p(&out)])), 0);
        std::fs::read_to_string(out).unwrap()
    };
    let (a, b, c) = (log("a", "3"), log("b", "3"), log("c", "4"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert!(a.lines().all(|l| l.splitn(4, '|').count() == 4));
}

#[test]
fn export_reproduces_the_balance_table() {
    let (_dir, state) = run_with_state("table4.scn");
    let o = ddcs(&["export-balances", p(&state)]);
    assert_eq!(code(&o), 0);
    let rows: Vec<Vec<String>> = stdout(&o)
        .lines()
        .skip(1)
        .map(|l| l.split('\t').take(6).map(str::to_string).collect())
        .collect();
    let want = [
        ["T1", "1", "1000", "May 17 2PM", "∞", "Initial Balance"],
        ["T2", "2", "2000", "May 17 2PM", "∞", "Initial Balance"],
        ["T3", "1", "1000", "May 17 2PM", "May 18 3 PM", "Updated Record"],
        ["T3", "2", "2000", "May 17 2PM", "May 18 3 PM", "Updated Record"],
        ["T4", "1", "1500", "May 18 3 PM", "∞", "Updated Balance"],
        ["T4", "2", "1500", "May 18 3 PM", "∞", "Updated Balance"],
    ];
    assert_eq!(rows, want.map(|r| r.map(str::to_string).to_vec()).to_vec());
}

#[test]
fn verify_grid_localizes_a_mutated_cell() {
    let (dir, state) = run_with_state("table5.scn");
    let grid = std::fs::read_to_string(state.join("grid.txt")).unwrap();
    let o = ddcs(&["verify-grid", p(&state.join("grid.txt")), p(&state)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));

    let line = grid.lines().find(|l| l.starts_with("row 2 ")).unwrap();
    let cell = line.split_whitespace().nth(4).unwrap();
    let mut flipped = cell.to_string();
    let first = if flipped.starts_with('0') { "1" } else { "0" };
    flipped.replace_range(0..1, first);
    let bent = dir.path().join("bent.txt");
    std::fs::write(&bent, grid.replacen(line, &line.replacen(cell, &flipped, 1), 1)).unwrap();
    let o = ddcs(&["verify-grid", p(&bent), p(&state)]);
    assert_eq!(code(&o), 1);
    assert!(stdout(&o).contains("mismatch at (2, 3)"), "{}", stdout(&o));
}

#[test]
fn prove_and_check() {
    let (dir, state) = run_with_state("table5.scn");
    let keys = state.join("keys.txt");
    let vo = dir.path().join("vo.b64");
    let o = ddcs(&["prove", p(&state), "--pair", "1:3", "--seq", "1", "--out", p(&vo)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let o = ddcs(&["check", p(&vo), "--keys", p(&keys), "--state", p(&state)]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    assert!(stdout(&o).starts_with("PASS"));

    // Raw bytes are accepted too.
    let bytes = B64.decode(std::fs::read_to_string(&vo).unwrap().trim()).unwrap();
    let raw = dir.path().join("vo.bin");
    std::fs::write(&raw, &bytes).unwrap();
    assert_eq!(code(&ddcs(&["check", p(&raw), "--keys", p(&keys)])), 0);

    let mut bent = bytes.clone();
    let mid = bent.len() / 2;
    bent[mid] ^= 0x01;
    std::fs::write(&raw, &bent).unwrap();
    let o = ddcs(&["check", p(&raw), "--keys", p(&keys)]);
    assert_eq!(code(&o), 1, "{}", stdout(&o));

    let vb = dir.path().join("vb.b64");
    let o = ddcs(&["prove", p(&state), "--balances", "--subject", "2", "--from", "2", "--out", p(&vb)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(code(&ddcs(&["check", p(&vb), "--keys", p(&keys), "--state", p(&state)])), 0);
}

#[test]
fn talks_to_a_separate_server() {
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let addr = format!("127.0.0.1:{port}");
    let mut server = Command::new(env!("CARGO_BIN_EXE_ddcs"))
        .args(["serve", "--addr", &addr])
        .stdout(std::process::Stdio::null())
        .stderr(std::process::Stdio::null())
        .spawn()
        .unwrap();
    let url = format!("http://{addr}");
    let table4 = scenarios().join("table4.scn");
    let mut result = None;
    for _ in 0..100 {
        let o = ddcs(&["--server", &url, "run", p(&table4)]);
        if code(&o) == 0 {
            result = Some(o);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(50));
    }
    server.kill().unwrap();
    let _ = server.wait();
    assert!(stdout(&result.expect("server never answered")).starts_with("PASS"));
}

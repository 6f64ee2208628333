use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_chemoflow"))
}

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn small_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("small.toml");
    let text = format!(
        r#"
scenario = "small"
seed = 4
domain = {{ dim = 2, lengths = [1.0, 1.0], cells = [16, 16] }}
forcing.phi = {{ kind = "linear", g = [0.0, 0.1] }}
initial.n = {{ kind = "noise", base = 1.0, amplitude = 0.2 }}
initial.u = {{ kind = "noise", amplitude = 0.1 }}
time.t_end = 1.0
flags.implicit_diffusion = true
output.dir = "{}"
output.checkpoint_every = 0.5
{extra}
"#,
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn oracle_prints_the_logistic_value() {
    let o = bin()
        .args(["oracle", "n0=1", "kappa=1", "mu=2", "t=10"])
        .output()
        .unwrap();
    assert!(o.status.success());
    let text = stdout(&o);
    let n: f64 = text
        .lines()
        .find_map(|l| l.strip_prefix("n = "))
        .unwrap()
        .parse()
        .unwrap();
    let e = 10f64.exp();
    assert!((n - e / (2.0 * e - 1.0)).abs() < 1e-14, "{text}");
}

#[test]
fn oracle_rejects_bad_input() {
    let o = bin().args(["oracle", "n0=-1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    let o = bin().args(["oracle", "rho=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn steady_state_scenario_runs_clean() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin()
        .arg("run")
        .arg(scenario("a1_steady_state.toml"))
        .arg("--out")
        .arg(dir.path())
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let records = dir.path().join("records.csv");
    assert!(records.exists());
    let check = bin()
        .arg("check")
        .arg(&records)
        .arg("--config")
        .arg(scenario("a1_steady_state.toml"))
        .output()
        .unwrap();
    assert_eq!(check.status.code(), Some(0), "{}", stdout(&check));
}

#[test]
fn check_flags_a_manufactured_increase() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(0));
    let records = dir.path().join("out/records.csv");
    let text = std::fs::read_to_string(&records).unwrap();
    let mut lines: Vec<String> = text.lines().map(String::from).collect();
    // raise sup_c (column 5) in the last row well above the first row
    let last = lines.len() - 1;
    let mut cells: Vec<String> = lines[last].split(',').map(String::from).collect();
    cells[4] = "2.0".into();
    lines[last] = cells.join(",");
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let o = bin().arg("check").arg(&bad).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(stdout(&o).contains("sup_c_nonincreasing"), "{}", stdout(&o));
}

#[test]
fn config_errors_exit_with_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "reaction.mu = 0.0");
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("mu > 0"));
    let cfg = small_config(dir.path(), "reaction.typo = 1.0");
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn solver_failures_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(
        dir.path(),
        "solver = { method = \"cg\", rel_tol = 1e-14, max_iter = 1 }",
    );
    let o = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(
        o.status.code(),
        Some(4),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn resume_continues_past_the_stored_end() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "");
    assert_eq!(bin().arg("run").arg(&cfg).status().unwrap().code(), Some(0));
    let full = std::fs::read_to_string(dir.path().join("out/records.csv")).unwrap();
    let ck = dir.path().join("out/checkpoint.chfl");
    let o = bin()
        .arg("resume")
        .arg(&ck)
        .args(["--t-end", "1.5", "--out"])
        .arg(dir.path().join("resumed"))
        .output()
        .unwrap();
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    assert!(stdout(&o).contains("t = 1.5"));
    let resumed = std::fs::read_to_string(dir.path().join("resumed/records.csv")).unwrap();
    assert!(resumed.starts_with(&full));
    assert_eq!(resumed.lines().count(), full.lines().count() + 5);
}

#[test]
fn eps_study_reports_distances() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), "study.eps_list = [0.1, 0.01, 0.001]");
    let o = bin().arg("eps-study").arg(&cfg).output().unwrap();
    let text = stdout(&o);
    assert!(text.starts_with("eps_j,eps_j+1,d_n,d_c,d_u"), "{text}");
    assert_eq!(text.lines().filter(|l| l.starts_with("1e")).count(), 2);
    assert!(matches!(o.status.code(), Some(0) | Some(2)));
}

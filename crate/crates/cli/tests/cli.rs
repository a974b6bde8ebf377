use std::path::PathBuf;
use std::process::{Command, Output};

fn demo() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/demo/config.toml")
}

fn revstress(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_revstress"))
        .args(args)
        .env_remove("REVSTRESS_OUT_DIR")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn validate_demo() {
    let o = revstress(&["validate", "--config", demo().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"n_exposures\": 11"));
}

#[test]
fn design_point_to_out_dir_from_env() {
    let out = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_revstress"))
        .args([
            "design-point",
            "--config",
            demo().to_str().unwrap(),
            "--starts",
            "6",
            "--seed",
            "11",
        ])
        .env("REVSTRESS_OUT_DIR", out.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(out.path().join("design_point.json")).unwrap();
    assert!(text.contains("\"seed\": 11"));
    assert!(text.contains("\"active\": true"));
    assert!(o.stdout.is_empty());
}

#[test]
fn out_flag_beats_env() {
    let env_dir = tempfile::tempdir().unwrap();
    let flag_dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_revstress"))
        .args([
            "validate",
            "--config",
            demo().to_str().unwrap(),
            "--out",
            flag_dir.path().to_str().unwrap(),
        ])
        .env("REVSTRESS_OUT_DIR", env_dir.path())
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(flag_dir.path().join("validation.json").exists());
    assert!(!env_dir.path().join("validation.json").exists());
}

#[test]
fn scenario_list_flags() {
    let o = revstress(&[
        "scenario-list",
        "--config",
        demo().to_str().unwrap(),
        "--eta",
        "0.8",
        "--pool",
        "120",
        "--list",
        "4",
        "--drivers",
        "2",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    assert!(text.contains("\"set\": \"neighbourhood\""));
    assert!(text.contains("\"radius_eta\": 0.8"));
    assert!(text.contains("\"list_size\": 4"));
}

#[test]
fn contour_csv() {
    let o = revstress(&[
        "contour",
        "--config",
        demo().to_str().unwrap(),
        "--resolution",
        "3",
        "--g-range",
        "0,2",
        "--x-range=-1,1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "g,x,m2,ratio,breach,in_S_eta,in_N_eps");
    assert_eq!(lines.len(), 10);
    assert!(lines[2].starts_with("0,0,0,0.125,0,"));
    let o = revstress(&["contour", "--config", demo().to_str().unwrap(), "--resolution", "1"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn mc_check_runs() {
    let o = revstress(&[
        "mc-check",
        "--config",
        demo().to_str().unwrap(),
        "--n-sims",
        "20000",
        "--scenario=-0.5,0.5,1",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).contains("\"n_sims\": 20000"));
}

fn broken_config(dir: &std::path::Path, extra: &str, with_sens: bool) -> PathBuf {
    let data = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/demo");
    for f in ["covariance.csv", "exposures.csv", "sensitivities.csv"] {
        if f != "sensitivities.csv" || with_sens {
            std::fs::copy(data.join(f), dir.join(f)).unwrap();
        }
    }
    let cfg = format!(
        "[reference]\ncovariance = \"covariance.csv\"\n[portfolio]\nexposures = \"exposures.csv\"\nsensitivities = \"sensitivities.csv\"\n[capital]\ncet1_0 = 900.0\nrwa_0 = 7200.0\n{extra}"
    );
    let path = dir.join("run.toml");
    std::fs::write(&path, cfg).unwrap();
    path
}

#[test]
fn missing_file_exit_code_and_message() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = broken_config(dir.path(), "", false);
    let o = revstress(&["design-point", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("sensitivities.csv"), "{err}");

    let o = revstress(&["validate", "--config", "/no/such/config.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("/no/such/config.toml"));
}

#[test]
fn infeasible_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = broken_config(
        dir.path(),
        "[constraints]\ng_max = 0.01\nx_min = [-0.01, -0.01]\nx_max = [0.01, 0.01]\n",
        true,
    );
    let o = revstress(&["design-point", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bad_flag_is_invalid_input() {
    let o = revstress(&["design-point", "--config", demo().to_str().unwrap(), "--starts", "many"]);
    assert_eq!(o.status.code(), Some(2));
}

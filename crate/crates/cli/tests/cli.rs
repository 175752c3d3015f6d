use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn twophase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_twophase"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("run.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

fn read(path: &Path) -> String {
    fs::read_to_string(path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))
}

const SMALL_MMS: &str = "scheme = \"MP\"\ntau = 0.25\nmesh = 4\nt_final = 0.5\n";

#[test]
fn minimal_run_writes_outputs_and_echoes_config() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), SMALL_MMS);
    let out = tmp.path().join("out");
    let res = twophase(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));

    for f in ["config.toml", "errors.csv", "energy.csv", "steps.csv", "final.vtk"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let echo = read(&out.join("config.toml"));
    assert!(echo.contains("scenario = \"custom\""));
    assert!(echo.contains("tol = 0.00001"));
    assert!(echo.contains(&format!("out = \"{}\"", out.display())));
    let errors = read(&out.join("errors.csv"));
    assert_eq!(errors.lines().next(), Some("t,err_pl,err_sa,energy_rel"));
    assert_eq!(errors.lines().count(), 3);
    assert!(read(&out.join("final.vtk")).starts_with("# vtk DataFile Version"));

    // The echoed file reproduces the run byte for byte.
    let again = tmp.path().join("again");
    let res = twophase(&["run", "--config", out.join("config.toml").to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert!(res.status.success());
    for f in ["errors.csv", "energy.csv", "steps.csv"] {
        assert_eq!(read(&out.join(f)), read(&again.join(f)), "{f} differs");
    }
}

#[test]
fn unknown_key_exits_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "tau = 0.1\ntimestep = 0.2\n");
    let res = twophase(&["run", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("timestep"));
}

#[test]
fn invalid_values_and_flags_exit_with_two() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "scheme = \"RK4\"\n");
    let res = twophase(&["run", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("schemes"));

    let res = twophase(&["converge", "--degree", "3"]);
    assert_eq!(res.status.code(), Some(2));
    let res = twophase(&["converge", "--tau", "0.1"]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn unexpected_numerical_failure_exits_with_one() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), &format!("{SMALL_MMS}max_iters = 1\n"));
    let out = tmp.path().join("out");
    let res = twophase(&["run", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(res.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&res.stderr).contains("did not converge"));
    assert!(out.join("config.toml").is_file());
}

#[test]
fn converge_writes_one_table_per_scheme() {
    let tmp = TempDir::new().unwrap();
    let out = tmp.path().join("conv");
    let res = twophase(&["converge", "--mesh", "4", "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    for scheme in ["MP", "BE", "TL1", "TL2"] {
        let table = read(&out.join(format!("converge_{scheme}.csv")));
        let lines: Vec<_> = table.lines().collect();
        assert_eq!(lines[0], "tau,dofs,err_pl,rate_pl,err_sa,rate_sa,status");
        assert_eq!(lines.len(), 3);
        assert!(lines[2].ends_with(",ok"));
    }

    // A single level has nothing to compare against.
    let one = tmp.path().join("one");
    let res = twophase(&["converge", "--mesh", "2", "--scheme", "MP", "--out", one.to_str().unwrap()]);
    assert!(res.status.success());
    let table = read(&one.join("converge_MP.csv"));
    let row: Vec<_> = table.lines().nth(1).unwrap().split(',').collect();
    assert_eq!((row[3], row[5]), ("", ""));
}

#[test]
fn longtime_writes_series_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "scenario = \"longtime\"\nmesh = 4\nt_final = 0.5\ntaus = [0.25]\n");
    let out = tmp.path().join("lt");
    let res = twophase(&["longtime", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read(&out.join("longtime_summary.csv"));
    assert_eq!(summary.lines().count(), 5);
    assert!(out.join("errors_MP_tau0.25.csv").is_file());
    assert!(out.join("energy_MP_tau0.25.csv").is_file());
    assert!(!out.join("energy_BE_tau0.25.csv").exists());
}

#[test]
fn q5spot_dumps_initial_state_and_summary() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(
        tmp.path(),
        "scenario = \"q5spot\"\nschemes = [\"MP\"]\ntaus = [1.0]\nmesh = 20\ndegree = 1\nt_final = 2.0\nsnapshots = [1.0]\n",
    );
    let out = tmp.path().join("q5");
    let res = twophase(&["q5spot", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(res.status.success(), "{}", String::from_utf8_lossy(&res.stderr));
    let summary = read(&out.join("q5spot_summary.csv"));
    assert!(summary.lines().nth(1).unwrap().starts_with("MP,1,completed,2,"));

    let vtk = read(&out.join("saturation_MP_tau1_t0.vtk"));
    let values: Vec<f64> = vtk
        .lines()
        .skip_while(|l| !l.starts_with("LOOKUP_TABLE"))
        .skip(1)
        .map(|l| l.trim().parse().unwrap())
        .collect();
    assert!(!values.is_empty() && values.iter().all(|&v| v == 0.2));
    assert!(out.join("saturation_MP_tau1_t1.vtk").is_file());
    assert!(out.join("diagonal_MP_tau1.csv").is_file());
}

#[test]
fn scenario_mismatch_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let cfg = write_config(tmp.path(), "scenario = \"longtime\"\n");
    let res = twophase(&["q5spot", "--config", &cfg]);
    assert_eq!(res.status.code(), Some(2));
}

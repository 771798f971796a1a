use serde_json::Value;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_robust-dp"));
    c.env_remove("ROBUST_DP_OUT");
    c
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn run(args: &[&str], config: &Path, out: &Path) -> Output {
    bin()
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let p = dir.join("run.toml");
    std::fs::write(&p, body).unwrap();
    p
}

fn read_json(p: PathBuf) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

fn error_report(o: &Output) -> Value {
    let stderr = String::from_utf8_lossy(&o.stderr);
    let line = stderr.lines().last().expect("an error line");
    serde_json::from_str(line).unwrap_or_else(|e| panic!("not json: {line} ({e})"))
}

#[test]
fn oracle_check_on_bundled_instance_matches() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["oracle-check"], &configs().join("oracle.toml"), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(stdout.contains("match enumerated max-min"), "{stdout}");
    assert!(!stdout.contains("MISMATCH"));
    let report = read_json(tmp.path().join("oracle.json"));
    assert_eq!(report["schema_version"], 1);
    assert!(report["checks"].as_array().unwrap().iter().all(|c| c["ok"] == true));
}

#[test]
fn identical_configs_give_identical_bytes() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = configs().join("tracking_exact.toml");
    for dir in [a.path(), b.path()] {
        assert!(run(&["solve-exact"], &cfg, dir).status.success());
        assert!(run(&["evaluate"], &cfg, dir).status.success());
    }
    for f in ["solve.json", "value_table.txt", "evaluate.json"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        let y = std::fs::read(b.path().join(f)).unwrap();
        assert!(x == y, "{f} differs between runs");
    }
}

#[test]
fn zero_radius_matches_reference_singleton() {
    let tmp = tempfile::tempdir().unwrap();
    let ball = write_config(
        tmp.path(),
        "schema_version = 1\nseed = 4\n[problem]\nkind = \"tracking\"\nradius = 0.0\n",
    );
    assert!(run(&["solve-exact"], &ball, &tmp.path().join("ball")).status.success());
    let single = write_config(
        tmp.path(),
        "schema_version = 1\nseed = 4\n[problem]\nkind = \"tracking\"\nradius = 0.3\n[solver]\nreference_only = true\n",
    );
    assert!(run(&["solve-exact"], &single, &tmp.path().join("single")).status.success());
    for f in ["solve.json", "value_table.txt"] {
        let x = std::fs::read(tmp.path().join("ball").join(f)).unwrap();
        let y = std::fs::read(tmp.path().join("single").join(f)).unwrap();
        assert!(x == y, "{f} differs");
    }
}

#[test]
fn bounds_hold_on_bundled_instance() {
    let tmp = tempfile::tempdir().unwrap();
    let o = run(&["bounds"], &configs().join("bounds.toml"), tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = read_json(tmp.path().join("bounds.json"));
    assert_eq!(r["stability_holds"], true);
    assert_eq!(r["robust_gap_holds"], true);
    assert_eq!(r["ball"], "wasserstein");
}

#[test]
fn parametric_bounds_hold() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "schema_version = 1\nseed = 1\n[problem]\nkind = \"parametric-audit\"\ninstance = 904\n",
    );
    let o = run(&["bounds"], &cfg, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(read_json(tmp.path().join("bounds.json"))["ball"], "parametric");
}

#[test]
fn errors_are_reported_as_json_with_failure_status() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(
        tmp.path(),
        "schema_version = 1\nseed = 1\n[problem]\nkind = \"tracking\"\n[solver]\nmethod = \"exact\"\ncandidate = 3\n",
    );
    let o = run(&["solve-exact"], &cfg, tmp.path());
    assert!(!o.status.success());
    let e = error_report(&o);
    assert_eq!(e["error"]["kind"], "config");
    assert!(e["error"]["message"].as_str().unwrap().contains("candidate"));

    let cfg = write_config(tmp.path(), "schema_version = 1\nseed = 1\n[problem]\nkind = \"tracking\"\n");
    let o = run(&["bounds"], &cfg, tmp.path());
    assert!(!o.status.success());
    assert_eq!(error_report(&o)["error"]["kind"], "config");

    let cfg = write_config(
        tmp.path(),
        "schema_version = 1\nseed = 1\n[problem]\nkind = \"random-finite\"\ninstance = 1\n[solver]\nmax_states = 2\n",
    );
    let o = run(&["solve-exact"], &cfg, tmp.path());
    assert!(!o.status.success());
    assert_eq!(error_report(&o)["error"]["kind"], "size_guard");
}

#[test]
fn missing_config_is_an_error() {
    let o = bin().arg("solve-exact").output().unwrap();
    assert!(!o.status.success());
    assert_eq!(error_report(&o)["error"]["kind"], "config");
}

#[test]
fn environment_sets_the_output_directory_and_flags_win() {
    let tmp = tempfile::tempdir().unwrap();
    let env_dir = tmp.path().join("from_env");
    let o = bin()
        .args(["oracle-check", "--config"])
        .arg(configs().join("oracle.toml"))
        .env("ROBUST_DP_OUT", &env_dir)
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(env_dir.join("oracle.json").is_file());

    let flag_dir = tmp.path().join("from_flag");
    let o = bin()
        .args(["oracle-check", "--config"])
        .arg(configs().join("oracle.toml"))
        .arg("--out")
        .arg(&flag_dir)
        .env("ROBUST_DP_OUT", tmp.path().join("unused"))
        .output()
        .unwrap();
    assert!(o.status.success());
    assert!(flag_dir.join("oracle.json").is_file());
    assert!(!tmp.path().join("unused").exists());
}

#[test]
fn seed_flag_replaces_the_config_seed() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["solve-exact", "--seed", "99", "--config"])
        .arg(configs().join("tracking_exact.toml"))
        .arg("--out")
        .arg(tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success());
    assert_eq!(read_json(tmp.path().join("solve.json"))["seed"], 99);
}

#[test]
fn show_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let o = bin()
        .args(["show-config", "--config"])
        .arg(configs().join("hedge.toml"))
        .output()
        .unwrap();
    assert!(o.status.success());
    let once = String::from_utf8(o.stdout).unwrap();
    let cfg = write_config(tmp.path(), &once);
    let o = bin().args(["show-config", "--config"]).arg(&cfg).output().unwrap();
    assert_eq!(once, String::from_utf8(o.stdout).unwrap());
}

#[test]
fn train_then_evaluate_the_saved_networks() {
    let tmp = tempfile::tempdir().unwrap();
    let body = "schema_version = 1\nseed = 8\n[problem]\nkind = \"tracking\"\nradius = 0.1\n\
                [solver]\nmethod = \"algorithm2\"\n\
                [train]\nhidden = [8]\niter_a = 20\niter_psi = 20\nbatch = 16\nz_points = 10\neval_samples = 64\n";
    let cfg = write_config(tmp.path(), body);
    let o = run(&["train"], &cfg, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let t = read_json(tmp.path().join("train.json"));
    assert_eq!(t["lambdas"].as_array().unwrap().len(), 2);
    let log = std::fs::read_to_string(tmp.path().join("train_log.csv")).unwrap();
    assert!(log.lines().count() > 1);

    let eval = write_config(
        tmp.path(),
        &format!(
            "{body}[evaluate]\nmodel = \"{}\"\nmembers = 3\npaths = 50\n",
            tmp.path().join("model.txt").display()
        ),
    );
    let o = run(&["evaluate"], &eval, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let e = read_json(tmp.path().join("evaluate.json"));
    assert_eq!(e["policy"], "network");
    let members = e["per_member"].as_array().unwrap();
    assert_eq!(members.len(), 3);
    let min = members.iter().map(|v| v.as_f64().unwrap()).fold(f64::INFINITY, f64::min);
    assert_eq!(e["robust_value"].as_f64().unwrap(), min);
}

#[test]
fn hedge_backtest_on_bundled_csv() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = configs().join("data/sample_returns.csv");
    let body = format!(
        "schema_version = 1\nseed = 3\n[problem]\nkind = \"hedging\"\n\
         [data]\ncsv = \"{}\"\nsplit_date = \"2021-06-07\"\nbound = 0.08\n\
         [hedging]\nhorizon = 10\nradius = 0.001\n\
         [train]\nhidden = [8]\niter_a = 10\niter_psi = 10\nbatch = 16\nn_mc = 8\nn_measures = 1\nz_points = 8\neval_samples = 32\n",
        csv.display()
    );
    let cfg = write_config(tmp.path(), &body);
    let o = run(&["hedge-backtest"], &cfg, tmp.path());
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let s = read_json(tmp.path().join("summary.json"));
    assert_eq!(s["n_train"], 110);
    assert_eq!(s["n_test"], 50);
    let summaries = s["report"]["summaries"].as_array().unwrap();
    let names: Vec<&str> = summaries.iter().map(|x| x["policy"].as_str().unwrap()).collect();
    assert_eq!(names, ["nonrobust", "robust", "bs-delta"]);
    // 50 test days, 10-day hedges, two columns hedged separately.
    for x in summaries {
        assert_eq!(x["loss"]["count"], 80);
    }
    let rows = std::fs::read_to_string(tmp.path().join("outcomes.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 3 * 80);
}

#[test]
fn returns_beyond_the_declared_bound_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let csv = tmp.path().join("r.csv");
    std::fs::write(&csv, "date,r\n2020-01-01,0.01\n2020-01-02,0.2\n2020-01-03,0.0\n").unwrap();
    let body = format!(
        "schema_version = 1\nseed = 3\n[problem]\nkind = \"hedging\"\n\
         [data]\ncsv = \"{}\"\nsplit_date = \"2020-01-03\"\nbound = 0.08\n",
        csv.display()
    );
    let cfg = write_config(tmp.path(), &body);
    let o = run(&["hedge-backtest"], &cfg, tmp.path());
    assert!(!o.status.success());
    let e = error_report(&o);
    assert_eq!(e["error"]["kind"], "off_domain");
    assert!(e["error"]["message"].as_str().unwrap().contains("line 3"));
}

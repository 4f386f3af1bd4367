use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn lyosim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lyosim"))
        .args(args)
        .env_remove("LYOSIM_OUT_DIR")
        .output()
        .expect("binary runs")
}

fn shipped(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("scenarios")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn summary(dir: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(dir.join("summary.json")).unwrap()).unwrap()
}

fn write_scenario(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn out_arg(dir: &Path, sub: &str) -> String {
    dir.join(sub).to_string_lossy().into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn default_cycle_writes_every_panel() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path(), "run");
    let o = lyosim(&["cycle", "--scenario", &shipped("defaults.toml"), "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let dir = PathBuf::from(&out);
    let cycle = fs::read_to_string(dir.join("cycle.csv")).unwrap();
    assert_eq!(
        cycle.lines().next().unwrap(),
        "t_s,stage,T_avg_K,m_i_kg,c_w_avg_kg_kg,p_Pa,T_source_K"
    );
    for stage in ["preconditioning", "visf", "solidification", "primary", "secondary"] {
        assert!(cycle.contains(&format!(",{stage},")), "missing {stage}");
    }
    let primary = fs::read_to_string(dir.join("primary.csv")).unwrap();
    assert!(primary.starts_with("t_s,T_avg_K,T_bottom_K,T_top_K,S_m,m_i_kg,flux_kg_m2s,p_w_c_Pa,T_shelf_K\n"));
    let s = summary(&dir);
    let times = &s["results"]["times_s"];
    let order = ["t_f1", "t_f2", "t_f3", "t_f4", "t_f5", "t_d1", "t_d2"].map(|k| times[k].as_f64().unwrap());
    assert!(order.windows(2).all(|w| w[0] <= w[1]));
    let final_c = s["results"]["final_average_concentration_kg_kg"].as_f64().unwrap();
    assert!(final_c <= 0.01 + 1e-12);
}

#[test]
fn effective_parameters_reproduce_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let first = out_arg(tmp.path(), "a");
    let o = lyosim(&["primary", "--scenario", &shipped("case4a.toml"), "--out", &first]);
    assert!(o.status.success(), "{}", stderr(&o));
    let effective = Path::new(&first).join("effective_params.toml");
    let text = fs::read_to_string(&effective).unwrap();
    assert!(text.contains("rho_dried_kg_m3 = 252.0"));
    assert!(text.contains("cp_water_j_kgk = 4187.0"));
    let second = out_arg(tmp.path(), "b");
    let o = lyosim(&["primary", "--scenario", effective.to_str().unwrap(), "--out", &second]);
    assert!(o.status.success(), "{}", stderr(&o));
    let a = fs::read(Path::new(&first).join("primary.csv")).unwrap();
    let b = fs::read(Path::new(&second).join("primary.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn seeded_stochastic_runs_are_byte_identical() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(
        tmp.path(),
        r#"
stages = ["freezing"]
[params.freezing]
visf = false
nucleation = { mode = "stochastic", rate_constant = 1e-5, exponent = 12.0, seed = 1 }
"#,
    );
    let run = |sub: &str, seed: &str| {
        let out = out_arg(tmp.path(), sub);
        let o = lyosim(&["freeze", "--scenario", &scenario, "--out", &out, "--seed", seed]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(Path::new(&out).join("freezing.csv")).unwrap()
    };
    let (a, b, c) = (run("a", "7"), run("b", "7"), run("c", "8"));
    assert_eq!(a, b);
    assert_ne!(a, c);
}

#[test]
fn analyze_reports_screening_numbers() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path(), "an");
    let o = lyosim(&["analyze", "--scenario", &shipped("analyze.toml"), "--out", &out]);
    assert!(o.status.success(), "{}", stderr(&o));
    let r = &summary(Path::new(&out))["results"];
    let bi: Vec<f64> = r["biot_cases"]
        .as_array()
        .unwrap()
        .iter()
        .map(|c| c["biot"].as_f64().unwrap())
        .collect();
    assert_eq!(format!("{:.3}", bi[0]), "0.043");
    assert_eq!(format!("{:.2}", bi[1]), "0.35");
    assert_eq!(format!("{:.1}", r["desorption_time_h"].as_f64().unwrap()), "3.6");
    assert_eq!(r["limiting"], "desorption");
    let theta = fs::read_to_string(Path::new(&out).join("theta.csv")).unwrap();
    assert_eq!(theta.lines().count(), 202);
}

#[test]
fn empty_stage_selection_is_a_schema_error() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(tmp.path(), "stages = []\n");
    let o = lyosim(&["cycle", "--scenario", &scenario, "--out", &out_arg(tmp.path(), "x")]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stage selection is empty"));
}

#[test]
fn unknown_parameters_are_schema_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(tmp.path(), "[params.primary]\nh_b = 16.0\n");
    let o = lyosim(&["primary", "--scenario", &scenario, "--out", &out_arg(tmp.path(), "x")]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulation_failures_exit_3_with_the_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let scenario = write_scenario(tmp.path(), "[params.secondary]\nhorizon_s = 60.0\n");
    let o = lyosim(&["cycle", "--scenario", &scenario, "--out", &out_arg(tmp.path(), "x")]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("stage `secondary`"), "{}", stderr(&o));
}

/// Writes the simulated column shifted by `offset` as a reference file.
fn shifted_reference(sim_csv: &Path, column: &str, offset: f64, dest: &Path) {
    let mut r = csv::Reader::from_path(sim_csv).unwrap();
    let h = r.headers().unwrap().clone();
    let it = h.iter().position(|x| x == "t_s").unwrap();
    let iv = h.iter().position(|x| x == column).unwrap();
    let mut w = csv::Writer::from_path(dest).unwrap();
    w.write_record(["time_s", column]).unwrap();
    for rec in r.records() {
        let rec = rec.unwrap();
        let v: f64 = rec[iv].parse().unwrap();
        w.write_record([rec[it].to_string(), (v + offset).to_string()]).unwrap();
    }
    w.flush().unwrap();
}

#[test]
fn reference_thresholds_drive_exit_4() {
    let tmp = tempfile::tempdir().unwrap();
    let base = out_arg(tmp.path(), "base");
    let o = lyosim(&["primary", "--scenario", &shipped("case2b.toml"), "--out", &base]);
    assert!(o.status.success(), "{}", stderr(&o));
    let reference = tmp.path().join("ref.csv");
    shifted_reference(&Path::new(&base).join("primary.csv"), "T_bottom_K", 0.25, &reference);
    let scenario = fs::read_to_string(shipped("case2b.toml")).unwrap()
        + "\n[[reference]]\ntable = \"primary\"\nobservable = \"T_bottom_K\"\nfile = \"ref.csv\"\nmax_abs = 0.1\n";
    let scenario = write_scenario(tmp.path(), &scenario);

    let loose = out_arg(tmp.path(), "loose");
    let o = lyosim(&["primary", "--scenario", &scenario, "--out", &loose]);
    assert!(o.status.success(), "{}", stderr(&o));
    let refs = &summary(Path::new(&loose))["references"][0];
    assert!((refs["metrics"]["max_abs"].as_f64().unwrap() - 0.25).abs() < 1e-9);
    assert_eq!(refs["exceeded"][0], "max_abs");

    let o = lyosim(&[
        "primary",
        "--scenario",
        &scenario,
        "--out",
        &out_arg(tmp.path(), "strict"),
        "--assert",
    ]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn compare_subcommand_metrics() {
    let tmp = tempfile::tempdir().unwrap();
    let sim = tmp.path().join("sim.csv");
    fs::write(&sim, "t_s,stage,T_avg_K\n0,a,230\n60,a,232.5\n120,a,236\n").unwrap();
    let same = tmp.path().join("same.csv");
    fs::write(&same, "time_s,T_avg_K\n0,230\n60,232.5\n120,236\n").unwrap();
    let offset = tmp.path().join("offset.csv");
    fs::write(&offset, "time_s,T_avg_K\n0,231\n60,233.5\n120,237\n").unwrap();
    let report = |reference: &Path, extra: &[&str]| {
        let mut args = vec![
            "compare",
            "--simulated",
            sim.to_str().unwrap(),
            "--reference",
            reference.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        lyosim(&args)
    };
    let o = report(&same, &[]);
    assert!(o.status.success());
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["rmse"], 0.0);
    assert_eq!(v["metrics"]["max_abs"], 0.0);
    assert_eq!(v["metrics"]["terminal_time_delta_s"], 0.0);

    let o = report(&offset, &["--max-abs", "1.0", "--assert"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v["metrics"]["max_abs"], 1.0);
    let o = report(&offset, &["--max-abs", "0.99", "--assert"]);
    assert_eq!(o.status.code(), Some(4));

    let late = tmp.path().join("late.csv");
    fs::write(&late, "time_s,T_avg_K\n500,230\n600,231\n").unwrap();
    let o = report(&late, &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("do not overlap"));
}

#[test]
fn sweep_runs_each_value() {
    let tmp = tempfile::tempdir().unwrap();
    let out = out_arg(tmp.path(), "sw");
    let o = lyosim(&[
        "primary",
        "--scenario",
        &shipped("case2b.toml"),
        "--out",
        &out,
        "--sweep",
        "primary.h_bottom_w_m2k=10:30:3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let mut r = csv::Reader::from_path(Path::new(&out).join("sweep.csv")).unwrap();
    let h = r.headers().unwrap().clone();
    let col = h.iter().position(|x| x == "drying_time_s").unwrap();
    let times: Vec<f64> = r.records().map(|x| x.unwrap()[col].parse().unwrap()).collect();
    assert_eq!(times.len(), 3);
    assert!(times[0] > times[1] && times[1] > times[2], "{times:?}");
    for i in 0..3 {
        assert!(Path::new(&out).join(format!("sweep_{i:03}/primary.csv")).exists());
    }
    let o = lyosim(&["primary", "--out", &out, "--sweep", "primary.bogus=1:2:2"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn output_directory_falls_back_to_the_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_lyosim"))
        .args(["analyze", "--format", "json"])
        .env("LYOSIM_OUT_DIR", tmp.path())
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    let theta: Value = serde_json::from_str(&fs::read_to_string(tmp.path().join("theta.json")).unwrap()).unwrap();
    assert_eq!(theta["columns"][0], "Fo");
    assert!(tmp.path().join("summary.json").exists());
}

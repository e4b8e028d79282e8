use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = "\
scene.grid_size = 16
model.width = 4
model.modes = 2
model.depth_levels = 2
train.epochs = 2
train.batch_size = 2
run.n_train = 2
run.n_val = 1
run.shock_seeds = 1
run.ablation_seeds = 1
run.ensemble_size = 2
run.gradcheck_samples = 50
";

fn hydropinn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_hydropinn"))
        .args(args)
        .env("HYDROPINN_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn config(dir: &Path, extra: &str) -> PathBuf {
    let p = dir.join(format!("run{}.cfg", fs::read_dir(dir).unwrap().count()));
    fs::write(&p, format!("{TINY}{extra}")).unwrap();
    p
}

fn run(command: &str, cfg: &Path, out: &Path) -> (Output, PathBuf) {
    let o = hydropinn(&[command, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap(), "--quiet"]);
    let dir = PathBuf::from(String::from_utf8_lossy(&o.stdout).trim());
    (o, dir)
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_1() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(hydropinn(&[]).status.code(), Some(1));
    assert_eq!(hydropinn(&["frobnicate", "--config", "x.cfg"]).status.code(), Some(1));

    let o = hydropinn(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("not found"), "{}", stderr(&o));

    let bad = tmp.path().join("bad.cfg");
    fs::write(&bad, "# header\nphysics.e_warm = banana\n").unwrap();
    let o = hydropinn(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));

    fs::write(&bad, "physics.e_wram = 5\n").unwrap();
    let o = hydropinn(&["train", "--config", bad.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("unknown key"), "{}", stderr(&o));

    assert_eq!(hydropinn(&["--help"]).status.code(), Some(0));
}

#[test]
fn synth_writes_scene_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "run.synth_scenes = 3\n");
    let (o, dir) = run("synth", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let scenes: Vec<_> = fs::read_dir(&dir)
        .unwrap()
        .flatten()
        .filter(|e| e.path().is_dir())
        .collect();
    assert_eq!(scenes.len(), 3);
    for s in scenes {
        let names: Vec<String> = fs::read_dir(s.path())
            .unwrap()
            .flatten()
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names.iter().filter(|n| n.ends_with(".f32f")).count(), 6);
        assert!(names.contains(&"manifest.txt".to_string()));
    }
    let echo = fs::read_to_string(dir.join("config.cfg")).unwrap();
    assert!(echo.contains("run.experiment = synth"));
}

#[test]
fn train_is_reproducible_and_isolated() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let out = tmp.path().join("out");
    let (a, da) = run("train", &cfg, &out);
    let (b, db) = run("train", &cfg, &out);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert_eq!(b.status.code(), Some(0), "{}", stderr(&b));
    assert_ne!(da, db);
    for f in ["history.csv", "model.hpnn", "metrics.csv"] {
        assert_eq!(fs::read(da.join(f)).unwrap(), fs::read(db.join(f)).unwrap(), "{f}");
    }

    let o = hydropinn(&[
        "train",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--seed",
        "9",
        "--quiet",
    ]);
    assert_eq!(o.status.code(), Some(0));
    let dc = PathBuf::from(String::from_utf8_lossy(&o.stdout).trim());
    assert_ne!(fs::read(da.join("model.hpnn")).unwrap(), fs::read(dc.join("model.hpnn")).unwrap());
    assert!(fs::read_to_string(dc.join("config.cfg")).unwrap().contains("model.rng_seed = 9"));
}

#[test]
fn concurrent_runs_get_distinct_directories() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "run.synth_scenes = 1\n");
    let out = tmp.path().join("out");
    let handles: Vec<_> = (0..3)
        .map(|_| {
            let (cfg, out) = (cfg.clone(), out.clone());
            std::thread::spawn(move || run("synth", &cfg, &out).1)
        })
        .collect();
    let mut dirs: Vec<PathBuf> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    dirs.sort();
    dirs.dedup();
    assert_eq!(dirs.len(), 3);
}

#[test]
fn shock_without_physics_reports_no_shock() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "physics.lambda_max = 0\nphysics.e_warm = 1\nphysics.e_ramp = 1\n");
    let (o, dir) = run("shock", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.join("verdict.txt")).unwrap().trim(), "no shock possible");
    let b = fs::read_to_string(dir.join("baseline_seed0.csv")).unwrap();
    let w = fs::read_to_string(dir.join("warm_seed0.csv")).unwrap();
    assert_eq!(b, w);
    let rows = fs::read_to_string(dir.join("shock_summary.csv")).unwrap();
    assert_eq!(rows.lines().count(), 2);
}

#[test]
fn ablation_single_seed_has_zero_spread() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "run.variants = stabilized_mse,baseline_mse,stabilized_mse\n");
    let (o, dir) = run("ablation", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = fs::read_to_string(dir.join("ablation.csv")).unwrap();
    let rows: Vec<Vec<&str>> = table.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        assert_eq!(r[2], "0", "stdev column");
    }
    assert_eq!(rows[0], rows[2]);
    assert_eq!(rows[1][4], "0");
}

#[test]
fn ensemble_then_calibrate_then_report() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("out");
    let cfg = config(tmp.path(), "");

    let (o, _) = run("report", &cfg, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no runs found"), "{}", stderr(&o));

    let (o, _) = run("calibrate", &cfg, &out);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let missing = config(tmp.path(), &format!("run.source_dir = {}\n", tmp.path().join("nowhere").display()));
    let (o, _) = run("calibrate", &missing, &out);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("missing prerequisite artifact"), "{}", stderr(&o));

    let (o, ens) = run("ensemble", &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    for f in ["members/member_00.hpnn", "members/member_01.hpnn", "decomposition.csv", "calibration_bins.csv"] {
        assert!(ens.join(f).is_file(), "{f}");
    }
    assert!(ens.join("decomposition/scene_0000/epistemic.f32f").is_file());

    let src = config(tmp.path(), &format!("run.source_dir = {}\n", ens.display()));
    let (o, cal) = run("calibrate", &src, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(
        fs::read_to_string(cal.join("calibration_bins.csv")).unwrap(),
        fs::read_to_string(ens.join("calibration_bins.csv")).unwrap()
    );
    assert!(cal.join("oracle_fit.csv").is_file());

    let (o, rep) = run("report", &cfg, &out);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let scatter = fs::read_to_string(rep.join("fig8_calibration_scatter.csv")).unwrap();
    assert!(scatter.lines().any(|l| l.contains(",oracle,")));
    assert!(scatter.lines().any(|l| l.contains(",model,")));
    let runs = fs::read_to_string(rep.join("runs.csv")).unwrap();
    assert_eq!(runs.lines().count(), 3);
}

#[test]
fn gradcheck_exit_status_reflects_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = config(tmp.path(), "");
    let (o, dir) = run("gradcheck", &cfg, &tmp.path().join("out"));
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(dir.join("verdict.txt")).unwrap().trim(), "pass");
    let rows = fs::read_to_string(dir.join("gradcheck.csv")).unwrap();
    assert!(rows.lines().count() > 150);
}

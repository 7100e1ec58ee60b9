use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::time::Instant;

use serde_json::{json, Value};
use tempfile::TempDir;

fn flexdti(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_flexdti")).args(args).output().expect("spawn flexdti")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn small_config(sigma: f64) -> Value {
    json!({
        "seed": 3,
        "phantom": { "nx": 32, "ny": 32, "layout": "mixed", "seed": 11 },
        "splits": { "train": 4, "val": 1, "test": 2 },
        "noise": { "s0": 1.0, "sigma": sigma },
        "net": { "n_max": 8, "width": 4, "psi_hidden": 16, "epochs": 2, "batch": 2 },
        "eval": { "dirs": [6, 8], "draws": 1 },
        "output_dir": "out"
    })
}

fn write_config(dir: &Path, cfg: &Value) -> PathBuf {
    let p = dir.join("run.json");
    fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn scheme_prints_summary_and_is_deterministic() {
    let t = TempDir::new().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let o = flexdti(&["scheme", "--n", "6", "--seed", "4", "--out", a.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    assert!(text.contains("condition_number") && text.contains("min_line_angle_deg"), "{text}");
    assert_eq!(code(&flexdti(&["scheme", "--n", "6", "--seed", "4", "--out", b.to_str().unwrap()])), 0);
    assert_eq!(read_tree(&a), read_tree(&b));
    let bvals = fs::read_to_string(a.join("bvals")).unwrap();
    assert_eq!(bvals.split_whitespace().count(), 7);
}

#[test]
fn scheme_rejects_bad_input() {
    let t = TempDir::new().unwrap();
    let out = t.path().to_str().unwrap();
    let o = flexdti(&["scheme", "--n", "3", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains('3'), "{}", stderr(&o));
    let o = flexdti(&["scheme", "--n", "6", "--b", "1000,2000", "--out", out]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("multi-shell"));
    assert_eq!(code(&flexdti(&["scheme", "--out", out])), 2);
}

#[test]
fn phantom_writes_declared_counts_and_reruns_identically() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &small_config(0.05));
    let o = flexdti(&["phantom", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stderr(&o).contains("4 train, 1 val, 2 test"), "{}", stderr(&o));
    let out = t.path().join("out");
    let first = read_tree(&out);
    assert!(!out.join(".flexdti.lock").exists());
    assert_eq!(code(&flexdti(&["phantom", "--config", cfg.to_str().unwrap()])), 0);
    assert_eq!(first, read_tree(&out));
    let o = flexdti(&["phantom", "--config", cfg.to_str().unwrap(), "--seed", "4"]);
    assert_eq!(code(&o), 0);
    assert_ne!(first, read_tree(&out));
}

#[test]
fn unknown_config_key_is_named() {
    let t = TempDir::new().unwrap();
    let mut cfg = small_config(0.05);
    cfg["net"]["widht"] = json!(8);
    let p = write_config(t.path(), &cfg);
    let o = flexdti(&["phantom", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("widht"), "{}", stderr(&o));
}

#[test]
fn busy_output_directory_is_refused() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &small_config(0.05));
    fs::create_dir_all(t.path().join("out")).unwrap();
    fs::write(t.path().join("out/.flexdti.lock"), "").unwrap();
    let o = flexdti(&["phantom", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("in use"));
}

#[test]
fn fit_recovers_noiseless_maps_and_rejects_short_subsets() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &small_config(0.0));
    assert_eq!(code(&flexdti(&["phantom", "--config", cfg.to_str().unwrap()])), 0);
    let data = t.path().join("out");
    let p = |f: &str| data.join(f).to_str().unwrap().to_owned();
    let fit = t.path().join("fit");
    let base = ["fit", "--volume", &p("test.dwiv"), "--bvals", &p("bvals"), "--bvecs", &p("bvecs")];
    let truth = p("test_truth.dwiv");
    let mut args = base.to_vec();
    args.extend(["--subset", "50,53,57,61,70,88", "--truth", &truth]);
    args.extend(["--out", fit.to_str().unwrap()]);
    let o = flexdti(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = String::from_utf8(o.stdout).unwrap();
    let fa: f64 = text.lines().find_map(|l| l.strip_prefix("fa nrmse ")).expect("fa line").parse().unwrap();
    assert!(fa < 1e-6, "FA NRMSE {fa}");
    for f in ["fa_lls.pgm", "md_lls.pgm", "ad_lls.pgm", "rd_lls.pgm", "dec_lls.ppm", "fit.dwiv", "metrics.csv"] {
        assert!(fit.join(f).exists(), "{f} missing");
    }
    let fit5 = t.path().join("fit5");
    let mut args = base.to_vec();
    args.extend(["--subset", "0,1,2,3,4", "--out", fit5.to_str().unwrap()]);
    assert_eq!(code(&flexdti(&args)), 2);
}

#[test]
fn train_and_eval_end_to_end_with_stable_outputs() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &small_config(0.05));
    let c = cfg.to_str().unwrap();
    let run = |out: &str| {
        let o = flexdti(&["phantom", "--config", c, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let o = flexdti(&["train", "--config", c, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stderr(&o).contains("epoch 2/2"), "{}", stderr(&o));
        let o = flexdti(&["eval", "--config", c, "--out", out, "--dirs", "6,8", "--subset-seed", "5"]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        read_tree(Path::new(out))
    };
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    let ta = run(a.to_str().unwrap());
    assert_eq!(ta, run(b.to_str().unwrap()));

    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4 * 2 * 2);
    for map in ["fa", "md", "ad", "rd"] {
        for method in ["flexdti", "lls"] {
            for d in [6, 8] {
                let key = format!("{map},{method},{d},");
                assert_eq!(rows.iter().filter(|r| r.starts_with(&key)).count(), 1, "{key}");
            }
        }
    }
    assert!(a.join("maps/fa_flexdti_d6.pgm").exists());
    assert!(a.join("training.csv").exists());

    let a = a.to_str().unwrap();
    for dirs in ["5", "9", "6,21"] {
        let o = flexdti(&["eval", "--config", c, "--out", a, "--dirs", dirs]);
        assert_eq!(code(&o), 2, "dirs {dirs}: {}", stderr(&o));
    }
}

#[test]
fn train_rejects_resume_and_reports_divergence() {
    let t = TempDir::new().unwrap();
    let mut cfg = small_config(0.05);
    let p = write_config(t.path(), &cfg);
    let c = p.to_str().unwrap();
    assert_eq!(code(&flexdti(&["phantom", "--config", c])), 0);
    let o = flexdti(&["train", "--config", c, "--resume", "x.fdti"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("resum"));

    cfg["net"]["lr"] = json!(1e30);
    let p = write_config(t.path(), &cfg);
    let o = flexdti(&["train", "--config", p.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("non-finite"), "{}", stderr(&o));
}

#[test]
fn train_without_dataset_is_a_usage_error() {
    let t = TempDir::new().unwrap();
    let cfg = write_config(t.path(), &small_config(0.05));
    let o = flexdti(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("phantom step"), "{}", stderr(&o));
}

#[test]
fn smoke_config_trains_within_envelope() {
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let t = TempDir::new().unwrap();
    let out = t.path().join("smoke");
    let (c, o) = (cfg.to_str().unwrap(), out.to_str().unwrap());
    let t0 = Instant::now();
    assert_eq!(code(&flexdti(&["phantom", "--config", c, "--out", o])), 0);
    let r = flexdti(&["train", "--config", c, "--out", o]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    let r = flexdti(&["eval", "--config", c, "--out", o]);
    assert_eq!(code(&r), 0, "{}", stderr(&r));
    assert!(t0.elapsed().as_secs() < 300, "{:?}", t0.elapsed());
    let training = fs::read_to_string(out.join("training.csv")).unwrap();
    assert_eq!(training.lines().count(), 1 + 5);
}

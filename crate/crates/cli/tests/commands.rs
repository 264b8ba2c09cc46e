use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};
use tempfile::TempDir;

fn blp(args: &[&str], seed_env: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_blp"));
    cmd.args(args).env_remove("BLP_SEED");
    if let Some(s) = seed_env {
        cmd.env("BLP_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(
        o.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        o.status.code(),
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, serde_json::to_vec_pretty(cfg).unwrap()).unwrap();
    p
}

fn small_config(n: usize) -> Value {
    json!({
        "seed": 3,
        "synth": {"n_batteries": n},
        "model": {"family": "cpmlp", "d1": 4, "d2": 8, "intra_layers": 1,
                  "inter": {"kind": "mlp_stack", "layers": 1, "hidden": 8}},
        "optim": {"epochs": 2, "batch_size": 4}
    })
}

/// Relative path -> bytes for every file under `dir`.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn report(dir: &Path) -> Value {
    serde_json::from_slice(&fs::read(dir.join("report.json")).unwrap()).unwrap()
}

/// Writes a fleet of `n` batteries under `root/fleet` and returns the config path
/// pointing at its manifest.
fn fleet(root: &Path, n: usize) -> PathBuf {
    let mut cfg = small_config(n);
    let c = write_config(root, "synth.json", &cfg);
    ok(&blp(&["synth", "-c", c.to_str().unwrap(), "-o", root.join("fleet").to_str().unwrap()], None));
    cfg["data"] = json!({"manifest": "fleet/manifest.json"});
    write_config(root, "run.json", &cfg)
}

#[test]
fn synth_writes_batteries_and_labels() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(6));
    let out = tmp.path().join("fleet");
    let stdout = ok(&blp(&["synth", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap()], None));
    assert!(stdout.contains("6 batteries"), "{stdout}");
    assert!(stdout.contains("quantiles"), "{stdout}");
    let files = tree(&out);
    let batteries = files.keys().filter(|p| p.starts_with("batteries") || p.extension().is_some_and(|e| e == "json"));
    assert!(batteries.count() >= 6);
    let labels = String::from_utf8(files[Path::new("labels.csv")].clone()).unwrap();
    assert_eq!(labels.lines().count(), 7);
    assert_eq!(report(&out)["command"], "synth");
}

#[test]
fn synth_is_deterministic_and_seed_sensitive() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(4));
    let c = c.to_str().unwrap();
    let dirs: Vec<PathBuf> = (0..3).map(|k| tmp.path().join(format!("f{k}"))).collect();
    ok(&blp(&["synth", "-c", c, "-o", dirs[0].to_str().unwrap()], None));
    ok(&blp(&["synth", "-c", c, "-o", dirs[1].to_str().unwrap()], None));
    ok(&blp(&["synth", "-c", c, "-o", dirs[2].to_str().unwrap(), "--seed", "4"], None));
    assert_eq!(tree(&dirs[0]), tree(&dirs[1]));
    assert_ne!(tree(&dirs[0])[Path::new("labels.csv")], tree(&dirs[2])[Path::new("labels.csv")]);
}

#[test]
fn seed_precedence_is_flag_then_env_then_config() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(3));
    let c = c.to_str().unwrap();
    let run = |name: &str, extra: &[&str], env: Option<&str>| {
        let out = tmp.path().join(name);
        let mut args = vec!["synth", "-c", c, "-o", out.to_str().unwrap()];
        args.extend_from_slice(extra);
        ok(&blp(&args, env));
        report(&out)["config"]["seed"].as_u64().unwrap()
    };
    assert_eq!(run("a", &[], None), 3);
    assert_eq!(run("b", &[], Some("11")), 11);
    assert_eq!(run("c", &["--seed", "12"], Some("11")), 12);
    let bad = blp(&["synth", "-c", c, "-o", tmp.path().join("d").to_str().unwrap()], Some("eleven"));
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn heavy_censoring_fails_with_message() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(10);
    cfg["synth"]["max_cycles"] = json!(150);
    cfg["synth"]["detailed_cycles"] = json!(110);
    let c = write_config(tmp.path(), "c.json", &cfg);
    let o = blp(&["synth", "-c", c.to_str().unwrap(), "-o", tmp.path().join("f").to_str().unwrap()], None);
    assert_ne!(o.status.code(), Some(0));
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("do not reach end of life"));
}

#[test]
fn unknown_config_key_is_rejected_with_its_path() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(3);
    cfg["optim"]["learning_rate"] = json!(0.1);
    let c = write_config(tmp.path(), "c.json", &cfg);
    let o = blp(&["synth", "-c", c.to_str().unwrap(), "-o", tmp.path().join("f").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("optim") && err.contains("learning_rate"), "{err}");
}

#[test]
fn grid_mode_rejects_off_grid_values() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(3));
    let out = tmp.path().join("f");
    let o = blp(&["synth", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap(), "--grid", "--lr", "0.002"], None);
    assert_eq!(o.status.code(), Some(2));
    ok(&blp(
        &["synth", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap(), "--grid", "--lr", "0.005", "--batch-size", "32"],
        None,
    ));
}

#[test]
fn non_empty_output_needs_force() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(3));
    let out = tmp.path().join("f");
    let args = ["synth", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap()];
    ok(&blp(&args, None));
    let again = blp(&args, None);
    assert_eq!(again.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&again.stderr).contains("--force"));
    let mut forced = args.to_vec();
    forced.push("--force");
    ok(&blp(&forced, None));
}

#[test]
fn missing_manifest_is_a_config_error() {
    let tmp = TempDir::new().unwrap();
    let c = write_config(tmp.path(), "c.json", &small_config(3));
    let o = blp(&["preprocess", "-c", c.to_str().unwrap(), "-o", tmp.path().join("p").to_str().unwrap()], None);
    assert_eq!(o.status.code(), Some(2));
    let o = blp(
        &[
            "preprocess",
            "-c",
            c.to_str().unwrap(),
            "-o",
            tmp.path().join("q").to_str().unwrap(),
            "--manifest",
            tmp.path().join("absent.json").to_str().unwrap(),
        ],
        None,
    );
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn preprocess_caches_one_sample_per_labeled_battery() {
    let tmp = TempDir::new().unwrap();
    let cfg = fleet(tmp.path(), 10);
    let out = tmp.path().join("prep");
    let stdout = ok(&blp(&["preprocess", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap()], None));
    assert!(stdout.starts_with("10 samples from 10 batteries"), "{stdout}");
    let r = report(&out);
    assert_eq!(r["results"]["n_samples"], 10);
    assert_eq!(r["inputs"]["files"].as_array().unwrap().len(), 11);
    assert_eq!(r["inputs"]["digest"].as_str().unwrap().len(), 64);

    // Reusing the cache gives the same training outcome as rebuilding it.
    let (a, b) = (tmp.path().join("ta"), tmp.path().join("tb"));
    let cache = out.join("samples.blpt");
    let base = ["train", "-c", cfg.to_str().unwrap(), "--seeds", "0"];
    let mut with_cache = base.to_vec();
    with_cache.extend_from_slice(&["-o", a.to_str().unwrap(), "--cache", cache.to_str().unwrap()]);
    let mut without = base.to_vec();
    without.extend_from_slice(&["-o", b.to_str().unwrap()]);
    ok(&blp(&with_cache, None));
    ok(&blp(&without, None));
    assert_eq!(
        fs::read(a.join("checkpoints/replicate-0.blpw")).unwrap(),
        fs::read(b.join("checkpoints/replicate-0.blpw")).unwrap()
    );
    assert_eq!(report(&a)["results"], report(&b)["results"]);
}

#[test]
fn preprocess_logs_above_band_exclusions() {
    let tmp = TempDir::new().unwrap();
    let mut cfg = small_config(12);
    cfg["synth"]["truncation"] = json!({"above_band": 0.5});
    let c = write_config(tmp.path(), "s.json", &cfg);
    ok(&blp(&["synth", "-c", c.to_str().unwrap(), "-o", tmp.path().join("fleet").to_str().unwrap()], None));
    cfg["data"] = json!({"manifest": "fleet/manifest.json"});
    let c = write_config(tmp.path(), "r.json", &cfg);
    let out = tmp.path().join("prep");
    let o = blp(&["preprocess", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap(), "--log", "info"], None);
    ok(&o);
    let exclusions = report(&out)["results"]["exclusions"].as_array().unwrap().clone();
    assert!(!exclusions.is_empty());
    let text = serde_json::to_string(&exclusions).unwrap();
    assert!(text.to_lowercase().contains("above"), "{text}");
    assert!(String::from_utf8_lossy(&o.stderr).contains("excluded"));
}

#[test]
fn train_eval_and_repeat_are_consistent() {
    let tmp = TempDir::new().unwrap();
    let cfg = fleet(tmp.path(), 10);
    let c = cfg.to_str().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let table = ok(&blp(&["train", "-c", c, "-o", a.to_str().unwrap()], None));
    ok(&blp(&["train", "-c", c, "-o", b.to_str().unwrap()], None));
    assert!(table.contains('±'), "{table}");
    assert_eq!(tree(&a), tree(&b));

    let r = report(&a);
    assert_eq!(r["command"], "train");
    assert_eq!(r["results"]["replicates"].as_array().unwrap().len(), 3);
    assert_eq!(r["results"]["report"]["seeds"].as_array().unwrap().len(), 3);
    for k in 0..3 {
        assert!(a.join(format!("checkpoints/replicate-{k}.blpw")).exists());
    }

    let e = tmp.path().join("e");
    let ckpt = a.join("checkpoints/replicate-0.blpw");
    let out = ok(&blp(&["eval", "-c", c, "-o", e.to_str().unwrap(), "--checkpoint", ckpt.to_str().unwrap()], None));
    assert!(out.lines().next().unwrap().contains("acc15"), "{out}");
    let er = report(&e);
    // The eval test split is the one replicate 0 was scored on during training.
    let trained = &r["results"]["replicates"][0]["test"];
    let evaluated = &er["results"]["test"];
    assert_eq!(trained["n"], evaluated["n"]);
    let (x, y) = (trained["mape"].as_f64().unwrap(), evaluated["mape"].as_f64().unwrap());
    assert_eq!(x, y);
}

#[test]
fn sweep_csv_rows_ascend_in_s() {
    let tmp = TempDir::new().unwrap();
    let cfg = fleet(tmp.path(), 10);
    let out = tmp.path().join("s");
    ok(&blp(
        &["sweep", "-c", cfg.to_str().unwrap(), "-o", out.to_str().unwrap(), "--sweep", "50,10,30", "--seeds", "0"],
        None,
    ));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let s: Vec<usize> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(s, vec![10, 30, 50]);
}

#[test]
fn transfer_and_gradcheck_run() {
    let tmp = TempDir::new().unwrap();
    let cfg = fleet(tmp.path(), 10);
    let mut v: Value = serde_json::from_slice(&fs::read(&cfg).unwrap()).unwrap();
    v["data"]["source_manifest"] = json!("fleet/manifest.json");
    v["eval"] = json!({"transfer": {"mode": "domain_adapt", "weight": 0.1}});
    let c = write_config(tmp.path(), "t.json", &v);
    let out = tmp.path().join("t");
    let o = blp(&["transfer", "-c", c.to_str().unwrap(), "-o", out.to_str().unwrap(), "--seeds", "0"], None);
    let stdout = ok(&o);
    assert!(stdout.contains("target MAPE"), "{stdout}");
    assert!(out.join("checkpoints/transferred-0.blpw").exists());

    let g = tmp.path().join("g");
    let stdout = ok(&blp(&["gradcheck", "-c", c.to_str().unwrap(), "-o", g.to_str().unwrap(), "--entries", "3"], None));
    assert!(stdout.contains("max relative error"), "{stdout}");
    assert_eq!(report(&g)["command"], "gradcheck");
}

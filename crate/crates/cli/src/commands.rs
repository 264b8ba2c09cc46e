//! Subcommand implementations. Every report embeds the resolved config and a
//! content hash of the inputs, and contains nothing run-dependent (no times).

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use blp_core::battery::{AgingCondition, BatteryFormat, BatteryRecord};
use blp_core::diffkernel::ops::mse_loss;
use blp_core::diffkernel::{check_gradients, GradCheckOptions, GradCheckReport, Tensor2D};
use blp_core::eval::{
    curve_csv, evaluate, predict_lives, run_experiment, seen_unseen_report, split_dataset_with, train_model,
    transfer_run, EpochRecord, EvalReport, ExperimentConfig, MeanStd, Metrics, SeenUnseen, Split, SplitAssignment,
};
use blp_core::ingest::{DatasetTag, Manifest};
use blp_core::models::{ModelCheckpoint, Network};
use blp_core::preprocess::{
    make_dataset_from_records, read_cache, write_cache, Dataset, ResampledCycle, SampleTensor, POINTS_PER_CYCLE,
};
use blp_core::seed::{derive_seed, rng_for};
use blp_core::synth::{generate_fleet, FleetSummary};
use blp_core::{Error, Result};
use rand::Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::RunConfig;

/// Seed of replicate `r` under the top-level seed.
pub fn replicate_seed(seed: u64, r: u64) -> u64 {
    derive_seed(seed, "replicate", r)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct InputFile {
    pub path: String,
    pub sha256: String,
}

/// Content hashes of every input file plus one digest over all of them.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct Inputs {
    pub files: Vec<InputFile>,
    pub digest: String,
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().fold(String::with_capacity(bytes.len() * 2), |mut s, b| {
        let _ = write!(s, "{b:02x}");
        s
    })
}

/// Git-style object hash (`"blob <len>\0" + content`), with SHA-256.
pub fn blob_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    hex(&h.finalize())
}

impl Inputs {
    fn add(&mut self, label: String, path: &Path) -> Result<()> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        self.files.push(InputFile {
            path: label,
            sha256: blob_hash(&bytes),
        });
        Ok(())
    }

    fn finish(mut self) -> Self {
        self.files.sort_by(|a, b| a.path.cmp(&b.path));
        let mut h = Sha256::new();
        for f in &self.files {
            h.update(format!("{}  {}\n", f.sha256, f.path).as_bytes());
        }
        self.digest = hex(&h.finalize());
        self
    }
}

#[derive(Serialize)]
struct Envelope<'a, T: Serialize> {
    command: &'a str,
    config: &'a RunConfig,
    inputs: &'a Inputs,
    results: T,
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn write_report<T: Serialize>(out: &Path, command: &str, cfg: &RunConfig, inputs: &Inputs, results: T) -> Result<()> {
    let env = Envelope {
        command,
        config: cfg,
        inputs,
        results,
    };
    let mut bytes = serde_json::to_vec_pretty(&env).map_err(|e| Error::Config(e.to_string()))?;
    bytes.push(b'\n');
    write_file(&out.join("report.json"), &bytes)
}

/// Output directory, created if missing; a non-empty one needs `force`.
pub fn prepare_out(out: Option<&Path>, force: bool) -> Result<PathBuf> {
    let out = out.ok_or_else(|| Error::Config("--out is required for this command".into()))?;
    if out.exists() {
        let nonempty = fs::read_dir(out).map_err(|e| Error::io(out, e))?.next().is_some();
        if nonempty && !force {
            return Err(Error::Config(format!(
                "output directory {} is not empty (pass --force to overwrite)",
                out.display()
            )));
        }
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    Ok(out.to_path_buf())
}

struct Loaded {
    records: Vec<(BatteryRecord, DatasetTag)>,
}

fn load_manifest(path: &Path, inputs: &mut Inputs, prefix: &str) -> Result<Loaded> {
    let manifest = Manifest::load(path)?;
    inputs.add(format!("{prefix}manifest.json"), path)?;
    let mut records = Vec::with_capacity(manifest.batteries.len());
    for e in &manifest.batteries {
        let p = manifest.resolve(e);
        inputs.add(format!("{prefix}{}", e.path.display()), &p)?;
        records.push((blp_core::ingest::load_battery(&p)?, e.dataset));
    }
    Ok(Loaded { records })
}

fn require<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a PathBuf> {
    p.as_ref().ok_or_else(|| Error::Config(format!("{key} is not set (config or flag)")))
}

fn build_dataset(cfg: &RunConfig, loaded: &Loaded, s_values: &BTreeSet<usize>) -> Result<Dataset> {
    let ds = make_dataset_from_records(&loaded.records, s_values, &cfg.data.labeling())?;
    for x in &ds.exclusions {
        log::info!("excluded {}: {}", x.battery_id, x.reason);
    }
    Ok(ds)
}

/// Target-domain samples at `s_values`, from the cache when one is configured.
fn target_samples(cfg: &RunConfig, s_values: &BTreeSet<usize>, inputs: &mut Inputs) -> Result<Vec<SampleTensor>> {
    let loaded = load_manifest(require(&cfg.data.manifest, "data.manifest")?, inputs, "")?;
    match &cfg.preprocess.cache {
        Some(cache) if cache.exists() => {
            inputs.add("cache".into(), cache)?;
            let conditions: HashMap<String, AgingCondition> =
                loaded.records.iter().map(|(r, _)| (r.id.clone(), r.condition.clone())).collect();
            let all = read_cache(cache, &conditions)?;
            let picked: Vec<SampleTensor> = all.into_iter().filter(|s| s_values.contains(&s.usable_cycles)).collect();
            let present: BTreeSet<usize> = picked.iter().map(|s| s.usable_cycles).collect();
            if let Some(missing) = s_values.difference(&present).next() {
                return Err(Error::InsufficientData(format!(
                    "cache {} has no samples with S = {missing}",
                    cache.display()
                )));
            }
            Ok(picked)
        }
        _ => Ok(build_dataset(cfg, &loaded, s_values)?.samples),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<FleetSummary> {
    let fleet = generate_fleet(&cfg.synth, cfg.seed)?;
    fleet.write(out)?;
    let inputs = Inputs::default().finish();
    write_report(out, "synth", cfg, &inputs, &fleet.summary)?;
    let s = &fleet.summary;
    let q = s.label_quantiles;
    println!(
        "{} batteries: {} labeled, {} censored, {} short-life, {} above band",
        s.n_batteries, s.n_labeled, s.n_censored, s.n_short_life, s.n_above_band
    );
    println!(
        "label quantiles (min/25/50/75/max): {:.0} / {:.0} / {:.0} / {:.0} / {:.0}",
        q[0], q[1], q[2], q[3], q[4]
    );
    println!("early-slope Spearman: {:.3}", s.early_slope_spearman);
    Ok(fleet.summary)
}

#[derive(Serialize)]
struct PreprocessResults<'a> {
    n_samples: usize,
    n_batteries: usize,
    exclusions: &'a [blp_core::preprocess::Exclusion],
    removed_cycles: Vec<(String, Vec<u32>)>,
}

pub fn preprocess(cfg: &RunConfig, out: &Path) -> Result<usize> {
    let mut inputs = Inputs::default();
    let loaded = load_manifest(require(&cfg.data.manifest, "data.manifest")?, &mut inputs, "")?;
    let s_values: BTreeSet<usize> = cfg.preprocess.s_values.iter().copied().collect();
    let ds = build_dataset(cfg, &loaded, &s_values)?;
    let cache = cfg.preprocess.cache.clone().unwrap_or_else(|| out.join("samples.blpt"));
    write_cache(&cache, &ds.samples)?;
    let ids: BTreeSet<&str> = ds.samples.iter().map(|s| s.battery_id.as_str()).collect();
    let results = PreprocessResults {
        n_samples: ds.samples.len(),
        n_batteries: ids.len(),
        exclusions: &ds.exclusions,
        removed_cycles: ds
            .cleaning
            .iter()
            .filter(|c| !c.removed.is_empty())
            .map(|c| (c.battery_id.clone(), c.removed_indices()))
            .collect(),
    };
    write_report(out, "preprocess", cfg, &inputs.finish(), &results)?;
    println!(
        "{} samples from {} batteries ({} excluded) -> {}",
        ds.samples.len(),
        ids.len(),
        ds.exclusions.len(),
        cache.display()
    );
    Ok(ds.samples.len())
}

#[derive(Serialize)]
struct ReplicateSummary<'a> {
    replicate: u64,
    seed: u64,
    best_epoch: Option<usize>,
    untrained: bool,
    val: Metrics,
    test: Metrics,
    seen_unseen: &'a SeenUnseen,
    history: &'a [EpochRecord],
}

#[derive(Serialize)]
struct TrainResults<'a> {
    replicates: Vec<ReplicateSummary<'a>>,
    report: &'a EvalReport,
}

fn experiment(cfg: &RunConfig, sweep: Option<Vec<usize>>) -> ExperimentConfig {
    ExperimentConfig {
        model: cfg.model.clone(),
        train: cfg.optim.train_config(),
        seeds: cfg.optim.seeds.iter().map(|&r| replicate_seed(cfg.seed, r)).collect(),
        alpha: cfg.eval.alpha,
        split: cfg.eval.split.clone(),
        sweep,
    }
}

fn run_and_report(cfg: &RunConfig, out: &Path, command: &str, s_values: &BTreeSet<usize>, sweep: bool) -> Result<EvalReport> {
    let mut inputs = Inputs::default();
    let samples = target_samples(cfg, s_values, &mut inputs)?;
    let exp = experiment(cfg, sweep.then(|| s_values.iter().copied().collect()));
    let result = run_experiment(&samples, &exp)?;
    let dir = out.join("checkpoints");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    for (r, run) in cfg.optim.seeds.iter().zip(&result.runs) {
        run.outcome.checkpoint.write(dir.join(format!("replicate-{r}.blpw")))?;
    }
    let results = TrainResults {
        replicates: cfg
            .optim
            .seeds
            .iter()
            .zip(&result.runs)
            .map(|(&r, run)| ReplicateSummary {
                replicate: r,
                seed: run.seed,
                best_epoch: run.outcome.checkpoint.best_epoch,
                untrained: run.outcome.untrained,
                val: run.val,
                test: run.test,
                seen_unseen: &run.seen_unseen,
                history: &run.outcome.history,
            })
            .collect(),
        report: &result.report,
    };
    write_report(out, command, cfg, &inputs.finish(), &results)?;
    let table = result.report.to_table();
    write_file(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(result.report)
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let s_values: BTreeSet<usize> = cfg.preprocess.s_values.iter().copied().collect();
    run_and_report(cfg, out, "train", &s_values, false)
}

pub fn sweep(cfg: &RunConfig, out: &Path) -> Result<EvalReport> {
    let s_values: BTreeSet<usize> = cfg.eval.sweep.iter().copied().collect();
    let report = run_and_report(cfg, out, "sweep", &s_values, true)?;
    write_file(&out.join("sweep.csv"), curve_csv(&report.per_s, cfg.eval.alpha).as_bytes())?;
    Ok(report)
}

#[derive(Serialize)]
struct EvalResults {
    replicate: u64,
    split_seed: u64,
    test: Metrics,
    all: Metrics,
    seen_unseen: SeenUnseen,
}

fn split_for(samples: &[SampleTensor], cfg: &RunConfig, run_seed: u64, tag: &str) -> Result<SplitAssignment> {
    split_dataset_with(samples, derive_seed(run_seed, tag, 0), &cfg.eval.split)
}

fn metrics_table(alpha: f64, rows: &[(&str, &Metrics)]) -> String {
    let mut t = format!("{:<8} {:>6} {:>8} {:>8}\n", "split", "n", "mape", format!("acc{}", (alpha * 100.0).round()));
    for (name, m) in rows {
        let _ = writeln!(t, "{:<8} {:>6} {:>8.4} {:>8.4}", name, m.n, m.mape, m.acc);
    }
    t
}

pub fn eval(cfg: &RunConfig, out: &Path, checkpoint: &Path) -> Result<Metrics> {
    let mut inputs = Inputs::default();
    inputs.add("checkpoint".into(), checkpoint)?;
    let ckpt = ModelCheckpoint::read(checkpoint)?;
    let s_values: BTreeSet<usize> = cfg.preprocess.s_values.iter().copied().collect();
    let samples = target_samples(cfg, &s_values, &mut inputs)?;
    let run_seed = replicate_seed(cfg.seed, cfg.eval.replicate);
    // Same split as the training replicate, so test batteries were never trained on.
    let split = split_for(&samples, cfg, run_seed, "split")?;
    let test = split.select(&samples, Split::Test);
    let pred = predict_lives(&ckpt, &test)?;
    let truth: Vec<f64> = test.iter().map(|s| s.label as f64).collect();
    let test_m = Metrics::compute(&truth, &pred, cfg.eval.alpha)?;
    let train_conditions: HashSet<AgingCondition> =
        split.select(&samples, Split::Train).iter().map(|s| s.condition.clone()).collect();
    let seen_unseen = seen_unseen_report(&test, &pred, &train_conditions, cfg.eval.alpha)?;
    let all: Vec<&SampleTensor> = samples.iter().collect();
    let all_m = evaluate(&ckpt, &all, cfg.eval.alpha)?;
    let table = metrics_table(cfg.eval.alpha, &[("test", &test_m), ("all", &all_m)]);
    let results = EvalResults {
        replicate: cfg.eval.replicate,
        split_seed: derive_seed(run_seed, "split", 0),
        test: test_m,
        all: all_m,
        seen_unseen,
    };
    write_report(out, "eval", cfg, &inputs.finish(), &results)?;
    write_file(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(test_m)
}

#[derive(Serialize)]
struct TransferReplicate {
    replicate: u64,
    seed: u64,
    source_test: Metrics,
    target_test: Metrics,
    steps: usize,
}

#[derive(Serialize)]
struct TransferResults {
    replicates: Vec<TransferReplicate>,
    target_mape: MeanStd,
    target_acc: MeanStd,
}

pub fn transfer(cfg: &RunConfig, out: &Path) -> Result<MeanStd> {
    let mut inputs = Inputs::default();
    let s_values: BTreeSet<usize> = cfg.preprocess.s_values.iter().copied().collect();
    let target = target_samples(cfg, &s_values, &mut inputs)?;
    let src_loaded = load_manifest(require(&cfg.data.source_manifest, "data.source_manifest")?, &mut inputs, "source/")?;
    let source = build_dataset(cfg, &src_loaded, &s_values)?.samples;
    let train_cfg = cfg.optim.train_config();
    let alpha = cfg.eval.alpha;
    let mut reps = Vec::new();
    for &r in &cfg.optim.seeds {
        let seed = replicate_seed(cfg.seed, r);
        let ss = split_for(&source, cfg, seed, "split")?;
        let (s_train, s_val, s_test) =
            (ss.select(&source, Split::Train), ss.select(&source, Split::Val), ss.select(&source, Split::Test));
        let pre = train_model(&cfg.model, &s_train, &s_val, &train_cfg, seed)?;
        let source_test = evaluate(&pre.checkpoint, &s_test, alpha)?;
        let ts = split_for(&target, cfg, seed, "target-split")?;
        let (t_train, t_val, t_test) =
            (ts.select(&target, Split::Train), ts.select(&target, Split::Val), ts.select(&target, Split::Test));
        let outcome = transfer_run(
            &pre.checkpoint,
            &s_train,
            &t_train,
            &t_val,
            &t_test,
            cfg.eval.transfer,
            &train_cfg,
            seed,
            alpha,
        )?;
        let dir = out.join("checkpoints");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        pre.checkpoint.write(dir.join(format!("pretrained-{r}.blpw")))?;
        outcome.checkpoint.write(dir.join(format!("transferred-{r}.blpw")))?;
        reps.push(TransferReplicate {
            replicate: r,
            seed,
            source_test,
            target_test: outcome.test,
            steps: outcome.batch_losses.len(),
        });
    }
    let target_mape = MeanStd::of(&reps.iter().map(|r| r.target_test.mape).collect::<Vec<_>>());
    let target_acc = MeanStd::of(&reps.iter().map(|r| r.target_test.acc).collect::<Vec<_>>());
    let mut table = String::new();
    for r in &reps {
        let _ = writeln!(
            table,
            "replicate {}: source test MAPE {:.4}, target test MAPE {:.4}",
            r.replicate, r.source_test.mape, r.target_test.mape
        );
    }
    let _ = writeln!(table, "target MAPE {target_mape}   acc{} {target_acc}", (alpha * 100.0).round());
    write_report(
        out,
        "transfer",
        cfg,
        &inputs.finish(),
        TransferResults {
            replicates: reps,
            target_mape,
            target_acc,
        },
    )?;
    write_file(&out.join("report.txt"), table.as_bytes())?;
    print!("{table}");
    Ok(target_mape)
}

fn gradcheck_condition() -> AgingCondition {
    AgingCondition {
        battery_format: BatteryFormat::Cylindrical,
        anode: "graphite".into(),
        cathode: "LFP".into(),
        electrolyte: "LiPF6".into(),
        charge_protocol: "1C-CC".into(),
        discharge_protocol: "1C-CC".into(),
        temperature: 25.0,
        nominal_capacity: 1.0,
        manufacturer: "gradcheck".into(),
    }
}

/// Finite-difference check of the configured network on random inputs.
pub fn gradcheck(cfg: &RunConfig, out: Option<&Path>, max_entries: Option<usize>) -> Result<GradCheckReport> {
    let net = Network::from_spec(&cfg.model)?
        .ok_or_else(|| Error::Config("the dummy model has no gradients to check".into()))?;
    let mut rng = rng_for(cfg.seed, "gradcheck", 0);
    let samples = (0..2)
        .map(|k| {
            let s = rng.gen_range(1..5);
            let cycles: Vec<ResampledCycle<f64>> = (0..s)
                .map(|_| ResampledCycle {
                    capacity: (0..POINTS_PER_CYCLE).map(|_| rng.gen_range(0.0..1.0)).collect(),
                    voltage: (0..POINTS_PER_CYCLE).map(|_| rng.gen_range(0.7..1.0)).collect(),
                    current: (0..POINTS_PER_CYCLE).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                })
                .collect();
            SampleTensor::from_cycles(format!("g{k}"), gradcheck_condition(), 500, &cycles)
        })
        .collect::<Result<Vec<_>>>()?;
    let batch: Vec<&SampleTensor> = samples.iter().collect();
    let targets: Vec<f64> = batch.iter().map(|_| rng.gen_range(0.5..1.5)).collect();
    let probe = Tensor2D::from_fn(batch.len(), net.embedding_dim(), |_, _| rng.gen_range(-0.1..0.1));
    let mut params = net.init::<f64>(derive_seed(cfg.seed, "init", 0));
    let objective = |p: &mut blp_core::diffkernel::ParameterSet<f64>, with_grad: bool| -> f64 {
        let (o, cache) = net.forward(p, &batch, None).expect("forward on valid inputs");
        let (loss, grad) = mse_loss(&o.predictions, &targets).expect("matching lengths");
        let extra: f64 = o.embedding.as_slice().iter().zip(probe.as_slice()).map(|(a, b)| a * b).sum();
        if with_grad {
            net.backward(p, &cache, &grad, Some(&probe)).expect("backward after forward");
        }
        loss + extra
    };
    let opts = GradCheckOptions {
        max_entries,
        ..GradCheckOptions::default()
    };
    let report = check_gradients(&mut params, objective, opts);
    let mut table = format!("{:<28} {:>7} {:>12}  ok\n", "parameter", "probed", "rel error");
    for e in &report.entries {
        let _ = writeln!(table, "{:<28} {:>7} {:>12.3e}  {}", e.name, e.probed, e.rel_error, if e.passed { "yes" } else { "NO" });
    }
    let _ = writeln!(table, "max relative error {:.3e} (tolerance {:.0e})", report.max_rel_error(), report.tolerance);
    print!("{table}");
    if let Some(out) = out {
        write_report(out, "gradcheck", cfg, &Inputs::default().finish(), &report)?;
        write_file(&out.join("report.txt"), table.as_bytes())?;
    }
    if !report.passed() {
        return Err(Error::Numerical(format!(
            "gradient check failed: max relative error {:.3e} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )));
    }
    Ok(report)
}

//! Evaluation protocols: multi-seed experiments, usable-cycle sweeps, seen/unseen
//! partitions and cross-domain transfer.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use serde::{Deserialize, Serialize};

use super::metrics::{MeanStd, Metrics};
use super::report::{ConditionRow, CurvePoint, CurveStat, EvalReport, ReportRow};
use super::split::{split_dataset_with, Split, SplitAssignment, SplitOptions};
use super::train::{continue_training, train_model, Adaptation, TrainConfig, TrainOutcome};
use crate::battery::AgingCondition;
use crate::error::{Error, Result};
use crate::models::{ModelCheckpoint, ModelSpec};
use crate::preprocess::{SampleTensor, MAX_CYCLES};
use crate::seed::derive_seed;

pub const DEFAULT_ALPHA: f64 = 0.15;

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

pub fn truth(samples: &[&SampleTensor]) -> Vec<f64> {
    samples.iter().map(|s| s.label as f64).collect()
}

/// Predicted lives in cycles.
pub fn predict_lives(ckpt: &ModelCheckpoint, samples: &[&SampleTensor]) -> Result<Vec<f64>> {
    Ok(ckpt.predict(samples)?.predictions)
}

pub fn evaluate(ckpt: &ModelCheckpoint, samples: &[&SampleTensor], alpha: f64) -> Result<Metrics> {
    Metrics::compute(&truth(samples), &predict_lives(ckpt, samples)?, alpha)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeenUnseen {
    pub n_seen: usize,
    pub n_unseen: usize,
    pub seen: Option<Metrics>,
    pub unseen: Option<Metrics>,
    /// Per test condition label, in label order.
    pub per_condition: Vec<(String, bool, Metrics)>,
}

/// Partition test predictions by whether the full aging condition occurs in training.
pub fn seen_unseen_report(
    test: &[&SampleTensor],
    pred: &[f64],
    train_conditions: &HashSet<AgingCondition>,
    alpha: f64,
) -> Result<SeenUnseen> {
    if test.len() != pred.len() {
        return Err(Error::Shape {
            op: "seen/unseen",
            left: (test.len(), 1),
            right: (pred.len(), 1),
        });
    }
    let mut parts: [(Vec<f64>, Vec<f64>); 2] = Default::default();
    let mut by_cond: BTreeMap<String, (bool, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for (s, &p) in test.iter().zip(pred) {
        let seen = train_conditions.contains(&s.condition);
        let part = &mut parts[usize::from(!seen)];
        part.0.push(s.label as f64);
        part.1.push(p);
        let e = by_cond.entry(s.condition.label()).or_insert((seen, Vec::new(), Vec::new()));
        e.1.push(s.label as f64);
        e.2.push(p);
    }
    let metrics = |(t, p): &(Vec<f64>, Vec<f64>)| -> Result<Option<Metrics>> {
        if t.is_empty() {
            Ok(None)
        } else {
            Metrics::compute(t, p, alpha).map(Some)
        }
    };
    let per_condition = by_cond
        .into_iter()
        .map(|(label, (seen, t, p))| Ok((label, seen, Metrics::compute(&t, &p, alpha)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SeenUnseen {
        n_seen: parts[0].0.len(),
        n_unseen: parts[1].0.len(),
        seen: metrics(&parts[0])?,
        unseen: metrics(&parts[1])?,
        per_condition,
    })
}

fn check_s_list(s_list: &[usize]) -> Result<Vec<usize>> {
    if s_list.is_empty() {
        return Err(Error::Config("sweep S list is empty".into()));
    }
    if let Some(bad) = s_list.iter().find(|&&s| s == 0 || s > MAX_CYCLES) {
        return Err(Error::Config(format!("sweep S value {bad} outside [1, {MAX_CYCLES}]")));
    }
    Ok(s_list.iter().copied().collect::<BTreeSet<_>>().into_iter().collect())
}

fn with_s<'a>(samples: &[&'a SampleTensor], s: usize) -> Vec<&'a SampleTensor> {
    samples.iter().copied().filter(|x| x.usable_cycles == s).collect()
}

/// Evaluate one checkpoint at each usable-cycle count, ascending.
pub fn sweep_usable_cycles(
    ckpt: &ModelCheckpoint,
    test: &[&SampleTensor],
    s_list: &[usize],
    alpha: f64,
) -> Result<Vec<CurvePoint>> {
    check_s_list(s_list)?
        .into_iter()
        .map(|s| {
            let subset = with_s(test, s);
            if subset.is_empty() {
                return Err(Error::InsufficientData(format!("no test samples with S = {s}")));
            }
            let m = evaluate(ckpt, &subset, alpha)?;
            Ok(CurvePoint {
                s,
                n: m.n,
                mape: m.mape,
                acc: m.acc,
            })
        })
        .collect()
}

/// Train a separate model per usable-cycle count and evaluate it at that count.
#[allow(clippy::too_many_arguments)]
pub fn sweep_retrain(
    spec: &ModelSpec,
    samples: &[SampleTensor],
    split: &SplitAssignment,
    s_list: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    alpha: f64,
) -> Result<Vec<CurvePoint>> {
    let train = split.select(samples, Split::Train);
    let val = split.select(samples, Split::Val);
    let test = split.select(samples, Split::Test);
    check_s_list(s_list)?
        .into_iter()
        .map(|s| {
            let out = train_model(spec, &with_s(&train, s), &with_s(&val, s), cfg, seed)?;
            let subset = with_s(&test, s);
            let m = evaluate(&out.checkpoint, &subset, alpha)?;
            Ok(CurvePoint {
                s,
                n: m.n,
                mape: m.mape,
                acc: m.acc,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum TransferMode {
    Frozen,
    FineTune,
    DomainAdapt {
        #[serde(default = "default_mmd_weight")]
        weight: f64,
    },
}

fn default_mmd_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone)]
pub struct TransferOutcome {
    pub checkpoint: ModelCheckpoint,
    pub test: Metrics,
    /// Per-step objective; empty for `Frozen`.
    pub batch_losses: Vec<f64>,
}

/// Apply a pretrained checkpoint to a target domain.
#[allow(clippy::too_many_arguments)]
pub fn transfer_run(
    pretrained: &ModelCheckpoint,
    source_train: &[&SampleTensor],
    target_train: &[&SampleTensor],
    target_val: &[&SampleTensor],
    target_test: &[&SampleTensor],
    mode: TransferMode,
    cfg: &TrainConfig,
    seed: u64,
    alpha: f64,
) -> Result<TransferOutcome> {
    let outcome: Option<TrainOutcome> = match mode {
        TransferMode::Frozen => None,
        TransferMode::FineTune => Some(continue_training(pretrained, target_train, target_val, cfg, seed, None)?),
        TransferMode::DomainAdapt { weight } => {
            if !(weight >= 0.0) {
                return Err(Error::Config(format!("mmd weight must be nonnegative, got {weight}")));
            }
            let adapt = Adaptation {
                source: source_train,
                weight,
            };
            Some(continue_training(pretrained, target_train, target_val, cfg, seed, Some(adapt))?)
        }
    };
    let (checkpoint, batch_losses) = match outcome {
        Some(o) => (o.checkpoint, o.batch_losses),
        None => (pretrained.clone(), Vec::new()),
    };
    let test = evaluate(&checkpoint, target_test, alpha)?;
    Ok(TransferOutcome {
        checkpoint,
        test,
        batch_losses,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelSpec,
    #[serde(default)]
    pub train: TrainConfig,
    pub seeds: Vec<u64>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub split: SplitOptions,
    /// When set, test metrics are also broken down by these usable-cycle counts.
    #[serde(default)]
    pub sweep: Option<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub split: SplitAssignment,
    pub outcome: TrainOutcome,
    pub val: Metrics,
    pub test: Metrics,
    pub seen_unseen: SeenUnseen,
    pub per_s: Vec<CurvePoint>,
}

#[derive(Debug, Clone)]
pub struct ExperimentResult {
    pub runs: Vec<SeedRun>,
    pub report: EvalReport,
}

pub fn family_name(spec: &ModelSpec) -> String {
    match spec {
        ModelSpec::Cpmlp(c) => {
            let mut name = "cpmlp".to_string();
            if c.effective_intra_layers() == 0 {
                name.push_str("-no-intra");
            }
            if c.effective_inter().is_none() {
                name.push_str("-no-inter");
            }
            name
        }
        ModelSpec::Mlp(_) => "mlp".into(),
        ModelSpec::Dummy => "dummy".into(),
    }
}

/// Split, train and evaluate once per seed; aggregate mean ± std over the seeds.
pub fn run_experiment(samples: &[SampleTensor], cfg: &ExperimentConfig) -> Result<ExperimentResult> {
    if cfg.seeds.is_empty() {
        return Err(Error::Config("seed list is empty".into()));
    }
    let sweep = cfg.sweep.as_deref().map(check_s_list).transpose()?;
    let mut runs = Vec::with_capacity(cfg.seeds.len());
    for &seed in &cfg.seeds {
        let split = split_dataset_with(samples, derive_seed(seed, "split", 0), &cfg.split)?;
        let train = split.select(samples, Split::Train);
        let val = split.select(samples, Split::Val);
        let test = split.select(samples, Split::Test);
        if test.is_empty() {
            return Err(Error::InsufficientData("test split is empty".into()));
        }
        log::info!("seed {seed}: {} train / {} val / {} test samples", train.len(), val.len(), test.len());
        let outcome = train_model(&cfg.model, &train, &val, &cfg.train, seed)?;
        let val_m = evaluate(&outcome.checkpoint, &val, cfg.alpha)?;
        let pred = predict_lives(&outcome.checkpoint, &test)?;
        let test_m = Metrics::compute(&truth(&test), &pred, cfg.alpha)?;
        let train_conditions: HashSet<AgingCondition> = train.iter().map(|s| s.condition.clone()).collect();
        let seen_unseen = seen_unseen_report(&test, &pred, &train_conditions, cfg.alpha)?;
        let per_s = match &sweep {
            Some(list) => sweep_usable_cycles(&outcome.checkpoint, &test, list, cfg.alpha)?,
            None => Vec::new(),
        };
        runs.push(SeedRun {
            seed,
            split,
            outcome,
            val: val_m,
            test: test_m,
            seen_unseen,
            per_s,
        });
    }
    let report = build_report(cfg, &runs);
    Ok(ExperimentResult { runs, report })
}

fn build_report(cfg: &ExperimentConfig, runs: &[SeedRun]) -> EvalReport {
    let mut rows = Vec::new();
    let mut per_condition = Vec::new();
    for r in runs {
        rows.push(ReportRow::new("mape", "val", r.val.mape).seed(r.seed));
        rows.push(ReportRow::new("mape", "test", r.test.mape).seed(r.seed));
        rows.push(ReportRow::new("acc", "test", r.test.acc).seed(r.seed));
        for (label, seen, m) in &r.seen_unseen.per_condition {
            rows.push(ReportRow::new("mape", "test", m.mape).seed(r.seed).condition(label.clone()));
            per_condition.push(ConditionRow {
                seed: r.seed,
                condition: label.clone(),
                seen: *seen,
                n: m.n,
                mape: m.mape,
                acc: m.acc,
            });
        }
        for p in &r.per_s {
            rows.push(ReportRow::new("mape", "test", p.mape).seed(r.seed).usable_cycles(p.s));
            rows.push(ReportRow::new("acc", "test", p.acc).seed(r.seed).usable_cycles(p.s));
        }
    }
    let stat = |f: &dyn Fn(&SeedRun) -> Option<f64>| -> Option<MeanStd> {
        let v: Vec<f64> = runs.iter().filter_map(f).collect();
        (!v.is_empty()).then(|| MeanStd::of(&v))
    };
    let mape = stat(&|r| Some(r.test.mape)).expect("at least one run");
    let acc = stat(&|r| Some(r.test.acc)).expect("at least one run");
    for (name, m) in [("mape", mape), ("acc", acc)] {
        rows.push(ReportRow::new(&format!("{name}_mean"), "test", m.mean));
        rows.push(ReportRow::new(&format!("{name}_std"), "test", m.std));
    }
    let s_values: BTreeSet<usize> = runs.iter().flat_map(|r| r.per_s.iter().map(|p| p.s)).collect();
    let per_s = s_values
        .into_iter()
        .map(|s| {
            let pts: Vec<&CurvePoint> = runs.iter().flat_map(|r| r.per_s.iter().filter(move |p| p.s == s)).collect();
            CurveStat {
                s,
                mape: MeanStd::of(&pts.iter().map(|p| p.mape).collect::<Vec<_>>()),
                acc: MeanStd::of(&pts.iter().map(|p| p.acc).collect::<Vec<_>>()),
            }
        })
        .collect();
    EvalReport {
        model: family_name(&cfg.model),
        alpha: cfg.alpha,
        seeds: cfg.seeds.clone(),
        untrained: runs.iter().any(|r| r.outcome.untrained),
        mape,
        acc,
        seen: stat(&|r| r.seen_unseen.seen.map(|m| m.mape)),
        unseen: stat(&|r| r.seen_unseen.unseen.map(|m| m.mape)),
        per_condition,
        per_s,
        rows,
    }
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::models::testing::toy_fleet;
    use crate::models::{CyclePatchConfig, InterEncoder};

    fn spec() -> ModelSpec {
        ModelSpec::Cpmlp(CyclePatchConfig {
            d1: 6,
            d2: 6,
            intra_layers: 1,
            inter: InterEncoder::MlpStack { layers: 1, hidden: 6 },
            ..CyclePatchConfig::default()
        })
    }

    fn quick() -> TrainConfig {
        TrainConfig {
            epochs: 4,
            batch_size: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn seen_unseen_partitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let fleet = toy_fleet(rng.gen_range(3..12), &[2], &mut rng);
            let test: Vec<&SampleTensor> = fleet.iter().collect();
            let pred: Vec<f64> = test.iter().map(|s| s.label as f64 * rng.gen_range(0.8..1.2)).collect();
            let all: HashSet<AgingCondition> = fleet.iter().map(|s| s.condition.clone()).collect();
            let some: HashSet<AgingCondition> = fleet.iter().take(1).map(|s| s.condition.clone()).collect();
            let r = seen_unseen_report(&test, &pred, &all, 0.15).unwrap();
            assert_eq!((r.n_seen, r.n_unseen), (test.len(), 0));
            assert!(r.unseen.is_none());
            let r = seen_unseen_report(&test, &pred, &HashSet::new(), 0.15).unwrap();
            assert_eq!((r.n_seen, r.n_unseen), (0, test.len()));
            let r = seen_unseen_report(&test, &pred, &some, 0.15).unwrap();
            assert_eq!(r.n_seen + r.n_unseen, test.len());
            assert!(r.n_seen >= 1);
        }
    }

    #[test]
    fn sweep_points_ascending() {
        let fleet = toy_fleet(10, &[100, 10, 50], &mut ChaCha8Rng::seed_from_u64(1));
        let refs: Vec<&SampleTensor> = fleet.iter().collect();
        let ckpt = train_model(&ModelSpec::Dummy, &refs, &refs, &quick(), 0).unwrap().checkpoint;
        let curve = sweep_usable_cycles(&ckpt, &refs, &[100, 10, 50], 0.15).unwrap();
        assert_eq!(curve.iter().map(|p| p.s).collect::<Vec<_>>(), vec![10, 50, 100]);
        assert!(curve.iter().all(|p| p.n == 10));
        assert!(sweep_usable_cycles(&ckpt, &refs, &[20], 0.15).is_err());
        assert!(sweep_usable_cycles(&ckpt, &refs, &[0], 0.15).is_err());
    }

    #[test]
    fn sweep_retrain_trains_per_s() {
        let fleet = toy_fleet(10, &[3, 6], &mut ChaCha8Rng::seed_from_u64(2));
        let split = split_dataset_with(&fleet, 0, &SplitOptions::default()).unwrap();
        let curve = sweep_retrain(&spec(), &fleet, &split, &[6, 3], &quick(), 0, 0.15).unwrap();
        assert_eq!(curve.len(), 2);
        assert_eq!(curve[0].s, 3);
    }

    #[test]
    fn transfer_consistency() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let source = toy_fleet(12, &[4], &mut rng);
        let target = toy_fleet(10, &[4], &mut rng);
        let src: Vec<&SampleTensor> = source.iter().collect();
        let tgt: Vec<&SampleTensor> = target.iter().collect();
        let pre = train_model(&spec(), &src[..8], &src[8..], &quick(), 0).unwrap().checkpoint;
        let (tr, va, te) = (&tgt[..6], &tgt[6..8], &tgt[8..]);

        let frozen = transfer_run(&pre, &src, tr, va, &src[8..], TransferMode::Frozen, &quick(), 1, 0.15).unwrap();
        assert_eq!(frozen.test, evaluate(&pre, &src[8..], 0.15).unwrap());

        let zero = TrainConfig { epochs: 0, ..quick() };
        let ft0 = transfer_run(&pre, &src, tr, va, te, TransferMode::FineTune, &zero, 1, 0.15).unwrap();
        let fr = transfer_run(&pre, &src, tr, va, te, TransferMode::Frozen, &zero, 1, 0.15).unwrap();
        assert_eq!(ft0.test, fr.test);
        assert_eq!(ft0.checkpoint, fr.checkpoint);

        let ft = transfer_run(&pre, &src, tr, va, te, TransferMode::FineTune, &quick(), 1, 0.15).unwrap();
        let da0 = transfer_run(&pre, &src, tr, va, te, TransferMode::DomainAdapt { weight: 0.0 }, &quick(), 1, 0.15)
            .unwrap();
        assert_eq!(ft.batch_losses.len(), da0.batch_losses.len());
        for (a, b) in ft.batch_losses.iter().zip(&da0.batch_losses) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
        let da = transfer_run(&pre, &src, tr, va, te, TransferMode::DomainAdapt { weight: 1.0 }, &quick(), 1, 0.15)
            .unwrap();
        assert!(da.batch_losses.iter().zip(&ft.batch_losses).any(|(a, b)| a != b));
    }

    #[test]
    fn experiment_report() {
        let fleet = toy_fleet(10, &[2, 4], &mut ChaCha8Rng::seed_from_u64(4));
        let cfg = ExperimentConfig {
            model: spec(),
            train: quick(),
            seeds: vec![5, 5],
            alpha: 0.15,
            split: SplitOptions::default(),
            sweep: Some(vec![4, 2]),
        };
        let a = run_experiment(&fleet, &cfg).unwrap();
        assert_eq!(a.report.mape.std, 0.0);
        assert_eq!(a.report.per_s.iter().map(|p| p.s).collect::<Vec<_>>(), vec![2, 4]);
        let b = run_experiment(&fleet, &cfg).unwrap();
        assert_eq!(serde_json::to_string(&a.report).unwrap(), serde_json::to_string(&b.report).unwrap());
        assert!(a.report.rows.iter().any(|r| r.metric == "mape_mean"));

        let three = ExperimentConfig { seeds: vec![0, 1, 2], sweep: None, ..cfg };
        let r = run_experiment(&fleet, &three).unwrap();
        assert_eq!(r.runs.len(), 3);
        let m: Vec<f64> = r.runs.iter().map(|x| x.test.mape).collect();
        assert_eq!(r.report.mape, MeanStd::of(&m));
    }
}

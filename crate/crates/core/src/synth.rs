//! Seeded synthetic degradation fleets with exact ground-truth lives.
//!
//! Each battery has a latent quality `u ∈ [0, 1)` that sets its linear fade rate
//! (log-uniformly) and its knee onset and sharpness, so fast early fade goes with
//! an early, sharp knee. Aging conditions scale the fade rate. A second latent, the
//! thermal sensitivity `w ∈ [0, 1)`, moves the knee earlier and sets how strongly the
//! cell's voltage responds to per-cycle temperature jitter; it leaves the linear fade
//! untouched. Initial capacity and the OCV midpoint vary per battery as nuisances.
//! Every cycle is a CC(-CV) charge and a CC discharge whose delivered charge equals
//! `Q_nom · SOH(n)` and whose voltage curve drifts with SOH and internal resistance.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::battery::{
    AgingCondition, BatteryFormat, BatteryRecord, Cycle, LifeLabel, TimePoint, DEFAULT_EOL_THRESHOLD,
    EXTRAPOLATION_BAND, MIN_LIFE,
};
use crate::error::{Error, Result};
use crate::ingest::{save_battery, DatasetTag, Manifest, ManifestEntry};
use crate::preprocess::MAX_CYCLES;
use crate::seed::rng_for;

/// Fleets may censor at most this fraction of batteries.
pub const MAX_CENSORED_FRACTION: f64 = 0.10;
/// SOH values this close to the threshold are redrawn so labels are unambiguous.
const TIE_MARGIN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Chemistry {
    pub name: String,
    pub battery_format: BatteryFormat,
    pub anode: String,
    pub cathode: String,
    pub electrolyte: String,
    pub v_min: f64,
    pub v_max: f64,
    /// Logistic steepness of the open-circuit curve over state of charge.
    pub steepness: f64,
    pub nominal_capacity: f64,
    /// Initial internal resistance in ohms.
    pub resistance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Protocol {
    pub name: String,
    /// C-rates.
    pub charge_rate: f64,
    pub discharge_rate: f64,
    /// Share of the charge delivered in a constant-voltage tail; 0 disables it.
    pub cv_fraction: f64,
    /// Multiplier on the fade rate.
    pub fade_factor: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum KneeShape {
    /// `b · max(0, n − n_knee)²`.
    #[default]
    Quadratic,
    /// `2 b τ² (e^{x/τ} − 1 − x/τ)` with `x = max(0, n − n_knee)`; matches the
    /// quadratic near the onset and accelerates afterwards.
    Exponential,
}

/// Width of the exponential knee, in cycles.
pub const EXPONENTIAL_KNEE_WIDTH: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FadeRanges {
    /// Linear fade per cycle before condition factors, log-uniform in `[a_min, a_max]`.
    pub a_min: f64,
    pub a_max: f64,
    /// Knee onset as a fraction of the linear life `(1 − λ) / a`.
    pub knee_onset_min: f64,
    pub knee_onset_max: f64,
    /// Knee strength `β`, with `b = β · a² / (1 − λ)`.
    pub knee_strength_min: f64,
    pub knee_strength_max: f64,
    pub shape: KneeShape,
    /// Fade multiplier per degree above `reference_temperature` (exponential).
    pub temperature_coefficient: f64,
    pub reference_temperature: f64,
    /// Initial capacity is uniform in `Q_nom · [1 − s, 1 + s]`.
    pub initial_capacity_spread: f64,
    /// A latent thermal sensitivity `w ∈ [0, 1)` moves the knee onset by
    /// `−shift · (2w − 1)` and sets the entropic voltage coefficient to `w · entropic_max`.
    pub sensitivity_onset_shift: f64,
    /// Volts per kelvin.
    pub entropic_max: f64,
}

impl Default for FadeRanges {
    fn default() -> Self {
        FadeRanges {
            a_min: 1.2e-4,
            a_max: 6.0e-4,
            knee_onset_min: 0.55,
            knee_onset_max: 0.85,
            knee_strength_min: 0.5,
            knee_strength_max: 3.0,
            shape: KneeShape::Quadratic,
            temperature_coefficient: 0.015,
            reference_temperature: 25.0,
            initial_capacity_spread: 0.01,
            sensitivity_onset_shift: 0.08,
            entropic_max: 1.0e-3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseLevels {
    /// Volts, Gaussian per point.
    pub voltage: f64,
    /// Relative, Gaussian per cycle on delivered capacity.
    pub capacity: f64,
    /// Relative spread of the initial resistance around its quality trend.
    pub resistance: f64,
    /// Spread of the open-circuit midpoint across batteries, in state of charge.
    pub midpoint: f64,
    /// Kelvin, Gaussian per cycle: deviation of the cell from the chamber temperature.
    pub cycle_temperature: f64,
}

impl Default for NoiseLevels {
    fn default() -> Self {
        NoiseLevels {
            voltage: 0.002,
            capacity: 0.0003,
            resistance: 0.1,
            midpoint: 0.03,
            cycle_temperature: 2.0,
        }
    }
}

impl NoiseLevels {
    pub fn none() -> Self {
        NoiseLevels {
            voltage: 0.0,
            capacity: 0.0,
            resistance: 0.0,
            midpoint: 0.0,
            cycle_temperature: 0.0,
        }
    }
}

/// Fractions of batteries whose record stops early.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct TruncationConfig {
    /// Stop with the final SOH inside the extrapolation band above the threshold.
    pub in_band: f64,
    /// Stop with the final SOH above the band.
    pub above_band: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub n_batteries: usize,
    pub id_prefix: String,
    pub eol_threshold: f64,
    /// Longest test any battery runs.
    pub max_cycles: u32,
    /// Cycles recorded after the end of life.
    pub post_eol_cycles: u32,
    /// Cycles with full curves; later cycles keep only the half-cycle endpoints.
    pub detailed_cycles: u32,
    /// Raw points per detailed half-cycle.
    pub points_per_half: usize,
    pub chemistries: Vec<Chemistry>,
    pub protocols: Vec<Protocol>,
    pub temperatures: Vec<f64>,
    pub fade: FadeRanges,
    pub noise: NoiseLevels,
    pub truncation: TruncationConfig,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_batteries: 200,
            id_prefix: "syn".into(),
            eol_threshold: DEFAULT_EOL_THRESHOLD,
            max_cycles: 2500,
            post_eol_cycles: 10,
            detailed_cycles: 110,
            points_per_half: 40,
            chemistries: vec![
                Chemistry {
                    name: "lfp".into(),
                    battery_format: BatteryFormat::Cylindrical,
                    anode: "graphite".into(),
                    cathode: "LFP".into(),
                    electrolyte: "LiPF6 EC/DMC".into(),
                    v_min: 2.0,
                    v_max: 3.6,
                    steepness: 9.0,
                    nominal_capacity: 1.1,
                    resistance: 0.03,
                },
                Chemistry {
                    name: "nmc".into(),
                    battery_format: BatteryFormat::Pouch,
                    anode: "graphite".into(),
                    cathode: "NMC811".into(),
                    electrolyte: "LiPF6 EC/EMC".into(),
                    v_min: 2.7,
                    v_max: 4.2,
                    steepness: 5.0,
                    nominal_capacity: 2.4,
                    resistance: 0.02,
                },
            ],
            protocols: vec![
                Protocol {
                    name: "1C".into(),
                    charge_rate: 1.0,
                    discharge_rate: 1.0,
                    cv_fraction: 0.1,
                    fade_factor: 1.0,
                },
                Protocol {
                    name: "2C".into(),
                    charge_rate: 2.0,
                    discharge_rate: 1.0,
                    cv_fraction: 0.0,
                    fade_factor: 1.2,
                },
                Protocol {
                    name: "0.5C".into(),
                    charge_rate: 0.5,
                    discharge_rate: 2.0,
                    cv_fraction: 0.2,
                    fade_factor: 0.9,
                },
            ],
            temperatures: vec![25.0, 35.0, 45.0],
            fade: FadeRanges::default(),
            noise: NoiseLevels::default(),
            truncation: TruncationConfig::default(),
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_batteries == 0 {
            return bad("n_batteries must be positive".into());
        }
        if !(self.eol_threshold > 0.5 && self.eol_threshold < 1.0) {
            return bad(format!("eol_threshold must lie in (0.5, 1), got {}", self.eol_threshold));
        }
        if (self.max_cycles as usize) <= MAX_CYCLES {
            return bad(format!("max_cycles must exceed {MAX_CYCLES}"));
        }
        if (self.detailed_cycles as usize) < MAX_CYCLES {
            return bad(format!("detailed_cycles must be at least {MAX_CYCLES}"));
        }
        if self.points_per_half < 3 {
            return bad("points_per_half must be at least 3".into());
        }
        if self.chemistries.is_empty() || self.protocols.is_empty() || self.temperatures.is_empty() {
            return bad("chemistries, protocols and temperatures must be nonempty".into());
        }
        for c in &self.chemistries {
            if !(c.v_min < c.v_max) || c.v_min <= 0.0 {
                return bad(format!("chemistry {}: need 0 < v_min < v_max", c.name));
            }
            if !(c.nominal_capacity > 0.0 && c.steepness > 0.0 && c.resistance >= 0.0) {
                return bad(format!("chemistry {}: capacity and steepness must be positive", c.name));
            }
        }
        for p in &self.protocols {
            if !(p.charge_rate > 0.0 && p.discharge_rate > 0.0 && p.fade_factor > 0.0) {
                return bad(format!("protocol {}: rates and fade factor must be positive", p.name));
            }
            if !(0.0..0.9).contains(&p.cv_fraction) {
                return bad(format!("protocol {}: cv_fraction must lie in [0, 0.9)", p.name));
            }
        }
        let f = &self.fade;
        if !(0.0 < f.a_min && f.a_min <= f.a_max) {
            return bad("fade: need 0 < a_min <= a_max".into());
        }
        if !(0.0 < f.knee_onset_min && f.knee_onset_min <= f.knee_onset_max) {
            return bad("fade: need 0 < knee_onset_min <= knee_onset_max".into());
        }
        if !(0.0 <= f.knee_strength_min && f.knee_strength_min <= f.knee_strength_max) {
            return bad("fade: need 0 <= knee_strength_min <= knee_strength_max".into());
        }
        if !(0.0..0.05).contains(&f.initial_capacity_spread) {
            return bad("fade: initial_capacity_spread must lie in [0, 0.05)".into());
        }
        if !(0.0..0.5).contains(&f.sensitivity_onset_shift) || !(f.entropic_max >= 0.0) {
            return bad("fade: need 0 <= sensitivity_onset_shift < 0.5 and entropic_max >= 0".into());
        }
        let n = &self.noise;
        let nonneg = [n.voltage, n.capacity, n.resistance, n.midpoint, n.cycle_temperature];
        if !nonneg.iter().all(|&x| x >= 0.0) || n.capacity >= 0.05 || n.midpoint >= 0.2 {
            return bad("noise levels must be nonnegative (capacity below 0.05, midpoint below 0.2)".into());
        }
        let t = &self.truncation;
        if !(t.in_band >= 0.0 && t.above_band >= 0.0 && t.in_band + t.above_band <= 1.0) {
            return bad("truncation fractions must be nonnegative and sum to at most 1".into());
        }
        Ok(())
    }
}

/// Parameters of one SOH trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DegradationParams {
    /// SOH at cycle 0.
    #[serde(default = "one")]
    pub initial: f64,
    pub a: f64,
    pub b: f64,
    pub n_knee: f64,
    pub shape: KneeShape,
}

fn one() -> f64 {
    1.0
}

/// `initial − a·n − knee(n)`, clamped below at 0.5.
pub fn soh_model(p: &DegradationParams, n: f64) -> f64 {
    let x = (n - p.n_knee).max(0.0);
    let knee = match p.shape {
        KneeShape::Quadratic => p.b * x * x,
        KneeShape::Exponential => {
            let w = EXPONENTIAL_KNEE_WIDTH;
            2.0 * p.b * w * w * ((x / w).exp_m1() - x / w)
        }
    };
    (p.initial - p.a * n - knee).max(0.5)
}

/// First cycle in `1..=limit` with `soh_model ≤ lambda`.
pub fn first_crossing(p: &DegradationParams, lambda: f64, limit: u32) -> Option<u32> {
    (1..=limit).find(|&n| soh_model(p, n as f64) <= lambda)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub id: String,
    /// First cycle at or below the threshold; `None` past the cycle budget.
    pub true_life: Option<u32>,
    pub params: DegradationParams,
    /// Latent quality in `[0, 1)`; higher fades faster.
    pub quality: f64,
    /// Latent thermal sensitivity in `[0, 1)`; higher knees earlier.
    pub sensitivity: f64,
    pub last_cycle: u32,
    /// What label derivation must produce on the noiseless record.
    pub expected: LifeLabel,
    pub censored: bool,
}

#[derive(Debug, Clone)]
pub struct SynthBattery {
    pub record: BatteryRecord,
    pub truth: GroundTruth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FleetSummary {
    pub n_batteries: usize,
    pub n_labeled: usize,
    pub n_censored: usize,
    pub n_short_life: usize,
    pub n_above_band: usize,
    /// Min, lower quartile, median, upper quartile and max of the expected labels.
    pub label_quantiles: [f64; 5],
    /// Rank correlation between the early SOH slope and the true life.
    pub early_slope_spearman: f64,
}

#[derive(Debug, Clone)]
pub struct Fleet {
    pub batteries: Vec<SynthBattery>,
    pub summary: FleetSummary,
}

struct BatteryPlan<'a> {
    chem: &'a Chemistry,
    proto: &'a Protocol,
    params: DegradationParams,
    resistance: f64,
    midpoint: f64,
    entropic: f64,
}

fn draw_params(cfg: &SynthConfig, u: f64, w: f64, factor: f64, rng: &mut ChaCha8Rng) -> DegradationParams {
    let f = &cfg.fade;
    let initial = 1.0 + f.initial_capacity_spread * rng.gen_range(-1.0..1.0);
    let a = f.a_min * (f.a_max / f.a_min).powf(u) * factor;
    let linear_life = (1.0 - cfg.eol_threshold) / a;
    let jitter = rng.gen_range(-0.02..0.02) - f.sensitivity_onset_shift * (2.0 * w - 1.0);
    let onset = (f.knee_onset_max - (f.knee_onset_max - f.knee_onset_min) * u + jitter).max(0.05);
    let strength = f.knee_strength_min + (f.knee_strength_max - f.knee_strength_min) * u;
    DegradationParams {
        initial,
        a,
        b: strength * a / linear_life,
        n_knee: onset * linear_life,
        shape: f.shape,
    }
}

/// Label derivation applied to the analytic SOH at cycles `1..=last`.
fn expected_outcome(p: &DegradationParams, lambda: f64, last: u32) -> Option<LifeLabel> {
    let label = match first_crossing(p, lambda, last) {
        Some(n) => n,
        None => {
            let s_last = soh_model(p, last as f64);
            if s_last > lambda + EXTRAPOLATION_BAND {
                return Some(LifeLabel::ExcludedAboveBand);
            }
            let slope = s_last - soh_model(p, (last - 1) as f64);
            if !(slope < 0.0) {
                return Some(LifeLabel::ExcludedAboveBand);
            }
            let crossing = last as f64 + (lambda - s_last) / slope;
            // Crossings within rounding distance of an integer are ambiguous; the caller redraws.
            if (crossing - crossing.round()).abs() < 1e-4 {
                return None;
            }
            crossing.ceil() as u32
        }
    };
    Some(if label <= MIN_LIFE {
        LifeLabel::ExcludedShortLife
    } else {
        LifeLabel::Label(label)
    })
}

fn near_threshold(p: &DegradationParams, lambda: f64, n: u32) -> bool {
    n >= 1 && (soh_model(p, n as f64) - lambda).abs() < TIE_MARGIN
}

/// Open-circuit voltage over state of charge `x ∈ [0, 1]` with exact endpoints.
fn ocv(chem: &Chemistry, x: f64, midpoint: f64) -> f64 {
    let s = |z: f64| 1.0 / (1.0 + (-chem.steepness * (z - midpoint)).exp());
    let (lo, hi) = (s(0.0), s(1.0));
    chem.v_min + (chem.v_max - chem.v_min) * (s(x) - lo) / (hi - lo)
}

/// `n` increasing times from `start` to `end` with jittered interior spacing.
fn jittered_times(start: f64, end: f64, n: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let step = (end - start) / (n - 1) as f64;
    (0..n)
        .map(|k| {
            if k == 0 {
                start
            } else if k == n - 1 {
                end
            } else {
                start + step * (k as f64 + rng.gen_range(-0.3..0.3))
            }
        })
        .collect()
}

struct CycleContext<'a> {
    cfg: &'a SynthConfig,
    plan: &'a BatteryPlan<'a>,
    voltage_noise: Option<Normal<f64>>,
    capacity_noise: Option<Normal<f64>>,
}

const REST_SECONDS: f64 = 600.0;

impl CycleContext<'_> {
    fn clip(&self, v: f64) -> f64 {
        let c = self.plan.chem;
        let pad = 0.05 * (c.v_max - c.v_min);
        v.clamp(c.v_min - pad, c.v_max + pad)
    }

    fn noisy(&self, v: f64, rng: &mut ChaCha8Rng) -> f64 {
        match &self.voltage_noise {
            Some(d) => self.clip(v + d.sample(rng)),
            None => v,
        }
    }

    fn cycle(&self, index: u32, soh: f64, rng: &mut ChaCha8Rng) -> Result<Cycle> {
        let (chem, proto) = (self.plan.chem, self.plan.proto);
        let q = chem.nominal_capacity * soh;
        let i_c = proto.charge_rate * chem.nominal_capacity;
        let i_d = proto.discharge_rate * chem.nominal_capacity;
        let r = self.plan.resistance * (1.0 + 2.0 * (1.0 - soh));
        let mid = self.plan.midpoint + 0.3 * (1.0 - soh);
        // Entropic shift of the open-circuit voltage with this cycle's temperature deviation.
        let shift = self.plan.entropic * gaussian(self.cfg.noise.cycle_temperature, rng);
        let detailed = index <= self.cfg.detailed_cycles;
        let n = if detailed { self.cfg.points_per_half } else { 2 };

        // Charge: constant current to the CV share, then an exponentially decaying tail.
        let cv = proto.cv_fraction;
        let t_cc = (1.0 - cv) * q * 3600.0 / i_c;
        let tau = cv * q * 3600.0 / (0.95 * i_c);
        let t_cv = tau * 20f64.ln();
        let (mut t, mut v, mut i) = (Vec::new(), Vec::new(), Vec::new());
        let n_cc = if cv > 0.0 { (2 * n / 3).max(2) } else { n };
        for tk in jittered_times(0.0, t_cc, n_cc, rng) {
            let x = i_c * tk / 3600.0 / q;
            t.push(tk);
            v.push(self.noisy((ocv(chem, x, mid) + shift + i_c * r).min(chem.v_max), rng));
            i.push(i_c);
        }
        if cv > 0.0 {
            let n_cv = if detailed { n - n_cc + 1 } else { 2 };
            for tk in jittered_times(t_cc, t_cc + t_cv, n_cv, rng).into_iter().skip(1) {
                t.push(tk);
                v.push(self.noisy(chem.v_max, rng));
                i.push(i_c * (-(tk - t_cc) / tau).exp());
            }
        }
        let charge = TimePoint::series(&t, &v, &i)?;

        // Discharge: constant current; capacity noise scales the current, not the duration.
        let start = t.last().copied().unwrap_or(0.0) + REST_SECONDS;
        let t_d = q * 3600.0 / i_d;
        let eps = self.capacity_noise.as_ref().map_or(0.0, |d| d.sample(rng));
        let amps = i_d * (1.0 + eps);
        let (mut t, mut v, mut i) = (Vec::new(), Vec::new(), Vec::new());
        for tk in jittered_times(start, start + t_d, n, rng) {
            let x = 1.0 - (tk - start) / t_d;
            t.push(tk);
            v.push(self.noisy(self.clip(ocv(chem, x, mid) + shift - i_d * r), rng));
            i.push(-amps);
        }
        let discharge = TimePoint::series(&t, &v, &i)?;
        Cycle::from_points(index, charge, discharge)
    }
}

fn gaussian(std: f64, rng: &mut ChaCha8Rng) -> f64 {
    if std > 0.0 {
        Normal::new(0.0, std).expect("finite spread").sample(rng)
    } else {
        0.0
    }
}

fn quantiles(mut v: Vec<f64>) -> [f64; 5] {
    if v.is_empty() {
        return [f64::NAN; 5];
    }
    v.sort_by(f64::total_cmp);
    let at = |q: f64| {
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
    };
    [at(0.0), at(0.25), at(0.5), at(0.75), at(1.0)]
}

/// Average ranks (ties share the mean rank), 1-based.
fn ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut r = vec![0.0; x.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut j = k;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[k]] {
            j += 1;
        }
        let avg = (k + j) as f64 / 2.0 + 1.0;
        for &i in &idx[k..=j] {
            r[i] = avg;
        }
        k = j + 1;
    }
    r
}

/// Spearman rank correlation; NaN when either input is constant or shorter than 2.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len(), "spearman inputs differ in length");
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx * syy).sqrt()
}

/// Least-squares slope of measured SOH against cycle index over the first `cycles` cycles.
pub fn early_fade_slope(record: &BatteryRecord, cycles: usize) -> f64 {
    let q0 = record.condition.nominal_capacity;
    let pts: Vec<(f64, f64)> = record
        .cycles
        .iter()
        .take(cycles)
        .map(|c| (c.index as f64, c.discharge_capacity / q0))
        .collect();
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    sxy / sxx
}

fn generate_battery(cfg: &SynthConfig, seed: u64, idx: usize) -> Result<SynthBattery> {
    let mut rng = rng_for(seed, "synth-battery", idx as u64);
    let lambda = cfg.eol_threshold;
    let id = format!("{}{idx:04}", cfg.id_prefix);
    let chem = &cfg.chemistries[rng.gen_range(0..cfg.chemistries.len())];
    let proto = &cfg.protocols[rng.gen_range(0..cfg.protocols.len())];
    let temperature = cfg.temperatures[rng.gen_range(0..cfg.temperatures.len())];
    let factor = proto.fade_factor
        * (cfg.fade.temperature_coefficient * (temperature - cfg.fade.reference_temperature)).exp();

    for _attempt in 0..1000 {
        let u: f64 = rng.gen_range(0.0..1.0);
        let w: f64 = rng.gen_range(0.0..1.0);
        let params = draw_params(cfg, u, w, factor, &mut rng);
        let true_life = first_crossing(&params, lambda, cfg.max_cycles);
        if let Some(life) = true_life {
            if near_threshold(&params, lambda, life) || near_threshold(&params, lambda, life - 1) {
                continue;
            }
        }
        let natural_end = true_life.map_or(cfg.max_cycles, |l| (l + cfg.post_eol_cycles).min(cfg.max_cycles));
        let roll: f64 = rng.gen_range(0.0..1.0);
        let wanted = if roll < cfg.truncation.in_band {
            Some(true)
        } else if roll < cfg.truncation.in_band + cfg.truncation.above_band {
            Some(false)
        } else {
            None
        };
        let pre_eol_end = true_life.map_or(cfg.max_cycles, |l| l - 1);
        let last = match wanted {
            None => natural_end,
            Some(in_band) => {
                let candidates: Vec<u32> = (3..=pre_eol_end)
                    .filter(|&n| {
                        let s = soh_model(&params, n as f64);
                        let in_range = if in_band {
                            s > lambda + TIE_MARGIN && s <= lambda + EXTRAPOLATION_BAND - TIE_MARGIN
                        } else {
                            s > lambda + EXTRAPOLATION_BAND + TIE_MARGIN
                        };
                        in_range && n as usize > MAX_CYCLES
                    })
                    .collect();
                if candidates.is_empty() {
                    natural_end
                } else {
                    candidates[rng.gen_range(0..candidates.len())]
                }
            }
        };
        if !true_life.is_some_and(|l| l <= last)
            && (soh_model(&params, last as f64) - lambda - EXTRAPOLATION_BAND).abs() < TIE_MARGIN
        {
            continue;
        }
        let Some(expected) = expected_outcome(&params, lambda, last) else {
            continue;
        };
        let censored = true_life.is_none();

        let quality_resistance = chem.resistance * (1.0 + 0.3 * u);
        let spread = gaussian(cfg.noise.resistance, &mut rng);
        let midpoint = 0.5 + gaussian(cfg.noise.midpoint, &mut rng);
        let plan = BatteryPlan {
            chem,
            proto,
            params,
            resistance: (quality_resistance * (1.0 + spread)).max(0.0),
            midpoint,
            entropic: w * cfg.fade.entropic_max,
        };
        let ctx = CycleContext {
            cfg,
            plan: &plan,
            voltage_noise: (cfg.noise.voltage > 0.0).then(|| Normal::new(0.0, cfg.noise.voltage).expect("finite")),
            capacity_noise: (cfg.noise.capacity > 0.0).then(|| Normal::new(0.0, cfg.noise.capacity).expect("finite")),
        };
        let cycles = (1..=last)
            .map(|n| ctx.cycle(n, soh_model(&plan.params, n as f64), &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let condition = AgingCondition {
            battery_format: chem.battery_format,
            anode: chem.anode.clone(),
            cathode: chem.cathode.clone(),
            electrolyte: chem.electrolyte.clone(),
            charge_protocol: format!("{}-{}", proto.name, if proto.cv_fraction > 0.0 { "CCCV" } else { "CC" }),
            discharge_protocol: format!("{}C-CC", proto.discharge_rate),
            temperature,
            nominal_capacity: chem.nominal_capacity,
            manufacturer: "synthetic".into(),
        };
        let record = BatteryRecord::new(id.clone(), condition, cycles);
        return Ok(SynthBattery {
            record,
            truth: GroundTruth {
                id,
                true_life,
                params,
                quality: u,
                sensitivity: w,
                last_cycle: last,
                expected,
                censored,
            },
        });
    }
    Err(Error::Config(format!("battery {idx}: no admissible degradation draw in 1000 attempts")))
}

/// Generate every battery, then check censoring and summarize. Battery `i` draws from
/// its own stream of `seed`, so batteries are independent and generated in parallel.
pub fn generate_fleet(cfg: &SynthConfig, seed: u64) -> Result<Fleet> {
    cfg.validate()?;
    let batteries = (0..cfg.n_batteries)
        .into_par_iter()
        .map(|i| generate_battery(cfg, seed, i))
        .collect::<Result<Vec<_>>>()?;
    let n_censored = batteries.iter().filter(|b| b.truth.censored).count();
    if n_censored as f64 > MAX_CENSORED_FRACTION * cfg.n_batteries as f64 {
        return Err(Error::Config(format!(
            "{n_censored} of {} batteries do not reach end of life within {} cycles (limit {:.0}%); \
             raise max_cycles or the fade rates",
            cfg.n_batteries,
            cfg.max_cycles,
            MAX_CENSORED_FRACTION * 100.0
        )));
    }
    let summary = summarize(&batteries);
    Ok(Fleet { batteries, summary })
}

fn summarize(batteries: &[SynthBattery]) -> FleetSummary {
    let labels: Vec<f64> = batteries.iter().filter_map(|b| b.truth.expected.label()).map(f64::from).collect();
    let (slopes, lives): (Vec<f64>, Vec<f64>) = batteries
        .iter()
        .filter_map(|b| b.truth.true_life.map(|l| (early_fade_slope(&b.record, MAX_CYCLES), l as f64)))
        .unzip();
    FleetSummary {
        n_batteries: batteries.len(),
        n_labeled: labels.len(),
        n_censored: batteries.iter().filter(|b| b.truth.censored).count(),
        n_short_life: batteries.iter().filter(|b| b.truth.expected == LifeLabel::ExcludedShortLife).count(),
        n_above_band: batteries.iter().filter(|b| b.truth.expected == LifeLabel::ExcludedAboveBand).count(),
        label_quantiles: quantiles(labels),
        early_slope_spearman: if slopes.len() >= 2 { spearman(&slopes, &lives) } else { f64::NAN },
    }
}

fn outcome_name(o: LifeLabel) -> &'static str {
    match o {
        LifeLabel::Label(_) => "label",
        LifeLabel::ExcludedAboveBand => "excluded_above_band",
        LifeLabel::ExcludedShortLife => "excluded_short_life",
    }
}

/// One row of `labels.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelRow {
    pub id: String,
    pub true_life: Option<u32>,
    pub a: f64,
    pub b: f64,
    pub n_knee: f64,
    pub last_cycle: u32,
    pub expected_label: Option<u32>,
    pub outcome: String,
}

impl Fleet {
    pub fn label_rows(&self) -> Vec<LabelRow> {
        self.batteries
            .iter()
            .map(|b| LabelRow {
                id: b.truth.id.clone(),
                true_life: b.truth.true_life,
                a: b.truth.params.a,
                b: b.truth.params.b,
                n_knee: b.truth.params.n_knee,
                last_cycle: b.truth.last_cycle,
                expected_label: b.truth.expected.label(),
                outcome: outcome_name(b.truth.expected).into(),
            })
            .collect()
    }

    pub fn labels_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for row in self.label_rows() {
            w.serialize(row).map_err(|e| Error::Config(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }

    pub fn records(&self) -> Vec<BatteryRecord> {
        self.batteries.iter().map(|b| b.record.clone()).collect()
    }

    /// Battery files, `manifest.json` and `labels.csv` in `dir` (created if missing).
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = Manifest::default();
        for b in &self.batteries {
            let name = format!("{}.json", b.record.id);
            save_battery(&b.record, dir.join(&name))?;
            manifest.batteries.push(ManifestEntry {
                path: name.into(),
                dataset: DatasetTag::Synthetic,
            });
        }
        manifest.save(dir.join("manifest.json"))?;
        let labels = dir.join("labels.csv");
        fs::write(&labels, self.labels_csv()?).map_err(|e| Error::io(&labels, e))
    }
}

/// Read a `labels.csv` written by [`Fleet::write`].
pub fn read_labels(path: impl AsRef<Path>) -> Result<Vec<LabelRow>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::parse(path.display().to_string(), e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::parse(path.display().to_string(), e.to_string())))
        .collect()
}

/// Condition labels present in a fleet.
pub fn conditions(fleet: &Fleet) -> BTreeSet<String> {
    fleet.batteries.iter().map(|b| b.record.condition.label()).collect()
}

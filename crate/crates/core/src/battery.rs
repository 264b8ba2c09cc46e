//! Battery domain types and the cycling-physics arithmetic: capacity
//! integration, state of health, and life-label derivation.

use std::hash::{Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// End-of-life threshold used unless a dataset overrides it.
pub const DEFAULT_EOL_THRESHOLD: f64 = 0.80;
/// Threshold for CALB-style records, which rarely reach 80 % within the test.
pub const CALB_EOL_THRESHOLD: f64 = 0.90;
/// Width of the band above the threshold in which the label is extrapolated.
pub const EXTRAPOLATION_BAND: f64 = 0.025;
/// Batteries whose life does not exceed this are excluded.
pub const MIN_LIFE: u32 = 100;

const SECONDS_PER_HOUR: f64 = 3600.0;

/// One logged sample. `current` is positive while charging, negative while discharging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimePoint {
    pub t: f64,
    pub voltage: f64,
    pub current: f64,
    /// Amp-hours accumulated since the start of the half-cycle.
    pub cumulative_capacity: f64,
}

impl TimePoint {
    /// Build a half-cycle from raw columns, deriving the cumulative capacity channel.
    pub fn series(t: &[f64], voltage: &[f64], current: &[f64]) -> Result<Vec<TimePoint>> {
        if t.len() != voltage.len() || t.len() != current.len() {
            return Err(Error::Validation(format!(
                "column lengths differ: t={}, v={}, i={}",
                t.len(),
                voltage.len(),
                current.len()
            )));
        }
        let cumulative = cumulative_capacity(t, current)?;
        Ok(t.iter()
            .zip(voltage)
            .zip(current)
            .zip(cumulative)
            .map(|(((&t, &voltage), &current), cumulative_capacity)| TimePoint {
                t,
                voltage,
                current,
                cumulative_capacity,
            })
            .collect())
    }
}

fn check_monotone<T: Scalar>(t: &[T]) -> Result<()> {
    if let Some(k) = t.windows(2).position(|w| !(w[1] > w[0])) {
        return Err(Error::Validation(format!(
            "timestamps not strictly increasing at index {}",
            k + 1
        )));
    }
    Ok(())
}

/// Running trapezoidal integral of |I| dt in amp-hours, starting at zero.
pub fn cumulative_capacity<T: Scalar>(t: &[T], current: &[T]) -> Result<Vec<T>> {
    check_monotone(t)?;
    let hour = T::of(SECONDS_PER_HOUR);
    let half = T::of(0.5);
    let mut acc = T::zero();
    let mut out = Vec::with_capacity(t.len());
    for k in 0..t.len() {
        if k > 0 {
            acc += half * (current[k].abs() + current[k - 1].abs()) * (t[k] - t[k - 1]) / hour;
        }
        out.push(acc);
    }
    Ok(out)
}

/// Trapezoidal ∫|I| dt over the given samples, in amp-hours.
pub fn integrate_abs_current<T: Scalar>(t: &[T], current: &[T]) -> Result<T> {
    if t.is_empty() {
        return Err(Error::Validation("cannot integrate an empty series".into()));
    }
    Ok(*cumulative_capacity(t, current)?.last().unwrap())
}

/// Capacity passed over a span of logged points.
pub fn integrate_capacity(points: &[TimePoint]) -> Result<f64> {
    let t: Vec<f64> = points.iter().map(|p| p.t).collect();
    let i: Vec<f64> = points.iter().map(|p| p.current).collect();
    integrate_abs_current(&t, &i)
}

/// State of health as the ratio of a cycle's capacity to the reference capacity.
pub fn compute_soh<T: Scalar>(q_i: T, q_0: T) -> Result<T> {
    if !(q_0 > T::zero()) {
        return Err(Error::Domain(format!("reference capacity must be positive, got {q_0}")));
    }
    Ok(q_i / q_0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cycle {
    pub index: u32,
    pub charge_points: Vec<TimePoint>,
    pub discharge_points: Vec<TimePoint>,
    /// Amp-hours delivered during discharge.
    pub discharge_capacity: f64,
}

impl Cycle {
    /// Assemble a cycle whose discharge capacity is computed from its own points.
    pub fn from_points(
        index: u32,
        charge_points: Vec<TimePoint>,
        discharge_points: Vec<TimePoint>,
    ) -> Result<Self> {
        let discharge_capacity = integrate_capacity(&discharge_points)?;
        let cycle = Cycle {
            index,
            charge_points,
            discharge_points,
            discharge_capacity,
        };
        cycle.validate()?;
        Ok(cycle)
    }

    pub fn validate(&self) -> Result<()> {
        let ctx = |msg: String| Error::Validation(format!("cycle {}: {msg}", self.index));
        if self.index == 0 {
            return Err(ctx("cycle index must be positive".into()));
        }
        if self.charge_points.is_empty() || self.discharge_points.is_empty() {
            return Err(ctx("charge and discharge segments must be nonempty".into()));
        }
        let t: Vec<f64> = self
            .charge_points
            .iter()
            .chain(&self.discharge_points)
            .map(|p| p.t)
            .collect();
        check_monotone(&t).map_err(|e| ctx(e.to_string()))?;
        let q = integrate_capacity(&self.discharge_points)?;
        let scale = q.abs().max(self.discharge_capacity.abs()).max(f64::MIN_POSITIVE);
        if (q - self.discharge_capacity).abs() / scale > 1e-6 && (q - self.discharge_capacity).abs() > 1e-12 {
            return Err(ctx(format!(
                "discharge_capacity {} disagrees with integrated capacity {q}",
                self.discharge_capacity
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatteryFormat {
    Cylindrical,
    Pouch,
    Prismatic,
    Coin,
}

/// The nine aging factors. Two conditions are equal only when every field is
/// identical; floats compare by bit pattern.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgingCondition {
    pub battery_format: BatteryFormat,
    pub anode: String,
    pub cathode: String,
    pub electrolyte: String,
    pub charge_protocol: String,
    pub discharge_protocol: String,
    /// Degrees Celsius.
    pub temperature: f64,
    /// Amp-hours.
    pub nominal_capacity: f64,
    pub manufacturer: String,
}

impl AgingCondition {
    fn key(&self) -> (BatteryFormat, &str, &str, &str, &str, &str, u64, u64, &str) {
        (
            self.battery_format,
            &self.anode,
            &self.cathode,
            &self.electrolyte,
            &self.charge_protocol,
            &self.discharge_protocol,
            self.temperature.to_bits(),
            self.nominal_capacity.to_bits(),
            &self.manufacturer,
        )
    }

    /// Compact human-readable label for report tables.
    pub fn label(&self) -> String {
        format!(
            "{}/{}|{}|{}/{}|{}C|{}Ah|{}",
            self.anode,
            self.cathode,
            self.electrolyte,
            self.charge_protocol,
            self.discharge_protocol,
            self.temperature,
            self.nominal_capacity,
            self.manufacturer
        )
    }
}

impl PartialEq for AgingCondition {
    fn eq(&self, other: &Self) -> bool {
        self.key() == other.key()
    }
}

impl Eq for AgingCondition {}

impl Hash for AgingCondition {
    fn hash<H: Hasher>(&self, state: &mut H) {
        self.key().hash(state)
    }
}

impl PartialOrd for AgingCondition {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for AgingCondition {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.key().cmp(&other.key())
    }
}

/// Which capacity serves as the SOH reference.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Q0Mode {
    #[default]
    Nominal,
    FirstCycle,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatteryRecord {
    pub id: String,
    pub condition: AgingCondition,
    pub q0_mode: Q0Mode,
    pub cycles: Vec<Cycle>,
    pub life_label: Option<u32>,
    /// Cycles flagged for removal by hand.
    pub manual_exclusions: Vec<u32>,
    pub formation_cycles: Vec<u32>,
    pub rpt_cycles: Vec<u32>,
}

impl BatteryRecord {
    pub fn new(id: impl Into<String>, condition: AgingCondition, cycles: Vec<Cycle>) -> Self {
        BatteryRecord {
            id: id.into(),
            condition,
            q0_mode: Q0Mode::Nominal,
            cycles,
            life_label: None,
            manual_exclusions: Vec::new(),
            formation_cycles: Vec::new(),
            rpt_cycles: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Validation("battery id is empty".into()));
        }
        if !(self.condition.nominal_capacity > 0.0) {
            return Err(Error::Validation(format!(
                "battery {}: nominal capacity must be positive",
                self.id
            )));
        }
        for w in self.cycles.windows(2) {
            if w[1].index <= w[0].index {
                return Err(Error::Validation(format!(
                    "battery {}: cycle index {} follows {} (cycles must be strictly ordered, no duplicates)",
                    self.id, w[1].index, w[0].index
                )));
            }
        }
        for c in &self.cycles {
            c.validate()
                .map_err(|e| Error::Validation(format!("battery {}: {e}", self.id)))?;
        }
        if let Some(label) = self.life_label {
            if label <= MIN_LIFE {
                return Err(Error::Validation(format!(
                    "battery {}: life label {label} must exceed {MIN_LIFE}",
                    self.id
                )));
            }
        }
        Ok(())
    }

    /// Reference capacity according to `q0_mode`.
    pub fn reference_capacity(&self) -> Result<f64> {
        match self.q0_mode {
            Q0Mode::Nominal => Ok(self.condition.nominal_capacity),
            Q0Mode::FirstCycle => self
                .cycles
                .first()
                .map(|c| c.discharge_capacity)
                .ok_or_else(|| Error::InsufficientData(format!("battery {} has no cycles", self.id))),
        }
    }

    /// SOH per cycle, from discharge capacities.
    pub fn soh_trajectory(&self) -> Result<SohTrajectory> {
        let q0 = self.reference_capacity()?;
        let points = self
            .cycles
            .iter()
            .map(|c| Ok((c.index, compute_soh(c.discharge_capacity, q0)?)))
            .collect::<Result<Vec<_>>>()?;
        SohTrajectory::new(points)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SohTrajectory {
    points: Vec<(u32, f64)>,
}

impl SohTrajectory {
    pub fn new(points: Vec<(u32, f64)>) -> Result<Self> {
        if let Some(w) = points.windows(2).find(|w| w[1].0 <= w[0].0) {
            return Err(Error::Validation(format!(
                "SOH trajectory cycle indices not strictly increasing: {} then {}",
                w[0].0, w[1].0
            )));
        }
        Ok(SohTrajectory { points })
    }

    pub fn points(&self) -> &[(u32, f64)] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LifeLabel {
    Label(u32),
    ExcludedAboveBand,
    ExcludedShortLife,
}

impl LifeLabel {
    pub fn label(self) -> Option<u32> {
        match self {
            LifeLabel::Label(n) => Some(n),
            _ => None,
        }
    }
}

/// Cycle life: the first cycle whose SOH is no larger than `lambda`. Batteries that stop
/// cycling within `EXTRAPOLATION_BAND` above the threshold get a label from the line
/// through their last two points; anything higher is excluded, as are lives ≤ `MIN_LIFE`.
pub fn derive_life_label(traj: &SohTrajectory, lambda: f64) -> Result<LifeLabel> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::Domain(format!("threshold must lie in (0, 1), got {lambda}")));
    }
    let points = traj.points();
    let &(last_index, last_soh) = points
        .last()
        .ok_or_else(|| Error::InsufficientData("empty SOH trajectory".into()))?;

    let label = if let Some(&(n, _)) = points.iter().find(|(_, soh)| *soh <= lambda) {
        n
    } else if last_soh <= lambda + EXTRAPOLATION_BAND {
        if points.len() < 2 {
            return Err(Error::InsufficientData(
                "linear extrapolation needs at least two trajectory points".into(),
            ));
        }
        let (prev_index, prev_soh) = points[points.len() - 2];
        let slope = (last_soh - prev_soh) / (last_index as f64 - prev_index as f64);
        if !(slope < 0.0) {
            // A flat or rising tail never reaches the threshold.
            return Ok(LifeLabel::ExcludedAboveBand);
        }
        let crossing = last_index as f64 + (lambda - last_soh) / slope;
        // Absorb rounding in the two-point solve before taking the ceiling.
        let rounded = (crossing - 1e-7).ceil().max(last_index as f64);
        if rounded > u32::MAX as f64 {
            return Ok(LifeLabel::ExcludedAboveBand);
        }
        rounded as u32
    } else {
        return Ok(LifeLabel::ExcludedAboveBand);
    };

    if label <= MIN_LIFE {
        Ok(LifeLabel::ExcludedShortLife)
    } else {
        Ok(LifeLabel::Label(label))
    }
}

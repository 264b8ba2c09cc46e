//! Fixed-shape model inputs: per-cycle resampling, normalization, zero padding,
//! dataset materialization and the binary sample cache.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::battery::{derive_life_label, AgingCondition, BatteryRecord, Cycle, LifeLabel, Q0Mode, TimePoint};
use crate::error::{Error, Result};
use crate::ingest::{clean_record, CleaningReport, DatasetTag, FilterConfig, Manifest};
use crate::scalar::Scalar;

pub const POINTS_PER_HALF: usize = 150;
pub const POINTS_PER_CYCLE: usize = 2 * POINTS_PER_HALF;
pub const MAX_CYCLES: usize = 100;
pub const N_VARS: usize = 3;
/// Length of one flattened cycle token.
pub const TOKEN_LEN: usize = N_VARS * POINTS_PER_CYCLE;
/// Length of a flattened sample.
pub const SAMPLE_LEN: usize = N_VARS * MAX_CYCLES * POINTS_PER_CYCLE;

/// Channel order inside samples and tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Channel {
    Capacity = 0,
    Voltage = 1,
    Current = 2,
}

/// One cycle on the fixed 300-point grid: 150 charge points followed by 150 discharge points.
#[derive(Debug, Clone, PartialEq)]
pub struct ResampledCycle<T> {
    pub capacity: Vec<T>,
    pub voltage: Vec<T>,
    pub current: Vec<T>,
}

impl<T: Scalar> ResampledCycle<T> {
    pub fn channel(&self, ch: Channel) -> &[T] {
        match ch {
            Channel::Capacity => &self.capacity,
            Channel::Voltage => &self.voltage,
            Channel::Current => &self.current,
        }
    }
}

/// `n` points uniformly spanning `[start, end]`, with both ends exact.
pub fn uniform_grid<T: Scalar>(start: T, end: T, n: usize) -> Vec<T> {
    let steps = T::of_usize(n - 1);
    let mut grid: Vec<T> = (0..n).map(|k| start + (end - start) * T::of_usize(k) / steps).collect();
    grid[n - 1] = end;
    grid
}

/// Piecewise-linear interpolation of `(x, y)` at sorted `queries` inside `[x0, xN]`.
/// Queries landing on a knot return the knot value exactly.
pub fn interpolate_sorted<T: Scalar>(x: &[T], y: &[T], queries: &[T]) -> Vec<T> {
    let mut seg = 0;
    queries
        .iter()
        .map(|&q| {
            while seg + 2 < x.len() && x[seg + 1] <= q {
                seg += 1;
            }
            if q == x[seg + 1] {
                return y[seg + 1];
            }
            let w = (q - x[seg]) / (x[seg + 1] - x[seg]);
            y[seg] + w * (y[seg + 1] - y[seg])
        })
        .collect()
}

struct HalfGrid {
    capacity: Vec<f64>,
    voltage: Vec<f64>,
    current: Vec<f64>,
}

fn resample_half(points: &[TimePoint], what: &str, index: u32) -> Result<HalfGrid> {
    if points.len() < 2 {
        return Err(Error::Resample(format!(
            "cycle {index}: {what} segment has {} point(s), need at least 2",
            points.len()
        )));
    }
    let t: Vec<f64> = points.iter().map(|p| p.t).collect();
    let grid = uniform_grid(t[0], t[t.len() - 1], POINTS_PER_HALF);
    let col = |f: fn(&TimePoint) -> f64| interpolate_sorted(&t, &points.iter().map(f).collect::<Vec<_>>(), &grid);
    Ok(HalfGrid {
        capacity: col(|p| p.cumulative_capacity),
        voltage: col(|p| p.voltage),
        current: col(|p| p.current),
    })
}

/// Linear interpolation of both half-cycles onto 150 uniformly spaced times each.
pub fn resample_cycle(cycle: &Cycle) -> Result<ResampledCycle<f64>> {
    let charge = resample_half(&cycle.charge_points, "charge", cycle.index)?;
    let discharge = resample_half(&cycle.discharge_points, "discharge", cycle.index)?;
    let join = |a: Vec<f64>, b: Vec<f64>| a.into_iter().chain(b).collect::<Vec<_>>();
    Ok(ResampledCycle {
        capacity: join(charge.capacity, discharge.capacity),
        voltage: join(charge.voltage, discharge.voltage),
        current: join(charge.current, discharge.current),
    })
}

/// Capacity and current scale by 1/q_nominal; voltage by its maximum over the whole cycle.
pub fn normalize_cycle<T: Scalar>(rc: &ResampledCycle<T>, q_nominal: T) -> Result<ResampledCycle<T>> {
    if !(q_nominal > T::zero()) {
        return Err(Error::Normalization(format!("nominal capacity must be positive, got {q_nominal}")));
    }
    let vmax = rc.voltage.iter().copied().fold(T::neg_infinity(), T::max);
    if !(vmax > T::zero()) {
        return Err(Error::Normalization(format!("maximum voltage must be positive, got {vmax}")));
    }
    Ok(ResampledCycle {
        capacity: rc.capacity.iter().map(|&x| x / q_nominal).collect(),
        voltage: rc.voltage.iter().map(|&x| x / vmax).collect(),
        current: rc.current.iter().map(|&x| x / q_nominal).collect(),
    })
}

/// Model input: `3 × 100 × 300` values (channel-major, then cycle, then point),
/// zero in every cycle slot past `usable_cycles`.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTensor {
    pub battery_id: String,
    pub condition: AgingCondition,
    pub usable_cycles: usize,
    pub label: u32,
    data: Vec<f32>,
}

#[inline]
pub fn offset(ch: usize, cycle: usize, point: usize) -> usize {
    (ch * MAX_CYCLES + cycle) * POINTS_PER_CYCLE + point
}

impl SampleTensor {
    /// Assemble from normalized cycles. `cycles.len()` is the usable-cycle count.
    pub fn from_cycles(
        battery_id: String,
        condition: AgingCondition,
        label: u32,
        cycles: &[ResampledCycle<f64>],
    ) -> Result<Self> {
        let s = cycles.len();
        if s == 0 || s > MAX_CYCLES {
            return Err(Error::Domain(format!("usable cycles must be in [1, {MAX_CYCLES}], got {s}")));
        }
        let mut data = vec![0f32; SAMPLE_LEN];
        for (c, rc) in cycles.iter().enumerate() {
            for ch in [Channel::Capacity, Channel::Voltage, Channel::Current] {
                let o = offset(ch as usize, c, 0);
                for (dst, &src) in data[o..o + POINTS_PER_CYCLE].iter_mut().zip(rc.channel(ch)) {
                    *dst = src as f32;
                }
            }
        }
        Ok(SampleTensor {
            battery_id,
            condition,
            usable_cycles: s,
            label,
            data,
        })
    }

    /// Dense `3 × 100 × 300` buffer.
    pub fn data(&self) -> &[f32] {
        &self.data
    }

    /// Mutable access for tests that probe prefix behaviour.
    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, ch: Channel, cycle: usize, point: usize) -> f32 {
        self.data[offset(ch as usize, cycle, point)]
    }

    /// Flattened `(capacity, voltage, current)` rows of cycle slot `cycle`.
    pub fn write_token<T: Scalar>(&self, cycle: usize, out: &mut [T]) {
        for ch in 0..N_VARS {
            let o = offset(ch, cycle, 0);
            for (dst, &src) in out[ch * POINTS_PER_CYCLE..(ch + 1) * POINTS_PER_CYCLE]
                .iter_mut()
                .zip(&self.data[o..o + POINTS_PER_CYCLE])
            {
                *dst = T::of(src as f64);
            }
        }
    }
}

/// Normalized grids of the first `count` cycles of a record.
pub fn normalized_prefix(record: &BatteryRecord, count: usize) -> Result<Vec<ResampledCycle<f64>>> {
    if count > record.cycles.len() {
        return Err(Error::InsufficientData(format!(
            "battery {} has {} usable cycles, {count} requested",
            record.id,
            record.cycles.len()
        )));
    }
    record.cycles[..count]
        .iter()
        .map(|c| normalize_cycle(&resample_cycle(c)?, record.condition.nominal_capacity))
        .collect()
}

/// Sample from the first `s` cycles of a labeled record.
pub fn build_sample(record: &BatteryRecord, s: usize) -> Result<SampleTensor> {
    if s == 0 || s > MAX_CYCLES {
        return Err(Error::Domain(format!("usable cycles must be in [1, {MAX_CYCLES}], got {s}")));
    }
    let label = record
        .life_label
        .ok_or_else(|| Error::InsufficientData(format!("battery {} has no life label", record.id)))?;
    if label as usize <= s {
        return Err(Error::InsufficientData(format!(
            "battery {}: life label {label} does not exceed usable cycles {s}",
            record.id
        )));
    }
    let cycles = normalized_prefix(record, s)?;
    SampleTensor::from_cycles(record.id.clone(), record.condition.clone(), label, &cycles)
}

/// Options for turning raw records into labeled samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LabelingOptions {
    /// End-of-life threshold; the dataset default applies when absent.
    pub lambda: Option<f64>,
    pub q0_mode: Option<Q0Mode>,
    pub filter: FilterConfig,
}

impl Default for LabelingOptions {
    fn default() -> Self {
        LabelingOptions {
            lambda: None,
            q0_mode: None,
            filter: FilterConfig::default(),
        }
    }
}

/// Cleaned record, its cleaning report and label outcome.
#[derive(Debug, Clone)]
pub struct LabeledBattery {
    pub record: BatteryRecord,
    pub cleaning: CleaningReport,
    pub outcome: LifeLabel,
}

pub fn label_battery(record: &BatteryRecord, dataset: DatasetTag, opts: &LabelingOptions) -> Result<LabeledBattery> {
    let mut rec = record.clone();
    if let Some(mode) = opts.q0_mode {
        rec.q0_mode = mode;
    }
    let (mut cleaned, cleaning) = clean_record(&rec, opts.filter)?;
    let lambda = opts.lambda.unwrap_or_else(|| dataset.default_eol_threshold());
    let outcome = derive_life_label(&cleaned.soh_trajectory()?, lambda)?;
    cleaned.life_label = outcome.label();
    Ok(LabeledBattery {
        record: cleaned,
        cleaning,
        outcome,
    })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exclusion {
    pub battery_id: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<SampleTensor>,
    pub exclusions: Vec<Exclusion>,
    pub cleaning: Vec<CleaningReport>,
}

fn check_s_values(s_values: &BTreeSet<usize>) -> Result<()> {
    if s_values.is_empty() {
        return Err(Error::Config("usable-cycle set is empty".into()));
    }
    if let Some(&bad) = s_values.iter().find(|&&s| s == 0 || s > MAX_CYCLES) {
        return Err(Error::Config(format!("usable-cycle count {bad} outside [1, {MAX_CYCLES}]")));
    }
    Ok(())
}

fn samples_for(lb: &LabeledBattery, s_values: &BTreeSet<usize>) -> Result<Vec<SampleTensor>> {
    let Some(label) = lb.outcome.label() else {
        return Ok(Vec::new());
    };
    let rec = &lb.record;
    let wanted: Vec<usize> = s_values
        .iter()
        .copied()
        .filter(|&s| s < label as usize && s <= rec.cycles.len())
        .collect();
    let Some(&max_s) = wanted.last() else {
        return Ok(Vec::new());
    };
    let cycles = normalized_prefix(rec, max_s)?;
    wanted
        .iter()
        .map(|&s| SampleTensor::from_cycles(rec.id.clone(), rec.condition.clone(), label, &cycles[..s]))
        .collect()
}

/// One sample per (labeled battery, S) with `S < label` and `S ≤` available cycles, in
/// input order then ascending S. Unlabeled batteries are skipped and logged.
pub fn make_dataset_from_records(
    records: &[(BatteryRecord, DatasetTag)],
    s_values: &BTreeSet<usize>,
    opts: &LabelingOptions,
) -> Result<Dataset> {
    check_s_values(s_values)?;
    let per_battery: Vec<Result<(LabeledBattery, Vec<SampleTensor>)>> = records
        .par_iter()
        .map(|(rec, tag)| {
            let lb = label_battery(rec, *tag, opts)?;
            let samples = samples_for(&lb, s_values)?;
            Ok((lb, samples))
        })
        .collect();
    let mut ds = Dataset::default();
    for item in per_battery {
        let (lb, samples) = item?;
        match lb.outcome {
            LifeLabel::Label(_) => {}
            other => {
                log::info!("excluding battery {}: {:?}", lb.record.id, other);
                ds.exclusions.push(Exclusion {
                    battery_id: lb.record.id.clone(),
                    reason: format!("{other:?}"),
                });
            }
        }
        ds.cleaning.push(lb.cleaning);
        ds.samples.extend(samples);
    }
    if ds.samples.is_empty() {
        return Err(Error::Config("dataset is empty after exclusions".into()));
    }
    Ok(ds)
}

/// Load every battery in a manifest and materialize its samples.
pub fn make_dataset(manifest: &Manifest, s_values: &BTreeSet<usize>, opts: &LabelingOptions) -> Result<Dataset> {
    check_s_values(s_values)?;
    let records = manifest
        .batteries
        .par_iter()
        .map(|e| Ok((crate::ingest::load_battery(manifest.resolve(e))?, e.dataset)))
        .collect::<Result<Vec<_>>>()?;
    make_dataset_from_records(&records, s_values, opts)
}

const CACHE_MAGIC: &[u8; 4] = b"BLPT";
const CACHE_VERSION: u32 = 1;

/// Binary sample cache: `"BLPT"`, version u32, count u32, then per sample the id
/// (u32 length + UTF-8 bytes), S as u16, label as u32 and 90 000 f32 values; all
/// little-endian. Aging conditions are not stored.
pub fn encode_cache(samples: &[SampleTensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + samples.len() * (SAMPLE_LEN * 4 + 32));
    out.extend_from_slice(CACHE_MAGIC);
    out.extend_from_slice(&CACHE_VERSION.to_le_bytes());
    out.extend_from_slice(&(samples.len() as u32).to_le_bytes());
    for s in samples {
        out.extend_from_slice(&(s.battery_id.len() as u32).to_le_bytes());
        out.extend_from_slice(s.battery_id.as_bytes());
        out.extend_from_slice(&(s.usable_cycles as u16).to_le_bytes());
        out.extend_from_slice(&s.label.to_le_bytes());
        for v in &s.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(format!("byte {}", self.pos), "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Decode a cache, attaching each sample's aging condition by battery id.
pub fn decode_cache(bytes: &[u8], conditions: &HashMap<String, AgingCondition>) -> Result<Vec<SampleTensor>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::parse("byte 0", "bad magic, expected BLPT"));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::parse("byte 4", format!("unsupported cache version {version}")));
    }
    let n = r.u32()? as usize;
    let mut out = Vec::with_capacity(n);
    for k in 0..n {
        let len = r.u32()? as usize;
        let id = String::from_utf8(r.take(len)?.to_vec())
            .map_err(|e| Error::parse(format!("sample {k}"), e.to_string()))?;
        let s = r.u16()? as usize;
        let label = r.u32()?;
        let raw = r.take(SAMPLE_LEN * 4)?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let condition = conditions
            .get(&id)
            .cloned()
            .ok_or_else(|| Error::Validation(format!("cached sample {k}: unknown battery id {id}")))?;
        if s == 0 || s > MAX_CYCLES {
            return Err(Error::Validation(format!("cached sample {k}: usable cycles {s} out of range")));
        }
        out.push(SampleTensor {
            battery_id: id,
            condition,
            usable_cycles: s,
            label,
            data,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::parse(format!("byte {}", r.pos), "trailing bytes after last sample"));
    }
    Ok(out)
}

pub fn write_cache(path: impl AsRef<Path>, samples: &[SampleTensor]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_cache(samples)).map_err(|e| Error::io(path, e))
}

pub fn read_cache(path: impl AsRef<Path>, conditions: &HashMap<String, AgingCondition>) -> Result<Vec<SampleTensor>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_cache(&bytes, conditions)
}

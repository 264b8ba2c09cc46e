//! Standardized battery files, fleet manifests and cycle cleaning.
//!
//! A battery file is UTF-8 JSON holding one battery:
//!
//! ```json
//! {"id": "...", "condition": {...nine aging factors...}, "q0_mode": "nominal",
//!  "manual_exclusions": [], "cycles": [{"index": 1,
//!    "charge": {"t": [...], "v": [...], "i": [...]},
//!    "discharge": {"t": [...], "v": [...], "i": [...]},
//!    "discharge_capacity": 1.07}]}
//! ```
//!
//! Floats are written with at most 9 significant digits. Optional
//! `formation_cycles` / `rpt_cycles` lists are emitted only when nonempty.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::battery::{
    AgingCondition, BatteryRecord, Cycle, Q0Mode, TimePoint, CALB_EOL_THRESHOLD, DEFAULT_EOL_THRESHOLD,
};
use crate::error::{Error, Result};

/// Round to 9 significant digits, the precision of the on-disk format.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct F9(f64);

impl Serialize for F9 {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_f64(round_sig9(self.0))
    }
}

impl<'de> Deserialize<'de> for F9 {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        f64::deserialize(d).map(F9)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HalfCycleFile {
    t: Vec<F9>,
    v: Vec<F9>,
    i: Vec<F9>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CycleFile {
    index: u32,
    charge: HalfCycleFile,
    discharge: HalfCycleFile,
    discharge_capacity: F9,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct BatteryFile {
    id: String,
    condition: AgingCondition,
    q0_mode: Q0Mode,
    manual_exclusions: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    formation_cycles: Vec<u32>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    rpt_cycles: Vec<u32>,
    cycles: Vec<CycleFile>,
}

fn half_to_file(points: &[TimePoint]) -> HalfCycleFile {
    HalfCycleFile {
        t: points.iter().map(|p| F9(p.t)).collect(),
        v: points.iter().map(|p| F9(p.voltage)).collect(),
        i: points.iter().map(|p| F9(p.current)).collect(),
    }
}

fn half_from_file(h: &HalfCycleFile) -> Result<Vec<TimePoint>> {
    let col = |c: &[F9]| c.iter().map(|x| x.0).collect::<Vec<_>>();
    TimePoint::series(&col(&h.t), &col(&h.v), &col(&h.i))
}

fn to_file(record: &BatteryRecord) -> BatteryFile {
    BatteryFile {
        id: record.id.clone(),
        condition: record.condition.clone(),
        q0_mode: record.q0_mode,
        manual_exclusions: record.manual_exclusions.clone(),
        formation_cycles: record.formation_cycles.clone(),
        rpt_cycles: record.rpt_cycles.clone(),
        cycles: record
            .cycles
            .iter()
            .map(|c| CycleFile {
                index: c.index,
                charge: half_to_file(&c.charge_points),
                discharge: half_to_file(&c.discharge_points),
                discharge_capacity: F9(c.discharge_capacity),
            })
            .collect(),
    }
}

fn from_file(file: BatteryFile) -> Result<BatteryRecord> {
    let mut cycles = Vec::with_capacity(file.cycles.len());
    for c in &file.cycles {
        let locus = |e: Error| Error::Validation(format!("battery {}, cycle {}: {e}", file.id, c.index));
        let charge = half_from_file(&c.charge).map_err(locus)?;
        let discharge = half_from_file(&c.discharge).map_err(locus)?;
        cycles.push(Cycle {
            index: c.index,
            charge_points: charge,
            discharge_points: discharge,
            discharge_capacity: c.discharge_capacity.0,
        });
    }
    let record = BatteryRecord {
        id: file.id,
        condition: file.condition,
        q0_mode: file.q0_mode,
        cycles,
        life_label: None,
        manual_exclusions: file.manual_exclusions,
        formation_cycles: file.formation_cycles,
        rpt_cycles: file.rpt_cycles,
    };
    record.validate()?;
    Ok(record)
}

/// Canonical bytes of a record: fixed key order, compact, 9-digit floats, trailing newline.
pub fn encode_battery(record: &BatteryRecord) -> Vec<u8> {
    let mut bytes = serde_json::to_vec(&to_file(record)).expect("battery file serializes");
    bytes.push(b'\n');
    bytes
}

pub fn decode_battery(bytes: &[u8], locus: &str) -> Result<BatteryRecord> {
    let file: BatteryFile = serde_json::from_slice(bytes).map_err(|e| {
        Error::parse(format!("{locus}:{}:{}", e.line(), e.column()), e.to_string())
    })?;
    from_file(file)
}

pub fn load_battery(path: impl AsRef<Path>) -> Result<BatteryRecord> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_battery(&bytes, &path.display().to_string())
}

pub fn save_battery(record: &BatteryRecord, path: impl AsRef<Path>) -> Result<()> {
    record.validate()?;
    let path = path.as_ref();
    fs::write(path, encode_battery(record)).map_err(|e| Error::io(path, e))
}

/// The record as it reads back from disk: values rounded to the file precision and
/// derived channels recomputed from the rounded columns.
pub fn canonicalize(record: &BatteryRecord) -> Result<BatteryRecord> {
    let mut rec = decode_battery(&encode_battery(record), &record.id)?;
    rec.life_label = record.life_label;
    Ok(rec)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DatasetTag {
    #[serde(rename = "Li-ion")]
    LiIon,
    #[serde(rename = "Zn-ion")]
    ZnIon,
    #[serde(rename = "Na-ion")]
    NaIon,
    #[serde(rename = "CALB")]
    Calb,
    #[serde(rename = "synthetic")]
    Synthetic,
}

impl DatasetTag {
    pub fn default_eol_threshold(self) -> f64 {
        match self {
            DatasetTag::Calb => CALB_EOL_THRESHOLD,
            _ => DEFAULT_EOL_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    /// Relative paths resolve against the manifest's directory.
    pub path: PathBuf,
    pub dataset: DatasetTag,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub batteries: Vec<ManifestEntry>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Manifest {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let mut m: Manifest = serde_json::from_slice(&bytes).map_err(|e| {
            Error::parse(format!("{}:{}:{}", path.display(), e.line(), e.column()), e.to_string())
        })?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut bytes = serde_json::to_vec_pretty(self).expect("manifest serializes");
        bytes.push(b'\n');
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, entry: &ManifestEntry) -> PathBuf {
        if entry.path.is_absolute() {
            entry.path.clone()
        } else {
            self.base_dir.join(&entry.path)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RemovalReason {
    MedianOutlier,
    Formation,
    Rpt,
    Manual,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RemovedCycle {
    pub index: u32,
    pub reason: RemovalReason,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct CleaningReport {
    pub battery_id: String,
    /// Sorted by cycle index.
    pub removed: Vec<RemovedCycle>,
}

impl CleaningReport {
    pub fn removed_indices(&self) -> Vec<u32> {
        self.removed.iter().map(|r| r.index).collect()
    }

    fn add(&mut self, index: u32, reason: RemovalReason) {
        self.removed.push(RemovedCycle { index, reason });
    }

    fn finish(&mut self) {
        self.removed.sort_by_key(|r| r.index);
    }
}

/// Running median with edge replication; `window` must be odd.
pub fn running_median(values: &[f64], window: usize) -> Vec<f64> {
    let half = window / 2;
    let n = values.len();
    let mut buf = Vec::with_capacity(window);
    (0..n)
        .map(|k| {
            buf.clear();
            for off in 0..window {
                let j = (k + off).saturating_sub(half).min(n - 1);
                buf.push(values[j]);
            }
            buf.sort_by(f64::total_cmp);
            buf[half]
        })
        .collect()
}

fn median_pass(caps: &[f64], window: usize, rel_threshold: f64) -> Vec<bool> {
    let med = running_median(caps, window);
    caps.iter()
        .zip(&med)
        .map(|(&q, &m)| (q - m).abs() / m > rel_threshold)
        .collect()
}

/// Remove cycles whose discharge capacity deviates from the running median by more than
/// `rel_threshold` (relative). Passes repeat until none fire, so the result is a fixed point.
pub fn filter_outlier_cycles(
    record: &BatteryRecord,
    window: usize,
    rel_threshold: f64,
) -> Result<(BatteryRecord, CleaningReport)> {
    if window < 3 || window % 2 == 0 {
        return Err(Error::Config(format!("median window must be odd and >= 3, got {window}")));
    }
    if !(rel_threshold > 0.0) {
        return Err(Error::Config(format!("outlier threshold must be positive, got {rel_threshold}")));
    }
    let mut report = CleaningReport {
        battery_id: record.id.clone(),
        removed: Vec::new(),
    };
    let mut kept: Vec<&Cycle> = record.cycles.iter().collect();
    while kept.len() >= window {
        let caps: Vec<f64> = kept.iter().map(|c| c.discharge_capacity).collect();
        let flags = median_pass(&caps, window, rel_threshold);
        if !flags.contains(&true) {
            break;
        }
        let mut next = Vec::with_capacity(kept.len());
        for (c, out) in kept.into_iter().zip(flags) {
            if out {
                report.add(c.index, RemovalReason::MedianOutlier);
            } else {
                next.push(c);
            }
        }
        kept = next;
    }
    report.finish();
    let mut cleaned = record.clone();
    cleaned.cycles = kept.into_iter().cloned().collect();
    Ok((cleaned, report))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub window: usize,
    pub rel_threshold: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            window: 21,
            rel_threshold: 0.10,
        }
    }
}

/// Drop listed formation, RPT and manually excluded cycles, then median-filter the rest.
pub fn clean_record(record: &BatteryRecord, filter: FilterConfig) -> Result<(BatteryRecord, CleaningReport)> {
    let listed: Vec<(BTreeSet<u32>, RemovalReason)> = vec![
        (record.formation_cycles.iter().copied().collect(), RemovalReason::Formation),
        (record.rpt_cycles.iter().copied().collect(), RemovalReason::Rpt),
        (record.manual_exclusions.iter().copied().collect(), RemovalReason::Manual),
    ];
    let mut report = CleaningReport {
        battery_id: record.id.clone(),
        removed: Vec::new(),
    };
    let mut pre = record.clone();
    pre.cycles.retain(|c| {
        match listed.iter().find(|(set, _)| set.contains(&c.index)) {
            Some((_, reason)) => {
                report.add(c.index, *reason);
                false
            }
            None => true,
        }
    });
    let (cleaned, median) = filter_outlier_cycles(&pre, filter.window, filter.rel_threshold)?;
    report.removed.extend(median.removed);
    report.finish();
    Ok((cleaned, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::testutil::{condition, simple_cycle};
    use proptest::prelude::*;

    fn record_with_caps(caps: &[f64]) -> BatteryRecord {
        let cycles = caps
            .iter()
            .enumerate()
            .map(|(k, &q)| simple_cycle(k as u32 + 1, q))
            .collect();
        BatteryRecord::new("b0", condition("x"), cycles)
    }

    /// Brute-force oracle: explicit window with clamped indices, sorted, middle element.
    fn oracle_median(values: &[f64], window: usize) -> Vec<f64> {
        let h = window as isize / 2;
        (0..values.len() as isize)
            .map(|k| {
                let mut w: Vec<f64> = (k - h..=k + h)
                    .map(|j| values[j.clamp(0, values.len() as isize - 1) as usize])
                    .collect();
                w.sort_by(|a, b| a.partial_cmp(b).unwrap());
                w[h as usize]
            })
            .collect()
    }

    #[test]
    fn running_median_matches_oracle() {
        let vals: Vec<f64> = (0..40).map(|k| ((k * 37) % 11) as f64 + 0.1 * k as f64).collect();
        for w in [3, 5, 7, 21] {
            assert_eq!(running_median(&vals, w), oracle_median(&vals, w));
        }
    }

    #[test]
    fn constant_capacities_keep_everything() {
        let rec = record_with_caps(&[1.0; 30]);
        let (out, report) = filter_outlier_cycles(&rec, 5, 0.1).unwrap();
        assert_eq!(out.cycles.len(), 30);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn single_spike_removed() {
        let mut caps = vec![1.0; 15];
        caps[7] = 2.0;
        // Oracle flags exactly the spike.
        let med = oracle_median(&caps, 5);
        let flagged: Vec<usize> = (0..caps.len())
            .filter(|&k| (caps[k] - med[k]).abs() / med[k] > 0.1)
            .collect();
        assert_eq!(flagged, vec![7]);
        let (out, report) = filter_outlier_cycles(&record_with_caps(&caps), 5, 0.1).unwrap();
        assert_eq!(report.removed_indices(), vec![8]);
        assert_eq!(report.removed[0].reason, RemovalReason::MedianOutlier);
        assert_eq!(out.cycles.len(), 14);
    }

    #[test]
    fn smooth_linear_fade_keeps_everything() {
        let caps: Vec<f64> = (0..60).map(|k| 1.0 * (1.0 - 0.01 * k as f64).max(0.2)).collect();
        let med = oracle_median(&caps, 21);
        let worst = caps.iter().zip(&med).map(|(q, m)| (q - m).abs() / m).fold(0.0, f64::max);
        assert!(worst < 0.1);
        let (_, report) = filter_outlier_cycles(&record_with_caps(&caps), 21, 0.1).unwrap();
        assert!(report.removed.is_empty());
    }

    #[test]
    fn short_record_is_a_noop() {
        let rec = record_with_caps(&[1.0, 3.0, 1.0]);
        let (out, report) = filter_outlier_cycles(&rec, 21, 0.1).unwrap();
        assert_eq!(out, rec);
        assert!(report.removed.is_empty());
    }

    #[test]
    fn bad_filter_parameters_rejected() {
        let rec = record_with_caps(&[1.0; 10]);
        assert!(filter_outlier_cycles(&rec, 4, 0.1).is_err());
        assert!(filter_outlier_cycles(&rec, 1, 0.1).is_err());
        assert!(filter_outlier_cycles(&rec, 3, 0.0).is_err());
    }

    #[test]
    fn listed_cycles_removed_with_reasons() {
        let mut rec = record_with_caps(&[1.0; 10]);
        rec.formation_cycles = vec![1];
        rec.rpt_cycles = vec![5];
        rec.manual_exclusions = vec![9];
        let (out, report) = clean_record(&rec, FilterConfig::default()).unwrap();
        assert_eq!(out.cycles.len(), 7);
        let reasons: Vec<_> = report.removed.iter().map(|r| (r.index, r.reason)).collect();
        assert_eq!(
            reasons,
            vec![(1, RemovalReason::Formation), (5, RemovalReason::Rpt), (9, RemovalReason::Manual)]
        );
    }

    #[test]
    fn minimal_file_round_trips() {
        let rec = canonicalize(&record_with_caps(&[1.05])).unwrap();
        let bytes = encode_battery(&rec);
        let back = decode_battery(&bytes, "mem").unwrap();
        assert_eq!(back, rec);
        assert_eq!(back.cycles.len(), 1);
        assert_eq!(encode_battery(&back), bytes);
        let text = String::from_utf8(bytes).unwrap();
        assert!(text.starts_with("{\"id\":\"b0\",\"condition\":{\"battery_format\""));
        assert!(!text.contains("formation_cycles"));
    }

    #[test]
    fn duplicate_cycle_index_rejected_on_load() {
        let rec = record_with_caps(&[1.0, 1.0]);
        let mut text = String::from_utf8(encode_battery(&rec)).unwrap();
        text = text.replace("\"index\":2", "\"index\":1");
        assert!(matches!(decode_battery(text.as_bytes(), "mem"), Err(Error::Validation(_))));
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = decode_battery(b"{\n\"id\": 3}", "f.json").unwrap_err();
        match err {
            Error::Parse { locus, .. } => assert!(locus.starts_with("f.json:2:"), "{locus}"),
            other => panic!("unexpected {other}"),
        }
        assert!(matches!(decode_battery(b"{\"id\":\"a\",\"bogus\":1}", "f"), Err(Error::Parse { .. })));
    }

    #[test]
    fn save_and_load_through_disk() {
        let dir = tempfile::tempdir().unwrap();
        let rec = canonicalize(&record_with_caps(&[1.0, 0.99, 0.98])).unwrap();
        let p = dir.path().join("b.json");
        save_battery(&rec, &p).unwrap();
        let first = fs::read(&p).unwrap();
        save_battery(&rec, &p).unwrap();
        assert_eq!(fs::read(&p).unwrap(), first);
        assert_eq!(load_battery(&p).unwrap(), rec);
        assert!(matches!(
            save_battery(&rec, dir.path().join("missing/dir/b.json")),
            Err(Error::Io { .. })
        ));
    }

    #[test]
    fn round_sig9_is_idempotent_on_samples() {
        for x in [1.0 / 3.0, 123456.789123456, -2.5e-7, 0.1 + 0.2, 4.2] {
            let r = round_sig9(x);
            assert_eq!(round_sig9(r), r);
            assert!(((r - x) / x).abs() < 1e-8);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn filtering_is_idempotent_and_order_preserving(
            caps in prop::collection::vec(0.5f64..1.5, 0..60),
            window in prop::sample::select(vec![3usize, 5, 7, 11]),
            thr in 0.01f64..0.3,
        ) {
            let rec = record_with_caps(&caps);
            let (once, report) = filter_outlier_cycles(&rec, window, thr).unwrap();
            let (twice, again) = filter_outlier_cycles(&once, window, thr).unwrap();
            prop_assert!(again.removed.is_empty());
            prop_assert_eq!(&twice, &once);
            // Survivors are an untouched subsequence of the input.
            let mut it = rec.cycles.iter();
            for c in &once.cycles {
                prop_assert!(it.any(|o| o == c));
            }
            prop_assert_eq!(once.cycles.len() + report.removed.len(), rec.cycles.len());
            let raw = rec.soh_trajectory().unwrap();
            let cleaned = once.soh_trajectory().unwrap();
            prop_assert!(cleaned.points().iter().all(|p| raw.points().contains(p)));
        }

        #[test]
        fn canonical_records_round_trip(
            caps in prop::collection::vec(0.2f64..3.0, 1..40),
        ) {
            let rec = canonicalize(&record_with_caps(&caps)).unwrap();
            let bytes = encode_battery(&rec);
            let back = decode_battery(&bytes, "mem").unwrap();
            prop_assert_eq!(&back, &rec);
            prop_assert_eq!(encode_battery(&back), bytes);
        }
    }
}

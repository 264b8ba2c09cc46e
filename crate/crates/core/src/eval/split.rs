//! Seeded train/validation/test assignment.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::SampleTensor;
use crate::seed::rng_for;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitRatios {
    fn validate(&self) -> Result<()> {
        let parts = [self.train, self.val, self.test];
        if parts.iter().any(|r| !(*r >= 0.0)) || (parts.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!("split ratios {parts:?} must be nonnegative and sum to 1")));
        }
        Ok(())
    }

    /// Slice sizes for `n` units: train and validation rounded, test takes the rest.
    pub fn counts(&self, n: usize) -> (usize, usize, usize) {
        let train = ((self.train * n as f64).round() as usize).min(n);
        let val = ((self.val * n as f64).round() as usize).min(n - train);
        (train, val, n - train - val)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    /// All samples of one battery share a tag.
    #[default]
    Battery,
    /// Samples are shuffled individually; batteries may straddle splits.
    Sample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct SplitOptions {
    pub ratios: SplitRatios,
    pub granularity: Granularity,
    /// Condition labels (see `AgingCondition::label`) forced into the test split; the
    /// remaining units are divided between train and validation in the configured proportion.
    pub holdout_conditions: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub seed: u64,
    pub ratios: SplitRatios,
    /// One tag per input sample, in input order.
    pub tags: Vec<Split>,
}

impl SplitAssignment {
    pub fn indices(&self, split: Split) -> Vec<usize> {
        self.tags.iter().enumerate().filter(|(_, &t)| t == split).map(|(i, _)| i).collect()
    }

    pub fn select<'a>(&self, samples: &'a [SampleTensor], split: Split) -> Vec<&'a SampleTensor> {
        self.indices(split).into_iter().map(|i| &samples[i]).collect()
    }

    /// Battery ids per split.
    pub fn batteries(&self, samples: &[SampleTensor]) -> BTreeMap<Split, BTreeSet<String>> {
        let mut out: BTreeMap<Split, BTreeSet<String>> = BTreeMap::new();
        for (s, &t) in samples.iter().zip(&self.tags) {
            out.entry(t).or_default().insert(s.battery_id.clone());
        }
        out
    }
}

/// Battery-level 6:2:2 split.
pub fn split_dataset(samples: &[SampleTensor], seed: u64) -> Result<SplitAssignment> {
    split_dataset_with(samples, seed, &SplitOptions::default())
}

pub fn split_dataset_with(samples: &[SampleTensor], seed: u64, opts: &SplitOptions) -> Result<SplitAssignment> {
    opts.ratios.validate()?;
    let ids: BTreeSet<&str> = samples.iter().map(|s| s.battery_id.as_str()).collect();
    if ids.len() < 5 {
        return Err(Error::InsufficientData(format!("splitting needs at least 5 batteries, got {}", ids.len())));
    }
    // Units are batteries (sorted ids) or sample indices.
    let units: Vec<String> = match opts.granularity {
        Granularity::Battery => ids.iter().map(|s| s.to_string()).collect(),
        Granularity::Sample => (0..samples.len()).map(|i| i.to_string()).collect(),
    };
    let unit_of = |i: usize| -> String {
        match opts.granularity {
            Granularity::Battery => samples[i].battery_id.clone(),
            Granularity::Sample => i.to_string(),
        }
    };
    let held: BTreeSet<&str> = opts.holdout_conditions.iter().map(String::as_str).collect();
    let mut forced_test = BTreeSet::new();
    if !held.is_empty() {
        for (i, s) in samples.iter().enumerate() {
            if held.contains(s.condition.label().as_str()) {
                forced_test.insert(unit_of(i));
            }
        }
        if forced_test.is_empty() {
            return Err(Error::Config("holdout conditions match no sample".into()));
        }
    }
    let mut free: Vec<String> = units.into_iter().filter(|u| !forced_test.contains(u)).collect();
    free.shuffle(&mut rng_for(seed, "split", 0));

    let mut tag_of: BTreeMap<String, Split> = BTreeMap::new();
    if forced_test.is_empty() {
        let (n_train, n_val, _) = opts.ratios.counts(free.len());
        for (k, u) in free.into_iter().enumerate() {
            let t = if k < n_train {
                Split::Train
            } else if k < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            tag_of.insert(u, t);
        }
    } else {
        let denom = opts.ratios.train + opts.ratios.val;
        let frac = if denom > 0.0 { opts.ratios.train / denom } else { 1.0 };
        let n_train = ((frac * free.len() as f64).round() as usize).min(free.len());
        for (k, u) in free.into_iter().enumerate() {
            tag_of.insert(u, if k < n_train { Split::Train } else { Split::Val });
        }
        for u in forced_test {
            tag_of.insert(u, Split::Test);
        }
    }
    let tags = (0..samples.len()).map(|i| tag_of[&unit_of(i)]).collect();
    Ok(SplitAssignment {
        seed,
        ratios: opts.ratios,
        tags,
    })
}

#[cfg(test)]
mod tests {
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::preprocess::ResampledCycle;
    use crate::testutil::condition;

    fn fleet(n: usize, per_battery: usize) -> Vec<SampleTensor> {
        let cyc = ResampledCycle {
            capacity: vec![0.5; 300],
            voltage: vec![1.0; 300],
            current: vec![0.0; 300],
        };
        let mut out = Vec::new();
        for b in 0..n {
            for s in 1..=per_battery {
                let cycles = vec![cyc.clone(); s];
                out.push(
                    SampleTensor::from_cycles(format!("cell{b:03}"), condition(&format!("{}", b % 3)), 300, &cycles)
                        .unwrap(),
                );
            }
        }
        out
    }

    #[test]
    fn ten_batteries_split_six_two_two() {
        let samples = fleet(10, 2);
        let a = split_dataset(&samples, 4).unwrap();
        let b = a.batteries(&samples);
        assert_eq!(b[&Split::Train].len(), 6);
        assert_eq!(b[&Split::Val].len(), 2);
        assert_eq!(b[&Split::Test].len(), 2);
        assert_eq!(a, split_dataset(&samples, 4).unwrap());
        assert_ne!(a, split_dataset(&samples, 5).unwrap());
    }

    #[test]
    fn no_leakage_and_ratios_over_random_fleets() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for trial in 0..100 {
            let n = rng.gen_range(5..60);
            let samples = fleet(n, rng.gen_range(1..4));
            let a = split_dataset(&samples, trial).unwrap();
            let b = a.batteries(&samples);
            let all: Vec<&String> = b.values().flatten().collect();
            let unique: BTreeSet<&String> = all.iter().copied().collect();
            assert_eq!(all.len(), unique.len());
            assert_eq!(unique.len(), n);
            for (split, r) in [(Split::Train, 0.6), (Split::Val, 0.2), (Split::Test, 0.2)] {
                let got = b.get(&split).map_or(0, |s| s.len()) as f64;
                assert!((got - r * n as f64).abs() <= 1.0, "n={n} {split:?} {got}");
            }
        }
    }

    #[test]
    fn too_few_batteries() {
        assert!(matches!(split_dataset(&fleet(4, 3), 0), Err(Error::InsufficientData(_))));
    }

    #[test]
    fn sample_granularity_partitions_samples() {
        let samples = fleet(10, 5);
        let opts = SplitOptions {
            granularity: Granularity::Sample,
            ..SplitOptions::default()
        };
        let a = split_dataset_with(&samples, 1, &opts).unwrap();
        assert_eq!(a.indices(Split::Train).len(), 30);
        assert_eq!(a.indices(Split::Val).len(), 10);
        assert_eq!(a.indices(Split::Test).len(), 10);
    }

    #[test]
    fn condition_holdout_goes_to_test() {
        let samples = fleet(12, 1);
        let held = condition("0").label();
        let opts = SplitOptions {
            holdout_conditions: vec![held.clone()],
            ..SplitOptions::default()
        };
        let a = split_dataset_with(&samples, 2, &opts).unwrap();
        for (s, t) in samples.iter().zip(&a.tags) {
            assert_eq!(s.condition.label() == held, *t == Split::Test);
        }
        assert_eq!(a.indices(Split::Train).len(), 6);
        assert_eq!(a.indices(Split::Val).len(), 2);
    }
}

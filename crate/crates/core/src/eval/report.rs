//! Machine-readable and tabular evaluation reports.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::metrics::MeanStd;

/// One flat measurement: `{metric, split, condition, S, seed, value}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub metric: String,
    pub split: String,
    pub condition: Option<String>,
    #[serde(rename = "S")]
    pub s: Option<usize>,
    pub seed: Option<u64>,
    pub value: f64,
}

impl ReportRow {
    pub fn new(metric: &str, split: &str, value: f64) -> Self {
        ReportRow {
            metric: metric.into(),
            split: split.into(),
            condition: None,
            s: None,
            seed: None,
            value,
        }
    }

    pub fn seed(mut self, seed: u64) -> Self {
        self.seed = Some(seed);
        self
    }

    pub fn usable_cycles(mut self, s: usize) -> Self {
        self.s = Some(s);
        self
    }

    pub fn condition(mut self, c: impl Into<String>) -> Self {
        self.condition = Some(c.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionRow {
    pub seed: u64,
    pub condition: String,
    pub seen: bool,
    pub n: usize,
    pub mape: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    #[serde(rename = "S")]
    pub s: usize,
    pub n: usize,
    pub mape: f64,
    pub acc: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveStat {
    #[serde(rename = "S")]
    pub s: usize,
    pub mape: MeanStd,
    pub acc: MeanStd,
}

/// Aggregate over the configured seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub alpha: f64,
    pub seeds: Vec<u64>,
    pub untrained: bool,
    pub mape: MeanStd,
    pub acc: MeanStd,
    pub seen: Option<MeanStd>,
    pub unseen: Option<MeanStd>,
    pub per_condition: Vec<ConditionRow>,
    pub per_s: Vec<CurveStat>,
    pub rows: Vec<ReportRow>,
}

impl EvalReport {
    pub fn to_table(&self) -> String {
        let pct = (self.alpha * 100.0).round();
        let mut out = String::new();
        let _ = writeln!(out, "model {}  seeds {:?}{}", self.model, self.seeds, if self.untrained { "  (untrained)" } else { "" });
        let _ = writeln!(out, "test MAPE {}   acc{pct} {}", self.mape, self.acc);
        if let Some(s) = self.seen {
            let _ = writeln!(out, "seen MAPE {s}");
        }
        if let Some(u) = self.unseen {
            let _ = writeln!(out, "unseen MAPE {u}");
        }
        if !self.per_s.is_empty() {
            let _ = writeln!(out, "{:>5}  {:>13}  {:>13}", "S", "MAPE", format!("acc{pct}"));
            for p in &self.per_s {
                let _ = writeln!(out, "{:>5}  {:>13}  {:>13}", p.s, p.mape.to_string(), p.acc.to_string());
            }
        }
        out
    }
}

/// Plot data: `S,mape,acc15` with one row per usable-cycle count, ascending.
pub fn curve_csv(curve: &[CurveStat], alpha: f64) -> String {
    let mut out = format!("S,mape,acc{}\n", (alpha * 100.0).round());
    for p in curve {
        let _ = writeln!(out, "{},{},{}", p.s, p.mape.mean, p.acc.mean);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_and_row_json() {
        let m = MeanStd { mean: 0.25, std: 0.0 };
        let curve = [
            CurveStat { s: 10, mape: m, acc: m },
            CurveStat { s: 100, mape: m, acc: m },
        ];
        assert_eq!(curve_csv(&curve, 0.15), "S,mape,acc15\n10,0.25,0.25\n100,0.25,0.25\n");
        let row = ReportRow::new("mape", "test", 0.5).seed(1).usable_cycles(10);
        assert_eq!(
            serde_json::to_string(&row).unwrap(),
            r#"{"metric":"mape","split":"test","condition":null,"S":10,"seed":1,"value":0.5}"#
        );
    }
}

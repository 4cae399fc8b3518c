//! Detection quality: cell-level precision/recall/F1 and incident-level
//! early-detection statistics.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Detection, IncidentMatch, LabelGrid};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl Counts {
    pub fn add(&mut self, predicted: bool, actual: bool) {
        match (predicted, actual) {
            (true, true) => self.tp += 1,
            (true, false) => self.fp += 1,
            (false, true) => self.fn_ += 1,
            (false, false) => {}
        }
    }

    pub fn merge(&mut self, other: Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }

    pub fn precision(&self) -> f64 {
        ratio(self.tp, self.tp + self.fp)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    pub fn f1(&self) -> f64 {
        f1_score(self.precision(), self.recall())
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Classification {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: Counts,
}

impl From<Counts> for Classification {
    fn from(counts: Counts) -> Self {
        Classification { precision: counts.precision(), recall: counts.recall(), f1: counts.f1(), counts }
    }
}

/// Per-cell, per-window confusion counts. Every label grid needs exactly one
/// detection entry for the same bin and vice versa.
pub fn classification_metrics(detections: &[Detection], labels: &[LabelGrid]) -> Result<Classification> {
    let mut by_bin: HashMap<u64, &LabelGrid> = HashMap::with_capacity(labels.len());
    for l in labels {
        if by_bin.insert(l.end_bin.index, l).is_some() {
            return Err(Error::Argument(format!("duplicate label grid for bin {}", l.end_bin.index)));
        }
    }
    if detections.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} detection windows but {} label windows",
            detections.len(),
            labels.len()
        )));
    }
    let mut seen = HashSet::with_capacity(detections.len());
    let mut counts = Counts::default();
    for det in detections {
        let grid = by_bin
            .get(&det.bin.index)
            .ok_or_else(|| Error::Argument(format!("no labels for detection bin {}", det.bin.index)))?;
        if !seen.insert(det.bin.index) {
            return Err(Error::Argument(format!("duplicate detections for bin {}", det.bin.index)));
        }
        let mut predicted = vec![false; grid.values.len()];
        for c in &det.cells {
            if c.x >= grid.nx || c.y >= grid.ny {
                return Err(Error::Argument(format!("detected cell {c:?} outside the label grid")));
            }
            predicted[c.x * grid.ny + c.y] = true;
        }
        for (p, l) in predicted.iter().zip(&grid.values) {
            counts.add(*p, *l == 1);
        }
    }
    Ok(counts.into())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EarlyMetrics {
    pub early_pred_pct: f64,
    pub avg_distance_km: Option<f64>,
    pub avg_early_time_min: Option<f64>,
    pub matched_incidents: usize,
    pub early_incidents: usize,
}

/// Share of incidents detected before their official report, and the mean
/// distance and lead time over those early detections.
pub fn early_metrics(matches: &[IncidentMatch], total_incidents: usize) -> Result<EarlyMetrics> {
    let mut ids = HashSet::with_capacity(matches.len());
    for m in matches {
        if !ids.insert(m.incident_id.as_str()) {
            return Err(Error::Argument(format!("incident {} matched more than once", m.incident_id)));
        }
    }
    if matches.len() > total_incidents {
        return Err(Error::Argument(format!(
            "{} matched incidents exceed the total of {total_incidents}",
            matches.len()
        )));
    }
    let early: Vec<&IncidentMatch> = matches.iter().filter(|m| m.lead_minutes > 0.0).collect();
    let n = early.len();
    let mean = |f: fn(&IncidentMatch) -> f64| (n > 0).then(|| early.iter().map(|m| f(m)).sum::<f64>() / n as f64);
    Ok(EarlyMetrics {
        early_pred_pct: if total_incidents == 0 { 0.0 } else { 100.0 * n as f64 / total_incidents as f64 },
        avg_distance_km: mean(|m| m.distance_km),
        avg_early_time_min: mean(|m| m.lead_minutes),
        matched_incidents: matches.len(),
        early_incidents: n,
    })
}

/// All reported measures for one evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub early_pred_pct: f64,
    pub avg_distance_km: Option<f64>,
    pub avg_early_time_min: Option<f64>,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub matched_incidents: usize,
    pub total_incidents: usize,
}

impl MetricsReport {
    pub fn new(cls: Classification, early: EarlyMetrics, total_incidents: usize) -> Self {
        MetricsReport {
            f1: cls.f1,
            precision: cls.precision,
            recall: cls.recall,
            early_pred_pct: early.early_pred_pct,
            avg_distance_km: early.avg_distance_km,
            avg_early_time_min: early.avg_early_time_min,
            tp: cls.counts.tp,
            fp: cls.counts.fp,
            fn_: cls.counts.fn_,
            matched_incidents: early.matched_incidents,
            total_incidents,
        }
    }

    /// Field-wise mean over several evaluations; optional fields average the present values.
    pub fn mean(reports: &[MetricsReport]) -> Option<MetricsReport> {
        let n = reports.len();
        if n == 0 {
            return None;
        }
        let avg = |f: fn(&MetricsReport) -> f64| reports.iter().map(f).sum::<f64>() / n as f64;
        let avg_opt = |f: fn(&MetricsReport) -> Option<f64>| {
            let vals: Vec<f64> = reports.iter().filter_map(f).collect();
            (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
        };
        Some(MetricsReport {
            f1: avg(|r| r.f1),
            precision: avg(|r| r.precision),
            recall: avg(|r| r.recall),
            early_pred_pct: avg(|r| r.early_pred_pct),
            avg_distance_km: avg_opt(|r| r.avg_distance_km),
            avg_early_time_min: avg_opt(|r| r.avg_early_time_min),
            tp: reports.iter().map(|r| r.tp).sum(),
            fp: reports.iter().map(|r| r.fp).sum(),
            fn_: reports.iter().map(|r| r.fn_).sum(),
            matched_incidents: reports.iter().map(|r| r.matched_incidents).sum(),
            total_incidents: reports.iter().map(|r| r.total_incidents).sum(),
        })
    }
}

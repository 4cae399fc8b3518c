//! Bayesian-fusion baseline.
//!
//! Each report is treated as independent evidence about its cell. Reliability
//! `r ∈ 1..=10` becomes a likelihood ratio via `ρ = clamp(r/10, floor, ceiling)`,
//! and the posterior odds of an incident are
//! `prior/(1-prior) · Π ρ/(1-ρ)`. Cells without reports keep the prior.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Counts;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfConfig {
    pub prior: f64,
    pub reliability_floor: f64,
    pub reliability_ceiling: f64,
    pub threshold: f64,
}

impl Default for BfConfig {
    fn default() -> Self {
        BfConfig { prior: 0.01, reliability_floor: 0.05, reliability_ceiling: 0.95, threshold: 0.5 }
    }
}

impl BfConfig {
    pub fn validate(&self) -> Result<()> {
        let open = |v: f64| v > 0.0 && v < 1.0;
        if !(open(self.prior) && open(self.threshold)) {
            return Err(Error::config("bf", "prior and threshold must lie in (0, 1)"));
        }
        if !(open(self.reliability_floor)
            && open(self.reliability_ceiling)
            && self.reliability_floor < self.reliability_ceiling)
        {
            return Err(Error::config("bf", "need 0 < reliability_floor < reliability_ceiling < 1"));
        }
        Ok(())
    }

    pub fn rho(&self, reliability: u8) -> f64 {
        (f64::from(reliability) / 10.0).clamp(self.reliability_floor, self.reliability_ceiling)
    }

    /// Posterior incident probability for one cell given its report reliabilities.
    pub fn posterior(&self, reliabilities: &[u8]) -> f64 {
        let mut odds = self.prior / (1.0 - self.prior);
        for r in reliabilities {
            let rho = self.rho(*r);
            odds *= rho / (1.0 - rho);
        }
        if odds.is_infinite() {
            1.0
        } else {
            odds / (1.0 + odds)
        }
    }
}

/// Report reliabilities per flat cell index for one window.
pub type CellEvidence = Vec<Vec<u8>>;

/// Per-cell posterior probabilities.
pub fn bf_detect(evidence: &CellEvidence, cfg: &BfConfig) -> Result<Vec<f64>> {
    for cell in evidence {
        if let Some(r) = cell.iter().find(|r| !(1..=10).contains(*r)) {
            return Err(Error::Argument(format!("reliability {r} outside 1..=10")));
        }
    }
    Ok(evidence.iter().map(|rels| cfg.posterior(rels)).collect())
}

/// Flat cells whose posterior reaches the threshold.
pub fn bf_cells(evidence: &CellEvidence, cfg: &BfConfig) -> Result<Vec<usize>> {
    Ok(bf_detect(evidence, cfg)?.iter().enumerate().filter(|(_, p)| **p >= cfg.threshold).map(|(i, _)| i).collect())
}

/// Grids searched when calibrating on training data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BfCalibration {
    pub prior_grid: Vec<f64>,
    pub threshold_grid: Vec<f64>,
}

impl Default for BfCalibration {
    fn default() -> Self {
        let mut thresholds = vec![0.01, 0.02];
        thresholds.extend((1..20).map(|i| i as f64 * 0.05));
        thresholds.extend([0.97, 0.99]);
        BfCalibration { prior_grid: vec![0.001, 0.002, 0.005, 0.01, 0.02, 0.05, 0.1, 0.2], threshold_grid: thresholds }
    }
}

impl BfCalibration {
    pub fn validate(&self) -> Result<()> {
        let open = |v: &f64| *v > 0.0 && *v < 1.0;
        if self.prior_grid.is_empty() || self.threshold_grid.is_empty() {
            return Err(Error::config("bf", "prior_grid and threshold_grid must be non-empty"));
        }
        if !self.prior_grid.iter().all(open) || !self.threshold_grid.iter().all(open) {
            return Err(Error::config("bf", "grid values must lie in (0, 1)"));
        }
        Ok(())
    }
}

/// Training evidence in sparse form: cells with at least one report carry
/// their reliabilities and label; report-free cells are only counted.
#[derive(Debug, Clone, Default)]
pub struct CalibrationData {
    pub observed: Vec<(Vec<u8>, bool)>,
    pub empty_positive: u64,
    pub empty_negative: u64,
}

impl CalibrationData {
    pub fn add_window(&mut self, evidence: &CellEvidence, labels: &[u8]) {
        for (rels, label) in evidence.iter().zip(labels) {
            if rels.is_empty() {
                if *label == 1 {
                    self.empty_positive += 1;
                } else {
                    self.empty_negative += 1;
                }
            } else {
                self.observed.push((rels.clone(), *label == 1));
            }
        }
    }
}

/// Picks the (prior, threshold) pair with the highest training F1. Ties keep
/// the earliest pair in grid order (prior outer, threshold inner).
pub fn calibrate(data: &CalibrationData, base: &BfConfig, grids: &BfCalibration) -> Result<(BfConfig, f64)> {
    base.validate()?;
    grids.validate()?;
    let mut best: Option<(BfConfig, f64)> = None;
    for &prior in &grids.prior_grid {
        let cfg = BfConfig { prior, ..base.clone() };
        let probs: Vec<(f64, bool)> = data.observed.iter().map(|(r, l)| (cfg.posterior(r), *l)).collect();
        let empty_p = cfg.posterior(&[]);
        for &threshold in &grids.threshold_grid {
            let mut c = Counts::default();
            for (p, l) in &probs {
                c.add(*p >= threshold, *l);
            }
            if empty_p >= threshold {
                c.tp += data.empty_positive;
                c.fp += data.empty_negative;
            } else {
                c.fn_ += data.empty_positive;
            }
            let f1 = c.f1();
            if best.as_ref().is_none_or(|(_, b)| f1 > *b) {
                best = Some((BfConfig { threshold, ..cfg.clone() }, f1));
            }
        }
    }
    Ok(best.expect("grids are non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn no_reports_keeps_prior() {
        let cfg = BfConfig { prior: 0.03, ..BfConfig::default() };
        let p = bf_detect(&vec![vec![]; 6], &cfg).unwrap();
        assert!(p.iter().all(|v| (v - 0.03).abs() < 1e-15));
    }

    #[test]
    fn neutral_report_is_uninformative() {
        let cfg = BfConfig { prior: 0.2, ..BfConfig::default() };
        assert!((cfg.posterior(&[5]) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn two_reliable_reports() {
        let cfg = BfConfig { prior: 0.01, ..BfConfig::default() };
        let p = cfg.posterior(&[9, 9]);
        let odds = 0.01 / 0.99 * 81.0;
        assert!((p - odds / (1.0 + odds)).abs() < 1e-12);
        assert!((p - 0.450).abs() < 5e-4, "{p}");
    }

    #[test]
    fn clamping() {
        let cfg = BfConfig::default();
        assert_eq!(cfg.rho(10), 0.95);
        assert_eq!(cfg.rho(0), 0.05);
        assert!(bf_detect(&vec![vec![11]], &cfg).is_err());
    }

    #[test]
    fn calibration_prefers_separating_pair() {
        let mut data = CalibrationData::default();
        let evidence: CellEvidence = vec![vec![9, 9, 8], vec![2], vec![], vec![9, 8]];
        data.add_window(&evidence, &[1, 0, 0, 1]);
        data.add_window(&vec![vec![3], vec![], vec![], vec![]], &[0, 0, 0, 0]);
        let (cfg, f1) = calibrate(&data, &BfConfig::default(), &BfCalibration::default()).unwrap();
        assert_eq!(f1, 1.0);
        let cells = bf_cells(&evidence, &cfg).unwrap();
        assert_eq!(cells, vec![0, 3]);
    }
}

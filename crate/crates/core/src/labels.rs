//! Window labels from ground-truth incidents and detection-to-incident matching.
//!
//! A cell of the window ending at `t` is positive when some incident was
//! reported within `[t − α, t + β]` and lies within `δ` km of the cell centre.
//! Matching applies the same predicate in reverse, so every match would also
//! have been a positive label.

use std::fs::File;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Incident, Timestamp};
use crate::error::{Error, Result};
use crate::grid::{geodesic_km, CellIndex, GridSpec, TimeBin};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatchRule {
    /// Lookback, minutes.
    pub alpha_min: f64,
    /// Lookahead, minutes.
    pub beta_min: f64,
    /// Spatial radius, km.
    pub delta_km: f64,
}

impl Default for MatchRule {
    fn default() -> Self {
        MatchRule { alpha_min: 60.0, beta_min: 60.0, delta_km: 1.0 }
    }
}

impl MatchRule {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha_min >= 0.0 && self.alpha_min.is_finite()) {
            return Err(Error::config("labels", format!("alpha must be >= 0, got {}", self.alpha_min)));
        }
        if !(self.beta_min >= 0.0 && self.beta_min.is_finite()) {
            return Err(Error::config("labels", format!("beta must be >= 0, got {}", self.beta_min)));
        }
        if !(self.delta_km > 0.0 && self.delta_km.is_finite()) {
            return Err(Error::config("labels", format!("delta must be > 0, got {}", self.delta_km)));
        }
        Ok(())
    }

    /// Whether an incident reported at `incident_time` falls in the window ending at `t`.
    pub fn in_time(&self, t: Timestamp, incident_time: Timestamp) -> bool {
        let diff = (incident_time - t) as f64;
        diff >= -self.alpha_min * 60.0 && diff <= self.beta_min * 60.0
    }

    fn time_range(&self, t: Timestamp) -> (f64, f64) {
        (t as f64 - self.alpha_min * 60.0, t as f64 + self.beta_min * 60.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelGrid {
    pub end_bin: TimeBin,
    pub nx: usize,
    pub ny: usize,
    /// Flat `x * ny + y` order, values in {0, 1}.
    pub values: Vec<u8>,
}

impl LabelGrid {
    pub fn get(&self, c: CellIndex) -> u8 {
        self.values[c.x * self.ny + c.y]
    }

    pub fn positives(&self) -> impl Iterator<Item = usize> + '_ {
        self.values.iter().enumerate().filter(|(_, v)| **v == 1).map(|(i, _)| i)
    }
}

/// Label computation with cached cell centres.
#[derive(Debug, Clone)]
pub struct Labeler {
    spec: GridSpec,
    rule: MatchRule,
    centers: Vec<(f64, f64)>,
}

impl Labeler {
    pub fn new(spec: GridSpec, rule: MatchRule) -> Self {
        Labeler { spec, rule, centers: spec.centers() }
    }

    pub fn rule(&self) -> &MatchRule {
        &self.rule
    }

    /// Flat indices of cells whose centre is within δ of `(lat, lon)`.
    pub fn cells_near(&self, lat: f64, lon: f64) -> Vec<usize> {
        let spec = &self.spec;
        let (e, n) = spec.project(lat, lon);
        // Tangent-plane distance differs from geodesic by well under 5% at city scale.
        let r = self.rule.delta_km * 1.05 + 0.01;
        let span = |c: f64, count: usize| {
            let lo = ((c - r) / spec.cell_size_km - 0.5).ceil().max(0.0);
            let hi = ((c + r) / spec.cell_size_km - 0.5).floor().min(count as f64 - 1.0);
            (lo as i64, hi as i64)
        };
        let (x0, x1) = span(e, spec.nx);
        let (y0, y1) = span(n, spec.ny);
        let mut out = Vec::new();
        for x in x0..=x1 {
            for y in y0..=y1 {
                let i = x as usize * spec.ny + y as usize;
                if geodesic_km(self.centers[i], (lat, lon)) <= self.rule.delta_km {
                    out.push(i);
                }
            }
        }
        out
    }

    /// Incidents (as a slice of the time-sorted input) in the window ending at `t`.
    pub fn incidents_in_time<'a>(&self, incidents: &'a [Incident], t: Timestamp) -> &'a [Incident] {
        let (lo_t, hi_t) = self.rule.time_range(t);
        let lo = incidents.partition_point(|i| (i.time as f64) < lo_t);
        let hi = incidents.partition_point(|i| (i.time as f64) <= hi_t);
        if lo >= hi {
            &[]
        } else {
            &incidents[lo..hi]
        }
    }

    /// Sorted flat indices of positive cells. `incidents` must be time-sorted.
    pub fn positive_cells(&self, incidents: &[Incident], end_bin: TimeBin) -> Vec<usize> {
        let mut cells: Vec<usize> = self
            .incidents_in_time(incidents, end_bin.end())
            .iter()
            .flat_map(|inc| self.cells_near(inc.lat, inc.lon))
            .collect();
        cells.sort_unstable();
        cells.dedup();
        cells
    }

    pub fn label(&self, incidents: &[Incident], end_bin: TimeBin) -> LabelGrid {
        let mut values = vec![0u8; self.spec.cells()];
        for c in self.positive_cells(incidents, end_bin) {
            values[c] = 1;
        }
        LabelGrid { end_bin, nx: self.spec.nx, ny: self.spec.ny, values }
    }
}

/// Labels for the window ending at `end_bin`. Incidents need not be sorted.
pub fn label_window(incidents: &[Incident], spec: &GridSpec, end_bin: TimeBin, rule: &MatchRule) -> LabelGrid {
    let mut sorted = incidents.to_vec();
    sorted.sort_by_key(|i| i.time);
    Labeler::new(*spec, *rule).label(&sorted, end_bin)
}

/// Positive cells emitted by a detector for one window.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Detection {
    pub bin: TimeBin,
    pub cells: Vec<CellIndex>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IncidentMatch {
    pub incident_id: String,
    pub detection_bin: TimeBin,
    pub detection_cell: CellIndex,
    pub distance_km: f64,
    /// Positive when the detection preceded the official report.
    pub lead_minutes: f64,
}

/// Matches each incident to its earliest qualifying detection (ties: nearer,
/// then lower cell index). Unmatched incidents are omitted.
pub fn match_detections(
    detections: &[Detection],
    incidents: &[Incident],
    spec: &GridSpec,
    rule: &MatchRule,
) -> Vec<IncidentMatch> {
    let mut order: Vec<&Detection> = detections.iter().filter(|d| !d.cells.is_empty()).collect();
    order.sort_by_key(|d| d.bin.end());
    let ends: Vec<Timestamp> = order.iter().map(|d| d.bin.end()).collect();

    let mut out = Vec::new();
    for inc in incidents {
        // detection end d qualifies when inc.time - β ≤ d ≤ inc.time + α
        let lo_t = inc.time as f64 - rule.beta_min * 60.0;
        let hi_t = inc.time as f64 + rule.alpha_min * 60.0;
        let lo = ends.partition_point(|d| (*d as f64) < lo_t);
        let hi = ends.partition_point(|d| (*d as f64) <= hi_t);
        let mut best: Option<(Timestamp, f64, CellIndex, TimeBin)> = None;
        for det in &order[lo..hi] {
            let t = det.bin.end();
            if best.as_ref().is_some_and(|b| t > b.0) {
                break;
            }
            for &cell in &det.cells {
                let Ok(center) = spec.cell_center(cell) else { continue };
                let d = geodesic_km(center, (inc.lat, inc.lon));
                if d > rule.delta_km {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bt, bd, bc, _)) => (t, d, cell) < (*bt, *bd, *bc),
                };
                if better {
                    best = Some((t, d, cell, det.bin));
                }
            }
        }
        if let Some((t, d, cell, bin)) = best {
            out.push(IncidentMatch {
                incident_id: inc.id.clone(),
                detection_bin: bin,
                detection_cell: cell,
                distance_km: d,
                lead_minutes: (inc.time - t) as f64 / 60.0,
            });
        }
    }
    out
}

/// Writes `end_bin,x,y,label` rows for every cell of every grid.
pub fn write_labels_csv(path: &Path, grids: &[LabelGrid]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(["end_bin", "x", "y", "label"])?;
    for g in grids {
        for x in 0..g.nx {
            for y in 0..g.ny {
                let v = g.values[x * g.ny + y];
                w.write_record([g.end_bin.index.to_string(), x.to_string(), y.to_string(), v.to_string()])?;
            }
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn write_matches_csv(path: &Path, matches: &[IncidentMatch]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(file);
    w.write_record(["incident_id", "detection_bin", "x", "y", "distance_km", "lead_minutes"])?;
    for m in matches {
        w.write_record([
            m.incident_id.clone(),
            m.detection_bin.index.to_string(),
            m.detection_cell.x.to_string(),
            m.detection_cell.y.to_string(),
            m.distance_km.to_string(),
            m.lead_minutes.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

//! Objectives over (F1, Δt, Δs), ε-dominance and the non-dominated archive.
//!
//! Objective vectors are always maximised: `(γ1·f1, −γ2·z1(Δt), −γ3·z2(Δs))`.
//! Boxing is additive, `floor(v_i/ε_i)`, with `ε_i = 0` keeping the raw value.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::MetricsReport;

pub const NUM_OBJECTIVES: usize = 3;

// Relative slack so that values a rounding error below a box edge land on it.
const BOX_SNAP: f64 = 1e-9;

/// Monotone non-decreasing transform applied to a resolution before weighting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    Log1p,
    Sqrt,
}

impl Transform {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Transform::Identity => x,
            Transform::Log1p => x.ln_1p(),
            Transform::Sqrt => x.sqrt(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ObjectiveConfig {
    pub gammas: [f64; 3],
    pub z1: Transform,
    pub z2: Transform,
    /// Per-objective box sizes; `None` derives them from the sweep grid.
    pub epsilons: Option<[f64; 3]>,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        ObjectiveConfig { gammas: [1.0; 3], z1: Transform::Identity, z2: Transform::Identity, epsilons: None }
    }
}

/// Default box size on F1.
pub const DEFAULT_F1_EPSILON: f64 = 0.02;

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.gammas.iter().any(|g| !(*g > 0.0 && g.is_finite())) {
            return Err(Error::config("objectives", "gammas must be positive"));
        }
        if let Some(eps) = self.epsilons {
            if eps.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(Error::config("objectives", "epsilons must be non-negative"));
            }
        }
        Ok(())
    }

    /// Box sizes: the configured ones, or 0.02 on F1 and the smallest grid
    /// step (in objective units) on Δt and Δs.
    pub fn resolved_epsilons(&self, delta_t: &[f64], delta_s: &[f64]) -> [f64; 3] {
        if let Some(eps) = self.epsilons {
            return eps;
        }
        let step = |vals: &[f64], z: Transform, gamma: f64| {
            let mut t: Vec<f64> = vals.iter().map(|v| gamma * z.apply(*v)).collect();
            t.sort_by(f64::total_cmp);
            t.dedup();
            t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min)
        };
        let finite_or_zero = |v: f64| if v.is_finite() { v } else { 0.0 };
        [
            DEFAULT_F1_EPSILON * self.gammas[0],
            finite_or_zero(step(delta_t, self.z1, self.gammas[1])),
            finite_or_zero(step(delta_s, self.z2, self.gammas[2])),
        ]
    }

    pub fn objectives(&self, f1: f64, delta_t_min: f64, delta_s_km: f64) -> ObjectiveVector {
        ObjectiveVector([
            self.gammas[0] * f1,
            -self.gammas[1] * self.z1.apply(delta_t_min),
            -self.gammas[2] * self.z2.apply(delta_s_km),
        ])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveVector(pub [f64; 3]);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub detector: String,
    pub delta_s_km: f64,
    pub delta_t_min: f64,
    pub f1: f64,
    pub model_ref: Option<String>,
    pub metrics: Option<MetricsReport>,
}

impl Candidate {
    pub fn new(detector: impl Into<String>, delta_s_km: f64, delta_t_min: f64, f1: f64) -> Self {
        Candidate { detector: detector.into(), delta_s_km, delta_t_min, f1, model_ref: None, metrics: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.f1) {
            return Err(Error::Argument(format!("f1 {} outside [0, 1]", self.f1)));
        }
        if !(self.delta_s_km > 0.0 && self.delta_t_min > 0.0) {
            return Err(Error::Argument("resolutions must be positive".into()));
        }
        Ok(())
    }
}

/// `a` is at least as good as `b` everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64]) -> Result<bool> {
    if a.len() != b.len() {
        return Err(Error::Argument(format!("objective lengths differ: {} vs {}", a.len(), b.len())));
    }
    let mut strict = false;
    for (x, y) in a.iter().zip(b) {
        if x < y {
            return Ok(false);
        }
        strict |= x > y;
    }
    Ok(strict)
}

/// Box coordinates; entries with `ε_i = 0` carry the raw value.
pub fn eps_box(v: &[f64], epsilons: &[f64]) -> Result<Vec<f64>> {
    if v.len() != epsilons.len() {
        return Err(Error::Argument("objective and epsilon lengths differ".into()));
    }
    Ok(v.iter()
        .zip(epsilons)
        .map(|(x, e)| {
            if *e == 0.0 {
                *x
            } else {
                let q = x / e;
                (q + BOX_SNAP * q.abs().max(1.0)).floor()
            }
        })
        .collect())
}

fn box_key(b: &[f64]) -> [u64; 3] {
    // Canonical bit pattern (folds -0.0 into 0.0) for set comparisons.
    let mut k = [0; 3];
    for (o, v) in k.iter_mut().zip(b) {
        *o = (v + 0.0).to_bits();
    }
    k
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchiveMember {
    pub candidate: Candidate,
    pub objectives: ObjectiveVector,
    #[serde(rename = "box")]
    pub eps_box: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum InsertOutcome {
    Accepted {
        evicted: Vec<Candidate>,
    },
    /// Shared a box with a member and was closer to the box's utopia corner.
    ReplacedInBox {
        replaced: Candidate,
    },
    Rejected {
        reason: String,
    },
}

impl InsertOutcome {
    pub fn accepted(&self) -> bool {
        !matches!(self, InsertOutcome::Rejected { .. })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParetoArchive {
    pub epsilons: [f64; 3],
    pub gammas: [f64; 3],
    pub members: Vec<ArchiveMember>,
    #[serde(skip)]
    config: ObjectiveConfig,
}

impl ParetoArchive {
    pub fn new(config: &ObjectiveConfig, epsilons: [f64; 3]) -> Self {
        ParetoArchive { epsilons, gammas: config.gammas, members: Vec::new(), config: config.clone() }
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn occupied_boxes(&self) -> BTreeSet<[u64; 3]> {
        self.members.iter().map(|m| box_key(&m.eps_box)).collect()
    }

    fn corner_distance(&self, v: &[f64; 3], b: &[f64]) -> f64 {
        v.iter()
            .zip(b)
            .zip(&self.epsilons)
            .map(|((x, bi), e)| if *e == 0.0 { 0.0 } else { (bi + 1.0 - x / e).powi(2) })
            .sum::<f64>()
            .sqrt()
    }
}

/// ε-archive update. A candidate is rejected when some member's box
/// dominates its box; otherwise members with dominated boxes are evicted.
/// Within one box the representative closer to the box's utopia corner
/// (in `v/ε` units) stays, and the incumbent wins ties.
pub fn archive_insert(archive: &mut ParetoArchive, cand: Candidate) -> InsertOutcome {
    if let Err(e) = cand.validate() {
        return InsertOutcome::Rejected { reason: e.to_string() };
    }
    let v = archive.config.objectives(cand.f1, cand.delta_t_min, cand.delta_s_km);
    if v.0.iter().any(|x| !x.is_finite()) {
        return InsertOutcome::Rejected { reason: format!("non-finite objectives {:?}", v.0) };
    }
    let b = eps_box(&v.0, &archive.epsilons).expect("fixed length");
    for m in &archive.members {
        if dominates(&m.eps_box, &b).expect("fixed length") {
            return InsertOutcome::Rejected {
                reason: format!(
                    "box {:?} dominated by {} (Δs={}, Δt={})",
                    b, m.candidate.detector, m.candidate.delta_s_km, m.candidate.delta_t_min
                ),
            };
        }
    }
    if let Some(i) = archive.members.iter().position(|m| box_key(&m.eps_box) == box_key(&b)) {
        let incumbent = archive.corner_distance(&archive.members[i].objectives.0, &b);
        let challenger = archive.corner_distance(&v.0, &b);
        if challenger < incumbent {
            let old = std::mem::replace(
                &mut archive.members[i],
                ArchiveMember { candidate: cand, objectives: v, eps_box: b },
            );
            return InsertOutcome::ReplacedInBox { replaced: old.candidate };
        }
        return InsertOutcome::Rejected {
            reason: format!("box {b:?} already holds a representative at least as close to its corner"),
        };
    }
    let mut evicted = Vec::new();
    archive.members.retain(|m| {
        if dominates(&b, &m.eps_box).expect("fixed length") {
            evicted.push(m.candidate.clone());
            false
        } else {
            true
        }
    });
    archive.members.push(ArchiveMember { candidate: cand, objectives: v, eps_box: b });
    InsertOutcome::Accepted { evicted }
}

/// Weighted sum `γ1·f1 − γ2·z1(Δt) − γ3·z2(Δs)`, for ranking only.
pub fn scalarize(cand: &Candidate, cfg: &ObjectiveConfig) -> f64 {
    cfg.objectives(cand.f1, cand.delta_t_min, cand.delta_s_km).0.iter().sum()
}

/// Weighted sum after min-max scaling each objective to [0, 1] over `cands`
/// (1 = best). An objective with no spread scores 1 for everyone.
pub fn scalarize_normalized(cands: &[Candidate], cfg: &ObjectiveConfig) -> Vec<f64> {
    let unit = ObjectiveConfig { gammas: [1.0; 3], ..cfg.clone() };
    let vs: Vec<[f64; 3]> = cands.iter().map(|c| unit.objectives(c.f1, c.delta_t_min, c.delta_s_km).0).collect();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for v in &vs {
        for i in 0..3 {
            lo[i] = lo[i].min(v[i]);
            hi[i] = hi[i].max(v[i]);
        }
    }
    vs.iter()
        .map(|v| {
            (0..3)
                .map(|i| {
                    let s = if hi[i] > lo[i] { (v[i] - lo[i]) / (hi[i] - lo[i]) } else { 1.0 };
                    cfg.gammas[i] * s
                })
                .sum()
        })
        .collect()
}

/// Boxes not dominated by any other candidate's box, by direct pairwise comparison.
pub fn brute_force_boxes(cands: &[Candidate], cfg: &ObjectiveConfig, epsilons: [f64; 3]) -> BTreeSet<[u64; 3]> {
    let boxes: Vec<Vec<f64>> = cands
        .iter()
        .map(|c| eps_box(&cfg.objectives(c.f1, c.delta_t_min, c.delta_s_km).0, &epsilons).expect("fixed length"))
        .collect();
    boxes.iter().filter(|b| !boxes.iter().any(|o| dominates(o, b).expect("fixed length"))).map(|b| box_key(b)).collect()
}

//! Human-readable summary and plot data for a finished sweep.

use std::fmt::Write as _;
use std::path::Path;

use serde::Deserialize;

use crate::error::{Error, Result};
use crate::mopt::{scalarize, scalarize_normalized, Candidate, ObjectiveConfig, Transform};
use crate::sweep::{read_candidates_csv, CandidateRecord};

pub const NO_CANDIDATES: &str = "no candidates";

/// Best row per detector for each table section.
#[derive(Debug, Clone, PartialEq)]
pub struct TableSection {
    pub title: &'static str,
    pub rows: Vec<CandidateRecord>,
}

fn pick<F>(rows: &[CandidateRecord], detector: &str, key: F, larger_is_better: bool) -> Option<CandidateRecord>
where
    F: Fn(&CandidateRecord) -> Option<f64>,
{
    let mut best: Option<(&CandidateRecord, f64)> = None;
    for r in rows.iter().filter(|r| r.detector == detector) {
        let Some(v) = key(r) else { continue };
        let better = match best {
            None => true,
            Some((_, b)) => {
                if larger_is_better {
                    v > b
                } else {
                    v < b
                }
            }
        };
        if better {
            best = Some((r, v));
        }
    }
    best.map(|(r, _)| r.clone())
}

fn detectors(rows: &[CandidateRecord]) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for r in rows {
        if !out.contains(&r.detector) {
            out.push(r.detector.clone());
        }
    }
    // The baseline first, as in the comparison table.
    out.sort_by_key(|d| if d == "bf" { 0 } else { 1 });
    out
}

/// Winners per detector: highest early-prediction share, smallest average
/// distance and longest average lead. Ties keep the first row in file order.
pub fn table_sections(rows: &[CandidateRecord]) -> Vec<TableSection> {
    let dets = detectors(rows);
    let section = |title, key: fn(&CandidateRecord) -> Option<f64>, larger| TableSection {
        title,
        rows: dets.iter().filter_map(|d| pick(rows, d, key, larger)).collect(),
    };
    vec![
        section("Best Early Pred %", |r| Some(r.early_pred_pct), true),
        section("Best Avg. Distance", |r| r.avg_distance_km, false),
        section("Best Avg. Early Time", |r| r.avg_early_time_min, true),
    ]
}

pub fn render_table(rows: &[CandidateRecord]) -> String {
    let mut s = String::new();
    if rows.is_empty() {
        s.push_str(NO_CANDIDATES);
        s.push('\n');
        return s;
    }
    let opt = |v: Option<f64>| v.map(|x| format!("{x:.2}")).unwrap_or_else(|| "-".into());
    let _ = writeln!(
        s,
        "{:<8} {:>6} {:>6} {:>8} {:>11} {:>10} {:>12} {:>9} {:>7}",
        "Model", "Δs km", "Δt min", "F1 %", "Early Pred%", "Dist km", "Early min", "Precision", "Recall"
    );
    for sec in table_sections(rows) {
        let _ = writeln!(s, "-- {} --", sec.title);
        for r in &sec.rows {
            let _ = writeln!(
                s,
                "{:<8} {:>6} {:>6} {:>8.2} {:>11.2} {:>10} {:>12} {:>9.2} {:>7.2}",
                r.detector.to_uppercase(),
                r.delta_s_km,
                r.delta_t_min,
                100.0 * r.f1,
                r.early_pred_pct,
                opt(r.avg_distance_km),
                opt(r.avg_early_time_min),
                r.precision,
                r.recall
            );
        }
    }
    let archived = rows.iter().filter(|r| r.in_archive).count();
    let _ = writeln!(s, "non-dominated set: {archived} of {} candidates", rows.len());
    s
}

fn write_csv(path: &Path, header: &[&str], rows: Vec<Vec<String>>) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

// Mean and max F1 per (detector, key) in first-seen order.
fn f1_by(rows: &[CandidateRecord], key: fn(&CandidateRecord) -> f64) -> Vec<Vec<String>> {
    let mut groups: Vec<(String, f64, Vec<f64>)> = Vec::new();
    for r in rows {
        let k = key(r);
        match groups.iter_mut().find(|(d, kk, _)| *d == r.detector && *kk == k) {
            Some(g) => g.2.push(r.f1),
            None => groups.push((r.detector.clone(), k, vec![r.f1])),
        }
    }
    groups
        .into_iter()
        .map(|(d, k, f)| {
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let max = f.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            vec![d, format!("{k}"), format!("{mean}"), format!("{max}")]
        })
        .collect()
}

#[derive(Deserialize)]
struct ParetoMembers {
    gammas: [f64; 3],
    z1: Transform,
    z2: Transform,
    members: Vec<Member>,
}

#[derive(Deserialize)]
struct Member {
    candidate: MemberCandidate,
}

#[derive(Deserialize)]
struct MemberCandidate {
    detector: String,
    delta_s_km: f64,
    delta_t_min: f64,
}

/// Archive members ranked by weighted score, best first.
pub fn render_ranking(rows: &[CandidateRecord], objectives: &ObjectiveConfig, normalized: bool) -> String {
    let members: Vec<&CandidateRecord> = rows.iter().filter(|r| r.in_archive).collect();
    let cands: Vec<Candidate> =
        members.iter().map(|r| Candidate::new(r.detector.clone(), r.delta_s_km, r.delta_t_min, r.f1)).collect();
    let scores = if normalized {
        scalarize_normalized(&cands, objectives)
    } else {
        cands.iter().map(|c| scalarize(c, objectives)).collect()
    };
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|a, b| scores[*b].total_cmp(&scores[*a]));
    let mut s = String::new();
    let _ = writeln!(s, "-- Archive ranking ({} score) --", if normalized { "normalized" } else { "raw" });
    for i in order {
        let r = members[i];
        let _ = writeln!(
            s,
            "{:<8} {:>6} {:>6} {:>8.2} {:>10.4}",
            r.detector.to_uppercase(),
            r.delta_s_km,
            r.delta_t_min,
            100.0 * r.f1,
            scores[i]
        );
    }
    s
}

/// Writes fig2a.csv, fig2b.csv, fig3.csv and table.txt into `run_dir` and
/// returns the table text.
pub fn write_report(run_dir: &Path, normalized: bool) -> Result<String> {
    let rows = read_candidates_csv(&run_dir.join("candidates.csv"))?;
    let pareto_path = run_dir.join("pareto.json");
    let text = std::fs::read_to_string(&pareto_path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(pareto_path.clone())
        } else {
            Error::io(&pareto_path, e)
        }
    })?;
    let pareto: ParetoMembers = serde_json::from_str(&text)?;
    for r in &rows {
        let member = pareto.members.iter().any(|m| {
            m.candidate.detector == r.detector
                && m.candidate.delta_s_km == r.delta_s_km
                && m.candidate.delta_t_min == r.delta_t_min
        });
        if member != r.in_archive {
            return Err(Error::Argument(format!(
                "candidates.csv and pareto.json disagree on {} Δs={} Δt={}",
                r.detector, r.delta_s_km, r.delta_t_min
            )));
        }
    }

    write_csv(
        &run_dir.join("fig2a.csv"),
        &["detector", "delta_s_km", "f1_mean", "f1_max"],
        f1_by(&rows, |r| r.delta_s_km),
    )?;
    write_csv(
        &run_dir.join("fig2b.csv"),
        &["detector", "delta_t_min", "f1_mean", "f1_max"],
        f1_by(&rows, |r| r.delta_t_min),
    )?;
    write_csv(
        &run_dir.join("fig3.csv"),
        &["delta_s_km", "delta_t_min", "f1", "in_archive", "detector"],
        rows.iter()
            .map(|r| {
                vec![
                    format!("{}", r.delta_s_km),
                    format!("{}", r.delta_t_min),
                    format!("{}", r.f1),
                    r.in_archive.to_string(),
                    r.detector.clone(),
                ]
            })
            .collect(),
    )?;
    let mut table = render_table(&rows);
    if rows.iter().any(|r| r.in_archive) {
        let objectives = ObjectiveConfig { gammas: pareto.gammas, z1: pareto.z1, z2: pareto.z2, epsilons: None };
        table.push_str(&render_ranking(&rows, &objectives, normalized));
    }
    let path = run_dir.join("table.txt");
    std::fs::write(&path, &table).map_err(|e| Error::io(&path, e))?;
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(det: &str, ds: f64, dt: f64, f1: f64, early: f64, dist: Option<f64>, lead: Option<f64>) -> CandidateRecord {
        CandidateRecord {
            detector: det.into(),
            delta_s_km: ds,
            delta_t_min: dt,
            f1,
            precision: 0.0,
            recall: 0.0,
            early_pred_pct: early,
            avg_distance_km: dist,
            avg_early_time_min: lead,
            in_archive: false,
        }
    }

    #[test]
    fn table_picks_documented_winners() {
        let rows = vec![
            rec("cnn", 1.0, 5.0, 0.16, 18.0, Some(2.6), Some(14.3)),
            rec("cnn", 5.0, 5.0, 0.41, 40.0, Some(2.9), Some(13.9)),
            rec("cnn", 3.0, 30.0, 0.30, 24.0, Some(3.0), Some(14.9)),
            rec("bf", 1.0, 5.0, 0.006, 77.0, Some(3.3), Some(15.0)),
            rec("bf", 5.0, 5.0, 0.10, 35.0, Some(3.1), Some(15.0)),
            rec("bf", 3.0, 20.0, 0.06, 47.0, None, None),
        ];
        let secs = table_sections(&rows);
        let key = |r: &CandidateRecord| (r.detector.clone(), r.delta_s_km, r.delta_t_min);
        let got: Vec<Vec<_>> = secs.iter().map(|s| s.rows.iter().map(key).collect()).collect();
        assert_eq!(got[0], vec![("bf".into(), 1.0, 5.0), ("cnn".into(), 5.0, 5.0)]);
        assert_eq!(got[1], vec![("bf".into(), 5.0, 5.0), ("cnn".into(), 1.0, 5.0)]);
        // bf tie at 15.0 keeps the first row.
        assert_eq!(got[2], vec![("bf".into(), 1.0, 5.0), ("cnn".into(), 3.0, 30.0)]);
    }

    #[test]
    fn empty_table_is_marked() {
        assert_eq!(render_table(&[]), "no candidates\n");
    }
}

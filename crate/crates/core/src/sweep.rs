//! Resolution sweep: every (Δs, Δt, detector) point is trained on each
//! rotation's training months and scored on its test month; CNN candidates
//! averaged over rotations feed the ε-archive.
//!
//! Layout of a run directory:
//!
//! ```text
//! manifest.json
//! candidates.csv  pareto.json  summary.json
//! models/r{i}_s{Δs}_t{Δt}_{cnn.bin,cnn.json,bf.json}
//! rotation_{i}/candidates.csv  rotation_{i}/pareto.json
//! rotation_{i}/metrics/{detector}_s{Δs}_t{Δt}.json
//! ```
//!
//! Existing model files are reused unless `overwrite` is set, so an
//! interrupted sweep resumes where it stopped.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bf::BfConfig;
use crate::cnn::{self, TrainedModel};
use crate::config::RunConfig;
use crate::data::{format_time, Rotation};
use crate::error::{Error, Result};
use crate::metrics::MetricsReport;
use crate::mopt::{archive_insert, Candidate, ParetoArchive};
use crate::pipeline::{self, Context, Detector, Prepared};

pub const CANDIDATE_HEADER: [&str; 10] = [
    "detector",
    "delta_s_km",
    "delta_t_min",
    "f1",
    "precision",
    "recall",
    "early_pred_pct",
    "avg_distance_km",
    "avg_early_time_min",
    "in_archive",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config: RunConfig,
    pub seed: u64,
    pub data_fingerprint: String,
    pub epoch: String,
    pub rotations: Vec<RotationInfo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RotationInfo {
    pub index: usize,
    pub test_start: String,
    pub test_end: String,
}

impl Manifest {
    pub fn new(cfg: &RunConfig, prep: &Prepared) -> Self {
        // The output location is not part of what a run computes.
        let mut config = cfg.clone();
        config.output.dir = PathBuf::new();
        Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            config,
            seed: cfg.seed,
            data_fingerprint: prep.fingerprint.clone(),
            epoch: format_time(prep.epoch),
            rotations: prep
                .rotations()
                .iter()
                .map(|r| RotationInfo {
                    index: r.index,
                    test_start: format_time(r.test.start),
                    test_end: format_time(r.test.end),
                })
                .collect(),
        }
    }

    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serialises");
        hex::encode(Sha256::digest(bytes))
    }
}

/// Writes `manifest.json`, refusing to mix runs unless `overwrite` is set.
pub fn claim_run_dir(dir: &Path, manifest: &Manifest, overwrite: bool) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let path = dir.join("manifest.json");
    if path.exists() && !overwrite {
        // Compared as text: parsed floats do not always round-trip exactly.
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if text != json_text(manifest)? {
            return Err(Error::Argument(format!(
                "{} belongs to a different configuration; use --overwrite or another --out",
                path.display()
            )));
        }
    }
    write_json(&path, manifest)
}

/// Pretty JSON with a trailing newline, as written by [`write_json`].
pub fn json_text<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(serde_json::to_string_pretty(value)? + "\n")
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, json_text(value)?).map_err(|e| Error::io(path, e))
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// `s{Δs}_t{Δt}`, the file-name stem for one resolution.
pub fn point_name(delta_s_km: f64, delta_t_min: u32) -> String {
    format!("s{}_t{}", num(delta_s_km), delta_t_min)
}

/// Model file path relative to a run directory.
pub fn model_ref(rotation: usize, delta_s_km: f64, delta_t_min: u32, detector: &str) -> String {
    let ext = if detector == "cnn" { "bin" } else { "json" };
    format!("models/r{rotation}_{}_{detector}.{ext}", point_name(delta_s_km, delta_t_min))
}

/// One scored (detector, Δs, Δt) point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateRow {
    pub detector: String,
    pub delta_s_km: f64,
    pub delta_t_min: u32,
    pub metrics: MetricsReport,
    pub model_refs: Vec<String>,
    pub in_archive: bool,
}

impl CandidateRow {
    pub fn candidate(&self) -> Candidate {
        Candidate {
            detector: self.detector.clone(),
            delta_s_km: self.delta_s_km,
            delta_t_min: f64::from(self.delta_t_min),
            f1: self.metrics.f1,
            model_ref: (!self.model_refs.is_empty()).then(|| self.model_refs.join(";")),
            metrics: Some(self.metrics.clone()),
        }
    }
}

pub fn write_candidates_csv(path: &Path, rows: &[CandidateRow]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(CANDIDATE_HEADER)?;
    let opt = |v: Option<f64>| v.map(num).unwrap_or_default();
    for r in rows {
        let m = &r.metrics;
        w.write_record([
            r.detector.clone(),
            num(r.delta_s_km),
            r.delta_t_min.to_string(),
            num(m.f1),
            num(m.precision),
            num(m.recall),
            num(m.early_pred_pct),
            opt(m.avg_distance_km),
            opt(m.avg_early_time_min),
            r.in_archive.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Rows of a candidates file, as read back by the report.
#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct CandidateRecord {
    pub detector: String,
    pub delta_s_km: f64,
    pub delta_t_min: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub early_pred_pct: f64,
    pub avg_distance_km: Option<f64>,
    pub avg_early_time_min: Option<f64>,
    pub in_archive: bool,
}

pub fn read_candidates_csv(path: &Path) -> Result<Vec<CandidateRecord>> {
    if !path.exists() {
        return Err(Error::Missing(path.to_path_buf()));
    }
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(str::to_string).collect();
    if header != CANDIDATE_HEADER {
        return Err(Error::Parse {
            file: path.to_path_buf(),
            line: 1,
            field: "header".into(),
            message: format!("expected {}", CANDIDATE_HEADER.join(",")),
        });
    }
    let mut out = Vec::new();
    for (i, rec) in r.deserialize().enumerate() {
        out.push(rec.map_err(|e| Error::Parse {
            file: path.to_path_buf(),
            line: i as u64 + 2,
            field: String::new(),
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

/// Inserts the CNN rows into a fresh archive in the given order and flags members.
pub fn build_archive(rows: &mut [CandidateRow], cfg: &RunConfig) -> ParetoArchive {
    let dt: Vec<f64> = cfg.time.delta_t_min.iter().map(|v| f64::from(*v)).collect();
    let eps = cfg.objectives.resolved_epsilons(&dt, &cfg.grid.delta_s_km);
    let mut archive = ParetoArchive::new(&cfg.objectives, eps);
    for r in rows.iter().filter(|r| r.detector == "cnn") {
        let outcome = archive_insert(&mut archive, r.candidate());
        log::debug!("archive {} s{} t{}: {:?}", r.detector, r.delta_s_km, r.delta_t_min, outcome);
    }
    for r in rows.iter_mut() {
        r.in_archive = archive.members.iter().any(|m| {
            m.candidate.detector == r.detector
                && m.candidate.delta_s_km == r.delta_s_km
                && m.candidate.delta_t_min == f64::from(r.delta_t_min)
        });
    }
    archive
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub rotations: usize,
    pub candidates: usize,
    pub archive_size: usize,
    pub trained: usize,
    pub reused: usize,
    pub skipped: Vec<String>,
}

/// Loads the model at `path` unless `overwrite`, otherwise trains and saves it.
/// The flag is true when training ran.
pub fn load_or_train_cnn(
    ctx: &Context<'_>,
    rot: &Rotation,
    cfg: &RunConfig,
    path: &Path,
    overwrite: bool,
) -> Result<(TrainedModel, bool)> {
    if path.exists() && !overwrite {
        let model = cnn::load_model(path)?;
        let want = ctx.cnn_spec(cfg.cnn.effective_filters(), cfg);
        if model.spec != want {
            return Err(Error::ModelFormat {
                path: path.into(),
                message: "model shape does not match the configuration".into(),
            });
        }
        return Ok((model, false));
    }
    let model = pipeline::train_cnn(ctx, rot, cfg)?;
    cnn::save_model(&model, path)?;
    Ok((model, true))
}

#[derive(Serialize, Deserialize)]
struct BfModelFile {
    config: BfConfig,
    training_f1: f64,
}

pub fn load_or_train_bf(
    ctx: &Context<'_>,
    rot: &Rotation,
    cfg: &RunConfig,
    path: &Path,
    overwrite: bool,
) -> Result<(BfConfig, bool)> {
    if path.exists() && !overwrite {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let file: BfModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::ModelFormat { path: path.into(), message: e.to_string() })?;
        return Ok((file.config, false));
    }
    let (config, training_f1) = pipeline::train_bf(ctx, rot, cfg)?;
    write_json(path, &BfModelFile { config: config.clone(), training_f1 })?;
    Ok((config, true))
}

#[derive(Serialize)]
struct MetricsFile<'a> {
    detector: &'a str,
    rotation: usize,
    delta_s_km: f64,
    delta_t_min: u32,
    model_ref: &'a str,
    config_fingerprint: &'a str,
    #[serde(flatten)]
    metrics: &'a MetricsReport,
}

#[derive(Serialize)]
struct ParetoFile<'a> {
    epsilons: [f64; 3],
    gammas: [f64; 3],
    z1: crate::mopt::Transform,
    z2: crate::mopt::Transform,
    members: &'a [crate::mopt::ArchiveMember],
}

fn write_pareto(path: &Path, archive: &ParetoArchive, cfg: &RunConfig) -> Result<()> {
    write_json(
        path,
        &ParetoFile {
            epsilons: archive.epsilons,
            gammas: archive.gammas,
            z1: cfg.objectives.z1,
            z2: cfg.objectives.z2,
            members: &archive.members,
        },
    )
}

/// Runs the full sweep into `out`.
pub fn run_sweep(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<SweepSummary> {
    cfg.validate()?;
    let prep = pipeline::prepare(cfg)?;
    run_sweep_prepared(cfg, &prep, out, overwrite)
}

pub fn run_sweep_prepared(cfg: &RunConfig, prep: &Prepared, out: &Path, overwrite: bool) -> Result<SweepSummary> {
    let manifest = Manifest::new(cfg, prep);
    claim_run_dir(out, &manifest, overwrite)?;
    let fingerprint = manifest.fingerprint();
    let models_dir = out.join("models");
    fs::create_dir_all(&models_dir).map_err(|e| Error::io(&models_dir, e))?;

    let rotations = prep.rotations();
    if rotations.len() < 2 {
        return Err(Error::Argument("the data must span at least two months to rotate train and test".into()));
    }
    let mut summary = SweepSummary {
        rotations: rotations.len(),
        candidates: 0,
        archive_size: 0,
        trained: 0,
        reused: 0,
        skipped: Vec::new(),
    };
    // per_point[(detector, Δs, Δt)] -> reports per rotation
    let mut per_point: Vec<CandidateRow> = Vec::new();
    let mut per_rotation_reports: Vec<Vec<MetricsReport>> = Vec::new();

    for rot in &rotations {
        let rot_dir = out.join(format!("rotation_{}", rot.index));
        let metrics_dir = rot_dir.join("metrics");
        fs::create_dir_all(&metrics_dir).map_err(|e| Error::io(&metrics_dir, e))?;
        let mut rows = Vec::new();
        for &ds in &cfg.grid.delta_s_km {
            for &dt in &cfg.time.delta_t_min {
                let ctx = Context::new(prep, cfg, ds, dt)?;
                let name = point_name(ds, dt);
                for detector in ["cnn", "bf"] {
                    let label = format!("rotation {} {detector} Δs={ds} Δt={dt}", rot.index);
                    let (det, model_ref, trained) = if detector == "cnn" {
                        if ctx.grid.nx < 4 || ctx.grid.ny < 4 {
                            let msg = format!("{label}: grid {}x{} too small for pooling", ctx.grid.nx, ctx.grid.ny);
                            log::warn!("{msg}");
                            summary.skipped.push(msg);
                            continue;
                        }
                        let rel = model_ref(rot.index, ds, dt, "cnn");
                        match load_or_train_cnn(&ctx, rot, cfg, &out.join(&rel), overwrite) {
                            Ok((m, t)) => (Detector::Cnn(m), rel, t),
                            Err(Error::Training(msg)) => {
                                let msg = format!("{label}: {msg}");
                                log::warn!("{msg}");
                                summary.skipped.push(msg);
                                continue;
                            }
                            Err(e) => return Err(e),
                        }
                    } else {
                        let rel = model_ref(rot.index, ds, dt, "bf");
                        let (c, t) = load_or_train_bf(&ctx, rot, cfg, &out.join(&rel), overwrite)?;
                        (Detector::Bf(c), rel, t)
                    };
                    if trained {
                        summary.trained += 1;
                    } else {
                        summary.reused += 1;
                    }
                    let eval = pipeline::evaluate(&ctx, &det, &rot.test)?;
                    log::info!("{label}: F1 {:.4} early {:.1}%", eval.metrics.f1, eval.metrics.early_pred_pct);
                    write_json(
                        &metrics_dir.join(format!("{detector}_{name}.json")),
                        &MetricsFile {
                            detector,
                            rotation: rot.index,
                            delta_s_km: ds,
                            delta_t_min: dt,
                            model_ref: &model_ref,
                            config_fingerprint: &fingerprint,
                            metrics: &eval.metrics,
                        },
                    )?;
                    rows.push(CandidateRow {
                        detector: detector.into(),
                        delta_s_km: ds,
                        delta_t_min: dt,
                        metrics: eval.metrics,
                        model_refs: vec![model_ref],
                        in_archive: false,
                    });
                }
            }
        }
        let archive = build_archive(&mut rows, cfg);
        write_candidates_csv(&rot_dir.join("candidates.csv"), &rows)?;
        write_pareto(&rot_dir.join("pareto.json"), &archive, cfg)?;
        for r in rows {
            match per_point.iter().position(|p| {
                p.detector == r.detector && p.delta_s_km == r.delta_s_km && p.delta_t_min == r.delta_t_min
            }) {
                Some(i) => {
                    per_rotation_reports[i].push(r.metrics.clone());
                    per_point[i].model_refs.extend(r.model_refs);
                }
                None => {
                    per_rotation_reports.push(vec![r.metrics.clone()]);
                    per_point.push(r);
                }
            }
        }
    }

    for (row, reports) in per_point.iter_mut().zip(&per_rotation_reports) {
        row.metrics = MetricsReport::mean(reports).expect("at least one rotation");
    }
    // Canonical order: detector, then Δs, then Δt as configured.
    let order = |r: &CandidateRow| {
        let d = if r.detector == "cnn" { 0 } else { 1 };
        let s = cfg.grid.delta_s_km.iter().position(|v| *v == r.delta_s_km).unwrap_or(usize::MAX);
        let t = cfg.time.delta_t_min.iter().position(|v| *v == r.delta_t_min).unwrap_or(usize::MAX);
        (d, s, t)
    };
    per_point.sort_by_key(order);
    let archive = build_archive(&mut per_point, cfg);
    write_candidates_csv(&out.join("candidates.csv"), &per_point)?;
    write_pareto(&out.join("pareto.json"), &archive, cfg)?;
    summary.candidates = per_point.len();
    summary.archive_size = archive.len();
    write_json(&out.join("summary.json"), &summary)?;
    let mut stderr = std::io::stderr();
    for s in &summary.skipped {
        let _ = writeln!(stderr, "skipped: {s}");
    }
    Ok(summary)
}

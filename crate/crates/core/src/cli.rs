//! Command-line front end.
//!
//! Flags override the config file, which overrides built-in defaults.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::config::RunConfig;
use crate::data::{format_time, parse_time, Rotation, TimeRange};
use crate::error::{Error, Result};
use crate::features::dump_window;
use crate::labels::{write_labels_csv, write_matches_csv, Detection};
use crate::pipeline::{self, Context, Detector, Prepared};
use crate::report;
use crate::sweep::{
    self, claim_run_dir, json_text, load_or_train_bf, load_or_train_cnn, model_ref, point_name, write_json, Manifest,
};
use crate::synth;

#[derive(Debug, Parser)]
#[command(name = "crome", version, about = "Early incident detection from crowdsourced reports")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// TOML configuration file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random component.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (data directory for `simulate`, run directory otherwise).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Replace existing outputs instead of reusing them.
    #[arg(long, global = true)]
    pub overwrite: bool,
    /// Dataset directory; overrides `data.dir`.
    #[arg(long, global = true)]
    pub data: Option<PathBuf>,
    /// Use the full-size CNN filter count.
    #[arg(long, global = true)]
    pub paper_arch: bool,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate,
    /// Write input tensors and labels for a span of windows.
    Featurize(FeaturizeArgs),
    /// Train detectors for one rotation and resolution.
    Train(PointArgs),
    /// Score trained detectors on a rotation's test month.
    Eval(PointArgs),
    /// Train and score every resolution on every rotation, then build the archive.
    Sweep,
    /// Summarise a finished sweep and emit plot data.
    Report(ReportArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum DetectorChoice {
    Cnn,
    Bf,
    Both,
}

impl DetectorChoice {
    fn names(self) -> &'static [&'static str] {
        match self {
            DetectorChoice::Cnn => &["cnn"],
            DetectorChoice::Bf => &["bf"],
            DetectorChoice::Both => &["cnn", "bf"],
        }
    }
}

#[derive(Debug, Args)]
pub struct PointArgs {
    /// Rotation index (test month).
    #[arg(long, default_value_t = 0)]
    pub rotation: usize,
    /// Cell size in km; defaults to the first configured value.
    #[arg(long)]
    pub delta_s: Option<f64>,
    /// Time step in minutes; defaults to the first configured value.
    #[arg(long)]
    pub delta_t: Option<u32>,
    #[arg(long, value_enum, default_value_t = DetectorChoice::Both)]
    pub detector: DetectorChoice,
}

#[derive(Debug, Args)]
pub struct FeaturizeArgs {
    #[arg(long)]
    pub delta_s: Option<f64>,
    #[arg(long)]
    pub delta_t: Option<u32>,
    /// Start of the span (ISO-8601); defaults to the start of the data.
    #[arg(long)]
    pub from: Option<String>,
    /// End of the span, exclusive; defaults to one day after `from`.
    #[arg(long)]
    pub to: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Run directory; defaults to `--out`.
    pub run_dir: Option<PathBuf>,
    /// Rank archive members by scores normalised to [0, 1] per objective.
    #[arg(long)]
    pub normalized: bool,
}

/// Process exit status for a result.
pub fn exit_code(result: &Result<()>) -> i32 {
    match result {
        Ok(()) => 0,
        Err(e) if e.is_user_error() => 1,
        Err(_) => 2,
    }
}

fn resolve_config(g: &GlobalArgs) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = g.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(d) = &g.data {
        cfg.data.dir = Some(d.clone());
    }
    if let Some(o) = &g.out {
        cfg.output.dir = o.clone();
    }
    if g.paper_arch {
        cfg.cnn.paper_arch = true;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn run(cli: Cli) -> Result<()> {
    if let Command::Report(args) = &cli.command {
        // Reporting reads a finished run and needs no configuration.
        let dir = args.run_dir.clone().or_else(|| cli.global.out.clone()).unwrap_or_else(|| PathBuf::from("run"));
        return cmd_report(&dir, args.normalized);
    }
    let cfg = resolve_config(&cli.global)?;
    let out = cfg.output.dir.clone();
    let overwrite = cli.global.overwrite;
    match &cli.command {
        Command::Simulate => cmd_simulate(&cfg, &out, overwrite),
        Command::Featurize(a) => cmd_featurize(&cfg, &out, a),
        Command::Train(a) => cmd_train(&cfg, &out, overwrite, a),
        Command::Eval(a) => cmd_eval(&cfg, &out, overwrite, a),
        Command::Sweep => {
            let s = sweep::run_sweep(&cfg, &out, overwrite)?;
            println!(
                "{} rotations, {} candidates, archive size {}, trained {}, reused {}, skipped {}",
                s.rotations,
                s.candidates,
                s.archive_size,
                s.trained,
                s.reused,
                s.skipped.len()
            );
            Ok(())
        }
        Command::Report(_) => unreachable!("handled above"),
    }
}

#[derive(Serialize)]
struct SimulateManifest {
    tool: String,
    version: String,
    seed: u64,
    scenario: synth::ScenarioConfig,
}

fn cmd_simulate(cfg: &RunConfig, out: &Path, overwrite: bool) -> Result<()> {
    let manifest = SimulateManifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        seed: cfg.data.synth.seed,
        scenario: cfg.data.synth.clone(),
    };
    let path = out.join("manifest.json");
    if path.exists() && !overwrite {
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        if text != json_text(&manifest)? {
            return Err(Error::Argument(format!(
                "{} holds a different scenario; use --overwrite or another --out",
                path.display()
            )));
        }
        if out.join("reports.csv").exists() && out.join("incidents.csv").exists() {
            println!("{} is up to date", out.display());
            return Ok(());
        }
    }
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let scenario = synth::generate(&cfg.data.synth)?;
    synth::write_scenario(&scenario, out)?;
    write_json(&path, &manifest)?;
    let ds = &scenario.dataset;
    println!(
        "wrote {} reports, {} incidents, {} traffic and {} weather rows to {}",
        ds.reports.len(),
        ds.incidents.len(),
        ds.traffic.len(),
        ds.weather.len(),
        out.display()
    );
    Ok(())
}

fn pick_point(cfg: &RunConfig, ds: Option<f64>, dt: Option<u32>) -> Result<(f64, u32)> {
    let ds = ds.unwrap_or(cfg.grid.delta_s_km[0]);
    let dt = dt.unwrap_or(cfg.time.delta_t_min[0]);
    if !(ds > 0.0 && ds.is_finite()) {
        return Err(Error::Argument(format!("--delta-s must be positive, got {ds}")));
    }
    cfg.time.frames(dt)?;
    Ok((ds, dt))
}

fn pick_rotation(prep: &Prepared, index: usize) -> Result<Rotation> {
    let rots = prep.rotations();
    if rots.len() < 2 {
        return Err(Error::Argument("the data must span at least two months to rotate train and test".into()));
    }
    rots.into_iter()
        .find(|r| r.index == index)
        .ok_or_else(|| Error::Argument(format!("rotation {index} does not exist")))
}

fn cmd_featurize(cfg: &RunConfig, out: &Path, a: &FeaturizeArgs) -> Result<()> {
    let prep = pipeline::prepare(cfg)?;
    let (ds, dt) = pick_point(cfg, a.delta_s, a.delta_t)?;
    let time = |s: &str| parse_time(s).map_err(Error::Argument);
    let start = a.from.as_deref().map(time).transpose()?.unwrap_or(prep.epoch);
    let end = a.to.as_deref().map(time).transpose()?.unwrap_or(start + 86_400);
    if end <= start {
        return Err(Error::Argument("--to must be after --from".into()));
    }
    let ctx = Context::new(&prep, cfg, ds, dt)?;
    let dir = out.join("features").join(point_name(ds, dt));
    let bins = ctx.bins_in(&TimeRange { start, end });
    let mut labels = Vec::new();
    let mut n = 0;
    for (win, i) in ctx.windows(bins.clone()).zip(bins) {
        dump_window(&win, &dir)?;
        labels.push(ctx.labels(i));
        n += 1;
    }
    write_labels_csv(&dir.join("labels.csv"), &labels)?;
    println!("wrote {n} windows of {}x{} cells to {}", ctx.grid.nx, ctx.grid.ny, dir.display());
    Ok(())
}

fn cmd_train(cfg: &RunConfig, out: &Path, overwrite: bool, a: &PointArgs) -> Result<()> {
    let prep = pipeline::prepare(cfg)?;
    let (ds, dt) = pick_point(cfg, a.delta_s, a.delta_t)?;
    let rot = pick_rotation(&prep, a.rotation)?;
    claim_run_dir(out, &Manifest::new(cfg, &prep), overwrite)?;
    let models = out.join("models");
    std::fs::create_dir_all(&models).map_err(|e| Error::io(&models, e))?;
    let ctx = Context::new(&prep, cfg, ds, dt)?;
    for det in a.detector.names() {
        let rel = model_ref(rot.index, ds, dt, det);
        let path = out.join(&rel);
        let trained = if *det == "cnn" {
            let (model, trained) = load_or_train_cnn(&ctx, &rot, cfg, &path, overwrite)?;
            println!("cnn threshold {:.2} -> {rel}", model.threshold);
            trained
        } else {
            let (bf, trained) = load_or_train_bf(&ctx, &rot, cfg, &path, overwrite)?;
            println!("bf prior {} threshold {} -> {rel}", bf.prior, bf.threshold);
            trained
        };
        if !trained {
            println!("{rel} already present; pass --overwrite to retrain");
        }
    }
    Ok(())
}

fn load_detector(out: &Path, rel: &str, det: &str) -> Result<Detector> {
    let path = out.join(rel);
    if !path.exists() {
        return Err(Error::Missing(path));
    }
    if det == "cnn" {
        return Ok(Detector::Cnn(crate::cnn::load_model(&path)?));
    }
    #[derive(serde::Deserialize)]
    struct BfFile {
        config: crate::bf::BfConfig,
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let file: BfFile =
        serde_json::from_str(&text).map_err(|e| Error::ModelFormat { path: path.clone(), message: e.to_string() })?;
    Ok(Detector::Bf(file.config))
}

fn write_detections_csv(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_path(path)?;
    w.write_record(["end_bin", "window_end", "x", "y"])?;
    for d in dets {
        for c in &d.cells {
            w.write_record([d.bin.index.to_string(), format_time(d.bin.end()), c.x.to_string(), c.y.to_string()])?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, out: &Path, overwrite: bool, a: &PointArgs) -> Result<()> {
    let prep = pipeline::prepare(cfg)?;
    let (ds, dt) = pick_point(cfg, a.delta_s, a.delta_t)?;
    let rot = pick_rotation(&prep, a.rotation)?;
    claim_run_dir(out, &Manifest::new(cfg, &prep), overwrite)?;
    let ctx = Context::new(&prep, cfg, ds, dt)?;
    for det in a.detector.names() {
        let detector = load_detector(out, &model_ref(rot.index, ds, dt, det), det)?;
        let eval = pipeline::evaluate(&ctx, &detector, &rot.test)?;
        let dir = out.join("eval").join(format!("r{}_{}_{det}", rot.index, point_name(ds, dt)));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_json(&dir.join("metrics.json"), &eval.metrics)?;
        write_detections_csv(&dir.join("detections.csv"), &eval.detections)?;
        write_matches_csv(&dir.join("matches.csv"), &eval.matches)?;
        let m = &eval.metrics;
        println!(
            "{det}: F1 {:.4} precision {:.4} recall {:.4} early {:.1}% ({} of {} incidents matched)",
            m.f1, m.precision, m.recall, m.early_pred_pct, m.matched_incidents, m.total_incidents
        );
    }
    Ok(())
}

fn cmd_report(dir: &Path, normalized: bool) -> Result<()> {
    let text = report::write_report(dir, normalized)?;
    print!("{text}");
    Ok(())
}

//! One evaluation point: a dataset rasterised at a given (Δs, Δt), with
//! helpers to build windows, labels and report evidence, train either
//! detector on a rotation's training blocks and score it on the test block.

use std::collections::VecDeque;
use std::ops::Range;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bf::{self, BfConfig, CalibrationData, CellEvidence};
use crate::cnn::{self, CnnSpec, Example, TrainedModel};
use crate::config::RunConfig;
use crate::data::{self, BoundingBox, Dataset, Incident, Rotation, TimeRange, Timestamp};
use crate::error::{Error, Result};
use crate::features::{to_input, FrameBuilder, FrameTensor, InputTensor, Window, FEATURE_NAMES, NUM_FEATURES};
use crate::grid::{make_grid, CellIndex, GridSpec, TimeBin};
use crate::labels::{match_detections, Detection, IncidentMatch, LabelGrid, Labeler, MatchRule};
use crate::metrics::{classification_metrics, early_metrics, Counts, MetricsReport};
use crate::synth;

/// The dataset a run works on, with its region and time frame.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub dataset: Dataset,
    pub region: BoundingBox,
    pub epoch: Timestamp,
    pub end: Timestamp,
    pub blocks: Vec<TimeRange>,
    pub fingerprint: String,
}

impl Prepared {
    pub fn rotations(&self) -> Vec<Rotation> {
        data::rotations(&self.blocks)
    }
}

/// Loads the configured data directory, or simulates the configured scenario.
pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (dataset, span) = match &cfg.data.dir {
        Some(dir) => {
            if !dir.is_dir() {
                return Err(Error::Missing(dir.clone()));
            }
            let region = match cfg.grid.region {
                Some(r) => r,
                None => data::read_region(dir)?.ok_or_else(|| {
                    Error::config("grid", format!("no region given and {} has no region.json", dir.display()))
                })?,
            };
            let (ds, summary) = data::load_dataset(&data::DataPaths::in_dir(dir), region)?;
            log::info!("loaded {} reports, {} incidents", summary.reports.kept, summary.incidents.kept);
            let span = ds.time_span();
            (ds, span)
        }
        None => {
            let mut synth_cfg = cfg.data.synth.clone();
            if let Some(r) = cfg.grid.region {
                synth_cfg.region = r;
            }
            let sc = synth::generate(&synth_cfg)?;
            (sc.dataset, Some((synth_cfg.start_time()?, synth_cfg.end_time()?)))
        }
    };
    let (first, last) = span.ok_or_else(|| Error::Argument("dataset has no records".into()))?;
    let epoch = match cfg.time.epoch_time()? {
        Some(e) => e,
        None => day_start(first),
    };
    if epoch > first {
        return Err(Error::config("time", "epoch is after the first record"));
    }
    let end = if cfg.data.dir.is_some() { last + 1 } else { last };
    let blocks = data::month_blocks(epoch, end)?;
    let region = dataset.region;
    let fingerprint = dataset_fingerprint(&dataset);
    Ok(Prepared { dataset, region, epoch, end, blocks, fingerprint })
}

fn day_start(t: Timestamp) -> Timestamp {
    t.div_euclid(86_400) * 86_400
}

/// SHA-256 over the canonical JSON of every record.
pub fn dataset_fingerprint(ds: &Dataset) -> String {
    let mut h = Sha256::new();
    let mut feed = |v: serde_json::Result<Vec<u8>>| h.update(v.expect("records serialise"));
    feed(serde_json::to_vec(&ds.region));
    feed(serde_json::to_vec(&ds.reports));
    feed(serde_json::to_vec(&ds.incidents));
    feed(serde_json::to_vec(&ds.traffic));
    feed(serde_json::to_vec(&ds.weather));
    hex::encode(h.finalize())
}

/// A dataset rasterised at one spatial and temporal resolution.
pub struct Context<'a> {
    pub delta_s_km: f64,
    pub delta_t_min: u32,
    pub frames: usize,
    pub grid: GridSpec,
    pub rule: MatchRule,
    pub epoch: Timestamp,
    builder: FrameBuilder<'a>,
    labeler: Labeler,
}

impl<'a> Context<'a> {
    pub fn new(prep: &'a Prepared, cfg: &RunConfig, delta_s_km: f64, delta_t_min: u32) -> Result<Self> {
        let grid = make_grid(&prep.region, delta_s_km)?;
        Ok(Context {
            delta_s_km,
            delta_t_min,
            frames: cfg.time.frames(delta_t_min)?,
            grid,
            rule: cfg.labels,
            epoch: prep.epoch,
            builder: FrameBuilder::new(&prep.dataset, grid),
            labeler: Labeler::new(grid, cfg.labels),
        })
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.builder.dataset()
    }

    pub fn channels(&self) -> usize {
        self.frames * NUM_FEATURES
    }

    pub fn bin(&self, index: u64) -> TimeBin {
        TimeBin::new(index, self.delta_t_min, self.epoch)
    }

    /// Indices of the bins that start inside `range`.
    pub fn bins_in(&self, range: &TimeRange) -> Range<u64> {
        let step = i64::from(self.delta_t_min) * 60;
        let first = |t: Timestamp| ((t - self.epoch).max(0) + step - 1).div_euclid(step) as u64;
        first(range.start)..first(range.end)
    }

    pub fn frame(&self, index: u64) -> FrameTensor {
        self.builder.build(self.bin(index))
    }

    /// The window ending at bin `index`; bins before the epoch are zero frames.
    pub fn window(&self, index: u64) -> Window {
        let frames = (0..self.frames as u64)
            .rev()
            .map(|back| match index.checked_sub(back) {
                Some(i) => self.frame(i),
                None => FrameTensor::zeros(None, self.grid.nx, self.grid.ny),
            })
            .collect();
        self.assemble(index, frames)
    }

    fn assemble(&self, index: u64, frames: Vec<FrameTensor>) -> Window {
        Window {
            end_bin: self.bin(index),
            frames,
            feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn labels(&self, index: u64) -> LabelGrid {
        self.labeler.label(&self.dataset().incidents, self.bin(index))
    }

    /// Reliabilities of the reports inside the window ending at bin `index`, per cell.
    pub fn evidence(&self, index: u64) -> CellEvidence {
        let end_bin = self.bin(index);
        let start = self.bin(index.saturating_sub(self.frames as u64 - 1)).start();
        let reports = &self.dataset().reports;
        let lo = reports.partition_point(|r| r.time < start);
        let hi = reports.partition_point(|r| r.time < end_bin.end());
        let mut out: CellEvidence = vec![Vec::new(); self.grid.cells()];
        for (r, cell) in reports[lo..hi].iter().zip(&self.builder.report_cells()[lo..hi]) {
            if let Some(c) = cell {
                out[*c].push(r.reliability);
            }
        }
        out
    }

    pub fn cnn_spec(&self, filters: usize, cfg: &RunConfig) -> CnnSpec {
        CnnSpec { conv_activation: cfg.cnn.conv_activation, ..CnnSpec::for_grid(&self.grid, self.channels(), filters) }
    }

    /// Sequential windows over `bins`, reusing frames between neighbours.
    pub fn windows(&self, bins: Range<u64>) -> impl Iterator<Item = Window> + '_ {
        let mut recent: VecDeque<FrameTensor> = VecDeque::with_capacity(self.frames);
        let mut last: Option<u64> = None;
        bins.map(move |i| {
            if last.is_none_or(|l| l + 1 != i) {
                recent = self.window(i).frames.into();
            } else {
                recent.pop_front();
                recent.push_back(self.frame(i));
            }
            last = Some(i);
            self.assemble(i, recent.iter().cloned().collect())
        })
    }
}

/// A trained detector of either kind.
#[derive(Debug, Clone)]
pub enum Detector {
    Cnn(TrainedModel),
    Bf(BfConfig),
}

impl Detector {
    pub fn name(&self) -> &'static str {
        match self {
            Detector::Cnn(_) => "cnn",
            Detector::Bf(_) => "bf",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Evaluation {
    pub metrics: MetricsReport,
    pub detections: Vec<Detection>,
    pub matches: Vec<IncidentMatch>,
}

/// Incidents officially reported inside `range`.
pub fn incidents_in(ds: &Dataset, range: &TimeRange) -> Vec<Incident> {
    ds.incidents.iter().filter(|i| range.contains(i.time)).cloned().collect()
}

const EVAL_BATCH: usize = 64;

/// Runs the detector on every window of `range` and scores it against the
/// labels and the incidents reported in `range`.
pub fn evaluate(ctx: &Context<'_>, detector: &Detector, range: &TimeRange) -> Result<Evaluation> {
    let bins = ctx.bins_in(range);
    let mut counts = Counts::default();
    let mut detections = Vec::new();
    let mut windows = ctx.windows(bins.clone());
    let mut start = bins.start;
    while start < bins.end {
        let stop = (start + EVAL_BATCH as u64).min(bins.end);
        let batch: Vec<Detection> = match detector {
            Detector::Cnn(model) => {
                let inputs: Vec<InputTensor> =
                    windows.by_ref().take((stop - start) as usize).map(|w| to_input(&w)).collect();
                let refs: Vec<&InputTensor> = inputs.iter().collect();
                model
                    .predict(&refs)?
                    .into_iter()
                    .zip(start..stop)
                    .map(|(probs, i)| Detection {
                        bin: ctx.bin(i),
                        cells: cells_at_least(&ctx.grid, &probs, model.threshold),
                    })
                    .collect()
            }
            Detector::Bf(cfg) => (start..stop)
                .map(|i| {
                    let cells = bf::bf_cells(&ctx.evidence(i), cfg)?;
                    Ok(Detection { bin: ctx.bin(i), cells: cells.into_iter().map(|c| ctx.grid.unflat(c)).collect() })
                })
                .collect::<Result<_>>()?,
        };
        let labels: Vec<LabelGrid> = (start..stop).map(|i| ctx.labels(i)).collect();
        counts.merge(classification_metrics(&batch, &labels)?.counts);
        detections.extend(batch.into_iter().filter(|d| !d.cells.is_empty()));
        start = stop;
    }
    let incidents = incidents_in(ctx.dataset(), range);
    let matches = match_detections(&detections, &incidents, &ctx.grid, &ctx.rule);
    let early = early_metrics(&matches, incidents.len())?;
    Ok(Evaluation { metrics: MetricsReport::new(counts.into(), early, incidents.len()), detections, matches })
}

fn cells_at_least(grid: &GridSpec, probs: &[f64], threshold: f64) -> Vec<CellIndex> {
    probs.iter().enumerate().filter(|(_, p)| **p >= threshold).map(|(i, _)| grid.unflat(i)).collect()
}

fn train_bins(ctx: &Context<'_>, rotation: &Rotation) -> Vec<u64> {
    rotation.train.iter().flat_map(|r| ctx.bins_in(r)).collect()
}

/// Seed for one (rotation, resolution) so every point draws its own sample.
pub fn point_seed(seed: u64, rotation: usize, delta_s_km: f64, delta_t_min: u32) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((rotation as u64).to_le_bytes());
    h.update(delta_s_km.to_bits().to_le_bytes());
    h.update(delta_t_min.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

/// Training examples for the CNN: a seeded sample of at most `max` training
/// windows (all when `max` is 0), in time order.
pub fn training_examples(ctx: &Context<'_>, rotation: &Rotation, max: usize, seed: u64) -> Vec<Example> {
    let mut bins = train_bins(ctx, rotation);
    if max > 0 && bins.len() > max {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picked: Vec<usize> = sample(&mut rng, bins.len(), max).into_vec();
        picked.sort_unstable();
        bins = picked.into_iter().map(|i| bins[i]).collect();
    }
    bins.into_iter().map(|i| Example { input: to_input(&ctx.window(i)), target: ctx.labels(i).values }).collect()
}

pub fn train_cnn(ctx: &Context<'_>, rotation: &Rotation, cfg: &RunConfig) -> Result<TrainedModel> {
    let seed = point_seed(cfg.seed, rotation.index, ctx.delta_s_km, ctx.delta_t_min);
    let examples = training_examples(ctx, rotation, cfg.cnn.max_train_windows, seed);
    let spec = ctx.cnn_spec(cfg.cnn.effective_filters(), cfg);
    let train_cfg = cnn::TrainConfig { seed, ..cfg.cnn.train.clone() };
    let mut model = cnn::train(&examples, spec, &train_cfg)?;
    if let Some(s) = model.summary.as_mut() {
        s.data_fingerprint = Some(dataset_fingerprint(ctx.dataset()));
    }
    Ok(model)
}

/// Calibrates the baseline's prior and threshold on every training window.
pub fn train_bf(ctx: &Context<'_>, rotation: &Rotation, cfg: &RunConfig) -> Result<(BfConfig, f64)> {
    let mut data = CalibrationData::default();
    for i in train_bins(ctx, rotation) {
        data.add_window(&ctx.evidence(i), &ctx.labels(i).values);
    }
    bf::calibrate(&data, &cfg.bf.base, &cfg.bf.calibration)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Report;

    fn tiny_prepared() -> Prepared {
        let region = BoundingBox::from_origin_km(36.0, -87.0, 8.0, 8.0);
        let (lat, lon) = crate::grid::unproject(36.0, -87.0, 2.5, 2.5);
        let reports = vec![
            Report { id: "a".into(), time: 600, lat, lon, reliability: 9 },
            Report { id: "b".into(), time: 1000, lat, lon, reliability: 7 },
        ];
        let incidents = vec![Incident { id: "i".into(), time: 1500, lat, lon }];
        let dataset = Dataset::from_records(region, reports, incidents, vec![], vec![]);
        Prepared {
            dataset,
            region,
            epoch: 0,
            end: 7200,
            blocks: vec![TimeRange { start: 0, end: 7200 }],
            fingerprint: String::new(),
        }
    }

    #[test]
    fn bins_and_evidence() {
        let prep = tiny_prepared();
        let cfg = RunConfig::default();
        let ctx = Context::new(&prep, &cfg, 1.0, 5).unwrap();
        assert_eq!(ctx.bins_in(&TimeRange { start: 0, end: 7200 }), 0..24);
        assert_eq!(ctx.bins_in(&TimeRange { start: 1, end: 301 }), 1..2);
        let ev = ctx.evidence(3);
        let cell = ctx.grid.flat(ctx.grid.locate(ctx.dataset().reports[0].lat, ctx.dataset().reports[0].lon).unwrap());
        assert_eq!(ev[cell], vec![9, 7]);
        // Window of 6 bins ending at bin 7 starts at 600 s.
        assert_eq!(ctx.evidence(7)[cell], vec![9, 7]);
        assert!(ctx.evidence(8)[cell] == vec![7]);
    }

    #[test]
    fn sequential_windows_match_direct_builds() {
        let prep = tiny_prepared();
        let cfg = RunConfig::default();
        let ctx = Context::new(&prep, &cfg, 2.0, 5).unwrap();
        let seq: Vec<Window> = ctx.windows(0..12).collect();
        for (w, i) in seq.iter().zip(0..) {
            assert_eq!(*w, ctx.window(i));
        }
    }

    #[test]
    fn bf_evaluation_counts_cells() {
        let prep = tiny_prepared();
        let cfg = RunConfig::default();
        let ctx = Context::new(&prep, &cfg, 2.0, 5).unwrap();
        let det = Detector::Bf(BfConfig { prior: 0.01, threshold: 0.1, ..BfConfig::default() });
        let ev = evaluate(&ctx, &det, &prep.blocks[0]).unwrap();
        let m = &ev.metrics;
        assert_eq!(m.total_incidents, 1);
        let windows = 24 * ctx.grid.cells() as u64;
        assert!(m.tp + m.fp + m.fn_ <= windows);
        assert_eq!(m.matched_incidents, 1);
        assert!(m.early_pred_pct == 100.0);
    }
}

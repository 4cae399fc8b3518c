//! Per-step feature frames and stacked windows.
//!
//! A frame holds five channels per cell, in this order: report volume, sum of
//! reliabilities, mean reliability, traffic congestion and precipitation. A
//! window stacks the `K = T′/Δt` most recent frames along the channel axis,
//! oldest first.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Timestamp};
use crate::error::{Error, Result};
use crate::grid::{geodesic_km, GridSpec, TimeBin};

pub const FEATURE_NAMES: [&str; 5] = ["volume", "sum_reliability", "mean_reliability", "congestion", "precipitation"];
pub const NUM_FEATURES: usize = FEATURE_NAMES.len();

pub const CH_VOLUME: usize = 0;
pub const CH_SUM_RELIABILITY: usize = 1;
pub const CH_MEAN_RELIABILITY: usize = 2;
pub const CH_CONGESTION: usize = 3;
pub const CH_PRECIPITATION: usize = 4;

/// Traffic observations older than this at bin end are ignored.
pub const TRAFFIC_STALENESS_SECS: i64 = 30 * 60;

/// Dense `(nx, ny, NUM_FEATURES)` array for one time step. `bin` is `None`
/// for zero padding before the epoch start.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameTensor {
    pub bin: Option<TimeBin>,
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl FrameTensor {
    pub fn zeros(bin: Option<TimeBin>, nx: usize, ny: usize) -> Self {
        FrameTensor { bin, nx, ny, values: vec![0.0; nx * ny * NUM_FEATURES] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, f: usize) -> f64 {
        self.values[(x * self.ny + y) * NUM_FEATURES + f]
    }

    #[inline]
    fn at(&mut self, cell: usize, f: usize) -> &mut f64 {
        &mut self.values[cell * NUM_FEATURES + f]
    }
}

/// Number of frames per window; `T′` must be a whole number of steps.
pub fn window_len(step_min: u32, t_prime_min: u32) -> Result<usize> {
    if step_min == 0 || t_prime_min == 0 || !t_prime_min.is_multiple_of(step_min) {
        return Err(Error::config(
            "time",
            format!("window length {t_prime_min} min is not a positive multiple of the {step_min} min step"),
        ));
    }
    Ok((t_prime_min / step_min) as usize)
}

struct Station {
    times: Vec<Timestamp>,
    values: Vec<f64>,
}

/// Cached spatial lookups for building frames from one dataset on one grid.
pub struct FrameBuilder<'a> {
    ds: &'a Dataset,
    spec: GridSpec,
    report_cell: Vec<Option<usize>>,
    traffic_cell: Vec<Option<usize>>,
    traffic_segment: Vec<usize>,
    segment_count: usize,
    stations: Vec<Station>,
    nearest_station: Vec<Option<usize>>,
    dropped_reports: usize,
}

impl<'a> FrameBuilder<'a> {
    pub fn new(ds: &'a Dataset, spec: GridSpec) -> Self {
        let report_cell: Vec<Option<usize>> =
            ds.reports.iter().map(|r| spec.locate(r.lat, r.lon).ok().map(|c| spec.flat(c))).collect();
        let dropped_reports = report_cell.iter().filter(|c| c.is_none()).count();
        if dropped_reports > 0 {
            log::info!("{dropped_reports} reports fall outside the grid and are ignored");
        }

        let mut segment_ids: HashMap<&str, usize> = HashMap::new();
        let mut traffic_segment = Vec::with_capacity(ds.traffic.len());
        let mut traffic_cell = Vec::with_capacity(ds.traffic.len());
        for t in &ds.traffic {
            let next = segment_ids.len();
            traffic_segment.push(*segment_ids.entry(t.segment_id.as_str()).or_insert(next));
            traffic_cell.push(spec.locate(t.lat, t.lon).ok().map(|c| spec.flat(c)));
        }

        let mut station_ids: HashMap<&str, usize> = HashMap::new();
        let mut stations: Vec<Station> = Vec::new();
        let mut station_pos: Vec<(f64, f64)> = Vec::new();
        for w in &ds.weather {
            let idx = *station_ids.entry(w.station_id.as_str()).or_insert_with(|| {
                stations.push(Station { times: Vec::new(), values: Vec::new() });
                station_pos.push((w.lat, w.lon));
                stations.len() - 1
            });
            stations[idx].times.push(w.time);
            stations[idx].values.push(w.precipitation);
        }
        let nearest_station = spec
            .centers()
            .into_iter()
            .map(|center| {
                let mut best: Option<(usize, f64)> = None;
                for (i, p) in station_pos.iter().enumerate() {
                    let d = geodesic_km(center, *p);
                    if best.is_none_or(|(_, bd)| d < bd) {
                        best = Some((i, d));
                    }
                }
                best.map(|(i, _)| i)
            })
            .collect();

        FrameBuilder {
            ds,
            spec,
            report_cell,
            traffic_cell,
            traffic_segment,
            segment_count: segment_ids.len(),
            stations,
            nearest_station,
            dropped_reports,
        }
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn dataset(&self) -> &'a Dataset {
        self.ds
    }

    /// Reports that could not be placed on the grid.
    pub fn dropped_reports(&self) -> usize {
        self.dropped_reports
    }

    /// Flat cell index of each report (`None` when off-grid), parallel to `dataset().reports`.
    pub fn report_cells(&self) -> &[Option<usize>] {
        &self.report_cell
    }

    pub fn build(&self, bin: TimeBin) -> FrameTensor {
        let spec = &self.spec;
        let mut frame = FrameTensor::zeros(Some(bin), spec.nx, spec.ny);
        let (start, end) = (bin.start(), bin.end());

        let reports = &self.ds.reports;
        let lo = reports.partition_point(|r| r.time < start);
        let hi = reports.partition_point(|r| r.time < end);
        for i in lo..hi {
            if let Some(cell) = self.report_cell[i] {
                *frame.at(cell, CH_VOLUME) += 1.0;
                *frame.at(cell, CH_SUM_RELIABILITY) += f64::from(reports[i].reliability);
            }
        }
        for cell in 0..spec.cells() {
            let n = frame.values[cell * NUM_FEATURES + CH_VOLUME];
            if n > 0.0 {
                let s = frame.values[cell * NUM_FEATURES + CH_SUM_RELIABILITY];
                *frame.at(cell, CH_MEAN_RELIABILITY) = s / n;
            }
        }

        // Latest fresh observation per segment at or before bin end.
        let traffic = &self.ds.traffic;
        if !traffic.is_empty() {
            let lo = traffic.partition_point(|t| t.time < end - TRAFFIC_STALENESS_SECS);
            let hi = traffic.partition_point(|t| t.time <= end);
            let mut latest: Vec<Option<usize>> = vec![None; self.segment_count];
            for i in lo..hi {
                latest[self.traffic_segment[i]] = Some(i);
            }
            let mut sum = vec![0.0; spec.cells()];
            let mut count = vec![0u32; spec.cells()];
            for i in latest.into_iter().flatten() {
                if let Some(cell) = self.traffic_cell[i] {
                    let t = &traffic[i];
                    sum[cell] += ((t.reference_speed - t.speed) / t.reference_speed).max(0.0);
                    count[cell] += 1;
                }
            }
            for cell in 0..spec.cells() {
                if count[cell] > 0 {
                    *frame.at(cell, CH_CONGESTION) = sum[cell] / f64::from(count[cell]);
                }
            }
        }

        if !self.stations.is_empty() {
            let current: Vec<f64> = self
                .stations
                .iter()
                .map(|s| {
                    let k = s.times.partition_point(|t| *t <= end);
                    if k == 0 {
                        0.0
                    } else {
                        s.values[k - 1]
                    }
                })
                .collect();
            for cell in 0..spec.cells() {
                if let Some(st) = self.nearest_station[cell] {
                    *frame.at(cell, CH_PRECIPITATION) = current[st];
                }
            }
        }
        frame
    }
}

/// Builds a single frame. Prefer [`FrameBuilder`] when building many.
pub fn build_frame(ds: &Dataset, spec: &GridSpec, bin: TimeBin) -> FrameTensor {
    FrameBuilder::new(ds, *spec).build(bin)
}

/// Frames keyed by bin index, built on demand.
pub struct FrameStore<'a> {
    builder: FrameBuilder<'a>,
    frames: BTreeMap<u64, FrameTensor>,
}

impl<'a> FrameStore<'a> {
    pub fn new(builder: FrameBuilder<'a>) -> Self {
        FrameStore { builder, frames: BTreeMap::new() }
    }

    pub fn builder(&self) -> &FrameBuilder<'a> {
        &self.builder
    }

    pub fn frame(&mut self, bin: TimeBin) -> &FrameTensor {
        let builder = &self.builder;
        self.frames.entry(bin.index).or_insert_with(|| builder.build(bin))
    }

    /// Drops cached frames with index below `index`.
    pub fn evict_before(&mut self, index: u64) {
        self.frames = self.frames.split_off(&index);
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// The `K` frames ending at `end_bin`, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub end_bin: TimeBin,
    pub frames: Vec<FrameTensor>,
    pub feature_names: Vec<String>,
}

impl Window {
    pub fn nx(&self) -> usize {
        self.frames[0].nx
    }

    pub fn ny(&self) -> usize {
        self.frames[0].ny
    }

    pub fn channels(&self) -> usize {
        self.frames.len() * NUM_FEATURES
    }
}

pub fn build_window(store: &mut FrameStore<'_>, end_bin: TimeBin, t_prime_min: u32) -> Result<Window> {
    let k = window_len(end_bin.step_min, t_prime_min)?;
    let (nx, ny) = (store.builder.spec.nx, store.builder.spec.ny);
    let mut frames = Vec::with_capacity(k);
    for back in (0..k as u64).rev() {
        match end_bin.index.checked_sub(back) {
            Some(idx) => frames.push(store.frame(end_bin.with_index(idx)).clone()),
            None => frames.push(FrameTensor::zeros(None, nx, ny)),
        }
    }
    Ok(Window { end_bin, frames, feature_names: FEATURE_NAMES.iter().map(|s| s.to_string()).collect() })
}

/// Detector input: `(nx, ny, channels)` row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct InputTensor {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl InputTensor {
    pub fn zeros(nx: usize, ny: usize, channels: usize) -> Self {
        InputTensor { nx, ny, channels, data: vec![0.0; nx * ny * channels] }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(x * self.ny + y) * self.channels + c]
    }
}

/// Stacks frames on the channel axis: channel `k·NUM_FEATURES + f` is feature `f` of frame `k`.
pub fn to_input(win: &Window) -> InputTensor {
    let (nx, ny, k) = (win.nx(), win.ny(), win.frames.len());
    let channels = k * NUM_FEATURES;
    let mut out = InputTensor::zeros(nx, ny, channels);
    for cell in 0..nx * ny {
        for (fi, frame) in win.frames.iter().enumerate() {
            let src = &frame.values[cell * NUM_FEATURES..(cell + 1) * NUM_FEATURES];
            let dst = cell * channels + fi * NUM_FEATURES;
            out.data[dst..dst + NUM_FEATURES].copy_from_slice(src);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorManifest {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub end_bin: u64,
    pub feature_names: Vec<String>,
}

/// Writes `window_<end_bin>.bin` (row-major little-endian f64) and its JSON sidecar into `dir`.
pub fn dump_window(win: &Window, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let input = to_input(win);
    let stem = format!("window_{}", win.end_bin.index);
    let bin_path = dir.join(format!("{stem}.bin"));
    let mut w = BufWriter::new(File::create(&bin_path).map_err(|e| Error::io(&bin_path, e))?);
    for v in &input.data {
        w.write_all(&v.to_le_bytes()).map_err(|e| Error::io(&bin_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&bin_path, e))?;
    let manifest = TensorManifest {
        nx: input.nx,
        ny: input.ny,
        channels: input.channels,
        end_bin: win.end_bin.index,
        feature_names: win.feature_names.clone(),
    };
    let json_path = dir.join(format!("{stem}.json"));
    std::fs::write(&json_path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

/// Reads a tensor written by [`dump_window`].
pub fn read_window_dump(bin_path: &Path) -> Result<(TensorManifest, InputTensor)> {
    let json_path = bin_path.with_extension("json");
    let manifest: TensorManifest =
        serde_json::from_str(&std::fs::read_to_string(&json_path).map_err(|e| Error::io(&json_path, e))?)?;
    let bytes = std::fs::read(bin_path).map_err(|e| Error::io(bin_path, e))?;
    let expected = manifest.nx * manifest.ny * manifest.channels * 8;
    if bytes.len() != expected {
        return Err(Error::Argument(format!(
            "{}: expected {expected} bytes, found {}",
            bin_path.display(),
            bytes.len()
        )));
    }
    let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let input = InputTensor { nx: manifest.nx, ny: manifest.ny, channels: manifest.channels, data };
    Ok((manifest, input))
}

//! Convolutional incident detector.
//!
//! Architecture (all spatial ops use zero "same" padding on the bottom/right):
//!
//! ```text
//! input (nx, ny, C)
//!   → conv 2×2, F filters          (linear by default)
//!   → max-pool 2×2, stride 2       (ceil(nx/2), ceil(ny/2), F)
//!   → conv 2×2, F filters          (linear by default)
//!   → flatten
//!   → dense 2·N_o, ReLU
//!   → dense N_o, sigmoid           one probability per grid cell
//! ```
//!
//! Training minimises weighted binary cross-entropy with mini-batch SGD and
//! momentum; gradients are computed analytically. The number of epochs and the
//! decision threshold are picked by k-fold cross-validation on F1.
//!
//! Weights live in one flat vector laid out as
//! `[conv1.w, conv1.b, conv2.w, conv2.b, dense1.w, dense1.b, dense2.w, dense2.b]`.
//! Convolution weights are `(4·C_in) × F` with row `(dx·2 + dy)·C_in + c`;
//! dense weights are `in × out`, row-major.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{to_input, InputTensor, Window};
use crate::grid::{CellIndex, GridSpec};
use crate::metrics::Counts;

/// Filter count used in the original deployment; the default is smaller for desk-scale runs.
pub const FULL_FILTERS: usize = 256;
pub const DEFAULT_FILTERS: usize = 32;

const MODEL_MAGIC: &[u8; 8] = b"CROMECNN";
const MODEL_VERSION: u32 = 1;
const PROB_CLAMP: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConvActivation {
    #[default]
    Linear,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CnnSpec {
    pub nx: usize,
    pub ny: usize,
    pub channels: usize,
    pub filters: usize,
    #[serde(default)]
    pub conv_activation: ConvActivation,
}

impl CnnSpec {
    pub fn new(nx: usize, ny: usize, channels: usize, filters: usize) -> Self {
        CnnSpec { nx, ny, channels, filters, conv_activation: ConvActivation::Linear }
    }

    pub fn for_grid(grid: &GridSpec, channels: usize, filters: usize) -> Self {
        CnnSpec::new(grid.nx, grid.ny, channels, filters)
    }

    pub fn validate(&self) -> Result<()> {
        if self.nx < 4 || self.ny < 4 {
            return Err(Error::Argument(format!(
                "grid {}x{} is too small for 2x2 pooling (need at least 4x4)",
                self.nx, self.ny
            )));
        }
        if self.channels == 0 || self.filters == 0 {
            return Err(Error::Argument("channels and filters must be positive".into()));
        }
        Ok(())
    }

    pub fn pooled(&self) -> (usize, usize) {
        (self.nx.div_ceil(2), self.ny.div_ceil(2))
    }

    pub fn outputs(&self) -> usize {
        self.nx * self.ny
    }

    pub fn hidden(&self) -> usize {
        2 * self.outputs()
    }

    pub fn flat_features(&self) -> usize {
        let (px, py) = self.pooled();
        px * py * self.filters
    }

    pub fn input_len(&self) -> usize {
        self.nx * self.ny * self.channels
    }

    pub fn layout(&self) -> Layout {
        let f = self.filters;
        let mut at = 0;
        let mut take = |n: usize| {
            let start = at;
            at += n;
            start..at
        };
        let conv1_w = take(4 * self.channels * f);
        let conv1_b = take(f);
        let conv2_w = take(4 * f * f);
        let conv2_b = take(f);
        let dense1_w = take(self.flat_features() * self.hidden());
        let dense1_b = take(self.hidden());
        let dense2_w = take(self.hidden() * self.outputs());
        let dense2_b = take(self.outputs());
        Layout { conv1_w, conv1_b, conv2_w, conv2_b, dense1_w, dense1_b, dense2_w, dense2_b, len: at }
    }

    pub fn param_count(&self) -> usize {
        self.layout().len
    }
}

/// Ranges of each parameter block within the flat weight vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    pub conv1_w: std::ops::Range<usize>,
    pub conv1_b: std::ops::Range<usize>,
    pub conv2_w: std::ops::Range<usize>,
    pub conv2_b: std::ops::Range<usize>,
    pub dense1_w: std::ops::Range<usize>,
    pub dense1_b: std::ops::Range<usize>,
    pub dense2_w: std::ops::Range<usize>,
    pub dense2_b: std::ops::Range<usize>,
    pub len: usize,
}

/// Glorot-uniform weights, zero biases.
pub fn init_weights(spec: &CnnSpec, seed: u64) -> Vec<f64> {
    let l = spec.layout();
    let mut w = vec![0.0; l.len];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let f = spec.filters;
    let blocks = [
        (l.conv1_w.clone(), 4 * spec.channels, 4 * f),
        (l.conv2_w.clone(), 4 * f, 4 * f),
        (l.dense1_w.clone(), spec.flat_features(), spec.hidden()),
        (l.dense2_w.clone(), spec.hidden(), spec.outputs()),
    ];
    for (range, fan_in, fan_out) in blocks {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        for v in &mut w[range] {
            *v = rng.random_range(-limit..limit);
        }
    }
    w
}

// c (m×n) = op(a) (m×k) · op(b) (k×n), optionally accumulating into c.
// `a_t` means `a` is stored k×m; `b_t` means `b` is stored n×k.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, c: &mut [f64], accumulate: bool) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the asserts above guarantee every index touched by these strides is in bounds.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn add_bias(rows: usize, bias: &[f64], out: &mut [f64]) {
    let n = bias.len();
    for r in 0..rows {
        for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
            *o += b;
        }
    }
}

fn col_sums(rows: usize, n: usize, m: &[f64], out: &mut [f64]) {
    for r in 0..rows {
        for (o, v) in out.iter_mut().zip(&m[r * n..(r + 1) * n]) {
            *o += v;
        }
    }
}

// Rows of 2×2 patches: row (b, x, y) holds in[x+dx, y+dy, :] for (dx, dy) in
// (0,0),(0,1),(1,0),(1,1), zero beyond the edge.
fn im2col(batch: usize, nx: usize, ny: usize, c: usize, input: &[f64], col: &mut [f64]) {
    let row_len = 4 * c;
    for b in 0..batch {
        let img = &input[b * nx * ny * c..(b + 1) * nx * ny * c];
        for x in 0..nx {
            for y in 0..ny {
                let row = &mut col[((b * nx + x) * ny + y) * row_len..][..row_len];
                for (k, (dx, dy)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let dst = &mut row[k * c..(k + 1) * c];
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < nx && sy < ny {
                        dst.copy_from_slice(&img[(sx * ny + sy) * c..(sx * ny + sy + 1) * c]);
                    } else {
                        dst.fill(0.0);
                    }
                }
            }
        }
    }
}

// Adjoint of im2col: scatter-add patch gradients back onto the image.
fn col2im(batch: usize, nx: usize, ny: usize, c: usize, col: &[f64], out: &mut [f64]) {
    out.fill(0.0);
    let row_len = 4 * c;
    for b in 0..batch {
        let img = &mut out[b * nx * ny * c..(b + 1) * nx * ny * c];
        for x in 0..nx {
            for y in 0..ny {
                let row = &col[((b * nx + x) * ny + y) * row_len..][..row_len];
                for (k, (dx, dy)) in [(0, 0), (0, 1), (1, 0), (1, 1)].into_iter().enumerate() {
                    let (sx, sy) = (x + dx, y + dy);
                    if sx < nx && sy < ny {
                        let dst = &mut img[(sx * ny + sy) * c..(sx * ny + sy + 1) * c];
                        for (d, s) in dst.iter_mut().zip(&row[k * c..(k + 1) * c]) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

// 2×2/2 max-pool with ceil output size; records the flat source index of each max
// (first in scan order on ties).
fn max_pool(batch: usize, nx: usize, ny: usize, c: usize, input: &[f64], out: &mut [f64], arg: &mut [usize]) {
    let (px, py) = (nx.div_ceil(2), ny.div_ceil(2));
    for b in 0..batch {
        for ox in 0..px {
            for oy in 0..py {
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = 0;
                    for sx in 2 * ox..(2 * ox + 2).min(nx) {
                        for sy in 2 * oy..(2 * oy + 2).min(ny) {
                            let i = ((b * nx + sx) * ny + sy) * c + ch;
                            if input[i] > best {
                                best = input[i];
                                best_i = i;
                            }
                        }
                    }
                    let o = ((b * px + ox) * py + oy) * c + ch;
                    out[o] = best;
                    arg[o] = best_i;
                }
            }
        }
    }
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Intermediate activations for one batch, kept for the backward pass.
struct Activations {
    batch: usize,
    col1: Vec<f64>,
    out1: Vec<f64>,
    pool: Vec<f64>,
    pool_arg: Vec<usize>,
    col2: Vec<f64>,
    out2: Vec<f64>,
    z1: Vec<f64>,
    hidden: Vec<f64>,
    probs: Vec<f64>,
}

fn activate(act: ConvActivation, v: &mut [f64]) {
    if act == ConvActivation::Relu {
        for x in v {
            *x = x.max(0.0);
        }
    }
}

fn forward_batch(spec: &CnnSpec, w: &[f64], inputs: &[f64], batch: usize) -> Activations {
    let l = spec.layout();
    let (nx, ny, c, f) = (spec.nx, spec.ny, spec.channels, spec.filters);
    let (px, py) = spec.pooled();
    let (hid, n_out, flat) = (spec.hidden(), spec.outputs(), spec.flat_features());

    let rows1 = batch * nx * ny;
    let mut col1 = vec![0.0; rows1 * 4 * c];
    im2col(batch, nx, ny, c, inputs, &mut col1);
    let mut out1 = vec![0.0; rows1 * f];
    gemm(rows1, 4 * c, f, &col1, false, &w[l.conv1_w.clone()], false, &mut out1, false);
    add_bias(rows1, &w[l.conv1_b.clone()], &mut out1);
    activate(spec.conv_activation, &mut out1);

    let rows2 = batch * px * py;
    let mut pool = vec![0.0; rows2 * f];
    let mut pool_arg = vec![0usize; rows2 * f];
    max_pool(batch, nx, ny, f, &out1, &mut pool, &mut pool_arg);

    let mut col2 = vec![0.0; rows2 * 4 * f];
    im2col(batch, px, py, f, &pool, &mut col2);
    let mut out2 = vec![0.0; rows2 * f];
    gemm(rows2, 4 * f, f, &col2, false, &w[l.conv2_w.clone()], false, &mut out2, false);
    add_bias(rows2, &w[l.conv2_b.clone()], &mut out2);
    activate(spec.conv_activation, &mut out2);

    // out2 is already (batch, px·py·f) row-major: the flattened features.
    let mut z1 = vec![0.0; batch * hid];
    gemm(batch, flat, hid, &out2, false, &w[l.dense1_w.clone()], false, &mut z1, false);
    add_bias(batch, &w[l.dense1_b.clone()], &mut z1);
    let hidden: Vec<f64> = z1.iter().map(|v| v.max(0.0)).collect();

    let mut probs = vec![0.0; batch * n_out];
    gemm(batch, hid, n_out, &hidden, false, &w[l.dense2_w.clone()], false, &mut probs, false);
    add_bias(batch, &w[l.dense2_b.clone()], &mut probs);
    for p in &mut probs {
        *p = sigmoid(*p);
    }
    Activations { batch, col1, out1, pool, pool_arg, col2, out2, z1, hidden, probs }
}

/// Mean weighted BCE over all cells in the batch.
fn bce(probs: &[f64], targets: &[u8], pos_weight: f64) -> f64 {
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            if *y == 1 {
                -pos_weight * p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum();
    total / probs.len() as f64
}

fn backward(spec: &CnnSpec, w: &[f64], acts: &Activations, targets: &[u8], pos_weight: f64, grad: &mut [f64]) {
    let l = spec.layout();
    let (nx, ny, c, f) = (spec.nx, spec.ny, spec.channels, spec.filters);
    let (px, py) = spec.pooled();
    let (hid, n_out, flat) = (spec.hidden(), spec.outputs(), spec.flat_features());
    let batch = acts.batch;
    grad.fill(0.0);

    let scale = 1.0 / (batch * n_out) as f64;
    let dz2: Vec<f64> = acts
        .probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let y = f64::from(*y);
            (p * (pos_weight * y + 1.0 - y) - pos_weight * y) * scale
        })
        .collect();
    gemm(hid, batch, n_out, &acts.hidden, true, &dz2, false, &mut grad[l.dense2_w.clone()], false);
    col_sums(batch, n_out, &dz2, &mut grad[l.dense2_b.clone()]);

    let mut dz1 = vec![0.0; batch * hid];
    gemm(batch, n_out, hid, &dz2, false, &w[l.dense2_w.clone()], true, &mut dz1, false);
    for (d, z) in dz1.iter_mut().zip(&acts.z1) {
        if *z <= 0.0 {
            *d = 0.0;
        }
    }
    gemm(flat, batch, hid, &acts.out2, true, &dz1, false, &mut grad[l.dense1_w.clone()], false);
    col_sums(batch, hid, &dz1, &mut grad[l.dense1_b.clone()]);

    let rows2 = batch * px * py;
    let mut dout2 = vec![0.0; batch * flat];
    gemm(batch, hid, flat, &dz1, false, &w[l.dense1_w.clone()], true, &mut dout2, false);
    if spec.conv_activation == ConvActivation::Relu {
        for (d, o) in dout2.iter_mut().zip(&acts.out2) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
    }
    gemm(4 * f, rows2, f, &acts.col2, true, &dout2, false, &mut grad[l.conv2_w.clone()], false);
    col_sums(rows2, f, &dout2, &mut grad[l.conv2_b.clone()]);

    let mut dcol2 = vec![0.0; rows2 * 4 * f];
    gemm(rows2, f, 4 * f, &dout2, false, &w[l.conv2_w.clone()], true, &mut dcol2, false);
    let mut dpool = vec![0.0; rows2 * f];
    col2im(batch, px, py, f, &dcol2, &mut dpool);

    let rows1 = batch * nx * ny;
    let mut dout1 = vec![0.0; rows1 * f];
    for (d, src) in dpool.iter().zip(&acts.pool_arg) {
        dout1[*src] += d;
    }
    if spec.conv_activation == ConvActivation::Relu {
        for (d, o) in dout1.iter_mut().zip(&acts.out1) {
            if *o <= 0.0 {
                *d = 0.0;
            }
        }
    }
    gemm(4 * c, rows1, f, &acts.col1, true, &dout1, false, &mut grad[l.conv1_w.clone()], false);
    col_sums(rows1, f, &dout1, &mut grad[l.conv1_b.clone()]);
    let _ = &acts.pool;
}

/// One training example: a stacked window and its per-cell labels (flat `x·ny + y`).
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub input: InputTensor,
    pub target: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Upper bound on epochs; cross-validation picks the best count up to this.
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Weight on positive cells; `None` uses #negatives/#positives of the training data.
    pub pos_weight: Option<f64>,
    pub threshold_grid: Vec<f64>,
    pub folds: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 8,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            pos_weight: None,
            threshold_grid: default_threshold_grid(),
            folds: 3,
            seed: 42,
        }
    }
}

pub fn default_threshold_grid() -> Vec<f64> {
    let mut g: Vec<f64> = (1..20).map(|i| i as f64 * 0.05).collect();
    g.extend([0.97, 0.99]);
    g
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::config("cnn", m));
        if self.epochs == 0 || self.batch_size == 0 || self.folds == 0 {
            return bad("epochs, batch_size and folds must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must lie in [0, 1), got {}", self.momentum));
        }
        if let Some(pw) = self.pos_weight {
            if !(pw >= 1.0 && pw.is_finite()) {
                return bad(format!("pos_weight must be >= 1, got {pw}"));
            }
        }
        if self.threshold_grid.is_empty() || self.threshold_grid.iter().any(|t| !(*t > 0.0 && *t < 1.0)) {
            return bad("threshold_grid needs values in (0, 1)".into());
        }
        Ok(())
    }
}

/// What training decided and why.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub config: TrainConfig,
    pub examples: usize,
    pub positive_cells: u64,
    pub pos_weight: f64,
    pub chosen_epochs: usize,
    pub validation_f1: Option<f64>,
    /// Mean training loss per epoch of the final fit.
    pub epoch_losses: Vec<f64>,
    /// Fingerprint of the training data, if the caller supplied one.
    pub data_fingerprint: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainedModel {
    pub spec: CnnSpec,
    pub weights: Vec<f64>,
    pub threshold: f64,
    /// Per-channel multipliers applied to inputs before the first layer.
    pub input_scale: Vec<f64>,
    pub summary: Option<TrainSummary>,
}

impl TrainedModel {
    /// Untrained model with the given weights, unit input scaling and no summary.
    pub fn from_weights(spec: CnnSpec, weights: Vec<f64>, threshold: f64) -> Result<Self> {
        spec.validate()?;
        if weights.len() != spec.param_count() {
            return Err(Error::Argument(format!("expected {} weights, got {}", spec.param_count(), weights.len())));
        }
        Ok(TrainedModel { spec, weights, threshold, input_scale: vec![1.0; spec.channels], summary: None })
    }

    fn scaled_inputs<'a>(&self, inputs: impl IntoIterator<Item = &'a InputTensor>) -> Result<(Vec<f64>, usize)> {
        let mut out = Vec::new();
        let mut n = 0;
        for input in inputs {
            check_input(&self.spec, input)?;
            out.extend(
                input
                    .data
                    .chunks_exact(self.spec.channels)
                    .flat_map(|cell| cell.iter().zip(&self.input_scale).map(|(v, s)| v * s)),
            );
            n += 1;
        }
        Ok((out, n))
    }

    /// Probabilities for several inputs, evaluated in batches.
    pub fn predict(&self, inputs: &[&InputTensor]) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(inputs.len());
        for chunk in inputs.chunks(64) {
            let (data, n) = self.scaled_inputs(chunk.iter().copied())?;
            let acts = forward_batch(&self.spec, &self.weights, &data, n);
            out.extend(acts.probs.chunks_exact(self.spec.outputs()).map(|p| p.to_vec()));
        }
        Ok(out)
    }
}

fn check_input(spec: &CnnSpec, input: &InputTensor) -> Result<()> {
    if (input.nx, input.ny, input.channels) != (spec.nx, spec.ny, spec.channels) {
        return Err(Error::Argument(format!(
            "input shape ({}, {}, {}) does not match model ({}, {}, {})",
            input.nx, input.ny, input.channels, spec.nx, spec.ny, spec.channels
        )));
    }
    if input.data.len() != spec.input_len() {
        return Err(Error::Argument("input buffer length does not match its shape".into()));
    }
    if input.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Argument("input contains non-finite values".into()));
    }
    Ok(())
}

/// Per-cell probabilities, flat `x·ny + y`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityGrid {
    pub nx: usize,
    pub ny: usize,
    pub values: Vec<f64>,
}

impl ProbabilityGrid {
    pub fn get(&self, c: CellIndex) -> f64 {
        self.values[c.x * self.ny + c.y]
    }

    pub fn cells_at_least(&self, threshold: f64) -> Vec<CellIndex> {
        self.values
            .iter()
            .enumerate()
            .filter(|(_, p)| **p >= threshold)
            .map(|(i, _)| CellIndex::new(i / self.ny, i % self.ny))
            .collect()
    }
}

pub fn forward(model: &TrainedModel, input: &InputTensor) -> Result<ProbabilityGrid> {
    let (data, _) = model.scaled_inputs([input])?;
    let acts = forward_batch(&model.spec, &model.weights, &data, 1);
    Ok(ProbabilityGrid { nx: model.spec.nx, ny: model.spec.ny, values: acts.probs })
}

/// Loss and its exact gradient with respect to every weight.
pub fn loss_and_grad(model: &TrainedModel, batch: &[Example], pos_weight: f64) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let (data, n) = model.scaled_inputs(batch.iter().map(|e| &e.input))?;
    let mut targets = Vec::with_capacity(n * model.spec.outputs());
    for e in batch {
        if e.target.len() != model.spec.outputs() {
            return Err(Error::Argument("target length does not match the grid".into()));
        }
        targets.extend_from_slice(&e.target);
    }
    let acts = forward_batch(&model.spec, &model.weights, &data, n);
    let loss = bce(&acts.probs, &targets, pos_weight);
    let mut grad = vec![0.0; model.weights.len()];
    backward(&model.spec, &model.weights, &acts, &targets, pos_weight, &mut grad);
    Ok((loss, grad))
}

pub fn detect(model: &TrainedModel, win: &Window) -> Result<Vec<CellIndex>> {
    Ok(forward(model, &to_input(win))?.cells_at_least(model.threshold))
}

/// Per-channel `1/rms` over all examples, or 1 for all-zero channels.
fn channel_scales(spec: &CnnSpec, data: &[Example]) -> Vec<f64> {
    let c = spec.channels;
    let mut sq = vec![0.0; c];
    let mut n = 0usize;
    for e in data {
        for cell in e.input.data.chunks_exact(c) {
            for (s, v) in sq.iter_mut().zip(cell) {
                *s += v * v;
            }
            n += 1;
        }
    }
    sq.iter()
        .map(|s| {
            let rms = (s / n.max(1) as f64).sqrt();
            if rms > 1e-9 {
                1.0 / rms
            } else {
                1.0
            }
        })
        .collect()
}

struct Fit {
    weights: Vec<f64>,
    epoch_losses: Vec<f64>,
}

/// Mini-batch SGD with momentum; calls `on_epoch(epoch, weights)` after each epoch.
fn fit(
    spec: &CnnSpec,
    scale: &[f64],
    data: &[&Example],
    cfg: &TrainConfig,
    pos_weight: f64,
    epochs: usize,
    seed: u64,
    mut on_epoch: impl FnMut(usize, &[f64]),
) -> Fit {
    let mut w = init_weights(spec, seed);
    let mut velocity = vec![0.0; w.len()];
    let mut grad = vec![0.0; w.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9E37_79B9_7F4A_7C15);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(epochs);
    let n_out = spec.outputs();
    for epoch in 0..epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let mut inputs = Vec::with_capacity(chunk.len() * spec.input_len());
            let mut targets = Vec::with_capacity(chunk.len() * n_out);
            for &i in chunk {
                let e = data[i];
                inputs.extend(
                    e.input
                        .data
                        .chunks_exact(spec.channels)
                        .flat_map(|cell| cell.iter().zip(scale).map(|(v, s)| v * s)),
                );
                targets.extend_from_slice(&e.target);
            }
            let acts = forward_batch(spec, &w, &inputs, chunk.len());
            loss_sum += bce(&acts.probs, &targets, pos_weight) * chunk.len() as f64;
            backward(spec, &w, &acts, &targets, pos_weight, &mut grad);
            for ((wi, vi), gi) in w.iter_mut().zip(&mut velocity).zip(&grad) {
                *vi = cfg.momentum * *vi - cfg.learning_rate * gi;
                *wi += *vi;
            }
        }
        epoch_losses.push(loss_sum / data.len() as f64);
        on_epoch(epoch + 1, &w);
    }
    Fit { weights: w, epoch_losses }
}

/// Confusion counts at each threshold for the given probabilities.
pub fn threshold_counts(probs: &[Vec<f64>], targets: &[&[u8]], thresholds: &[f64]) -> Vec<Counts> {
    let mut out = vec![Counts::default(); thresholds.len()];
    for (p, t) in probs.iter().zip(targets) {
        for (pi, ti) in p.iter().zip(t.iter()) {
            for (k, thr) in thresholds.iter().enumerate() {
                out[k].add(*pi >= *thr, *ti == 1);
            }
        }
    }
    out
}

/// Trains a detector. Epoch count and threshold maximise mean validation F1
/// over contiguous folds (examples are assumed time-ordered); the final model
/// is refit on all examples. Deterministic for a given seed.
pub fn train(data: &[Example], spec: CnnSpec, cfg: &TrainConfig) -> Result<TrainedModel> {
    spec.validate()?;
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Training("no training examples".into()));
    }
    for e in data {
        check_input(&spec, &e.input)?;
        if e.target.len() != spec.outputs() {
            return Err(Error::Argument("target length does not match the grid".into()));
        }
    }
    let positives: u64 = data.iter().map(|e| e.target.iter().filter(|v| **v == 1).count() as u64).sum();
    if positives == 0 {
        return Err(Error::Training("training data has no positive cells".into()));
    }
    let total = (data.len() * spec.outputs()) as u64;
    let pos_weight = cfg.pos_weight.unwrap_or(((total - positives) as f64 / positives as f64).max(1.0));
    let scale = channel_scales(&spec, data);
    let thresholds = &cfg.threshold_grid;

    // f1_sum[epoch-1][threshold]
    let mut f1_sum = vec![vec![0.0; thresholds.len()]; cfg.epochs];
    let folds = cfg.folds.min(data.len());
    let mut validated = false;
    if folds >= 2 {
        for fold in 0..folds {
            let lo = fold * data.len() / folds;
            let hi = (fold + 1) * data.len() / folds;
            let train_set: Vec<&Example> = data[..lo].iter().chain(&data[hi..]).collect();
            let val_set: Vec<&Example> = data[lo..hi].iter().collect();
            if train_set.iter().all(|e| !e.target.contains(&1)) {
                continue;
            }
            validated = true;
            let probe =
                TrainedModel { spec, weights: Vec::new(), threshold: 0.5, input_scale: scale.clone(), summary: None };
            let val_inputs: Vec<&InputTensor> = val_set.iter().map(|e| &e.input).collect();
            let val_targets: Vec<&[u8]> = val_set.iter().map(|e| e.target.as_slice()).collect();
            fit(
                &spec,
                &scale,
                &train_set,
                cfg,
                pos_weight,
                cfg.epochs,
                cfg.seed.wrapping_add(fold as u64 + 1),
                |epoch, w| {
                    let model = TrainedModel { weights: w.to_vec(), ..probe.clone() };
                    let probs = model.predict(&val_inputs).expect("validated shapes");
                    for (k, c) in threshold_counts(&probs, &val_targets, thresholds).iter().enumerate() {
                        f1_sum[epoch - 1][k] += c.f1();
                    }
                },
            );
        }
    }

    let (chosen_epochs, threshold, validation_f1) = if validated {
        let mut best = (cfg.epochs, thresholds[0], f64::NEG_INFINITY);
        for (e, row) in f1_sum.iter().enumerate() {
            for (k, s) in row.iter().enumerate() {
                let mean = s / folds as f64;
                if mean > best.2 {
                    best = (e + 1, thresholds[k], mean);
                }
            }
        }
        (best.0, best.1, Some(best.2))
    } else {
        (cfg.epochs, f64::NAN, None)
    };

    let all: Vec<&Example> = data.iter().collect();
    let final_fit = fit(&spec, &scale, &all, cfg, pos_weight, chosen_epochs, cfg.seed, |_, _| {});
    let mut model = TrainedModel {
        spec,
        weights: final_fit.weights,
        threshold,
        input_scale: scale,
        summary: Some(TrainSummary {
            config: cfg.clone(),
            examples: data.len(),
            positive_cells: positives,
            pos_weight,
            chosen_epochs,
            validation_f1,
            epoch_losses: final_fit.epoch_losses,
            data_fingerprint: None,
        }),
    };
    if !validated {
        // No held-out data: pick the threshold on the training set itself.
        let inputs: Vec<&InputTensor> = data.iter().map(|e| &e.input).collect();
        let targets: Vec<&[u8]> = data.iter().map(|e| e.target.as_slice()).collect();
        let probs = model.predict(&inputs)?;
        let counts = threshold_counts(&probs, &targets, thresholds);
        let mut best = (thresholds[0], f64::NEG_INFINITY);
        for (k, c) in counts.iter().enumerate() {
            if c.f1() > best.1 {
                best = (thresholds[k], c.f1());
            }
        }
        model.threshold = best.0;
    }
    Ok(model)
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_array<const N: usize>(r: &mut impl Read) -> std::io::Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

/// Writes the binary model (`CROMECNN`, version, shape, threshold, input
/// scales, weights; little-endian) and a JSON sidecar with the training summary.
pub fn save_model(model: &TrainedModel, path: &Path) -> Result<()> {
    let io = |e| Error::io(path, e);
    let mut w = BufWriter::new(File::create(path).map_err(io)?);
    let s = &model.spec;
    w.write_all(MODEL_MAGIC).map_err(io)?;
    w.write_all(&MODEL_VERSION.to_le_bytes()).map_err(io)?;
    for v in [s.nx, s.ny, s.channels, s.filters] {
        write_u64(&mut w, v as u64).map_err(io)?;
    }
    w.write_all(&[match s.conv_activation {
        ConvActivation::Linear => 0,
        ConvActivation::Relu => 1,
    }])
    .map_err(io)?;
    w.write_all(&model.threshold.to_le_bytes()).map_err(io)?;
    write_u64(&mut w, model.input_scale.len() as u64).map_err(io)?;
    for v in &model.input_scale {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    write_u64(&mut w, model.weights.len() as u64).map_err(io)?;
    for v in &model.weights {
        w.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    w.flush().map_err(io)?;

    #[derive(Serialize)]
    struct Sidecar<'a> {
        format_version: u32,
        spec: &'a CnnSpec,
        threshold: f64,
        parameters: usize,
        summary: &'a Option<TrainSummary>,
    }
    let json_path = path.with_extension("json");
    let sidecar = Sidecar {
        format_version: MODEL_VERSION,
        spec: s,
        threshold: model.threshold,
        parameters: model.weights.len(),
        summary: &model.summary,
    };
    std::fs::write(&json_path, serde_json::to_string_pretty(&sidecar)? + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<TrainedModel> {
    let bad = |m: &str| Error::ModelFormat { path: path.to_path_buf(), message: m.to_string() };
    let file = File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })?;
    let mut r = BufReader::new(file);
    let trunc = |_| bad("truncated file");
    let magic: [u8; 8] = read_array(&mut r).map_err(trunc)?;
    if &magic != MODEL_MAGIC {
        return Err(bad("bad magic"));
    }
    let version = u32::from_le_bytes(read_array(&mut r).map_err(trunc)?);
    if version != MODEL_VERSION {
        return Err(bad(&format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 4];
    for d in &mut dims {
        *d = u64::from_le_bytes(read_array(&mut r).map_err(trunc)?) as usize;
    }
    let act = match read_array::<1>(&mut r).map_err(trunc)?[0] {
        0 => ConvActivation::Linear,
        1 => ConvActivation::Relu,
        _ => return Err(bad("unknown activation")),
    };
    let spec = CnnSpec { nx: dims[0], ny: dims[1], channels: dims[2], filters: dims[3], conv_activation: act };
    spec.validate().map_err(|e| bad(&e.to_string()))?;
    let threshold = f64::from_le_bytes(read_array(&mut r).map_err(trunc)?);
    let read_vec = |r: &mut BufReader<File>, expected: usize| -> Result<Vec<f64>> {
        let n = u64::from_le_bytes(read_array(r).map_err(trunc)?) as usize;
        if n != expected {
            return Err(bad(&format!("expected {expected} values, header says {n}")));
        }
        (0..n).map(|_| Ok(f64::from_le_bytes(read_array(r).map_err(trunc)?))).collect()
    };
    let input_scale = read_vec(&mut r, spec.channels)?;
    let weights = read_vec(&mut r, spec.param_count())?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(bad("trailing bytes"));
    }
    let json_path = path.with_extension("json");
    let summary = std::fs::read_to_string(&json_path)
        .ok()
        .and_then(|s| serde_json::from_str::<serde_json::Value>(&s).ok())
        .and_then(|v| serde_json::from_value(v.get("summary")?.clone()).ok());
    Ok(TrainedModel { spec, weights, threshold, input_scale, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_spec() -> CnnSpec {
        CnnSpec::new(4, 4, 1, 2)
    }

    fn random_input(spec: &CnnSpec, rng: &mut ChaCha8Rng) -> InputTensor {
        let mut t = InputTensor::zeros(spec.nx, spec.ny, spec.channels);
        for v in &mut t.data {
            *v = rng.random_range(-1.0..1.0);
        }
        t
    }

    // Direct-loop forward pass, written independently of im2col/gemm.
    fn reference_forward(spec: &CnnSpec, w: &[f64], input: &InputTensor) -> Vec<f64> {
        let l = spec.layout();
        let (nx, ny, c, f) = (spec.nx, spec.ny, spec.channels, spec.filters);
        let conv =
            |img: &dyn Fn(usize, usize, usize) -> f64, sx: usize, sy: usize, cin: usize, wr: &[f64], br: &[f64]| {
                let mut out = vec![vec![vec![0.0; f]; sy]; sx];
                for x in 0..sx {
                    for y in 0..sy {
                        for o in 0..f {
                            let mut acc = br[o];
                            for dx in 0..2 {
                                for dy in 0..2 {
                                    if x + dx < sx && y + dy < sy {
                                        for ch in 0..cin {
                                            acc += img(x + dx, y + dy, ch) * wr[((dx * 2 + dy) * cin + ch) * f + o];
                                        }
                                    }
                                }
                            }
                            out[x][y][o] = acc;
                        }
                    }
                }
                out
            };
        let a1 = conv(&|x, y, ch| input.get(x, y, ch), nx, ny, c, &w[l.conv1_w.clone()], &w[l.conv1_b.clone()]);
        let (px, py) = spec.pooled();
        let mut pooled = vec![vec![vec![f64::NEG_INFINITY; f]; py]; px];
        for x in 0..nx {
            for y in 0..ny {
                for o in 0..f {
                    let p = &mut pooled[x / 2][y / 2][o];
                    *p = p.max(a1[x][y][o]);
                }
            }
        }
        let a2 = conv(&|x, y, ch| pooled[x][y][ch], px, py, f, &w[l.conv2_w.clone()], &w[l.conv2_b.clone()]);
        let flat: Vec<f64> = (0..px)
            .flat_map(|x| (0..py).flat_map(move |y| (0..f).map(move |o| (x, y, o))))
            .map(|(x, y, o)| a2[x][y][o])
            .collect();
        let hid = spec.hidden();
        let d1w = &w[l.dense1_w.clone()];
        let h: Vec<f64> = (0..hid)
            .map(|j| {
                let z =
                    w[l.dense1_b.start + j] + flat.iter().enumerate().map(|(i, v)| v * d1w[i * hid + j]).sum::<f64>();
                z.max(0.0)
            })
            .collect();
        let n_out = spec.outputs();
        let d2w = &w[l.dense2_w.clone()];
        (0..n_out)
            .map(|j| {
                let z =
                    w[l.dense2_b.start + j] + h.iter().enumerate().map(|(i, v)| v * d2w[i * n_out + j]).sum::<f64>();
                1.0 / (1.0 + (-z).exp())
            })
            .collect()
    }

    #[test]
    fn zero_weights_give_half() {
        let spec = CnnSpec::new(5, 6, 3, 4);
        let model = TrainedModel::from_weights(spec, vec![0.0; spec.param_count()], 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let out = forward(&model, &random_input(&spec, &mut rng)).unwrap();
        assert_eq!((out.nx, out.ny), (5, 6));
        assert!(out.values.iter().all(|p| *p == 0.5));
        assert_eq!(out.cells_at_least(0.5).len(), 30);
        assert!(out.cells_at_least(1.0 - 1e-9).is_empty());
    }

    #[test]
    fn matches_reference_forward() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut w = init_weights(&spec, 3);
        for v in &mut w {
            *v += rng.random_range(-0.1..0.1);
        }
        let model = TrainedModel::from_weights(spec, w.clone(), 0.5).unwrap();
        for _ in 0..5 {
            let input = random_input(&spec, &mut rng);
            let got = forward(&model, &input).unwrap();
            let want = reference_forward(&spec, &w, &input);
            for (a, b) in got.values.iter().zip(&want) {
                assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn shape_checks() {
        let spec = tiny_spec();
        let model = TrainedModel::from_weights(spec, vec![0.0; spec.param_count()], 0.5).unwrap();
        assert!(forward(&model, &InputTensor::zeros(4, 5, 1)).is_err());
        let mut bad = InputTensor::zeros(4, 4, 1);
        bad.data[3] = f64::NAN;
        assert!(forward(&model, &bad).is_err());
        assert!(CnnSpec::new(3, 8, 1, 2).validate().is_err());
    }

    #[test]
    fn analytic_loss_values() {
        let spec = tiny_spec();
        let model = TrainedModel::from_weights(spec, vec![0.0; spec.param_count()], 0.5).unwrap();
        let mut target = vec![0u8; 16];
        target[..8].fill(1);
        let ex = Example { input: InputTensor::zeros(4, 4, 1), target };
        let (loss, _) = loss_and_grad(&model, &[ex], 1.0).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn confident_correct_predictions_have_tiny_loss() {
        let spec = tiny_spec();
        let l = spec.layout();
        let mut w = vec![0.0; spec.param_count()];
        let mut target = vec![0u8; 16];
        for i in 0..16 {
            target[i] = (i % 3 == 0) as u8;
            w[l.dense2_b.start + i] = if target[i] == 1 { 40.0 } else { -40.0 };
        }
        let model = TrainedModel::from_weights(spec, w, 0.5).unwrap();
        let (loss, _) = loss_and_grad(&model, &[Example { input: InputTensor::zeros(4, 4, 1), target }], 3.0).unwrap();
        assert!(loss <= 1e-10, "{loss}");
    }

    #[test]
    fn same_padding_shapes() {
        for (nx, ny) in [(4, 4), (5, 7), (12, 9), (11, 12)] {
            let spec = CnnSpec::new(nx, ny, 2, 3);
            let model = TrainedModel::from_weights(spec, init_weights(&spec, 1), 0.5).unwrap();
            let out = forward(&model, &InputTensor::zeros(nx, ny, 2)).unwrap();
            assert_eq!(out.values.len(), nx * ny);
            assert_eq!(spec.pooled(), (nx.div_ceil(2), ny.div_ceil(2)));
        }
    }

    #[test]
    fn model_file_round_trip() {
        let spec = CnnSpec { conv_activation: ConvActivation::Relu, ..tiny_spec() };
        let mut model = TrainedModel::from_weights(spec, init_weights(&spec, 9), 0.35).unwrap();
        model.input_scale = vec![0.25];
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.bin");
        save_model(&model, &path).unwrap();
        let back = load_model(&path).unwrap();
        assert_eq!(back, model);
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(load_model(&path), Err(Error::ModelFormat { .. })));
    }

    #[test]
    fn training_requires_positives() {
        let spec = tiny_spec();
        let data = vec![Example { input: InputTensor::zeros(4, 4, 1), target: vec![0; 16] }];
        assert!(matches!(train(&data, spec, &TrainConfig::default()), Err(Error::Training(_))));
    }

    fn gradient_check(spec: CnnSpec) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut w = init_weights(&spec, 5);
        for v in &mut w {
            *v += rng.random_range(-0.05..0.05);
        }
        let model = TrainedModel::from_weights(spec, w.clone(), 0.5).unwrap();
        let batch: Vec<Example> = (0..3)
            .map(|_| Example {
                input: random_input(&spec, &mut rng),
                target: (0..spec.outputs()).map(|_| rng.random_range(0..2u8)).collect(),
            })
            .collect();
        let (_, grad) = loss_and_grad(&model, &batch, 2.5).unwrap();
        let h = 1e-6;
        for i in (0..w.len()).step_by((w.len() / 150).max(1)) {
            let mut plus = model.clone();
            plus.weights[i] += h;
            let mut minus = model.clone();
            minus.weights[i] -= h;
            let lp = loss_and_grad(&plus, &batch, 2.5).unwrap().0;
            let lm = loss_and_grad(&minus, &batch, 2.5).unwrap().0;
            let fd = (lp - lm) / (2.0 * h);
            let tol = 1e-6 * (1.0 + fd.abs().max(grad[i].abs())) * 10.0;
            assert!((fd - grad[i]).abs() <= tol, "param {i}: fd {fd} analytic {}", grad[i]);
        }
    }

    #[test]
    fn gradients_match_finite_differences_linear() {
        gradient_check(CnnSpec::new(5, 4, 2, 3));
    }

    #[test]
    fn gradients_match_finite_differences_relu() {
        gradient_check(CnnSpec { conv_activation: ConvActivation::Relu, ..CnnSpec::new(4, 6, 2, 2) });
    }

    #[test]
    fn training_learns_a_visible_signal() {
        // Label a cell positive exactly when its first channel is lit.
        let spec = CnnSpec::new(6, 6, 2, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data: Vec<Example> = (0..120)
            .map(|_| {
                let mut input = InputTensor::zeros(6, 6, 2);
                let mut target = vec![0u8; 36];
                let hot = rng.random_range(0..36);
                input.data[hot * 2] = 1.0;
                input.data[rng.random_range(0..36) * 2 + 1] = 1.0;
                target[hot] = 1;
                Example { input, target }
            })
            .collect();
        let cfg = TrainConfig { epochs: 30, folds: 2, learning_rate: 0.05, ..TrainConfig::default() };
        let model = train(&data, spec, &cfg).unwrap();
        let summary = model.summary.as_ref().unwrap();
        let losses = &summary.epoch_losses;
        assert!(losses.last().unwrap() < &losses[0], "{losses:?}");
        let inputs: Vec<&InputTensor> = data.iter().map(|e| &e.input).collect();
        let targets: Vec<&[u8]> = data.iter().map(|e| e.target.as_slice()).collect();
        let probs = model.predict(&inputs).unwrap();
        let f1 = threshold_counts(&probs, &targets, &[model.threshold])[0].f1();
        assert!(f1 > 0.5, "f1 {f1}, threshold {}", model.threshold);
    }

    #[test]
    fn training_is_deterministic() {
        let spec = tiny_spec();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let data: Vec<Example> = (0..20)
            .map(|i| Example {
                input: random_input(&spec, &mut rng),
                target: (0..16).map(|j| ((i + j) % 5 == 0) as u8).collect(),
            })
            .collect();
        let cfg = TrainConfig { epochs: 3, ..TrainConfig::default() };
        assert_eq!(train(&data, spec, &cfg).unwrap(), train(&data, spec, &cfg).unwrap());
    }
}

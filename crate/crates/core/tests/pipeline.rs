use crome::cnn::{detect, train, Example, TrainConfig};
use crome::config::RunConfig;
use crome::data::BoundingBox;
use crome::grid::unproject;
use crome::labels::MatchRule;
use crome::pipeline::{evaluate, prepare, training_examples, Context, Detector, Prepared};
use crome::synth::{Hotspot, ScenarioConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Every incident sits at a 5 km cell centre and is reported at once, many
// times, and nothing else is reported: a window's cell holds reports exactly
// when its label is positive.
fn separable_config() -> RunConfig {
    let origin = (36.05, -86.95);
    let centre = |x: f64, y: f64| {
        let (lat, lon) = unproject(origin.0, origin.1, 5.0 * x + 2.5, 5.0 * y + 2.5);
        Hotspot { lat, lon, weight: 1.0, sigma_km: 1e-6 }
    };
    let synth = ScenarioConfig {
        duration_days: 61.0,
        region: BoundingBox::from_origin_km(origin.0, origin.1, 20.0, 20.0),
        hotspots: vec![centre(0.0, 0.0), centre(1.0, 2.0), centre(3.0, 1.0), centre(2.0, 3.0)],
        incident_rate: 12.0,
        report_rate_mean: 25.0,
        report_spatial_sigma_km: 1e-6,
        report_delay_mean_min: 0.0,
        official_delay_mean_min: 0.0,
        false_report_rate: 0.0,
        background_congestion_rate: 0.0,
        congestion_bump: 0.0,
        ..ScenarioConfig::default()
    };
    let mut cfg = RunConfig::default();
    cfg.data.synth = synth;
    cfg.grid.delta_s_km = vec![5.0];
    cfg.time.delta_t_min = vec![30];
    cfg.time.t_prime_min = 30;
    cfg.labels = MatchRule { alpha_min: 30.0, beta_min: 0.0, delta_km: 2.5 };
    cfg.cnn.filters = 4;
    cfg.cnn.max_train_windows = 0;
    cfg.cnn.train = TrainConfig { epochs: 15, folds: 3, ..TrainConfig::default() };
    cfg
}

fn examples(prep: &Prepared, cfg: &RunConfig) -> Vec<Example> {
    let ctx = Context::new(prep, cfg, 5.0, 30).unwrap();
    let rot = &prep.rotations()[0];
    training_examples(&ctx, rot, 0, 1)
}

#[test]
fn separable_stream_is_learned() {
    let cfg = separable_config();
    let prep = prepare(&cfg).unwrap();
    let data = examples(&prep, &cfg);
    let ctx = Context::new(&prep, &cfg, 5.0, 30).unwrap();
    let model = train(&data, ctx.cnn_spec(cfg.cnn.filters, &cfg), &cfg.cnn.train).unwrap();
    let summary = model.summary.clone().unwrap();
    let val = summary.validation_f1.unwrap();
    assert!(val >= 0.95, "validation F1 {val}");

    let losses = &summary.epoch_losses;
    let avg: Vec<f64> = losses.windows(2).take(4).map(|w| (w[0] + w[1]) / 2.0).collect();
    assert!(avg.windows(2).all(|w| w[1] <= w[0]), "losses {losses:?}");

    // Held-out month: the per-window detector agrees with the batch evaluation.
    let rot = &prep.rotations()[0];
    let det = Detector::Cnn(model.clone());
    let eval = evaluate(&ctx, &det, &rot.test).unwrap();
    assert!(eval.metrics.f1 >= 0.95, "test F1 {}", eval.metrics.f1);
    let bins = ctx.bins_in(&rot.test);
    let mut fired = Vec::new();
    for (win, i) in ctx.windows(bins.clone()).zip(bins) {
        let cells = detect(&model, &win).unwrap();
        if !cells.is_empty() {
            fired.push((i, cells));
        }
    }
    let batch: Vec<_> = eval.detections.iter().map(|d| (d.bin.index, d.cells.clone())).collect();
    assert_eq!(fired, batch);
}

#[test]
fn shuffled_labels_fall_to_the_base_rate() {
    let cfg = separable_config();
    let prep = prepare(&cfg).unwrap();
    let mut data = examples(&prep, &cfg);
    let mut targets: Vec<Vec<u8>> = data.iter().map(|e| e.target.clone()).collect();
    targets.shuffle(&mut ChaCha8Rng::seed_from_u64(5));
    for (e, t) in data.iter_mut().zip(targets) {
        e.target = t;
    }

    // Shuffling keeps each cell's positive rate, so the reference is the best
    // detector that ignores its input and always fires on a fixed cell set.
    let n = data[0].target.len();
    let mut per_cell = vec![0usize; n];
    for e in &data {
        for (c, v) in e.target.iter().enumerate() {
            per_cell[c] += *v as usize;
        }
    }
    per_cell.sort_unstable_by(|a, b| b.cmp(a));
    let total: usize = per_cell.iter().sum();
    let mut base: f64 = 0.0;
    let mut tp = 0;
    for (k, c) in per_cell.iter().enumerate() {
        tp += c;
        base = base.max(2.0 * tp as f64 / (((k + 1) * data.len() + total) as f64));
    }

    let ctx = Context::new(&prep, &cfg, 5.0, 30).unwrap();
    let model = train(&data, ctx.cnn_spec(cfg.cnn.filters, &cfg), &cfg.cnn.train).unwrap();
    let val = model.summary.unwrap().validation_f1.unwrap();
    assert!(val <= base + 0.05, "validation F1 {val} vs input-free best {base}");
}

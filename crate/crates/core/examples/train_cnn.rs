//! Trains the CNN detector on one rotation and scores the test month.

use crome::config::RunConfig;
use crome::pipeline::{evaluate, prepare, train_cnn, Context, Detector};

fn main() -> crome::Result<()> {
    let mut cfg = RunConfig::default();
    cfg.data.synth.duration_days = 61.0;
    cfg.cnn.max_train_windows = 1000;
    cfg.cnn.train.epochs = 8;
    let prep = prepare(&cfg)?;
    let ctx = Context::new(&prep, &cfg, 3.0, 15)?;
    let rot = &prep.rotations()[0];
    let model = train_cnn(&ctx, rot, &cfg)?;
    if let Some(s) = &model.summary {
        println!("{} examples, {} epochs, validation F1 {:?}", s.examples, s.chosen_epochs, s.validation_f1);
        println!("epoch losses {:?}", s.epoch_losses);
    }
    println!("threshold {:.2}", model.threshold);
    let m = evaluate(&ctx, &Detector::Cnn(model), &rot.test)?.metrics;
    println!(
        "test F1 {:.3}, precision {:.3}, recall {:.3}, early {:.1}%",
        m.f1, m.precision, m.recall, m.early_pred_pct
    );
    Ok(())
}

//! The Bayesian-fusion baseline: posterior odds by hand, then a calibrated
//! detector scored on a held-out month.

use crome::bf::BfConfig;
use crome::config::RunConfig;
use crome::pipeline::{evaluate, prepare, train_bf, Context, Detector};

fn main() -> crome::Result<()> {
    let bf = BfConfig::default();
    for evidence in [vec![], vec![8], vec![8, 9], vec![3, 3, 3]] {
        println!("reliabilities {evidence:?} -> posterior {:.4}", bf.posterior(&evidence));
    }

    let mut cfg = RunConfig::default();
    cfg.data.synth.duration_days = 61.0;
    let prep = prepare(&cfg)?;
    let ctx = Context::new(&prep, &cfg, 3.0, 15)?;
    let rot = &prep.rotations()[0];
    let (fitted, train_f1) = train_bf(&ctx, rot, &cfg)?;
    println!("calibrated prior {} threshold {} (train F1 {train_f1:.3})", fitted.prior, fitted.threshold);
    let m = evaluate(&ctx, &Detector::Bf(fitted), &rot.test)?.metrics;
    println!(
        "test F1 {:.3}, precision {:.3}, recall {:.3}, early {:.1}%",
        m.f1, m.precision, m.recall, m.early_pred_pct
    );
    Ok(())
}

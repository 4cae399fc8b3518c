//! Runs a small resolution sweep and prints the report table.
//!
//! `cargo run --release --example sweep_report -- [out_dir]`

use crome::config::RunConfig;
use crome::report::write_report;
use crome::sweep::run_sweep;

fn main() -> crome::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("crome-sweep"));
    let mut cfg = RunConfig::default();
    cfg.data.synth.duration_days = 61.0;
    cfg.grid.delta_s_km = vec![3.0, 5.0];
    cfg.time.delta_t_min = vec![15, 30];
    cfg.cnn.max_train_windows = 300;
    cfg.cnn.train.epochs = 4;
    let s = run_sweep(&cfg, &out, true)?;
    println!("{} candidates over {} rotations, archive size {}", s.candidates, s.rotations, s.archive_size);
    print!("{}", write_report(&out, false)?);
    println!("outputs in {}", out.display());
    Ok(())
}

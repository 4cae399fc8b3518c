//! Feeds hand-made candidates to the ε-dominance archive.

use crome::mopt::{archive_insert, scalarize, Candidate, ObjectiveConfig, ParetoArchive};

fn main() {
    let cfg = ObjectiveConfig::default();
    let eps = cfg.resolved_epsilons(&[5.0, 15.0, 30.0], &[1.0, 3.0, 5.0]);
    println!("epsilons {eps:?}");
    let mut archive = ParetoArchive::new(&cfg, eps);
    let cands = [
        Candidate::new("cnn", 1.0, 5.0, 0.16),
        Candidate::new("cnn", 5.0, 5.0, 0.41),
        Candidate::new("cnn", 5.0, 30.0, 0.40),
        Candidate::new("bf", 5.0, 5.0, 0.10),
        Candidate::new("cnn", 3.0, 15.0, 0.30),
        Candidate::new("bf", 1.0, 30.0, 0.02),
    ];
    for c in cands {
        let label = format!("{} Δs={} Δt={} F1={}", c.detector, c.delta_s_km, c.delta_t_min, c.f1);
        println!("{label}: {:?}", archive_insert(&mut archive, c));
    }
    println!("archive holds {} members", archive.len());
    for m in &archive.members {
        let c = &m.candidate;
        println!(
            "  {} Δs={} Δt={} score {:.4} box {:?}",
            c.detector,
            c.delta_s_km,
            c.delta_t_min,
            scalarize(c, &cfg),
            m.eps_box
        );
    }
}

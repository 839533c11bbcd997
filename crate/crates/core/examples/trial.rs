//! Runs a few teacher-student trials at one width and prints summary numbers.
//!
//! Usage: trial H TRIALS [EPOCHS] [ALPHA_LAMBDA ALPHA_PHI ALPHA_W] [standard|spectral]

use std::time::Instant;

use spectral_core::analysis::{histogram, prune_curve};
use spectral_core::experiment::{run_keyed_trial, Parametrization, SweepConfig, SweepData, TrialKey};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let arg = |i: usize| args.get(i).map(|s| s.parse::<f64>().expect("numeric argument"));
    let h = arg(0).unwrap_or(100.0) as usize;
    let trials = arg(1).unwrap_or(1.0) as usize;
    let mut cfg = SweepConfig {
        h_values: vec![h],
        trials_per_h: trials,
        ..SweepConfig::default()
    };
    if let Some(e) = arg(2) {
        cfg.train.epochs = e as usize;
    }
    if let (Some(l), Some(p), Some(w)) = (arg(3), arg(4), arg(5)) {
        cfg.train.reg.alpha_lambda = l;
        cfg.train.reg.alpha_phi = p;
        cfg.train.reg.alpha_w = w;
    }
    let only: Option<Parametrization> = args.get(6).map(|s| s.parse().expect("parametrization"));
    let data = SweepData::generate(&cfg).expect("data");
    for trial in 0..trials {
        for p in Parametrization::BOTH {
            if only.is_some_and(|o| o != p) {
                continue;
            }
            let start = Instant::now();
            let out = run_keyed_trial(&cfg, &data, TrialKey { h, parametrization: p, trial });
            let r = out.result.expect("trial");
            let hist = histogram(&r.relevance);
            let curve = prune_curve(&r.model, &r.relevance, &data.test, 20).expect("curve");
            let above = r.relevance.normalized.iter().filter(|&&v| v >= cfg.tau).count();
            println!(
                "{p:>8} t={trial} train={:.3e} test={:.3e} core={} above={} bin0={:.3} d10={:?} d30={:?} {:.1}s",
                r.train_mse,
                r.test_mse,
                r.core_size,
                above,
                hist.first_bin_fraction(),
                curve.delta_at(10),
                curve.delta_at(30),
                start.elapsed().as_secs_f64()
            );
        }
    }
}

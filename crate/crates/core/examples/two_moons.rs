//! Trains a model on two moons and reports calibration plus OOD detection
//! against the far cluster and the near ring.
//!
//! `cargo run --release --example two_moons -- [seed] [edl|core|mix|fi]`

use gemfi::datasets::{MoonsBenchmark, MoonsSpec};
use gemfi::metrics::{aupr, auroc, calibration_report, uncertainty_scores, ScoreKind, ScoredEvalSet};
use gemfi::model::{GemConfig, GemModel, Variant};
use gemfi::networks::ArchConfig;
use gemfi::trainer::{fit, TrainSchedule};

fn main() -> gemfi::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let variant = match std::env::args().nth(2).as_deref() {
        Some("edl") => Variant::EdlBaseline,
        Some("core") => Variant::Core,
        Some("mix") => Variant::Mix,
        _ => Variant::Fi,
    };
    let bench = MoonsBenchmark::generate(&MoonsSpec::default(), seed)?;
    let mut config = GemConfig::preset(variant, ArchConfig::toy2d());
    // two components cannot follow the curved moons in feature space
    config.gmm_components = Some(8);

    let mut model = GemModel::new(config, seed)?;
    let start = std::time::Instant::now();
    let history = fit(&mut model, &bench.train, &TrainSchedule::default(), seed)?;
    let last = history.epochs.last().expect("at least one epoch");
    println!(
        "{} seed {seed}: {} epochs in {:.1?}, final loss {:.4}",
        variant.name(),
        history.epochs.len(),
        start.elapsed(),
        last.total
    );

    let id = model.predict(&bench.test.x)?;
    let report = calibration_report(&id.p_hat, &bench.test.y)?;
    println!(
        "test accuracy {:.4}  ECE {:.4}  NLL {:.4}  Brier x100 {:.3}",
        report.accuracy, report.ece, report.nll, report.brier_x100
    );

    let id_scores = uncertainty_scores(&id, model.energy_calib.as_ref());
    let pred = id.p_hat.argmax_rows();
    let correct: Vec<f64> = (0..bench.test.len())
        .filter(|&i| pred[i] == bench.test.y[i])
        .map(|i| id_scores.entropy[i])
        .collect();
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    for (name, ood) in [("cluster", &bench.ood_cluster), ("ring", &bench.ood_ring)] {
        let s = uncertainty_scores(&model.predict(&ood.x)?, model.energy_calib.as_ref());
        println!("vs {name}:");
        for k in ScoreKind::ALL {
            let set = ScoredEvalSet::from_groups(id_scores.get(k), s.get(k))?;
            println!("  {:<8} AUROC {:.3}  AUPR {:.3}", k.name(), auroc(&set)?, aupr(&set)?);
        }
        println!("  mean entropy ratio to correct ID: {:.2}", mean(&s.entropy) / mean(&correct));
    }
    Ok(())
}

//! Interleaved 1-D segments: predictive entropy and total evidence along the line,
//! including the gaps between segments and the OOD tails.
//!
//! `cargo run --release --example toy1d -- [epochs] [lr]`

use gemfi::autodiff::{argmax, Tensor};
use gemfi::datasets::{gen_toy1d, Split};
use gemfi::metrics::{calibration_report, uncertainty_scores};
use gemfi::model::{GemConfig, GemModel, Variant};
use gemfi::networks::ArchConfig;
use gemfi::trainer::{fit, TrainSchedule};

fn main() -> gemfi::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(200);
    let base_lr = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(3e-3);
    let all = gen_toy1d(0)?;
    let data = all.subset(Split::Train);
    let mut arch = ArchConfig::toy2d();
    arch.input_dim = 1;
    let mut config = GemConfig::preset(Variant::Fi, arch);
    config.gmm_components = Some(6);
    let mut model = GemModel::new(config, 0)?;
    let schedule = TrainSchedule {
        epochs,
        base_lr,
        ..TrainSchedule::default()
    };
    fit(&mut model, &data, &schedule, 0)?;

    let train = model.predict(&data.x)?;
    println!("train accuracy {:.3}", calibration_report(&train.p_hat, &data.y)?.accuracy);

    let xs: Vec<f64> = (0..=34).map(|i| -9.0 + 0.5 * i as f64).collect();
    let d = model.predict(&Tensor::col_vector(&xs))?;
    let s = uncertainty_scores(&d, model.energy_calib.as_ref());
    println!("{:>6} {:>8} {:>10} {:>6}", "x", "entropy", "alpha0", "class");
    for (i, x) in xs.iter().enumerate() {
        println!("{x:>6.1} {:>8.4} {:>10.3e} {:>6}", s.entropy[i], d.alpha0_mix[i], argmax(d.p_hat.row(i)));
    }
    Ok(())
}

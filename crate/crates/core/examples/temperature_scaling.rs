//! Post-hoc temperature scaling: recovers a planted over-confidence factor.

use gemfi::autodiff::Tensor;
use gemfi::metrics::{calibration_report, fit_temperature, softmax_t};
use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};

fn main() -> gemfi::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    let (n, c, planted) = (10_000, 3, 2.5);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut logits = vec![];
    let mut labels = vec![];
    for _ in 0..n {
        let z: Vec<f64> = (0..c).map(|_| normal.sample(&mut rng)).collect();
        let p = softmax_t(&Tensor::new(1, c, z.clone())?, 1.0);
        let u: f64 = rng.random();
        let y = p.row(0).iter().scan(0.0, |acc, v| {
            *acc += v;
            Some(*acc)
        });
        labels.push(y.take_while(|cum| *cum < u).count().min(c - 1));
        logits.extend(z.iter().map(|v| planted * v));
    }
    let logits = Tensor::new(n, c, logits)?;
    let fit = fit_temperature(&logits, &labels)?;
    let before = calibration_report(&softmax_t(&logits, 1.0), &labels)?;
    let after = calibration_report(&softmax_t(&logits, fit.temperature), &labels)?;
    println!("planted factor {planted}, fitted T {:.4}", fit.temperature);
    println!("NLL {:.4} -> {:.4}", fit.nll_before, fit.nll_after);
    println!("ECE {:.4} -> {:.4}", before.ece, after.ece);
    Ok(())
}

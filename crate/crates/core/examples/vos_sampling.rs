//! Virtual outliers: per-class Gaussians in feature space and tail samples
//! beyond the in-distribution Mahalanobis quantile.

use gemfi::autodiff::Tensor;
use gemfi::density::ClassGaussians;
use rand::SeedableRng;
use rand_distr::{Distribution, Normal};

fn main() -> gemfi::Result<()> {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let centers = [[-3.0, 0.0, 1.0], [3.0, 1.0, -1.0]];
    let mut rows = vec![];
    let mut labels = vec![];
    for (c, m) in centers.iter().enumerate() {
        for _ in 0..400 {
            rows.push(m.iter().map(|v| v + noise.sample(&mut rng)).collect::<Vec<f64>>());
            labels.push(c);
        }
    }
    let features = Tensor::from_rows(&rows)?;
    let gaussians = ClassGaussians::fit(&features, &labels, 2)?;
    for class in 0..2 {
        let draw = gaussians.vos_sample(class, 200, 0.95, &mut rng)?;
        let d2: Vec<f64> = draw.points.iter_rows().map(|p| gaussians.mahalanobis_sq(class, p)).collect();
        let min = d2.iter().copied().fold(f64::INFINITY, f64::min);
        println!(
            "class {class}: {} outliers, threshold {:.2}, min distance² {:.2}, acceptance {:.3}",
            draw.points.rows(),
            draw.threshold,
            min,
            draw.acceptance_rate()
        );
    }
    Ok(())
}

//! Entropy heatmap over the two-moons plane, written as CSV and SVG.
//!
//! `cargo run --release --example entropy_heatmap -- [out_dir] [score]`

use gemfi::datasets::{MoonsBenchmark, MoonsSpec};
use gemfi::metrics::ScoreKind;
use gemfi::model::{GemConfig, GemModel, Variant};
use gemfi::networks::ArchConfig;
use gemfi::run::{bounding_box, heatmap_grid};
use gemfi::trainer::{fit, TrainSchedule};

fn main() -> gemfi::Result<()> {
    let out = std::path::PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "heatmap_out".into()));
    let score = std::env::args().nth(2).and_then(|s| ScoreKind::parse(&s)).unwrap_or(ScoreKind::Entropy);
    std::fs::create_dir_all(&out)?;

    let bench = MoonsBenchmark::generate(&MoonsSpec::default(), 0)?;
    let mut config = GemConfig::preset(Variant::Fi, ArchConfig::toy2d());
    config.gmm_components = Some(8);
    let mut model = GemModel::new(config, 0)?;
    fit(&mut model, &bench.train, &TrainSchedule::default(), 0)?;

    let (xr, yr) = bounding_box(&[&bench.train, &bench.ood_cluster, &bench.ood_ring], 0.5);
    let grid = heatmap_grid(&model, score, xr, yr, 80)?;
    grid.write_csv(&out.join("heatmap.csv"))?;
    std::fs::write(out.join("heatmap.svg"), grid.to_svg(model.classes(), Some(&bench.train), 600))?;

    // compare cells near the OOD cluster with cells on the moons
    let near = |x: f64, y: f64, d: &gemfi::datasets::Dataset, r: f64| d.x.iter_rows().any(|p| (p[0] - x).hypot(p[1] - y) < r);
    let (mut ood, mut moon) = (vec![], vec![]);
    for j in 0..grid.resolution {
        for i in 0..grid.resolution {
            let (x, y) = (grid.x_at(i), grid.y_at(j));
            if near(x, y, &bench.ood_cluster, 0.15) {
                ood.push(grid.value(i, j));
            } else if near(x, y, &bench.train, 0.05) {
                moon.push(grid.value(i, j));
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    println!("{} grid written to {}", score.name(), out.display());
    println!("mean {} on OOD-cluster cells {:.4}, on moon cells {:.4}", score.name(), mean(&ood), mean(&moon));
    Ok(())
}

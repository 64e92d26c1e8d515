//! The ten-row component ablation on two moons at a reduced epoch budget.
//!
//! `cargo run --release --example ablation_sweep -- [epochs] [out_dir]`

use gemfi::run::{run_sweep, sweep_cells, sweep_columns, write_sweep_csv, RunConfig, SweepSpec};

fn main() -> gemfi::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(20);
    let out = std::path::PathBuf::from(std::env::args().nth(2).unwrap_or_else(|| "ablation_out".into()));
    let config = RunConfig::parse(&format!(
        r#"{{"model": {{"variant": "gem_fi", "gmm_components": 8}},
            "schedule": {{"epochs": {epochs}}},
            "eval": {{"temperature_scaling": false, "dump_scores": false}}}}"#
    ))?;
    let bench = config.dataset.generate(0)?;
    let base = config.model_config(&bench)?;
    let spec = SweepSpec {
        ablation: true,
        ..SweepSpec::default()
    };
    let cells = sweep_cells(&spec, &base);
    let (ood, rows) = run_sweep(&config, &cells, &[0], &out, 0)?;
    write_sweep_csv(&out.join("sweep.csv"), &ood, &rows)?;

    let cols = sweep_columns(&ood);
    let pick = |name: &str| cols.iter().position(|c| c == name).expect("known column");
    let (acc, epis) = (pick("accuracy"), pick("aupr_epis_ood_ring"));
    println!("{:<16} {:<36} {:>8} {:>14}", "cell", "switches", "acc", "ring AUPR(α₀)");
    for r in &rows {
        println!("{:<16} {:<36} {:>8.4} {:>14.4}", r.cell, r.switches, r.values[acc], r.values[epis]);
    }
    Ok(())
}

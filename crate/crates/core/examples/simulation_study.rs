//! Small simulation study comparing selection methods across budgets.

use std::path::PathBuf;

use handcal::experiment::{self as exp, ExperimentConfig, OutputDir};

fn main() -> handcal::Result<()> {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("configs/quick.toml");
    let cfg = ExperimentConfig::load(path)?;
    let out_dir = std::env::temp_dir().join("handcal_quick_study");
    let out = OutputDir::create(&cfg, &out_dir)?;
    let report = exp::run_simulation_study(&cfg, Some(&out))?;
    exp::write_study(&out, &report)?;
    println!(
        "{} models, uncalibrated task error {:.3} mm",
        report.n_models,
        report.mean_uncalibrated_error * 1e3
    );
    for c in &report.curves {
        println!("{:<7} budget {:4}: mean {:.4} mm, max {:.4} mm", c.method.name(), c.budget, c.mean_error * 1e3, c.max_error * 1e3);
    }
    println!("reports written to {}", out_dir.display());
    Ok(())
}

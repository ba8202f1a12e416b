//! Command-line harness over `handcal::experiment`.
//!
//! Exit codes: 0 success, 1 configuration error, 2 runtime failure (results
//! computed before the failure stay on disk).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use handcal::dataset::{read_validated, write_jsonl};
use handcal::experiment::{self as exp, ExperimentConfig, OutputDir};
use handcal::kinematics::Configuration;
use handcal::measurement::Measurement;
use handcal::sampling::SearchTrajectory;
use handcal::{Error, Result};

#[derive(Parser)]
#[command(name = "handcal", version, about = "Self-contact calibration of multi-fingered hands")]
struct Cli {
    #[command(subcommand)]
    verb: Verb,
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (overrides the config).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Subcommand, Clone, Copy)]
enum Verb {
    /// Load the model and print its structure and shared workspaces.
    ModelCheck,
    /// Draw the uniform cartesian task test set.
    Testset,
    /// Identifiability spectra for contact and task functions.
    Sensitivity,
    /// Generate contact search trajectories on the nominal model.
    Generate,
    /// Run the search trajectories on a perturbed ground truth.
    Simulate,
    /// Select a task D-optimal subset of the dataset.
    Select,
    /// Cross-validated calibration of the dataset.
    Calibrate,
    /// Full simulation study over perturbed ground truths.
    Study,
    /// Summarize the reports found in the output directory.
    Report,
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::new(0),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.out {
        cfg.output_dir = Some(o.clone());
    }
    Ok(cfg)
}

fn load_trajectories(out: &OutputDir) -> Result<Option<Vec<SearchTrajectory>>> {
    let path = out.path("trajectories.json");
    if !path.exists() {
        return Ok(None);
    }
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    Ok(Some(serde_json::from_value(v["trajectories"].clone())?))
}

fn require_dataset(cfg: &ExperimentConfig) -> Result<PathBuf> {
    let path = cfg.dataset_path();
    if !path.exists() {
        return Err(Error::Config(format!("dataset {} does not exist", path.display())));
    }
    Ok(path)
}

fn run(cli: &Cli, cfg: &ExperimentConfig) -> Result<()> {
    let out = OutputDir::create(cfg, cfg.output_dir())?;
    match cli.verb {
        Verb::ModelCheck => {
            let check = exp::run_model_check(cfg)?;
            out.write_json("model_check.json", &check)?;
            println!("{}", serde_json::to_string_pretty(&check)?);
        }
        Verb::Testset => {
            let model = cfg.load_model()?;
            let ts = exp::test_set(cfg, &model.tree)?;
            #[derive(serde::Serialize)]
            struct TestSet<'a> {
                configurations: &'a [Configuration],
            }
            out.write_json("testset.json", &TestSet { configurations: &ts })?;
            let mut rows = Vec::new();
            for (i, q) in ts.iter().enumerate() {
                for e in 0..model.tree.n_end_effectors() {
                    let p = model.tree.tip_frame(q, e)?.position;
                    rows.push(vec![
                        i.to_string(),
                        e.to_string(),
                        format!("{:e}", p.x),
                        format!("{:e}", p.y),
                        format!("{:e}", p.z),
                    ]);
                }
            }
            out.write_csv("testset_tips.csv", &["sample", "finger", "x", "y", "z"], &rows)?;
            println!("{} test configurations", ts.len());
        }
        Verb::Sensitivity => {
            let study = exp::run_sensitivity(cfg)?;
            exp::write_sensitivity(&out, &study)?;
            for m in &study.models {
                for mode in &m.modes {
                    println!(
                        "{:<10} {:<16} contact {}/{}  task {}/{}  inclusion {}",
                        m.model,
                        mode.label,
                        mode.contact.identifiable,
                        mode.contact.n_params,
                        mode.task.identifiable,
                        mode.task.n_params,
                        mode.inclusion.included
                    );
                }
            }
        }
        Verb::Generate => {
            let model = cfg.load_model()?;
            let trajectories = exp::generate_all_trajectories(cfg, &model)?;
            #[derive(serde::Serialize)]
            struct Trajectories<'a> {
                trajectories: &'a [SearchTrajectory],
            }
            out.write_json("trajectories.json", &Trajectories { trajectories: &trajectories })?;
            println!("{} search trajectories", trajectories.len());
        }
        Verb::Simulate => {
            let model = cfg.load_model()?;
            let trajectories = match load_trajectories(&out)? {
                Some(t) => t,
                None => exp::generate_all_trajectories(cfg, &model)?,
            };
            let index = cfg.simulation.ground_truth;
            let truth = exp::ground_truth(cfg, &model.tree, index)?;
            let (dataset, summary) = exp::simulate_dataset(cfg, &model.tree, &truth, index, &trajectories)?;
            write_jsonl(cfg.dataset_path(), &dataset)?;
            out.write_json("simulation.json", &summary)?;
            println!(
                "{} contacts from {} drives on ground truth {index}",
                summary.contacts, summary.drives
            );
        }
        Verb::Select => {
            let model = cfg.load_model()?;
            let dataset = read_validated(require_dataset(cfg)?, &model.tree)?;
            let result = exp::run_selection(cfg, &dataset)?;
            out.write_json("selection.json", &result)?;
            let subset: Vec<Measurement> = result.selected.iter().map(|&i| dataset[i].clone()).collect();
            write_jsonl(out.path("selected.jsonl"), &subset)?;
            println!("selected {} of {} (log O_D {:.4})", subset.len(), dataset.len(), result.log_objective);
        }
        Verb::Calibrate => {
            let model = cfg.load_model()?;
            let dataset = read_validated(require_dataset(cfg)?, &model.tree)?;
            let simulated = dataset.iter().all(|m| m.metadata.as_ref().is_some_and(|d| d.noise_realization.is_some()));
            let truth = if simulated {
                Some(exp::ground_truth(cfg, &model.tree, cfg.simulation.ground_truth)?)
            } else {
                None
            };
            let report = exp::run_calibration(cfg, &dataset, truth.as_ref())?;
            exp::write_calibration(&out, cfg, &report, &dataset)?;
            print!("{}", exp::summarize_outputs(&out)?);
        }
        Verb::Study => {
            let report = exp::run_simulation_study(cfg, Some(&out))?;
            exp::write_study(&out, &report)?;
            print!("{}", exp::summarize_outputs(&out)?);
        }
        Verb::Report => {
            let text = exp::summarize_outputs(&out)?;
            out.write_text("report.txt", &text)?;
            print!("{text}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cfg = match load_config(&cli) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(1);
        }
    };
    if let Some(j) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(j.max(1)).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli, &cfg) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::InvalidModel(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}

//! Command-line front end.

use std::fmt::Write as _;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::allocation::{rate_exponents, AllocationPlan};
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::experiment::{convergence_study, write_convergence_csv, Arm, ConvergenceStudy, StudySpec};
use crate::noise::{sample_increments, NoiseKey};
use crate::scheme::Scheme;

#[derive(Debug, Parser)]
#[command(name = "heatgal", version, about = "Galerkin solver for stochastic heat equations with per-mode time grids")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Print the mode and step allocation for a budget.
    Allocate(CommonArgs),
    /// Write coefficient snapshots of one trajectory.
    Simulate(CommonArgs),
    /// Estimate errors over a list of budgets and fit the convergence rate.
    Converge(CommonArgs),
}

#[derive(Debug, Args, Clone, Default)]
pub struct CommonArgs {
    /// Configuration file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Worker threads for replications.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Override a configuration key, e.g. `--set gamma=1.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

impl CommonArgs {
    /// Defaults, then the file, then `--set`, then the dedicated flags.
    pub fn load(&self) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut problems = Vec::new();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)?;
            cfg.merge_text(&text, &path.display().to_string(), &mut problems);
        }
        for o in &self.overrides {
            cfg.merge_override(o, &mut problems);
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(w) = self.workers {
            cfg.workers = w;
        }
        if let Some(out) = &self.out {
            cfg.out = out.clone();
        }
        problems.extend(cfg.problems());
        if problems.is_empty() {
            Ok(cfg)
        } else {
            Err(Error::Config(problems))
        }
    }
}

fn plans(cfg: &RunConfig) -> Result<Vec<(Arm, AllocationPlan)>> {
    let profile = cfg.profile()?;
    cfg.regime
        .arms()
        .into_iter()
        .map(|arm| Ok((arm, arm.plan(&profile, cfg.d, cfg.budget)?)))
        .collect()
}

fn coords_label(coords: &[u32]) -> String {
    coords.iter().map(u32::to_string).collect::<Vec<_>>().join(".")
}

/// Plain-text allocation table for every arm of `cfg`.
pub fn allocation_table(cfg: &RunConfig) -> Result<String> {
    let profile = cfg.profile()?;
    let rates = rate_exponents(&profile, cfg.d);
    let mut s = String::new();
    for (_, plan) in plans(cfg)? {
        let _ = writeln!(
            s,
            "regime {}  d = {}  gamma = {}  L = {}  N = {}",
            plan.regime.tag(),
            plan.d,
            profile.gamma(),
            profile.slowly_varying(),
            plan.budget
        );
        let _ = writeln!(
            s,
            "I = {:.6}  J = {:.6}  noise modes = {}  state modes = {}",
            plan.inner_radius,
            plan.outer_radius,
            plan.noise_modes.len(),
            plan.state_modes.len()
        );
        let _ = writeln!(s, "{:<12} {:>12} {:>14} {:>10}", "i", "|i|_2", "lambda_i", "n_i");
        for (mode, n) in plan.noise_modes.iter().zip(&plan.steps) {
            let _ = writeln!(
                s,
                "{:<12} {:>12.6} {:>14.6e} {:>10}",
                coords_label(mode.coords()),
                mode.norm2(),
                mode.lambda(),
                n
            );
        }
        let _ = writeln!(s, "total evaluations {}", plan.total_evals);
        let _ = writeln!(s, "predicted error {:.6e}", plan.predicted_error);
        let _ = writeln!(
            s,
            "alpha_star {:.6}  alpha_uniform {:.6}\n",
            rates.alpha_star, rates.alpha_uniform
        );
    }
    Ok(s)
}

pub fn cmd_allocate(cfg: &RunConfig, out: &mut impl Write) -> Result<()> {
    out.write_all(allocation_table(cfg)?.as_bytes())?;
    Ok(())
}

#[derive(Debug, Serialize)]
struct SnapshotRow<'a> {
    arm: Arm,
    t: f64,
    mode: &'a str,
    coefficient: f64,
}

/// One trajectory per arm (replication 0 of `seed`); writes
/// `snapshots.csv` with one row per (arm, time, state mode).
pub fn cmd_simulate(cfg: &RunConfig) -> Result<PathBuf> {
    std::fs::create_dir_all(&cfg.out)?;
    let path = cfg.out.join("snapshots.csv");
    let mut w = csv::Writer::from_path(&path)?;
    let g = cfg.nonlinearity()?;
    let xi = cfg.initial_value()?;
    for (arm, plan) in plans(cfg)? {
        let mut scheme = Scheme::from_plan(&plan, g.clone())?;
        if let Some(m) = cfg.spatial_grid {
            scheme = scheme.with_spatial_grid(m)?;
        }
        let coeffs = xi.coefficients(scheme.state_modes())?;
        let increments = sample_increments(scheme.grid(), scheme.noise_modes(), NoiseKey::new(cfg.seed, 0));
        let traj = scheme.run(&coeffs, &increments)?;
        let labels: Vec<String> = scheme.state_modes().iter().map(|m| coords_label(m.coords())).collect();
        for &t in &cfg.times {
            let y = traj.at(t)?;
            for (label, c) in labels.iter().zip(y) {
                w.serialize(SnapshotRow {
                    arm,
                    t,
                    mode: label,
                    coefficient: c,
                })?;
            }
        }
    }
    w.flush()?;
    Ok(path)
}

/// Pass/fail of one arm's fitted slope.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Verdict {
    pub arm: Arm,
    pub slope: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    /// `−α` of the arm
    pub theory_slope: f64,
    pub deviation: f64,
    pub tolerance: f64,
    pub pass: bool,
}

/// Contents of `summary.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config: RunConfig,
    pub study: ConvergenceStudy,
    pub verdicts: Vec<Verdict>,
    pub pass: bool,
}

impl RunSummary {
    pub fn read(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
    }
}

pub fn study_spec(cfg: &RunConfig) -> Result<StudySpec> {
    Ok(StudySpec {
        d: cfg.d,
        profile: cfg.profile()?,
        g: cfg.nonlinearity()?,
        xi: cfg.initial_value()?,
        budgets: cfg.budgets.clone(),
        arms: cfg.regime.arms(),
        estimator: cfg.estimator(),
    })
}

/// Runs the study and writes `convergence.csv` and `summary.json`.
pub fn cmd_converge(cfg: &RunConfig) -> Result<RunSummary> {
    let study = convergence_study(&study_spec(cfg)?)?;
    let verdicts = study
        .records
        .iter()
        .map(|r| {
            let deviation = r.slope_deviation();
            Verdict {
                arm: r.arm,
                slope: r.fit.slope,
                ci_low: r.fit.ci_low,
                ci_high: r.fit.ci_high,
                theory_slope: -r.theory_exponent,
                deviation,
                tolerance: cfg.tolerance,
                pass: deviation <= cfg.tolerance,
            }
        })
        .collect::<Vec<_>>();
    let summary = RunSummary {
        config: cfg.clone(),
        pass: verdicts.iter().all(|v| v.pass),
        verdicts,
        study,
    };
    std::fs::create_dir_all(&cfg.out)?;
    write_convergence_csv(&cfg.out.join("convergence.csv"), &summary.study)?;
    std::fs::write(cfg.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Dispatches a parsed command line; the exit code of `converge` reports the verdict.
pub fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Allocate(args) => {
            let cfg = args.load()?;
            cmd_allocate(&cfg, &mut std::io::stdout().lock())?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Simulate(args) => {
            let cfg = args.load()?;
            let path = cmd_simulate(&cfg)?;
            println!("wrote {}", path.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Converge(args) => {
            let cfg = args.load()?;
            let summary = cmd_converge(&cfg)?;
            for v in &summary.verdicts {
                println!(
                    "{:?}: slope {:.4} [{:.4}, {:.4}]  expected {:.4}  {}",
                    v.arm,
                    v.slope,
                    v.ci_low,
                    v.ci_high,
                    v.theory_slope,
                    if v.pass { "pass" } else { "FAIL" }
                );
            }
            Ok(if summary.pass { ExitCode::SUCCESS } else { ExitCode::FAILURE })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> RunConfig {
        RunConfig::parse(text).unwrap()
    }

    #[test]
    fn allocate_table_example() {
        let table = allocation_table(&cfg("gamma = 4\nbudget = 100\n")).unwrap();
        let steps: Vec<&str> = table
            .lines()
            .skip(3)
            .take_while(|l| !l.starts_with("total"))
            .map(|l| l.split_whitespace().last().unwrap())
            .collect();
        assert_eq!(steps, ["100", "25", "12", "7"]);
        assert!(table.starts_with("regime high"));
    }

    #[test]
    fn allocate_log_regime_and_single_row() {
        let table = allocation_table(&cfg("gamma = 2\nbudget = 100\n")).unwrap();
        assert!(table.starts_with("regime log"));
        let single = allocation_table(&cfg("gamma = 4\nbudget = 1\n")).unwrap();
        let rows = single.lines().skip(3).take_while(|l| !l.starts_with("total")).count();
        assert_eq!(rows, 1);
    }

    #[test]
    fn simulate_snapshots() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!(
            "gamma = 3\nbudget = 32\ng = zero\nxi = spectral:1=1;2=0.5\ntimes = 0, 0.5, 1\nout = {}\n",
            dir.path().display()
        );
        let c = cfg(&text);
        let path = cmd_simulate(&c).unwrap();
        let first = std::fs::read(&path).unwrap();
        cmd_simulate(&c).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());

        let plan = crate::allocation::plan_nonuniform(&c.profile().unwrap(), 1, 32).unwrap();
        let grid = crate::timegrid::MergedTimeGrid::build(&plan.steps).unwrap();
        let mus: Vec<f64> = plan.state_modes.iter().map(|m| m.mu()).collect();
        let ledger = crate::timegrid::GammaLedger::new(&grid, &mus);
        let mut reader = csv::Reader::from_path(&path).unwrap();
        for rec in reader.records() {
            let rec = rec.unwrap();
            let t: f64 = rec[1].parse().unwrap();
            let mode: u32 = rec[2].parse().unwrap();
            let value: f64 = rec[3].parse().unwrap();
            let xi = match mode {
                1 => 1.0,
                2 => 0.5,
                _ => 0.0,
            };
            let expected = if t == 0.0 { xi } else { ledger.gamma_at(mode as usize - 1, t).unwrap().exp() * xi };
            assert!((value - expected).abs() <= 1e-14, "t {t} mode {mode}: {value} vs {expected}");
        }
    }

    #[test]
    fn flags_override_file_values() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "seed = 1\nworkers = 2\ngamma = 3\n").unwrap();
        let args = CommonArgs {
            config: Some(path),
            seed: Some(5),
            workers: None,
            out: None,
            overrides: vec!["gamma=4".into()],
        };
        let c = args.load().unwrap();
        assert_eq!((c.seed, c.workers, c.gamma), (5, 2, 4.0));
        let bad = CommonArgs {
            overrides: vec!["gamma=-1".into(), "nokey".into(), "g=bad".into()],
            ..Default::default()
        };
        let Err(Error::Config(p)) = bad.load() else { panic!() };
        assert!(p.len() >= 3, "{p:?}");
    }
}

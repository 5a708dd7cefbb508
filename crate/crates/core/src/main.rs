//! Command-line front end: open-loop simulation, Monte Carlo oracle runs,
//! surrogate validation, closed-loop campaigns, and campaign comparison.
//!
//! All data lands as CSV/JSON under `--out`. On failure a machine-readable
//! error JSON is printed to stderr and the exit code is nonzero.

use clap::{Args, Parser, Subcommand};
use granusim::cnmc;
use granusim::config::{CampaignConfig, ControllerKind, ValidationConfig};
use granusim::export;
use granusim::harness;
use granusim::moments::integrate;
use serde_json::json;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "granusim",
    about = "Stochastic two-component granulation: simulation, uncertainty propagation, and chance-constrained control"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct CommonArgs {
    /// JSON experiment configuration (see README for the schema).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Named built-in configuration.
    #[arg(long, default_value = "paper")]
    preset: String,
    /// Master seed override.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (falls back to the config's `out_dir`, then `out`).
    #[arg(long)]
    out: Option<PathBuf>,
}

impl CommonArgs {
    fn campaign(&self) -> Result<CampaignConfig, CliError> {
        let mut cfg = match &self.config {
            Some(path) => CampaignConfig::from_path(path)?,
            None => CampaignConfig::preset(&self.preset)?,
        };
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        Ok(cfg)
    }

    fn out_dir(&self, cfg: Option<&CampaignConfig>) -> PathBuf {
        self.out
            .clone()
            .or_else(|| cfg.and_then(|c| c.out_dir.clone()))
            .unwrap_or_else(|| PathBuf::from("out"))
    }
}

#[derive(Subcommand)]
enum Command {
    /// Integrate the moment model open loop under the configured feed.
    Simulate {
        #[command(flatten)]
        common: CommonArgs,
        /// Horizon; defaults to the configured campaign length.
        #[arg(long)]
        t_end: Option<f64>,
    },
    /// Run the constant-number Monte Carlo coagulation oracle (batch).
    Oracle {
        #[command(flatten)]
        common: CommonArgs,
        /// Particles in the simulation box.
        #[arg(long, default_value_t = 10_000)]
        n: usize,
        /// Initial particle total mass.
        #[arg(long, default_value_t = 1.0)]
        p0: f64,
        /// Initial particle drug mass.
        #[arg(long, default_value_t = 0.1)]
        s0: f64,
        /// Initial number concentration.
        #[arg(long, default_value_t = 1.0)]
        c0: f64,
        /// Batch horizon.
        #[arg(long, default_value_t = 10.0)]
        t_end: f64,
        /// Number of equally spaced snapshots (t = 0 included).
        #[arg(long, default_value_t = 11)]
        snapshots: usize,
    },
    /// Compare the chaos surrogate against direct Monte Carlo.
    PceValidate {
        #[command(flatten)]
        common: CommonArgs,
        /// Direct Monte Carlo sample count.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Run a closed-loop Monte Carlo campaign.
    Campaign {
        #[command(flatten)]
        common: CommonArgs,
        /// Which controller closes the loop.
        #[arg(long, value_parser = parse_controller)]
        controller: Option<ControllerKind>,
        /// Number of closed-loop runs.
        #[arg(long)]
        runs: Option<usize>,
    },
    /// Join two campaign summaries into one comparison report.
    Compare {
        /// First summary JSON (e.g. the SMPC campaign).
        #[arg(long)]
        a: PathBuf,
        /// Second summary JSON (e.g. the NMPC campaign).
        #[arg(long)]
        b: PathBuf,
        #[arg(long, default_value = "out")]
        out: PathBuf,
    },
}

fn parse_controller(s: &str) -> Result<ControllerKind, String> {
    match s {
        "smpc" => Ok(ControllerKind::Smpc),
        "nmpc" => Ok(ControllerKind::Nmpc),
        other => Err(format!("unknown controller '{other}' (smpc|nmpc)")),
    }
}

#[derive(Debug, thiserror::Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] granusim::config::ConfigError),
    #[error(transparent)]
    Moments(#[from] granusim::moments::MomentError),
    #[error(transparent)]
    Cnmc(#[from] cnmc::CnmcError),
    #[error(transparent)]
    Harness(#[from] harness::HarnessError),
    #[error(transparent)]
    Export(#[from] export::ExportError),
    #[error("cannot create output directory {0}: {1}")]
    OutDir(String, std::io::Error),
}

impl CliError {
    fn kind(&self) -> &'static str {
        match self {
            CliError::Config(_) => "config",
            CliError::Moments(_) => "moments",
            CliError::Cnmc(_) => "oracle",
            CliError::Harness(_) => "harness",
            CliError::Export(_) => "export",
            CliError::OutDir(..) => "io",
        }
    }
}

fn ensure_dir(path: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(path).map_err(|e| CliError::OutDir(path.display().to_string(), e))
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate { common, t_end } => {
            let cfg = common.campaign()?;
            let out = common.out_dir(Some(&cfg));
            ensure_dir(&out)?;
            let horizon = t_end.unwrap_or(cfg.total_time.max(cfg.control.dt_sample));
            let traj = integrate(
                &cfg.plant.x0,
                &cfg.plant.feed,
                &cfg.plant.kernel,
                cfg.plant.integrator_dt,
                horizon,
            )?;
            let path = out.join("simulate.csv");
            let rows: Vec<harness::StepRow> = traj
                .iter()
                .map(|(t, state)| {
                    let sm = granusim::moments::summary(state)?;
                    Ok(harness::StepRow {
                        time: *t,
                        s_f: Some(cfg.plant.feed.s_f),
                        c_f_realized: Some(cfg.plant.feed.c_f),
                        state: *state,
                        mean_drug: sm.mean_drug,
                        mean_mass: sm.mean_mass,
                        drug_second: sm.drug_second,
                    })
                })
                .collect::<Result<_, granusim::moments::MomentError>>()?;
            let record = harness::RunRecord {
                seed: cfg.master_seed,
                controller: cfg.controller,
                rows,
                diagnostics: Vec::new(),
            };
            export::write_trajectory_csv(&path, &record)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::Oracle {
            common,
            n,
            p0,
            s0,
            c0,
            t_end,
            snapshots,
        } => {
            let cfg = common.campaign()?;
            let out = common.out_dir(Some(&cfg));
            ensure_dir(&out)?;
            let seed = common.seed.unwrap_or(cfg.master_seed);
            let k0 = cfg.plant.kernel.k0();
            let times: Vec<f64> = (0..snapshots.max(1))
                .map(|k| t_end * k as f64 / (snapshots.max(2) - 1) as f64)
                .collect();
            let mut ensemble = cnmc::init_monodisperse(n, p0, s0, c0)?;
            let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
            let snaps = cnmc::run_batch(&mut ensemble, k0, &times, &mut rng)?;
            let path = out.join("oracle.csv");
            export::write_oracle_csv(&path, &snaps, seed, n)?;
            println!("wrote {}", path.display());
            Ok(())
        }
        Command::PceValidate { common, samples } => {
            let mut cfg = match &common.config {
                Some(path) => ValidationConfig::from_path(path)?,
                None => ValidationConfig::paper_preset(),
            };
            if let Some(seed) = common.seed {
                cfg.seed = seed;
            }
            if let Some(samples) = samples {
                cfg.mc_samples = samples;
            }
            cfg.validate()?;
            let out = common.out_dir(None);
            ensure_dir(&out)?;
            let report = harness::pce_validation(&cfg)?;
            export::write_validation(&out, &report)?;
            for step in &report.steps {
                println!(
                    "step {}: mc mean {:.6} pce mean {:.6} ks {:.4}",
                    step.step, step.mc_mean, step.pce_mean, step.ks_distance
                );
            }
            println!("wrote {}", out.join("report.json").display());
            Ok(())
        }
        Command::Campaign {
            common,
            controller,
            runs,
        } => {
            let mut cfg = common.campaign()?;
            if let Some(controller) = controller {
                cfg.controller = controller;
            }
            if let Some(runs) = runs {
                cfg.runs = runs;
            }
            cfg.validate()?;
            let out = common.out_dir(Some(&cfg));
            ensure_dir(&out)?;
            let result = harness::run_campaign(&cfg)?;
            export::write_campaign(&out, &result)?;
            println!(
                "{} campaign: {}/{} runs ok, final drug ratio mean {:.6} variance {:?}",
                cfg.controller,
                result.summary.success_count,
                cfg.runs,
                result.summary.mean_drug_ratio,
                result.summary.var_drug_ratio
            );
            println!("wrote {}", out.join("summary.json").display());
            Ok(())
        }
        Command::Compare { a, b, out } => {
            let summary_a = export::read_summary_json(&a)?;
            let summary_b = export::read_summary_json(&b)?;
            ensure_dir(&out)?;
            let variance_ratio = match (summary_a.var_drug_ratio, summary_b.var_drug_ratio) {
                (Some(va), Some(vb)) if va > 0.0 => Some(vb / va),
                _ => None,
            };
            let report = json!({
                "a": summary_a,
                "b": summary_b,
                "drug_variance_ratio_b_over_a": variance_ratio,
                "drug_mean_gap": (summary_a.mean_drug_ratio - summary_b.mean_drug_ratio).abs(),
                "max_violation_frequency": {
                    "a": summary_a.violation_frequency.iter().cloned().fold(0.0, f64::max),
                    "b": summary_b.violation_frequency.iter().cloned().fold(0.0, f64::max),
                },
            });
            let path = out.join("compare.json");
            export::write_json(&path, &report)?;
            println!("wrote {}", path.display());
            Ok(())
        }
    }
}

fn main() {
    let cli = Cli::parse();
    if let Err(err) = run(cli) {
        let payload = json!({
            "error": err.to_string(),
            "kind": err.kind(),
        });
        eprintln!("{payload}");
        std::process::exit(1);
    }
}

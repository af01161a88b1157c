//! Command-line front end over the experiment harness.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use scigan::harness::{
    cmd_evaluate, cmd_hpo, cmd_simulate, cmd_sweep, cmd_train, oracle_check, RunConfig, SweepAxis,
};
use scigan::Result;

#[derive(Parser)]
#[command(
    name = "scigan",
    about = "Dose-response estimation experiments: simulate, train, evaluate, sweep, hpo",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate one dataset bundle per configured seed.
    Simulate(CommonArgs),
    /// Train configured models (or one via --model) on existing bundles.
    Train(TrainArgs),
    /// Score trained models against the dataset oracle and write results.csv.
    Evaluate(CommonArgs),
    /// Run simulate/train/evaluate across an axis of settings.
    Sweep(SweepArgs),
    /// Random hyperparameter search scored on generator agreement.
    Hpo(HpoArgs),
    /// Exact small-problem checks of the adversarial-training theory.
    OracleCheck(OracleArgs),
}

/// Config file plus field overrides shared by every data-facing command.
#[derive(Args)]
struct CommonArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    run_id: Option<String>,
    /// Comma-separated master seeds.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Comma-separated model names.
    #[arg(long, value_delimiter = ',')]
    models: Option<Vec<String>>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    num_treatments: Option<usize>,
    #[arg(long)]
    kappa: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    noise_sd: Option<f64>,
    #[arg(long)]
    beta_levels: Option<usize>,
    #[arg(long)]
    grid_n: Option<usize>,
    #[arg(long)]
    gan_iterations: Option<usize>,
    #[arg(long)]
    inference_iterations: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    hidden_units: Option<usize>,
    #[arg(long)]
    num_dosage_samples: Option<usize>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<RunConfig> {
        let mut config = match &self.config {
            Some(path) => RunConfig::load(path)?,
            None => RunConfig::default(),
        };
        if let Some(v) = &self.output_dir {
            config.run.output_dir = v.clone();
        }
        if let Some(v) = &self.run_id {
            config.run.id = v.clone();
        }
        if let Some(v) = &self.seeds {
            config.run.seeds = v.clone();
        }
        if let Some(v) = &self.models {
            config.run.models = v.clone();
        }
        if let Some(v) = self.n {
            config.data.n = v;
        }
        if let Some(v) = self.feature_dim {
            config.data.feature_dim = v;
        }
        if let Some(v) = self.num_treatments {
            config.simulation.num_treatments = v;
        }
        if let Some(v) = self.kappa {
            config.simulation.kappa = v;
        }
        if let Some(v) = self.alpha {
            config.simulation.alpha = v;
        }
        if let Some(v) = self.noise_sd {
            config.simulation.noise_sd = v;
        }
        if let Some(v) = self.beta_levels {
            config.data.beta_levels = Some(v);
        }
        if let Some(v) = self.grid_n {
            config.run.grid_n = v;
        }
        if let Some(v) = self.gan_iterations {
            config.train.gan_iterations = v;
        }
        if let Some(v) = self.inference_iterations {
            config.train.inference_iterations = v;
        }
        if let Some(v) = self.batch_size {
            config.train.batch_size = v;
            config.baseline.batch_size = v;
        }
        if let Some(v) = self.hidden_units {
            config.train.hidden_units = v;
            config.baseline.hidden_units = v;
        }
        if let Some(v) = self.num_dosage_samples {
            config.train.num_dosage_samples = v;
        }
        config.validate()?;
        Ok(config)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Train only this model instead of every configured one.
    #[arg(long)]
    model: Option<String>,
    /// Train only this master seed instead of every configured one.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Axis spec such as kappa=0,2,4 or beta_levels=3,9,30 or n_w=3,5,9.
    #[arg(long)]
    axis: String,
}

#[derive(Args)]
struct HpoArgs {
    #[command(flatten)]
    common: CommonArgs,
    /// Number of random configurations to try.
    #[arg(long, default_value_t = 10)]
    budget: usize,
    /// Master seed for the search.
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct OracleArgs {
    /// Perturbed discriminators tested per fixture.
    #[arg(long, default_value_t = 200)]
    perturbations: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Simulate(args) => {
            let config = args.resolve()?;
            for dir in cmd_simulate(&config)? {
                println!("wrote {}", dir.display());
            }
        }
        Command::Train(args) => {
            let config = args.common.resolve()?;
            let models = match &args.model {
                Some(name) => vec![name.clone()],
                None => config.run.models.clone(),
            };
            let seeds = match args.seed {
                Some(seed) => vec![seed],
                None => config.run.seeds.clone(),
            };
            for model in &models {
                for &seed in &seeds {
                    let dir = cmd_train(&config, model, seed)?;
                    println!("trained {model} seed {seed} -> {}", dir.display());
                }
            }
        }
        Command::Evaluate(args) => {
            let config = args.resolve()?;
            let table = cmd_evaluate(&config)?;
            print!("{}", table.summary_csv());
            println!("results written to {}", config.output_dir().display());
        }
        Command::Sweep(args) => {
            let config = args.common.resolve()?;
            let axis = SweepAxis::parse(&args.axis)?;
            let output = cmd_sweep(&config, &axis)?;
            println!(
                "{} rows, {} failed cells -> {}",
                output.table.rows.len(),
                output.failures.len(),
                config.output_dir().display()
            );
            for failure in &output.failures {
                eprintln!(
                    "failed {} {} seed {}: {}",
                    failure.cell, failure.model, failure.seed, failure.error
                );
            }
        }
        Command::Hpo(args) => {
            let config = args.common.resolve()?;
            let outcome = cmd_hpo(&config, args.budget, args.seed)?;
            println!(
                "best of {}: batch {}, hidden {}, inv {}, eqv {} (score {})",
                outcome.trials.len(),
                outcome.best.batch_size,
                outcome.best.hidden_units,
                outcome.best.inv_dim,
                outcome.best.eqv_dim,
                outcome.best_score
            );
        }
        Command::OracleCheck(args) => {
            let rows = oracle_check(args.perturbations, args.seed)?;
            let mut all_ok = true;
            println!("fixture,disc_loss,kl_gap,factorization_deviation,perturbation_margin,ok");
            for row in &rows {
                let factorization = row
                    .factorization_deviation
                    .map_or("n/a".to_string(), |v| format!("{v:.3e}"));
                println!(
                    "{},{:.6},{:.3e},{},{:.3e},{}",
                    row.fixture, row.disc_loss, row.kl_gap, factorization,
                    row.perturbation_margin, row.ok
                );
                all_ok &= row.ok;
            }
            return Ok(all_ok);
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("{}", err.to_json());
            ExitCode::FAILURE
        }
    }
}

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use dfr_core::error::{Error, ErrorClass, Result};
use dfr_core::fit::{fit, predict_conditional, predict_mean, FitConfig, PredictionSchedule};
use dfr_core::io::{self, ingest, read_covariates, read_json, read_observations, ParamsFile, PredictionRow, TimeRescale};
use dfr_core::mstep::reporting_grid;
use dfr_core::rng::{stream, Stream};
use dfr_core::simulate::{generate_dataset, run_sweep, SimScenario, SweepConfig};
use log::{info, warn};
use nalgebra::DVector;

#[derive(Debug, Parser)]
#[command(name = "dfr", version, about = "Function-on-scalar regression for dichotomized longitudinal data")]
struct Cli {
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit the model to long-format binary data.
    Fit {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        obs: PathBuf,
        #[arg(long)]
        cov: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Use times as given instead of mapping them onto [0, 1].
        #[arg(long)]
        no_rescale: bool,
    },
    /// Generate one synthetic dataset with its ground truth.
    Simulate {
        #[arg(long)]
        scenario: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run a Monte Carlo sweep and write the MSE tables.
    Eval {
        #[arg(long)]
        sweep: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Predict curves from a fitted model.
    Predict {
        #[arg(long)]
        params: PathBuf,
        #[arg(long)]
        cov: PathBuf,
        /// Partial observations; subjects listed here get a conditional curve.
        #[arg(long)]
        obs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn exit_code(class: ErrorClass) -> u8 {
    match class {
        ErrorClass::Validation => 2,
        ErrorClass::Io => 3,
        ErrorClass::Numerical => 4,
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|source| Error::Io {
        path: dir.to_path_buf(),
        source,
    })
}

fn cmd_fit(config: &Path, obs: &Path, cov: &Path, out: &Path, rescale: bool) -> Result<()> {
    let cfg: FitConfig = read_json(config)?;
    cfg.validate()?;
    let (data, map) = ingest(obs, cov, rescale)?;
    info!(
        "fitting {} subjects, {} observations, basis {:?}",
        data.len(),
        data.total_observations(),
        cfg.basis.kind
    );
    let result = fit(&data, &cfg)?;
    if !result.converged {
        warn!("no convergence after {} iterations", result.iterations);
    }
    ensure_dir(out)?;
    io::write_fit(out, &result, map)
}

fn cmd_simulate(scenario: &Path, out: &Path) -> Result<()> {
    let scenario: SimScenario = read_json(scenario)?;
    scenario.validate()?;
    let (data, truth) = generate_dataset(&scenario)?;
    ensure_dir(out)?;
    io::write_dataset(out, &data)?;
    io::write_truth(out, &data, &truth)
}

fn cmd_eval(sweep: &Path, out: &Path) -> Result<()> {
    let sweep: SweepConfig = read_json(sweep)?;
    let rows = run_sweep(&sweep)?;
    ensure_dir(out)?;
    io::write_mse_table(&out.join("mse_table.csv"), &rows)?;
    io::write_wide_table(&out.join("mse_wide.csv"), &rows)
}

fn cmd_predict(params_path: &Path, cov: &Path, obs: Option<&Path>, out: &Path) -> Result<()> {
    let file: ParamsFile = read_json(params_path)?;
    let params = file.params()?;
    let basis = file.basis()?;
    let (names, covariates) = read_covariates(cov)?;
    if names.len() + 1 != file.covariate_names.len() {
        return Err(Error::Dimension(format!(
            "{} covariate columns for a model with {} coefficient functions",
            names.len(),
            file.covariate_names.len()
        )));
    }
    let observations: BTreeMap<String, Vec<(f64, bool, u64)>> = match obs {
        Some(p) => read_observations(p)?,
        None => BTreeMap::new(),
    };
    let schedule = PredictionSchedule {
        draws: file.prediction_draws,
        burn_in: file.prediction_burn_in,
    };
    let grid = reporting_grid(file.grid_size);
    let rescale: TimeRescale = file.time_rescale;

    let mut rows = Vec::with_capacity(covariates.len());
    for (i, (id, values)) in covariates.into_iter().enumerate() {
        let x = DVector::from_iterator(values.len() + 1, std::iter::once(1.0).chain(values));
        let mean = predict_mean(&params, &basis, &x, &grid)?;
        let conditional = match observations.get(&id) {
            Some(records) => {
                let mut records = records.clone();
                records.sort_by(|a, b| a.0.total_cmp(&b.0));
                let times: Vec<f64> = records.iter().map(|r| rescale.apply(r.0)).collect();
                let ys: Vec<bool> = records.iter().map(|r| r.1).collect();
                let mut rng = stream(file.seed, Stream::Predict, i as u64, 0);
                Some(predict_conditional(&params, &basis, &x, &ys, &times, &grid, schedule, &mut rng)?)
            }
            None => None,
        };
        rows.push(PredictionRow {
            subject: id,
            mean,
            conditional,
        });
    }
    ensure_dir(out)?;
    io::write_predictions(&out.join("predictions.csv"), &grid, &rows)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Fit {
            config,
            obs,
            cov,
            out,
            no_rescale,
        } => cmd_fit(&config, &obs, &cov, &out, !no_rescale),
        Command::Simulate { scenario, out } => cmd_simulate(&scenario, &out),
        Command::Eval { sweep, out } => cmd_eval(&sweep, &out),
        Command::Predict { params, cov, obs, out } => cmd_predict(&params, &cov, obs.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("DFR_LOG", "warn")).init();
    let cli = Cli::parse();

    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.threads {
        pool = pool.num_threads(n.max(1));
    }
    let pool = match pool.build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(3);
        }
    };

    match pool.install(|| run(cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.class()))
        }
    }
}

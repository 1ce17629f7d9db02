use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use tmefs::analysis::{self, PropositionCase, Verdict};
use tmefs::bench::{self, Experiment, ExperimentConfig};
use tmefs::config::parse_model_file;
use tmefs::discretize::Method;
use tmefs::mc;
use tmefs::model::SdeModel;
use tmefs::models::{self, CoordTurnParams};
use tmefs::quadrature::QuadratureKind;
use tmefs::tme;
use tmefs::Error;

#[derive(Parser)]
#[command(name = "tmefs", version, about = "Taylor moment expansion filtering and smoothing benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Proposition {
    Sigma2,
    Sigma3,
}

#[derive(clap::Args)]
struct ModelArgs {
    /// Built-in model (tanh, ou, sincos3, coord_turn) or a model file path.
    #[arg(long, default_value = "tanh")]
    model: String,
    /// Parameter `a` of sincos3.
    #[arg(long, default_value_t = 1.5)]
    a: f64,
}

impl ModelArgs {
    fn load(&self) -> tmefs::Result<SdeModel> {
        match self.model.as_str() {
            "tanh" => Ok(models::tanh_model()),
            "ou" => models::ou_model(1.0, 1.0),
            "sincos3" => models::sincos3_model(self.a),
            "coord_turn" => models::coord_turn_model(&CoordTurnParams::default()),
            path => Ok(parse_model_file(&fs::read_to_string(path)?)?.model),
        }
    }
}

#[derive(clap::Args)]
struct ExperimentArgs {
    #[arg(long)]
    config: PathBuf,
    /// Output directory; overrides `output` in the config.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Replaces the configured methods (repeatable).
    #[arg(long)]
    method: Vec<Method>,
    #[arg(long)]
    quad: Option<QuadratureKind>,
}

#[derive(Subcommand)]
enum Command {
    /// Transition-moment estimates against a Monte Carlo reference.
    Moments(ExperimentArgs),
    /// Coordinated-turn tracking: RMSE and divergence counts per grid cell.
    Track(ExperimentArgs),
    /// Positive-definiteness certificate of the TME covariance at a state.
    Certify {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        order: usize,
        /// State, comma-separated.
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true, default_values_t = [0.0])]
        x: Vec<f64>,
        #[arg(long, default_value_t = 0.0)]
        dt_min: f64,
        #[arg(long, default_value_t = 100.0)]
        dt_max: f64,
        #[arg(long, default_value_t = analysis::DEFAULT_GRID)]
        grid: usize,
        /// Also check a closed-form sufficient condition.
        #[arg(long)]
        proposition: Option<Proposition>,
    },
    /// Prints the TME mean and covariance coefficients, optionally evaluated.
    Expand {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, default_value_t = 2)]
        order: usize,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x: Option<Vec<f64>>,
        #[arg(long)]
        dt: Option<f64>,
    },
    /// Euler–Maruyama trajectories as CSV.
    Simulate {
        #[command(flatten)]
        model: ModelArgs,
        #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
        x0: Vec<f64>,
        #[arg(long, default_value_t = 1e-3)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        steps: usize,
        #[arg(long, default_value_t = 1)]
        paths: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        output: Option<PathBuf>,
    },
}

fn load_config(args: &ExperimentArgs, experiment: Experiment) -> tmefs::Result<ExperimentConfig> {
    let text = fs::read_to_string(&args.config)?;
    let base = args.config.parent().filter(|p| !p.as_os_str().is_empty());
    let mut cfg = ExperimentConfig::parse(&text, experiment, base)?;
    if !args.method.is_empty() {
        cfg.methods = args.method.clone();
    }
    if let Some(q) = args.quad {
        cfg.quad = q;
    }
    if args.output.is_some() {
        cfg.output = args.output.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn output_dir(cfg: &ExperimentConfig, default: &str) -> PathBuf {
    cfg.output.clone().unwrap_or_else(|| Path::new(default).to_path_buf())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or("-".into(), |x| format!("{x:.6e}"))
}

fn run(cli: Cli) -> tmefs::Result<ExitCode> {
    let mut out = io::stdout().lock();
    match cli.command {
        Command::Moments(args) => {
            let cfg = load_config(&args, Experiment::Moments)?;
            let report = bench::run_moments_experiment(&cfg)?;
            let dir = output_dir(&cfg, "tmefs-moments");
            bench::write_moments_outputs(&cfg, &report, &dir)?;
            for c in &report.orderings {
                writeln!(out, "{:<55} {}", c.name, if c.holds { "holds" } else { "does not hold" })?;
            }
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Track(args) => {
            let cfg = load_config(&args, Experiment::Tracking)?;
            let report = bench::run_tracking_experiment(&cfg)?;
            let dir = output_dir(&cfg, "tmefs-track");
            bench::write_tracking_outputs(&cfg, &report, &dir)?;
            writeln!(
                out,
                "{:<10} {:>6} {:>8} {:>9} {:>7} {:>13} {:>13}",
                "method", "dt", "substeps", "diverged", "used", "filter_rmse", "smoother_rmse"
            )?;
            for c in &report.cells {
                writeln!(
                    out,
                    "{:<10} {:>6} {:>8} {:>9} {:>7} {:>13} {:>13} {}",
                    c.method,
                    c.dt,
                    c.substeps,
                    c.n_diverged,
                    c.n_used,
                    fmt_opt(c.filter_rmse),
                    fmt_opt(c.smoother_rmse),
                    c.status
                )?;
            }
            writeln!(out, "wrote {}", dir.display())?;
        }
        Command::Certify {
            model,
            order,
            x,
            dt_min,
            dt_max,
            grid,
            proposition,
        } => {
            let m = model.load()?;
            let cert = analysis::certify_pd(&m, order, &x, (dt_min, dt_max), grid)?;
            writeln!(out, "order      {}", cert.order)?;
            writeln!(out, "state      {:?}", cert.state)?;
            writeln!(out, "interval   ({}, {}]", cert.interval.0, cert.interval.1)?;
            writeln!(out, "{:>3} {:>16} {:>16}", "r", "mineig(Phi_r)", "weight")?;
            for (r, (l, w)) in cert.min_eigenvalues.iter().zip(&cert.weights).enumerate() {
                writeln!(out, "{:>3} {:>16.8e} {:>16.8e}", r + 1, l, w)?;
            }
            if let Some(w) = cert.witness {
                writeln!(out, "witness    dt = {w:.12}")?;
            }
            writeln!(out, "verdict    {}", cert.verdict)?;
            if let Some(p) = proposition {
                let case = match p {
                    Proposition::Sigma2 => PropositionCase::Sigma2,
                    Proposition::Sigma3 => PropositionCase::Sigma3,
                };
                let rep = analysis::check_proposition1(&m, &x, case)?;
                writeln!(out, "proposition {:?}: {:?}", rep.case, rep.verdict)?;
            }
            return Ok(if cert.verdict == Verdict::CertifiedPd { ExitCode::SUCCESS } else { ExitCode::from(2) });
        }
        Command::Expand { model, order, x, dt } => {
            let m = model.load()?;
            let exp = tme::expand(&m, order)?;
            let d = m.dim();
            for r in 0..=order {
                let c = exp.mean().coeff(r);
                for i in 0..d {
                    writeln!(out, "a[{r}][{i}] = {}", c.get(i, 0))?;
                }
            }
            for r in 1..=order {
                let c = exp.covariance().coeff(r);
                for i in 0..d {
                    for j in i..d {
                        writeln!(out, "S[{r}][{i},{j}] = {}", c.get(i, j))?;
                    }
                }
            }
            if let (Some(x), Some(dt)) = (x, dt) {
                let (mean, cov) = exp.mean_cov(&x, 0.0, dt)?;
                writeln!(out, "mean = {:?}", mean.as_slice())?;
                writeln!(out, "cov = {:?}", cov.row_iter().map(|r| r.iter().copied().collect::<Vec<_>>()).collect::<Vec<_>>())?;
            }
        }
        Command::Simulate {
            model,
            x0,
            delta,
            steps,
            paths,
            seed,
            output,
        } => {
            let m = model.load()?;
            let x0 = DVector::from_vec(x0);
            let mut w = csv::Writer::from_writer(match &output {
                Some(p) => Box::new(fs::File::create(p)?) as Box<dyn Write>,
                None => Box::new(io::stdout()),
            });
            let mut header = vec!["path".to_string(), "t".to_string()];
            header.extend((0..m.dim()).map(|i| format!("x{i}")));
            w.write_record(&header)?;
            for p in 0..paths {
                let mut rng = mc::path_rng(seed, p);
                let states = mc::simulate_recorded(&m, &x0, 0.0, delta, 1, steps, &mut rng)?;
                for (k, s) in states.iter().enumerate() {
                    let mut rec = vec![p.to_string(), (k as f64 * delta).to_string()];
                    rec.extend(s.iter().map(|v| v.to_string()));
                    w.write_record(&rec)?;
                }
            }
            w.flush()?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if matches!(e, Error::Config(_) | Error::Input(_) | Error::Dimension(_)) {
                ExitCode::from(64)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}

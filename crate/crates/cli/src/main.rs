mod cartpole;
mod config;
mod error;
mod manifest;
mod objectives;
mod optimize;
mod regress;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dcem::ebm::InnerMethod;
use dcem::lml::{lml_project, LmlProblem};
use dcem::optimizers::hard_topk_indicator;
use serde_json::json;

use crate::config::{Method, RunConfig};
use crate::error::CliError;
use crate::objectives::ObjectiveKind;

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "+", env!("DCEM_GIT_DESCRIBE"));

#[derive(Parser)]
#[command(name = "dcem", version = VERSION, about = "Differentiable cross-entropy method experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Soft top-k projection of a vector.
    LmlProj(LmlArgs),
    /// Hard top-k indicator (the zero-temperature limit of lml-proj).
    Topk(TopkArgs),
    /// Minimize a built-in test function with CEM or DCEM.
    Optimize(OptimizeArgs),
    /// Energy-based 1-D regression with unrolled GD and DCEM inference.
    Regress(RegressArgs),
    /// Latent-space cartpole control through DCEM.
    Cartpole(CartpoleArgs),
}

#[derive(Args)]
struct LmlArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long)]
    k: usize,
    #[arg(long, default_value_t = 1.0)]
    tau: f64,
}

#[derive(Args)]
struct TopkArgs {
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true, required = true)]
    x: Vec<f64>,
    #[arg(long)]
    k: usize,
}

#[derive(Args)]
struct RunArgs {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (default `$DCEM_OUT_DIR/<experiment>`).
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    experiment: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = RunConfig::load(self.config.as_deref())?;
        if self.out.is_some() {
            cfg.output_dir = self.out.clone();
        }
        if self.experiment.is_some() {
            cfg.experiment = self.experiment.clone();
        }
        Ok(cfg)
    }
}

#[derive(Args)]
struct OptimizeArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_enum)]
    objective: Option<ObjectiveKind>,
    #[arg(long, allow_hyphen_values = true)]
    theta: Option<f64>,
    #[arg(long)]
    dim: Option<usize>,
    /// `cem` implies tau 0 unless --tau is given.
    #[arg(long, value_enum)]
    method: Option<MethodArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long = "N", alias = "n-samples")]
    n_samples: Option<usize>,
    #[arg(long = "k", alias = "n-elite")]
    n_elite: Option<usize>,
    #[arg(long = "T", alias = "n-iter")]
    n_iter: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, allow_hyphen_values = true)]
    mu0: Option<f64>,
    #[arg(long)]
    sigma0: Option<f64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Cem,
    Dcem,
}

#[derive(Clone, Copy, ValueEnum)]
enum InnerArg {
    Gd,
    Dcem,
}

#[derive(Args)]
struct RegressArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    outer_steps: Option<usize>,
    /// Restrict to one inner method (default: both).
    #[arg(long, value_enum)]
    method: Option<InnerArg>,
}

#[derive(Args)]
struct CartpoleArgs {
    #[command(flatten)]
    run: RunArgs,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    n_z: Option<usize>,
    #[arg(long)]
    outer_steps: Option<usize>,
    /// Sweep the latent-dimension x temperature x seed grid.
    #[arg(long, conflicts_with = "expert_only")]
    ablate: bool,
    /// Only evaluate the full-space expert on the validation states.
    #[arg(long)]
    expert_only: bool,
    #[arg(long)]
    workers: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn run(command: Command) -> Result<(), CliError> {
    match command {
        Command::LmlProj(a) => cmd_lml(&a),
        Command::Topk(a) => cmd_topk(&a),
        Command::Optimize(a) => {
            let mut cfg = RunConfig::load(a.config.as_deref())?.optimize;
            apply_optimize_flags(&mut cfg, &a);
            let out = optimize::run(&cfg)?;
            print_json(&out);
            Ok(())
        }
        Command::Regress(a) => {
            let mut cfg = a.run.load()?;
            let r = &mut cfg.regress;
            if let Some(seed) = a.run.seed {
                r.train.seed = seed;
            }
            if let Some(steps) = a.outer_steps {
                r.train.outer_steps = steps;
            }
            if let Some(m) = a.method {
                r.methods = vec![match m {
                    InnerArg::Gd => InnerMethod::UnrolledGd,
                    InnerArg::Dcem => InnerMethod::Dcem,
                }];
            }
            regress::run(&cfg)
        }
        Command::Cartpole(a) => {
            let mut cfg = a.run.load()?;
            let c = &mut cfg.cartpole;
            if let Some(seed) = a.run.seed {
                c.train.seed = seed;
            }
            if let Some(tau) = a.tau {
                c.train.solver.tau = tau;
            }
            if let Some(n_z) = a.n_z {
                c.train.n_z = n_z;
            }
            if let Some(steps) = a.outer_steps {
                c.train.outer_steps = steps;
            }
            if let Some(w) = a.workers {
                c.ablation.workers = w;
            }
            if a.expert_only {
                cartpole::run_expert_only(&cfg)
            } else if a.ablate {
                cartpole::run_ablation(&cfg)
            } else {
                cartpole::run(&cfg)
            }
        }
    }
}

fn apply_optimize_flags(cfg: &mut config::OptimizeConfig, a: &OptimizeArgs) {
    if let Some(o) = a.objective {
        cfg.objective = o;
    }
    if let Some(t) = a.theta {
        cfg.theta = t;
    }
    if let Some(d) = a.dim {
        cfg.dim = d;
    }
    if let Some(m) = a.method {
        cfg.method = match m {
            MethodArg::Cem => Method::Cem,
            MethodArg::Dcem => Method::Dcem,
        };
        if cfg.method == Method::Cem && a.tau.is_none() {
            cfg.dcem.tau = 0.0;
        }
    }
    if let Some(t) = a.tau {
        cfg.dcem.tau = t;
    }
    if let Some(n) = a.n_samples {
        cfg.dcem.n_samples = n;
    }
    if let Some(k) = a.n_elite {
        cfg.dcem.n_elite = k;
    }
    if let Some(t) = a.n_iter {
        cfg.dcem.n_iter = t;
    }
    if let Some(s) = a.seed {
        cfg.dcem.seed = s;
    }
    if let Some(m) = a.mu0 {
        cfg.mu0 = m;
    }
    if let Some(s) = a.sigma0 {
        cfg.sigma0 = s;
    }
}

fn cmd_lml(a: &LmlArgs) -> Result<(), CliError> {
    if a.tau == 0.0 {
        return Err(CliError::Config(
            "tau = 0 is the hard top-k limit; use `dcem topk --x .. --k ..` instead".into(),
        ));
    }
    let problem = LmlProblem::new(a.x.clone(), a.k, a.tau).map_err(|e| CliError::Config(e.to_string()))?;
    let sol = lml_project(&problem).map_err(CliError::runtime)?;
    print_json(&json!({
        "y": sol.y,
        "nu": sol.nu,
        "residual": sol.residual,
        "iterations": sol.iterations,
    }));
    Ok(())
}

fn cmd_topk(a: &TopkArgs) -> Result<(), CliError> {
    if a.k > a.x.len() {
        return Err(CliError::Config(format!("k = {} exceeds {} entries", a.k, a.x.len())));
    }
    // lml-proj favours large entries; match that orientation here
    let neg: Vec<f64> = a.x.iter().map(|v| -v).collect();
    print_json(&json!({ "y": hard_topk_indicator(&neg, a.k) }));
    Ok(())
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("json values serialize"));
}

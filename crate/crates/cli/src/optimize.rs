use dcem::autodiff::Tape;
use dcem::optimizers::{self, cem_with, dcem, GaussianDistribution, IterationTrace};
use serde::Serialize;

use crate::config::{Method, OptimizeConfig};
use crate::error::CliError;

#[derive(Debug, Serialize)]
pub struct IterationSummary {
    pub iteration: usize,
    pub min_value: f64,
    pub mean_value: f64,
    /// Mean standard deviation of the sampling distribution.
    pub mean_sigma: f64,
}

#[derive(Debug, Serialize)]
pub struct OptimizeResult {
    pub config: OptimizeConfig,
    pub x_hat: Vec<f64>,
    pub f_x_hat: f64,
    pub trace: Vec<IterationSummary>,
}

fn summarize(trace: &IterationTrace) -> Vec<IterationSummary> {
    trace
        .iterations
        .iter()
        .enumerate()
        .map(|(i, r)| IterationSummary {
            iteration: i,
            min_value: r.values.iter().copied().fold(f64::INFINITY, f64::min),
            mean_value: r.values.mean().unwrap_or(f64::NAN),
            mean_sigma: r.sigma2.mapv(f64::sqrt).mean().unwrap_or(f64::NAN),
        })
        .collect()
}

pub fn run(cfg: &OptimizeConfig) -> Result<OptimizeResult, CliError> {
    cfg.validate()?;
    let kind = cfg.objective;
    let init = GaussianDistribution::isotropic(1, cfg.dim, cfg.mu0, cfg.sigma0);
    let (x, trace) = match cfg.method {
        Method::Cem => {
            let out = cem_with(|x| Ok(kind.values(x, cfg.theta)), &init, &cfg.dcem)
                .map_err(CliError::runtime)?;
            (out.x, out.trace)
        }
        Method::Dcem => {
            let tape = Tape::new();
            let obj = optimizers::objective(|x| kind.eval(x, cfg.theta));
            let out = dcem(&obj, &tape, &init, &cfg.dcem).map_err(CliError::runtime)?;
            (out.x.value(), out.trace)
        }
    };
    Ok(OptimizeResult {
        config: cfg.clone(),
        f_x_hat: kind.values(&x, cfg.theta)[[0, 0]],
        x_hat: x.row(0).to_vec(),
        trace: summarize(&trace),
    })
}

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;

use dcem::control::{
    expert_cem, improvement_factor, latent_surface, low_cost_area, solve_latent, streams, train_decoder,
    validation_states, AblationCell, CartpoleState, ControlProblem, Decoder, DecoderTrainConfig,
    DecoderTrainOutput, ExpertPlan, TrajectoryPoint,
};
use dcem::derive_seed;
use dcem::io::{write_csv_file, Cell};
use serde_json::{json, Value};

use crate::config::{CartpoleConfig, RunConfig};
use crate::error::CliError;
use crate::manifest;

const STATE_FIELDS: [&str; 4] = ["p", "p_dot", "theta", "theta_dot"];

fn state_cells(s: &CartpoleState) -> Vec<Cell> {
    s.to_array().iter().map(|&v| v.into()).collect()
}

fn expert_plans(cfg: &CartpoleConfig, states: &[CartpoleState]) -> Result<Vec<ExpertPlan>, CliError> {
    expert_cem(&cfg.problem, states, &cfg.expert, cfg.expert_seed).map_err(CliError::runtime)
}

fn write_expert(dir: &Path, states: &[CartpoleState], plans: &[ExpertPlan]) -> Result<(), CliError> {
    let mut header = vec!["state"];
    header.extend(STATE_FIELDS);
    header.push("expert_cost");
    let rows: Vec<Vec<Cell>> = states
        .iter()
        .zip(plans)
        .enumerate()
        .map(|(i, (s, p))| {
            let mut row = vec![i.into()];
            row.extend(state_cells(s));
            row.push(p.cost.into());
            row
        })
        .collect();
    write_csv_file(&dir.join("expert.csv"), &header, &rows).map_err(CliError::runtime)
}

fn write_curve(path: &Path, out: &DecoderTrainOutput) -> Result<(), CliError> {
    let rows: Vec<Vec<Cell>> = out
        .curve
        .iter()
        .map(|p| vec![p.step.into(), p.train_cost.into(), p.val_cost.into()])
        .collect();
    write_csv_file(path, &["step", "train_cost", "val_cost"], &rows).map_err(CliError::runtime)
}

/// Embedded plans for every state from one batched latent solve, seeded
/// like the validation points of the training curve.
fn embedded_plans(
    prob: &ControlProblem,
    train: &DecoderTrainConfig,
    decoder: &Decoder,
    states: &[CartpoleState],
) -> Result<Vec<ExpertPlan>, CliError> {
    let seed = derive_seed(train.seed, streams::EVAL);
    let z = solve_latent(prob, decoder, states, &train.solver, seed).map_err(CliError::runtime)?;
    let plans = decoder.decode_plain(&z);
    Ok(states
        .iter()
        .zip(plans.rows())
        .map(|(s, row)| {
            let u = row.to_vec();
            ExpertPlan {
                cost: prob.rollout_cost_plain(s, &u),
                u,
            }
        })
        .collect())
}

fn trajectory_rows(i: usize, embedded: bool, traj: &[TrajectoryPoint]) -> Vec<Vec<Cell>> {
    traj.iter()
        .map(|p| {
            let mut row = vec![i.into(), usize::from(embedded).into(), p.t.into()];
            row.extend(state_cells(&p.state));
            row.push(p.u.into());
            row
        })
        .collect()
}

pub fn run_expert_only(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.cartpole;
    c.validate()?;
    let dir = cfg.run_dir("cartpole_expert");
    manifest::run_recorded(&dir, "cartpole --expert-only", cfg, || {
        let states = validation_states(&c.problem, c.train.n_val);
        let plans = expert_plans(c, &states)?;
        write_expert(&dir, &states, &plans)?;
        let mean = plans.iter().map(|p| p.cost).sum::<f64>() / plans.len() as f64;
        Ok(json!({ "expert_mean_cost": mean }))
    })
}

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.cartpole;
    c.validate()?;
    let dir = cfg.run_dir("cartpole");
    manifest::run_recorded(&dir, "cartpole", cfg, || {
        let prob = &c.problem;
        let states = validation_states(prob, c.train.n_val);
        let expert = expert_plans(c, &states)?;
        write_expert(&dir, &states, &expert)?;

        let out = train_decoder(prob, &c.train).map_err(CliError::runtime)?;
        write_curve(&dir.join("curve.csv"), &out)?;

        let embedded = embedded_plans(prob, &c.train, &out.decoder, &states)?;
        let expert_costs: Vec<f64> = expert.iter().map(|p| p.cost).collect();
        let embedded_costs: Vec<f64> = embedded.iter().map(|p| p.cost).collect();
        let factor = improvement_factor(&expert_costs, &embedded_costs);

        let rows: Vec<Vec<Cell>> = (0..states.len())
            .map(|i| {
                let ratio = expert_costs[i] / embedded_costs[i].max(dcem::control::COST_FLOOR);
                vec![i.into(), expert_costs[i].into(), embedded_costs[i].into(), ratio.into()]
            })
            .collect();
        write_csv_file(
            &dir.join("states.csv"),
            &["state", "expert_cost", "embedded_cost", "ratio"],
            &rows,
        )
        .map_err(CliError::runtime)?;
        write_csv_file(
            &dir.join("factor.csv"),
            &["n_z", "tau", "seed", "improvement_factor"],
            &[vec![
                c.train.n_z.into(),
                c.train.solver.tau.into(),
                c.train.seed.into(),
                factor.into(),
            ]],
        )
        .map_err(CliError::runtime)?;

        let mut rows = vec![];
        for (i, s) in states.iter().enumerate().take(c.trajectories) {
            rows.extend(trajectory_rows(i, false, &prob.trajectory(s, &expert[i].u)));
            rows.extend(trajectory_rows(i, true, &prob.trajectory(s, &embedded[i].u)));
        }
        let mut header = vec!["state", "embedded", "t"];
        header.extend(STATE_FIELDS);
        header.push("u");
        write_csv_file(&dir.join("trajectories.csv"), &header, &rows).map_err(CliError::runtime)?;

        let mut low_cost = Value::Null;
        if c.train.n_z == 2 && c.surface_resolution >= 2 {
            let surface =
                latent_surface(prob, &out.decoder, &states[0], c.surface_resolution).map_err(CliError::runtime)?;
            let rows: Vec<Vec<Cell>> = surface
                .iter()
                .map(|p| vec![p.z1.into(), p.z2.into(), p.cost.into()])
                .collect();
            write_csv_file(&dir.join("surface.csv"), &["z1", "z2", "cost"], &rows).map_err(CliError::runtime)?;
            low_cost = json!(low_cost_area(&surface, 0.1));
        }

        let last = out.final_point();
        Ok(json!({
            "improvement_factor": factor,
            "expert_mean_cost": mean(&expert_costs),
            "embedded_mean_cost": mean(&embedded_costs),
            "best_val_cost": out.best_val_cost(),
            "final_val_cost": last.val_cost,
            "final_train_cost": last.train_cost,
            "low_cost_area": low_cost,
        }))
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn cell_name(n_z: usize, tau: f64, seed: u64) -> String {
    format!("nz{n_z}_tau{tau}_seed{seed}")
}

pub fn run_ablation(cfg: &RunConfig) -> Result<(), CliError> {
    let c = &cfg.cartpole;
    c.validate()?;
    let a = &c.ablation;
    if a.n_zs.is_empty() || a.taus.is_empty() || a.seeds.is_empty() {
        return Err(CliError::Config("ablation grid is empty".into()));
    }
    for &n_z in &a.n_zs {
        for &tau in &a.taus {
            let mut check = DecoderTrainConfig {
                n_z,
                ..c.train.clone()
            };
            check.solver.tau = tau;
            check.validate().map_err(|e| CliError::Config(e.to_string()))?;
        }
    }
    let dir = cfg.run_dir("cartpole_ablation");
    manifest::run_recorded(&dir, "cartpole --ablate", cfg, || {
        let prob = &c.problem;
        let states = validation_states(prob, c.train.n_val);
        let expert = expert_plans(c, &states)?;
        write_expert(&dir, &states, &expert)?;
        let expert_costs: Vec<f64> = expert.iter().map(|p| p.cost).collect();

        let grid = dcem::control::ablation_grid(&a.n_zs, &a.taus, &a.seeds);
        let results: Mutex<Vec<Option<Result<AblationCell, CliError>>>> =
            Mutex::new((0..grid.len()).map(|_| None).collect());
        let next = AtomicUsize::new(0);
        let workers = match a.workers {
            0 => thread::available_parallelism().map_or(1, |n| n.get()),
            w => w,
        }
        .min(grid.len());
        let run_cell = |&(n_z, tau, seed): &(usize, f64, u64)| -> Result<AblationCell, CliError> {
            let mut train = DecoderTrainConfig {
                n_z,
                seed,
                ..c.train.clone()
            };
            train.solver.tau = tau;
            let out = train_decoder(prob, &train).map_err(CliError::runtime)?;
            write_curve(&dir.join("cells").join(cell_name(n_z, tau, seed)).join("curve.csv"), &out)?;
            let embedded = embedded_plans(prob, &train, &out.decoder, &states)?;
            let embedded_costs: Vec<f64> = embedded.iter().map(|p| p.cost).collect();
            Ok(AblationCell {
                n_z,
                tau,
                seed,
                improvement_factor: improvement_factor(&expert_costs, &embedded_costs),
                best_val_cost: out.best_val_cost(),
                final_val_cost: out.final_point().val_cost,
            })
        };
        thread::scope(|scope| {
            for _ in 0..workers {
                scope.spawn(|| loop {
                    let i = next.fetch_add(1, Ordering::Relaxed);
                    if i >= grid.len() {
                        break;
                    }
                    let r = run_cell(&grid[i]);
                    results.lock().expect("worker panicked")[i] = Some(r);
                });
            }
        });
        let cells = results
            .into_inner()
            .expect("worker panicked")
            .into_iter()
            .map(|r| r.expect("every cell ran"))
            .collect::<Result<Vec<_>, _>>()?;

        let rows: Vec<Vec<Cell>> = cells
            .iter()
            .map(|c| {
                vec![
                    c.n_z.into(),
                    c.tau.into(),
                    c.seed.into(),
                    c.improvement_factor.into(),
                    c.best_val_cost.into(),
                    c.final_val_cost.into(),
                ]
            })
            .collect();
        write_csv_file(
            &dir.join("ablation.csv"),
            &["n_z", "tau", "seed", "improvement_factor", "best_val_cost", "final_val_cost"],
            &rows,
        )
        .map_err(CliError::runtime)?;
        Ok(json!({
            "expert_mean_cost": mean(&expert_costs),
            "cells": cells,
        }))
    })
}

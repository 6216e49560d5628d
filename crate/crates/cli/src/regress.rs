use std::path::Path;

use dcem::derive_seed;
use dcem::ebm::{
    self, ablate_inner_iterations, export_energy_surface, linspace, local_minimum_probe, pass_rate,
    predict_all, streams, InnerMethod,
};
use dcem::io::{write_csv_file, Cell};
use serde_json::{json, Map, Value};

use crate::config::{RegressConfig, RunConfig};
use crate::error::CliError;
use crate::manifest;

pub fn run(cfg: &RunConfig) -> Result<(), CliError> {
    cfg.regress.validate()?;
    let dir = cfg.run_dir("regress");
    manifest::run_recorded(&dir, "regress", cfg, || {
        let mut metrics = Map::new();
        for &method in &cfg.regress.methods {
            let m = run_method(&cfg.regress, method, &dir.join(method.name()))?;
            metrics.insert(method.name().into(), m);
        }
        Ok(Value::Object(metrics))
    })
}

fn run_method(cfg: &RegressConfig, method: InnerMethod, dir: &Path) -> Result<Value, CliError> {
    let train = &cfg.train;
    let inference = cfg.inference_for(method);
    let task = train.task();
    let out = ebm::train(&task, &inference, train).map_err(CliError::runtime)?;

    let curve: Vec<Vec<Cell>> = out
        .curve
        .iter()
        .map(|p| vec![p.step.into(), p.train_mse.into(), p.val_mse.into()])
        .collect();
    write_csv_file(&dir.join("loss.csv"), &["step", "train_mse", "val_mse"], &curve)
        .map_err(CliError::runtime)?;

    let g = &cfg.surface;
    let surface = export_energy_surface(
        |xs, ys| out.net.energy_plain(xs, ys),
        &linspace(g.x_min, g.x_max, g.nx),
        &linspace(g.y_min, g.y_max, g.ny),
    );
    let rows: Vec<Vec<Cell>> = surface
        .iter()
        .map(|p| vec![p.x.into(), p.y.into(), p.energy.into(), p.normalized.into()])
        .collect();
    write_csv_file(&dir.join("surface.csv"), &["x", "y", "energy", "normalized"], &rows)
        .map_err(CliError::runtime)?;

    let ablation = ablate_inner_iterations(&out.net, &task, &inference, train, &cfg.ablation_iterations)
        .map_err(CliError::runtime)?;
    let rows: Vec<Vec<Cell>> = ablation
        .iter()
        .map(|a| vec![a.iterations.into(), a.val_mse.into()])
        .collect();
    write_csv_file(&dir.join("ablation.csv"), &["iterations", "val_mse"], &rows)
        .map_err(CliError::runtime)?;

    let seed = derive_seed(train.seed, streams::EVAL);
    let preds = predict_all(&out.net, &task.val_x, &inference, seed, train.eval_batch)
        .map_err(CliError::runtime)?;
    let probe = local_minimum_probe(&out.net, &task.val_x, &preds, cfg.probe_delta);
    let rows: Vec<Vec<Cell>> = task
        .val_x
        .iter()
        .zip(&task.val_y)
        .zip(preds.iter().zip(&probe))
        .map(|((&x, &y), (&p, &ok))| vec![x.into(), y.into(), p.into(), usize::from(ok).into()])
        .collect();
    write_csv_file(&dir.join("predictions.csv"), &["x", "y", "prediction", "local_min"], &rows)
        .map_err(CliError::runtime)?;

    let last = out.final_point();
    Ok(json!({
        "final_train_mse": last.train_mse,
        "final_val_mse": last.val_mse,
        "probe_pass_rate": pass_rate(&probe),
        "ablation": ablation,
    }))
}

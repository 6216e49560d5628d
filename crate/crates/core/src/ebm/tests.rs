use super::*;
use crate::test_util::rel_err;
use ndarray::array;

fn quadratic<'t>(c: f64) -> impl Fn(Var<'t>, Var<'t>) -> autodiff::Result<Var<'t>> {
    move |_x: Var<'t>, y: Var<'t>| Ok(y.add_scalar(-c).square())
}

#[test]
fn dcem_defaults_find_quadratic_minimum() {
    let grid_min = linspace(-10.0, 10.0, 20_001)
        .into_iter()
        .min_by(|a, b| (a - 1.0).powi(2).total_cmp(&(b - 1.0).powi(2)))
        .unwrap();
    let tape = Tape::new();
    let x = tape.constant(column(&[0.5, 2.0, 4.0]));
    let y = predict(&quadratic(1.0), x, &InferenceConfig::default(), 7).unwrap();
    for v in y.value() {
        assert!((v - grid_min).abs() <= 1e-2, "{v}");
    }
}

#[test]
fn unrolled_gd_follows_closed_form() {
    let tape = Tape::new();
    let x = tape.constant(column(&[1.0]));
    let cfg = InferenceConfig::with_method(InnerMethod::UnrolledGd);
    let y = predict(&quadratic(1.0), x, &cfg, 0).unwrap();
    let expected = 1.0 - 0.8f64.powi(10);
    assert!((y.item() - expected).abs() < 1e-12);
    assert!((y.item() - 0.8926).abs() < 1e-4);
}

#[test]
fn zero_inner_rate_returns_start() {
    let tape = Tape::new();
    let x = tape.constant(column(&[1.0, 3.0]));
    let cfg = InferenceConfig {
        lr: 0.0,
        ..InferenceConfig::with_method(InnerMethod::UnrolledGd)
    };
    let y = predict(&quadratic(1.0), x, &cfg, 0).unwrap();
    assert_eq!(y.value(), array![[0.0], [0.0]]);
}

fn tiny_train() -> TrainConfig {
    TrainConfig {
        hidden: vec![8],
        outer_steps: 0,
        batch_size: 4,
        n_train: 12,
        n_val: 6,
        train_probe: 12,
        eval_every: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_steps_reports_untrained_baseline() {
    let cfg = tiny_train();
    let task = cfg.task();
    for method in [InnerMethod::Dcem, InnerMethod::UnrolledGd] {
        let inf = InferenceConfig {
            n_samples: 20,
            n_elite: 4,
            ..InferenceConfig::with_method(method)
        };
        let out = train(&task, &inf, &cfg).unwrap();
        assert_eq!(out.curve.len(), 1);
        let fresh = EnergyNetwork::new(&cfg.hidden, derive_seed(cfg.seed, streams::INIT));
        assert_eq!(out.net, fresh);
        let baseline = validation_mse(&fresh, &task, &inf, &cfg).unwrap();
        assert_eq!(out.final_point().val_mse, baseline);
    }
}

#[test]
fn training_is_reproducible() {
    let cfg = TrainConfig {
        outer_steps: 12,
        ..tiny_train()
    };
    let task = cfg.task();
    let inf = InferenceConfig {
        n_samples: 16,
        n_elite: 4,
        iterations: 3,
        ..InferenceConfig::default()
    };
    let a = train(&task, &inf, &cfg).unwrap();
    let b = train(&task, &inf, &cfg).unwrap();
    assert_eq!(a.curve, b.curve);
    assert_eq!(a.net, b.net);
    assert_eq!(a.curve.iter().map(|p| p.step).collect::<Vec<_>>(), vec![0, 5, 10, 12]);
}

#[test]
fn divergence_aborts() {
    let cfg = TrainConfig {
        outer_steps: 3,
        divergence_threshold: 0.0,
        ..tiny_train()
    };
    let inf = InferenceConfig::with_method(InnerMethod::UnrolledGd);
    match train(&cfg.task(), &inf, &cfg) {
        Err(EbmError::Diverged { step: 0, loss }) => assert!(loss > 0.0),
        other => panic!("unexpected {other:?}"),
    }
}

/// Outer gradient on a frozen 4-point task against central differences.
fn check_outer_gradient(inf: &InferenceConfig) {
    let net = EnergyNetwork::new(&[3], 5);
    let xs = [0.3, 1.4, 2.9, 5.0];
    let ys: Vec<f64> = xs.iter().map(|&x| target(x)).collect();
    let (_, grads) = loss_and_grads(&net, &xs, &ys, inf, 11).unwrap();
    let loss_at = |n: &EnergyNetwork| loss_and_grads(n, &xs, &ys, inf, 11).unwrap().0;
    let h = 1e-6;
    let mut analytic = vec![];
    let mut numeric = vec![];
    for (idx, g) in grads.iter().enumerate() {
        let shape = g.dim();
        for r in 0..shape.0 {
            for c in 0..shape.1 {
                let mut plus = net.clone();
                plus.mlp.params_mut()[idx][[r, c]] += h;
                let mut minus = net.clone();
                minus.mlp.params_mut()[idx][[r, c]] -= h;
                numeric.push((loss_at(&plus) - loss_at(&minus)) / (2.0 * h));
                analytic.push(g[[r, c]]);
            }
        }
    }
    let a = column(&analytic);
    let n = column(&numeric);
    let err = rel_err(&a, &n);
    assert!(err <= 1e-3, "{:?}: rel err {err}", inf.method);
}

#[test]
fn outer_gradient_through_unrolled_gd() {
    check_outer_gradient(&InferenceConfig::with_method(InnerMethod::UnrolledGd));
}

#[test]
fn outer_gradient_through_dcem() {
    let inf = InferenceConfig {
        n_samples: 20,
        n_elite: 5,
        iterations: 3,
        ..InferenceConfig::default()
    };
    check_outer_gradient(&inf);
}

#[test]
fn surface_of_constant_energy_is_flat() {
    let s = export_energy_surface(|xs, _| vec![2.5; xs.len()], &linspace(0.0, 1.0, 4), &linspace(-1.0, 1.0, 5));
    assert_eq!(s.len(), 20);
    assert!(s.iter().all(|p| p.normalized == 0.0));
}

#[test]
fn surface_argmin_tracks_diagonal() {
    let grid = linspace(-2.0, 2.0, 41);
    let s = export_energy_surface(
        |xs, ys| xs.iter().zip(ys).map(|(x, y)| (y - x) * (y - x)).collect(),
        &grid,
        &grid,
    );
    for (x, y) in slice_argmins(&s) {
        assert!((x - y).abs() < 1e-12);
    }
}

#[test]
fn ablation_at_training_count_matches_validation() {
    let cfg = TrainConfig {
        outer_steps: 4,
        ..tiny_train()
    };
    let task = cfg.task();
    let inf = InferenceConfig {
        n_samples: 16,
        n_elite: 4,
        ..InferenceConfig::default()
    };
    let out = train(&task, &inf, &cfg).unwrap();
    let table = ablate_inner_iterations(&out.net, &task, &inf, &cfg, &[1, 10, 20, 30]).unwrap();
    assert_eq!(table.len(), 4);
    assert_eq!(table[1].val_mse, out.final_point().val_mse);
}

#[test]
fn probe_passes_at_grid_minimizers() {
    let mut net = EnergyNetwork::new(&[2], 0);
    let xs = [0.5, 1.5];
    let grid = linspace(-20.0, 20.0, 40_001);
    let preds: Vec<f64> = xs
        .iter()
        .map(|&x| {
            let e = net.energy_plain(&vec![x; grid.len()], &grid);
            let i = (0..grid.len()).min_by(|&a, &b| e[a].total_cmp(&e[b])).unwrap();
            grid[i]
        })
        .collect();
    let interior: Vec<bool> = preds.iter().map(|p| p.abs() < 19.9).collect();
    let flags = local_minimum_probe(&net, &xs, &preds, 0.05);
    for (f, inside) in flags.iter().zip(&interior) {
        if *inside {
            assert!(*f);
        }
    }
    net.mlp.layers[0].weight.fill(0.0);
    assert!(pass_rate(&local_minimum_probe(&net, &xs, &preds, 0.05)) == 1.0);
}

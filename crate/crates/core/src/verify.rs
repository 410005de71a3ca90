//! Built-in verification suite: analytic gradients against finite
//! differences, the aggregation operators against brute-force evaluation,
//! and the uniform-distribution equivalence on a tiny setting.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{partition_pathological, synth_gaussian_mixture, ClassDistribution};
use crate::error::Result;
use crate::federation::{
    aggregate_class_wise_local, run_round_cwfedavg, run_round_fedavg, CwMode, LocalTrainCfg,
    RoundOptions, ServerState, SingleGlobalState,
};
use crate::nn::{self, Batch, ModelParams};
use crate::wdr::{self, WdrConfig};

/// Outcome of one named check.
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl CheckResult {
    fn pass(name: &'static str, detail: impl Into<String>) -> Self {
        CheckResult {
            name,
            passed: true,
            detail: detail.into(),
        }
    }

    fn fail(name: &'static str, detail: impl Into<String>) -> Self {
        CheckResult {
            name,
            passed: false,
            detail: detail.into(),
        }
    }
}

fn grad_close(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= f64::max(1e-4 * f64::max(analytic.abs(), numeric.abs()), 1e-7)
}

fn check_loss_gradients() -> CheckResult {
    const NAME: &str = "loss gradient vs central finite differences";
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    for trial in 0..10u64 {
        let arch = [3, 6, 3];
        let params = match nn::init_params(&arch, trial) {
            Ok(p) => p,
            Err(e) => return CheckResult::fail(NAME, e.to_string()),
        };
        let inputs: Vec<f64> = (0..4 * 3)
            .map(|_| rng.random::<f64>() * 2.0 - 1.0)
            .collect();
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..3)).collect();
        let batch = Batch::new(inputs, 3, labels).expect("valid batch");
        let grads = match nn::loss_and_grad(&params, &batch, None) {
            Ok((_, g)) => g,
            Err(e) => return CheckResult::fail(NAME, e.to_string()),
        };

        let flat = params.flatten();
        let mut work = params.clone();
        let mut analytic = Vec::new();
        for layer in &grads.layers {
            analytic.extend_from_slice(&layer.weights);
            analytic.extend_from_slice(&layer.bias);
        }
        for i in 0..flat.len() {
            let step = 1e-5;
            let mut plus = flat.clone();
            plus[i] += step;
            work.assign_from_flat(&plus).expect("same shape");
            let (lp, _) = nn::loss_and_grad(&work, &batch, None).expect("finite");
            let mut minus = flat.clone();
            minus[i] -= step;
            work.assign_from_flat(&minus).expect("same shape");
            let (lm, _) = nn::loss_and_grad(&work, &batch, None).expect("finite");
            let numeric = (lp - lm) / (2.0 * step);
            worst = worst.max((analytic[i] - numeric).abs());
            if !grad_close(analytic[i], numeric) {
                return CheckResult::fail(
                    NAME,
                    format!(
                        "component {i}: analytic {} vs numeric {numeric}",
                        analytic[i]
                    ),
                );
            }
        }
    }
    CheckResult::pass(
        NAME,
        format!("10 random nets, worst abs deviation {worst:.2e}"),
    )
}

fn check_wdr_gradients() -> CheckResult {
    const NAME: &str = "wdr gradient vs central finite differences";
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let cfg = WdrConfig::with_lambda(2.5).expect("valid");
    let mut checked = 0u32;
    let mut seed = 100u64;
    while checked < 20 {
        seed += 1;
        let params = nn::init_params(&[4, 5, 4], seed).expect("valid arch");
        let raw: Vec<f64> = (0..4).map(|_| rng.random::<f64>() + 1e-3).collect();
        let sum: f64 = raw.iter().sum();
        let target =
            ClassDistribution::new(raw.iter().map(|&r| r / sum).collect()).expect("normalized");
        let omega = match wdr::wdr_penalty(&params, &target) {
            Ok(o) => o,
            Err(e) => return CheckResult::fail(NAME, e.to_string()),
        };
        if omega <= 1e-3 {
            continue;
        }
        let analytic = wdr::wdr_gradient(&params, &target, &cfg).expect("nonzero layer");
        for (j, row) in analytic.iter().enumerate() {
            for (i, &a) in row.iter().enumerate() {
                let step = 1e-6;
                let mut plus = params.clone();
                plus.final_layer_mut().row_mut(j)[i] += step;
                let mut minus = params.clone();
                minus.final_layer_mut().row_mut(j)[i] -= step;
                let lp = cfg.lambda * wdr::wdr_penalty(&plus, &target).expect("nonzero");
                let lm = cfg.lambda * wdr::wdr_penalty(&minus, &target).expect("nonzero");
                let numeric = (lp - lm) / (2.0 * step);
                if !grad_close(a, numeric) {
                    return CheckResult::fail(
                        NAME,
                        format!("row {j} col {i}: analytic {a} vs numeric {numeric}"),
                    );
                }
            }
        }
        checked += 1;
    }
    CheckResult::pass(NAME, "20 random (params, target) pairs")
}

fn check_aggregation_oracles() -> CheckResult {
    const NAME: &str = "class-wise aggregation vs brute-force evaluation";
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for trial in 0..50 {
        let m = rng.random_range(1..=5);
        let k = rng.random_range(1..=4);
        let hidden = rng.random_range(1..=3);
        let arch = vec![rng.random_range(1..=3), hidden, k];

        let locals: Vec<ModelParams> = (0..m)
            .map(|i| nn::init_params(&arch, trial * 100 + i as u64).unwrap())
            .collect();
        let prev: Vec<ModelParams> = (0..k)
            .map(|j| nn::init_params(&arch, trial * 100 + 50 + j as u64).unwrap())
            .collect();
        let masses: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..k)
                    .map(|_| {
                        if rng.random::<f64>() < 0.2 {
                            0.0
                        } else {
                            rng.random::<f64>() * 10.0
                        }
                    })
                    .collect()
            })
            .collect();

        let globals = match aggregate_class_wise_local(&locals, &masses, &prev) {
            Ok(g) => g,
            Err(e) => return CheckResult::fail(NAME, e.to_string()),
        };
        let flat_locals: Vec<Vec<f64>> = locals.iter().map(|l| l.flatten()).collect();
        for j in 0..k {
            let denom: f64 = masses.iter().map(|row| row[j]).sum();
            let expected: Vec<f64> = if denom <= 0.0 {
                prev[j].flatten()
            } else {
                let mut acc = vec![0.0; flat_locals[0].len()];
                for (row, flat) in masses.iter().zip(&flat_locals) {
                    let q = row[j] / denom;
                    for (a, v) in acc.iter_mut().zip(flat) {
                        *a += q * v;
                    }
                }
                acc
            };
            for (a, b) in globals[j].flatten().iter().zip(&expected) {
                if (a - b).abs() > 1e-12 {
                    return CheckResult::fail(NAME, format!("trial {trial} class {j}: {a} vs {b}"));
                }
            }
        }
    }
    CheckResult::pass(NAME, "50 randomized instances within 1e-12")
}

fn check_uniform_equivalence() -> Result<CheckResult> {
    const NAME: &str = "uniform clients: class-wise globals equal the single global";
    let data = synth_gaussian_mixture(3, 2, 24, 4.0, 5)?;
    let clients = partition_pathological(&data, 4, 3, 5)?.clients;
    let arch = [2usize, 3];
    let opts = RoundOptions::full(
        LocalTrainCfg {
            lr: 0.01,
            batch_size: 4,
            local_epochs: 1,
        },
        5,
    );

    let mut server = ServerState::init(&arch, &clients, &CwMode::TrueDist, 5, true)?;
    let mut single = SingleGlobalState::init(&arch, 5)?;
    let mut locals_cw = vec![None; 4];
    let mut locals_fa = vec![None; 4];
    let mut worst = 0.0f64;
    for _ in 0..5 {
        run_round_cwfedavg(
            &mut server,
            &mut locals_cw,
            &clients,
            &CwMode::TrueDist,
            &opts,
        )?;
        run_round_fedavg(&mut single, &mut locals_fa, &clients, None, &opts)?;
        let reference = single.global.flatten();
        for g in &server.global_models {
            for (a, b) in g.flatten().iter().zip(&reference) {
                worst = worst.max((a - b).abs());
            }
        }
    }
    if worst <= 1e-9 {
        Ok(CheckResult::pass(
            NAME,
            format!("5 rounds, max deviation {worst:.2e}"),
        ))
    } else {
        Ok(CheckResult::fail(
            NAME,
            format!("max deviation {worst:.2e} exceeds 1e-9"),
        ))
    }
}

fn check_estimation_examples() -> CheckResult {
    const NAME: &str = "weight-norm distribution estimate";
    let mut params = nn::init_params(&[3, 2, 2], 1).expect("valid arch");
    let layer = params.final_layer_mut();
    layer.row_mut(0).copy_from_slice(&[3.0, 0.0]);
    layer.row_mut(1).copy_from_slice(&[0.0, 1.0]);
    let est = match wdr::estimate_distribution(&params) {
        Ok(e) => e,
        Err(e) => return CheckResult::fail(NAME, e.to_string()),
    };
    if (est.probs()[0] - 0.75).abs() > 1e-12 || (est.probs()[1] - 0.25).abs() > 1e-12 {
        return CheckResult::fail(NAME, format!("norms (3, 1) estimated as {:?}", est.probs()));
    }
    let mut scaled = params.clone();
    scaled
        .final_layer_mut()
        .weights
        .iter_mut()
        .for_each(|w| *w *= 42.0);
    let est_scaled = wdr::estimate_distribution(&scaled).expect("nonzero");
    for (a, b) in est.probs().iter().zip(est_scaled.probs()) {
        if (a - b).abs() > 1e-12 {
            return CheckResult::fail(NAME, "estimate is not scale invariant".to_string());
        }
    }
    CheckResult::pass(NAME, "norm shares and scale invariance")
}

/// Runs the whole suite; the CLI prints one line per result.
pub fn run_verification() -> Vec<CheckResult> {
    let mut results = vec![
        check_loss_gradients(),
        check_wdr_gradients(),
        check_aggregation_oracles(),
        check_estimation_examples(),
    ];
    match check_uniform_equivalence() {
        Ok(result) => results.push(result),
        Err(e) => results.push(CheckResult::fail(
            "uniform clients: class-wise globals equal the single global",
            e.to_string(),
        )),
    }
    results
}

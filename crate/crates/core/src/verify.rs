//! Randomised self-checks of the loss identities and model gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dataio::Sample;
use crate::error::Result;
use crate::loss::{decompose, verify_decomposition, verify_redline, LossConfig, LossMode, SoftTarget, DEFAULT_EPS_LOG};
use crate::model::{backward, forward_cached, init_params, score_and_softmax, Gradients, ModelKind, ModelParams, PredictionDistribution};

/// Parameter step for finite differences.
pub const FD_STEP: f64 = 1e-5;
/// Denominator floor for relative error, so near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;
/// Relative error bound for model gradient checks.
pub const GRAD_REL_TOL: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub cases: usize,
    pub max_residual: f64,
    pub tol: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_residual <= self.tol
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub checks: Vec<CheckResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(CheckResult::passed)
    }

    pub fn render(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<32} cases={:<6} max_residual={:.3e} tol={:.1e}\n",
                if c.passed() { "PASS" } else { "FAIL" },
                c.name,
                c.cases,
                c.max_residual,
                c.tol
            ));
        }
        out
    }
}

/// A random full-support prediction over `m` items.
pub fn random_prediction(rng: &mut impl Rng, m: usize) -> PredictionDistribution {
    let z: Vec<f64> = (0..m).map(|_| rng.random_range(-3.0..3.0)).collect();
    PredictionDistribution::from_logits(&z)
}

/// A random soft target over a random support that contains `y`.
pub fn random_target(rng: &mut impl Rng, m: usize, y: usize) -> SoftTarget {
    let mut entries = vec![(y, rng.random_range(0.05..1.0))];
    for i in 0..m {
        if i != y && rng.random_bool(0.6) {
            entries.push((i, rng.random_range(0.01..1.0)));
        }
    }
    let total: f64 = entries.iter().map(|e| e.1).sum();
    for e in &mut entries {
        e.1 /= total;
    }
    SoftTarget::from_entries(y, entries).expect("normalised random target is valid")
}

fn worst(acc: f64, r: f64) -> f64 {
    if r.is_nan() {
        f64::INFINITY
    } else {
        acc.max(r)
    }
}

/// Loss identity and gradient agreement of the decomposition.
pub fn check_decomposition(seed: u64, draws: usize, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0;
    for _ in 0..draws {
        let m = rng.random_range(3..=10);
        let y = rng.random_range(0..m);
        let lambda1 = rng.random_range(0.0..=1.0);
        let p = random_prediction(&mut rng, m);
        let q = random_target(&mut rng, m, y);
        max = worst(max, verify_decomposition(&p, &q, y, lambda1, tol)?.max_residual);
    }
    Ok(CheckResult {
        name: "decomposition".into(),
        cases: draws,
        max_residual: max,
        tol,
    })
}

/// The remainder term must not depend on the prediction.
pub fn check_remainder_constant(seed: u64, draws: usize, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0;
    for _ in 0..draws {
        let m = rng.random_range(3..=10);
        let y = rng.random_range(0..m);
        let lambda1 = rng.random_range(0.0..=1.0);
        let q = random_target(&mut rng, m, y);
        let p1 = random_prediction(&mut rng, m);
        let p2 = random_prediction(&mut rng, m);
        let f1 = decompose(&p1, &q, y, lambda1, DEFAULT_EPS_LOG)?.f_q;
        let f2 = decompose(&p2, &q, y, lambda1, DEFAULT_EPS_LOG)?.f_q;
        max = worst(max, (f1 - f2).abs());
    }
    Ok(CheckResult {
        name: "remainder_independent_of_p".into(),
        cases: draws,
        max_residual: max,
        tol,
    })
}

/// Decoupled gradient at the red-line weight equals the scaled coupled gradient.
pub fn check_redline(seed: u64, draws: usize, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0;
    for _ in 0..draws {
        let m = rng.random_range(3..=10);
        let y = rng.random_range(0..m);
        let lambda1 = rng.random_range(0.0..=1.0);
        let p = random_prediction(&mut rng, m);
        let q = random_target(&mut rng, m, y);
        max = worst(max, verify_redline(&p, &q, y, lambda1, tol)?.max_residual);
    }
    Ok(CheckResult {
        name: "redline".into(),
        cases: draws,
        max_residual: max,
        tol,
    })
}

fn tensors_mut(params: &mut ModelParams) -> [&mut [f64]; 5] {
    [
        params.item_in.as_mut_slice(),
        params.item_out.as_mut_slice(),
        params.user_emb.as_mut_slice(),
        params.proj.as_mut_slice(),
        params.bias.as_mut_slice(),
    ]
}

fn analytic_entry(grads: &Gradients, tensor: usize, idx: usize, d: usize) -> f64 {
    let sparse = |rows: &std::collections::BTreeMap<usize, Vec<f64>>| rows.get(&(idx / d)).map_or(0.0, |r| r[idx % d]);
    match tensor {
        0 => sparse(&grads.item_in),
        1 => grads.item_out.as_slice()[idx],
        2 => sparse(&grads.user_emb),
        3 => grads.proj.as_slice()[idx],
        _ => grads.bias[idx],
    }
}

/// Largest relative error between backprop and central differences over every parameter.
pub fn model_gradient_residual(params: &ModelParams, sample: &Sample, q: &SoftTarget, loss: &LossConfig) -> Result<f64> {
    let cache = forward_cached(params, sample)?;
    let out = loss.evaluate(&score_and_softmax(params, &cache.repr), q)?;
    let grads = backward(params, sample, &out.grad_logits)?;
    let eval = |p: &ModelParams| -> Result<f64> {
        let c = forward_cached(p, sample)?;
        Ok(loss.evaluate(&score_and_softmax(p, &c.repr), q)?.loss)
    };
    let mut work = params.clone();
    let mut max: f64 = 0.0;
    for tensor in 0..5 {
        let len = tensors_mut(&mut work)[tensor].len();
        for idx in 0..len {
            let orig = tensors_mut(&mut work)[tensor][idx];
            tensors_mut(&mut work)[tensor][idx] = orig + FD_STEP;
            let up = eval(&work)?;
            tensors_mut(&mut work)[tensor][idx] = orig - FD_STEP;
            let down = eval(&work)?;
            tensors_mut(&mut work)[tensor][idx] = orig;
            let numeric = (up - down) / (2.0 * FD_STEP);
            let analytic = analytic_entry(&grads, tensor, idx, params.dim);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            max = worst(max, rel);
        }
    }
    Ok(max)
}

pub const ALL_MODES: [LossMode; 4] = [LossMode::Ce, LossMode::Ls, LossMode::Coupled, LossMode::Decoupled];
pub const ALL_KINDS: [ModelKind; 2] = [ModelKind::DotFactorization, ModelKind::MeanPoolEncoder];

/// Finite-difference check of every loss mode under `kind` on small random models.
pub fn check_model_gradients(kind: ModelKind, mode: LossMode, seed: u64, instances: usize, tol: f64) -> Result<CheckResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut max = 0.0;
    for i in 0..instances {
        let m = rng.random_range(3..=10);
        let d = rng.random_range(1..=8);
        let users = 3;
        let params = init_params(kind, m, users, d, seed.wrapping_add(i as u64));
        let len = rng.random_range(1..=5);
        let sample = Sample {
            sample_id: 0,
            user: rng.random_range(0..users),
            history: (0..len).map(|_| rng.random_range(0..m)).collect(),
            target: rng.random_range(0..m),
        };
        let q = if mode == LossMode::Ce {
            SoftTarget::one_hot(sample.target)
        } else {
            random_target(&mut rng, m, sample.target)
        };
        let loss = LossConfig {
            mode,
            lambda1: rng.random_range(0.05..0.95),
            lambda2: rng.random_range(0.05..0.95),
            ..LossConfig::default()
        };
        max = worst(max, model_gradient_residual(&params, &sample, &q, &loss)?);
    }
    Ok(CheckResult {
        name: format!("grad_{kind:?}_{mode:?}").to_lowercase(),
        cases: instances,
        max_residual: max,
        tol,
    })
}

/// Loss identities over `draws` random instances, plus model gradient checks.
pub fn run_suite(seed: u64, draws: usize, tol: f64) -> Result<SuiteReport> {
    let mut checks = vec![
        check_decomposition(seed, draws, tol)?,
        check_remainder_constant(seed ^ 1, draws, tol)?,
        check_redline(seed ^ 2, draws, tol)?,
    ];
    for kind in ALL_KINDS {
        for mode in ALL_MODES {
            checks.push(check_model_gradients(kind, mode, seed ^ 3, 5, GRAD_REL_TOL)?);
        }
    }
    Ok(SuiteReport { checks })
}

//! Finite-difference checks behind `tenrec gradcheck`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::kempf_ness::normalize_coordinates;
use crate::metric::SimilarityMatrices;
use crate::solver::objective::loss_residual;
use crate::solver::{
    augmented_lagrangian, grad_lagrangian_wrt, lower_gradients, lower_objective, Coupling, LossSupport, Problem,
    SolverConfig, SolverState, Variable,
};
use crate::tensor::{DenseTensor, ObservationMask, RealMatrix};

/// Largest relative error seen for one gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub name: String,
    pub max_rel_err: f64,
}

fn gauss_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

fn gauss_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    RealMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random small problem and state with nonzero duals and one coupling on mode 0.
pub fn random_instance(seed: u64) -> Result<(Problem, SolverState, SolverConfig)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(2..=5)).collect();
    let ranks: Vec<usize> = dims.iter().map(|&n| rng.random_range(1..=n.min(3))).collect();
    let x = gauss_tensor(&dims, &mut rng);
    let total: usize = dims.iter().product();
    let mut cells: Vec<usize> = (0..total).filter(|_| rng.random::<f64>() < 0.6).collect();
    if cells.is_empty() {
        cells.push(0);
    }
    let mask = ObservationMask::from_linear(&dims, cells)?;
    let sims = SimilarityMatrices::new(
        dims.iter()
            .map(|&n| {
                let b = gauss_matrix(n, n, &mut rng);
                b.transpose() * b / n as f64
            })
            .collect(),
    )?;
    let matrix = gauss_matrix(3, dims[0], &mut rng);
    let problem = Problem::new(&x, &mask, sims, LossSupport::Observed)?.with_coupling(Coupling {
        mode: 0,
        matrix,
        weight: 0.7,
    })?;
    // Column norms stay near one: a vanishing factor leaves X̂ with no gradient to check, a large one
    // inflates the residual terms until roundoff swamps the other blocks.
    let factors = dims
        .iter()
        .zip(&ranks)
        .map(|(&n, &k)| {
            let mut v = gauss_matrix(n, k, &mut rng);
            for mut col in v.column_iter_mut() {
                let target = rng.random_range(0.6..1.0);
                col *= target / col.norm().max(f64::MIN_POSITIVE);
            }
            v
        })
        .collect();
    let core = gauss_tensor(&ranks, &mut rng);
    let xhat = gauss_tensor(&dims, &mut rng);
    let mut state = SolverState::from_parts(&problem, factors, core, xhat)?;
    state.dual_a = gauss_tensor(&dims, &mut rng).scaled(0.3);
    for y in state.dual_b.iter_mut() {
        *y = gauss_matrix(y.nrows(), y.ncols(), &mut rng) * 0.3;
    }
    for u in state.coupling_factors.iter_mut() {
        *u = gauss_matrix(u.nrows(), u.ncols(), &mut rng);
    }
    state.z = gauss_tensor(&dims, &mut rng);
    let mut config = SolverConfig::new(ranks, seed);
    config.lambda = (0..3).map(|_| rng.random_range(0.05..1.0)).collect();
    config.rho = rng.random_range(0.5..2.0);
    Ok((problem, state, config))
}

/// Five-point central differences with step `1e-3 (1 + |x|)`.
///
/// The fourth-order stencil allows a step large enough that roundoff in `f`
/// stays small next to gradients many orders below `|f|`.
pub fn central_diff(x0: &[f64], mut f: impl FnMut(&[f64]) -> Result<f64>) -> Result<Vec<f64>> {
    let mut x = x0.to_vec();
    let mut out = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let h = 1e-3 * (1.0 + x0[i].abs());
        let mut at = |t: f64| {
            x[i] = x0[i] + t * h;
            f(&x)
        };
        let (p1, m1, p2, m2) = (at(1.0)?, at(-1.0)?, at(2.0)?, at(-2.0)?);
        x[i] = x0[i];
        out.push((8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h));
    }
    Ok(out)
}

/// `max |a - n| / max(max |n|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic.iter().zip(numeric).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn record(out: &mut Vec<GradCheck>, name: String, err: f64) {
    match out.iter_mut().find(|g| g.name == name) {
        Some(g) => g.max_rel_err = g.max_rel_err.max(err),
        None => out.push(GradCheck { name, max_rel_err: err }),
    }
}

/// Every analytic gradient against central differences on `instances` random states.
pub fn gradient_suite(seed: u64, instances: usize) -> Result<Vec<GradCheck>> {
    let mut out = Vec::new();
    for i in 0..instances {
        let (problem, state, config) = random_instance(seed.wrapping_mul(1000).wrapping_add(i as u64))?;
        let k = state.order();

        let (gx, gv) = lower_gradients(&state, problem.sims(), &config.lambda)?;
        let lower = |var: Variable, x: &[f64]| -> Result<f64> {
            let mut s = state.clone();
            s.set_block(var, x)?;
            lower_objective(&s, problem.sims(), &config.lambda)
        };
        let num = central_diff(&state.block(Variable::Xhat)?, |x| lower(Variable::Xhat, x))?;
        record(&mut out, "lower X̂".into(), max_rel_err(gx.data(), &num));
        for (l, g) in gv.iter().enumerate() {
            let num = central_diff(&state.block(Variable::Factor(l))?, |x| lower(Variable::Factor(l), x))?;
            record(&mut out, format!("lower V{}", l + 1), max_rel_err(g.as_slice(), &num));
        }

        let mut vars: Vec<Variable> = (0..k).map(Variable::Factor).collect();
        vars.extend([Variable::Core, Variable::Xhat, Variable::Z, Variable::CouplingFactor(0)]);
        for var in vars {
            let analytic = grad_lagrangian_wrt(&problem, &state, &config, var)?;
            let num = central_diff(&state.block(var)?, |x| {
                let mut s = state.clone();
                s.set_block(var, x)?;
                if var == Variable::Z {
                    return Ok(0.5 * loss_residual(&problem, &s.z).norm_sq());
                }
                Ok(augmented_lagrangian(&problem, &s, &config)?.eq16)
            })?;
            let name = match var {
                Variable::Factor(l) => format!("lagrangian V{}", l + 1),
                Variable::Core => "lagrangian G".into(),
                Variable::Xhat => "lagrangian X̂".into(),
                Variable::Z => "loss Z".into(),
                Variable::CouplingFactor(c) => format!("lagrangian U{}", c + 1),
            };
            record(&mut out, name, max_rel_err(&analytic, &num));
        }
    }
    Ok(out)
}

/// Largest derivative of the normalized objective along determinant-one
/// directions at the output of [`normalize_coordinates`], relative to the
/// objective, over `instances` random `3 x 3 x 3` tensors.
pub fn kempf_ness_stationarity(seed: u64, instances: usize) -> Result<f64> {
    let mut worst = 0.0f64;
    for i in 0..instances {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1000).wrapping_add(i as u64));
        let x = gauss_tensor(&[3, 3, 3], &mut rng);
        let res = normalize_coordinates(&[x], 1e-14, 1000)?;
        let y = &res.normalized[0];
        let phi0 = y.norm_sq();
        for mode in 0..3 {
            for (a, b) in (0..3).flat_map(|a| (0..3).map(move |b| (a, b))) {
                if a == b && a == 2 {
                    continue;
                }
                // I + tE_ab (a ≠ b) and diag(e^t at a, e^-t at 2) both have determinant one.
                let step = |t: f64| {
                    let mut m = RealMatrix::identity(3, 3);
                    if a == b {
                        m[(a, a)] = t.exp();
                        m[(2, 2)] = (-t).exp();
                    } else {
                        m[(a, b)] = t;
                    }
                    y.mode_product(&m, mode).map(|t| t.norm_sq())
                };
                let h = 1e-5;
                let d = (step(h)? - step(-h)?) / (2.0 * h);
                worst = worst.max(d.abs() / phi0);
            }
        }
    }
    Ok(worst)
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::harness::fit_rse_cells;
use crate::kempf_ness::tensor_metric_sweep;
use crate::metric::{MetricFamily, SimilarityMatrices};
use crate::tensor::{hosvd, DenseTensor, ObservationMask, RealMatrix, TuckerModel};

use super::config::SolverConfig;
use super::objective::{check_state, lower_gradients, Evaluation, LagrangianValue};
use super::state::{Coupling, Problem, SolverState, Variable};
use super::trace::{ConvergenceTrace, TraceRecord};

const POWER_ITERS: usize = 12;
const MAX_BACKTRACKS: usize = 40;
const PROX_SHRINK: f64 = 0.5;
const PROX_FLOOR: f64 = 1e-8;
/// Relative slack when comparing Lagrangian values across a block update.
const DESCENT_SLACK: f64 = 1e-12;

/// Output of [`solve`], in the caller's units.
#[derive(Clone, Debug)]
pub struct Solution {
    pub model: TuckerModel,
    pub xhat: DenseTensor,
    /// Observed entries from the input, model values elsewhere.
    pub completed: DenseTensor,
    pub metric: MetricFamily,
    pub trace: ConvergenceTrace,
    pub coupling_factors: Vec<RealMatrix>,
    pub converged: bool,
    /// Power of two the data was divided by internally.
    pub scale: f64,
}

/// Callback invoked after every trace record with the (normalized) problem and state.
pub type Observer<'o> = dyn FnMut(&Problem, &SolverState, &TraceRecord) + 'o;

/// Completes and decomposes `x` from its entries on `mask`.
///
/// `sims` defaults to Gaussian-kernel similarities of the zero-filled data,
/// each divided by its size.
pub fn solve(
    x: &DenseTensor,
    mask: &ObservationMask,
    sims: Option<&SimilarityMatrices>,
    config: &SolverConfig,
) -> Result<Solution> {
    solve_with_observer(x, mask, sims, config, &mut |_, _, _| {})
}

pub fn solve_with_observer(
    x: &DenseTensor,
    mask: &ObservationMask,
    sims: Option<&SimilarityMatrices>,
    config: &SolverConfig,
    observer: &mut Observer<'_>,
) -> Result<Solution> {
    solve_coupled_with_observer(x, mask, sims, Vec::new(), config, observer)
}

/// Power of two closest to the norm, so rescaling is exact.
fn power_of_two_scale(norm: f64) -> f64 {
    if norm > 0.0 && norm.is_finite() {
        2f64.powi(norm.log2().round() as i32)
    } else {
        1.0
    }
}

/// Divides each kernel matrix by its size so `λ_l Tr(L S_l L)` stays on the
/// scale of the data term whatever `N_l` is.
fn unit_trace(sims: SimilarityMatrices) -> Result<SimilarityMatrices> {
    SimilarityMatrices::new(sims.mats().iter().map(|s| s / s.nrows() as f64).collect())
}

pub(crate) fn solve_coupled_with_observer(
    x: &DenseTensor,
    mask: &ObservationMask,
    sims: Option<&SimilarityMatrices>,
    couplings: Vec<Coupling>,
    config: &SolverConfig,
    observer: &mut Observer<'_>,
) -> Result<Solution> {
    config.validate(x.dims())?;
    if mask.is_empty() {
        return Err(Error::EmptyMask);
    }
    if !x.is_finite() {
        return Err(Error::NonFinite("input tensor".into()));
    }
    let zero_filled = mask.zero_fill(x)?;
    let scale = power_of_two_scale(zero_filled.frobenius_norm());
    let xs = zero_filled.scaled(1.0 / scale);
    let sims = match sims {
        Some(s) => s.clone(),
        None => unit_trace(SimilarityMatrices::from_tensor(&xs)?)?,
    };
    let mut problem = Problem::new(&xs, mask, sims, config.loss_support)?;
    for c in couplings {
        let matrix = &c.matrix / scale;
        problem = problem.with_coupling(Coupling { matrix, ..c })?;
    }
    let mut state = initial_state(&problem, config)?;
    let eval_cells = config.eval_support.cells(mask);
    let mut trace = ConvergenceTrace::default();

    let record = |state: &SolverState, lv: &LagrangianValue| {
        let (fit, rse) = fit_rse_cells(x, &state.z.scaled(scale), eval_cells.as_deref());
        TraceRecord {
            iter: state.iteration,
            lagrangian: lv.eq14,
            loss: lv.loss,
            fit,
            rse,
            res_a: lv.res_a,
            res_b_max: lv.res_b_max,
            step_norm: 0.0,
            block_steps: Vec::new(),
            max_block_increase: 0.0,
            backtracks: 0,
        }
    };

    let lv0 = Evaluation::new(&problem, &state, &config.lambda).lagrangian(&state, config);
    let r0 = record(&state, &lv0);
    observer(&problem, &state, &r0);
    trace.records.push(r0);

    let k = state.order();
    let mut steps = StepSizes::default();
    let mut converged = false;
    for it in 1..=config.max_iters {
        state.iteration = it;
        let diverged = |stage: &str, state: &SolverState| Error::Diverged {
            iteration: it,
            stage: stage.to_string(),
            detail: state.summary(),
        };

        if let Some(every) = config.refresh_similarity_every {
            if (it - 1) % every == 0 && it > 1 {
                let sims = unit_trace(SimilarityMatrices::from_tensor(&problem.completed(&state.z))?)?;
                problem.set_sims(sims);
            }
        }

        let (xhat, metric) = update_metric_step(&problem, &state, config)?;
        state.xhat = xhat;
        state.metric = metric;
        if !state.xhat.is_finite() {
            return Err(diverged("metric", &state));
        }

        if (it - 1) % config.lipschitz_every == 0 {
            steps = StepSizes::estimate(&problem, &state, config)?;
        } else {
            steps.reset_fixed(config);
        }

        let mut stats = BlockStats::default();
        for l in 0..k {
            step_block(&problem, &mut state, config, Variable::Factor(l), &mut steps.factor[l], steps.adaptive_factor, &mut stats)?;
            if !state.factors[l].iter().all(|v| v.is_finite()) {
                return Err(diverged(&format!("factor {}", l + 1), &state));
            }
            for (c, cp) in problem.couplings().iter().enumerate() {
                if cp.mode == l {
                    state.coupling_factors[c] = update_coupling_factor(&problem, &state, c)?;
                }
            }
        }
        step_block(&problem, &mut state, config, Variable::Core, &mut steps.core, steps.adaptive_core, &mut stats)?;
        if !state.core.is_finite() {
            return Err(diverged("core", &state));
        }

        let z_new = state.model()?.reconstruct()?;
        let z_prev = std::mem::replace(&mut state.z, z_new);
        let dz = state.z.sub(&z_prev)?.frobenius_norm() / z_prev.frobenius_norm().max(f64::MIN_POSITIVE);

        let ev = Evaluation::new(&problem, &state, &config.lambda);
        let (a, b) = (ev.a().clone(), ev.b().to_vec());
        drop(ev);
        update_duals(&mut state, &a, &b, config.rho);
        if !state.is_finite() {
            return Err(diverged("duals", &state));
        }

        let lv = Evaluation::new(&problem, &state, &config.lambda).lagrangian(&state, config);
        let mut rec = record(&state, &lv);
        rec.step_norm = stats.rel_step;
        rec.block_steps = stats.steps;
        rec.max_block_increase = stats.max_increase;
        rec.backtracks = stats.backtracks;
        observer(&problem, &state, &rec);
        trace.records.push(rec);

        if dz < config.tol_rel {
            converged = true;
            break;
        }
    }

    let model = TuckerModel::new(state.core.scaled(scale), state.factors.clone())?;
    let completed = {
        let mut c = model.reconstruct()?;
        let (src, dst) = (x.data(), c.data_mut());
        for &i in mask.linear_indices() {
            dst[i] = src[i];
        }
        c
    };
    Ok(Solution {
        model,
        xhat: state.xhat.scaled(scale),
        completed,
        metric: state.metric.clone(),
        trace,
        coupling_factors: state.coupling_factors.iter().map(|u| u * scale).collect(),
        converged,
        scale,
    })
}

/// HOSVD of the zero-filled data, `X̂₀ = X x_k L_k` pinned, `Z₀ = X` zero-filled.
pub fn initial_state(problem: &Problem, config: &SolverConfig) -> Result<SolverState> {
    config.validate(problem.dims())?;
    let TuckerModel { core, factors } = hosvd(problem.data(), &config.ranks)?;
    let mut xhat = problem.data().clone();
    for (kk, v) in factors.iter().enumerate() {
        xhat = xhat.mode_product_unchecked(&v.transpose(), kk);
    }
    for (kk, v) in factors.iter().enumerate() {
        xhat = xhat.mode_product_unchecked(v, kk);
    }
    problem.pin(&mut xhat);
    let mut state = SolverState::from_parts(problem, factors, core, xhat)?;
    state.z = problem.data().clone();
    for c in 0..problem.couplings().len() {
        state.coupling_factors[c] = update_coupling_factor(problem, &state, c)?;
    }
    Ok(state)
}

/// Whitening sweep of the learned metric, then one gradient step on the free
/// entries of `X̂` against the lower-level objective with the factor metric
/// `L_k = V_k V_kᵀ`, step `1 / ∏‖L_k‖²`.
pub fn update_metric_step(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<(DenseTensor, MetricFamily)> {
    check_state(problem, state, config)?;
    let metric = tensor_metric_sweep(&state.xhat, &state.metric, problem.sims(), &config.lambda)
        .map_err(|e| Error::Conditioning(format!("metric step at iteration {}: {e}", state.iteration)))?;
    let lip: f64 = state
        .factors
        .iter()
        .map(|v| crate::linalg::spectral_norm(v).powi(4))
        .product();
    let mut xhat = state.xhat.clone();
    if lip > 0.0 && lip.is_finite() {
        let (grad, _) = lower_gradients(state, problem.sims(), &config.lambda)?;
        xhat.axpy(-1.0 / lip, &grad);
    }
    problem.pin(&mut xhat);
    Ok((xhat, metric))
}

/// One linearized proximal step `prox_J(V_l - ∇/ϱ, ϱ)` on factor `l`.
pub fn update_factor(problem: &Problem, state: &SolverState, config: &SolverConfig, l: usize, prox: f64) -> Result<RealMatrix> {
    check_state(problem, state, config)?;
    if l >= state.order() {
        return Err(Error::ModeOutOfRange {
            mode: l,
            order: state.order(),
        });
    }
    let grad = Evaluation::new(problem, state, &config.lambda).grad_factor(problem, state, config.rho, l);
    config.factor_penalties[l].prox_matrix(&(&state.factors[l] - grad / prox), prox)
}

/// One linearized proximal step on the core.
pub fn update_core(problem: &Problem, state: &SolverState, config: &SolverConfig, prox: f64) -> Result<DenseTensor> {
    check_state(problem, state, config)?;
    let grad = Evaluation::new(problem, state, &config.lambda).grad_core();
    let mut u = state.core.clone();
    u.axpy(-1.0 / prox, &grad);
    config.core_penalty.prox_tensor(&u, prox)
}

/// `U = M V (VᵀV)⁻¹`, the exact minimizer of the coupled-matrix loss.
pub fn update_coupling_factor(problem: &Problem, state: &SolverState, c: usize) -> Result<RealMatrix> {
    let cp = problem
        .couplings()
        .get(c)
        .ok_or_else(|| Error::InvalidArgument(format!("no coupling with index {c}")))?;
    let v = &state.factors[cp.mode];
    let mv = &cp.matrix * v;
    let gram = v.transpose() * v;
    if let Some(ch) = gram.clone().cholesky() {
        return Ok(ch.solve(&mv.transpose()).transpose());
    }
    let eps = 1e-12 * gram.amax().max(f64::MIN_POSITIVE);
    let pinv = gram
        .pseudo_inverse(eps)
        .map_err(|e| Error::Numeric(format!("coupling least squares: {e}")))?;
    Ok(mv * pinv)
}

/// `Y₁ ← Y₁ - ρA`, `Y₂ₗ ← Y₂ₗ - ρBₗ`.
pub fn update_duals(state: &mut SolverState, a: &DenseTensor, b: &[RealMatrix], rho: f64) {
    state.dual_a.axpy(-rho, a);
    for (y, r) in state.dual_b.iter_mut().zip(b) {
        *y -= r * rho;
    }
}

#[derive(Default)]
struct BlockStats {
    steps: Vec<f64>,
    rel_step: f64,
    max_increase: f64,
    backtracks: usize,
}

#[derive(Default)]
struct StepSizes {
    factor: Vec<f64>,
    core: f64,
    adaptive_factor: bool,
    adaptive_core: bool,
}

impl StepSizes {
    fn estimate(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<Self> {
        let k = state.order();
        let factor = match &config.prox_factor {
            Some(p) => p.clone(),
            None => (0..k)
                .map(|l| estimate_prox(problem, state, config, Variable::Factor(l)))
                .collect::<Result<_>>()?,
        };
        let core = match config.prox_core {
            Some(p) => p,
            None => estimate_prox(problem, state, config, Variable::Core)?,
        };
        Ok(Self {
            factor,
            core,
            adaptive_factor: config.prox_factor.is_none(),
            adaptive_core: config.prox_core.is_none(),
        })
    }

    /// User-supplied parameters restart from their configured values each iteration.
    fn reset_fixed(&mut self, config: &SolverConfig) {
        if let Some(p) = &config.prox_factor {
            self.factor.clone_from(p);
        }
        if let Some(p) = config.prox_core {
            self.core = p;
        }
    }
}

fn estimate_prox(problem: &Problem, state: &SolverState, config: &SolverConfig, var: Variable) -> Result<f64> {
    let lip = lipschitz_estimate(problem, state, config, var)?;
    Ok((config.lipschitz_safety * lip).max(PROX_FLOOR))
}

fn block_gradient(problem: &Problem, state: &SolverState, config: &SolverConfig, var: Variable) -> Vec<f64> {
    let ev = Evaluation::new(problem, state, &config.lambda);
    match var {
        Variable::Factor(l) => ev.grad_factor(problem, state, config.rho, l).as_slice().to_vec(),
        Variable::Core => ev.grad_core().into_data(),
        Variable::Xhat => ev.grad_xhat(state, config.rho).into_data(),
        Variable::CouplingFactor(c) => ev.grad_coupling(problem, c).as_slice().to_vec(),
        Variable::Z => super::objective::loss_residual(problem, &state.z).into_data(),
    }
}

/// Power iteration on central-difference Hessian-vector products of one block.
pub fn lipschitz_estimate(problem: &Problem, state: &SolverState, config: &SolverConfig, var: Variable) -> Result<f64> {
    check_state(problem, state, config)?;
    let x0 = state.block(var)?;
    let tag = match var {
        Variable::Factor(l) => l as u64,
        Variable::Core => 1000,
        Variable::Xhat => 1001,
        Variable::Z => 1002,
        Variable::CouplingFactor(c) => 2000 + c as u64,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (tag << 32) ^ state.iteration as u64);
    let mut v: Vec<f64> = (0..x0.len()).map(|_| StandardNormal.sample(&mut rng)).collect();
    let norm = |u: &[f64]| u.iter().map(|a| a * a).sum::<f64>().sqrt();
    let nv = norm(&v);
    v.iter_mut().for_each(|a| *a /= nv);
    let h = 1e-5 * (1.0 + norm(&x0) / (x0.len() as f64).sqrt());
    let mut work = state.clone();
    let mut est = 0.0;
    for _ in 0..POWER_ITERS {
        let shifted = |sign: f64| x0.iter().zip(&v).map(|(a, d)| a + sign * h * d).collect::<Vec<_>>();
        work.set_block(var, &shifted(1.0))?;
        let gp = block_gradient(problem, &work, config, var);
        work.set_block(var, &shifted(-1.0))?;
        let gm = block_gradient(problem, &work, config, var);
        let hv: Vec<f64> = gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect();
        est = norm(&hv);
        if !est.is_finite() {
            return Err(Error::NonFinite(format!("Lipschitz estimate for {var:?}")));
        }
        if est == 0.0 {
            break;
        }
        v = hv.into_iter().map(|a| a / est).collect();
    }
    Ok(est)
}

fn full_lagrangian(problem: &Problem, state: &SolverState, config: &SolverConfig) -> f64 {
    Evaluation::new(problem, state, &config.lambda).lagrangian(state, config).eq16
}

/// Prox-gradient step on one block, doubling `ϱ` until the Lagrangian does
/// not rise. Estimated parameters are first halved so they can track a
/// shrinking local curvature between Lipschitz refreshes.
fn step_block(
    problem: &Problem,
    state: &mut SolverState,
    config: &SolverConfig,
    var: Variable,
    prox: &mut f64,
    adaptive: bool,
    stats: &mut BlockStats,
) -> Result<()> {
    let before = full_lagrangian(problem, state, config);
    let old = state.block(var)?;
    if adaptive {
        *prox = (*prox * PROX_SHRINK).max(PROX_FLOOR);
    }
    let mut trial = state.clone();
    for _ in 0..MAX_BACKTRACKS {
        let cand = match var {
            Variable::Factor(l) => update_factor(problem, state, config, l, *prox)?.as_slice().to_vec(),
            Variable::Core => update_core(problem, state, config, *prox)?.into_data(),
            _ => return Err(Error::InvalidArgument(format!("{var:?} is not a proximal block"))),
        };
        if cand.iter().any(|v| !v.is_finite()) {
            *prox *= 2.0;
            stats.backtracks += 1;
            continue;
        }
        trial.set_block(var, &cand)?;
        let after = full_lagrangian(problem, &trial, config);
        if after <= before + DESCENT_SLACK * before.abs().max(1.0) {
            let step = old.iter().zip(&cand).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let scale = old.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            stats.steps.push(step);
            stats.rel_step = stats.rel_step.max(step / scale);
            stats.max_increase = stats.max_increase.max(after - before);
            *state = trial;
            return Ok(());
        }
        *prox *= 2.0;
        stats.backtracks += 1;
    }
    stats.steps.push(0.0);
    Ok(())
}

//! Residuals, Lagrangian values and their exact gradients.
//!
//! With `L_l = V_l V_lᵀ` and `Q_l = L_l²`:
//!
//! - `M = X̂ x_k L_k`, `A = M x_k L_k = X̂ x_k Q_k`
//! - `C_l = W_(l) W_(l)ᵀ` with `W = X̂ x_{k≠l} L_k`
//! - `B_l = (L_l C_l + λ_l L_l S_l) V_l`
//!
//! The engine never forms `L_l` against a full tensor: every product with
//! `L_l` or `Q_l` is split into two thin products with `V_lᵀ` and `V_l`.

use crate::error::{Error, Result};
use crate::metric::{metric_from_factors, MetricFamily, SimilarityMatrices};
use crate::tensor::{DenseTensor, RealMatrix};

use super::config::SolverConfig;
use super::state::{Problem, SolverState, Variable};

/// `x x_k m` for each `(k, m)` in order.
fn products<'a>(x: &DenseTensor, ops: impl IntoIterator<Item = (usize, &'a RealMatrix)>) -> DenseTensor {
    let mut out: Option<DenseTensor> = None;
    for (k, m) in ops {
        out = Some(out.as_ref().unwrap_or(x).mode_product_unchecked(m, k));
    }
    out.unwrap_or_else(|| x.clone())
}

/// Auxiliary tensor `M = X̂ x_1 L_1 ... x_K L_K`.
pub fn compute_m(xhat: &DenseTensor, metric: &MetricFamily) -> Result<DenseTensor> {
    metric.apply(xhat)
}

/// Factor metric `{V_l V_lᵀ}` of a state.
pub fn factor_metric(state: &SolverState) -> Result<MetricFamily> {
    let vt: Vec<RealMatrix> = state.factors.iter().map(|v| v.transpose()).collect();
    metric_from_factors(&vt)
}

/// `A = M x_1 L_1 ... x_K L_K` with the factor metric.
pub fn residual_a(state: &SolverState) -> Result<DenseTensor> {
    let metric = factor_metric(state)?;
    metric.apply(&compute_m(&state.xhat, &metric)?)
}

/// `B_l = [M_(l) (⊗_{i≠l} L_i) X̂_(l)ᵀ + λ L_l S_l] V_l`.
pub fn residual_b(state: &SolverState, sims: &SimilarityMatrices, lambda: f64, mode: usize) -> Result<RealMatrix> {
    state.xhat.check_mode(mode)?;
    sims.check_dims(state.xhat.dims())?;
    let metric = factor_metric(state)?;
    let l = metric.mats();
    let m = compute_m(&state.xhat, &metric)?;
    let m_other = products(&m, l.iter().enumerate().filter(|(k, _)| *k != mode));
    let inner = m_other.mode_contract(&state.xhat, mode)? + &l[mode] * &sims.mats()[mode] * lambda;
    Ok(inner * &state.factors[mode])
}

/// `½‖X̂ x_k L_k‖² + Σ λ_l Tr(L_l S_l L_lᵀ)` for an arbitrary metric family.
pub fn lower_objective_with(
    xhat: &DenseTensor,
    metric: &MetricFamily,
    sims: &SimilarityMatrices,
    lambda: &[f64],
) -> Result<f64> {
    sims.check_dims(xhat.dims())?;
    let m = compute_m(xhat, metric)?;
    let reg: f64 = metric
        .mats()
        .iter()
        .zip(sims.mats())
        .zip(lambda)
        .map(|((l, s), &lam)| lam * (l * s * l.transpose()).trace())
        .sum();
    Ok(0.5 * m.norm_sq() + reg)
}

/// Gradient of [`lower_objective_with`] in `X̂`: `X̂ x_k L_kᵀ L_k`.
pub fn lower_gradient_xhat_with(xhat: &DenseTensor, metric: &MetricFamily) -> Result<DenseTensor> {
    metric.check_dims(xhat.dims())?;
    let grams = metric.grams();
    Ok(products(xhat, grams.iter().enumerate()))
}

/// Lower-level objective with the factor metric `L_l = V_l V_lᵀ`.
pub fn lower_objective(state: &SolverState, sims: &SimilarityMatrices, lambda: &[f64]) -> Result<f64> {
    lower_objective_with(&state.xhat, &factor_metric(state)?, sims, lambda)
}

/// Gradients of [`lower_objective`] in `X̂` and in each `V_l`.
pub fn lower_gradients(
    state: &SolverState,
    sims: &SimilarityMatrices,
    lambda: &[f64],
) -> Result<(DenseTensor, Vec<RealMatrix>)> {
    sims.check_dims(state.xhat.dims())?;
    let fac = Factors::new(&state.factors);
    let p = compressed_all_but(&state.xhat, &fac);
    let grad_x = expand_q(&p[0].mode_product_unchecked(&fac.vt[0], 0), &fac);
    let grad_v = (0..fac.order())
        .map(|l| {
            let c = gram_of(&p[l], &fac, l);
            let lm = &fac.l[l];
            let s = &sims.mats()[l];
            let g = lm * c + (lm * s + s * lm) * lambda[l];
            (&g + g.transpose()) * &fac.v[l]
        })
        .collect();
    Ok((grad_x, grad_v))
}

/// Values of the augmented Lagrangian in both of its forms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LagrangianValue {
    /// `L(Z;X) + J - ⟨Y, r⟩ + (ρ/2)‖r‖²` (plus coupled-matrix losses).
    pub eq14: f64,
    /// `L(Z;X) + J + (ρ/2)‖r - Y/ρ‖²` (plus coupled-matrix losses).
    pub eq16: f64,
    /// Tensor data-fit loss at `Z = G x V`.
    pub loss: f64,
    pub coupling_loss: f64,
    pub penalty: f64,
    /// `‖Y‖² / (2ρ)`, the gap `eq16 - eq14`.
    pub dual_constant: f64,
    pub res_a: f64,
    pub res_b_max: f64,
}

pub fn augmented_lagrangian(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<LagrangianValue> {
    check_state(problem, state, config)?;
    Ok(Evaluation::new(problem, state, &config.lambda).lagrangian(state, config))
}

/// Penalty part `J₁(G) + Σ J₂ₗ(V_l)`.
pub fn penalty_value(state: &SolverState, config: &SolverConfig) -> f64 {
    config.core_penalty.value_tensor(&state.core)
        + state
            .factors
            .iter()
            .zip(&config.factor_penalties)
            .map(|(v, p)| p.value_matrix(v))
            .sum::<f64>()
}

/// Gradient of the smooth part of the Lagrangian in one block.
///
/// `Z` is tied to `G x V` everywhere except for [`Variable::Z`], which
/// differentiates the loss in `Z` alone at the stored `state.z`.
pub fn grad_lagrangian_wrt(problem: &Problem, state: &SolverState, config: &SolverConfig, var: Variable) -> Result<Vec<f64>> {
    check_state(problem, state, config)?;
    match var {
        Variable::Factor(l) if l >= state.order() => {
            return Err(Error::ModeOutOfRange {
                mode: l,
                order: state.order(),
            })
        }
        Variable::CouplingFactor(c) if c >= problem.couplings().len() => {
            return Err(Error::InvalidArgument(format!("no coupling with index {c}")))
        }
        Variable::Z => return Ok(loss_residual(problem, &state.z).into_data()),
        _ => {}
    }
    let ev = Evaluation::new(problem, state, &config.lambda);
    Ok(match var {
        Variable::Factor(l) => ev.grad_factor(problem, state, config.rho, l).as_slice().to_vec(),
        Variable::Core => ev.grad_core().into_data(),
        Variable::Xhat => ev.grad_xhat(state, config.rho).into_data(),
        Variable::CouplingFactor(c) => ev.grad_coupling(problem, c).as_slice().to_vec(),
        Variable::Z => unreachable!(),
    })
}

/// Residuals `A` and `B_l` through the factored evaluation path.
pub fn residuals(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<(DenseTensor, Vec<RealMatrix>)> {
    check_state(problem, state, config)?;
    let ev = Evaluation::new(problem, state, &config.lambda);
    Ok((ev.a, ev.b))
}

pub(crate) fn check_state(problem: &Problem, state: &SolverState, config: &SolverConfig) -> Result<()> {
    let dims = problem.dims();
    config.validate(dims)?;
    let shapes_ok = state.factors.len() == dims.len()
        && state
            .factors
            .iter()
            .zip(dims)
            .zip(&config.ranks)
            .all(|((v, &n), &r)| v.nrows() == n && v.ncols() == r)
        && state.core.dims() == config.ranks.as_slice()
        && state.xhat.dims() == dims
        && state.z.dims() == dims
        && state.dual_a.dims() == dims
        && state.dual_b.len() == dims.len()
        && state.dual_b.iter().zip(&state.factors).all(|(y, v)| y.shape() == v.shape())
        && state.coupling_factors.len() == problem.couplings().len()
        && state
            .coupling_factors
            .iter()
            .zip(problem.couplings())
            .all(|(u, c)| u.nrows() == c.matrix.nrows() && u.ncols() == config.ranks[c.mode]);
    if !shapes_ok {
        return Err(Error::ShapeMismatch("solver state does not match problem and ranks".into()));
    }
    Ok(())
}

/// `Z - X` on the loss support, zero elsewhere.
pub(crate) fn loss_residual(problem: &Problem, z: &DenseTensor) -> DenseTensor {
    let x = problem.data().data();
    let zd = z.data();
    let mut e = vec![0.0; zd.len()];
    match problem.loss_cells() {
        Some(cells) => {
            for &i in cells {
                e[i] = zd[i] - x[i];
            }
        }
        None => {
            for (i, v) in e.iter_mut().enumerate() {
                *v = zd[i] - x[i];
            }
        }
    }
    DenseTensor::from_raw(z.dims().to_vec(), e)
}

/// Per-mode products derived from the factors.
pub(crate) struct Factors<'a> {
    pub v: &'a [RealMatrix],
    pub vt: Vec<RealMatrix>,
    /// `V_lᵀ V_l`
    pub gram: Vec<RealMatrix>,
    /// `V_l V_lᵀ V_l`
    pub vg: Vec<RealMatrix>,
    pub vgt: Vec<RealMatrix>,
    /// `V_l V_lᵀ`
    pub l: Vec<RealMatrix>,
}

impl<'a> Factors<'a> {
    pub fn new(v: &'a [RealMatrix]) -> Self {
        let vt: Vec<RealMatrix> = v.iter().map(|m| m.transpose()).collect();
        let gram: Vec<RealMatrix> = v.iter().zip(&vt).map(|(m, t)| t * m).collect();
        let vg: Vec<RealMatrix> = v.iter().zip(&gram).map(|(m, g)| m * g).collect();
        let vgt = vg.iter().map(|m| m.transpose()).collect();
        let l = v.iter().zip(&vt).map(|(m, t)| m * t).collect();
        Self { v, vt, gram, vg, vgt, l }
    }

    pub fn order(&self) -> usize {
        self.v.len()
    }
}

/// `x x_{k≠m} V_kᵀ` for every `m`.
fn compressed_all_but(x: &DenseTensor, fac: &Factors<'_>) -> Vec<DenseTensor> {
    let k = fac.order();
    (0..k)
        .map(|m| products(x, (0..k).filter(|&j| j != m).map(|j| (j, &fac.vt[j]))))
        .collect()
}

/// Expands a fully compressed tensor by `V_l V_lᵀ V_l` on every mode.
fn expand_q(core: &DenseTensor, fac: &Factors<'_>) -> DenseTensor {
    products(core, fac.vg.iter().enumerate())
}

/// `C_m = W_(m) W_(m)ᵀ` from `p = X̂ x_{k≠m} V_kᵀ`.
fn gram_of(p: &DenseTensor, fac: &Factors<'_>, m: usize) -> RealMatrix {
    let weighted = products(p, (0..fac.order()).filter(|&j| j != m).map(|j| (j, &fac.gram[j])));
    weighted.mode_contract_unchecked(p, m)
}

/// Everything needed to evaluate the Lagrangian and its gradients at one state.
pub(crate) struct Evaluation<'a> {
    fac: Factors<'a>,
    e: DenseTensor,
    loss: f64,
    /// `X̂ x_{k≠m} V_kᵀ`
    p: Vec<DenseTensor>,
    a: DenseTensor,
    /// `C_m + λ_m S_m`
    t: Vec<RealMatrix>,
    b: Vec<RealMatrix>,
    /// `M_c - U_c V_cᵀ`
    coupling_resid: Vec<RealMatrix>,
    coupling_loss: f64,
}

impl<'a> Evaluation<'a> {
    pub fn new(problem: &Problem, state: &'a SolverState, lambda: &[f64]) -> Self {
        let fac = Factors::new(&state.factors);
        let z = products(&state.core, fac.v.iter().enumerate());
        let e = loss_residual(problem, &z);
        let loss = 0.5 * e.norm_sq();
        let p = compressed_all_but(&state.xhat, &fac);
        let a = expand_q(&p[0].mode_product_unchecked(&fac.vt[0], 0), &fac);
        let t: Vec<RealMatrix> = (0..fac.order())
            .map(|m| gram_of(&p[m], &fac, m) + &problem.sims().mats()[m] * lambda[m])
            .collect();
        let b = (0..fac.order())
            .map(|m| &fac.v[m] * (&fac.vt[m] * (&t[m] * &fac.v[m])))
            .collect();
        let mut coupling_loss = 0.0;
        let coupling_resid = problem
            .couplings()
            .iter()
            .zip(&state.coupling_factors)
            .map(|(c, u)| {
                let r = &c.matrix - u * &fac.vt[c.mode];
                coupling_loss += 0.5 * c.weight * r.norm_squared();
                r
            })
            .collect();
        Self {
            fac,
            e,
            loss,
            p,
            a,
            t,
            b,
            coupling_resid,
            coupling_loss,
        }
    }

    pub fn a(&self) -> &DenseTensor {
        &self.a
    }

    pub fn b(&self) -> &[RealMatrix] {
        &self.b
    }

    pub fn lagrangian(&self, state: &SolverState, config: &SolverConfig) -> LagrangianValue {
        let rho = config.rho;
        let penalty = penalty_value(state, config);
        let base = self.loss + self.coupling_loss + penalty;
        let mut inner = self.a.dot(&state.dual_a);
        let mut res_sq = self.a.norm_sq();
        let mut dual_sq = state.dual_a.norm_sq();
        let mut shifted = self.ra(state, rho).norm_sq();
        let mut res_b_max: f64 = 0.0;
        for (b, y) in self.b.iter().zip(&state.dual_b) {
            inner += b.dot(y);
            let nb = b.norm_squared();
            res_sq += nb;
            res_b_max = res_b_max.max(nb.sqrt());
            dual_sq += y.norm_squared();
            shifted += (b * rho - y).norm_squared();
        }
        LagrangianValue {
            eq14: base - inner + 0.5 * rho * res_sq,
            eq16: base + shifted / (2.0 * rho),
            loss: self.loss,
            coupling_loss: self.coupling_loss,
            penalty,
            dual_constant: dual_sq / (2.0 * rho),
            res_a: self.a.frobenius_norm(),
            res_b_max,
        }
    }

    /// `ρA - Y₁`, the gradient of the smooth part in `A`.
    fn ra(&self, state: &SolverState, rho: f64) -> DenseTensor {
        let mut r = self.a.scaled(rho);
        r.axpy(-1.0, &state.dual_a);
        r
    }

    fn rb(&self, state: &SolverState, rho: f64, m: usize) -> RealMatrix {
        &self.b[m] * rho - &state.dual_b[m]
    }

    pub fn grad_core(&self) -> DenseTensor {
        products(&self.e, self.fac.vt.iter().enumerate())
    }

    pub fn grad_coupling(&self, problem: &Problem, c: usize) -> RealMatrix {
        let cp = &problem.couplings()[c];
        -(&self.coupling_resid[c] * &self.fac.v[cp.mode]) * cp.weight
    }

    pub fn grad_xhat(&self, state: &SolverState, rho: f64) -> DenseTensor {
        let fac = &self.fac;
        let k = fac.order();
        let ra = self.ra(state, rho);
        let mut g = expand_q(&products(&ra, fac.vt.iter().enumerate()), fac);
        for m in 0..k {
            let h = &fac.l[m] * self.rb(state, rho, m) * &fac.vt[m];
            let ht = &h + h.transpose();
            let w = products(&self.p[m], (0..k).filter(|&j| j != m).map(|j| (j, &fac.vg[j])));
            g.axpy(1.0, &w.mode_product_unchecked(&ht, m));
        }
        g
    }

    pub fn grad_factor(&self, problem: &Problem, state: &SolverState, rho: f64, l: usize) -> RealMatrix {
        let fac = &self.fac;
        let k = fac.order();
        let v = &fac.v[l];
        let lm = &fac.l[l];

        // Data fit through Z = G x V.
        let e_c = products(&self.e, (0..k).filter(|&j| j != l).map(|j| (j, &fac.vt[j])));
        let mut direct = e_c.mode_contract_unchecked(&state.core, l);

        // A = X̂ x_k Q_k: gradient in Q_l, then through Q_l = L_l².
        let ra = self.ra(state, rho);
        let ra_c = products(&ra, (0..k).filter(|&j| j != l).map(|j| (j, &fac.vgt[j])));
        let gq = ra_c.mode_contract_unchecked(&self.p[l], l);
        let mut gl = &gq * lm + lm * &gq;

        // B_l through its explicit L_l and V_l.
        let rb = self.rb(state, rho, l);
        direct += &self.t[l] * lm * &rb;
        gl += &rb * &fac.vt[l] * &self.t[l];

        // B_m, m ≠ l, through C_m.
        for m in (0..k).filter(|&m| m != l) {
            let h = &fac.l[m] * self.rb(state, rho, m) * &fac.vt[m];
            let ht = &h + h.transpose();
            let rest: Vec<usize> = (0..k).filter(|&j| j != m && j != l).collect();
            let d = products(&state.xhat, rest.iter().map(|&j| (j, &fac.vt[j])));
            let d1 = products(
                &d.mode_product_unchecked(&ht, m),
                rest.iter().map(|&j| (j, &fac.gram[j])),
            );
            gl += lm * d1.mode_contract_unchecked(&d, l);
        }

        for (cp, (u, r)) in problem
            .couplings()
            .iter()
            .zip(state.coupling_factors.iter().zip(&self.coupling_resid))
        {
            if cp.mode == l {
                direct -= r.transpose() * u * cp.weight;
            }
        }

        (&gl + gl.transpose()) * v + direct
    }
}

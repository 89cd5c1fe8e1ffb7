//! Coupled tensor-matrix recovery with a shared factor.
//!
//! A matrix `M` coupled to tensor mode `c` is modelled as `M ≈ U V_cᵀ`, where
//! `V_c` is the Tucker factor of that mode. Coupled matrices are stored
//! `J x N_c`, so they share their column dimension with the tensor.
//!
//! [`create_coupled`] draws CP-structured ground truth for simulations, and
//! [`factor_congruence`] scores recovered factors up to sign and permutation.

use std::fmt::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::solver::{solve_coupled_with_observer, ConvergenceTrace, Coupling, Observer, SolverConfig};
use crate::tensor::{DenseTensor, ObservationMask, RealMatrix, TuckerModel};

#[derive(Clone, Debug, PartialEq)]
pub struct CoupledMatrix {
    /// `J x N_c`
    pub matrix: RealMatrix,
    /// Zero-based tensor mode `c`.
    pub mode: usize,
}

/// Noiseless generating model of a simulated problem.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    /// One `N_k x R` factor per tensor mode.
    pub tensor_factors: Vec<RealMatrix>,
    /// The non-shared `J x R` factor of each coupled matrix.
    pub matrix_factors: Vec<RealMatrix>,
    pub tensor: DenseTensor,
    pub matrices: Vec<RealMatrix>,
}

#[derive(Clone, Debug)]
pub struct CoupledProblem {
    pub tensor: DenseTensor,
    pub couplings: Vec<CoupledMatrix>,
    pub mask: ObservationMask,
    pub ground_truth: Option<GroundTruth>,
}

impl CoupledProblem {
    pub fn new(tensor: DenseTensor, mask: ObservationMask, couplings: Vec<CoupledMatrix>) -> Result<Self> {
        if mask.dims() != tensor.dims() {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} vs tensor dims {:?}",
                mask.dims(),
                tensor.dims()
            )));
        }
        for (i, c) in couplings.iter().enumerate() {
            tensor.check_mode(c.mode)?;
            if c.matrix.ncols() != tensor.dims()[c.mode] {
                return Err(Error::ShapeMismatch(format!(
                    "coupled matrix {i} has {} columns, mode {} has size {}",
                    c.matrix.ncols(),
                    c.mode,
                    tensor.dims()[c.mode]
                )));
            }
            if couplings[..i].iter().any(|o| o.mode == c.mode) {
                return Err(Error::InvalidArgument(format!("mode {} is coupled twice", c.mode)));
            }
        }
        Ok(Self {
            tensor,
            couplings,
            mask,
            ground_truth: None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct CoupledSolution {
    pub tucker: TuckerModel,
    /// `U` of each coupling, `J x n_c`.
    pub extra_factors: Vec<RealMatrix>,
    pub trace: ConvergenceTrace,
    /// `‖M - U V_cᵀ‖ / ‖M‖` per coupling.
    pub matrix_residuals: Vec<f64>,
    pub converged: bool,
}

impl CoupledSolution {
    /// `U V_cᵀ` for coupling `i`, built from the tensor's own factor.
    pub fn matrix_estimate(&self, i: usize, problem: &CoupledProblem) -> Result<RealMatrix> {
        let (u, c) = self
            .extra_factors
            .get(i)
            .zip(problem.couplings.get(i))
            .ok_or_else(|| Error::InvalidArgument(format!("no coupling with index {i}")))?;
        Ok(u * self.tucker.factors[c.mode].transpose())
    }

    /// Completed iterations.
    pub fn iters(&self) -> usize {
        self.trace.last().map_or(0, |r| r.iter)
    }
}

/// Simulation description, as read from a spec file.
///
/// Mode lists are one-based: the first lists the tensor's size indices, each
/// later one is `[shared, other]` for a coupled matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimulationSpec {
    pub sizes: Vec<usize>,
    pub modes: Vec<Vec<usize>>,
    pub rank: usize,
    pub noise: f64,
    pub seed: u64,
}

impl SimulationSpec {
    pub const DEFAULT_RANK: usize = 3;

    pub fn new(sizes: Vec<usize>, modes: Vec<Vec<usize>>) -> Self {
        Self {
            sizes,
            modes,
            rank: Self::DEFAULT_RANK,
            noise: 0.0,
            seed: 0,
        }
    }

    /// Parses `key: value` lines with keys `sizes`, `modes`, `rank`, `noise`, `seed`.
    ///
    /// ```text
    /// sizes: 20 30 40 50
    /// modes: {[1 2 3], [1, 4]}
    /// ```
    pub fn parse(text: &str) -> Result<Self> {
        let (mut sizes, mut modes, mut spec) = (None, None, Self::new(Vec::new(), Vec::new()));
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (key, value) = line
                .split_once(':')
                .ok_or_else(|| err(format!("expected `key: value`, found `{line}`")))?;
            let value = value.trim();
            let bad = |what: &str| err(format!("bad {what} `{value}`"));
            match key.trim() {
                "sizes" => sizes = Some(parse_numbers(value).ok_or_else(|| bad("sizes"))?),
                "modes" => modes = Some(parse_mode_lists(value).ok_or_else(|| bad("modes"))?),
                "rank" => spec.rank = value.parse().map_err(|_| bad("rank"))?,
                "noise" => spec.noise = value.parse().map_err(|_| bad("noise"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                other => return Err(err(format!("unknown key `{other}`"))),
            }
        }
        spec.sizes = sizes.ok_or_else(|| Error::InvalidArgument("spec file has no `sizes`".into()))?;
        spec.modes = modes.ok_or_else(|| Error::InvalidArgument("spec file has no `modes`".into()))?;
        Ok(spec)
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let join = |v: &[usize]| v.iter().map(ToString::to_string).collect::<Vec<_>>().join(" ");
        let modes: Vec<String> = self.modes.iter().map(|m| format!("[{}]", join(m))).collect();
        format!(
            "sizes: {}\nmodes: {{{}}}\nrank: {}\nnoise: {}\nseed: {}\n",
            join(&self.sizes),
            modes.join(", "),
            self.rank,
            self.noise,
            self.seed
        )
    }

    pub fn generate(&self) -> Result<CoupledProblem> {
        create_coupled(&self.sizes, &self.modes, self.rank, self.noise, self.seed)
    }
}

fn parse_numbers<T: std::str::FromStr>(s: &str) -> Option<Vec<T>> {
    let s = s.trim();
    let s = s.strip_prefix('[').and_then(|t| t.strip_suffix(']')).unwrap_or(s);
    let v: Option<Vec<T>> = s
        .split(|c: char| c == ',' || c.is_whitespace())
        .filter(|t| !t.is_empty())
        .map(|t| t.parse().ok())
        .collect();
    v.filter(|v| !v.is_empty())
}

fn parse_mode_lists(s: &str) -> Option<Vec<Vec<usize>>> {
    let s = s.trim().trim_start_matches('{').trim_end_matches('}');
    let mut out = Vec::new();
    let mut rest = s;
    while let Some(open) = rest.find('[') {
        if !rest[..open].chars().all(|c| c == ',' || c.is_whitespace()) {
            return None;
        }
        let close = open + rest[open..].find(']')?;
        out.push(parse_numbers(&rest[open + 1..close])?);
        rest = &rest[close + 1..];
    }
    (rest.chars().all(|c| c == ',' || c.is_whitespace()) && !out.is_empty()).then_some(out)
}

/// Tensor modes and `(tensor mode, size index)` per coupling, zero-based.
fn resolve_modes(n_sizes: usize, modes: &[Vec<usize>]) -> Result<(Vec<usize>, Vec<(usize, usize)>)> {
    let bad = |msg: String| Error::InvalidArgument(format!("inconsistent mode lists: {msg}"));
    let tensor_modes = modes.first().ok_or_else(|| bad("no tensor mode list".into()))?;
    let mut used = vec![false; n_sizes];
    let mut claim = |one_based: usize| -> Result<usize> {
        if one_based == 0 || one_based > n_sizes {
            return Err(bad(format!("index {one_based} outside 1..={n_sizes}")));
        }
        let j = one_based - 1;
        if std::mem::replace(&mut used[j], true) {
            return Err(bad(format!("index {one_based} used twice")));
        }
        Ok(j)
    };
    if tensor_modes.len() < 2 {
        return Err(bad("the tensor needs at least two modes".into()));
    }
    let tensor: Vec<usize> = tensor_modes.iter().map(|&m| claim(m)).collect::<Result<_>>()?;
    let mut shared_seen = Vec::new();
    let mut couplings = Vec::new();
    for list in &modes[1..] {
        let &[shared, other] = list.as_slice() else {
            return Err(bad(format!("coupling list {list:?} must have two entries")));
        };
        let mode = tensor
            .iter()
            .position(|&j| j + 1 == shared)
            .ok_or_else(|| bad(format!("shared index {shared} is not a tensor mode")))?;
        if shared_seen.contains(&mode) {
            return Err(bad(format!("tensor mode {shared} is coupled twice")));
        }
        shared_seen.push(mode);
        couplings.push((mode, claim(other)?));
    }
    Ok((tensor, couplings))
}

/// Columns drawn standard normal, then scaled to unit norm.
fn unit_gaussian_columns(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    let mut m = RealMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(&mut *rng));
    for mut col in m.column_iter_mut() {
        let n = col.norm();
        if n > 0.0 {
            col /= n;
        }
    }
    m
}

fn superdiagonal(order: usize, rank: usize) -> DenseTensor {
    DenseTensor::from_fn(&vec![rank; order], |i| if i.iter().all(|&j| j == i[0]) { 1.0 } else { 0.0 })
}

/// Adds Gaussian noise scaled to `level · ‖clean‖`.
fn add_noise(clean: &[f64], level: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let noise: Vec<f64> = clean.iter().map(|_| StandardNormal.sample(&mut *rng)).collect();
    let nn = noise.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nc = clean.iter().map(|v| v * v).sum::<f64>().sqrt();
    let alpha = if level > 0.0 && nn > 0.0 { level * nc / nn } else { 0.0 };
    clean.iter().zip(&noise).map(|(c, e)| c + alpha * e).collect()
}

/// Simulated coupled problem with CP-structured ground truth and a full mask.
///
/// Every size index gets an `N_j x rank` factor with unit-norm Gaussian
/// columns. The tensor is the superdiagonal CP model on the tensor's factors;
/// a matrix coupled through `[shared, other]` is `B_other · A_sharedᵀ`.
pub fn create_coupled(sizes: &[usize], modes: &[Vec<usize>], rank: usize, noise: f64, seed: u64) -> Result<CoupledProblem> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    if sizes.contains(&0) {
        return Err(Error::InvalidArgument("sizes must be positive".into()));
    }
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Error::InvalidArgument(format!("noise must be finite and nonnegative, got {noise}")));
    }
    let (tensor_modes, coupling_modes) = resolve_modes(sizes.len(), modes)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let factors: Vec<RealMatrix> = sizes.iter().map(|&n| unit_gaussian_columns(n, rank, &mut rng)).collect();

    let tensor_factors: Vec<RealMatrix> = tensor_modes.iter().map(|&j| factors[j].clone()).collect();
    let clean = TuckerModel::new(superdiagonal(tensor_factors.len(), rank), tensor_factors.clone())?.reconstruct()?;
    let matrix_factors: Vec<RealMatrix> = coupling_modes.iter().map(|&(_, j)| factors[j].clone()).collect();
    let clean_matrices: Vec<RealMatrix> = coupling_modes
        .iter()
        .zip(&matrix_factors)
        .map(|(&(mode, _), b)| b * tensor_factors[mode].transpose())
        .collect();

    let tensor = DenseTensor::new(clean.dims().to_vec(), add_noise(clean.data(), noise, &mut rng))?;
    let couplings = coupling_modes
        .iter()
        .zip(&clean_matrices)
        .map(|(&(mode, _), m)| CoupledMatrix {
            matrix: RealMatrix::from_column_slice(m.nrows(), m.ncols(), &add_noise(m.as_slice(), noise, &mut rng)),
            mode,
        })
        .collect();
    let mask = ObservationMask::full(tensor.dims());
    let mut problem = CoupledProblem::new(tensor, mask, couplings)?;
    problem.ground_truth = Some(GroundTruth {
        tensor_factors,
        matrix_factors,
        tensor: clean,
        matrices: clean_matrices,
    });
    Ok(problem)
}

pub fn coupled_solve(problem: &CoupledProblem, config: &SolverConfig) -> Result<CoupledSolution> {
    coupled_solve_with_observer(problem, config, &mut |_, _, _| {})
}

/// Runs the solver with each coupled-matrix loss added to the objective.
pub fn coupled_solve_with_observer(
    problem: &CoupledProblem,
    config: &SolverConfig,
    observer: &mut Observer<'_>,
) -> Result<CoupledSolution> {
    let couplings = problem
        .couplings
        .iter()
        .map(|c| Coupling {
            mode: c.mode,
            matrix: c.matrix.clone(),
            weight: config.coupling_weight,
        })
        .collect();
    let sol = solve_coupled_with_observer(&problem.tensor, &problem.mask, None, couplings, config, observer)?;
    let matrix_residuals = problem
        .couplings
        .iter()
        .zip(&sol.coupling_factors)
        .map(|(c, u)| {
            let r = &c.matrix - u * sol.model.factors[c.mode].transpose();
            r.norm() / c.matrix.norm().max(f64::MIN_POSITIVE)
        })
        .collect();
    Ok(CoupledSolution {
        tucker: sol.model,
        extra_factors: sol.coupling_factors,
        trace: sol.trace,
        matrix_residuals,
        converged: sol.converged,
    })
}

/// Mean relative Frobenius error of the tensor and every coupled matrix
/// against their noiseless ground truth.
pub fn reconstruction_error(sol: &CoupledSolution, problem: &CoupledProblem) -> Result<f64> {
    let truth = problem.ground_truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    let rel = |err: f64, refn: f64| if refn > 0.0 { err / refn } else { err };
    let xt = sol.tucker.reconstruct()?;
    let mut errs = vec![rel(xt.sub(&truth.tensor)?.frobenius_norm(), truth.tensor.frobenius_norm())];
    for (i, m) in truth.matrices.iter().enumerate() {
        let est = sol.matrix_estimate(i, problem)?;
        if est.shape() != m.shape() {
            return Err(Error::ShapeMismatch(format!("coupled matrix {i} estimate has the wrong shape")));
        }
        errs.push(rel((est - m).norm(), m.norm()));
    }
    Ok(errs.iter().sum::<f64>() / errs.len() as f64)
}

/// Mean over truth columns of `|cos|` to the estimated column assigned to it,
/// maximized over one-to-one assignments.
pub fn factor_congruence(est: &RealMatrix, truth: &RealMatrix) -> Result<f64> {
    if est.shape() != truth.shape() {
        return Err(Error::ShapeMismatch(format!(
            "estimate is {:?}, truth is {:?}",
            est.shape(),
            truth.shape()
        )));
    }
    let r = truth.ncols();
    if r == 0 {
        return Err(Error::InvalidArgument("factors have no columns".into()));
    }
    if r > 20 {
        return Err(Error::InvalidArgument(format!("congruence supports at most 20 columns, got {r}")));
    }
    let cos = RealMatrix::from_fn(r, r, |t, e| {
        let (a, b) = (truth.column(t), est.column(e));
        let d = a.norm() * b.norm();
        if d > 0.0 {
            (a.dot(&b) / d).abs()
        } else {
            0.0
        }
    });
    // best[s]: best total for the first popcount(s) truth columns using estimate set s.
    let mut best = vec![f64::NEG_INFINITY; 1 << r];
    best[0] = 0.0;
    for s in 0..(1usize << r) {
        if best[s] == f64::NEG_INFINITY {
            continue;
        }
        let t = s.count_ones() as usize;
        if t == r {
            continue;
        }
        for e in (0..r).filter(|e| s & (1 << e) == 0) {
            let next = s | (1 << e);
            best[next] = best[next].max(best[s] + cos[(t, e)]);
        }
    }
    Ok(best[(1 << r) - 1] / r as f64)
}

/// `Σ_idx G[idx] ∏_{j≠k} B_j[idx_j, r]` for every row of mode `k` and column `r`.
fn mttkrp(core: &DenseTensor, factors: &[RealMatrix], k: usize) -> RealMatrix {
    let rank = factors[k].ncols();
    let mut out = RealMatrix::zeros(core.dims()[k], rank);
    for r in 0..rank {
        let mut t = core.clone();
        for (j, b) in factors.iter().enumerate().filter(|(j, _)| *j != k) {
            let row = RealMatrix::from_fn(1, b.nrows(), |_, i| b[(i, r)]);
            t = t.mode_product_unchecked(&row, j);
        }
        out.column_mut(r).copy_from_slice(t.data());
    }
    out
}

/// Rank-`rank` CP factors of a small core by alternating least squares.
fn cp_als_core(core: &DenseTensor, rank: usize, seed: u64) -> Result<Vec<RealMatrix>> {
    const RESTARTS: usize = 8;
    const SWEEPS: usize = 500;
    let k = core.order();
    let norm = core.frobenius_norm();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<(f64, Vec<RealMatrix>)> = None;
    for _ in 0..RESTARTS {
        let mut b: Vec<RealMatrix> = core
            .dims()
            .iter()
            .map(|&n| RealMatrix::from_fn(n, rank, |_, _| StandardNormal.sample(&mut rng)))
            .collect();
        let mut prev = f64::INFINITY;
        let mut err = f64::INFINITY;
        for _ in 0..SWEEPS {
            for m in 0..k {
                let mut h = RealMatrix::from_element(rank, rank, 1.0);
                for (_, bj) in b.iter().enumerate().filter(|(j, _)| *j != m) {
                    h.component_mul_assign(&(bj.transpose() * bj));
                }
                let rhs = mttkrp(core, &b, m);
                let eps = 1e-12 * h.amax().max(f64::MIN_POSITIVE);
                let pinv = h
                    .pseudo_inverse(eps)
                    .map_err(|e| Error::Numeric(format!("CP least squares: {e}")))?;
                b[m] = rhs * pinv;
            }
            let approx = TuckerModel::new(superdiagonal(k, rank), b.clone())?.reconstruct()?;
            err = approx.sub(core)?.frobenius_norm() / norm.max(f64::MIN_POSITIVE);
            if (prev - err).abs() <= 1e-14 || err <= 1e-13 {
                break;
            }
            prev = err;
        }
        if err.is_finite() && best.as_ref().is_none_or(|(e, _)| err < *e) {
            best = Some((err, b));
        }
    }
    best.map(|(_, b)| b)
        .ok_or_else(|| Error::Numeric("CP decomposition of the core did not produce a finite fit".into()))
}

/// CP factors `V_k B_k` of a Tucker model, with `G ≈ Σ_r b_1r ∘ ... ∘ b_Kr`.
pub fn cp_from_tucker(model: &TuckerModel, rank: usize, seed: u64) -> Result<Vec<RealMatrix>> {
    if rank == 0 {
        return Err(Error::InvalidArgument("rank must be at least 1".into()));
    }
    let b = cp_als_core(&model.core, rank, seed)?;
    Ok(model.factors.iter().zip(&b).map(|(v, bk)| v * bk).collect())
}

/// Mean [`factor_congruence`] over tensor modes, comparing the CP factors of
/// the solution with the ground-truth factors.
pub fn recovery_congruence(sol: &CoupledSolution, problem: &CoupledProblem, seed: u64) -> Result<f64> {
    let truth = problem.ground_truth.as_ref().ok_or(Error::MissingGroundTruth)?;
    let rank = truth.tensor_factors[0].ncols();
    let est = cp_from_tucker(&sol.tucker, rank, seed)?;
    let scores: Vec<f64> = est
        .iter()
        .zip(&truth.tensor_factors)
        .map(|(e, t)| factor_congruence(e, t))
        .collect::<Result<_>>()?;
    Ok(scores.iter().sum::<f64>() / scores.len() as f64)
}

/// One row of the multi-seed results file.
#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub seed: u64,
    pub avg_err: f64,
    pub congruence: f64,
    pub iters: usize,
}

pub const RESULTS_HEADER: &str = "seed,avg_err,congruence,iters";

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut s = format!("{RESULTS_HEADER}\n");
    for r in rows {
        let _ = writeln!(s, "{},{:.12e},{:.12e},{}", r.seed, r.avg_err, r.congruence, r.iters);
    }
    s
}

//! Determinant-one coordinate normalization and metric-factor learning.
//!
//! For points `x_1..x_m` with covariance `M`, `φ(U) = ‖U x‖²` over `SL(n)` is
//! minimized by a multiple of `M^{-1/2}`, so whitening is the Kempf-Ness
//! critical point. [`normalize_coordinates`] applies this mode by mode to a set
//! of tensors, and [`dml_factors`] alternates it with a constrained matrix
//! completion step to learn two-mode metric factors.
//!
//! The coordinate-change loop initializes its running objective with the norm
//! of the input before the first sweep, then keeps sweeping while a sweep
//! shrinks the norm by more than the relative threshold `lambda`.

use nalgebra::{Cholesky, DVector};

use crate::error::{Error, Result};
use crate::linalg::{inv_sqrt_spd, sym_eigen_desc};
use crate::metric::{MetricFamily, SimilarityMatrices};
use crate::tensor::{DenseTensor, RealMatrix};

/// Relative eigenvalue floor used for every inverse square root in this module.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Covariance eigenvalues below this fraction of the largest count as singular.
pub const RANK_TOL: f64 = 1e-12;

/// Sample covariance of the columns of `points` (`n x m`, one point per column), normalized by `m`.
pub fn sample_covariance(points: &RealMatrix) -> Result<RealMatrix> {
    let m = points.ncols();
    if m == 0 {
        return Err(Error::InvalidArgument("no points".into()));
    }
    let mean = points.column_mean();
    let mut centered = points.clone();
    for mut c in centered.column_iter_mut() {
        c -= &mean;
    }
    Ok(&centered * centered.transpose() / m as f64)
}

/// `M^{-1/2}` for the sample covariance `M` of the columns of `points`.
pub fn covariance_whitener(points: &RealMatrix) -> Result<RealMatrix> {
    let cov = sample_covariance(points)?;
    check_full_rank(&cov)?;
    Ok(inv_sqrt_spd(&cov, 0.0)?.matrix)
}

fn check_full_rank(cov: &RealMatrix) -> Result<()> {
    let (vals, _) = sym_eigen_desc(cov);
    let max = vals[0];
    let threshold = RANK_TOL * max.max(0.0);
    if let Some((index, &eigenvalue)) = vals.iter().enumerate().find(|(_, &v)| v <= threshold) {
        return Err(Error::RankDeficient {
            index,
            eigenvalue,
            threshold,
        });
    }
    Ok(())
}

/// Outcome of [`normalize_coordinates`].
#[derive(Clone, Debug)]
pub struct CoordinateChangeResult {
    /// Accumulated determinant-one transform per mode.
    pub transforms: Vec<RealMatrix>,
    /// Input tensors after the change of coordinates.
    pub normalized: Vec<DenseTensor>,
    /// Joint norm before the first sweep, then after each sweep.
    pub objective_trace: Vec<f64>,
    pub sweeps: usize,
}

impl CoordinateChangeResult {
    pub fn final_objective(&self) -> f64 {
        *self.objective_trace.last().unwrap()
    }
}

fn joint_norm(tensors: &[DenseTensor]) -> f64 {
    tensors.iter().map(|t| t.norm_sq()).sum::<f64>().sqrt()
}

/// Alternating per-mode minimization of `‖(U_1, ..., U_K) · X‖` over determinant-one `U_l`.
pub fn normalize_coordinates(tensors: &[DenseTensor], lambda: f64, max_iters: usize) -> Result<CoordinateChangeResult> {
    normalize_coordinates_from(tensors, None, lambda, max_iters)
}

/// As [`normalize_coordinates`], starting from the given per-mode transforms instead of identities.
pub fn normalize_coordinates_from(
    tensors: &[DenseTensor],
    initial: Option<&[RealMatrix]>,
    lambda: f64,
    max_iters: usize,
) -> Result<CoordinateChangeResult> {
    let first = tensors
        .first()
        .ok_or_else(|| Error::InvalidArgument("no tensors to normalize".into()))?;
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidArgument(format!("lambda must lie in (0, 1), got {lambda}")));
    }
    let dims = first.dims().to_vec();
    if let Some(t) = tensors.iter().find(|t| t.dims() != dims.as_slice()) {
        return Err(Error::ShapeMismatch(format!("tensor dims {:?} vs {:?}", t.dims(), dims)));
    }
    let mut transforms: Vec<RealMatrix> = match initial {
        Some(init) => {
            if init.len() != dims.len() || init.iter().zip(&dims).any(|(u, &n)| u.shape() != (n, n)) {
                return Err(Error::ShapeMismatch("initial transforms do not match tensor dims".into()));
            }
            init.to_vec()
        }
        None => dims.iter().map(|&n| RealMatrix::identity(n, n)).collect(),
    };
    let mut current: Vec<DenseTensor> = tensors.to_vec();
    if initial.is_some() {
        for t in current.iter_mut() {
            for (mode, u) in transforms.iter().enumerate() {
                *t = t.mode_product(u, mode)?;
            }
        }
    }

    let mut objective_trace = vec![joint_norm(&current)];
    let mut sweeps = 0;
    while sweeps < max_iters {
        let before = *objective_trace.last().unwrap();
        for mode in 0..dims.len() {
            let scatter = current
                .iter()
                .map(|t| t.mode_contract_unchecked(t, mode))
                .fold(RealMatrix::zeros(dims[mode], dims[mode]), |acc, s| acc + s);
            check_full_rank(&scatter)?;
            let step = inv_sqrt_spd(&scatter, EIGEN_FLOOR)?.det_normalized();
            for t in current.iter_mut() {
                *t = t.mode_product_unchecked(&step, mode);
            }
            transforms[mode] = &step * &transforms[mode];
        }
        sweeps += 1;
        let after = joint_norm(&current);
        objective_trace.push(after);
        if !(before > 0.0 && after / before < 1.0 - lambda) {
            break;
        }
    }
    Ok(CoordinateChangeResult {
        transforms,
        normalized: current,
        objective_trace,
        sweeps,
    })
}

/// Learned two-mode metric factors.
#[derive(Clone, Debug)]
pub struct DmlResult {
    pub l_x: RealMatrix,
    pub l_y: RealMatrix,
    /// Completed matrix from the last constrained step.
    pub m_xy: RealMatrix,
    /// `‖L_X M L_Y^T‖² + λ_X Tr(L_X S_XX L_X^T) + λ_Y Tr(L_Y S_YY L_Y^T)` after each iteration.
    pub objective_trace: Vec<f64>,
    /// `‖L_X M L_Y^T‖²` after each iteration.
    pub distance_trace: Vec<f64>,
}

/// Problem data for [`dml_factors`].
#[derive(Clone, Debug)]
pub struct DmlProblem<'a> {
    /// Starting matrix; its observed cells are overwritten by `values`.
    pub m_xy: &'a RealMatrix,
    pub s_xx: &'a RealMatrix,
    pub s_yy: &'a RealMatrix,
    pub observed: &'a [(usize, usize)],
    pub values: &'a [f64],
    pub lambda_x: f64,
    pub lambda_y: f64,
}

/// Alternates exact constrained completion of `M` with determinant-normalized
/// inverse-square-root updates of `L_X` and `L_Y`.
///
/// Each factor update uses the other factor's current Gram matrix:
/// `L_X ← (λ_X S_XX + M L_Y^T L_Y M^T)^{-1/2}`, then `L_X ← det(L_X)^{-1/n_X} L_X`,
/// and symmetrically for `L_Y`.
pub fn dml_factors(p: &DmlProblem<'_>, iters: usize) -> Result<DmlResult> {
    let (nx, ny) = p.m_xy.shape();
    if p.s_xx.shape() != (nx, nx) || p.s_yy.shape() != (ny, ny) {
        return Err(Error::ShapeMismatch(format!(
            "similarities {:?}/{:?} for a {nx}x{ny} matrix",
            p.s_xx.shape(),
            p.s_yy.shape()
        )));
    }
    if p.observed.len() != p.values.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} observed cells but {} values",
            p.observed.len(),
            p.values.len()
        )));
    }
    if !(p.lambda_x > 0.0 && p.lambda_y > 0.0) {
        return Err(Error::InvalidArgument("regularization weights must be positive".into()));
    }
    let mut is_obs = vec![false; nx * ny];
    let mut m = p.m_xy.clone();
    for (&(i, j), &v) in p.observed.iter().zip(p.values) {
        if i >= nx || j >= ny {
            return Err(Error::InvalidArgument(format!("observed cell ({i}, {j}) out of bounds")));
        }
        if std::mem::replace(&mut is_obs[i * ny + j], true) {
            return Err(Error::InvalidArgument(format!("duplicate observed cell ({i}, {j})")));
        }
        m[(i, j)] = v;
    }
    let free: Vec<(usize, usize)> = (0..nx)
        .flat_map(|i| (0..ny).map(move |j| (i, j)))
        .filter(|&(i, j)| !is_obs[i * ny + j])
        .collect();

    let mut l_x = RealMatrix::identity(nx, nx);
    let mut l_y = RealMatrix::identity(ny, ny);
    let mut objective_trace = Vec::with_capacity(iters);
    let mut distance_trace = Vec::with_capacity(iters);
    for _ in 0..iters {
        let gx = l_x.transpose() * &l_x;
        let gy = l_y.transpose() * &l_y;
        complete_free_entries(&mut m, &free, &gx, &gy)?;

        let inner_x = p.s_xx * p.lambda_x + &m * &gy * m.transpose();
        l_x = inv_sqrt_spd(&inner_x, EIGEN_FLOOR)
            .map_err(|e| Error::Conditioning(format!("L_X update: {e}")))?
            .det_normalized();
        let gx = l_x.transpose() * &l_x;
        let inner_y = p.s_yy * p.lambda_y + m.transpose() * &gx * &m;
        l_y = inv_sqrt_spd(&inner_y, EIGEN_FLOOR)
            .map_err(|e| Error::Conditioning(format!("L_Y update: {e}")))?
            .det_normalized();

        let dist = (&l_x * &m * l_y.transpose()).norm_squared();
        let reg = p.lambda_x * (&l_x * p.s_xx * l_x.transpose()).trace()
            + p.lambda_y * (&l_y * p.s_yy * l_y.transpose()).trace();
        distance_trace.push(dist);
        objective_trace.push(dist + reg);
    }
    Ok(DmlResult {
        l_x,
        l_y,
        m_xy: m,
        objective_trace,
        distance_trace,
    })
}

/// Free systems up to this size are solved by dense Cholesky, larger ones by CG.
const DENSE_LIMIT: usize = 512;

/// Minimizes `‖L_X M L_Y^T‖²` over the free cells of `m`, given `gx = L_X^T L_X`, `gy = L_Y^T L_Y`.
///
/// The stationarity condition is `(gx M gy)|_free = 0`, a positive-definite
/// linear system in the free cells.
fn complete_free_entries(
    m: &mut RealMatrix,
    free: &[(usize, usize)],
    gx: &RealMatrix,
    gy: &RealMatrix,
) -> Result<()> {
    if free.is_empty() {
        return Ok(());
    }
    for &(i, j) in free {
        m[(i, j)] = 0.0;
    }
    let fixed = gx * &*m * gy;
    let rhs = DVector::from_iterator(free.len(), free.iter().map(|&(i, j)| -fixed[(i, j)]));
    let sol = if free.len() <= DENSE_LIMIT {
        let h = RealMatrix::from_fn(free.len(), free.len(), |f, g| {
            let (i_f, j_f) = free[f];
            let (i_g, j_g) = free[g];
            gx[(i_f, i_g)] * gy[(j_g, j_f)]
        });
        Cholesky::new(h)
            .ok_or_else(|| Error::Conditioning("free-entry system is not positive definite".into()))?
            .solve(&rhs)
    } else {
        conjugate_gradient(free, gx, gy, &rhs, m.shape())?
    };
    for (&(i, j), v) in free.iter().zip(sol.iter()) {
        m[(i, j)] = *v;
    }
    Ok(())
}

fn conjugate_gradient(
    free: &[(usize, usize)],
    gx: &RealMatrix,
    gy: &RealMatrix,
    rhs: &DVector<f64>,
    shape: (usize, usize),
) -> Result<DVector<f64>> {
    let apply = |v: &DVector<f64>| {
        let mut e = RealMatrix::zeros(shape.0, shape.1);
        for (&(i, j), x) in free.iter().zip(v.iter()) {
            e[(i, j)] = *x;
        }
        let h = gx * e * gy;
        DVector::from_iterator(free.len(), free.iter().map(|&(i, j)| h[(i, j)]))
    };
    let tol = 1e-10 * rhs.norm().max(f64::MIN_POSITIVE);
    let mut x = DVector::zeros(free.len());
    let mut r = rhs.clone();
    let mut d = r.clone();
    let mut rr = r.norm_squared();
    for _ in 0..10 * free.len() {
        if rr.sqrt() <= tol {
            return Ok(x);
        }
        let hd = apply(&d);
        let alpha = rr / d.dot(&hd);
        x.axpy(alpha, &d, 1.0);
        r.axpy(-alpha, &hd, 1.0);
        let rr_new = r.norm_squared();
        d = &r + &d * (rr_new / rr);
        rr = rr_new;
    }
    if rr.sqrt() <= 1e3 * tol {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("conjugate gradient stalled at residual {:e}", rr.sqrt())))
    }
}

/// One Gauss-Seidel sweep of per-mode metric learning on a tensor.
///
/// Mode `l` receives `L_l ← det-normalized (λ_l S_l + W_(l) W_(l)^T)^{-1/2}` with
/// `W = X x_{k≠l} L_k`, i.e. the two-mode factor update with the other modes'
/// current maps playing the role of the second factor.
pub fn tensor_metric_sweep(
    x: &DenseTensor,
    metric: &MetricFamily,
    sims: &SimilarityMatrices,
    lambdas: &[f64],
) -> Result<MetricFamily> {
    metric.check_dims(x.dims())?;
    sims.check_dims(x.dims())?;
    let mut mats = metric.mats().to_vec();
    for mode in 0..x.order() {
        let mut w = x.clone();
        for (k, l) in mats.iter().enumerate() {
            if k != mode {
                w = w.mode_product_unchecked(l, k);
            }
        }
        let inner = w.mode_contract_unchecked(&w, mode) + &sims.mats()[mode] * lambdas[mode];
        mats[mode] = inv_sqrt_spd(&inner, EIGEN_FLOOR)
            .map_err(|e| Error::Conditioning(format!("metric update for mode {mode}: {e}")))?
            .det_normalized();
    }
    MetricFamily::new(mats)
}

//! Tensor Mahalanobis metrics and per-mode similarity side information.
//!
//! A metric family holds one linear map `L_l` per mode; the squared distance
//! between two tensors is `‖(X_i - X_j) x_1 L_1 ... x_K L_K‖_F²`.

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;
use crate::tensor::{kron_composite, DenseTensor, RealMatrix};

/// One linear transform per tensor mode.
///
/// Square `N_l x N_l` maps define a metric. Non-square maps (fewer rows than
/// columns) only define a pseudo-metric and the family is flagged as such.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricFamily {
    mats: Vec<RealMatrix>,
    pseudo: bool,
}

impl MetricFamily {
    pub fn new(mats: Vec<RealMatrix>) -> Result<Self> {
        if mats.is_empty() {
            return Err(Error::InvalidArgument("metric family needs at least one mode".into()));
        }
        if mats.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("metric matrix".into()));
        }
        let pseudo = mats.iter().any(|m| !m.is_square());
        Ok(Self { mats, pseudo })
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self {
            mats: dims.iter().map(|&n| RealMatrix::identity(n, n)).collect(),
            pseudo: false,
        }
    }

    pub fn mats(&self) -> &[RealMatrix] {
        &self.mats
    }

    pub fn into_mats(self) -> Vec<RealMatrix> {
        self.mats
    }

    pub fn order(&self) -> usize {
        self.mats.len()
    }

    /// True when some mode map is rank-deficient by shape, so coincidence can fail.
    pub fn is_pseudo(&self) -> bool {
        self.pseudo
    }

    pub(crate) fn mark_pseudo(mut self, pseudo: bool) -> Self {
        self.pseudo |= pseudo;
        self
    }

    /// Checks that each map acts on the corresponding mode of `dims`.
    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        if self.mats.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!(
                "metric of order {} for a tensor of order {}",
                self.mats.len(),
                dims.len()
            )));
        }
        for (l, (m, &n)) in self.mats.iter().zip(dims).enumerate() {
            if m.ncols() != n {
                return Err(Error::ShapeMismatch(format!(
                    "metric map {l} is {}x{}, mode size is {n}",
                    m.nrows(),
                    m.ncols()
                )));
            }
        }
        Ok(())
    }

    /// `X x_1 L_1 ... x_K L_K`.
    pub fn apply(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.check_dims(x.dims())?;
        let mats: Vec<Option<&RealMatrix>> = self.mats.iter().map(Some).collect();
        x.multi_mode_product(&mats)
    }

    /// Per-mode Gram matrices `L_l^T L_l`.
    pub fn grams(&self) -> Vec<RealMatrix> {
        self.mats.iter().map(|m| m.transpose() * m).collect()
    }
}

/// `L_l = V_l^T V_l` for each factor.
///
/// Factors are taken with the metric dimension along columns: a `n x N`
/// factor gives an `N x N` positive semidefinite map, which is only a
/// pseudo-metric when `n < N`.
pub fn metric_from_factors(factors: &[RealMatrix]) -> Result<MetricFamily> {
    let pseudo = factors.iter().any(|v| v.nrows() < v.ncols());
    let mats = factors.iter().map(|v| v.transpose() * v).collect();
    Ok(MetricFamily::new(mats)?.mark_pseudo(pseudo))
}

/// Squared tensor Mahalanobis distance in transformed form.
pub fn mahalanobis_distance(xi: &DenseTensor, xj: &DenseTensor, m: &MetricFamily) -> Result<f64> {
    let diff = xi.sub(xj)?;
    Ok(m.apply(&diff)?.norm_sq())
}

/// Squared tensor Mahalanobis distance in trace form along `mode`:
/// `Tr(Ĺ_l D_(l) (Ĺ_K ⊗ ... ⊗ Ĺ_1)_{≠l} D_(l)^T)` with `Ĺ_k = L_k^T L_k`.
pub fn mahalanobis_via_trace(
    xi: &DenseTensor,
    xj: &DenseTensor,
    m: &MetricFamily,
    mode: usize,
) -> Result<f64> {
    let diff = xi.sub(xj)?;
    m.check_dims(diff.dims())?;
    diff.check_mode(mode)?;
    let grams = m.grams();
    let d = diff.unfold(mode)?;
    let composite = kron_composite(&grams, mode);
    Ok((&grams[mode] * &d * composite * d.transpose()).trace())
}

/// Pairwise squared Euclidean distances between the mode-`mode` slices of `x`.
pub fn slice_sq_distances(x: &DenseTensor, mode: usize) -> Result<RealMatrix> {
    let u = x.unfold(mode)?;
    let n = u.nrows();
    let mut d = RealMatrix::zeros(n, n);
    for i in 0..n {
        for j in i + 1..n {
            let s: f64 = u.row(i).iter().zip(u.row(j).iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            d[(i, j)] = s;
            d[(j, i)] = s;
        }
    }
    Ok(d)
}

/// Median of the off-diagonal squared slice distances, the default kernel bandwidth.
///
/// Falls back to 1 when the slices coincide or the mode has a single slice.
pub fn median_bandwidth(x: &DenseTensor, mode: usize) -> Result<f64> {
    let d = slice_sq_distances(x, mode)?;
    let n = d.nrows();
    let mut vals: Vec<f64> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).map(|(i, j)| d[(i, j)]).collect();
    if vals.is_empty() {
        return Ok(1.0);
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = vals.len() / 2;
    let med = if vals.len() % 2 == 1 {
        vals[mid]
    } else {
        0.5 * (vals[mid - 1] + vals[mid])
    };
    Ok(if med > 0.0 { med } else { 1.0 })
}

/// Gaussian-kernel similarity of the mode-`mode` slices: `exp(-d_ij² / bandwidth)`.
pub fn build_similarity(x: &DenseTensor, mode: usize, bandwidth: f64) -> Result<RealMatrix> {
    if !(bandwidth > 0.0 && bandwidth.is_finite()) {
        return Err(Error::InvalidArgument(format!("bandwidth must be positive, got {bandwidth}")));
    }
    let d = slice_sq_distances(x, mode)?;
    Ok(d.map(|v| (-v / bandwidth).exp()))
}

/// Clips the eigenvalues of a symmetric matrix from below at `floor`.
pub fn psd_floor(m: &RealMatrix, floor: f64) -> Result<RealMatrix> {
    if !m.is_square() {
        return Err(Error::ShapeMismatch(format!("psd_floor of a {}x{} matrix", m.nrows(), m.ncols())));
    }
    let (vals, vecs) = sym_eigen_desc(m);
    let mut scaled = vecs.clone();
    for (j, v) in vals.iter().enumerate() {
        scaled.column_mut(j).scale_mut(v.max(floor));
    }
    let out = scaled * vecs.transpose();
    Ok((&out + out.transpose()) * 0.5)
}

/// Per-mode symmetric positive semidefinite similarity matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrices {
    mats: Vec<RealMatrix>,
}

impl SimilarityMatrices {
    pub const SYMMETRY_TOL: f64 = 1e-12;
    pub const PSD_TOL: f64 = 1e-10;

    /// Validates symmetry and positive semidefiniteness of every matrix.
    pub fn new(mats: Vec<RealMatrix>) -> Result<Self> {
        for (l, m) in mats.iter().enumerate() {
            if !m.is_square() {
                return Err(Error::ShapeMismatch(format!("similarity {l} is {}x{}", m.nrows(), m.ncols())));
            }
            let scale = m.amax().max(1.0);
            if (m - m.transpose()).amax() > Self::SYMMETRY_TOL * scale {
                return Err(Error::InvalidArgument(format!("similarity {l} is not symmetric")));
            }
            let (vals, _) = sym_eigen_desc(m);
            if let Some(&min) = vals.last() {
                if min < -Self::PSD_TOL * scale {
                    return Err(Error::InvalidArgument(format!(
                        "similarity {l} is not positive semidefinite (eigenvalue {min:e}); see psd_floor"
                    )));
                }
            }
        }
        Ok(Self { mats })
    }

    /// Kernel similarities of every mode of `x`, each with its median bandwidth.
    pub fn from_tensor(x: &DenseTensor) -> Result<Self> {
        let mats = (0..x.order())
            .map(|l| build_similarity(x, l, median_bandwidth(x, l)?).and_then(|s| psd_floor(&s, 0.0)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { mats })
    }

    /// All-zero side information, which switches the similarity regularizer off.
    pub fn zeros(dims: &[usize]) -> Self {
        Self {
            mats: dims.iter().map(|&n| RealMatrix::zeros(n, n)).collect(),
        }
    }

    pub fn identity(dims: &[usize]) -> Self {
        Self {
            mats: dims.iter().map(|&n| RealMatrix::identity(n, n)).collect(),
        }
    }

    pub fn mats(&self) -> &[RealMatrix] {
        &self.mats
    }

    pub fn check_dims(&self, dims: &[usize]) -> Result<()> {
        let ok = self.mats.len() == dims.len() && self.mats.iter().zip(dims).all(|(m, &n)| m.nrows() == n);
        if !ok {
            return Err(Error::ShapeMismatch(format!(
                "similarity sizes {:?} vs tensor dims {dims:?}",
                self.mats.iter().map(|m| m.nrows()).collect::<Vec<_>>()
            )));
        }
        Ok(())
    }
}

use std::fmt;
use std::str::FromStr;

use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, RealMatrix};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PenaltyKind {
    None,
    L1,
    L2Squared,
    Nuclear,
}

/// Nonnegative, lower semi-continuous penalty `weight * J(v)`.
///
/// - `L1`: `Σ|v_i|`
/// - `L2Squared`: `‖v‖²`
/// - `Nuclear`: sum of singular values of the matrix view (mode-1 unfolding for tensors)
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Penalty {
    pub kind: PenaltyKind,
    pub weight: f64,
}

impl Default for Penalty {
    fn default() -> Self {
        Self::none()
    }
}

impl Penalty {
    pub fn new(kind: PenaltyKind, weight: f64) -> Result<Self> {
        if !(weight >= 0.0 && weight.is_finite()) {
            return Err(Error::InvalidArgument(format!("penalty weight must be nonnegative, got {weight}")));
        }
        Ok(Self { kind, weight })
    }

    pub fn none() -> Self {
        Self {
            kind: PenaltyKind::None,
            weight: 0.0,
        }
    }

    pub fn l1(weight: f64) -> Self {
        Self {
            kind: PenaltyKind::L1,
            weight,
        }
    }

    pub fn l2_squared(weight: f64) -> Self {
        Self {
            kind: PenaltyKind::L2Squared,
            weight,
        }
    }

    pub fn nuclear(weight: f64) -> Self {
        Self {
            kind: PenaltyKind::Nuclear,
            weight,
        }
    }

    pub fn is_active(&self) -> bool {
        self.kind != PenaltyKind::None && self.weight > 0.0
    }

    /// Penalty value on row-major data viewed as a `rows x cols` matrix.
    pub fn value(&self, data: &[f64], shape: (usize, usize)) -> f64 {
        if !self.is_active() {
            return 0.0;
        }
        let w = self.weight;
        match self.kind {
            PenaltyKind::None => 0.0,
            PenaltyKind::L1 => w * data.iter().map(|v| v.abs()).sum::<f64>(),
            PenaltyKind::L2Squared => w * data.iter().map(|v| v * v).sum::<f64>(),
            PenaltyKind::Nuclear => {
                let m = RealMatrix::from_row_slice(shape.0, shape.1, data);
                w * m.singular_values().sum()
            }
        }
    }

    /// `argmin_v J(v) + (t/2)‖v - u‖²` on row-major data viewed as a `rows x cols` matrix.
    pub fn prox(&self, u: &[f64], shape: (usize, usize), t: f64) -> Result<Vec<f64>> {
        if !(t > 0.0) {
            return Err(Error::InvalidArgument(format!("prox parameter must be positive, got {t}")));
        }
        if !self.is_active() {
            return Ok(u.to_vec());
        }
        let tau = self.weight / t;
        Ok(match self.kind {
            PenaltyKind::None => u.to_vec(),
            PenaltyKind::L1 => u.iter().map(|&v| soft_threshold(v, tau)).collect(),
            PenaltyKind::L2Squared => {
                let c = t / (t + 2.0 * self.weight);
                u.iter().map(|v| c * v).collect()
            }
            PenaltyKind::Nuclear => {
                let m = RealMatrix::from_row_slice(shape.0, shape.1, u);
                let out = singular_value_threshold(m, tau)?;
                (0..shape.0)
                    .flat_map(|i| (0..shape.1).map(move |j| (i, j)))
                    .map(|(i, j)| out[(i, j)])
                    .collect()
            }
        })
    }

    pub fn value_matrix(&self, m: &RealMatrix) -> f64 {
        self.value(&row_major(m), m.shape())
    }

    pub fn prox_matrix(&self, m: &RealMatrix, t: f64) -> Result<RealMatrix> {
        let out = self.prox(&row_major(m), m.shape(), t)?;
        Ok(RealMatrix::from_row_slice(m.nrows(), m.ncols(), &out))
    }

    pub fn value_tensor(&self, x: &DenseTensor) -> f64 {
        self.value(x.data(), tensor_shape(x))
    }

    pub fn prox_tensor(&self, x: &DenseTensor, t: f64) -> Result<DenseTensor> {
        let out = self.prox(x.data(), tensor_shape(x), t)?;
        Ok(DenseTensor::from_raw(x.dims().to_vec(), out))
    }
}

/// Row-major storage puts mode 1 on rows; column order does not affect singular values.
fn tensor_shape(x: &DenseTensor) -> (usize, usize) {
    let rows = x.dims()[0];
    (rows, x.len() / rows)
}

fn row_major(m: &RealMatrix) -> Vec<f64> {
    m.transpose().as_slice().to_vec()
}

pub fn soft_threshold(v: f64, tau: f64) -> f64 {
    if v > tau {
        v - tau
    } else if v < -tau {
        v + tau
    } else {
        0.0
    }
}

pub fn singular_value_threshold(m: RealMatrix, tau: f64) -> Result<RealMatrix> {
    let mut svd = SVD::try_new(m, true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("SVD in nuclear-norm prox did not converge".into()))?;
    svd.singular_values.apply(|s| *s = (*s - tau).max(0.0));
    svd.recompose()
        .map_err(|e| Error::Numeric(format!("SVD recomposition failed: {e}")))
}

impl fmt::Display for Penalty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.kind {
            PenaltyKind::None => write!(f, "none"),
            PenaltyKind::L1 => write!(f, "l1:{}", self.weight),
            PenaltyKind::L2Squared => write!(f, "l2sq:{}", self.weight),
            PenaltyKind::Nuclear => write!(f, "nuclear:{}", self.weight),
        }
    }
}

/// Parses `none`, `l1:<w>`, `l2sq:<w>` or `nuclear:<w>`.
impl FromStr for Penalty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("none") {
            return Ok(Self::none());
        }
        let (kind, weight) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("penalty `{s}` must look like kind:weight")))?;
        let weight: f64 = weight
            .trim()
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("bad penalty weight in `{s}`")))?;
        let kind = match kind.trim().to_ascii_lowercase().as_str() {
            "l1" => PenaltyKind::L1,
            "l2sq" | "l2_squared" => PenaltyKind::L2Squared,
            "nuclear" => PenaltyKind::Nuclear,
            "none" => PenaltyKind::None,
            other => return Err(Error::InvalidArgument(format!("unknown penalty kind `{other}`"))),
        };
        Self::new(kind, weight)
    }
}

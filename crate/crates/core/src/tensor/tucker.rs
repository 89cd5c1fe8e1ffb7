use nalgebra::SVD;

use crate::error::{Error, Result};
use crate::linalg::sym_eigen_desc;

use super::dense::{DenseTensor, RealMatrix};

/// Core tensor plus one factor per mode: `X = G x_1 V1 x_2 V2 ... x_K VK`.
///
/// Factor `l` is `N_l x n_l` where `n_l` is the core size along mode `l`.
#[derive(Clone, Debug, PartialEq)]
pub struct TuckerModel {
    pub core: DenseTensor,
    pub factors: Vec<RealMatrix>,
}

impl TuckerModel {
    pub fn new(core: DenseTensor, factors: Vec<RealMatrix>) -> Result<Self> {
        let model = Self { core, factors };
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        if self.factors.len() != self.core.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} factors for an order-{} core",
                self.factors.len(),
                self.core.order()
            )));
        }
        for (l, (f, &n)) in self.factors.iter().zip(self.core.dims()).enumerate() {
            if f.ncols() != n || f.nrows() == 0 {
                return Err(Error::ShapeMismatch(format!(
                    "factor {l} is {}x{}, core size along mode {l} is {n}",
                    f.nrows(),
                    f.ncols()
                )));
            }
        }
        Ok(())
    }

    pub fn ranks(&self) -> &[usize] {
        self.core.dims()
    }

    pub fn outer_dims(&self) -> Vec<usize> {
        self.factors.iter().map(|f| f.nrows()).collect()
    }

    pub fn reconstruct(&self) -> Result<DenseTensor> {
        tucker_reconstruct(self)
    }
}

/// `G x_1 V1 ... x_K VK`.
pub fn tucker_reconstruct(model: &TuckerModel) -> Result<DenseTensor> {
    model.validate()?;
    let mats: Vec<Option<&RealMatrix>> = model.factors.iter().map(Some).collect();
    model.core.multi_mode_product(&mats)
}

/// Truncated higher-order SVD.
///
/// Factor `l` holds the leading `ranks[l]` left singular vectors of the mode-`l`
/// unfolding; the core is `X x_1 V1^T ... x_K VK^T`. Wide unfoldings go through
/// the eigendecomposition of their Gram matrix, tall ones through a thin SVD.
pub fn hosvd(x: &DenseTensor, ranks: &[usize]) -> Result<TuckerModel> {
    if ranks.len() != x.order() {
        return Err(Error::ShapeMismatch(format!(
            "{} ranks for an order-{} tensor",
            ranks.len(),
            x.order()
        )));
    }
    let mut factors = Vec::with_capacity(x.order());
    for (mode, (&r, &n)) in ranks.iter().zip(x.dims()).enumerate() {
        if r == 0 || r > n {
            return Err(Error::RankOutOfRange { mode, rank: r, size: n });
        }
        factors.push(leading_left_singular_vectors(x, mode, r)?);
    }
    let transposed: Vec<RealMatrix> = factors.iter().map(|f| f.transpose()).collect();
    let mats: Vec<Option<&RealMatrix>> = transposed.iter().map(Some).collect();
    let core = x.multi_mode_product(&mats)?;
    TuckerModel::new(core, factors)
}

fn leading_left_singular_vectors(x: &DenseTensor, mode: usize, r: usize) -> Result<RealMatrix> {
    let n = x.dims()[mode];
    let cols = x.len() / n;
    if cols >= n {
        let gram = x.mode_contract_unchecked(x, mode);
        let (_, vecs) = sym_eigen_desc(&gram);
        Ok(vecs.columns(0, r).into_owned())
    } else {
        let unfolded = x.unfold(mode)?;
        let svd = SVD::try_new(unfolded, true, false, f64::EPSILON, 0)
            .ok_or_else(|| Error::Numeric(format!("SVD of mode-{mode} unfolding did not converge")))?;
        let u = svd
            .u
            .ok_or_else(|| Error::Numeric("SVD returned no left vectors".into()))?;
        let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
        order.sort_by(|&a, &b| {
            svd.singular_values[b]
                .partial_cmp(&svd.singular_values[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut out = RealMatrix::zeros(n, r);
        for (dst, &src) in order.iter().take(r).enumerate() {
            out.set_column(dst, &u.column(src));
        }
        Ok(out)
    }
}

use crate::error::{Error, Result};
use crate::metric::{MetricFamily, SimilarityMatrices};
use crate::tensor::{DenseTensor, ObservationMask, RealMatrix, TuckerModel};

use super::config::LossSupport;

/// A matrix `M ∈ R^{J x N_c}` sharing tensor mode `c`, modelled as `M ≈ U V_cᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct Coupling {
    pub mode: usize,
    pub matrix: RealMatrix,
    pub weight: f64,
}

/// Fixed data of one solve: observed tensor, mask, side information, couplings.
#[derive(Clone, Debug)]
pub struct Problem {
    data: DenseTensor,
    mask: ObservationMask,
    loss_cells: Option<Vec<usize>>,
    sims: SimilarityMatrices,
    couplings: Vec<Coupling>,
}

impl Problem {
    /// Unobserved entries of `x` are ignored (zero-filled).
    pub fn new(
        x: &DenseTensor,
        mask: &ObservationMask,
        sims: SimilarityMatrices,
        loss_support: LossSupport,
    ) -> Result<Self> {
        if mask.is_empty() {
            return Err(Error::EmptyMask);
        }
        let data = mask.zero_fill(x)?;
        sims.check_dims(x.dims())?;
        let loss_cells = match loss_support {
            LossSupport::Observed => Some(mask.linear_indices().to_vec()),
            LossSupport::All => None,
        };
        Ok(Self {
            data,
            mask: mask.clone(),
            loss_cells,
            sims,
            couplings: Vec::new(),
        })
    }

    pub fn with_coupling(mut self, coupling: Coupling) -> Result<Self> {
        let c = coupling.mode;
        self.data.check_mode(c)?;
        if coupling.matrix.ncols() != self.data.dims()[c] {
            return Err(Error::ShapeMismatch(format!(
                "coupled matrix has {} columns but mode {c} has size {}",
                coupling.matrix.ncols(),
                self.data.dims()[c]
            )));
        }
        if self.couplings.iter().any(|k| k.mode == c) {
            return Err(Error::InvalidArgument(format!("mode {c} is coupled twice")));
        }
        if !(coupling.weight >= 0.0 && coupling.weight.is_finite()) {
            return Err(Error::InvalidArgument("coupling weight must be nonnegative".into()));
        }
        if coupling.matrix.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("coupled matrix".into()));
        }
        self.couplings.push(coupling);
        Ok(self)
    }

    pub fn dims(&self) -> &[usize] {
        self.data.dims()
    }

    /// Observed tensor with unobserved entries set to zero.
    pub fn data(&self) -> &DenseTensor {
        &self.data
    }

    pub fn mask(&self) -> &ObservationMask {
        &self.mask
    }

    pub fn sims(&self) -> &SimilarityMatrices {
        &self.sims
    }

    pub(crate) fn set_sims(&mut self, sims: SimilarityMatrices) {
        self.sims = sims;
    }

    pub fn couplings(&self) -> &[Coupling] {
        &self.couplings
    }

    /// Loss support as linear indices; `None` is every cell.
    pub fn loss_cells(&self) -> Option<&[usize]> {
        self.loss_cells.as_deref()
    }

    /// Overwrites observed cells of `x` with the data.
    pub fn pin(&self, x: &mut DenseTensor) {
        let src = self.data.data();
        let dst = x.data_mut();
        for &i in self.mask.linear_indices() {
            dst[i] = src[i];
        }
    }

    /// `P_Ω X + P_Ωᶜ Z`.
    pub fn completed(&self, z: &DenseTensor) -> DenseTensor {
        let mut out = z.clone();
        self.pin(&mut out);
        out
    }
}

/// Iterate of the linearized ADMM.
///
/// Factors are stored `N_l x n_l`; the factor metric of mode `l` is
/// `L_l = V_l V_lᵀ`.
#[derive(Clone, Debug, PartialEq)]
pub struct SolverState {
    pub factors: Vec<RealMatrix>,
    pub core: DenseTensor,
    pub z: DenseTensor,
    pub xhat: DenseTensor,
    /// Metric learned by the whitening sweep of the metric step.
    pub metric: MetricFamily,
    pub dual_a: DenseTensor,
    pub dual_b: Vec<RealMatrix>,
    /// `U` factor of each coupling, in the order of [`Problem::couplings`].
    pub coupling_factors: Vec<RealMatrix>,
    pub iteration: usize,
}

/// Block of the iterate addressed by gradient and update routines.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variable {
    Factor(usize),
    Core,
    Xhat,
    Z,
    CouplingFactor(usize),
}

impl SolverState {
    /// State with zero duals, identity learned metric and `Z = G x V`.
    pub fn from_parts(problem: &Problem, factors: Vec<RealMatrix>, core: DenseTensor, xhat: DenseTensor) -> Result<Self> {
        let dims = problem.dims().to_vec();
        let model = TuckerModel::new(core, factors)?;
        if model.outer_dims() != dims {
            return Err(Error::ShapeMismatch(format!(
                "factors give dims {:?}, data has {dims:?}",
                model.outer_dims()
            )));
        }
        xhat.check_same_dims(problem.data())?;
        let z = model.reconstruct()?;
        let TuckerModel { core, factors } = model;
        let dual_b = factors.iter().map(|v| RealMatrix::zeros(v.nrows(), v.ncols())).collect();
        let coupling_factors = problem
            .couplings()
            .iter()
            .map(|c| RealMatrix::zeros(c.matrix.nrows(), factors[c.mode].ncols()))
            .collect();
        Ok(Self {
            factors,
            core,
            z,
            dual_a: DenseTensor::zeros(&dims),
            xhat,
            metric: MetricFamily::identity(&dims),
            dual_b,
            coupling_factors,
            iteration: 0,
        })
    }

    pub fn order(&self) -> usize {
        self.factors.len()
    }

    pub fn model(&self) -> Result<TuckerModel> {
        TuckerModel::new(self.core.clone(), self.factors.clone())
    }

    pub fn block(&self, v: Variable) -> Result<Vec<f64>> {
        Ok(match v {
            Variable::Factor(l) => self.factor(l)?.as_slice().to_vec(),
            Variable::Core => self.core.data().to_vec(),
            Variable::Xhat => self.xhat.data().to_vec(),
            Variable::Z => self.z.data().to_vec(),
            Variable::CouplingFactor(c) => self.coupling(c)?.as_slice().to_vec(),
        })
    }

    /// Overwrites a block from a flat vector in the layout of [`SolverState::block`].
    pub fn set_block(&mut self, v: Variable, values: &[f64]) -> Result<()> {
        let dst: &mut [f64] = match v {
            Variable::Factor(l) => {
                self.factor(l)?;
                self.factors[l].as_mut_slice()
            }
            Variable::Core => self.core.data_mut(),
            Variable::Xhat => self.xhat.data_mut(),
            Variable::Z => self.z.data_mut(),
            Variable::CouplingFactor(c) => {
                self.coupling(c)?;
                self.coupling_factors[c].as_mut_slice()
            }
        };
        if dst.len() != values.len() {
            return Err(Error::ShapeMismatch(format!("block {v:?} has {} entries, got {}", dst.len(), values.len())));
        }
        dst.copy_from_slice(values);
        Ok(())
    }

    fn factor(&self, l: usize) -> Result<&RealMatrix> {
        self.factors.get(l).ok_or(Error::ModeOutOfRange {
            mode: l,
            order: self.factors.len(),
        })
    }

    fn coupling(&self, c: usize) -> Result<&RealMatrix> {
        self.coupling_factors
            .get(c)
            .ok_or_else(|| Error::InvalidArgument(format!("no coupling with index {c}")))
    }

    pub fn is_finite(&self) -> bool {
        let mats = self.factors.iter().chain(&self.dual_b).chain(&self.coupling_factors);
        self.core.is_finite()
            && self.z.is_finite()
            && self.xhat.is_finite()
            && self.dual_a.is_finite()
            && mats.flat_map(|m| m.iter()).all(|v| v.is_finite())
    }

    /// Block norms for divergence diagnostics.
    pub fn summary(&self) -> String {
        let fac: Vec<String> = self.factors.iter().map(|v| format!("{:.3e}", v.norm())).collect();
        format!(
            "|V|=[{}] |G|={:.3e} |Z|={:.3e} |Xhat|={:.3e} |Y1|={:.3e} |Y2|={:.3e}",
            fac.join(", "),
            self.core.frobenius_norm(),
            self.z.frobenius_norm(),
            self.xhat.frobenius_norm(),
            self.dual_a.frobenius_norm(),
            self.dual_b.iter().map(|m| m.norm_squared()).sum::<f64>().sqrt()
        )
    }
}

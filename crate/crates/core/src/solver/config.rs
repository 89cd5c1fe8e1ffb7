use crate::error::{Error, Result};
use crate::harness::EvalSupport;

use super::penalty::Penalty;

/// Which entries the data-fit loss `½‖X - Z‖²` runs over.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossSupport {
    #[default]
    Observed,
    All,
}

impl std::str::FromStr for LossSupport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "observed" => Ok(Self::Observed),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!("unknown loss support `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SolverConfig {
    /// Tucker ranks `n_1..n_K`.
    pub ranks: Vec<usize>,
    /// Lower-level similarity weights `λ_l ≥ 0`.
    pub lambda: Vec<f64>,
    /// Augmented-Lagrangian penalty `ρ > 0`.
    pub rho: f64,
    /// Proximal parameter of the core block; `None` estimates it.
    pub prox_core: Option<f64>,
    /// Proximal parameters of the factor blocks; `None` estimates them.
    pub prox_factor: Option<Vec<f64>>,
    pub core_penalty: Penalty,
    pub factor_penalties: Vec<Penalty>,
    pub max_iters: usize,
    /// Stop once the relative change of `Z` drops below this.
    pub tol_rel: f64,
    pub seed: u64,
    /// Rebuild the similarity matrices from the current completion every this many iterations.
    pub refresh_similarity_every: Option<usize>,
    pub loss_support: LossSupport,
    pub eval_support: EvalSupport,
    /// Iterations between Lipschitz re-estimates of the block step sizes.
    pub lipschitz_every: usize,
    /// Estimated step parameters are this multiple of the Lipschitz estimate.
    pub lipschitz_safety: f64,
    /// Weight of each coupled-matrix loss `½‖M - U V_cᵀ‖²`.
    pub coupling_weight: f64,
}

impl SolverConfig {
    pub const DEFAULT_LAMBDA: f64 = 0.1;
    pub const DEFAULT_RHO: f64 = 1.0;
    pub const DEFAULT_TOL_REL: f64 = 1e-5;
    pub const DEFAULT_MAX_ITERS: usize = 50;

    pub fn new(ranks: Vec<usize>, seed: u64) -> Self {
        let k = ranks.len();
        Self {
            ranks,
            lambda: vec![Self::DEFAULT_LAMBDA; k],
            rho: Self::DEFAULT_RHO,
            prox_core: None,
            prox_factor: None,
            core_penalty: Penalty::none(),
            factor_penalties: vec![Penalty::none(); k],
            max_iters: Self::DEFAULT_MAX_ITERS,
            tol_rel: Self::DEFAULT_TOL_REL,
            seed,
            refresh_similarity_every: None,
            loss_support: LossSupport::Observed,
            eval_support: EvalSupport::Missing,
            lipschitz_every: 10,
            lipschitz_safety: 2.0,
            coupling_weight: 1.0,
        }
    }

    pub fn order(&self) -> usize {
        self.ranks.len()
    }

    pub fn validate(&self, dims: &[usize]) -> Result<()> {
        let k = dims.len();
        if self.ranks.len() != k {
            return Err(Error::ShapeMismatch(format!("{} ranks for an order-{k} tensor", self.ranks.len())));
        }
        for (mode, (&rank, &size)) in self.ranks.iter().zip(dims).enumerate() {
            if rank == 0 || rank > size {
                return Err(Error::RankOutOfRange { mode, rank, size });
            }
        }
        let lens = [
            ("lambda", self.lambda.len()),
            ("factor_penalties", self.factor_penalties.len()),
            ("prox_factor", self.prox_factor.as_ref().map_or(k, Vec::len)),
        ];
        for (name, len) in lens {
            if len != k {
                return Err(Error::ShapeMismatch(format!("{name} has {len} entries for order {k}")));
            }
        }
        if self.lambda.iter().any(|&l| !(l >= 0.0 && l.is_finite())) {
            return Err(Error::InvalidArgument("lambda entries must be finite and nonnegative".into()));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.rho) {
            return Err(Error::InvalidArgument(format!("rho must be positive, got {}", self.rho)));
        }
        if self.prox_core.is_some_and(|p| !positive(p))
            || self.prox_factor.as_ref().is_some_and(|v| v.iter().any(|&p| !positive(p)))
        {
            return Err(Error::InvalidArgument("proximal parameters must be positive".into()));
        }
        if !(self.tol_rel >= 0.0) {
            return Err(Error::InvalidArgument("tol_rel must be nonnegative".into()));
        }
        if self.refresh_similarity_every == Some(0) || self.lipschitz_every == 0 {
            return Err(Error::InvalidArgument("refresh intervals must be at least 1".into()));
        }
        if !(self.coupling_weight >= 0.0 && self.coupling_weight.is_finite()) {
            return Err(Error::InvalidArgument("coupling_weight must be finite and nonnegative".into()));
        }
        if !(self.lipschitz_safety >= 1.0) {
            return Err(Error::InvalidArgument("lipschitz_safety must be at least 1".into()));
        }
        let penalties = std::iter::once(&self.core_penalty).chain(&self.factor_penalties);
        if penalties.clone().any(|p| !(p.weight >= 0.0 && p.weight.is_finite())) {
            return Err(Error::InvalidArgument("penalty weights must be finite and nonnegative".into()));
        }
        Ok(())
    }
}

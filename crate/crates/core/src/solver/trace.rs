use std::fmt::Write as _;
use std::path::Path;

use crate::error::Result;

/// One row of the convergence trace.
///
/// `lagrangian`, `loss`, `res_a` and `res_b_max` are in the solver's
/// normalized units; `fit` and `rse` compare the model `Z` with the
/// caller's tensor in its own units.
#[derive(Clone, Debug, PartialEq)]
pub struct TraceRecord {
    pub iter: usize,
    pub lagrangian: f64,
    pub loss: f64,
    pub fit: f64,
    pub rse: f64,
    pub res_a: f64,
    pub res_b_max: f64,
    /// Largest relative change over the primal blocks.
    pub step_norm: f64,
    /// Absolute Frobenius step of `V_1..V_K` then `G`.
    pub block_steps: Vec<f64>,
    /// Largest increase of the Lagrangian across a single primal block update.
    pub max_block_increase: f64,
    /// Step-parameter doublings needed this iteration.
    pub backtracks: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConvergenceTrace {
    pub records: Vec<TraceRecord>,
}

impl ConvergenceTrace {
    pub const CSV_HEADER: &'static str = "iter,lagrangian,loss,fit,rse,resA,resB_max,step_norm";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn last(&self) -> Option<&TraceRecord> {
        self.records.last()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::CSV_HEADER);
        s.push('\n');
        for r in &self.records {
            let _ = writeln!(
                s,
                "{},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
                r.iter, r.lagrangian, r.loss, r.fit, r.rse, r.res_a, r.res_b_max, r.step_norm
            );
        }
        s
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

//! Linearized ADMM for metric-constrained Tucker completion.
//!
//! The lower-level problem `min_X̂ ½‖X̂ x_k L_k‖² + Σ λ_l Tr(L_l S_l L_l)` is
//! replaced by its first-order conditions `A = 0`, `B_l = 0` (see
//! [`objective`]), which enter an augmented Lagrangian alongside the data fit
//! `½‖P(X - G x V)‖²` and optional penalties on `G` and `V_l`. Each iteration
//! runs a metric step on `X̂`, proximal gradient steps on `V_1..V_K` and `G`,
//! sets `Z = G x V`, and ascends the duals.
//!
//! Factors are stored `N_l x n_l`. Internally the data is divided by a power
//! of two near its norm, which keeps observed entries bit-exact.

mod config;
mod engine;
pub mod objective;
pub mod penalty;
mod state;
mod trace;

pub use config::{LossSupport, SolverConfig};
pub use engine::{
    initial_state, lipschitz_estimate, solve, solve_with_observer, update_core, update_coupling_factor, update_duals,
    update_factor, update_metric_step, Observer, Solution,
};
#[allow(unused_imports)]
pub(crate) use engine::solve_coupled_with_observer;
pub use objective::{
    augmented_lagrangian, compute_m, factor_metric, grad_lagrangian_wrt, lower_gradient_xhat_with, lower_gradients,
    lower_objective, lower_objective_with, penalty_value, residual_a, residual_b, residuals, LagrangianValue,
};
pub use penalty::{Penalty, PenaltyKind};
pub use state::{Coupling, Problem, SolverState, Variable};
pub use trace::{ConvergenceTrace, TraceRecord};

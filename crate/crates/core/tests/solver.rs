mod common;

use common::{central_diff, gauss_matrix, gauss_tensor, psd, random_instance, random_mask, rng, Instance};
use proptest::prelude::*;
use tenrec_core::harness::mask_random;
use tenrec_core::metric::{MetricFamily, SimilarityMatrices};
use tenrec_core::solver::{
    augmented_lagrangian, compute_m, grad_lagrangian_wrt, initial_state, lipschitz_estimate, lower_gradients,
    residual_a, residual_b, solve, solve_with_observer, update_core, update_duals, update_factor,
    update_metric_step, LossSupport, Penalty, Problem, SolverConfig, SolverState, Variable,
};
use tenrec_core::tensor::{kron, DenseTensor, ObservationMask, RealMatrix, TuckerModel};
use tenrec_core::Error;

// Independent oracles built from mode products, unfoldings and explicit Kronecker products.

fn metric_of(v: &RealMatrix) -> RealMatrix {
    v * v.transpose()
}

fn apply_all(x: &DenseTensor, mats: &[RealMatrix]) -> DenseTensor {
    mats.iter().enumerate().fold(x.clone(), |t, (k, m)| t.mode_product(m, k).unwrap())
}

fn oracle_a(xhat: &DenseTensor, vs: &[RealMatrix]) -> DenseTensor {
    let ls: Vec<RealMatrix> = vs.iter().map(metric_of).collect();
    apply_all(&apply_all(xhat, &ls), &ls)
}

fn oracle_b(xhat: &DenseTensor, vs: &[RealMatrix], sims: &SimilarityMatrices, lambda: f64, l: usize) -> RealMatrix {
    let ls: Vec<RealMatrix> = vs.iter().map(metric_of).collect();
    let m = apply_all(xhat, &ls);
    // Highest mode outermost, matching an unfolding whose lower modes vary fastest.
    let composite = (0..ls.len())
        .rev()
        .filter(|&i| i != l)
        .fold(RealMatrix::identity(1, 1), |acc, i| kron(&acc, &ls[i]));
    (m.unfold(l).unwrap() * composite * xhat.unfold(l).unwrap().transpose() + &ls[l] * &sims.mats()[l] * lambda) * &vs[l]
}

fn oracle_lower(xhat: &DenseTensor, vs: &[RealMatrix], sims: &SimilarityMatrices, lambda: &[f64]) -> f64 {
    let ls: Vec<RealMatrix> = vs.iter().map(metric_of).collect();
    let reg: f64 = (0..ls.len())
        .map(|l| lambda[l] * (&ls[l] * &sims.mats()[l] * &ls[l]).trace())
        .sum();
    0.5 * apply_all(xhat, &ls).norm_sq() + reg
}

fn observed_loss(problem: &Problem, z: &DenseTensor) -> f64 {
    let (x, m) = (problem.data(), problem.mask());
    0.5 * m.linear_indices().iter().map(|&i| (z.data()[i] - x.data()[i]).powi(2)).sum::<f64>()
}

/// `(eq14, eq16)` evaluated from scratch.
fn oracle_lagrangian(problem: &Problem, s: &SolverState, c: &SolverConfig) -> (f64, f64) {
    let (smooth14, smooth16) = oracle_smooth(problem, s, c);
    let mut pen = c.core_penalty.value_tensor(&s.core);
    for (v, p) in s.factors.iter().zip(&c.factor_penalties) {
        pen += p.value_matrix(v);
    }
    (smooth14 + pen, smooth16 + pen)
}

/// The Lagrangian without the penalties, which enter only through their prox.
fn oracle_smooth(problem: &Problem, s: &SolverState, c: &SolverConfig) -> (f64, f64) {
    let z = TuckerModel::new(s.core.clone(), s.factors.clone()).unwrap().reconstruct().unwrap();
    let mut base = observed_loss(problem, &z);
    for (cp, u) in problem.couplings().iter().zip(&s.coupling_factors) {
        base += 0.5 * cp.weight * (&cp.matrix - u * s.factors[cp.mode].transpose()).norm_squared();
    }
    let a = oracle_a(&s.xhat, &s.factors);
    let bs: Vec<RealMatrix> = (0..s.order())
        .map(|l| oracle_b(&s.xhat, &s.factors, problem.sims(), c.lambda[l], l))
        .collect();
    let mut inner = a.dot(&s.dual_a);
    let mut sq = a.norm_sq();
    let mut shifted = a.scaled(c.rho).sub(&s.dual_a).unwrap().norm_sq();
    for (b, y) in bs.iter().zip(&s.dual_b) {
        inner += b.dot(y);
        sq += b.norm_squared();
        shifted += (b * c.rho - y).norm_squared();
    }
    (base - inner + 0.5 * c.rho * sq, base + shifted / (2.0 * c.rho))
}

fn spectral(m: &RealMatrix) -> f64 {
    m.singular_values().max()
}

fn zero_problem(dims: &[usize], ranks: &[usize]) -> (Problem, SolverState, SolverConfig) {
    let x = DenseTensor::zeros(dims);
    let problem = Problem::new(&x, &ObservationMask::full(dims), SimilarityMatrices::identity(dims), LossSupport::Observed)
        .unwrap();
    let factors = dims.iter().zip(ranks).map(|(&n, &r)| RealMatrix::zeros(n, r)).collect();
    let state = SolverState::from_parts(&problem, factors, DenseTensor::zeros(ranks), x).unwrap();
    let mut config = SolverConfig::new(ranks.to_vec(), 0);
    config.lambda = vec![0.0; dims.len()];
    (problem, state, config)
}

fn exact_tucker(dims: &[usize], ranks: &[usize], seed: u64) -> DenseTensor {
    let mut r = rng(seed);
    let factors = dims.iter().zip(ranks).map(|(&n, &k)| gauss_matrix(n, k, &mut r)).collect();
    TuckerModel::new(gauss_tensor(ranks, &mut r), factors).unwrap().reconstruct().unwrap()
}

#[test]
fn compute_m_cases() {
    let mut r = rng(1);
    let x = gauss_tensor(&[3, 4, 2], &mut r);
    assert_eq!(compute_m(&x, &MetricFamily::identity(&[3, 4, 2])).unwrap(), x);
    let zero = MetricFamily::new(vec![RealMatrix::zeros(3, 3), RealMatrix::zeros(4, 4), RealMatrix::zeros(2, 2)]).unwrap();
    assert_eq!(compute_m(&x, &zero).unwrap().norm_sq(), 0.0);
    let mats: Vec<RealMatrix> = [3, 4, 2].iter().map(|&n| psd(n, &mut r)).collect();
    let m = compute_m(&x, &MetricFamily::new(mats.clone()).unwrap()).unwrap();
    let want = apply_all(&x, &mats);
    assert!(m.sub(&want).unwrap().frobenius_norm() <= 1e-12 * want.frobenius_norm());
}

#[test]
fn residual_a_cases() {
    let Instance { mut state, .. } = random_instance(&[3, 4, 2], &[2, 2, 2], false, 2);
    let want = oracle_a(&state.xhat, &state.factors);
    assert!(residual_a(&state).unwrap().sub(&want).unwrap().frobenius_norm() <= 1e-12 * want.frobenius_norm());

    state.factors = vec![RealMatrix::identity(3, 3), RealMatrix::identity(4, 4), RealMatrix::identity(2, 2)];
    assert_eq!(residual_a(&state).unwrap(), state.xhat);
    state.xhat = DenseTensor::zeros(&[3, 4, 2]);
    assert_eq!(residual_a(&state).unwrap().norm_sq(), 0.0);
}

#[test]
fn residual_b_cases() {
    let Instance { problem, mut state, config } = random_instance(&[3, 4, 5], &[2, 3, 2], false, 3);
    for l in 0..3 {
        let want = oracle_b(&state.xhat, &state.factors, problem.sims(), config.lambda[l], l);
        let got = residual_b(&state, problem.sims(), config.lambda[l], l).unwrap();
        assert!((got - &want).norm() <= 1e-12 * want.norm(), "mode {l}");
    }
    state.xhat = DenseTensor::zeros(&[3, 4, 5]);
    assert_eq!(residual_b(&state, problem.sims(), 0.0, 1).unwrap().norm(), 0.0);
    let Instance { problem, mut state, .. } = random_instance(&[3, 4, 5], &[2, 3, 2], false, 4);
    state.factors[2] = RealMatrix::zeros(5, 2);
    assert_eq!(residual_b(&state, problem.sims(), 0.7, 2).unwrap().norm(), 0.0);
}

#[test]
fn lower_gradients_cases() {
    let (problem, state, config) = zero_problem(&[2, 3, 2], &[2, 2, 2]);
    let (gx, gv) = lower_gradients(&state, problem.sims(), &config.lambda).unwrap();
    assert_eq!(gx.norm_sq(), 0.0);
    assert!(gv.iter().all(|g| g.norm() == 0.0));

    let mut r = rng(5);
    let xhat = gauss_tensor(&[2, 3, 2], &mut r);
    let eye: Vec<RealMatrix> = [2, 3, 2].iter().map(|&n| RealMatrix::identity(n, n)).collect();
    let problem =
        Problem::new(&xhat, &ObservationMask::full(&[2, 3, 2]), SimilarityMatrices::identity(&[2, 3, 2]), LossSupport::Observed)
            .unwrap();
    let state = SolverState::from_parts(&problem, eye, gauss_tensor(&[2, 3, 2], &mut r), xhat.clone()).unwrap();
    let (gx, _) = lower_gradients(&state, problem.sims(), &[0.0; 3]).unwrap();
    assert!(gx.sub(&xhat).unwrap().frobenius_norm() <= 1e-14);
}

/// Central-difference error of `analytic`; roundoff is relative to `f`, so tiny gradients get a floor.
fn fd_err(analytic: &[f64], x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> f64 {
    let floor = 1e-4 * f(x0).abs().max(1.0);
    let num = central_diff(x0, f);
    let scale = num.iter().fold(floor, |m, v| m.max(v.abs()));
    analytic.iter().zip(&num).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale
}

fn check_lower_gradients(inst: &Instance) -> f64 {
    let Instance { problem, state, config } = inst;
    let sims = problem.sims();
    let (gx, gv) = lower_gradients(state, sims, &config.lambda).unwrap();
    let mut worst = fd_err(gx.data(), state.xhat.data(), |x| {
        let xh = DenseTensor::new(state.xhat.dims().to_vec(), x.to_vec()).unwrap();
        oracle_lower(&xh, &state.factors, sims, &config.lambda)
    });
    for (l, g) in gv.iter().enumerate() {
        let e = fd_err(g.as_slice(), state.factors[l].as_slice(), |x| {
            let mut vs = state.factors.clone();
            vs[l].as_mut_slice().copy_from_slice(x);
            oracle_lower(&state.xhat, &vs, sims, &config.lambda)
        });
        worst = worst.max(e);
    }
    worst
}

fn check_lagrangian_gradients(inst: &Instance) -> f64 {
    let Instance { problem, state, config } = inst;
    let mut vars: Vec<Variable> = (0..state.order()).map(Variable::Factor).collect();
    vars.extend([Variable::Core, Variable::Xhat, Variable::Z]);
    vars.extend((0..problem.couplings().len()).map(Variable::CouplingFactor));
    let mut worst: f64 = 0.0;
    for var in vars {
        let analytic = grad_lagrangian_wrt(problem, state, config, var).unwrap();
        let e = fd_err(&analytic, &state.block(var).unwrap(), |x| {
            let mut s = state.clone();
            s.set_block(var, x).unwrap();
            match var {
                Variable::Z => observed_loss(problem, &s.z),
                // U appears only in its coupling term.
                Variable::CouplingFactor(c) => {
                    let cp = &problem.couplings()[c];
                    0.5 * cp.weight * (&cp.matrix - &s.coupling_factors[c] * s.factors[cp.mode].transpose()).norm_squared()
                }
                // Same gradient as the completed square, without its large constant.
                _ => oracle_smooth(problem, &s, config).0,
            }
        });
        assert!(e <= 1e-6, "{var:?}: {e}");
        worst = worst.max(e);
    }
    worst
}

#[test]
fn lower_gradients_match_finite_differences() {
    let inst = random_instance(&[3, 4, 2], &[2, 2, 2], false, 6);
    assert!(check_lower_gradients(&inst) <= 1e-6);
}

#[test]
fn lagrangian_gradients_match_finite_differences_4x4x4() {
    let mut inst = random_instance(&[4, 4, 4], &[2, 3, 2], true, 7);
    inst.config.core_penalty = Penalty::l1(0.3);
    check_lagrangian_gradients(&inst);
}

#[test]
fn lagrangian_forms_agree_with_oracle() {
    for seed in 0..10 {
        let Instance { problem, state, config } = random_instance(&[3, 4, 3], &[2, 2, 3], seed % 2 == 0, 20 + seed);
        let lv = augmented_lagrangian(&problem, &state, &config).unwrap();
        let (e14, e16) = oracle_lagrangian(&problem, &state, &config);
        assert!((lv.eq14 - e14).abs() <= 1e-10 * e14.abs().max(1.0));
        assert!((lv.eq16 - e16).abs() <= 1e-10 * e16.abs().max(1.0));
        assert!((lv.eq16 - lv.dual_constant - lv.eq14).abs() <= 1e-9 * lv.eq14.abs().max(1.0));
    }
}

#[test]
fn lagrangian_of_zero_state_is_half_data_norm() {
    let mut r = rng(8);
    let dims = [3, 2, 4];
    let x = gauss_tensor(&dims, &mut r);
    let problem = Problem::new(&x, &ObservationMask::full(&dims), SimilarityMatrices::identity(&dims), LossSupport::Observed)
        .unwrap();
    let zeros = dims.iter().map(|&n| RealMatrix::zeros(n, 2)).collect();
    let state = SolverState::from_parts(&problem, zeros, DenseTensor::zeros(&[2, 2, 2]), DenseTensor::zeros(&dims)).unwrap();
    let config = SolverConfig::new(vec![2, 2, 2], 0);
    let lv = augmented_lagrangian(&problem, &state, &config).unwrap();
    assert!((lv.eq14 - 0.5 * x.norm_sq()).abs() <= 1e-12 * x.norm_sq());
    // Zero duals: the completed square adds nothing.
    let Instance { problem, mut state, config } = random_instance(&[3, 3, 3], &[2, 2, 2], true, 9);
    state.dual_a = DenseTensor::zeros(&[3, 3, 3]);
    state.dual_b.iter_mut().for_each(|y| y.fill(0.0));
    let lv = augmented_lagrangian(&problem, &state, &config).unwrap();
    assert_eq!(lv.dual_constant, 0.0);
    assert!((lv.eq14 - lv.eq16).abs() <= 1e-12 * lv.eq14.abs());
}

#[test]
fn gradient_cases() {
    let (problem, state, config) = zero_problem(&[2, 3, 2], &[2, 2, 2]);
    for var in [Variable::Factor(0), Variable::Factor(2), Variable::Core, Variable::Xhat, Variable::Z] {
        let g = grad_lagrangian_wrt(&problem, &state, &config, var).unwrap();
        assert!(g.iter().all(|&v| v == 0.0), "{var:?}");
    }
    assert!(matches!(
        grad_lagrangian_wrt(&problem, &state, &config, Variable::Factor(3)),
        Err(Error::ModeOutOfRange { .. })
    ));
    assert!(grad_lagrangian_wrt(&problem, &state, &config, Variable::CouplingFactor(0)).is_err());

    // Identity factors: the core gradient is the residual G - X.
    let mut r = rng(10);
    let dims = [2, 3, 2];
    let x = gauss_tensor(&dims, &mut r);
    let problem = Problem::new(&x, &ObservationMask::full(&dims), SimilarityMatrices::identity(&dims), LossSupport::Observed)
        .unwrap();
    let eye = dims.iter().map(|&n| RealMatrix::identity(n, n)).collect();
    let g = gauss_tensor(&dims, &mut r);
    let state = SolverState::from_parts(&problem, eye, g.clone(), gauss_tensor(&dims, &mut r)).unwrap();
    let config = SolverConfig::new(dims.to_vec(), 0);
    let grad = grad_lagrangian_wrt(&problem, &state, &config, Variable::Core).unwrap();
    let want = g.sub(&x).unwrap();
    assert!(grad.iter().zip(want.data()).all(|(a, b)| (a - b).abs() <= 1e-14));
}

#[test]
fn factor_update_cases() {
    let (problem, mut state, config) = zero_problem(&[3, 2, 2], &[2, 2, 1]);
    let mut r = rng(11);
    state.factors[0] = gauss_matrix(3, 2, &mut r);
    let v = update_factor(&problem, &state, &config, 0, 1.0).unwrap();
    assert_eq!(v, state.factors[0]);
    let core = update_core(&problem, &state, &config, 1.0).unwrap();
    assert_eq!(core, state.core);

    let Instance { problem, state, mut config } = random_instance(&[3, 4, 3], &[2, 2, 2], false, 12);
    config.factor_penalties[1] = Penalty::l1(1e9);
    assert_eq!(update_factor(&problem, &state, &config, 1, 1.0).unwrap().norm(), 0.0);
    config.core_penalty = Penalty::l1(1e9);
    assert_eq!(update_core(&problem, &state, &config, 1.0).unwrap().norm_sq(), 0.0);
    config.lambda = vec![0.0; 3];
    assert!(update_factor(&problem, &state, &config, 3, 1.0).is_err());
}

#[test]
fn core_sparsity_grows_with_l1_weight() {
    let Instance { problem, state, mut config } = random_instance(&[4, 4, 4], &[3, 3, 3], false, 13);
    let prox = 2.0 * lipschitz_estimate(&problem, &state, &config, Variable::Core).unwrap();
    let zeros: Vec<usize> = [0.01, 0.5, 5.0]
        .iter()
        .map(|&w| {
            config.core_penalty = Penalty::l1(w);
            update_core(&problem, &state, &config, prox).unwrap().data().iter().filter(|&&v| v == 0.0).count()
        })
        .collect();
    assert!(zeros.windows(2).all(|w| w[0] <= w[1]), "{zeros:?}");
    assert!(zeros[2] > zeros[0]);
}

fn descent_violation(inst: &Instance) -> f64 {
    let Instance { problem, state, config } = inst;
    let before = augmented_lagrangian(problem, state, config).unwrap().eq16;
    let mut worst = f64::NEG_INFINITY;
    for var in (0..state.order()).map(Variable::Factor).chain([Variable::Core]) {
        let prox = 2.0 * lipschitz_estimate(problem, state, config, var).unwrap();
        let mut s = state.clone();
        match var {
            Variable::Factor(l) => s.factors[l] = update_factor(problem, state, config, l, prox).unwrap(),
            _ => s.core = update_core(problem, state, config, prox).unwrap(),
        }
        let after = augmented_lagrangian(problem, &s, config).unwrap().eq16;
        worst = worst.max((after - before) / before.abs().max(1.0));
    }
    worst
}

#[test]
fn block_updates_descend_with_estimated_parameters() {
    for seed in 0..8 {
        let mut inst = random_instance(&[4, 3, 4], &[2, 2, 3], seed % 2 == 1, 40 + seed);
        if seed % 3 == 0 {
            inst.config.core_penalty = Penalty::l1(0.1);
            inst.config.factor_penalties = vec![Penalty::l2_squared(0.2); 3];
        }
        let v = descent_violation(&inst);
        assert!(v <= 1e-8, "seed {seed}: {v}");
    }
}

#[test]
fn estimated_parameters_rarely_undershoot() {
    // The factor blocks are high-degree polynomials, so the local curvature can grow along the step.
    let violations = (0..200u64)
        .filter(|&seed| descent_violation(&random_instance(&[3, 4, 3], &[2, 2, 2], seed % 2 == 0, seed)) > 1e-8)
        .count();
    assert!(violations <= 4, "{violations} of 200");
}

#[test]
fn metric_step_cases() {
    // Fully observed: nothing is free.
    let mut r = rng(14);
    let dims = [3, 3, 2];
    let x = gauss_tensor(&dims, &mut r);
    let full = ObservationMask::full(&dims);
    let sims = SimilarityMatrices::identity(&dims);
    let problem = Problem::new(&x, &full, sims.clone(), LossSupport::Observed).unwrap();
    let vs: Vec<RealMatrix> = dims.iter().map(|&n| gauss_matrix(n, 2, &mut r)).collect();
    let state = SolverState::from_parts(&problem, vs.clone(), gauss_tensor(&[2, 2, 2], &mut r), x.clone()).unwrap();
    let config = SolverConfig::new(vec![2, 2, 2], 0);
    assert_eq!(update_metric_step(&problem, &state, &config).unwrap().0, x);

    // λ = 0 and identity S: a plain gradient step on the free entries.
    let mask = random_mask(&dims, 0.5, &mut r);
    let problem = Problem::new(&x, &mask, sims, LossSupport::Observed).unwrap();
    let mut xhat = gauss_tensor(&dims, &mut r);
    problem.pin(&mut xhat);
    let state = SolverState::from_parts(&problem, vs.clone(), gauss_tensor(&[2, 2, 2], &mut r), xhat.clone()).unwrap();
    let mut config = SolverConfig::new(vec![2, 2, 2], 0);
    config.lambda = vec![0.0; 3];
    let step = 1.0 / vs.iter().map(|v| spectral(v).powi(4)).product::<f64>();
    let grad = oracle_a(&xhat, &vs);
    let got = update_metric_step(&problem, &state, &config).unwrap().0;
    for i in 0..x.len() {
        let want = if mask.contains_linear(i) { x.data()[i] } else { xhat.data()[i] - step * grad.data()[i] };
        assert!((got.data()[i] - want).abs() <= 1e-12 * (1.0 + want.abs()));
    }
}

#[test]
fn metric_step_decreases_lower_objective() {
    for seed in 0..10 {
        let Instance { problem, mut state, config } = random_instance(&[4, 3, 5], &[2, 2, 3], false, 60 + seed);
        problem.pin(&mut state.xhat);
        let before = oracle_lower(&state.xhat, &state.factors, problem.sims(), &config.lambda);
        let (xhat, metric) = update_metric_step(&problem, &state, &config).unwrap();
        let after = oracle_lower(&xhat, &state.factors, problem.sims(), &config.lambda);
        assert!(after <= before + 1e-12 * before, "seed {seed}: {before} -> {after}");
        for &i in problem.mask().linear_indices() {
            assert_eq!(xhat.data()[i], problem.data().data()[i]);
        }
        for l in metric.mats() {
            assert!((l.determinant() - 1.0).abs() <= 1e-8);
        }
    }
}

#[test]
fn dual_update_cases() {
    let Instance { mut state, .. } = random_instance(&[2, 3, 2], &[1, 2, 2], false, 15);
    let (ya, yb) = (state.dual_a.clone(), state.dual_b.clone());
    let zero_b: Vec<RealMatrix> = yb.iter().map(|y| RealMatrix::zeros(y.nrows(), y.ncols())).collect();
    update_duals(&mut state, &DenseTensor::zeros(&[2, 3, 2]), &zero_b, 1.3);
    assert_eq!((&state.dual_a, &state.dual_b), (&ya, &yb));

    let mut r = rng(16);
    let ra = gauss_tensor(&[2, 3, 2], &mut r);
    let rb: Vec<RealMatrix> = yb.iter().map(|y| gauss_matrix(y.nrows(), y.ncols(), &mut r)).collect();
    state.dual_a = DenseTensor::zeros(&[2, 3, 2]);
    state.dual_b = zero_b.clone();
    update_duals(&mut state, &ra, &rb, 0.7);
    assert_eq!(state.dual_a, ra.scaled(-0.7));
    for (y, b) in state.dual_b.iter().zip(&rb) {
        assert_eq!(*y, b * -0.7);
    }

    state.dual_a = ya.clone();
    state.dual_b = yb.clone();
    update_duals(&mut state, &ra, &rb, 0.5);
    update_duals(&mut state, &ra, &rb, 0.5);
    assert!(state.dual_a.sub(&ya.sub(&ra).unwrap()).unwrap().frobenius_norm() <= 1e-14);
    for ((y, y0), b) in state.dual_b.iter().zip(&yb).zip(&rb) {
        assert!((y - (y0 - b)).norm() <= 1e-14);
    }
}

#[test]
fn fully_observed_exact_tensor_is_fit() {
    let x = exact_tucker(&[6, 6, 6], &[2, 2, 2], 17);
    let mut config = SolverConfig::new(vec![2, 2, 2], 0);
    config.max_iters = 10;
    config.rho = 1e-6;
    let sol = solve(&x, &ObservationMask::full(&[6, 6, 6]), None, &config).unwrap();
    let fit = sol.trace.last().unwrap().fit;
    assert!(fit >= 1.0 - 1e-6, "fit {fit}");
    assert_eq!(sol.xhat, x);
}

#[test]
fn half_observed_rank_three_is_recovered() {
    let dims = [30, 30, 30];
    let x = tenrec_core::harness::synthetic_tucker(&dims, &[3, 3, 3], 0).unwrap();
    let mask = mask_random(&dims, 0.5, 0).unwrap();
    let sol = solve(&x, &mask, None, &SolverConfig::new(vec![3, 3, 3], 0)).unwrap();
    assert!(sol.trace.len() <= 51);
    let last = sol.trace.last().unwrap();
    assert!(last.fit >= 0.95 && last.rse <= 0.05, "fit {} rse {}", last.fit, last.rse);
}

#[test]
fn iterates_stay_pinned_and_consistent() {
    let dims = [7, 6, 5];
    let x = exact_tucker(&dims, &[2, 2, 2], 18);
    let mask = mask_random(&dims, 0.4, 18).unwrap();
    let mut config = SolverConfig::new(vec![2, 2, 2], 3);
    config.max_iters = 15;
    config.tol_rel = 0.0;
    config.refresh_similarity_every = Some(5);
    config.factor_penalties = vec![Penalty::l2_squared(1e-3); 3];
    let mut seen = 0;
    let sol = solve_with_observer(&x, &mask, None, &config, &mut |p, s, rec| {
        for &i in mask.linear_indices() {
            assert_eq!(s.xhat.data()[i], p.data().data()[i], "iteration {}", rec.iter);
        }
        let z = s.model().unwrap().reconstruct().unwrap();
        if rec.iter > 0 {
            assert!(z.sub(&s.z).unwrap().frobenius_norm() <= 1e-10 * z.frobenius_norm().max(1.0));
            assert!(rec.max_block_increase <= 1e-8 * rec.lagrangian.abs().max(1.0));
        }
        seen += 1;
    })
    .unwrap();
    assert_eq!(seen, 16);
    for &i in mask.linear_indices() {
        assert_eq!(sol.xhat.data()[i], x.data()[i]);
        assert_eq!(sol.completed.data()[i], x.data()[i]);
    }
}

#[test]
fn converged_runs_are_stationary() {
    for seed in 0..4 {
        let x = exact_tucker(&[6, 5, 4], &[2, 2, 2], 19 + seed);
        let mut config = SolverConfig::new(vec![2, 2, 2], 0);
        config.rho = 1e-6;
        config.max_iters = 200;
        let sol = solve(&x, &ObservationMask::full(&[6, 5, 4]), None, &config).unwrap();
        assert!(sol.converged);
        // The recorded step is the largest relative prox-gradient step over the primal blocks.
        let step = sol.trace.last().unwrap().step_norm;
        assert!(step <= 10.0 * config.tol_rel, "seed {seed}: {step}");
    }
}

#[test]
fn solve_is_deterministic() {
    let dims = [8, 7, 6];
    let x = exact_tucker(&dims, &[2, 3, 2], 21);
    let mask = mask_random(&dims, 0.5, 21).unwrap();
    let mut config = SolverConfig::new(vec![2, 3, 2], 9);
    config.max_iters = 8;
    let a = solve(&x, &mask, None, &config).unwrap();
    let b = solve(&x, &mask, None, &config).unwrap();
    assert_eq!(a.trace.to_csv(), b.trace.to_csv());
    assert_eq!(a.completed, b.completed);
    let csv = a.trace.to_csv();
    assert_eq!(csv.lines().next(), Some("iter,lagrangian,loss,fit,rse,resA,resB_max,step_norm"));
    assert_eq!(csv.lines().count(), a.trace.len() + 1);
    assert!(a.trace.len() <= config.max_iters + 1);
}

#[test]
fn explicit_similarities_and_prox_parameters_are_used() {
    let dims = [6, 5, 4];
    let x = exact_tucker(&dims, &[2, 2, 2], 22);
    let mask = mask_random(&dims, 0.6, 22).unwrap();
    let mut r = rng(22);
    let sims = SimilarityMatrices::new(dims.iter().map(|&n| psd(n, &mut r)).collect()).unwrap();
    let mut config = SolverConfig::new(vec![2, 2, 2], 1);
    config.max_iters = 5;
    config.prox_core = Some(50.0);
    config.prox_factor = Some(vec![50.0; 3]);
    let a = solve(&x, &mask, Some(&sims), &config).unwrap();
    let b = solve(&x, &mask, None, &config).unwrap();
    assert_ne!(a.trace.to_csv(), b.trace.to_csv());
    assert!(a.trace.records.iter().all(|rec| rec.lagrangian.is_finite()));
}

#[test]
fn solve_input_errors() {
    let x = DenseTensor::zeros(&[3, 3]);
    let empty = ObservationMask::from_linear(&[3, 3], vec![]);
    if let Ok(mask) = empty {
        assert!(matches!(solve(&x, &mask, None, &SolverConfig::new(vec![1, 1], 0)), Err(Error::EmptyMask)));
    }
    let full = ObservationMask::full(&[3, 3]);
    assert!(solve(&x, &full, None, &SolverConfig::new(vec![4, 1], 0)).is_err());
    let mut bad = x.clone();
    bad.data_mut()[4] = f64::NAN;
    assert!(matches!(solve(&bad, &full, None, &SolverConfig::new(vec![1, 1], 0)), Err(Error::NonFinite(_))));
    let mut config = SolverConfig::new(vec![1, 1], 0);
    config.rho = 0.0;
    assert!(solve(&x, &full, None, &config).is_err());
}

#[test]
fn initial_state_follows_hosvd() {
    let dims = [5, 4, 6];
    let x = exact_tucker(&dims, &[2, 2, 2], 23);
    let mask = mask_random(&dims, 0.7, 23).unwrap();
    let problem = Problem::new(&x, &mask, SimilarityMatrices::identity(&dims), LossSupport::Observed).unwrap();
    let config = SolverConfig::new(vec![2, 2, 2], 0);
    let s = initial_state(&problem, &config).unwrap();
    assert_eq!(s.z, problem.data().clone());
    for v in &s.factors {
        assert!((v.transpose() * v - RealMatrix::identity(2, 2)).norm() <= 1e-10);
    }
    for &i in mask.linear_indices() {
        assert_eq!(s.xhat.data()[i], x.data()[i]);
    }
    assert_eq!(s.dual_a.norm_sq(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn every_gradient_matches_finite_differences(
        dims in prop::collection::vec(2usize..5, 3),
        rank_seed in any::<u64>(),
        couple in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let ranks: Vec<usize> = dims.iter().enumerate().map(|(k, &n)| 1 + ((rank_seed >> (8 * k)) as usize % n.min(3))).collect();
        let inst = random_instance(&dims, &ranks, couple, seed);
        prop_assert!(check_lower_gradients(&inst) <= 1e-6);
        prop_assert!(check_lagrangian_gradients(&inst) <= 1e-6);
    }

    #[test]
    fn penalties_are_nonnegative(w in 0.0f64..10.0, vals in prop::collection::vec(-5.0f64..5.0, 6)) {
        for p in [Penalty::none(), Penalty::l1(w), Penalty::l2_squared(w), Penalty::nuclear(w)] {
            prop_assert!(p.value(&vals, (2, 3)) >= 0.0);
        }
    }

    #[test]
    fn backtracked_block_steps_descend(dims in prop::collection::vec(3usize..6, 3), seed in any::<u64>()) {
        let x = exact_tucker(&dims, &[2, 2, 2], seed);
        let mask = mask_random(&dims, 0.5, seed).unwrap();
        let mut config = SolverConfig::new(vec![2, 2, 2], seed);
        config.max_iters = 6;
        config.tol_rel = 0.0;
        let mut worst = f64::NEG_INFINITY;
        solve_with_observer(&x, &mask, None, &config, &mut |_, _, rec| {
            if rec.iter > 0 {
                worst = worst.max(rec.max_block_increase / rec.lagrangian.abs().max(1.0));
            }
        })
        .unwrap();
        prop_assert!(worst <= 1e-8, "{}", worst);
    }
}

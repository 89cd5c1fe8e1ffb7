#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tenrec_core::metric::SimilarityMatrices;
use tenrec_core::solver::{Coupling, LossSupport, Problem, SolverConfig, SolverState};
use tenrec_core::tensor::{DenseTensor, ObservationMask, RealMatrix};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn gauss_tensor(dims: &[usize], rng: &mut ChaCha8Rng) -> DenseTensor {
    DenseTensor::from_fn(dims, |_| rng.sample(StandardNormal))
}

pub fn gauss_matrix(r: usize, c: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    RealMatrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Random symmetric PSD matrix `BᵀB / n`.
pub fn psd(n: usize, rng: &mut ChaCha8Rng) -> RealMatrix {
    let b = gauss_matrix(n, n, rng);
    b.transpose() * b / n as f64
}

pub fn random_mask(dims: &[usize], rate: f64, rng: &mut ChaCha8Rng) -> ObservationMask {
    let total: usize = dims.iter().product();
    let mut cells: Vec<usize> = (0..total).filter(|_| rng.random::<f64>() < rate).collect();
    if cells.is_empty() {
        cells.push(0);
    }
    ObservationMask::from_linear(dims, cells).unwrap()
}

/// A random problem and a random (nonzero-dual) state for gradient checks.
pub struct Instance {
    pub problem: Problem,
    pub state: SolverState,
    pub config: SolverConfig,
}

pub fn random_instance(dims: &[usize], ranks: &[usize], couple: bool, seed: u64) -> Instance {
    let mut r = rng(seed);
    let x = gauss_tensor(dims, &mut r);
    let mask = random_mask(dims, 0.6, &mut r);
    let sims = SimilarityMatrices::new(dims.iter().map(|&n| psd(n, &mut r)).collect()).unwrap();
    let mut problem = Problem::new(&x, &mask, sims, LossSupport::Observed).unwrap();
    if couple {
        let matrix = gauss_matrix(3, dims[0], &mut r);
        problem = problem
            .with_coupling(Coupling {
                mode: 0,
                matrix,
                weight: 0.7,
            })
            .unwrap();
    }
    let factors: Vec<RealMatrix> = dims
        .iter()
        .zip(ranks)
        .map(|(&n, &k)| gauss_matrix(n, k, &mut r) * 0.5)
        .collect();
    let core = gauss_tensor(ranks, &mut r);
    let xhat = gauss_tensor(dims, &mut r);
    let mut state = SolverState::from_parts(&problem, factors, core, xhat).unwrap();
    state.dual_a = gauss_tensor(dims, &mut r).scaled(0.3);
    for y in state.dual_b.iter_mut() {
        *y = gauss_matrix(y.nrows(), y.ncols(), &mut r) * 0.3;
    }
    for u in state.coupling_factors.iter_mut() {
        *u = gauss_matrix(u.nrows(), u.ncols(), &mut r);
    }
    state.z = gauss_tensor(dims, &mut r);
    let mut config = SolverConfig::new(ranks.to_vec(), seed);
    config.lambda = (0..dims.len()).map(|_| r.random_range(0.05..1.0)).collect();
    config.rho = r.random_range(0.5..2.0);
    Instance { problem, state, config }
}

/// Central differences of `f` at `x0`, step `1e-5 (1 + |x|)` per coordinate.
pub fn central_diff(x0: &[f64], mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut x = x0.to_vec();
    (0..x0.len())
        .map(|i| {
            let h = 1e-5 * (1.0 + x0[i].abs());
            x[i] = x0[i] + h;
            let fp = f(&x);
            x[i] = x0[i] - h;
            let fm = f(&x);
            x[i] = x0[i];
            (fp - fm) / (2.0 * h)
        })
        .collect()
}

/// `max |a - b| / max(max |b|, 1e-8)`.
pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let scale = numeric.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()))
        / scale
}

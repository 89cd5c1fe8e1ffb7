//! `tenrec`: completion, decomposition, coupled recovery and verification
//! commands on top of `tenrec-core`.
//!
//! Exit status is 0 on success, 1 on usage or input errors and 2 on numerical
//! failures. Solver settings resolve as flags, then `--config` file, then
//! defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use tenrec_core::coupled::{
    coupled_solve, reconstruction_error, recovery_congruence, results_csv, ResultRow, SimulationSpec,
};
use tenrec_core::harness::gradcheck::{gradient_suite, kempf_ness_stationarity};
use tenrec_core::harness::{
    fit, mask_random, parse_list, rse, synthetic_tucker, ConfigFile, EvalReport, EvalSupport, Support,
};
use tenrec_core::solver::{solve, LossSupport, Penalty, Solution, SolverConfig};
use tenrec_core::tensor::io::{read_mask, read_tensor, write_mask, write_matrix, write_tensor};
use tenrec_core::tensor::{DenseTensor, ObservationMask};
use tenrec_core::Error;

/// Largest finite-difference error `gradcheck` accepts.
const GRADCHECK_TOL: f64 = 1e-6;

#[derive(Parser, Debug)]
#[command(name = "tenrec", version, about = "Metric-constrained tensor completion and decomposition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Complete a partially observed tensor (synthetic instance when no tensor is given).
    Complete(CompleteArgs),
    /// Decompose a fully observed tensor.
    Decompose(DecomposeArgs),
    /// Solve simulated coupled tensor-matrix problems over several seeds.
    Coupled(CoupledArgs),
    /// Write a simulated coupled problem to files.
    Simulate(SimulateArgs),
    /// Compare analytic gradients with central finite differences.
    Gradcheck(GradcheckArgs),
    /// Fit and RSE between two tensors.
    Eval(EvalArgs),
}

#[derive(Args, Debug, Default)]
struct SolverFlags {
    /// `key = value` file; flags take precedence over it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Tucker ranks, e.g. `3,3,3`.
    #[arg(long)]
    ranks: Option<String>,
    /// One value for every mode or a comma-separated list.
    #[arg(long)]
    lambda: Option<String>,
    #[arg(long)]
    rho: Option<f64>,
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    tol: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// `none`, `l1:w`, `l2sq:w` or `nuclear:w`.
    #[arg(long)]
    core_penalty: Option<String>,
    /// One penalty for every factor.
    #[arg(long)]
    factor_penalty: Option<String>,
    #[arg(long)]
    prox_core: Option<f64>,
    /// Comma-separated, one per mode.
    #[arg(long)]
    prox_factor: Option<String>,
    /// `observed` or `all`.
    #[arg(long)]
    loss_support: Option<String>,
    /// `missing`, `observed` or `all`.
    #[arg(long)]
    eval_support: Option<String>,
    /// Rebuild similarities from the completion every N iterations.
    #[arg(long)]
    refresh_similarity: Option<usize>,
    #[arg(long)]
    lipschitz_every: Option<usize>,
    #[arg(long)]
    coupling_weight: Option<f64>,
}

#[derive(Args, Debug)]
struct CompleteArgs {
    /// Input tensor (`dtns 1`).
    #[arg(long, requires = "mask")]
    tensor: Option<PathBuf>,
    /// Observed cells (`dmsk 1`).
    #[arg(long)]
    mask: Option<PathBuf>,
    /// Dims of the synthetic instance used without `--tensor`.
    #[arg(long, default_value = "30,30,30", conflicts_with = "tensor")]
    synthetic: String,
    /// Observed fraction of the synthetic instance.
    #[arg(long, default_value_t = 0.5, conflicts_with = "tensor")]
    observe: f64,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long, default_value = "tenrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct DecomposeArgs {
    #[arg(long)]
    tensor: PathBuf,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long, default_value = "tenrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct CoupledArgs {
    /// Simulation spec file (`sizes:`, `modes:`, `rank:`, `noise:`, `seed:`).
    #[arg(long)]
    spec: PathBuf,
    /// Number of consecutive seeds starting at the spec's seed.
    #[arg(long, default_value_t = 1)]
    seeds: u64,
    #[command(flatten)]
    solver: SolverFlags,
    #[arg(long, default_value = "tenrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    spec: PathBuf,
    /// Overrides the spec's seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "tenrec-out")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 20)]
    instances: usize,
    /// Also check stationarity of the determinant-one coordinate normalization.
    #[arg(long)]
    kempf_ness: bool,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Reference tensor.
    reference: PathBuf,
    /// Estimate.
    estimate: PathBuf,
    /// Observed cells; evaluation then defaults to the cells outside it.
    #[arg(long)]
    mask: Option<PathBuf>,
    /// `missing`, `observed` or `all`.
    #[arg(long)]
    support: Option<String>,
}

/// Failure with the exit code it maps to.
struct Failure {
    code: u8,
    msg: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Self {
            code: if e.is_numeric() { 2 } else { 1 },
            msg: e.to_string(),
        }
    }
}

fn usage(msg: impl Into<String>) -> Failure {
    Failure { code: 1, msg: msg.into() }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Complete(a) => run_complete(a),
        Command::Decompose(a) => run_decompose(a),
        Command::Coupled(a) => run_coupled(a),
        Command::Simulate(a) => run_simulate(a),
        Command::Gradcheck(a) => run_gradcheck(a),
        Command::Eval(a) => run_eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("tenrec: {}", f.msg);
            ExitCode::from(f.code)
        }
    }
}

const CONFIG_KEYS: &[&str] = &[
    "ranks",
    "lambda",
    "rho",
    "max_iters",
    "tol_rel",
    "seed",
    "core_penalty",
    "factor_penalty",
    "prox_core",
    "prox_factor",
    "loss_support",
    "eval_support",
    "refresh_similarity_every",
    "lipschitz_every",
    "coupling_weight",
];

fn parse_flag<T: std::str::FromStr>(name: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| usage(format!("bad value `{v}` for {name}")))
}

/// Per-mode list, broadcasting a single value.
fn per_mode(name: &str, v: &str, k: usize) -> CliResult<Vec<f64>> {
    let vals: Vec<f64> = parse_list(v).map_err(|e| usage(format!("{name}: {e}")))?;
    match vals.len() {
        1 => Ok(vec![vals[0]; k]),
        n if n == k => Ok(vals),
        n => Err(usage(format!("{name} has {n} entries for {k} modes"))),
    }
}

impl SolverFlags {
    /// Whether a setting was given by flag or config file.
    fn sets(&self, key: &str) -> CliResult<bool> {
        if key == "eval_support" && self.eval_support.is_some() {
            return Ok(true);
        }
        Ok(match &self.config {
            Some(p) => ConfigFile::read(p)?.get(key).is_some(),
            None => false,
        })
    }

    /// Resolves flags over the config file over `defaults`.
    fn resolve(&self, default_ranks: Option<Vec<usize>>, order: usize) -> CliResult<SolverConfig> {
        let file = match &self.config {
            Some(p) => ConfigFile::read(p)?,
            None => ConfigFile::default(),
        };
        if let Some(k) = file.keys().find(|k| !CONFIG_KEYS.contains(k)) {
            return Err(usage(format!("unknown config key `{k}`")));
        }
        let pick = |flag: &Option<String>, key: &str| flag.clone().or_else(|| file.get(key).map(str::to_string));
        let pick_num = |flag: Option<String>, key: &str| flag.or_else(|| file.get(key).map(str::to_string));

        let ranks = match pick(&self.ranks, "ranks") {
            Some(r) => parse_list::<usize>(&r).map_err(|e| usage(e.to_string()))?,
            None => default_ranks.ok_or_else(|| usage("--ranks is required"))?,
        };
        if ranks.len() != order {
            return Err(usage(format!("{} ranks for an order-{order} tensor", ranks.len())));
        }
        let seed = match pick_num(self.seed.map(|s| s.to_string()), "seed") {
            Some(s) => parse_flag("seed", &s)?,
            None => 0,
        };
        let mut c = SolverConfig::new(ranks, seed);
        if let Some(v) = pick(&self.lambda, "lambda") {
            c.lambda = per_mode("lambda", &v, order)?;
        }
        if let Some(v) = pick_num(self.rho.map(|x| x.to_string()), "rho") {
            c.rho = parse_flag("rho", &v)?;
        }
        if let Some(v) = pick_num(self.iters.map(|x| x.to_string()), "max_iters") {
            c.max_iters = parse_flag("iters", &v)?;
        }
        if let Some(v) = pick_num(self.tol.map(|x| x.to_string()), "tol_rel") {
            c.tol_rel = parse_flag("tol", &v)?;
        }
        if let Some(v) = pick(&self.core_penalty, "core_penalty") {
            c.core_penalty = v.parse::<Penalty>()?;
        }
        if let Some(v) = pick(&self.factor_penalty, "factor_penalty") {
            c.factor_penalties = vec![v.parse::<Penalty>()?; order];
        }
        if let Some(v) = pick_num(self.prox_core.map(|x| x.to_string()), "prox_core") {
            c.prox_core = Some(parse_flag("prox-core", &v)?);
        }
        if let Some(v) = pick(&self.prox_factor, "prox_factor") {
            c.prox_factor = Some(per_mode("prox-factor", &v, order)?);
        }
        if let Some(v) = pick(&self.loss_support, "loss_support") {
            c.loss_support = v.parse::<LossSupport>()?;
        }
        if let Some(v) = pick(&self.eval_support, "eval_support") {
            c.eval_support = v.parse::<EvalSupport>()?;
        }
        if let Some(v) = pick_num(self.refresh_similarity.map(|x| x.to_string()), "refresh_similarity_every") {
            c.refresh_similarity_every = Some(parse_flag("refresh-similarity", &v)?);
        }
        if let Some(v) = pick_num(self.lipschitz_every.map(|x| x.to_string()), "lipschitz_every") {
            c.lipschitz_every = parse_flag("lipschitz-every", &v)?;
        }
        if let Some(v) = pick_num(self.coupling_weight.map(|x| x.to_string()), "coupling_weight") {
            c.coupling_weight = parse_flag("coupling-weight", &v)?;
        }
        Ok(c)
    }
}

fn create_out(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| usage(format!("cannot create {}: {e}", dir.display())))
}

fn write_solution(dir: &Path, sol: &Solution) -> CliResult<()> {
    create_out(dir)?;
    write_tensor(dir.join("completed.dtns"), &sol.completed)?;
    write_tensor(dir.join("core.dtns"), &sol.model.core)?;
    for (l, v) in sol.model.factors.iter().enumerate() {
        write_matrix(dir.join(format!("factor_{}.dtns", l + 1)), v)?;
    }
    sol.trace.write_csv(dir.join("trace.csv"))?;
    Ok(())
}

fn report(sol: &Solution, mask: &ObservationMask, wall_time: f64) -> EvalReport {
    let last = sol.trace.last().expect("trace has an initial record");
    EvalReport {
        fit: last.fit,
        rse: last.rse,
        n_observed: mask.len(),
        n_missing: mask.total_cells() - mask.len(),
        wall_time,
        iters: last.iter,
    }
}

fn run_complete(a: CompleteArgs) -> CliResult<()> {
    let (x, mask, default_ranks) = match (&a.tensor, &a.mask) {
        (Some(t), Some(m)) => {
            let x = read_tensor(t)?;
            let mask = read_mask(m, x.dims())?;
            (x, mask, None)
        }
        _ => {
            let dims: Vec<usize> = parse_list(&a.synthetic).map_err(|e| usage(e.to_string()))?;
            let ranks = a
                .solver
                .ranks
                .as_deref()
                .map(parse_list::<usize>)
                .transpose()
                .map_err(|e| usage(e.to_string()))?
                .unwrap_or_else(|| vec![3; dims.len()]);
            let seed = a.solver.seed.unwrap_or(0);
            let x = synthetic_tucker(&dims, &ranks, seed)?;
            let mask = mask_random(&dims, a.observe, seed)?;
            (x, mask, Some(ranks))
        }
    };
    let config = a.solver.resolve(default_ranks, x.dims().len())?;
    let start = Instant::now();
    let sol = solve(&x, &mask, None, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_solution(&a.out, &sol)?;
    if a.tensor.is_none() {
        write_tensor(a.out.join("truth.dtns"), &x)?;
        write_mask(a.out.join("mask.dmsk"), &mask)?;
    }
    print!("{}", report(&sol, &mask, elapsed).to_kv());
    Ok(())
}

fn run_decompose(a: DecomposeArgs) -> CliResult<()> {
    let x = read_tensor(&a.tensor)?;
    let mask = ObservationMask::full(x.dims());
    let mut config = a.solver.resolve(None, x.dims().len())?;
    if !a.solver.sets("eval_support")? {
        config.eval_support = EvalSupport::All;
    }
    let start = Instant::now();
    let sol = solve(&x, &mask, None, &config)?;
    let elapsed = start.elapsed().as_secs_f64();
    write_solution(&a.out, &sol)?;
    print!("{}", report(&sol, &mask, elapsed).to_kv());
    Ok(())
}

/// Worker count from `TENREC_THREADS`, default 1.
fn thread_cap() -> CliResult<usize> {
    match std::env::var("TENREC_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => Ok(n),
            _ => Err(usage(format!("TENREC_THREADS must be a positive integer, got `{v}`"))),
        },
        Err(_) => Ok(1),
    }
}

fn run_coupled(a: CoupledArgs) -> CliResult<()> {
    let spec = SimulationSpec::read(&a.spec)?;
    if a.seeds == 0 {
        return Err(usage("--seeds must be at least 1"));
    }
    let order = spec.modes.first().map_or(0, Vec::len);
    let base = a.solver.resolve(Some(vec![spec.rank; order]), order)?;
    let seeds: Vec<u64> = (0..a.seeds).map(|i| spec.seed + i).collect();
    let run_one = |seed: u64| -> tenrec_core::Result<(ResultRow, String)> {
        let problem = SimulationSpec { seed, ..spec.clone() }.generate()?;
        let config = SolverConfig { seed, ..base.clone() };
        let sol = coupled_solve(&problem, &config)?;
        let row = ResultRow {
            seed,
            avg_err: reconstruction_error(&sol, &problem)?,
            congruence: recovery_congruence(&sol, &problem, seed)?,
            iters: sol.iters(),
        };
        Ok((row, sol.trace.to_csv()))
    };

    let threads = thread_cap()?.min(seeds.len());
    let mut results: Vec<Option<tenrec_core::Result<(ResultRow, String)>>> = (0..seeds.len()).map(|_| None).collect();
    for chunk in seeds.chunks(threads).zip(results.chunks_mut(threads)) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk.0.iter().map(|&seed| s.spawn(move || run_one(seed))).collect();
            for (slot, h) in chunk.1.iter_mut().zip(handles) {
                *slot = Some(h.join().unwrap_or_else(|_| Err(Error::Numeric("worker panicked".into()))));
            }
        });
    }

    create_out(&a.out)?;
    let mut rows = Vec::new();
    for r in results.into_iter().flatten() {
        let (row, trace) = r?;
        fs::write(a.out.join(format!("trace_seed{}.csv", row.seed)), trace)
            .map_err(|e| usage(format!("cannot write trace: {e}")))?;
        rows.push(row);
    }
    fs::write(a.out.join("results.csv"), results_csv(&rows)).map_err(|e| usage(format!("cannot write results: {e}")))?;
    let n = rows.len() as f64;
    let mean = |f: fn(&ResultRow) -> f64| rows.iter().map(f).sum::<f64>() / n;
    let std = |f: fn(&ResultRow) -> f64, m: f64| (rows.iter().map(|r| (f(r) - m).powi(2)).sum::<f64>() / n).sqrt();
    let (me, mc) = (mean(|r| r.avg_err), mean(|r| r.congruence));
    println!("runs={}", rows.len());
    println!("avg_err_mean={me:.6e}");
    println!("avg_err_std={:.6e}", std(|r| r.avg_err, me));
    println!("congruence_mean={mc:.6}");
    println!("congruence_std={:.6e}", std(|r| r.congruence, mc));
    Ok(())
}

fn run_simulate(a: SimulateArgs) -> CliResult<()> {
    let mut spec = SimulationSpec::read(&a.spec)?;
    if let Some(s) = a.seed {
        spec.seed = s;
    }
    let p = spec.generate()?;
    create_out(&a.out)?;
    write_tensor(a.out.join("tensor.dtns"), &p.tensor)?;
    for (i, c) in p.couplings.iter().enumerate() {
        write_matrix(a.out.join(format!("matrix_{}.dtns", i + 1)), &c.matrix)?;
    }
    if let Some(t) = &p.ground_truth {
        for (l, f) in t.tensor_factors.iter().enumerate() {
            write_matrix(a.out.join(format!("truth_factor_{}.dtns", l + 1)), f)?;
        }
        for (i, f) in t.matrix_factors.iter().enumerate() {
            write_matrix(a.out.join(format!("truth_matrix_factor_{}.dtns", i + 1)), f)?;
        }
    }
    fs::write(a.out.join("spec.txt"), spec.to_text()).map_err(|e| usage(format!("cannot write spec: {e}")))?;
    println!("tensor_dims={}", p.tensor.dims().iter().map(ToString::to_string).collect::<Vec<_>>().join(","));
    for (i, c) in p.couplings.iter().enumerate() {
        println!("matrix_{}={}x{} mode={}", i + 1, c.matrix.nrows(), c.matrix.ncols(), c.mode + 1);
    }
    Ok(())
}

fn run_gradcheck(a: GradcheckArgs) -> CliResult<()> {
    if a.instances == 0 {
        return Err(usage("--instances must be at least 1"));
    }
    let mut worst = 0.0f64;
    for g in gradient_suite(a.seed, a.instances)? {
        println!("{:<16} {:.3e}", g.name, g.max_rel_err);
        worst = worst.max(g.max_rel_err);
    }
    if a.kempf_ness {
        let s = kempf_ness_stationarity(a.seed, a.instances)?;
        println!("{:<16} {:.3e}", "kempf-ness", s);
        worst = worst.max(s);
    }
    println!("max={worst:.3e}");
    if worst <= GRADCHECK_TOL {
        Ok(())
    } else {
        Err(Failure {
            code: 2,
            msg: format!("largest error {worst:.3e} exceeds {GRADCHECK_TOL:e}"),
        })
    }
}

fn run_eval(a: EvalArgs) -> CliResult<()> {
    let start = Instant::now();
    let x = read_tensor(&a.reference)?;
    let xt: DenseTensor = read_tensor(&a.estimate)?;
    let mask = match &a.mask {
        Some(m) => read_mask(m, x.dims())?,
        None => ObservationMask::full(x.dims()),
    };
    let support = match &a.support {
        Some(s) => s.parse::<EvalSupport>()?,
        None if a.mask.is_some() => EvalSupport::Missing,
        None => EvalSupport::All,
    };
    let cells_mask = match support.cells(&mask) {
        Some(cells) => Some(ObservationMask::from_linear(x.dims(), cells)?),
        None => None,
    };
    let sup = cells_mask.as_ref().map_or(Support::All, Support::Mask);
    let r = EvalReport {
        fit: fit(&x, &xt, sup)?,
        rse: rse(&x, &xt, sup)?,
        n_observed: mask.len(),
        n_missing: mask.total_cells() - mask.len(),
        wall_time: start.elapsed().as_secs_f64(),
        iters: 0,
    };
    print!("{}", r.to_kv());
    Ok(())
}

//! Evaluation metrics, random masks and `key = value` configuration files.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::tensor::{DenseTensor, ObservationMask, RealMatrix, TuckerModel};

pub mod gradcheck;

/// Entries an evaluation runs over.
#[derive(Clone, Copy, Debug)]
pub enum Support<'a> {
    All,
    Mask(&'a ObservationMask),
}

/// Support selector used by completion runs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalSupport {
    /// Held-out entries; falls back to all entries when nothing is missing.
    #[default]
    Missing,
    Observed,
    All,
}

impl std::str::FromStr for EvalSupport {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "missing" => Ok(Self::Missing),
            "observed" => Ok(Self::Observed),
            "all" => Ok(Self::All),
            other => Err(Error::InvalidArgument(format!("unknown eval support `{other}`"))),
        }
    }
}

impl EvalSupport {
    /// The linear indices selected for `mask`; `None` means every cell.
    pub fn cells(self, mask: &ObservationMask) -> Option<Vec<usize>> {
        match self {
            Self::All => None,
            Self::Observed => Some(mask.linear_indices().to_vec()),
            Self::Missing if mask.len() == mask.total_cells() => None,
            Self::Missing => Some(mask.complement().linear_indices().to_vec()),
        }
    }
}

/// `(‖X - X̃‖², ‖X‖², count)` over the support.
fn sums(x: &DenseTensor, xt: &DenseTensor, support: Support<'_>) -> Result<(f64, f64, usize)> {
    x.check_same_dims(xt)?;
    let (a, b) = (x.data(), xt.data());
    let acc = |(e, r, n): (f64, f64, usize), i: usize| {
        let d = a[i] - b[i];
        (e + d * d, r + a[i] * a[i], n + 1)
    };
    Ok(match support {
        Support::All => (0..a.len()).fold((0.0, 0.0, 0), acc),
        Support::Mask(m) => {
            if m.dims() != x.dims() {
                return Err(Error::ShapeMismatch(format!("mask dims {:?} vs tensor dims {:?}", m.dims(), x.dims())));
            }
            m.linear_indices().iter().copied().fold((0.0, 0.0, 0), acc)
        }
    })
}

/// `1 - ‖X - X̃‖ / ‖X‖` restricted to the support.
pub fn fit(x: &DenseTensor, xt: &DenseTensor, support: Support<'_>) -> Result<f64> {
    let (err, refn, _) = sums(x, xt, support)?;
    if refn == 0.0 {
        return Err(Error::InvalidArgument("fit needs a reference with nonzero norm on the support".into()));
    }
    Ok(1.0 - (err / refn).sqrt())
}

/// Root mean squared entry difference over the support.
pub fn rse(x: &DenseTensor, xt: &DenseTensor, support: Support<'_>) -> Result<f64> {
    let (err, _, n) = sums(x, xt, support)?;
    if n == 0 {
        return Err(Error::EmptyMask);
    }
    Ok((err / n as f64).sqrt())
}

/// Fit and RSE over explicit linear indices (`None` = all cells).
pub(crate) fn fit_rse_cells(x: &DenseTensor, xt: &DenseTensor, cells: Option<&[usize]>) -> (f64, f64) {
    let (a, b) = (x.data(), xt.data());
    let (mut err, mut refn) = (0.0, 0.0);
    let mut visit = |i: usize| {
        let d = a[i] - b[i];
        err += d * d;
        refn += a[i] * a[i];
    };
    let n = match cells {
        Some(c) => {
            c.iter().for_each(|&i| visit(i));
            c.len()
        }
        None => {
            (0..a.len()).for_each(&mut visit);
            a.len()
        }
    };
    let fit = if refn > 0.0 { 1.0 - (err / refn).sqrt() } else { f64::NAN };
    let rse = if n > 0 { (err / n as f64).sqrt() } else { f64::NAN };
    (fit, rse)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub fit: f64,
    pub rse: f64,
    pub n_observed: usize,
    pub n_missing: usize,
    pub wall_time: f64,
    pub iters: usize,
}

impl EvalReport {
    /// Line-oriented `key=value` rendering.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "fit={:.6}", self.fit);
        let _ = writeln!(s, "rse={:.6e}", self.rse);
        let _ = writeln!(s, "n_observed={}", self.n_observed);
        let _ = writeln!(s, "n_missing={}", self.n_missing);
        let _ = writeln!(s, "wall_time={:.3}", self.wall_time);
        let _ = writeln!(s, "iters={}", self.iters);
        s
    }
}

/// Uniform sample of `ceil(rate * ∏dims)` cells without replacement.
pub fn mask_random(dims: &[usize], rate: f64, seed: u64) -> Result<ObservationMask> {
    if !(rate > 0.0 && rate <= 1.0) {
        return Err(Error::InvalidArgument(format!("observe rate must lie in (0, 1], got {rate}")));
    }
    let total: usize = dims.iter().product();
    let count = ((rate * total as f64).ceil() as usize).min(total);
    if count == total {
        return Ok(ObservationMask::full(dims));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = rand::seq::index::sample(&mut rng, total, count).into_vec();
    ObservationMask::from_linear(dims, cells)
}

/// Exactly low-rank test tensor: Gaussian core, orthonormal factors, unit RMS.
pub fn synthetic_tucker(dims: &[usize], ranks: &[usize], seed: u64) -> Result<DenseTensor> {
    if dims.len() != ranks.len() {
        return Err(Error::ShapeMismatch(format!("{} ranks for {} dims", ranks.len(), dims.len())));
    }
    for (mode, (&rank, &size)) in ranks.iter().zip(dims).enumerate() {
        if rank == 0 || rank > size {
            return Err(Error::RankOutOfRange { mode, rank, size });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };
    let factors: Vec<RealMatrix> = dims
        .iter()
        .zip(ranks)
        .map(|(&n, &r)| RealMatrix::from_fn(n, r, |_, _| gauss()).qr().q())
        .collect();
    let core = DenseTensor::from_fn(ranks, |_| gauss());
    let x = TuckerModel::new(core, factors)?.reconstruct()?;
    let rms = (x.norm_sq() / x.len() as f64).sqrt();
    Ok(x.scaled(1.0 / rms))
}

/// Parsed `key = value` configuration file.
///
/// Blank lines and lines starting with `#` are ignored. Keys may not repeat.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ConfigFile {
    entries: BTreeMap<String, String>,
}

impl ConfigFile {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected `key = value`, found `{line}`"),
            })?;
            let key = k.trim().to_string();
            if key.is_empty() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: "empty key".into(),
                });
            }
            if entries.insert(key.clone(), v.trim().to_string()).is_some() {
                return Err(Error::Parse {
                    line: i + 1,
                    msg: format!("duplicate key `{key}`"),
                });
            }
        }
        Ok(Self { entries })
    }

    pub fn read(path: impl AsRef<std::path::Path>) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    /// Parses the value under `key`, if present.
    pub fn parsed<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>> {
        self.get(key)
            .map(|v| {
                v.parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad value `{v}` for config key `{key}`")))
            })
            .transpose()
    }
}

/// Comma-separated list such as `3,3,3`.
pub fn parse_list<T: std::str::FromStr>(s: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("bad list element `{}` in `{s}`", t.trim())))
        })
        .collect()
}

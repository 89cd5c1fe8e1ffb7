//! Plain-text tensor (`dtns 1`) and mask (`dmsk 1`) formats.
//!
//! Tensor file:
//! ```text
//! dtns 1
//! <K>
//! <N_1> ... <N_K>
//! <values, row-major, whitespace separated>
//! ```
//! Mask file:
//! ```text
//! dmsk 1
//! <count>
//! <i_1> ... <i_K>      (one 0-based tuple per line)
//! ```

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

use super::dense::{DenseTensor, RealMatrix};
use super::mask::ObservationMask;

fn parse_err(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        line,
        msg: msg.into(),
    }
}

/// Token stream that remembers the source line of each token.
struct Tokens<'a> {
    lines: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    current: Vec<&'a str>,
    line_no: usize,
}

impl<'a> Tokens<'a> {
    fn new(text: &'a str) -> Self {
        Self {
            lines: text.lines().enumerate().peekable(),
            current: Vec::new(),
            line_no: 0,
        }
    }

    /// Next non-empty line, split into tokens.
    fn line(&mut self) -> Option<(usize, Vec<&'a str>)> {
        for (i, l) in self.lines.by_ref() {
            let toks: Vec<&str> = l.split_whitespace().collect();
            if !toks.is_empty() {
                return Some((i + 1, toks));
            }
        }
        None
    }

    fn token(&mut self) -> Option<(usize, &'a str)> {
        loop {
            if !self.current.is_empty() {
                return Some((self.line_no, self.current.remove(0)));
            }
            let (no, toks) = self.line()?;
            self.line_no = no;
            self.current = toks;
        }
    }
}

fn expect_header(tokens: &mut Tokens<'_>, magic: &str) -> Result<()> {
    match tokens.line() {
        Some((_, t)) if t == [magic, "1"] => Ok(()),
        Some((no, t)) => Err(parse_err(no, format!("expected `{magic} 1`, found `{}`", t.join(" ")))),
        None => Err(parse_err(1, "empty file")),
    }
}

fn single_usize(tokens: &mut Tokens<'_>, what: &str) -> Result<(usize, usize)> {
    match tokens.line() {
        Some((no, t)) if t.len() == 1 => t[0]
            .parse()
            .map(|v| (no, v))
            .map_err(|_| parse_err(no, format!("bad {what} `{}`", t[0]))),
        Some((no, _)) => Err(parse_err(no, format!("expected a single {what}"))),
        None => Err(parse_err(0, format!("missing {what}"))),
    }
}

pub fn parse_tensor(text: &str) -> Result<DenseTensor> {
    let mut tokens = Tokens::new(text);
    expect_header(&mut tokens, "dtns")?;
    let (_, order) = single_usize(&mut tokens, "order")?;
    let (no, dim_toks) = tokens.line().ok_or_else(|| parse_err(3, "missing dims line"))?;
    if dim_toks.len() != order {
        return Err(parse_err(no, format!("{} dims for order {order}", dim_toks.len())));
    }
    let dims = dim_toks
        .iter()
        .map(|t| t.parse::<usize>().map_err(|_| parse_err(no, format!("bad dim `{t}`"))))
        .collect::<Result<Vec<_>>>()?;
    let len: usize = dims.iter().product();
    let mut data = Vec::with_capacity(len);
    while let Some((no, t)) = tokens.token() {
        let v: f64 = t.parse().map_err(|_| parse_err(no, format!("bad value `{t}`")))?;
        data.push(v);
    }
    if data.len() != len {
        return Err(parse_err(
            tokens.line_no,
            format!("{} values for dims {dims:?} (expected {len})", data.len()),
        ));
    }
    DenseTensor::new(dims, data)
}

pub fn format_tensor(x: &DenseTensor) -> String {
    let mut s = String::with_capacity(x.len() * 12 + 32);
    let dims: Vec<String> = x.dims().iter().map(|d| d.to_string()).collect();
    let _ = writeln!(s, "dtns 1\n{}\n{}", x.order(), dims.join(" "));
    // Shortest round-trip representation; one row of the last mode per line.
    let last = *x.dims().last().unwrap();
    for row in x.data().chunks(last) {
        let vals: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        let _ = writeln!(s, "{}", vals.join(" "));
    }
    s
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<DenseTensor> {
    parse_tensor(&fs::read_to_string(path)?)
}

pub fn write_tensor(path: impl AsRef<Path>, x: &DenseTensor) -> Result<()> {
    fs::write(path, format_tensor(x))?;
    Ok(())
}

/// Matrices travel as order-2 tensors.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<RealMatrix> {
    let x = read_tensor(path)?;
    if x.order() != 2 {
        return Err(Error::ShapeMismatch(format!("expected a matrix, found order {}", x.order())));
    }
    Ok(RealMatrix::from_row_slice(x.dims()[0], x.dims()[1], x.data()))
}

pub fn matrix_to_tensor(m: &RealMatrix) -> DenseTensor {
    let data = (0..m.nrows())
        .flat_map(|i| (0..m.ncols()).map(move |j| (i, j)))
        .map(|(i, j)| m[(i, j)])
        .collect();
    DenseTensor::from_raw(vec![m.nrows(), m.ncols()], data)
}

pub fn write_matrix(path: impl AsRef<Path>, m: &RealMatrix) -> Result<()> {
    write_tensor(path, &matrix_to_tensor(m))
}

pub fn parse_mask(text: &str, dims: &[usize]) -> Result<ObservationMask> {
    let mut tokens = Tokens::new(text);
    expect_header(&mut tokens, "dmsk")?;
    let (_, count) = single_usize(&mut tokens, "count")?;
    let mut tuples = Vec::with_capacity(count);
    while let Some((no, t)) = tokens.line() {
        let tuple = t
            .iter()
            .map(|s| s.parse::<usize>().map_err(|_| parse_err(no, format!("bad index `{s}`"))))
            .collect::<Result<Vec<_>>>()?;
        if tuple.len() != dims.len() {
            return Err(parse_err(no, format!("{}-tuple for an order-{} tensor", tuple.len(), dims.len())));
        }
        tuples.push(tuple);
    }
    if tuples.len() != count {
        return Err(parse_err(0, format!("header says {count} tuples, found {}", tuples.len())));
    }
    ObservationMask::from_tuples(dims, &tuples)
}

pub fn format_mask(mask: &ObservationMask) -> String {
    let mut s = format!("dmsk 1\n{}\n", mask.len());
    for t in mask.tuples() {
        let parts: Vec<String> = t.iter().map(|i| i.to_string()).collect();
        let _ = writeln!(s, "{}", parts.join(" "));
    }
    s
}

pub fn read_mask(path: impl AsRef<Path>, dims: &[usize]) -> Result<ObservationMask> {
    parse_mask(&fs::read_to_string(path)?, dims)
}

pub fn write_mask(path: impl AsRef<Path>, mask: &ObservationMask) -> Result<()> {
    fs::write(path, format_mask(mask))?;
    Ok(())
}

use crate::error::{Error, Result};

use super::dense::{check_dims, DenseTensor};

/// Set of observed cells of a tensor with fixed dims.
///
/// Cells are kept as sorted, de-duplicated row-major linear indices.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ObservationMask {
    dims: Vec<usize>,
    cells: Vec<usize>,
}

impl ObservationMask {
    /// Builds a mask from 0-based K-tuples. Duplicates and out-of-range tuples are errors.
    pub fn from_tuples<I, T>(dims: &[usize], tuples: I) -> Result<Self>
    where
        I: IntoIterator<Item = T>,
        T: AsRef<[usize]>,
    {
        check_dims(dims)?;
        let mut cells = Vec::new();
        for t in tuples {
            let t = t.as_ref();
            if t.len() != dims.len() {
                return Err(Error::ShapeMismatch(format!(
                    "index tuple {t:?} has {} entries, tensor has {} modes",
                    t.len(),
                    dims.len()
                )));
            }
            let mut li = 0;
            for (&i, &n) in t.iter().zip(dims) {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "index tuple {t:?} out of bounds for dims {dims:?}"
                    )));
                }
                li = li * n + i;
            }
            cells.push(li);
        }
        Self::from_linear(dims, cells)
    }

    /// Builds a mask from row-major linear indices.
    pub fn from_linear(dims: &[usize], mut cells: Vec<usize>) -> Result<Self> {
        check_dims(dims)?;
        let total: usize = dims.iter().product();
        cells.sort_unstable();
        if let Some(w) = cells.windows(2).find(|w| w[0] == w[1]) {
            return Err(Error::InvalidArgument(format!(
                "duplicate observation at linear index {}",
                w[0]
            )));
        }
        if let Some(&last) = cells.last() {
            if last >= total {
                return Err(Error::InvalidArgument(format!(
                    "linear index {last} out of bounds for dims {dims:?}"
                )));
            }
        }
        Ok(Self {
            dims: dims.to_vec(),
            cells,
        })
    }

    /// Every cell observed.
    pub fn full(dims: &[usize]) -> Self {
        let total = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            cells: (0..total).collect(),
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn total_cells(&self) -> usize {
        self.dims.iter().product()
    }

    pub fn linear_indices(&self) -> &[usize] {
        &self.cells
    }

    pub fn contains_linear(&self, li: usize) -> bool {
        self.cells.binary_search(&li).is_ok()
    }

    pub fn contains(&self, idx: &[usize]) -> bool {
        let li = idx.iter().zip(&self.dims).fold(0, |acc, (&i, &n)| acc * n + i);
        self.contains_linear(li)
    }

    /// Observed cells as 0-based K-tuples, in row-major order.
    pub fn tuples(&self) -> impl Iterator<Item = Vec<usize>> + '_ {
        self.cells.iter().map(move |&li| {
            let mut rest = li;
            let mut t = vec![0; self.dims.len()];
            for k in (0..self.dims.len()).rev() {
                t[k] = rest % self.dims[k];
                rest /= self.dims[k];
            }
            t
        })
    }

    /// Dense 0/1 indicator in storage order.
    pub fn indicator(&self) -> Vec<bool> {
        let mut out = vec![false; self.total_cells()];
        for &c in &self.cells {
            out[c] = true;
        }
        out
    }

    /// The unobserved cells.
    pub fn complement(&self) -> ObservationMask {
        let ind = self.indicator();
        let cells = ind
            .iter()
            .enumerate()
            .filter_map(|(i, &o)| (!o).then_some(i))
            .collect();
        Self {
            dims: self.dims.clone(),
            cells,
        }
    }

    pub(crate) fn check_tensor(&self, x: &DenseTensor) -> Result<()> {
        if x.dims() != self.dims.as_slice() {
            return Err(Error::ShapeMismatch(format!(
                "mask dims {:?} vs tensor dims {:?}",
                self.dims,
                x.dims()
            )));
        }
        Ok(())
    }

    /// Copy of `x` with unobserved cells set to zero.
    pub fn zero_fill(&self, x: &DenseTensor) -> Result<DenseTensor> {
        self.check_tensor(x)?;
        let mut out = DenseTensor::zeros(x.dims());
        for &c in &self.cells {
            out.data_mut()[c] = x.data()[c];
        }
        Ok(out)
    }
}

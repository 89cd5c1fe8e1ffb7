use nalgebra::{DMatrix, DMatrixView, DMatrixViewMut};

use crate::error::{Error, Result};

/// Dense real matrix. Shapes follow the usual `rows × cols` convention.
pub type RealMatrix = DMatrix<f64>;

/// Dense K-way tensor stored in row-major order (last index varies fastest).
#[derive(Clone, Debug, PartialEq)]
pub struct DenseTensor {
    dims: Vec<usize>,
    data: Vec<f64>,
}

impl DenseTensor {
    /// Builds a tensor, checking the dimension vector and that every value is finite.
    pub fn new(dims: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        check_dims(&dims)?;
        let len: usize = dims.iter().product();
        if data.len() != len {
            return Err(Error::ShapeMismatch(format!(
                "{} values for dims {:?} (expected {})",
                data.len(),
                dims,
                len
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("entry {pos} of tensor")));
        }
        Ok(Self { dims, data })
    }

    pub(crate) fn from_raw(dims: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        let len = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![0.0; len],
        }
    }

    /// Builds a tensor by evaluating `f` at every multi-index, in storage order.
    pub fn from_fn(dims: &[usize], mut f: impl FnMut(&[usize]) -> f64) -> Self {
        let len: usize = dims.iter().product();
        let mut data = Vec::with_capacity(len);
        let mut idx = vec![0usize; dims.len()];
        for _ in 0..len {
            data.push(f(&idx));
            advance(&mut idx, dims);
        }
        Self {
            dims: dims.to_vec(),
            data,
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn order(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn linear_index(&self, idx: &[usize]) -> usize {
        debug_assert_eq!(idx.len(), self.dims.len());
        idx.iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &n)| acc * n + i)
    }

    pub fn get(&self, idx: &[usize]) -> f64 {
        self.data[self.linear_index(idx)]
    }

    pub fn set(&mut self, idx: &[usize], value: f64) {
        let li = self.linear_index(idx);
        self.data[li] = value;
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn dot(&self, other: &DenseTensor) -> f64 {
        debug_assert_eq!(self.dims, other.dims);
        self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// `self - other`.
    pub fn sub(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_raw(self.dims.clone(), data))
    }

    /// `self + other`.
    pub fn add(&self, other: &DenseTensor) -> Result<DenseTensor> {
        self.check_same_dims(other)?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_raw(self.dims.clone(), data))
    }

    pub fn scaled(&self, alpha: f64) -> DenseTensor {
        Self::from_raw(self.dims.clone(), self.data.iter().map(|v| alpha * v).collect())
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &DenseTensor) {
        debug_assert_eq!(self.dims, other.dims);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
    }

    pub(crate) fn check_same_dims(&self, other: &DenseTensor) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::ShapeMismatch(format!(
                "dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }

    pub(crate) fn check_mode(&self, mode: usize) -> Result<()> {
        if mode >= self.dims.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: self.dims.len(),
            });
        }
        Ok(())
    }

    /// Sizes of the index blocks before, at and after `mode` in storage order.
    fn split(&self, mode: usize) -> (usize, usize, usize) {
        let left = self.dims[..mode].iter().product();
        let right = self.dims[mode + 1..].iter().product();
        (left, self.dims[mode], right)
    }

    /// Mode-`mode` matricization (0-based mode).
    ///
    /// Rows are indexed by `i_mode`. The remaining indices are laid out with
    /// lower-numbered modes varying fastest, so that for a Tucker model
    /// `unfold(G x_1 V1 ... x_K VK, l) = V_l unfold(G, l) (V_K ⊗ ... ⊗ V_1)^T`
    /// with mode `l` skipped in the Kronecker chain.
    pub fn unfold(&self, mode: usize) -> Result<RealMatrix> {
        self.check_mode(mode)?;
        let rows = self.dims[mode];
        let cols = self.len() / rows;
        let strides = self.column_strides(mode);
        let mut out = RealMatrix::zeros(rows, cols);
        let mut idx = vec![0usize; self.order()];
        for &v in &self.data {
            let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            out[(idx[mode], col)] = v;
            advance(&mut idx, &self.dims);
        }
        Ok(out)
    }

    /// Inverse of [`DenseTensor::unfold`].
    pub fn fold(m: &RealMatrix, mode: usize, dims: &[usize]) -> Result<DenseTensor> {
        check_dims(dims)?;
        if mode >= dims.len() {
            return Err(Error::ModeOutOfRange {
                mode,
                order: dims.len(),
            });
        }
        let len: usize = dims.iter().product();
        if m.nrows() != dims[mode] || m.nrows() * m.ncols() != len {
            return Err(Error::ShapeMismatch(format!(
                "{}x{} matrix cannot fold along mode {} into {:?}",
                m.nrows(),
                m.ncols(),
                mode,
                dims
            )));
        }
        let mut out = DenseTensor::zeros(dims);
        let strides = out.column_strides(mode);
        let mut idx = vec![0usize; dims.len()];
        for v in out.data.iter_mut() {
            let col: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
            *v = m[(idx[mode], col)];
            advance(&mut idx, dims);
        }
        Ok(out)
    }

    fn column_strides(&self, mode: usize) -> Vec<usize> {
        let mut strides = vec![0usize; self.order()];
        let mut acc = 1;
        for (k, &n) in self.dims.iter().enumerate() {
            if k != mode {
                strides[k] = acc;
                acc *= n;
            }
        }
        strides
    }

    /// Mode product `X x_mode M`: replaces mode `mode` (size `M.ncols()`) by `M.nrows()`.
    pub fn mode_product(&self, m: &RealMatrix, mode: usize) -> Result<DenseTensor> {
        self.check_mode(mode)?;
        if m.ncols() != self.dims[mode] {
            return Err(Error::ShapeMismatch(format!(
                "mode-{} product needs {} columns, matrix is {}x{}",
                mode,
                self.dims[mode],
                m.nrows(),
                m.ncols()
            )));
        }
        Ok(self.mode_product_unchecked(m, mode))
    }

    pub(crate) fn mode_product_unchecked(&self, m: &RealMatrix, mode: usize) -> DenseTensor {
        let (left, n, right) = self.split(mode);
        let p = m.nrows();
        let mut dims = self.dims.clone();
        dims[mode] = p;
        let mut out = vec![0.0; left * p * right];
        if right == 1 {
            // Whole tensor is a column-major n x left matrix.
            let xs = DMatrixView::from_slice(&self.data, n, left);
            let mut ys = DMatrixViewMut::from_slice(&mut out, p, left);
            ys.gemm(1.0, m, &xs, 0.0);
        } else {
            // Each left-slab is a row-major n x right block, i.e. column-major right x n.
            let mt = m.transpose();
            for l in 0..left {
                let src = &self.data[l * n * right..(l + 1) * n * right];
                let dst = &mut out[l * p * right..(l + 1) * p * right];
                let xs = DMatrixView::from_slice(src, right, n);
                let mut ys = DMatrixViewMut::from_slice(dst, right, p);
                ys.gemm(1.0, &xs, &mt, 0.0);
            }
        }
        DenseTensor::from_raw(dims, out)
    }

    /// Applies one matrix per mode, `X x_1 M_1 ... x_K M_K`; `None` skips a mode.
    pub fn multi_mode_product(&self, mats: &[Option<&RealMatrix>]) -> Result<DenseTensor> {
        if mats.len() != self.order() {
            return Err(Error::ShapeMismatch(format!(
                "{} matrices for an order-{} tensor",
                mats.len(),
                self.order()
            )));
        }
        let mut out = self.clone();
        // Shrinking products first keeps intermediates small.
        let mut order: Vec<usize> = (0..self.order()).filter(|&k| mats[k].is_some()).collect();
        order.sort_by(|&a, &b| {
            let ra = mats[a].unwrap().nrows() as f64 / self.dims[a] as f64;
            let rb = mats[b].unwrap().nrows() as f64 / self.dims[b] as f64;
            ra.partial_cmp(&rb).unwrap().then(a.cmp(&b))
        });
        for k in order {
            out = out.mode_product(mats[k].unwrap(), k)?;
        }
        Ok(out)
    }

    /// Contraction over every mode except `mode`: `unfold(self, mode) * unfold(other, mode)^T`.
    pub fn mode_contract(&self, other: &DenseTensor, mode: usize) -> Result<RealMatrix> {
        self.check_mode(mode)?;
        let same_rest = self.order() == other.order()
            && self
                .dims
                .iter()
                .zip(&other.dims)
                .enumerate()
                .all(|(k, (a, b))| k == mode || a == b);
        if !same_rest {
            return Err(Error::ShapeMismatch(format!(
                "cannot contract {:?} with {:?} outside mode {}",
                self.dims, other.dims, mode
            )));
        }
        Ok(self.mode_contract_unchecked(other, mode))
    }

    pub(crate) fn mode_contract_unchecked(&self, other: &DenseTensor, mode: usize) -> RealMatrix {
        let (left, nx, right) = self.split(mode);
        let ny = other.dims[mode];
        let mut c = RealMatrix::zeros(nx, ny);
        if right == 1 {
            let xs = DMatrixView::from_slice(&self.data, nx, left);
            let ys = DMatrixView::from_slice(&other.data, ny, left);
            c.gemm(1.0, &xs, &ys.transpose(), 0.0);
        } else {
            for l in 0..left {
                let xs = DMatrixView::from_slice(&self.data[l * nx * right..(l + 1) * nx * right], right, nx);
                let ys = DMatrixView::from_slice(&other.data[l * ny * right..(l + 1) * ny * right], right, ny);
                c.gemm_tr(1.0, &xs, &ys, 1.0);
            }
        }
        c
    }
}

pub(crate) fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::InvalidArgument("tensor needs at least one mode".into()));
    }
    if dims.contains(&0) {
        return Err(Error::InvalidArgument(format!("zero-sized mode in {dims:?}")));
    }
    Ok(())
}

/// Odometer increment in row-major order.
pub(crate) fn advance(idx: &mut [usize], dims: &[usize]) {
    for k in (0..dims.len()).rev() {
        idx[k] += 1;
        if idx[k] < dims[k] {
            return;
        }
        idx[k] = 0;
    }
}

/// Kronecker product `A ⊗ B`.
pub fn kron(a: &RealMatrix, b: &RealMatrix) -> RealMatrix {
    a.kronecker(b)
}

/// `M_K ⊗ ... ⊗ M_1` with `skip` left out, the ordering matched to [`DenseTensor::unfold`].
pub fn kron_composite(mats: &[RealMatrix], skip: usize) -> RealMatrix {
    let mut out = RealMatrix::identity(1, 1);
    for (k, m) in mats.iter().enumerate().rev() {
        if k != skip {
            out = kron(&out, m);
        }
    }
    out
}

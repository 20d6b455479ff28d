use std::fmt;

use super::EngineError;

/// Dense row-major `f64` matrix.
///
/// Every value in the engine is two-dimensional: a batch of `rows` items
/// with `cols` features each. Scalars are `[1, 1]`, row vectors `[1, n]`.
#[derive(Clone, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: [usize; 2], data: Vec<f64>) -> Result<Self, EngineError> {
        if shape[0] * shape[1] != data.len() {
            return Err(EngineError::ShapeMismatch {
                op: "tensor",
                lhs: shape,
                rhs: [data.len(), 1],
            });
        }
        Ok(Self {
            rows: shape[0],
            cols: shape[1],
            data,
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "tensor data length");
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 0.0)
    }

    pub fn ones(rows: usize, cols: usize) -> Self {
        Self::full(rows, cols, 1.0)
    }

    pub fn full(rows: usize, cols: usize, value: f64) -> Self {
        Self {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self::from_vec(1, 1, vec![value])
    }

    /// One row per item of `rows`.
    pub fn from_rows<const N: usize>(rows: &[[f64; N]]) -> Self {
        let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Self::from_vec(rows.len(), N, data)
    }

    pub fn column(values: &[f64]) -> Self {
        Self::from_vec(values.len(), 1, values.to_vec())
    }

    pub fn shape(&self) -> [usize; 2] {
        [self.rows, self.cols]
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
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

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.data[row * self.cols + col] = value;
    }

    pub fn row(&self, row: usize) -> &[f64] {
        &self.data[row * self.cols..(row + 1) * self.cols]
    }

    /// The single element of a `[1, 1]` tensor.
    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor {:?}", self.shape());
        self.data[0]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_vec(self.rows, self.cols, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn transpose(&self) -> Tensor {
        let mut out = vec![0.0; self.data.len()];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        Tensor::from_vec(self.cols, self.rows, out)
    }

    pub fn matmul(&self, other: &Tensor) -> Tensor {
        matmul(self, false, other, false)
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Tensor{:?}", self.shape())?;
        if self.data.len() <= 16 {
            write!(f, " {:?}", self.data)?;
        }
        Ok(())
    }
}

/// `op(a) · op(b)` where `op` optionally transposes; backed by `matrixmultiply`.
pub(crate) fn matmul(a: &Tensor, ta: bool, b: &Tensor, tb: bool) -> Tensor {
    let (m, k) = if ta { (a.cols, a.rows) } else { (a.rows, a.cols) };
    let (k2, n) = if tb { (b.cols, b.rows) } else { (b.rows, b.cols) };
    assert_eq!(k, k2, "matmul inner dimension");
    let mut out = vec![0.0; m * n];
    if m == 0 || n == 0 {
        return Tensor::from_vec(m, n, out);
    }
    // row-major strides of the stored matrices, swapped when transposed
    let (rsa, csa) = if ta { (1, a.cols as isize) } else { (a.cols as isize, 1) };
    let (rsb, csb) = if tb { (1, b.cols as isize) } else { (b.cols as isize, 1) };
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    Tensor::from_vec(m, n, out)
}

/// Output shape of a two-operand elementwise op: per axis the sizes must be
/// equal or one of them must be 1.
pub(crate) fn broadcast_shape(a: [usize; 2], b: [usize; 2]) -> Option<[usize; 2]> {
    let mut out = [0; 2];
    for i in 0..2 {
        out[i] = if a[i] == b[i] {
            a[i]
        } else if a[i] == 1 {
            b[i]
        } else if b[i] == 1 {
            a[i]
        } else {
            return None;
        };
    }
    Some(out)
}

pub(crate) fn zip_broadcast(
    a: &Tensor,
    b: &Tensor,
    out_shape: [usize; 2],
    f: impl Fn(f64, f64) -> f64,
) -> Tensor {
    if a.shape() == b.shape() && a.shape() == out_shape {
        let data = a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect();
        return Tensor::from_vec(a.rows, a.cols, data);
    }
    let [rows, cols] = out_shape;
    let mut data = Vec::with_capacity(rows * cols);
    let (ar, ac) = (a.rows > 1, a.cols > 1);
    let (br, bc) = (b.rows > 1, b.cols > 1);
    for r in 0..rows {
        let arow = if ar { r * a.cols } else { 0 };
        let brow = if br { r * b.cols } else { 0 };
        for c in 0..cols {
            let x = a.data[arow + if ac { c } else { 0 }];
            let y = b.data[brow + if bc { c } else { 0 }];
            data.push(f(x, y));
        }
    }
    Tensor::from_vec(rows, cols, data)
}

pub(crate) fn broadcast_to(a: &Tensor, shape: [usize; 2]) -> Tensor {
    let zero = Tensor::zeros(1, 1);
    zip_broadcast(a, &zero, shape, |x, _| x)
}

/// Sum `g` down to `shape`, the reverse of broadcasting.
pub(crate) fn sum_to(g: &Tensor, shape: [usize; 2]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape[0], shape[1]);
    for r in 0..g.rows {
        let orow = if shape[0] > 1 { r } else { 0 };
        for c in 0..g.cols {
            let ocol = if shape[1] > 1 { c } else { 0 };
            out.data[orow * shape[1] + ocol] += g.data[r * g.cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple_loop(a: &Tensor, b: &Tensor) -> Tensor {
        let mut out = Tensor::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut acc = 0.0;
                for k in 0..a.cols() {
                    acc += a.get(i, k) * b.get(k, j);
                }
                out.set(i, j, acc);
            }
        }
        out
    }

    #[test]
    fn matmul_matches_triple_loop_in_all_transpose_modes() {
        let a = Tensor::from_rows(&[[1.0, -2.0, 0.5], [3.0, 0.25, -1.5]]);
        let b = Tensor::from_rows(&[
            [0.1, 0.2, 0.3, 0.4],
            [-1.0, 2.0, -3.0, 4.0],
            [5.0, -0.5, 0.0, 1.0],
        ]);
        let want = triple_loop(&a, &b);
        assert_eq!(want.shape(), [2, 4]);
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let aa = if ta { a.transpose() } else { a.clone() };
            let bb = if tb { b.transpose() } else { b.clone() };
            let got = matmul(&aa, ta, &bb, tb);
            for (x, y) in got.data().iter().zip(want.data()) {
                assert!((x - y).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape([4, 3], [1, 3]), Some([4, 3]));
        assert_eq!(broadcast_shape([4, 1], [4, 3]), Some([4, 3]));
        assert_eq!(broadcast_shape([1, 1], [4, 3]), Some([4, 3]));
        assert_eq!(broadcast_shape([4, 3], [3, 4]), None);
        let g = Tensor::ones(4, 3);
        assert_eq!(sum_to(&g, [1, 3]).data(), &[4.0, 4.0, 4.0]);
        assert_eq!(sum_to(&g, [4, 1]).data(), &[3.0; 4]);
        assert_eq!(sum_to(&g, [1, 1]).item(), 12.0);
    }

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new([2, 2], vec![1.0; 3]).is_err());
    }
}

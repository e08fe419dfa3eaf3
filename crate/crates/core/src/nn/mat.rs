use serde::{Deserialize, Serialize};

/// Dense row-major `f64` matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat::from_vec: {rows}x{cols} vs {}", data.len());
        Self { rows, cols, data }
    }

    pub fn filled(rows: usize, cols: usize, v: f64) -> Self {
        Self::from_vec(rows, cols, vec![v; rows * cols])
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, o: &Mat) {
        debug_assert_eq!(self.shape(), o.shape());
        for (a, b) in self.data.iter_mut().zip(&o.data) {
            *a += b;
        }
    }

    pub fn norm_squared(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// Strided read-only view used to express transposes and column blocks to gemm.
#[derive(Clone, Copy)]
pub(crate) struct View<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: isize,
    pub cs: isize,
}

impl<'a> View<'a> {
    pub fn of(m: &'a Mat) -> Self {
        Self {
            data: &m.data,
            rows: m.rows,
            cols: m.cols,
            rs: m.cols as isize,
            cs: 1,
        }
    }

    /// Column block `[col, col + width)` of rows `[row, row + height)` in a row-major buffer of width `ld`.
    pub fn block(data: &'a [f64], ld: usize, row: usize, height: usize, col: usize, width: usize) -> Self {
        let start = row * ld + col;
        let end = if height == 0 { start } else { (row + height - 1) * ld + col + width };
        Self {
            data: &data[start..end],
            rows: height,
            cols: width,
            rs: ld as isize,
            cs: 1,
        }
    }

    pub fn t(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

/// `c = alpha · a · b + beta · c` where `c` is a row-major block with leading dimension `ldc`.
pub(crate) fn gemm(alpha: f64, a: View, b: View, beta: f64, c: &mut [f64], ldc: usize) {
    assert_eq!(a.cols, b.rows, "gemm inner dimensions");
    let (m, k, n) = (a.rows, a.cols, b.cols);
    if m == 0 || n == 0 {
        return;
    }
    if m > 0 && n > 0 {
        assert!(c.len() >= (m - 1) * ldc + n, "gemm output buffer too small");
    }
    // SAFETY: bounds of every operand were checked above against the strides in use.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            ldc as isize,
            1,
        );
    }
}

pub fn matmul(a: &Mat, b: &Mat) -> Mat {
    let mut out = Mat::zeros(a.rows, b.cols);
    gemm(1.0, View::of(a), View::of(b), 0.0, &mut out.data, b.cols);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_with_transposes_and_blocks() {
        let a = Mat::from_vec(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = Mat::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        assert_eq!(matmul(&a, &b).data, vec![58.0, 64.0, 139.0, 154.0]);

        // aᵀ·a
        let mut out = vec![0.0; 9];
        gemm(1.0, View::of(&a).t(), View::of(&a), 0.0, &mut out, 3);
        assert_eq!(out, vec![17.0, 22.0, 27.0, 22.0, 29.0, 36.0, 27.0, 36.0, 45.0]);

        // columns 1..3 of a times its transpose
        let blk = View::block(&a.data, 3, 0, 2, 1, 2);
        let mut out = vec![0.0; 4];
        gemm(1.0, blk, blk.t(), 0.0, &mut out, 2);
        assert_eq!(out, vec![13.0, 28.0, 28.0, 61.0]);
    }
}

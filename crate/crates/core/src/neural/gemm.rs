//! Thin safe wrapper over `matrixmultiply::zgemm`.

use crate::signal::C64;

/// Strided view description: `(rows, cols, row_stride, col_stride)`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct View {
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl View {
    pub fn row_major(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            rs: cols,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows x cols` matrix.
    pub fn transposed(rows: usize, cols: usize) -> Self {
        Self {
            rows: cols,
            cols: rows,
            rs: 1,
            cs: cols,
        }
    }

    fn span(&self) -> usize {
        if self.rows == 0 || self.cols == 0 {
            0
        } else {
            (self.rows - 1) * self.rs + (self.cols - 1) * self.cs + 1
        }
    }
}

/// `c <- beta c + a b`.
pub(crate) fn gemm(a: &[C64], av: View, b: &[C64], bv: View, beta: f64, c: &mut [C64], cv: View) {
    assert_eq!(av.cols, bv.rows, "inner dimensions differ");
    assert_eq!((av.rows, bv.cols), (cv.rows, cv.cols), "output shape differs");
    assert!(a.len() >= av.span() && b.len() >= bv.span() && c.len() >= cv.span());
    if cv.rows == 0 || cv.cols == 0 {
        return;
    }
    // SAFETY: Complex64 is repr(C) with layout [f64; 2]; the slices cover
    // every index reachable through the given views (checked above).
    unsafe {
        matrixmultiply::zgemm(
            matrixmultiply::CGemmOption::Standard,
            matrixmultiply::CGemmOption::Standard,
            av.rows,
            av.cols,
            bv.cols,
            [1.0, 0.0],
            a.as_ptr() as *const [f64; 2],
            av.rs as isize,
            av.cs as isize,
            b.as_ptr() as *const [f64; 2],
            bv.rs as isize,
            bv.cs as isize,
            [beta, 0.0],
            c.as_mut_ptr() as *mut [f64; 2],
            cv.rs as isize,
            cv.cs as isize,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matches_naive_product() {
        let (m, k, n) = (3, 4, 5);
        let a: Vec<C64> = (0..m * k).map(|i| C64::new(i as f64, -(i as f64) * 0.5)).collect();
        let b: Vec<C64> = (0..k * n).map(|i| C64::new(1.0 - i as f64, 0.25 * i as f64)).collect();
        let mut c = vec![C64::new(1.0, 1.0); m * n];
        gemm(&a, View::row_major(m, k), &b, View::row_major(k, n), 2.0, &mut c, View::row_major(m, n));
        for i in 0..m {
            for j in 0..n {
                let want: C64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum::<C64>() + C64::new(2.0, 2.0);
                assert!((c[i * n + j] - want).norm() < 1e-9);
            }
        }
        // transposed view of a
        let mut d = vec![C64::default(); k * k];
        gemm(&a, View::transposed(m, k), &a, View::row_major(m, k), 0.0, &mut d, View::row_major(k, k));
        for i in 0..k {
            for j in 0..k {
                let want: C64 = (0..m).map(|l| a[l * k + i] * a[l * k + j]).sum();
                assert!((d[i * k + j] - want).norm() < 1e-9);
            }
        }
    }
}

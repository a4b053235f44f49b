//! Small dense matrix-vector kernels used by the policy networks.
//!
//! Matrices are row-major `rows x cols` slices. Networks here are small
//! (hidden width 32), so plain loops are fast enough and keep evaluation
//! order fixed, which the bit-reproducibility contract relies on.

/// out = W x
pub fn matvec(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(x.len(), cols);
    debug_assert_eq!(out.len(), rows);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] = acc;
    }
}

/// out += W x
pub fn matvec_acc(w: &[f64], rows: usize, cols: usize, x: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let mut acc = 0.0;
        for c in 0..cols {
            acc += row[c] * x[c];
        }
        out[r] += acc;
    }
}

/// out += W^T y
pub fn matvec_t_acc(w: &[f64], rows: usize, cols: usize, y: &[f64], out: &mut [f64]) {
    debug_assert_eq!(w.len(), rows * cols);
    debug_assert_eq!(y.len(), rows);
    debug_assert_eq!(out.len(), cols);
    for r in 0..rows {
        let row = &w[r * cols..(r + 1) * cols];
        let yr = y[r];
        for c in 0..cols {
            out[c] += row[c] * yr;
        }
    }
}

/// dW += y x^T (outer product accumulation)
pub fn outer_acc(dw: &mut [f64], y: &[f64], x: &[f64]) {
    debug_assert_eq!(dw.len(), y.len() * x.len());
    let cols = x.len();
    for (r, &yr) in y.iter().enumerate() {
        let row = &mut dw[r * cols..(r + 1) * cols];
        for c in 0..cols {
            row[c] += yr * x[c];
        }
    }
}


pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matvec_small() {
        // [[1,2],[3,4]] * [5,6] = [17, 39]
        let w = [1.0, 2.0, 3.0, 4.0];
        let mut out = [0.0; 2];
        matvec(&w, 2, 2, &[5.0, 6.0], &mut out);
        assert_eq!(out, [17.0, 39.0]);
    }

    #[test]
    fn transpose_consistency() {
        // y^T (W x) == (W^T y)^T x
        let w = [0.5, -1.0, 2.0, 0.25, 3.0, -0.5];
        let x = [1.0, -2.0];
        let y = [0.3, 0.7, -0.1];
        let mut wx = [0.0; 3];
        matvec(&w, 3, 2, &x, &mut wx);
        let lhs: f64 = y.iter().zip(&wx).map(|(a, b)| a * b).sum();
        let mut wty = [0.0; 2];
        matvec_t_acc(&w, 3, 2, &y, &mut wty);
        let rhs: f64 = wty.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-14);
    }
}

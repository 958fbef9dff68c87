//! Dense matrix helpers on top of nalgebra: activations, validation,
//! Glorot initialization, SPD solves and the binary tensor format.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{Cholesky, DMatrix, RowDVector};
use rand::Rng;

use crate::error::{Error, Result};

pub fn ensure_finite(m: &DMatrix<f64>, what: &str) -> Result<()> {
    if m.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Uniform in `±sqrt(6 / (rows + cols))`.
pub fn glorot_uniform<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> DMatrix<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    DMatrix::from_fn(rows, cols, |_, _| rng.random_range(-limit..=limit))
}

/// `x * w + b`, with `b` broadcast over rows.
pub fn affine(x: &DMatrix<f64>, w: &DMatrix<f64>, b: &RowDVector<f64>) -> DMatrix<f64> {
    let mut y = x * w;
    for mut row in y.row_iter_mut() {
        row += b;
    }
    y
}

pub fn tanh_inplace(m: &mut DMatrix<f64>) {
    m.apply(|v| *v = v.tanh());
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Row-wise log-softmax with max subtraction.
pub fn log_softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        row.apply(|v| *v -= lse);
    }
    out
}

pub fn softmax_rows(logits: &DMatrix<f64>) -> DMatrix<f64> {
    let mut out = logits.clone();
    for mut row in out.row_iter_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.apply(|v| *v = (*v - max).exp());
        let total: f64 = row.iter().sum();
        row.apply(|v| *v /= total);
    }
    out
}

/// Scales each nonzero row to unit Euclidean norm.
pub fn l2_normalize_rows(m: &mut DMatrix<f64>) {
    for mut row in m.row_iter_mut() {
        let norm = row.norm();
        if norm > 0.0 {
            row.apply(|v| *v /= norm);
        }
    }
}

/// Solves `x * g = rhs` for symmetric positive definite `g`.
pub fn solve_spd_right(g: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(g)
        .ok_or_else(|| Error::NonFinite("Cholesky factorization (matrix not SPD)".into()))?;
    Ok(chol.solve(&rhs.transpose()).transpose())
}

/// Solves `g * x = rhs` for symmetric positive definite `g`.
pub fn solve_spd_left(g: DMatrix<f64>, rhs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let chol = Cholesky::new(g)
        .ok_or_else(|| Error::NonFinite("Cholesky factorization (matrix not SPD)".into()))?;
    Ok(chol.solve(rhs))
}

/// Writes `rows`, `cols` as little-endian u64 followed by the entries as
/// little-endian f64 in row-major order.
pub fn write_tensor(path: &Path, m: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(&(m.nrows() as u64).to_le_bytes())?;
    put(&(m.ncols() as u64).to_le_bytes())?;
    for r in 0..m.nrows() {
        for c in 0..m.ncols() {
            put(&m[(r, c)].to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: &Path) -> Result<DMatrix<f64>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut word = [0u8; 8];
    let mut next = |r: &mut BufReader<File>| -> Result<[u8; 8]> {
        r.read_exact(&mut word).map_err(|e| Error::io(path, e))?;
        Ok(word)
    };
    let rows = u64::from_le_bytes(next(&mut r)?) as usize;
    let cols = u64::from_le_bytes(next(&mut r)?) as usize;
    let mut data = Vec::with_capacity(rows.saturating_mul(cols));
    for _ in 0..rows * cols {
        data.push(f64::from_le_bytes(next(&mut r)?));
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
    if !rest.is_empty() {
        return Err(Error::format(path, "trailing bytes after tensor data"));
    }
    Ok(DMatrix::from_row_slice(rows, cols, &data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_rows_sum_to_one_and_handle_large_logits() {
        let logits = DMatrix::from_row_slice(2, 3, &[1000.0, 1000.0, 1000.0, -5.0, 0.0, 800.0]);
        let p = softmax_rows(&logits);
        for r in 0..2 {
            let s: f64 = p.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
        assert!((p[(0, 1)] - 1.0 / 3.0).abs() < 1e-15);
        let lp = log_softmax_rows(&logits);
        assert!(lp.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sigmoid_is_symmetric() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!((sigmoid(3.0) + sigmoid(-3.0) - 1.0).abs() < 1e-15);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
    }

    #[test]
    fn spd_solves_agree_with_inverse() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 3.0]);
        let rhs = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let x = solve_spd_right(g.clone(), &rhs).unwrap();
        assert!((&x * &g - &rhs).norm() < 1e-12);
        let y = solve_spd_left(g.clone(), &rhs.transpose()).unwrap();
        assert!((&g * &y - rhs.transpose()).norm() < 1e-12);
    }

    #[test]
    fn tensor_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = glorot_uniform(3, 5, &mut rng);
        write_tensor(&path, &m).unwrap();
        let back = read_tensor(&path).unwrap();
        assert_eq!(m.shape(), back.shape());
        assert!(m.iter().zip(back.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 16 + 15 * 8);
        assert_eq!(&bytes[..8], &3u64.to_le_bytes());
        // Row-major: second stored value is entry (0, 1).
        assert_eq!(&bytes[24..32], &m[(0, 1)].to_le_bytes());
    }

    #[test]
    fn nonfinite_is_rejected() {
        let m = DMatrix::from_row_slice(1, 2, &[1.0, f64::NAN]);
        assert!(ensure_finite(&m, "x").is_err());
    }
}

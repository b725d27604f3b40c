//! Symmetric eigendecomposition and eigenspectrum analysis of TDEC matrices.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::correlation::{SourceId, TdecMatrix};
use crate::ingest::Label;
use crate::matrix::Matrix;
use crate::{Error, Result};

/// Sweep cap for the cyclic Jacobi iteration.
pub const MAX_SWEEPS: usize = 100;
/// Off-diagonal Frobenius norm, relative to the input norm, at which iteration stops.
pub const OFF_DIAGONAL_TOLERANCE: f64 = 1e-12;

/// Eigenvalues in descending order with matching orthonormal eigenvectors (columns).
#[derive(Debug, Clone, PartialEq)]
pub struct SymmetricEigen {
    pub values: Vec<f64>,
    pub vectors: Matrix,
    pub sweeps: usize,
}

impl SymmetricEigen {
    /// V·diag(λ)·Vᵀ.
    pub fn reconstruct(&self) -> Matrix {
        let n = self.values.len();
        let scaled = Matrix::from_fn(n, n, |r, c| self.vectors[(r, c)] * self.values[c]);
        scaled.matmul(&self.vectors.transpose())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
///
/// Each rotation zeroes one off-diagonal pair; a sweep visits every pair once
/// in row order. Iteration ends when the off-diagonal Frobenius norm falls
/// below `OFF_DIAGONAL_TOLERANCE · ‖A‖_F`.
pub fn eig_sym(matrix: &Matrix) -> Result<SymmetricEigen> {
    if !matrix.is_square() {
        return Err(Error::Shape(format!(
            "eigendecomposition needs a square matrix, got {}x{}",
            matrix.rows(),
            matrix.cols()
        )));
    }
    let n = matrix.rows();
    let asym = matrix.max_asymmetry();
    if asym > 1e-8 * matrix.max_abs().max(1.0) {
        return Err(Error::NotSymmetric(asym));
    }
    let mut a = Matrix::from_fn(n, n, |r, c| 0.5 * (matrix[(r, c)] + matrix[(c, r)]));
    let mut v = Matrix::identity(n);

    let norm = a.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    let target = OFF_DIAGONAL_TOLERANCE * norm;
    let off_norm = |a: &Matrix| {
        let mut s = 0.0;
        for r in 0..n {
            for c in 0..n {
                if r != c {
                    s += a[(r, c)] * a[(r, c)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    while off_norm(&a) > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence(MAX_SWEEPS));
        }
        sweeps += 1;
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[(p, q)];
                if apq == 0.0 {
                    continue;
                }
                let tau = (a[(q, q)] - a[(p, p)]) / (2.0 * apq);
                let t = if tau >= 0.0 {
                    1.0 / (tau + (1.0 + tau * tau).sqrt())
                } else {
                    -1.0 / (-tau + (1.0 + tau * tau).sqrt())
                };
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = t * c;
                rotate(&mut a, &mut v, p, q, c, s);
            }
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].total_cmp(&a[(i, i)]));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Matrix::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymmetricEigen {
        values,
        vectors,
        sweeps,
    })
}

/// A ← JᵀAJ and V ← VJ for the plane rotation J acting on (p, q).
fn rotate(a: &mut Matrix, v: &mut Matrix, p: usize, q: usize, c: f64, s: f64) {
    let n = a.rows();
    for k in 0..n {
        let akp = a[(k, p)];
        let akq = a[(k, q)];
        a[(k, p)] = c * akp - s * akq;
        a[(k, q)] = s * akp + c * akq;
    }
    for k in 0..n {
        let apk = a[(p, k)];
        let aqk = a[(q, k)];
        a[(p, k)] = c * apk - s * aqk;
        a[(q, k)] = s * apk + c * aqk;
    }
    a[(p, q)] = 0.0;
    a[(q, p)] = 0.0;
    for k in 0..n {
        let vkp = v[(k, p)];
        let vkq = v[(k, q)];
        v[(k, p)] = c * vkp - s * vkq;
        v[(k, q)] = s * vkp + c * vkq;
    }
}

/// Rank-ordered eigenvalues of one TDEC matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Eigenspectrum {
    pub values: Vec<f64>,
    #[serde(default)]
    pub source: Option<SourceId>,
    #[serde(default)]
    pub label: Option<Label>,
}

impl Eigenspectrum {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_label(mut self, label: Label) -> Self {
        self.label = Some(label);
        self
    }
}

/// Descending eigenvalues of a unit-diagonal correlation matrix; small negative
/// values from rounding are clamped to zero.
pub fn eigenspectrum(m: &TdecMatrix) -> Result<Eigenspectrum> {
    let values = spectrum_of(&m.values)?;
    Ok(Eigenspectrum {
        values,
        source: m.source.clone(),
        label: None,
    })
}

/// Same as [`eigenspectrum`] for a bare square correlation matrix.
pub fn spectrum_of(m: &Matrix) -> Result<Vec<f64>> {
    let dim = m.rows();
    let floor = -1e-8 * dim as f64;
    let eig = eig_sym(m)?;
    eig.values
        .into_iter()
        .map(|l| {
            if l < floor {
                Err(Error::Validation(format!(
                    "eigenvalue {l:e} below PSD floor {floor:e}"
                )))
            } else {
                Ok(l.max(0.0))
            }
        })
        .collect()
}

/// Elementwise mean of the spectra carrying `label`.
pub fn group_average(spectra: &[Eigenspectrum], label: Label) -> Result<Vec<f64>> {
    if let Some(first) = spectra.first() {
        if let Some(bad) = spectra.iter().find(|s| s.len() != first.len()) {
            return Err(Error::LengthMismatch(first.len(), bad.len()));
        }
    }
    let group: Vec<&Eigenspectrum> = spectra.iter().filter(|s| s.label == Some(label)).collect();
    let Some(first) = group.first() else {
        return Err(Error::EmptyGroup(label.to_string()));
    };
    let mut sum = vec![0.0; first.len()];
    for s in &group {
        for (acc, v) in sum.iter_mut().zip(&s.values) {
            *acc += v;
        }
    }
    let n = group.len() as f64;
    Ok(sum.into_iter().map(|v| v / n).collect())
}

/// `avg_sz − avg_hc`, elementwise.
pub fn difference_curve(avg_sz: &[f64], avg_hc: &[f64]) -> Result<Vec<f64>> {
    if avg_sz.len() != avg_hc.len() {
        return Err(Error::LengthMismatch(avg_sz.len(), avg_hc.len()));
    }
    Ok(avg_sz.iter().zip(avg_hc).map(|(a, b)| a - b).collect())
}

/// Writes `rank,value` rows with ranks starting at 1.
pub fn write_spectrum_csv(path: &Path, values: &[f64]) -> Result<()> {
    let mut out = String::from("rank,value\n");
    for (j, v) in values.iter().enumerate() {
        out.push_str(&format!("{},{}\n", j + 1, v));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_spectrum_csv(path: &Path) -> Result<Vec<f64>> {
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
    let mut values = Vec::new();
    for (j, rec) in reader.records().enumerate() {
        let rec = rec.map_err(|e| Error::Parse(format!("{}: {e}", path.display())))?;
        let rank: usize = rec
            .get(0)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("{}: bad rank on row {j}", path.display())))?;
        if rank != j + 1 {
            return Err(Error::Parse(format!("{}: rank {rank} out of order", path.display())));
        }
        let value: f64 = rec
            .get(1)
            .and_then(|s| s.trim().parse().ok())
            .ok_or_else(|| Error::Parse(format!("{}: bad value on row {j}", path.display())))?;
        values.push(value);
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spectrum(values: Vec<f64>, label: Label) -> Eigenspectrum {
        Eigenspectrum {
            values,
            source: None,
            label: Some(label),
        }
    }

    #[test]
    fn identity_and_ones() {
        let e = eig_sym(&Matrix::identity(3)).unwrap();
        assert_eq!(e.values, vec![1.0, 1.0, 1.0]);
        let e = eig_sym(&Matrix::from_vec(4, 4, vec![1.0; 16])).unwrap();
        let expected = [4.0, 0.0, 0.0, 0.0];
        for (got, want) in e.values.iter().zip(expected) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
    }

    #[test]
    fn rejects_asymmetric() {
        let m = Matrix::from_vec(2, 2, vec![1.0, 0.5, 0.4, 1.0]);
        assert!(matches!(eig_sym(&m), Err(Error::NotSymmetric(_))));
    }

    #[test]
    fn two_by_two_closed_form() {
        let m = Matrix::from_vec(2, 2, vec![2.0, 1.0, 1.0, 2.0]);
        let e = eig_sym(&m).unwrap();
        assert!((e.values[0] - 3.0).abs() < 1e-14);
        assert!((e.values[1] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn group_average_and_difference() {
        let spectra = vec![
            spectrum(vec![2.0, 0.0], Label::Sz),
            spectrum(vec![0.0, 2.0], Label::Sz),
            spectrum(vec![1.5, 0.5], Label::Hc),
        ];
        assert_eq!(group_average(&spectra, Label::Sz).unwrap(), vec![1.0, 1.0]);
        assert_eq!(group_average(&spectra[2..], Label::Hc).unwrap(), vec![1.5, 0.5]);
        assert!(matches!(group_average(&spectra[..2], Label::Hc), Err(Error::EmptyGroup(_))));
        let mixed = vec![spectrum(vec![0.0; 150], Label::Sz), spectrum(vec![0.0; 120], Label::Sz)];
        assert!(matches!(group_average(&mixed, Label::Sz), Err(Error::LengthMismatch(150, 120))));

        assert_eq!(difference_curve(&[1.0, 2.0], &[1.0, 1.0]).unwrap(), vec![0.0, 1.0]);
        assert_eq!(difference_curve(&[0.3, 0.7], &[0.3, 0.7]).unwrap(), vec![0.0, 0.0]);
        assert!(difference_curve(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn spectrum_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        let values = vec![3.25, 1.0 / 3.0, 0.0];
        write_spectrum_csv(&path, &values).unwrap();
        assert!(fs::read_to_string(&path).unwrap().starts_with("rank,value\n1,3.25\n"));
        assert_eq!(read_spectrum_csv(&path).unwrap(), values);
    }
}

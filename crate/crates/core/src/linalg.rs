//! Sparse direct solves with a reusable pattern, and the M-matrix row test.

use faer::linalg::solvers::Solve;
use faer::sparse::linalg::solvers::{Lu, SymbolicLu};
use faer::sparse::{SparseColMatRef, SymbolicSparseColMat};
use faer::MatMut;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Row-compressed matrix. Columns within a row are strictly increasing.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Csr {
    pub n: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub vals: Vec<f64>,
}

impl Csr {
    pub fn from_dense(a: &[Vec<f64>]) -> Self {
        let mut m = Csr {
            n: a.len(),
            row_ptr: vec![0],
            ..Csr::default()
        };
        for row in a {
            for (c, &v) in row.iter().enumerate() {
                if v != 0.0 {
                    m.cols.push(c);
                    m.vals.push(v);
                }
            }
            m.row_ptr.push(m.cols.len());
        }
        m
    }

    pub fn row(&self, r: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        (self.row_ptr[r]..self.row_ptr[r + 1]).map(move |p| (self.cols[p], self.vals[p]))
    }

    pub fn mul(&self, x: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate().take(self.n) {
            *o = self.row(r).map(|(c, v)| v * x[c]).sum();
        }
    }
}

/// LU factorization for a family of matrices sharing one sparsity
/// pattern. The row-compressed arrays are handed to the factorization as
/// the column-compressed transpose and solved with the transposed factors.
pub struct PatternLu {
    row_ptr: Vec<usize>,
    cols: Vec<usize>,
    symbolic: SymbolicSparseColMat<usize>,
    symbolic_lu: SymbolicLu<usize>,
    numeric: Option<Lu<usize, f64>>,
}

impl PatternLu {
    pub fn new(n: usize, row_ptr: Vec<usize>, cols: Vec<usize>) -> Result<Self> {
        let symbolic = SymbolicSparseColMat::new_checked(n, n, row_ptr.clone(), None, cols.clone());
        let symbolic_lu = SymbolicLu::try_new(symbolic.as_ref())
            .map_err(|e| Error::LinearSolve(format!("symbolic factorization: {e:?}")))?;
        Ok(PatternLu {
            row_ptr,
            cols,
            symbolic,
            symbolic_lu,
            numeric: None,
        })
    }

    pub fn matches(&self, row_ptr: &[usize], cols: &[usize]) -> bool {
        self.row_ptr == row_ptr && self.cols == cols
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    /// Numeric factorization for values laid out along the pattern.
    pub fn factor(&mut self, vals: &[f64]) -> Result<()> {
        let mat = SparseColMatRef::new(self.symbolic.as_ref(), vals);
        let lu = Lu::try_new_with_symbolic(self.symbolic_lu.clone(), mat)
            .map_err(|e| Error::LinearSolve(format!("numeric factorization: {e:?}")))?;
        self.numeric = Some(lu);
        Ok(())
    }

    /// Solves `A x = rhs` in place for the last factored values.
    pub fn solve(&self, rhs: &mut [f64]) -> Result<()> {
        let lu = self
            .numeric
            .as_ref()
            .ok_or_else(|| Error::LinearSolve("solve before factorization".into()))?;
        let n = rhs.len();
        lu.solve_transpose_in_place(MatMut::from_column_major_slice_mut(rhs, n, 1));
        if rhs.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(Error::LinearSolve("non-finite solution".into()))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RowDefect {
    NonPositiveDiagonal,
    PositiveOffDiagonal,
    NotDominant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowViolation {
    pub row: usize,
    pub defect: RowDefect,
    pub value: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MMatrixReport {
    pub rows_checked: usize,
    pub violations: Vec<RowViolation>,
    /// Damping events while assembling.
    pub damping_events: usize,
}

impl MMatrixReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: MMatrixReport) {
        self.rows_checked += other.rows_checked;
        self.violations.extend(other.violations);
        self.damping_events += other.damping_events;
    }
}

/// Row-wise M-matrix test: positive diagonal, non-positive off-diagonals
/// and weak diagonal dominance, each up to a relative tolerance.
pub fn m_matrix_check(a: &Csr) -> MMatrixReport {
    let mut report = MMatrixReport::default();
    for r in 0..a.n {
        check_row(r, a.row(r), &mut report);
    }
    report
}

/// Adds the verdict for one row to `report`.
pub fn check_row(r: usize, entries: impl Iterator<Item = (usize, f64)>, report: &mut MMatrixReport) {
    const TOL: f64 = 1e-10;
    report.rows_checked += 1;
    let mut diag = 0.0;
    let mut off = 0.0;
    let mut scale = 0.0f64;
    let mut worst_positive = 0.0f64;
    for (c, v) in entries {
        scale = scale.max(v.abs());
        if c == r {
            diag += v;
        } else {
            off += v.abs();
            worst_positive = worst_positive.max(v);
        }
    }
    let slack = TOL * scale.max(f64::MIN_POSITIVE);
    if worst_positive > slack {
        report.violations.push(RowViolation {
            row: r,
            defect: RowDefect::PositiveOffDiagonal,
            value: worst_positive,
        });
    }
    if diag <= 0.0 {
        report.violations.push(RowViolation {
            row: r,
            defect: RowDefect::NonPositiveDiagonal,
            value: diag,
        });
    } else if diag < off - slack {
        report.violations.push(RowViolation {
            row: r,
            defect: RowDefect::NotDominant,
            value: diag - off,
        });
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn m_matrix_examples() {
        let ok = Csr::from_dense(&[vec![2.0, -1.0], vec![-1.0, 2.0]]);
        assert!(m_matrix_check(&ok).passed());
        let bad = Csr::from_dense(&[vec![1.0, 0.5], vec![0.0, 1.0]]);
        let r = m_matrix_check(&bad);
        assert!(!r.passed());
        assert_eq!(r.violations[0].row, 0);
        assert_eq!(r.violations[0].defect, RowDefect::PositiveOffDiagonal);
        let weak = Csr::from_dense(&[vec![1.0, -2.0], vec![0.0, 1.0]]);
        assert_eq!(m_matrix_check(&weak).violations[0].defect, RowDefect::NotDominant);
    }

    #[test]
    fn pattern_lu_solves_and_refactors() {
        // Tridiagonal system with a known solution.
        let n = 50;
        let mut a = vec![vec![0.0; n]; n];
        for i in 0..n {
            a[i][i] = 3.0;
            if i > 0 {
                a[i][i - 1] = -1.0;
            }
            if i + 1 < n {
                a[i][i + 1] = -1.5;
            }
        }
        let m = Csr::from_dense(&a);
        let mut lu = PatternLu::new(n, m.row_ptr.clone(), m.cols.clone()).unwrap();
        let x: Vec<f64> = (0..n).map(|i| (i as f64).sin()).collect();
        for scale in [1.0, 2.5] {
            let vals: Vec<f64> = m.vals.iter().map(|v| v * scale).collect();
            lu.factor(&vals).unwrap();
            let mut b = vec![0.0; n];
            Csr { vals, ..m.clone() }.mul(&x, &mut b);
            lu.solve(&mut b).unwrap();
            for i in 0..n {
                assert!((b[i] - x[i]).abs() < 1e-12);
            }
        }
        assert!(lu.matches(&m.row_ptr, &m.cols));
    }
}

use nalgebra::DMatrix;

use super::OdeSystem;

/// Which entries of the Jacobian may be structurally non-zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Sparsity {
    Dense,
    /// Entries within `lower` sub- and `upper` super-diagonals, plus full
    /// columns for the listed state indices.
    Banded {
        lower: usize,
        upper: usize,
        dense_columns: Vec<usize>,
    },
}

impl Sparsity {
    fn column_rows(&self, n: usize, j: usize) -> Vec<usize> {
        match self {
            Sparsity::Dense => (0..n).collect(),
            Sparsity::Banded {
                lower,
                upper,
                dense_columns,
            } => {
                if dense_columns.contains(&j) {
                    (0..n).collect()
                } else {
                    let lo = j.saturating_sub(*upper);
                    let hi = (j + lower).min(n - 1);
                    (lo..=hi).collect()
                }
            }
        }
    }
}

/// Greedy colouring of Jacobian columns: columns in one group touch
/// disjoint rows and can be differenced with a single evaluation.
pub fn column_groups(sparsity: &Sparsity, n: usize) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut used: Vec<Vec<bool>> = Vec::new();
    for j in 0..n {
        let rows = sparsity.column_rows(n, j);
        let slot = used.iter().position(|mask| rows.iter().all(|&r| !mask[r]));
        let g = match slot {
            Some(g) => g,
            None => {
                groups.push(Vec::new());
                used.push(vec![false; n]);
                groups.len() - 1
            }
        };
        groups[g].push(j);
        for r in rows {
            used[g][r] = true;
        }
    }
    groups
}

pub(crate) struct FdJacobian {
    groups: Vec<Vec<usize>>,
    rows: Vec<Vec<usize>>,
    pub matrix: DMatrix<f64>,
}

impl FdJacobian {
    pub fn new(sparsity: &Sparsity, n: usize) -> Self {
        let rows = (0..n).map(|j| sparsity.column_rows(n, j)).collect();
        Self {
            groups: column_groups(sparsity, n),
            rows,
            matrix: DMatrix::zeros(n, n),
        }
    }

    /// Forward-difference Jacobian at `(t, y)` given `f0 = f(t, y)`.
    /// Returns the number of right-hand side evaluations used.
    pub fn update<S: OdeSystem + ?Sized>(
        &mut self,
        system: &S,
        t: f64,
        y: &[f64],
        f0: &[f64],
        magnitude: &[f64],
    ) -> usize {
        let n = y.len();
        let sqrt_eps = f64::EPSILON.sqrt();
        let mut yp = y.to_vec();
        let mut fp = vec![0.0; n];
        let mut deltas = vec![0.0; n];
        for group in &self.groups {
            for &j in group {
                let d = sqrt_eps * y[j].abs().max(magnitude[j]).max(f64::MIN_POSITIVE);
                // Round so that the perturbation is exactly representable.
                let yj = y[j] + d;
                deltas[j] = yj - y[j];
                yp[j] = yj;
            }
            system.rhs(t, &yp, &mut fp);
            for &j in group {
                for &r in &self.rows[j] {
                    self.matrix[(r, j)] = (fp[r] - f0[r]) / deltas[j];
                }
                yp[j] = y[j];
            }
        }
        self.groups.len()
    }
}

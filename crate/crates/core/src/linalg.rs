//! Dense and banded linear solvers used by the model and the fine-scale solvers.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// LU factorization with partial pivoting that can also solve with the transpose.
#[derive(Clone, Debug)]
pub struct DenseLu {
    lu: nalgebra::LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    n: usize,
}

impl DenseLu {
    /// Factors `a`; pivots below `1e-14 * max|a|` are reported as singular.
    pub fn new(a: DMatrix<f64>) -> Result<Self> {
        if !a.is_square() {
            return Err(Error::ShapeMismatch {
                expected: a.nrows(),
                got: a.ncols(),
                context: "square matrix for LU",
            });
        }
        if a.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("matrix entry"));
        }
        let n = a.nrows();
        let scale = a.amax().max(f64::MIN_POSITIVE);
        let lu = a.lu();
        let u = lu.u();
        for i in 0..n {
            if u[(i, i)].abs() <= 1e-14 * scale {
                return Err(Error::Singular {
                    column: i,
                    pivot: u[(i, i)],
                });
            }
        }
        Ok(Self { lu, n })
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        let x = self.lu.solve(&rhs).ok_or(Error::Singular {
            column: 0,
            pivot: 0.0,
        })?;
        Ok(x.as_slice().to_vec())
    }

    /// Solves `aᵀ x = b` from the same factors: `aᵀ = Uᵀ Lᵀ P`.
    pub fn solve_transpose(&self, b: &[f64]) -> Result<Vec<f64>> {
        let rhs = DVector::from_column_slice(b);
        let ut = self.lu.u().transpose();
        let y = ut.solve_lower_triangular(&rhs).ok_or(Error::Singular {
            column: 0,
            pivot: 0.0,
        })?;
        let lt = self.lu.l().transpose();
        let mut z = lt.solve_upper_triangular(&y).ok_or(Error::Singular {
            column: 0,
            pivot: 0.0,
        })?;
        self.lu.p().inv_permute_rows(&mut z);
        Ok(z.as_slice().to_vec())
    }
}

/// Largest singular value by power iteration on `mᵀ m`.
pub fn spectral_norm(m: &DMatrix<f64>, tol: f64, max_iter: usize) -> f64 {
    if m.is_empty() || m.amax() == 0.0 {
        return 0.0;
    }
    let mtm = m.transpose() * m;
    // deterministic start with every component nonzero
    let mut v = DVector::from_fn(m.ncols(), |i, _| 1.0 + 0.1 * (i as f64 + 1.0).sin());
    v /= v.norm();
    let mut lambda = 0.0;
    for _ in 0..max_iter {
        let w = &mtm * &v;
        let norm = w.norm();
        if norm == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / norm;
        if (next - lambda).abs() <= tol * next.abs() {
            lambda = next;
            break;
        }
        lambda = next;
    }
    lambda.max(0.0).sqrt()
}

/// Cholesky factor of a symmetric positive definite matrix in envelope
/// (variable band) storage.
#[derive(Clone, Debug)]
pub struct EnvelopeCholesky {
    first: Vec<usize>,
    start: Vec<usize>,
    vals: Vec<f64>,
}

impl EnvelopeCholesky {
    /// Factors the matrix given by its lower-triangle entries `(i, j, a_ij)`
    /// with `j <= i`. Duplicate entries are summed.
    pub fn new(n: usize, lower: &[(usize, usize, f64)]) -> Result<Self> {
        let mut first: Vec<usize> = (0..n).collect();
        for &(i, j, _) in lower {
            if j > i || i >= n {
                return Err(Error::InvalidArgument(format!("({i}, {j}) is not a lower-triangle entry")));
            }
            first[i] = first[i].min(j);
        }
        let mut start = Vec::with_capacity(n + 1);
        start.push(0);
        for i in 0..n {
            start.push(start[i] + i - first[i] + 1);
        }
        let mut vals = vec![0.0; start[n]];
        for &(i, j, v) in lower {
            vals[start[i] + j - first[i]] += v;
        }
        for i in 0..n {
            for j in first[i]..=i {
                let lo = first[i].max(first[j]);
                let mut s = vals[start[i] + j - first[i]];
                for k in lo..j {
                    s -= vals[start[i] + k - first[i]] * vals[start[j] + k - first[j]];
                }
                if j < i {
                    vals[start[i] + j - first[i]] = s / vals[start[j] + j - first[j]];
                } else {
                    if !(s > 0.0) {
                        return Err(Error::Singular { column: i, pivot: s });
                    }
                    vals[start[i] + i - first[i]] = s.sqrt();
                }
            }
        }
        Ok(Self { first, start, vals })
    }

    fn at(&self, i: usize, j: usize) -> f64 {
        self.vals[self.start[i] + j - self.first[i]]
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.first.len();
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in self.first[i]..i {
                s -= self.at(i, k) * y[k];
            }
            y[i] = s / self.at(i, i);
        }
        for i in (0..n).rev() {
            y[i] /= self.at(i, i);
            let yi = y[i];
            for k in self.first[i]..i {
                y[k] -= self.at(i, k) * yi;
            }
        }
        y
    }
}

/// Reverse Cuthill-McKee ordering of an undirected graph. Returns
/// `order[new] = old`.
pub fn reverse_cuthill_mckee(adj: &[Vec<usize>]) -> Vec<usize> {
    let n = adj.len();
    let mut visited = vec![false; n];
    let mut order = Vec::with_capacity(n);
    while order.len() < n {
        let root = (0..n)
            .filter(|&v| !visited[v])
            .min_by_key(|&v| (adj[v].len(), v))
            .expect("unvisited vertex");
        visited[root] = true;
        let mut head = order.len();
        order.push(root);
        while head < order.len() {
            let v = order[head];
            head += 1;
            let mut next: Vec<usize> = adj[v].iter().copied().filter(|&w| !visited[w]).collect();
            next.sort_by_key(|&w| (adj[w].len(), w));
            next.dedup();
            for w in next {
                if !visited[w] {
                    visited[w] = true;
                    order.push(w);
                }
            }
        }
    }
    order.reverse();
    order
}

/// Solves a sparse SPD system given by its full set of entries, reordering
/// with reverse Cuthill-McKee before an envelope Cholesky factorization.
pub fn solve_spd(n: usize, entries: &[(usize, usize, f64)], b: &[f64]) -> Result<Vec<f64>> {
    let mut adj = vec![Vec::new(); n];
    for &(i, j, _) in entries {
        if i != j {
            adj[i].push(j);
        }
    }
    let order = reverse_cuthill_mckee(&adj);
    let mut new_of = vec![0; n];
    for (new, &old) in order.iter().enumerate() {
        new_of[old] = new;
    }
    let lower: Vec<_> = entries
        .iter()
        .filter_map(|&(i, j, v)| {
            let (a, c) = (new_of[i], new_of[j]);
            (c <= a).then_some((a, c, v))
        })
        .collect();
    let chol = EnvelopeCholesky::new(n, &lower)?;
    let pb: Vec<f64> = order.iter().map(|&old| b[old]).collect();
    let px = chol.solve(&pb);
    let mut x = vec![0.0; n];
    for (new, &old) in order.iter().enumerate() {
        x[old] = px[new];
    }
    Ok(x)
}

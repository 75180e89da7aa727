//! Metric-weighted exterior calculus on a chain complex.
//!
//! With positive diagonals `B_k`, `D_k` the derivative and codifferential are
//! `d_k = B_{k+1} delta_k B_k^{-1}` and `d_k* = D_k^{-1} delta_kᵀ D_{k+1}`,
//! adjoint to each other under `(a, b)_k = sum a_i b_i D_k[i] / B_k[i]`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::complex::{ChainComplex, Cochain};
use crate::error::{check_len, Error, Result};

/// Log-parameterized diagonals `B_k = exp(log_b[k])`, `D_k = exp(log_d[k])`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metric {
    pub log_b: Vec<Vec<f64>>,
    pub log_d: Vec<Vec<f64>>,
}

impl Metric {
    /// `B = D = I`, the plain graph calculus.
    pub fn identity(c: &ChainComplex) -> Self {
        let zeros: Vec<Vec<f64>> = c.counts().iter().map(|&n| vec![0.0; n]).collect();
        Self {
            log_b: zeros.clone(),
            log_d: zeros,
        }
    }

    /// Log-entries drawn uniformly from `[-spread, spread]`.
    pub fn random<R: Rng>(c: &ChainComplex, spread: f64, rng: &mut R) -> Self {
        let mut draw = || -> Vec<Vec<f64>> {
            c.counts()
                .iter()
                .map(|&n| (0..n).map(|_| rng.random_range(-spread..=spread)).collect())
                .collect()
        };
        let log_b = draw();
        let log_d = draw();
        Self { log_b, log_d }
    }

    pub fn check(&self, c: &ChainComplex) -> Result<()> {
        check_len(c.dim() + 1, self.log_b.len(), "metric levels (B)")?;
        check_len(c.dim() + 1, self.log_d.len(), "metric levels (D)")?;
        for k in 0..=c.dim() {
            check_len(c.count(k), self.log_b[k].len(), "metric diagonal B")?;
            check_len(c.count(k), self.log_d[k].len(), "metric diagonal D")?;
        }
        Ok(())
    }

    pub fn b(&self, k: usize) -> Vec<f64> {
        self.log_b[k].iter().map(|v| v.exp()).collect()
    }

    pub fn d(&self, k: usize) -> Vec<f64> {
        self.log_d[k].iter().map(|v| v.exp()).collect()
    }

    /// Inner-product weights `D_k / B_k`.
    pub fn weight(&self, k: usize) -> Vec<f64> {
        self.log_d[k]
            .iter()
            .zip(&self.log_b[k])
            .map(|(d, b)| (d - b).exp())
            .collect()
    }
}

fn level_check(c: &ChainComplex, k: usize, top_exclusive: bool) -> Result<()> {
    if (top_exclusive && k >= c.dim()) || k > c.dim() {
        return Err(Error::LevelOutOfRange { level: k, dim: c.dim() });
    }
    Ok(())
}

/// `d_k u = B_{k+1} delta_k B_k^{-1} u`.
pub fn apply_d(m: &Metric, c: &ChainComplex, k: usize, u: &Cochain) -> Result<Cochain> {
    level_check(c, k, true)?;
    u.check(c, k)?;
    let scaled: Vec<f64> = u.values.iter().zip(m.b(k)).map(|(x, b)| x / b).collect();
    let out = c.coboundary(k)?.mul_vec(&scaled);
    let values = out.into_iter().zip(m.b(k + 1)).map(|(x, b)| x * b).collect();
    Ok(Cochain::new(k + 1, values))
}

/// `d_k* v = D_k^{-1} delta_kᵀ D_{k+1} v`, for `v` at level `k + 1`.
pub fn apply_dstar(m: &Metric, c: &ChainComplex, k: usize, v: &Cochain) -> Result<Cochain> {
    level_check(c, k, true)?;
    v.check(c, k + 1)?;
    let scaled: Vec<f64> = v.values.iter().zip(m.d(k + 1)).map(|(x, d)| x * d).collect();
    let out = c.coboundary(k)?.tr_mul_vec(&scaled);
    let values = out.into_iter().zip(m.d(k)).map(|(x, d)| x / d).collect();
    Ok(Cochain::new(k, values))
}

pub fn inner_product(m: &Metric, k: usize, a: &Cochain, b: &Cochain) -> Result<f64> {
    if a.level != k || b.level != k {
        return Err(Error::InvalidArgument(format!(
            "inner product at level {k} of {}- and {}-cochains",
            a.level, b.level
        )));
    }
    let w = m.weight(k);
    check_len(w.len(), a.len(), "inner product operand")?;
    check_len(w.len(), b.len(), "inner product operand")?;
    Ok(a.values.iter().zip(&b.values).zip(&w).map(|((x, y), w)| x * y * w).sum())
}

pub fn norm(m: &Metric, k: usize, a: &Cochain) -> Result<f64> {
    Ok(inner_product(m, k, a, a)?.sqrt())
}

/// Dense matrix of `d_k`.
pub fn d_matrix(m: &Metric, c: &ChainComplex, k: usize) -> Result<DMatrix<f64>> {
    level_check(c, k, true)?;
    let mut a = c.coboundary(k)?.to_dense();
    let (bl, bu) = (m.b(k), m.b(k + 1));
    for ((i, j), v) in a.iter_mut().enumerate().map(|(idx, v)| ((idx % bu.len(), idx / bu.len()), v)) {
        *v *= bu[i] / bl[j];
    }
    Ok(a)
}

/// Dense matrix of `d_k*`.
pub fn dstar_matrix(m: &Metric, c: &ChainComplex, k: usize) -> Result<DMatrix<f64>> {
    level_check(c, k, true)?;
    let mut a = c.coboundary(k)?.to_dense().transpose();
    let (dl, du) = (m.d(k), m.d(k + 1));
    for ((i, j), v) in a.iter_mut().enumerate().map(|(idx, v)| ((idx % dl.len(), idx / dl.len()), v)) {
        *v *= du[j] / dl[i];
    }
    Ok(a)
}

/// `Delta_k = d_{k-1} d_{k-1}* + d_k* d_k`, dropping terms that do not exist.
pub fn hodge_laplacian_matrix(m: &Metric, c: &ChainComplex, k: usize) -> Result<DMatrix<f64>> {
    level_check(c, k, false)?;
    let n = c.count(k);
    let mut lap = DMatrix::zeros(n, n);
    if k > 0 {
        lap += d_matrix(m, c, k - 1)? * dstar_matrix(m, c, k - 1)?;
    }
    if k < c.dim() {
        lap += dstar_matrix(m, c, k)? * d_matrix(m, c, k)?;
    }
    Ok(lap)
}

/// `W^{1/2} A W^{-1/2}` for an operator self-adjoint in the weighted product,
/// symmetrized to remove round-off asymmetry.
fn symmetrized(a: &DMatrix<f64>, w: &[f64]) -> DMatrix<f64> {
    let n = a.nrows();
    let s = DMatrix::from_fn(n, n, |i, j| a[(i, j)] * (w[i] / w[j]).sqrt());
    (&s + s.transpose()) * 0.5
}

/// Eigenvalues of `Delta_k` made symmetric by the weighted similarity transform.
pub fn hodge_spectrum(m: &Metric, c: &ChainComplex, k: usize) -> Result<Vec<f64>> {
    let lap = hodge_laplacian_matrix(m, c, k)?;
    let s = symmetrized(&lap, &m.weight(k));
    let mut ev: Vec<f64> = s.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(f64::total_cmp);
    Ok(ev)
}

/// Dimension of `ker Delta_k`, counting eigenvalues below `1e-10 * max(1, lambda_max)`.
pub fn harmonic_dim(m: &Metric, c: &ChainComplex, k: usize) -> Result<usize> {
    let ev = hodge_spectrum(m, c, k)?;
    let top = ev.last().copied().unwrap_or(0.0).max(1.0);
    Ok(ev.iter().filter(|&&l| l.abs() < 1e-10 * top).count())
}

#[derive(Clone, Debug, PartialEq)]
pub struct HodgeParts {
    pub exact: Cochain,
    pub harmonic: Cochain,
    pub coexact: Cochain,
}

/// Weighted least-squares projection of `u` onto the range of `a`.
fn project_onto_range(a: &DMatrix<f64>, w: &[f64], u: &[f64]) -> Vec<f64> {
    if a.ncols() == 0 {
        return vec![0.0; u.len()];
    }
    let sw: Vec<f64> = w.iter().map(|x| x.sqrt()).collect();
    let aw = DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| sw[i] * a[(i, j)]);
    let uw = DVector::from_iterator(u.len(), u.iter().zip(&sw).map(|(x, s)| x * s));
    let svd = aw.svd(true, true);
    let tol = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let x = svd.solve(&uw, tol).expect("SVD computed with both factors");
    (a * x).as_slice().to_vec()
}

/// Splits `u` into exact, harmonic and coexact parts, orthogonal in `(.,.)_k`.
pub fn hodge_decompose(m: &Metric, c: &ChainComplex, k: usize, u: &Cochain) -> Result<HodgeParts> {
    level_check(c, k, false)?;
    u.check(c, k)?;
    let w = m.weight(k);
    let exact = if k > 0 {
        project_onto_range(&d_matrix(m, c, k - 1)?, &w, &u.values)
    } else {
        vec![0.0; u.len()]
    };
    let coexact = if k < c.dim() {
        project_onto_range(&dstar_matrix(m, c, k)?, &w, &u.values)
    } else {
        vec![0.0; u.len()]
    };
    let harmonic = u
        .values
        .iter()
        .zip(&exact)
        .zip(&coexact)
        .map(|((x, e), c)| x - e - c)
        .collect();
    Ok(HodgeParts {
        exact: Cochain::new(k, exact),
        harmonic: Cochain::new(k, harmonic),
        coexact: Cochain::new(k, coexact),
    })
}

/// `lambda_min^{-1/2}` for the smallest nontrivial eigenvalue of `d_k* d_k`.
pub fn poincare_constant(m: &Metric, c: &ChainComplex, k: usize) -> Result<f64> {
    level_check(c, k, true)?;
    let op = dstar_matrix(m, c, k)? * d_matrix(m, c, k)?;
    let s = symmetrized(&op, &m.weight(k));
    let ev = s.symmetric_eigenvalues();
    let top = ev.max();
    if top <= 0.0 {
        return Err(Error::InvalidArgument("d* d has no nonzero eigenvalue".into()));
    }
    let lambda = ev
        .iter()
        .copied()
        .filter(|&l| l > 1e-10 * top)
        .fold(f64::INFINITY, f64::min);
    Ok(lambda.powf(-0.5))
}

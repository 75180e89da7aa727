//! Structure checks run against a stored model.

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::calculus::{d_matrix, dstar_matrix, hodge_decompose, hodge_spectrum, inner_product};
use crate::complex::Cochain;
use crate::error::Result;
use crate::model::SurrogateModel;

/// Largest violation of each identity, relative to the size of the terms
/// involved where that makes sense.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructureReport {
    /// `max |delta_{k+1} delta_k|` over all levels (integer).
    pub exactness: i64,
    /// `max |d*_k d*_{k+1}|` over the norm of the factors.
    pub dual_exactness: f64,
    /// `|(d u, v)_{k+1} - (u, d* v)_k|` over `||d u|| ||v||`.
    pub adjointness: f64,
    /// Pairwise inner products of Hodge parts over the squared norm.
    pub hodge_orthogonality: f64,
    /// Reconstruction defect of the Hodge split over the norm.
    pub hodge_reconstruction: f64,
    /// Smallest Laplacian eigenvalue over the largest, across levels.
    pub min_eigenvalue: f64,
    /// `eps L_N`, which must stay below one.
    pub eps_lipschitz: f64,
}

pub const TOL_OPERATOR: f64 = 1e-12;
pub const TOL_HODGE: f64 = 1e-10;

impl StructureReport {
    pub fn failures(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if self.exactness != 0 {
            out.push("exactness");
        }
        if !(self.dual_exactness < TOL_OPERATOR) {
            out.push("dual exactness");
        }
        if !(self.adjointness < TOL_OPERATOR) {
            out.push("adjointness");
        }
        if !(self.hodge_orthogonality < TOL_HODGE) {
            out.push("hodge orthogonality");
        }
        if !(self.hodge_reconstruction < TOL_HODGE) {
            out.push("hodge reconstruction");
        }
        if !(self.min_eigenvalue > -TOL_HODGE) {
            out.push("positive semidefiniteness");
        }
        if !(self.eps_lipschitz < 1.0) {
            out.push("eps L_N < 1");
        }
        out
    }

    pub fn pass(&self) -> bool {
        self.failures().is_empty()
    }

    pub fn lines(&self) -> Vec<String> {
        vec![
            format!("exactness            {}", self.exactness),
            format!("dual exactness       {:e}", self.dual_exactness),
            format!("adjointness          {:e}", self.adjointness),
            format!("hodge orthogonality  {:e}", self.hodge_orthogonality),
            format!("hodge reconstruction {:e}", self.hodge_reconstruction),
            format!("min eigenvalue       {:e}", self.min_eigenvalue),
            format!("eps L_N              {:e}", self.eps_lipschitz),
        ]
    }
}

fn random_cochain(rng: &mut ChaCha8Rng, level: usize, n: usize) -> Cochain {
    Cochain::new(level, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Checks every identity on `trials` random cochains per level.
pub fn structure_report(mo: &SurrogateModel, trials: usize, seed: u64) -> Result<StructureReport> {
    let (c, m) = (&mo.complex, &mo.metric);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let exactness = c.verify_exact().max_abs.iter().copied().max().unwrap_or(0);
    let mut dual_exactness: f64 = 0.0;
    for k in 0..c.dim().saturating_sub(1) {
        let a = dstar_matrix(m, c, k)?;
        let b = dstar_matrix(m, c, k + 1)?;
        let scale = (a.norm() * b.norm()).max(f64::MIN_POSITIVE);
        dual_exactness = dual_exactness.max((a * b).amax() / scale);
    }
    let mut adjointness: f64 = 0.0;
    for k in 0..c.dim() {
        let (d, ds) = (d_matrix(m, c, k)?, dstar_matrix(m, c, k)?);
        for _ in 0..trials {
            let u = random_cochain(&mut rng, k, c.count(k));
            let v = random_cochain(&mut rng, k + 1, c.count(k + 1));
            let du = Cochain::new(k + 1, (&d * DVector::from_column_slice(&u.values)).as_slice().to_vec());
            let dsv = Cochain::new(k, (&ds * DVector::from_column_slice(&v.values)).as_slice().to_vec());
            let lhs = inner_product(m, k + 1, &du, &v)?;
            let rhs = inner_product(m, k, &u, &dsv)?;
            let scale = (inner_product(m, k + 1, &du, &du)? * inner_product(m, k + 1, &v, &v)?)
                .sqrt()
                .max(f64::MIN_POSITIVE);
            adjointness = adjointness.max((lhs - rhs).abs() / scale);
        }
    }
    let mut hodge_orthogonality: f64 = 0.0;
    let mut hodge_reconstruction: f64 = 0.0;
    let mut min_eigenvalue = f64::INFINITY;
    for k in 0..=c.dim() {
        for _ in 0..trials {
            let u = random_cochain(&mut rng, k, c.count(k));
            let h = hodge_decompose(m, c, k, &u)?;
            let nn = inner_product(m, k, &u, &u)?.max(f64::MIN_POSITIVE);
            let parts = [&h.exact, &h.harmonic, &h.coexact];
            for i in 0..3 {
                for j in i + 1..3 {
                    hodge_orthogonality = hodge_orthogonality.max(inner_product(m, k, parts[i], parts[j])?.abs() / nn);
                }
            }
            let rest = Cochain::new(
                k,
                (0..u.len())
                    .map(|i| u.values[i] - h.exact.values[i] - h.harmonic.values[i] - h.coexact.values[i])
                    .collect(),
            );
            hodge_reconstruction = hodge_reconstruction.max((inner_product(m, k, &rest, &rest)? / nn).sqrt());
        }
        let ev = hodge_spectrum(m, c, k)?;
        let top = ev.last().copied().unwrap_or(0.0).abs().max(f64::MIN_POSITIVE);
        min_eigenvalue = min_eigenvalue.min(ev.first().copied().unwrap_or(0.0) / top);
    }
    Ok(StructureReport {
        exactness,
        dual_exactness,
        adjointness,
        hodge_orthogonality,
        hodge_reconstruction,
        min_eigenvalue,
        eps_lipschitz: mo.epsilon_lipschitz()?,
    })
}

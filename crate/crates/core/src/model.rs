//! The perturbed mixed Hodge-Laplacian system
//!
//! ```text
//! R1 = w - s - eps NN(s),                 s = d*_{k-1} u
//! R2 = d_{k-1} w + d_k* d_k u - f         (second term only when k < dim)
//! ```
//!
//! with boundary-condition and pin rows replaced by `value - prescribed`.
//! The state vector is `[w; u]`, `w` at level `k - 1` and `u` at level `k`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::calculus::{d_matrix, dstar_matrix, Metric};
use crate::complex::ChainComplex;
use crate::error::{check_len, Error, Result};
use crate::net::{lipschitz_bound, Mlp};

/// A prescribed value for one entry of the state, replacing the residual row
/// of that entry.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub level: usize,
    pub index: usize,
    pub value: f64,
}

/// Which log-parameters the trainer may change.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trainable {
    pub b: Vec<bool>,
    pub d: Vec<bool>,
    pub net: bool,
}

impl Trainable {
    /// Every metric level appearing in the operators of problem `k`.
    pub fn for_problem(dim: usize, k: usize) -> Self {
        let mut b = vec![false; dim + 1];
        let mut d = vec![false; dim + 1];
        d[k - 1] = true;
        d[k] = true;
        b[k - 1] = true;
        b[k] = true;
        if k < dim {
            b[k + 1] = true;
            d[k + 1] = true;
        }
        Self { b, d, net: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurrogateModel {
    pub complex: ChainComplex,
    pub metric: Metric,
    pub net: Mlp,
    pub k: usize,
    pub epsilon: f64,
    pub bcs: Vec<Constraint>,
    pub source: Vec<f64>,
    pub pin: Option<Constraint>,
    pub trainable: Trainable,
}

/// Mixed state `[w; u]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub w: Vec<f64>,
    pub u: Vec<f64>,
}

impl State {
    pub fn zeros(mo: &SurrogateModel) -> Self {
        Self {
            w: vec![0.0; mo.n_w()],
            u: vec![0.0; mo.n_u()],
        }
    }

    pub fn to_vec(&self) -> Vec<f64> {
        let mut v = self.w.clone();
        v.extend_from_slice(&self.u);
        v
    }

    pub fn from_vec(mo: &SurrogateModel, v: &[f64]) -> Result<Self> {
        check_len(mo.n_state(), v.len(), "state vector")?;
        Ok(Self {
            w: v[..mo.n_w()].to_vec(),
            u: v[mo.n_w()..].to_vec(),
        })
    }
}

/// Dense operators of the current metric.
struct Operators {
    /// `d*_{k-1}`, `n_w x n_u`.
    dstar: DMatrix<f64>,
    /// `d_{k-1}`, `n_u x n_w`.
    d: DMatrix<f64>,
    /// `d_k* d_k`, `n_u x n_u` (zero when `k = dim`).
    curl_curl: DMatrix<f64>,
}

impl SurrogateModel {
    /// Untrained model: identity metric, no constraints, zero source.
    pub fn new(complex: ChainComplex, k: usize, net: Mlp, epsilon: f64) -> Result<Self> {
        if k == 0 || k > complex.dim() {
            return Err(Error::InvalidArgument(format!(
                "problem index k = {k} needs 1 <= k <= {}",
                complex.dim()
            )));
        }
        let metric = Metric::identity(&complex);
        let trainable = Trainable::for_problem(complex.dim(), k);
        let source = vec![0.0; complex.count(k)];
        let mo = Self {
            complex,
            metric,
            net,
            k,
            epsilon,
            bcs: Vec::new(),
            source,
            pin: None,
            trainable,
        };
        mo.check()?;
        Ok(mo)
    }

    pub fn check(&self) -> Result<()> {
        let c = &self.complex;
        if self.k == 0 || self.k > c.dim() {
            return Err(Error::InvalidArgument(format!("invalid problem index {}", self.k)));
        }
        self.metric.check(c)?;
        self.net.check()?;
        check_len(self.n_w(), self.net.input_width(), "network input width")?;
        check_len(self.n_w(), self.net.output_width(), "network output width")?;
        check_len(self.n_u(), self.source.len(), "source cochain")?;
        check_len(c.dim() + 1, self.trainable.b.len(), "trainable B levels")?;
        check_len(c.dim() + 1, self.trainable.d.len(), "trainable D levels")?;
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::InvalidArgument("epsilon must be finite and nonnegative".into()));
        }
        for bc in self.bcs.iter().chain(self.pin.iter()) {
            self.row_of(bc)?;
        }
        Ok(())
    }

    pub fn n_w(&self) -> usize {
        self.complex.count(self.k - 1)
    }

    pub fn n_u(&self) -> usize {
        self.complex.count(self.k)
    }

    pub fn n_state(&self) -> usize {
        self.n_w() + self.n_u()
    }

    /// Row (and state entry) a constraint replaces.
    pub fn row_of(&self, bc: &Constraint) -> Result<usize> {
        let (offset, n) = if bc.level + 1 == self.k {
            (0, self.n_w())
        } else if bc.level == self.k {
            (self.n_w(), self.n_u())
        } else {
            return Err(Error::InvalidArgument(format!(
                "constraint on level {} but the state lives on levels {} and {}",
                bc.level,
                self.k - 1,
                self.k
            )));
        };
        if bc.index >= n {
            return Err(Error::InvalidArgument(format!(
                "constraint index {} outside level {} of size {n}",
                bc.index, bc.level
            )));
        }
        Ok(offset + bc.index)
    }

    fn constraints(&self) -> impl Iterator<Item = &Constraint> {
        self.bcs.iter().chain(self.pin.iter())
    }

    /// Rows overwritten by boundary conditions or the pin.
    pub fn constrained_rows(&self) -> Vec<bool> {
        let mut rows = vec![false; self.n_state()];
        for bc in self.constraints() {
            rows[self.row_of(bc).expect("validated constraint")] = true;
        }
        rows
    }

    fn operators(&self) -> Result<Operators> {
        let (c, m, k) = (&self.complex, &self.metric, self.k);
        let dstar = dstar_matrix(m, c, k - 1)?;
        let d = d_matrix(m, c, k - 1)?;
        let curl_curl = if k < c.dim() {
            dstar_matrix(m, c, k)? * d_matrix(m, c, k)?
        } else {
            DMatrix::zeros(self.n_u(), self.n_u())
        };
        Ok(Operators { dstar, d, curl_curl })
    }

    fn check_state(&self, s: &State) -> Result<()> {
        check_len(self.n_w(), s.w.len(), "state w")?;
        check_len(self.n_u(), s.u.len(), "state u")
    }

    /// The flux `s = d*_{k-1} u` fed to the network.
    pub fn primal_flux(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let op = dstar_matrix(&self.metric, &self.complex, self.k - 1)?;
        Ok((op * DVector::from_column_slice(&s.u)).as_slice().to_vec())
    }

    pub fn residual(&self, s: &State) -> Result<Vec<f64>> {
        self.check_state(s)?;
        let op = self.operators()?;
        let u = DVector::from_column_slice(&s.u);
        let w = DVector::from_column_slice(&s.w);
        let flux = &op.dstar * &u;
        let nn = self.net.forward(flux.as_slice())?;
        let mut r = Vec::with_capacity(self.n_state());
        for i in 0..self.n_w() {
            r.push(s.w[i] - flux[i] - self.epsilon * nn[i]);
        }
        let r2 = &op.d * &w + &op.curl_curl * &u;
        for (i, v) in r2.iter().enumerate() {
            r.push(v - self.source[i]);
        }
        let state = s.to_vec();
        for bc in self.constraints() {
            let row = self.row_of(bc)?;
            r[row] = state[row] - bc.value;
        }
        if r.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("residual"));
        }
        Ok(r)
    }

    /// `[[I, -(I + eps J_NN) d*], [d_{k-1}, d_k* d_k]]` with unit rows for constraints.
    pub fn jacobian_state(&self, s: &State) -> Result<DMatrix<f64>> {
        self.check_state(s)?;
        let op = self.operators()?;
        let (nw, nu) = (self.n_w(), self.n_u());
        let flux = &op.dstar * DVector::from_column_slice(&s.u);
        let jn = self.net.jacobian(flux.as_slice())?;
        let mut a = DMatrix::<f64>::identity(nw, nw);
        a += jn * self.epsilon;
        let top_right = -(a * &op.dstar);
        let mut j = DMatrix::zeros(nw + nu, nw + nu);
        j.view_mut((0, 0), (nw, nw)).fill_with_identity();
        j.view_mut((0, nw), (nw, nu)).copy_from(&top_right);
        j.view_mut((nw, 0), (nu, nw)).copy_from(&op.d);
        j.view_mut((nw, nw), (nu, nu)).copy_from(&op.curl_curl);
        for bc in self.constraints() {
            let row = self.row_of(bc)?;
            j.row_mut(row).fill(0.0);
            j[(row, row)] = 1.0;
        }
        Ok(j)
    }

    pub fn n_params(&self) -> usize {
        let m: usize = self.complex.counts().iter().sum();
        2 * m + self.net.n_params()
    }

    /// `[log_b (all levels); log_d (all levels); network]`.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for v in &self.metric.log_b {
            p.extend_from_slice(v);
        }
        for v in &self.metric.log_d {
            p.extend_from_slice(v);
        }
        p.extend(self.net.params());
        p
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.n_params(), p.len(), "model parameters")?;
        let mut at = 0;
        for v in self.metric.log_b.iter_mut().chain(self.metric.log_d.iter_mut()) {
            let n = v.len();
            v.copy_from_slice(&p[at..at + n]);
            at += n;
        }
        self.net.set_params(&p[at..])
    }

    /// Mask over [`SurrogateModel::params`] of entries the trainer may move.
    pub fn trainable_mask(&self) -> Vec<bool> {
        let mut mask = Vec::with_capacity(self.n_params());
        for (k, &n) in self.complex.counts().iter().enumerate() {
            mask.extend(std::iter::repeat_n(self.trainable.b[k], n));
        }
        for (k, &n) in self.complex.counts().iter().enumerate() {
            mask.extend(std::iter::repeat_n(self.trainable.d[k], n));
        }
        mask.extend(std::iter::repeat_n(self.trainable.net, self.net.n_params()));
        mask
    }

    /// Gradient of `lamᵀ residual(s)` with respect to every parameter of
    /// [`SurrogateModel::params`] (frozen ones included). Constraint rows
    /// do not depend on the parameters and contribute nothing.
    pub fn param_vjp(&self, s: &State, lam: &[f64]) -> Result<Vec<f64>> {
        self.check_state(s)?;
        check_len(self.n_state(), lam.len(), "multiplier")?;
        let (c, m, k) = (&self.complex, &self.metric, self.k);
        let (nw, nu) = (self.n_w(), self.n_u());
        let mut lam = lam.to_vec();
        for (l, constrained) in lam.iter_mut().zip(self.constrained_rows()) {
            if constrained {
                *l = 0.0;
            }
        }
        let (l1, l2) = lam.split_at(nw);

        let offsets: Vec<usize> = c
            .counts()
            .iter()
            .scan(0, |acc, &n| {
                let o = *acc;
                *acc += n;
                Some(o)
            })
            .collect();
        let total: usize = c.counts().iter().sum();
        let mut g = vec![0.0; self.n_params()];
        let gb = |level: usize, i: usize| offsets[level] + i;
        let gd = |level: usize, i: usize| total + offsets[level] + i;

        let e = c.coboundary(k - 1)?;
        let (b_lo, b_k) = (m.b(k - 1), m.b(k));
        let (d_lo, d_k) = (m.d(k - 1), m.d(k));

        // R1 through s = D_{k-1}^{-1} Eᵀ D_k u
        let du: Vec<f64> = s.u.iter().zip(&d_k).map(|(u, d)| u * d).collect();
        let flux: Vec<f64> = e.tr_mul_vec(&du).iter().zip(&d_lo).map(|(t, d)| t / d).collect();
        let jn = self.net.jacobian(&flux)?;
        let jt_l1 = jn.transpose() * DVector::from_column_slice(l1);
        let g_s: Vec<f64> = (0..nw).map(|i| -l1[i] - self.epsilon * jt_l1[i]).collect();
        for i in 0..nw {
            g[gd(k - 1, i)] += -g_s[i] * flux[i];
        }
        let back: Vec<f64> = g_s.iter().zip(&d_lo).map(|(g, d)| g / d).collect();
        let e_back = e.mul_vec(&back);
        for j in 0..nu {
            g[gd(k, j)] += e_back[j] * du[j];
        }
        if self.epsilon != 0.0 {
            let net_g = self.net.param_vjp(&flux, l1)?;
            for (i, v) in net_g.into_iter().enumerate() {
                g[2 * total + i] = -self.epsilon * v;
            }
        }

        // R2, first term B_k E B_{k-1}^{-1} w
        let wb: Vec<f64> = s.w.iter().zip(&b_lo).map(|(w, b)| w / b).collect();
        let a: Vec<f64> = e.mul_vec(&wb).iter().zip(&b_k).map(|(x, b)| x * b).collect();
        for j in 0..nu {
            g[gb(k, j)] += l2[j] * a[j];
        }
        let bl2: Vec<f64> = l2.iter().zip(&b_k).map(|(l, b)| l * b).collect();
        let et = e.tr_mul_vec(&bl2);
        for i in 0..nw {
            g[gb(k - 1, i)] -= et[i] * wb[i];
        }

        // R2, second term D_k^{-1} Gᵀ D_{k+1} B_{k+1} G B_k^{-1} u
        if k < c.dim() {
            let gm = c.coboundary(k)?;
            let (b_hi, d_hi) = (m.b(k + 1), m.d(k + 1));
            let ub: Vec<f64> = s.u.iter().zip(&b_k).map(|(u, b)| u / b).collect();
            let p = gm.mul_vec(&ub);
            let q: Vec<f64> = (0..p.len()).map(|i| d_hi[i] * b_hi[i] * p[i]).collect();
            let cc: Vec<f64> = gm.tr_mul_vec(&q).iter().zip(&d_k).map(|(r, d)| r / d).collect();
            for j in 0..nu {
                g[gd(k, j)] -= l2[j] * cc[j];
            }
            let l2d: Vec<f64> = l2.iter().zip(&d_k).map(|(l, d)| l / d).collect();
            let z = gm.mul_vec(&l2d);
            for i in 0..z.len() {
                g[gd(k + 1, i)] += z[i] * q[i];
                g[gb(k + 1, i)] += z[i] * q[i];
            }
            let zs: Vec<f64> = (0..z.len()).map(|i| d_hi[i] * b_hi[i] * z[i]).collect();
            let gt = gm.tr_mul_vec(&zs);
            for j in 0..nu {
                g[gb(k, j)] -= gt[j] * ub[j];
            }
        }
        Ok(g)
    }

    /// `1 / L_N`, or infinity for a network with zero weights.
    pub fn epsilon_max(&self) -> Result<f64> {
        let l = lipschitz_bound(&self.net, &self.metric, self.k)?;
        Ok(if l == 0.0 { f64::INFINITY } else { 1.0 / l })
    }

    /// `eps * L_N`.
    pub fn epsilon_lipschitz(&self) -> Result<f64> {
        Ok(self.epsilon * lipschitz_bound(&self.net, &self.metric, self.k)?)
    }

    /// Logs a warning when `eps` is within 5% of the admissible bound.
    pub fn warn_if_near_limit(&self) -> Result<bool> {
        let limit = self.epsilon_max()?;
        let near = self.epsilon >= 0.95 * limit;
        if near {
            log::warn!(
                "epsilon {} is at or above 95% of the admissible bound {limit}",
                self.epsilon
            );
        }
        Ok(near)
    }

    /// For a top-level problem (`k = dim`): the signed boundary sum of
    /// `B_{k-1}^{-1} w` minus the sum of `B_k^{-1} f`. Summing the rows of
    /// `B_k^{-1} (d_{k-1} w - f)` telescopes to this quantity, so it vanishes
    /// whenever every conservation row holds.
    pub fn conservation_defect(&self, s: &State) -> Result<f64> {
        self.check_state(s)?;
        let (c, m, k) = (&self.complex, &self.metric, self.k);
        if k != c.dim() {
            return Err(Error::InvalidArgument("conservation is defined for k = dim".into()));
        }
        let e = c.coboundary(k - 1)?;
        let wb: Vec<f64> = s.w.iter().zip(m.b(k - 1)).map(|(w, b)| w / b).collect();
        let mut outward = vec![0i64; c.count(k - 1)];
        for (_, col, v) in e.triplets() {
            outward[col] += v;
        }
        let boundary: f64 = outward.iter().zip(&wb).map(|(&o, w)| o as f64 * w).sum();
        let sources: f64 = self.source.iter().zip(m.b(k)).map(|(f, b)| f / b).sum();
        Ok((boundary - sources).abs())
    }

    /// Largest `|B_k^{-1}(d_{k-1} w - f)|` over all rows of level `k`,
    /// including rows replaced by the pin.
    pub fn divergence_residual(&self, s: &State) -> Result<f64> {
        self.check_state(s)?;
        let op = self.operators()?;
        let r = &op.d * DVector::from_column_slice(&s.w) + &op.curl_curl * DVector::from_column_slice(&s.u);
        let b = self.metric.b(self.k);
        Ok((0..self.n_u())
            .map(|i| ((r[i] - self.source[i]) / b[i]).abs())
            .fold(0.0, f64::max))
    }

    /// `||u||_a^2 = ||d*_{k-1} u||^2_{k-1} + ||d_k u||^2_{k+1}`.
    pub fn energy_norm(&self, u: &[f64]) -> Result<f64> {
        check_len(self.n_u(), u.len(), "energy norm argument")?;
        let (c, m, k) = (&self.complex, &self.metric, self.k);
        let uv = DVector::from_column_slice(u);
        let s = dstar_matrix(m, c, k - 1)? * &uv;
        let w = m.weight(k - 1);
        let mut total: f64 = s.iter().zip(&w).map(|(x, w)| w * x * x).sum();
        if k < c.dim() {
            let du = d_matrix(m, c, k)? * &uv;
            let w = m.weight(k + 1);
            total += du.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>();
        }
        Ok(total.sqrt())
    }

    /// Dual norm `sup (f, v)_k / ||v||_a`, from a dense solve with the
    /// energy matrix `W_k Delta_k`.
    pub fn dual_norm(&self, f: &[f64]) -> Result<f64> {
        check_len(self.n_u(), f.len(), "dual norm argument")?;
        let lap = crate::calculus::hodge_laplacian_matrix(&self.metric, &self.complex, self.k)?;
        let w = self.metric.weight(self.k);
        let n = self.n_u();
        let kmat = DMatrix::from_fn(n, n, |i, j| w[i] * lap[(i, j)]);
        let kmat = (&kmat + kmat.transpose()) * 0.5;
        let wf = DVector::from_iterator(n, f.iter().zip(&w).map(|(f, w)| f * w));
        let chol = kmat.cholesky().ok_or(Error::Singular { column: 0, pivot: 0.0 })?;
        Ok(wf.dot(&chol.solve(&wf)).max(0.0).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::{block_partition, build_coarse};
    use crate::net::Activation;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn coarse_complex() -> ChainComplex {
        let fine = ChainComplex::cartesian(6, 6, 1.0, 1.0).unwrap();
        let labels = block_partition(&fine, 3, 2).unwrap();
        build_coarse(&fine, &labels).unwrap().0
    }

    fn random_model(k: usize, eps: f64, seed: u64) -> SurrogateModel {
        let c = coarse_complex();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = c.count(k - 1);
        let net = Mlp::init_he(&[n, 5, n], Activation::Tanh, seed).unwrap();
        let mut mo = SurrogateModel::new(c.clone(), k, net, eps).unwrap();
        mo.metric = Metric::random(&c, 0.4, &mut rng);
        let mut p = mo.params();
        for v in p.iter_mut().skip(2 * c.counts().iter().sum::<usize>()) {
            *v += rng.random_range(-0.1..0.1);
        }
        mo.set_params(&p).unwrap();
        mo.source = (0..c.count(k)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let boundary = c.boundary_mask(k - 1).unwrap();
        for (i, &b) in boundary.iter().enumerate() {
            if b && i % 2 == 0 {
                mo.bcs.push(Constraint { level: k - 1, index: i, value: rng.random_range(-1.0..1.0) });
            }
        }
        mo
    }

    fn random_state(mo: &SurrogateModel, seed: u64) -> State {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        State {
            w: (0..mo.n_w()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            u: (0..mo.n_u()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        }
    }

    #[test]
    fn zero_state_zero_data_has_zero_residual() {
        let mut mo = random_model(2, 0.3, 1);
        mo.source = vec![0.0; mo.n_u()];
        for bc in &mut mo.bcs {
            bc.value = 0.0;
        }
        let r = mo.residual(&State::zeros(&mo)).unwrap();
        assert!(r.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn darcy_second_block_is_divergence() {
        let mo = random_model(2, 0.0, 2);
        let s = random_state(&mo, 3);
        let r = mo.residual(&s).unwrap();
        let d = d_matrix(&mo.metric, &mo.complex, 1).unwrap();
        let div = d * DVector::from_column_slice(&s.w);
        for i in 0..mo.n_u() {
            assert!((r[mo.n_w() + i] - (div[i] - mo.source[i])).abs() < 1e-13);
        }
    }

    #[test]
    fn constraint_rows_are_unit_rows() {
        let mo = random_model(1, 0.2, 4);
        let j = mo.jacobian_state(&random_state(&mo, 5)).unwrap();
        for bc in &mo.bcs {
            let row = mo.row_of(bc).unwrap();
            for col in 0..mo.n_state() {
                assert_eq!(j[(row, col)], if col == row { 1.0 } else { 0.0 });
            }
        }
    }

    #[test]
    fn linear_jacobian_is_state_independent() {
        let mo = random_model(2, 0.0, 6);
        let a = mo.jacobian_state(&random_state(&mo, 7)).unwrap();
        let b = mo.jacobian_state(&random_state(&mo, 8)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn state_jacobian_matches_finite_differences() {
        for k in [1, 2] {
            let mo = random_model(k, 0.4, 9 + k as u64);
            let s = random_state(&mo, 10);
            let j = mo.jacobian_state(&s).unwrap();
            let x = s.to_vec();
            let h = 1e-6;
            for col in 0..x.len() {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[col] += h;
                xm[col] -= h;
                let rp = mo.residual(&State::from_vec(&mo, &xp).unwrap()).unwrap();
                let rm = mo.residual(&State::from_vec(&mo, &xm).unwrap()).unwrap();
                for row in 0..x.len() {
                    let fd = (rp[row] - rm[row]) / (2.0 * h);
                    assert!((fd - j[(row, col)]).abs() < 1e-6 * (1.0 + fd.abs()), "k={k} ({row},{col})");
                }
            }
        }
    }

    #[test]
    fn param_vjp_matches_finite_differences() {
        for k in [1, 2] {
            let mo = random_model(k, 0.4, 20 + k as u64);
            let s = random_state(&mo, 21);
            let lam: Vec<f64> = random_state(&mo, 22).to_vec();
            let g = mo.param_vjp(&s, &lam).unwrap();
            let p = mo.params();
            let h = 1e-6;
            for i in 0..p.len() {
                let eval = |delta: f64| {
                    let mut q = mo.clone();
                    let mut pp = p.clone();
                    pp[i] += delta;
                    q.set_params(&pp).unwrap();
                    q.residual(&s).unwrap().iter().zip(&lam).map(|(r, l)| r * l).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[i]).abs() < 1e-5 * (1.0 + fd.abs()), "k={k} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn param_vjp_trivial_cases() {
        let mo = random_model(2, 0.0, 30);
        let s = random_state(&mo, 31);
        assert!(mo.param_vjp(&s, &vec![0.0; mo.n_state()]).unwrap().iter().all(|&v| v == 0.0));
        let lam = random_state(&mo, 32).to_vec();
        let g = mo.param_vjp(&s, &lam).unwrap();
        let net_start = mo.n_params() - mo.net.n_params();
        assert!(g[net_start..].iter().all(|&v| v == 0.0));
    }

    #[test]
    fn epsilon_max_of_simple_networks() {
        let c = coarse_complex();
        let n = c.count(1);
        let zero = Mlp::linear(&DMatrix::zeros(n, n), vec![0.0; n]).unwrap();
        let mo = SurrogateModel::new(c.clone(), 2, zero, 0.1).unwrap();
        assert_eq!(mo.epsilon_max().unwrap(), f64::INFINITY);
        let two = Mlp::linear(&(DMatrix::<f64>::identity(n, n) * 2.0), vec![0.0; n]).unwrap();
        let mo = SurrogateModel::new(c, 2, two, 0.1).unwrap();
        assert!((mo.epsilon_max().unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn constraint_validation() {
        let mut mo = random_model(2, 0.0, 40);
        mo.bcs.push(Constraint { level: 0, index: 0, value: 0.0 });
        assert!(mo.check().is_err());
        mo.bcs.pop();
        mo.pin = Some(Constraint { level: 2, index: mo.n_u(), value: 0.0 });
        assert!(mo.check().is_err());
    }
}

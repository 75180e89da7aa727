//! Newton solution of the forward problem and the adjoint solve for gradients.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::linalg::DenseLu;
use crate::model::{State, SurrogateModel};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NewtonOptions {
    /// Absolute residual tolerance; `None` means `1e-12 (1 + ||f||)` with
    /// `f` the source and prescribed values.
    pub tol: Option<f64>,
    pub maxit: usize,
    pub max_halvings: usize,
}

impl Default for NewtonOptions {
    fn default() -> Self {
        Self {
            tol: None,
            maxit: 50,
            max_halvings: 20,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub iterations: usize,
    pub residual_norms: Vec<f64>,
    pub converged: bool,
    pub tol: f64,
}

impl SolveReport {
    pub fn final_residual(&self) -> f64 {
        *self.residual_norms.last().expect("at least the initial residual")
    }
}

/// Converged state with the factored Jacobian at that state, ready for the
/// adjoint solve.
#[derive(Debug)]
pub struct ForwardSolution {
    pub state: State,
    pub report: SolveReport,
    pub jacobian: Option<DenseLu>,
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// `1e-12 (1 + ||data||)` over the source and every prescribed value.
pub fn default_tolerance(mo: &SurrogateModel) -> f64 {
    let data: f64 = mo
        .source
        .iter()
        .map(|f| f * f)
        .chain(mo.bcs.iter().chain(mo.pin.iter()).map(|c| c.value * c.value))
        .sum();
    1e-12 * (1.0 + data.sqrt())
}

/// Full Newton steps, halved while the residual norm grows. Warns when `eps`
/// is close to the admissible bound.
pub fn newton_solve(mo: &SurrogateModel, s0: &State, opts: &NewtonOptions) -> Result<ForwardSolution> {
    if mo.epsilon > 0.0 {
        mo.warn_if_near_limit()?;
    }
    newton_iterate(mo, s0, opts)
}

/// [`newton_solve`] without the bound check, for callers tracking it.
pub(crate) fn newton_iterate(mo: &SurrogateModel, s0: &State, opts: &NewtonOptions) -> Result<ForwardSolution> {
    let tol = opts.tol.unwrap_or_else(|| default_tolerance(mo));
    if !(tol > 0.0) {
        return Err(Error::InvalidArgument("Newton tolerance must be positive".into()));
    }
    let mut x = s0.to_vec();
    let mut r = mo.residual(s0)?;
    let mut rn = norm(&r);
    let mut report = SolveReport {
        iterations: 0,
        residual_norms: vec![rn],
        converged: rn <= tol,
        tol,
    };
    while !report.converged && report.iterations < opts.maxit {
        let state = State::from_vec(mo, &x)?;
        let lu = match DenseLu::new(mo.jacobian_state(&state)?) {
            Ok(lu) => lu,
            Err(Error::Singular { column, pivot }) => {
                log::warn!("singular Jacobian at Newton iteration {} (column {column}, pivot {pivot:e})", report.iterations);
                return Ok(ForwardSolution {
                    state,
                    report,
                    jacobian: None,
                });
            }
            Err(e) => return Err(e),
        };
        let step = lu.solve(&r)?;
        let mut t = 1.0;
        let mut halvings = 0;
        let (next, next_r, next_n) = loop {
            let trial: Vec<f64> = x.iter().zip(&step).map(|(a, d)| a - t * d).collect();
            let trial_r = mo.residual(&State::from_vec(mo, &trial)?);
            let trial_n = trial_r.as_ref().map(|v| norm(v)).unwrap_or(f64::NAN);
            if (trial_n <= rn || halvings == opts.max_halvings) && trial_n.is_finite() {
                break (trial, trial_r?, trial_n);
            }
            if halvings == opts.max_halvings {
                return Err(Error::NonFinite("residual during line search"));
            }
            t *= 0.5;
            halvings += 1;
        };
        x = next;
        r = next_r;
        rn = next_n;
        report.iterations += 1;
        report.residual_norms.push(rn);
        report.converged = rn <= tol;
    }
    let state = State::from_vec(mo, &x)?;
    let jacobian = DenseLu::new(mo.jacobian_state(&state)?).ok();
    Ok(ForwardSolution {
        state,
        report,
        jacobian,
    })
}

/// Observed entries of the concatenated `[w; u]` state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl Observation {
    pub fn check(&self, n_state: usize) -> Result<()> {
        check_len(self.indices.len(), self.values.len(), "observed values")?;
        if self.indices.is_empty() {
            return Err(Error::InvalidArgument("an observation needs at least one entry".into()));
        }
        if let Some(&i) = self.indices.iter().find(|&&i| i >= n_state) {
            return Err(Error::InvalidArgument(format!("observed index {i} outside a state of size {n_state}")));
        }
        Ok(())
    }

    /// `P s - data`.
    pub fn mismatch(&self, state: &[f64]) -> Vec<f64> {
        self.indices
            .iter()
            .zip(&self.values)
            .map(|(&i, v)| state[i] - v)
            .collect()
    }

    /// `||P s - data||^2`.
    pub fn loss(&self, state: &[f64]) -> f64 {
        self.mismatch(state).iter().map(|m| m * m).sum()
    }
}

/// Solves `Jᵀ lam = -2 Pᵀ (P s - data)` with an existing factorization.
pub fn adjoint_with(lu: &DenseLu, state: &[f64], obs: &Observation) -> Result<Vec<f64>> {
    check_len(lu.dim(), state.len(), "state for adjoint")?;
    obs.check(state.len())?;
    let mut rhs = vec![0.0; state.len()];
    for (&i, m) in obs.indices.iter().zip(obs.mismatch(state)) {
        rhs[i] += -2.0 * m;
    }
    lu.solve_transpose(&rhs)
}

/// Adjoint solve factoring the Jacobian at `s`.
pub fn adjoint_solve(mo: &SurrogateModel, s: &State, obs: &Observation) -> Result<Vec<f64>> {
    let lu = DenseLu::new(mo.jacobian_state(s)?)?;
    adjoint_with(&lu, &s.to_vec(), obs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::{block_partition, build_coarse};
    use crate::model::Constraint;
    use crate::net::{Activation, Mlp};
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn model(eps: f64, seed: u64) -> SurrogateModel {
        let fine = crate::ChainComplex::cartesian(6, 6, 1.0, 1.0).unwrap();
        let (c, _) = build_coarse(&fine, &block_partition(&fine, 3, 3).unwrap()).unwrap();
        let n = c.count(1);
        let net = Mlp::init_he(&[n, 5, 5, n], Activation::Elu, seed).unwrap();
        let mut mo = SurrogateModel::new(c, 2, net, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        mo.source = (0..mo.n_u()).map(|_| rng.random_range(-1.0..1.0)).collect();
        mo
    }

    #[test]
    fn linear_problem_takes_one_step() {
        let mo = model(0.0, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s0 = State {
            w: (0..mo.n_w()).map(|_| rng.random_range(-1.0..1.0)).collect(),
            u: (0..mo.n_u()).map(|_| rng.random_range(-1.0..1.0)).collect(),
        };
        let sol = newton_solve(&mo, &s0, &NewtonOptions::default()).unwrap();
        assert!(sol.report.converged);
        assert_eq!(sol.report.iterations, 1);
        let again = newton_solve(&mo, &sol.state, &NewtonOptions::default()).unwrap();
        assert_eq!(again.report.iterations, 0);
    }

    #[test]
    fn nonlinear_problem_converges_tightly() {
        let mut mo = model(0.0, 3);
        let l = mo.epsilon_max().unwrap();
        mo.epsilon = 0.5 * l;
        let sol = newton_solve(&mo, &State::zeros(&mo), &NewtonOptions { tol: Some(1e-11), ..Default::default() }).unwrap();
        assert!(sol.report.converged);
        assert!(sol.report.final_residual() < 1e-10);
    }

    #[test]
    fn zero_mismatch_gives_zero_multiplier() {
        let mo = model(0.2, 4);
        let sol = newton_solve(&mo, &State::zeros(&mo), &NewtonOptions::default()).unwrap();
        let x = sol.state.to_vec();
        let obs = Observation {
            indices: (0..x.len()).collect(),
            values: x.clone(),
        };
        let lam = adjoint_with(sol.jacobian.as_ref().unwrap(), &x, &obs).unwrap();
        assert!(lam.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn scalar_adjoint() {
        let lu = DenseLu::new(DMatrix::from_element(1, 1, 4.0)).unwrap();
        let obs = Observation { indices: vec![0], values: vec![1.0] };
        // mismatch m = 3 - 1 = 2, so lam = -2 m / 4
        assert_eq!(adjoint_with(&lu, &[3.0], &obs).unwrap(), vec![-1.0]);
    }

    #[test]
    fn adjoint_satisfies_its_equation() {
        let mut mo = model(0.3, 5);
        mo.bcs.push(Constraint { level: 1, index: 0, value: 0.5 });
        let sol = newton_solve(&mo, &State::zeros(&mo), &NewtonOptions::default()).unwrap();
        let x = sol.state.to_vec();
        let obs = Observation {
            indices: vec![0, 3, x.len() - 1],
            values: vec![0.1, -0.2, 0.3],
        };
        let lam = adjoint_solve(&mo, &sol.state, &obs).unwrap();
        let j = mo.jacobian_state(&sol.state).unwrap();
        let jt_lam = j.transpose() * nalgebra::DVector::from_vec(lam);
        let mut expected = vec![0.0; x.len()];
        for (&i, m) in obs.indices.iter().zip(obs.mismatch(&x)) {
            expected[i] = -2.0 * m;
        }
        for (a, b) in jt_lam.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn observation_semantics() {
        let obs = Observation { indices: vec![1], values: vec![0.0] };
        assert_eq!(obs.loss(&[100.0, 3.0]), 9.0);
        assert_eq!(obs.loss(&[-7.0, 0.0]), 0.0);
        assert!(obs.check(1).is_err());
        assert!(Observation { indices: vec![], values: vec![] }.check(3).is_err());
    }
}

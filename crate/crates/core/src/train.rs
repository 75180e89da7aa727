//! Equality-constrained training: for each sample a Newton forward solve, an
//! adjoint solve and an Adam update of the model parameters.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Constraint, State, SurrogateModel};
use crate::solve::{adjoint_with, newton_iterate, newton_solve, NewtonOptions, Observation};

/// One training case: prescribed values, source and observed state entries.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub name: String,
    pub bcs: Vec<Constraint>,
    pub source: Vec<f64>,
    pub pin: Option<Constraint>,
    pub data: Observation,
}

impl Sample {
    /// Loads this sample's constraints and source into `mo`.
    pub fn apply(&self, mo: &mut SurrogateModel) -> Result<()> {
        mo.bcs = self.bcs.clone();
        mo.source = self.source.clone();
        mo.pin = self.pin;
        mo.check()?;
        self.data.check(mo.n_state())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// Epochs at which the learning rate is multiplied by `lr_gamma`.
    pub lr_milestones: Vec<usize>,
    pub lr_gamma: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub newton: NewtonOptions,
    /// Only used when `shuffle` is set.
    pub seed: u64,
    pub shuffle: bool,
    /// Start each solve from the sample's previous state instead of zero.
    pub warm_start: bool,
    /// One update per epoch from the averaged gradient instead of one per sample.
    pub batch_average: bool,
    pub clip_norm: f64,
    /// Stop once the epoch's root-mean-square mismatch drops below this.
    pub target_rms: Option<f64>,
    /// After every update the network output layer is scaled so that
    /// `eps L_N` stays at or below this value.
    pub lipschitz_target: Option<f64>,
}

/// `eps L_N` at which training halves `eps` before a solve.
pub const EPSILON_GUARD: f64 = 0.95;

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            learning_rate: 0.05,
            lr_milestones: Vec::new(),
            lr_gamma: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            newton: NewtonOptions::default(),
            seed: 0,
            shuffle: false,
            warm_start: false,
            batch_average: false,
            clip_norm: 100.0,
            target_rms: None,
            lipschitz_target: Some(0.9),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// Bias-corrected Adam update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRow {
    pub epoch: usize,
    pub sample: usize,
    pub loss: f64,
    pub forward_residual: f64,
    pub eps_lipschitz: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub rows: Vec<HistoryRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,sample,loss,forward_residual,eps_LN,grad_norm\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{:e},{:e},{:e},{:e}",
                r.epoch, r.sample, r.loss, r.forward_residual, r.eps_lipschitz, r.grad_norm
            )
            .expect("writing to a string");
        }
        out
    }

    /// Root-mean-square mismatch per epoch.
    pub fn epoch_rms(&self, dataset: &[Sample]) -> Vec<f64> {
        let n_obs: usize = dataset.iter().map(|s| s.data.indices.len()).sum();
        let mut out: Vec<f64> = Vec::new();
        for r in &self.rows {
            if out.len() <= r.epoch {
                out.resize(r.epoch + 1, 0.0);
            }
            out[r.epoch] += r.loss;
        }
        out.iter().map(|l| (l / n_obs as f64).sqrt()).collect()
    }
}

/// What the trainer saw for one sample in one epoch: the model as it was
/// solved (before that sample's update) and the converged state.
pub struct Visit<'a> {
    pub epoch: usize,
    pub sample: usize,
    pub model: &'a SurrogateModel,
    pub state: &'a State,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SurrogateModel,
    pub history: History,
    pub epochs_run: usize,
    pub final_rms: f64,
    pub reached_target: bool,
}

/// Solves one sample and returns its state, loss, masked parameter gradient
/// and final forward residual. `eps_ln` is the current `eps L_N`, updated
/// when the safeguard halves `eps`.
fn solve_sample(
    mo: &mut SurrogateModel,
    sample: &Sample,
    s0: &State,
    cfg: &TrainConfig,
    eps_ln: &mut f64,
    epoch: usize,
    index: usize,
) -> Result<(State, f64, Vec<f64>, f64)> {
    sample.apply(mo)?;
    while mo.epsilon > 0.0 && *eps_ln >= EPSILON_GUARD {
        mo.epsilon *= 0.5;
        *eps_ln *= 0.5;
        log::warn!("epoch {epoch}, sample {index}: eps L_N too close to 1, halving epsilon to {}", mo.epsilon);
    }
    let sol = newton_iterate(mo, s0, &cfg.newton)?;
    if !sol.report.converged {
        return Err(Error::Incompatible(format!(
            "forward solve of sample '{}' did not converge in epoch {epoch}: residuals {:?}",
            sample.name, sol.report.residual_norms
        )));
    }
    let x = sol.state.to_vec();
    let loss = sample.data.loss(&x);
    let lu = sol
        .jacobian
        .as_ref()
        .ok_or(Error::Singular { column: 0, pivot: 0.0 })?;
    let lam = adjoint_with(lu, &x, &sample.data)?;
    let mut g = mo.param_vjp(&sol.state, &lam)?;
    for (gi, trainable) in g.iter_mut().zip(mo.trainable_mask()) {
        if !trainable {
            *gi = 0.0;
        }
    }
    Ok((sol.state, loss, g, sol.report.final_residual()))
}

/// `eps L_N` after an update, scaling the output layer down to
/// `cfg.lipschitz_target` when it is exceeded.
fn project(mo: &mut SurrogateModel, cfg: &TrainConfig) -> Result<f64> {
    if mo.epsilon == 0.0 {
        return Ok(0.0);
    }
    let el = mo.epsilon_lipschitz()?;
    match cfg.lipschitz_target {
        Some(target) if el > target => {
            let c = target / el;
            let last = mo.net.layers.last_mut().expect("nonempty");
            last.weights.iter_mut().for_each(|w| *w *= c);
            last.bias.iter_mut().for_each(|w| *w *= c);
            Ok(target)
        }
        _ => Ok(el),
    }
}

fn clip(g: &mut [f64], max_norm: f64, epoch: usize) -> f64 {
    let norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > max_norm {
        log::info!("epoch {epoch}: clipping gradient norm {norm:e} to {max_norm}");
        let s = max_norm / norm;
        g.iter_mut().for_each(|x| *x *= s);
    }
    norm
}

/// Runs the training loop; `visit` is called after every forward solve.
pub fn train_with<F>(mut mo: SurrogateModel, dataset: &[Sample], cfg: &TrainConfig, mut visit: F) -> Result<TrainOutcome>
where
    F: FnMut(&Visit),
{
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training needs at least one sample".into()));
    }
    if !(cfg.learning_rate >= 0.0) {
        return Err(Error::InvalidArgument("learning rate must be nonnegative".into()));
    }
    if !(cfg.lr_gamma >= 0.0 && cfg.lr_gamma.is_finite()) {
        return Err(Error::InvalidArgument("learning rate decay factor must be finite and nonnegative".into()));
    }
    for s in dataset {
        s.apply(&mut mo.clone())?;
    }
    let mut adam = Adam::new(mo.n_params(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut history = History::default();
    let mut cache: Vec<State> = vec![State::zeros(&mo); dataset.len()];
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n_obs: usize = dataset.iter().map(|s| s.data.indices.len()).sum();
    let mut eps_ln = project(&mut mo, cfg)?;
    let mut final_rms = f64::NAN;
    let mut reached_target = false;
    let mut epochs_run = 0;

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut rng);
        }
        let passed = cfg.lr_milestones.iter().filter(|&&m| m <= epoch).count();
        let lr = cfg.learning_rate * cfg.lr_gamma.powi(passed as i32);
        let mut epoch_loss = 0.0;
        let mut summed = vec![0.0; mo.n_params()];
        for &i in &order {
            let s0 = if cfg.warm_start { cache[i].clone() } else { State::zeros(&mo) };
            let (state, loss, mut g, residual) = solve_sample(&mut mo, &dataset[i], &s0, cfg, &mut eps_ln, epoch, i)?;
            visit(&Visit {
                epoch,
                sample: i,
                model: &mo,
                state: &state,
                loss,
            });
            epoch_loss += loss;
            cache[i] = state;
            let grad_norm = g.iter().map(|x| x * x).sum::<f64>().sqrt();
            history.rows.push(HistoryRow {
                epoch,
                sample: i,
                loss,
                forward_residual: residual,
                eps_lipschitz: eps_ln,
                grad_norm,
            });
            if cfg.batch_average {
                for (a, b) in summed.iter_mut().zip(&g) {
                    *a += b / dataset.len() as f64;
                }
            } else {
                clip(&mut g, cfg.clip_norm, epoch);
                let mut p = mo.params();
                adam.step(&mut p, &g, lr);
                mo.set_params(&p)?;
                eps_ln = project(&mut mo, cfg)?;
            }
        }
        if cfg.batch_average {
            clip(&mut summed, cfg.clip_norm, epoch);
            let mut p = mo.params();
            adam.step(&mut p, &summed, lr);
            mo.set_params(&p)?;
            eps_ln = project(&mut mo, cfg)?;
        }
        epochs_run = epoch + 1;
        final_rms = (epoch_loss / n_obs as f64).sqrt();
        if epoch % 500 == 0 {
            log::debug!("epoch {epoch}: rms mismatch {final_rms:e}");
        }
        if cfg.target_rms.is_some_and(|t| final_rms < t) {
            reached_target = true;
            break;
        }
    }
    Ok(TrainOutcome {
        model: mo,
        history,
        epochs_run,
        final_rms,
        reached_target,
    })
}

pub fn train(mo: SurrogateModel, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_with(mo, dataset, cfg, |_| {})
}

/// Gradient of the sample loss with respect to all model parameters at the
/// current parameters (forward solve from zero, then adjoint).
pub fn loss_gradient(mo: &SurrogateModel, sample: &Sample, newton: &NewtonOptions) -> Result<(f64, Vec<f64>)> {
    let mut m = mo.clone();
    sample.apply(&mut m)?;
    let sol = newton_solve(&m, &State::zeros(&m), newton)?;
    if !sol.report.converged {
        return Err(Error::Incompatible("forward solve did not converge".into()));
    }
    let x = sol.state.to_vec();
    let lu = sol.jacobian.as_ref().ok_or(Error::Singular { column: 0, pivot: 0.0 })?;
    let lam = adjoint_with(lu, &x, &sample.data)?;
    Ok((sample.data.loss(&x), m.param_vjp(&sol.state, &lam)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coarsen::{block_partition, build_coarse};
    use crate::net::{Activation, Mlp};
    use crate::ChainComplex;
    use rand::Rng;

    fn setup(eps: f64) -> (SurrogateModel, Sample) {
        let fine = ChainComplex::cartesian(4, 4, 1.0, 1.0).unwrap();
        let (c, _) = build_coarse(&fine, &block_partition(&fine, 2, 2).unwrap()).unwrap();
        let n = c.count(1);
        let net = Mlp::init_he(&[n, 4, n], Activation::Tanh, 3).unwrap();
        let mut mo = SurrogateModel::new(c.clone(), 2, net, eps).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        mo.metric = crate::calculus::Metric::random(&c, 0.3, &mut rng);
        // eps is given as a fraction of the admissible bound
        mo.epsilon = eps * mo.epsilon_max().unwrap();
        let source: Vec<f64> = (0..c.count(2)).map(|_| rng.random_range(-1.0..1.0)).collect();
        let n_state = mo.n_state();
        let sample = Sample {
            name: "s".into(),
            bcs: vec![],
            source,
            pin: None,
            data: Observation {
                indices: (0..n_state).step_by(2).collect(),
                values: (0..n_state).step_by(2).map(|i| 0.1 * i as f64).collect(),
            },
        };
        (mo, sample)
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut adam = Adam::new(2, 0.9, 0.999, 1e-8);
        let mut p = vec![1.0, -2.0];
        adam.step(&mut p, &[0.0, 0.0], 0.1);
        assert_eq!(p, vec![1.0, -2.0]);
    }

    #[test]
    fn first_adam_step_has_learning_rate_magnitude() {
        let mut adam = Adam::new(1, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0];
        adam.step(&mut p, &[3.0], 0.01);
        assert!((p[0] + 0.01).abs() < 1e-10);
    }

    #[test]
    fn two_step_scalar_trace() {
        let (b1, b2, eps, lr): (f64, f64, f64, f64) = (0.9, 0.999, 1e-8, 0.1);
        let mut adam = Adam::new(1, b1, b2, eps);
        let mut p = vec![1.0];
        adam.step(&mut p, &[2.0], lr);
        adam.step(&mut p, &[2.0], lr);
        // by hand: m1 = 0.2, v1 = 0.004, m2 = 0.38, v2 = 0.007996; both
        // bias-corrected pairs are (2, 4), so each step moves lr * 2 / (2 + eps)
        let m_hat = 0.38 / (1.0 - b1 * b1);
        let v_hat: f64 = 0.007996 / (1.0 - b2 * b2);
        let expected = 1.0 - lr * 2.0 / (2.0 + eps) - lr * m_hat / (v_hat.sqrt() + eps);
        assert!((p[0] - expected).abs() < 1e-9, "{} vs {expected}", p[0]);
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let (mo, sample) = setup(0.3);
        let newton = NewtonOptions { tol: Some(1e-13), ..Default::default() };
        let (_, g) = loss_gradient(&mo, &sample, &newton).unwrap();
        let p = mo.params();
        let loss_at = |q: &[f64]| {
            let mut m = mo.clone();
            m.set_params(q).unwrap();
            loss_gradient(&m, &sample, &newton).unwrap().0
        };
        let h = 1e-6;
        let mask = mo.trainable_mask();
        for i in (0..p.len()).filter(|&i| mask[i]).step_by(3) {
            let (mut pp, mut pm) = (p.clone(), p.clone());
            pp[i] += h;
            pm[i] -= h;
            let fd = (loss_at(&pp) - loss_at(&pm)) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-4 * (1.0 + fd.abs()), "param {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn self_consistent_data_is_already_optimal() {
        let (mo, mut sample) = setup(0.2);
        let mut m = mo.clone();
        sample.apply(&mut m).unwrap();
        let sol = newton_solve(&m, &State::zeros(&m), &NewtonOptions::default()).unwrap();
        let x = sol.state.to_vec();
        sample.data = Observation {
            indices: (0..x.len()).collect(),
            values: x,
        };
        let cfg = TrainConfig { epochs: 1, ..Default::default() };
        let out = train(mo, std::slice::from_ref(&sample), &cfg).unwrap();
        assert!(out.history.rows[0].loss < 1e-20);
    }

    #[test]
    fn zero_learning_rate_freezes_parameters() {
        let (mo, sample) = setup(0.2);
        let cfg = TrainConfig { epochs: 3, learning_rate: 0.0, ..Default::default() };
        let out = train(mo.clone(), std::slice::from_ref(&sample), &cfg).unwrap();
        assert_eq!(out.model.params(), mo.params());
        assert_eq!(out.history.rows.len(), 3);
    }

    #[test]
    fn zero_decay_freezes_parameters_after_the_milestone() {
        let (mo, sample) = setup(0.2);
        let cfg = TrainConfig { epochs: 2, learning_rate: 0.02, lr_milestones: vec![1], lr_gamma: 0.0, ..Default::default() };
        let a = train(mo.clone(), std::slice::from_ref(&sample), &cfg).unwrap();
        let one = train(mo, std::slice::from_ref(&sample), &TrainConfig { epochs: 1, ..cfg.clone() }).unwrap();
        assert_eq!(a.model.params(), one.model.params());
        assert!(train(one.model, std::slice::from_ref(&sample), &TrainConfig { lr_gamma: -1.0, ..cfg }).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let (mo, sample) = setup(0.2);
        let cfg = TrainConfig { epochs: 40, learning_rate: 0.02, ..Default::default() };
        let a = train(mo.clone(), std::slice::from_ref(&sample), &cfg).unwrap();
        let b = train(mo, std::slice::from_ref(&sample), &cfg).unwrap();
        assert_eq!(a.history.to_csv(), b.history.to_csv());
        let first = a.history.rows[0].loss;
        let last = a.history.rows.last().unwrap().loss;
        assert!(last < first, "{first} -> {last}");
    }
}

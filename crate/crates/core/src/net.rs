//! Small dense feed-forward networks with exact input Jacobians and
//! reverse-mode parameter gradients.
//!
//! Hidden layers apply the activation, the output layer is affine. The
//! network the models use is `NN(x) = raw(x) - raw(0)`, so `NN(0) = 0` for any
//! parameters.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::calculus::Metric;
use crate::error::{check_len, Error, Result};
use crate::linalg::spectral_norm;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Elu,
    Prelu,
    Tanh,
    Relu,
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "elu" => Ok(Self::Elu),
            "prelu" => Ok(Self::Prelu),
            "tanh" => Ok(Self::Tanh),
            "relu" => Ok(Self::Relu),
            other => Err(Error::InvalidArgument(format!("unknown activation '{other}'"))),
        }
    }
}

impl Activation {
    fn eval(self, z: f64, slope: f64) -> f64 {
        match self {
            Self::Elu => {
                if z > 0.0 {
                    z
                } else {
                    z.exp_m1()
                }
            }
            Self::Prelu => {
                if z > 0.0 {
                    z
                } else {
                    slope * z
                }
            }
            Self::Tanh => z.tanh(),
            Self::Relu => z.max(0.0),
        }
    }

    /// Derivative in `z`; the left derivative at kinks.
    fn deriv(self, z: f64, slope: f64) -> f64 {
        match self {
            Self::Elu => {
                if z > 0.0 {
                    1.0
                } else {
                    z.exp()
                }
            }
            Self::Prelu => {
                if z > 0.0 {
                    1.0
                } else {
                    slope
                }
            }
            Self::Tanh => 1.0 - z.tanh().powi(2),
            Self::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    /// Derivative in the prelu slope.
    fn slope_deriv(self, z: f64) -> f64 {
        match self {
            Self::Prelu if z <= 0.0 => z,
            _ => 0.0,
        }
    }
}

/// Affine map with a row-major `rows x cols` weight matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Layer {
    fn apply(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| {
                let row = &self.weights[r * self.cols..(r + 1) * self.cols];
                self.bias[r] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
            })
            .collect()
    }

    fn apply_transpose(&self, g: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.cols];
        for (r, &gr) in g.iter().enumerate() {
            let row = &self.weights[r * self.cols..(r + 1) * self.cols];
            for (o, w) in out.iter_mut().zip(row) {
                *o += w * gr;
            }
        }
        out
    }

    pub fn matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.rows, self.cols, &self.weights)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Layer>,
    pub activation: Activation,
    /// One learnable slope per hidden layer for prelu, empty otherwise.
    pub slopes: Vec<f64>,
}

/// Pre-activations of every layer for one input.
struct Trace {
    inputs: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
}

const PRELU_INIT: f64 = 0.25;

impl Mlp {
    /// He-initialized network: weights `N(0, 2 / fan_in)`, zero biases.
    pub fn init_he(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::InvalidArgument(format!("invalid layer widths {widths:?}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (cols, rows) = (w[0], w[1]);
                let normal = Normal::new(0.0, (2.0 / cols as f64).sqrt()).expect("positive variance");
                Layer {
                    rows,
                    cols,
                    weights: (0..rows * cols).map(|_| normal.sample(&mut rng)).collect(),
                    bias: vec![0.0; rows],
                }
            })
            .collect::<Vec<_>>();
        let slopes = match activation {
            Activation::Prelu => vec![PRELU_INIT; layers.len() - 1],
            _ => Vec::new(),
        };
        Ok(Self {
            layers,
            activation,
            slopes,
        })
    }

    /// A single affine layer, mostly for tests.
    pub fn linear(m: &DMatrix<f64>, bias: Vec<f64>) -> Result<Self> {
        check_len(m.nrows(), bias.len(), "bias length")?;
        let weights = (0..m.nrows())
            .flat_map(|r| (0..m.ncols()).map(move |c| (r, c)))
            .map(|(r, c)| m[(r, c)])
            .collect();
        Ok(Self {
            layers: vec![Layer {
                rows: m.nrows(),
                cols: m.ncols(),
                weights,
                bias,
            }],
            activation: Activation::Elu,
            slopes: Vec::new(),
        })
    }

    pub fn check(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::InvalidArgument("network has no layers".into()));
        }
        for (i, l) in self.layers.iter().enumerate() {
            check_len(l.rows * l.cols, l.weights.len(), "layer weights")?;
            check_len(l.rows, l.bias.len(), "layer bias")?;
            if i > 0 {
                check_len(self.layers[i - 1].rows, l.cols, "layer chaining")?;
            }
        }
        let hidden = self.layers.len() - 1;
        match self.activation {
            Activation::Prelu => check_len(hidden, self.slopes.len(), "prelu slopes")?,
            _ => check_len(0, self.slopes.len(), "slopes of a non-prelu network")?,
        }
        if self.slopes.iter().any(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::InvalidArgument("prelu slopes must lie in [0, 1]".into()));
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].cols
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().expect("nonempty").rows
    }

    fn slope(&self, hidden: usize) -> f64 {
        self.slopes.get(hidden).copied().unwrap_or(0.0)
    }

    fn trace(&self, x: &[f64]) -> Trace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_vec();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = layer.apply(&a);
            inputs.push(a);
            a = if i < last {
                z.iter().map(|&v| self.activation.eval(v, self.slope(i))).collect()
            } else {
                z.clone()
            };
            pre.push(z);
        }
        Trace { inputs, pre }
    }

    /// The network without the zero-point shift.
    pub fn forward_raw(&self, x: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_width(), x.len(), "network input")?;
        Ok(self.trace(x).pre.pop().expect("nonempty"))
    }

    /// `raw(x) - raw(0)`.
    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let y = self.forward_raw(x)?;
        let y0 = self.forward_raw(&vec![0.0; x.len()])?;
        Ok(y.into_iter().zip(y0).map(|(a, b)| a - b).collect())
    }

    /// Input Jacobian (the zero-point shift does not change it).
    pub fn jacobian(&self, x: &[f64]) -> Result<DMatrix<f64>> {
        check_len(self.input_width(), x.len(), "network input")?;
        let t = self.trace(x);
        let mut j = self.layers[0].matrix();
        for (i, layer) in self.layers.iter().enumerate().skip(1) {
            let z = &t.pre[i - 1];
            for (r, &zr) in z.iter().enumerate() {
                let s = self.activation.deriv(zr, self.slope(i - 1));
                j.row_mut(r).scale_mut(s);
            }
            j = layer.matrix() * j;
        }
        Ok(j)
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum::<usize>() + self.slopes.len()
    }

    /// Flattened parameters: per layer the row-major weights then the bias,
    /// followed by the prelu slopes.
    pub fn params(&self) -> Vec<f64> {
        let mut p = Vec::with_capacity(self.n_params());
        for l in &self.layers {
            p.extend_from_slice(&l.weights);
            p.extend_from_slice(&l.bias);
        }
        p.extend_from_slice(&self.slopes);
        p
    }

    /// Inverse of [`Mlp::params`]; prelu slopes are clamped to `[0, 1]`.
    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        check_len(self.n_params(), p.len(), "network parameters")?;
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.weights.len();
            l.weights.copy_from_slice(&p[at..at + nw]);
            at += nw;
            let nb = l.bias.len();
            l.bias.copy_from_slice(&p[at..at + nb]);
            at += nb;
        }
        for s in &mut self.slopes {
            *s = p[at].clamp(0.0, 1.0);
            at += 1;
        }
        Ok(())
    }

    /// Gradient of `cotᵀ raw(x)` with respect to [`Mlp::params`].
    pub fn param_vjp_raw(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        check_len(self.input_width(), x.len(), "network input")?;
        check_len(self.output_width(), cot.len(), "network cotangent")?;
        let t = self.trace(x);
        let n_layers = self.layers.len();
        let mut layer_grads: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(n_layers);
        let mut slope_grads = vec![0.0; self.slopes.len()];
        let mut g = cot.to_vec();
        for i in (0..n_layers).rev() {
            let layer = &self.layers[i];
            let input = &t.inputs[i];
            let mut gw = vec![0.0; layer.weights.len()];
            for (r, &gr) in g.iter().enumerate() {
                for (c, &a) in input.iter().enumerate() {
                    gw[r * layer.cols + c] = gr * a;
                }
            }
            layer_grads.push((gw, g.clone()));
            if i == 0 {
                break;
            }
            let back = layer.apply_transpose(&g);
            let z = &t.pre[i - 1];
            if !slope_grads.is_empty() {
                slope_grads[i - 1] = back
                    .iter()
                    .zip(z)
                    .map(|(b, &zv)| b * self.activation.slope_deriv(zv))
                    .sum();
            }
            g = back
                .iter()
                .zip(z)
                .map(|(b, &zv)| b * self.activation.deriv(zv, self.slope(i - 1)))
                .collect();
        }
        layer_grads.reverse();
        let mut out = Vec::with_capacity(self.n_params());
        for (gw, gb) in layer_grads {
            out.extend(gw);
            out.extend(gb);
        }
        out.extend(slope_grads);
        Ok(out)
    }

    /// Gradient of `cotᵀ NN(x)` with respect to [`Mlp::params`].
    pub fn param_vjp(&self, x: &[f64], cot: &[f64]) -> Result<Vec<f64>> {
        let a = self.param_vjp_raw(x, cot)?;
        let b = self.param_vjp_raw(&vec![0.0; x.len()], cot)?;
        Ok(a.into_iter().zip(b).map(|(p, q)| p - q).collect())
    }

    /// Product of layer spectral norms, by power iteration.
    pub fn spectral_product(&self) -> f64 {
        self.layers
            .iter()
            .map(|l| spectral_norm(&l.matrix(), 1e-8, 500))
            .product()
    }
}

/// Hidden-unit count up to which [`lipschitz_bound`] enumerates activation
/// slope patterns; larger networks fall back to the product of layer norms.
pub const VERTEX_UNIT_LIMIT: usize = 12;

impl Activation {
    /// Smallest derivative on the real line (the largest is always 1).
    fn min_slope(self, slope: f64) -> f64 {
        match self {
            Self::Prelu => slope.clamp(0.0, 1.0),
            _ => 0.0,
        }
    }
}

/// Upper bound on the Lipschitz constant of the network in the weighted norm
/// `(.,.)_{k-1}` with weights `w = D_{k-1} / B_{k-1}`.
///
/// The input Jacobian is `M_L S_{L-1} M_{L-1} ... S_1 M_1` with diagonal
/// slope matrices `S_l` whose entries lie in `[s_min, 1]`. Its weighted norm
/// is convex in each `S_l` separately, so the maximum over the slope box sits
/// at a vertex; small networks enumerate every vertex, larger ones use the
/// product of the layer spectral norms.
pub fn lipschitz_bound(n: &Mlp, m: &Metric, k: usize) -> Result<f64> {
    if k == 0 || k > m.log_b.len() {
        return Err(Error::LevelOutOfRange {
            level: k,
            dim: m.log_b.len().saturating_sub(1),
        });
    }
    let w = m.weight(k - 1);
    check_len(n.input_width(), w.len(), "network input vs metric weights")?;
    let last = n.layers.len() - 1;
    let mats: Vec<DMatrix<f64>> = n
        .layers
        .iter()
        .enumerate()
        .map(|(l, layer)| {
            let mut a = layer.matrix();
            if l == 0 {
                for (j, wj) in w.iter().enumerate() {
                    a.column_mut(j).scale_mut(wj.sqrt().recip());
                }
            }
            if l == last {
                for (i, wi) in w.iter().enumerate() {
                    a.row_mut(i).scale_mut(wi.sqrt());
                }
            }
            a
        })
        .collect();
    let hidden: usize = n.layers[..last].iter().map(|l| l.rows).sum();
    if last == 0 || hidden > VERTEX_UNIT_LIMIT {
        return Ok(mats.iter().map(|a| spectral_norm(a, 1e-8, 500)).product());
    }
    let lows: Vec<f64> = (0..last).map(|h| n.activation.min_slope(n.slope(h))).collect();
    let p = mats[last].transpose() * &mats[last];
    Ok(vertex_max(&mats, &lows, &p, 0, mats[0].clone()).sqrt())
}

/// Squared norm maximized over the slope patterns of hidden layers `i..`,
/// where `b` is the Jacobian up to the pre-activations of hidden layer `i`.
fn vertex_max(mats: &[DMatrix<f64>], lows: &[f64], p: &DMatrix<f64>, i: usize, b: DMatrix<f64>) -> f64 {
    let h = b.nrows();
    let patterns = 1usize << h;
    let slopes = |mask: usize| -> Vec<f64> { (0..h).map(|r| if mask >> r & 1 == 1 { 1.0 } else { lows[i] }).collect() };
    if i + 1 < lows.len() {
        return (0..patterns)
            .map(|mask| {
                let mut sb = b.clone();
                for (r, s) in slopes(mask).into_iter().enumerate() {
                    sb.row_mut(r).scale_mut(s);
                }
                vertex_max(mats, lows, p, i + 1, &mats[i + 1] * sb)
            })
            .fold(0.0, f64::max);
    }
    // last hidden layer: ||A S B||^2 = lambda_max(C^{1/2} S P S C^{1/2}), C = B B^T
    let c = psd_sqrt(&(&b * b.transpose()));
    (0..patterns)
        .map(|mask| {
            let mut sc = c.clone();
            for (r, s) in slopes(mask).into_iter().enumerate() {
                sc.row_mut(r).scale_mut(s);
            }
            let q = sc.transpose() * p * &sc;
            q.symmetric_eigenvalues().iter().copied().fold(0.0, f64::max)
        })
        .fold(0.0, f64::max)
}

fn psd_sqrt(c: &DMatrix<f64>) -> DMatrix<f64> {
    let e = c.clone().symmetric_eigen();
    let roots = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&roots) * e.eigenvectors.transpose()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_input(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    #[test]
    fn he_shapes() {
        let n = Mlp::init_he(&[12, 5, 5, 12], Activation::Elu, 0).unwrap();
        let shapes: Vec<_> = n.layers.iter().map(|l| (l.rows, l.cols)).collect();
        assert_eq!(shapes, vec![(5, 12), (5, 5), (12, 5)]);
        assert!(n.layers.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
        let p = Mlp::init_he(&[7, 10, 7], Activation::Prelu, 0).unwrap();
        assert_eq!(p.layers.len(), 2);
        assert_eq!(p.slopes.len(), 1);
        assert!(Mlp::init_he(&[3], Activation::Elu, 0).is_err());
    }

    #[test]
    fn seeding_is_deterministic() {
        let a = Mlp::init_he(&[4, 6, 4], Activation::Tanh, 9).unwrap();
        let b = Mlp::init_he(&[4, 6, 4], Activation::Tanh, 9).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, Mlp::init_he(&[4, 6, 4], Activation::Tanh, 10).unwrap());
    }

    #[test]
    fn zero_maps_to_zero() {
        let mut n = Mlp::init_he(&[3, 4, 3], Activation::Elu, 1).unwrap();
        for l in &mut n.layers {
            l.bias.iter_mut().for_each(|b| *b = 0.3);
        }
        assert_eq!(n.forward(&[0.0; 3]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn linear_layer_doubles() {
        let m = DMatrix::<f64>::identity(3, 3) * 2.0;
        let n = Mlp::linear(&m, vec![0.0; 3]).unwrap();
        assert_eq!(n.forward(&[1.0, -2.0, 0.5]).unwrap(), vec![2.0, -4.0, 1.0]);
        assert_eq!(n.jacobian(&[0.3, 0.1, 0.2]).unwrap(), m);
    }

    #[test]
    fn forward_matches_scalar_reevaluation() {
        let n = Mlp::init_he(&[3, 4, 2], Activation::Tanh, 2).unwrap();
        let x = random_input(3, 3);
        let mut hidden = [0.0; 4];
        for (r, h) in hidden.iter_mut().enumerate() {
            let mut z = n.layers[0].bias[r];
            for c in 0..3 {
                z += n.layers[0].weights[r * 3 + c] * x[c];
            }
            *h = z.tanh();
        }
        for r in 0..2 {
            let mut y = n.layers[1].bias[r];
            for c in 0..4 {
                y += n.layers[1].weights[r * 4 + c] * hidden[c];
            }
            assert!((n.forward_raw(&x).unwrap()[r] - y).abs() < 1e-15);
        }
    }

    #[test]
    fn width_one_elu_chain_rule_at_zero() {
        let n = Mlp {
            layers: vec![
                Layer { rows: 1, cols: 1, weights: vec![2.0], bias: vec![-0.5] },
                Layer { rows: 1, cols: 1, weights: vec![3.0], bias: vec![0.0] },
            ],
            activation: Activation::Elu,
            slopes: vec![],
        };
        // z = -0.5 at x = 0, so the elu derivative is exp(-0.5)
        let j = n.jacobian(&[0.0]).unwrap();
        assert!((j[(0, 0)] - 6.0 * (-0.5f64).exp()).abs() < 1e-15);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        for act in [Activation::Elu, Activation::Tanh, Activation::Prelu] {
            let n = Mlp::init_he(&[4, 5, 5, 3], act, 4).unwrap();
            let x = random_input(4, 5);
            let j = n.jacobian(&x).unwrap();
            let h = 1e-5;
            for c in 0..4 {
                let (mut xp, mut xm) = (x.clone(), x.clone());
                xp[c] += h;
                xm[c] -= h;
                let (yp, ym) = (n.forward(&xp).unwrap(), n.forward(&xm).unwrap());
                for r in 0..3 {
                    let fd = (yp[r] - ym[r]) / (2.0 * h);
                    assert!((fd - j[(r, c)]).abs() <= 1e-6 * (1.0 + fd.abs()), "{act:?}");
                }
            }
        }
    }

    #[test]
    fn param_vjp_of_linear_layer_is_outer_product() {
        let m = DMatrix::from_row_slice(2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let n = Mlp::linear(&m, vec![0.5, -0.5]).unwrap();
        let g = n.param_vjp(&[1.0, -1.0, 2.0], &[3.0, -2.0]).unwrap();
        // weights: cot xᵀ; biases cancel against the zero-point shift
        assert_eq!(g, vec![3.0, -3.0, 6.0, -2.0, 2.0, -4.0, 0.0, 0.0]);
        assert!(n.param_vjp(&[1.0, 1.0, 1.0], &[0.0, 0.0]).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn param_vjp_matches_finite_differences() {
        for act in [Activation::Elu, Activation::Prelu, Activation::Tanh] {
            let mut n = Mlp::init_he(&[3, 4, 3], act, 6).unwrap();
            let mut p = n.params();
            // move biases off zero so the shift matters
            for v in p.iter_mut() {
                *v += 0.05;
            }
            n.set_params(&p).unwrap();
            let x = random_input(3, 7);
            let cot = random_input(3, 8);
            let g = n.param_vjp(&x, &cot).unwrap();
            let h = 1e-6;
            for i in 0..p.len() {
                let eval = |delta: f64| {
                    let mut q = n.clone();
                    let mut pp = p.clone();
                    pp[i] += delta;
                    q.set_params(&pp).unwrap();
                    q.forward(&x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum::<f64>()
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-6 * (1.0 + fd.abs()), "{act:?} param {i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn params_round_trip() {
        let mut n = Mlp::init_he(&[2, 3, 2], Activation::Prelu, 11).unwrap();
        let p = n.params();
        assert_eq!(p.len(), n.n_params());
        n.set_params(&p).unwrap();
        assert_eq!(n.params(), p);
        n.check().unwrap();
    }
    fn flat_metric(widths: &[usize]) -> Metric {
        let z: Vec<Vec<f64>> = widths.iter().map(|&n| vec![0.0; n]).collect();
        Metric { log_b: z.clone(), log_d: z }
    }

    #[test]
    fn lipschitz_of_simple_networks() {
        let m = flat_metric(&[3, 3]);
        let two = Mlp::linear(&(DMatrix::<f64>::identity(3, 3) * 2.0), vec![0.0; 3]).unwrap();
        assert!((lipschitz_bound(&two, &m, 1).unwrap() - 2.0).abs() < 1e-12);
        let zero = Mlp::linear(&DMatrix::zeros(3, 3), vec![0.0; 3]).unwrap();
        assert_eq!(lipschitz_bound(&zero, &m, 1).unwrap(), 0.0);
    }

    #[test]
    fn vertex_bound_is_below_layer_product() {
        for seed in 0..10 {
            let n = Mlp::init_he(&[6, 4, 3, 6], Activation::Elu, seed).unwrap();
            let m = flat_metric(&[6, 6]);
            let product: f64 = n.layers.iter().map(|l| spectral_norm(&l.matrix(), 1e-10, 1000)).product();
            assert!(lipschitz_bound(&n, &m, 1).unwrap() <= product * (1.0 + 1e-9));
        }
    }

    #[test]
    fn vertex_bound_matches_brute_force_on_relu() {
        // with relu every slope pattern is realized somewhere, so the bound is
        // the largest norm over explicit patterns
        let n = Mlp::init_he(&[3, 3, 3], Activation::Relu, 7).unwrap();
        let m = flat_metric(&[3, 3]);
        let (a, b) = (n.layers[1].matrix(), n.layers[0].matrix());
        let mut best: f64 = 0.0;
        for mask in 0..8usize {
            let s = DMatrix::from_diagonal(&nalgebra::DVector::from_fn(3, |r, _| (mask >> r & 1) as f64));
            best = best.max((&a * s * &b).singular_values().max());
        }
        assert!((lipschitz_bound(&n, &m, 1).unwrap() - best).abs() < 1e-9 * best.max(1.0));
    }

    #[test]
    fn identity_map_is_one_lipschitz_in_any_weighting() {
        let mut m = flat_metric(&[3, 3]);
        m.log_d[0] = vec![-2.0, 0.5, 3.0];
        let id = Mlp::linear(&DMatrix::<f64>::identity(3, 3), vec![0.0; 3]).unwrap();
        assert!((lipschitz_bound(&id, &m, 1).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn lipschitz_bound_dominates_sampled_quotients() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let n = Mlp::init_he(&[4, 6, 4], Activation::Elu, 13).unwrap();
        let mut m = flat_metric(&[4, 4]);
        m.log_d[0] = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        m.log_b[0] = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = m.weight(0);
        let wnorm = |v: &[f64]| v.iter().zip(&w).map(|(x, w)| w * x * x).sum::<f64>().sqrt();
        let bound = lipschitz_bound(&n, &m, 1).unwrap();
        for _ in 0..1000 {
            let x: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let dir: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
            let y: Vec<f64> = x.iter().zip(&dir).map(|(a, d)| a + 1e-3 * d).collect();
            let (fx, fy) = (n.forward(&x).unwrap(), n.forward(&y).unwrap());
            let df: Vec<f64> = fx.iter().zip(&fy).map(|(a, b)| a - b).collect();
            let dx: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a - b).collect();
            assert!(wnorm(&df) / wnorm(&dx) <= bound);
        }
    }
}

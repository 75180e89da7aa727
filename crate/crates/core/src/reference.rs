//! Fine-scale solvers producing training data: Darcy flow and 2D
//! magnetostatics around a circular inclusion on Cartesian grids.
//!
//! Sign conventions follow [`ChainComplex::cartesian`]: a 1-cochain stores
//! the flux through each edge along the edge tangent rotated clockwise, so
//! vertical edges carry +x flux, horizontal edges carry -y flux, and
//! `delta_1` is the outward flux of each cell.

use serde::{Deserialize, Serialize};

use crate::coarsen::{block_partition, build_coarse, greedy_partition, CoarseMap};
use crate::complex::{ChainComplex, Cochain, Grid};
use crate::error::{check_len, Error, Result};
use crate::linalg::solve_spd;
use crate::model::{Constraint, SurrogateModel};
use crate::net::{Activation, Mlp};
use crate::solve::Observation;
use crate::train::{Sample, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaterialSpec {
    pub radius: f64,
    pub alpha: f64,
    /// Inclusion center; the domain center when absent.
    pub center: Option<[f64; 2]>,
}

impl MaterialSpec {
    pub fn new(alpha: f64) -> Self {
        Self {
            radius: DEFAULT_RADIUS,
            alpha,
            center: None,
        }
    }

    pub fn check(&self) -> Result<()> {
        if !(self.radius > 0.0 && self.alpha > 0.0) {
            return Err(Error::InvalidArgument("inclusion radius and alpha must be positive".into()));
        }
        Ok(())
    }

    fn center_in(&self, g: &Grid) -> [f64; 2] {
        self.center.unwrap_or([0.5 * g.lx, 0.5 * g.ly])
    }
}

pub const DEFAULT_RADIUS: f64 = 0.25;

/// `alpha` inside the inclusion, 1 outside.
pub fn mu_alpha(x: [f64; 2], center: [f64; 2], mat: &MaterialSpec) -> f64 {
    let r = (x[0] - center[0]).hypot(x[1] - center[1]);
    if r < mat.radius {
        mat.alpha
    } else {
        1.0
    }
}

fn grid_of(c: &ChainComplex) -> Result<Grid> {
    let g = *c
        .grid()
        .ok_or_else(|| Error::InvalidArgument("fine solvers need a Cartesian complex".into()))?;
    check_len(g.nx * g.ny, c.count(2), "Cartesian cells")?;
    Ok(g)
}

/// Cell-wise material values at the cell centers.
pub fn cell_mu(c: &ChainComplex, mat: &MaterialSpec) -> Result<Vec<f64>> {
    let g = grid_of(c)?;
    let center = mat.center_in(&g);
    Ok(c.centroids().iter().map(|&x| mu_alpha(x, center, mat)).collect())
}

/// Edge flux of a uniform vector field `(fx, fy)`: `F . n |e|`.
pub fn uniform_edge_flux(c: &ChainComplex, field: [f64; 2]) -> Result<Vec<f64>> {
    let g = grid_of(c)?;
    let mut flux = vec![0.0; c.count(1)];
    for j in 0..=g.ny {
        for i in 0..g.nx {
            flux[g.x_edge(i, j)] = -field[1] * g.hx();
        }
    }
    for j in 0..g.ny {
        for i in 0..=g.nx {
            flux[g.y_edge(i, j)] = field[0] * g.hy();
        }
    }
    Ok(flux)
}

#[derive(Clone, Debug, PartialEq)]
pub struct DarcySolution {
    /// Cell potentials (point values at cell centers).
    pub phi: Cochain,
    /// Edge fluxes.
    pub flux: Cochain,
}

/// Two-point flux mixed scheme for `F + mu grad phi = 0`, `div F = f`.
///
/// `boundary_flux` holds the prescribed flux on every boundary edge (other
/// entries are ignored), `source` the integrated source per cell. The
/// potential is pinned to zero in cell 0.
pub fn solve_darcy_fine(
    c: &ChainComplex,
    mat: &MaterialSpec,
    boundary_flux: &[f64],
    source: &[f64],
) -> Result<DarcySolution> {
    mat.check()?;
    let g = grid_of(c)?;
    check_len(c.count(1), boundary_flux.len(), "boundary flux")?;
    check_len(c.count(2), source.len(), "source")?;
    let mu = cell_mu(c, mat)?;
    let d1 = c.coboundary(1)?;
    let cofaces = d1.transpose();
    let boundary = c.boundary_mask(1)?;

    // transmissibility of interior edges: harmonic-mean coefficient x |e| / distance
    let n_x_edges = g.nx * (g.ny + 1);
    let mut trans = vec![0.0; c.count(1)];
    for e in 0..c.count(1) {
        if boundary[e] {
            continue;
        }
        let cells: Vec<usize> = cofaces.row(e).map(|(cell, _)| cell).collect();
        let (a, b) = (mu[cells[0]], mu[cells[1]]);
        let harmonic = 2.0 * a * b / (a + b);
        trans[e] = if e < n_x_edges {
            harmonic * g.hx() / g.hy()
        } else {
            harmonic * g.hy() / g.hx()
        };
    }

    let mut rhs = source.to_vec();
    let mut outward_total = 0.0;
    for e in (0..c.count(1)).filter(|&e| boundary[e]) {
        for (cell, s) in cofaces.row(e) {
            rhs[cell] -= s as f64 * boundary_flux[e];
            outward_total += s as f64 * boundary_flux[e];
        }
    }
    let source_total: f64 = source.iter().sum();
    let scale = 1.0 + source.iter().map(|v| v.abs()).sum::<f64>() + boundary_flux.iter().map(|v| v.abs()).sum::<f64>();
    if (source_total - outward_total).abs() > 1e-12 * scale {
        return Err(Error::Incompatible(format!(
            "sources sum to {source_total} but the boundary outflow is {outward_total}"
        )));
    }

    // reduced system on cells 1.. (cell 0 pinned to zero)
    let n = c.count(2);
    let mut entries = Vec::new();
    for e in (0..c.count(1)).filter(|&e| !boundary[e]) {
        let pairs: Vec<(usize, i64)> = cofaces.row(e).collect();
        for &(p, sp) in &pairs {
            for &(q, sq) in &pairs {
                if p > 0 && q > 0 {
                    entries.push((p - 1, q - 1, trans[e] * (sp * sq) as f64));
                }
            }
        }
    }
    let reduced = solve_spd(n - 1, &entries, &rhs[1..])?;
    let mut phi = vec![0.0; n];
    phi[1..].copy_from_slice(&reduced);

    let grad = d1.tr_mul_vec(&phi);
    let flux: Vec<f64> = (0..c.count(1))
        .map(|e| if boundary[e] { boundary_flux[e] } else { trans[e] * grad[e] })
        .collect();
    Ok(DarcySolution {
        phi: Cochain::new(2, phi),
        flux: Cochain::new(1, flux),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct MagnetoSolution {
    /// Nodal magnetic field.
    pub b: Cochain,
    /// Edge potential.
    pub a: Cochain,
    /// Nodal material values (average of adjacent cells).
    pub node_mu: Vec<f64>,
    /// Dual-cell areas of the nodes.
    pub dual_area: Vec<f64>,
}

impl MagnetoSolution {
    /// Nodal `J = B / mu`.
    pub fn j(&self) -> Cochain {
        let j = self.b.values.iter().zip(&self.node_mu).map(|(b, mu)| b / mu).collect();
        Cochain::new(0, j)
    }
}

/// Nodal material values and dual areas.
fn node_weights(c: &ChainComplex, mu: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
    let g = grid_of(c)?;
    let mut sum = vec![0.0; c.count(0)];
    let mut count = vec![0.0; c.count(0)];
    for j in 0..g.ny {
        for i in 0..g.nx {
            let cell = g.cell(i, j);
            for (a, b) in [(i, j), (i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                sum[g.node(a, b)] += mu[cell];
                count[g.node(a, b)] += 1.0;
            }
        }
    }
    let quarter = 0.25 * g.hx() * g.hy();
    let node_mu = sum.iter().zip(&count).map(|(s, n)| s / n).collect();
    let dual = count.iter().map(|n| n * quarter).collect();
    Ok((node_mu, dual))
}

/// Covolume scheme for `curl H = 0`, `B = mu H` with the nodal field `B`
/// fixed to `g` on the boundary and the edge potential fixed to zero there:
///
/// ```text
/// B = D0^{-1} delta_0ᵀ A          (interior nodes)
/// delta_0 (B / mu) + delta_1ᵀ delta_1 A = 0   (interior edges)
/// ```
pub fn solve_magnetostatics_fine(c: &ChainComplex, mat: &MaterialSpec, g: f64) -> Result<MagnetoSolution> {
    mat.check()?;
    let mu = cell_mu(c, mat)?;
    let (node_mu, dual_area) = node_weights(c, &mu)?;
    let d0 = c.coboundary(0)?;
    let d1 = c.coboundary(1)?;
    let bnode = c.boundary_mask(0)?;
    let bedge = c.boundary_mask(1)?;

    let interior: Vec<usize> = (0..c.count(1)).filter(|&e| !bedge[e]).collect();
    let mut local = vec![usize::MAX; c.count(1)];
    for (i, &e) in interior.iter().enumerate() {
        local[e] = i;
    }
    let mut entries = Vec::new();
    let mut rhs = vec![0.0; interior.len()];
    // delta_0 (mu D0)^{-1} delta_0ᵀ over interior nodes
    let node_edges = d0.transpose();
    for v in 0..c.count(0) {
        let edges: Vec<(usize, i64)> = node_edges.row(v).collect();
        if bnode[v] {
            // known H = g / mu on the boundary moves to the right-hand side
            for &(e, s) in &edges {
                if local[e] != usize::MAX {
                    rhs[local[e]] -= s as f64 * g / node_mu[v];
                }
            }
            continue;
        }
        let w = 1.0 / (node_mu[v] * dual_area[v]);
        for &(e, se) in &edges {
            for &(f, sf) in &edges {
                entries.push((local[e], local[f], w * (se * sf) as f64));
            }
        }
    }
    for cell in 0..c.count(2) {
        let edges: Vec<(usize, i64)> = d1.row(cell).filter(|&(e, _)| local[e] != usize::MAX).collect();
        for &(e, se) in &edges {
            for &(f, sf) in &edges {
                entries.push((local[e], local[f], (se * sf) as f64));
            }
        }
    }
    let a_int = solve_spd(interior.len(), &entries, &rhs)?;
    let mut a = vec![0.0; c.count(1)];
    for (i, &e) in interior.iter().enumerate() {
        a[e] = a_int[i];
    }
    let circulation = d0.tr_mul_vec(&a);
    let b = (0..c.count(0))
        .map(|v| if bnode[v] { g } else { circulation[v] / dual_area[v] })
        .collect();
    Ok(MagnetoSolution {
        b: Cochain::new(0, b),
        a: Cochain::new(1, a),
        node_mu,
        dual_area,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Case {
    D1,
    D2,
    Magneto,
}

impl std::str::FromStr for Case {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "d1" => Ok(Self::D1),
            "d2" => Ok(Self::D2),
            "magneto" | "magnetostatics" => Ok(Self::Magneto),
            other => Err(Error::InvalidArgument(format!("unknown case '{other}'"))),
        }
    }
}

impl Case {
    /// Problem index of the surrogate model.
    pub fn k(self) -> usize {
        match self {
            Self::D1 | Self::D2 => 2,
            Self::Magneto => 1,
        }
    }

    pub fn default_alphas(self) -> Vec<f64> {
        match self {
            Self::D1 => vec![1.0],
            Self::D2 | Self::Magneto => vec![1.0, 2.0, 4.0],
        }
    }

    pub fn default_parts(self) -> usize {
        match self {
            Self::D1 | Self::D2 => 3,
            Self::Magneto => 5,
        }
    }

    /// Epochs, learning rate schedule and stopping target used for the case.
    pub fn train_config(self) -> TrainConfig {
        let (epochs, learning_rate, milestones, target_rms) = match self {
            Self::D1 => (20_000, 0.05, vec![], 1e-6),
            Self::D2 => (10_000, 0.005, vec![5_000], 1e-4),
            Self::Magneto => (3_000, 0.005, vec![], 5e-4),
        };
        TrainConfig {
            epochs,
            learning_rate,
            lr_milestones: milestones,
            target_rms: Some(target_rms),
            ..TrainConfig::default()
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Partitioner {
    /// `parts x parts` rectangular blocks.
    Block { parts: usize },
    Greedy { parts: usize, seed: u64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case: Case,
    pub alphas: Vec<f64>,
    /// Fine cells per direction on the unit square.
    pub fine: usize,
    pub partitioner: Partitioner,
    pub radius: f64,
    pub center: Option<[f64; 2]>,
}

impl CaseSpec {
    pub fn new(case: Case, fine: usize) -> Self {
        Self {
            case,
            alphas: case.default_alphas(),
            fine,
            partitioner: Partitioner::Block {
                parts: case.default_parts(),
            },
            radius: DEFAULT_RADIUS,
            center: None,
        }
    }

    pub fn material(&self, alpha: f64) -> MaterialSpec {
        MaterialSpec {
            radius: self.radius,
            alpha,
            center: self.center,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub spec: CaseSpec,
    pub fine: ChainComplex,
    pub coarse: ChainComplex,
    pub map: CoarseMap,
    pub samples: Vec<Sample>,
}

/// Restricts a fine Darcy solution to the coarse complex: edge fluxes are
/// summed along coarse edges and potentials are integrated over partitions.
pub fn coarsen_darcy(fine: &ChainComplex, map: &CoarseMap, sol: &DarcySolution) -> Result<(Vec<f64>, Vec<f64>)> {
    let w = map.restrict(&sol.flux)?.values;
    let moments: Vec<f64> = sol.phi.values.iter().zip(fine.volumes()).map(|(p, a)| p * a).collect();
    let u = map.restrict(&Cochain::new(2, moments))?.values;
    Ok((w, u))
}

fn darcy_sample(ds_fine: &ChainComplex, coarse: &ChainComplex, map: &CoarseMap, spec: &CaseSpec, alpha: f64) -> Result<Sample> {
    let mat = spec.material(alpha);
    let drive = match spec.case {
        Case::D2 => alpha,
        _ => 1.0,
    };
    let g = uniform_edge_flux(ds_fine, [drive, 0.0])?;
    let sol = solve_darcy_fine(ds_fine, &mat, &g, &vec![0.0; ds_fine.count(2)])?;
    let (w, u) = coarsen_darcy(ds_fine, map, &sol)?;
    let boundary = coarse.boundary_mask(1)?;
    let bcs = (0..coarse.count(1))
        .filter(|&e| boundary[e])
        .map(|e| Constraint { level: 1, index: e, value: w[e] })
        .collect();
    let mut values = w;
    values.extend_from_slice(&u);
    Ok(Sample {
        name: format!("{:?}-alpha-{alpha}", spec.case).to_lowercase(),
        bcs,
        source: vec![0.0; coarse.count(2)],
        pin: Some(Constraint { level: 2, index: 0, value: u[0] }),
        data: Observation {
            indices: (0..values.len()).collect(),
            values,
        },
    })
}

fn magneto_sample(fine: &ChainComplex, coarse: &ChainComplex, map: &CoarseMap, spec: &CaseSpec, alpha: f64) -> Result<Sample> {
    let sol = solve_magnetostatics_fine(fine, &spec.material(alpha), alpha)?;
    let w = map.restrict(&sol.j())?.values;
    let u = map.restrict(&sol.a)?.values;
    let bnode = coarse.boundary_mask(0)?;
    let bedge = coarse.boundary_mask(1)?;
    let mut bcs: Vec<Constraint> = (0..coarse.count(0))
        .filter(|&v| bnode[v])
        .map(|v| Constraint { level: 0, index: v, value: w[v] })
        .collect();
    bcs.extend((0..coarse.count(1)).filter(|&e| bedge[e]).map(|e| Constraint {
        level: 1,
        index: e,
        value: 0.0,
    }));
    let mut values = w;
    values.extend_from_slice(&u);
    Ok(Sample {
        name: format!("magneto-alpha-{alpha}"),
        bcs,
        source: vec![0.0; coarse.count(1)],
        pin: None,
        data: Observation {
            indices: (0..values.len()).collect(),
            values,
        },
    })
}

/// Fine complex, partition and coarse complex of a case.
pub fn case_complexes(spec: &CaseSpec) -> Result<(ChainComplex, ChainComplex, CoarseMap)> {
    let fine = ChainComplex::cartesian(spec.fine, spec.fine, 1.0, 1.0)?;
    let labels = match spec.partitioner {
        Partitioner::Block { parts } => block_partition(&fine, parts, parts)?,
        Partitioner::Greedy { parts, seed } => greedy_partition(&fine, parts, seed)?,
    };
    let (coarse, map) = build_coarse(&fine, &labels)?;
    Ok((fine, coarse, map))
}

/// One fine solve per alpha, restricted to the coarse complex.
pub fn generate_dataset(spec: &CaseSpec) -> Result<Dataset> {
    if spec.alphas.is_empty() {
        return Err(Error::InvalidArgument("a case needs at least one alpha".into()));
    }
    let (fine, coarse, map) = case_complexes(spec)?;
    let samples = spec
        .alphas
        .iter()
        .map(|&alpha| match spec.case {
            Case::D1 | Case::D2 => darcy_sample(&fine, &coarse, &map, spec, alpha),
            Case::Magneto => magneto_sample(&fine, &coarse, &map, spec, alpha),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Dataset {
        spec: spec.clone(),
        fine,
        coarse,
        map,
        samples,
    })
}

/// Default perturbation scale of the nonlinear cases.
pub const DEFAULT_EPSILON: f64 = 0.1;

/// Untrained surrogate for a case: identity metric, He-initialized network
/// (`n_w, 5, 5, n_w` ELU for Darcy, one width-10 PReLU layer for magnetostatics),
/// `eps = 0` for D1 and [`DEFAULT_EPSILON`] otherwise. Every `B` is kept
/// fixed.
pub fn case_model(case: Case, coarse: &ChainComplex, seed: u64) -> Result<SurrogateModel> {
    let k = case.k();
    let n_w = coarse.count(k - 1);
    let (widths, activation) = match case {
        Case::D1 | Case::D2 => (vec![n_w, 5, 5, n_w], Activation::Elu),
        Case::Magneto => (vec![n_w, 10, n_w], Activation::Prelu),
    };
    let net = Mlp::init_he(&widths, activation, seed)?;
    let eps = match case {
        Case::D1 => 0.0,
        _ => DEFAULT_EPSILON,
    };
    let mut mo = SurrogateModel::new(coarse.clone(), k, net, eps)?;
    mo.trainable.b.iter_mut().for_each(|b| *b = false);
    if eps == 0.0 {
        mo.trainable.net = false;
    }
    Ok(mo)
}

//! Cell complexes described by signed integer coboundary matrices.
//!
//! Level `k` holds the k-cells (nodes, edges, faces, ...). `delta[k]` maps
//! k-cochains to (k+1)-cochains; its transpose is the boundary operator.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::sparse::IntCsr;

/// Axis-aligned structured grid the complex was generated from, if any.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub nx: usize,
    pub ny: usize,
    pub lx: f64,
    pub ly: f64,
}

impl Grid {
    pub fn hx(&self) -> f64 {
        self.lx / self.nx as f64
    }

    pub fn hy(&self) -> f64 {
        self.ly / self.ny as f64
    }

    pub fn node(&self, i: usize, j: usize) -> usize {
        j * (self.nx + 1) + i
    }

    /// Edge from node (i, j) to (i + 1, j).
    pub fn x_edge(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    /// Edge from node (i, j) to (i, j + 1).
    pub fn y_edge(&self, i: usize, j: usize) -> usize {
        self.nx * (self.ny + 1) + j * (self.nx + 1) + i
    }

    pub fn cell(&self, i: usize, j: usize) -> usize {
        j * self.nx + i
    }

    pub fn cell_center(&self, i: usize, j: usize) -> [f64; 2] {
        [(i as f64 + 0.5) * self.hx(), (j as f64 + 0.5) * self.hy()]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "ComplexRepr", try_from = "ComplexRepr")]
pub struct ChainComplex {
    dim: usize,
    counts: Vec<usize>,
    delta: Vec<IntCsr>,
    positions: Vec<[f64; 2]>,
    centroids: Vec<[f64; 2]>,
    volumes: Vec<f64>,
    grid: Option<Grid>,
}

#[derive(Clone, Serialize, Deserialize)]
struct ComplexRepr {
    dim: usize,
    counts: Vec<usize>,
    delta: Vec<IntCsr>,
    positions: Vec<[f64; 2]>,
    centroids: Vec<[f64; 2]>,
    volumes: Vec<f64>,
    grid: Option<Grid>,
}

impl From<ChainComplex> for ComplexRepr {
    fn from(c: ChainComplex) -> Self {
        Self {
            dim: c.dim,
            counts: c.counts,
            delta: c.delta,
            positions: c.positions,
            centroids: c.centroids,
            volumes: c.volumes,
            grid: c.grid,
        }
    }
}

impl TryFrom<ComplexRepr> for ChainComplex {
    type Error = Error;

    fn try_from(r: ComplexRepr) -> Result<Self> {
        Ok(Self::from_parts(r.dim, r.counts, r.delta, r.positions)?
            .with_cell_geometry(r.centroids, r.volumes)?
            .with_grid(r.grid))
    }
}

/// Values attached to the k-cells of a complex.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cochain {
    pub level: usize,
    pub values: Vec<f64>,
}

impl Cochain {
    pub fn new(level: usize, values: Vec<f64>) -> Self {
        Self { level, values }
    }

    pub fn zeros(c: &ChainComplex, level: usize) -> Self {
        Self::new(level, vec![0.0; c.count(level)])
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Fails unless this cochain lives on `level` of `c`.
    pub fn check(&self, c: &ChainComplex, level: usize) -> Result<()> {
        if self.level != level {
            return Err(Error::InvalidArgument(format!(
                "expected a {level}-cochain, got a {}-cochain",
                self.level
            )));
        }
        check_len(c.count(level), self.values.len(), "cochain length")
    }
}

/// Largest entry of each composite `delta[k+1] * delta[k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ExactnessReport {
    pub max_abs: Vec<i64>,
}

impl ExactnessReport {
    pub fn pass(&self) -> bool {
        self.max_abs.iter().all(|&v| v == 0)
    }
}

impl ChainComplex {
    /// Assembles a complex from explicit coboundaries. Shapes and the
    /// {-1, 0, +1} entry constraint are checked; exactness is not (see
    /// [`ChainComplex::verify_exact`]).
    pub fn from_parts(
        dim: usize,
        counts: Vec<usize>,
        delta: Vec<IntCsr>,
        positions: Vec<[f64; 2]>,
    ) -> Result<Self> {
        if counts.len() != dim + 1 {
            return Err(Error::InvalidArgument(format!(
                "a {dim}-dimensional complex needs {} counts, got {}",
                dim + 1,
                counts.len()
            )));
        }
        if delta.len() != dim {
            return Err(Error::InvalidArgument(format!(
                "a {dim}-dimensional complex needs {dim} coboundaries, got {}",
                delta.len()
            )));
        }
        for (k, d) in delta.iter().enumerate() {
            check_len(counts[k + 1], d.rows(), "coboundary rows")?;
            check_len(counts[k], d.cols(), "coboundary columns")?;
            if d.max_abs() > 1 {
                return Err(Error::InvalidArgument(format!(
                    "coboundary {k} has an entry outside {{-1, 0, 1}}"
                )));
            }
        }
        if !positions.is_empty() {
            check_len(counts[0], positions.len(), "node positions")?;
        }
        Ok(Self {
            dim,
            counts,
            delta,
            positions,
            centroids: Vec::new(),
            volumes: Vec::new(),
            grid: None,
        })
    }

    /// Attaches centroid and volume data for the top-dimensional cells.
    pub fn with_cell_geometry(mut self, centroids: Vec<[f64; 2]>, volumes: Vec<f64>) -> Result<Self> {
        let n = self.counts[self.dim];
        if !centroids.is_empty() {
            check_len(n, centroids.len(), "cell centroids")?;
        }
        if !volumes.is_empty() {
            check_len(n, volumes.len(), "cell volumes")?;
        }
        self.centroids = centroids;
        self.volumes = volumes;
        Ok(self)
    }

    pub(crate) fn with_grid(mut self, grid: Option<Grid>) -> Self {
        self.grid = grid;
        self
    }

    /// Quadrilateral complex of an `nx` x `ny` grid over `[0, lx] x [0, ly]`.
    ///
    /// Edges point in +x or +y, cells are oriented counterclockwise, so
    /// `delta[0]` is the nodal difference `phi_head - phi_tail` and `delta[1]`
    /// sums edge values around each cell (outward flux for the rotated
    /// edge normal).
    pub fn cartesian(nx: usize, ny: usize, lx: f64, ly: f64) -> Result<Self> {
        if nx == 0 || ny == 0 {
            return Err(Error::InvalidArgument("grid needs at least one cell per direction".into()));
        }
        if !(lx > 0.0 && ly > 0.0) {
            return Err(Error::InvalidArgument("grid lengths must be positive".into()));
        }
        let g = Grid { nx, ny, lx, ly };
        let n_nodes = (nx + 1) * (ny + 1);
        let n_edges = nx * (ny + 1) + ny * (nx + 1);
        let n_cells = nx * ny;

        let mut d0 = Vec::with_capacity(2 * n_edges);
        for j in 0..=ny {
            for i in 0..nx {
                let e = g.x_edge(i, j);
                d0.push((e, g.node(i, j), -1));
                d0.push((e, g.node(i + 1, j), 1));
            }
        }
        for j in 0..ny {
            for i in 0..=nx {
                let e = g.y_edge(i, j);
                d0.push((e, g.node(i, j), -1));
                d0.push((e, g.node(i, j + 1), 1));
            }
        }
        let mut d1 = Vec::with_capacity(4 * n_cells);
        for j in 0..ny {
            for i in 0..nx {
                let c = g.cell(i, j);
                d1.push((c, g.x_edge(i, j), 1));
                d1.push((c, g.y_edge(i + 1, j), 1));
                d1.push((c, g.x_edge(i, j + 1), -1));
                d1.push((c, g.y_edge(i, j), -1));
            }
        }
        let positions = (0..=ny)
            .flat_map(|j| (0..=nx).map(move |i| [i as f64 * g.hx(), j as f64 * g.hy()]))
            .collect();
        let centroids = (0..ny)
            .flat_map(|j| (0..nx).map(move |i| g.cell_center(i, j)))
            .collect();
        let volumes = vec![g.hx() * g.hy(); n_cells];
        let delta = vec![
            IntCsr::from_triplets(n_edges, n_nodes, &d0)?,
            IntCsr::from_triplets(n_cells, n_edges, &d1)?,
        ];
        Ok(Self::from_parts(2, vec![n_nodes, n_edges, n_cells], delta, positions)?
            .with_cell_geometry(centroids, volumes)?
            .with_grid(Some(g)))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn count(&self, k: usize) -> usize {
        self.counts[k]
    }

    pub fn positions(&self) -> &[[f64; 2]] {
        &self.positions
    }

    pub fn centroids(&self) -> &[[f64; 2]] {
        &self.centroids
    }

    pub fn volumes(&self) -> &[f64] {
        &self.volumes
    }

    pub fn grid(&self) -> Option<&Grid> {
        self.grid.as_ref()
    }

    pub fn check_level(&self, k: usize) -> Result<()> {
        if k > self.dim {
            return Err(Error::LevelOutOfRange {
                level: k,
                dim: self.dim,
            });
        }
        Ok(())
    }

    /// The coboundary `delta_k`, mapping k-cochains to (k+1)-cochains.
    pub fn coboundary(&self, k: usize) -> Result<&IntCsr> {
        self.delta.get(k).ok_or(Error::LevelOutOfRange {
            level: k,
            dim: self.dim,
        })
    }

    pub fn coboundaries(&self) -> &[IntCsr] {
        &self.delta
    }

    #[cfg(test)]
    pub(crate) fn coboundary_mut(&mut self, k: usize) -> &mut IntCsr {
        &mut self.delta[k]
    }

    pub fn verify_exact(&self) -> ExactnessReport {
        let max_abs = (0..self.dim.saturating_sub(1))
            .map(|k| {
                self.delta[k + 1]
                    .matmul(&self.delta[k])
                    .expect("coboundary shapes chain")
                    .max_abs()
            })
            .collect();
        ExactnessReport { max_abs }
    }

    /// Marks k-cells lying on the topological boundary.
    ///
    /// A (dim-1)-cell is on the boundary when it has exactly one coface;
    /// lower cells are on the boundary when they are faces of a boundary
    /// cell one level up. Top cells are marked when they touch the boundary.
    pub fn boundary_mask(&self, k: usize) -> Result<Vec<bool>> {
        self.check_level(k)?;
        if self.dim == 0 {
            return Ok(vec![false; self.counts[0]]);
        }
        let top = self.dim - 1;
        let mut mask: Vec<bool> = self.delta[top]
            .col_counts()
            .into_iter()
            .map(|n| n == 1)
            .collect();
        if k == self.dim {
            let d = &self.delta[top];
            return Ok((0..self.counts[self.dim])
                .map(|r| d.row(r).any(|(c, _)| mask[c]))
                .collect());
        }
        let mut level = top;
        while level > k {
            let d = &self.delta[level - 1];
            let mut lower = vec![false; self.counts[level - 1]];
            for (r, &on) in mask.iter().enumerate() {
                if on {
                    for (c, _) in d.row(r) {
                        lower[c] = true;
                    }
                }
            }
            mask = lower;
            level -= 1;
        }
        Ok(mask)
    }

    /// Neighbouring top cells (sharing a (dim-1)-cell), sorted.
    pub fn top_adjacency(&self) -> Vec<Vec<usize>> {
        let n = self.counts[self.dim];
        let mut adj = vec![Vec::new(); n];
        if self.dim == 0 {
            return adj;
        }
        let faces = self.delta[self.dim - 1].transpose();
        for f in 0..faces.rows() {
            let cells: Vec<usize> = faces.row(f).map(|(c, _)| c).collect();
            for &a in &cells {
                for &b in &cells {
                    if a != b {
                        adj[a].push(b);
                    }
                }
            }
        }
        for list in &mut adj {
            list.sort_unstable();
            list.dedup();
        }
        adj
    }

    /// Drops top cells, e.g. to punch holes into a grid. Lower levels are kept.
    pub fn without_top_cells(&self, remove: &[usize]) -> Result<Self> {
        let n = self.counts[self.dim];
        if let Some(&bad) = remove.iter().find(|&&c| c >= n) {
            return Err(Error::InvalidArgument(format!("top cell {bad} does not exist")));
        }
        let keep: Vec<usize> = (0..n).filter(|c| !remove.contains(c)).collect();
        let mut delta = self.delta.clone();
        if self.dim > 0 {
            delta[self.dim - 1] = delta[self.dim - 1].select_rows(&keep);
        }
        let mut counts = self.counts.clone();
        counts[self.dim] = keep.len();
        let pick = |v: &Vec<[f64; 2]>| -> Vec<[f64; 2]> {
            if v.is_empty() {
                Vec::new()
            } else {
                keep.iter().map(|&c| v[c]).collect()
            }
        };
        let centroids = pick(&self.centroids);
        let volumes = if self.volumes.is_empty() {
            Vec::new()
        } else {
            keep.iter().map(|&c| self.volumes[c]).collect()
        };
        Self::from_parts(self.dim, counts, delta, self.positions.clone())?
            .with_cell_geometry(centroids, volumes)
    }

    /// Betti numbers `dim ker(delta_k) - rank(delta_{k-1})`, computed with
    /// exact modular arithmetic.
    pub fn betti_numbers(&self) -> Vec<usize> {
        let ranks: Vec<usize> = self.delta.iter().map(modular_rank).collect();
        (0..=self.dim)
            .map(|k| {
                let out = if k < self.dim { ranks[k] } else { 0 };
                let inc = if k > 0 { ranks[k - 1] } else { 0 };
                self.counts[k] - out - inc
            })
            .collect()
    }
}

const RANK_PRIME: i64 = 2_147_483_647;

fn mod_pow(mut b: i64, mut e: i64) -> i64 {
    let mut r = 1i64;
    b = b.rem_euclid(RANK_PRIME);
    while e > 0 {
        if e & 1 == 1 {
            r = r * b % RANK_PRIME;
        }
        b = b * b % RANK_PRIME;
        e >>= 1;
    }
    r
}

/// Rank over GF(p). Incidence matrices of these complexes are torsion-free,
/// so this equals the rank over the rationals.
fn modular_rank(m: &IntCsr) -> usize {
    let (rows, cols) = (m.rows(), m.cols());
    let mut a = vec![vec![0i64; cols]; rows];
    for (r, c, v) in m.triplets() {
        a[r][c] = v.rem_euclid(RANK_PRIME);
    }
    let mut rank = 0;
    for col in 0..cols {
        let Some(p) = (rank..rows).find(|&r| a[r][col] != 0) else {
            continue;
        };
        a.swap(rank, p);
        let inv = mod_pow(a[rank][col], RANK_PRIME - 2);
        for r in 0..rows {
            if r != rank && a[r][col] != 0 {
                let f = a[r][col] * inv % RANK_PRIME;
                for c in col..cols {
                    a[r][c] = (a[r][c] - f * a[rank][c]).rem_euclid(RANK_PRIME);
                }
            }
        }
        rank += 1;
        if rank == rows {
            break;
        }
    }
    rank
}

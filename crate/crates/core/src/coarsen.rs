//! Partitioning of the fine complex and construction of the coarse complex.
//!
//! Coarse 2-cells are partitions, coarse 1-cells are maximal chains of fine
//! edges separating the same pair of partitions (or a partition and the
//! exterior), and coarse 0-cells are the fine nodes where such chains meet.

use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::complex::{ChainComplex, Cochain};
use crate::error::{check_len, Error, Result};
use crate::sparse::IntCsr;

/// Partition labels together with the signed inclusions `iota[k]`
/// (fine k-cells x coarse k-cells).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(into = "MapRepr", try_from = "MapRepr")]
pub struct CoarseMap {
    labels: Vec<usize>,
    iota: Vec<IntCsr>,
    sizes: Vec<Vec<usize>>,
}

#[derive(Clone, Serialize, Deserialize)]
struct MapRepr {
    labels: Vec<usize>,
    iota: Vec<IntCsr>,
}

impl From<CoarseMap> for MapRepr {
    fn from(m: CoarseMap) -> Self {
        Self { labels: m.labels, iota: m.iota }
    }
}

impl TryFrom<MapRepr> for CoarseMap {
    type Error = Error;

    fn try_from(r: MapRepr) -> Result<Self> {
        Self::from_parts(r.labels, r.iota)
    }
}

impl CoarseMap {
    pub fn from_parts(labels: Vec<usize>, iota: Vec<IntCsr>) -> Result<Self> {
        let sizes = iota.iter().map(|m| m.col_counts()).collect::<Vec<_>>();
        for (k, s) in sizes.iter().enumerate() {
            if let Some(c) = s.iter().position(|&n| n == 0) {
                return Err(Error::InvalidArgument(format!(
                    "coarse {k}-cell {c} has no fine constituents"
                )));
            }
        }
        Ok(Self { labels, iota, sizes })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn n_parts(&self) -> usize {
        self.iota.last().map_or(0, |m| m.cols())
    }

    pub fn iota(&self, k: usize) -> Result<&IntCsr> {
        self.iota.get(k).ok_or(Error::LevelOutOfRange {
            level: k,
            dim: self.iota.len().saturating_sub(1),
        })
    }

    pub fn iotas(&self) -> &[IntCsr] {
        &self.iota
    }

    /// Number of fine constituents of each coarse k-cell (the diagonal of `iotaᵀ iota`).
    pub fn constituent_counts(&self, k: usize) -> Result<&[usize]> {
        self.iota(k)?;
        Ok(&self.sizes[k])
    }

    /// Signed sums over constituents, `iotaᵀ x`.
    pub fn restrict(&self, fine: &Cochain) -> Result<Cochain> {
        let m = self.iota(fine.level)?;
        check_len(m.rows(), fine.len(), "fine cochain for restriction")?;
        Ok(Cochain::new(fine.level, m.tr_mul_vec(&fine.values)))
    }

    /// Least-squares projection `(iotaᵀ iota)^{-1} iotaᵀ x`.
    pub fn project(&self, fine: &Cochain) -> Result<Cochain> {
        let mut c = self.restrict(fine)?;
        for (v, &n) in c.values.iter_mut().zip(&self.sizes[fine.level]) {
            *v /= n as f64;
        }
        Ok(c)
    }

    /// `iota x`: spreads coarse values onto their constituents.
    pub fn prolong(&self, coarse: &Cochain) -> Result<Cochain> {
        let m = self.iota(coarse.level)?;
        check_len(m.cols(), coarse.len(), "coarse cochain for prolongation")?;
        Ok(Cochain::new(coarse.level, m.mul_vec(&coarse.values)))
    }
}

/// Splits `n` items into `p` contiguous runs whose lengths differ by at most
/// one, longer runs first.
fn balanced_runs(n: usize, p: usize) -> Vec<usize> {
    let (base, rem) = (n / p, n % p);
    let mut owner = Vec::with_capacity(n);
    for b in 0..p {
        let len = base + usize::from(b < rem);
        owner.extend(std::iter::repeat_n(b, len));
    }
    owner
}

/// Rectangular `px` x `py` tiling of a Cartesian complex.
pub fn block_partition(c: &ChainComplex, px: usize, py: usize) -> Result<Vec<usize>> {
    let g = c
        .grid()
        .ok_or_else(|| Error::Partition("block partitioning needs a Cartesian complex".into()))?;
    if px == 0 || py == 0 || px > g.nx || py > g.ny {
        return Err(Error::Partition(format!(
            "cannot tile a {}x{} grid with {px}x{py} blocks",
            g.nx, g.ny
        )));
    }
    if c.count(2) != g.nx * g.ny {
        return Err(Error::Partition("complex no longer matches its grid".into()));
    }
    let bx = balanced_runs(g.nx, px);
    let by = balanced_runs(g.ny, py);
    let mut labels = vec![0; c.count(2)];
    for j in 0..g.ny {
        for i in 0..g.nx {
            labels[g.cell(i, j)] = by[j] * px + bx[i];
        }
    }
    Ok(labels)
}

fn bfs_hops(adj: &[Vec<usize>], sources: &[usize]) -> Vec<usize> {
    let mut dist = vec![usize::MAX; adj.len()];
    let mut queue = VecDeque::new();
    for &s in sources {
        dist[s] = 0;
        queue.push_back(s);
    }
    while let Some(v) = queue.pop_front() {
        for &w in &adj[v] {
            if dist[w] == usize::MAX {
                dist[w] = dist[v] + 1;
                queue.push_back(w);
            }
        }
    }
    dist
}

fn components(adj: &[Vec<usize>], member: impl Fn(usize) -> bool) -> usize {
    let mut seen = vec![false; adj.len()];
    let mut n = 0;
    for s in 0..adj.len() {
        if seen[s] || !member(s) {
            continue;
        }
        n += 1;
        seen[s] = true;
        let mut stack = vec![s];
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] && member(w) {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
    }
    n
}

/// Connected partitions grown breadth-first from spread-out seeds.
///
/// The first seed is drawn from `seed`; each further seed is the cell
/// farthest (in dual-graph hops) from the seeds so far. Partitions then claim
/// cells one at a time, always the currently smallest partition first, and a
/// final pass moves boundary cells from larger to smaller neighbours while
/// keeping every partition connected.
pub fn greedy_partition(c: &ChainComplex, n_parts: usize, seed: u64) -> Result<Vec<usize>> {
    let n = c.count(c.dim());
    if n_parts == 0 || n_parts > n {
        return Err(Error::Partition(format!("cannot split {n} cells into {n_parts} parts")));
    }
    let adj = c.top_adjacency();
    let n_comp = components(&adj, |_| true);
    if n_parts < n_comp {
        return Err(Error::Partition(format!(
            "complex has {n_comp} components, more than the {n_parts} requested parts"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut seeds = vec![rng.random_range(0..n)];
    while seeds.len() < n_parts {
        let dist = bfs_hops(&adj, &seeds);
        let next = (0..n)
            .filter(|v| !seeds.contains(v))
            .max_by_key(|&v| (dist[v], std::cmp::Reverse(v)))
            .expect("fewer seeds than cells");
        seeds.push(next);
    }

    const FREE: usize = usize::MAX;
    let mut labels = vec![FREE; n];
    let mut sizes = vec![1usize; n_parts];
    let mut queues: Vec<VecDeque<usize>> = Vec::with_capacity(n_parts);
    for (p, &s) in seeds.iter().enumerate() {
        labels[s] = p;
        queues.push(adj[s].iter().copied().collect());
    }
    let mut claimed = n_parts;
    while claimed < n {
        let mut order: Vec<usize> = (0..n_parts).filter(|&p| !queues[p].is_empty()).collect();
        if order.is_empty() {
            break;
        }
        order.sort_by_key(|&p| (sizes[p], p));
        let mut progressed = false;
        for p in order {
            while let Some(v) = queues[p].pop_front() {
                if labels[v] == FREE {
                    labels[v] = p;
                    sizes[p] += 1;
                    claimed += 1;
                    queues[p].extend(adj[v].iter().copied().filter(|&w| labels[w] == FREE));
                    progressed = true;
                    break;
                }
            }
            if progressed {
                break;
            }
        }
        if !progressed {
            break;
        }
    }
    if claimed < n {
        return Err(Error::Partition("breadth-first growth left cells unclaimed".into()));
    }

    rebalance(&adj, &mut labels, &mut sizes);
    Ok(labels)
}

fn stays_connected(adj: &[Vec<usize>], labels: &[usize], part: usize, removed: usize) -> bool {
    components(adj, |v| v != removed && labels[v] == part) == 1
}

fn rebalance(adj: &[Vec<usize>], labels: &mut [usize], sizes: &mut [usize]) {
    let n = labels.len();
    for _ in 0..4 * n {
        let mut parts: Vec<usize> = (0..sizes.len()).collect();
        parts.sort_by_key(|&p| (std::cmp::Reverse(sizes[p]), p));
        let mut moved = false;
        'search: for &p in &parts {
            if sizes[p] <= 1 {
                continue;
            }
            for v in (0..n).filter(|&v| labels[v] == p) {
                let target = adj[v]
                    .iter()
                    .map(|&w| labels[w])
                    .filter(|&q| q != p && sizes[q] + 1 < sizes[p])
                    .min_by_key(|&q| (sizes[q], q));
                if let Some(q) = target {
                    if stays_connected(adj, labels, p, v) {
                        labels[v] = q;
                        sizes[p] -= 1;
                        sizes[q] += 1;
                        moved = true;
                        break 'search;
                    }
                }
            }
        }
        if !moved {
            return;
        }
    }
}

/// Checks labels and returns the partition count.
fn check_labels(c: &ChainComplex, labels: &[usize]) -> Result<usize> {
    check_len(c.count(c.dim()), labels.len(), "partition labels")?;
    let n_parts = labels.iter().max().map_or(0, |&m| m + 1);
    let adj = c.top_adjacency();
    for p in 0..n_parts {
        match components(&adj, |v| labels[v] == p) {
            0 => return Err(Error::Partition(format!("partition {p} is empty"))),
            1 => {}
            k => return Err(Error::Partition(format!("partition {p} has {k} disconnected pieces"))),
        }
    }
    Ok(n_parts)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
enum Side {
    Interface(usize, usize),
    Boundary(usize),
}

/// Builds the coarse complex induced by `labels` on a 2D complex.
pub fn build_coarse(c: &ChainComplex, labels: &[usize]) -> Result<(ChainComplex, CoarseMap)> {
    if c.dim() != 2 {
        return Err(Error::InvalidArgument("coarsening is implemented for 2D complexes".into()));
    }
    if c.positions().len() != c.count(0) {
        return Err(Error::InvalidArgument("coarsening needs node positions".into()));
    }
    let n_parts = check_labels(c, labels)?;
    let d0 = c.coboundary(0)?;
    let d1 = c.coboundary(1)?;
    let (n_nodes, n_edges) = (c.count(0), c.count(1));

    // Classify fine edges by the partitions on either side.
    let cofaces = d1.transpose();
    let mut side: Vec<Option<Side>> = vec![None; n_edges];
    for (e, s) in side.iter_mut().enumerate() {
        let parts: Vec<usize> = cofaces.row(e).map(|(cell, _)| labels[cell]).collect();
        *s = match parts.as_slice() {
            [p] => Some(Side::Boundary(*p)),
            [p, q] if p != q => Some(Side::Interface((*p).min(*q), (*p).max(*q))),
            _ => None,
        };
    }

    let mut ends = vec![(0usize, 0usize); n_edges];
    for (e, end) in ends.iter_mut().enumerate() {
        for (v, s) in d0.row(e) {
            if s < 0 {
                end.0 = v;
            } else {
                end.1 = v;
            }
        }
    }
    let mut incident: Vec<Vec<usize>> = vec![Vec::new(); n_nodes];
    for e in 0..n_edges {
        if side[e].is_some() {
            incident[ends[e].0].push(e);
            incident[ends[e].1].push(e);
        }
    }

    let pos = c.positions();
    let other = |e: usize, v: usize| if ends[e].0 == v { ends[e].1 } else { ends[e].0 };
    let is_vertex: Vec<bool> = (0..n_nodes)
        .map(|v| match incident[v].as_slice() {
            [] => false,
            [a, b] => {
                if side[*a] != side[*b] {
                    return true;
                }
                if matches!(side[*a], Some(Side::Boundary(_))) {
                    let (pa, pb, pv) = (pos[other(*a, v)], pos[other(*b, v)], pos[v]);
                    let ta = [pa[0] - pv[0], pa[1] - pv[1]];
                    let tb = [pb[0] - pv[0], pb[1] - pv[1]];
                    let cross = ta[0] * tb[1] - ta[1] * tb[0];
                    let scale = ta[0].hypot(ta[1]) * tb[0].hypot(tb[1]);
                    return cross.abs() > 1e-9 * scale;
                }
                false
            }
            _ => true,
        })
        .collect();
    let vertices: Vec<usize> = (0..n_nodes).filter(|&v| is_vertex[v]).collect();
    let mut vertex_id = vec![usize::MAX; n_nodes];
    for (i, &v) in vertices.iter().enumerate() {
        vertex_id[v] = i;
    }

    // Walk chains of skeleton edges between vertices, in order of their
    // smallest fine edge.
    let mut chain_of = vec![usize::MAX; n_edges];
    let mut chains: Vec<Vec<(usize, i64)>> = Vec::new();
    for e0 in 0..n_edges {
        if side[e0].is_none() || chain_of[e0] != usize::MAX {
            continue;
        }
        let id = chains.len();
        chain_of[e0] = id;
        // forward from the head of e0
        let mut fwd = vec![(e0, 1i64)];
        let mut at = ends[e0].1;
        let mut prev = e0;
        while !is_vertex[at] {
            let next = *incident[at].iter().find(|&&e| e != prev).expect("degree-two node");
            if chain_of[next] != usize::MAX {
                break; // closed loop
            }
            chain_of[next] = id;
            let sign = if ends[next].0 == at { 1 } else { -1 };
            fwd.push((next, sign));
            at = other(next, at);
            prev = next;
        }
        // backward from the tail of e0
        let mut bwd = Vec::new();
        let mut at = ends[e0].0;
        let mut prev = e0;
        while !is_vertex[at] {
            let next = *incident[at].iter().find(|&&e| e != prev).expect("degree-two node");
            if chain_of[next] != usize::MAX {
                break;
            }
            chain_of[next] = id;
            let sign = if ends[next].1 == at { 1 } else { -1 };
            bwd.push((next, sign));
            at = other(next, at);
            prev = next;
        }
        bwd.reverse();
        bwd.extend(fwd);
        chains.push(bwd);
    }

    let mut t0 = Vec::with_capacity(vertices.len());
    for (i, &v) in vertices.iter().enumerate() {
        t0.push((v, i, 1));
    }
    let mut t1 = Vec::new();
    for (id, chain) in chains.iter().enumerate() {
        // e0 (smallest index) enters with sign +1 by construction
        for &(e, s) in chain {
            t1.push((e, id, s));
        }
    }
    let t2: Vec<_> = labels.iter().enumerate().map(|(cell, &p)| (cell, p, 1)).collect();
    let iota = vec![
        IntCsr::from_triplets(n_nodes, vertices.len(), &t0)?,
        IntCsr::from_triplets(n_edges, chains.len(), &t1)?,
        IntCsr::from_triplets(c.count(2), n_parts, &t2)?,
    ];
    let map = CoarseMap::from_parts(labels.to_vec(), iota)?;

    let mut delta = Vec::with_capacity(2);
    for k in 0..2 {
        let raw = map.iota[k + 1]
            .transpose()
            .matmul(c.coboundary(k)?)?
            .matmul(&map.iota[k])?;
        let counts = &map.sizes[k];
        let mut entries = Vec::with_capacity(raw.nnz());
        for (r, col, v) in raw.triplets() {
            let n = counts[col] as i64;
            if v.abs() != n {
                return Err(Error::Orientation {
                    level: k,
                    cell: col,
                    sum: v.abs(),
                    count: n,
                });
            }
            entries.push((r, col, v.signum()));
        }
        delta.push(IntCsr::from_triplets(raw.rows(), raw.cols(), &entries)?);
    }

    let positions = vertices.iter().map(|&v| pos[v]).collect();
    let (mut centroids, mut volumes) = (Vec::new(), Vec::new());
    if c.volumes().len() == c.count(2) && c.centroids().len() == c.count(2) {
        centroids = vec![[0.0; 2]; n_parts];
        volumes = vec![0.0; n_parts];
        for (cell, &p) in labels.iter().enumerate() {
            let (x, a) = (c.centroids()[cell], c.volumes()[cell]);
            centroids[p][0] += a * x[0];
            centroids[p][1] += a * x[1];
            volumes[p] += a;
        }
        for (x, &a) in centroids.iter_mut().zip(&volumes) {
            x[0] /= a;
            x[1] /= a;
        }
    }
    let coarse = ChainComplex::from_parts(
        2,
        vec![vertices.len(), chains.len(), n_parts],
        delta,
        positions,
    )?
    .with_cell_geometry(centroids, volumes)?;
    Ok((coarse, map))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoarseReport {
    /// Largest entry of the coarse `delta[k+1] delta[k]`.
    pub exactness: i64,
    /// Largest deviation of `pi_k iota_k` from the identity.
    pub projection: f64,
    /// Commutation defect on cochains that are constant on coarse cells.
    pub commute_image: f64,
    /// Commutation defect on random fine cochains, reported only.
    pub commute_random: f64,
}

impl CoarseReport {
    pub fn pass(&self) -> bool {
        self.exactness == 0 && self.projection < 1e-12 && self.commute_image < 1e-12
    }
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Checks exactness, `pi iota = I`, and `delta_coarse iotaᵀ = iotaᵀ delta_fine`.
pub fn verify_coarse(coarse: &ChainComplex, map: &CoarseMap, fine: &ChainComplex) -> Result<CoarseReport> {
    let exactness = coarse.verify_exact().max_abs.into_iter().max().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut projection = 0.0f64;
    let mut commute_image = 0.0f64;
    let mut commute_random = 0.0f64;
    for k in 0..=coarse.dim() {
        for _ in 0..3 {
            let x: Vec<f64> = (0..coarse.count(k)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let x = Cochain::new(k, x);
            let back = map.project(&map.prolong(&x)?)?;
            projection = projection.max(max_diff(&back.values, &x.values));
            if k == coarse.dim() {
                continue;
            }
            let dc = coarse.coboundary(k)?;
            let df = fine.coboundary(k)?;
            let lifted = map.prolong(&x)?;
            let lhs = dc.mul_vec(&map.restrict(&lifted)?.values);
            let rhs = map.restrict(&Cochain::new(k + 1, df.mul_vec(&lifted.values)))?;
            commute_image = commute_image.max(max_diff(&lhs, &rhs.values));

            let r: Vec<f64> = (0..fine.count(k)).map(|_| rng.random_range(-1.0..1.0)).collect();
            let r = Cochain::new(k, r);
            let lhs = dc.mul_vec(&map.restrict(&r)?.values);
            let rhs = map.restrict(&Cochain::new(k + 1, df.mul_vec(&r.values)))?;
            commute_random = commute_random.max(max_diff(&lhs, &rhs.values));
        }
    }
    Ok(CoarseReport {
        exactness,
        projection,
        commute_image,
        commute_random,
    })
}

//! Point sets and the deterministic geometric kernels over them: farthest
//! point sampling, k-nearest-neighbor queries, and inverse-distance
//! interpolation.
//!
//! Ties are always broken by the lowest point index, so every kernel returns
//! bit-identical results for identical inputs.

use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_err, Error, Result};
use crate::scalar::Scalar;

/// Per-cloud or per-point class ids.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum Labels {
    #[default]
    None,
    Cloud(u32),
    Points(Vec<u32>),
}

/// `N` positions in 3D plus `N × c_in` optional per-point features.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud<S> {
    pub positions: Vec<[S; 3]>,
    /// Row-major `N × c_in`; empty when `c_in == 0`.
    pub features: Vec<S>,
    pub c_in: usize,
    pub labels: Labels,
}

impl<S: Scalar> PointCloud<S> {
    pub fn new(positions: Vec<[S; 3]>, features: Vec<S>, c_in: usize) -> Result<Self> {
        let cloud = PointCloud {
            positions,
            features,
            c_in,
            labels: Labels::None,
        };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn from_positions(positions: Vec<[S; 3]>) -> Result<Self> {
        Self::new(positions, Vec::new(), 0)
    }

    pub fn with_labels(mut self, labels: Labels) -> Result<Self> {
        if let Labels::Points(l) = &labels {
            if l.len() != self.len() {
                return Err(shape_err!("{} point labels for {} points", l.len(), self.len()));
            }
        }
        self.labels = labels;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn feature(&self, i: usize) -> &[S] {
        &self.features[i * self.c_in..(i + 1) * self.c_in]
    }

    pub fn validate(&self) -> Result<()> {
        if self.positions.is_empty() {
            return Err(Error::EmptyInput("point cloud"));
        }
        if self.features.len() != self.positions.len() * self.c_in {
            return Err(shape_err!(
                "feature buffer has {} values, expected {} × {}",
                self.features.len(),
                self.positions.len(),
                self.c_in
            ));
        }
        check_finite(&self.positions, "point positions")?;
        if !self.features.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("point features".into()));
        }
        Ok(())
    }

    /// Sub-cloud of the given rows, labels included.
    pub fn select(&self, ids: &[usize]) -> PointCloud<S> {
        let positions = ids.iter().map(|&i| self.positions[i]).collect();
        let mut features = Vec::with_capacity(ids.len() * self.c_in);
        for &i in ids {
            features.extend_from_slice(self.feature(i));
        }
        let labels = match &self.labels {
            Labels::Points(l) => Labels::Points(ids.iter().map(|&i| l[i]).collect()),
            other => other.clone(),
        };
        PointCloud {
            positions,
            features,
            c_in: self.c_in,
            labels,
        }
    }
}

pub(crate) fn check_finite<S: Scalar>(pts: &[[S; 3]], what: &str) -> Result<()> {
    if pts.iter().all(|p| p.iter().all(|v| v.is_finite())) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.into()))
    }
}

#[inline]
pub fn dist2<S: Scalar>(a: &[S; 3], b: &[S; 3]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// k nearest source points for each of `M` query positions.
#[derive(Debug, Clone, PartialEq)]
pub struct Neighbors<S> {
    pub k: usize,
    /// `M × k` source indices, ascending by (distance, index).
    pub ids: Vec<usize>,
    /// Squared distances matching `ids`.
    pub dist2: Vec<S>,
}

impl<S> Neighbors<S> {
    pub fn len(&self) -> usize {
        if self.k == 0 {
            0
        } else {
            self.ids.len() / self.k
        }
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.ids[i * self.k..(i + 1) * self.k]
    }
}

/// Centers sampled from a cloud and their neighborhoods in the same cloud.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborIndex {
    pub center_ids: Vec<usize>,
    pub k: usize,
    /// `center_ids.len() × k` indices into the source cloud.
    pub neighbor_ids: Vec<usize>,
}

impl NeighborIndex {
    pub fn row(&self, i: usize) -> &[usize] {
        &self.neighbor_ids[i * self.k..(i + 1) * self.k]
    }
}

/// Farthest point sampling from `start`. The i-th pick maximizes the minimum
/// squared distance to everything picked before it; ties go to the lowest
/// index. Already-picked points are never picked again, so the result is
/// `n_samples` distinct indices even with duplicate positions.
pub fn farthest_point_sample<S: Scalar>(positions: &[[S; 3]], n_samples: usize, start: usize) -> Result<Vec<usize>> {
    let n = positions.len();
    if n == 0 {
        return Err(Error::EmptyInput("point cloud"));
    }
    if n_samples > n {
        return Err(Error::InsufficientPoints {
            needed: n_samples,
            available: n,
        });
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("n_samples must be at least 1".into()));
    }
    if start >= n {
        return Err(Error::InvalidArgument(alloc::format!(
            "start index {start} out of range for {n} points"
        )));
    }
    check_finite(positions, "point positions")?;

    let mut picked = Vec::with_capacity(n_samples);
    let mut taken = vec![false; n];
    let mut min_d = vec![S::infinity(); n];
    let mut current = start;
    loop {
        picked.push(current);
        taken[current] = true;
        if picked.len() == n_samples {
            break;
        }
        let p = positions[current];
        let mut best: Option<(S, usize)> = None;
        for (i, q) in positions.iter().enumerate() {
            if taken[i] {
                continue;
            }
            let d = dist2(&p, q);
            if d < min_d[i] {
                min_d[i] = d;
            }
            match best {
                Some((bd, _)) if min_d[i] <= bd => {}
                _ => best = Some((min_d[i], i)),
            }
        }
        current = best.map(|(_, i)| i).expect("unpicked point remains");
    }
    Ok(picked)
}

/// Brute-force kNN: every query against every source point.
pub fn knn_brute<S: Scalar>(source: &[[S; 3]], queries: &[[S; 3]], k: usize) -> Result<Neighbors<S>> {
    validate_knn(source, queries, k)?;
    let mut ids = Vec::with_capacity(queries.len() * k);
    let mut d2 = Vec::with_capacity(queries.len() * k);
    let mut scratch: Vec<(S, usize)> = Vec::with_capacity(source.len());
    for q in queries {
        scratch.clear();
        scratch.extend(source.iter().enumerate().map(|(i, p)| (dist2(q, p), i)));
        push_sorted_prefix(&mut scratch, k, &mut ids, &mut d2);
    }
    Ok(Neighbors { k, ids, dist2: d2 })
}

fn validate_knn<S: Scalar>(source: &[[S; 3]], queries: &[[S; 3]], k: usize) -> Result<()> {
    if source.is_empty() {
        return Err(Error::EmptyInput("point cloud"));
    }
    if queries.is_empty() {
        return Err(Error::EmptyInput("query centers"));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    check_finite(source, "point positions")?;
    check_finite(queries, "query centers")
}

fn cmp_candidates<S: Scalar>(a: &(S, usize), b: &(S, usize)) -> core::cmp::Ordering {
    a.0.partial_cmp(&b.0)
        .unwrap_or(core::cmp::Ordering::Equal)
        .then(a.1.cmp(&b.1))
}

/// Sorts candidates by (distance, index) and appends the first `k`, padding
/// with the nearest one when fewer than `k` exist.
fn push_sorted_prefix<S: Scalar>(cands: &mut [(S, usize)], k: usize, ids: &mut Vec<usize>, d2: &mut Vec<S>) {
    if cands.len() > k {
        cands.select_nth_unstable_by(k - 1, cmp_candidates);
        cands[..k].sort_unstable_by(cmp_candidates);
    } else {
        cands.sort_unstable_by(cmp_candidates);
    }
    let take = k.min(cands.len());
    for &(d, i) in &cands[..take] {
        ids.push(i);
        d2.push(d);
    }
    for _ in take..k {
        ids.push(cands[0].1);
        d2.push(cands[0].0);
    }
}

/// Above this many distance evaluations the uniform-grid search is used.
const GRID_THRESHOLD: usize = 1 << 16;

/// kNN query, ascending by (distance, index); when the source has fewer than
/// `k` points the nearest one is repeated. Large instances go through a
/// uniform grid whose results are identical to [`knn_brute`].
pub fn knn_query<S: Scalar>(source: &[[S; 3]], queries: &[[S; 3]], k: usize) -> Result<Neighbors<S>> {
    if source.len() * queries.len() <= GRID_THRESHOLD || source.len() <= k {
        return knn_brute(source, queries, k);
    }
    validate_knn(source, queries, k)?;
    Ok(UniformGrid::build(source, k).query_all(source, queries, k))
}

/// Bucket grid over the source bounding box for exact kNN.
struct UniformGrid {
    origin: [f64; 3],
    cell: f64,
    dims: [usize; 3],
    starts: Vec<usize>,
    items: Vec<usize>,
}

impl UniformGrid {
    fn build<S: Scalar>(source: &[[S; 3]], k: usize) -> Self {
        let mut lo = [f64::INFINITY; 3];
        let mut hi = [f64::NEG_INFINITY; 3];
        for p in source {
            for a in 0..3 {
                let v = p[a].to_f64();
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
        let ext: [f64; 3] = core::array::from_fn(|a| (hi[a] - lo[a]).max(1e-12));
        let volume = ext[0] * ext[1] * ext[2];
        // about k points per cell
        let target_cells = (source.len() as f64 / k.max(1) as f64).max(1.0);
        let mut cell = num_traits::Float::cbrt(volume / target_cells);
        let max_ext = ext.iter().cloned().fold(0.0, f64::max);
        if !(cell.is_finite() && cell > 0.0) || cell < max_ext * 1e-3 {
            cell = max_ext / num_traits::Float::cbrt(target_cells).max(1.0);
        }
        let dims: [usize; 3] = core::array::from_fn(|a| ((ext[a] / cell) as usize + 1).min(256));
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0usize; ncell + 1];
        let cell_of: Vec<usize> = source
            .iter()
            .map(|p| {
                let c = Self::coords(&lo, cell, &dims, p).map(|v| v as usize);
                (c[2] * dims[1] + c[1]) * dims[0] + c[0]
            })
            .collect();
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..ncell {
            counts[i + 1] += counts[i];
        }
        let starts = counts.clone();
        let mut fill = counts;
        let mut items = vec![0usize; source.len()];
        for (i, &c) in cell_of.iter().enumerate() {
            items[fill[c]] = i;
            fill[c] += 1;
        }
        UniformGrid {
            origin: lo,
            cell,
            dims,
            starts,
            items,
        }
    }

    fn coords<S: Scalar>(lo: &[f64; 3], cell: f64, dims: &[usize; 3], p: &[S; 3]) -> [isize; 3] {
        core::array::from_fn(|a| {
            let c = num_traits::Float::floor((p[a].to_f64() - lo[a]) / cell) as isize;
            c.clamp(0, dims[a] as isize - 1)
        })
    }

    fn query_all<S: Scalar>(&self, source: &[[S; 3]], queries: &[[S; 3]], k: usize) -> Neighbors<S> {
        let mut ids = Vec::with_capacity(queries.len() * k);
        let mut d2 = Vec::with_capacity(queries.len() * k);
        let mut cands: Vec<(S, usize)> = Vec::new();
        for q in queries {
            let qc: [isize; 3] = core::array::from_fn(|a| {
                num_traits::Float::floor((q[a].to_f64() - self.origin[a]) / self.cell) as isize
            });
            // ring at which every cell has been visited
            let max_ring = (0..3)
                .map(|a| qc[a].abs().max((self.dims[a] as isize - 1 - qc[a]).abs()))
                .max()
                .unwrap_or(0);
            cands.clear();
            let mut ring = 0isize;
            loop {
                self.visit_shell(qc, ring, |i| cands.push((dist2(q, &source[i]), i)));
                if cands.len() >= k {
                    // Points outside the searched block are at least `bound` away.
                    let bound = self.outside_bound(q, qc, ring);
                    let kth = kth_smallest(&mut cands, k).to_f64();
                    if kth * (1.0 + 1e-5) + 1e-30 < bound * bound {
                        break;
                    }
                }
                if ring >= max_ring {
                    break;
                }
                ring += 1;
            }
            push_sorted_prefix(&mut cands, k, &mut ids, &mut d2);
        }
        Neighbors { k, ids, dist2: d2 }
    }

    /// Visits every source point in cells at Chebyshev ring `ring` around `qc`.
    fn visit_shell<F: FnMut(usize)>(&self, qc: [isize; 3], ring: isize, mut f: F) {
        let d = self.dims.map(|v| v as isize);
        for z in qc[2] - ring..=qc[2] + ring {
            if z < 0 || z >= d[2] {
                continue;
            }
            for y in qc[1] - ring..=qc[1] + ring {
                if y < 0 || y >= d[1] {
                    continue;
                }
                let on_face_zy = (z - qc[2]).abs() == ring || (y - qc[1]).abs() == ring;
                let mut x = qc[0] - ring;
                while x <= qc[0] + ring {
                    if x >= 0 && x < d[0] {
                        let c = ((z * d[1] + y) * d[0] + x) as usize;
                        for &i in &self.items[self.starts[c]..self.starts[c + 1]] {
                            f(i);
                        }
                    }
                    // interior rows only need the two end cells of the shell
                    x += if on_face_zy || ring == 0 { 1 } else { 2 * ring };
                }
            }
        }
    }

    /// Distance from `q` to the nearest face of the block of cells within
    /// `ring` of `qc`. Faces on the grid boundary do not bound anything.
    fn outside_bound<S: Scalar>(&self, q: &[S; 3], qc: [isize; 3], ring: isize) -> f64 {
        let mut bound = f64::INFINITY;
        for a in 0..3 {
            let v = q[a].to_f64();
            let lo_cell = qc[a] - ring;
            let hi_cell = qc[a] + ring + 1;
            if lo_cell > 0 {
                let face = self.origin[a] + lo_cell as f64 * self.cell;
                bound = bound.min((v - face).max(0.0));
            }
            if hi_cell < self.dims[a] as isize {
                let face = self.origin[a] + hi_cell as f64 * self.cell;
                bound = bound.min((face - v).max(0.0));
            }
        }
        bound
    }
}

fn kth_smallest<S: Scalar>(cands: &mut [(S, usize)], k: usize) -> S {
    cands.select_nth_unstable_by(k - 1, cmp_candidates);
    cands[k - 1].0
}

/// FPS centers plus their kNN neighborhoods within the same cloud.
pub fn group<S: Scalar>(positions: &[[S; 3]], n_centers: usize, k: usize, start: usize) -> Result<NeighborIndex> {
    let center_ids = farthest_point_sample(positions, n_centers, start)?;
    let centers: Vec<[S; 3]> = center_ids.iter().map(|&i| positions[i]).collect();
    let nb = knn_query(positions, &centers, k)?;
    Ok(NeighborIndex {
        center_ids,
        k,
        neighbor_ids: nb.ids,
    })
}

pub const INTERP_EPS: f64 = 1e-8;

/// Linear map from `M` source rows to `Q` query rows: each query is the
/// normalized inverse-distance blend of its three nearest sources.
#[derive(Debug, Clone, PartialEq)]
pub struct Interpolation<S> {
    pub n_source: usize,
    pub ids: Vec<[usize; 3]>,
    pub weights: Vec<[S; 3]>,
}

impl<S: Scalar> Interpolation<S> {
    /// With fewer than three sources only the distinct ones contribute.
    pub fn new(source_pos: &[[S; 3]], query_pos: &[[S; 3]]) -> Result<Self> {
        let k = source_pos.len().min(3);
        let nb = knn_query(source_pos, query_pos, k.max(1))?;
        let eps = S::of(INTERP_EPS);
        let mut ids = Vec::with_capacity(query_pos.len());
        let mut weights = Vec::with_capacity(query_pos.len());
        for q in 0..query_pos.len() {
            let row: [usize; 3] = core::array::from_fn(|j| nb.ids[q * k + j.min(k - 1)]);
            let w: [S; 3] = core::array::from_fn(|j| {
                if j < k {
                    S::one() / (nb.dist2[q * k + j].sqrt() + eps)
                } else {
                    S::zero()
                }
            });
            let total = w[0] + w[1] + w[2];
            ids.push(row);
            weights.push(w.map(|v| v / total));
        }
        Ok(Interpolation {
            n_source: source_pos.len(),
            ids,
            weights,
        })
    }

    pub fn n_query(&self) -> usize {
        self.ids.len()
    }

    /// `Q × c` output from `M × c` source features.
    pub fn apply(&self, source_feat: &[S], c: usize) -> Vec<S> {
        let mut out = vec![S::zero(); self.ids.len() * c];
        for (q, (row, w)) in self.ids.iter().zip(&self.weights).enumerate() {
            let o = &mut out[q * c..(q + 1) * c];
            for j in 0..3 {
                let src = &source_feat[row[j] * c..(row[j] + 1) * c];
                for (ov, &sv) in o.iter_mut().zip(src) {
                    *ov += w[j] * sv;
                }
            }
        }
        out
    }

    /// Adjoint of [`apply`](Self::apply): `M × c` gradient from `Q × c`.
    pub fn apply_transpose(&self, d_out: &[S], c: usize) -> Vec<S> {
        let mut d_src = vec![S::zero(); self.n_source * c];
        for (q, (row, w)) in self.ids.iter().zip(&self.weights).enumerate() {
            let d = &d_out[q * c..(q + 1) * c];
            for j in 0..3 {
                let s = &mut d_src[row[j] * c..(row[j] + 1) * c];
                for (sv, &dv) in s.iter_mut().zip(d) {
                    *sv += w[j] * dv;
                }
            }
        }
        d_src
    }
}

/// Inverse-distance interpolation of `M × c` source features onto the query
/// positions using the three nearest sources, `w = 1 / (d + 1e-8)`.
pub fn interpolate_3nn<S: Scalar>(
    source_pos: &[[S; 3]],
    source_feat: &[S],
    c: usize,
    query_pos: &[[S; 3]],
) -> Result<Vec<S>> {
    if c == 0 {
        return Err(Error::InvalidArgument("feature width must be at least 1".into()));
    }
    if source_feat.len() != source_pos.len() * c {
        return Err(shape_err!(
            "{} source features for {} positions of width {}",
            source_feat.len(),
            source_pos.len(),
            c
        ));
    }
    Ok(Interpolation::new(source_pos, query_pos)?.apply(source_feat, c))
}

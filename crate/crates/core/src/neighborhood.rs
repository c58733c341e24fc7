//! Exact k-nearest-neighbour search and patch generation/fusion.

use std::collections::{BinaryHeap, HashMap};

use crate::data::PointCloudFrame;
use crate::error::{Error, Result};
use crate::parallel;
use crate::tensor::Matrix;

/// Supports at or above this size use the voxel-grid search.
const GRID_THRESHOLD: usize = 4096;

/// Per-query neighbour lists, nearest first.
#[derive(Clone, Debug, PartialEq)]
pub struct NeighborIndex {
    k: usize,
    indices: Vec<usize>,
    distances: Vec<f64>,
}

impl NeighborIndex {
    pub fn k(&self) -> usize {
        self.k
    }

    pub fn queries(&self) -> usize {
        self.indices.len().checked_div(self.k).unwrap_or(0)
    }

    pub fn indices(&self, i: usize) -> &[usize] {
        &self.indices[i * self.k..(i + 1) * self.k]
    }

    pub fn distances(&self, i: usize) -> &[f64] {
        &self.distances[i * self.k..(i + 1) * self.k]
    }

    /// Row-major `m·k` neighbour indices.
    pub fn flat_indices(&self) -> &[usize] {
        &self.indices
    }

    /// Row-major `m·k` Euclidean distances.
    pub fn flat_distances(&self) -> &[f64] {
        &self.distances
    }

    /// Keeps the first `k` columns.
    pub fn truncate(&self, k: usize) -> Self {
        assert!(k <= self.k);
        let m = self.queries();
        let mut indices = Vec::with_capacity(m * k);
        let mut distances = Vec::with_capacity(m * k);
        for i in 0..m {
            indices.extend_from_slice(&self.indices(i)[..k]);
            distances.extend_from_slice(&self.distances(i)[..k]);
        }
        Self { k, indices, distances }
    }
}

#[inline]
fn dist2(a: &[f64], b: &[f64]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// (squared distance, support index), ordered lexicographically.
#[derive(Clone, Copy, Debug, PartialEq)]
struct Candidate(f64, usize);

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0).then(self.1.cmp(&other.1))
    }
}

fn validate(query: &Matrix, support: &Matrix, k: usize) -> Result<()> {
    if support.rows() == 0 {
        return Err(Error::EmptySupport);
    }
    if k > support.rows() {
        return Err(Error::KTooLarge { k, n: support.rows() });
    }
    if query.cols() != 3 || support.cols() != 3 {
        return Err(Error::ShapeMismatch("coordinates must have 3 columns".into()));
    }
    if !query.all_finite() || !support.all_finite() {
        return Err(Error::InvalidConfig("non-finite coordinates".into()));
    }
    Ok(())
}

fn assemble(k: usize, rows: Vec<Vec<Candidate>>) -> NeighborIndex {
    let mut indices = Vec::with_capacity(rows.len() * k);
    let mut distances = Vec::with_capacity(rows.len() * k);
    for row in rows {
        for Candidate(d2, i) in row {
            indices.push(i);
            distances.push(d2.sqrt());
        }
    }
    NeighborIndex { k, indices, distances }
}

/// Exact k nearest neighbours of every query row among the support rows.
/// Ties are broken by the lower support index.
pub fn knn(query: &Matrix, support: &Matrix, k: usize) -> Result<NeighborIndex> {
    if support.rows() >= GRID_THRESHOLD && query.rows() > 64 {
        knn_grid(query, support, k)
    } else {
        knn_exhaustive(query, support, k)
    }
}

/// Scans the whole support set for every query.
pub fn knn_exhaustive(query: &Matrix, support: &Matrix, k: usize) -> Result<NeighborIndex> {
    validate(query, support, k)?;
    let rows = parallel::map_indexed(query.rows(), |qi| {
        let q = query.row(qi);
        let mut all: Vec<Candidate> = (0..support.rows()).map(|j| Candidate(dist2(q, support.row(j)), j)).collect();
        if k < all.len() {
            all.select_nth_unstable(k);
            all.truncate(k);
        }
        all.sort_unstable();
        all
    });
    Ok(assemble(k, rows))
}

/// Same result as [`knn_exhaustive`], visiting grid cells in growing shells
/// around each query.
pub fn knn_grid(query: &Matrix, support: &Matrix, k: usize) -> Result<NeighborIndex> {
    validate(query, support, k)?;
    if k == 0 {
        return Ok(NeighborIndex {
            k,
            indices: Vec::new(),
            distances: Vec::new(),
        });
    }
    let n = support.rows();
    let mut lo = [f64::INFINITY; 3];
    let mut hi = [f64::NEG_INFINITY; 3];
    for r in 0..n {
        for a in 0..3 {
            lo[a] = lo[a].min(support.get(r, a));
            hi[a] = hi[a].max(support.get(r, a));
        }
    }
    let extent: f64 = (0..3).map(|a| (hi[a] - lo[a]).max(1.0)).product();
    let cell = (extent * k.max(8) as f64 / n as f64).cbrt().max(1e-9);
    let key = |p: &[f64]| -> [i64; 3] { [0, 1, 2].map(|a| ((p[a] - lo[a]) / cell).floor() as i64) };

    let mut cells: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for r in 0..n {
        cells.entry(key(support.row(r))).or_default().push(r);
    }
    let max_cell = [0, 1, 2].map(|a| ((hi[a] - lo[a]) / cell).floor() as i64);

    let rows = parallel::map_indexed(query.rows(), |qi| {
        let q = query.row(qi);
        let c = key(q);
        // Shells beyond this radius contain no support cells.
        let reach = (0..3).map(|a| c[a].abs().max((max_cell[a] - c[a]).abs())).max().unwrap_or(0);
        let mut heap: BinaryHeap<Candidate> = BinaryHeap::with_capacity(k + 1);
        let mut r: i64 = 0;
        loop {
            for dx in -r..=r {
                for dy in -r..=r {
                    for dz in -r..=r {
                        if dx.abs().max(dy.abs()).max(dz.abs()) != r {
                            continue;
                        }
                        let Some(members) = cells.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in members {
                            let cand = Candidate(dist2(q, support.row(j)), j);
                            if heap.len() < k {
                                heap.push(cand);
                            } else if cand < *heap.peek().expect("non-empty heap") {
                                heap.pop();
                                heap.push(cand);
                            }
                        }
                    }
                }
            }
            // Unvisited points lie at least `r · cell` away from the query.
            let bound = r as f64 * cell;
            if heap.len() == k && heap.peek().expect("non-empty heap").0 < bound * bound {
                break;
            }
            if r > reach {
                break;
            }
            r += 1;
        }
        heap.into_sorted_vec()
    });
    Ok(assemble(k, rows))
}

/// Overlapping point subsets covering a frame.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub patches: Vec<Vec<usize>>,
    pub origin_n: usize,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.patches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.patches.is_empty()
    }

    pub fn covers_all(&self) -> bool {
        let mut seen = vec![false; self.origin_n];
        for p in &self.patches {
            for &i in p {
                seen[i] = true;
            }
        }
        seen.into_iter().all(|s| s)
    }
}

/// Splits a frame into patches of `patch_size` nearest points around
/// farthest-point-sampled seeds. A point counts as covered once it falls
/// inside the nearest `⌈stride_fraction · patch_size⌉` points of some seed;
/// seeds are added until every point is covered.
pub fn generate_patches(frame: &PointCloudFrame, patch_size: usize, stride_fraction: f64) -> Result<PatchSet> {
    if patch_size == 0 {
        return Err(Error::InvalidPatchConfig("patch_size must be at least 1".into()));
    }
    if !(stride_fraction > 0.0 && stride_fraction <= 1.0) {
        return Err(Error::InvalidPatchConfig(format!(
            "stride_fraction {stride_fraction} outside (0, 1]"
        )));
    }
    let n = frame.len();
    if n == 0 {
        return Err(Error::EmptyFrame);
    }
    if patch_size >= n {
        return Ok(PatchSet {
            patches: vec![(0..n).collect()],
            origin_n: n,
        });
    }
    let coords = frame.geometry_matrix();
    let core = ((stride_fraction * patch_size as f64).ceil() as usize).clamp(1, patch_size);
    let mut covered = vec![false; n];
    let mut remaining = n;
    let mut nearest_seed = vec![f64::INFINITY; n];
    let mut patches = Vec::new();
    let mut seed = 0usize;
    loop {
        let s = coords.row(seed).to_vec();
        let mut order: Vec<Candidate> = (0..n).map(|j| Candidate(dist2(&s, coords.row(j)), j)).collect();
        order.select_nth_unstable(patch_size - 1);
        order.truncate(patch_size);
        order.sort_unstable();
        for Candidate(_, j) in &order[..core] {
            if !covered[*j] {
                covered[*j] = true;
                remaining -= 1;
            }
        }
        patches.push(order.iter().map(|c| c.1).collect());
        if remaining == 0 {
            break;
        }
        for (j, d) in nearest_seed.iter_mut().enumerate() {
            *d = d.min(dist2(&s, coords.row(j)));
        }
        seed = (0..n)
            .filter(|&j| !covered[j])
            .fold(None::<usize>, |best, j| match best {
                Some(b) if nearest_seed[b] >= nearest_seed[j] => Some(b),
                _ => Some(j),
            })
            .expect("uncovered point exists");
    }
    Ok(PatchSet { patches, origin_n: n })
}

/// Averages per-patch outputs back onto the source frame.
pub fn fuse_patches(outputs: &[(Vec<usize>, Matrix)], origin_n: usize) -> Result<Matrix> {
    let cols = outputs.first().map_or(0, |(_, v)| v.cols());
    let mut sum = Matrix::zeros(origin_n, cols);
    let mut count = vec![0usize; origin_n];
    for (indices, values) in outputs {
        if values.rows() != indices.len() || values.cols() != cols {
            return Err(Error::ShapeMismatch(format!(
                "patch of {} indices has {}x{} values",
                indices.len(),
                values.rows(),
                values.cols()
            )));
        }
        for (r, &i) in indices.iter().enumerate() {
            if i >= origin_n {
                return Err(Error::NeighborOutOfRange { index: i, n: origin_n });
            }
            for (o, v) in sum.row_mut(i).iter_mut().zip(values.row(r)) {
                *o += v;
            }
            count[i] += 1;
        }
    }
    if let Some(i) = count.iter().position(|&c| c == 0) {
        return Err(Error::UncoveredPoint(i));
    }
    for (i, &c) in count.iter().enumerate() {
        let inv = 1.0 / c as f64;
        sum.row_mut(i).iter_mut().for_each(|v| *v *= inv);
    }
    Ok(sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn line(xs: &[i32]) -> Matrix {
        Matrix::from_rows(&xs.iter().map(|&x| vec![f64::from(x), 0.0, 0.0]).collect::<Vec<_>>())
    }

    #[test]
    fn hand_geometry_on_a_line() {
        let s = line(&[0, 1, 3]);
        let nb = knn(&s, &s, 2).unwrap();
        assert_eq!(nb.indices(0), &[0, 1]);
        assert_eq!(nb.distances(0), &[0.0, 1.0]);
        assert_eq!(nb.indices(2), &[2, 1]);
        let self_nb = knn(&s, &s, 1).unwrap();
        for i in 0..3 {
            assert_eq!(self_nb.indices(i), &[i]);
            assert_eq!(self_nb.distances(i), &[0.0]);
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        let s = line(&[-1, 1, 0]);
        let q = line(&[0]);
        let nb = knn(&q, &s, 3).unwrap();
        assert_eq!(nb.indices(0), &[2, 0, 1]);
    }

    #[test]
    fn error_paths() {
        let s = line(&[0, 1]);
        assert!(matches!(knn(&s, &s, 3), Err(Error::KTooLarge { k: 3, n: 2 })));
        assert!(matches!(knn(&s, &Matrix::zeros(0, 3), 1), Err(Error::EmptySupport)));
    }

    #[test]
    fn fuse_mean_rule() {
        let out = fuse_patches(
            &[
                (vec![0, 1], Matrix::column(&[10.0, 5.0])),
                (vec![1, 2], Matrix::column(&[20.0, 7.0])),
            ],
            3,
        )
        .unwrap();
        assert_eq!(out.col(0), vec![10.0, 12.5, 7.0]);
        let err = fuse_patches(&[(vec![0], Matrix::column(&[1.0]))], 2).unwrap_err();
        assert!(matches!(err, Error::UncoveredPoint(1)));
    }

    #[test]
    fn whole_frame_patch_when_size_exceeds_n() {
        let geometry = (0..100).map(|i| [i, 0, 0]).collect();
        let f = PointCloudFrame::new(geometry, Matrix::zeros(100, 1), 0).unwrap();
        let ps = generate_patches(&f, 100, 0.5).unwrap();
        assert_eq!(ps.patches, vec![(0..100).collect::<Vec<_>>()]);
        assert!(generate_patches(&f, 0, 0.5).is_err());
        assert!(generate_patches(&f, 10, 0.0).is_err());
        assert!(generate_patches(&f, 10, 1.5).is_err());
    }
}

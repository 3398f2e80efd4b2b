//! Exact k-nearest neighbours through uniform grid bucketing.
//!
//! Cells are searched in rings of growing Chebyshev radius around the
//! query's cell; the search stops once the current k-th candidate is closer
//! than any point outside the visited box could be. Ordering is by squared
//! distance, then by node index.

use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KnnResult {
    /// Row-major `n × k` neighbour indices, nearest first.
    pub neighbors: Vec<usize>,
    /// Neighbours per node (`min(k, n-1)`).
    pub k: usize,
    /// Fewer than `k+1` nodes: every node is linked to all the others.
    pub degenerate: bool,
}

#[inline]
pub fn sq_dist<const D: usize>(a: &[f64; D], b: &[f64; D]) -> f64 {
    let mut s = 0.0;
    for d in 0..D {
        let t = a[d] - b[d];
        s += t * t;
    }
    s
}

#[inline]
fn cmp_candidate(a: &(f64, usize), b: &(f64, usize)) -> Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

/// Bounded sorted list of the best candidates seen so far.
struct Best {
    k: usize,
    items: Vec<(f64, usize)>,
}

impl Best {
    fn offer(&mut self, cand: (f64, usize)) {
        if self.items.len() == self.k {
            if cmp_candidate(&cand, self.items.last().unwrap()) != Ordering::Less {
                return;
            }
            self.items.pop();
        }
        let pos = self
            .items
            .binary_search_by(|x| cmp_candidate(x, &cand))
            .unwrap_or_else(|p| p);
        self.items.insert(pos, cand);
    }
}

struct Grid<const D: usize> {
    lo: [f64; D],
    cell: f64,
    dims: [usize; D],
    offsets: Vec<usize>,
    members: Vec<usize>,
}

impl<const D: usize> Grid<D> {
    fn build(points: &[[f64; D]], k: usize) -> Self {
        let n = points.len();
        let mut lo = [f64::INFINITY; D];
        let mut hi = [f64::NEG_INFINITY; D];
        for p in points {
            for d in 0..D {
                lo[d] = lo[d].min(p[d]);
                hi[d] = hi[d].max(p[d]);
            }
        }
        let extent: Vec<f64> = (0..D).map(|d| hi[d] - lo[d]).collect();
        let active: Vec<f64> = extent.iter().copied().filter(|&e| e > 0.0).collect();
        // Cell edge ≈ radius expected to hold k+1 points under uniform density.
        let mut cell = if active.is_empty() {
            1.0
        } else {
            let vol: f64 = active.iter().product();
            (vol * (k + 1) as f64 / n as f64).powf(1.0 / active.len() as f64)
        };
        if !(cell.is_finite() && cell > 0.0) {
            cell = extent.iter().copied().fold(1.0, f64::max);
        }
        let max_cells = 4 * n + 64;
        let mut dims = [1usize; D];
        loop {
            for d in 0..D {
                dims[d] = ((extent[d] / cell).ceil() as usize).max(1);
            }
            if dims.iter().product::<usize>() <= max_cells {
                break;
            }
            cell *= 1.5;
        }
        let mut grid = Self {
            lo,
            cell,
            dims,
            offsets: Vec::new(),
            members: Vec::new(),
        };
        let total: usize = dims.iter().product();
        let cell_of: Vec<usize> = points.iter().map(|p| grid.linear(&grid.home(p))).collect();
        let mut counts = vec![0usize; total + 1];
        for &c in &cell_of {
            counts[c + 1] += 1;
        }
        for i in 0..total {
            counts[i + 1] += counts[i];
        }
        let mut fill = counts.clone();
        let mut members = vec![0usize; n];
        for (i, &c) in cell_of.iter().enumerate() {
            members[fill[c]] = i;
            fill[c] += 1;
        }
        grid.offsets = counts;
        grid.members = members;
        grid
    }

    fn home(&self, p: &[f64; D]) -> [usize; D] {
        let mut h = [0usize; D];
        for d in 0..D {
            let c = ((p[d] - self.lo[d]) / self.cell).floor();
            h[d] = if c <= 0.0 {
                0
            } else {
                (c as usize).min(self.dims[d] - 1)
            };
        }
        h
    }

    fn linear(&self, c: &[usize; D]) -> usize {
        let mut idx = 0;
        for d in 0..D {
            idx = idx * self.dims[d] + c[d];
        }
        idx
    }

    fn cell_members(&self, c: &[usize; D]) -> &[usize] {
        let l = self.linear(c);
        &self.members[self.offsets[l]..self.offsets[l + 1]]
    }

    /// Visit every cell at Chebyshev distance exactly `r` from `h`.
    fn for_ring(&self, h: &[usize; D], r: usize, mut f: impl FnMut(&[usize; D])) {
        let mut lo = [0usize; D];
        let mut hi = [0usize; D];
        for d in 0..D {
            lo[d] = h[d].saturating_sub(r);
            hi[d] = (h[d] + r).min(self.dims[d] - 1);
        }
        let mut cur = lo;
        loop {
            let on_ring = (0..D).any(|d| cur[d].abs_diff(h[d]) == r);
            if on_ring {
                f(&cur);
            }
            let mut d = D;
            loop {
                if d == 0 {
                    return;
                }
                d -= 1;
                if cur[d] < hi[d] {
                    cur[d] += 1;
                    break;
                }
                cur[d] = lo[d];
            }
        }
    }

    /// Lower bound on the distance from `q` to any cell outside the box of
    /// radius `r`; infinite once the box covers the whole grid.
    fn outside_bound(&self, q: &[f64; D], h: &[usize; D], r: usize) -> f64 {
        let mut bound = f64::INFINITY;
        for d in 0..D {
            if h[d] > r {
                let edge = self.lo[d] + (h[d] - r) as f64 * self.cell;
                bound = bound.min((q[d] - edge).max(0.0));
            }
            if h[d] + r + 1 < self.dims[d] {
                let edge = self.lo[d] + (h[d] + r + 1) as f64 * self.cell;
                bound = bound.min((edge - q[d]).max(0.0));
            }
        }
        bound
    }
}

/// Directed k-nearest-neighbour lists (self excluded).
pub fn knn_graph<const D: usize>(points: &[[f64; D]], k: usize) -> KnnResult {
    let n = points.len();
    if n == 0 {
        return KnnResult {
            neighbors: Vec::new(),
            k: 0,
            degenerate: k > 0,
        };
    }
    if n <= k {
        let k_eff = n - 1;
        let mut neighbors = Vec::with_capacity(n * k_eff);
        for i in 0..n {
            let mut all: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (sq_dist(&points[i], &points[j]), j))
                .collect();
            all.sort_by(cmp_candidate);
            neighbors.extend(all.into_iter().map(|(_, j)| j));
        }
        return KnnResult {
            neighbors,
            k: k_eff,
            degenerate: true,
        };
    }
    let grid = Grid::build(points, k);
    let mut neighbors = Vec::with_capacity(n * k);
    for (i, q) in points.iter().enumerate() {
        let h = grid.home(q);
        let mut best = Best {
            k,
            items: Vec::with_capacity(k + 1),
        };
        let mut r = 0;
        loop {
            grid.for_ring(&h, r, |c| {
                for &j in grid.cell_members(c) {
                    if j != i {
                        best.offer((sq_dist(q, &points[j]), j));
                    }
                }
            });
            let bound = grid.outside_bound(q, &h, r);
            if bound.is_infinite() {
                break;
            }
            if best.items.len() == k && best.items[k - 1].0 < bound * bound * (1.0 - 1e-9) {
                break;
            }
            r += 1;
        }
        neighbors.extend(best.items.iter().map(|&(_, j)| j));
    }
    KnnResult {
        neighbors,
        k,
        degenerate: false,
    }
}

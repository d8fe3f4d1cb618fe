//! Exact maximum-weight bipartite matching on sparse positive weights.
//!
//! Successive shortest augmenting paths with Dijkstra over reduced costs
//! (the Hungarian method in its shortest-path form). Every row owns a
//! private zero-cost "unmatched" column, so rows are never forced onto
//! a pair that lowers the total. Only edges with positive weight exist,
//! which lets a gated score matrix be solved without densifying it.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

/// Row-major sparse weights: `rows[i]` lists `(column, weight)` with weight > 0.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SparseWeights {
    pub n_rows: usize,
    pub n_cols: usize,
    pub row_ptr: Vec<usize>,
    pub cols: Vec<usize>,
    pub weights: Vec<f64>,
}

impl SparseWeights {
    pub fn from_rows(n_cols: usize, rows: Vec<Vec<(usize, f64)>>) -> Self {
        let mut out = Self { n_rows: rows.len(), n_cols, row_ptr: vec![0], ..Default::default() };
        for row in rows {
            for (j, w) in row {
                debug_assert!(j < n_cols);
                if w > 0.0 {
                    out.cols.push(j);
                    out.weights.push(w);
                }
            }
            out.row_ptr.push(out.cols.len());
        }
        out
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let range = self.row_ptr[i]..self.row_ptr[i + 1];
        self.cols[range.clone()].iter().copied().zip(self.weights[range].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Entry {
    dist: f64,
    col: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    // Min-heap on (dist, col).
    fn cmp(&self, other: &Self) -> Ordering {
        other.dist.total_cmp(&self.dist).then_with(|| other.col.cmp(&self.col))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Search<'a> {
    w: &'a SparseWeights,
    m: usize,
    round: u32,
    done: &'a mut [u32],
    v: &'a [f64],
    heap: &'a mut BinaryHeap<Entry>,
    dist: &'a mut [f64],
    pred: &'a mut [usize],
    stamp: &'a mut [u32],
}

impl Search<'_> {
    /// Relaxes every edge of row `i`, reached at distance `di`.
    fn relax(&mut self, i: usize, di: f64, ui: f64) {
        let own = self.m + i;
        let edges = self.w.row(i).map(|(j, x)| (j, -x)).chain(std::iter::once((own, 0.0)));
        for (j, cost) in edges {
            if self.done[j] == self.round {
                continue;
            }
            let cand = di + (cost - ui - self.v[j]);
            if self.stamp[j] != self.round || cand < self.dist[j] {
                self.stamp[j] = self.round;
                self.dist[j] = cand;
                self.pred[j] = i;
                self.heap.push(Entry { dist: cand, col: j });
            }
        }
    }
}

/// Returns, for every row, its matched column (or `None`), maximizing the
/// summed weight of the matched edges.
pub fn max_weight_matching(w: &SparseWeights) -> Vec<Option<usize>> {
    let (n, m) = (w.n_rows, w.n_cols);
    // Columns m..m+n are the private "unmatched" columns of each row.
    let total_cols = m + n;
    let mut u: Vec<f64> = (0..n).map(|i| -w.row(i).map(|(_, x)| x).fold(0.0, f64::max)).collect();
    let mut v = vec![0.0; total_cols];
    let mut row_match = vec![usize::MAX; n];
    let mut col_match = vec![usize::MAX; total_cols];

    let mut dist = vec![f64::INFINITY; total_cols];
    let mut pred = vec![usize::MAX; total_cols];
    let mut stamp = vec![0u32; total_cols];
    let mut done = vec![0u32; total_cols];
    let mut finalized: Vec<usize> = Vec::new();
    let mut reached: Vec<(usize, f64)> = Vec::new();
    let mut heap = BinaryHeap::new();

    for source in 0..n {
        let round = source as u32 + 1;
        finalized.clear();
        reached.clear();
        heap.clear();

        reached.push((source, 0.0));
        let mut search = Search { w, m, round, done: &mut done, v: &v, heap: &mut heap, dist: &mut dist, pred: &mut pred, stamp: &mut stamp };
        search.relax(source, 0.0, u[source]);
        let (end, total) = loop {
            let Entry { dist: d, col: j } = search.heap.pop().expect("own column is always reachable");
            if search.done[j] == round || d > search.dist[j] {
                continue;
            }
            search.done[j] = round;
            finalized.push(j);
            let owner = col_match[j];
            if owner == usize::MAX {
                break (j, d);
            }
            reached.push((owner, d));
            search.relax(owner, d, u[owner]);
        };

        for &j in &finalized {
            v[j] += dist[j] - total;
        }
        for &(i, di) in &reached {
            u[i] += total - di;
        }

        let mut j = end;
        loop {
            let i = pred[j];
            let previous = row_match[i];
            row_match[i] = j;
            col_match[j] = i;
            if i == source {
                break;
            }
            j = previous;
        }
    }

    row_match.into_iter().map(|j| (j < m).then_some(j)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(rows: &[&[f64]]) -> SparseWeights {
        let m = rows.first().map_or(0, |r| r.len());
        SparseWeights::from_rows(
            m,
            rows.iter().map(|r| r.iter().copied().enumerate().collect()).collect(),
        )
    }

    fn total(w: &[&[f64]], assignment: &[Option<usize>]) -> f64 {
        assignment.iter().enumerate().filter_map(|(i, j)| j.map(|j| w[i][j])).sum()
    }

    #[test]
    fn two_by_two() {
        let w: &[&[f64]] = &[&[0.9, 0.1], &[0.2, 0.8]];
        assert_eq!(max_weight_matching(&dense(w)), vec![Some(0), Some(1)]);
    }

    #[test]
    fn conflict_resolved_globally() {
        // Greedy would take (0,0)=0.9 and leave row 1 with 0.1.
        let w: &[&[f64]] = &[&[0.9, 0.8], &[0.85, 0.1]];
        let a = max_weight_matching(&dense(w));
        assert_eq!(a, vec![Some(1), Some(0)]);
        assert!((total(w, &a) - 1.65).abs() < 1e-15);
    }

    #[test]
    fn rows_may_stay_unmatched() {
        let w: &[&[f64]] = &[&[0.5], &[0.7], &[0.0]];
        assert_eq!(max_weight_matching(&dense(w)), vec![None, Some(0), None]);
    }

    #[test]
    fn empty_inputs() {
        assert!(max_weight_matching(&SparseWeights::from_rows(3, vec![])).is_empty());
        let none = max_weight_matching(&SparseWeights::from_rows(0, vec![vec![], vec![]]));
        assert_eq!(none, vec![None, None]);
    }
}

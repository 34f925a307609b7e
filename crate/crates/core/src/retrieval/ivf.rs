//! Coarse inverted-file pruning: k-means over per-chunk mean vectors, then probe
//! the centroids that score highest against the query.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{IntraError, Result};
use crate::store::PooledIndex;
use crate::tensor::{dot, Matrix};

pub const KMEANS_ITERS: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    centroids: Matrix,
    members: Vec<Vec<usize>>,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl IvfIndex {
    /// Seeded Lloyd iterations over the chunk mean vectors.
    pub fn build(pooled: &PooledIndex, n_centroids: usize, seed: u64) -> Result<Self> {
        let m = pooled.len();
        if n_centroids == 0 || n_centroids > m {
            return Err(IntraError::InvalidArgument(format!(
                "{n_centroids} centroids for {m} chunks"
            )));
        }
        let d = pooled.d();
        let points: Vec<Vec<f64>> = (0..m).map(|i| pooled.mean_vector(i)).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut picks = sample(&mut rng, m, n_centroids).into_vec();
        picks.sort_unstable();
        let mut centroids = Matrix::zeros(n_centroids, d);
        for (c, &p) in picks.iter().enumerate() {
            centroids.row_mut(c).copy_from_slice(&points[p]);
        }
        let mut assign = vec![usize::MAX; m];
        for _ in 0..KMEANS_ITERS {
            let mut changed = false;
            for (i, p) in points.iter().enumerate() {
                let mut best = 0;
                let mut best_d = f64::INFINITY;
                for c in 0..n_centroids {
                    let dd = sq_dist(p, centroids.row(c));
                    if dd < best_d {
                        best_d = dd;
                        best = c;
                    }
                }
                if assign[i] != best {
                    assign[i] = best;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let mut sums = Matrix::zeros(n_centroids, d);
            let mut counts = vec![0usize; n_centroids];
            for (i, p) in points.iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, v) in sums.row_mut(assign[i]).iter_mut().zip(p) {
                    *s += v;
                }
            }
            for (c, &count) in counts.iter().enumerate() {
                // an emptied cluster keeps its previous centroid
                if count > 0 {
                    let n = count as f64;
                    for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                        *dst = s / n;
                    }
                }
            }
        }
        let mut members = vec![Vec::new(); n_centroids];
        for (i, &c) in assign.iter().enumerate() {
            members[c].push(i);
        }
        Ok(Self { centroids, members })
    }

    pub fn n_centroids(&self) -> usize {
        self.centroids.rows()
    }

    pub fn members(&self, c: usize) -> &[usize] {
        &self.members[c]
    }

    /// Union of the members of the `nprobe` centroids with the largest dot product
    /// against the summed query rows, ascending.
    pub fn search(&self, query_rows: &[f64], nprobe: usize) -> Result<Vec<usize>> {
        let k = self.n_centroids();
        if nprobe == 0 || nprobe > k {
            return Err(IntraError::InvalidArgument(format!(
                "nprobe {nprobe} with {k} centroids"
            )));
        }
        let d = self.centroids.cols();
        if query_rows.is_empty() || !query_rows.len().is_multiple_of(d) {
            return Err(IntraError::Shape(format!(
                "query of length {} for width {d}",
                query_rows.len()
            )));
        }
        let mut q = vec![0.0; d];
        for r in query_rows.chunks_exact(d) {
            for (a, b) in q.iter_mut().zip(r) {
                *a += b;
            }
        }
        let scores: Vec<f64> = (0..k).map(|c| dot(&q, self.centroids.row(c))).collect();
        let probe = super::select_top_n(&scores, nprobe);
        let mut out: Vec<usize> = probe
            .indices
            .iter()
            .flat_map(|&c| self.members[c].iter().copied())
            .collect();
        out.sort_unstable();
        Ok(out)
    }
}

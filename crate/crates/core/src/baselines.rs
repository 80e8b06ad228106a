//! Brute-force k-nearest-neighbor baselines in the normalized `[q; τ]` space.

use std::cmp::Ordering;

use crate::dataset::{fit_normalization, ClassLabel, Dataset, DatasetError, NormalizationStats};
use crate::geometry::Vec3;

pub const DEFAULT_K: usize = 3;

/// A fitted neighbor index: training inputs normalized with their own stats.
#[derive(Debug, Clone)]
pub struct Knn {
    pub k: usize,
    pub stats: NormalizationStats<f64>,
    dim: usize,
    x: Vec<f64>,
    positions: Vec<[f64; 3]>,
    classes: Vec<usize>,
    n_points: usize,
}

#[derive(Debug, Clone, Copy)]
struct Neighbor {
    dist: f64,
    index: usize,
}

impl Knn {
    pub fn fit(train: &Dataset, k: usize) -> Result<Self, DatasetError> {
        if train.is_empty() {
            return Err(DatasetError::Empty);
        }
        if k == 0 || k > train.len() {
            return Err(DatasetError::BadNeighborCount { k, n: train.len() });
        }
        let stats = fit_normalization(train)?;
        let dim = stats.dim();
        let mut x = vec![0.0; train.len() * dim];
        for (s, row) in train.samples.iter().zip(x.chunks_exact_mut(dim)) {
            stats.normalize_into(&s.input(), row)?;
        }
        Ok(Self {
            k,
            stats,
            dim,
            x,
            positions: train.samples.iter().map(|s| s.p).collect(),
            classes: train.samples.iter().map(|s| train.class_of(s)).collect(),
            n_points: train.n_points(),
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn n_points(&self) -> usize {
        self.n_points
    }

    /// Orders equidistant neighbors by their stored content so the result does
    /// not depend on the order of the training set.
    fn cmp(&self, a: &Neighbor, b: &Neighbor) -> Ordering {
        let row = |n: &Neighbor| &self.x[n.index * self.dim..(n.index + 1) * self.dim];
        a.dist
            .total_cmp(&b.dist)
            .then_with(|| {
                row(a).iter().zip(row(b)).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
            })
            .then_with(|| {
                let (pa, pb) = (self.positions[a.index], self.positions[b.index]);
                pa.iter().zip(&pb).map(|(u, v)| u.total_cmp(v)).find(|o| o.is_ne()).unwrap_or(Ordering::Equal)
            })
            .then_with(|| self.classes[a.index].cmp(&self.classes[b.index]))
    }

    fn neighbors(&self, q: &[f64], tau: &[f64]) -> Result<Vec<Neighbor>, DatasetError> {
        let half = self.dim / 2;
        if q.len() != half || tau.len() != half {
            return Err(DatasetError::DimensionMismatch { expected: half, got: q.len().max(tau.len()) });
        }
        let mut query = vec![0.0; self.dim];
        let raw: Vec<f64> = q.iter().chain(tau).copied().collect();
        self.stats.normalize_into(&raw, &mut query)?;
        let mut best: Vec<Neighbor> = Vec::with_capacity(self.k + 1);
        for (index, row) in self.x.chunks_exact(self.dim).enumerate() {
            let dist: f64 = row.iter().zip(&query).map(|(a, b)| (a - b) * (a - b)).sum();
            let cand = Neighbor { dist, index };
            if best.len() == self.k && self.cmp(&cand, &best[self.k - 1]).is_ge() {
                continue;
            }
            let at = best.partition_point(|n| self.cmp(n, &cand).is_lt());
            best.insert(at, cand);
            best.truncate(self.k);
        }
        Ok(best)
    }

    /// Mean location of the `k` nearest training samples.
    pub fn regress(&self, q: &[f64], tau: &[f64]) -> Result<Vec3<f64>, DatasetError> {
        let nn = self.neighbors(q, tau)?;
        let mut sum = Vec3::zeros();
        for n in &nn {
            sum += Vec3::from(self.positions[n.index]);
        }
        Ok(sum * (1.0 / nn.len() as f64))
    }

    /// Majority class among the `k` nearest; ties go to the tied class whose
    /// closest member is nearest.
    pub fn classify(&self, q: &[f64], tau: &[f64]) -> Result<ClassLabel, DatasetError> {
        let nn = self.neighbors(q, tau)?;
        // (class, votes, rank of its nearest member)
        let mut tally: Vec<(usize, usize, usize)> = Vec::with_capacity(nn.len());
        for (rank, n) in nn.iter().enumerate() {
            let c = self.classes[n.index];
            match tally.iter_mut().find(|t| t.0 == c) {
                Some(t) => t.1 += 1,
                None => tally.push((c, 1, rank)),
            }
        }
        let winner = tally.iter().max_by(|a, b| a.1.cmp(&b.1).then(b.2.cmp(&a.2))).expect("k >= 1");
        Ok(ClassLabel(winner.0))
    }
}

pub fn knn_regress(train: &Dataset, q: &[f64], tau: &[f64], k: usize) -> Result<Vec3<f64>, DatasetError> {
    Knn::fit(train, k)?.regress(q, tau)
}

pub fn knn_classify(train: &Dataset, q: &[f64], tau: &[f64], k: usize) -> Result<ClassLabel, DatasetError> {
    Knn::fit(train, k)?.classify(q, tau)
}

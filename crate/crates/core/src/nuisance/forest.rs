//! Random forest regression: bagged variance-reduction trees with feature
//! subsampling. Defaults follow common practice (200 trees, minimum leaf 5,
//! a third of the features tried per split, bootstrap resampling).

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::rng;

const LEAF: u32 = u32::MAX;

#[derive(Debug, Clone)]
struct Node {
    feature: u32,
    threshold: f64,
    left: u32,
    right: u32,
    value: f64,
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict_row(&self, row: &[f64]) -> f64 {
        let mut idx = 0usize;
        loop {
            let node = &self.nodes[idx];
            if node.feature == LEAF {
                return node.value;
            }
            idx = if row[node.feature as usize] < node.threshold {
                node.left as usize
            } else {
                node.right as usize
            };
        }
    }
}

#[derive(Debug, Clone)]
pub struct ForestFit {
    trees: Vec<Tree>,
    n_features: usize,
}

struct TreeBuilder<'a> {
    cols: &'a [Vec<f64>],
    y: &'a [f64],
    min_leaf: usize,
    mtry: usize,
    nodes: Vec<Node>,
    scratch: Vec<u32>,
    feature_pool: Vec<u32>,
}

impl<'a> TreeBuilder<'a> {
    /// Best (feature, threshold, score) for the rows in `idx`, measured by
    /// the split's explained sum of squares.
    fn best_split(&mut self, idx: &[u32], rng: &mut ChaCha8Rng) -> Option<(usize, f64, f64)> {
        let n = idx.len();
        let total: f64 = idx.iter().map(|&i| self.y[i as usize]).sum();
        let p = self.cols.len();
        // draw mtry distinct features
        for i in 0..p {
            self.feature_pool[i] = i as u32;
        }
        for i in 0..self.mtry.min(p) {
            let j = rng.random_range(i..p);
            self.feature_pool.swap(i, j);
        }
        let mut best: Option<(usize, f64, f64)> = None;
        for t in 0..self.mtry.min(p) {
            let f = self.feature_pool[t] as usize;
            let col = &self.cols[f];
            self.scratch.clear();
            self.scratch.extend_from_slice(idx);
            self.scratch.sort_unstable_by(|&a, &b| col[a as usize].total_cmp(&col[b as usize]));
            let mut left_sum = 0.0;
            for pos in 0..n - 1 {
                let row = self.scratch[pos] as usize;
                left_sum += self.y[row];
                let n_left = pos + 1;
                let n_right = n - n_left;
                if n_left < self.min_leaf {
                    continue;
                }
                if n_right < self.min_leaf {
                    break;
                }
                let v_here = col[row];
                let v_next = col[self.scratch[pos + 1] as usize];
                if v_next <= v_here {
                    continue;
                }
                let right_sum = total - left_sum;
                let score = left_sum * left_sum / n_left as f64
                    + right_sum * right_sum / n_right as f64;
                if best.map_or(true, |(_, _, s)| score > s) {
                    let mut thr = 0.5 * (v_here + v_next);
                    if thr <= v_here {
                        thr = v_next;
                    }
                    best = Some((f, thr, score));
                }
            }
        }
        // keep only splits that actually reduce the sum of squares
        let parent_score = total * total / n as f64;
        best.filter(|&(_, _, s)| s > parent_score + 1e-12 * parent_score.abs().max(1.0))
    }

    fn build(&mut self, idx: &mut [u32], rng: &mut ChaCha8Rng) -> u32 {
        let n = idx.len();
        let mean = idx.iter().map(|&i| self.y[i as usize]).sum::<f64>() / n as f64;
        let node_id = self.nodes.len() as u32;
        self.nodes.push(Node { feature: LEAF, threshold: 0.0, left: 0, right: 0, value: mean });
        if n < 2 * self.min_leaf {
            return node_id;
        }
        let Some((feature, threshold, _)) = self.best_split(idx, rng) else {
            return node_id;
        };
        let col = &self.cols[feature];
        let mut split = 0usize;
        for i in 0..n {
            if col[idx[i] as usize] < threshold {
                idx.swap(i, split);
                split += 1;
            }
        }
        if split == 0 || split == n {
            return node_id;
        }
        let (left_idx, right_idx) = idx.split_at_mut(split);
        let left = self.build(left_idx, rng);
        let right = self.build(right_idx, rng);
        self.nodes[node_id as usize].feature = feature as u32;
        self.nodes[node_id as usize].threshold = threshold;
        self.nodes[node_id as usize].left = left;
        self.nodes[node_id as usize].right = right;
        node_id
    }
}

#[allow(clippy::too_many_arguments)]
pub(super) fn fit(
    features: &DMatrix<f64>,
    target: &DVector<f64>,
    weights: Option<&[f64]>,
    n_trees: usize,
    min_leaf: usize,
    mtry_fraction: f64,
    bootstrap: bool,
    seed: u64,
) -> Result<ForestFit> {
    let n = features.nrows();
    let p = features.ncols();
    if n_trees == 0 {
        return Err(Error::InvalidConfig("forest needs at least one tree".into()));
    }
    let cols: Vec<Vec<f64>> =
        (0..p).map(|j| features.column(j).iter().copied().collect()).collect();
    let y: Vec<f64> = target.iter().copied().collect();
    let mtry = ((p as f64 * mtry_fraction).ceil() as usize).clamp(1, p.max(1));

    // cumulative distribution for weighted bootstrap draws
    let cdf: Option<Vec<f64>> = weights.map(|w| {
        let mut acc = 0.0;
        w.iter()
            .map(|v| {
                acc += v.max(0.0);
                acc
            })
            .collect()
    });
    if let Some(cdf) = &cdf {
        if !cdf.last().is_some_and(|&t| t > 0.0) {
            return Err(Error::Numerical("all bootstrap weights are nonpositive".into()));
        }
    }

    let mut trees = Vec::with_capacity(n_trees);
    for t in 0..n_trees {
        let mut tree_rng = rng::stream(seed, "forest-tree", t as u64);
        let mut idx: Vec<u32> = if bootstrap {
            (0..n)
                .map(|_| match &cdf {
                    None => tree_rng.random_range(0..n) as u32,
                    Some(cdf) => {
                        let total = *cdf.last().unwrap();
                        let u: f64 = tree_rng.random::<f64>() * total;
                        cdf.partition_point(|&c| c <= u).min(n - 1) as u32
                    }
                })
                .collect()
        } else {
            (0..n as u32).collect()
        };
        let mut builder = TreeBuilder {
            cols: &cols,
            y: &y,
            min_leaf,
            mtry,
            nodes: Vec::new(),
            scratch: Vec::with_capacity(n),
            feature_pool: vec![0; p.max(1)],
        };
        if p > 0 {
            builder.build(&mut idx, &mut tree_rng);
        } else {
            let mean = y.iter().sum::<f64>() / n as f64;
            builder.nodes.push(Node {
                feature: LEAF,
                threshold: 0.0,
                left: 0,
                right: 0,
                value: mean,
            });
        }
        trees.push(Tree { nodes: builder.nodes });
    }
    Ok(ForestFit { trees, n_features: p })
}

impl ForestFit {
    pub fn predict(&self, features: &DMatrix<f64>) -> DVector<f64> {
        let m = features.nrows();
        let mut out = DVector::zeros(m);
        let mut row = vec![0.0f64; self.n_features];
        let scale = 1.0 / self.trees.len() as f64;
        for i in 0..m {
            for j in 0..self.n_features {
                row[j] = features[(i, j)];
            }
            out[i] = self.trees.iter().map(|t| t.predict_row(&row)).sum::<f64>() * scale;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn forest_learns_a_step_function() {
        let n = 400;
        let mut r = rng::stream(1, "forest-step", 0);
        let x = DMatrix::from_fn(n, 1, |_, _| r.random_range(-1.0..1.0f64));
        let y = DVector::from_fn(n, |i, _| if x[(i, 0)] > 0.0 { 2.0 } else { -2.0 });
        let fit = fit(&x, &y, None, 50, 5, 1.0, true, 3).unwrap();
        let probe = DMatrix::from_row_slice(2, 1, &[-0.5, 0.5]);
        let pred = fit.predict(&probe);
        assert!(pred[0] < -1.5, "pred {pred:?}");
        assert!(pred[1] > 1.5, "pred {pred:?}");
    }

    #[test]
    fn forest_is_deterministic_per_seed() {
        let n = 120;
        let mut r = rng::stream(2, "forest-det", 0);
        let x = DMatrix::from_fn(n, 2, |_, _| r.random_range(-1.0..1.0f64));
        let y = DVector::from_fn(n, |i, _| x[(i, 0)] + x[(i, 1)]);
        let probe = DMatrix::from_fn(10, 2, |_, _| r.random_range(-1.0..1.0f64));
        let a = fit(&x, &y, None, 20, 5, 0.5, true, 9).unwrap().predict(&probe);
        let b = fit(&x, &y, None, 20, 5, 0.5, true, 9).unwrap().predict(&probe);
        assert_eq!(a, b);
    }
}

//! Gradient-boosted regression trees for squared loss.
//!
//! Trees are grown level by level with exhaustive variance-reduction splits
//! over presorted feature orders. Ties keep the first best split in
//! (feature index, threshold) order.

use ndarray::{ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GbtParams {
    pub trees: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
}

impl Default for GbtParams {
    fn default() -> Self {
        GbtParams {
            trees: 200,
            max_depth: 3,
            learning_rate: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// One regression tree; node 0 is the root. Samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { value } => return *value,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> usize {
            match &nodes[i] {
                Node::Leaf { .. } => 0,
                Node::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub params: GbtParams,
    pub base: f64,
    pub trees: Vec<Tree>,
}

impl GbtModel {
    pub fn predict_row(&self, x: ArrayView1<f64>) -> f64 {
        self.base
            + self.params.learning_rate * self.trees.iter().map(|t| t.predict_row(x)).sum::<f64>()
    }

    /// Predictions after each number of trees `0..=trees` (row-major per stage).
    pub fn staged_predictions(&self, x: ArrayView2<f64>) -> Vec<Vec<f64>> {
        let mut f = vec![self.base; x.nrows()];
        let mut out = vec![f.clone()];
        for t in &self.trees {
            for (i, row) in x.rows().into_iter().enumerate() {
                f[i] += self.params.learning_rate * t.predict_row(row);
            }
            out.push(f.clone());
        }
        out
    }
}

#[derive(Clone, Copy)]
struct Candidate {
    gain: f64,
    feature: usize,
    threshold: f64,
}

struct Grower<'a> {
    x: ArrayView2<'a, f64>,
    /// Sample indices sorted by each feature's value.
    order: Vec<Vec<u32>>,
}

impl<'a> Grower<'a> {
    fn new(x: ArrayView2<'a, f64>) -> Self {
        let (n, p) = x.dim();
        let order = (0..p)
            .map(|f| {
                let mut idx: Vec<u32> = (0..n as u32).collect();
                idx.sort_by(|&a, &b| x[[a as usize, f]].total_cmp(&x[[b as usize, f]]).then(a.cmp(&b)));
                idx
            })
            .collect();
        Grower { x, order }
    }

    fn grow(&self, residual: &[f64], max_depth: usize) -> Tree {
        let n = residual.len();
        let mut nodes: Vec<Node> = vec![Node::Leaf { value: 0.0 }];
        // node currently holding each sample
        let mut node_of = vec![0usize; n];
        let mut frontier = vec![0usize];

        for _ in 0..max_depth {
            if frontier.is_empty() {
                break;
            }
            let mut slot_of = vec![usize::MAX; nodes.len()];
            for (s, &node) in frontier.iter().enumerate() {
                slot_of[node] = s;
            }
            let m = frontier.len();
            let mut tot_sum = vec![0.0; m];
            let mut tot_sq = vec![0.0; m];
            let mut tot_cnt = vec![0usize; m];
            for i in 0..n {
                let s = slot_of[node_of[i]];
                if s != usize::MAX {
                    tot_sum[s] += residual[i];
                    tot_sq[s] += residual[i] * residual[i];
                    tot_cnt[s] += 1;
                }
            }
            let mut best: Vec<Option<Candidate>> = vec![None; m];
            let mut left_sum = vec![0.0; m];
            let mut left_cnt = vec![0usize; m];
            let mut last_val = vec![f64::NAN; m];
            for (f, order) in self.order.iter().enumerate() {
                left_sum.iter_mut().for_each(|v| *v = 0.0);
                left_cnt.iter_mut().for_each(|v| *v = 0);
                for &i in order {
                    let i = i as usize;
                    let s = slot_of[node_of[i]];
                    if s == usize::MAX {
                        continue;
                    }
                    let v = self.x[[i, f]];
                    if left_cnt[s] > 0 && v > last_val[s] {
                        let nl = left_cnt[s] as f64;
                        let nr = (tot_cnt[s] - left_cnt[s]) as f64;
                        let sl = left_sum[s];
                        let sr = tot_sum[s] - sl;
                        let gain = sl * sl / nl + sr * sr / nr - tot_sum[s] * tot_sum[s] / tot_cnt[s] as f64;
                        if best[s].is_none_or(|b| gain > b.gain) {
                            let mid = 0.5 * (last_val[s] + v);
                            let threshold = if mid < v { mid } else { last_val[s] };
                            best[s] = Some(Candidate {
                                gain,
                                feature: f,
                                threshold,
                            });
                        }
                    }
                    left_sum[s] += residual[i];
                    left_cnt[s] += 1;
                    last_val[s] = v;
                }
            }

            let mut next_frontier = Vec::new();
            let mut children = vec![None; m];
            for (s, &node) in frontier.iter().enumerate() {
                let sse = tot_sq[s] - tot_sum[s] * tot_sum[s] / tot_cnt[s].max(1) as f64;
                match best[s] {
                    Some(c) if c.gain > 1e-10 * sse.max(0.0) && c.gain > 0.0 && sse > 0.0 => {
                        let left = nodes.len();
                        nodes.push(Node::Leaf { value: 0.0 });
                        nodes.push(Node::Leaf { value: 0.0 });
                        nodes[node] = Node::Split {
                            feature: c.feature,
                            threshold: c.threshold,
                            left,
                            right: left + 1,
                        };
                        children[s] = Some((c, left));
                        next_frontier.push(left);
                        next_frontier.push(left + 1);
                    }
                    _ => {}
                }
            }
            for i in 0..n {
                let s = slot_of[node_of[i]];
                if s != usize::MAX {
                    if let Some((c, left)) = children[s] {
                        node_of[i] = if self.x[[i, c.feature]] <= c.threshold { left } else { left + 1 };
                    }
                }
            }
            frontier = next_frontier;
        }

        let mut sums = vec![0.0; nodes.len()];
        let mut counts = vec![0usize; nodes.len()];
        for i in 0..n {
            sums[node_of[i]] += residual[i];
            counts[node_of[i]] += 1;
        }
        for (i, node) in nodes.iter_mut().enumerate() {
            if let Node::Leaf { value } = node {
                *value = if counts[i] > 0 { sums[i] / counts[i] as f64 } else { 0.0 };
            }
        }
        Tree { nodes }
    }
}

pub fn gbt_fit(x: ArrayView2<f64>, y: ArrayView1<f64>, params: GbtParams) -> Result<GbtModel> {
    if x.nrows() != y.len() {
        return Err(Error::Shape(format!("{} rows vs {} targets", x.nrows(), y.len())));
    }
    if x.nrows() < 2 {
        return Err(Error::Data("need at least 2 training rows".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate <= 1.0) || params.max_depth == 0 {
        return Err(Error::Config(format!("invalid GBT parameters {params:?}")));
    }
    if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite training value".into()));
    }
    let grower = Grower::new(x);
    let base = y.mean().unwrap_or(0.0);
    let mut f = vec![base; y.len()];
    let mut trees = Vec::with_capacity(params.trees);
    for _ in 0..params.trees {
        let residual: Vec<f64> = y.iter().zip(&f).map(|(a, b)| a - b).collect();
        let tree = grower.grow(&residual, params.max_depth);
        for (i, row) in x.rows().into_iter().enumerate() {
            f[i] += params.learning_rate * tree.predict_row(row);
        }
        trees.push(tree);
    }
    Ok(GbtModel { params, base, trees })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn stump_on_two_groups() {
        let x = array![[0.0], [0.0], [1.0], [1.0]];
        let y = array![0.0, 0.0, 1.0, 1.0];
        let params = GbtParams {
            trees: 1,
            max_depth: 1,
            learning_rate: 0.1,
        };
        let m = gbt_fit(x.view(), y.view(), params).unwrap();
        assert_eq!(m.base, 0.5);
        match m.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => {
                assert_eq!(feature, 0);
                assert_eq!(threshold, 0.5);
            }
            _ => panic!("expected a split"),
        }
        assert!((m.predict_row(array![0.0].view()) - 0.45).abs() < 1e-15);
        assert!((m.predict_row(array![1.0].view()) - 0.55).abs() < 1e-15);
    }

    #[test]
    fn depth_is_respected() {
        let x = ndarray::Array2::from_shape_fn((40, 3), |(i, j)| ((i * 7 + j * 13) % 17) as f64);
        let y = ndarray::Array1::from_shape_fn(40, |i| (i as f64).sin());
        for depth in 1..=4 {
            let m = gbt_fit(x.view(), y.view(), GbtParams { trees: 5, max_depth: depth, learning_rate: 0.3 }).unwrap();
            assert!(m.trees.iter().all(|t| t.depth() <= depth));
        }
    }

    #[test]
    fn constant_target_makes_leaf_only_trees() {
        let x = array![[0.0], [1.0], [2.0]];
        let y = array![3.0, 3.0, 3.0];
        let m = gbt_fit(x.view(), y.view(), GbtParams::default()).unwrap();
        assert!(m.trees.iter().all(|t| t.nodes.len() == 1));
        assert_eq!(m.predict_row(array![5.0].view()), 3.0);
    }

    #[test]
    fn bad_params_rejected() {
        let x = array![[0.0], [1.0]];
        let y = array![0.0, 1.0];
        let p = GbtParams { learning_rate: 0.0, ..GbtParams::default() };
        assert!(matches!(gbt_fit(x.view(), y.view(), p), Err(Error::Config(_))));
    }
}

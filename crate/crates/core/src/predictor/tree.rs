use serde::{Deserialize, Serialize};

/// Node of a regression tree, stored in a flat arena.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf {
        value: f64,
    },
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
}

#[derive(Clone, Copy, Debug)]
pub(crate) struct GrowParams {
    pub max_depth: usize,
    pub min_leaf: usize,
}

/// CART regression tree with axis-aligned splits and mean-valued leaves.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegressionTree {
    pub nodes: Vec<TreeNode>,
}

impl RegressionTree {
    /// Grows a tree on the rows listed in `rows` (duplicates allowed, as
    /// produced by bootstrapping). SSE reductions are added to `importance`.
    pub(crate) fn grow(x: &[Vec<f64>], y: &[f64], rows: &[usize], params: GrowParams, importance: &mut [f64]) -> Self {
        let mut tree = RegressionTree { nodes: Vec::new() };
        let mut rows = rows.to_vec();
        tree.grow_node(x, y, &mut rows, 0, params, importance);
        tree
    }

    fn grow_node(
        &mut self,
        x: &[Vec<f64>],
        y: &[f64],
        rows: &mut [usize],
        depth: usize,
        params: GrowParams,
        importance: &mut [f64],
    ) -> usize {
        let id = self.nodes.len();
        let n = rows.len() as f64;
        let sum: f64 = rows.iter().map(|&r| y[r]).sum();
        let mean = sum / n;
        self.nodes.push(TreeNode::Leaf { value: mean });

        if depth >= params.max_depth || rows.len() < 2 * params.min_leaf.max(1) {
            return id;
        }
        let Some(split) = best_split(x, y, rows, params.min_leaf.max(1)) else {
            return id;
        };
        importance[split.feature] += split.gain;

        // Left side first, row ids ascending within each side.
        rows.sort_by(|a, b| {
            let ka = x[*a][split.feature] > split.threshold;
            let kb = x[*b][split.feature] > split.threshold;
            ka.cmp(&kb).then(a.cmp(b))
        });
        let n_left = rows.iter().filter(|&&r| x[r][split.feature] <= split.threshold).count();
        let (left_rows, right_rows) = rows.split_at_mut(n_left);
        let left = self.grow_node(x, y, left_rows, depth + 1, params, importance);
        let right = self.grow_node(x, y, right_rows, depth + 1, params, importance);
        self.nodes[id] = TreeNode::Split {
            feature: split.feature,
            threshold: split.threshold,
            left,
            right,
        };
        id
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if features[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n, TreeNode::Leaf { .. })).count()
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[TreeNode], i: usize) -> usize {
            match &nodes[i] {
                TreeNode::Leaf { .. } => 0,
                TreeNode::Split { left, right, .. } => 1 + walk(nodes, *left).max(walk(nodes, *right)),
            }
        }
        walk(&self.nodes, 0)
    }
}

struct Split {
    feature: usize,
    threshold: f64,
    gain: f64,
}

fn best_split(x: &[Vec<f64>], y: &[f64], rows: &[usize], min_leaf: usize) -> Option<Split> {
    let n = rows.len();
    let n_features = x[rows[0]].len();
    let total: f64 = rows.iter().map(|&r| y[r]).sum();
    let total_sq: f64 = rows.iter().map(|&r| y[r] * y[r]).sum();
    let parent_sse = total_sq - total * total / n as f64;
    if parent_sse <= 1e-12 * total_sq.max(1e-300) {
        return None;
    }

    let mut best: Option<Split> = None;
    let mut order: Vec<usize> = rows.to_vec();
    #[allow(clippy::needless_range_loop)]
    for f in 0..n_features {
        order.sort_by(|a, b| x[*a][f].total_cmp(&x[*b][f]).then(a.cmp(b)));
        let mut left_sum = 0.0;
        let mut left_sq = 0.0;
        for i in 0..n - 1 {
            let r = order[i];
            left_sum += y[r];
            left_sq += y[r] * y[r];
            let n_left = i + 1;
            let here = x[r][f];
            let next = x[order[i + 1]][f];
            if here == next || n_left < min_leaf || n - n_left < min_leaf {
                continue;
            }
            let n_right = (n - n_left) as f64;
            let right_sum = total - left_sum;
            let right_sq = total_sq - left_sq;
            let sse = (left_sq - left_sum * left_sum / n_left as f64) + (right_sq - right_sum * right_sum / n_right);
            let gain = parent_sse - sse;
            if gain > best.as_ref().map_or(1e-12 * parent_sse, |b| b.gain) {
                best = Some(Split {
                    feature: f,
                    threshold: 0.5 * (here + next),
                    gain,
                });
            }
        }
    }
    best
}

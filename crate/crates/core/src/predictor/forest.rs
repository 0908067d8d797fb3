use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tree::{GrowParams, RegressionTree};
use crate::error::{Error, Result};

/// Training knobs of a tree ensemble.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Hyperparams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// Sample rows with replacement for each tree.
    pub bootstrap: bool,
    /// Fit trees on `ln(target)` and average in log space. Keeps relative
    /// errors balanced across targets spanning orders of magnitude.
    pub log_target: bool,
}

impl Default for Hyperparams {
    fn default() -> Self {
        Hyperparams {
            n_trees: 100,
            max_depth: 12,
            min_leaf: 2,
            bootstrap: true,
            log_target: true,
        }
    }
}

/// Random-forest regressor: the prediction is the mean over trees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    pub seed: u64,
    pub log_target: bool,
    pub trees: Vec<RegressionTree>,
    /// Unnormalized impurity decrease per feature, summed over trees.
    pub impurity_decrease: Vec<f64>,
}

impl EnsembleModel {
    /// Fits an ensemble on rows `x` (all the same width) and targets `y`.
    pub fn fit(x: &[Vec<f64>], y: &[f64], hyper: &Hyperparams, seed: u64) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::Data("cannot train on an empty set".into()));
        }
        if x.len() != y.len() {
            return Err(Error::Data(format!("{} feature rows for {} targets", x.len(), y.len())));
        }
        if hyper.n_trees == 0 {
            return Err(Error::Config("n_trees must be >= 1".into()));
        }
        let width = x[0].len();
        if x.iter().any(|r| r.len() != width || r.iter().any(|v| !v.is_finite())) {
            return Err(Error::Data("feature rows must be finite and of equal width".into()));
        }
        let target: Vec<f64> = if hyper.log_target {
            if y.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
                return Err(Error::Data("log-target training needs positive finite targets".into()));
            }
            y.iter().map(|v| v.ln()).collect()
        } else {
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Data("targets must be finite".into()));
            }
            y.to_vec()
        };

        let params = GrowParams {
            max_depth: hyper.max_depth,
            min_leaf: hyper.min_leaf,
        };
        let n = x.len();
        let mut importance = vec![0.0; width];
        let mut trees = Vec::with_capacity(hyper.n_trees);
        for t in 0..hyper.n_trees {
            let rows: Vec<usize> = if hyper.bootstrap {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                rng.set_stream(t as u64);
                (0..n).map(|_| rng.random_range(0..n)).collect()
            } else {
                (0..n).collect()
            };
            trees.push(RegressionTree::grow(x, &target, &rows, params, &mut importance));
        }
        Ok(EnsembleModel {
            n_trees: hyper.n_trees,
            max_depth: hyper.max_depth,
            min_leaf: hyper.min_leaf,
            seed,
            log_target: hyper.log_target,
            trees,
            impurity_decrease: importance,
        })
    }

    pub fn predict(&self, features: &[f64]) -> f64 {
        let mean = self.trees.iter().map(|t| t.predict(features)).sum::<f64>() / self.trees.len() as f64;
        if self.log_target {
            mean.exp()
        } else {
            mean
        }
    }

    /// Impurity-decrease importance normalized to sum to one (all zeros when
    /// no tree ever split).
    pub fn importance(&self) -> Vec<f64> {
        let total: f64 = self.impurity_decrease.iter().sum();
        if total > 0.0 {
            self.impurity_decrease.iter().map(|v| v / total).collect()
        } else {
            vec![0.0; self.impurity_decrease.len()]
        }
    }
}

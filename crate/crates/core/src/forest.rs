//! Random forest: bootstrap-aggregated classification trees with per-split
//! feature subsampling, hard (majority) and soft (probability-averaging)
//! voting.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::matrix::Matrix;
use crate::tree::{fit_classification_tree_on, DecisionTree, TreeParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VotingMode {
    Hard,
    Soft,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ForestParams {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub features_per_split: usize,
    pub seed: u64,
    pub voting_mode: VotingMode,
    /// Test hook: with bootstrap off every tree sees the full sample.
    pub bootstrap: bool,
}

impl Default for ForestParams {
    fn default() -> Self {
        ForestParams {
            n_trees: 200,
            max_depth: 16,
            min_samples_leaf: 1,
            features_per_split: 4, // ceil(sqrt(12))
            seed: 0,
            voting_mode: VotingMode::Soft,
            bootstrap: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ForestModel {
    pub trees: Vec<DecisionTree>,
    pub params: ForestParams,
    pub n_train: usize,
}

/// Majority vote; ties break toward the lower class index.
pub fn forest_hard_vote(per_tree_labels: &[usize]) -> Result<usize, ModelError> {
    if per_tree_labels.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let ones = per_tree_labels.iter().filter(|&&l| l == 1).count();
    let zeros = per_tree_labels.len() - ones;
    Ok(if ones > zeros { 1 } else { 0 })
}

/// Elementwise mean of class-probability vectors.
pub fn forest_soft_vote(per_tree_probs: &[Vec<f64>]) -> Result<Vec<f64>, ModelError> {
    if per_tree_probs.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let k = per_tree_probs[0].len();
    for p in per_tree_probs {
        if p.len() != k {
            return Err(ModelError::LengthMismatch(k, p.len()));
        }
        let s: f64 = p.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(ModelError::NotNormalized(s));
        }
    }
    let mut mean = vec![0.0; k];
    for p in per_tree_probs {
        for (m, v) in mean.iter_mut().zip(p) {
            *m += v;
        }
    }
    let n = per_tree_probs.len() as f64;
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Index of the maximum; ties break toward the lower index.
pub fn argmax_class(probs: &[f64]) -> Result<usize, ModelError> {
    if probs.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    let mut best = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per-tree bootstrap seed derived from the master seed; the trained model
/// is independent of any scheduling.
fn tree_seed(master: u64, tree_idx: usize) -> u64 {
    master.wrapping_add((tree_idx as u64).wrapping_mul(0x9E3779B97F4A7C15))
}

pub fn fit_forest(
    x: &Matrix,
    y: &[usize],
    params: &ForestParams,
) -> Result<ForestModel, ModelError> {
    if params.n_trees < 1 {
        return Err(ModelError::InvalidConfig("n_trees must be >= 1".into()));
    }
    if x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(ModelError::ShapeMismatch(format!("{} rows vs {} labels", x.rows(), y.len())));
    }
    let n = x.rows();
    let mut trees = Vec::with_capacity(params.n_trees);
    for t in 0..params.n_trees {
        let seed = tree_seed(params.seed, t);
        let indices: Vec<u32> = if params.bootstrap {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            (0..n).map(|_| rng.gen_range(0..n) as u32).collect()
        } else {
            (0..n as u32).collect()
        };
        let tp = TreeParams {
            max_depth: params.max_depth,
            min_samples_leaf: params.min_samples_leaf,
            features_per_split: Some(params.features_per_split),
            seed,
        };
        trees.push(fit_classification_tree_on(x, y, &tp, &indices)?);
    }
    Ok(ForestModel { trees, params: params.clone(), n_train: n })
}

impl ForestModel {
    /// Soft prediction: mean of per-tree leaf-frequency probabilities.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        let per_tree: Vec<Vec<f64>> =
            self.trees.iter().map(|t| t.predict_proba(x).to_vec()).collect();
        forest_soft_vote(&per_tree).expect("trained forest has trees")
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        match self.params.voting_mode {
            VotingMode::Soft => argmax_class(&self.predict_proba(x)).unwrap(),
            VotingMode::Hard => {
                let labels: Vec<usize> =
                    self.trees.iter().map(|t| t.predict_class(x)).collect();
                forest_hard_vote(&labels).unwrap()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureImportance {
    /// Normalized to sum 1 unless degenerate.
    pub scores: Vec<f64>,
    /// True when no split produced any impurity decrease; scores are then uniform.
    pub degenerate: bool,
}

/// Mean impurity decrease per feature across trees, normalized to sum 1.
pub fn forest_feature_importance(model: &ForestModel) -> Result<FeatureImportance, ModelError> {
    if model.trees.is_empty() {
        return Err(ModelError::UntrainedModel);
    }
    let d = model.trees[0].n_features;
    let mut acc = vec![0.0; d];
    for tree in &model.trees {
        tree.accumulate_importance(&mut acc);
    }
    let total: f64 = acc.iter().sum();
    if total <= 0.0 {
        return Ok(FeatureImportance { scores: vec![1.0 / d as f64; d], degenerate: true });
    }
    for v in &mut acc {
        *v /= total;
    }
    Ok(FeatureImportance { scores: acc, degenerate: false })
}

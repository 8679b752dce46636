//! First-order gradient boosting with shrinkage over regression trees.
//! Logistic loss for classification, squared error for regression.
//! Split search runs exact or over equal-frequency histograms.

use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::matrix::Matrix;
use crate::tree::{
    build_binning, fit_regression_tree, fit_regression_tree_binned, DecisionTree, TreeParams,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SplitMode {
    Exact,
    Histogram { n_bins: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GbtLoss {
    Logistic,
    SquaredError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GbtConfig {
    pub n_stages: usize,
    pub learning_rate: f64,
    pub max_depth: usize,
    pub min_samples_leaf: usize,
    pub split_mode: SplitMode,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        GbtConfig {
            n_stages: 300,
            learning_rate: 0.1,
            max_depth: 6,
            min_samples_leaf: 1,
            split_mode: SplitMode::Exact,
            seed: 0,
        }
    }
}

impl GbtConfig {
    pub fn histogram() -> Self {
        GbtConfig { split_mode: SplitMode::Histogram { n_bins: 256 }, ..Default::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub stages: Vec<DecisionTree>,
    pub learning_rate: f64,
    /// Initial score: log-odds of the positive prior (logistic) or the
    /// target mean (squared error).
    pub base_score: f64,
    pub loss: GbtLoss,
    pub config: GbtConfig,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn raw_score(model: &GbtModel, x: &[f64]) -> f64 {
    model.base_score
        + model.learning_rate
            * model.stages.iter().map(|t| t.predict_value(x)).sum::<f64>()
}

impl GbtModel {
    /// Positive-class probability (logistic loss only).
    pub fn predict_proba_pos(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.loss, GbtLoss::Logistic);
        sigmoid(raw_score(self, x))
    }

    pub fn predict_proba(&self, x: &[f64]) -> [f64; 2] {
        let p = self.predict_proba_pos(x);
        [1.0 - p, p]
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        usize::from(self.predict_proba_pos(x) > 0.5)
    }

    /// Regression prediction (squared-error loss).
    pub fn predict_value(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(self.loss, GbtLoss::SquaredError);
        raw_score(self, x)
    }
}

fn validate_config(config: &GbtConfig) -> Result<(), ModelError> {
    if config.learning_rate <= 0.0 {
        return Err(ModelError::InvalidConfig("learning_rate must be positive".into()));
    }
    if let SplitMode::Histogram { n_bins } = config.split_mode {
        if n_bins < 2 {
            return Err(ModelError::InvalidConfig("n_bins must be >= 2".into()));
        }
    }
    Ok(())
}

/// Binary classifier trained on the negative gradient of logistic loss.
/// `n_stages = 0` yields the prior-only model.
pub fn fit_gbt(x: &Matrix, y: &[usize], config: &GbtConfig) -> Result<GbtModel, ModelError> {
    validate_config(config)?;
    if x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(ModelError::ShapeMismatch(format!("{} rows vs {} labels", x.rows(), y.len())));
    }
    if y.iter().any(|&l| l > 1) {
        return Err(ModelError::InvalidConfig("labels must be binary".into()));
    }
    let n = x.rows() as f64;
    let pos = y.iter().filter(|&&l| l == 1).count() as f64;
    let prior = (pos / n).clamp(1e-6, 1.0 - 1e-6);
    let base_score = (prior / (1.0 - prior)).ln();

    let binning = match config.split_mode {
        SplitMode::Histogram { n_bins } => Some(build_binning(x, n_bins)),
        SplitMode::Exact => None,
    };

    let mut scores = vec![base_score; x.rows()];
    let mut stages = Vec::with_capacity(config.n_stages);
    let mut residuals = vec![0.0; x.rows()];
    for stage in 0..config.n_stages {
        for i in 0..x.rows() {
            residuals[i] = y[i] as f64 - sigmoid(scores[i]);
        }
        let tp = TreeParams {
            max_depth: config.max_depth,
            min_samples_leaf: config.min_samples_leaf,
            features_per_split: None,
            seed: config.seed.wrapping_add(stage as u64),
        };
        let tree = match &binning {
            Some(b) => fit_regression_tree_binned(x, &residuals, &tp, b)?,
            None => fit_regression_tree(x, &residuals, &tp)?,
        };
        for i in 0..x.rows() {
            scores[i] += config.learning_rate * tree.predict_value(x.row(i));
        }
        stages.push(tree);
    }
    Ok(GbtModel {
        stages,
        learning_rate: config.learning_rate,
        base_score,
        loss: GbtLoss::Logistic,
        config: config.clone(),
    })
}

/// Squared-error regression booster; stage trees fit plain residuals,
/// base score is the target mean.
pub fn fit_gbt_regression(
    x: &Matrix,
    y: &[f64],
    config: &GbtConfig,
) -> Result<GbtModel, ModelError> {
    validate_config(config)?;
    if x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(ModelError::ShapeMismatch(format!("{} rows vs {} targets", x.rows(), y.len())));
    }
    let base_score = y.iter().sum::<f64>() / y.len() as f64;
    let binning = match config.split_mode {
        SplitMode::Histogram { n_bins } => Some(build_binning(x, n_bins)),
        SplitMode::Exact => None,
    };
    let mut scores = vec![base_score; x.rows()];
    let mut stages = Vec::with_capacity(config.n_stages);
    let mut residuals = vec![0.0; x.rows()];
    for stage in 0..config.n_stages {
        for i in 0..x.rows() {
            residuals[i] = y[i] - scores[i];
        }
        let tp = TreeParams {
            max_depth: config.max_depth,
            min_samples_leaf: config.min_samples_leaf,
            features_per_split: None,
            seed: config.seed.wrapping_add(stage as u64),
        };
        let tree = match &binning {
            Some(b) => fit_regression_tree_binned(x, &residuals, &tp, b)?,
            None => fit_regression_tree(x, &residuals, &tp)?,
        };
        for i in 0..x.rows() {
            scores[i] += config.learning_rate * tree.predict_value(x.row(i));
        }
        stages.push(tree);
    }
    Ok(GbtModel {
        stages,
        learning_rate: config.learning_rate,
        base_score,
        loss: GbtLoss::SquaredError,
        config: config.clone(),
    })
}

/// Mean logistic loss of a classifier on a labeled set.
pub fn mean_logistic_loss(model: &GbtModel, x: &Matrix, y: &[usize]) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let p = model.predict_proba_pos(x.row(i)).clamp(1e-12, 1.0 - 1e-12);
        total -= if y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    total / x.rows() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn linearly_separable(n: usize, seed: u64) -> (Matrix, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
        while rows.len() < n {
            let r = vec![rng.gen::<f64>() * 4.0 - 2.0, rng.gen::<f64>() * 4.0 - 2.0];
            // keep a margin around the separating line
            if (r[0] + r[1] - 0.2).abs() > 0.2 {
                rows.push(r);
            }
        }
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[0] + r[1] > 0.2)).collect();
        (Matrix::from_rows(&rows), y)
    }

    #[test]
    fn zero_stages_predicts_prior() {
        let (x, y) = linearly_separable(40, 1);
        let config = GbtConfig { n_stages: 0, ..Default::default() };
        let model = fit_gbt(&x, &y, &config).unwrap();
        let prior = y.iter().filter(|&&l| l == 1).count() as f64 / y.len() as f64;
        for i in 0..x.rows() {
            assert!((model.predict_proba_pos(x.row(i)) - prior).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_stages_zero_base_score_is_half() {
        let model = GbtModel {
            stages: vec![],
            learning_rate: 0.1,
            base_score: 0.0,
            loss: GbtLoss::Logistic,
            config: GbtConfig::default(),
        };
        assert_eq!(model.predict_proba_pos(&[1.0, 2.0]), 0.5);
    }

    #[test]
    fn separable_toy_set_reaches_perfect_training_accuracy() {
        let (x, y) = linearly_separable(100, 2);
        let config = GbtConfig { n_stages: 50, learning_rate: 0.1, max_depth: 3, ..Default::default() };
        let model = fit_gbt(&x, &y, &config).unwrap();
        // exhaustive check over the training grid
        for i in 0..x.rows() {
            assert_eq!(model.predict_class(x.row(i)), y[i], "row {i}");
        }
    }

    #[test]
    fn training_loss_is_non_increasing() {
        let (x, y) = linearly_separable(150, 3);
        let config = GbtConfig { n_stages: 40, learning_rate: 0.3, max_depth: 2, ..Default::default() };
        let full = fit_gbt(&x, &y, &config).unwrap();
        let mut prev = f64::INFINITY;
        for k in 0..=40 {
            let partial = GbtModel {
                stages: full.stages[..k].to_vec(),
                learning_rate: full.learning_rate,
                base_score: full.base_score,
                loss: GbtLoss::Logistic,
                config: config.clone(),
            };
            let loss = mean_logistic_loss(&partial, &x, &y);
            assert!(loss <= prev + 1e-12, "stage {k}: {loss} > {prev}");
            prev = loss;
        }
    }

    #[test]
    fn histogram_and_exact_agree_on_easy_data() {
        let (x, y) = linearly_separable(400, 4);
        let exact = fit_gbt(&x, &y, &GbtConfig { n_stages: 60, ..Default::default() }).unwrap();
        let hist = fit_gbt(
            &x,
            &y,
            &GbtConfig { n_stages: 60, split_mode: SplitMode::Histogram { n_bins: 64 }, ..Default::default() },
        )
        .unwrap();
        let acc = |m: &GbtModel| {
            (0..x.rows()).filter(|&i| m.predict_class(x.row(i)) == y[i]).count() as f64
                / x.rows() as f64
        };
        assert!((acc(&exact) - acc(&hist)).abs() < 0.05);
    }

    #[test]
    fn invalid_config_rejected() {
        let (x, y) = linearly_separable(10, 5);
        let bad = GbtConfig { learning_rate: 0.0, ..Default::default() };
        assert!(matches!(fit_gbt(&x, &y, &bad), Err(ModelError::InvalidConfig(_))));
    }

    #[test]
    fn regression_fits_constant_exactly() {
        let x = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let y = [0.7, 0.7, 0.7];
        let model =
            fit_gbt_regression(&x, &y, &GbtConfig { n_stages: 5, ..Default::default() }).unwrap();
        for i in 0..3 {
            assert!((model.predict_value(x.row(i)) - 0.7).abs() < 1e-6);
        }
    }

    #[test]
    fn fit_is_deterministic() {
        let (x, y) = linearly_separable(60, 6);
        let config = GbtConfig { n_stages: 10, ..Default::default() };
        assert_eq!(fit_gbt(&x, &y, &config).unwrap(), fit_gbt(&x, &y, &config).unwrap());
    }
}

//! Stacking: 5-fold out-of-fold predictions from the four base learners
//! (random forest, exact GBT, histogram GBT, MLP) feed a logistic-regression
//! meta-learner; base models are refit on the full training set for
//! inference.

use serde::{Deserialize, Serialize};

use crate::data::{standardize_apply, standardize_fit, stratified_folds, Dataset, Label, ScalerParams};
use crate::error::ModelError;
use crate::forest::{fit_forest, ForestModel, ForestParams};
use crate::gbt::{fit_gbt, GbtConfig, GbtModel};
use crate::matrix::Matrix;
use crate::mlp::{train_ann_classifier, AnnConfig, MlpModel};

pub const N_BASE_MODELS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseModel {
    Forest(ForestModel),
    Gbt(GbtModel),
    /// The MLP carries the scaler fit on its own training rows.
    Ann { model: MlpModel, scaler: ScalerParams },
}

impl BaseModel {
    /// Positive-class (unstable) probability from raw 12-dim features.
    pub fn predict_proba_pos(&self, features: &[f64]) -> f64 {
        match self {
            BaseModel::Forest(m) => m.predict_proba(features)[1],
            BaseModel::Gbt(m) => m.predict_proba_pos(features),
            BaseModel::Ann { model, scaler } => {
                let scaled: Vec<f64> = features
                    .iter()
                    .enumerate()
                    .map(|(j, &v)| (v - scaler.mean[j]) / scaler.std[j])
                    .collect();
                model.predict_proba_pos(&scaled)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum BaseConfig {
    Forest(ForestParams),
    Gbt(GbtConfig),
    Ann(AnnConfig),
}

impl BaseConfig {
    pub fn name(&self) -> &'static str {
        match self {
            BaseConfig::Forest(_) => "forest",
            BaseConfig::Gbt(c) => match c.split_mode {
                crate::gbt::SplitMode::Exact => "gbt-exact",
                crate::gbt::SplitMode::Histogram { .. } => "gbt-histogram",
            },
            BaseConfig::Ann(_) => "ann",
        }
    }

    fn with_seed(&self, seed: u64) -> BaseConfig {
        let mut c = self.clone();
        match &mut c {
            BaseConfig::Forest(p) => p.seed = seed,
            BaseConfig::Gbt(p) => p.seed = seed,
            BaseConfig::Ann(p) => p.seed = seed,
        }
        c
    }

    fn seed(&self) -> u64 {
        match self {
            BaseConfig::Forest(p) => p.seed,
            BaseConfig::Gbt(p) => p.seed,
            BaseConfig::Ann(p) => p.seed,
        }
    }

    pub fn fit(&self, x: &Matrix, y: &[usize]) -> Result<BaseModel, ModelError> {
        match self {
            BaseConfig::Forest(p) => Ok(BaseModel::Forest(fit_forest(x, y, p)?)),
            BaseConfig::Gbt(p) => Ok(BaseModel::Gbt(fit_gbt(x, y, p)?)),
            BaseConfig::Ann(p) => {
                let scaler = standardize_fit(x).map_err(|e| match e {
                    crate::data::DataError::ZeroVariance(j) => ModelError::ZeroVariance(j),
                    other => ModelError::InvalidConfig(other.to_string()),
                })?;
                let scaled = standardize_apply(x, &scaler);
                let model = train_ann_classifier(&scaled, y, p)?;
                Ok(BaseModel::Ann { model, scaler })
            }
        }
    }
}

/// The four base learners with this crate's default sizes.
pub fn default_base_configs() -> [BaseConfig; N_BASE_MODELS] {
    [
        BaseConfig::Forest(ForestParams::default()),
        BaseConfig::Gbt(GbtConfig::default()),
        BaseConfig::Gbt(GbtConfig::histogram()),
        BaseConfig::Ann(AnnConfig::default()),
    ]
}

/// Out-of-fold positive-class probabilities: N×4, entry (i, m) produced by
/// a model whose training fold excludes row i. Also returns the fold
/// assignment for leakage bookkeeping.
pub fn oof_predictions(
    x: &Matrix,
    labels: &[Label],
    base_configs: &[BaseConfig],
    k: usize,
    seed: u64,
) -> Result<(Matrix, Vec<usize>), ModelError> {
    let n = x.rows();
    if n < k {
        return Err(ModelError::TooFewRows { need: k, have: n });
    }
    for class in [Label::Stable, Label::Unstable] {
        let count = labels.iter().filter(|&&l| l == class).count();
        if count < k {
            return Err(ModelError::FoldDegenerate {
                class: class.as_str().to_string(),
                count,
                need: k,
            });
        }
    }
    let folds = stratified_folds(labels, k, seed);
    let y: Vec<usize> = labels.iter().map(|l| l.index()).collect();
    let mut meta = Matrix::zeros(n, base_configs.len());

    for fold in 0..k {
        let train_idx: Vec<usize> = (0..n).filter(|&i| folds[i] != fold).collect();
        let hold_idx: Vec<usize> = (0..n).filter(|&i| folds[i] == fold).collect();
        let train_rows: Vec<Vec<f64>> = train_idx.iter().map(|&i| x.row(i).to_vec()).collect();
        let train_x = Matrix::from_rows(&train_rows);
        let train_y: Vec<usize> = train_idx.iter().map(|&i| y[i]).collect();
        for (m, config) in base_configs.iter().enumerate() {
            let fold_seed = config.seed().wrapping_add((fold as u64 + 1).wrapping_mul(0x9E37));
            let model = config.with_seed(fold_seed).fit(&train_x, &train_y)?;
            for &i in &hold_idx {
                meta.set(i, m, model.predict_proba_pos(x.row(i)));
            }
        }
    }
    Ok((meta, folds))
}

/// Logistic regression trained by full-batch gradient descent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub weights: Vec<f64>,
    pub bias: f64,
}

impl LogisticModel {
    pub fn predict_proba(&self, x: &[f64]) -> f64 {
        let z = self.bias
            + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
        1.0 / (1.0 + (-z).exp())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LogisticConfig {
    pub steps: usize,
    pub learning_rate: f64,
}

impl Default for LogisticConfig {
    fn default() -> Self {
        LogisticConfig { steps: 2000, learning_rate: 0.1 }
    }
}

pub fn fit_logistic(
    meta_x: &Matrix,
    y: &[usize],
    config: &LogisticConfig,
) -> Result<LogisticModel, ModelError> {
    if meta_x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != meta_x.rows() {
        return Err(ModelError::ShapeMismatch(format!(
            "{} rows vs {} labels",
            meta_x.rows(),
            y.len()
        )));
    }
    let n = meta_x.rows();
    let d = meta_x.cols();
    let mut model = LogisticModel { weights: vec![0.0; d], bias: 0.0 };
    let inv_n = 1.0 / n as f64;
    for _ in 0..config.steps {
        let mut gw = vec![0.0; d];
        let mut gb = 0.0;
        for i in 0..n {
            let err = model.predict_proba(meta_x.row(i)) - y[i] as f64;
            for (g, &v) in gw.iter_mut().zip(meta_x.row(i)) {
                *g += err * v;
            }
            gb += err;
        }
        for (w, g) in model.weights.iter_mut().zip(&gw) {
            *w -= config.learning_rate * g * inv_n;
        }
        model.bias -= config.learning_rate * gb * inv_n;
    }
    Ok(model)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingConfig {
    pub base: Vec<BaseConfig>,
    pub k: usize,
    pub seed: u64,
    pub meta: LogisticConfig,
}

impl Default for StackingConfig {
    fn default() -> Self {
        StackingConfig {
            base: default_base_configs().to_vec(),
            k: 5,
            seed: 0,
            meta: LogisticConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackingModel {
    pub base: Vec<BaseModel>,
    pub meta: LogisticModel,
    pub k: usize,
    pub seed: u64,
}

/// Fit the meta-learner on OOF predictions, then refit every base model on
/// the full training set for inference-time use.
pub fn fit_stacking(train: &Dataset, config: &StackingConfig) -> Result<StackingModel, ModelError> {
    let x = train.feature_matrix();
    let labels = train.labels();
    let y = train.label_indices();
    let (meta_x, _folds) = oof_predictions(&x, &labels, &config.base, config.k, config.seed)?;
    let meta = fit_logistic(&meta_x, &y, &config.meta)?;
    let mut base = Vec::with_capacity(config.base.len());
    for c in &config.base {
        base.push(c.fit(&x, &y)?);
    }
    Ok(StackingModel { base, meta, k: config.k, seed: config.seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackingPrediction {
    pub label: Label,
    pub probability: f64,
}

impl StackingModel {
    /// Meta sigmoid over the four base probabilities; 0.5 threshold with
    /// ties to stable.
    pub fn predict(&self, features: &[f64]) -> StackingPrediction {
        let meta_features: Vec<f64> =
            self.base.iter().map(|b| b.predict_proba_pos(features)).collect();
        let probability = self.meta.predict_proba(&meta_features);
        let label = if probability > 0.5 { Label::Unstable } else { Label::Stable };
        StackingPrediction { label, probability }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen;

    fn small_configs(seed: u64) -> Vec<BaseConfig> {
        vec![
            BaseConfig::Forest(ForestParams {
                n_trees: 10,
                max_depth: 8,
                seed,
                ..Default::default()
            }),
            BaseConfig::Gbt(GbtConfig { n_stages: 20, max_depth: 3, seed, ..Default::default() }),
            BaseConfig::Gbt(GbtConfig {
                n_stages: 20,
                max_depth: 3,
                split_mode: crate::gbt::SplitMode::Histogram { n_bins: 32 },
                seed,
                ..Default::default()
            }),
            BaseConfig::Ann(AnnConfig { epochs: 3, seed, ..Default::default() }),
        ]
    }

    #[test]
    fn oof_partition_arithmetic() {
        let ds = datagen::generate(100, 5);
        let x = ds.feature_matrix();
        let (meta, folds) = oof_predictions(&x, &ds.labels(), &small_configs(1), 5, 3).unwrap();
        assert_eq!(meta.rows(), 100);
        assert_eq!(meta.cols(), 4);
        // every fold holds roughly 20 rows and every row is assigned once
        for fold in 0..5 {
            let size = folds.iter().filter(|&&f| f == fold).count();
            assert!((18..=22).contains(&size), "fold {fold} has {size}");
        }
        // every entry is a populated probability
        for i in 0..100 {
            for m in 0..4 {
                let v = meta.get(i, m);
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn oof_rejects_constant_labels() {
        let mut ds = datagen::generate(50, 6);
        let records: Vec<_> = ds
            .records()
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.stab = -0.01;
                r.stabf = Label::Stable;
                r
            })
            .collect();
        ds = Dataset::new(records);
        let x = ds.feature_matrix();
        assert!(matches!(
            oof_predictions(&x, &ds.labels(), &small_configs(1), 5, 3),
            Err(ModelError::FoldDegenerate { .. })
        ));
    }

    #[test]
    fn logistic_separable_and_zero_steps() {
        let x = Matrix::from_rows(&[vec![0.0], vec![1.0], vec![0.1], vec![0.9]]);
        let y = [0usize, 1, 0, 1];
        let zero = fit_logistic(&x, &y, &LogisticConfig { steps: 0, learning_rate: 0.1 }).unwrap();
        assert_eq!(zero.weights, vec![0.0]);
        for i in 0..4 {
            assert_eq!(zero.predict_proba(x.row(i)), 0.5);
        }
        let m = fit_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        for i in 0..4 {
            assert_eq!(usize::from(m.predict_proba(x.row(i)) > 0.5), y[i]);
        }
    }

    #[test]
    fn logistic_oracle_feature_gets_positive_weight() {
        // one meta-feature equals the true label
        let rows: Vec<Vec<f64>> =
            (0..40).map(|i| vec![(i % 2) as f64, 0.5]).collect();
        let y: Vec<usize> = (0..40).map(|i| i % 2).collect();
        let x = Matrix::from_rows(&rows);
        let m = fit_logistic(&x, &y, &LogisticConfig::default()).unwrap();
        assert!(m.weights[0] > 0.0);
        for i in 0..40 {
            assert_eq!(usize::from(m.predict_proba(x.row(i)) > 0.5), y[i]);
        }
    }

    #[test]
    fn stacking_fit_predict_and_determinism() {
        let ds = datagen::generate(200, 7);
        let config = StackingConfig { base: small_configs(2), k: 5, seed: 9, ..Default::default() };
        let a = fit_stacking(&ds, &config).unwrap();
        let b = fit_stacking(&ds, &config).unwrap();
        assert_eq!(a.meta, b.meta);
        let probe = ds.records()[0].features();
        let pred = a.predict(&probe);
        assert!(pred.probability > 0.0 && pred.probability < 1.0);
        // training accuracy should comfortably beat chance on this easy set
        let correct = ds
            .records()
            .iter()
            .filter(|r| a.predict(&r.features()).label == r.stabf)
            .count();
        assert!(correct as f64 / ds.len() as f64 > 0.8);
    }

    #[test]
    fn meta_monotone_in_base_probability_with_positive_weight() {
        let meta = LogisticModel { weights: vec![1.0, 0.5, 0.2, 0.1], bias: -0.9 };
        let lo = meta.predict_proba(&[0.2, 0.5, 0.5, 0.5]);
        let hi = meta.predict_proba(&[0.9, 0.5, 0.5, 0.5]);
        assert!(hi > lo);
    }

    #[test]
    fn tie_probability_labels_stable() {
        let model = StackingModel {
            base: vec![],
            meta: LogisticModel { weights: vec![], bias: 0.0 },
            k: 5,
            seed: 0,
        };
        let pred = model.predict(&[0.0; 12]);
        assert_eq!(pred.probability, 0.5);
        assert_eq!(pred.label, Label::Stable);
    }
}

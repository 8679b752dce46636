//! Dense feed-forward network with rectifier hidden units, inverted
//! dropout, and Adam. Serves the tabular classifier and the RL policy /
//! value heads. All arithmetic is f64 and every operation is deterministic
//! given its seed.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::ModelError;
use crate::matrix::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OutputActivation {
    Sigmoid,
    Identity,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    /// weights[l] has shape (layer_sizes[l+1], layer_sizes[l]).
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub output_activation: OutputActivation,
    /// One dropout rate per hidden layer; applied only in train mode.
    pub dropout_rates: Vec<f64>,
}

/// Scaled uniform fan-in initialization, deterministic per seed.
pub fn init_mlp(
    layer_sizes: &[usize],
    output_activation: OutputActivation,
    dropout_rates: &[f64],
    seed: u64,
) -> Result<MlpModel, ModelError> {
    if layer_sizes.len() < 2 {
        return Err(ModelError::InvalidArchitecture("need at least 2 layer sizes".into()));
    }
    if layer_sizes.iter().any(|&s| s == 0) {
        return Err(ModelError::InvalidArchitecture("layer sizes must be positive".into()));
    }
    let n_hidden = layer_sizes.len() - 2;
    if dropout_rates.len() != n_hidden {
        return Err(ModelError::InvalidArchitecture(format!(
            "{} dropout rates for {} hidden layers",
            dropout_rates.len(),
            n_hidden
        )));
    }
    if dropout_rates.iter().any(|&r| !(0.0..1.0).contains(&r)) {
        return Err(ModelError::InvalidArchitecture("dropout rates must be in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut weights = Vec::new();
    let mut biases = Vec::new();
    for w in layer_sizes.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let bound = 1.0 / (fan_in as f64).sqrt();
        let mut m = Matrix::zeros(fan_out, fan_in);
        for v in m.as_mut_slice() {
            *v = rng.gen_range(-bound..bound);
        }
        weights.push(m);
        biases.push(vec![0.0; fan_out]);
    }
    Ok(MlpModel {
        layer_sizes: layer_sizes.to_vec(),
        weights,
        biases,
        output_activation,
        dropout_rates: dropout_rates.to_vec(),
    })
}

/// Closed-form trainable parameter count: sum of in*out + out per layer.
pub fn param_count(layer_sizes: &[usize]) -> usize {
    layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

impl MlpModel {
    pub fn param_count(&self) -> usize {
        param_count(&self.layer_sizes)
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }
}

/// Activations cached by a train-mode forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// inputs[l]: the vector fed into layer l (post-activation, post-dropout).
    inputs: Vec<Vec<f64>>,
    /// pre[l]: pre-activation of layer l.
    pre: Vec<Vec<f64>>,
    /// Dropout scale per hidden layer unit (0 or 1/(1-rate)); empty in
    /// inference shape.
    masks: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

fn apply_output(pre: &[f64], act: OutputActivation) -> Vec<f64> {
    match act {
        OutputActivation::Identity => pre.to_vec(),
        OutputActivation::Sigmoid => pre.iter().map(|&z| 1.0 / (1.0 + (-z).exp())).collect(),
        OutputActivation::Softmax => {
            let max = pre.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = pre.iter().map(|&z| (z - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            exps.into_iter().map(|e| e / sum).collect()
        }
    }
}

impl MlpModel {
    fn affine(&self, layer: usize, input: &[f64]) -> Vec<f64> {
        let w = &self.weights[layer];
        let b = &self.biases[layer];
        let mut out = b.clone();
        for (o, row) in out.iter_mut().zip(w.iter_rows()) {
            let mut acc = 0.0;
            for (wi, xi) in row.iter().zip(input) {
                acc += wi * xi;
            }
            *o += acc;
        }
        out
    }

    /// Deterministic inference-mode forward pass.
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.layer_sizes[0], "input length mismatch");
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            let pre = self.affine(l, &a);
            a = if l + 1 < self.n_layers() {
                pre.into_iter().map(|z| z.max(0.0)).collect()
            } else {
                apply_output(&pre, self.output_activation)
            };
        }
        a
    }

    /// Train-mode forward pass: samples inverted-dropout masks from `rng`
    /// and caches everything `backward` needs.
    pub fn forward_train(&self, x: &[f64], rng: &mut ChaCha8Rng) -> ForwardCache {
        assert_eq!(x.len(), self.layer_sizes[0], "input length mismatch");
        let mut inputs = Vec::with_capacity(self.n_layers());
        let mut pres = Vec::with_capacity(self.n_layers());
        let mut masks = Vec::new();
        let mut a = x.to_vec();
        for l in 0..self.n_layers() {
            inputs.push(a.clone());
            let pre = self.affine(l, &a);
            if l + 1 < self.n_layers() {
                let rate = self.dropout_rates[l];
                let keep = 1.0 - rate;
                let mask: Vec<f64> = pre
                    .iter()
                    .map(|_| {
                        if rate == 0.0 || rng.gen::<f64>() >= rate {
                            1.0 / keep
                        } else {
                            0.0
                        }
                    })
                    .collect();
                a = pre.iter().zip(&mask).map(|(&z, &m)| z.max(0.0) * m).collect();
                masks.push(mask);
            } else {
                a = apply_output(&pre, self.output_activation);
            }
            pres.push(pre);
        }
        ForwardCache { inputs, pre: pres, masks, output: a }
    }
}

/// Parameter gradients, shaped like the model.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub dw: Vec<Matrix>,
    pub db: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(model: &MlpModel) -> Gradients {
        Gradients {
            dw: model.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            db: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn add(&mut self, other: &Gradients) {
        for (a, b) in self.dw.iter_mut().zip(&other.dw) {
            for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                *x += y;
            }
        }
        for (a, b) in self.db.iter_mut().zip(&other.db) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for a in &mut self.dw {
            for x in a.as_mut_slice() {
                *x *= s;
            }
        }
        for a in &mut self.db {
            for x in a.iter_mut() {
                *x *= s;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        let mut acc = 0.0;
        for a in &self.dw {
            for x in a.as_slice() {
                acc += x * x;
            }
        }
        for a in &self.db {
            for x in a {
                acc += x * x;
            }
        }
        acc.sqrt()
    }

    /// Global gradient-norm clipping.
    pub fn clip_norm(&mut self, max_norm: f64) {
        let n = self.norm();
        if n > max_norm && n > 0.0 {
            self.scale(max_norm / n);
        }
    }
}

/// How the loss gradient at the output layer is supplied.
pub enum OutputGrad<'a> {
    /// d loss / d output (post-activation); the output-activation Jacobian
    /// is applied internally.
    WrtOutput(&'a [f64]),
    /// d loss / d pre-activation, for fused losses (e.g. sigmoid + BCE
    /// gives prediction - target).
    WrtPreactivation(&'a [f64]),
}

impl MlpModel {
    /// Backpropagate through a cached train-mode forward pass.
    pub fn backward(&self, cache: &ForwardCache, loss_grad: OutputGrad<'_>) -> Gradients {
        let last = self.n_layers() - 1;
        let mut dz: Vec<f64> = match loss_grad {
            OutputGrad::WrtPreactivation(g) => g.to_vec(),
            OutputGrad::WrtOutput(dy) => {
                let y = &cache.output;
                match self.output_activation {
                    OutputActivation::Identity => dy.to_vec(),
                    OutputActivation::Sigmoid => {
                        y.iter().zip(dy).map(|(&yi, &gi)| gi * yi * (1.0 - yi)).collect()
                    }
                    OutputActivation::Softmax => {
                        let dot: f64 = y.iter().zip(dy).map(|(&yi, &gi)| yi * gi).sum();
                        y.iter().zip(dy).map(|(&yi, &gi)| yi * (gi - dot)).collect()
                    }
                }
            }
        };
        let mut grads = Gradients::zeros_like(self);
        for l in (0..=last).rev() {
            let input = &cache.inputs[l];
            let dwl = &mut grads.dw[l];
            for (j, &dzj) in dz.iter().enumerate() {
                let row = dwl.row_mut(j);
                for (k, &ik) in input.iter().enumerate() {
                    row[k] += dzj * ik;
                }
                grads.db[l][j] += dzj;
            }
            if l == 0 {
                break;
            }
            // gradient w.r.t. the previous hidden layer's pre-activation
            let w = &self.weights[l];
            let prev_pre = &cache.pre[l - 1];
            let mask = &cache.masks[l - 1];
            let mut dprev = vec![0.0; self.layer_sizes[l]];
            for (j, &dzj) in dz.iter().enumerate() {
                let row = w.row(j);
                for (k, d) in dprev.iter_mut().enumerate() {
                    *d += row[k] * dzj;
                }
            }
            for (k, d) in dprev.iter_mut().enumerate() {
                let relu_grad = if prev_pre[k] > 0.0 { 1.0 } else { 0.0 };
                *d *= relu_grad * mask[k];
            }
            dz = dprev;
        }
        grads
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdamState {
    m_w: Vec<Matrix>,
    v_w: Vec<Matrix>,
    m_b: Vec<Vec<f64>>,
    v_b: Vec<Vec<f64>>,
    pub step: u64,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl AdamState {
    pub fn new(model: &MlpModel, learning_rate: f64) -> AdamState {
        AdamState {
            m_w: model.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            v_w: model.weights.iter().map(|w| Matrix::zeros(w.rows(), w.cols())).collect(),
            m_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            v_b: model.biases.iter().map(|b| vec![0.0; b.len()]).collect(),
            step: 0,
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// One bias-corrected Adam update, in place.
pub fn adam_step(model: &mut MlpModel, grads: &Gradients, state: &mut AdamState) {
    state.step += 1;
    let t = state.step as f64;
    let (b1, b2) = (state.beta1, state.beta2);
    let bc1 = 1.0 - b1.powf(t);
    let bc2 = 1.0 - b2.powf(t);
    let lr = state.learning_rate;
    let eps = state.epsilon;

    let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        let m_hat = *m / bc1;
        let v_hat = *v / bc2;
        *p -= lr * m_hat / (v_hat.sqrt() + eps);
    };

    for l in 0..model.weights.len() {
        let w = model.weights[l].as_mut_slice();
        let g = grads.dw[l].as_slice();
        let m = state.m_w[l].as_mut_slice();
        let v = state.v_w[l].as_mut_slice();
        for i in 0..w.len() {
            update(&mut w[i], g[i], &mut m[i], &mut v[i]);
        }
        let b = &mut model.biases[l];
        let gb = &grads.db[l];
        let mb = &mut state.m_b[l];
        let vb = &mut state.v_b[l];
        for i in 0..b.len() {
            update(&mut b[i], gb[i], &mut mb[i], &mut vb[i]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub hidden: Vec<usize>,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for AnnConfig {
    fn default() -> Self {
        AnnConfig {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            hidden: vec![64, 32],
            dropout: 0.5,
            seed: 0,
        }
    }
}

/// Binary cross-entropy classifier over standardized features:
/// architecture [d, 64, 32, 1], dropout after each hidden layer, sigmoid
/// output, mini-batches shuffled per epoch from a seeded stream.
pub fn train_ann_classifier(
    x: &Matrix,
    y: &[usize],
    config: &AnnConfig,
) -> Result<MlpModel, ModelError> {
    if x.rows() == 0 {
        return Err(ModelError::EmptyInput);
    }
    if y.len() != x.rows() {
        return Err(ModelError::ShapeMismatch(format!("{} rows vs {} labels", x.rows(), y.len())));
    }
    let mut sizes = vec![x.cols()];
    sizes.extend_from_slice(&config.hidden);
    sizes.push(1);
    let dropout = vec![config.dropout; config.hidden.len()];
    let mut model = init_mlp(&sizes, OutputActivation::Sigmoid, &dropout, config.seed)?;
    let mut state = AdamState::new(&model, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..x.rows()).collect();
    for _ in 0..config.epochs {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
        for batch in order.chunks(config.batch_size) {
            let mut grads = Gradients::zeros_like(&model);
            for &i in batch {
                let cache = model.forward_train(x.row(i), &mut rng);
                // fused sigmoid + BCE gradient
                let dz = [cache.output[0] - y[i] as f64];
                let g = model.backward(&cache, OutputGrad::WrtPreactivation(&dz));
                grads.add(&g);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam_step(&mut model, &grads, &mut state);
        }
    }
    Ok(model)
}

impl MlpModel {
    /// Positive-class probability for a single-sigmoid-output classifier.
    pub fn predict_proba_pos(&self, x: &[f64]) -> f64 {
        self.forward(x)[0]
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        usize::from(self.predict_proba_pos(x) > 0.5)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_counts() {
        assert_eq!(param_count(&[13, 64, 32, 1]), 3009);
        assert_eq!(param_count(&[12, 64, 32, 1]), 2945);
        assert_eq!(param_count(&[2, 1]), 3);
        let model = init_mlp(&[13, 64, 32, 1], OutputActivation::Sigmoid, &[0.5, 0.5], 0).unwrap();
        assert_eq!(model.param_count(), 3009);
    }

    #[test]
    fn invalid_architectures_rejected() {
        assert!(init_mlp(&[5], OutputActivation::Identity, &[], 0).is_err());
        assert!(init_mlp(&[5, 0, 1], OutputActivation::Identity, &[0.0], 0).is_err());
        assert!(init_mlp(&[5, 4, 1], OutputActivation::Identity, &[], 0).is_err());
    }

    #[test]
    fn zero_weights_sigmoid_outputs_half() {
        let mut model = init_mlp(&[3, 4, 1], OutputActivation::Sigmoid, &[0.0], 1).unwrap();
        for w in &mut model.weights {
            for v in w.as_mut_slice() {
                *v = 0.0;
            }
        }
        assert_eq!(model.forward(&[0.3, -2.0, 5.0]), vec![0.5]);
    }

    #[test]
    fn identity_single_layer_passes_through() {
        let mut model = init_mlp(&[1, 1], OutputActivation::Identity, &[], 1).unwrap();
        model.weights[0].set(0, 0, 1.0);
        model.biases[0][0] = 0.0;
        assert_eq!(model.forward(&[3.0]), vec![3.0]);
    }

    #[test]
    fn zero_dropout_train_equals_inference() {
        let model = init_mlp(&[4, 8, 8, 2], OutputActivation::Softmax, &[0.0, 0.0], 7).unwrap();
        let x = [0.5, -1.0, 2.0, 0.1];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = model.forward_train(&x, &mut rng);
        let inf = model.forward(&x);
        for (a, b) in cache.output.iter().zip(&inf) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn single_sigmoid_unit_bias_gradient() {
        // w = 0, b = 0, x = 0, target 1: dL/db = sigmoid(0) - 1 = -0.5
        let mut model = init_mlp(&[1, 1], OutputActivation::Sigmoid, &[], 1).unwrap();
        model.weights[0].set(0, 0, 0.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = model.forward_train(&[0.0], &mut rng);
        let dz = [cache.output[0] - 1.0];
        let g = model.backward(&cache, OutputGrad::WrtPreactivation(&dz));
        assert!((g.db[0][0] + 0.5).abs() < 1e-15);
        // same result through the BCE-on-output route
        let y_hat = cache.output[0];
        let dy = [-(1.0 / y_hat)];
        let g2 = model.backward(&cache, OutputGrad::WrtOutput(&dy));
        assert!((g2.db[0][0] + 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_loss_grad_gives_zero_gradients() {
        let model = init_mlp(&[3, 5, 2], OutputActivation::Identity, &[0.0], 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = model.forward_train(&[1.0, 2.0, 3.0], &mut rng);
        let g = model.backward(&cache, OutputGrad::WrtOutput(&[0.0, 0.0]));
        assert_eq!(g.norm(), 0.0);
    }

    /// Central finite-difference oracle for a scalar loss over model params.
    fn finite_diff_check(mut model: MlpModel, x: Vec<f64>, target: Vec<f64>) -> f64 {
        let loss = |m: &MlpModel| -> f64 {
            let y = m.forward(&x);
            y.iter().zip(&target).map(|(a, b)| 0.5 * (a - b) * (a - b)).sum()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cache = model.forward_train(&x, &mut rng);
        let dy: Vec<f64> = cache.output.iter().zip(&target).map(|(a, b)| a - b).collect();
        let analytic = model.backward(&cache, OutputGrad::WrtOutput(&dy));

        let h = 1e-5;
        let mut max_rel = 0.0f64;
        for l in 0..model.weights.len() {
            for idx in 0..model.weights[l].as_slice().len() {
                let orig = model.weights[l].as_slice()[idx];
                model.weights[l].as_mut_slice()[idx] = orig + h;
                let lp = loss(&model);
                model.weights[l].as_mut_slice()[idx] = orig - h;
                let lm = loss(&model);
                model.weights[l].as_mut_slice()[idx] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.dw[l].as_slice()[idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max((a - numeric).abs() / denom);
            }
            for idx in 0..model.biases[l].len() {
                let orig = model.biases[l][idx];
                model.biases[l][idx] = orig + h;
                let lp = loss(&model);
                model.biases[l][idx] = orig - h;
                let lm = loss(&model);
                model.biases[l][idx] = orig;
                let numeric = (lp - lm) / (2.0 * h);
                let a = analytic.db[l][idx];
                let denom = a.abs().max(numeric.abs()).max(1e-6);
                max_rel = max_rel.max((a - numeric).abs() / denom);
            }
        }
        max_rel
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..5u64 {
            let model =
                init_mlp(&[3, 6, 4, 2], OutputActivation::Identity, &[0.0, 0.0], seed).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let x: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let t: Vec<f64> = (0..2).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let err = finite_diff_check(model, x, t);
            assert!(err < 1e-4, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn dropout_expectation_matches_inference() {
        let model = init_mlp(&[2, 16, 1], OutputActivation::Identity, &[0.5], 11).unwrap();
        let x = [0.8, -0.3];
        let inference = model.forward(&x)[0];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 20_000;
        let mean: f64 = (0..n)
            .map(|_| model.forward_train(&x, &mut rng).output[0])
            .sum::<f64>()
            / n as f64;
        let scale = inference.abs().max(0.05);
        assert!(
            (mean - inference).abs() / scale < 0.02,
            "mean {mean} vs inference {inference}"
        );
    }

    #[test]
    fn adam_zero_gradient_keeps_parameters() {
        let mut model = init_mlp(&[2, 3, 1], OutputActivation::Identity, &[0.0], 1).unwrap();
        let before = model.clone();
        let grads = Gradients::zeros_like(&model);
        let mut state = AdamState::new(&model, 0.001);
        adam_step(&mut model, &grads, &mut state);
        assert_eq!(model, before);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn adam_first_step_is_signed_learning_rate() {
        // one scalar parameter w = 0, gradient 1, lr = 0.0003:
        // bias correction makes the first update -lr * g/|g| = -0.0003
        let mut model = init_mlp(&[1, 1], OutputActivation::Identity, &[], 1).unwrap();
        model.weights[0].set(0, 0, 0.0);
        let mut grads = Gradients::zeros_like(&model);
        grads.dw[0].set(0, 0, 1.0);
        let mut state = AdamState::new(&model, 0.0003);
        adam_step(&mut model, &grads, &mut state);
        let w = model.weights[0].get(0, 0);
        assert!((w + 0.0003).abs() < 1e-9, "w = {w}");
    }

    #[test]
    fn adam_is_deterministic() {
        let make = || {
            let mut model = init_mlp(&[2, 4, 1], OutputActivation::Identity, &[0.0], 9).unwrap();
            let mut state = AdamState::new(&model, 0.01);
            let mut grads = Gradients::zeros_like(&model);
            for v in grads.dw[0].as_mut_slice() {
                *v = 0.3;
            }
            adam_step(&mut model, &grads, &mut state);
            adam_step(&mut model, &grads, &mut state);
            model
        };
        assert_eq!(make(), make());
    }

    #[test]
    fn memorizes_small_sample_within_2000_steps() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows: Vec<Vec<f64>> =
            (0..32).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<usize> = (0..32).map(|_| rng.gen_range(0..2)).collect();
        let x = Matrix::from_rows(&rows);
        let mut model = init_mlp(&[2, 32, 32, 1], OutputActivation::Sigmoid, &[0.0, 0.0], 3).unwrap();
        let mut state = AdamState::new(&model, 3e-3);
        let mut dummy_rng = ChaCha8Rng::seed_from_u64(0);
        let mut loss = f64::INFINITY;
        for _ in 0..2000 {
            let mut grads = Gradients::zeros_like(&model);
            loss = 0.0;
            for i in 0..32 {
                let cache = model.forward_train(x.row(i), &mut dummy_rng);
                let p = cache.output[0].clamp(1e-12, 1.0 - 1e-12);
                loss -= if y[i] == 1 { p.ln() } else { (1.0 - p).ln() };
                let dz = [cache.output[0] - y[i] as f64];
                grads.add(&model.backward(&cache, OutputGrad::WrtPreactivation(&dz)));
            }
            loss /= 32.0;
            if loss < 0.01 {
                break;
            }
            grads.scale(1.0 / 32.0);
            adam_step(&mut model, &grads, &mut state);
        }
        assert!(loss < 0.01, "final loss {loss}");
    }

    #[test]
    fn ann_training_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let rows: Vec<Vec<f64>> =
            (0..64).map(|_| vec![rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)]).collect();
        let y: Vec<usize> = rows.iter().map(|r| usize::from(r[0] > 0.0)).collect();
        let x = Matrix::from_rows(&rows);
        let config = AnnConfig { epochs: 3, batch_size: 16, seed: 5, ..Default::default() };
        let a = train_ann_classifier(&x, &y, &config).unwrap();
        let b = train_ann_classifier(&x, &y, &config).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ann_zero_epochs_returns_initialized_model() {
        let x = Matrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]);
        let config = AnnConfig { epochs: 0, seed: 4, ..Default::default() };
        let model = train_ann_classifier(&x, &[0, 1], &config).unwrap();
        let fresh = init_mlp(&[2, 64, 32, 1], OutputActivation::Sigmoid, &[0.5, 0.5], 4).unwrap();
        assert_eq!(model, fresh);
    }
}

//! Minimal feed-forward network shared by the usage-pattern classifier and
//! the per-node prefetch scorer.
//!
//! Hidden layers use the logistic sigmoid. The output layer is either a
//! softmax (classifier) or a single sigmoid unit (scorer); both are trained
//! against cross-entropy, so the output delta is `p - y` in either mode.
//! Training is plain per-sample SGD in batch order, so results depend only on
//! the initial parameters and the data.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum MlpError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("training batch is empty")]
    EmptyBatch,
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, MlpError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OutputMode {
    /// Softmax over all outputs.
    Classifier,
    /// One sigmoid output in (0,1).
    Scorer,
}

/// Hyperparameters. Defaults: one hidden layer of 16, SGD at 0.05, 5 epochs
/// per daily batch, no weight decay.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MlpConfig {
    pub hidden: Vec<usize>,
    pub learning_rate: f64,
    pub epochs: usize,
    pub weight_decay: f64,
}

impl Default for MlpConfig {
    fn default() -> Self {
        Self {
            hidden: vec![16],
            learning_rate: 0.05,
            epochs: 5,
            weight_decay: 0.0,
        }
    }
}

/// One training example: features and target vector (one-hot for the
/// classifier, `[0.0]`/`[1.0]` for the scorer).
pub type Sample = (Vec<f64>, Vec<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    layer_sizes: Vec<usize>,
    output: OutputMode,
    seed: u64,
    /// Per layer, row-major `[out][in]`.
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    #[serde(flatten)]
    model: MlpModel,
}

struct Grads {
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl MlpModel {
    /// Xavier-uniform initialization from `seed`, zero biases.
    pub fn new(layer_sizes: &[usize], output: OutputMode, seed: u64) -> Result<Self> {
        let mut model = Self::zeros(layer_sizes, output)?;
        model.seed = seed;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (l, w) in model.weights.iter_mut().enumerate() {
            let (fan_in, fan_out) = (layer_sizes[l], layer_sizes[l + 1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for x in w.iter_mut() {
                *x = rng.random_range(-limit..limit);
            }
        }
        Ok(model)
    }

    /// All parameters zero.
    pub fn zeros(layer_sizes: &[usize], output: OutputMode) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(MlpError::InvalidLayout(format!(
                "need at least input and output layers of non-zero width, got {layer_sizes:?}"
            )));
        }
        let outputs = *layer_sizes.last().unwrap();
        match output {
            OutputMode::Scorer if outputs != 1 => {
                return Err(MlpError::InvalidLayout(
                    "scorer must have exactly one output".into(),
                ))
            }
            OutputMode::Classifier if outputs < 2 => {
                return Err(MlpError::InvalidLayout(
                    "classifier needs at least two outputs".into(),
                ))
            }
            _ => {}
        }
        let weights = layer_sizes
            .windows(2)
            .map(|w| vec![0.0; w[0] * w[1]])
            .collect();
        let biases = layer_sizes[1..].iter().map(|&n| vec![0.0; n]).collect();
        Ok(Self {
            layer_sizes: layer_sizes.to_vec(),
            output,
            seed: 0,
            weights,
            biases,
        })
    }

    /// Builds `input -> config.hidden... -> outputs`.
    pub fn from_config(
        config: &MlpConfig,
        inputs: usize,
        outputs: usize,
        output: OutputMode,
        seed: u64,
    ) -> Result<Self> {
        let mut sizes = vec![inputs];
        sizes.extend(&config.hidden);
        sizes.push(outputs);
        Self::new(&sizes, output, seed)
    }

    /// Mutable weights and biases, per layer.
    pub fn params_mut(&mut self) -> (&mut [Vec<f64>], &mut [Vec<f64>]) {
        (&mut self.weights, &mut self.biases)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn output_mode(&self) -> OutputMode {
        self.output
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>()
            + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    fn params(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().chain(&self.biases).flatten().copied()
    }

    fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for v in self.weights.iter_mut().chain(self.biases.iter_mut()) {
            if i < v.len() {
                return &mut v[i];
            }
            i -= v.len();
        }
        panic!("parameter index out of range")
    }

    pub fn is_finite(&self) -> bool {
        self.params().all(f64::is_finite)
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.input_dim(),
                got: x.len(),
            });
        }
        if !x.iter().all(|v| v.is_finite()) {
            return Err(MlpError::NonFinite("features"));
        }
        Ok(())
    }

    /// Activations of every layer, input included.
    fn forward(&self, x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = Vec::with_capacity(self.layer_sizes.len());
        acts.push(x.to_vec());
        let last = self.weights.len() - 1;
        for (l, (w, b)) in self.weights.iter().zip(&self.biases).enumerate() {
            let input = &acts[l];
            let n_in = input.len();
            let mut z: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(j, bj)| {
                    let row = &w[j * n_in..(j + 1) * n_in];
                    bj + row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>()
                })
                .collect();
            if l == last && self.output == OutputMode::Classifier {
                softmax_in_place(&mut z);
            } else {
                z.iter_mut().for_each(|v| *v = sigmoid(*v));
            }
            acts.push(z);
        }
        acts
    }

    pub fn predict(&self, features: &[f64]) -> Result<Vec<f64>> {
        self.check_input(features)?;
        Ok(self.forward(features).pop().unwrap())
    }

    /// Scorer convenience: the single output.
    pub fn score(&self, features: &[f64]) -> Result<f64> {
        Ok(self.predict(features)?[0])
    }

    fn check_target(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.output_dim() {
            return Err(MlpError::DimensionMismatch {
                expected: self.output_dim(),
                got: y.len(),
            });
        }
        if !y.iter().all(|v| v.is_finite()) {
            return Err(MlpError::NonFinite("target"));
        }
        Ok(())
    }

    fn loss_of(&self, out: &[f64], y: &[f64]) -> f64 {
        const EPS: f64 = 1e-300;
        match self.output {
            OutputMode::Classifier => -y
                .iter()
                .zip(out)
                .map(|(t, p)| if *t == 0.0 { 0.0 } else { t * p.max(EPS).ln() })
                .sum::<f64>(),
            OutputMode::Scorer => {
                let (p, t) = (out[0], y[0]);
                -(t * p.max(EPS).ln() + (1.0 - t) * (1.0 - p).max(EPS).ln())
            }
        }
    }

    /// Cross-entropy of one sample.
    pub fn loss(&self, features: &[f64], target: &[f64]) -> Result<f64> {
        self.check_input(features)?;
        self.check_target(target)?;
        let out = self.forward(features).pop().unwrap();
        Ok(self.loss_of(&out, target))
    }

    /// Mean cross-entropy over a batch.
    pub fn batch_loss(&self, batch: &[Sample]) -> Result<f64> {
        if batch.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        let mut total = 0.0;
        for (x, y) in batch {
            total += self.loss(x, y)?;
        }
        Ok(total / batch.len() as f64)
    }

    fn backprop(&self, x: &[f64], y: &[f64]) -> Grads {
        let acts = self.forward(x);
        let n_layers = self.weights.len();
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();

        let mut delta: Vec<f64> = acts[n_layers].iter().zip(y).map(|(p, t)| p - t).collect();
        for l in (0..n_layers).rev() {
            let input = &acts[l];
            let n_in = input.len();
            for (j, dj) in delta.iter().enumerate() {
                gb[l][j] = *dj;
                let row = &mut gw[l][j * n_in..(j + 1) * n_in];
                for (g, a) in row.iter_mut().zip(input) {
                    *g = dj * a;
                }
            }
            if l > 0 {
                let w = &self.weights[l];
                delta = (0..n_in)
                    .map(|i| {
                        let back: f64 = delta
                            .iter()
                            .enumerate()
                            .map(|(j, dj)| dj * w[j * n_in + i])
                            .sum();
                        let a = input[i];
                        back * a * (1.0 - a)
                    })
                    .collect();
            }
        }
        Grads {
            weights: gw,
            biases: gb,
        }
    }

    /// Continues training from the current parameters.
    pub fn train_incremental(
        &self,
        batch: &[Sample],
        epochs: usize,
        learning_rate: f64,
    ) -> Result<Self> {
        self.train_with(
            batch,
            &MlpConfig {
                hidden: Vec::new(),
                learning_rate,
                epochs,
                weight_decay: 0.0,
            },
        )
    }

    /// Like [`Self::train_incremental`] but takes rate, epochs and weight
    /// decay from `config` (its `hidden` field is ignored).
    pub fn train_with(&self, batch: &[Sample], config: &MlpConfig) -> Result<Self> {
        if batch.is_empty() {
            return Err(MlpError::EmptyBatch);
        }
        for (x, y) in batch {
            self.check_input(x)?;
            self.check_target(y)?;
        }
        let lr = config.learning_rate;
        let decay = config.weight_decay;
        let mut model = self.clone();
        for _ in 0..config.epochs {
            for (x, y) in batch {
                let g = model.backprop(x, y);
                for (w, gw) in model.weights.iter_mut().zip(&g.weights) {
                    for (wi, gi) in w.iter_mut().zip(gw) {
                        *wi -= lr * (gi + decay * *wi);
                    }
                }
                for (b, gb) in model.biases.iter_mut().zip(&g.biases) {
                    for (bi, gi) in b.iter_mut().zip(gb) {
                        *bi -= lr * gi;
                    }
                }
            }
        }
        if !model.is_finite() {
            return Err(MlpError::NonFinite("parameters after training"));
        }
        Ok(model)
    }

    /// Largest relative discrepancy between the backpropagated gradient and a
    /// central finite difference (step 1e-5), over every parameter. The
    /// denominator is floored at 1e-4 so parameters with vanishing gradient
    /// are judged on absolute error.
    pub fn gradient_check(&self, sample: &Sample) -> Result<f64> {
        const STEP: f64 = 1e-5;
        const FLOOR: f64 = 1e-4;
        let (x, y) = sample;
        self.check_input(x)?;
        self.check_target(y)?;
        let g = self.backprop(x, y);
        let analytic: Vec<f64> = g
            .weights
            .iter()
            .chain(&g.biases)
            .flatten()
            .copied()
            .collect();

        let mut probe = self.clone();
        let mut worst: f64 = 0.0;
        for (i, a) in analytic.iter().enumerate() {
            let orig = *probe.param_mut(i);
            *probe.param_mut(i) = orig + STEP;
            let plus = probe.loss_of(&probe.forward(x).pop().unwrap(), y);
            *probe.param_mut(i) = orig - STEP;
            let minus = probe.loss_of(&probe.forward(x).pop().unwrap(), y);
            *probe.param_mut(i) = orig;
            let numeric = (plus - minus) / (2.0 * STEP);
            let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(FLOOR);
            worst = worst.max(rel);
        }
        Ok(worst)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&Checkpoint {
            version: CHECKPOINT_VERSION,
            model: self.clone(),
        })
        .expect("model serializes")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint =
            serde_json::from_str(s).map_err(|e| MlpError::Checkpoint(e.to_string()))?;
        if ck.version != CHECKPOINT_VERSION {
            return Err(MlpError::Checkpoint(format!(
                "unsupported version {}",
                ck.version
            )));
        }
        let m = ck.model;
        let expected = Self::zeros(&m.layer_sizes, m.output)?;
        let shapes_ok = m.weights.len() == expected.weights.len()
            && m.biases.len() == expected.biases.len()
            && m.weights
                .iter()
                .zip(&expected.weights)
                .all(|(a, b)| a.len() == b.len())
            && m.biases
                .iter()
                .zip(&expected.biases)
                .all(|(a, b)| a.len() == b.len());
        if !shapes_ok {
            return Err(MlpError::Checkpoint(
                "parameter shapes do not match layer sizes".into(),
            ));
        }
        if !m.is_finite() {
            return Err(MlpError::NonFinite("checkpoint parameters"));
        }
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn accuracy(model: &MlpModel, data: &[Sample]) -> f64 {
        let correct = data
            .iter()
            .filter(|(x, y)| {
                let out = model.predict(x).unwrap();
                match model.output_mode() {
                    OutputMode::Scorer => (out[0] >= 0.5) == (y[0] >= 0.5),
                    OutputMode::Classifier => {
                        let argmax = |v: &[f64]| {
                            v.iter()
                                .enumerate()
                                .fold(0, |best, (i, x)| if *x > v[best] { i } else { best })
                        };
                        argmax(&out) == argmax(y)
                    }
                }
            })
            .count();
        correct as f64 / data.len() as f64
    }

    #[test]
    fn zero_classifier_is_uniform() {
        let m = MlpModel::zeros(&[3, 5, 4], OutputMode::Classifier).unwrap();
        let out = m.predict(&[0.3, -2.0, 7.0]).unwrap();
        assert_eq!(out, vec![0.25; 4]);
    }

    #[test]
    fn zero_scorer_is_half() {
        let m = MlpModel::zeros(&[3, 5, 1], OutputMode::Scorer).unwrap();
        assert_eq!(m.score(&[1.0, 2.0, 3.0]).unwrap(), 0.5);
    }

    #[test]
    fn softmax_sums_to_one() {
        let m = MlpModel::new(&[6, 8, 4], OutputMode::Classifier, 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let x: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
            let out = m.predict(&x).unwrap();
            assert!((out.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            assert!(out.iter().all(|p| *p > 0.0 && *p < 1.0));
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let m = MlpModel::new(&[3, 2, 1], OutputMode::Scorer, 0).unwrap();
        assert!(matches!(
            m.predict(&[1.0]),
            Err(MlpError::DimensionMismatch {
                expected: 3,
                got: 1
            })
        ));
        assert!(matches!(
            m.train_incremental(&[(vec![0.0; 3], vec![1.0, 0.0])], 1, 0.1),
            Err(MlpError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            m.train_incremental(&[], 1, 0.1),
            Err(MlpError::EmptyBatch)
        ));
        assert!(matches!(
            m.train_incremental(&[(vec![f64::NAN, 0.0, 0.0], vec![1.0])], 1, 0.1),
            Err(MlpError::NonFinite(_))
        ));
    }

    #[test]
    fn invalid_layouts_rejected() {
        assert!(MlpModel::zeros(&[3], OutputMode::Scorer).is_err());
        assert!(MlpModel::zeros(&[3, 2], OutputMode::Scorer).is_err());
        assert!(MlpModel::zeros(&[3, 1], OutputMode::Classifier).is_err());
        assert!(MlpModel::zeros(&[3, 0, 1], OutputMode::Scorer).is_err());
    }

    #[test]
    fn zero_learning_rate_is_bit_exact_noop() {
        let m = MlpModel::new(&[4, 5, 4], OutputMode::Classifier, 3).unwrap();
        let batch = vec![(vec![0.1, 0.2, 0.3, 0.4], vec![0.0, 1.0, 0.0, 0.0])];
        let trained = m.train_incremental(&batch, 10, 0.0).unwrap();
        assert_eq!(m, trained);
    }

    #[test]
    fn linearly_separable_reaches_full_accuracy() {
        // Two clusters split by x0 + x1 = 1.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let data: Vec<Sample> = (0..20)
            .map(|i| {
                let label = i % 2;
                let base = if label == 1 { 0.75 } else { 0.25 };
                let x = vec![
                    base + rng.random_range(-0.15..0.15),
                    base + rng.random_range(-0.15..0.15),
                ];
                (x, vec![label as f64])
            })
            .collect();
        let m = MlpModel::new(&[2, 4, 1], OutputMode::Scorer, 5).unwrap();
        let m = m.train_incremental(&data, 200, 0.5).unwrap();
        assert_eq!(accuracy(&m, &data), 1.0);
    }

    #[test]
    fn loss_non_increasing_for_small_rate() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let batch: Vec<Sample> = (0..16)
            .map(|i| {
                let x: Vec<f64> = (0..3).map(|_| rng.random_range(0.0..1.0)).collect();
                let mut y = vec![0.0; 3];
                y[i % 3] = 1.0;
                (x, y)
            })
            .collect();
        let mut m = MlpModel::new(&[3, 6, 3], OutputMode::Classifier, 4).unwrap();
        let mut prev = m.batch_loss(&batch).unwrap();
        for _ in 0..50 {
            m = m.train_incremental(&batch, 1, 0.001).unwrap();
            let loss = m.batch_loss(&batch).unwrap();
            assert!(loss <= prev + 1e-12, "loss rose from {prev} to {loss}");
            prev = loss;
        }
    }

    #[test]
    fn training_continues_from_prior_weights() {
        let batch = vec![(vec![1.0, 0.0], vec![1.0])];
        let m = MlpModel::new(&[2, 3, 1], OutputMode::Scorer, 8).unwrap();
        let once = m.train_incremental(&batch, 2, 0.1).unwrap();
        let twice = once.train_incremental(&batch, 2, 0.1).unwrap();
        let direct = m.train_incremental(&batch, 4, 0.1).unwrap();
        assert_eq!(twice, direct);
    }

    #[test]
    fn same_seed_same_model() {
        let a = MlpModel::new(&[5, 7, 4], OutputMode::Classifier, 42).unwrap();
        let b = MlpModel::new(&[5, 7, 4], OutputMode::Classifier, 42).unwrap();
        let c = MlpModel::new(&[5, 7, 4], OutputMode::Classifier, 43).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn gradient_check_on_zero_model_is_exact() {
        let m = MlpModel::zeros(&[3, 4, 4], OutputMode::Classifier).unwrap();
        let err = m.gradient_check(&(vec![0.0; 3], vec![0.25; 4])).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn gradient_check_small_model() {
        let m = MlpModel::new(&[4, 5, 4], OutputMode::Classifier, 17).unwrap();
        let sample = (vec![0.2, 0.9, 0.4, 0.7], vec![0.0, 0.0, 1.0, 0.0]);
        let err = m.gradient_check(&sample).unwrap();
        assert!(err < 1e-4, "{err}");
        assert_eq!(err, m.gradient_check(&sample).unwrap());
    }

    #[test]
    fn checkpoint_round_trip_is_lossless() {
        let m = MlpModel::new(&[7, 16, 3], OutputMode::Classifier, 99).unwrap();
        let back = MlpModel::from_json(&m.to_json()).unwrap();
        assert_eq!(m, back);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(MlpModel::load(&path).unwrap(), m);

        let broken = m.to_json().replace("\"version\":1", "\"version\":9");
        assert!(MlpModel::from_json(&broken).is_err());
    }
}

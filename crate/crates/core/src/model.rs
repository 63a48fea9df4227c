//! Toy differentiable models, minibatch gradients and the local SGD update.
//!
//! Parameters are always a single flat `f64` vector. Every model computes the
//! mean per-sample loss over a batch plus an optional L2 penalty on its
//! weights; gradients are analytic.

use std::fmt;
use std::io::Read;
use std::ops::{Deref, DerefMut};
use std::path::Path;
use std::sync::Arc;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("sample index {index} out of range for dataset of {len} samples")]
    IndexOutOfRange { index: usize, len: usize },
    #[error("non-finite loss {} (parameter norm {params_norm:e})", describe_iteration(.iteration))]
    NonFiniteLoss { iteration: Option<u64>, params_norm: f64 },
    #[error("invalid dataset: {0}")]
    Dataset(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

fn describe_iteration(iteration: &Option<u64>) -> String {
    match iteration {
        Some(k) => format!("at iteration {k}"),
        None => "outside the training loop".to_string(),
    }
}

impl ModelError {
    /// Attach the training iteration to a non-finite loss error.
    pub fn at_iteration(self, k: u64) -> Self {
        match self {
            ModelError::NonFiniteLoss { params_norm, .. } => ModelError::NonFiniteLoss {
                iteration: Some(k),
                params_norm,
            },
            other => other,
        }
    }
}

/// Flat model parameters: all weights concatenated into one vector.
#[derive(Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ParamVector(Vec<f64>);

impl ParamVector {
    pub fn new(values: Vec<f64>) -> Self {
        ParamVector(values)
    }

    pub fn zeros(len: usize) -> Self {
        ParamVector(vec![0.0; len])
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn distance(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt()
    }

    pub fn max_abs_diff(&self, other: &ParamVector) -> f64 {
        self.0
            .iter()
            .zip(&other.0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

impl Deref for ParamVector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for ParamVector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

impl From<Vec<f64>> for ParamVector {
    fn from(values: Vec<f64>) -> Self {
        ParamVector(values)
    }
}

impl fmt::Debug for ParamVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(&self.0).finish()
    }
}

/// Indices of the samples used for one gradient evaluation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataBatch {
    pub sample_indices: Vec<usize>,
}

impl DataBatch {
    pub fn new(sample_indices: Vec<usize>) -> Self {
        DataBatch { sample_indices }
    }

    /// Draw `batch_size` indices uniformly with replacement.
    pub fn sample<R: Rng + ?Sized>(rng: &mut R, dataset_len: usize, batch_size: usize) -> Self {
        let sample_indices = (0..batch_size).map(|_| rng.random_range(0..dataset_len)).collect();
        DataBatch { sample_indices }
    }

    pub fn batch_size(&self) -> usize {
        self.sample_indices.len()
    }
}

/// Dense samples with one scalar label each, stored row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<f64>,
}

impl Dataset {
    pub fn new(dim: usize, features: Vec<f64>, labels: Vec<f64>) -> Result<Self, ModelError> {
        if dim == 0 {
            return Err(ModelError::Dataset("feature dimension must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(ModelError::Dataset(format!(
                "{} feature values do not form {} rows of width {dim}",
                features.len(),
                labels.len()
            )));
        }
        if labels.is_empty() {
            return Err(ModelError::Dataset("dataset has no samples".into()));
        }
        if features.iter().chain(&labels).any(|v| !v.is_finite()) {
            return Err(ModelError::Dataset("dataset contains non-finite values".into()));
        }
        Ok(Dataset { dim, features, labels })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn sample(&self, i: usize) -> (&[f64], f64) {
        (&self.features[i * self.dim..(i + 1) * self.dim], self.labels[i])
    }

    /// Read a CSV file with a header row; the last column is the label.
    pub fn from_csv_path(path: &Path) -> Result<Self, ModelError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(file)
    }

    pub fn from_csv_reader<R: Read>(reader: R) -> Result<Self, ModelError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let width = rdr.headers()?.len();
        if width < 2 {
            return Err(ModelError::Dataset(
                "CSV needs at least one feature column and a label column".into(),
            ));
        }
        let mut features = Vec::new();
        let mut labels = Vec::new();
        for (line, record) in rdr.records().enumerate() {
            let record = record?;
            if record.len() != width {
                return Err(ModelError::Dataset(format!(
                    "row {} has {} columns, header has {width}",
                    line + 2,
                    record.len()
                )));
            }
            for (col, field) in record.iter().enumerate() {
                let value: f64 = field.trim().parse().map_err(|_| {
                    ModelError::Dataset(format!("row {} column {}: not a number: {field:?}", line + 2, col + 1))
                })?;
                if col + 1 == width {
                    labels.push(value);
                } else {
                    features.push(value);
                }
            }
        }
        Dataset::new(width - 1, features, labels)
    }

    /// Centers for the quadratic model: `center + noise * N(0, I)` with
    /// `center ~ N(0, I)`. Labels are unused and set to zero.
    pub fn synthetic_quadratic(dim: usize, samples: usize, noise: f64, seed: u64) -> Result<Self, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let center: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut features = Vec::with_capacity(dim * samples);
        for _ in 0..samples {
            for c in &center {
                let eps: f64 = StandardNormal.sample(&mut rng);
                features.push(c + noise * eps);
            }
        }
        Dataset::new(dim, features, vec![0.0; samples])
    }

    /// Binary classification data: Gaussian features, labels from a random
    /// separating hyperplane, each label flipped with probability
    /// `label_noise`. Returns `(train, eval)` drawn from the same hyperplane.
    pub fn synthetic_classification(
        dim: usize,
        train_samples: usize,
        eval_samples: usize,
        label_noise: f64,
        seed: u64,
    ) -> Result<(Self, Self), ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let truth: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let mut draw = |count: usize| -> Result<Dataset, ModelError> {
            let mut features = Vec::with_capacity(dim * count);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let row: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let margin: f64 = row.iter().zip(&truth).map(|(a, w)| a * w).sum();
                let mut label = if margin > 0.0 { 1.0 } else { 0.0 };
                if rng.random::<f64>() < label_noise {
                    label = 1.0 - label;
                }
                features.extend(row);
                labels.push(label);
            }
            Dataset::new(dim, features, labels)
        };
        let train = draw(train_samples)?;
        let eval = draw(eval_samples)?;
        Ok((train, eval))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum ModelKind {
    /// Per-sample loss `½‖x − a_s‖²`; the optimum is the mean of the centers.
    Quadratic,
    /// Binary cross-entropy on `w·a + b`.
    LogisticRegression,
    /// One tanh hidden layer, sigmoid output, binary cross-entropy.
    Mlp1Hidden { hidden: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub input_dim: usize,
    /// L2 penalty `½·l2·‖weights‖²`; ignored by the quadratic model.
    pub l2: f64,
}

impl ModelSpec {
    pub fn num_params(&self) -> usize {
        let d = self.input_dim;
        match self.kind {
            ModelKind::Quadratic => d,
            ModelKind::LogisticRegression => d + 1,
            ModelKind::Mlp1Hidden { hidden } => hidden * d + 2 * hidden + 1,
        }
    }

    /// Initial parameters drawn from `N(0, scale²)` with a fixed seed, so that
    /// every worker can start from the same point.
    pub fn init_params(&self, seed: u64, scale: f64) -> ParamVector {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..self.num_params())
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                scale * z
            })
            .collect::<Vec<f64>>()
            .into()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `factor` every `every` iterations.
    StepDecay {
        every: u64,
        factor: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    #[serde(default = "default_schedule")]
    pub schedule: LrSchedule,
}

fn default_schedule() -> LrSchedule {
    LrSchedule::Constant
}

impl OptimizerConfig {
    pub fn lr_at(&self, iteration: u64) -> f64 {
        match self.schedule {
            LrSchedule::Constant => self.learning_rate,
            LrSchedule::StepDecay { every, factor } => {
                let drops = iteration.checked_div(every).unwrap_or(0);
                self.learning_rate * factor.powi(drops.min(i32::MAX as u64) as i32)
            }
        }
    }
}

/// A model bound to its training data.
#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    train: Arc<Dataset>,
}

impl Model {
    pub fn new(spec: ModelSpec, train: Arc<Dataset>) -> Result<Self, ModelError> {
        if train.dim() != spec.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: spec.input_dim,
                actual: train.dim(),
            });
        }
        if let ModelKind::Mlp1Hidden { hidden: 0 } = spec.kind {
            return Err(ModelError::Dataset("MLP needs at least one hidden unit".into()));
        }
        Ok(Model { spec, train })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn num_params(&self) -> usize {
        self.spec.num_params()
    }

    pub fn train_set(&self) -> &Dataset {
        &self.train
    }

    /// Closed-form minimizer of the quadratic model over the training set.
    pub fn quadratic_optimum(&self) -> Option<ParamVector> {
        if self.spec.kind != ModelKind::Quadratic {
            return None;
        }
        let d = self.spec.input_dim;
        let mut mean = vec![0.0; d];
        for i in 0..self.train.len() {
            let (a, _) = self.train.sample(i);
            for (m, v) in mean.iter_mut().zip(a) {
                *m += v;
            }
        }
        let count = self.train.len() as f64;
        mean.iter_mut().for_each(|m| *m /= count);
        Some(mean.into())
    }

    fn check_len(&self, params: &ParamVector) -> Result<(), ModelError> {
        let expected = self.num_params();
        if params.len() != expected {
            return Err(ModelError::DimensionMismatch {
                expected,
                actual: params.len(),
            });
        }
        Ok(())
    }

    /// Loss of one sample; accumulates `scale · ∇` into `grad` when given.
    fn sample_loss(&self, params: &[f64], a: &[f64], y: f64, grad: Option<(&mut [f64], f64)>) -> f64 {
        let d = self.spec.input_dim;
        match self.spec.kind {
            ModelKind::Quadratic => {
                let mut loss = 0.0;
                match grad {
                    Some((g, scale)) => {
                        for j in 0..d {
                            let r = params[j] - a[j];
                            loss += 0.5 * r * r;
                            g[j] += scale * r;
                        }
                    }
                    None => {
                        for j in 0..d {
                            let r = params[j] - a[j];
                            loss += 0.5 * r * r;
                        }
                    }
                }
                loss
            }
            ModelKind::LogisticRegression => {
                let z = dot(&params[..d], a) + params[d];
                if let Some((g, scale)) = grad {
                    let dz = scale * (sigmoid(z) - y);
                    for j in 0..d {
                        g[j] += dz * a[j];
                    }
                    g[d] += dz;
                }
                softplus(z) - y * z
            }
            ModelKind::Mlp1Hidden { hidden } => {
                let (w1, rest) = params.split_at(hidden * d);
                let (b1, rest) = rest.split_at(hidden);
                let (w2, b2) = rest.split_at(hidden);
                let act: Vec<f64> = (0..hidden)
                    .map(|h| (dot(&w1[h * d..(h + 1) * d], a) + b1[h]).tanh())
                    .collect();
                let z = dot(w2, &act) + b2[0];
                if let Some((g, scale)) = grad {
                    let dz = scale * (sigmoid(z) - y);
                    let (gw1, grest) = g.split_at_mut(hidden * d);
                    let (gb1, grest) = grest.split_at_mut(hidden);
                    let (gw2, gb2) = grest.split_at_mut(hidden);
                    gb2[0] += dz;
                    for h in 0..hidden {
                        gw2[h] += dz * act[h];
                        let pre = dz * w2[h] * (1.0 - act[h] * act[h]);
                        gb1[h] += pre;
                        for j in 0..d {
                            gw1[h * d + j] += pre * a[j];
                        }
                    }
                }
                softplus(z) - y * z
            }
        }
    }

    /// Index ranges of the parameters subject to the L2 penalty.
    #[allow(clippy::single_range_in_vec_init)]
    fn penalized(&self) -> Vec<std::ops::Range<usize>> {
        let d = self.spec.input_dim;
        match self.spec.kind {
            ModelKind::Quadratic => Vec::new(),
            ModelKind::LogisticRegression => vec![0..d],
            ModelKind::Mlp1Hidden { hidden } => {
                vec![0..hidden * d, hidden * d + hidden..hidden * d + 2 * hidden]
            }
        }
    }

    fn penalty(&self, params: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let l2 = self.spec.l2;
        if l2 == 0.0 {
            return 0.0;
        }
        let ranges = self.penalized();
        let mut total = 0.0;
        for r in &ranges {
            total += params[r.clone()].iter().map(|v| v * v).sum::<f64>();
        }
        if let Some(g) = grad {
            for r in ranges {
                for j in r {
                    g[j] += l2 * params[j];
                }
            }
        }
        0.5 * l2 * total
    }

    fn loss_and_grad(
        &self,
        params: &ParamVector,
        data: &Dataset,
        indices: &mut dyn Iterator<Item = usize>,
        count: usize,
        want_grad: bool,
    ) -> Result<(f64, Option<ParamVector>), ModelError> {
        self.check_len(params)?;
        if data.dim() != self.spec.input_dim {
            return Err(ModelError::DimensionMismatch {
                expected: self.spec.input_dim,
                actual: data.dim(),
            });
        }
        if count == 0 {
            return Err(ModelError::EmptyBatch);
        }
        let scale = 1.0 / count as f64;
        let mut grad = want_grad.then(|| vec![0.0; params.len()]);
        let mut loss = 0.0;
        for i in indices {
            if i >= data.len() {
                return Err(ModelError::IndexOutOfRange {
                    index: i,
                    len: data.len(),
                });
            }
            let (a, y) = data.sample(i);
            loss += self.sample_loss(params, a, y, grad.as_deref_mut().map(|g| (g, scale)));
        }
        loss = loss * scale + self.penalty(params, grad.as_deref_mut());
        if !loss.is_finite() {
            return Err(ModelError::NonFiniteLoss {
                iteration: None,
                params_norm: params.norm(),
            });
        }
        Ok((loss, grad.map(ParamVector::from)))
    }

    /// Mean loss over a batch of training samples.
    pub fn batch_loss(&self, params: &ParamVector, batch: &DataBatch) -> Result<f64, ModelError> {
        let mut it = batch.sample_indices.iter().copied();
        self.loss_and_grad(params, &self.train, &mut it, batch.batch_size(), false)
            .map(|(l, _)| l)
    }
}

/// Gradient of the mean batch loss at `params`.
pub fn compute_gradient(model: &Model, params: &ParamVector, batch: &DataBatch) -> Result<ParamVector, ModelError> {
    let mut it = batch.sample_indices.iter().copied();
    let (_, grad) = model.loss_and_grad(params, &model.train, &mut it, batch.batch_size(), true)?;
    Ok(grad.expect("gradient requested"))
}

/// Mean loss over every sample of `data` (a held-out set or the training set).
pub fn evaluate_loss(model: &Model, params: &ParamVector, data: &Dataset) -> Result<f64, ModelError> {
    let mut it = 0..data.len();
    model
        .loss_and_grad(params, data, &mut it, data.len(), false)
        .map(|(l, _)| l)
}

/// `params − lr · grad`, elementwise.
pub fn sgd_step(params: &ParamVector, grad: &ParamVector, lr: f64) -> Result<ParamVector, ModelError> {
    if params.len() != grad.len() {
        return Err(ModelError::DimensionMismatch {
            expected: params.len(),
            actual: grad.len(),
        });
    }
    Ok(params
        .iter()
        .zip(grad.iter())
        .map(|(p, g)| p - lr * g)
        .collect::<Vec<f64>>()
        .into())
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quadratic(center: &[f64]) -> Model {
        let data = Dataset::new(center.len(), center.to_vec(), vec![0.0]).unwrap();
        let spec = ModelSpec {
            kind: ModelKind::Quadratic,
            input_dim: center.len(),
            l2: 0.0,
        };
        Model::new(spec, Arc::new(data)).unwrap()
    }

    fn one_batch() -> DataBatch {
        DataBatch::new(vec![0])
    }

    #[test]
    fn quadratic_gradient_vanishes_at_center() {
        let m = quadratic(&[1.5, -2.0, 0.25]);
        let g = compute_gradient(&m, &vec![1.5, -2.0, 0.25].into(), &one_batch()).unwrap();
        assert_eq!(g.into_inner(), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn quadratic_gradient_is_identity_around_origin() {
        let m = quadratic(&[0.0, 0.0]);
        let g = compute_gradient(&m, &vec![2.0, -3.0].into(), &one_batch()).unwrap();
        assert_eq!(g.into_inner(), vec![2.0, -3.0]);
    }

    #[test]
    fn sgd_step_examples() {
        let p: ParamVector = vec![1.0, 1.0].into();
        assert_eq!(sgd_step(&p, &vec![0.0, 0.0].into(), 0.1).unwrap(), p);
        let p: ParamVector = vec![1.0, 2.0].into();
        let out = sgd_step(&p, &vec![10.0, -10.0].into(), 0.1).unwrap();
        assert!((out[0] - 0.0).abs() < 1e-15 && (out[1] - 3.0).abs() < 1e-15);
        assert!(matches!(
            sgd_step(&p, &vec![1.0].into(), 0.1),
            Err(ModelError::DimensionMismatch { expected: 2, actual: 1 })
        ));
    }

    #[test]
    fn repeated_steps_reach_center() {
        // Each step contracts the error by exactly 0.9, so 0.9^k·‖x0 − c‖ < 1e-6
        // for k ≥ ln(1e-6/‖x0 − c‖)/ln(0.9).
        let c = [3.0, -1.0, 0.5];
        let m = quadratic(&c);
        let mut x: ParamVector = vec![0.0, 0.0, 0.0].into();
        let initial = x.distance(&c.to_vec().into());
        let bound = ((1e-6 / initial).ln() / 0.9f64.ln()).ceil() as usize;
        assert!(bound <= 200);
        for _ in 0..bound {
            let g = compute_gradient(&m, &x, &one_batch()).unwrap();
            x = sgd_step(&x, &g, 0.1).unwrap();
        }
        assert!(x.distance(&c.to_vec().into()) < 1e-6);
    }

    #[test]
    fn dimension_mismatch_and_empty_batch() {
        let m = quadratic(&[0.0, 0.0]);
        assert!(matches!(
            compute_gradient(&m, &vec![1.0].into(), &one_batch()),
            Err(ModelError::DimensionMismatch { .. })
        ));
        assert!(matches!(
            compute_gradient(&m, &vec![1.0, 1.0].into(), &DataBatch::new(vec![])),
            Err(ModelError::EmptyBatch)
        ));
        assert!(matches!(
            compute_gradient(&m, &vec![1.0, 1.0].into(), &DataBatch::new(vec![3])),
            Err(ModelError::IndexOutOfRange { index: 3, len: 1 })
        ));
    }

    #[test]
    fn non_finite_loss_names_iteration() {
        let m = quadratic(&[0.0]);
        let err = evaluate_loss(&m, &vec![f64::INFINITY].into(), m.train_set()).unwrap_err();
        let err = err.at_iteration(17);
        assert!(err.to_string().contains("iteration 17"), "{err}");
    }

    #[test]
    fn csv_round_trip_and_errors() {
        let text = "x0,x1,label\n1.0,2.0,1\n-1,0.5,0\n";
        let ds = Dataset::from_csv_reader(text.as_bytes()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.dim(), 2);
        assert_eq!(ds.sample(1), (&[-1.0, 0.5][..], 0.0));
        assert!(Dataset::from_csv_reader("a,b\n1,x\n".as_bytes()).is_err());
        assert!(Dataset::from_csv_reader("a,b\n".as_bytes()).is_err());
    }

    #[test]
    fn step_decay_schedule() {
        let opt = OptimizerConfig {
            learning_rate: 0.1,
            batch_size: 4,
            schedule: LrSchedule::StepDecay { every: 10, factor: 0.5 },
        };
        assert_eq!(opt.lr_at(0), 0.1);
        assert_eq!(opt.lr_at(9), 0.1);
        assert_eq!(opt.lr_at(10), 0.05);
        assert_eq!(opt.lr_at(25), 0.025);
    }

    #[test]
    fn batch_sampling_is_seeded() {
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = ChaCha8Rng::seed_from_u64(9);
        let x = DataBatch::sample(&mut a, 50, 16);
        assert_eq!(x, DataBatch::sample(&mut b, 50, 16));
        assert!(x.sample_indices.iter().all(|&i| i < 50));
    }
}

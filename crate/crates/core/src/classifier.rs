//! Diagnosis network on zero-filled reconstructions and its training loops.
//!
//! Architecture: two `3x3` conv layers (1->8, 8->16) each followed by relu
//! and `2x2` average pooling, dropout, global average pooling and a linear
//! head to two logits. The channel means of both relu outputs form the
//! 24-dimensional feature vector handed to the sampling policy.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, CheckpointError, Graph, ParamId, ParamSet, StepScheduler, Tensor, Var};
use crate::fourier::{centered_ifft2, magnitude, ComplexMatrix, RealImage};
use crate::masking::{init_mask, CartesianMask, MaskError, MaskInit};
use crate::metrics::{auc, MetricsError};
use crate::phantom::Slice;
use crate::scalar::Scalar;
use crate::seed::tagged_seed;
use crate::ssim::normalize_max;

pub const FEATURES: usize = 24;
const CHANNELS: [usize; 2] = [8, 16];
const PROB_CLAMP: f64 = 1e-12;

const TAG_INIT: u64 = 1;
const TAG_ORDER: u64 = 2;
const TAG_MASK: u64 = 3;
const TAG_DROPOUT: u64 = 4;
const TAG_VAL_MASK: u64 = 5;

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("no {0} slices")]
    EmptyDataset(&'static str),
    #[error("input is {got_rows}x{got_cols}, network expects {rows}x{cols}")]
    Dimension { rows: usize, cols: usize, got_rows: usize, got_cols: usize },
    #[error("image size {rows}x{cols} must be a multiple of 4 and at least 4")]
    BadGeometry { rows: usize, cols: usize },
    #[error("checkpoint lacks parameter {0} or has the wrong shape")]
    MissingParam(String),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// `-ln p` for the true class, with `p` clamped away from 0 and 1.
pub fn cross_entropy(prob: f64, label: u8) -> f64 {
    let p = prob.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if label == 1 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Magnitude of the zero-filled reconstruction, scaled to unit maximum.
pub fn zero_filled_image<T: Scalar>(k: &ComplexMatrix<T>) -> RealImage<T> {
    normalize_max(&magnitude(&centered_ifft2(k)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction<T> {
    /// Softmax probability of the positive class.
    pub prob: T,
    pub features: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierNet<T> {
    params: ParamSet<T>,
    rows: usize,
    cols: usize,
    pub dropout: f64,
    ids: [ParamId; 6],
}

const NAMES: [&str; 6] = ["conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias", "head.weight", "head.bias"];

fn shapes() -> [Vec<usize>; 6] {
    let [c1, c2] = CHANNELS;
    [vec![c1, 1, 3, 3], vec![c1], vec![c2, c1, 3, 3], vec![c2], vec![c2, 2], vec![2]]
}

impl<T: Scalar> ClassifierNet<T> {
    /// He-initialised network for `rows x cols` images.
    pub fn new(rows: usize, cols: usize, seed: u64) -> Result<Self, ClassifierError> {
        if rows < 4 || cols < 4 || !rows.is_multiple_of(4) || !cols.is_multiple_of(4) {
            return Err(ClassifierError::BadGeometry { rows, cols });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(tagged_seed(seed, TAG_INIT, 0));
        let mut params = ParamSet::new();
        for (name, shape) in NAMES.iter().zip(shapes()) {
            let n: usize = shape.iter().product();
            let values = if name.ends_with("bias") {
                vec![T::zero(); n]
            } else {
                let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
                let fan_in = if *name == "head.weight" { shape[0] } else { fan_in };
                let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            params.add(*name, Tensor::new(shape, values)?);
        }
        Self::from_params(params, rows, cols)
    }

    /// Wraps loaded parameters, checking names and shapes.
    pub fn from_params(params: ParamSet<T>, rows: usize, cols: usize) -> Result<Self, ClassifierError> {
        if rows < 4 || cols < 4 || !rows.is_multiple_of(4) || !cols.is_multiple_of(4) {
            return Err(ClassifierError::BadGeometry { rows, cols });
        }
        let mut ids = [ParamId(0); 6];
        for (i, (name, shape)) in NAMES.iter().zip(shapes()).enumerate() {
            let id = params.find(name).ok_or_else(|| ClassifierError::MissingParam(name.to_string()))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(ClassifierError::MissingParam(name.to_string()));
            }
            ids[i] = id;
        }
        Ok(Self { params, rows, cols, dropout: 0.25, ids })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.count()
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    fn check_dims(&self, rows: usize, cols: usize) -> Result<(), ClassifierError> {
        if (rows, cols) != (self.rows, self.cols) {
            return Err(ClassifierError::Dimension { rows: self.rows, cols: self.cols, got_rows: rows, got_cols: cols });
        }
        Ok(())
    }

    /// Records the network on `g` using `params` (which must share this
    /// network's layout). Returns `(logits, features)`. Dropout is active
    /// iff `dropout_seed` is given.
    pub fn forward_with(
        &self,
        g: &mut Graph<T>,
        params: &ParamSet<T>,
        image: &RealImage<T>,
        dropout_seed: Option<u64>,
    ) -> Result<(Var, Var), ClassifierError> {
        self.check_dims(image.rows, image.cols)?;
        let [w1, b1, w2, b2, wh, bh] = self.ids.map(|id| g.param(params, id));
        let x = g.constant(vec![1, image.rows, image.cols], image.pixels.clone())?;
        let a1 = g.conv2d(x, w1, Some(b1), 1, 1)?;
        let a1 = g.relu(a1);
        let p1 = g.avg_pool2d(a1, 2)?;
        let a2 = g.conv2d(p1, w2, Some(b2), 1, 1)?;
        let a2 = g.relu(a2);
        let p2 = g.avg_pool2d(a2, 2)?;
        let d = g.dropout(p2, T::lit(self.dropout), dropout_seed.is_some(), dropout_seed.unwrap_or(0))?;
        let pooled = g.global_avg_pool(d)?;
        let row = g.reshape(pooled, vec![1, CHANNELS[1]])?;
        let logits = g.matmul(row, wh)?;
        let logits = g.reshape(logits, vec![2])?;
        let logits = g.add(logits, bh)?;
        let f1 = g.global_avg_pool(a1)?;
        let f2 = g.global_avg_pool(a2)?;
        let features = g.concat(&[f1, f2])?;
        Ok((logits, features))
    }

    /// Inference on an already formed input image.
    pub fn predict_image(&self, image: &RealImage<T>) -> Result<Prediction<T>, ClassifierError> {
        let mut g = Graph::inference();
        let (logits, features) = self.forward_with(&mut g, &self.params, image, None)?;
        let l = g.value(logits);
        // softmax over two logits
        let prob = T::one() / (T::one() + (l[0] - l[1]).exp());
        Ok(Prediction { prob, features: g.value(features).to_vec() })
    }

    /// Prediction from (possibly undersampled, zero-filled) centred k-space.
    pub fn predict(&self, k: &ComplexMatrix<T>) -> Result<Prediction<T>, ClassifierError> {
        self.check_dims(k.rows(), k.cols())?;
        self.predict_image(&zero_filled_image(k))
    }

    /// Prediction from a complex zero-filled reconstruction.
    pub fn predict_complex_image(&self, img: &ComplexMatrix<T>) -> Result<Prediction<T>, ClassifierError> {
        self.check_dims(img.rows(), img.cols())?;
        self.predict_image(&normalize_max(&magnitude(img)))
    }

    pub fn predict_masked(&self, k: &ComplexMatrix<T>, mask: &CartesianMask) -> Result<Prediction<T>, ClassifierError> {
        self.predict(&mask.apply(k)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub step_size_epochs: usize,
    pub batch_size: usize,
    pub dropout: f64,
    /// Acceleration factors are drawn uniformly from this inclusive range.
    pub min_acceleration: usize,
    pub max_acceleration: usize,
    pub max_center_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            learning_rate: 1e-4,
            gamma: 0.1,
            step_size_epochs: 10,
            batch_size: 1,
            dropout: 0.25,
            min_acceleration: 4,
            max_acceleration: 20,
            max_center_fraction: 0.10,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), ClassifierError> {
        let bad = |m: &str| Err(ClassifierError::Config(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.step_size_epochs == 0 {
            return bad("epochs, batch_size and step_size_epochs must be positive");
        }
        if !(self.learning_rate > 0.0) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("learning_rate must be positive and gamma in (0, 1)");
        }
        if self.min_acceleration == 0 || self.min_acceleration > self.max_acceleration {
            return bad("acceleration range is empty");
        }
        if !(0.0..=1.0).contains(&self.max_center_fraction) || !(0.0..1.0).contains(&self.dropout) {
            return bad("max_center_fraction must be in [0, 1] and dropout in [0, 1)");
        }
        Ok(())
    }
}

/// Which k-space the network sees during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InputSampling {
    /// Fresh random Cartesian mask per example and epoch.
    Undersampled,
    /// Fully sampled k-space (the oracle).
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub train_loss: f64,
    /// Validation AUC under the training input regime (model selection).
    pub val_auc: f64,
    pub val_auc_full: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
}

/// Random training mask: rate `1/R` with `R` uniform in the configured
/// range, centre fraction uniform in `[0, max]` capped at the rate.
pub fn random_training_mask(cols: usize, cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<CartesianMask, MaskError> {
    let r = rng.random_range(cfg.min_acceleration..=cfg.max_acceleration);
    let rate = 1.0 / r as f64;
    let center = rng.random_range(0.0..=cfg.max_center_fraction).min(rate);
    init_mask(cols, MaskInit { initial_fraction: rate, center_fraction: center, seed: rng.random() })
}

fn scores<T: Scalar>(
    net: &ClassifierNet<T>,
    slices: &[Slice],
    masks: Option<&[CartesianMask]>,
) -> Result<Vec<f64>, ClassifierError> {
    slices
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let k = s.kspace.cast::<T>();
            let p = match masks {
                Some(m) => net.predict_masked(&k, &m[i])?,
                None => net.predict(&k)?,
            };
            Ok(p.prob.to_f64().unwrap_or(f64::NAN))
        })
        .collect()
}

fn labels(slices: &[Slice]) -> Vec<u8> {
    slices.iter().map(|s| s.label).collect()
}

fn train<T: Scalar>(
    net: &mut ClassifierNet<T>,
    train_set: &[Slice],
    val_set: &[Slice],
    cfg: &TrainConfig,
    sampling: InputSampling,
) -> Result<TrainReport, ClassifierError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(ClassifierError::EmptyDataset("training"));
    }
    if val_set.is_empty() {
        return Err(ClassifierError::EmptyDataset("validation"));
    }
    net.dropout = cfg.dropout;
    let cols = net.cols;
    let val_masks: Option<Vec<CartesianMask>> = match sampling {
        InputSampling::Full => None,
        InputSampling::Undersampled => Some(
            (0..val_set.len())
                .map(|i| {
                    let mut rng = ChaCha8Rng::seed_from_u64(tagged_seed(cfg.seed, TAG_VAL_MASK, i as u64));
                    random_training_mask(cols, cfg, &mut rng)
                })
                .collect::<Result<_, _>>()?,
        ),
    };
    let val_labels = labels(val_set);
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let sched = StepScheduler::new(T::lit(cfg.learning_rate), cfg.step_size_epochs, T::lit(cfg.gamma));
    let mut best: Option<(f64, usize, ParamSet<T>)> = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();

    for epoch in 0..cfg.epochs {
        sched.step(&mut opt, epoch);
        let mut order_rng = ChaCha8Rng::seed_from_u64(tagged_seed(cfg.seed, TAG_ORDER, epoch as u64));
        order.shuffle(&mut order_rng);
        let mut mask_rng = ChaCha8Rng::seed_from_u64(tagged_seed(cfg.seed, TAG_MASK, epoch as u64));
        let mut total_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            net.params.zero_grad();
            for (j, &idx) in batch.iter().enumerate() {
                let slice = &train_set[idx];
                let k = slice.kspace.cast::<T>();
                let k = match sampling {
                    InputSampling::Full => k,
                    InputSampling::Undersampled => random_training_mask(cols, cfg, &mut mask_rng)?.apply(&k)?,
                };
                let image = zero_filled_image(&k);
                let step = (b * cfg.batch_size + j) as u64;
                let drop_seed = tagged_seed(cfg.seed, TAG_DROPOUT, ((epoch as u64) << 32) | step);
                let mut g = Graph::new();
                let (logits, _) = net.forward_with(&mut g, &net.params, &image, Some(drop_seed))?;
                let loss = g.softmax_cross_entropy(logits, usize::from(slice.label))?;
                total_loss += g.value(loss)[0].to_f64().unwrap_or(f64::NAN);
                g.backward(loss, &mut net.params)?;
            }
            net.params.scale_grads(T::one() / T::from_usize_lossy(batch.len()));
            opt.step(&mut net.params);
        }
        let val_auc_full = auc(&scores(net, val_set, None)?, &val_labels)?;
        let val_auc = match &val_masks {
            None => val_auc_full,
            Some(m) => auc(&scores(net, val_set, Some(m))?, &val_labels)?,
        };
        log.push(EpochLog {
            epoch,
            learning_rate: opt.learning_rate.to_f64().unwrap_or(f64::NAN),
            train_loss: total_loss / train_set.len() as f64,
            val_auc,
            val_auc_full,
        });
        if best.as_ref().is_none_or(|(a, _, _)| val_auc > *a) {
            best = Some((val_auc, epoch, net.params.clone()));
        }
    }
    let (_, best_epoch, params) = best.expect("at least one epoch");
    net.params = params;
    Ok(TrainReport { log, best_epoch })
}

/// Trains on randomly undersampled inputs (acceleration and centre fraction
/// redrawn per example); keeps the epoch with the best validation AUC on
/// fixed random masks. Callers balance classes beforehand.
pub fn pretrain<T: Scalar>(
    net: &mut ClassifierNet<T>,
    train_set: &[Slice],
    val_set: &[Slice],
    cfg: &TrainConfig,
) -> Result<TrainReport, ClassifierError> {
    train(net, train_set, val_set, cfg, InputSampling::Undersampled)
}

/// Trains and selects on fully sampled inputs.
pub fn train_oracle<T: Scalar>(
    net: &mut ClassifierNet<T>,
    train_set: &[Slice],
    val_set: &[Slice],
    cfg: &TrainConfig,
) -> Result<TrainReport, ClassifierError> {
    train(net, train_set, val_set, cfg, InputSampling::Full)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, DatasetSpec};

    #[test]
    fn cross_entropy_values() {
        assert_eq!(cross_entropy(1.0, 1), -(1.0f64 - 1e-12).ln());
        assert!((cross_entropy(0.5, 0) - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(0.5, 1) - 2f64.ln()).abs() < 1e-15);
        assert!((cross_entropy(0.9, 0) - 2.302585092994045).abs() < 1e-12);
        assert!(cross_entropy(0.0, 1).is_finite());
    }

    #[test]
    fn layout_and_features() {
        let net = ClassifierNet::<f64>::new(16, 16, 1).unwrap();
        assert_eq!(net.param_count(), 8 * 9 + 8 + 16 * 8 * 9 + 16 + 32 + 2);
        let k = ComplexMatrix::zeros(16, 16).unwrap();
        let a = net.predict(&k).unwrap();
        let b = net.predict(&k).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.features.len(), FEATURES);
        assert!(a.prob > 0.0 && a.prob < 1.0);
        let wrong = ComplexMatrix::zeros(8, 16).unwrap();
        assert!(matches!(net.predict(&wrong), Err(ClassifierError::Dimension { .. })));
        assert!(ClassifierNet::<f64>::new(6, 16, 0).is_err());
    }

    #[test]
    fn full_mask_is_identity() {
        let spec = DatasetSpec { n_slices: 4, rows: 16, cols: 16, lesion_band: 10..13, ..DatasetSpec::default() };
        let slices = generate(&spec).unwrap();
        let net = ClassifierNet::<f64>::new(16, 16, 2).unwrap();
        let k = slices[0].kspace.cast::<f64>();
        let full = net.predict_masked(&k, &CartesianMask::full(16)).unwrap();
        assert_eq!(full, net.predict(&k).unwrap());
    }

    #[test]
    fn params_round_trip_through_layout_check() {
        let net = ClassifierNet::<f64>::new(8, 8, 3).unwrap();
        let again = ClassifierNet::from_params(net.params().clone(), 8, 8).unwrap();
        assert_eq!(again, net);
        let mut other = ParamSet::<f64>::new();
        other.add("conv1.weight", Tensor::zeros(vec![8, 1, 3, 3]));
        assert!(matches!(ClassifierNet::from_params(other, 8, 8), Err(ClassifierError::MissingParam(_))));
    }

    #[test]
    fn training_smoke_and_determinism() {
        let spec = DatasetSpec { n_slices: 6, rows: 16, cols: 16, lesion_band: 10..13, ..DatasetSpec::default() };
        let slices = generate(&spec).unwrap();
        let pos = slices.iter().find(|s| s.label == 1).unwrap().clone();
        let neg = slices.iter().find(|s| s.label == 0).unwrap().clone();
        let data = vec![pos, neg];
        let cfg = TrainConfig { epochs: 1, batch_size: 2, seed: 4, ..TrainConfig::default() };
        let run = || {
            let mut net = ClassifierNet::<f64>::new(16, 16, 5).unwrap();
            let before = net.params().clone();
            let report = pretrain(&mut net, &data, &data, &cfg).unwrap();
            (net, before, report)
        };
        let (net, before, report) = run();
        assert!(report.log[0].train_loss.is_finite());
        assert_ne!(net.params(), &before);
        let (net2, _, report2) = run();
        assert_eq!(report, report2);
        assert_eq!(net, net2);
        assert!(matches!(pretrain(&mut net2.clone(), &[], &data, &cfg), Err(ClassifierError::EmptyDataset(_))));
    }
}

//! Active line sampler: policy network, greedy rollouts and the q-sample
//! REINFORCE trainer with a mean-reward baseline.
//!
//! At each step the classifier's feature vector for the current zero-filled
//! reconstruction is mapped to a distribution over the still unsampled
//! columns. Training scores `q` candidate lines one step ahead from the
//! shared state, baselines each reward by the mean of the `q`, and commits
//! the first candidate.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, CheckpointError, Graph, ParamId, ParamSet, StepScheduler, Tensor, Var};
use crate::classifier::{cross_entropy, ClassifierError, ClassifierNet, Prediction, FEATURES};
use crate::fourier::{magnitude, ColumnImages, ComplexMatrix, FourierError, RealImage};
use crate::masking::{fraction_to_count, init_mask, CartesianMask, MaskError, MaskInit};
use crate::phantom::Slice;
use crate::scalar::Scalar;
use crate::seed::tagged_seed;
use crate::ssim::{normalize_max, ssim};

pub const HIDDEN: usize = 64;

const TAG_INIT: u64 = 11;
const TAG_ORDER: u64 = 12;
const TAG_EPISODE: u64 = 13;

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("mask is full; no line left to acquire")]
    FullMask,
    #[error("budget of {budget} lines exceeds the {available} unsampled columns")]
    Budget { budget: usize, available: usize },
    #[error("masks must differ by exactly one added line")]
    NotOneLine,
    #[error("invalid policy config: {0}")]
    Config(String),
    #[error("no training slices")]
    EmptyDataset,
    #[error("policy checkpoint lacks parameter {0} or has the wrong shape")]
    MissingParam(String),
    #[error("feature vector has length {got}, policy expects {expected}")]
    FeatureLength { expected: usize, got: usize },
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
}

/// Softmax of `logits` over the unsampled columns of `mask`; sampled
/// columns get exactly zero.
pub fn masked_softmax<T: Scalar>(logits: &[T], mask: &CartesianMask) -> Result<Vec<T>, PolicyError> {
    if mask.is_full() {
        return Err(PolicyError::FullMask);
    }
    if logits.len() != mask.cols() {
        return Err(MaskError::DimensionMismatch { mask: mask.cols(), kspace: logits.len() }.into());
    }
    let open = |c: usize| !mask.is_sampled(c);
    let max = (0..logits.len()).filter(|&c| open(c)).map(|c| logits[c]).fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = (0..logits.len()).map(|c| if open(c) { (logits[c] - max).exp() } else { T::zero() }).collect();
    let z: T = exps.iter().copied().sum();
    Ok(exps.into_iter().map(|e| e / z).collect())
}

/// Unsampled column with the largest logit; ties go to the lowest index.
pub fn greedy_column<T: Scalar>(logits: &[T], mask: &CartesianMask) -> Result<usize, PolicyError> {
    let mut best: Option<usize> = None;
    for c in mask.unsampled() {
        if best.is_none_or(|b| logits[c] > logits[b]) {
            best = Some(c);
        }
    }
    best.ok_or(PolicyError::FullMask)
}

/// How the change in cross-entropy maps to reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardSign {
    /// `r_before - r_after`: a drop in cross-entropy is rewarded.
    #[default]
    ImprovementPositive,
    /// `r_after - r_before`, for ablation.
    Increase,
}

/// Reward for one acquisition given the cross-entropy before and after it.
pub fn step_reward(r_before: f64, r_after: f64) -> f64 {
    r_before - r_after
}

pub fn signed_step_reward(r_before: f64, r_after: f64, sign: RewardSign) -> f64 {
    match sign {
        RewardSign::ImprovementPositive => step_reward(r_before, r_after),
        RewardSign::Increase => -step_reward(r_before, r_after),
    }
}

fn unit_image<T: Scalar>(img: &ComplexMatrix<T>) -> RealImage<T> {
    normalize_max(&magnitude(img))
}

/// SSIM gain of the zero-filled reconstruction when going from
/// `mask_before` to `mask_after` (one added line), against the fully
/// sampled reconstruction. Each image is scaled by its own maximum.
pub fn recon_reward<T: Scalar>(
    k_full: &ComplexMatrix<T>,
    mask_before: &CartesianMask,
    mask_after: &CartesianMask,
) -> Result<f64, PolicyError> {
    let added: Vec<usize> = mask_after.order().iter().copied().filter(|&c| !mask_before.is_sampled(c)).collect();
    let contained = mask_before.order().iter().all(|&c| mask_after.is_sampled(c));
    if mask_before.cols() != mask_after.cols() || added.len() != 1 || !contained {
        return Err(PolicyError::NotOneLine);
    }
    let basis = ColumnImages::new(k_full)?;
    let gt = unit_image(&basis.image(0..k_full.cols()));
    let before = unit_image(&basis.image(mask_before.order().iter().copied()));
    let after = unit_image(&basis.image(mask_after.order().iter().copied()));
    Ok(ssim(&after, &gt) - ssim(&before, &gt))
}

/// Two-layer perceptron from classifier features to per-column logits.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyNet<T> {
    params: ParamSet<T>,
    features: usize,
    cols: usize,
    ids: [ParamId; 4],
}

const NAMES: [&str; 4] = ["fc1.weight", "fc1.bias", "fc2.weight", "fc2.bias"];

fn shapes(features: usize, cols: usize) -> [Vec<usize>; 4] {
    [vec![features, HIDDEN], vec![HIDDEN], vec![HIDDEN, cols], vec![cols]]
}

impl<T: Scalar> PolicyNet<T> {
    /// He-initialised hidden layer; the output layer starts small so the
    /// initial policy is close to uniform.
    pub fn new(cols: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(tagged_seed(seed, TAG_INIT, 0));
        let mut params = ParamSet::new();
        for (name, shape) in NAMES.iter().zip(shapes(FEATURES, cols)) {
            let n: usize = shape.iter().product();
            let std = match *name {
                "fc1.weight" => (2.0 / FEATURES as f64).sqrt(),
                "fc2.weight" => 0.01,
                _ => 0.0,
            };
            let values = if std == 0.0 {
                vec![T::zero(); n]
            } else {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::lit(normal.sample(&mut rng))).collect()
            };
            params.add(*name, Tensor::new(shape, values).expect("shape matches values"));
        }
        Self::from_params(params, cols).expect("fresh layout is valid")
    }

    pub fn from_params(params: ParamSet<T>, cols: usize) -> Result<Self, PolicyError> {
        let mut ids = [ParamId(0); 4];
        for (i, (name, shape)) in NAMES.iter().zip(shapes(FEATURES, cols)).enumerate() {
            let id = params.find(name).ok_or_else(|| PolicyError::MissingParam(name.to_string()))?;
            if params.get(id).shape() != shape.as_slice() {
                return Err(PolicyError::MissingParam(name.to_string()));
            }
            ids[i] = id;
        }
        Ok(Self { params, features: FEATURES, cols, ids })
    }

    pub fn params(&self) -> &ParamSet<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamSet<T> {
        &mut self.params
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    /// Records the logits for feature vector `h` on `g`.
    pub fn logits_with(&self, g: &mut Graph<T>, params: &ParamSet<T>, h: &[T]) -> Result<Var, PolicyError> {
        if h.len() != self.features {
            return Err(PolicyError::FeatureLength { expected: self.features, got: h.len() });
        }
        let [w1, b1, w2, b2] = self.ids.map(|id| g.param(params, id));
        let x = g.constant(vec![1, self.features], h.to_vec())?;
        let z = g.matmul(x, w1)?;
        let z = g.reshape(z, vec![HIDDEN])?;
        let z = g.add(z, b1)?;
        let z = g.relu(z);
        let z = g.reshape(z, vec![1, HIDDEN])?;
        let out = g.matmul(z, w2)?;
        let out = g.reshape(out, vec![self.cols])?;
        Ok(g.add(out, b2)?)
    }

    pub fn logits(&self, h: &[T]) -> Result<Vec<T>, PolicyError> {
        let mut g = Graph::inference();
        let l = self.logits_with(&mut g, &self.params, h)?;
        Ok(g.value(l).to_vec())
    }

    /// Acquisition probabilities over all columns (zero on sampled ones).
    pub fn distribution(&self, h: &[T], mask: &CartesianMask) -> Result<Vec<T>, PolicyError> {
        masked_softmax(&self.logits(h)?, mask)
    }

    /// Most probable unsampled column.
    pub fn greedy(&self, h: &[T], mask: &CartesianMask) -> Result<usize, PolicyError> {
        greedy_column(&self.logits(h)?, mask)
    }
}

/// One acquisition (or, at step 0, the initial state) of an episode.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// `None` for the initial state.
    pub column: Option<usize>,
    /// Classification reward of this acquisition (0 at step 0).
    pub reward: f64,
    pub cross_entropy: f64,
    pub prob: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeTrace {
    pub slice_id: u32,
    pub label: u8,
    pub initial_mask: CartesianMask,
    /// `steps[0]` is the initial prediction; `steps[t]` follows line `t`.
    pub steps: Vec<StepRecord>,
    pub final_mask: CartesianMask,
}

impl EpisodeTrace {
    /// Number of lines acquired during the episode.
    pub fn lines(&self) -> usize {
        self.steps.len() - 1
    }

    /// Columns sampled after `lines` acquisitions.
    pub fn mask_after(&self, lines: usize) -> CartesianMask {
        let n = self.initial_mask.len() + lines.min(self.lines());
        CartesianMask::from_order(self.final_mask.cols(), &self.final_mask.order()[..n]).expect("prefix of a valid order")
    }
}

/// Incrementally reconstructed acquisition state for one slice.
struct Episode<'a, T> {
    classifier: &'a ClassifierNet<T>,
    basis: ColumnImages<T>,
    mask: CartesianMask,
    image: ComplexMatrix<T>,
    pred: Prediction<T>,
}

impl<'a, T: Scalar> Episode<'a, T> {
    fn start(classifier: &'a ClassifierNet<T>, k: &ComplexMatrix<T>, mask: &CartesianMask) -> Result<Self, PolicyError> {
        if mask.cols() != k.cols() {
            return Err(MaskError::DimensionMismatch { mask: mask.cols(), kspace: k.cols() }.into());
        }
        let basis = ColumnImages::new(k)?;
        let image = basis.image(mask.order().iter().copied());
        let pred = classifier.predict_complex_image(&image)?;
        Ok(Self { classifier, basis, mask: mask.clone(), image, pred })
    }

    /// Image and prediction after adding `col`, without committing.
    fn peek(&self, col: usize) -> Result<(ComplexMatrix<T>, Prediction<T>), PolicyError> {
        if self.mask.is_sampled(col) {
            return Err(MaskError::AlreadySampled { col }.into());
        }
        let mut img = self.image.clone();
        self.basis.add_column(&mut img, col);
        let pred = self.classifier.predict_complex_image(&img)?;
        Ok((img, pred))
    }

    fn commit(&mut self, col: usize, image: ComplexMatrix<T>, pred: Prediction<T>) -> Result<(), PolicyError> {
        self.mask.add_line_mut(col)?;
        self.image = image;
        self.pred = pred;
        Ok(())
    }
}

fn to_f64<T: Scalar>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

/// Runs `budget` acquisitions from `init`, choosing each line with `choose`.
/// If `stop_confidence` is set the episode ends early once the prediction is
/// at least that confident in either class.
#[allow(clippy::too_many_arguments)]
pub fn rollout_with<T: Scalar, F>(
    classifier: &ClassifierNet<T>,
    slice_id: u32,
    label: u8,
    k: &ComplexMatrix<T>,
    init: &CartesianMask,
    budget: usize,
    stop_confidence: Option<f64>,
    mut choose: F,
) -> Result<EpisodeTrace, PolicyError>
where
    F: FnMut(&Prediction<T>, &CartesianMask) -> Result<usize, PolicyError>,
{
    let available = init.cols() - init.len();
    if budget > available {
        return Err(PolicyError::Budget { budget, available });
    }
    let mut ep = Episode::start(classifier, k, init)?;
    let p0 = to_f64(ep.pred.prob);
    let mut r = cross_entropy(p0, label);
    let mut steps = vec![StepRecord { step: 0, column: None, reward: 0.0, cross_entropy: r, prob: p0 }];
    for t in 1..=budget {
        if let Some(th) = stop_confidence {
            let p = to_f64(ep.pred.prob);
            if p >= th || p <= 1.0 - th {
                break;
            }
        }
        let col = choose(&ep.pred, &ep.mask)?;
        let (img, pred) = ep.peek(col)?;
        let p = to_f64(pred.prob);
        let r_next = cross_entropy(p, label);
        steps.push(StepRecord { step: t, column: Some(col), reward: step_reward(r, r_next), cross_entropy: r_next, prob: p });
        r = r_next;
        ep.commit(col, img, pred)?;
    }
    Ok(EpisodeTrace { slice_id, label, initial_mask: init.clone(), steps, final_mask: ep.mask })
}

/// Greedy inference rollout. The label only fills the trace's reward and
/// cross-entropy fields; it never influences which lines are chosen.
pub fn rollout_greedy<T: Scalar>(
    policy: &PolicyNet<T>,
    classifier: &ClassifierNet<T>,
    slice: &Slice,
    init: &CartesianMask,
    budget: usize,
) -> Result<EpisodeTrace, PolicyError> {
    rollout_greedy_until(policy, classifier, slice, init, budget, None)
}

/// [`rollout_greedy`] with an optional confidence stop.
pub fn rollout_greedy_until<T: Scalar>(
    policy: &PolicyNet<T>,
    classifier: &ClassifierNet<T>,
    slice: &Slice,
    init: &CartesianMask,
    budget: usize,
    stop_confidence: Option<f64>,
) -> Result<EpisodeTrace, PolicyError> {
    let k = slice.kspace.cast::<T>();
    rollout_with(classifier, slice.id, slice.label, &k, init, budget, stop_confidence, |pred, mask| {
        policy.greedy(&pred.features, mask)
    })
}

/// Baseline rollout adding uniformly random unsampled lines.
pub fn rollout_random<T: Scalar>(
    classifier: &ClassifierNet<T>,
    slice: &Slice,
    init: &CartesianMask,
    budget: usize,
    seed: u64,
) -> Result<EpisodeTrace, PolicyError> {
    rollout_random_until(classifier, slice, init, budget, seed, None)
}

/// [`rollout_random`] with an optional confidence stop.
pub fn rollout_random_until<T: Scalar>(
    classifier: &ClassifierNet<T>,
    slice: &Slice,
    init: &CartesianMask,
    budget: usize,
    seed: u64,
    stop_confidence: Option<f64>,
) -> Result<EpisodeTrace, PolicyError> {
    let k = slice.kspace.cast::<T>();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rollout_with(classifier, slice.id, slice.label, &k, init, budget, stop_confidence, |_, mask| {
        let open: Vec<usize> = mask.unsampled().collect();
        open.choose(&mut rng).copied().ok_or(PolicyError::FullMask)
    })
}

/// Draws `q` columns i.i.d. from `probs` (inverse-CDF sampling).
pub fn sample_candidates<R: Rng>(probs: &[f64], q: usize, rng: &mut R) -> Vec<usize> {
    let last = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (0..q)
        .map(|_| {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            for (c, &p) in probs.iter().enumerate() {
                acc += p;
                if u < acc && p > 0.0 {
                    return c;
                }
            }
            last
        })
        .collect()
}

/// Per-column coefficients `a` such that `sum_c a[c] * grad log p(c)` is the
/// q-sample estimate `1/(q-1) * sum_i (R_i - mean R) * grad log p(c_i)`.
pub fn estimator_coefficients(candidates: &[usize], rewards: &[f64], cols: usize) -> Vec<f64> {
    let q = candidates.len();
    let mut coeffs = vec![0.0; cols];
    if q < 2 {
        return coeffs;
    }
    let mean = rewards.iter().sum::<f64>() / q as f64;
    for (&c, &r) in candidates.iter().zip(rewards) {
        coeffs[c] += (r - mean) / (q - 1) as f64;
    }
    coeffs
}

/// Records the surrogate loss `-sum_c a[c] log p(c)` whose gradient is the
/// negated estimate, so that a descent step ascends the expected reward.
pub fn surrogate_loss<T: Scalar>(g: &mut Graph<T>, log_probs: Var, coeffs: &[f64]) -> Result<Var, PolicyError> {
    let neg: Vec<T> = coeffs.iter().map(|&a| T::lit(-a)).collect();
    Ok(g.weighted_sum(log_probs, &neg)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RewardKind {
    /// Drop in classifier cross-entropy.
    #[default]
    Classification,
    /// SSIM gain of the zero-filled reconstruction.
    Reconstruction,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTrainConfig {
    pub q: usize,
    pub initial_fraction: f64,
    pub budget_fraction: f64,
    /// Each episode starts from a mask with one of these centre fractions.
    pub center_fractions: Vec<f64>,
    pub epochs: usize,
    /// Episodes drawn per epoch; `None` uses every training slice.
    pub episodes_per_epoch: Option<usize>,
    /// Episodes per Adam update.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub gamma: f64,
    pub step_size_epochs: usize,
    pub reward_kind: RewardKind,
    pub reward_sign: RewardSign,
    pub seed: u64,
}

impl Default for PolicyTrainConfig {
    fn default() -> Self {
        Self {
            q: 8,
            initial_fraction: 0.05,
            budget_fraction: 0.25,
            center_fractions: vec![0.0, 0.01, 0.05],
            epochs: 20,
            episodes_per_epoch: Some(128),
            batch_size: 1,
            learning_rate: 1e-4,
            gamma: 0.1,
            step_size_epochs: 10,
            reward_kind: RewardKind::Classification,
            reward_sign: RewardSign::ImprovementPositive,
            seed: 0,
        }
    }
}

impl PolicyTrainConfig {
    /// Lines acquired per episode: `round(budget * cols) - round(initial * cols)`.
    pub fn lines_per_episode(&self, cols: usize) -> usize {
        fraction_to_count(self.budget_fraction, cols).saturating_sub(fraction_to_count(self.initial_fraction, cols))
    }

    /// Checks all hyperparameters, including that `q` candidates can be drawn
    /// from distinct unsampled columns at every step.
    pub fn validate(&self, cols: usize) -> Result<(), PolicyError> {
        let bad = |m: String| Err(PolicyError::Config(m));
        if self.q < 2 {
            return bad(format!("q = {} but the estimator needs q >= 2", self.q));
        }
        let init = fraction_to_count(self.initial_fraction, cols);
        let budget = fraction_to_count(self.budget_fraction, cols);
        if !(0.0..=1.0).contains(&self.initial_fraction) || !(0.0..=1.0).contains(&self.budget_fraction) || budget < init {
            return bad(format!(
                "fractions initial {} and budget {} must satisfy 0 <= initial <= budget <= 1",
                self.initial_fraction, self.budget_fraction
            ));
        }
        let lines = budget - init;
        // fewest unsampled columns occur just before the last acquisition
        if lines > 0 && self.q > cols - budget + 1 {
            return bad(format!("q = {} exceeds the {} unsampled columns at the last step", self.q, cols - budget + 1));
        }
        if self.center_fractions.is_empty() {
            return bad("center_fractions is empty".into());
        }
        if let Some(&cf) = self.center_fractions.iter().find(|&&cf| fraction_to_count(cf, cols) > init || cf < 0.0) {
            return bad(format!("center fraction {cf} does not fit in the initial mask"));
        }
        if self.epochs == 0 || self.batch_size == 0 || self.step_size_epochs == 0 || self.episodes_per_epoch == Some(0) {
            return bad("epochs, batch_size, step_size_epochs and episodes_per_epoch must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !(self.gamma > 0.0 && self.gamma < 1.0) {
            return bad("learning_rate must be positive and gamma in (0, 1)".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PolicyEpochLog {
    pub epoch: usize,
    pub learning_rate: f64,
    pub episodes: usize,
    /// Mean over episodes of the summed committed rewards.
    pub mean_return: f64,
    /// Mean classifier cross-entropy at the end of the episodes.
    pub mean_terminal_ce: f64,
}

/// Initial mask of training episode `episode` (centre fraction picked from
/// the configured list).
fn episode_init(cols: usize, cfg: &PolicyTrainConfig, epoch: usize, episode: usize) -> Result<(CartesianMask, ChaCha8Rng), PolicyError> {
    let mut rng = ChaCha8Rng::seed_from_u64(tagged_seed(cfg.seed, TAG_EPISODE, ((epoch as u64) << 32) | episode as u64));
    let cf = cfg.center_fractions[rng.random_range(0..cfg.center_fractions.len())];
    let mask = init_mask(cols, MaskInit { initial_fraction: cfg.initial_fraction, center_fraction: cf, seed: rng.random() })?;
    Ok((mask, rng))
}

struct EpisodeOutcome {
    ret: f64,
    terminal_ce: f64,
}

fn train_episode<T: Scalar>(
    policy: &mut PolicyNet<T>,
    classifier: &ClassifierNet<T>,
    slice: &Slice,
    init: &CartesianMask,
    lines: usize,
    cfg: &PolicyTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<EpisodeOutcome, PolicyError> {
    let k = slice.kspace.cast::<T>();
    let mut ep = Episode::start(classifier, &k, init)?;
    let gt = match cfg.reward_kind {
        RewardKind::Reconstruction => Some(unit_image(&ep.basis.image(0..k.cols()))),
        RewardKind::Classification => None,
    };
    // score of the current state under the configured criterion
    let score = |img: &ComplexMatrix<T>, pred: &Prediction<T>| -> f64 {
        match &gt {
            Some(gt) => ssim(&unit_image(img), gt),
            None => cross_entropy(to_f64(pred.prob), slice.label),
        }
    };
    let reward = |before: f64, after: f64| match cfg.reward_kind {
        RewardKind::Reconstruction => after - before,
        RewardKind::Classification => signed_step_reward(before, after, cfg.reward_sign),
    };
    let mut current = score(&ep.image, &ep.pred);
    let mut ret = 0.0;
    for _ in 0..lines {
        let mut g = Graph::new();
        let logits = policy.logits_with(&mut g, &policy.params, &ep.pred.features)?;
        let allowed: Vec<bool> = ep.mask.sampled().iter().map(|&s| !s).collect();
        let log_probs = g.masked_log_softmax(logits, &allowed)?;
        let probs: Vec<f64> = g.value(log_probs).iter().map(|&l| to_f64(l).exp()).collect();
        let candidates = sample_candidates(&probs, cfg.q, rng);

        let mut evaluated: Vec<(usize, ComplexMatrix<T>, Prediction<T>, f64)> = Vec::new();
        let mut rewards = Vec::with_capacity(cfg.q);
        for &c in &candidates {
            // duplicates reuse the first evaluation
            if let Some(e) = evaluated.iter().find(|e| e.0 == c) {
                rewards.push(reward(current, e.3));
                continue;
            }
            let (img, pred) = ep.peek(c)?;
            let s = score(&img, &pred);
            rewards.push(reward(current, s));
            evaluated.push((c, img, pred, s));
        }
        let coeffs = estimator_coefficients(&candidates, &rewards, policy.cols);
        if coeffs.iter().any(|&a| a != 0.0) {
            let loss = surrogate_loss(&mut g, log_probs, &coeffs)?;
            g.backward(loss, &mut policy.params)?;
        }
        ret += rewards[0];
        let first = evaluated.swap_remove(evaluated.iter().position(|e| e.0 == candidates[0]).expect("evaluated"));
        current = first.3;
        ep.commit(first.0, first.1, first.2)?;
    }
    Ok(EpisodeOutcome { ret, terminal_ce: cross_entropy(to_f64(ep.pred.prob), slice.label) })
}

/// REINFORCE training of `policy` against a frozen `classifier`.
pub fn train_policy<T: Scalar>(
    policy: &mut PolicyNet<T>,
    classifier: &ClassifierNet<T>,
    train_set: &[Slice],
    cfg: &PolicyTrainConfig,
) -> Result<Vec<PolicyEpochLog>, PolicyError> {
    let cols = policy.cols;
    cfg.validate(cols)?;
    if train_set.is_empty() {
        return Err(PolicyError::EmptyDataset);
    }
    let lines = cfg.lines_per_episode(cols);
    let mut opt = Adam::new(T::lit(cfg.learning_rate));
    let sched = StepScheduler::new(T::lit(cfg.learning_rate), cfg.step_size_epochs, T::lit(cfg.gamma));
    let per_epoch = cfg.episodes_per_epoch.unwrap_or(train_set.len());
    let mut order: Vec<usize> = Vec::with_capacity(per_epoch);
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        sched.step(&mut opt, epoch);
        let mut order_rng = ChaCha8Rng::seed_from_u64(tagged_seed(cfg.seed, TAG_ORDER, epoch as u64));
        order.clear();
        while order.len() < per_epoch {
            let mut pass: Vec<usize> = (0..train_set.len()).collect();
            pass.shuffle(&mut order_rng);
            order.extend(pass.into_iter().take(per_epoch - order.len()));
        }
        let (mut ret_sum, mut ce_sum) = (0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            policy.params.zero_grad();
            for (j, &idx) in batch.iter().enumerate() {
                let (init, mut rng) = episode_init(cols, cfg, epoch, b * cfg.batch_size + j)?;
                let out = train_episode(policy, classifier, &train_set[idx], &init, lines, cfg, &mut rng)?;
                ret_sum += out.ret;
                ce_sum += out.terminal_ce;
            }
            policy.params.scale_grads(T::one() / T::from_usize_lossy(batch.len()));
            opt.step(&mut policy.params);
        }
        let n = order.len() as f64;
        log.push(PolicyEpochLog {
            epoch,
            learning_rate: to_f64(opt.learning_rate),
            episodes: order.len(),
            mean_return: ret_sum / n,
            mean_terminal_ce: ce_sum / n,
        });
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate, DatasetSpec};

    #[test]
    fn masked_softmax_examples() {
        let mask = CartesianMask::from_order(8, &[0, 2, 4, 6]).unwrap();
        let p = masked_softmax(&[0.0f64; 8], &mask).unwrap();
        for (c, &v) in p.iter().enumerate() {
            assert_eq!(v, if c % 2 == 0 { 0.0 } else { 0.25 });
        }
        let one = CartesianMask::from_order(4, &[0, 1, 3]).unwrap();
        assert_eq!(masked_softmax(&[5.0f64, -1.0, 2.0, 7.0], &one).unwrap(), vec![0.0, 0.0, 1.0, 0.0]);
        assert!(matches!(masked_softmax(&[0.0f64; 4], &CartesianMask::full(4)), Err(PolicyError::FullMask)));
    }

    #[test]
    fn greedy_breaks_ties_low() {
        let mask = CartesianMask::from_order(5, &[1]).unwrap();
        assert_eq!(greedy_column(&[3.0, 9.0, 3.0, 1.0, 3.0], &mask).unwrap(), 0);
        let mask = CartesianMask::from_order(5, &[0]).unwrap();
        assert_eq!(greedy_column(&[3.0, 2.0, 3.0, 1.0, 3.0], &mask).unwrap(), 2);
    }

    #[test]
    fn step_reward_sign() {
        assert_eq!(step_reward(0.3, 0.3), 0.0);
        assert!((step_reward(0.69, 0.10) - 0.59).abs() < 1e-15);
        assert!((step_reward(0.10, 0.69) + 0.59).abs() < 1e-15);
        assert!((signed_step_reward(0.69, 0.10, RewardSign::Increase) + 0.59).abs() < 1e-15);
    }

    #[test]
    fn equal_rewards_give_no_gradient() {
        assert_eq!(estimator_coefficients(&[1, 3], &[0.4, 0.4], 4), vec![0.0; 4]);
        let a = estimator_coefficients(&[1, 3, 1], &[1.0, 4.0, 1.0], 4);
        assert_eq!(a, vec![0.0, -1.0, 0.0, 1.0]);
    }

    #[test]
    fn candidate_sampling_respects_support() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let probs = [0.0, 0.5, 0.0, 0.5];
        let c = sample_candidates(&probs, 1000, &mut rng);
        assert!(c.iter().all(|&x| x == 1 || x == 3));
        let ones = c.iter().filter(|&&x| x == 1).count();
        assert!((400..600).contains(&ones));
    }

    #[test]
    fn recon_reward_to_full_mask() {
        let spec = DatasetSpec { n_slices: 2, rows: 16, cols: 16, lesion_band: 10..13, ..DatasetSpec::default() };
        let k = generate(&spec).unwrap()[0].kspace.cast::<f64>();
        let all: Vec<usize> = (0..16).collect();
        let before = CartesianMask::from_order(16, &all[..15]).unwrap();
        let full = CartesianMask::full(16);
        let basis = ColumnImages::new(&k).unwrap();
        let gt = unit_image(&basis.image(0..16));
        let s_before = ssim(&unit_image(&basis.image(0..15)), &gt);
        let r = recon_reward(&k, &before, &full).unwrap();
        assert!((r - (1.0 - s_before)).abs() < 1e-12);
        let two_more = CartesianMask::from_order(16, &all[..14]).unwrap();
        assert!(matches!(recon_reward(&k, &two_more, &full), Err(PolicyError::NotOneLine)));
    }

    #[test]
    fn config_validation() {
        let cfg = PolicyTrainConfig::default();
        assert!(cfg.validate(64).is_ok());
        assert_eq!(cfg.lines_per_episode(64), 13);
        assert_eq!(cfg.lines_per_episode(320), 64);
        assert!(PolicyTrainConfig { q: 1, ..cfg.clone() }.validate(64).is_err());
        // 8 columns, 25% budget: 2 sampled at the last step leaves 7 open
        let small = PolicyTrainConfig { initial_fraction: 0.0, center_fractions: vec![0.0], ..cfg.clone() };
        assert!(small.validate(8).is_err());
        assert!(PolicyTrainConfig { q: 7, ..small }.validate(8).is_ok());
        assert!(PolicyTrainConfig { center_fractions: vec![0.2], ..cfg }.validate(64).is_err());
    }
}

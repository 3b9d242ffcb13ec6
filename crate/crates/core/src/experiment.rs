//! Experiment orchestration: config file, the per-seed pipeline (data,
//! classifiers, policies, evaluation), heatmaps and the artifact manifest.
//!
//! Output tree under the run directory:
//!
//! ```text
//! checkpoints/seed{s}_{oracle,pretrained,policy_classification,policy_reconstruction}.ksck
//! curves/seed{s}_*.csv, curves/summary_*.csv
//! traces/seed{s}_cf{cf}_{method}.csv
//! heatmaps/seed{s}_cf{cf}_{method}.{pgm,csv}
//! report.txt, manifest.txt
//! ```

use std::fmt::{self, Write as _};
use std::fs;
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::autodiff::{load_params, save_params, CheckpointError};
use crate::classifier::{pretrain, train_oracle, ClassifierError, ClassifierNet, TrainConfig, TrainReport};
use crate::masking::{center_block, fraction_to_count, CartesianMask};
use crate::metrics::{
    evaluate, initial_masks, lines_for_rate, mean_std, per_line_from_traces, rates_from_traces, rollouts, EvalResult,
    EvaluationError, LineResult, RateResult, Acquisition, DEFAULT_THRESHOLD,
};
use crate::phantom::{generate, load_dataset, oversample_minority, save_dataset, DatasetSpec, PhantomError, Slice};
use crate::policy::{
    train_policy, EpisodeTrace, PolicyEpochLog, PolicyError, PolicyNet, PolicyTrainConfig, RewardKind, RewardSign,
};
use crate::seed::tagged_seed;

/// Precision used by the pipeline.
pub type Real = f64;

const TAG_DATA: u64 = 31;
const TAG_OVERSAMPLE: u64 = 32;
const TAG_ORACLE: u64 = 33;
const TAG_PRETRAIN: u64 = 34;
const TAG_POLICY_CLS: u64 = 35;
const TAG_POLICY_REC: u64 = 36;
const TAG_EVAL: u64 = 37;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("config line {line}: {message}")]
    Config { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Checkpoint { path: PathBuf, source: CheckpointError },
    #[error("missing {0}; run the stage that produces it first")]
    Missing(PathBuf),
    #[error("malformed heatmap: {0}")]
    Heatmap(String),
    #[error(transparent)]
    Phantom(#[from] PhantomError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Evaluation(#[from] EvaluationError),
    #[error("stage {stage}{}: {source}", seed.map(|s| format!(" (seed {s})")).unwrap_or_default())]
    Stage { stage: Stage, seed: Option<u64>, source: Box<ExperimentError> },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ExperimentError + '_ {
    move |source| ExperimentError::Io { path: path.to_path_buf(), source }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    Data,
    Oversample,
    Oracle,
    Pretrain,
    PolicyClassification,
    PolicyReconstruction,
    Evaluate,
    Summarize,
    Manifest,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Data => "generate-data",
            Stage::Oversample => "oversample",
            Stage::Oracle => "train-oracle",
            Stage::Pretrain => "pretrain-classifier",
            Stage::PolicyClassification => "train-policy-classification",
            Stage::PolicyReconstruction => "train-policy-reconstruction",
            Stage::Evaluate => "evaluate",
            Stage::Summarize => "summarize",
            Stage::Manifest => "manifest",
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

// ---------------------------------------------------------------------------
// Config

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    /// Load `train.ksds`, `val.ksds` and `test.ksds` from here instead of
    /// generating per seed.
    pub data_dir: Option<PathBuf>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub rows: usize,
    pub cols: usize,
    pub positive_fraction: f64,
    pub lesion_band: Range<usize>,
    pub lesion_amplitude: f64,
    pub noise_sigma: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        let d = DatasetSpec::default();
        Self {
            data_dir: None,
            n_train: 2000,
            n_val: 400,
            n_test: 400,
            rows: d.rows,
            cols: d.cols,
            positive_fraction: d.positive_fraction,
            lesion_band: d.lesion_band,
            lesion_amplitude: d.lesion_amplitude,
            noise_sigma: d.noise_sigma,
        }
    }
}

impl DatasetConfig {
    /// Generator spec for split `split` (0 train, 1 val, 2 test) of `seed`.
    /// Ids are unique across the three splits.
    pub fn spec(&self, seed: u64, split: usize) -> DatasetSpec {
        let sizes = [self.n_train, self.n_val, self.n_test];
        DatasetSpec {
            n_slices: sizes[split],
            rows: self.rows,
            cols: self.cols,
            positive_fraction: self.positive_fraction,
            lesion_band: self.lesion_band.clone(),
            lesion_amplitude: self.lesion_amplitude,
            noise_sigma: self.noise_sigma,
            seed: tagged_seed(seed, TAG_DATA, split as u64),
            id_offset: sizes[..split].iter().sum::<usize>() as u32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: DatasetConfig,
    pub classifier: TrainConfig,
    /// Shared by both policies; reward kind, centre fractions and seed are
    /// filled in per run.
    pub policy: PolicyTrainConfig,
    pub center_fractions: Vec<f64>,
    /// Evaluation checkpoints as fractions of the columns.
    pub rates: Vec<f64>,
    pub threshold: f64,
    /// Optional early stop once a prediction is this confident.
    pub stop_confidence: Option<f64>,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: DatasetConfig::default(),
            classifier: TrainConfig::default(),
            policy: PolicyTrainConfig::default(),
            center_fractions: vec![0.0, 0.01, 0.05],
            rates: vec![0.05, 0.07, 0.10, 0.13, 0.17, 0.25],
            threshold: DEFAULT_THRESHOLD,
            stop_confidence: None,
            seeds: vec![0, 1, 2],
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value<T: FromStr>(v: &str) -> Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn parse_list<T: FromStr>(v: &str) -> Result<Vec<T>, String> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(parse_value).collect()
}

fn parse_optional<T: FromStr>(v: &str) -> Result<Option<T>, String> {
    if v == "none" { Ok(None) } else { parse_value(v).map(Some) }
}

fn join<T: fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(", ")
}

fn optional<T: fmt::Display>(x: &Option<T>) -> String {
    x.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

impl ExperimentConfig {
    /// Parses `key = value` lines grouped under `[section]` headers; `#`
    /// starts a comment. Keys not given keep their defaults.
    pub fn parse(text: &str) -> Result<Self, ExperimentError> {
        let mut cfg = Self::default();
        let mut section = String::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| ExperimentError::Config { line: i + 1, message };
            if let Some(name) = line.strip_prefix('[') {
                section = name.strip_suffix(']').ok_or_else(|| err("unterminated section header".into()))?.trim().to_string();
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| err(format!("expected key = value, got {line:?}")))?;
            cfg.set(&section, key.trim(), value.trim()).map_err(err)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        Self::parse(&fs::read_to_string(path).map_err(io_err(path))?)
    }

    fn set(&mut self, section: &str, key: &str, v: &str) -> Result<(), String> {
        let (d, c, p) = (&mut self.dataset, &mut self.classifier, &mut self.policy);
        match (section, key) {
            ("dataset", "data_dir") => d.data_dir = parse_optional(v)?,
            ("dataset", "n_train") => d.n_train = parse_value(v)?,
            ("dataset", "n_val") => d.n_val = parse_value(v)?,
            ("dataset", "n_test") => d.n_test = parse_value(v)?,
            ("dataset", "rows") => d.rows = parse_value(v)?,
            ("dataset", "cols") => d.cols = parse_value(v)?,
            ("dataset", "positive_fraction") => d.positive_fraction = parse_value(v)?,
            ("dataset", "lesion_band_start") => d.lesion_band.start = parse_value(v)?,
            ("dataset", "lesion_band_end") => d.lesion_band.end = parse_value(v)?,
            ("dataset", "lesion_amplitude") => d.lesion_amplitude = parse_value(v)?,
            ("dataset", "noise_sigma") => d.noise_sigma = parse_value(v)?,
            ("classifier", "epochs") => c.epochs = parse_value(v)?,
            ("classifier", "learning_rate") => c.learning_rate = parse_value(v)?,
            ("classifier", "gamma") => c.gamma = parse_value(v)?,
            ("classifier", "step_size_epochs") => c.step_size_epochs = parse_value(v)?,
            ("classifier", "batch_size") => c.batch_size = parse_value(v)?,
            ("classifier", "dropout") => c.dropout = parse_value(v)?,
            ("classifier", "min_acceleration") => c.min_acceleration = parse_value(v)?,
            ("classifier", "max_acceleration") => c.max_acceleration = parse_value(v)?,
            ("classifier", "max_center_fraction") => c.max_center_fraction = parse_value(v)?,
            ("policy", "epochs") => p.epochs = parse_value(v)?,
            ("policy", "q") => p.q = parse_value(v)?,
            ("policy", "initial_fraction") => p.initial_fraction = parse_value(v)?,
            ("policy", "budget_fraction") => p.budget_fraction = parse_value(v)?,
            ("policy", "episodes_per_epoch") => p.episodes_per_epoch = parse_optional(v)?,
            ("policy", "batch_size") => p.batch_size = parse_value(v)?,
            ("policy", "learning_rate") => p.learning_rate = parse_value(v)?,
            ("policy", "gamma") => p.gamma = parse_value(v)?,
            ("policy", "step_size_epochs") => p.step_size_epochs = parse_value(v)?,
            ("policy", "reward_sign") => {
                p.reward_sign = match v {
                    "improvement" => RewardSign::ImprovementPositive,
                    "increase" => RewardSign::Increase,
                    _ => return Err(format!("reward_sign must be improvement or increase, got {v:?}")),
                }
            }
            ("evaluation", "center_fractions") => self.center_fractions = parse_list(v)?,
            ("evaluation", "rates") => self.rates = parse_list(v)?,
            ("evaluation", "threshold") => self.threshold = parse_value(v)?,
            ("evaluation", "stop_confidence") => self.stop_confidence = parse_optional(v)?,
            ("run", "seeds") => self.seeds = parse_list(v)?,
            ("run", "out_dir") => self.out_dir = PathBuf::from(v),
            _ => return Err(format!("unknown key {key:?} in section [{section}]")),
        }
        Ok(())
    }

    /// Every setting except the output directory, in parseable form. The
    /// config hash is taken over this text.
    pub fn canonical(&self) -> String {
        let (d, c, p) = (&self.dataset, &self.classifier, &self.policy);
        let sign = match p.reward_sign {
            RewardSign::ImprovementPositive => "improvement",
            RewardSign::Increase => "increase",
        };
        let data_dir = optional(&d.data_dir.as_ref().map(|p| p.display().to_string()));
        let mut s = String::new();
        let _ = writeln!(s, "[dataset]");
        let _ = writeln!(s, "data_dir = {data_dir}");
        let _ = writeln!(s, "n_train = {}\nn_val = {}\nn_test = {}", d.n_train, d.n_val, d.n_test);
        let _ = writeln!(s, "rows = {}\ncols = {}", d.rows, d.cols);
        let _ = writeln!(s, "positive_fraction = {}", d.positive_fraction);
        let _ = writeln!(s, "lesion_band_start = {}\nlesion_band_end = {}", d.lesion_band.start, d.lesion_band.end);
        let _ = writeln!(s, "lesion_amplitude = {}\nnoise_sigma = {}", d.lesion_amplitude, d.noise_sigma);
        let _ = writeln!(s, "\n[classifier]");
        let _ = writeln!(s, "epochs = {}\nlearning_rate = {}\ngamma = {}", c.epochs, c.learning_rate, c.gamma);
        let _ = writeln!(s, "step_size_epochs = {}\nbatch_size = {}\ndropout = {}", c.step_size_epochs, c.batch_size, c.dropout);
        let _ = writeln!(s, "min_acceleration = {}\nmax_acceleration = {}", c.min_acceleration, c.max_acceleration);
        let _ = writeln!(s, "max_center_fraction = {}", c.max_center_fraction);
        let _ = writeln!(s, "\n[policy]");
        let _ = writeln!(s, "epochs = {}\nq = {}", p.epochs, p.q);
        let _ = writeln!(s, "initial_fraction = {}\nbudget_fraction = {}", p.initial_fraction, p.budget_fraction);
        let _ = writeln!(s, "episodes_per_epoch = {}\nbatch_size = {}", optional(&p.episodes_per_epoch), p.batch_size);
        let _ = writeln!(s, "learning_rate = {}\ngamma = {}", p.learning_rate, p.gamma);
        let _ = writeln!(s, "step_size_epochs = {}\nreward_sign = {sign}", p.step_size_epochs);
        let _ = writeln!(s, "\n[evaluation]");
        let _ = writeln!(s, "center_fractions = {}\nrates = {}", join(&self.center_fractions), join(&self.rates));
        let _ = writeln!(s, "threshold = {}\nstop_confidence = {}", self.threshold, optional(&self.stop_confidence));
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "seeds = {}", join(&self.seeds));
        s
    }

    /// Full config file text, including the output directory.
    pub fn to_text(&self) -> String {
        format!("{}out_dir = {}\n", self.canonical(), self.out_dir.display())
    }

    /// Hex SHA-256 of [`ExperimentConfig::canonical`].
    pub fn hash(&self) -> String {
        hex(&Sha256::digest(self.canonical().as_bytes()))
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Invalid(m));
        let d = &self.dataset;
        if d.data_dir.is_none() {
            for split in 0..3 {
                let spec = self.dataset.spec(0, split);
                if spec.n_slices < 2 {
                    return bad("every split needs at least 2 slices".into());
                }
                spec.validate()?;
            }
        }
        self.classifier.validate()?;
        self.policy_config(0, RewardKind::Classification).validate(d.cols)?;
        if self.seeds.is_empty() {
            return bad("seeds is empty".into());
        }
        if self.rates.is_empty() {
            return bad("rates is empty".into());
        }
        let initial = fraction_to_count(self.policy.initial_fraction, d.cols);
        for &rate in &self.rates {
            if lines_for_rate(rate, initial, d.cols).is_err() {
                return bad(format!("rate {rate} is below the initial mask or above 1"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if let Some(c) = self.stop_confidence {
            if !(0.5..=1.0).contains(&c) {
                return bad(format!("stop_confidence {c} outside [0.5, 1]"));
            }
        }
        Ok(())
    }

    pub fn classifier_config(&self, seed: u64, tag: u64) -> TrainConfig {
        TrainConfig { seed: tagged_seed(seed, tag, 0), ..self.classifier.clone() }
    }

    pub fn policy_config(&self, seed: u64, kind: RewardKind) -> PolicyTrainConfig {
        let tag = match kind {
            RewardKind::Classification => TAG_POLICY_CLS,
            RewardKind::Reconstruction => TAG_POLICY_REC,
        };
        PolicyTrainConfig {
            reward_kind: kind,
            center_fractions: self.center_fractions.clone(),
            seed: tagged_seed(seed, tag, 0),
            ..self.policy.clone()
        }
    }

    /// Lines rolled out at evaluation: enough for the largest rate and for
    /// the training budget.
    pub fn eval_lines(&self) -> usize {
        let cols = self.dataset.cols;
        let initial = fraction_to_count(self.policy.initial_fraction, cols);
        let by_rate = self.rates.iter().filter_map(|&r| lines_for_rate(r, initial, cols).ok()).max().unwrap_or(0);
        by_rate.max(self.policy.lines_per_episode(cols))
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Heatmaps

/// Acquisition frequency of each column (across episodes) at each rate.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapGrid {
    pub rates: Vec<f64>,
    pub cols: usize,
    /// Row-major `rates.len() x cols`.
    pub cells: Vec<f64>,
}

impl HeatmapGrid {
    pub fn get(&self, rate_index: usize, col: usize) -> f64 {
        self.cells[rate_index * self.cols + col]
    }

    pub fn row(&self, rate_index: usize) -> &[f64] {
        &self.cells[rate_index * self.cols..(rate_index + 1) * self.cols]
    }

    /// Binary PGM (`P5`), one pixel per cell, `round(255 * frequency)`.
    pub fn to_pgm(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.cols, self.rates.len()).into_bytes();
        out.extend(self.cells.iter().map(|&f| (255.0 * f).round().clamp(0.0, 255.0) as u8));
        out
    }

    /// `rate,c0,c1,...` header, then one row per rate.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rate");
        for c in 0..self.cols {
            let _ = write!(s, ",c{c}");
        }
        s.push('\n');
        for (r, &rate) in self.rates.iter().enumerate() {
            let _ = write!(s, "{rate}");
            for v in self.row(r) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self, ExperimentError> {
        let bad = |m: &str| ExperimentError::Heatmap(m.to_string());
        let mut lines = text.lines();
        let cols = lines.next().ok_or_else(|| bad("empty csv"))?.split(',').count() - 1;
        let (mut rates, mut cells) = (Vec::new(), Vec::new());
        for line in lines.filter(|l| !l.is_empty()) {
            let vals: Vec<f64> = parse_list(line).map_err(ExperimentError::Heatmap)?;
            if vals.len() != cols + 1 {
                return Err(bad("row length differs from header"));
            }
            rates.push(vals[0]);
            cells.extend_from_slice(&vals[1..]);
        }
        Ok(Self { rates, cols, cells })
    }

    /// Mean frequency in row `rate_index` over `band` and over the columns
    /// outside both `band` and `exclude`.
    pub fn band_preference(&self, rate_index: usize, band: &Range<usize>, exclude: &Range<usize>) -> (f64, f64) {
        let row = self.row(rate_index);
        let mean = |cols: Vec<usize>| cols.iter().map(|&c| row[c]).sum::<f64>() / cols.len().max(1) as f64;
        let inside = mean(band.clone().collect());
        let outside = mean((0..self.cols).filter(|c| !band.contains(c) && !exclude.contains(c)).collect());
        (inside, outside)
    }
}

/// Pixel values and size of a binary PGM.
pub fn read_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), ExperimentError> {
    let bad = |m: &str| ExperimentError::Heatmap(m.to_string());
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated pgm header"));
        }
        fields.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("non-ascii pgm header"))?);
    }
    if fields[0] != "P5" || fields[3] != "255" {
        return Err(bad("not an 8-bit P5 pgm"));
    }
    let w: usize = fields[1].parse().map_err(|_| bad("bad width"))?;
    let h: usize = fields[2].parse().map_err(|_| bad("bad height"))?;
    let data = bytes.get(pos + 1..).ok_or_else(|| bad("missing pixels"))?;
    if data.len() != w * h {
        return Err(bad("pixel count differs from header"));
    }
    Ok((w, h, data.to_vec()))
}

/// Fraction of episodes whose mask contains each column once the sampled
/// count first reaches `round(rate * cols)`.
pub fn mask_heatmap(traces: &[EpisodeTrace], rates: &[f64]) -> Result<HeatmapGrid, ExperimentError> {
    let first = traces.first().ok_or(EvaluationError::NoTraces)?;
    let cols = first.final_mask.cols();
    let mut cells = vec![0.0; rates.len() * cols];
    for t in traces {
        if t.final_mask.cols() != cols {
            return Err(ExperimentError::Heatmap("traces differ in column count".into()));
        }
        for (r, &rate) in rates.iter().enumerate() {
            let lines = lines_for_rate(rate, t.initial_mask.len(), cols)?;
            let mask = t.mask_after(lines);
            for (c, &s) in mask.sampled().iter().enumerate() {
                if s {
                    cells[r * cols + c] += 1.0;
                }
            }
        }
    }
    let n = traces.len() as f64;
    cells.iter_mut().for_each(|v| *v /= n);
    Ok(HeatmapGrid { rates: rates.to_vec(), cols, cells })
}

// ---------------------------------------------------------------------------
// Artifacts

/// Run directory that remembers what it wrote.
#[derive(Debug)]
pub struct Artifacts {
    root: PathBuf,
}

impl Artifacts {
    pub fn new(root: impl Into<PathBuf>) -> Result<Self, ExperimentError> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(io_err(&root))?;
        Ok(Self { root })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn write(&self, rel: &str, bytes: impl AsRef<[u8]>) -> Result<PathBuf, ExperimentError> {
        let path = self.path(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        fs::write(&path, bytes).map_err(io_err(&path))?;
        Ok(path)
    }

    fn mark_failed(&self, err: &ExperimentError) {
        // best effort: the original error is what the caller reports
        let _ = fs::write(self.path(FAILED), format!("{err}\n"));
    }

    fn clear_failed(&self) -> Result<(), ExperimentError> {
        let path = self.path(FAILED);
        match fs::remove_file(&path) {
            Err(e) if e.kind() != std::io::ErrorKind::NotFound => Err(io_err(&path)(e)),
            _ => Ok(()),
        }
    }

    /// Every file under the root except the manifest and failure marker,
    /// as sorted `/`-separated relative paths.
    pub fn list(&self) -> Result<Vec<String>, ExperimentError> {
        let mut out = Vec::new();
        let mut stack = vec![self.root.clone()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir).map_err(io_err(&dir))? {
                let path = entry.map_err(io_err(&dir))?.path();
                if path.is_dir() {
                    stack.push(path);
                    continue;
                }
                let rel = path.strip_prefix(&self.root).expect("under root");
                let rel = rel.components().map(|c| c.as_os_str().to_string_lossy()).collect::<Vec<_>>().join("/");
                if rel != MANIFEST && rel != FAILED {
                    out.push(rel);
                }
            }
        }
        out.sort();
        Ok(out)
    }

    /// Writes `manifest.txt`: the config hash, then `sha256  path` for every
    /// artifact.
    pub fn write_manifest(&self, cfg: &ExperimentConfig) -> Result<PathBuf, ExperimentError> {
        let mut s = format!("config_sha256 {}\n", cfg.hash());
        for rel in self.list()? {
            let path = self.path(&rel);
            let bytes = fs::read(&path).map_err(io_err(&path))?;
            let _ = writeln!(s, "{}  {rel}", hex(&Sha256::digest(&bytes)));
        }
        self.write(MANIFEST, s)
    }
}

pub const MANIFEST: &str = "manifest.txt";
pub const FAILED: &str = "FAILED";

/// Relative paths listed in a manifest.
pub fn manifest_entries(text: &str) -> Vec<String> {
    text.lines().skip(1).filter_map(|l| l.split_once("  ").map(|(_, p)| p.to_string())).collect()
}

// ---------------------------------------------------------------------------
// Stages

pub struct SeedData {
    pub train: Vec<Slice>,
    pub val: Vec<Slice>,
    pub test: Vec<Slice>,
}

const SPLITS: [&str; 3] = ["train", "val", "test"];

/// The three splits for `seed`: loaded from `data_dir` when configured,
/// generated otherwise.
pub fn seed_data(cfg: &ExperimentConfig, seed: u64) -> Result<SeedData, ExperimentError> {
    let mut splits = Vec::with_capacity(3);
    for (i, name) in SPLITS.iter().enumerate() {
        splits.push(match &cfg.dataset.data_dir {
            Some(dir) => load_dataset(&dir.join(format!("{name}.ksds")))?,
            None => generate(&cfg.dataset.spec(seed, i))?,
        });
    }
    let test = splits.pop().expect("three splits");
    let val = splits.pop().expect("three splits");
    let train = splits.pop().expect("three splits");
    Ok(SeedData { train, val, test })
}

/// Generates the splits for `seed` and saves them as `data/seed{s}/{split}.ksds`.
pub fn write_seed_data(cfg: &ExperimentConfig, seed: u64, art: &Artifacts) -> Result<Vec<PathBuf>, ExperimentError> {
    let data = seed_data(cfg, seed)?;
    let mut out = Vec::new();
    for (name, slices) in SPLITS.iter().zip([&data.train, &data.val, &data.test]) {
        let path = art.path(&format!("data/seed{seed}/{name}.ksds"));
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(io_err(dir))?;
        }
        save_dataset(slices, &path)?;
        out.push(path);
    }
    Ok(out)
}

pub fn oversampled(train: &[Slice], seed: u64) -> Result<Vec<Slice>, ExperimentError> {
    Ok(oversample_minority(train, tagged_seed(seed, TAG_OVERSAMPLE, 0))?)
}

/// Which classifier a checkpoint holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClassifierRole {
    Oracle,
    Pretrained,
}

impl ClassifierRole {
    pub fn name(self) -> &'static str {
        match self {
            ClassifierRole::Oracle => "oracle",
            ClassifierRole::Pretrained => "pretrained",
        }
    }
}

pub fn reward_name(kind: RewardKind) -> &'static str {
    match kind {
        RewardKind::Classification => "policy_classification",
        RewardKind::Reconstruction => "policy_reconstruction",
    }
}

fn classifier_checkpoint(seed: u64, role: ClassifierRole) -> String {
    format!("checkpoints/seed{seed}_{}.ksck", role.name())
}

fn policy_checkpoint(seed: u64, kind: RewardKind) -> String {
    format!("checkpoints/seed{seed}_{}.ksck", reward_name(kind))
}

fn epochs_csv(report: &TrainReport) -> String {
    let mut s = String::from("epoch,learning_rate,train_loss,val_auc,val_auc_full,selected\n");
    for e in &report.log {
        let sel = u8::from(e.epoch == report.best_epoch);
        let _ = writeln!(s, "{},{},{},{},{},{sel}", e.epoch, e.learning_rate, e.train_loss, e.val_auc, e.val_auc_full);
    }
    s
}

fn policy_epochs_csv(log: &[PolicyEpochLog]) -> String {
    let mut s = String::from("epoch,learning_rate,episodes,mean_return,mean_terminal_ce\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{},{}", e.epoch, e.learning_rate, e.episodes, e.mean_return, e.mean_terminal_ce);
    }
    s
}

/// Trains the oracle (full sampling) or the undersampled classifier on the
/// balanced training set; writes its checkpoint and epoch curve.
pub fn train_classifier(
    cfg: &ExperimentConfig,
    seed: u64,
    role: ClassifierRole,
    train_balanced: &[Slice],
    val: &[Slice],
    art: &Artifacts,
) -> Result<ClassifierNet<Real>, ExperimentError> {
    let tag = match role {
        ClassifierRole::Oracle => TAG_ORACLE,
        ClassifierRole::Pretrained => TAG_PRETRAIN,
    };
    let tc = cfg.classifier_config(seed, tag);
    let mut net = ClassifierNet::new(cfg.dataset.rows, cfg.dataset.cols, tc.seed)?;
    let report = match role {
        ClassifierRole::Oracle => train_oracle(&mut net, train_balanced, val, &tc)?,
        ClassifierRole::Pretrained => pretrain(&mut net, train_balanced, val, &tc)?,
    };
    let ck = art.path(&classifier_checkpoint(seed, role));
    art.write(&format!("curves/seed{seed}_{}_epochs.csv", role.name()), epochs_csv(&report))?;
    save_checkpoint(net.params(), &ck)?;
    Ok(net)
}

/// Trains a policy against the frozen pretrained classifier.
pub fn train_sampler(
    cfg: &ExperimentConfig,
    seed: u64,
    kind: RewardKind,
    classifier: &ClassifierNet<Real>,
    train_balanced: &[Slice],
    art: &Artifacts,
) -> Result<PolicyNet<Real>, ExperimentError> {
    let pc = cfg.policy_config(seed, kind);
    let mut policy = PolicyNet::new(cfg.dataset.cols, pc.seed);
    let log = train_policy(&mut policy, classifier, train_balanced, &pc)?;
    art.write(&format!("curves/seed{seed}_{}_epochs.csv", reward_name(kind)), policy_epochs_csv(&log))?;
    save_checkpoint(policy.params(), &art.path(&policy_checkpoint(seed, kind)))?;
    Ok(policy)
}

fn save_checkpoint(params: &crate::autodiff::ParamSet<Real>, path: &Path) -> Result<(), ExperimentError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    save_params(params, path).map_err(io_err(path))
}

fn load_checkpoint(path: &Path) -> Result<crate::autodiff::ParamSet<Real>, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Missing(path.to_path_buf()));
    }
    load_params(path).map_err(|source| ExperimentError::Checkpoint { path: path.to_path_buf(), source })
}

pub fn load_classifier(cfg: &ExperimentConfig, art: &Artifacts, seed: u64, role: ClassifierRole) -> Result<ClassifierNet<Real>, ExperimentError> {
    let params = load_checkpoint(&art.path(&classifier_checkpoint(seed, role)))?;
    Ok(ClassifierNet::from_params(params, cfg.dataset.rows, cfg.dataset.cols)?)
}

pub fn load_policy(cfg: &ExperimentConfig, art: &Artifacts, seed: u64, kind: RewardKind) -> Result<PolicyNet<Real>, ExperimentError> {
    let params = load_checkpoint(&art.path(&policy_checkpoint(seed, kind)))?;
    Ok(PolicyNet::from_params(params, cfg.dataset.cols)?)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Line-selection method compared at evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Method {
    /// Pretrained classifier with random extra lines.
    Undersampled,
    PolicyClassification,
    /// Simplified reconstruction-driven sampler (SSIM reward).
    PolicyReconstruction,
}

impl Method {
    pub const ALL: [Method; 3] = [Method::Undersampled, Method::PolicyClassification, Method::PolicyReconstruction];

    pub fn name(self) -> &'static str {
        match self {
            Method::Undersampled => "undersampled_random",
            Method::PolicyClassification => reward_name(RewardKind::Classification),
            Method::PolicyReconstruction => reward_name(RewardKind::Reconstruction),
        }
    }
}

/// Trained models for one seed; absent policies are skipped.
pub struct Models {
    pub oracle: Option<ClassifierNet<Real>>,
    pub pretrained: ClassifierNet<Real>,
    pub policy_classification: Option<PolicyNet<Real>>,
    pub policy_reconstruction: Option<PolicyNet<Real>>,
}

/// Which evaluation files to write.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EvalOutputs {
    pub rates: bool,
    pub lines: bool,
    pub traces: bool,
    pub heatmaps: bool,
}

impl EvalOutputs {
    pub const ALL: EvalOutputs = EvalOutputs { rates: true, lines: true, traces: true, heatmaps: true };
}

#[derive(Debug, Clone, PartialEq)]
pub struct MethodSummary {
    pub center_fraction: f64,
    pub method: Method,
    pub rates: Vec<RateResult>,
    /// Band and other-column frequencies in the last heatmap row.
    pub band_preference: (f64, f64),
    pub heatmap: HeatmapGrid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SeedSummary {
    pub seed: u64,
    pub oracle: Option<EvalResult>,
    pub methods: Vec<MethodSummary>,
}

fn cf_label(cf: f64) -> String {
    format!("cf{cf}")
}

fn traces_csv(traces: &[EpisodeTrace]) -> String {
    let mut s = String::from("slice_id,step,chosen_col,reward,cross_entropy,prob_positive\n");
    for t in traces {
        for st in &t.steps {
            let col = st.column.map(|c| c.to_string()).unwrap_or_default();
            let _ = writeln!(s, "{},{},{col},{},{},{}", t.slice_id, st.step, st.reward, st.cross_entropy, st.prob);
        }
    }
    s
}

fn result_fields(r: &EvalResult) -> String {
    format!("{},{},{},{},{}", r.auc, r.recall, r.specificity, r.n_pos, r.n_neg)
}

/// Columns excluded from the "other" side of the band preference: the
/// largest configured centre block.
pub fn center_exclusion(cfg: &ExperimentConfig) -> Range<usize> {
    let cols = cfg.dataset.cols;
    let max_cf = cfg.center_fractions.iter().copied().fold(0.0, f64::max);
    center_block(cols, fraction_to_count(max_cf, cols))
}

/// Oracle on full sampling, then every method at every centre fraction from
/// shared initial masks.
pub fn evaluate_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    models: &Models,
    test: &[Slice],
    outputs: EvalOutputs,
    art: &Artifacts,
) -> Result<SeedSummary, ExperimentError> {
    let cols = cfg.dataset.cols;
    let oracle = match &models.oracle {
        Some(net) => {
            let mut scores = Vec::with_capacity(test.len());
            for s in test {
                scores.push(net.predict(&s.kspace.cast::<Real>())?.prob);
            }
            let labels: Vec<u8> = test.iter().map(|s| s.label).collect();
            let r = evaluate(&scores, &labels, cfg.threshold).map_err(EvaluationError::from)?;
            if outputs.rates {
                art.write(
                    &format!("curves/seed{seed}_oracle_test.csv"),
                    format!("auc,recall,specificity,n_pos,n_neg\n{}\n", result_fields(&r)),
                )?;
            }
            Some(r)
        }
        None => None,
    };
    let max_lines = cfg.eval_lines();
    let exclude = center_exclusion(cfg);
    let mut rates_csv = String::from("center_fraction,method,rate,lines,auc,recall,specificity,n_pos,n_neg\n");
    let mut lines_csv = String::from("center_fraction,method,lines,sampled,rate,auc,recall,specificity,n_pos,n_neg\n");
    let mut pref_csv = String::from("center_fraction,method,rate,band_mean,other_mean,ratio\n");
    let mut methods = Vec::new();
    for (ci, &cf) in cfg.center_fractions.iter().enumerate() {
        let inits: Vec<CartesianMask> =
            initial_masks(test, cols, cfg.policy.initial_fraction, cf, tagged_seed(seed, TAG_EVAL, ci as u64))
                .map_err(EvaluationError::from)?;
        for method in Method::ALL {
            let strategy = match method {
                Method::Undersampled => Acquisition::Random { seed: tagged_seed(seed, TAG_EVAL, 1000 + ci as u64) },
                Method::PolicyClassification => match &models.policy_classification {
                    Some(p) => Acquisition::Policy(p),
                    None => continue,
                },
                Method::PolicyReconstruction => match &models.policy_reconstruction {
                    Some(p) => Acquisition::Policy(p),
                    None => continue,
                },
            };
            let traces = rollouts(&models.pretrained, strategy, test, &inits, max_lines, cfg.stop_confidence)?;
            let rates = rates_from_traces(&traces, &cfg.rates, cfg.threshold)?;
            let heatmap = mask_heatmap(&traces, &cfg.rates)?;
            let band_preference = heatmap.band_preference(cfg.rates.len() - 1, &cfg.dataset.lesion_band, &exclude);
            let tag = format!("seed{seed}_{}_{}", cf_label(cf), method.name());
            for r in &rates {
                let _ = writeln!(rates_csv, "{cf},{},{},{},{}", method.name(), r.rate, r.lines, result_fields(&r.result));
            }
            if outputs.lines {
                let per_line: Vec<LineResult> = per_line_from_traces(&traces, max_lines, cfg.threshold)?;
                for l in &per_line {
                    let rate = l.sampled as f64 / cols as f64;
                    let _ = writeln!(lines_csv, "{cf},{},{},{},{rate},{}", method.name(), l.lines, l.sampled, result_fields(&l.result));
                }
            }
            if outputs.traces {
                art.write(&format!("traces/{tag}.csv"), traces_csv(&traces))?;
            }
            if outputs.heatmaps {
                art.write(&format!("heatmaps/{tag}.pgm"), heatmap.to_pgm())?;
                art.write(&format!("heatmaps/{tag}.csv"), heatmap.to_csv())?;
                let (b, o) = band_preference;
                let rate = cfg.rates[cfg.rates.len() - 1];
                let _ = writeln!(pref_csv, "{cf},{},{rate},{b},{o},{}", method.name(), b / o);
            }
            methods.push(MethodSummary { center_fraction: cf, method, rates, band_preference, heatmap });
        }
    }
    if outputs.rates {
        art.write(&format!("curves/seed{seed}_rates.csv"), rates_csv)?;
    }
    if outputs.lines {
        art.write(&format!("curves/seed{seed}_lines.csv"), lines_csv)?;
    }
    if outputs.heatmaps {
        art.write(&format!("curves/seed{seed}_band_preference.csv"), pref_csv)?;
    }
    Ok(SeedSummary { seed, oracle, methods })
}

/// Cross-seed means and sample standard deviations, plus a plain-text
/// report.
pub fn summarize(cfg: &ExperimentConfig, seeds: &[SeedSummary], art: &Artifacts) -> Result<(), ExperimentError> {
    let stat = |xs: Vec<f64>| {
        let (m, s) = mean_std(&xs);
        format!("{m},{s}")
    };
    let oracles: Vec<EvalResult> = seeds.iter().filter_map(|s| s.oracle).collect();
    let mut report = format!("config_sha256 {}\nseeds {}\n\n", cfg.hash(), join(&cfg.seeds));
    if !oracles.is_empty() {
        let mut s = String::from("auc_mean,auc_std,recall_mean,recall_std,specificity_mean,specificity_std,seeds\n");
        let _ = writeln!(
            s,
            "{},{},{},{}",
            stat(oracles.iter().map(|r| r.auc).collect()),
            stat(oracles.iter().map(|r| r.recall).collect()),
            stat(oracles.iter().map(|r| r.specificity).collect()),
            oracles.len()
        );
        art.write("curves/summary_oracle.csv", s)?;
        let (m, sd) = mean_std(&oracles.iter().map(|r| r.auc).collect::<Vec<_>>());
        let _ = writeln!(report, "oracle (full sampling) test AUC {m:.4} +/- {sd:.4}\n");
    }
    let mut s = String::from(
        "center_fraction,method,rate,lines,auc_mean,auc_std,recall_mean,recall_std,specificity_mean,specificity_std,seeds\n",
    );
    let mut pref = String::from("center_fraction,method,ratio_min,ratio_mean,seeds\n");
    let _ = writeln!(report, "AUC by centre fraction, method and sample rate (mean +/- sd over seeds)");
    let _ = writeln!(report, "policy_reconstruction is the simplified SSIM-reward sampler, not a reconstruction network.");
    for &cf in &cfg.center_fractions {
        for method in Method::ALL {
            let runs: Vec<&MethodSummary> = seeds
                .iter()
                .filter_map(|s| s.methods.iter().find(|m| m.center_fraction == cf && m.method == method))
                .collect();
            if runs.is_empty() {
                continue;
            }
            let _ = write!(report, "\ncf {cf:<5} {:<22}", method.name());
            for (ri, &rate) in cfg.rates.iter().enumerate() {
                let res: Vec<&EvalResult> = runs.iter().map(|m| &m.rates[ri].result).collect();
                let _ = writeln!(
                    s,
                    "{cf},{},{rate},{},{},{},{},{}",
                    method.name(),
                    runs[0].rates[ri].lines,
                    stat(res.iter().map(|r| r.auc).collect()),
                    stat(res.iter().map(|r| r.recall).collect()),
                    stat(res.iter().map(|r| r.specificity).collect()),
                    runs.len()
                );
                let (m, sd) = mean_std(&res.iter().map(|r| r.auc).collect::<Vec<_>>());
                let _ = write!(report, " {:>3.0}%: {m:.3}+/-{sd:.3}", rate * 100.0);
            }
            let ratios: Vec<f64> = runs.iter().map(|m| m.band_preference.0 / m.band_preference.1).collect();
            let min = ratios.iter().copied().fold(f64::INFINITY, f64::min);
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            let _ = writeln!(pref, "{cf},{},{min},{mean},{}", method.name(), runs.len());
            let _ = write!(report, "  band/other {mean:.2}");
        }
    }
    report.push('\n');
    art.write("curves/summary_rates.csv", s)?;
    art.write("curves/summary_band_preference.csv", pref)?;
    art.write("report.txt", report)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// Pipeline

fn staged<T>(stage: Stage, seed: Option<u64>, r: Result<T, ExperimentError>) -> Result<T, ExperimentError> {
    r.map_err(|e| ExperimentError::Stage { stage, seed, source: Box::new(e) })
}

/// Everything for one seed: data, both classifiers, both policies and the
/// evaluation files.
pub fn run_seed(
    cfg: &ExperimentConfig,
    seed: u64,
    art: &Artifacts,
    progress: &mut dyn FnMut(Stage, u64),
) -> Result<SeedSummary, ExperimentError> {
    let s = Some(seed);
    progress(Stage::Data, seed);
    let data = staged(Stage::Data, s, seed_data(cfg, seed))?;
    progress(Stage::Oversample, seed);
    let balanced = staged(Stage::Oversample, s, oversampled(&data.train, seed))?;
    progress(Stage::Oracle, seed);
    let oracle = staged(Stage::Oracle, s, train_classifier(cfg, seed, ClassifierRole::Oracle, &balanced, &data.val, art))?;
    progress(Stage::Pretrain, seed);
    let pretrained =
        staged(Stage::Pretrain, s, train_classifier(cfg, seed, ClassifierRole::Pretrained, &balanced, &data.val, art))?;
    progress(Stage::PolicyClassification, seed);
    let pc = staged(
        Stage::PolicyClassification,
        s,
        train_sampler(cfg, seed, RewardKind::Classification, &pretrained, &balanced, art),
    )?;
    progress(Stage::PolicyReconstruction, seed);
    let pr = staged(
        Stage::PolicyReconstruction,
        s,
        train_sampler(cfg, seed, RewardKind::Reconstruction, &pretrained, &balanced, art),
    )?;
    progress(Stage::Evaluate, seed);
    let models = Models { oracle: Some(oracle), pretrained, policy_classification: Some(pc), policy_reconstruction: Some(pr) };
    staged(Stage::Evaluate, s, evaluate_seed(cfg, seed, &models, &data.test, EvalOutputs::ALL, art))
}

/// Runs every seed, the cross-seed summary and the manifest into
/// `cfg.out_dir`. On failure a `FAILED` file naming the stage is left next
/// to whatever was already written.
pub fn run_pipeline(cfg: &ExperimentConfig, progress: &mut dyn FnMut(Stage, u64)) -> Result<Vec<SeedSummary>, ExperimentError> {
    cfg.validate()?;
    let art = Artifacts::new(&cfg.out_dir)?;
    art.clear_failed()?;
    let result = (|| {
        let mut summaries = Vec::with_capacity(cfg.seeds.len());
        for &seed in &cfg.seeds {
            summaries.push(run_seed(cfg, seed, &art, progress)?);
        }
        staged(Stage::Summarize, None, summarize(cfg, &summaries, &art))?;
        staged(Stage::Manifest, None, art.write_manifest(cfg))?;
        Ok(summaries)
    })();
    if let Err(e) = &result {
        art.mark_failed(e);
    }
    result
}

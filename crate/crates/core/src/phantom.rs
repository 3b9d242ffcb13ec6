//! Synthetic binary-labelled k-space slices and the `KSDS` dataset format.
//!
//! Each slice is a smooth multi-ellipse "anatomy". Positive slices add a thin,
//! nearly horizontal line lesion carrying a complex spatial carrier, which
//! places most of its spectral energy in a known band of k-space columns.
//! K-space is stored centred (DC at `(rows/2, cols/2)`) in single precision,
//! the precision of the on-disk format.

use std::f64::consts::PI;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::ops::Range;
use std::path::Path;

use num_complex::Complex;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::fourier::{centered_fft2, ComplexMatrix, FourierError};
use crate::masking::fraction_to_count;
use crate::seed::derive_seed;

const MAGIC: &[u8; 4] = b"KSDS";
const VERSION: u8 = 1;
const MAX_LESION_RETRIES: usize = 100;
/// Minimum share of lesion spectral energy that must fall inside the band.
pub const MIN_BAND_CONCENTRATION: f64 = 0.6;

#[derive(Debug, Error)]
pub enum PhantomError {
    #[error("invalid dataset spec: {0}")]
    InvalidSpec(String),
    #[error("slice {index}: lesion band concentration stayed below {MIN_BAND_CONCENTRATION} after {MAX_LESION_RETRIES} retries")]
    LesionConcentration { index: usize },
    #[error("oversampling needs both classes (positives {positives}, negatives {negatives})")]
    SingleClass { positives: usize, negatives: usize },
    #[error("not a dataset file (bad magic)")]
    BadMagic,
    #[error("unsupported dataset version {0}")]
    BadVersion(u8),
    #[error("dataset header truncated")]
    TruncatedHeader,
    #[error("dataset truncated in slice {index}")]
    Truncated { index: usize },
    #[error("slice {index}: label byte {label} is not 0 or 1")]
    BadLabel { index: usize, label: u8 },
    #[error(transparent)]
    Fourier(#[from] FourierError),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSpec {
    pub n_slices: usize,
    pub rows: usize,
    pub cols: usize,
    pub positive_fraction: f64,
    /// Centred column range holding the lesion's spectral signature.
    pub lesion_band: Range<usize>,
    /// Peak lesion intensity relative to unit anatomy intensity.
    pub lesion_amplitude: f64,
    /// Noise std as a fraction of the slice's clean DC magnitude.
    pub noise_sigma: f64,
    pub seed: u64,
    /// Added to every slice id so that splits do not collide.
    pub id_offset: u32,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self {
            n_slices: 2000,
            rows: 64,
            cols: 64,
            positive_fraction: 0.118,
            lesion_band: 42..48,
            lesion_amplitude: 1.5,
            noise_sigma: 0.02,
            seed: 0,
            id_offset: 0,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<(), PhantomError> {
        let bad = |m: String| Err(PhantomError::InvalidSpec(m));
        if !self.rows.is_power_of_two() || !self.cols.is_power_of_two() || self.rows < 8 || self.cols < 8 {
            return bad(format!("{}x{} is not a power-of-two size >= 8", self.rows, self.cols));
        }
        if !(self.positive_fraction > 0.0 && self.positive_fraction < 1.0) {
            return bad(format!("positive_fraction {} not in (0, 1)", self.positive_fraction));
        }
        if self.lesion_band.is_empty() || self.lesion_band.end > self.cols {
            return bad(format!("lesion_band {:?} not within [0, {})", self.lesion_band, self.cols));
        }
        if !(self.noise_sigma >= 0.0) || !(self.lesion_amplitude > 0.0) {
            return bad("noise_sigma must be >= 0 and lesion_amplitude > 0".into());
        }
        Ok(())
    }

    /// Spatial frequency (cycles per field of view, horizontal) at the band centre.
    fn carrier(&self) -> f64 {
        (self.lesion_band.start + self.lesion_band.end - 1) as f64 / 2.0 - (self.cols / 2) as f64
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slice {
    pub id: u32,
    /// 1 = lesion present.
    pub label: u8,
    pub kspace: ComplexMatrix<f32>,
}

/// Noise-free image-domain components of one slice.
#[derive(Debug, Clone)]
pub struct SliceParts {
    pub base: ComplexMatrix<f64>,
    pub lesion: Option<ComplexMatrix<f64>>,
    /// Lesion orientation in radians from horizontal.
    pub orientation: f64,
    pub attempts: usize,
}

struct Ellipse {
    cy: f64,
    cx: f64,
    ry: f64,
    rx: f64,
    angle: f64,
    intensity: f64,
}

impl Ellipse {
    fn value(&self, y: f64, x: f64) -> f64 {
        let (s, c) = self.angle.sin_cos();
        let (dy, dx) = (y - self.cy, x - self.cx);
        let u = (c * dx + s * dy) / self.rx;
        let v = (-s * dx + c * dy) / self.ry;
        let rho = (u * u + v * v).sqrt();
        // logistic edge roughly one pixel wide
        let edge = 1.0 / self.rx.min(self.ry);
        self.intensity / (1.0 + ((rho - 1.0) / edge).exp())
    }
}

fn render_base(spec: &DatasetSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (rows, cols) = (spec.rows as f64, spec.cols as f64);
    let count = rng.random_range(2..=4);
    let mut ellipses = Vec::with_capacity(count);
    ellipses.push(Ellipse {
        cy: rows / 2.0 + rng.random_range(-0.05..0.05) * rows,
        cx: cols / 2.0 + rng.random_range(-0.05..0.05) * cols,
        ry: rng.random_range(0.28..0.40) * rows,
        rx: rng.random_range(0.28..0.40) * cols,
        angle: rng.random_range(0.0..PI),
        intensity: rng.random_range(0.6..1.0),
    });
    for _ in 1..count {
        ellipses.push(Ellipse {
            cy: rows / 2.0 + rng.random_range(-0.18..0.18) * rows,
            cx: cols / 2.0 + rng.random_range(-0.18..0.18) * cols,
            ry: rng.random_range(0.06..0.18) * rows,
            rx: rng.random_range(0.06..0.18) * cols,
            angle: rng.random_range(0.0..PI),
            intensity: rng.random_range(-0.3..0.4),
        });
    }
    let mut img = vec![0.0; spec.rows * spec.cols];
    for y in 0..spec.rows {
        for x in 0..spec.cols {
            img[y * spec.cols + x] = ellipses.iter().map(|e| e.value(y as f64, x as f64)).sum();
        }
    }
    img
}

/// Thin Gaussian-profile segment with a complex horizontal carrier.
fn render_lesion(spec: &DatasetSpec, cy: f64, cx: f64, angle: f64) -> ComplexMatrix<f64> {
    let width = 0.8;
    let half_length = 0.1 * spec.cols as f64;
    let freq = spec.carrier();
    let (s, c) = angle.sin_cos();
    let mut data = Vec::with_capacity(spec.rows * spec.cols);
    for y in 0..spec.rows {
        for x in 0..spec.cols {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let along = c * dx + s * dy;
            let across = -s * dx + c * dy;
            let env = spec.lesion_amplitude
                * (-(across * across) / (2.0 * width * width)).exp()
                * (-(along * along) / (2.0 * half_length * half_length)).exp();
            let phase = 2.0 * PI * freq * x as f64 / spec.cols as f64;
            data.push(Complex::from_polar(env, phase));
        }
    }
    ComplexMatrix::from_vec(spec.rows, spec.cols, data).expect("validated dims")
}

/// Share of the spectral energy of `image` that lies in `band` columns of
/// its centred k-space.
pub fn band_energy_fraction(image: &ComplexMatrix<f64>, band: &Range<usize>) -> f64 {
    let k = centered_fft2(image);
    let total = k.energy();
    if total == 0.0 {
        return 0.0;
    }
    let cols = k.cols();
    let inside: f64 = k
        .data()
        .iter()
        .enumerate()
        .filter(|(i, _)| band.contains(&(i % cols)))
        .map(|(_, v)| v.norm_sqr())
        .sum();
    inside / total
}

/// Per-slice RNG, positioned after the base-anatomy draws so that a slice's
/// anatomy does not depend on its label.
fn parts_with_rng(spec: &DatasetSpec, index: usize, positive: bool) -> Result<(SliceParts, ChaCha8Rng), PhantomError> {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, index as u64));
    let base_img = render_base(spec, &mut rng);
    let base = ComplexMatrix::from_real(spec.rows, spec.cols, &base_img)?;
    if !positive {
        return Ok((SliceParts { base, lesion: None, orientation: 0.0, attempts: 0 }, rng));
    }
    let cy = spec.rows as f64 / 2.0 + rng.random_range(-0.15..0.15) * spec.rows as f64;
    let cx = spec.cols as f64 / 2.0 + rng.random_range(-0.1..0.1) * spec.cols as f64;
    let max_tilt = 10f64.to_radians();
    for attempt in 1..=MAX_LESION_RETRIES {
        let angle = rng.random_range(-max_tilt..max_tilt);
        let lesion = render_lesion(spec, cy, cx, angle);
        if band_energy_fraction(&lesion, &spec.lesion_band) >= MIN_BAND_CONCENTRATION {
            let parts = SliceParts { base, lesion: Some(lesion), orientation: angle, attempts: attempt };
            return Ok((parts, rng));
        }
    }
    Err(PhantomError::LesionConcentration { index })
}

/// Noise-free components of slice `index` as it would be drawn with the
/// given label. The anatomy is identical for both labels.
pub fn slice_parts(spec: &DatasetSpec, index: usize, positive: bool) -> Result<SliceParts, PhantomError> {
    spec.validate()?;
    Ok(parts_with_rng(spec, index, positive)?.0)
}

fn synthesize(spec: &DatasetSpec, index: usize, positive: bool) -> Result<Slice, PhantomError> {
    let (parts, mut rng) = parts_with_rng(spec, index, positive)?;
    let image = match &parts.lesion {
        Some(l) => parts.base.add(l),
        None => parts.base,
    };
    let mut k = centered_fft2(&image.cast::<f32>());
    if spec.noise_sigma > 0.0 {
        let dc = k.get(spec.rows / 2, spec.cols / 2).norm() as f64;
        let std = spec.noise_sigma * dc / 2f64.sqrt();
        let normal = Normal::new(0.0, std).map_err(|e| PhantomError::InvalidSpec(e.to_string()))?;
        for v in k.data_mut() {
            v.re += normal.sample(&mut rng) as f32;
            v.im += normal.sample(&mut rng) as f32;
        }
    }
    Ok(Slice { id: spec.id_offset + index as u32, label: u8::from(positive), kspace: k })
}

/// Draws `n_slices` slices with exactly `round(positive_fraction * n)`
/// positives. Deterministic in `spec.seed`.
pub fn generate(spec: &DatasetSpec) -> Result<Vec<Slice>, PhantomError> {
    spec.validate()?;
    let n_pos = fraction_to_count(spec.positive_fraction, spec.n_slices);
    let mut labels = vec![false; spec.n_slices];
    labels.iter_mut().take(n_pos).for_each(|l| *l = true);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, u64::MAX));
    labels.shuffle(&mut rng);
    labels.iter().enumerate().map(|(i, &pos)| synthesize(spec, i, pos)).collect()
}

/// Duplicates minority-class slices (drawn with replacement) until both
/// classes have equal counts, then shuffles.
pub fn oversample_minority(slices: &[Slice], seed: u64) -> Result<Vec<Slice>, PhantomError> {
    let (pos, neg): (Vec<&Slice>, Vec<&Slice>) = slices.iter().partition(|s| s.label == 1);
    if pos.is_empty() || neg.is_empty() {
        return Err(PhantomError::SingleClass { positives: pos.len(), negatives: neg.len() });
    }
    let (minority, majority) = if pos.len() < neg.len() { (&pos, &neg) } else { (&neg, &pos) };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Slice> = slices.to_vec();
    for _ in minority.len()..majority.len() {
        out.push(minority[rng.random_range(0..minority.len())].clone());
    }
    out.shuffle(&mut rng);
    Ok(out)
}

pub fn write_dataset<W: Write>(slices: &[Slice], mut w: W) -> Result<(), PhantomError> {
    let (rows, cols) = slices.first().map_or((0, 0), |s| (s.kspace.rows(), s.kspace.cols()));
    if let Some(bad) = slices.iter().find(|s| (s.kspace.rows(), s.kspace.cols()) != (rows, cols)) {
        return Err(PhantomError::InvalidSpec(format!("slice {} has a different geometry", bad.id)));
    }
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    for v in [slices.len(), rows, cols] {
        w.write_all(&(v as u32).to_le_bytes())?;
    }
    for s in slices {
        w.write_all(&s.id.to_le_bytes())?;
        w.write_all(&[s.label])?;
        for c in s.kspace.data() {
            w.write_all(&c.re.to_le_bytes())?;
            w.write_all(&c.im.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn read_dataset<R: Read>(mut r: R) -> Result<Vec<Slice>, PhantomError> {
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic).map_err(|_| PhantomError::BadMagic)?;
    if &magic[..4] != MAGIC {
        return Err(PhantomError::BadMagic);
    }
    if magic[4] != VERSION {
        return Err(PhantomError::BadVersion(magic[4]));
    }
    let header = |_| PhantomError::TruncatedHeader;
    let n = read_u32(&mut r).map_err(header)? as usize;
    let rows = read_u32(&mut r).map_err(header)? as usize;
    let cols = read_u32(&mut r).map_err(header)? as usize;
    let mut slices = Vec::with_capacity(n.min(1 << 16));
    let mut payload = vec![0u8; rows * cols * 8];
    for index in 0..n {
        let truncated = |_| PhantomError::Truncated { index };
        let id = read_u32(&mut r).map_err(truncated)?;
        let mut label = [0u8; 1];
        r.read_exact(&mut label).map_err(truncated)?;
        if label[0] > 1 {
            return Err(PhantomError::BadLabel { index, label: label[0] });
        }
        r.read_exact(&mut payload).map_err(truncated)?;
        let data = payload
            .chunks_exact(8)
            .map(|b| {
                let re = f32::from_le_bytes([b[0], b[1], b[2], b[3]]);
                let im = f32::from_le_bytes([b[4], b[5], b[6], b[7]]);
                Complex::new(re, im)
            })
            .collect();
        slices.push(Slice { id, label: label[0], kspace: ComplexMatrix::from_vec(rows, cols, data)? });
    }
    Ok(slices)
}

pub fn save_dataset(slices: &[Slice], path: &Path) -> Result<(), PhantomError> {
    write_dataset(slices, BufWriter::new(File::create(path)?))
}

pub fn load_dataset(path: &Path) -> Result<Vec<Slice>, PhantomError> {
    read_dataset(BufReader::new(File::open(path)?))
}

/// Byte offset of slice `index` in a file holding `rows x cols` slices.
pub fn slice_offset(index: usize, rows: usize, cols: usize) -> usize {
    5 + 12 + index * (5 + rows * cols * 8)
}

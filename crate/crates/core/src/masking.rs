//! Cartesian line masks over centred k-space columns.
//!
//! A mask is a per-column acquisition flag replicated down every row, plus
//! the order in which columns were acquired. Column `cols/2` holds the DC
//! frequency (the matrix has been through `fftshift2`), so the "centre"
//! block is the contiguous run of columns around `cols/2`.

use std::fmt::Write as _;

use num_complex::Complex;
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::fourier::ComplexMatrix;
use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("{name} = {value} is outside [0, 1]")]
    FractionOutOfRange { name: &'static str, value: f64 },
    #[error("center fraction {center} exceeds initial fraction {initial}")]
    CenterExceedsInitial { center: f64, initial: f64 },
    #[error("column {col} already sampled")]
    AlreadySampled { col: usize },
    #[error("column {col} out of range for {cols} columns")]
    OutOfRange { col: usize, cols: usize },
    #[error("mask has {mask} columns but k-space has {kspace}")]
    DimensionMismatch { mask: usize, kspace: usize },
    #[error("malformed mask csv: {0}")]
    Parse(String),
}

/// Round-half-up conversion of a fraction of `cols` to a column count.
pub fn fraction_to_count(fraction: f64, cols: usize) -> usize {
    // the small epsilon absorbs representation error such as 0.05 * 320
    (fraction * cols as f64 + 0.5 + 1e-9).floor() as usize
}

/// Half-open range of the `n` central columns, centred on `cols / 2`.
pub fn center_block(cols: usize, n: usize) -> std::ops::Range<usize> {
    let start = (cols / 2).saturating_sub(n / 2);
    start..(start + n).min(cols)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskInit {
    pub initial_fraction: f64,
    pub center_fraction: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CartesianMask {
    sampled: Vec<bool>,
    order: Vec<usize>,
}

impl CartesianMask {
    pub fn empty(cols: usize) -> Self {
        Self { sampled: vec![false; cols], order: Vec::new() }
    }

    pub fn full(cols: usize) -> Self {
        Self { sampled: vec![true; cols], order: (0..cols).collect() }
    }

    /// Mask built by acquiring `order` one column at a time.
    pub fn from_order(cols: usize, order: &[usize]) -> Result<Self, MaskError> {
        let mut m = Self::empty(cols);
        for &c in order {
            m.add_line_mut(c)?;
        }
        Ok(m)
    }

    pub fn cols(&self) -> usize {
        self.sampled.len()
    }

    pub fn sampled(&self) -> &[bool] {
        &self.sampled
    }

    pub fn is_sampled(&self, col: usize) -> bool {
        self.sampled[col]
    }

    pub fn order(&self) -> &[usize] {
        &self.order
    }

    /// Number of acquired lines.
    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn is_full(&self) -> bool {
        self.order.len() == self.sampled.len()
    }

    pub fn unsampled(&self) -> impl Iterator<Item = usize> + '_ {
        self.sampled.iter().enumerate().filter(|(_, &s)| !s).map(|(i, _)| i)
    }

    pub fn sample_rate(&self) -> f64 {
        if self.sampled.is_empty() {
            return 0.0;
        }
        self.order.len() as f64 / self.sampled.len() as f64
    }

    /// Returns a new mask with `col` acquired.
    pub fn add_line(&self, col: usize) -> Result<Self, MaskError> {
        let mut next = self.clone();
        next.add_line_mut(col)?;
        Ok(next)
    }

    pub fn add_line_mut(&mut self, col: usize) -> Result<(), MaskError> {
        let cols = self.cols();
        if col >= cols {
            return Err(MaskError::OutOfRange { col, cols });
        }
        if self.sampled[col] {
            return Err(MaskError::AlreadySampled { col });
        }
        self.sampled[col] = true;
        self.order.push(col);
        Ok(())
    }

    /// Zeroes every unsampled column of `k`.
    pub fn apply<T: Scalar>(&self, k: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>, MaskError> {
        apply_mask(k, self)
    }

    /// Two CSV rows: the 0/1 flags, then the acquisition order.
    pub fn to_csv(&self) -> String {
        let flags: Vec<&str> = self.sampled.iter().map(|&s| if s { "1" } else { "0" }).collect();
        let order: Vec<String> = self.order.iter().map(|c| c.to_string()).collect();
        let mut out = String::new();
        let _ = writeln!(out, "{}", flags.join(","));
        let _ = writeln!(out, "{}", order.join(","));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, MaskError> {
        let mut lines = text.lines();
        let flags = lines.next().ok_or_else(|| MaskError::Parse("missing flag row".into()))?;
        let order_row = lines.next().unwrap_or("");
        let sampled = flags
            .split(',')
            .map(|f| match f.trim() {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(MaskError::Parse(format!("bad flag {other:?}"))),
            })
            .collect::<Result<Vec<_>, _>>()?;
        let order = if order_row.trim().is_empty() {
            Vec::new()
        } else {
            order_row
                .split(',')
                .map(|c| c.trim().parse::<usize>().map_err(|e| MaskError::Parse(e.to_string())))
                .collect::<Result<Vec<_>, _>>()?
        };
        let mask = Self::from_order(sampled.len(), &order)?;
        if mask.sampled != sampled {
            return Err(MaskError::Parse("flag row disagrees with order row".into()));
        }
        Ok(mask)
    }
}

fn check_fraction(name: &'static str, value: f64) -> Result<(), MaskError> {
    if !(0.0..=1.0).contains(&value) {
        return Err(MaskError::FractionOutOfRange { name, value });
    }
    Ok(())
}

/// Centre block of `round(center_fraction·cols)` columns, topped up to
/// `round(initial_fraction·cols)` with columns drawn uniformly without
/// replacement from the rest.
pub fn init_mask(cols: usize, init: MaskInit) -> Result<CartesianMask, MaskError> {
    check_fraction("initial_fraction", init.initial_fraction)?;
    check_fraction("center_fraction", init.center_fraction)?;
    let total = fraction_to_count(init.initial_fraction, cols);
    let center = fraction_to_count(init.center_fraction, cols);
    if center > total {
        return Err(MaskError::CenterExceedsInitial {
            center: init.center_fraction,
            initial: init.initial_fraction,
        });
    }
    let mut mask = CartesianMask::empty(cols);
    for c in center_block(cols, center) {
        mask.add_line_mut(c)?;
    }
    let rest: Vec<usize> = mask.unsampled().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    for i in index::sample(&mut rng, rest.len(), total - center) {
        mask.add_line_mut(rest[i])?;
    }
    Ok(mask)
}

pub fn apply_mask<T: Scalar>(k: &ComplexMatrix<T>, m: &CartesianMask) -> Result<ComplexMatrix<T>, MaskError> {
    let cols = k.cols();
    if m.cols() != cols {
        return Err(MaskError::DimensionMismatch { mask: m.cols(), kspace: cols });
    }
    let mut out = k.clone();
    let zero = Complex::new(T::zero(), T::zero());
    for row in out.data_mut().chunks_exact_mut(cols) {
        for (v, &keep) in row.iter_mut().zip(m.sampled()) {
            if !keep {
                *v = zero;
            }
        }
    }
    Ok(out)
}

pub fn add_line(m: &CartesianMask, col: usize) -> Result<CartesianMask, MaskError> {
    m.add_line(col)
}

pub fn sample_rate(m: &CartesianMask) -> f64 {
    m.sample_rate()
}

//! Complex matrices and the orthonormal 2D DFT linking k-space and image space.
//!
//! Transforms are radix-2 Cooley-Tukey, so both dimensions must be powers of
//! two. Scaling is `1/sqrt(n)` per axis in both directions, which makes
//! [`fft2`] and [`ifft2`] unitary and exact inverses of each other.

use num_complex::Complex;
use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FourierError {
    #[error("dimensions {rows}x{cols} are not powers of two")]
    NotPowerOfTwo { rows: usize, cols: usize },
    #[error("dimensions {rows}x{cols} are not even")]
    OddDimension { rows: usize, cols: usize },
    #[error("data length {len} does not match {rows}x{cols}")]
    LengthMismatch { rows: usize, cols: usize, len: usize },
}

/// Row-major complex matrix with power-of-two dimensions.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexMatrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<Complex<T>>,
}

/// Row-major real image, e.g. the modulus of a zero-filled reconstruction.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage<T> {
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<T>,
}

fn check_dims(rows: usize, cols: usize) -> Result<(), FourierError> {
    if rows == 0 || cols == 0 || !rows.is_power_of_two() || !cols.is_power_of_two() {
        return Err(FourierError::NotPowerOfTwo { rows, cols });
    }
    Ok(())
}

impl<T: Scalar> ComplexMatrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Result<Self, FourierError> {
        check_dims(rows, cols)?;
        Ok(Self {
            rows,
            cols,
            data: vec![Complex::new(T::zero(), T::zero()); rows * cols],
        })
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<Complex<T>>) -> Result<Self, FourierError> {
        check_dims(rows, cols)?;
        if data.len() != rows * cols {
            return Err(FourierError::LengthMismatch { rows, cols, len: data.len() });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix with zero imaginary part from real row-major values.
    pub fn from_real(rows: usize, cols: usize, re: &[T]) -> Result<Self, FourierError> {
        let data = re.iter().map(|&v| Complex::new(v, T::zero())).collect();
        Self::from_vec(rows, cols, data)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<Complex<T>> {
        self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex<T> {
        self.data[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, v: Complex<T>) {
        self.data[row * self.cols + col] = v;
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> T {
        self.data.iter().map(|c| c.norm_sqr()).sum()
    }

    pub fn scaled(&self, s: Complex<T>) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&c| c * s).collect(),
        }
    }

    /// Elementwise sum; panics on shape mismatch.
    pub fn add(&self, other: &Self) -> Self {
        assert_eq!((self.rows, self.cols), (other.rows, other.cols), "shape mismatch");
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
        }
    }

    /// Elementwise precision conversion.
    pub fn cast<U: Scalar>(&self) -> ComplexMatrix<U> {
        let conv = |v: T| U::from_f64(v.to_f64().unwrap_or(f64::NAN)).unwrap_or(U::nan());
        ComplexMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|c| Complex::new(conv(c.re), conv(c.im))).collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> T {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(T::zero(), T::max)
    }
}

impl<T: Scalar> RealImage<T> {
    pub fn max(&self) -> T {
        self.pixels.iter().copied().fold(T::zero(), T::max)
    }
}

/// In-place iterative radix-2 transform of one line. The direction is carried
/// by `twiddles`; no scaling is applied.
fn fft_line<T: Scalar>(buf: &mut [Complex<T>], twiddles: &[Complex<T>]) {
    let n = buf.len();
    if n <= 1 {
        return;
    }
    let bits = n.trailing_zeros();
    for i in 0..n {
        let j = i.reverse_bits() >> (usize::BITS - bits);
        if j > i {
            buf.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let half = len / 2;
        let stride = n / len;
        for start in (0..n).step_by(len) {
            for k in 0..half {
                let w = twiddles[k * stride];
                let a = buf[start + k];
                let b = buf[start + k + half] * w;
                buf[start + k] = a + b;
                buf[start + k + half] = a - b;
            }
        }
        len <<= 1;
    }
}

fn twiddles<T: Scalar>(n: usize, inverse: bool) -> Vec<Complex<T>> {
    let sign = if inverse { T::one() } else { -T::one() };
    let two_pi = T::PI() + T::PI();
    (0..n / 2)
        .map(|k| {
            let theta = sign * two_pi * T::from_usize_lossy(k) / T::from_usize_lossy(n);
            Complex::new(theta.cos(), theta.sin())
        })
        .collect()
}

fn transform2<T: Scalar>(m: &ComplexMatrix<T>, inverse: bool) -> ComplexMatrix<T> {
    let (rows, cols) = (m.rows, m.cols);
    let mut out = m.data.clone();
    let tw_c = twiddles::<T>(cols, inverse);
    for row in out.chunks_exact_mut(cols) {
        fft_line(row, &tw_c);
    }
    let tw_r = twiddles::<T>(rows, inverse);
    let mut column = vec![Complex::new(T::zero(), T::zero()); rows];
    for c in 0..cols {
        for r in 0..rows {
            column[r] = out[r * cols + c];
        }
        fft_line(&mut column, &tw_r);
        for r in 0..rows {
            out[r * cols + c] = column[r];
        }
    }
    let scale = T::one() / T::from_usize_lossy(rows * cols).sqrt();
    for v in &mut out {
        *v *= scale;
    }
    ComplexMatrix { rows, cols, data: out }
}

/// Orthonormal forward 2D DFT.
pub fn fft2<T: Scalar>(img: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    transform2(img, false)
}

/// Orthonormal inverse 2D DFT.
pub fn ifft2<T: Scalar>(k: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    transform2(k, true)
}

pub fn magnitude<T: Scalar>(c: &ComplexMatrix<T>) -> RealImage<T> {
    RealImage {
        rows: c.rows,
        cols: c.cols,
        pixels: c.data.iter().map(|z| z.norm_sqr().sqrt()).collect(),
    }
}

/// Swaps quadrants so the DC bin moves to `(rows/2, cols/2)`.
pub fn fftshift2<T: Scalar>(c: &ComplexMatrix<T>) -> Result<ComplexMatrix<T>, FourierError> {
    let (rows, cols) = (c.rows, c.cols);
    if rows % 2 != 0 || cols % 2 != 0 {
        return Err(FourierError::OddDimension { rows, cols });
    }
    let (hr, hc) = (rows / 2, cols / 2);
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let src_row = (r + hr) % rows;
        for col in 0..cols {
            data.push(c.data[src_row * cols + (col + hc) % cols]);
        }
    }
    Ok(ComplexMatrix { rows, cols, data })
}

/// Image-space counterpart of centred k-space: `ifft2(fftshift2(k))`.
pub fn centered_ifft2<T: Scalar>(k: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    // power-of-two dims are always even unless 1x1
    match fftshift2(k) {
        Ok(shifted) => ifft2(&shifted),
        Err(_) => ifft2(k),
    }
}

/// Centred k-space of an image: `fftshift2(fft2(img))`.
pub fn centered_fft2<T: Scalar>(img: &ComplexMatrix<T>) -> ComplexMatrix<T> {
    let k = fft2(img);
    match fftshift2(&k) {
        Ok(shifted) => shifted,
        Err(_) => k,
    }
}

/// Image-domain contribution of every column of a centred k-space matrix.
///
/// The zero-filled reconstruction of a column mask is the sum of the
/// contributions of its columns, so masks that grow one line at a time can be
/// reconstructed incrementally in `O(rows * cols)` per line.
#[derive(Debug, Clone)]
pub struct ColumnImages<T> {
    rows: usize,
    cols: usize,
    /// `profiles[c * rows + y]`: inverse transform of column `c` along rows.
    profiles: Vec<Complex<T>>,
    /// `roots[j] = exp(2 pi i j / cols)`.
    roots: Vec<Complex<T>>,
}

impl<T: Scalar> ColumnImages<T> {
    pub fn new(k: &ComplexMatrix<T>) -> Result<Self, FourierError> {
        let (rows, cols) = (k.rows, k.cols);
        if rows % 2 != 0 || cols % 2 != 0 {
            return Err(FourierError::OddDimension { rows, cols });
        }
        let tw = twiddles::<T>(rows, true);
        let scale = T::one() / T::from_usize_lossy(rows * cols).sqrt();
        let mut profiles = Vec::with_capacity(rows * cols);
        let mut line = vec![Complex::new(T::zero(), T::zero()); rows];
        for c in 0..cols {
            for (r, v) in line.iter_mut().enumerate() {
                // undo the row half of the centring shift
                *v = k.data[((r + rows / 2) % rows) * cols + c];
            }
            fft_line(&mut line, &tw);
            profiles.extend(line.iter().map(|v| *v * scale));
        }
        let two_pi = T::PI() + T::PI();
        let roots = (0..cols)
            .map(|j| {
                let theta = two_pi * T::from_usize_lossy(j) / T::from_usize_lossy(cols);
                Complex::new(theta.cos(), theta.sin())
            })
            .collect();
        Ok(Self { rows, cols, profiles, roots })
    }

    pub fn zeros_image(&self) -> ComplexMatrix<T> {
        ComplexMatrix { rows: self.rows, cols: self.cols, data: vec![Complex::new(T::zero(), T::zero()); self.rows * self.cols] }
    }

    /// Adds the contribution of centred column `col` to `img`.
    ///
    /// # Panics
    /// If `img` has a different shape or `col` is out of range.
    pub fn add_column(&self, img: &mut ComplexMatrix<T>, col: usize) {
        assert_eq!((img.rows, img.cols), (self.rows, self.cols), "shape mismatch");
        assert!(col < self.cols, "column out of range");
        let shifted = (col + self.cols / 2) % self.cols;
        let phase: Vec<Complex<T>> = (0..self.cols).map(|x| self.roots[(shifted * x) % self.cols]).collect();
        let profile = &self.profiles[col * self.rows..(col + 1) * self.rows];
        for (row, &p) in img.data.chunks_exact_mut(self.cols).zip(profile) {
            for (v, &w) in row.iter_mut().zip(&phase) {
                *v += p * w;
            }
        }
    }

    /// Zero-filled reconstruction from the listed columns.
    pub fn image(&self, columns: impl IntoIterator<Item = usize>) -> ComplexMatrix<T> {
        let mut img = self.zeros_image();
        for c in columns {
            self.add_column(&mut img, c);
        }
        img
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    type C = Complex<f64>;

    fn random(rows: usize, cols: usize, seed: u64) -> ComplexMatrix<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..rows * cols)
            .map(|_| C::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)))
            .collect();
        ComplexMatrix::from_vec(rows, cols, data).unwrap()
    }

    /// Direct O(n^4) DFT used as an independent reference.
    fn naive_dft(m: &ComplexMatrix<f64>) -> ComplexMatrix<f64> {
        let (r, c) = (m.rows(), m.cols());
        let mut out = ComplexMatrix::zeros(r, c).unwrap();
        for u in 0..r {
            for v in 0..c {
                let mut acc = C::new(0.0, 0.0);
                for y in 0..r {
                    for x in 0..c {
                        let th = -2.0 * std::f64::consts::PI
                            * ((u * y) as f64 / r as f64 + (v * x) as f64 / c as f64);
                        acc += m.get(y, x) * C::new(th.cos(), th.sin());
                    }
                }
                out.set(u, v, acc / ((r * c) as f64).sqrt());
            }
        }
        out
    }

    #[test]
    fn ones_map_to_dc() {
        let m = ComplexMatrix::from_real(2, 2, &[1.0, 1.0, 1.0, 1.0]).unwrap();
        let k = fft2(&m);
        assert!((k.get(0, 0) - C::new(2.0, 0.0)).norm() < 1e-12);
        for (i, v) in k.data().iter().enumerate().skip(1) {
            assert!(v.norm() < 1e-12, "bin {i} = {v}");
        }
        let back = ifft2(&k);
        assert!(back.max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn delta_is_flat() {
        let mut m = ComplexMatrix::<f64>::zeros(4, 4).unwrap();
        m.set(0, 0, C::new(1.0, 0.0));
        let k = fft2(&m);
        for v in k.data() {
            assert!((v - C::new(0.25, 0.0)).norm() < 1e-12);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let z = ComplexMatrix::<f64>::zeros(8, 8).unwrap();
        assert_eq!(ifft2(&z), z);
    }

    #[test]
    fn matches_direct_dft_on_rectangular_input() {
        let m = random(4, 8, 3);
        assert!(fft2(&m).max_abs_diff(&naive_dft(&m)) < 1e-12);
    }

    #[test]
    fn round_trip_and_linearity_8x8() {
        let a = random(8, 8, 11);
        let b = random(8, 8, 12);
        assert!(ifft2(&fft2(&a)).max_abs_diff(&a) < 1e-12);
        let lhs = ifft2(&a.add(&b));
        let rhs = ifft2(&a).add(&ifft2(&b));
        assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn rejects_non_power_of_two() {
        assert_eq!(
            ComplexMatrix::<f64>::zeros(6, 8),
            Err(FourierError::NotPowerOfTwo { rows: 6, cols: 8 })
        );
    }

    #[test]
    fn magnitude_of_pythagorean_triple() {
        let m = ComplexMatrix::from_vec(1, 1, vec![C::new(3.0, 4.0)]).unwrap();
        assert_eq!(magnitude(&m).pixels, vec![5.0]);
        let r = random(8, 8, 5);
        for (p, z) in magnitude(&r).pixels.iter().zip(r.data()) {
            assert!((p - (z.re * z.re + z.im * z.im).sqrt()).abs() < 1e-14);
        }
        assert!(magnitude(&ComplexMatrix::<f64>::zeros(2, 2).unwrap()).pixels.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn shift_moves_dc_and_is_involution() {
        let mut m = ComplexMatrix::<f64>::zeros(4, 4).unwrap();
        m.set(0, 0, C::new(1.0, 0.0));
        let s = fftshift2(&m).unwrap();
        assert_eq!(s.get(2, 2), C::new(1.0, 0.0));
        assert_eq!(s.energy(), 1.0);

        let r = random(8, 8, 9);
        assert_eq!(fftshift2(&fftshift2(&r).unwrap()).unwrap(), r);
    }

    #[test]
    fn shift_follows_index_formula() {
        let data = (0..16).map(|i| C::new(i as f64, 0.0)).collect();
        let m = ComplexMatrix::from_vec(4, 4, data).unwrap();
        let s = fftshift2(&m).unwrap();
        for i in 0..4 {
            for j in 0..4 {
                assert_eq!(s.get(i, j), m.get((i + 2) % 4, (j + 2) % 4));
            }
        }
    }

    #[test]
    fn shift_rejects_odd() {
        let m = ComplexMatrix::<f64> { rows: 1, cols: 2, data: vec![C::new(0.0, 0.0); 2] };
        assert!(matches!(fftshift2(&m), Err(FourierError::OddDimension { .. })));
    }

    #[test]
    fn single_precision_round_trip() {
        let data: Vec<Complex<f32>> = (0..64).map(|i| Complex::new((i as f32).sin(), 0.5)).collect();
        let m = ComplexMatrix::from_vec(8, 8, data).unwrap();
        assert!(ifft2(&fft2(&m)).max_abs_diff(&m) < 1e-5);
    }

    #[test]
    fn column_images_sum_to_zero_filled_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let data = (0..16 * 8).map(|_| Complex::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5)).collect();
        let k = ComplexMatrix::from_vec(16, 8, data).unwrap();
        let basis = ColumnImages::new(&k).unwrap();
        let full = basis.image(0..8);
        assert!(full.max_abs_diff(&centered_ifft2(&k)) < 1e-12);
        let keep = [1usize, 4, 5];
        let mut masked = k.clone();
        for r in 0..16 {
            for c in 0..8 {
                if !keep.contains(&c) {
                    masked.set(r, c, Complex::new(0.0, 0.0));
                }
            }
        }
        assert!(basis.image(keep).max_abs_diff(&centered_ifft2(&masked)) < 1e-12);
    }
}

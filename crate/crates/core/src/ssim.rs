//! Structural similarity over a uniform square window.

use crate::fourier::RealImage;
use crate::scalar::Scalar;

pub const WINDOW: usize = 7;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

/// Copy of `img` scaled so its maximum is 1 (all-zero images stay zero).
pub fn normalize_max<T: Scalar>(img: &RealImage<T>) -> RealImage<T> {
    let max = img.max();
    let pixels = if max > T::zero() {
        img.pixels.iter().map(|&p| p / max).collect()
    } else {
        img.pixels.clone()
    };
    RealImage { rows: img.rows, cols: img.cols, pixels }
}

/// Per-window sums over all fully contained `w x w` windows, via a
/// summed-area table.
fn window_sums(values: &[f64], rows: usize, cols: usize, w: usize) -> Vec<f64> {
    let stride = cols + 1;
    let mut table = vec![0.0; (rows + 1) * stride];
    for y in 0..rows {
        let mut run = 0.0;
        for x in 0..cols {
            run += values[y * cols + x];
            table[(y + 1) * stride + x + 1] = table[y * stride + x + 1] + run;
        }
    }
    let (oh, ow) = (rows + 1 - w, cols + 1 - w);
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        for x in 0..ow {
            let s = table[(y + w) * stride + x + w] - table[y * stride + x + w] - table[(y + w) * stride + x]
                + table[y * stride + x];
            out.push(s);
        }
    }
    out
}

/// Mean SSIM over all `7x7` windows lying inside the image, with data range
/// 1 and population (biased) window statistics.
///
/// # Panics
/// If the images differ in size or are smaller than the window.
pub fn ssim<T: Scalar>(a: &RealImage<T>, b: &RealImage<T>) -> f64 {
    assert_eq!((a.rows, a.cols), (b.rows, b.cols), "ssim needs equal sizes");
    assert!(a.rows >= WINDOW && a.cols >= WINDOW, "image smaller than ssim window");
    let x: Vec<f64> = a.pixels.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let y: Vec<f64> = b.pixels.iter().map(|v| v.to_f64().unwrap_or(0.0)).collect();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let (r, c) = (a.rows, a.cols);
    let [sx, sy, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| window_sums(v, r, c, WINDOW));
    let n = (WINDOW * WINDOW) as f64;
    let (c1, c2) = ((K1 * K1), (K2 * K2));
    let total: f64 = (0..sx.len())
        .map(|i| {
            let (mx, my) = (sx[i] / n, sy[i] / n);
            let vx = (sxx[i] / n - mx * mx).max(0.0);
            let vy = (syy[i] / n - my * my).max(0.0);
            let cov = sxy[i] / n - mx * my;
            ((2.0 * mx * my + c1) * (2.0 * cov + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2))
        })
        .sum();
    total / sx.len() as f64
}

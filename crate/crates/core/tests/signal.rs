use kspace_dx::fourier::{centered_fft2, centered_ifft2, fft2, ifft2, ComplexMatrix};
use kspace_dx::phantom::{band_energy_fraction, slice_parts, DatasetSpec, MIN_BAND_CONCENTRATION};
use num_complex::Complex;
use proptest::prelude::*;

/// Each lesion's spectrum (the difference between a positive slice and the
/// same anatomy without the lesion) sits mostly in the configured band.
#[test]
fn class_signal_is_local_in_k_space() {
    let spec = DatasetSpec { seed: 17, ..DatasetSpec::default() };
    let mut worst: f64 = 1.0;
    for i in 0..120 {
        let parts = slice_parts(&spec, i, true).unwrap();
        let lesion = parts.lesion.expect("positive slices carry a lesion");
        let frac = band_energy_fraction(&lesion, &spec.lesion_band);
        worst = worst.min(frac);
    }
    assert!(worst >= MIN_BAND_CONCENTRATION, "least concentrated lesion: {worst}");
}

fn matrix(rows: usize, cols: usize) -> impl Strategy<Value = ComplexMatrix<f64>> {
    prop::collection::vec((-1.0f64..1.0, -1.0f64..1.0), rows * cols).prop_map(move |v| {
        ComplexMatrix::from_vec(rows, cols, v.into_iter().map(|(re, im)| Complex::new(re, im)).collect()).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn fft_round_trip_and_parseval(x in matrix(8, 16)) {
        let k = fft2(&x);
        prop_assert!(ifft2(&k).max_abs_diff(&x) < 1e-12);
        prop_assert!((k.energy() - x.energy()).abs() < 1e-10 * x.energy().max(1.0));
        prop_assert!(centered_ifft2(&centered_fft2(&x)).max_abs_diff(&x) < 1e-12);
    }

    #[test]
    fn fft_is_linear(x in matrix(16, 8), y in matrix(16, 8), a in -2.0f64..2.0, b in -2.0f64..2.0) {
        let (a, b) = (Complex::new(a, 0.5), Complex::new(b, -1.0));
        let lhs = fft2(&x.scaled(a).add(&y.scaled(b)));
        let rhs = fft2(&x).scaled(a).add(&fft2(&y).scaled(b));
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }
}

//! Central finite-difference check of reverse-mode gradients.

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, ParamSet, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_error: f64,
    /// `(param index, element, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
    /// Coordinates left out because `x +- h` switched some ReLU, so the
    /// central difference straddles a kink.
    pub skipped_kinks: usize,
    /// Largest error among the skipped coordinates.
    pub kink_max_rel_error: f64,
}

/// Relative error with a floor on the denominator so that coordinates with
/// vanishing gradient are compared absolutely.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Compares analytic gradients of `loss` against central differences with
/// step `h` on `coords` randomly chosen parameter coordinates (or all of
/// them if fewer). A coordinate whose perturbation flips any ReLU input is
/// not differentiable across `[x - h, x + h]`; it is counted in
/// `skipped_kinks` and another random coordinate takes its place.
pub fn check_gradients<F>(
    params: &mut ParamSet<f64>,
    loss: F,
    coords: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Graph<f64>, &ParamSet<f64>) -> Result<Var, AutodiffError>,
{
    params.zero_grad();
    let mut g = Graph::new();
    let l = loss(&mut g, params)?;
    g.backward(l, params)?;

    // recording graph, so that the ReLU inputs can be compared
    let eval = |p: &ParamSet<f64>| -> Result<(f64, Vec<bool>), AutodiffError> {
        let mut g = Graph::new();
        let l = loss(&mut g, p)?;
        Ok((g.value(l)[0], g.relu_pattern()))
    };
    let (_, base) = eval(params)?;

    let flat: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(pi, (_, t))| (0..t.len()).map(move |e| (pi, e)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let order = index::sample(&mut rng, flat.len(), flat.len());

    let mut report =
        GradCheckReport { checked: 0, max_rel_error: 0.0, worst: None, skipped_kinks: 0, kink_max_rel_error: 0.0 };
    for i in order {
        if report.checked == coords {
            break;
        }
        let (pi, e) = flat[i];
        let id = super::ParamId(pi);
        let analytic = params.get(id).grad().expect("params carry grads")[e];
        let orig = params.get(id).values()[e];
        params.get_mut(id).values_mut()[e] = orig + h;
        let (up, up_pattern) = eval(params)?;
        params.get_mut(id).values_mut()[e] = orig - h;
        let (down, down_pattern) = eval(params)?;
        params.get_mut(id).values_mut()[e] = orig;
        let numeric = (up - down) / (2.0 * h);
        let err = relative_error(analytic, numeric);
        if up_pattern != base || down_pattern != base {
            report.skipped_kinks += 1;
            report.kink_max_rel_error = report.kink_max_rel_error.max(err);
            continue;
        }
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, e, analytic, numeric));
        }
    }
    Ok(report)
}

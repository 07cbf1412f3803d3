//! Central finite-difference checking of tape gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::Tensor;

/// One evaluation of a scalar objective at the current parameters.
pub struct Evaluation {
    pub loss: f64,
    /// [`crate::Tape::kink_signature`] of the evaluation.
    pub kinks: u64,
    /// Gradient per parameter tensor, when requested.
    pub grads: Option<Vec<Tensor<f64>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub tensor: usize,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crossed a rectifier kink.
    pub skipped: usize,
    /// Checked coordinates whose gradient magnitude fell below the floor.
    pub below_floor: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self, min_checked: usize) -> bool {
        self.checked >= min_checked && self.failures.is_empty()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct GradCheckOptions {
    pub samples: usize,
    pub step: f64,
    pub tolerance: f64,
    /// Gradients smaller than this are compared absolutely. Central
    /// differences carry roughly `eps * |loss| / step` of roundoff, which at
    /// `step = 1e-5` is near `1e-10`, so smaller gradients cannot be resolved
    /// to the relative tolerance.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self { samples: 100, step: 1e-5, tolerance: 1e-4, floor: 1e-6, seed: 0 }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares the analytic gradient of `objective` with central differences on
/// `opts.samples` distinct random coordinates of `params`.
///
/// A coordinate is skipped (and another drawn) when either perturbed
/// evaluation changes the kink signature, since the function is not
/// differentiable across that step. `params` is restored on return.
pub fn check_gradients<F>(params: &mut [Tensor<f64>], opts: GradCheckOptions, mut objective: F) -> Result<GradCheckReport>
where
    F: FnMut(&[Tensor<f64>], bool) -> Result<Evaluation>,
{
    let base = objective(params, true)?;
    let grads = base.grads.expect("objective must return gradients when asked");
    let coords: Vec<(usize, usize)> =
        params.iter().enumerate().flat_map(|(t, p)| (0..p.len()).map(move |i| (t, i))).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut order: Vec<usize> = (0..coords.len()).collect();
    for i in (1..order.len()).rev() {
        order.swap(i, rng.random_range(0..=i));
    }

    let mut report = GradCheckReport::default();
    for &c in &order {
        if report.checked >= opts.samples {
            break;
        }
        let (t, i) = coords[c];
        let orig = params[t].data()[i];
        params[t].data_mut()[i] = orig + opts.step;
        let plus = objective(params, false);
        params[t].data_mut()[i] = orig - opts.step;
        let minus = objective(params, false);
        params[t].data_mut()[i] = orig;
        let (plus, minus) = (plus?, minus?);
        if plus.kinks != base.kinks || minus.kinks != base.kinks {
            report.skipped += 1;
            continue;
        }
        let numeric = (plus.loss - minus.loss) / (2.0 * opts.step);
        let analytic = grads[t].data()[i];
        let rel = relative_error(analytic, numeric, opts.floor);
        report.checked += 1;
        if analytic.abs().max(numeric.abs()) < opts.floor {
            report.below_floor += 1;
        }
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel.is_nan() || rel >= opts.tolerance {
            report.failures.push(GradMismatch { tensor: t, index: i, analytic, numeric, rel_error: rel });
        }
    }
    Ok(report)
}

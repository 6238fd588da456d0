//! Finite-difference check of the analytic loss gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ModelError, Seq2Seq};
use crate::codec::EncodedPair;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_relative_error: f64,
    /// (parameter name, flat index, analytic, numeric) of the worst entry.
    pub worst: Option<(String, usize, f64, f64)>,
}

/// Relative error with a floor on the denominator so that entries whose
/// gradients are both ~0 do not blow up.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / (analytic.abs() + numeric.abs()).max(1e-8)
}

/// Compares the analytic gradient of the loss against central differences
/// at `samples` randomly chosen parameter entries.
pub fn gradient_check(
    model: &Seq2Seq,
    pair: &EncodedPair,
    lambda: f64,
    samples: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheckReport, ModelError> {
    let (_, grads) = model.loss_and_grad(pair, lambda)?;
    let mut probe = model.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes: Vec<usize> = model.params.tensors.iter().map(|t| t.len()).collect();
    let total: usize = sizes.iter().sum();

    let mut report = GradCheckReport {
        checked: 0,
        max_relative_error: 0.0,
        worst: None,
    };
    for _ in 0..samples {
        let mut flat = rng.gen_range(0..total);
        let mut tensor = 0;
        while flat >= sizes[tensor] {
            flat -= sizes[tensor];
            tensor += 1;
        }
        let cell = probe.params.tensors[tensor].as_slice_mut().expect("contiguous");
        let original = cell[flat];
        cell[flat] = original + step;
        let plus = probe.loss(pair, lambda)?.total;
        probe.params.tensors[tensor].as_slice_mut().unwrap()[flat] = original - step;
        let minus = probe.loss(pair, lambda)?.total;
        probe.params.tensors[tensor].as_slice_mut().unwrap()[flat] = original;

        let numeric = (plus - minus) / (2.0 * step);
        let analytic = grads[tensor].as_slice().unwrap()[flat];
        let err = relative_error(analytic, numeric);
        report.checked += 1;
        if err > report.max_relative_error || report.worst.is_none() {
            report.max_relative_error = report.max_relative_error.max(err);
            report.worst = Some((model.params.names[tensor].clone(), flat, analytic, numeric));
        }
    }
    Ok(report)
}

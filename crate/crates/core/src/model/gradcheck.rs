//! Finite-difference verification of the analytic gradients on random
//! models. Probes that cross a ReLU kink or switch a max-pooling winner are
//! not differentiable there, so such draws are rejected and replaced.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{forward_trace, loss_and_grads, mse_loss, Architecture, ModelParams};
use crate::error::Result;
use crate::tensor::{allclose, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// Draws whose every gradient entry was compared.
    pub accepted: usize,
    /// Draws discarded because a probe changed the activation pattern.
    pub rejected: usize,
    pub entries_checked: usize,
    /// Largest `|analytic - numeric| / max(|analytic|, |numeric|)` over
    /// entries with magnitude above the absolute tolerance.
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    /// One line per entry outside tolerance.
    pub failures: Vec<String>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckSettings {
    pub draws: usize,
    pub first_seed: u64,
    pub step: f64,
    pub rel_tol: f64,
    pub abs_tol: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        Self {
            draws: 100,
            first_seed: 0,
            step: crate::tensor::DEFAULT_FD_STEP,
            rel_tol: 1e-6,
            abs_tol: 1e-9,
        }
    }
}

/// ReLU masks and max-pooling winners of one forward pass.
fn activation_pattern(params: &ModelParams, input: &Tensor) -> Result<Vec<u32>> {
    let trace = forward_trace(params, input)?;
    let mut pattern = Vec::new();
    let masked = trace.conv_inputs[1..]
        .iter()
        .chain([&trace.features])
        .chain(&trace.fc_inputs[1..]);
    for t in masked {
        pattern.extend(t.data().iter().map(|&v| (v > 0.0) as u32));
    }
    let c = trace.features.shape()[2];
    for ch in 0..c {
        let column = trace.features.data().iter().skip(ch).step_by(c);
        let mut best = (0u32, f64::NEG_INFINITY);
        for (i, &v) in column.enumerate() {
            if v > best.1 {
                best = (i as u32, v);
            }
        }
        pattern.push(best.0);
    }
    Ok(pattern)
}

/// Checks every parameter gradient of `arch` against central differences
/// on random (parameters, input, target) draws until `settings.draws`
/// draws are accepted.
pub fn check_gradients(
    arch: &Architecture,
    settings: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        accepted: 0,
        rejected: 0,
        entries_checked: 0,
        max_rel_error: 0.0,
        max_abs_error: 0.0,
        failures: Vec::new(),
    };
    let mut seed = settings.first_seed;
    while report.accepted < settings.draws {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = ModelParams::init(arch, seed)?;
        let input = Tensor::new(
            vec![4, 4, arch.in_channels],
            (0..16 * arch.in_channels)
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )?;
        let target = [
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ];
        seed += 1;

        let pattern = activation_pattern(&params, &input)?;
        let (_, grads) = loss_and_grads(&params, &input, &target)?;
        let mut probe = params.clone();
        let mut rows = Vec::new();
        let mut stable = true;
        'tensors: for (k, (name, analytic)) in grads.named_tensors().into_iter().enumerate() {
            for i in 0..analytic.len() {
                let x = params.tensors()[k].data()[i];
                let mut eval = |v: f64| -> Result<(f64, bool)> {
                    probe.tensors_mut()[k].data_mut()[i] = v;
                    let same = activation_pattern(&probe, &input)? == pattern;
                    let pred = super::forward(&probe, &input)?;
                    Ok((mse_loss(&pred, &target), same))
                };
                let (plus, same_plus) = eval(x + settings.step)?;
                let (minus, same_minus) = eval(x - settings.step)?;
                probe.tensors_mut()[k].data_mut()[i] = x;
                if !(same_plus && same_minus) {
                    stable = false;
                    break 'tensors;
                }
                rows.push((
                    name.clone(),
                    i,
                    analytic.data()[i],
                    (plus - minus) / (2.0 * settings.step),
                ));
            }
        }
        if !stable {
            report.rejected += 1;
            continue;
        }
        report.accepted += 1;
        for (name, i, a, n) in rows {
            report.entries_checked += 1;
            let diff = (a - n).abs();
            report.max_abs_error = report.max_abs_error.max(diff);
            let scale = a.abs().max(n.abs());
            if scale > settings.abs_tol {
                report.max_rel_error = report.max_rel_error.max(diff / scale);
            }
            if !allclose(a, n, settings.rel_tol, settings.abs_tol) {
                report.failures.push(format!(
                    "seed {}: {name}[{i}] analytic {a:e} numeric {n:e}",
                    seed - 1
                ));
            }
        }
    }
    Ok(report)
}

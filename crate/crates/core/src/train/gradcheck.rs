//! Finite-difference check of the analytic training gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::objective::{loss_and_grad, TrainSelection};
use crate::error::{invalid, Result};
use crate::model::Transformer;
use crate::prompt::PromptLayout;
use crate::score::Aggregation;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    /// Random coordinates per tensor, on top of each tensor's largest
    /// analytic entry.
    pub samples_per_tensor: usize,
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { samples_per_tensor: 8, step: 1e-4, floor: 1e-6, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    /// `max |analytic - numeric| / max(|analytic|, |numeric|, floor)`.
    pub max_rel_error: f64,
    /// Tensor and flat index of the worst coordinate.
    pub worst: (String, usize),
    /// Analytic and numeric derivative at the worst coordinate.
    pub worst_values: (f64, f64),
    pub checked: usize,
}

/// Compares analytic gradients of every model tensor (and gate matrix) with
/// a fourth-order central difference of the loss.
pub fn check_gradients(
    model: &Transformer<f64>,
    layout: &PromptLayout,
    labels: &[bool],
    selection: &TrainSelection,
    scale: f64,
    aggregation: Aggregation,
    options: &GradCheckOptions,
) -> Result<GradCheckReport> {
    if options.step.is_nan() || options.step <= 0.0 {
        return Err(invalid("finite-difference step must be positive"));
    }
    let eval = loss_and_grad(model, layout, labels, selection, scale, aggregation, true)?;
    let pg = eval.params_grad.expect("gradient requested");
    let mut analytic: Vec<(String, Vec<f64>)> = pg.tensors().into_iter().map(|(n, _, d)| (n, d.to_vec())).collect();
    if let Some(gg) = &eval.gate_grad {
        let layers = &model.gate.as_ref().expect("gate gradient implies a gate").layers;
        for (l, g) in layers.iter().zip(gg) {
            analytic.push((format!("gate.{l}"), g.iter().copied().collect()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(options.seed);
    let mut probe = model.clone();
    let mut report =
        GradCheckReport { max_rel_error: 0.0, worst: (String::new(), 0), worst_values: (0.0, 0.0), checked: 0 };
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let mut coords: Vec<usize> = (0..options.samples_per_tensor).map(|_| rng.random_range(0..grad.len())).collect();
        let top = (0..grad.len()).max_by(|&a, &b| grad[a].abs().total_cmp(&grad[b].abs())).unwrap_or(0);
        coords.push(top);
        coords.sort_unstable();
        coords.dedup();
        for i in coords {
            let at = |m: &mut Transformer<f64>, delta: f64| -> Result<f64> {
                let original = read(m, t, i);
                write(m, t, i, original + delta);
                let out = loss_and_grad(m, layout, labels, selection, scale, aggregation, false).map(|e| e.loss);
                write(m, t, i, original);
                out
            };
            let h = options.step;
            let numeric = (-at(&mut probe, 2.0 * h)? + 8.0 * at(&mut probe, h)? - 8.0 * at(&mut probe, -h)?
                + at(&mut probe, -2.0 * h)?)
                / (12.0 * h);
            let a = grad[i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(options.floor);
            if rel > report.max_rel_error || report.checked == 0 {
                report.max_rel_error = rel;
                report.worst = (name.clone(), i);
                report.worst_values = (a, numeric);
            }
            report.checked += 1;
        }
    }
    Ok(report)
}

fn n_param_tensors(m: &Transformer<f64>) -> usize {
    1 + 8 * m.params.layers.len()
}

fn read(m: &mut Transformer<f64>, t: usize, i: usize) -> f64 {
    let n = n_param_tensors(m);
    if t < n {
        m.params.tensors_mut()[t].1[i]
    } else {
        let w = &m.gate.as_ref().expect("gate tensor").weights[t - n];
        w.as_slice().expect("standard layout")[i]
    }
}

fn write(m: &mut Transformer<f64>, t: usize, i: usize, v: f64) {
    let n = n_param_tensors(m);
    if t < n {
        m.params.tensors_mut()[t].1[i] = v;
    } else {
        let w = &mut m.gate.as_mut().expect("gate tensor").weights[t - n];
        w.as_slice_mut().expect("standard layout")[i] = v;
    }
}

use crate::error::{invalid, Error, Result};

/// Loss value and its gradient with respect to the scores.
#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    pub loss: f64,
    pub grad: Vec<f64>,
}

fn logsumexp(xs: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    m + xs.map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Group contrastive loss: the mean over positives `p` of
/// `-s_p + log(exp(s_p) + sum over negatives of exp(s_n))`.
/// Positives never appear in each other's denominators.
pub fn group_contrastive_loss(scores: &[f64], labels: &[bool]) -> Result<LossOutput> {
    if scores.len() != labels.len() {
        return Err(invalid(format!("{} scores but {} labels", scores.len(), labels.len())));
    }
    let pos: Vec<usize> = (0..labels.len()).filter(|&i| labels[i]).collect();
    let neg: Vec<usize> = (0..labels.len()).filter(|&i| !labels[i]).collect();
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::DegenerateInstance(format!(
            "{} positives and {} negatives; need at least one of each",
            pos.len(),
            neg.len()
        )));
    }
    let g = pos.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; scores.len()];
    for &p in &pos {
        let z = logsumexp(std::iter::once(scores[p]).chain(neg.iter().map(|&n| scores[n])));
        loss += z - scores[p];
        grad[p] += ((scores[p] - z).exp() - 1.0) / g;
        for &n in &neg {
            grad[n] += (scores[n] - z).exp() / g;
        }
    }
    Ok(LossOutput { loss: loss / g, grad })
}

/// Gradient of `max_min_norm(raw, scale)` pulled back to `raw`.
pub fn max_min_backward(raw: &[f64], scale: f64, grad_out: &[f64]) -> Vec<f64> {
    let (mut lo, mut hi) = (0, 0);
    for (i, &x) in raw.iter().enumerate() {
        if x < raw[lo] {
            lo = i;
        }
        if x > raw[hi] {
            hi = i;
        }
    }
    let range = raw[hi] - raw[lo];
    if range == 0.0 {
        return vec![0.0; raw.len()];
    }
    let y: Vec<f64> = raw.iter().map(|&x| scale * (x - raw[lo]) / range).collect();
    let mut g: Vec<f64> = grad_out.iter().map(|&d| d * scale / range).collect();
    g[lo] += grad_out.iter().zip(&y).map(|(d, yi)| d * (yi - scale)).sum::<f64>() / range;
    g[hi] -= grad_out.iter().zip(&y).map(|(d, yi)| d * yi).sum::<f64>() / range;
    g
}

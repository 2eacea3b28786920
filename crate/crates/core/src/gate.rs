//! Gated head selection: a per-layer linear map from the hidden states of the
//! bracketed repeated query to a distribution over that layer's heads, of
//! which the top `n` are kept and renormalized.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{invalid, Result};
use crate::model::{GateParams, HeadId, Real};
use crate::probe::HeadSet;

/// Per-row softmax of `hidden · w` and its mean over rows.
#[derive(Debug, Clone, PartialEq)]
pub struct GateScores {
    /// `[rows, n_heads]` softmax rows.
    pub row_probs: Array2<f64>,
    /// Mean of `row_probs` over rows; sums to 1.
    pub scores: Vec<f64>,
}

pub fn gate_head_scores<T: Real>(hidden: ArrayView2<T>, w: ArrayView2<T>) -> Result<GateScores> {
    if hidden.ncols() != w.nrows() {
        return Err(invalid(format!("gate input has {} features but gate expects {}", hidden.ncols(), w.nrows())));
    }
    if hidden.nrows() == 0 {
        return Err(invalid("gate needs at least one input row"));
    }
    let to64 = |x: &T| x.to_f64().unwrap();
    let h = hidden.map(to64);
    let w = w.map(to64);
    let mut z = h.dot(&w);
    for mut row in z.rows_mut() {
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let s: f64 = row.sum();
        row.mapv_inplace(|v| v / s);
    }
    let scores = z.mean_axis(ndarray::Axis(0)).expect("non-empty").to_vec();
    Ok(GateScores { row_probs: z, scores })
}

/// Top `n` heads by gate score (ties by head index) with weights
/// renormalized to sum to 1.
pub fn gate_select(scores: &[f64], n: usize) -> Result<Vec<(usize, f64)>> {
    if n == 0 || n > scores.len() {
        return Err(invalid(format!("cannot select {n} of {} heads", scores.len())));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(n);
    let total: f64 = order.iter().map(|&h| scores[h]).sum();
    Ok(order.into_iter().map(|h| (h, scores[h] / total)).collect())
}

/// Selection made by a gate for one prompt.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    pub layers: Vec<usize>,
    pub scores: Vec<GateScores>,
    /// Per gated layer: selected `(head, weight)` pairs.
    pub selected: Vec<Vec<(usize, f64)>>,
}

impl GateDecision {
    pub fn head_set(&self) -> Result<HeadSet> {
        let mut heads = Vec::new();
        let mut weights = Vec::new();
        for (l, sel) in self.layers.iter().zip(&self.selected) {
            for &(h, w) in sel {
                heads.push(HeadId::new(*l, h));
                weights.push(w);
            }
        }
        HeadSet::new(heads, Some(weights))
    }
}

/// Runs every gated layer's gate on its hidden rows (one `[rows, d_model]`
/// matrix per gated layer, in gate-layer order).
pub fn decide<T: Real>(gate: &GateParams<T>, hidden: &[ArrayView2<T>]) -> Result<GateDecision> {
    if hidden.len() != gate.layers.len() {
        return Err(invalid("one hidden-state block per gated layer required"));
    }
    let mut scores = Vec::with_capacity(hidden.len());
    let mut selected = Vec::with_capacity(hidden.len());
    for (h, w) in hidden.iter().zip(&gate.weights) {
        let s = gate_head_scores(*h, w.view())?;
        selected.push(gate_select(&s.scores, gate.n_per_layer)?);
        scores.push(s);
    }
    Ok(GateDecision { layers: gate.layers.clone(), scores, selected })
}

/// Backpropagates `d_weights` (gradient with respect to each selected head's
/// renormalized weight) through selection, averaging and softmax. Returns
/// `(dW, dHidden)` for one gated layer.
pub fn gate_backward(
    hidden: ArrayView2<f64>,
    w: ArrayView2<f64>,
    scores: &GateScores,
    selected: &[(usize, f64)],
    d_weights: &[f64],
) -> (Array2<f64>, Array2<f64>) {
    let n_heads = scores.scores.len();
    let total: f64 = selected.iter().map(|&(h, _)| scores.scores[h]).sum();
    // w_i = g_i / G  =>  dg_j = (dw_j - sum_i dw_i w_i) / G for selected j
    let dot: f64 = selected.iter().zip(d_weights).map(|(&(_, wi), &d)| wi * d).sum();
    let mut dg = Array1::<f64>::zeros(n_heads);
    for (&(h, _), &d) in selected.iter().zip(d_weights) {
        dg[h] = (d - dot) / total;
    }
    let rows = scores.row_probs.nrows();
    let mut dz = Array2::<f64>::zeros((rows, n_heads));
    for t in 0..rows {
        let p = scores.row_probs.row(t);
        let pd: f64 = p.iter().zip(dg.iter()).map(|(a, b)| a * b).sum();
        for j in 0..n_heads {
            dz[[t, j]] = p[j] * (dg[j] - pd) / rows as f64;
        }
    }
    (hidden.t().dot(&dz), dz.dot(&w.t()))
}

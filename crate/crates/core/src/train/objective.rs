//! The differentiable ranking path: prompt attention, per-head chunk scores,
//! head aggregation, max-min normalization, group contrastive loss, and the
//! backward pass through all of it.

use std::collections::BTreeMap;

use ndarray::{Array2, Axis};

use super::loss::{group_contrastive_loss, max_min_backward};
use crate::error::{invalid, Result};
use crate::gate::{self, GateDecision};
use crate::model::{Params, Real, RowGrad, Transformer};
use crate::probe::HeadSet;
use crate::prompt::PromptLayout;
use crate::score::{max_min_norm, Aggregation};

/// Heads whose scores the loss is defined on.
#[derive(Debug, Clone, PartialEq)]
pub enum TrainSelection {
    Fixed(HeadSet),
    /// Heads chosen per prompt by the model's gate; the gate trains too.
    Gated,
}

#[derive(Debug, Clone)]
pub struct Evaluation<T> {
    pub loss: f64,
    /// Normalized candidate scores.
    pub scores: Vec<f64>,
    pub params_grad: Option<Params<T>>,
    /// Gradient for each gate matrix, in gate-layer order.
    pub gate_grad: Option<Vec<Array2<T>>>,
}

/// Loss (and, when `with_grad`, gradients) of one instance.
pub fn loss_and_grad<T: Real>(
    model: &Transformer<T>,
    layout: &PromptLayout,
    labels: &[bool],
    selection: &TrainSelection,
    scale: f64,
    aggregation: Aggregation,
    with_grad: bool,
) -> Result<Evaluation<T>> {
    if labels.len() != layout.n_candidates() {
        return Err(invalid("labels do not match candidate count"));
    }
    let top_layer = match selection {
        TrainSelection::Fixed(hs) => hs.max_layer(),
        TrainSelection::Gated => {
            let g = model.gate.as_ref().ok_or_else(|| invalid("gated training needs a model with a gate"))?;
            *g.layers.iter().max().expect("gate has layers")
        }
    };
    let view = model.view();
    let cache = view.forward_train(&layout.tokens, top_layer)?;
    let q_rows = layout.query_positions();
    let n_q = q_rows.len() as f64;

    let to64 = |x: T| x.to_f64().unwrap();
    let mut decision: Option<(GateDecision, Vec<Array2<f64>>, Vec<usize>)> = None;
    let head_set = match selection {
        TrainSelection::Fixed(hs) => hs.clone(),
        TrainSelection::Gated => {
            let g = model.gate.as_ref().expect("checked above");
            let think: Vec<usize> =
                layout.think_query_span.clone().ok_or_else(|| invalid("prompt lacks the think query"))?.collect();
            let hidden: Vec<Array2<T>> =
                g.layers.iter().map(|&l| cache.hidden(l).map(|h| h.select(Axis(0), &think))).collect::<Result<_>>()?;
            let views: Vec<_> = hidden.iter().map(|h| h.view()).collect();
            let d = gate::decide(g, &views)?;
            let hs = d.head_set()?;
            decision = Some((d, hidden.iter().map(|h| h.mapv(to64)).collect(), think));
            hs
        }
    };

    // per-head chunk scores; for max mode also the winning (row, column)
    let k = layout.n_candidates();
    let mut per_head: Vec<Vec<f64>> = Vec::with_capacity(head_set.len());
    let mut argmax: Vec<Vec<(usize, usize)>> = Vec::new();
    for &h in head_set.heads() {
        let p = cache.probs(h)?;
        let mut v = Vec::with_capacity(k);
        let mut am = Vec::new();
        for span in &layout.chunk_spans {
            match aggregation {
                Aggregation::Sum => {
                    let mut acc = 0.0;
                    for &r in &q_rows {
                        for c in span.clone() {
                            acc += to64(p[[r, c]]);
                        }
                    }
                    v.push(acc / n_q);
                }
                Aggregation::Max => {
                    let mut best = (f64::NEG_INFINITY, 0, 0);
                    for (i, &r) in q_rows.iter().enumerate() {
                        for c in span.clone() {
                            let x = to64(p[[r, c]]);
                            if x > best.0 {
                                best = (x, i, c);
                            }
                        }
                    }
                    v.push(best.0);
                    am.push((best.1, best.2));
                }
            }
        }
        per_head.push(v);
        argmax.push(am);
    }
    let mut raw = vec![0.0; k];
    for (i, v) in per_head.iter().enumerate() {
        let w = head_set.weight(i);
        raw.iter_mut().zip(v).for_each(|(r, x)| *r += w * x);
    }
    let scores = max_min_norm(&raw, scale)?;
    let loss = group_contrastive_loss(&scores, labels)?;
    if !with_grad {
        return Ok(Evaluation { loss: loss.loss, scores, params_grad: None, gate_grad: None });
    }

    let d_raw = max_min_backward(&raw, scale, &loss.grad);
    let seq = layout.len();
    let from64 = |x: f64| T::from_f64(x).unwrap();
    let mut attention = BTreeMap::new();
    for (i, &h) in head_set.heads().iter().enumerate() {
        let w = head_set.weight(i);
        let mut g = Array2::<T>::zeros((q_rows.len(), seq));
        for (c, span) in layout.chunk_spans.iter().enumerate() {
            match aggregation {
                Aggregation::Sum => {
                    let v = from64(w * d_raw[c] / n_q);
                    g.slice_mut(ndarray::s![.., span.start..span.end]).fill(v);
                }
                Aggregation::Max => {
                    let (r, col) = argmax[i][c];
                    g[[r, col]] += from64(w * d_raw[c]);
                }
            }
        }
        attention.insert(h, RowGrad { rows: q_rows.clone(), grad: g });
    }

    let mut hidden_grads = BTreeMap::new();
    let mut gate_grad = None;
    if let Some((d, hidden64, think)) = &decision {
        let g = model.gate.as_ref().expect("gated");
        let mut grads = Vec::with_capacity(g.layers.len());
        let mut offset = 0;
        for (li, &l) in g.layers.iter().enumerate() {
            let sel = &d.selected[li];
            let d_weights: Vec<f64> =
                (0..sel.len()).map(|j| per_head[offset + j].iter().zip(&d_raw).map(|(s, dr)| s * dr).sum()).collect();
            offset += sel.len();
            let w64 = g.weights[li].mapv(to64);
            let (dw, dh) = gate::gate_backward(hidden64[li].view(), w64.view(), &d.scores[li], sel, &d_weights);
            grads.push(dw.mapv(from64));
            hidden_grads.insert(l, RowGrad { rows: think.clone(), grad: dh.mapv(from64) });
        }
        gate_grad = Some(grads);
    }
    let params_grad = view.backward(&cache, &attention, &hidden_grads)?;
    Ok(Evaluation { loss: loss.loss, scores, params_grad: Some(params_grad), gate_grad })
}

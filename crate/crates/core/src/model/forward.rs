use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::rope::Rope;
use super::{HeadId, LayerParams, ModelConfig, Params, Real};
use crate::error::{invalid, Error, Result};

/// Post-softmax attention rows for a set of query positions.
///
/// `entries[head]` has one row per element of `rows` and one column per
/// prompt position.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionCapture<T = f32> {
    pub seq_len: usize,
    /// Captured positions, ascending and unique.
    pub rows: Vec<usize>,
    pub entries: BTreeMap<HeadId, Array2<T>>,
}

impl<T: Real> AttentionCapture<T> {
    pub fn head(&self, head: HeadId) -> Result<&Array2<T>> {
        self.entries.get(&head).ok_or_else(|| Error::IncompleteCapture(format!("head {head} was not captured")))
    }

    /// Index into `rows` of a prompt position.
    pub fn row_index(&self, position: usize) -> Option<usize> {
        self.rows.binary_search(&position).ok()
    }

    /// Row indices for every position in `span`, or an error naming the first
    /// missing one.
    pub fn rows_for(&self, span: std::ops::Range<usize>) -> Result<Vec<usize>> {
        span.map(|p| {
            self.row_index(p).ok_or_else(|| Error::IncompleteCapture(format!("query position {p} was not captured")))
        })
        .collect()
    }

    pub fn heads(&self) -> impl Iterator<Item = HeadId> + '_ {
        self.entries.keys().copied()
    }
}

/// Result of an inference forward pass.
#[derive(Debug, Clone)]
pub struct ForwardOutput<T = f32> {
    pub attention: AttentionCapture<T>,
    /// Residual-stream input of each requested layer at `hidden_rows`.
    pub hidden: BTreeMap<usize, Array2<T>>,
    pub hidden_rows: Vec<usize>,
}

pub(crate) struct FullCache<T> {
    pub o: Array2<T>,
    pub h_mid: Array2<T>,
    pub b: Array2<T>,
    pub inv2: Array1<T>,
    pub u: Array2<T>,
    pub act: Array2<T>,
}

pub(crate) struct LayerCache<T> {
    pub h_in: Array2<T>,
    pub a: Array2<T>,
    pub inv1: Array1<T>,
    pub q: Array2<T>,
    pub k: Array2<T>,
    pub v: Array2<T>,
    pub probs: Vec<Array2<T>>,
    /// Absent for a layer that was only run up to its attention probabilities.
    pub full: Option<FullCache<T>>,
}

/// Activations kept for the backward pass.
pub struct ForwardCache<T> {
    pub(crate) layers: Vec<LayerCache<T>>,
    pub(crate) tokens: Vec<u32>,
}

impl<T: Real> ForwardCache<T> {
    /// Attention probability matrix `[T, T]` of one head.
    pub fn probs(&self, head: HeadId) -> Result<&Array2<T>> {
        self.layers
            .get(head.layer)
            .and_then(|l| l.probs.get(head.head))
            .ok_or_else(|| Error::IncompleteCapture(format!("head {head} not in forward cache")))
    }

    /// Residual-stream input of `layer`.
    pub fn hidden(&self, layer: usize) -> Result<&Array2<T>> {
        self.layers
            .get(layer)
            .map(|l| &l.h_in)
            .ok_or_else(|| Error::IncompleteCapture(format!("layer {layer} not in forward cache")))
    }

    pub fn n_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn seq_len(&self) -> usize {
        self.tokens.len()
    }
}

/// Borrowed model restricted to its first `n_layers` layers.
#[derive(Debug, Clone, Copy)]
pub struct ModelView<'a, T> {
    config: &'a ModelConfig,
    params: &'a Params<T>,
    n_layers: usize,
}

pub(crate) fn rms_norm<T: Real>(x: &Array2<T>, gain: &Array1<T>, eps: T) -> (Array2<T>, Array1<T>) {
    let d = T::from_usize(x.ncols()).unwrap();
    let inv: Array1<T> =
        x.rows().into_iter().map(|r| T::one() / ((r.iter().map(|&v| v * v).sum::<T>() / d + eps).sqrt())).collect();
    let mut y = x.clone();
    for (mut row, &s) in y.rows_mut().into_iter().zip(inv.iter()) {
        row.zip_mut_with(gain, |v, &g| *v = *v * s * g);
    }
    (y, inv)
}

pub(crate) fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Causal softmax of `q k^T * scale`. Entries above the diagonal are exactly 0.
pub(crate) fn causal_probs<T: Real>(q: ArrayView2<T>, k: ArrayView2<T>, scale: T) -> Array2<T> {
    let mut p = q.dot(&k.t());
    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
        let mut max = T::neg_infinity();
        for &v in row.iter().take(i + 1) {
            max = max.max(v * scale);
        }
        let mut sum = T::zero();
        for v in row.iter_mut().take(i + 1) {
            *v = (*v * scale - max).exp();
            sum += *v;
        }
        let inv = T::one() / sum;
        for (j, v) in row.iter_mut().enumerate() {
            if j <= i {
                *v *= inv;
            } else {
                *v = T::zero();
            }
        }
    }
    p
}

impl<'a, T: Real> ModelView<'a, T> {
    pub(crate) fn new(config: &'a ModelConfig, params: &'a Params<T>, n_layers: usize) -> Self {
        ModelView { config, params, n_layers }
    }

    /// Number of layers this view executes.
    pub fn n_layers(&self) -> usize {
        self.n_layers
    }

    pub fn config(&self) -> &'a ModelConfig {
        self.config
    }

    pub fn params(&self) -> &'a Params<T> {
        self.params
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.len() > self.config.max_seq_len {
            return Err(Error::SequenceTooLong { len: tokens.len(), max: self.config.max_seq_len });
        }
        if tokens.is_empty() {
            return Err(invalid("empty token sequence"));
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(invalid(format!("token id {bad} outside vocabulary of {}", self.config.vocab_size)));
        }
        Ok(())
    }

    fn check_heads(&self, heads: &[HeadId]) -> Result<()> {
        for &h in heads {
            self.config.check_head(h)?;
            if h.layer >= self.n_layers {
                return Err(invalid(format!("head {h} lies above the last executed layer {}", self.n_layers - 1)));
            }
        }
        Ok(())
    }

    fn embed(&self, tokens: &[u32]) -> Array2<T> {
        let mut h = Array2::zeros((tokens.len(), self.config.d_model));
        for (mut row, &t) in h.rows_mut().into_iter().zip(tokens) {
            row.assign(&self.params.embed.row(t as usize));
        }
        h
    }

    /// Runs one layer. With `full == false` stops after the attention
    /// probabilities and returns no output.
    fn layer(
        &self,
        lp: &LayerParams<T>,
        h_in: Array2<T>,
        rope: &Rope<T>,
        full: bool,
    ) -> (LayerCache<T>, Option<Array2<T>>) {
        let cfg = self.config;
        let (dh, nh) = (cfg.d_head, cfg.n_heads);
        let eps = T::from_f64(cfg.norm_eps).unwrap();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        let (a, inv1) = rms_norm(&h_in, &lp.attn_norm, eps);
        let mut q = a.dot(&lp.wq);
        let mut k = a.dot(&lp.wk);
        rope.apply(&mut q, nh, dh, false);
        rope.apply(&mut k, nh, dh, false);
        let v = if full { a.dot(&lp.wv) } else { Array2::zeros((0, 0)) };

        let probs: Vec<Array2<T>> = (0..nh)
            .map(|h| {
                let cols = s![.., h * dh..(h + 1) * dh];
                causal_probs(q.slice(cols), k.slice(cols), scale)
            })
            .collect();

        if !full {
            let cache = LayerCache { h_in, a, inv1, q, k, v, probs, full: None };
            return (cache, None);
        }

        let mut o = Array2::zeros((h_in.nrows(), cfg.d_model));
        for (h, p) in probs.iter().enumerate() {
            let cols = s![.., h * dh..(h + 1) * dh];
            o.slice_mut(cols).assign(&p.dot(&v.slice(cols)));
        }
        let h_mid = &h_in + &o.dot(&lp.wo);
        let (b, inv2) = rms_norm(&h_mid, &lp.mlp_norm, eps);
        let u = b.dot(&lp.w_up);
        let act = u.mapv(|x| x * sigmoid(x));
        let h_out = &h_mid + &act.dot(&lp.w_down);
        let cache = LayerCache { h_in, a, inv1, q, k, v, probs, full: Some(FullCache { o, h_mid, b, inv2, u, act }) };
        (cache, Some(h_out))
    }

    /// Post-softmax attention rows at `capture_rows` for `heads` (every head
    /// of every executed layer when `None`).
    pub fn forward_with_attention(
        &self,
        tokens: &[u32],
        capture_rows: &[usize],
        heads: Option<&[HeadId]>,
    ) -> Result<AttentionCapture<T>> {
        Ok(self.forward(tokens, capture_rows, heads, &[], &[])?.attention)
    }

    /// Full inference pass over every executed layer, capturing attention rows
    /// and, for `hidden_layers`, residual-stream inputs at `hidden_rows`.
    pub fn forward(
        &self,
        tokens: &[u32],
        capture_rows: &[usize],
        heads: Option<&[HeadId]>,
        hidden_layers: &[usize],
        hidden_rows: &[usize],
    ) -> Result<ForwardOutput<T>> {
        self.check_tokens(tokens)?;
        if capture_rows.is_empty() {
            return Err(invalid("empty capture set"));
        }
        let mut rows = capture_rows.to_vec();
        rows.sort_unstable();
        rows.dedup();
        let seq_len = tokens.len();
        if let Some(&bad) = rows.iter().chain(hidden_rows).find(|&&r| r >= seq_len) {
            return Err(invalid(format!("capture row {bad} outside prompt of {seq_len} tokens")));
        }
        if let Some(&bad) = hidden_layers.iter().find(|&&l| l >= self.n_layers) {
            return Err(invalid(format!("hidden-state layer {bad} not executed")));
        }
        let wanted: Vec<HeadId> = match heads {
            Some(hs) => {
                self.check_heads(hs)?;
                hs.to_vec()
            }
            None => (0..self.n_layers).flat_map(|l| (0..self.config.n_heads).map(move |h| HeadId::new(l, h))).collect(),
        };

        let rope = Rope::new(seq_len, self.config.d_head, self.config.rope_base);
        let mut h = self.embed(tokens);
        let mut entries = BTreeMap::new();
        let mut hidden = BTreeMap::new();
        for (l, lp) in self.params.layers.iter().take(self.n_layers).enumerate() {
            if hidden_layers.contains(&l) {
                hidden.insert(l, h.select(Axis(0), hidden_rows));
            }
            let (cache, out) = self.layer(lp, h, &rope, true);
            for head in wanted.iter().filter(|hd| hd.layer == l) {
                entries.insert(*head, cache.probs[head.head].select(Axis(0), &rows));
            }
            h = out.expect("full layer returns output");
        }
        Ok(ForwardOutput {
            attention: AttentionCapture { seq_len, rows, entries },
            hidden,
            hidden_rows: hidden_rows.to_vec(),
        })
    }

    /// Training pass through layers `0..=top_layer`, keeping activations.
    /// The top layer is only evaluated up to its attention probabilities,
    /// since nothing downstream of them can reach the ranking loss.
    pub fn forward_train(&self, tokens: &[u32], top_layer: usize) -> Result<ForwardCache<T>> {
        self.check_tokens(tokens)?;
        if top_layer >= self.n_layers {
            return Err(invalid(format!("top layer {top_layer} not executed by this view")));
        }
        let rope = Rope::new(tokens.len(), self.config.d_head, self.config.rope_base);
        let mut h = self.embed(tokens);
        let mut layers = Vec::with_capacity(top_layer + 1);
        for (l, lp) in self.params.layers.iter().take(top_layer + 1).enumerate() {
            let (cache, out) = self.layer(lp, h, &rope, l < top_layer);
            layers.push(cache);
            match out {
                Some(next) => h = next,
                None => break,
            }
        }
        Ok(ForwardCache { layers, tokens: tokens.to_vec() })
    }
}

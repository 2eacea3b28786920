use std::collections::BTreeMap;

use ndarray::{s, Array1, Array2};

use super::forward::{sigmoid, ForwardCache, LayerCache};
use super::rope::Rope;
use super::{HeadId, ModelView, Params, Real};
use crate::error::{invalid, Result};

/// Upstream gradient for a subset of rows of some `[T, n]` activation.
#[derive(Debug, Clone)]
pub struct RowGrad<T> {
    pub rows: Vec<usize>,
    pub grad: Array2<T>,
}

/// Returns `(dx, dgain)` for `y = x * inv_rms(x) * gain`.
fn rms_norm_backward<T: Real>(
    dy: &Array2<T>,
    x: &Array2<T>,
    inv: &Array1<T>,
    gain: &Array1<T>,
) -> (Array2<T>, Array1<T>) {
    let d = T::from_usize(x.ncols()).unwrap();
    let mut dx = Array2::zeros(x.raw_dim());
    let mut dgain = Array1::zeros(gain.raw_dim());
    for t in 0..x.nrows() {
        let s = inv[t];
        let xr = x.row(t);
        let dyr = dy.row(t);
        let mut dot = T::zero();
        for j in 0..x.ncols() {
            let xhat = xr[j] * s;
            dgain[j] += dyr[j] * xhat;
            dot += dyr[j] * gain[j] * xhat;
        }
        let mean = dot / d;
        let mut dxr = dx.row_mut(t);
        for j in 0..x.ncols() {
            dxr[j] = s * (dyr[j] * gain[j] - xr[j] * s * mean);
        }
    }
    (dx, dgain)
}

impl<T: Real> ModelView<'_, T> {
    /// Gradient of a scalar objective with respect to every parameter, given
    /// the objective's gradient with respect to attention probabilities
    /// (`attention`, rows of a head's `[T, T]` matrix) and residual-stream
    /// layer inputs (`hidden`, rows of layer `l`'s `[T, d_model]` input).
    pub fn backward(
        &self,
        cache: &ForwardCache<T>,
        attention: &BTreeMap<HeadId, RowGrad<T>>,
        hidden: &BTreeMap<usize, RowGrad<T>>,
    ) -> Result<Params<T>> {
        let n = cache.layers.len();
        if let Some(h) = attention.keys().find(|h| h.layer >= n) {
            return Err(invalid(format!("gradient for head {h} beyond cached layers")));
        }
        if let Some(l) = hidden.keys().find(|&&l| l >= n) {
            return Err(invalid(format!("gradient for layer {l} beyond cached layers")));
        }
        let cfg = self.config();
        let seq = cache.seq_len();
        let rope = Rope::new(seq, cfg.d_head, cfg.rope_base);
        let mut grads = self.params().zeros_like();
        let mut dh: Option<Array2<T>> = None;
        for l in (0..n).rev() {
            let lc = &cache.layers[l];
            let mut dh_in = self.layer_backward(l, lc, dh.take(), attention, &rope, &mut grads);
            if let Some(rg) = hidden.get(&l) {
                for (i, &r) in rg.rows.iter().enumerate() {
                    let mut row = dh_in.row_mut(r);
                    row += &rg.grad.row(i);
                }
            }
            dh = Some(dh_in);
        }
        if let Some(dh0) = dh {
            for (t, &tok) in cache.tokens.iter().enumerate() {
                let mut row = grads.embed.row_mut(tok as usize);
                row += &dh0.row(t);
            }
        }
        Ok(grads)
    }

    fn layer_backward(
        &self,
        l: usize,
        lc: &LayerCache<T>,
        dh_out: Option<Array2<T>>,
        attention: &BTreeMap<HeadId, RowGrad<T>>,
        rope: &Rope<T>,
        grads: &mut Params<T>,
    ) -> Array2<T> {
        let cfg = self.config();
        let lp = &self.params().layers[l];
        let g = &mut grads.layers[l];
        let (dh, nh) = (cfg.d_head, cfg.n_heads);
        let seq = lc.h_in.nrows();
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();

        // Residual stream gradient at this layer's input, and the gradient at
        // the concatenated head outputs.
        let (mut dh_in, d_o) = match (&lc.full, dh_out) {
            (Some(fc), Some(dm)) => {
                g.w_down += &fc.act.t().dot(&dm);
                let dact = dm.dot(&lp.w_down.t());
                let mut du = dact;
                du.zip_mut_with(&fc.u, |d, &u| {
                    let sg = sigmoid(u);
                    *d = *d * sg * (T::one() + u * (T::one() - sg));
                });
                g.w_up += &fc.b.t().dot(&du);
                let db = du.dot(&lp.w_up.t());
                let (dx, dgain) = rms_norm_backward(&db, &fc.h_mid, &fc.inv2, &lp.mlp_norm);
                g.mlp_norm += &dgain;
                let dh_mid = dm + dx;
                g.wo += &fc.o.t().dot(&dh_mid);
                let d_o = dh_mid.dot(&lp.wo.t());
                (dh_mid, Some(d_o))
            }
            _ => (Array2::zeros((seq, cfg.d_model)), None),
        };

        let mut dq = Array2::zeros((seq, cfg.d_model));
        let mut dk = Array2::zeros((seq, cfg.d_model));
        let mut dv = Array2::zeros((seq, cfg.d_model));
        let mut touched = false;
        for h in 0..nh {
            let cols = s![.., h * dh..(h + 1) * dh];
            let p = &lc.probs[h];
            let extra = attention.get(&HeadId::new(l, h));
            if d_o.is_none() && extra.is_none() {
                continue;
            }
            touched = true;
            let mut dp = match &d_o {
                Some(d_o) => {
                    let d_oh = d_o.slice(cols);
                    dv.slice_mut(cols).assign(&p.t().dot(&d_oh));
                    d_oh.dot(&lc.v.slice(cols).t())
                }
                None => Array2::zeros((seq, seq)),
            };
            if let Some(rg) = extra {
                for (i, &r) in rg.rows.iter().enumerate() {
                    let mut row = dp.row_mut(r);
                    row += &rg.grad.row(i);
                }
            }
            // softmax backward, row by row; masked entries have p == 0
            let mut ds = dp;
            for (i, mut row) in ds.rows_mut().into_iter().enumerate() {
                let pr = p.row(i);
                let dot: T = row.iter().zip(pr.iter()).take(i + 1).map(|(&a, &b)| a * b).sum();
                row.zip_mut_with(&pr, |d, &pv| *d = pv * (*d - dot) * scale);
            }
            dq.slice_mut(cols).assign(&ds.dot(&lc.k.slice(cols)));
            dk.slice_mut(cols).assign(&ds.t().dot(&lc.q.slice(cols)));
        }
        if !touched {
            return dh_in;
        }
        rope.apply(&mut dq, nh, dh, true);
        rope.apply(&mut dk, nh, dh, true);
        let at = lc.a.t();
        g.wq += &at.dot(&dq);
        g.wk += &at.dot(&dk);
        let mut da = dq.dot(&lp.wq.t()) + dk.dot(&lp.wk.t());
        if lc.full.is_some() {
            g.wv += &at.dot(&dv);
            da += &dv.dot(&lp.wv.t());
        }
        let (dx, dgain) = rms_norm_backward(&da, &lc.h_in, &lc.inv1, &lp.attn_norm);
        g.attn_norm += &dgain;
        dh_in += &dx;
        dh_in
    }
}

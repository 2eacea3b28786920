use ndarray::Array2;

use super::Real;

/// Rotary position tables in the rotate-half layout: within each head,
/// dimension `i` pairs with `i + d_head/2`.
pub(crate) struct Rope<T> {
    cos: Array2<T>,
    sin: Array2<T>,
}

impl<T: Real> Rope<T> {
    pub(crate) fn new(seq_len: usize, d_head: usize, base: f64) -> Self {
        let half = d_head / 2;
        let mut cos = Array2::zeros((seq_len, half));
        let mut sin = Array2::zeros((seq_len, half));
        for i in 0..half {
            let freq = base.powf(-2.0 * i as f64 / d_head as f64);
            for t in 0..seq_len {
                let angle = t as f64 * freq;
                cos[[t, i]] = T::from_f64(angle.cos()).unwrap();
                sin[[t, i]] = T::from_f64(angle.sin()).unwrap();
            }
        }
        Rope { cos, sin }
    }

    /// Rotates every head of `x` (`[T, n_heads * d_head]`) in place. With
    /// `inverse` the rotation angle is negated, which is also the backward pass.
    pub(crate) fn apply(&self, x: &mut Array2<T>, n_heads: usize, d_head: usize, inverse: bool) {
        let half = d_head / 2;
        for (t, mut row) in x.rows_mut().into_iter().enumerate() {
            let cos = self.cos.row(t);
            let sin = self.sin.row(t);
            for h in 0..n_heads {
                let base = h * d_head;
                for i in 0..half {
                    let (c, s) = (cos[i], if inverse { -sin[i] } else { sin[i] });
                    let a = row[base + i];
                    let b = row[base + i + half];
                    row[base + i] = a * c - b * s;
                    row[base + i + half] = b * c + a * s;
                }
            }
        }
    }
}

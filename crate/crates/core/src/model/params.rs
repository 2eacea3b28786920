use ndarray::{Array1, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ModelConfig, Real};
use crate::error::{Error, Result};

/// Parameter initialization scheme.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    Random {
        seed: u64,
    },
    /// Random everywhere except zero query/key projections, which makes every
    /// attention row uniform over its causal prefix.
    ZeroAttention {
        seed: u64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<T> {
    pub attn_norm: Array1<T>,
    /// `[d_model, d_model]`; head `h` owns columns `h*d_head..(h+1)*d_head`.
    pub wq: Array2<T>,
    pub wk: Array2<T>,
    pub wv: Array2<T>,
    pub wo: Array2<T>,
    pub mlp_norm: Array1<T>,
    pub w_up: Array2<T>,
    pub w_down: Array2<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Params<T> {
    pub embed: Array2<T>,
    pub layers: Vec<LayerParams<T>>,
}

fn normal<T: Real>(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let dist = Normal::new(0.0, std).expect("std is finite and positive");
    Array2::from_shape_simple_fn((rows, cols), || T::from_f64(dist.sample(rng)).unwrap())
}

impl<T: Real> Params<T> {
    pub fn init(config: &ModelConfig, init: Init) -> Self {
        let (seed, zero_qk) = match init {
            Init::Random { seed } => (seed, false),
            Init::ZeroAttention { seed } => (seed, true),
        };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.d_model;
        let ff = config.d_ff;
        let proj_std = 1.0 / (d as f64).sqrt();
        let embed = normal(&mut rng, config.vocab_size, d, 0.02);
        let layers = (0..config.n_layers)
            .map(|_| {
                let mut wq = normal(&mut rng, d, d, proj_std);
                let mut wk = normal(&mut rng, d, d, proj_std);
                if zero_qk {
                    wq.fill(T::zero());
                    wk.fill(T::zero());
                }
                LayerParams {
                    attn_norm: Array1::ones(d),
                    wq,
                    wk,
                    wv: normal(&mut rng, d, d, proj_std),
                    wo: normal(&mut rng, d, d, proj_std),
                    mlp_norm: Array1::ones(d),
                    w_up: normal(&mut rng, d, ff, proj_std),
                    w_down: normal(&mut rng, ff, d, 1.0 / (ff as f64).sqrt()),
                }
            })
            .collect();
        Params { embed, layers }
    }

    /// Same shapes, all zeros.
    pub fn zeros_like(&self) -> Self {
        let z1 = |a: &Array1<T>| Array1::zeros(a.raw_dim());
        let z2 = |a: &Array2<T>| Array2::zeros(a.raw_dim());
        Params {
            embed: z2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: z1(&l.attn_norm),
                    wq: z2(&l.wq),
                    wk: z2(&l.wk),
                    wv: z2(&l.wv),
                    wo: z2(&l.wo),
                    mlp_norm: z1(&l.mlp_norm),
                    w_up: z2(&l.w_up),
                    w_down: z2(&l.w_down),
                })
                .collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        let c1 = |a: &Array1<T>| a.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap());
        let c2 = |a: &Array2<T>| a.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap());
        Params {
            embed: c2(&self.embed),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    attn_norm: c1(&l.attn_norm),
                    wq: c2(&l.wq),
                    wk: c2(&l.wk),
                    wv: c2(&l.wv),
                    wo: c2(&l.wo),
                    mlp_norm: c1(&l.mlp_norm),
                    w_up: c2(&l.w_up),
                    w_down: c2(&l.w_down),
                })
                .collect(),
        }
    }

    /// Named tensors in a stable order: `(name, shape, data)`.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = vec![("embed".to_string(), self.embed.shape().to_vec(), slice2(&self.embed))];
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), l.attn_norm.shape().to_vec(), slice1(&l.attn_norm)));
            for (n, a) in [("wq", &l.wq), ("wk", &l.wk), ("wv", &l.wv), ("wo", &l.wo)] {
                out.push((format!("layers.{i}.{n}"), a.shape().to_vec(), slice2(a)));
            }
            out.push((format!("layers.{i}.mlp_norm"), l.mlp_norm.shape().to_vec(), slice1(&l.mlp_norm)));
            out.push((format!("layers.{i}.w_up"), l.w_up.shape().to_vec(), slice2(&l.w_up)));
            out.push((format!("layers.{i}.w_down"), l.w_down.shape().to_vec(), slice2(&l.w_down)));
        }
        out
    }

    /// Mutable named tensors, same order as [`Params::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [T])> {
        let mut out = vec![("embed".to_string(), self.embed.as_slice_mut().expect("standard layout"))];
        for (i, l) in self.layers.iter_mut().enumerate() {
            let LayerParams { attn_norm, wq, wk, wv, wo, mlp_norm, w_up, w_down } = l;
            out.push((format!("layers.{i}.attn_norm"), attn_norm.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.wq"), wq.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.wk"), wk.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.wv"), wv.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.wo"), wo.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.mlp_norm"), mlp_norm.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.w_up"), w_up.as_slice_mut().expect("standard layout")));
            out.push((format!("layers.{i}.w_down"), w_down.as_slice_mut().expect("standard layout")));
        }
        out
    }

    pub fn n_params(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// `self += other * factor`, elementwise over all tensors.
    pub fn add_scaled(&mut self, other: &Params<T>, factor: T) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += v * factor;
            }
        }
    }

    pub fn scale(&mut self, factor: T) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .map(|x| {
                let v = x.to_f64().unwrap();
                v * v
            })
            .sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|(_, _, d)| d.iter().all(|x| x.is_finite()))
    }

    pub(crate) fn check_shapes(&self, config: &ModelConfig) -> Result<()> {
        let d = config.d_model;
        let ok = self.embed.dim() == (config.vocab_size, d)
            && self.layers.len() == config.n_layers
            && self.layers.iter().all(|l| {
                l.attn_norm.len() == d
                    && l.mlp_norm.len() == d
                    && [&l.wq, &l.wk, &l.wv, &l.wo].iter().all(|w| w.dim() == (d, d))
                    && l.w_up.dim() == (d, config.d_ff)
                    && l.w_down.dim() == (config.d_ff, d)
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Checkpoint("parameter shapes do not match config".into()))
        }
    }
}

fn slice1<T>(a: &Array1<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

fn slice2<T>(a: &Array2<T>) -> &[T] {
    a.as_slice().expect("standard layout")
}

/// Per-layer linear gates mapping a hidden state to per-head logits.
#[derive(Debug, Clone, PartialEq)]
pub struct GateParams<T> {
    /// Gated layers, ascending.
    pub layers: Vec<usize>,
    /// One `[d_model, n_heads]` matrix per gated layer.
    pub weights: Vec<Array2<T>>,
    /// Heads selected per gated layer.
    pub n_per_layer: usize,
}

impl<T: Real> GateParams<T> {
    /// Gates for the half-open layer range `[l_start, l_end)`, selecting
    /// `k_total / (l_end - l_start)` heads per layer.
    pub fn new(config: &ModelConfig, l_start: usize, l_end: usize, k_total: usize, init: Option<u64>) -> Result<Self> {
        let n_per_layer = crate::probe::heads_per_layer(l_start, l_end, k_total, config.n_layers)?;
        if n_per_layer > config.n_heads {
            return Err(Error::InvalidArgument(format!(
                "{n_per_layer} heads per layer exceeds n_heads {}",
                config.n_heads
            )));
        }
        let layers: Vec<usize> = (l_start..l_end).collect();
        let weights = match init {
            None => layers.iter().map(|_| Array2::zeros((config.d_model, config.n_heads))).collect(),
            Some(seed) => {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                layers.iter().map(|_| normal(&mut rng, config.d_model, config.n_heads, 0.02)).collect()
            }
        };
        Ok(GateParams { layers, weights, n_per_layer })
    }

    pub fn cast<U: Real>(&self) -> GateParams<U> {
        GateParams {
            layers: self.layers.clone(),
            weights: self.weights.iter().map(|w| w.mapv(|x| U::from_f64(x.to_f64().unwrap()).unwrap())).collect(),
            n_per_layer: self.n_per_layer,
        }
    }

    pub fn zeros_like(&self) -> Self {
        GateParams {
            layers: self.layers.clone(),
            weights: self.weights.iter().map(|w| Array2::zeros(w.raw_dim())).collect(),
            n_per_layer: self.n_per_layer,
        }
    }
}

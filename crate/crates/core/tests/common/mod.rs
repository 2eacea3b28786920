#![allow(dead_code)]

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use qrrank_core::data::{Alphabet, Chunk, ListwiseInstance};
use qrrank_core::model::{Init, ModelConfig, Real, Transformer};
use qrrank_core::prompt::{PromptAssembler, PromptTemplate, Tokenizer};

pub const ALPHABET: Alphabet = Alphabet { n_keys: 30, n_values: 8, n_fillers: 8 };

pub fn assembler(max_candidates: usize, max_seq: usize) -> PromptAssembler {
    let syms = ALPHABET.symbols();
    let tk = Tokenizer::build(&PromptTemplate::default(), syms.iter().map(String::as_str), max_candidates).unwrap();
    PromptAssembler::new(tk, PromptTemplate::default(), max_seq).unwrap()
}

pub fn model<T: Real>(asm: &PromptAssembler, layers: usize, heads: usize, d: usize, seed: u64) -> Transformer<T> {
    let cfg = ModelConfig::new(layers, heads, d, asm.tokenizer.len(), asm.max_seq_len);
    Transformer::new(cfg, Init::Random { seed }).unwrap()
}

/// Random instance over the test alphabet with `n` candidates and at least
/// one positive and one negative.
pub fn random_instance(rng: &mut ChaCha8Rng, id: usize, n: usize, max_gold: usize) -> ListwiseInstance {
    let syms = ALPHABET.symbols();
    let syms: Vec<&String> = syms.iter().filter(|s| !["block", "covers", "keys"].contains(&s.as_str())).collect();
    let words = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| -> String {
        let len = rng.random_range(lo..=hi);
        (0..len).map(|_| syms.choose(rng).unwrap().as_str()).collect::<Vec<_>>().join(" ")
    };
    let query = words(rng, 1, 4);
    let candidates: Vec<Chunk> =
        (0..n).map(|i| Chunk { id: format!("c{i}"), text: words(rng, 1, 6), block_id: 0 }).collect();
    let n_gold = rng.random_range(1..=max_gold.min(n - 1));
    let mut labels = vec![false; n];
    let idx: Vec<usize> = (0..n).collect();
    for &g in idx.choose_multiple(rng, n_gold) {
        labels[g] = true;
    }
    ListwiseInstance {
        instance_id: format!("t{id}"),
        query,
        candidates,
        labels,
        memory_prefix: None,
        forced_gold: false,
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Attention probabilities `[layer][head][t][s]` from a scalar re-derivation
/// of the forward pass in `f64`.
pub fn naive_attention(model: &Transformer<f64>, tokens: &[u32], n_layers: usize) -> Vec<Vec<Vec<Vec<f64>>>> {
    let cfg = &model.config;
    let (d, nh, dh) = (cfg.d_model, cfg.n_heads, cfg.d_head);
    let t_len = tokens.len();
    let mut h: Vec<Vec<f64>> = tokens.iter().map(|&t| model.params.embed.row(t as usize).to_vec()).collect();
    let rms = |x: &[f64], g: &[f64]| -> Vec<f64> {
        let ms = x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
        let inv = 1.0 / (ms + cfg.norm_eps).sqrt();
        x.iter().zip(g).map(|(v, g)| v * inv * g).collect()
    };
    let matvec = |x: &[f64], w: &ndarray::Array2<f64>| -> Vec<f64> {
        (0..w.ncols()).map(|j| (0..w.nrows()).map(|i| x[i] * w[[i, j]]).sum()).collect()
    };
    let rotate = |x: &mut [f64], pos: usize| {
        let half = dh / 2;
        for head in 0..nh {
            for i in 0..half {
                let theta = pos as f64 * cfg.rope_base.powf(-2.0 * i as f64 / dh as f64);
                let (a, b) = (x[head * dh + i], x[head * dh + i + half]);
                x[head * dh + i] = a * theta.cos() - b * theta.sin();
                x[head * dh + i + half] = b * theta.cos() + a * theta.sin();
            }
        }
    };
    let mut out = Vec::new();
    for lp in model.params.layers.iter().take(n_layers) {
        let g1 = lp.attn_norm.to_vec();
        let a: Vec<Vec<f64>> = h.iter().map(|x| rms(x, &g1)).collect();
        let mut q: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, &lp.wq)).collect();
        let mut k: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, &lp.wk)).collect();
        let v: Vec<Vec<f64>> = a.iter().map(|x| matvec(x, &lp.wv)).collect();
        for t in 0..t_len {
            rotate(&mut q[t], t);
            rotate(&mut k[t], t);
        }
        let mut layer = vec![vec![vec![0.0; t_len]; t_len]; nh];
        for (head, probs) in layer.iter_mut().enumerate() {
            for t in 0..t_len {
                let logits: Vec<f64> = (0..=t)
                    .map(|s| {
                        (0..dh).map(|i| q[t][head * dh + i] * k[s][head * dh + i]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                for s in 0..=t {
                    probs[t][s] = (logits[s] - m).exp() / z;
                }
            }
        }
        let mut o = vec![vec![0.0; d]; t_len];
        for (head, probs) in layer.iter().enumerate() {
            for t in 0..t_len {
                for s in 0..=t {
                    for i in 0..dh {
                        o[t][head * dh + i] += probs[t][s] * v[s][head * dh + i];
                    }
                }
            }
        }
        let g2 = lp.mlp_norm.to_vec();
        for t in 0..t_len {
            let proj = matvec(&o[t], &lp.wo);
            let mid: Vec<f64> = h[t].iter().zip(&proj).map(|(a, b)| a + b).collect();
            let b = rms(&mid, &g2);
            let act: Vec<f64> = matvec(&b, &lp.w_up).into_iter().map(|u| u / (1.0 + (-u).exp())).collect();
            let down = matvec(&act, &lp.w_down);
            h[t] = mid.iter().zip(&down).map(|(a, b)| a + b).collect();
        }
        out.push(layer);
    }
    out
}

use std::fmt::Write as _;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::alloc;
use crate::data::ListwiseInstance;
use crate::error::{invalid, Error, Result};
use crate::model::ModelConfig;
use crate::score::Reranker;

/// Analytic forward-pass FLOPs for one prompt.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlopCount {
    /// `2 * (projection and MLP parameters of executed layers) * tokens`.
    pub matmul: f64,
    /// Score and value products: `4 * tokens^2 * d_model` per executed layer.
    pub attention: f64,
    pub total: f64,
}

pub fn flops(config: &ModelConfig, layers: usize, seq_len: usize) -> FlopCount {
    let d = config.d_model as f64;
    let per_layer_params = 4.0 * d * d + 2.0 * d * config.d_ff as f64;
    let t = seq_len as f64;
    let matmul = 2.0 * per_layer_params * layers as f64 * t;
    let attention = 4.0 * t * t * d * layers as f64;
    FlopCount { matmul, attention, total: matmul + attention }
}

/// Linear-interpolated percentile of sorted samples, `p` in `[0, 100]`.
pub fn percentile(sorted: &[f64], p: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = (p / 100.0) * (sorted.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

/// Smallest observable nonzero step of the monotonic clock.
pub fn timer_resolution() -> Duration {
    let mut best = Duration::MAX;
    for _ in 0..200 {
        let a = Instant::now();
        let mut b = Instant::now();
        while b == a {
            b = Instant::now();
        }
        best = best.min(b - a);
    }
    best
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchOptions {
    /// Timed samples, cycling through the queries.
    pub repetitions: usize,
    /// Untimed runs before measuring.
    pub warmup: usize,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { repetitions: 20, warmup: 3 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyReport {
    pub latency_p50_ms: f64,
    pub latency_p95_ms: f64,
    pub flops_per_query: f64,
    pub attention_flops_per_query: f64,
    pub peak_memory_bytes: u64,
    /// `allocator` when measured, `estimate` otherwise.
    pub peak_memory_source: String,
    pub n_queries: usize,
    pub n_samples: usize,
    pub executed_layers: usize,
}

/// Times prefill plus scoring for each query, excluding tokenization.
pub fn bench(reranker: &Reranker, instances: &[ListwiseInstance], options: BenchOptions) -> Result<EfficiencyReport> {
    if options.repetitions < 20 {
        return Err(invalid(format!("need at least 20 repetitions, got {}", options.repetitions)));
    }
    if instances.is_empty() {
        return Err(invalid("no benchmark queries"));
    }
    let prepared = instances.iter().map(|i| reranker.prepare(i)).collect::<Result<Vec<_>>>()?;
    let cfg = &reranker.model.config;
    let layers = cfg.active_layers();
    let mut flop_sum = 0.0;
    let mut attn_sum = 0.0;
    for p in &prepared {
        for layout in std::iter::once(&p.layout).chain(&p.null_layout) {
            let f = flops(cfg, layers, layout.len());
            flop_sum += f.total;
            attn_sum += f.attention;
        }
    }
    let n = prepared.len() as f64;

    for i in 0..options.warmup {
        reranker.score_prepared(&prepared[i % prepared.len()])?;
    }
    let resolution = timer_resolution();
    let base = alloc::reset_peak();
    let mut samples = Vec::with_capacity(options.repetitions);
    for i in 0..options.repetitions {
        let p = &prepared[i % prepared.len()];
        let t0 = Instant::now();
        let out = reranker.score_prepared(p)?;
        let dt = t0.elapsed();
        std::hint::black_box(out);
        samples.push(dt);
    }
    let fastest = samples.iter().min().copied().unwrap_or_default();
    if fastest < resolution * 100 {
        return Err(Error::TimerResolution(format!(
            "fastest sample {fastest:?} is under 100x the clock resolution {resolution:?}"
        )));
    }
    let (peak, source) = match base {
        Some(_) => (alloc::peak_bytes() as u64, "allocator"),
        None => (estimate_memory(reranker, &prepared), "estimate"),
    };
    let mut ms: Vec<f64> = samples.iter().map(|d| d.as_secs_f64() * 1e3).collect();
    ms.sort_by(f64::total_cmp);
    Ok(EfficiencyReport {
        latency_p50_ms: percentile(&ms, 50.0),
        latency_p95_ms: percentile(&ms, 95.0),
        flops_per_query: flop_sum / n,
        attention_flops_per_query: attn_sum / n,
        peak_memory_bytes: peak,
        peak_memory_source: source.into(),
        n_queries: prepared.len(),
        n_samples: ms.len(),
        executed_layers: layers,
    })
}

/// Parameters plus the largest single-prompt activation set.
fn estimate_memory(reranker: &Reranker, prepared: &[crate::score::Prepared]) -> u64 {
    let cfg = &reranker.model.config;
    let params = reranker.model.params.n_params() as u64 * 4;
    let t = prepared.iter().map(|p| p.layout.len()).max().unwrap_or(0) as u64;
    let per_layer = t * (6 * cfg.d_model as u64 + 2 * cfg.d_ff as u64 + cfg.n_heads as u64 * t);
    params + per_layer * 4
}

impl EfficiencyReport {
    pub fn table(rows: &[(String, EfficiencyReport)]) -> String {
        let w = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(7);
        let mut s = String::new();
        writeln!(
            s,
            "{:<w$}  {:>10}  {:>10}  {:>12}  {:>14}  {:>6}",
            "variant", "P50 (ms)", "P95 (ms)", "GFLOP/query", "peak mem (MiB)", "layers"
        )
        .unwrap();
        for (name, r) in rows {
            writeln!(
                s,
                "{name:<w$}  {:>10.3}  {:>10.3}  {:>12.4}  {:>14.2}  {:>6}",
                r.latency_p50_ms,
                r.latency_p95_ms,
                r.flops_per_query / 1e9,
                r.peak_memory_bytes as f64 / (1024.0 * 1024.0),
                r.executed_layers
            )
            .unwrap();
        }
        s
    }

    pub fn csv(rows: &[(String, EfficiencyReport)]) -> String {
        let mut s = String::from(
            "variant,latency_p50_ms,latency_p95_ms,flops_per_query,peak_memory_bytes,peak_memory_source,n_samples,executed_layers\n",
        );
        for (name, r) in rows {
            writeln!(
                s,
                "{name},{},{},{},{},{},{},{}",
                r.latency_p50_ms,
                r.latency_p95_ms,
                r.flops_per_query,
                r.peak_memory_bytes,
                r.peak_memory_source,
                r.n_samples,
                r.executed_layers
            )
            .unwrap();
        }
        s
    }
}

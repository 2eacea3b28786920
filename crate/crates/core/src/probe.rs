//! QR-head probing: per-head attention mass from query tokens onto gold
//! chunks, averaged over a seed set, and head selection from the result.

use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ListwiseInstance;
use crate::error::{invalid, Error, Result};
use crate::model::{AttentionCapture, HeadId, ModelView, Real};
use crate::prompt::{PromptAssembler, PromptLayout, PromptOptions};

/// Default number of selected heads.
pub const DEFAULT_TOP_K: usize = 16;
/// Default seed-set size.
pub const DEFAULT_SEED_SET: usize = 1000;

/// Query-to-gold attention mass per head:
/// `(1/|Q|) * sum over gold chunks, query tokens and chunk tokens of A[q, c]`.
pub fn qr_score<T: Real>(
    capture: &AttentionCapture<T>,
    layout: &PromptLayout,
    gold: &[usize],
) -> Result<BTreeMap<HeadId, f64>> {
    if gold.is_empty() {
        return Err(invalid("QR score needs at least one gold chunk"));
    }
    if let Some(&g) = gold.iter().find(|&&g| g >= layout.n_candidates()) {
        return Err(invalid(format!("gold index {g} out of range for {} candidates", layout.n_candidates())));
    }
    let rows = capture.rows_for(layout.query_span.clone())?;
    let n_q = rows.len() as f64;
    let mut out = BTreeMap::new();
    for (&head, a) in &capture.entries {
        let mut total = 0.0;
        for &r in &rows {
            let row = a.row(r);
            for &g in gold {
                let span = &layout.chunk_spans[g];
                total += row.slice(ndarray::s![span.start..span.end]).iter().map(|x| x.to_f64().unwrap()).sum::<f64>();
            }
        }
        out.insert(head, total / n_q);
    }
    Ok(out)
}

/// Mean QR score of every probed head over a seed set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadScoreTable {
    pub scores: BTreeMap<HeadId, f64>,
    pub seed_count: usize,
}

#[derive(Serialize, Deserialize)]
struct TableLine {
    layer: usize,
    head: usize,
    score: f64,
    seed_count: usize,
}

impl HeadScoreTable {
    pub fn validate(&self) -> Result<()> {
        if let Some((h, s)) = self.scores.iter().find(|(_, s)| !s.is_finite() || **s < 0.0) {
            return Err(Error::NonFinite(format!("head {h} has invalid QR score {s}")));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut out = String::new();
        for (h, &score) in &self.scores {
            let line = TableLine { layer: h.layer, head: h.head, score, seed_count: self.seed_count };
            out.push_str(&serde_json::to_string(&line)?);
            out.push('\n');
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let mut scores = BTreeMap::new();
        let mut seed_count = 0;
        for (i, line) in fs::read_to_string(path)?.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let parse_err = |message: String| Error::Parse { path: path.to_path_buf(), line: i + 1, message };
            let t: TableLine = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
            seed_count = t.seed_count;
            scores.insert(HeadId::new(t.layer, t.head), t.score);
        }
        let table = HeadScoreTable { scores, seed_count };
        table.validate()?;
        Ok(table)
    }
}

/// Probes every head of `view` over the gold-bearing instances of `seed_set`.
/// Each instance contributes with equal weight.
pub fn probe_heads<T: Real>(
    view: ModelView<'_, T>,
    assembler: &PromptAssembler,
    seed_set: &[ListwiseInstance],
) -> Result<HeadScoreTable> {
    let usable: Vec<&ListwiseInstance> = seed_set.iter().filter(|i| i.has_gold()).collect();
    if usable.is_empty() {
        return Err(invalid("seed set has no instance with a gold chunk in its shortlist"));
    }
    if usable.len() < seed_set.len() {
        tracing::warn!(skipped = seed_set.len() - usable.len(), "seed instances without gold skipped");
    }
    let per_instance: Vec<BTreeMap<HeadId, f64>> = usable
        .par_iter()
        .map(|inst| {
            let run = || {
                let layout = assembler.assemble(inst, PromptOptions::default())?;
                let capture = view.forward_with_attention(&layout.tokens, &layout.query_positions(), None)?;
                qr_score(&capture, &layout, &inst.positives())
            };
            run().map_err(|e| e.for_instance(&inst.instance_id))
        })
        .collect::<Result<_>>()?;
    let mut scores: BTreeMap<HeadId, f64> = BTreeMap::new();
    for m in &per_instance {
        for (h, s) in m {
            *scores.entry(*h).or_insert(0.0) += s;
        }
    }
    let n = per_instance.len() as f64;
    scores.values_mut().for_each(|s| *s /= n);
    let table = HeadScoreTable { scores, seed_count: per_instance.len() };
    table.validate()?;
    Ok(table)
}

fn ranked(table: &HeadScoreTable) -> Vec<(HeadId, f64)> {
    let mut v: Vec<(HeadId, f64)> = table.scores.iter().map(|(h, s)| (*h, *s)).collect();
    v.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    v
}

/// The `k` highest-scoring heads, descending, ties by `(layer, head)`.
pub fn select_top_heads(table: &HeadScoreTable, k: usize) -> Result<HeadSet> {
    if table.scores.is_empty() {
        return Err(invalid("empty head-score table"));
    }
    if k == 0 || k > table.scores.len() {
        return Err(invalid(format!("k = {k} outside 1..={}", table.scores.len())));
    }
    HeadSet::new(ranked(table).into_iter().take(k).map(|(h, _)| h).collect(), None)
}

/// Heads per layer for the half-open range `[l_start, l_end)`.
pub fn heads_per_layer(l_start: usize, l_end: usize, k_total: usize, n_layers: usize) -> Result<usize> {
    if l_start >= l_end || l_end > n_layers {
        return Err(invalid(format!("layer range {l_start}..{l_end} invalid for {n_layers} layers")));
    }
    let width = l_end - l_start;
    if k_total == 0 || !k_total.is_multiple_of(width) {
        let valid: Vec<String> =
            (1..=k_total.min(n_layers)).filter(|&w| k_total.is_multiple_of(w)).map(|w| w.to_string()).collect();
        return Err(invalid(format!(
            "k_total {k_total} is not divisible by range width {width}; valid widths: {}",
            valid.join(", ")
        )));
    }
    Ok(k_total / width)
}

/// Top `k_total / width` heads of each layer in `[l_start, l_end)`, layers
/// ascending, heads by descending score within a layer.
pub fn select_layer_range(table: &HeadScoreTable, l_start: usize, l_end: usize, k_total: usize) -> Result<HeadSet> {
    if table.scores.is_empty() {
        return Err(invalid("empty head-score table"));
    }
    let n_layers = table.scores.keys().map(|h| h.layer + 1).max().unwrap_or(0);
    let n = heads_per_layer(l_start, l_end, k_total, n_layers)?;
    let all = ranked(table);
    let mut heads = Vec::with_capacity(k_total);
    for l in l_start..l_end {
        let layer: Vec<HeadId> = all.iter().filter(|(h, _)| h.layer == l).map(|(h, _)| *h).take(n).collect();
        if layer.len() < n {
            return Err(invalid(format!("layer {l} has {} probed heads, need {n}", layer.len())));
        }
        heads.extend(layer);
    }
    HeadSet::new(heads, None)
}

/// Ordered, duplicate-free heads with optional positive weights.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSet {
    heads: Vec<HeadId>,
    weights: Option<Vec<f64>>,
}

impl HeadSet {
    pub fn new(heads: Vec<HeadId>, weights: Option<Vec<f64>>) -> Result<Self> {
        if heads.is_empty() {
            return Err(invalid("head set is empty"));
        }
        let mut seen = HashSet::new();
        if let Some(d) = heads.iter().find(|h| !seen.insert(**h)) {
            return Err(invalid(format!("duplicate head {d}")));
        }
        if let Some(w) = &weights {
            if w.len() != heads.len() {
                return Err(invalid("head weights do not match head count"));
            }
            if w.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
                return Err(invalid("head weights must be positive"));
            }
        }
        Ok(HeadSet { heads, weights })
    }

    pub fn heads(&self) -> &[HeadId] {
        &self.heads
    }

    pub fn weights(&self) -> Option<&[f64]> {
        self.weights.as_deref()
    }

    /// Weight of the `i`-th head (1 when unweighted).
    pub fn weight(&self, i: usize) -> f64 {
        self.weights.as_ref().map_or(1.0, |w| w[i])
    }

    pub fn len(&self) -> usize {
        self.heads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.heads.is_empty()
    }

    pub fn max_layer(&self) -> usize {
        self.heads.iter().map(|h| h.layer).max().unwrap_or(0)
    }

    /// Stable 64-bit FNV-1a digest of the text form, hex encoded.
    pub fn id(&self) -> String {
        format!("hs-{:016x}", fnv1a(self.to_text().as_bytes()))
    }

    /// One `l-h` or `l-h weight` line per head.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (i, h) in self.heads.iter().enumerate() {
            match &self.weights {
                Some(w) => writeln!(s, "{h} {}", w[i]),
                None => writeln!(s, "{h}"),
            }
            .expect("writing to a String");
        }
        s
    }

    /// Parses the text form. Blank lines and `#` comments are ignored; either
    /// every line has a weight or none does.
    pub fn parse(text: &str) -> Result<Self> {
        let mut heads = Vec::new();
        let mut weights = Vec::new();
        for line in text.lines() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let mut parts = line.split_whitespace();
            heads.push(parts.next().unwrap_or_default().parse::<HeadId>()?);
            if let Some(w) = parts.next() {
                weights.push(w.parse::<f64>().map_err(|_| invalid(format!("bad head weight {w:?}")))?);
            }
            if parts.next().is_some() {
                return Err(invalid(format!("trailing text in head line {line:?}")));
            }
        }
        let weights = match weights.len() {
            0 => None,
            n if n == heads.len() => Some(weights),
            _ => return Err(invalid("either every head line has a weight or none does")),
        };
        HeadSet::new(heads, weights)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = fs::File::create(path)?;
        f.write_all(self.to_text().as_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::parse(&fs::read_to_string(path)?).map_err(|e| match e {
            Error::InvalidArgument(message) => Error::Parse { path: path.to_path_buf(), line: 0, message },
            e => e,
        })
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

//! Listwise scoring: one prefill over the whole shortlist, per-head chunk
//! scores read off the query rows, aggregation over a head set, optional
//! null-query calibration and max-min normalization.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use ndarray::s;
use serde::{Deserialize, Serialize};

use crate::data::ListwiseInstance;
use crate::error::{invalid, Error, Result};
use crate::gate;
use crate::model::{AttentionCapture, HeadId, ModelView, Real, Transformer};
use crate::probe::{fnv1a, HeadSet};
use crate::prompt::{PromptAssembler, PromptLayout, PromptOptions};

/// Default max-min normalization scale.
pub const DEFAULT_SCALE: f64 = 8.0;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Aggregation {
    #[default]
    Sum,
    /// Each head contributes its largest single query-to-chunk entry.
    Max,
}

impl std::str::FromStr for Aggregation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Aggregation::Sum),
            "max" => Ok(Aggregation::Max),
            other => Err(invalid(format!("unknown aggregation {other:?} (expected sum or max)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub head_set_id: String,
    pub calibrated: bool,
    pub normalized: bool,
    pub aggregation: Aggregation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub provenance: Provenance,
}

/// `(1/|Q|) * sum over query rows and chunk tokens of A[q, c]` for one head.
pub fn head_chunk_score<T: Real>(
    capture: &AttentionCapture<T>,
    layout: &PromptLayout,
    chunk: usize,
    head: HeadId,
) -> Result<f64> {
    let rows = capture.rows_for(layout.query_span.clone())?;
    chunk_reduce(capture.head(head)?, &rows, layout, chunk, Aggregation::Sum)
}

fn chunk_reduce<T: Real>(
    a: &ndarray::Array2<T>,
    rows: &[usize],
    layout: &PromptLayout,
    chunk: usize,
    mode: Aggregation,
) -> Result<f64> {
    let span = layout
        .chunk_spans
        .get(chunk)
        .ok_or_else(|| invalid(format!("chunk {chunk} out of range for {} candidates", layout.n_candidates())))?;
    let mut acc = match mode {
        Aggregation::Sum => 0.0,
        Aggregation::Max => f64::NEG_INFINITY,
    };
    for &r in rows {
        for &x in a.slice(s![r, span.start..span.end]) {
            let x = x.to_f64().unwrap();
            match mode {
                Aggregation::Sum => acc += x,
                Aggregation::Max => acc = acc.max(x),
            }
        }
    }
    Ok(match mode {
        Aggregation::Sum => acc / rows.len() as f64,
        Aggregation::Max => acc,
    })
}

/// Per-head score of every candidate, read from the rows of `query_span`.
pub type PerHeadScores = BTreeMap<HeadId, Vec<f64>>;

pub fn per_head_scores<T: Real>(
    capture: &AttentionCapture<T>,
    layout: &PromptLayout,
    query_span: std::ops::Range<usize>,
    heads: &[HeadId],
    mode: Aggregation,
) -> Result<PerHeadScores> {
    let rows = capture.rows_for(query_span)?;
    let mut out = BTreeMap::new();
    for &h in heads {
        let a = capture.head(h)?;
        let v =
            (0..layout.n_candidates()).map(|c| chunk_reduce(a, &rows, layout, c, mode)).collect::<Result<Vec<_>>>()?;
        out.insert(h, v);
    }
    Ok(out)
}

/// Weighted sum of per-head scores over `head_set`.
pub fn aggregate_heads(per_head: &PerHeadScores, head_set: &HeadSet) -> Result<Vec<f64>> {
    let n = per_head
        .get(&head_set.heads()[0])
        .ok_or_else(|| Error::IncompleteCapture(format!("no scores for head {}", head_set.heads()[0])))?
        .len();
    let mut out = vec![0.0; n];
    for (i, h) in head_set.heads().iter().enumerate() {
        let v = per_head.get(h).ok_or_else(|| Error::IncompleteCapture(format!("no scores for head {h}")))?;
        if v.len() != n {
            return Err(Error::IncompleteCapture(format!("head {h} scored {} candidates, expected {n}", v.len())));
        }
        let w = head_set.weight(i);
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
    Ok(out)
}

pub fn calibrate(scores: &[f64], null_scores: &[f64]) -> Result<Vec<f64>> {
    if scores.len() != null_scores.len() {
        return Err(invalid(format!("{} scores but {} null scores", scores.len(), null_scores.len())));
    }
    Ok(scores.iter().zip(null_scores).map(|(a, b)| a - b).collect())
}

/// `scale * (s - min) / (max - min)`; all zeros when every score is equal.
pub fn max_min_norm(scores: &[f64], scale: f64) -> Result<Vec<f64>> {
    if scores.len() < 2 {
        return Err(invalid("max-min normalization needs at least 2 scores"));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("scale must be positive, got {scale}")));
    }
    let (lo, hi) = scores.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    let range = hi - lo;
    if range == 0.0 {
        return Ok(vec![0.0; scores.len()]);
    }
    Ok(scores.iter().map(|&x| scale * (x - lo) / range).collect())
}

/// Candidate indices by descending score, ties by ascending index.
pub fn ranking(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RerankOptions {
    pub calibrate: bool,
    pub normalize: bool,
    pub scale: f64,
    pub aggregation: Aggregation,
}

impl Default for RerankOptions {
    fn default() -> Self {
        RerankOptions { calibrate: false, normalize: true, scale: DEFAULT_SCALE, aggregation: Aggregation::Sum }
    }
}

/// Which heads score the candidates.
#[derive(Debug, Clone, PartialEq)]
pub enum HeadSelection {
    Fixed(HeadSet),
    /// Per-prompt selection by the model's gate.
    Gated,
}

/// Assembled prompts for one instance, ready for scoring.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub instance_id: String,
    pub layout: PromptLayout,
    pub null_layout: Option<PromptLayout>,
}

/// Model, prompt assembler, head selection and scoring options.
#[derive(Debug, Clone)]
pub struct Reranker {
    pub model: Transformer<f32>,
    pub assembler: PromptAssembler,
    pub selection: HeadSelection,
    pub options: RerankOptions,
    model_id: String,
    selection_id: String,
}

impl Reranker {
    pub fn new(
        model: Transformer<f32>,
        assembler: PromptAssembler,
        selection: HeadSelection,
        options: RerankOptions,
    ) -> Result<Self> {
        if assembler.tokenizer.len() != model.config.vocab_size {
            return Err(invalid(format!(
                "tokenizer has {} symbols but the model vocabulary is {}",
                assembler.tokenizer.len(),
                model.config.vocab_size
            )));
        }
        let active = model.config.active_layers();
        let selection_id = match &selection {
            HeadSelection::Fixed(hs) => {
                for h in hs.heads() {
                    model.config.check_head(*h)?;
                    if h.layer >= active {
                        return Err(invalid(format!("head {h} lies above the {active} executed layers")));
                    }
                }
                hs.id()
            }
            HeadSelection::Gated => {
                let g = model.gate.as_ref().ok_or_else(|| invalid("gated selection needs a model with a gate"))?;
                if g.layers.iter().any(|&l| l >= active) {
                    return Err(invalid("gated layers lie above the executed layers"));
                }
                let mut bytes = format!("{:?}:{}", g.layers, g.n_per_layer).into_bytes();
                for w in &g.weights {
                    w.iter().for_each(|x| bytes.extend_from_slice(&x.to_le_bytes()));
                }
                format!("gate-{:016x}", fnv1a(&bytes))
            }
        };
        let model_id = model_digest(&model);
        Ok(Reranker { model, assembler, selection, options, model_id, selection_id })
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn head_set_id(&self) -> &str {
        &self.selection_id
    }

    /// The executed part of the model (honours its truncation setting).
    pub fn view(&self) -> ModelView<'_, f32> {
        self.model.view()
    }

    pub fn prepare(&self, instance: &ListwiseInstance) -> Result<Prepared> {
        self.prepare_with(instance, &self.options)
    }

    fn prepare_with(&self, instance: &ListwiseInstance, options: &RerankOptions) -> Result<Prepared> {
        let run = || {
            let opts = PromptOptions {
                with_null_query: false,
                with_think_query: matches!(self.selection, HeadSelection::Gated),
            };
            let layout = self.assembler.assemble(instance, opts)?;
            let null_layout = if options.calibrate { Some(self.assembler.assemble_null(instance)?) } else { None };
            Ok(Prepared { instance_id: instance.instance_id.clone(), layout, null_layout })
        };
        run().map_err(|e: Error| e.for_instance(&instance.instance_id))
    }

    /// Prefill and scoring only; no tokenization.
    pub fn score_prepared(&self, p: &Prepared) -> Result<ScoreVector> {
        self.score_inner(p, &self.options).map_err(|e| e.for_instance(&p.instance_id))
    }

    fn score_inner(&self, p: &Prepared, options: &RerankOptions) -> Result<ScoreVector> {
        let view = self.view();
        let mode = options.aggregation;
        let layout = &p.layout;
        let (head_set, per_head) = match &self.selection {
            HeadSelection::Fixed(hs) => {
                let cap = view.forward_with_attention(&layout.tokens, &layout.query_positions(), Some(hs.heads()))?;
                (hs.clone(), per_head_scores(&cap, layout, layout.query_span.clone(), hs.heads(), mode)?)
            }
            HeadSelection::Gated => {
                let g = self.model.gate.as_ref().expect("checked at construction");
                let think = layout.think_query_span.clone().ok_or_else(|| invalid("prompt lacks the think query"))?;
                let think_rows: Vec<usize> = think.collect();
                let all: Vec<HeadId> = g
                    .layers
                    .iter()
                    .flat_map(|&l| (0..self.model.config.n_heads).map(move |h| HeadId::new(l, h)))
                    .collect();
                let out =
                    view.forward(&layout.tokens, &layout.query_positions(), Some(&all), &g.layers, &think_rows)?;
                let hidden: Vec<_> = g.layers.iter().map(|l| out.hidden[l].view()).collect();
                let hs = gate::decide(g, &hidden)?.head_set()?;
                let ph = per_head_scores(&out.attention, layout, layout.query_span.clone(), hs.heads(), mode)?;
                (hs, ph)
            }
        };
        let mut scores = aggregate_heads(&per_head, &head_set)?;
        if let Some(null) = &p.null_layout {
            let cap = view.forward_with_attention(&null.tokens, &null.query_positions(), Some(head_set.heads()))?;
            let null_ph = per_head_scores(&cap, null, null.query_span.clone(), head_set.heads(), mode)?;
            scores = calibrate(&scores, &aggregate_heads(&null_ph, &head_set)?)?;
        }
        if options.normalize {
            scores = max_min_norm(&scores, options.scale)?;
        }
        if let Some(i) = scores.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite(format!("score of candidate {i} is {}", scores[i])));
        }
        Ok(ScoreVector {
            ranking: ranking(&scores),
            scores,
            provenance: Provenance {
                head_set_id: self.selection_id.clone(),
                calibrated: p.null_layout.is_some(),
                normalized: options.normalize,
                aggregation: mode,
            },
        })
    }

    pub fn rerank(&self, instance: &ListwiseInstance) -> Result<ScoreVector> {
        self.score_prepared(&self.prepare(instance)?)
    }

    /// Reranks with `options` in place of the configured ones.
    pub fn rerank_with(&self, instance: &ListwiseInstance, options: &RerankOptions) -> Result<ScoreVector> {
        let p = self.prepare_with(instance, options)?;
        self.score_inner(&p, options).map_err(|e| e.for_instance(&p.instance_id))
    }
}

/// FNV-1a digest over the config and every parameter bit.
pub fn model_digest(model: &Transformer<f32>) -> String {
    let mut bytes = serde_json::to_vec(&model.config).expect("config serializes");
    for (_, _, data) in model.params.tensors() {
        for x in data {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
    }
    format!("m-{:016x}", fnv1a(&bytes))
}

#[derive(Serialize, Deserialize)]
pub struct RankedLine {
    pub instance_id: String,
    pub scores: Vec<f64>,
    pub ranking: Vec<usize>,
    pub provenance: Provenance,
}

pub fn save_ranked(results: &[(String, ScoreVector)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for (id, sv) in results {
        let line = RankedLine {
            instance_id: id.clone(),
            scores: sv.scores.clone(),
            ranking: sv.ranking.clone(),
            provenance: sv.provenance.clone(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

//! Listwise prompt assembly with exact span bookkeeping.
//!
//! Token order:
//!
//! ```text
//! <bos> header [memory_intro M] chunks_intro [1] c1 [2] c2 ... query_label Q
//!       [query_label N/A] [<think> Q </think>]
//! ```
//!
//! Chunk spans cover chunk content only; the `[i]` markers and every
//! instruction word are boilerplate.

mod tokenizer;

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::data::ListwiseInstance;
use crate::error::{invalid, Error, Result};

pub use tokenizer::{marker, Tokenizer, BOS, NULL_QUERY, THINK_CLOSE, THINK_OPEN};

/// Instruction boilerplate. Every word must be in the tokenizer vocabulary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct PromptTemplate {
    pub header: String,
    pub memory_intro: String,
    pub chunks_intro: String,
    pub query_label: String,
}

impl Default for PromptTemplate {
    fn default() -> Self {
        PromptTemplate {
            header: "Instruct:".into(),
            memory_intro: "Here are some session summaries that may help answer the query:".into(),
            chunks_intro: "Here are some retrieved chunks:".into(),
            query_label: "Query:".into(),
        }
    }
}

impl PromptTemplate {
    pub fn words(&self) -> impl Iterator<Item = &str> {
        [&self.header, &self.memory_intro, &self.chunks_intro, &self.query_label]
            .into_iter()
            .flat_map(|s| s.split_whitespace())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PromptOptions {
    pub with_null_query: bool,
    pub with_think_query: bool,
}

/// What a run of prompt tokens holds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentKind {
    Boilerplate,
    Memory,
    Chunk(usize),
    Query,
    NullQuery,
    ThinkQuery,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Segment {
    pub kind: SegmentKind,
    pub span: Range<usize>,
}

/// Token sequence plus the position range of every content element.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub tokens: Vec<u32>,
    pub memory_span: Option<Range<usize>>,
    pub chunk_spans: Vec<Range<usize>>,
    pub query_span: Range<usize>,
    pub null_query_span: Option<Range<usize>>,
    pub think_query_span: Option<Range<usize>>,
}

impl PromptLayout {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn n_candidates(&self) -> usize {
        self.chunk_spans.len()
    }

    pub fn query_positions(&self) -> Vec<usize> {
        self.query_span.clone().collect()
    }

    /// Every token assigned to exactly one segment, in document order.
    pub fn segments(&self) -> Vec<Segment> {
        let mut content: Vec<Segment> = Vec::new();
        if let Some(m) = &self.memory_span {
            content.push(Segment { kind: SegmentKind::Memory, span: m.clone() });
        }
        for (i, c) in self.chunk_spans.iter().enumerate() {
            content.push(Segment { kind: SegmentKind::Chunk(i), span: c.clone() });
        }
        content.push(Segment { kind: SegmentKind::Query, span: self.query_span.clone() });
        if let Some(n) = &self.null_query_span {
            content.push(Segment { kind: SegmentKind::NullQuery, span: n.clone() });
        }
        if let Some(t) = &self.think_query_span {
            content.push(Segment { kind: SegmentKind::ThinkQuery, span: t.clone() });
        }
        let mut out = Vec::with_capacity(content.len() * 2 + 1);
        let mut pos = 0;
        for seg in content {
            if seg.span.start > pos {
                out.push(Segment { kind: SegmentKind::Boilerplate, span: pos..seg.span.start });
            }
            pos = seg.span.end;
            out.push(seg);
        }
        if pos < self.tokens.len() {
            out.push(Segment { kind: SegmentKind::Boilerplate, span: pos..self.tokens.len() });
        }
        out
    }
}

/// Builds prompts for one tokenizer, template and length limit.
#[derive(Debug, Clone)]
pub struct PromptAssembler {
    pub tokenizer: Tokenizer,
    pub template: PromptTemplate,
    pub max_seq_len: usize,
}

struct Builder {
    tokens: Vec<u32>,
    max: usize,
}

impl Builder {
    fn push(&mut self, ids: &[u32], element: impl FnOnce() -> String) -> Result<Range<usize>> {
        let start = self.tokens.len();
        self.tokens.extend_from_slice(ids);
        if self.tokens.len() > self.max {
            return Err(Error::Overflow { element: element(), len: self.tokens.len(), max: self.max });
        }
        Ok(start..self.tokens.len())
    }
}

impl PromptAssembler {
    pub fn new(tokenizer: Tokenizer, template: PromptTemplate, max_seq_len: usize) -> Result<Self> {
        for w in template.words() {
            if tokenizer.id(w).is_none() {
                return Err(Error::UnknownSymbol(w.to_string()));
            }
        }
        Ok(PromptAssembler { tokenizer, template, max_seq_len })
    }

    /// Assembles `Inst(M, C, Q)` for an instance.
    pub fn assemble(&self, instance: &ListwiseInstance, options: PromptOptions) -> Result<PromptLayout> {
        let query = self.tokenizer.encode(&instance.query)?;
        if query.is_empty() {
            return Err(invalid(format!("instance {}: empty query", instance.instance_id)));
        }
        self.assemble_tokens(instance, &query, options)
    }

    /// Same layout with the null query `N/A` in the query block, used for
    /// the calibration pass.
    pub fn assemble_null(&self, instance: &ListwiseInstance) -> Result<PromptLayout> {
        self.assemble_tokens(instance, &[self.tokenizer.null_query()], PromptOptions::default())
    }

    fn assemble_tokens(
        &self,
        instance: &ListwiseInstance,
        query: &[u32],
        options: PromptOptions,
    ) -> Result<PromptLayout> {
        let tk = &self.tokenizer;
        let tpl = &self.template;
        let k = instance.candidates.len();
        if k < 2 {
            return Err(invalid(format!("instance {} has {k} candidates, need at least 2", instance.instance_id)));
        }
        let chunks: Vec<Vec<u32>> = instance.candidates.iter().map(|c| tk.encode(&c.text)).collect::<Result<_>>()?;
        if let Some(index) = chunks.iter().position(Vec::is_empty) {
            return Err(Error::EmptyCandidate { instance_id: instance.instance_id.clone(), index });
        }

        let mut b = Builder { tokens: Vec::new(), max: self.max_seq_len };
        let mut header = vec![tk.bos()];
        header.extend(tk.encode(&tpl.header)?);
        b.push(&header, || "instruction header".into())?;

        let memory_span = match instance.memory_prefix.as_deref() {
            Some(m) if !m.trim().is_empty() => {
                let mem = tk.encode(m)?;
                b.push(&tk.encode(&tpl.memory_intro)?, || "memory prefix intro".into())?;
                Some(b.push(&mem, || "memory prefix".into())?)
            }
            _ => None,
        };

        b.push(&tk.encode(&tpl.chunks_intro)?, || "chunk list intro".into())?;
        let mut chunk_spans = Vec::with_capacity(k);
        for (i, ids) in chunks.iter().enumerate() {
            let name = || format!("chunk {} (id {})", i + 1, instance.candidates[i].id);
            b.push(&[tk.marker(i + 1)?], name)?;
            chunk_spans.push(b.push(ids, name)?);
        }

        let label = tk.encode(&tpl.query_label)?;
        b.push(&label, || "query label".into())?;
        let query_span = b.push(query, || "query".into())?;

        let null_query_span = if options.with_null_query {
            b.push(&label, || "null query label".into())?;
            Some(b.push(&[tk.null_query()], || "null query".into())?)
        } else {
            None
        };
        let think_query_span = if options.with_think_query {
            let mut ids = vec![tk.think_open()];
            ids.extend_from_slice(query);
            ids.push(tk.think_close());
            Some(b.push(&ids, || "think query".into())?)
        } else {
            None
        };

        Ok(PromptLayout { tokens: b.tokens, memory_span, chunk_spans, query_span, null_query_span, think_query_span })
    }
}

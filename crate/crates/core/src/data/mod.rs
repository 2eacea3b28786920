//! Synthetic key-value corpora, queries, first-stage shortlists and listwise
//! instances.
//!
//! Every chunk states one fact `key value` surrounded by filler symbols. A
//! query names the key of its gold chunk(s) plus a few filler symbols, so the
//! unigram-overlap retriever is informative but noisy.

mod io;

use std::collections::{BTreeMap, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use io::{load_instances, save_instances};

/// Chunks per summary block.
pub const DEFAULT_BLOCK_SIZE: usize = 20;
/// Token budget for the memory prefix.
pub const DEFAULT_MEMORY_BUDGET: usize = 512;
pub const SUMMARY_WORDS: [&str; 3] = ["block", "covers", "keys"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub id: String,
    pub text: String,
    pub block_id: usize,
}

/// One query with its first-stage shortlist and gold labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ListwiseInstance {
    pub instance_id: String,
    pub query: String,
    pub candidates: Vec<Chunk>,
    pub labels: Vec<bool>,
    #[serde(default)]
    pub memory_prefix: Option<String>,
    /// Gold chunks were missing from the shortlist and were swapped in.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub forced_gold: bool,
}

impl ListwiseInstance {
    /// Inference-only instance: no labels known.
    pub fn unlabeled(instance_id: impl Into<String>, query: impl Into<String>, texts: &[String]) -> Self {
        ListwiseInstance {
            instance_id: instance_id.into(),
            query: query.into(),
            candidates: texts
                .iter()
                .enumerate()
                .map(|(i, t)| Chunk { id: i.to_string(), text: t.clone(), block_id: 0 })
                .collect(),
            labels: vec![false; texts.len()],
            memory_prefix: None,
            forced_gold: false,
        }
    }

    pub fn positives(&self) -> Vec<usize> {
        self.labels.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i).collect()
    }

    /// False for instances whose gold set missed the shortlist entirely.
    pub fn has_gold(&self) -> bool {
        self.labels.iter().any(|&y| y)
    }

    pub fn validate(&self) -> Result<()> {
        if self.candidates.len() != self.labels.len() {
            return Err(invalid(format!(
                "instance {}: {} candidates but {} labels",
                self.instance_id,
                self.candidates.len(),
                self.labels.len()
            )));
        }
        Ok(())
    }
}

/// Symbol inventory of the synthetic language.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Alphabet {
    pub n_keys: usize,
    pub n_values: usize,
    pub n_fillers: usize,
}

impl Default for Alphabet {
    fn default() -> Self {
        Alphabet { n_keys: 200, n_values: 32, n_fillers: 16 }
    }
}

impl Alphabet {
    pub fn key(i: usize) -> String {
        format!("k{i}")
    }

    pub fn value(i: usize) -> String {
        format!("v{i}")
    }

    pub fn filler(i: usize) -> String {
        format!("f{i}")
    }

    /// Every symbol data generation can emit.
    pub fn symbols(&self) -> Vec<String> {
        let mut out: Vec<String> = SUMMARY_WORDS.iter().map(|s| s.to_string()).collect();
        out.extend((0..self.n_keys).map(Self::key));
        out.extend((0..self.n_values).map(Self::value));
        out.extend((0..self.n_fillers).map(Self::filler));
        out
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub n_chunks: usize,
    pub chunk_len: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub alphabet: Alphabet,
    pub seed: u64,
    /// Chunk-id prefix, for keeping ids unique across corpora.
    #[serde(default)]
    pub id_prefix: String,
}

fn default_block_size() -> usize {
    DEFAULT_BLOCK_SIZE
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub chunks: Vec<Chunk>,
    /// Key symbol of each chunk's fact.
    pub keys: Vec<String>,
    /// Value symbol of each chunk's fact.
    pub values: Vec<String>,
    pub summaries: SummaryMap,
}

impl Corpus {
    pub fn len(&self) -> usize {
        self.chunks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.chunks.is_empty()
    }
}

/// Block id to summary text. Exactly one summary per corpus block.
pub type SummaryMap = BTreeMap<usize, String>;

pub fn generate_corpus(cs: &CorpusSpec) -> Result<Corpus> {
    generate_corpus_with(cs, &mut ChaCha8Rng::seed_from_u64(cs.seed))
}

fn generate_corpus_with(cs: &CorpusSpec, rng: &mut ChaCha8Rng) -> Result<Corpus> {
    if cs.n_chunks < 60 {
        return Err(invalid(format!("n_chunks {} < 60", cs.n_chunks)));
    }
    if cs.chunk_len < 4 {
        return Err(invalid(format!("chunk_len {} < 4", cs.chunk_len)));
    }
    if cs.block_size == 0 {
        return Err(invalid("block_size must be positive"));
    }
    let a = cs.alphabet;
    if a.n_keys < cs.n_chunks {
        return Err(Error::Generation(format!("{} keys cannot give {} chunks unique facts", a.n_keys, cs.n_chunks)));
    }
    if a.n_values == 0 || a.n_fillers == 0 {
        return Err(Error::Generation("need at least one value and one filler symbol".into()));
    }

    let mut key_ids: Vec<usize> = (0..a.n_keys).collect();
    key_ids.shuffle(rng);
    let mut chunks = Vec::with_capacity(cs.n_chunks);
    let mut keys = Vec::with_capacity(cs.n_chunks);
    let mut values = Vec::with_capacity(cs.n_chunks);
    for (i, &key_id) in key_ids.iter().take(cs.n_chunks).enumerate() {
        let key = Alphabet::key(key_id);
        let value = Alphabet::value(rng.random_range(0..a.n_values));
        let mut words: Vec<String> =
            (0..cs.chunk_len - 2).map(|_| Alphabet::filler(rng.random_range(0..a.n_fillers))).collect();
        let at = rng.random_range(0..=words.len());
        words.insert(at, value.clone());
        words.insert(at, key.clone());
        chunks.push(Chunk {
            id: format!("{}c{i:04}", cs.id_prefix),
            text: words.join(" "),
            block_id: i / cs.block_size,
        });
        keys.push(key);
        values.push(value);
    }

    let mut summaries = SummaryMap::new();
    for (block, group) in keys.chunks(cs.block_size).enumerate() {
        summaries.insert(block, format!("{} {}", SUMMARY_WORDS.join(" "), group.join(" ")));
    }
    Ok(Corpus { chunks, keys, values, summaries })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct QueryShape {
    pub gold_per_query: usize,
    /// Filler symbols mixed into each query.
    pub n_fillers: usize,
}

impl Default for QueryShape {
    fn default() -> Self {
        QueryShape { gold_per_query: 1, n_fillers: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub text: String,
    /// Indices of gold chunks in the corpus.
    pub gold: Vec<usize>,
}

pub fn generate_queries(
    corpus: &Corpus,
    alphabet: &Alphabet,
    shape: QueryShape,
    n_queries: usize,
    id_prefix: &str,
    rng: &mut impl Rng,
) -> Result<Vec<Query>> {
    if shape.gold_per_query == 0 || shape.gold_per_query > corpus.len() {
        return Err(invalid(format!("gold_per_query {} invalid", shape.gold_per_query)));
    }
    let all: Vec<usize> = (0..corpus.len()).collect();
    Ok((0..n_queries)
        .map(|q| {
            let mut gold: Vec<usize> = all.choose_multiple(rng, shape.gold_per_query).copied().collect();
            gold.sort_unstable();
            let mut words: Vec<String> =
                (0..shape.n_fillers).map(|_| Alphabet::filler(rng.random_range(0..alphabet.n_fillers))).collect();
            words.extend(gold.iter().map(|&g| corpus.keys[g].clone()));
            Query { id: format!("{id_prefix}q{q:04}"), text: words.join(" "), gold }
        })
        .collect())
}

/// Top-`k` chunk indices by number of distinct query symbols present in the
/// chunk, ties broken by chunk id.
pub fn first_stage_retrieve(query: &str, corpus: &Corpus, k: usize) -> Result<Vec<usize>> {
    if k > corpus.len() {
        return Err(invalid(format!("K {k} exceeds corpus size {}", corpus.len())));
    }
    let q: HashSet<&str> = query.split_whitespace().collect();
    if q.is_empty() {
        return Err(invalid("empty query"));
    }
    let mut scored: Vec<(usize, usize)> = corpus
        .chunks
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let words: HashSet<&str> = c.text.split_whitespace().collect();
            (q.intersection(&words).count(), i)
        })
        .collect();
    scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| corpus.chunks[a.1].id.cmp(&corpus.chunks[b.1].id)));
    Ok(scored.into_iter().take(k).map(|(_, i)| i).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct BuildOptions {
    pub k: usize,
    pub use_memory: bool,
    /// Swap missing gold chunks into the tail of the shortlist.
    pub force_gold: bool,
    pub memory_budget: usize,
}

impl Default for BuildOptions {
    fn default() -> Self {
        BuildOptions { k: 50, use_memory: false, force_gold: false, memory_budget: DEFAULT_MEMORY_BUDGET }
    }
}

/// Summaries of the blocks touched by `candidates`, de-duplicated.
///
/// Blocks are chosen greedily by how many candidates they cover (ties by
/// first appearance) while they fit in `budget` tokens, then emitted in order
/// of first appearance.
pub fn memory_prefix(candidates: &[Chunk], summaries: &SummaryMap, budget: usize) -> Result<Option<String>> {
    let mut order: Vec<usize> = Vec::new();
    let mut coverage: BTreeMap<usize, usize> = BTreeMap::new();
    for c in candidates {
        let n = coverage.entry(c.block_id).or_insert(0);
        if *n == 0 {
            order.push(c.block_id);
        }
        *n += 1;
    }
    let mut by_coverage: Vec<(usize, usize)> = order.iter().enumerate().map(|(rank, &b)| (rank, b)).collect();
    by_coverage.sort_by(|x, y| coverage[&y.1].cmp(&coverage[&x.1]).then(x.0.cmp(&y.0)));
    let mut used = 0;
    let mut chosen = HashSet::new();
    for (_, block) in by_coverage {
        let text = summaries.get(&block).ok_or_else(|| Error::Generation(format!("block {block} has no summary")))?;
        let len = text.split_whitespace().count();
        if used + len <= budget {
            used += len;
            chosen.insert(block);
        }
    }
    let parts: Vec<&str> = order.iter().filter(|b| chosen.contains(b)).map(|b| summaries[b].as_str()).collect();
    Ok(if parts.is_empty() { None } else { Some(parts.join(" ")) })
}

/// Listwise instances: shortlist each query, label candidates that are gold,
/// optionally attach the summary prefix.
pub fn build_instances(corpus: &Corpus, queries: &[Query], opts: BuildOptions) -> Result<Vec<ListwiseInstance>> {
    queries
        .iter()
        .map(|q| {
            if q.gold.is_empty() {
                return Err(invalid(format!("query {} has no gold chunk", q.id)));
            }
            let mut shortlist = first_stage_retrieve(&q.text, corpus, opts.k)?;
            let gold: HashSet<usize> = q.gold.iter().copied().collect();
            let missing: Vec<usize> = q.gold.iter().filter(|g| !shortlist.contains(g)).copied().collect();
            let mut forced = false;
            if !missing.is_empty() && opts.force_gold {
                // replace the lowest-ranked non-gold candidates
                let mut slot = shortlist.len();
                for g in missing {
                    loop {
                        slot -= 1;
                        if !gold.contains(&shortlist[slot]) {
                            break;
                        }
                    }
                    shortlist[slot] = g;
                }
                forced = true;
            }
            let candidates: Vec<Chunk> = shortlist.iter().map(|&i| corpus.chunks[i].clone()).collect();
            let labels: Vec<bool> = shortlist.iter().map(|i| gold.contains(i)).collect();
            if !labels.iter().any(|&y| y) {
                tracing::warn!(query = %q.id, "gold set missing from shortlist; instance flagged");
            }
            let memory_prefix =
                if opts.use_memory { memory_prefix(&candidates, &corpus.summaries, opts.memory_budget)? } else { None };
            Ok(ListwiseInstance {
                instance_id: q.id.clone(),
                query: q.text.clone(),
                candidates,
                labels,
                memory_prefix,
                forced_gold: forced,
            })
        })
        .collect()
}

/// Whole-dataset generation recipe: several independent corpora, each with
/// its own queries.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub seed: u64,
    pub n_corpora: usize,
    pub queries_per_corpus: usize,
    pub n_chunks: usize,
    pub chunk_len: usize,
    #[serde(default = "default_block_size")]
    pub block_size: usize,
    #[serde(default)]
    pub alphabet: Alphabet,
    #[serde(default)]
    pub query: QueryShape,
    #[serde(default)]
    pub build: BuildOptions,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            seed: 0,
            n_corpora: 1,
            queries_per_corpus: 20,
            n_chunks: 100,
            chunk_len: 5,
            block_size: DEFAULT_BLOCK_SIZE,
            alphabet: Alphabet::default(),
            query: QueryShape::default(),
            build: BuildOptions::default(),
        }
    }
}

/// Generates all instances of a dataset. Corpus `i` draws from stream `i` of
/// the seeded generator, so corpora are independent of each other and of
/// how many there are.
pub fn generate_dataset(cfg: &DatasetConfig) -> Result<Vec<ListwiseInstance>> {
    use rayon::prelude::*;
    let per_corpus: Vec<Result<Vec<ListwiseInstance>>> = (0..cfg.n_corpora)
        .into_par_iter()
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(i as u64);
            let prefix = format!("d{i}-");
            let cs = CorpusSpec {
                n_chunks: cfg.n_chunks,
                chunk_len: cfg.chunk_len,
                block_size: cfg.block_size,
                alphabet: cfg.alphabet,
                seed: cfg.seed,
                id_prefix: prefix.clone(),
            };
            let corpus = generate_corpus_with(&cs, &mut rng)?;
            let queries =
                generate_queries(&corpus, &cfg.alphabet, cfg.query, cfg.queries_per_corpus, &prefix, &mut rng)?;
            build_instances(&corpus, &queries, cfg.build)
        })
        .collect();
    let mut out = Vec::with_capacity(cfg.n_corpora * cfg.queries_per_corpus);
    for r in per_corpus {
        out.extend(r?);
    }
    Ok(out)
}

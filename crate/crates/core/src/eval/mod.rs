//! Ranking metrics over labelled instances and inference-efficiency
//! measurement.

mod bench;

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ListwiseInstance;
use crate::error::{invalid, Result};
use crate::score::Reranker;

pub use bench::{bench, flops, percentile, timer_resolution, BenchOptions, EfficiencyReport, FlopCount};

/// How a multi-gold query's recall is counted.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RecallDefinition {
    /// Fraction of the gold chunks found in the top k.
    #[default]
    Coverage,
    /// 1 if any gold chunk is in the top k.
    AnyHit,
}

impl std::str::FromStr for RecallDefinition {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "coverage" => Ok(RecallDefinition::Coverage),
            "any-hit" => Ok(RecallDefinition::AnyHit),
            other => Err(invalid(format!("unknown recall definition {other:?} (expected coverage or any-hit)"))),
        }
    }
}

fn check(ranking: &[usize], gold: &[usize], k: usize) -> Result<usize> {
    if k == 0 {
        return Err(invalid("k must be at least 1"));
    }
    if gold.is_empty() {
        return Err(invalid("recall needs at least one gold index"));
    }
    if k > ranking.len() {
        tracing::warn!(k, candidates = ranking.len(), "k exceeds candidate count; using the full list");
    }
    Ok(k.min(ranking.len()))
}

/// `|gold ∩ top-k| / |gold|`.
pub fn recall_at_k(ranking: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    let k = check(ranking, gold, k)?;
    let top = &ranking[..k];
    Ok(gold.iter().filter(|g| top.contains(g)).count() as f64 / gold.len() as f64)
}

/// 1 if any gold index is in the top k, else 0.
pub fn hit_at_k(ranking: &[usize], gold: &[usize], k: usize) -> Result<f64> {
    let k = check(ranking, gold, k)?;
    Ok(if ranking[..k].iter().any(|r| gold.contains(r)) { 1.0 } else { 0.0 })
}

/// `1 / rank` of the first gold candidate, 0 when none is ranked.
pub fn reciprocal_rank(ranking: &[usize], gold: &[usize]) -> f64 {
    ranking.iter().position(|r| gold.contains(r)).map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Anything that orders an instance's candidates.
pub trait Ranker: Sync {
    fn rank(&self, instance: &ListwiseInstance) -> Result<Vec<usize>>;
}

impl Ranker for Reranker {
    fn rank(&self, instance: &ListwiseInstance) -> Result<Vec<usize>> {
        Ok(self.rerank(instance)?.ranking)
    }
}

impl<F> Ranker for F
where
    F: Fn(&ListwiseInstance) -> Result<Vec<usize>> + Sync,
{
    fn rank(&self, instance: &ListwiseInstance) -> Result<Vec<usize>> {
        self(instance)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingMetrics {
    pub recall_at: BTreeMap<usize, f64>,
    /// Macro average over datasets; equals `recall_at` for a single dataset.
    pub avg_at: BTreeMap<usize, f64>,
    pub mrr: f64,
    pub n_queries: usize,
    /// Fraction of queries with a gold chunk in the shortlist: the highest
    /// attainable recall.
    pub ceiling: f64,
    pub n_without_gold: usize,
    pub definition: RecallDefinition,
}

/// Sum that does not depend on the order of `values`.
fn stable_mean(mut values: Vec<f64>) -> f64 {
    let n = values.len() as f64;
    values.sort_by(f64::total_cmp);
    values.iter().sum::<f64>() / n
}

/// Macro-averages per-query recall at each `k`. Queries whose shortlist lacks
/// every gold chunk score 0.
pub fn evaluate(
    instances: &[ListwiseInstance],
    ranker: &dyn Ranker,
    ks: &[usize],
    definition: RecallDefinition,
) -> Result<RankingMetrics> {
    if instances.is_empty() {
        return Err(invalid("no instances to evaluate"));
    }
    if ks.is_empty() || ks.contains(&0) {
        return Err(invalid("recall cut-offs must be positive"));
    }
    let rows: Vec<(Vec<f64>, f64, bool)> = instances
        .par_iter()
        .map(|inst| {
            let gold = inst.positives();
            if gold.is_empty() {
                return Ok((vec![0.0; ks.len()], 0.0, false));
            }
            let order = ranker.rank(inst)?;
            let recalls = ks
                .iter()
                .map(|&k| match definition {
                    RecallDefinition::Coverage => recall_at_k(&order, &gold, k),
                    RecallDefinition::AnyHit => hit_at_k(&order, &gold, k),
                })
                .collect::<Result<_>>()?;
            Ok((recalls, reciprocal_rank(&order, &gold), true))
        })
        .collect::<Result<_>>()?;
    let recall_at: BTreeMap<usize, f64> =
        ks.iter().enumerate().map(|(i, &k)| (k, stable_mean(rows.iter().map(|r| r.0[i]).collect()))).collect();
    let n_with = rows.iter().filter(|r| r.2).count();
    Ok(RankingMetrics {
        avg_at: recall_at.clone(),
        recall_at,
        mrr: stable_mean(rows.iter().map(|r| r.1).collect()),
        n_queries: instances.len(),
        ceiling: n_with as f64 / instances.len() as f64,
        n_without_gold: instances.len() - n_with,
        definition,
    })
}

/// Per-dataset metrics plus the macro average across datasets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub datasets: Vec<(String, RankingMetrics)>,
    pub avg_at: BTreeMap<usize, f64>,
}

pub fn evaluate_datasets(
    sets: &[(String, Vec<ListwiseInstance>)],
    ranker: &dyn Ranker,
    ks: &[usize],
    definition: RecallDefinition,
) -> Result<EvalReport> {
    if sets.is_empty() {
        return Err(invalid("no datasets to evaluate"));
    }
    let mut datasets = Vec::with_capacity(sets.len());
    for (name, inst) in sets {
        datasets.push((name.clone(), evaluate(inst, ranker, ks, definition)?));
    }
    let avg_at: BTreeMap<usize, f64> = ks
        .iter()
        .map(|&k| (k, datasets.iter().map(|(_, m)| m.recall_at[&k]).sum::<f64>() / datasets.len() as f64))
        .collect();
    for (_, m) in &mut datasets {
        m.avg_at = avg_at.clone();
    }
    Ok(EvalReport { datasets, avg_at })
}

impl EvalReport {
    /// Aligned text table: one row per dataset, a recall column per `k`, and
    /// a final macro-average row.
    pub fn to_table(&self) -> String {
        let ks: Vec<usize> = self.avg_at.keys().copied().collect();
        let def = self.datasets.first().map_or(RecallDefinition::Coverage, |d| d.1.definition);
        let name_w = self.datasets.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(8);
        let mut s = String::new();
        write!(s, "{:<name_w$}", "dataset").unwrap();
        for k in &ks {
            write!(s, "  {:>8}", format!("R@{k}")).unwrap();
        }
        writeln!(s, "  {:>8}  {:>8}  {:>7}", "MRR", "ceiling", "queries").unwrap();
        for (name, m) in &self.datasets {
            write!(s, "{name:<name_w$}").unwrap();
            for k in &ks {
                write!(s, "  {:>8.4}", m.recall_at[k]).unwrap();
            }
            writeln!(s, "  {:>8.4}  {:>8.4}  {:>7}", m.mrr, m.ceiling, m.n_queries).unwrap();
        }
        write!(s, "{:<name_w$}", "avg").unwrap();
        for k in &ks {
            write!(s, "  {:>8.4}", self.avg_at[k]).unwrap();
        }
        writeln!(s).unwrap();
        writeln!(s, "recall definition: {}", serde_json::to_value(def).unwrap().as_str().unwrap_or("")).unwrap();
        s
    }

    pub fn to_csv(&self) -> String {
        let ks: Vec<usize> = self.avg_at.keys().copied().collect();
        let mut s = String::from("dataset");
        for k in &ks {
            write!(s, ",recall@{k}").unwrap();
        }
        s.push_str(",mrr,ceiling,n_queries,definition\n");
        for (name, m) in &self.datasets {
            s.push_str(name);
            for k in &ks {
                write!(s, ",{}", m.recall_at[k]).unwrap();
            }
            let def = serde_json::to_value(m.definition).unwrap();
            writeln!(s, ",{},{},{},{}", m.mrr, m.ceiling, m.n_queries, def.as_str().unwrap_or("")).unwrap();
        }
        s
    }
}

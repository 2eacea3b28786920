//! Acceptance suite: ten end-to-end criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so the verdict lines always reach the
//! output. Positional arguments select criteria by number, e.g.
//! `cargo test --test acceptance -- 1 5 9`.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use http_body_util::BodyExt;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tower::ServiceExt;

use qrrank_core::data::{generate_dataset, Alphabet, Chunk, DatasetConfig, ListwiseInstance};
use qrrank_core::eval::{bench, evaluate, BenchOptions, RecallDefinition};
use qrrank_core::gate;
use qrrank_core::model::{GateParams, HeadId, Init, ModelConfig, Real, Transformer};
use qrrank_core::probe::{probe_heads, qr_score, select_top_heads, HeadSet};
use qrrank_core::prompt::{PromptAssembler, PromptOptions, PromptTemplate, Tokenizer};
use qrrank_core::score::{
    aggregate_heads, max_min_norm, per_head_scores, ranking, Aggregation, HeadSelection, RerankOptions, Reranker,
};
use qrrank_core::train::{
    check_gradients, group_contrastive_loss, prepare_examples, GradCheckOptions, TrainConfig, TrainSelection, Trainer,
};
use qrrank_server::{rerank_request, router, AppState, PoolConfig, RerankRequest, RerankResponse};

const LOSS_TOL: f64 = 1e-9;
const GRAD_TOL: f64 = 1e-4;
const ORACLE_TOL: f64 = 1e-6;
const TRUNCATION_TOL: f64 = 1e-6;
const TRAIN_R1_GAIN: f64 = 0.30;
const TRAIN_R3_MIN: f64 = 0.90;
const GATE_SUM_TOL: f64 = 1e-6;
const FLOP_CUT_MIN: f64 = 0.40;
const LATENCY_CUT_MIN: f64 = 0.25;
const RANDOM_R10: f64 = 0.20;
const RANDOM_R10_TOL: f64 = 0.02;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

const SMALL: Alphabet = Alphabet { n_keys: 30, n_values: 8, n_fillers: 8 };

fn assembler(alphabet: &Alphabet, max_candidates: usize, max_seq: usize) -> PromptAssembler {
    let syms = alphabet.symbols();
    let tk = Tokenizer::build(&PromptTemplate::default(), syms.iter().map(String::as_str), max_candidates).unwrap();
    PromptAssembler::new(tk, PromptTemplate::default(), max_seq).unwrap()
}

fn model<T: Real>(asm: &PromptAssembler, layers: usize, heads: usize, d: usize, seed: u64) -> Transformer<T> {
    let cfg = ModelConfig::new(layers, heads, d, asm.tokenizer.len(), asm.max_seq_len);
    Transformer::new(cfg, Init::Random { seed }).unwrap()
}

fn words(r: &mut ChaCha8Rng, lo: usize, hi: usize) -> String {
    let len = r.random_range(lo..=hi);
    (0..len)
        .map(|_| match r.random_range(0..3) {
            0 => Alphabet::key(r.random_range(0..SMALL.n_keys)),
            1 => Alphabet::value(r.random_range(0..SMALL.n_values)),
            _ => Alphabet::filler(r.random_range(0..SMALL.n_fillers)),
        })
        .collect::<Vec<_>>()
        .join(" ")
}

/// `n` candidates over the small alphabet with between 1 and `max_gold`
/// positives and at least one negative.
fn random_instance(r: &mut ChaCha8Rng, id: usize, n: usize, max_gold: usize) -> ListwiseInstance {
    let query = words(r, 1, 4);
    let candidates: Vec<Chunk> =
        (0..n).map(|i| Chunk { id: format!("c{i}"), text: words(r, 1, 6), block_id: 0 }).collect();
    let n_gold = r.random_range(1..=max_gold.min(n - 1));
    let mut labels = vec![false; n];
    let idx: Vec<usize> = (0..n).collect();
    for &g in idx.choose_multiple(r, n_gold) {
        labels[g] = true;
    }
    ListwiseInstance {
        instance_id: format!("a{id}"),
        query,
        candidates,
        labels,
        memory_prefix: None,
        forced_gold: false,
    }
}

fn analytic_loss() -> Outcome {
    let mut r = rng(1);
    let mut worst: f64 = 0.0;
    for &level in &[0.0, 1.7, -3.25, 8.0, 123.5] {
        for (n_pos, want) in [(1usize, 50f64.ln()), (2, 49f64.ln())] {
            let mut labels = vec![false; 50];
            let idx: Vec<usize> = (0..50).collect();
            for &p in idx.choose_multiple(&mut r, n_pos) {
                labels[p] = true;
            }
            let out = group_contrastive_loss(&[level; 50], &labels).map_err(|e| e.to_string())?;
            let err = (out.loss - want).abs();
            worst = worst.max(err);
            ensure(err <= LOSS_TOL, || format!("{n_pos} positives at level {level}: loss {} vs {want}", out.loss))?;
        }
    }
    Ok(format!("max |loss - ln(50|49)| = {worst:.2e}"))
}

fn gradient_fidelity() -> Outcome {
    let asm = assembler(&SMALL, 8, 256);
    let heads = HeadSet::new(vec![HeadId::new(0, 1), HeadId::new(1, 0), HeadId::new(1, 1)], None).unwrap();
    let sel = TrainSelection::Fixed(heads);
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let m: Transformer<f64> = model(&asm, 2, 2, 16, seed);
        let inst = random_instance(&mut rng(seed + 500), 0, 6, 2);
        let layout = asm.assemble(&inst, PromptOptions::default()).map_err(|e| e.to_string())?;
        let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
        let rep = check_gradients(&m, &layout, &inst.labels, &sel, 8.0, Aggregation::Sum, &opts)
            .map_err(|e| e.to_string())?;
        worst = worst.max(rep.max_rel_error);
        ensure(rep.max_rel_error <= GRAD_TOL, || format!("seed {seed}: {rep:?}"))?;
    }
    Ok(format!("max relative error {worst:.2e} over 20 seeds"))
}

fn oracle_equivalence() -> Outcome {
    let asm = assembler(&SMALL, 10, 512);
    let m: Transformer<f32> = model(&asm, 2, 4, 32, 11);
    let heads: Vec<HeadId> = (0..2).flat_map(|l| (0..4).map(move |h| HeadId::new(l, h))).collect();
    let mut r = rng(3);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let inst = random_instance(&mut r, i, 2 + i % 9, 3);
        let layout = asm.assemble(&inst, PromptOptions::default()).map_err(|e| e.to_string())?;
        let q_rows = layout.query_positions();
        let cap = m.view().forward_with_attention(&layout.tokens, &q_rows, None).map_err(|e| e.to_string())?;
        let qr = qr_score(&cap, &layout, &inst.positives()).map_err(|e| e.to_string())?;
        let chunk = per_head_scores(&cap, &layout, layout.query_span.clone(), &heads, Aggregation::Sum)
            .map_err(|e| e.to_string())?;
        for &h in &heads {
            let a = cap.head(h).map_err(|e| e.to_string())?;
            let mut gold = 0.0f64;
            for (c, span) in layout.chunk_spans.iter().enumerate() {
                let mut total = 0.0f64;
                for row in 0..q_rows.len() {
                    for p in span.clone() {
                        total += a[[row, p]] as f64;
                    }
                }
                if inst.labels[c] {
                    gold += total;
                }
                let err = (chunk[&h][c] - total / q_rows.len() as f64).abs();
                worst = worst.max(err);
                ensure(err <= ORACLE_TOL, || format!("instance {i} head {h} chunk {c}: error {err:.2e}"))?;
            }
            let err = (qr[&h] - gold / q_rows.len() as f64).abs();
            worst = worst.max(err);
            ensure(err <= ORACLE_TOL, || format!("instance {i} head {h} QR score: error {err:.2e}"))?;
        }
    }
    Ok(format!("max deviation {worst:.2e} over 100 instances"))
}

fn truncation_invariance() -> Outcome {
    let asm = assembler(&SMALL, 10, 512);
    let full: Transformer<f32> = model(&asm, 4, 4, 32, 21);
    let mut r = rng(4);
    let mut worst: f64 = 0.0;
    for i in 0..50 {
        let k = r.random_range(0..3);
        let pool: Vec<HeadId> = (0..=k).flat_map(|l| (0..4).map(move |h| HeadId::new(l, h))).collect();
        let n_heads = r.random_range(1..=pool.len().min(6));
        let heads: Vec<HeadId> = pool.choose_multiple(&mut r, n_heads).copied().collect();
        let weights: Vec<f64> = (0..n_heads).map(|_| r.random_range(0.1..1.0)).collect();
        let hs = HeadSet::new(heads, Some(weights)).map_err(|e| e.to_string())?;
        let opts = RerankOptions { calibrate: i % 2 == 0, ..RerankOptions::default() };
        let mut cut = full.clone();
        cut.config.truncate_after_layer = Some(k);
        let a = Reranker::new(full.clone(), asm.clone(), HeadSelection::Fixed(hs.clone()), opts)
            .map_err(|e| e.to_string())?;
        let b = Reranker::new(cut, asm.clone(), HeadSelection::Fixed(hs), opts).map_err(|e| e.to_string())?;
        let inst = random_instance(&mut r, i, 3 + i % 8, 2);
        let sa = a.rerank(&inst).map_err(|e| e.to_string())?;
        let sb = b.rerank(&inst).map_err(|e| e.to_string())?;
        for (x, y) in sa.scores.iter().zip(&sb.scores) {
            worst = worst.max((x - y).abs());
        }
        ensure(worst <= TRUNCATION_TOL, || format!("instance {i} truncated after layer {k}: deviation {worst:.2e}"))?;
        ensure(sa.ranking == sb.ranking, || format!("instance {i}: rankings differ"))?;
    }
    Ok(format!("max deviation {worst:.2e} over 50 instances"))
}

fn ranking_invariances() -> Outcome {
    let mut r = rng(5);
    for i in 0..1000 {
        let n = r.random_range(2..=60);
        // Multiples of 1/16 in a narrow band: exact under shifts, frequent ties.
        let spread = r.random_range(1..=200);
        let scores: Vec<f64> = (0..n).map(|_| r.random_range(-spread..=spread) as f64 / 16.0).collect();
        let base = ranking(&scores);
        let shift = r.random_range(-1_000_000i64..=1_000_000) as f64 / 16.0;
        let shifted: Vec<f64> = scores.iter().map(|x| x + shift).collect();
        ensure(ranking(&shifted) == base, || format!("vector {i}: shift {shift} changed the ranking"))?;
        if scores.iter().all(|&x| x == scores[0]) {
            continue;
        }
        for _ in 0..3 {
            let scale = 10f64.powf(r.random_range(-3.0..3.0));
            let a = max_min_norm(&scores, scale).map_err(|e| e.to_string())?;
            let b = max_min_norm(&shifted, scale).map_err(|e| e.to_string())?;
            ensure(ranking(&a) == base, || format!("vector {i}: max-min at scale {scale} changed the ranking"))?;
            ensure(ranking(&b) == base, || format!("vector {i}: shift then max-min changed the ranking"))?;
        }
    }
    Ok("1000 vectors, shifts and 3 scales each".into())
}

fn training_efficacy() -> Outcome {
    let seed = 0;
    let alphabet = Alphabet { n_keys: 100, ..Alphabet::default() };
    let tpl = PromptTemplate::default();
    let syms = alphabet.symbols();
    let tk = Tokenizer::build(&tpl, syms.iter().map(String::as_str), 50).map_err(|e| e.to_string())?;
    let asm = PromptAssembler::new(tk.clone(), tpl, 1024).map_err(|e| e.to_string())?;
    let mut dc =
        DatasetConfig { seed, n_corpora: 20, queries_per_corpus: 100, chunk_len: 4, alphabet, ..Default::default() };
    dc.build.force_gold = true;
    let train = generate_dataset(&dc).map_err(|e| e.to_string())?;
    let held =
        generate_dataset(&DatasetConfig { seed: seed + 1000, n_corpora: 2, queries_per_corpus: 100, ..dc.clone() })
            .map_err(|e| e.to_string())?;
    ensure(train.len() == 2000 && held.len() == 200, || format!("{} train / {} held-out", train.len(), held.len()))?;
    ensure(held.iter().all(|i| i.candidates.len() == 50 && i.positives().len() == 1), || {
        "held-out instances must have 50 candidates and one gold".into()
    })?;

    let cfg = ModelConfig::new(4, 8, 128, tk.len(), 1024);
    let m: Transformer = Transformer::new(cfg, Init::Random { seed }).map_err(|e| e.to_string())?;
    let table = probe_heads(m.view(), &asm, &train[..200]).map_err(|e| e.to_string())?;
    let hs = select_top_heads(&table, 16).map_err(|e| e.to_string())?;
    let ks = [1, 3, 10];
    let before = Reranker::new(m.clone(), asm.clone(), HeadSelection::Fixed(hs.clone()), RerankOptions::default())
        .map_err(|e| e.to_string())?;
    let base = evaluate(&held, &before, &ks, RecallDefinition::Coverage).map_err(|e| e.to_string())?;

    let sel = TrainSelection::Fixed(hs.clone());
    let tc = TrainConfig { learning_rate: 1e-4, epochs: 5, seed, ..TrainConfig::default() };
    let examples = prepare_examples(&asm, &train, &sel).map_err(|e| e.to_string())?;
    let mut trainer = Trainer::new(m, sel, tc).map_err(|e| e.to_string())?;
    trainer.train(&examples, |_, _| Ok(())).map_err(|e| e.to_string())?;
    let after = Reranker::new(trainer.model, asm, HeadSelection::Fixed(hs), RerankOptions::default())
        .map_err(|e| e.to_string())?;
    let trained = evaluate(&held, &after, &ks, RecallDefinition::Coverage).map_err(|e| e.to_string())?;

    let (b1, t1, t3) = (base.recall_at[&1], trained.recall_at[&1], trained.recall_at[&3]);
    let detail = format!(
        "held-out R@1 {b1:.3} -> {t1:.3}, R@3 {:.3} -> {t3:.3}, R@10 {:.3} -> {:.3} (seed {seed})",
        base.recall_at[&3], base.recall_at[&10], trained.recall_at[&10]
    );
    ensure(t1 - b1 >= TRAIN_R1_GAIN && t3 >= TRAIN_R3_MIN, || detail.clone())?;
    Ok(detail)
}

fn gate_soundness() -> Outcome {
    let asm = assembler(&SMALL, 10, 512);
    let mut m: Transformer<f32> = model(&asm, 4, 8, 64, 31);
    m.gate = Some(GateParams::new(&m.config, 1, 3, 4, Some(7)).map_err(|e| e.to_string())?);
    let g = m.gate.clone().unwrap();
    let with_think = PromptOptions { with_think_query: true, ..PromptOptions::default() };
    let mut r = rng(7);
    let mut worst: f64 = 0.0;
    for i in 0..20 {
        let inst = random_instance(&mut r, i, 4 + i % 6, 2);
        let layout = asm.assemble(&inst, with_think).map_err(|e| e.to_string())?;
        let think: Vec<usize> = layout.think_query_span.clone().ok_or("missing think query")?.collect();
        let out = m
            .view()
            .forward(&layout.tokens, &layout.query_positions(), Some(&[]), &g.layers, &think)
            .map_err(|e| e.to_string())?;
        let hidden: Vec<_> = g.layers.iter().map(|l| out.hidden[l].view()).collect();
        let d = gate::decide(&g, &hidden).map_err(|e| e.to_string())?;
        for (s, sel) in d.scores.iter().zip(&d.selected) {
            worst = worst.max((s.scores.iter().sum::<f64>() - 1.0).abs());
            for row in s.row_probs.rows() {
                worst = worst.max((row.sum() - 1.0).abs());
            }
            worst = worst.max((sel.iter().map(|x| x.1).sum::<f64>() - 1.0).abs());
            let mut picked: Vec<usize> = sel.iter().map(|x| x.0).collect();
            picked.sort_unstable();
            picked.dedup();
            ensure(picked.len() == g.n_per_layer, || format!("instance {i}: {} heads selected", picked.len()))?;
        }
        ensure(worst <= GATE_SUM_TOL, || format!("instance {i}: distribution sum off by {worst:.2e}"))?;
    }

    let mut zero = m.clone();
    zero.gate = Some(g.zeros_like());
    let gated = Reranker::new(zero.clone(), asm.clone(), HeadSelection::Gated, RerankOptions::default())
        .map_err(|e| e.to_string())?;
    let uniform: Vec<HeadId> =
        g.layers.iter().flat_map(|&l| (0..g.n_per_layer).map(move |h| HeadId::new(l, h))).collect();
    let uniform = HeadSet::new(uniform.clone(), Some(vec![1.0 / g.n_per_layer as f64; uniform.len()]))
        .map_err(|e| e.to_string())?;
    for i in 0..20 {
        let inst = random_instance(&mut r, 100 + i, 4 + i % 6, 2);
        let first = gated.rerank(&inst).map_err(|e| e.to_string())?;
        let second = gated.rerank(&inst).map_err(|e| e.to_string())?;
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        ensure(bits(&first.scores) == bits(&second.scores), || format!("instance {i}: runs differ"))?;
        let layout = asm.assemble(&inst, with_think).map_err(|e| e.to_string())?;
        let cap = zero
            .view()
            .forward_with_attention(&layout.tokens, &layout.query_positions(), Some(uniform.heads()))
            .map_err(|e| e.to_string())?;
        let per = per_head_scores(&cap, &layout, layout.query_span.clone(), uniform.heads(), Aggregation::Sum)
            .map_err(|e| e.to_string())?;
        let want = max_min_norm(&aggregate_heads(&per, &uniform).map_err(|e| e.to_string())?, 8.0)
            .map_err(|e| e.to_string())?;
        ensure(bits(&first.scores) == bits(&want), || format!("instance {i}: zero gate differs from uniform top-n"))?;
    }
    Ok(format!("max sum deviation {worst:.2e}; zero gate bit-exact over 20 instances"))
}

fn efficiency_direction() -> Outcome {
    let alphabet = Alphabet::default();
    let asm = assembler(&alphabet, 50, 1024);
    let dc = DatasetConfig { seed: 8, n_corpora: 1, queries_per_corpus: 20, ..Default::default() };
    let queries = generate_dataset(&dc).map_err(|e| e.to_string())?;
    let full: Transformer<f32> = model(&asm, 4, 8, 128, 8);
    let keep = full.config.n_layers.div_ceil(2);
    let mut cut = full.clone();
    cut.config.truncate_after_layer = Some(keep - 1);
    let hs = HeadSet::new((0..8).map(|h| HeadId::new(keep - 1, h)).collect(), None).map_err(|e| e.to_string())?;
    let opts = BenchOptions { repetitions: 60, warmup: 5 };
    let mk =
        |m: Transformer<f32>| Reranker::new(m, asm.clone(), HeadSelection::Fixed(hs.clone()), RerankOptions::default());
    let a = bench(&mk(full).map_err(|e| e.to_string())?, &queries, opts).map_err(|e| e.to_string())?;
    let b = bench(&mk(cut).map_err(|e| e.to_string())?, &queries, opts).map_err(|e| e.to_string())?;
    let flop_cut = 1.0 - b.flops_per_query / a.flops_per_query;
    let lat_cut = 1.0 - b.latency_p50_ms / a.latency_p50_ms;
    let detail = format!(
        "{} queries, FLOPs -{:.1}%, P50 {:.2} ms -> {:.2} ms (-{:.1}%)",
        a.n_queries,
        100.0 * flop_cut,
        a.latency_p50_ms,
        b.latency_p50_ms,
        100.0 * lat_cut
    );
    ensure(a.n_queries == 20 && flop_cut >= FLOP_CUT_MIN && lat_cut >= LATENCY_CUT_MIN, || detail.clone())?;
    Ok(detail)
}

fn serving_equivalence() -> Outcome {
    let asm = assembler(&SMALL, 12, 512);
    let m: Transformer<f32> = model(&asm, 2, 4, 32, 9);
    let hs = HeadSet::new(vec![HeadId::new(1, 2), HeadId::new(0, 0), HeadId::new(1, 0)], Some(vec![0.5, 0.3, 0.2]))
        .map_err(|e| e.to_string())?;
    let rr = Reranker::new(m, asm, HeadSelection::Fixed(hs), RerankOptions::default()).map_err(|e| e.to_string())?;
    let state = AppState::new(rr, PoolConfig::default());
    let app = router(state.clone());
    let rt = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .map_err(|e| e.to_string())?;
    let mut r = rng(9);
    for i in 0..100 {
        let n = r.random_range(2..=12);
        let req = RerankRequest {
            query: words(&mut r, 1, 4),
            candidates: (0..n).map(|_| words(&mut r, 1, 6)).collect(),
            memory_prefix: None,
            top_k: if r.random_bool(0.5) { Some(r.random_range(1..=n)) } else { None },
            calibrate: [None, Some(false), Some(true)].choose(&mut r).copied().unwrap(),
        };
        let body = serde_json::to_string(&req).map_err(|e| e.to_string())?;
        let (status, bytes) = rt.block_on(async {
            let resp = app
                .clone()
                .oneshot(
                    Request::post("/rerank").header("content-type", "application/json").body(Body::from(body)).unwrap(),
                )
                .await
                .unwrap();
            (resp.status(), resp.into_body().collect().await.unwrap().to_bytes())
        });
        ensure(status == StatusCode::OK, || format!("request {i}: status {status}"))?;
        let got: RerankResponse = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        let want = rerank_request(state.reranker(), &req).map_err(|e| e.to_string())?;
        let same = got.scores.len() == want.scores.len()
            && got.scores.iter().zip(&want.scores).all(|(a, b)| a.to_bits() == b.to_bits());
        ensure(same, || format!("request {i}: scores differ from the library"))?;
        let k = req.top_k.unwrap_or(n);
        ensure(got.ranking == want.ranking[..k], || format!("request {i}: ranking differs"))?;
    }
    Ok("100 requests bit-identical".into())
}

fn random_ranker_recall() -> Outcome {
    let mut r = rng(10);
    let instances: Vec<ListwiseInstance> = (0..10_000)
        .map(|i| {
            let mut labels = vec![false; 50];
            labels[r.random_range(0..50)] = true;
            ListwiseInstance {
                instance_id: i.to_string(),
                query: "k0".into(),
                candidates: (0..50).map(|c| Chunk { id: format!("c{c}"), text: "k1".into(), block_id: 0 }).collect(),
                labels,
                memory_prefix: None,
                forced_gold: false,
            }
        })
        .collect();
    let random = |inst: &ListwiseInstance| -> qrrank_core::Result<Vec<usize>> {
        let mut order: Vec<usize> = (0..inst.candidates.len()).collect();
        order.shuffle(&mut rng(1_000_000 + inst.instance_id.parse::<u64>().unwrap()));
        Ok(order)
    };
    let m = evaluate(&instances, &random, &[10], RecallDefinition::Coverage).map_err(|e| e.to_string())?;
    let r10 = m.recall_at[&10];
    let detail = format!("Recall@10 {r10:.4} over 10000 trials");
    ensure((r10 - RANDOM_R10).abs() <= RANDOM_R10_TOL, || detail.clone())?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("analytic loss values", analytic_loss),
        ("gradient fidelity", gradient_fidelity),
        ("oracle equivalence", oracle_equivalence),
        ("truncation invariance", truncation_invariance),
        ("ranking invariances", ranking_invariances),
        ("training efficacy", training_efficacy),
        ("gate soundness", gate_soundness),
        ("efficiency direction", efficiency_direction),
        ("serving equivalence", serving_equivalence),
        ("random-ranker recall", random_ranker_recall),
    ];
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        let t0 = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = t0.elapsed().as_secs_f64();
        match outcome {
            Ok(d) => println!("PASS [{n:>2}] {name}: {d} ({secs:.1}s)"),
            Err(d) => {
                failed += 1;
                println!("FAIL [{n:>2}] {name}: {d} ({secs:.1}s)");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

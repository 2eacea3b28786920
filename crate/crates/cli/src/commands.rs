use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use qrrank_core::data::{generate_dataset, load_instances, save_instances, DatasetConfig, ListwiseInstance};
use qrrank_core::eval::{bench, evaluate_datasets, EfficiencyReport};
use qrrank_core::model::{load_checkpoint, save_checkpoint, Checkpoint, GateParams, Init, ModelConfig, Transformer};
use qrrank_core::probe::{probe_heads, select_layer_range, select_top_heads, HeadSet};
use qrrank_core::prompt::{PromptAssembler, PromptTemplate, Tokenizer};
use qrrank_core::score::{save_ranked, HeadSelection, RerankOptions, Reranker};
use qrrank_core::train::{prepare_examples, TrainConfig, TrainSelection, Trainer};
use qrrank_server::{AppState, PoolConfig};

use crate::config::{self, InitKind, ModelSpec, RunConfig};
use crate::{
    check_paths, BenchArgs, CliError, Command, EvalArgs, GenDataArgs, HeadArgs, InitArgs, ProbeArgs, RerankArgs,
    ScoringArgs, ServeArgs, TrainArgs, Truncation,
};

/// Checkpoint metadata key holding the prompt template as JSON.
pub const TEMPLATE_KEY: &str = "template";

const DEFAULT_BIND: &str = "127.0.0.1:8080";

pub(crate) fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::Init(a) => init(a),
        Command::GenData(a) => gen_data(a),
        Command::Probe(a) => probe(a),
        Command::Train(a) => train(a),
        Command::Rerank(a) => rerank(a),
        Command::Eval(a) => eval(a),
        Command::Bench(a) => bench_cmd(a),
        Command::Serve(a) => serve(a),
    }
}

pub fn template_of(ckpt: &Checkpoint) -> Result<PromptTemplate, CliError> {
    match ckpt.metadata.get(TEMPLATE_KEY) {
        Some(json) => Ok(serde_json::from_str(json)?),
        None => Ok(PromptTemplate::default()),
    }
}

/// Model and prompt assembler stored in a checkpoint.
pub fn load_model(path: &Path) -> Result<(Checkpoint, PromptAssembler), CliError> {
    let ckpt = load_checkpoint(path)?;
    let tokenizer = Tokenizer::from_vocab(ckpt.vocab.clone())?;
    let asm = PromptAssembler::new(tokenizer, template_of(&ckpt)?, ckpt.model.config.max_seq_len)?;
    Ok((ckpt, asm))
}

fn head_selection(heads: &HeadArgs) -> Result<HeadSelection, CliError> {
    match &heads.heads {
        Some(p) => Ok(HeadSelection::Fixed(HeadSet::load(p)?)),
        None => Ok(HeadSelection::Gated),
    }
}

fn run_config(path: Option<&Path>) -> Result<RunConfig, CliError> {
    path.map_or_else(|| Ok(RunConfig::default()), config::load)
}

fn scoring_options(args: &ScoringArgs, cfg: &RunConfig) -> RerankOptions {
    let mut o = cfg.scoring;
    if args.calibrate {
        o.calibrate = true;
    }
    if let Some(a) = args.aggregation {
        o.aggregation = a;
    }
    o
}

/// Reranker for a checkpoint, head choice and scoring overrides.
pub fn load_reranker(
    model: &Path,
    heads: &HeadArgs,
    options: RerankOptions,
    truncation: Option<Truncation>,
) -> Result<Reranker, CliError> {
    let (ckpt, asm) = load_model(model)?;
    let selection = head_selection(heads)?;
    let mut m = ckpt.model;
    if let Some(t) = truncation {
        let layer = match (t, &selection, &m.gate) {
            (Truncation::Layer(l), _, _) => l,
            (Truncation::Auto, HeadSelection::Fixed(hs), _) => hs.max_layer(),
            (Truncation::Auto, HeadSelection::Gated, Some(g)) => *g.layers.last().expect("gate has layers"),
            (Truncation::Auto, HeadSelection::Gated, None) => {
                return Err(CliError::usage("--truncate-after auto needs a head set or a gated model"))
            }
        };
        if layer >= m.config.n_layers {
            return Err(CliError::usage(format!(
                "--truncate-after {layer} is out of range for {} layers",
                m.config.n_layers
            )));
        }
        m.config.truncate_after_layer = Some(layer);
    }
    Ok(Reranker::new(m, asm, selection, options)?)
}

fn init(a: InitArgs) -> Result<(), CliError> {
    let inputs: Vec<&Path> = a.config.as_deref().into_iter().collect();
    check_paths(&inputs, &[&a.out], a.force)?;
    let mut model_spec: ModelSpec = match &a.config {
        Some(p) => config::load(p)?,
        None => ModelSpec::default(),
    };
    if let Some(s) = a.seed {
        model_spec.seed = s;
    }
    let symbols = model_spec.alphabet.symbols();
    let tokenizer =
        Tokenizer::build(&model_spec.template, symbols.iter().map(String::as_str), model_spec.max_candidates)?;
    let mut cfg = ModelConfig::new(
        model_spec.n_layers,
        model_spec.n_heads,
        model_spec.d_model,
        tokenizer.len(),
        model_spec.max_seq_len,
    );
    if let Some(ff) = model_spec.d_ff {
        cfg.d_ff = ff;
    }
    if let Some(b) = model_spec.rope_base {
        cfg.rope_base = b;
    }
    cfg.validate()?;
    PromptAssembler::new(tokenizer.clone(), model_spec.template.clone(), cfg.max_seq_len)?;
    let init = match model_spec.init {
        InitKind::Random => Init::Random { seed: model_spec.seed },
        InitKind::ZeroAttention => Init::ZeroAttention { seed: model_spec.seed },
    };
    let mut model = Transformer::new(cfg, init)?;
    if let Some(g) = &model_spec.gate {
        model.gate = Some(GateParams::new(&model.config, g.l_start, g.l_end, g.k_total, g.init_seed)?);
    }
    let mut metadata = BTreeMap::new();
    metadata.insert(TEMPLATE_KEY.to_string(), serde_json::to_string(&model_spec.template)?);
    let ckpt = Checkpoint { model, vocab: tokenizer.vocab().to_vec(), metadata };
    save_checkpoint(&ckpt, &a.out)?;
    tracing::info!(out = %a.out.display(), params = ckpt.model.params.n_params(), vocab = ckpt.vocab.len(), "model initialized");
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<(), CliError> {
    check_paths(&[&a.config], &[&a.out], a.force)?;
    let mut cfg: DatasetConfig = config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(n) = a.n_corpora {
        cfg.n_corpora = n;
    }
    if let Some(n) = a.queries_per_corpus {
        cfg.queries_per_corpus = n;
    }
    cfg.build.force_gold |= a.force_gold;
    cfg.build.use_memory |= a.memory;
    let instances = generate_dataset(&cfg)?;
    save_instances(&instances, &a.out)?;
    let with_gold = instances.iter().filter(|i| i.has_gold()).count();
    tracing::info!(out = %a.out.display(), instances = instances.len(), with_gold, "dataset written");
    Ok(())
}

fn parse_range(s: &str) -> Result<[usize; 2], CliError> {
    let bad = || CliError::usage(format!("--layer-range expects START:END, got {s:?}"));
    let (a, b) = s.split_once(':').ok_or_else(bad)?;
    Ok([a.trim().parse().map_err(|_| bad())?, b.trim().parse().map_err(|_| bad())?])
}

fn probe(a: ProbeArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.seed_set, &a.model];
    inputs.extend(a.config.as_deref());
    let mut outputs: Vec<&Path> = vec![&a.out];
    outputs.extend(a.scores_out.as_deref());
    check_paths(&inputs, &outputs, a.force)?;
    let cfg = run_config(a.config.as_deref())?;
    let top_k = a.top_k.or(cfg.probe.top_k).unwrap_or(16);
    let range = match &a.layer_range {
        Some(s) => Some(parse_range(s)?),
        None => cfg.probe.layer_range,
    };
    let (ckpt, asm) = load_model(&a.model)?;
    let seed_set = load_instances(&a.seed_set)?;
    let table = probe_heads(ckpt.model.view(), &asm, &seed_set)?;
    let heads = match range {
        Some([s, e]) => select_layer_range(&table, s, e, top_k)?,
        None => select_top_heads(&table, top_k)?,
    };
    heads.save(&a.out)?;
    if let Some(p) = &a.scores_out {
        table.save(p)?;
    }
    tracing::info!(out = %a.out.display(), heads = heads.len(), seeds = table.seed_count, id = %heads.id(), "head set written");
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.config, &a.data, &a.model];
    inputs.extend(a.heads.heads.as_deref());
    check_paths(&inputs, &[&a.out], a.force)?;
    let mut cfg: TrainConfig = config::load(&a.config)?;
    if let Some(v) = a.lr {
        cfg.learning_rate = v;
    }
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.max_steps {
        cfg.max_steps = Some(v);
    }
    if let Some(v) = a.grad_accum {
        cfg.grad_accum_steps = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.scope {
        cfg.trainable_scope = v;
    }
    if let Some(v) = a.checkpoint_every {
        cfg.checkpoint_every = Some(v);
    }
    cfg.validate()?;

    let (ckpt, asm) = load_model(&a.model)?;
    let selection = match head_selection(&a.heads)? {
        HeadSelection::Fixed(hs) => TrainSelection::Fixed(hs),
        HeadSelection::Gated => TrainSelection::Gated,
    };
    let all = load_instances(&a.data)?;
    let total = all.len();
    let data: Vec<ListwiseInstance> = all.into_iter().filter(ListwiseInstance::has_gold).collect();
    if data.len() < total {
        tracing::warn!(dropped = total - data.len(), kept = data.len(), "skipping instances without a gold candidate");
    }
    let examples = prepare_examples(&asm, &data, &selection)?;
    let mut trainer = Trainer::new(ckpt.model.clone(), selection.clone(), cfg.clone())?;

    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("train_config.json"), serde_json::to_string_pretty(&cfg)?)?;
    if let TrainSelection::Fixed(hs) = &selection {
        hs.save(a.out.join("heads.txt"))?;
    }
    let mut metrics = BufWriter::new(fs::File::create(a.out.join("metrics.jsonl"))?);
    let save = |model: &Transformer<f32>, name: &str, extra: &[(&str, String)]| -> qrrank_core::Result<PathBuf> {
        let mut metadata = ckpt.metadata.clone();
        for (k, v) in extra {
            metadata.insert(k.to_string(), v.clone());
        }
        let path = a.out.join(name);
        save_checkpoint(&Checkpoint { model: model.clone(), vocab: ckpt.vocab.clone(), metadata }, &path)?;
        Ok(path)
    };
    let every = cfg.checkpoint_every;
    let result = trainer.train(&examples, |m, model| {
        serde_json::to_writer(&mut metrics, m)?;
        metrics.write_all(b"\n")?;
        if m.step % 10 == 0 {
            tracing::info!(step = m.step, epoch = m.epoch, loss = m.loss, grad_norm = m.grad_norm, "train");
        }
        if every.is_some_and(|e| m.step % e == 0) {
            save(model, &format!("step-{:06}.ckpt", m.step), &[("step", m.step.to_string())])?;
        }
        Ok(())
    });
    metrics.flush()?;
    match result {
        Ok(summary) => {
            let path = save(&trainer.model, "final.ckpt", &[("step", summary.steps.to_string())])?;
            fs::write(a.out.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
            tracing::info!(
                out = %path.display(),
                steps = summary.steps,
                first_loss = summary.first_loss,
                last_loss = summary.last_loss,
                "training finished"
            );
            Ok(())
        }
        Err(e) => {
            if matches!(e.root(), qrrank_core::Error::NonFinite(_)) {
                let step = trainer.steps_done().to_string();
                let path = save(&trainer.model, "diagnostic.ckpt", &[("step", step), ("error", e.to_string())])?;
                tracing::error!(snapshot = %path.display(), "non-finite training state; snapshot saved");
            }
            Err(e.into())
        }
    }
}

fn rerank(a: RerankArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.model, &a.data];
    inputs.extend(a.heads.heads.as_deref());
    inputs.extend(a.scoring.config.as_deref());
    check_paths(&inputs, &[&a.out], a.force)?;
    let cfg = run_config(a.scoring.config.as_deref())?;
    let rr = load_reranker(&a.model, &a.heads, scoring_options(&a.scoring, &cfg), a.scoring.truncate_after)?;
    let data = load_instances(&a.data)?;
    let results = data
        .iter()
        .map(|i| rr.rerank(i).map(|sv| (i.instance_id.clone(), sv)))
        .collect::<qrrank_core::Result<Vec<_>>>()?;
    save_ranked(&results, &a.out)?;
    tracing::info!(out = %a.out.display(), instances = results.len(), "rankings written");
    Ok(())
}

fn dataset_arg(s: &str) -> (String, PathBuf) {
    match s.split_once('=') {
        Some((name, path)) if !name.is_empty() => (name.to_string(), PathBuf::from(path)),
        _ => {
            let p = PathBuf::from(s);
            let name = p.file_stem().map_or_else(|| s.to_string(), |n| n.to_string_lossy().into_owned());
            (name, p)
        }
    }
}

fn eval(a: EvalArgs) -> Result<(), CliError> {
    let sets: Vec<(String, PathBuf)> = a.data.iter().map(|s| dataset_arg(s)).collect();
    let mut inputs: Vec<&Path> = vec![&a.model];
    inputs.extend(sets.iter().map(|(_, p)| p.as_path()));
    inputs.extend(a.heads.heads.as_deref());
    inputs.extend(a.scoring.config.as_deref());
    let outputs: Vec<&Path> = a.out.iter().chain(&a.csv).map(PathBuf::as_path).collect();
    check_paths(&inputs, &outputs, a.force)?;
    let cfg = run_config(a.scoring.config.as_deref())?;
    let ks = if a.k.is_empty() { cfg.eval.k.clone() } else { a.k.clone() };
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::usage("--k needs positive cut-offs"));
    }
    let recall = a.recall.unwrap_or(cfg.eval.recall);
    let rr = load_reranker(&a.model, &a.heads, scoring_options(&a.scoring, &cfg), a.scoring.truncate_after)?;
    let loaded =
        sets.into_iter().map(|(n, p)| load_instances(&p).map(|d| (n, d))).collect::<qrrank_core::Result<Vec<_>>>()?;
    let report = evaluate_datasets(&loaded, &rr, &ks, recall)?;
    print!("{}", report.to_table());
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    if let Some(p) = &a.csv {
        fs::write(p, report.to_csv())?;
    }
    Ok(())
}

fn bench_cmd(a: BenchArgs) -> Result<(), CliError> {
    let mut inputs: Vec<&Path> = vec![&a.model, &a.data];
    inputs.extend(a.heads.heads.as_deref());
    inputs.extend(a.scoring.config.as_deref());
    let outputs: Vec<&Path> = a.out.iter().map(PathBuf::as_path).collect();
    check_paths(&inputs, &outputs, a.force)?;
    let cfg = run_config(a.scoring.config.as_deref())?;
    let mut opts = cfg.bench;
    if let Some(r) = a.repetitions {
        opts.repetitions = r;
    }
    if let Some(w) = a.warmup {
        opts.warmup = w;
    }
    if a.queries == 0 {
        return Err(CliError::usage("--queries must be positive"));
    }
    let rr = load_reranker(&a.model, &a.heads, scoring_options(&a.scoring, &cfg), a.scoring.truncate_after)?;
    let mut data = load_instances(&a.data)?;
    data.truncate(a.queries);
    let report = bench(&rr, &data, opts)?;
    let name = match rr.model.config.truncate_after_layer {
        Some(l) => format!("truncate-after-{l}"),
        None => "full".to_string(),
    };
    print!("{}", EfficiencyReport::table(&[(name, report.clone())]));
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<(), CliError> {
    let cfg = run_config(a.scoring.config.as_deref())?;
    let bind = a
        .bind
        .clone()
        .or_else(|| std::env::var("QRRANK_BIND").ok().filter(|s| !s.is_empty()))
        .or(cfg.serve.bind.clone())
        .unwrap_or_else(|| DEFAULT_BIND.to_string());
    let defaults = PoolConfig::default();
    let pool = PoolConfig {
        workers: a.workers.or(cfg.serve.workers).unwrap_or(defaults.workers),
        queue: a.queue.or(cfg.serve.queue).unwrap_or(defaults.queue),
    };
    if pool.workers == 0 {
        return Err(CliError::usage("--workers must be positive"));
    }
    let rr = load_reranker(&a.model, &a.heads, scoring_options(&a.scoring, &cfg), a.scoring.truncate_after)?;
    let runtime = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .max_blocking_threads(pool.workers)
        .enable_all()
        .build()?;
    runtime.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&bind).await?;
        let state = AppState::new(rr, pool);
        tracing::info!(
            addr = %listener.local_addr()?,
            model_id = state.reranker().model_id(),
            head_set_id = state.reranker().head_set_id(),
            "listening"
        );
        qrrank_server::serve(listener, state, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await?;
        tracing::info!("shut down");
        Ok(())
    })
}

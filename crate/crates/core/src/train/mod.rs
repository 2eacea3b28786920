//! QR training: optimizes the selected heads' ranking of the gold chunks with
//! the group contrastive loss, or trains the gated head-selection variant.

mod gradcheck;
mod loss;
mod objective;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::ListwiseInstance;
use crate::error::{invalid, Error, Result};
use crate::eval::recall_at_k;
use crate::model::{Params, Transformer};
use crate::prompt::{PromptAssembler, PromptLayout, PromptOptions};
use crate::score::{ranking, Aggregation, DEFAULT_SCALE};

pub use crate::gate::{gate_head_scores, gate_select};
pub use gradcheck::{check_gradients, GradCheckOptions, GradCheckReport};
pub use loss::{group_contrastive_loss, max_min_backward, LossOutput};
pub use objective::{loss_and_grad, Evaluation, TrainSelection};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainableScope {
    #[default]
    All,
    /// Only the query and key projection columns of the selected heads.
    SelectedHeadQk,
}

impl std::str::FromStr for TrainableScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(TrainableScope::All),
            "selected-head-qk" => Ok(TrainableScope::SelectedHeadQk),
            other => Err(invalid(format!("unknown trainable scope {other:?} (expected all or selected-head-qk)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub grad_accum_steps: usize,
    pub batch_size: usize,
    pub scale: f64,
    pub epochs: usize,
    /// Stop after this many optimizer steps.
    pub max_steps: Option<usize>,
    pub trainable_scope: TrainableScope,
    pub seed: u64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub aggregation: Aggregation,
    /// Recall cut-offs reported in step metrics.
    pub metric_k: Vec<usize>,
    pub shuffle: bool,
    /// Write a checkpoint every this many optimizer steps.
    pub checkpoint_every: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-5,
            grad_accum_steps: 4,
            batch_size: 1,
            scale: DEFAULT_SCALE,
            epochs: 2,
            max_steps: None,
            trainable_scope: TrainableScope::All,
            seed: 0,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            aggregation: Aggregation::Sum,
            metric_k: vec![1, 3],
            shuffle: true,
            checkpoint_every: None,
        }
    }
}

impl TrainConfig {
    /// A zero learning rate is accepted so that a run can record losses
    /// without moving any parameter.
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be a finite non-negative number");
        }
        if self.grad_accum_steps == 0 || self.batch_size == 0 || self.epochs == 0 {
            return bad("grad_accum_steps, batch_size and epochs must be positive");
        }
        if !(self.scale > 0.0 && self.scale.is_finite()) {
            return bad("scale must be positive");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0 {
            return bad("optimizer moments must lie in [0, 1) and eps must be positive");
        }
        if self.weight_decay < 0.0 {
            return bad("weight_decay must be non-negative");
        }
        if self.max_steps == Some(0) || self.checkpoint_every == Some(0) {
            return bad("max_steps and checkpoint_every must be positive when set");
        }
        if self.metric_k.contains(&0) {
            return bad("metric_k entries must be positive");
        }
        Ok(())
    }
}

/// Decoupled-weight-decay Adam over a list of flat tensors.
#[derive(Debug, Clone)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl AdamW {
    pub fn new(config: &TrainConfig) -> Self {
        AdamW {
            lr: config.learning_rate,
            beta1: config.beta1,
            beta2: config.beta2,
            eps: config.eps,
            weight_decay: config.weight_decay,
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// One update. Entries whose mask is `false` are left untouched: no
    /// gradient step, no decay, no moment update.
    pub fn step(&mut self, params: Vec<&mut [f32]>, grads: &[&[f32]], masks: Option<&[Vec<bool>]>) {
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t);
        let bc2 = 1.0 - self.beta2.powi(self.t);
        for (ti, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[ti], &mut self.v[ti]);
            let mask = masks.map(|ms| &ms[ti]);
            for i in 0..p.len() {
                if mask.is_some_and(|mk| !mk[i]) {
                    continue;
                }
                let gi = g[i] as f64;
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                let x = p[i] as f64;
                p[i] = (x - self.lr * (update + self.weight_decay * x)) as f32;
            }
        }
    }
}

/// A training instance with its prompt already assembled.
#[derive(Debug, Clone)]
pub struct Example {
    pub instance_id: String,
    pub layout: PromptLayout,
    pub labels: Vec<bool>,
}

/// Assembles every instance; instances the loss cannot use are an error.
pub fn prepare_examples(
    assembler: &PromptAssembler,
    instances: &[ListwiseInstance],
    selection: &TrainSelection,
) -> Result<Vec<Example>> {
    let opts = PromptOptions { with_null_query: false, with_think_query: matches!(selection, TrainSelection::Gated) };
    instances
        .iter()
        .map(|inst| {
            let run = || {
                let n_pos = inst.labels.iter().filter(|&&y| y).count();
                if n_pos == 0 || n_pos == inst.labels.len() {
                    return Err(Error::DegenerateInstance(format!(
                        "{n_pos} positives among {} candidates",
                        inst.labels.len()
                    )));
                }
                let layout = assembler.assemble(inst, opts)?;
                Ok(Example { instance_id: inst.instance_id.clone(), layout, labels: inst.labels.clone() })
            };
            run().map_err(|e: Error| e.for_instance(&inst.instance_id))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub epoch: usize,
    pub loss: f64,
    pub grad_norm: f64,
    #[serde(flatten)]
    pub recall: BTreeMap<String, f64>,
    pub instances: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub first_loss: f64,
    pub last_loss: f64,
    pub mean_loss_last_epoch: f64,
}

pub struct Trainer {
    pub model: Transformer<f32>,
    pub selection: TrainSelection,
    pub config: TrainConfig,
    opt: AdamW,
    gate_opt: AdamW,
    mask: Option<Vec<Vec<bool>>>,
    step: usize,
    epoch: usize,
}

impl Trainer {
    pub fn new(model: Transformer<f32>, selection: TrainSelection, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let heads: Vec<crate::model::HeadId> = match &selection {
            TrainSelection::Fixed(hs) => hs.heads().to_vec(),
            TrainSelection::Gated => {
                let g = model.gate.as_ref().ok_or_else(|| invalid("gated training needs a model with a gate"))?;
                g.layers
                    .iter()
                    .flat_map(|&l| (0..model.config.n_heads).map(move |h| crate::model::HeadId::new(l, h)))
                    .collect()
            }
        };
        let active = model.config.active_layers();
        for h in &heads {
            model.config.check_head(*h)?;
            if h.layer >= active {
                return Err(invalid(format!("head {h} lies above the executed layers")));
            }
        }
        let mask = match config.trainable_scope {
            TrainableScope::All => None,
            TrainableScope::SelectedHeadQk => Some(qk_mask(&model, &heads)),
        };
        Ok(Trainer {
            opt: AdamW::new(&config),
            gate_opt: AdamW::new(&config),
            model,
            selection,
            config,
            mask,
            step: 0,
            epoch: 0,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    /// One optimizer step over `micro_batches` (gradients averaged over
    /// instances within a micro-batch, then over micro-batches).
    pub fn train_step(&mut self, micro_batches: &[&[Example]]) -> Result<StepMetrics> {
        if micro_batches.is_empty() || micro_batches.iter().any(|b| b.is_empty()) {
            return Err(invalid("train step needs non-empty micro-batches"));
        }
        let cfg = &self.config;
        let mut grad: Option<Params<f32>> = None;
        let mut gate_grad: Option<Vec<ndarray::Array2<f32>>> = None;
        let mut loss_sum = 0.0;
        let mut recall: BTreeMap<String, f64> = cfg.metric_k.iter().map(|k| (format!("recall@{k}"), 0.0)).collect();
        let mut n_inst = 0;
        for batch in micro_batches {
            let evals: Vec<Evaluation<f32>> = batch
                .par_iter()
                .map(|ex| {
                    loss_and_grad(
                        &self.model,
                        &ex.layout,
                        &ex.labels,
                        &self.selection,
                        cfg.scale,
                        cfg.aggregation,
                        true,
                    )
                    .map_err(|e| e.for_instance(&ex.instance_id))
                })
                .collect::<Result<_>>()?;
            let w = 1.0 / (batch.len() * micro_batches.len()) as f32;
            for (ex, ev) in batch.iter().zip(evals) {
                if !ev.loss.is_finite() {
                    return Err(self.non_finite(&ex.instance_id, format!("loss is {}", ev.loss)));
                }
                loss_sum += ev.loss;
                n_inst += 1;
                let order = ranking(&ev.scores);
                let gold = ex.labels.iter().enumerate().filter(|(_, &y)| y).map(|(i, _)| i).collect::<Vec<_>>();
                for &k in &cfg.metric_k {
                    *recall.get_mut(&format!("recall@{k}")).expect("key") += recall_at_k(&order, &gold, k)?;
                }
                let pg = ev.params_grad.expect("requested");
                match &mut grad {
                    None => {
                        let mut g = pg;
                        g.scale(w);
                        grad = Some(g);
                    }
                    Some(acc) => acc.add_scaled(&pg, w),
                }
                if let Some(gg) = ev.gate_grad {
                    match &mut gate_grad {
                        None => gate_grad = Some(gg.into_iter().map(|g| g * w).collect()),
                        Some(acc) => acc.iter_mut().zip(gg).for_each(|(a, g)| a.scaled_add(w, &g)),
                    }
                }
            }
        }
        let mut grad = grad.expect("at least one instance");
        if let Some(mask) = &self.mask {
            for ((_, g), m) in grad.tensors_mut().into_iter().zip(mask) {
                g.iter_mut().zip(m).filter(|(_, &keep)| !keep).for_each(|(x, _)| *x = 0.0);
            }
        }
        let mut sq = grad.sq_norm();
        if let Some(gg) = &gate_grad {
            sq += gg.iter().flat_map(|g| g.iter()).map(|&x| (x as f64) * (x as f64)).sum::<f64>();
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(self.non_finite("batch", format!("gradient norm is {grad_norm}")));
        }

        let grads: Vec<&[f32]> = grad.tensors().into_iter().map(|(_, _, d)| d).collect();
        self.opt.step(
            self.model.params.tensors_mut().into_iter().map(|(_, t)| t).collect(),
            &grads,
            self.mask.as_deref(),
        );
        if let (Some(gg), Some(gate)) = (&gate_grad, self.model.gate.as_mut()) {
            let gs: Vec<&[f32]> = gg.iter().map(|g| g.as_slice().expect("standard layout")).collect();
            self.gate_opt.step(
                gate.weights.iter_mut().map(|w| w.as_slice_mut().expect("standard layout")).collect(),
                &gs,
                None,
            );
        }
        self.step += 1;
        let n = n_inst as f64;
        recall.values_mut().for_each(|r| *r /= n);
        Ok(StepMetrics { step: self.step, epoch: self.epoch, loss: loss_sum / n, grad_norm, recall, instances: n_inst })
    }

    fn non_finite(&self, at: &str, what: String) -> Error {
        Error::NonFinite(format!(
            "step {} (epoch {}), {at}: {what}; parameters left at their last finite state",
            self.step + 1,
            self.epoch
        ))
    }

    /// Runs the configured schedule. `on_step` sees every step's metrics and
    /// the updated model.
    pub fn train(
        &mut self,
        examples: &[Example],
        mut on_step: impl FnMut(&StepMetrics, &Transformer<f32>) -> Result<()>,
    ) -> Result<TrainSummary> {
        if examples.is_empty() {
            return Err(invalid("no training examples"));
        }
        let cfg = self.config.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut first_loss = None;
        let mut last_loss = f64::NAN;
        let mut epoch_losses = Vec::new();
        'outer: for epoch in 0..cfg.epochs {
            self.epoch = epoch;
            epoch_losses.clear();
            let mut order: Vec<usize> = (0..examples.len()).collect();
            if cfg.shuffle {
                order.shuffle(&mut rng);
            }
            let shuffled: Vec<Example> = order.iter().map(|&i| examples[i].clone()).collect();
            let micro: Vec<&[Example]> = shuffled.chunks(cfg.batch_size).collect();
            for group in micro.chunks(cfg.grad_accum_steps) {
                let m = self.train_step(group)?;
                first_loss.get_or_insert(m.loss);
                last_loss = m.loss;
                epoch_losses.push(m.loss);
                tracing::debug!(step = m.step, loss = m.loss, grad_norm = m.grad_norm, "train step");
                on_step(&m, &self.model)?;
                if cfg.max_steps.is_some_and(|s| self.step >= s) {
                    break 'outer;
                }
            }
        }
        let mean = epoch_losses.iter().sum::<f64>() / epoch_losses.len().max(1) as f64;
        Ok(TrainSummary {
            steps: self.step,
            first_loss: first_loss.unwrap_or(f64::NAN),
            last_loss,
            mean_loss_last_epoch: mean,
        })
    }
}

/// `true` exactly on the query/key projection columns of `heads`.
fn qk_mask(model: &Transformer<f32>, heads: &[crate::model::HeadId]) -> Vec<Vec<bool>> {
    let dh = model.config.d_head;
    model
        .params
        .tensors()
        .into_iter()
        .map(|(name, shape, data)| {
            let mut m = vec![false; data.len()];
            let parts: Vec<&str> = name.split('.').collect();
            if let ["layers", l, "wq" | "wk"] = parts.as_slice() {
                let l: usize = l.parse().expect("layer index");
                let cols = shape[1];
                for h in heads.iter().filter(|h| h.layer == l) {
                    for r in 0..shape[0] {
                        for c in h.head * dh..(h.head + 1) * dh {
                            m[r * cols + c] = true;
                        }
                    }
                }
            }
            m
        })
        .collect()
}

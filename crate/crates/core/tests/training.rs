mod common;

use qrrank_core::model::{GateParams, HeadId, Transformer};
use qrrank_core::probe::HeadSet;
use qrrank_core::prompt::PromptOptions;
use qrrank_core::score::{Aggregation, HeadSelection, RerankOptions, Reranker};
use qrrank_core::train::{
    check_gradients, prepare_examples, GradCheckOptions, TrainConfig, TrainSelection, TrainableScope, Trainer,
};

use common::*;

fn head_set() -> HeadSet {
    HeadSet::new(vec![HeadId::new(0, 1), HeadId::new(1, 0)], None).unwrap()
}

#[test]
fn fixed_head_gradients_match_finite_differences() {
    let asm = assembler(8, 256);
    for (seed, mode) in [(0, Aggregation::Sum), (1, Aggregation::Sum), (2, Aggregation::Max)] {
        let model: Transformer<f64> = model(&asm, 2, 2, 16, seed);
        let inst = random_instance(&mut rng(seed), 0, 6, 2);
        let layout = asm.assemble(&inst, PromptOptions::default()).unwrap();
        let sel = TrainSelection::Fixed(head_set());
        let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
        let r = check_gradients(&model, &layout, &inst.labels, &sel, 8.0, mode, &opts).unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed} {mode:?}: {r:?}");
        assert!(r.checked > 100);
    }
}

#[test]
fn gated_gradients_match_finite_differences() {
    let asm = assembler(8, 256);
    for seed in 0..3 {
        let mut model: Transformer<f64> = model(&asm, 2, 4, 16, seed);
        model.gate = Some(GateParams::new(&model.config, 0, 2, 4, Some(seed + 100)).unwrap());
        let inst = random_instance(&mut rng(seed + 7), 0, 5, 1);
        let layout = asm.assemble(&inst, PromptOptions { with_think_query: true, ..Default::default() }).unwrap();
        let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
        let r = check_gradients(&model, &layout, &inst.labels, &TrainSelection::Gated, 8.0, Aggregation::Sum, &opts)
            .unwrap();
        assert!(r.max_rel_error < 1e-4, "seed {seed}: {r:?}");
        assert!(r.worst.0.starts_with("gate.") || r.checked > 0);
    }
}

fn tiny_examples(n: usize, gated: bool) -> (qrrank_core::prompt::PromptAssembler, Vec<qrrank_core::train::Example>) {
    let asm = assembler(8, 256);
    let mut r = rng(42);
    let inst: Vec<_> = (0..n).map(|i| random_instance(&mut r, i, 6, 2)).collect();
    let sel = if gated { TrainSelection::Gated } else { TrainSelection::Fixed(head_set()) };
    let ex = prepare_examples(&asm, &inst, &sel).unwrap();
    (asm, ex)
}

#[test]
fn zero_learning_rate_leaves_parameters_untouched() {
    let (asm, ex) = tiny_examples(8, false);
    let model: Transformer<f32> = model(&asm, 2, 2, 16, 5);
    let cfg = TrainConfig { learning_rate: 0.0, epochs: 1, ..TrainConfig::default() };
    let mut t = Trainer::new(model.clone(), TrainSelection::Fixed(head_set()), cfg).unwrap();
    let summary = t.train(&ex, |_, _| Ok(())).unwrap();
    assert_eq!(summary.steps, 2);
    assert!(summary.first_loss.is_finite());
    for ((_, _, a), (_, _, b)) in t.model.params.tensors().iter().zip(model.params.tensors()) {
        assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

#[test]
fn selected_head_scope_freezes_everything_else() {
    let (asm, ex) = tiny_examples(8, false);
    let model: Transformer<f32> = model(&asm, 2, 2, 16, 5);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        epochs: 1,
        trainable_scope: TrainableScope::SelectedHeadQk,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model.clone(), TrainSelection::Fixed(head_set()), cfg).unwrap();
    t.train(&ex, |_, _| Ok(())).unwrap();
    let dh = model.config.d_head;
    let mut moved = 0;
    for ((name, shape, after), (_, _, before)) in t.model.params.tensors().iter().zip(model.params.tensors()) {
        let parts: Vec<&str> = name.split('.').collect();
        for (i, (a, b)) in after.iter().zip(before).enumerate() {
            let trainable = match parts.as_slice() {
                ["layers", l, "wq" | "wk"] => {
                    let col = i % shape[1];
                    head_set().heads().iter().any(|h| h.layer.to_string() == *l && col / dh == h.head)
                }
                _ => false,
            };
            if trainable {
                moved += usize::from(a.to_bits() != b.to_bits());
            } else {
                assert_eq!(a.to_bits(), b.to_bits(), "{name}[{i}] moved");
            }
        }
    }
    assert!(moved > 0);
}

#[test]
fn single_instance_is_fit() {
    let (asm, ex) = tiny_examples(1, false);
    let model: Transformer<f32> = model(&asm, 2, 2, 16, 8);
    let cfg = TrainConfig {
        learning_rate: 1e-2,
        grad_accum_steps: 1,
        epochs: 150,
        shuffle: false,
        weight_decay: 0.0,
        ..TrainConfig::default()
    };
    let mut t = Trainer::new(model, TrainSelection::Fixed(head_set()), cfg).unwrap();
    let s = t.train(&ex, |_, _| Ok(())).unwrap();
    assert!(s.last_loss < 0.1 * s.first_loss, "{s:?}");
    let rr = Reranker::new(t.model, asm.clone(), HeadSelection::Fixed(head_set()), RerankOptions::default()).unwrap();
    let inst = random_instance(&mut rng(42), 0, 6, 2);
    let ranking = rr.rerank(&inst).unwrap().ranking;
    let n_pos = inst.positives().len();
    assert!(ranking[..n_pos].iter().all(|&c| inst.labels[c]), "{ranking:?} {:?}", inst.labels);
}

#[test]
fn gated_training_updates_the_gate() {
    let (asm, ex) = tiny_examples(8, true);
    let mut model: Transformer<f32> = model(&asm, 2, 4, 16, 5);
    model.gate = Some(GateParams::new(&model.config, 0, 2, 4, Some(3)).unwrap());
    let cfg = TrainConfig { learning_rate: 1e-2, epochs: 1, ..TrainConfig::default() };
    let mut t = Trainer::new(model.clone(), TrainSelection::Gated, cfg).unwrap();
    t.train(&ex, |_, _| Ok(())).unwrap();
    let before = &model.gate.as_ref().unwrap().weights;
    let after = &t.model.gate.as_ref().unwrap().weights;
    assert!(before.iter().zip(after).any(|(a, b)| a != b));
}

#[test]
fn non_finite_parameters_are_reported() {
    let (asm, ex) = tiny_examples(4, false);
    let mut model: Transformer<f32> = model(&asm, 2, 2, 16, 5);
    model.params.layers[0].wq[[0, 0]] = f32::NAN;
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    let mut t = Trainer::new(model, TrainSelection::Fixed(head_set()), cfg).unwrap();
    let err = t.train(&ex, |_, _| Ok(())).unwrap_err();
    assert_eq!(err.category(), "numeric", "{err}");
}

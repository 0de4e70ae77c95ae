use super::*;
use crate::model::{Architecture, Variant};
use crate::workbench::synthetic::{gen_synthetic, SyntheticTaskSpec};

fn micro_model(seed: u64) -> CompositionModel {
    let mut arch = crate::model::tests::micro_arch(Variant::Full);
    arch.aggregation.dropout = 0.0;
    arch.interaction.dropout = 0.0;
    CompositionModel::new(&arch, 2, 2, seed).unwrap()
}

fn micro_split() -> Split {
    let x = Tensor::from_fn(&[4, 8], |i| ((i * 37 % 11) as f64 - 5.0) / 5.0);
    Split::new(x, vec![Pair::new(0, 0), Pair::new(0, 1), Pair::new(1, 0), Pair::new(1, 1)]).unwrap()
}

#[test]
fn lr_schedule_is_step_decay() {
    let cfg = TrainConfig::default();
    assert_eq!(cfg.lr_at(0), 5e-4);
    assert_eq!(cfg.lr_at(4), 5e-4);
    assert_eq!(cfg.lr_at(5), 2.5e-4);
    for e in 0..40 {
        assert!(cfg.lr_at(e + 1) <= cfg.lr_at(e));
    }
}

#[test]
fn zero_learning_rate_leaves_parameters() {
    let mut model = micro_model(0);
    let before = model.store.clone();
    let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
    let mut opt = Adam::new(&model.store, &cfg);
    let split = micro_split();
    let cands: Vec<Pair> = split.labels.clone();
    train_step(&mut model, &mut opt, &split, &[0, 1, 2, 3], &cands, 0.0, 0, 0).unwrap();
    for (id, p) in before.iter() {
        assert_eq!(&p.value, model.store.value(id));
    }
}

#[test]
fn frozen_parameters_never_move() {
    let mut model = micro_model(1);
    let checksum = model.store.frozen_checksum();
    let cfg = TrainConfig::default();
    let mut opt = Adam::new(&model.store, &cfg);
    let split = micro_split();
    let cands = split.labels.clone();
    for step in 0..5 {
        train_step(&mut model, &mut opt, &split, &[0, 1, 2, 3], &cands, 1e-2, 0, step).unwrap();
    }
    assert_eq!(checksum, model.store.frozen_checksum());
}

#[test]
fn overfits_one_micro_batch() {
    let mut model = micro_model(2);
    let cfg = TrainConfig::default();
    let mut opt = Adam::new(&model.store, &cfg);
    let split = micro_split();
    let cands = split.labels.clone();
    let mut last = f64::INFINITY;
    for step in 0..500 {
        last = train_step(&mut model, &mut opt, &split, &[0, 1, 2, 3], &cands, 1e-2, 0, step).unwrap().loss;
        if last < 0.05 {
            break;
        }
    }
    assert!(last < 0.05, "loss {last}");
}

#[test]
fn small_steps_decrease_the_loss() {
    for lr in [1e-3, 1e-4] {
        let mut model = micro_model(3);
        let split = micro_split();
        let cands = split.labels.clone();
        let loss_now = |m: &CompositionModel| {
            let mut tape = Tape::eval();
            let p = m.loss(&mut tape, VisualInput::Raw(&split.x), &split.labels, &cands).unwrap();
            tape.scalar(p.total)
        };
        let before = loss_now(&model);
        let cfg = TrainConfig { weight_decay: 0.0, ..Default::default() };
        let mut opt = Adam::new(&model.store, &cfg);
        train_step(&mut model, &mut opt, &split, &[0, 1, 2, 3], &cands, lr, 0, 0).unwrap();
        assert!(loss_now(&model) < before, "lr {lr}");
    }
}

#[test]
fn non_finite_loss_aborts_with_branch_losses() {
    let mut model = micro_model(4);
    let id = model.store.id("prompt.state_tokens").unwrap();
    model.store.get_mut(id).value.data_mut()[0] = f64::NAN;
    let cfg = TrainConfig::default();
    let mut opt = Adam::new(&model.store, &cfg);
    let split = micro_split();
    let cands = split.labels.clone();
    match train_step(&mut model, &mut opt, &split, &[0, 1], &cands, 1e-3, 0, 0) {
        Err(Error::NonFinite(m)) => assert!(m.contains("state") && m.contains("composition")),
        other => panic!("{other:?}"),
    }
}

#[test]
fn fit_is_deterministic_and_keeps_best_weights() {
    let spec = SyntheticTaskSpec { n_states: 3, n_objects: 3, samples_per_pair: 6, feature_dim: 8, unseen_ratio: 0.25, ..Default::default() };
    let ds = gen_synthetic(&spec).unwrap();
    let arch: Architecture = crate::model::tests::micro_arch(Variant::Full);
    let cfg = TrainConfig { epochs: 3, batch_size: 8, lr: 1e-2, ..Default::default() };
    let run = || {
        let mut m = CompositionModel::new(&arch, 3, 3, 5).unwrap();
        let r = fit(&mut m, &ds.train, &ds.val, &ds.space, &cfg, 5).unwrap();
        (m, r)
    };
    let (m1, r1) = run();
    let (_, r2) = run();
    assert_eq!(r1.history, r2.history);
    let rep = evaluate_split(&m1, &ds.val, &ds.space, cfg.beta, cfg.eval_batch).unwrap();
    assert_eq!(rep.curve.summary, r1.best_val);
    assert_eq!(r1.history[r1.best_epoch].val, r1.best_val);
}

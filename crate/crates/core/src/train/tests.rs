use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::data::{synth_dataset, SynthConfig};
use crate::frontend::{Mfcc, MfccConfig};
use crate::model::{LgBlockConfig, LgNetConfig};

fn param(name: &str, v: &[f64]) -> Param<f64> {
    Param { name: name.into(), group: ParamGroup::Head, value: Tensor::from_f64(&[v.len()], v) }
}

#[test]
fn sgd_worked_examples() {
    let mut p = vec![param("w", &[1.0])];
    let mut vel = vec![vec![0.0]];
    sgd_step(&mut p, &[Some(&[0.5][..])], &mut vel, 0.1, 0.0, 0.0).unwrap();
    assert!((p[0].value.data()[0] - 0.95).abs() < 1e-15);

    let mut p = vec![param("w", &[1.0])];
    let mut vel = vec![vec![0.0]];
    sgd_step(&mut p, &[Some(&[0.0][..])], &mut vel, 0.01, 0.0, 0.001).unwrap();
    assert!((p[0].value.data()[0] - 0.99999).abs() < 1e-15);

    let mut p = vec![param("w", &[0.0])];
    let mut vel = vec![vec![0.0]];
    sgd_step(&mut p, &[Some(&[1.0][..])], &mut vel, 1.0, 0.9, 0.0).unwrap();
    assert_eq!(p[0].value.data()[0], -1.0);
    sgd_step(&mut p, &[Some(&[1.0][..])], &mut vel, 1.0, 0.9, 0.0).unwrap();
    assert!((p[0].value.data()[0] + 2.9).abs() < 1e-15);
}

#[test]
fn sgd_rejects_non_finite_and_skips_frozen() {
    let mut p = vec![param("a", &[1.0]), param("b", &[2.0])];
    let mut vel = vec![vec![0.0], vec![0.0]];
    let err = sgd_step(&mut p, &[Some(&[1.0][..]), Some(&[f64::NAN][..])], &mut vel, 0.1, 0.9, 0.0).unwrap_err();
    assert_eq!(err, Error::NonFiniteGradient("b".into()));
    assert_eq!(p[0].value.data()[0], 1.0);
    sgd_step(&mut p, &[None, Some(&[1.0][..])], &mut vel, 0.1, 0.9, 0.5).unwrap();
    assert_eq!(p[0].value.data()[0], 1.0);
    assert_eq!(vel[0][0], 0.0);
}

fn walk(accs: &[f64]) -> Vec<Action> {
    let cfg = TrainingConfig::default();
    let mut s = Schedule::new(cfg.lr_init);
    accs.iter().map(|&a| s.step(a, &cfg)).collect()
}

#[test]
fn schedule_worked_examples() {
    assert_eq!(walk(&[0.5, 0.6, 0.7]), [Action::Continue; 3]);
    assert_eq!(walk(&[0.7, 0.7, 0.7, 0.7]), [Action::Continue, Action::Continue, Action::Continue, Action::DecayLr]);
    let w = walk(&[0.7; 11]);
    assert_eq!(w[10], Action::Stop);
    assert_eq!(w.iter().filter(|&&a| a == Action::Stop).count(), 1);
}

#[test]
fn lr_is_always_init_over_power_of_three() {
    let cfg = TrainingConfig::default();
    let mut s = Schedule::new(cfg.lr_init);
    let accs = [0.1, 0.2, 0.2, 0.2, 0.2, 0.3, 0.3, 0.1, 0.3, 0.3, 0.3, 0.3];
    let mut last = s.lr;
    for a in accs {
        s.step(a, &cfg);
        assert!(s.lr <= last);
        assert_eq!(s.lr, cfg.lr_init / libm::pow(3.0, s.decays as f64));
        last = s.lr;
    }
    assert!(s.decays >= 2);
}

#[test]
fn config_problems_are_all_reported() {
    let cfg = TrainingConfig { beta: 1.5, batch_size: 0, margin: -1.0, ..Default::default() };
    let p = cfg.problems();
    assert_eq!(p.len(), 3);
    assert!(p.contains(&"training.beta out of [0,1]".into()));
}

fn tiny_model_config(classes: usize) -> LgNetConfig {
    let mut cfg = LgNetConfig::from_blocks(vec![LgBlockConfig::new(40, 8, 2), LgBlockConfig::new(8, 8, 2)], classes);
    cfg.embedding_dim = 12;
    cfg
}

fn tiny_data(silence: bool) -> (FeatureSet, AnchorStore) {
    let synth = SynthConfig { num_classes: 3, samples_per_class: 10, unknown_words: 1, silence, seed: 5, ..Default::default() };
    let d = synth_dataset(&synth).unwrap();
    let mfcc = Mfcc::new(MfccConfig::default()).unwrap();
    let fs = FeatureSet::build(&d.split, |u| mfcc.compute(&d.audio[&u.id])).unwrap();
    (fs, d.anchors)
}

fn quick_cfg(mode: LossMode) -> TrainingConfig {
    TrainingConfig { batch_size: 8, loss_mode: mode, max_epochs: 3, stage2_max_epochs: 2, seed: 11, ..Default::default() }
}

fn run(mode: LossMode, beta: f64) -> (LgNet<f32>, Vec<EpochLog>) {
    let (data, anchors) = tiny_data(true);
    let mut model = LgNet::new(tiny_model_config(data.labels.len()), Some(768), 3).unwrap();
    let cfg = TrainingConfig { beta, ..quick_cfg(mode) };
    let mut logs = Vec::new();
    train(&mut model, &data, Some(&anchors), &cfg, &mut |l| logs.push(l.clone())).unwrap();
    (model, logs)
}

#[test]
fn runs_are_deterministic_and_finite() {
    let (m1, l1) = run(LossMode::CeTt, 0.5);
    let (m2, l2) = run(LossMode::CeTt, 0.5);
    assert_eq!(l1, l2);
    assert_eq!(m1.params(), m2.params());
    assert!(l1.iter().all(|l| l.loss.is_finite() && l.loss_ce.is_finite()));
    assert!(l1.iter().any(|l| l.stage == 2));
    assert!(l1.iter().filter(|l| l.stage == 1).all(|l| l.loss_tri.is_some()));
    assert!(m1.text_dim().is_none());
}

#[test]
fn speech_anchor_mode_runs() {
    let (_, logs) = run(LossMode::CeSt, 0.5);
    assert!(logs.iter().filter(|l| l.stage == 1).all(|l| l.loss_tri.unwrap().is_finite()));
}

#[test]
fn beta_zero_follows_the_ce_trajectory() {
    let (a, la) = run(LossMode::CeTt, 0.0);
    let (b, lb) = run(LossMode::Ce, 0.0);
    assert_eq!(la, lb);
    assert_eq!(a.params(), b.params());
}

#[test]
fn stage2_freezes_the_extractor() {
    let (data, anchors) = tiny_data(true);
    let mut model = LgNet::new(tiny_model_config(data.labels.len()), Some(768), 3).unwrap();
    let cfg = quick_cfg(LossMode::CeTt);
    let mut s1 = TrainState::new(1, &model, &cfg);
    train_stage1(&mut model, &mut s1, &data, Some(&anchors), &cfg, None, &mut |_| {}).unwrap();
    let before = model.clone();
    let mut s2 = begin_stage2(&mut model, &cfg);
    finetune_stage2(&mut model, &mut s2, &data, &TrainingConfig { stage2_max_epochs: 4, ..cfg }, None, &mut |_| {}).unwrap();
    for p in model.params() {
        let old = before.param(&p.name).unwrap();
        if p.group == ParamGroup::Extractor {
            assert_eq!(p.value, old.value, "{}", p.name);
        }
    }
    assert_eq!(model.buffers(), before.buffers());
    let delta: f32 = model
        .param("classifier.weight")
        .unwrap()
        .value
        .data()
        .iter()
        .zip(before.param("classifier.weight").unwrap().value.data())
        .map(|(a, b)| (a - b).abs())
        .sum();
    assert!(delta > 0.0);
}

#[test]
fn stage2_with_zero_epochs_is_identity() {
    let (data, _) = tiny_data(true);
    let mut model = LgNet::new(tiny_model_config(data.labels.len()), None, 3).unwrap();
    let before = model.clone();
    let cfg = TrainingConfig { stage2_max_epochs: 0, ..quick_cfg(LossMode::Ce) };
    let mut s2 = begin_stage2(&mut model, &cfg);
    finetune_stage2(&mut model, &mut s2, &data, &cfg, None, &mut |_| {}).unwrap();
    assert_eq!(model.params(), before.params());
}

#[test]
fn paused_run_resumes_exactly() {
    let (data, anchors) = tiny_data(false);
    let cfg = TrainingConfig { max_epochs: 4, early_stop_patience: 100, ..quick_cfg(LossMode::CeTt) };
    let fresh = LgNet::new(tiny_model_config(data.labels.len()), Some(768), 3).unwrap();

    let mut a = fresh.clone();
    let mut sa = TrainState::new(1, &a, &cfg);
    let mut la = Vec::new();
    train_stage1(&mut a, &mut sa, &data, Some(&anchors), &cfg, None, &mut |l| la.push(l.clone())).unwrap();

    let mut b = fresh;
    let mut sb = TrainState::new(1, &b, &cfg);
    let mut lb = Vec::new();
    let out = train_stage1(&mut b, &mut sb, &data, Some(&anchors), &cfg, Some(2), &mut |l| lb.push(l.clone())).unwrap();
    assert_eq!(out, Outcome::Paused);
    let (mut b2, mut sb2) = (b.clone(), sb.clone());
    train_stage1(&mut b2, &mut sb2, &data, Some(&anchors), &cfg, None, &mut |l| lb.push(l.clone())).unwrap();
    assert_eq!(la, lb);
    assert_eq!(a.params(), b2.params());
    assert_eq!(a.buffers(), b2.buffers());
}

#[test]
fn text_mode_requires_anchors() {
    let (data, _) = tiny_data(false);
    let mut model = LgNet::new(tiny_model_config(data.labels.len()), Some(768), 3).unwrap();
    let cfg = quick_cfg(LossMode::CeTt);
    let mut s = TrainState::new(1, &model, &cfg);
    assert!(matches!(train_stage1(&mut model, &mut s, &data, None, &cfg, None, &mut |_| {}), Err(Error::Config(_))));
    let small = AnchorStore::fallback(&["alpha"], 768, 0).unwrap();
    assert!(train_stage1(&mut model, &mut s, &data, Some(&small), &cfg, None, &mut |_| {}).is_err());
}

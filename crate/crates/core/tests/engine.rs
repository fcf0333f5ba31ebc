use mode_core::autodiff::Session;
use mode_core::engine::*;
use mode_core::metrics::bwt;
use mode_core::scenario::*;
use mode_core::{CounterRng, Error, Tensor};

fn small_config() -> ModelConfig {
    ModelConfig { input_dim: 8, dims: vec![16], ..ModelConfig::default() }
}

fn source(seed: u64, n: usize) -> Vec<Sample> {
    make_source(seed, n, 4, 8, 3.0).unwrap()
}

fn trained(seed: u64) -> ModelAssembly {
    let mut m = ModelAssembly::new(small_config(), seed).unwrap();
    let cfg = SourceTrainConfig { epochs: 8, ..Default::default() };
    m.train_source(&source(seed, 800), &cfg, seed).unwrap();
    m
}

fn sda_initialized(seed: u64, epochs: usize) -> (ModelAssembly, InitReport) {
    let mut m = trained(seed);
    let sda = make_sda(&source(seed + 7, 300), &default_sda_domains()).unwrap();
    let cfg = AdaptationConfig { epochs_init: epochs, seed, ..Default::default() };
    let report = m.init_phase(&cfg, InitData::Sda(DataHandle::new(sda))).unwrap();
    (m, report)
}

fn cds(seed: u64, per: usize, rounds: usize) -> Scenario {
    let pool = source(seed + 1000, per * 4);
    make_cds(&pool, &default_target_domains(), per, rounds).unwrap()
}

fn logits(m: &ModelAssembly, x: &Tensor, use_mode: bool) -> Tensor {
    let mut s = Session::inference(&m.store);
    let xv = s.constant(x.clone());
    let f = m.forward(&mut s, xv, 2, &mut CounterRng::new(1), true, use_mode).unwrap();
    s.value(f.logits).clone()
}

#[test]
fn source_training_learns_the_task() {
    let m = trained(1);
    assert!(m.source_accuracy(&source(99, 400)).unwrap() > 0.9);
    assert_eq!(m.stage, Stage::SourceTrained);
    assert!(m.store.iter().all(|(_, p)| !p.trainable));
}

#[test]
fn random_init_is_the_source_model() {
    let mut m = trained(2);
    let cfg = AdaptationConfig { init_mode: InitMode::Random, ..Default::default() };
    m.init_phase(&cfg, InitData::None).unwrap();
    let x = Tensor::randn(&[20, 8], 2.0, &mut CounterRng::new(5));
    assert_eq!(logits(&m, &x, true), logits(&m, &x, false));
}

#[test]
fn init_requires_a_trained_source_and_matching_stream() {
    let mut fresh = ModelAssembly::new(small_config(), 0).unwrap();
    let cfg = AdaptationConfig { init_mode: InitMode::Random, ..Default::default() };
    assert!(matches!(fresh.init_phase(&cfg, InitData::None), Err(Error::Contract(_))));

    let mut m = trained(3);
    let cfg = AdaptationConfig::default();
    assert!(matches!(m.init_phase(&cfg, InitData::None), Err(Error::Data(_))));
    let src = DataHandle::new(source(3, 50));
    assert!(matches!(m.init_phase(&cfg, InitData::Source(src)), Err(Error::Data(_))));
}

#[test]
fn init_revokes_data_access() {
    let mut m = trained(4);
    let handle = DataHandle::new(source(4, 100));
    let cfg = AdaptationConfig { init_mode: InitMode::SourceOnly, epochs_init: 1, ..Default::default() };
    m.init_phase(&cfg, InitData::Source(handle.clone())).unwrap();
    assert!(handle.is_revoked());
    assert!(matches!(handle.samples(), Err(Error::Contract(_))));
}

#[test]
fn single_domain_fine_tune_decreases_loss() {
    let mut m = trained(5);
    let shifted: Vec<Sample> = default_target_domains()[2..3]
        .iter()
        .flat_map(|spec| source(55, 200).into_iter().enumerate().map(move |(i, s)| Sample { x: spec.apply(&s.x, i as u64), ..s }))
        .collect();
    let cfg = AdaptationConfig {
        init_mode: InitMode::SourceOnly,
        lambda_m: 0.0,
        epochs_init: 5,
        lr_init: 1e-3,
        noise_init: false,
        seed: 5,
        ..Default::default()
    };
    let mut one = small_config();
    one.domains = 1;
    m.config.domains = 1;
    let _ = one;
    let report = m.init_phase(&cfg, InitData::Source(DataHandle::new(shifted))).unwrap();
    let l = &report.epoch_losses;
    assert_eq!(l.len(), 5);
    assert!(l.windows(2).all(|w| w[1] < w[0]), "{l:?}");
}

#[test]
fn sda_init_raises_synergy_and_trains_the_discriminator() {
    let mut m = ModelAssembly::new(ModelConfig::default(), 6).unwrap();
    let src = make_source(6, 2000, 4, 16, 3.0).unwrap();
    m.train_source(&src, &SourceTrainConfig::default(), 6).unwrap();
    let sda = make_sda(&src[..1000], &default_sda_domains()).unwrap();
    let cfg = AdaptationConfig { seed: 6, ..Default::default() };
    let report = m.init_phase(&cfg, InitData::Sda(DataHandle::new(sda))).unwrap();
    let syn = &report.synergy;
    assert_eq!(syn.len(), 11);
    assert!(syn.last().unwrap() > &syn[0], "{syn:?}");
    assert!(m.dd.is_frozen());
    let held_out = make_sda(&make_source(606, 400, 4, 16, 3.0).unwrap(), &default_sda_domains()).unwrap();
    let x = Tensor::from_rows(&held_out.iter().map(|s| s.x.clone()).collect::<Vec<_>>()).unwrap();
    let pred = m.dd.predict(&m.store, &x).unwrap();
    let agree = pred.iter().zip(&held_out).filter(|(p, s)| **p == s.domain).count();
    let rate = agree as f64 / held_out.len() as f64;
    assert!(rate >= 0.95, "agreement {rate}");
}

#[test]
fn tta_requires_initialization() {
    let m = trained(7);
    assert!(matches!(TtaEngine::new(m, AdaptationConfig::default()), Err(Error::Contract(_))));
}

#[test]
fn tta_updates_only_selected_mode_parameters() {
    let (m, _) = sda_initialized(8, 2);
    let cfg = AdaptationConfig { lr_tta: 1e-3, seed: 8, ..Default::default() };
    let mut e = TtaEngine::new(m, cfg).unwrap();
    let digest = e.model.frozen_digest();
    let sc = cds(8, 25, 1);
    for rec in &sc.round {
        let before = e.model.store.clone();
        let r = e.step(&[rec.x.as_slice()]).unwrap();
        for layer in e.model.mode_layers.iter().flatten() {
            for i in 0..layer.config.experts {
                let chosen = r.selected.contains(&(layer.index, i));
                for id in layer.expert_params(i) {
                    assert!(chosen || !r.touched.contains(&id));
                    if !chosen {
                        assert_eq!(e.model.store.get(id), before.get(id));
                    }
                }
            }
            for d in 0..layer.config.domains {
                for id in layer.router_params(d) {
                    if !r.domains.contains(&d) {
                        assert_eq!(e.model.store.get(id), before.get(id));
                    }
                }
            }
        }
        let frozen = e.model.frozen_params();
        assert!(r.touched.iter().all(|id| !frozen.contains(id)));
    }
    assert_eq!(e.model.frozen_digest(), digest);
}

#[test]
fn filtered_batches_leave_parameters_bit_identical() {
    let (m, _) = sda_initialized(9, 1);
    let cfg = AdaptationConfig { kappa: 1e-12, lr_tta: 1e-2, seed: 9, ..Default::default() };
    let mut e = TtaEngine::new(m, cfg).unwrap();
    let before = e.model.store.clone();
    let sc = cds(9, 10, 1);
    for rec in &sc.round {
        let r = e.step(&[rec.x.as_slice()]).unwrap();
        assert_eq!(r.active, 0);
        assert!(!r.updated);
    }
    assert_eq!(e.model.store, before);
}

#[test]
fn steps_are_deterministic() {
    let (m, _) = sda_initialized(10, 1);
    let cfg = AdaptationConfig { lr_tta: 1e-3, seed: 10, stochastic_restore_p: 0.01, ..Default::default() };
    let sc = cds(10, 10, 1);
    let run = || {
        let mut e = TtaEngine::new(m.clone(), cfg.clone()).unwrap();
        for rec in &sc.round {
            e.step(&[rec.x.as_slice()]).unwrap();
        }
        e
    };
    assert_eq!(run(), run());
}

#[test]
fn zero_learning_rate_matches_frozen_evaluation() {
    let (m, _) = sda_initialized(11, 1);
    let sc = cds(11, 30, 2);
    let frozen = TtaEngine::new(m.clone(), AdaptationConfig { method: Method::Frozen, seed: 11, ..Default::default() }).unwrap();
    let source_eval = frozen.evaluate(&sc.eval).unwrap();
    let mut e = TtaEngine::new(m, AdaptationConfig { lr_tta: 0.0, seed: 11, ..Default::default() }).unwrap();
    let r = run_ctta(&mut e, &sc, 2).unwrap();
    for row in &r.a {
        assert_eq!(row, &source_eval);
    }
    assert_eq!(bwt(&r.a, &r.a_tilde, 1).unwrap(), 0.0);
}

#[test]
fn evaluation_recounts_correct_predictions() {
    let (m, _) = sda_initialized(12, 1);
    let sc = cds(12, 40, 1);
    let e = TtaEngine::new(m, AdaptationConfig { method: Method::Frozen, ..Default::default() }).unwrap();
    let acc = e.evaluate(&sc.eval).unwrap();
    for (d, samples) in sc.eval.iter().enumerate() {
        let x = Tensor::from_rows(&samples.iter().map(|s| s.x.clone()).collect::<Vec<_>>()).unwrap();
        let routes = e.model.dd.predict(&e.model.store, &x).unwrap();
        let mut confusion = [[0usize; 4]; 4];
        for (i, s) in samples.iter().enumerate() {
            let mut sess = Session::inference(&e.model.store);
            let xv = sess.constant(Tensor::matrix(1, 8, s.x.clone()).unwrap());
            let f = e.model.forward(&mut sess, xv, routes[i], &mut CounterRng::new(0), false, true).unwrap();
            let p = sess.argmax_rows(f.logits).unwrap()[0];
            confusion[s.label][p] += 1;
        }
        let correct: usize = (0..4).map(|c| confusion[c][c]).sum();
        assert!((acc[d] - correct as f64 / samples.len() as f64).abs() < 1e-12);
    }
    assert!(matches!(e.evaluate(&[]), Err(Error::Contract(_))));
    assert!(matches!(e.evaluate(&[vec![]]), Err(Error::Contract(_))));
}

#[test]
fn runs_reproduce_and_nan_aborts() {
    let (m, _) = sda_initialized(13, 1);
    let sc = cds(13, 20, 2);
    let cfg = AdaptationConfig { lr_tta: 1e-3, seed: 13, ..Default::default() };
    let a = run_ctta(&mut TtaEngine::new(m.clone(), cfg.clone()).unwrap(), &sc, 2).unwrap();
    let b = run_ctta(&mut TtaEngine::new(m.clone(), cfg.clone()).unwrap(), &sc, 2).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.a.len(), 2);
    assert_eq!(a.param_count, m.mode_param_count());

    let mut e = TtaEngine::new(m, cfg).unwrap();
    let bad = vec![f64::NAN; 8];
    assert!(matches!(e.step(&[bad.as_slice()]), Err(Error::Numeric(_))));
}

#[test]
fn full_entropy_baseline_touches_only_the_backbone() {
    let (m, _) = sda_initialized(14, 1);
    let cfg = AdaptationConfig { method: Method::FullEntropy, lr_baseline: 1e-2, seed: 14, ..Default::default() };
    let mut e = TtaEngine::new(m, cfg).unwrap();
    let backbone = e.model.backbone_params();
    let head = e.model.store.digest(&e.model.head_params());
    let sc = cds(14, 5, 1);
    for rec in &sc.round {
        let r = e.step(&[rec.x.as_slice()]).unwrap();
        assert!(r.touched.iter().all(|id| backbone.contains(id)));
        assert!(r.selected.is_empty());
    }
    assert_eq!(e.model.store.digest(&e.model.head_params()), head);
}

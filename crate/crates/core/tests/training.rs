use std::collections::BTreeMap;

use physio_recon::autodiff::Tape;
use physio_recon::dataset::{load_manifest, load_scan, PrepSettings, Scan};
use physio_recon::evaluation::pearson_r;
use physio_recon::models::{
    AttentionConfig, ModelConfig, ModelParams, Seq2OneConfig, Seq2SeqConfig,
};
use physio_recon::synth::{generate_dataset, SynthConfig};
use physio_recon::training::{
    param_hash, run_strategy, train_model, write_epoch_log, Adam, Checkpoint, Cohort, EarlyStop,
    Plateau, Provenance, StopDecision, StrategyKind, StrategySpec, Task, TrainConfig,
};
use physio_recon::{Error, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn one_param(value: f64) -> (ModelConfig, ModelParams<f64>) {
    // Smallest real model; only `head.bias` is touched below.
    let cfg = tiny_seq2one(2);
    let params = ModelParams::<f64>::init(&cfg, 0).unwrap();
    let mut tensors = params.into_tensors();
    tensors.insert(
        "head.bias".into(),
        Tensor::new(vec![1], vec![value]).unwrap(),
    );
    let params = ModelParams::from_tensors(&cfg, tensors).unwrap();
    (cfg, params)
}

fn grads_for(
    params: &ModelParams<f64>,
    f: impl Fn(&str, usize) -> f64,
) -> BTreeMap<String, Vec<f64>> {
    params
        .iter()
        .map(|(n, t)| (n.to_string(), (0..t.numel()).map(|i| f(n, i)).collect()))
        .collect()
}

#[test]
fn adam_unit_step_matches_hand_values() {
    let (_, mut params) = one_param(0.0);
    let before = params.clone();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let grads = grads_for(&params, |n, _| if n == "head.bias" { 1.0 } else { 0.0 });
    adam.step(&mut params, &grads, 1e-3).unwrap();
    assert_eq!(adam.t, 1);
    assert!((adam.m["head.bias"][0] - 0.1).abs() < 1e-15);
    assert!((adam.v["head.bias"][0] - 0.001).abs() < 1e-15);
    let theta = params.get("head.bias").unwrap().data()[0];
    assert_eq!(theta, -1e-3 / (1.0 + 1e-8));
    assert!((theta - -9.99999990e-4).abs() < 1e-12);
    // Zero-gradient entries stay where they were.
    for (name, t) in before.iter() {
        if name != "head.bias" {
            assert_eq!(t.data(), params.get(name).unwrap().data(), "{name}");
        }
    }
}

#[test]
fn adam_zero_gradient_and_zero_rate() {
    let (_, mut params) = one_param(0.25);
    let before = params.clone();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    adam.step(&mut params, &grads_for(&before, |_, _| 0.0), 1e-3)
        .unwrap();
    assert_eq!(adam.t, 1);
    assert_eq!(params, before);

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let noisy: BTreeMap<String, Vec<f64>> = before
        .iter()
        .map(|(n, t)| {
            (
                n.to_string(),
                (0..t.numel())
                    .map(|_| rng.random_range(-3.0..3.0))
                    .collect(),
            )
        })
        .collect();
    for _ in 0..3 {
        adam.step(&mut params, &noisy, 0.0).unwrap();
    }
    for (name, t) in before.iter() {
        let a: Vec<u64> = t.data().iter().map(|v| v.to_bits()).collect();
        let b: Vec<u64> = params
            .get(name)
            .unwrap()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect();
        assert_eq!(a, b, "{name}");
    }
}

#[test]
fn adam_rejects_non_finite_gradient_without_side_effects() {
    let (_, mut params) = one_param(0.0);
    let before = params.clone();
    let mut adam = Adam::new(0.9, 0.999, 1e-8);
    let grads = grads_for(&params, |n, i| {
        if n == "embed.weight" && i == 3 {
            f64::NAN
        } else {
            1.0
        }
    });
    let err = adam.step(&mut params, &grads, 1e-3).unwrap_err();
    assert!(
        err.is_numeric() && err.to_string().contains("embed.weight"),
        "{err}"
    );
    assert_eq!(params, before);
    assert_eq!(adam.t, 0);
}

#[test]
fn adam_is_deterministic() {
    let run = || {
        let (_, mut params) = one_param(0.0);
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        for k in 0..5 {
            let g = grads_for(&params, |_, i| ((i + k) as f64 * 0.37).sin());
            adam.step(&mut params, &g, 1e-2).unwrap();
        }
        param_hash(&params)
    };
    assert_eq!(run(), run());
}

#[test]
fn plateau_schedule() {
    let mut p = Plateau::new(1e-4, 0.5, 2, 1e-6);
    for l in [1.0, 0.9, 0.8] {
        assert_eq!(p.step(l), 1e-4);
    }

    let mut p = Plateau::new(1e-4, 0.5, 2, 1e-6);
    let lrs: Vec<f64> = [1.0, 1.0, 1.0, 1.0].iter().map(|&l| p.step(l)).collect();
    assert_eq!(lrs, [1e-4, 1e-4, 1e-4, 5e-5]);

    // An improvement after a decay resets the counter.
    assert_eq!(p.step(0.5), 5e-5);
    assert_eq!(p.step(0.5), 5e-5);
    assert_eq!(p.step(0.5), 5e-5);
    assert_eq!(p.step(0.5), 2.5e-5);

    // Changes within the threshold do not count as improvements.
    let mut p = Plateau::new(1.0, 0.5, 2, 1e-6);
    let lrs: Vec<f64> = [1.0, 1.0 - 5e-7, 1.0 - 9e-7, 1.0 - 9.9e-7]
        .iter()
        .map(|&l| p.step(l))
        .collect();
    assert_eq!(lrs, [1.0, 1.0, 1.0, 0.5]);
}

#[test]
fn early_stopping_rules() {
    let mut es = EarlyStop::new(5, 1e-6);
    for e in 1..=10 {
        assert_eq!(es.update(e, 1.0 - 0.05 * e as f64), StopDecision::Continue);
    }
    let mut es = EarlyStop::new(5, 1e-6);
    assert_eq!(es.update(1, 0.7), StopDecision::Continue);

    let mut es = EarlyStop::new(5, 1e-6);
    let losses = [1.0, 0.9, 0.95, 0.9, 1.0, 0.91, 0.92];
    let decisions: Vec<StopDecision> = losses
        .iter()
        .enumerate()
        .map(|(i, &l)| es.update(i + 1, l))
        .collect();
    assert!(decisions[..6].iter().all(|d| *d == StopDecision::Continue));
    assert_eq!(decisions[6], StopDecision::Stop);
    assert_eq!(es.best_epoch(), Some(2));
    assert_eq!(es.best_loss(), 0.9);
}

fn tape_loss(pred: &[f64], target: &[f64]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(vec![pred.len()], pred.to_vec()).unwrap();
    let l = tape.pearson_loss(p, target).unwrap();
    tape.value(l)[0]
}

#[test]
fn loss_hand_instances() {
    assert!((tape_loss(&[1.0, 2.0, 3.0], &[1.0, 3.0, 2.0]) - 0.5).abs() < 1e-15);
    let t = [0.3, -1.2, 2.5, 0.7];
    assert!(tape_loss(&t, &t).abs() < 1e-15);
    let neg: Vec<f64> = t.iter().map(|v| -v).collect();
    assert!((tape_loss(&neg, &t) - 2.0).abs() < 1e-15);
}

#[test]
fn loss_equals_one_minus_eval_r() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for _ in 0..100 {
        let n = rng.random_range(3..200);
        let a: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let b: Vec<f64> = (0..n).map(|_| rng.random_range(-5.0..5.0)).collect();
        let loss = tape_loss(&a, &b);
        let r = pearson_r(&a, &b).unwrap();
        assert!((loss - (1.0 - r)).abs() < 1e-9, "{loss} vs {r}");
    }
}

proptest! {
    #[test]
    fn loss_is_affine_invariant_in_target(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60),
        a in 0.01f64..100.0,
        b in -50.0f64..50.0,
    ) {
        let pred: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let target: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let sd = |x: &[f64]| {
            let m = x.iter().sum::<f64>() / x.len() as f64;
            (x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / x.len() as f64).sqrt()
        };
        prop_assume!(sd(&pred) > 1e-3 && sd(&target) > 1e-3);
        let moved: Vec<f64> = target.iter().map(|t| a * t + b).collect();
        prop_assert!((tape_loss(&pred, &target) - tape_loss(&pred, &moved)).abs() < 1e-10);
    }

    #[test]
    fn eval_r_is_symmetric_and_affine_invariant(
        pairs in prop::collection::vec((-10.0f64..10.0, -10.0f64..10.0), 3..60),
        a in 0.01f64..100.0,
        b in -50.0f64..50.0,
    ) {
        let x: Vec<f64> = pairs.iter().map(|p| p.0).collect();
        let y: Vec<f64> = pairs.iter().map(|p| p.1).collect();
        let r = pearson_r(&x, &y).unwrap();
        prop_assume!(!r.is_nan());
        prop_assert!((r - pearson_r(&y, &x).unwrap()).abs() < 1e-12);
        let moved: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        prop_assert!((r - pearson_r(&moved, &y).unwrap()).abs() < 1e-12);
    }
}

fn attention(d: usize) -> AttentionConfig {
    AttentionConfig {
        n_heads: 2,
        head_dim: 4,
        dropout: 0.1,
        model_dim: d,
    }
}

fn tiny_seq2one(n_roi: usize) -> ModelConfig {
    ModelConfig::Seq2one(Seq2OneConfig {
        window: 8,
        attention: attention(8),
        n_roi,
        ..Seq2OneConfig::default()
    })
}

fn tiny_seq2seq(n_roi: usize) -> ModelConfig {
    ModelConfig::Seq2seq(Seq2SeqConfig {
        block_windows: vec![4, 8],
        attention: attention(8),
        feature_dim: 8,
        n_roi,
        ..Seq2SeqConfig::default()
    })
}

fn synth_scans(seed: u64, n_subjects: usize, extra: impl FnOnce(&mut SynthConfig)) -> Vec<Scan> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = SynthConfig {
        n_subjects,
        n_roi: 8,
        len: 60,
        snr: 5.0,
        seed,
        ..SynthConfig::default()
    };
    extra(&mut cfg);
    generate_dataset(&cfg, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    m.scans
        .iter()
        .map(|e| load_scan(e, &m, &PrepSettings::default()).unwrap())
        .collect()
}

fn quick_cfg() -> TrainConfig {
    TrainConfig {
        lr_init: 3e-3,
        batch_size: 4,
        max_epochs: 8,
        precision: physio_recon::training::Precision::F64,
        ..TrainConfig::default()
    }
}

#[test]
fn zero_epochs_returns_initial_model() {
    let scans = synth_scans(1, 6, |_| {});
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = tiny_seq2one(8);
    let init = ModelParams::<f64>::init(&model, 3).unwrap();
    let cfg = TrainConfig {
        max_epochs: 0,
        ..quick_cfg()
    };
    let out = train_model(
        &model,
        init.clone(),
        &refs[..4],
        &refs[4..],
        &cfg,
        cfg.lr_init,
    )
    .unwrap();
    assert_eq!(out.epochs_run, 0);
    assert_eq!(out.params, init);
    assert!(out.log.is_empty() && out.initial_val_loss.is_none());
    assert!(train_model(&model, init, &refs[..4], &[], &cfg, 1e-3).is_err());
}

#[test]
fn training_learns_and_is_deterministic() {
    let scans = synth_scans(2, 12, |c| {
        c.n_roi = 64;
        c.len = 271;
    });
    let refs: Vec<&Scan> = scans.iter().collect();
    for mut model in [tiny_seq2one(8), tiny_seq2seq(8)] {
        model.set_io(64, 2);
        let cfg = TrainConfig {
            task: Task::Joint,
            ..quick_cfg()
        };
        let run = || {
            let init = ModelParams::<f64>::init(&model, 4).unwrap();
            train_model(&model, init, &refs[..9], &refs[9..], &cfg, cfg.lr_init).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(
            param_hash(&a.params),
            param_hash(&b.params),
            "{}",
            model.name()
        );
        assert_eq!(a.log, b.log);

        let initial = a.initial_val_loss.unwrap();
        let best = a.best_val_loss.unwrap();
        assert!(
            initial - best >= 0.2,
            "{}: {initial} -> {best}",
            model.name()
        );
        assert!(a.log.windows(2).all(|w| w[1].lr <= w[0].lr));
        let best_row = a
            .log
            .iter()
            .find(|r| Some(r.epoch) == a.best_epoch)
            .unwrap();
        assert_eq!(best_row.val_loss, best);
        assert!(a.log.iter().all(|r| r.val_loss >= best));
    }
}

#[test]
fn epoch_log_csv_layout() {
    let scans = synth_scans(2, 6, |_| {});
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = tiny_seq2one(8);
    let cfg = TrainConfig {
        max_epochs: 2,
        ..quick_cfg()
    };
    let out = train_model(
        &model,
        ModelParams::<f32>::init(&model, 0).unwrap(),
        &refs[..4],
        &refs[4..],
        &cfg,
        1e-3,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("log.csv");
    write_epoch_log(&path, &out.log).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,train_loss,val_loss,lr");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("1,"));
}

#[test]
fn non_finite_input_reports_location() {
    let mut scans = synth_scans(3, 6, |_| {});
    scans[0].roi[5] = f64::NAN;
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = tiny_seq2one(8);
    let cfg = TrainConfig {
        batch_size: 8,
        ..quick_cfg()
    };
    let err = train_model(
        &model,
        ModelParams::<f64>::init(&model, 0).unwrap(),
        &refs[..4],
        &refs[4..],
        &cfg,
        1e-3,
    )
    .unwrap_err();
    assert!(err.is_numeric(), "{err}");
    assert!(err.to_string().contains("epoch 1, batch 1"), "{err}");
}

fn provenance() -> Provenance {
    Provenance {
        strategy: "scratch".into(),
        fold: Some(2),
        task: Task::Joint,
        seed: 9,
        epochs_run: 4,
        best_epoch: Some(3),
        initial_val_loss: Some(0.9),
        final_val_loss: Some(0.1),
        initial_lr: 1e-4,
        init_param_hash: "abc".into(),
        training_data_hash: "def".into(),
        prep_settings_hash: PrepSettings::default().hash(),
        created_unix: None,
    }
}

#[test]
fn checkpoint_round_trips_bitwise() {
    for model in [tiny_seq2one(5), tiny_seq2seq(5)] {
        let params = ModelParams::<f32>::init(&model, 11).unwrap();
        let mut adam = Adam::new(0.9, 0.999, 1e-8);
        let mut p = params.clone();
        let g: BTreeMap<String, Vec<f32>> = p
            .iter()
            .map(|(n, t)| {
                (
                    n.to_string(),
                    (0..t.numel()).map(|i| (i as f32 * 0.1).cos()).collect(),
                )
            })
            .collect();
        adam.step(&mut p, &g, 1e-3).unwrap();
        let ckpt = Checkpoint {
            model: model.clone(),
            params: p,
            optimizer: Some(adam),
            provenance: provenance(),
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);
        assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
        assert_eq!(loaded.param_hash(), ckpt.param_hash());
        for (name, t) in ckpt.params.iter() {
            let a: Vec<u32> = t.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u32> = loaded
                .params
                .get(name)
                .unwrap()
                .data()
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b);
        }

        let plain = Checkpoint {
            optimizer: None,
            ..ckpt.clone()
        };
        assert_eq!(Checkpoint::from_bytes(&plain.to_bytes()).unwrap(), plain);
    }
}

#[test]
fn checkpoint_loader_validates() {
    let model = tiny_seq2one(5);
    let ckpt = Checkpoint {
        model: model.clone(),
        params: ModelParams::<f32>::init(&model, 0).unwrap(),
        optimizer: None,
        provenance: provenance(),
    };
    let bytes = ckpt.to_bytes();
    assert!(matches!(
        Checkpoint::from_bytes(&bytes[..bytes.len() - 4]),
        Err(Error::Checkpoint(_))
    ));
    let mut bad_magic = bytes.clone();
    bad_magic[0] = b'X';
    assert!(Checkpoint::from_bytes(&bad_magic).is_err());

    // A header whose config disagrees with the stored shapes is rejected.
    let other = Checkpoint {
        model: tiny_seq2one(6),
        ..ckpt.clone()
    };
    let mut swapped = other.to_bytes();
    let own = ckpt.to_bytes();
    let hl = |b: &[u8]| u64::from_le_bytes(b[8..16].try_into().unwrap()) as usize;
    swapped.truncate(16 + hl(&swapped));
    swapped.extend_from_slice(&own[16 + hl(&own)..]);
    let err = Checkpoint::from_bytes(&swapped).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(_)), "{err}");
}

#[test]
fn param_hash_tracks_values() {
    let model = tiny_seq2one(5);
    let a = ModelParams::<f64>::init(&model, 1).unwrap();
    assert_eq!(param_hash(&a), param_hash(&a.cast::<f32>()));
    let b = ModelParams::<f64>::init(&model, 2).unwrap();
    assert_ne!(param_hash(&a), param_hash(&b));
}

fn cohort(name: &str, scans: Vec<Scan>) -> Cohort {
    Cohort::new(name, scans, PrepSettings::default().hash()).unwrap()
}

fn strategy_cfg() -> TrainConfig {
    TrainConfig {
        max_epochs: 2,
        n_folds: 3,
        ..quick_cfg()
    }
}

#[test]
fn finetune_starts_from_pretrain_at_reduced_rate() {
    let source = cohort("src", synth_scans(10, 8, |c| c.encoding_seed = Some(3)));
    let target = cohort("tgt", synth_scans(20, 9, |c| c.encoding_seed = Some(3)));
    let spec = StrategySpec {
        kind: StrategyKind::Finetune,
        source_dataset: Some("src".into()),
        target_dataset: "tgt".into(),
    };
    let out = run_strategy::<f64>(
        &spec,
        &tiny_seq2one(8),
        Some(&source),
        &target,
        &strategy_cfg(),
    )
    .unwrap();
    let pre = &out.pretrain.as_ref().unwrap().0;
    assert_eq!(out.folds.len(), 3);
    for f in &out.folds {
        assert_eq!(f.checkpoint.provenance.init_param_hash, pre.param_hash());
        assert_eq!(f.checkpoint.provenance.initial_lr, 5e-5);
        assert_eq!(f.log[0].lr, 5e-5);
    }
    assert_eq!(pre.provenance.initial_lr, 3e-3);
    assert_eq!(out.report.scans.len(), 9);
}

#[test]
fn pretrain_only_never_trains_on_target() {
    let source = cohort("src", synth_scans(10, 8, |_| {}));
    let target = cohort("tgt", synth_scans(20, 9, |_| {}));
    let spec = StrategySpec {
        kind: StrategyKind::PretrainOnly,
        source_dataset: Some("src".into()),
        target_dataset: "tgt".into(),
    };
    let out = run_strategy::<f64>(
        &spec,
        &tiny_seq2one(8),
        Some(&source),
        &target,
        &strategy_cfg(),
    )
    .unwrap();
    assert!(target.training_reads().iter().all(|&n| n == 0));
    assert!(target.eval_reads().iter().all(|&n| n == 1));
    assert!(source.training_reads().iter().all(|&n| n == 1));
    assert!(out.folds.is_empty());
    assert_eq!(out.report.scans.len(), 9);
    assert_eq!(out.report.strategy, "pretrain_only");
}

#[test]
fn joint_scratch_adds_source_scans_only() {
    let source = cohort("src", synth_scans(10, 6, |_| {}));
    let target = cohort("tgt", synth_scans(20, 9, |_| {}));
    let cfg = strategy_cfg();
    let run = |kind| {
        let spec = StrategySpec {
            kind,
            source_dataset: Some("src".into()),
            target_dataset: "tgt".into(),
        };
        run_strategy::<f64>(&spec, &tiny_seq2one(8), Some(&source), &target, &cfg).unwrap()
    };
    let scratch = run(StrategyKind::Scratch);
    assert!(source.training_reads().iter().all(|&n| n == 0));
    let joint = run(StrategyKind::JointScratch);
    assert_eq!(scratch.plan, joint.plan);
    assert!(source.training_reads().iter().all(|&n| n == 3));
    for (s, j) in scratch.folds.iter().zip(&joint.folds) {
        assert_eq!(s.n_train + s.n_val + 6, j.n_train + j.n_val);
        assert_eq!(s.n_test, j.n_test);
        assert_eq!(
            s.checkpoint.provenance.init_param_hash,
            j.checkpoint.provenance.init_param_hash
        );
    }
    let ids = |o: &physio_recon::training::StrategyOutcome| -> Vec<String> {
        o.report.scans.iter().map(|r| r.scan_id.clone()).collect()
    };
    assert_eq!(ids(&scratch), ids(&joint));
}

#[test]
fn strategies_that_need_a_source_reject_its_absence() {
    let target = cohort("tgt", synth_scans(20, 6, |_| {}));
    for kind in [
        StrategyKind::Finetune,
        StrategyKind::PretrainOnly,
        StrategyKind::JointScratch,
    ] {
        let spec = StrategySpec {
            kind,
            source_dataset: None,
            target_dataset: "tgt".into(),
        };
        assert!(spec.validate().is_err());
        assert!(
            run_strategy::<f64>(&spec, &tiny_seq2one(8), None, &target, &strategy_cfg()).is_err()
        );
    }
}

use physio_recon::dataset::{load_manifest, load_scan, PrepSettings, Scan, Target};
use physio_recon::evaluation::{
    age_group_summary, evaluate_checkpoint, evaluate_params, median, median_summary, predict_scan,
    write_prediction_csv, EvalReport, ScanResult,
};
use physio_recon::models::{
    AttentionConfig, ModelConfig, ModelParams, Seq2OneConfig, Seq2SeqConfig,
};
use physio_recon::synth::{generate_dataset, SynthConfig};
use physio_recon::training::{train_model, Checkpoint, Precision, Provenance, Task, TrainConfig};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn result(subject: &str, age: f64, fold: usize, r: Option<f64>) -> ScanResult {
    ScanResult {
        scan_id: format!("{subject}_scan-1"),
        subject_id: subject.into(),
        age,
        fold,
        task: Target::Rv,
        r,
    }
}

fn synth(n_subjects: usize, len: usize) -> Vec<Scan> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        n_subjects,
        n_roi: 6,
        len,
        seed: 4,
        ..SynthConfig::default()
    };
    generate_dataset(&cfg, dir.path()).unwrap();
    let m = load_manifest(&dir.path().join("manifest.json")).unwrap();
    m.scans
        .iter()
        .map(|e| load_scan(e, &m, &PrepSettings::default()).unwrap())
        .collect()
}

fn attention() -> AttentionConfig {
    AttentionConfig {
        n_heads: 2,
        head_dim: 4,
        dropout: 0.0,
        model_dim: 8,
    }
}

fn seq2one(window: usize) -> ModelConfig {
    ModelConfig::Seq2one(Seq2OneConfig {
        window,
        attention: attention(),
        n_roi: 6,
        n_outputs: 1,
        ..Seq2OneConfig::default()
    })
}

fn seq2seq() -> ModelConfig {
    ModelConfig::Seq2seq(Seq2SeqConfig {
        block_windows: vec![4, 8],
        attention: attention(),
        feature_dim: 8,
        n_roi: 6,
        n_outputs: 1,
        ..Seq2SeqConfig::default()
    })
}

#[test]
fn median_summary_reports_folds_and_exclusions() {
    let results = vec![
        result("a", 40.0, 0, Some(0.2)),
        result("b", 41.0, 0, Some(0.4)),
        result("c", 42.0, 1, Some(0.6)),
        result("d", 43.0, 1, Some(0.8)),
        result("e", 44.0, 1, None),
    ];
    let s = median_summary(&results).unwrap();
    assert_eq!(s.pooled, 0.5);
    assert!((s.per_fold[&0] - 0.3).abs() < 1e-15);
    assert!((s.per_fold[&1] - 0.7).abs() < 1e-15);
    assert_eq!((s.n_scored, s.n_excluded), (4, 1));
    assert!(median_summary(&[]).is_err());
    assert!(median_summary(&[result("a", 1.0, 0, None)]).is_err());
}

#[test]
fn age_groups_split_sorted_subjects() {
    let results: Vec<ScanResult> = (0..9)
        .map(|i| {
            result(
                &format!("s{i}"),
                80.0 - 5.0 * i as f64,
                0,
                Some(i as f64 / 10.0),
            )
        })
        .collect();
    let groups = age_group_summary(&results, 3).unwrap();
    assert_eq!(groups.len(), 3);
    let ranges: Vec<(f64, f64)> = groups.iter().map(|g| (g.age_min, g.age_max)).collect();
    assert_eq!(ranges, [(40.0, 50.0), (55.0, 65.0), (70.0, 80.0)]);
    assert!(groups.iter().all(|g| g.n_subjects == 3 && g.n_scans == 3));
    // Youngest are s8, s7, s6 with r 0.8, 0.7, 0.6.
    assert_eq!(groups[0].median_r, Some(0.7));
    assert_eq!(groups[2].median_r, Some(0.1));

    let same: Vec<ScanResult> = (0..7)
        .map(|i| result(&format!("s{i}"), 60.0, 0, Some(0.5)))
        .collect();
    let groups = age_group_summary(&same, 3).unwrap();
    let sizes: Vec<usize> = groups.iter().map(|g| g.n_subjects).collect();
    assert_eq!(sizes, [3, 2, 2]);
    assert!(groups
        .iter()
        .all(|g| g.age_min == 60.0 && g.age_max == 60.0));

    assert!(age_group_summary(&results[..2], 3).is_err());
    assert!(age_group_summary(&results, 1).is_err());
}

#[test]
fn age_independent_scores_give_similar_group_medians() {
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let results: Vec<ScanResult> = (0..120)
        .map(|i| {
            let age = rng.random_range(36.0..89.0);
            let r = 0.6 + 0.15 * (rng.random::<f64>() - 0.5) * 2.0;
            result(&format!("sub-{i:03}"), age, i % 5, Some(r))
        })
        .collect();
    let groups = age_group_summary(&results, 3).unwrap();
    assert!(groups.iter().all(|g| g.n_subjects >= 30));
    let meds: Vec<f64> = groups.iter().map(|g| g.median_r.unwrap()).collect();
    let gap = meds.iter().cloned().fold(f64::MIN, f64::max)
        - meds.iter().cloned().fold(f64::MAX, f64::min);
    assert!(gap < 0.1, "{meds:?}");
}

#[test]
fn seq2one_scores_the_cropped_span() {
    let scans = synth(2, 266);
    let model = seq2one(32);
    let params = ModelParams::<f64>::init(&model, 1).unwrap();
    let pred = predict_scan(&model, &params, &scans[0], Task::Rv).unwrap();
    assert_eq!(pred.offset, 16);
    assert_eq!(pred.predicted[0].len(), 235);
    assert_eq!(pred.measured[0], scans[0].rv[16..251].to_vec());

    let model = seq2seq();
    let params = ModelParams::<f64>::init(&model, 1).unwrap();
    let pred = predict_scan(&model, &params, &scans[0], Task::Rv).unwrap();
    assert_eq!(pred.offset, 0);
    assert_eq!(pred.predicted[0].len(), 266);
    assert_eq!(pred.measured[0], scans[0].rv);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("pred.csv");
    write_prediction_csv(&path, &pred, 0).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next(), Some("t,measured,predicted"));
    assert_eq!(text.lines().count(), 267);
}

#[test]
fn evaluation_is_dropout_free_and_repeatable() {
    let scans = synth(3, 60);
    let refs: Vec<&Scan> = scans.iter().collect();
    let mut model = seq2seq();
    if let ModelConfig::Seq2seq(c) = &mut model {
        c.attention.dropout = 0.5;
    }
    let params = ModelParams::<f64>::init(&model, 2).unwrap();
    let a = evaluate_params(&model, &params, &refs, Task::Rv, 0).unwrap();
    let b = evaluate_params(&model, &params, &refs, Task::Rv, 0).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
}

fn checkpoint_for(model: &ModelConfig, params: ModelParams<f32>, task: Task) -> Checkpoint {
    Checkpoint {
        model: model.clone(),
        params,
        optimizer: None,
        provenance: Provenance {
            strategy: "scratch".into(),
            fold: Some(0),
            task,
            seed: 0,
            epochs_run: 0,
            best_epoch: None,
            initial_val_loss: None,
            final_val_loss: None,
            initial_lr: 1e-4,
            init_param_hash: String::new(),
            training_data_hash: String::new(),
            prep_settings_hash: PrepSettings::default().hash(),
            created_unix: None,
        },
    }
}

#[test]
fn checkpoint_evaluation_checks_settings_hash() {
    let scans = synth(2, 60);
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = seq2seq();
    let ckpt = checkpoint_for(&model, ModelParams::init(&model, 0).unwrap(), Task::Rv);
    let good = PrepSettings::default().hash();
    assert_eq!(
        evaluate_checkpoint(&ckpt, &refs, &good, 0).unwrap().len(),
        2
    );

    let other = PrepSettings {
        target_dt: 2.0,
        ..PrepSettings::default()
    };
    let err = evaluate_checkpoint(&ckpt, &refs, &other.hash(), 0).unwrap_err();
    assert!(err.is_hash_mismatch(), "{err}");
}

#[test]
fn constant_prediction_is_excluded_and_counted() {
    let scans = synth(3, 60);
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = seq2seq();
    let mut params = ModelParams::<f64>::init(&model, 0).unwrap();
    // Zeroing the output weights leaves a constant bias as the prediction.
    for (name, t) in params.iter_mut() {
        if name.starts_with("head.") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let results = evaluate_params(&model, &params, &refs, Task::Rv, 0).unwrap();
    assert!(results.iter().all(|r| r.r.is_none()));

    let mut mixed = results.clone();
    mixed.push(result("x", 50.0, 0, Some(0.4)));
    let s = median_summary(&mixed).unwrap();
    assert_eq!((s.pooled, s.n_scored, s.n_excluded), (0.4, 1, 3));
}

#[test]
fn memorized_scan_scores_near_one() {
    let scans = synth(1, 60);
    let refs: Vec<&Scan> = scans.iter().collect();
    let model = seq2seq();
    let cfg = TrainConfig {
        lr_init: 1e-2,
        batch_size: 1,
        max_epochs: 400,
        early_stop_patience: 400,
        lr_patience: 20,
        precision: Precision::F64,
        ..TrainConfig::default()
    };
    let out = train_model(
        &model,
        ModelParams::<f64>::init(&model, 0).unwrap(),
        &refs,
        &refs,
        &cfg,
        cfg.lr_init,
    )
    .unwrap();
    let r = evaluate_params(&model, &out.params, &refs, Task::Rv, 0).unwrap()[0]
        .r
        .unwrap();
    assert!(r >= 0.999, "r = {r}");
}

#[test]
fn report_round_trips_and_lists_every_scan() {
    let results = vec![
        result("a", 40.0, 0, Some(0.2)),
        result("b", 50.0, 1, None),
        result("c", 60.0, 1, Some(0.6)),
    ];
    let report = EvalReport::build("scratch", "seq2seq", "abc", results).unwrap();
    let t = report.task(Target::Rv).unwrap();
    assert_eq!(t.medians.pooled, 0.4);
    assert_eq!(t.age_groups.len(), 3);
    assert!(report.task(Target::Hr).is_none());

    let dir = tempfile::tempdir().unwrap();
    report.write_json(&dir.path().join("r.json")).unwrap();
    let back: EvalReport =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("r.json")).unwrap()).unwrap();
    assert_eq!(back, report);

    report.write_scan_csv(&dir.path().join("r.csv")).unwrap();
    let csv = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "scan_id,subject_id,age,fold,task,r");
    assert_eq!(lines[2], "b_scan-1,b,50,1,RV,nan");
}

proptest! {
    #[test]
    fn pooled_median_is_recomputable_and_bounded(
        rs in prop::collection::vec((-1.0f64..1.0, 0usize..5), 1..60),
    ) {
        let results: Vec<ScanResult> = rs
            .iter()
            .enumerate()
            .map(|(i, &(r, f))| result(&format!("s{i}"), 50.0, f, Some(r)))
            .collect();
        let s = median_summary(&results).unwrap();
        let values: Vec<f64> = rs.iter().map(|p| p.0).collect();
        prop_assert_eq!(s.pooled, median(&values).unwrap());
        let lo = values.iter().cloned().fold(f64::MAX, f64::min);
        let hi = values.iter().cloned().fold(f64::MIN, f64::max);
        prop_assert!(lo <= s.pooled && s.pooled <= hi);
        for m in s.per_fold.values() {
            prop_assert!(lo <= *m && *m <= hi);
        }
    }
}

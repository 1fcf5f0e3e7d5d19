use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use physio_recon::dataset::{
    load_manifest, load_prepared, preprocess_dataset, FoldPlan, PrepOutcome, Scan,
};
use physio_recon::evaluation::{
    evaluate_checkpoint, predict_scan, write_prediction_csv, EvalReport, ScanResult,
};
use physio_recon::synth::generate_dataset;
use physio_recon::training::{
    run_strategy, write_epoch_log, Checkpoint, Cohort, Precision, StrategyKind, StrategySpec,
};
use physio_recon::Error;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::CliError;

fn run_err(e: Error) -> CliError {
    CliError::Run(e)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    fs::write(path, text).map_err(|e| {
        CliError::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path).map_err(|e| {
        CliError::Run(Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    })
}

fn required<'a>(v: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, CliError> {
    v.as_deref()
        .ok_or_else(|| CliError::Usage(format!("config key '{key}' is required for this command")))
}

pub fn preprocess(cfg: &RunConfig, out: &Path, keep_going: bool) -> Result<(), CliError> {
    let manifest = load_manifest(required(&cfg.manifest, "manifest")?).map_err(run_err)?;
    let report = preprocess_dataset(&manifest, &cfg.prep, out, keep_going).map_err(run_err)?;
    let mut first_failure = None;
    for (id, outcome) in report.outcomes {
        match outcome {
            PrepOutcome::Written => println!("{id}: written"),
            PrepOutcome::Skipped => println!("{id}: skipped (hash match)"),
            PrepOutcome::Failed(e) => {
                eprintln!("{id}: failed: {e}");
                first_failure.get_or_insert(e);
            }
        }
    }
    match first_failure {
        Some(e) => Err(CliError::Reported(e)),
        None => Ok(()),
    }
}

pub fn synth(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    cfg.synth
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let manifest = generate_dataset(&cfg.synth, out).map_err(run_err)?;
    println!("wrote {} scans to {}", manifest.scans.len(), out.display());
    Ok(())
}

/// Written next to the checkpoints so later commands know which scans each
/// fold held out.
#[derive(Debug, Serialize, Deserialize)]
struct FoldFile {
    strategy: StrategyKind,
    target_dataset: String,
    plan: FoldPlan,
}

fn load_cohort(dir: &Path, cfg: &RunConfig) -> Result<Cohort, CliError> {
    let (index, scans) = load_prepared(dir, Some(&cfg.prep)).map_err(run_err)?;
    Cohort::new(index.dataset_name, scans, index.settings_hash).map_err(run_err)
}

fn now_unix() -> Option<u64> {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .ok()
        .map(|d| d.as_secs())
}

fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<(), CliError> {
    let mut ckpt = ckpt.clone();
    ckpt.provenance.created_unix = now_unix();
    ckpt.save(path).map_err(run_err)
}

fn print_medians(report: &EvalReport) {
    for t in &report.tasks {
        println!(
            "{} {}: pooled median r = {:.4} ({} scored, {} excluded)",
            report.strategy,
            t.task.name(),
            t.medians.pooled,
            t.medians.n_scored,
            t.medians.n_excluded
        );
    }
}

fn write_report(report: &EvalReport, out: &Path) -> Result<(), CliError> {
    report
        .write_json(&out.join("report.json"))
        .map_err(run_err)?;
    report
        .write_scan_csv(&out.join("scans.csv"))
        .map_err(run_err)?;
    print_medians(report);
    Ok(())
}

pub fn train(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let target_dir = required(&cfg.strategy.target_dataset, "strategy.target_dataset")?;
    let target = load_cohort(target_dir, cfg)?;
    let source = match &cfg.strategy.source_dataset {
        Some(dir) if cfg.strategy.kind.needs_source() => Some(load_cohort(dir, cfg)?),
        _ => None,
    };
    let spec = StrategySpec {
        kind: cfg.strategy.kind,
        source_dataset: source.as_ref().map(|s| s.name.clone()),
        target_dataset: target.name.clone(),
    };
    let outcome = match cfg.train.precision {
        Precision::F32 => {
            run_strategy::<f32>(&spec, &cfg.model, source.as_ref(), &target, &cfg.train)
        }
        Precision::F64 => {
            run_strategy::<f64>(&spec, &cfg.model, source.as_ref(), &target, &cfg.train)
        }
    }
    .map_err(run_err)?;

    create_dir(out)?;
    write_json(&out.join("config.json"), cfg)?;
    write_json(
        &out.join("folds.json"),
        &FoldFile {
            strategy: spec.kind,
            target_dataset: target.name.clone(),
            plan: outcome.plan.clone(),
        },
    )?;
    if let Some((ckpt, log)) = &outcome.pretrain {
        save_checkpoint(ckpt, &out.join("pretrain.ckpt"))?;
        write_epoch_log(&out.join("pretrain_log.csv"), log).map_err(run_err)?;
    }
    for f in &outcome.folds {
        save_checkpoint(&f.checkpoint, &out.join(format!("fold-{}.ckpt", f.fold)))?;
        write_epoch_log(&out.join(format!("fold-{}_log.csv", f.fold)), &f.log).map_err(run_err)?;
    }
    write_report(&outcome.report, out)
}

/// The checkpoint and held-out scans of every fold of an earlier run.
struct FoldJobs<'a> {
    kind: StrategyKind,
    settings_hash: String,
    folds: Vec<(usize, Checkpoint, Vec<&'a Scan>)>,
}

fn fold_jobs<'a>(
    cfg: &RunConfig,
    scans: &'a [Scan],
    settings_hash: String,
) -> Result<FoldJobs<'a>, CliError> {
    let run_dir = required(&cfg.run_dir, "run_dir")?;
    let path = run_dir.join("folds.json");
    let text = fs::read_to_string(&path).map_err(|e| {
        run_err(Error::Io {
            path: path.clone(),
            source: e,
        })
    })?;
    let file: FoldFile = serde_json::from_str(&text).map_err(|e| {
        run_err(Error::Parse {
            path: path.clone(),
            message: e.to_string(),
        })
    })?;
    let mut folds = Vec::new();
    for f in 0..file.plan.k {
        let held_out: Vec<&Scan> = scans
            .iter()
            .filter(|s| file.plan.fold_of(&s.subject_id) == Some(f))
            .collect();
        let name = match file.strategy {
            StrategyKind::PretrainOnly => "pretrain.ckpt".to_string(),
            _ => format!("fold-{f}.ckpt"),
        };
        let ckpt = Checkpoint::load(&run_dir.join(name)).map_err(run_err)?;
        if ckpt.provenance.prep_settings_hash != settings_hash {
            return Err(run_err(Error::HashMismatch {
                expected: ckpt.provenance.prep_settings_hash.clone(),
                found: settings_hash,
            }));
        }
        folds.push((f, ckpt, held_out));
    }
    let unplanned = scans
        .iter()
        .filter(|s| file.plan.fold_of(&s.subject_id).is_none())
        .count();
    if unplanned > 0 {
        log::warn!(
            "{unplanned} scans belong to subjects outside the run's fold plan and are skipped"
        );
    }
    Ok(FoldJobs {
        kind: file.strategy,
        settings_hash,
        folds,
    })
}

pub fn evaluate(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let target_dir = required(&cfg.strategy.target_dataset, "strategy.target_dataset")?;
    let (index, scans) = load_prepared(target_dir, Some(&cfg.prep)).map_err(run_err)?;
    let jobs = fold_jobs(cfg, &scans, index.settings_hash)?;
    let mut results: Vec<ScanResult> = Vec::new();
    let mut model_name = "";
    for (f, ckpt, held_out) in &jobs.folds {
        model_name = ckpt.model.name();
        results
            .extend(evaluate_checkpoint(ckpt, held_out, &jobs.settings_hash, *f).map_err(run_err)?);
    }
    let report = EvalReport::build(jobs.kind.name(), model_name, &jobs.settings_hash, results)
        .map_err(run_err)?;
    create_dir(out)?;
    write_report(&report, out)
}

pub fn predict(cfg: &RunConfig, out: &Path) -> Result<(), CliError> {
    let target_dir = required(&cfg.strategy.target_dataset, "strategy.target_dataset")?;
    let (index, scans) = load_prepared(target_dir, Some(&cfg.prep)).map_err(run_err)?;
    let jobs = fold_jobs(cfg, &scans, index.settings_hash)?;
    let dir = out.join("predictions");
    create_dir(&dir)?;
    let mut n = 0;
    for (_, ckpt, held_out) in &jobs.folds {
        for scan in held_out {
            let pred = predict_scan::<f32>(&ckpt.model, &ckpt.params, scan, ckpt.provenance.task)
                .map_err(run_err)?;
            for (j, t) in pred.targets.iter().enumerate() {
                let path = dir.join(format!("{}_{}.csv", scan.scan_id, t.name()));
                write_prediction_csv(&path, &pred, j).map_err(run_err)?;
                n += 1;
            }
        }
    }
    println!("wrote {n} prediction files to {}", dir.display());
    Ok(())
}

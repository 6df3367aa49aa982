//! Whole-run orchestration: sequences, single-domain baselines, and the
//! joint upper baseline.
//!
//! A run directory is laid out as
//!
//! ```text
//! <run>/config.json                 full experiment config (digest source)
//! <run>/pool/                       UAP pool (UAP strategies only)
//! <run>/stage_<t>/checkpoint.ufckpt dev-selected model of stage t
//! <run>/stage_<t>/metrics.json      stage metrics + eval EER row
//! <run>/stage_<t>/audit.json        every data access made during stage t
//! <run>/report.{json,csv}           final report renderings
//! <run>/report_table.txt
//! ```
//!
//! Every file is a pure function of (config, dataset bytes), so two runs
//! of the same config over the same data produce byte-identical
//! artifacts. Sequence runs additionally self-check the data-isolation
//! rule over their own audit log and fail if it is violated.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::classifier::{save_checkpoint, ClassifierParams, ClassifierSnapshot};
use crate::config::ExperimentConfig;
use crate::continual::{
    finetune_stage, isolation_violations, joint_train, AccessKind, DataStore, Phase,
    SequenceOrder, StageData, StageOutcome, Strategy, TrainerState,
};
use crate::data::{FrozenExtractor, Split};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, score_utterance, ScoreRecord};
pub use crate::report::stage_dir;
use crate::report::{build_report, write_report_files, DomainEer, EvalReport, StageArtifact};
use crate::uap::UapPool;

/// What a finished run hands back to the caller.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub report: EvalReport,
    /// True when any stage's perturbation stopped at the iteration budget
    /// without reaching the target fooling rate.
    pub unconverged_uap: bool,
}

/// Runs the configured stage sequence end to end and writes all
/// artifacts under `run_dir`.
pub fn run_sequence(
    exp: &ExperimentConfig,
    store: &DataStore,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    exp.validate()?;
    if matches!(exp.stage.strategy, Strategy::Base | Strategy::Joint) {
        return Err(Error::InvalidConfig(
            "sequence runs need a sequential strategy (sft or a uap variant)".into(),
        ));
    }
    let order = SequenceOrder(exp.order.clone());
    let extractor = exp.extractor.build()?;
    fs::create_dir_all(run_dir).map_err(Error::file(run_dir))?;
    exp.save(&run_dir.join("config.json"))?;

    let pool = if exp.stage.strategy.uses_uap() {
        Some(UapPool::create(&run_dir.join("pool"))?)
    } else {
        None
    };
    let mut state = TrainerState {
        params: ClassifierParams::init(&exp.classifier)?,
        teacher: None,
        pool,
        stage: 1,
    };

    let mut unconverged = false;
    for t in 1..=order.stages() {
        state.stage = t;
        let outcome = run_stage(exp, store, run_dir, &mut state, &order, t, &extractor)
            .map_err(|e| e.at_stage(t))?;
        unconverged |= outcome.unconverged_uap;
    }

    let violations = isolation_violations(&store.records(), &order);
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "data isolation violated: {}",
            violations.join("; ")
        )));
    }

    let report = build_report(run_dir)?;
    write_report_files(&report, run_dir)?;
    Ok(RunArtifacts { report, unconverged_uap: unconverged })
}

fn run_stage(
    exp: &ExperimentConfig,
    store: &DataStore,
    run_dir: &Path,
    state: &mut TrainerState,
    order: &SequenceOrder,
    t: usize,
    extractor: &FrozenExtractor,
) -> Result<StageOutcome> {
    let domain = order.domain_at(t);
    let data = StageData {
        domain_id: domain,
        train: store.load_split(t, Phase::Train, domain, Split::Train)?,
        dev: store.load_split(t, Phase::Train, domain, Split::Dev)?,
    };
    if let Some(pool) = &state.pool {
        if t > 1 {
            store.note(t, Phase::Train, AccessKind::Pool, pool.dir());
        }
    }
    if t > 1 {
        store.note(
            t,
            Phase::Train,
            AccessKind::Checkpoint,
            &stage_dir(run_dir, t - 1).join("checkpoint.ufckpt"),
        );
    }

    let outcome = finetune_stage(
        state,
        &data,
        extractor,
        exp.crop_len,
        exp.eval_crops,
        &exp.stage,
        &exp.uap,
    )?;

    let sdir = stage_dir(run_dir, t);
    fs::create_dir_all(&sdir).map_err(Error::file(&sdir))?;
    save_checkpoint(&state.params, t, &sdir.join("checkpoint.ufckpt"))?;

    let snapshot = ClassifierSnapshot::new(state.params.clone(), t);
    let eval = eval_all_domains(exp, store, t, &snapshot, extractor)?;
    write_stage_files(&sdir, store, t, &outcome, eval)?;
    Ok(outcome)
}

/// Scores every declared domain's eval split with the given snapshot.
fn eval_all_domains(
    exp: &ExperimentConfig,
    store: &DataStore,
    stage: usize,
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
) -> Result<Vec<DomainEer>> {
    let mut out = Vec::with_capacity(exp.domains.len());
    for spec in &exp.domains {
        let clips = store.load_split(stage, Phase::Eval, spec.domain_id, Split::Eval)?;
        let records: Vec<ScoreRecord> = clips
            .iter()
            .enumerate()
            .map(|(i, c)| {
                Ok(ScoreRecord {
                    utt_id: i,
                    domain_id: c.domain_id,
                    attack_id: c.attack_id,
                    label: c.label,
                    score: score_utterance(snapshot, extractor, c, exp.crop_len, exp.eval_crops)?,
                })
            })
            .collect::<Result<_>>()?;
        let eer = compute_eer(&records)?;
        out.push(DomainEer { domain_id: spec.domain_id, eer_percent: eer * 100.0 });
    }
    Ok(out)
}

fn write_stage_files(
    sdir: &Path,
    store: &DataStore,
    stage: usize,
    outcome: &StageOutcome,
    eval: Vec<DomainEer>,
) -> Result<()> {
    let artifact = StageArtifact { metrics: outcome.metrics.clone(), eval };
    write_json(&sdir.join("metrics.json"), &artifact)?;
    write_json(&sdir.join("audit.json"), &store.stage_records(stage))?;
    Ok(())
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let f = File::create(path).map_err(Error::file(path))?;
    let mut w = BufWriter::new(f);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Trains one fresh model on a single domain (the per-domain lower
/// baseline) and writes a one-stage run directory.
pub fn run_single_domain(
    exp: &ExperimentConfig,
    store: &DataStore,
    domain_id: usize,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    let mut cfg = exp.clone();
    cfg.stage.strategy = Strategy::Base;
    cfg.order = vec![domain_id];
    cfg.validate()?;
    let order = SequenceOrder(cfg.order.clone());
    let extractor = cfg.extractor.build()?;
    fs::create_dir_all(run_dir).map_err(Error::file(run_dir))?;
    cfg.save(&run_dir.join("config.json"))?;

    let mut state = TrainerState {
        params: ClassifierParams::init(&cfg.classifier)?,
        teacher: None,
        pool: None,
        stage: 1,
    };
    let outcome = run_stage(&cfg, store, run_dir, &mut state, &order, 1, &extractor)
        .map_err(|e| e.at_stage(1))?;

    let violations = isolation_violations(&store.records(), &order);
    if !violations.is_empty() {
        return Err(Error::InvalidConfig(format!(
            "data isolation violated: {}",
            violations.join("; ")
        )));
    }
    let report = build_report(run_dir)?;
    write_report_files(&report, run_dir)?;
    Ok(RunArtifacts { report, unconverged_uap: outcome.unconverged_uap })
}

/// Trains the joint upper baseline on the union of all domains in the
/// declared order and writes a one-stage run directory. Joint training
/// legitimately reads every domain, so no isolation check applies.
pub fn run_joint(
    exp: &ExperimentConfig,
    store: &DataStore,
    run_dir: &Path,
) -> Result<RunArtifacts> {
    let mut cfg = exp.clone();
    cfg.stage.strategy = Strategy::Joint;
    cfg.validate()?;
    let extractor = cfg.extractor.build()?;
    fs::create_dir_all(run_dir).map_err(Error::file(run_dir))?;
    cfg.save(&run_dir.join("config.json"))?;

    let order = SequenceOrder(cfg.order.clone());
    let mut domains = Vec::with_capacity(order.stages());
    for t in 1..=order.stages() {
        let id = order.domain_at(t);
        domains.push(StageData {
            domain_id: id,
            train: store.load_split(1, Phase::Train, id, Split::Train)?,
            dev: store.load_split(1, Phase::Train, id, Split::Dev)?,
        });
    }
    let (params, outcome) = joint_train(&domains, &cfg).map_err(|e| e.at_stage(1))?;

    let sdir = stage_dir(run_dir, 1);
    fs::create_dir_all(&sdir).map_err(Error::file(&sdir))?;
    save_checkpoint(&params, 1, &sdir.join("checkpoint.ufckpt"))?;
    let snapshot = ClassifierSnapshot::new(params, 1);
    let eval = eval_all_domains(&cfg, store, 1, &snapshot, &extractor)?;
    write_stage_files(&sdir, store, 1, &outcome, eval)?;

    let report = build_report(run_dir)?;
    write_report_files(&report, run_dir)?;
    Ok(RunArtifacts { report, unconverged_uap: outcome.unconverged_uap })
}

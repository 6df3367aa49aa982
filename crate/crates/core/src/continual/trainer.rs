//! The per-stage training loop and the joint baseline.
//!
//! Each stage runs a fixed number of epochs; every iteration draws a
//! class-balanced batch (each slot flips a fair coin for the class, then
//! picks uniformly inside it), optionally builds a pseudo-spoofed batch
//! from the bona fide half plus a pooled perturbation, and takes one Adam
//! step on the combined objective. After every epoch the current model is
//! scored on the stage's dev split; the epoch with the lowest dev EER
//! becomes the stage's final model, the next teacher, and — for UAP
//! strategies — the attack target for the stage's perturbation.
//!
//! Separate seeded streams drive sampling, dropout, and pool draws, so
//! disabling one mechanism leaves the others' draws untouched; that is
//! what makes the reduction identities (e.g. rehearsal off + lambda 0
//! equals plain fine-tuning bit-for-bit) hold exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, ClassifierSnapshot};
use crate::config::ExperimentConfig;
use crate::continual::{
    build_pseudo_batch, distill_on_tape, DistillOn, StageConfig, StageData, Strategy,
    UapPerIteration,
};
use crate::data::{
    crop_segments, ingest_scale, normalize_sample, FeatureMatrix, FrozenExtractor, Label,
    Provenance, RawClip,
};
use crate::error::{Error, Result};
use crate::metrics::{compute_eer, score_utterance, ScoreRecord};
use crate::rng::{derive2, salt, stream2};
use crate::tensor::{Tape, Tensor};
use crate::uap::{
    generate_uap, generate_uap_waveform, UapGenConfig, UapLevel, UapPool, WaveformSample,
};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// What persists across stages of a sequence run.
pub struct TrainerState {
    pub params: ClassifierParams,
    pub teacher: Option<ClassifierSnapshot>,
    pub pool: Option<UapPool>,
    /// 1-based index of the stage being (or about to be) trained.
    pub stage: usize,
}

/// Adam with fixed betas, zero weight decay, and per-tensor moment slabs.
pub struct Adam {
    lr: f64,
    t: usize,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn for_params(lr: f64, params: &ClassifierParams) -> Self {
        let slabs: Vec<Vec<f64>> = params
            .tensors()
            .iter()
            .map(|(_, t)| vec![0.0; t.numel()])
            .collect();
        Adam { lr, t: 0, m: slabs.clone(), v: slabs }
    }

    /// One update over all tensors; `grads` must match the canonical
    /// tensor order.
    pub fn step(&mut self, params: &mut ClassifierParams, grads: &[Tensor]) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() {
            return Err(Error::shape(
                "adam_step",
                format!("{} tensors", tensors.len()),
                format!("{} grads", grads.len()),
            ));
        }
        self.t += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.t as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.t as i32);
        for ((tensor, grad), (m, v)) in tensors
            .into_iter()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            if tensor.numel() != grad.numel() {
                return Err(Error::shape(
                    "adam_step",
                    format!("{:?}", tensor.shape()),
                    format!("{:?}", grad.shape()),
                ));
            }
            for ((x, g), (mi, vi)) in tensor
                .data_mut()
                .iter_mut()
                .zip(grad.data())
                .zip(m.iter_mut().zip(v.iter_mut()))
            {
                *mi = ADAM_BETA1 * *mi + (1.0 - ADAM_BETA1) * g;
                *vi = ADAM_BETA2 * *vi + (1.0 - ADAM_BETA2) * g * g;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *x -= self.lr * mhat / (vhat.sqrt() + ADAM_EPS);
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub mean_ce: f64,
    pub mean_lr: f64,
    pub mean_lp: f64,
    pub mean_total: f64,
    pub dev_eer: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UapSummary {
    pub level: UapLevel,
    pub epsilon: f64,
    pub achieved_fooling_rate: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageMetrics {
    pub stage: usize,
    pub domain_id: usize,
    pub strategy: Strategy,
    pub epochs: Vec<EpochMetrics>,
    pub chosen_epoch: usize,
    pub uap: Option<UapSummary>,
}

#[derive(Clone, Debug)]
pub struct StageOutcome {
    pub metrics: StageMetrics,
    /// Set when the stage generated a perturbation that missed sigma.
    pub unconverged_uap: bool,
}

struct Prepared {
    crop: RawClip,
    /// Raw-clip scale ingestion divided by; waveform perturbations re-enter
    /// the normalized crop through it.
    scale: f64,
    feat: FeatureMatrix,
}

/// One balanced batch of indices: a fair class coin per slot, then a
/// uniform pick inside the chosen class.
pub(crate) fn sample_batch(
    rng: &mut ChaCha8Rng,
    bona: &[usize],
    spoof: &[usize],
    batch_size: usize,
) -> Vec<usize> {
    (0..batch_size)
        .map(|_| {
            if rng.gen_range(0..2u8) == 0 {
                bona[rng.gen_range(0..bona.len())]
            } else {
                spoof[rng.gen_range(0..spoof.len())]
            }
        })
        .collect()
}

/// Trains one stage in place: `state.params` advance, `state.teacher`
/// becomes this stage's dev-selected model, and for UAP strategies the
/// stage perturbation is generated against it and appended to the pool.
pub fn finetune_stage(
    state: &mut TrainerState,
    data: &StageData,
    extractor: &FrozenExtractor,
    crop_len: usize,
    eval_crops: usize,
    cfg: &StageConfig,
    uap_cfg: &UapGenConfig,
) -> Result<StageOutcome> {
    cfg.validate()?;
    uap_cfg.validate()?;
    let t = state.stage;
    if data.train.is_empty() {
        return Err(Error::EmptyInput("finetune_stage train split"));
    }
    if data.dev.is_empty() {
        return Err(Error::EmptyInput("finetune_stage dev split"));
    }
    let prepared: Vec<Prepared> = data
        .train
        .iter()
        .map(|c| {
            let crop = crop_segments(&normalize_sample(c), crop_len, 1).remove(0);
            let feat = extractor.extract(&crop)?;
            Ok(Prepared { crop, scale: ingest_scale(c), feat })
        })
        .collect::<Result<_>>()?;
    let bona_idx: Vec<usize> = (0..prepared.len())
        .filter(|&i| prepared[i].feat.label == Label::BonaFide)
        .collect();
    let spoof_idx: Vec<usize> = (0..prepared.len())
        .filter(|&i| prepared[i].feat.label == Label::Spoof)
        .collect();
    if bona_idx.is_empty() || spoof_idx.is_empty() {
        return Err(Error::SingleClass);
    }

    // Rehearsal and distillation only engage from stage 2 on: stage 1 has
    // neither prior perturbations nor a teacher.
    let rehearsal = cfg.strategy.uses_uap() && cfg.rehearsal_enabled && t > 1;
    if rehearsal {
        match state.pool.as_ref() {
            Some(pool) if !pool.eligible(t).is_empty() => {}
            _ => return Err(Error::EmptyPool { stage: t }),
        }
    }
    let distill = cfg.strategy.uses_uap() && cfg.lambda > 0.0 && t > 1;
    if distill && state.teacher.is_none() {
        return Err(Error::MissingTeacher);
    }
    if cfg.strategy.uses_uap() && state.pool.is_none() {
        return Err(Error::InvalidConfig(
            "UAP strategies need a pool handle to append the stage record".into(),
        ));
    }

    let mut sampler_rng = stream2(cfg.seed, salt::SAMPLER, t as u64);
    let mut dropout_rng = stream2(cfg.seed, salt::DROPOUT, t as u64);
    let mut pool_rng = stream2(cfg.seed, salt::POOL, t as u64);
    let mut adam = Adam::for_params(cfg.lr, &state.params);
    let iters_per_epoch = prepared.len().div_ceil(cfg.batch_size);

    let mut best: Option<(f64, usize, ClassifierParams)> = None;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        let mut sums = [0.0f64; 4];
        for _ in 0..iters_per_epoch {
            let batch = sample_batch(&mut sampler_rng, &bona_idx, &spoof_idx, cfg.batch_size);
            let batch_bona: Vec<usize> = batch
                .iter()
                .copied()
                .filter(|&i| prepared[i].feat.label == Label::BonaFide)
                .collect();

            let mut pseudo: Vec<FeatureMatrix> = Vec::new();
            if rehearsal && !batch_bona.is_empty() {
                let pool = state.pool.as_ref().expect("checked above");
                let records: Vec<&crate::uap::UapRecord> = match cfg.uap_per_iteration {
                    UapPerIteration::One => vec![pool.sample(t, &mut pool_rng)?],
                    UapPerIteration::OnePerStage => pool.eligible(t),
                };
                for rec in records {
                    match rec.level {
                        UapLevel::Feature => {
                            let reals: Vec<FeatureMatrix> =
                                batch_bona.iter().map(|&i| prepared[i].feat.clone()).collect();
                            pseudo.extend(build_pseudo_batch(&reals, rec)?);
                        }
                        UapLevel::Waveform => {
                            for &i in &batch_bona {
                                let perturbed = crate::uap::perturb_crop(
                                    &prepared[i].crop,
                                    &rec.perturbation,
                                    prepared[i].scale,
                                )?;
                                let mut f = extractor.extract(&perturbed)?;
                                f.label = Label::Spoof;
                                f.provenance =
                                    Provenance::Pseudo { source_stage: rec.stage_index };
                                pseudo.push(f);
                            }
                        }
                    }
                }
            }

            let mut tape = Tape::new();
            let bound = state.params.bind(&mut tape, true);
            let mut logits = Vec::new();
            let mut labels = Vec::new();
            let mut real_taps = Vec::new();
            let mut real_feats: Vec<&FeatureMatrix> = Vec::new();
            for &i in &batch {
                let x = tape.leaf(prepared[i].feat.frames.clone());
                let out =
                    state
                        .params
                        .forward(&mut tape, &bound, x, Some(&mut dropout_rng))?;
                logits.push(out.logit);
                labels.push(prepared[i].feat.label.as_f64());
                if prepared[i].feat.label == Label::BonaFide {
                    real_taps.push(match cfg.distill_on {
                        DistillOn::Embedding => out.pooled,
                        DistillOn::Logit => out.clean_logit,
                    });
                    real_feats.push(&prepared[i].feat);
                }
            }
            let mut pseudo_taps = Vec::new();
            for f in &pseudo {
                let x = tape.leaf(f.frames.clone());
                let out =
                    state
                        .params
                        .forward(&mut tape, &bound, x, Some(&mut dropout_rng))?;
                if cfg.pseudo_in_ce {
                    logits.push(out.logit);
                    labels.push(Label::Spoof.as_f64());
                }
                pseudo_taps.push(match cfg.distill_on {
                    DistillOn::Embedding => out.pooled,
                    DistillOn::Logit => out.clean_logit,
                });
            }

            let z = tape.stack_scalars(&logits)?;
            let y = tape.leaf(Tensor::vector(labels));
            let ce = tape.bce_with_logits(z, y)?;
            let mut loss = ce;
            let mut lr_value = 0.0;
            let mut lp_value = 0.0;
            if distill {
                let teacher = state.teacher.as_ref().expect("checked above");
                let mut reg = None;
                if !real_feats.is_empty() {
                    let lr_term =
                        distill_on_tape(&mut tape, &real_taps, teacher, &real_feats, cfg.distill_on)?;
                    lr_value = tape.value(lr_term)?.scalar_value()?;
                    reg = Some(lr_term);
                }
                if !pseudo.is_empty() {
                    let refs: Vec<&FeatureMatrix> = pseudo.iter().collect();
                    let lp_term =
                        distill_on_tape(&mut tape, &pseudo_taps, teacher, &refs, cfg.distill_on)?;
                    lp_value = tape.value(lp_term)?.scalar_value()?;
                    reg = Some(match reg {
                        Some(r) => tape.add(r, lp_term)?,
                        None => lp_term,
                    });
                }
                if let Some(r) = reg {
                    let scaled = tape.scale(r, cfg.lambda)?;
                    loss = tape.add(ce, scaled)?;
                }
            }
            let ce_value = tape.value(ce)?.scalar_value()?;
            let total_value = tape.value(loss)?.scalar_value()?;
            tape.backward(loss)?;
            let grads = bound.grads(&tape)?;
            adam.step(&mut state.params, &grads)?;
            sums[0] += ce_value;
            sums[1] += lr_value;
            sums[2] += lp_value;
            sums[3] += total_value;
        }

        let snap = ClassifierSnapshot::new(state.params.clone(), t);
        let dev_eer = dev_eer(&snap, extractor, &data.dev, crop_len, eval_crops)?;
        let n = iters_per_epoch as f64;
        epochs.push(EpochMetrics {
            epoch,
            mean_ce: sums[0] / n,
            mean_lr: sums[1] / n,
            mean_lp: sums[2] / n,
            mean_total: sums[3] / n,
            dev_eer,
        });
        let better = best.as_ref().map_or(true, |(e, _, _)| dev_eer < *e);
        if better {
            best = Some((dev_eer, epoch, state.params.clone()));
        }
    }

    let (_, chosen_epoch, best_params) = best.expect("at least one epoch ran");
    state.params = best_params;
    let snapshot = ClassifierSnapshot::new(state.params.clone(), t);

    let mut uap = None;
    let mut unconverged = false;
    if cfg.strategy.uses_uap() {
        let mut gen_cfg = uap_cfg.clone();
        gen_cfg.seed = derive2(uap_cfg.seed, salt::UAP_GEN, t as u64);
        let record = match cfg.strategy {
            Strategy::UapFeature => {
                gen_cfg.level = UapLevel::Feature;
                let reals: Vec<FeatureMatrix> =
                    bona_idx.iter().map(|&i| prepared[i].feat.clone()).collect();
                generate_uap(&snapshot, &reals, &gen_cfg)?
            }
            Strategy::UapWaveform => {
                gen_cfg.level = UapLevel::Waveform;
                let samples: Vec<WaveformSample> = bona_idx
                    .iter()
                    .map(|&i| WaveformSample {
                        crop: prepared[i].crop.clone(),
                        scale: prepared[i].scale,
                    })
                    .collect();
                generate_uap_waveform(&snapshot, extractor, &samples, &gen_cfg)?
            }
            _ => unreachable!(),
        };
        unconverged = !record.converged;
        uap = Some(UapSummary {
            level: record.level,
            epsilon: record.epsilon,
            achieved_fooling_rate: record.achieved_fooling_rate,
            iterations_used: record.iterations_used,
            converged: record.converged,
        });
        state
            .pool
            .as_mut()
            .expect("checked above")
            .append(record)?;
    }
    state.teacher = Some(snapshot);

    Ok(StageOutcome {
        metrics: StageMetrics {
            stage: t,
            domain_id: data.domain_id,
            strategy: cfg.strategy,
            epochs,
            chosen_epoch,
            uap,
        },
        unconverged_uap: unconverged,
    })
}

/// Dev-split EER of a snapshot.
pub(crate) fn dev_eer(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    clips: &[RawClip],
    crop_len: usize,
    eval_crops: usize,
) -> Result<f64> {
    let records: Vec<ScoreRecord> = clips
        .iter()
        .enumerate()
        .map(|(i, c)| {
            Ok(ScoreRecord {
                utt_id: i,
                domain_id: c.domain_id,
                attack_id: c.attack_id,
                label: c.label,
                score: score_utterance(snapshot, extractor, c, crop_len, eval_crops)?,
            })
        })
        .collect::<Result<_>>()?;
    compute_eer(&records)
}

/// The upper baseline: one fresh model trained on the union of all
/// domains' training splits with the ordinary stage machinery.
pub fn joint_train(
    domains: &[StageData],
    exp: &ExperimentConfig,
) -> Result<(ClassifierParams, StageOutcome)> {
    if domains.is_empty() {
        return Err(Error::EmptyInput("joint_train"));
    }
    let merged = StageData {
        // Domain 0 is reserved for "union of all domains".
        domain_id: if domains.len() == 1 { domains[0].domain_id } else { 0 },
        train: domains.iter().flat_map(|d| d.train.iter().cloned()).collect(),
        dev: domains.iter().flat_map(|d| d.dev.iter().cloned()).collect(),
    };
    let extractor = exp.extractor.build()?;
    let mut state = TrainerState {
        params: ClassifierParams::init(&exp.classifier)?,
        teacher: None,
        pool: None,
        stage: 1,
    };
    let cfg = StageConfig { strategy: Strategy::Joint, ..exp.stage.clone() };
    let outcome = finetune_stage(
        &mut state,
        &merged,
        &extractor,
        exp.crop_len,
        exp.eval_crops,
        &cfg,
        &exp.uap,
    )?;
    Ok((state.params, outcome))
}

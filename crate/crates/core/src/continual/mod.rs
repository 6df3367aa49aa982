//! Stage-wise continual training with UAP rehearsal.
//!
//! A training run visits domains in a fixed order. At each stage the
//! classifier fine-tunes on that stage's data only; what survives between
//! stages is the previous stage's frozen snapshot (the distillation
//! teacher) and the pool of universal perturbations generated so far.
//! Rehearsal builds pseudo-spoofed samples — current-stage bona fide
//! features plus a pooled perturbation, labeled spoof — standing in for
//! the spoof distributions of earlier domains without touching their data.
//!
//! Two distillation penalties anchor the student to the teacher: one on
//! the pseudo-spoofed batch and one on the real bona fide batch. Both are
//! squared tap differences averaged over their batch, so the strength
//! knob `lambda` acts independently of batch size. The stage objective is
//! `ce + lambda * (l_r + l_p)`.

mod audit;
mod run;
mod trainer;

pub use audit::{isolation_violations, AccessKind, AccessRecord, DataStore, Phase};
pub use run::{run_joint, run_sequence, run_single_domain, stage_dir, RunArtifacts};
pub use trainer::{
    finetune_stage, joint_train, Adam, EpochMetrics, StageMetrics, StageOutcome, TrainerState,
    UapSummary,
};

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierParams, ClassifierSnapshot};
use crate::data::{FeatureMatrix, Label, Provenance, RawClip};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Val};
use crate::uap::UapRecord;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    /// Plain single-domain training.
    Base,
    /// Sequential fine-tuning with no retention mechanism.
    Sft,
    /// Rehearsal with feature-space perturbations plus distillation.
    UapFeature,
    /// Rehearsal with waveform-space perturbations plus distillation.
    UapWaveform,
    /// Upper baseline: one run over the union of all domains.
    Joint,
}

impl Strategy {
    pub fn uses_uap(self) -> bool {
        matches!(self, Strategy::UapFeature | Strategy::UapWaveform)
    }

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Base => "base",
            Strategy::Sft => "sft",
            Strategy::UapFeature => "uap_feature",
            Strategy::UapWaveform => "uap_waveform",
            Strategy::Joint => "joint",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistillOn {
    /// Pooled pre-head embedding.
    Embedding,
    /// Dropout-free logit.
    Logit,
}

/// How many pool records feed rehearsal per training iteration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UapPerIteration {
    /// One record drawn uniformly from all eligible stages.
    One,
    /// One pseudo batch per eligible prior stage.
    OnePerStage,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageConfig {
    pub lr: f64,
    pub lambda: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub strategy: Strategy,
    pub distill_on: DistillOn,
    pub seed: u64,
    /// Whether pseudo-spoofed samples also enter the cross-entropy term.
    pub pseudo_in_ce: bool,
    pub uap_per_iteration: UapPerIteration,
    /// Ablation switch: disables pseudo-batch construction entirely while
    /// keeping the rest of the strategy path identical.
    pub rehearsal_enabled: bool,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            lr: 5e-5,
            lambda: 5.0,
            epochs: 10,
            batch_size: 128,
            strategy: Strategy::Base,
            distill_on: DistillOn::Embedding,
            seed: 0,
            pseudo_in_ce: true,
            uap_per_iteration: UapPerIteration::One,
            rehearsal_enabled: true,
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::InvalidConfig(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::InvalidConfig(format!(
                "lambda must be non-negative, got {}",
                self.lambda
            )));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::InvalidConfig(
                "batch_size must be at least 2 to hold both classes".into(),
            ));
        }
        Ok(())
    }
}

/// The domain sequence of a continual run.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceOrder(pub Vec<usize>);

impl SequenceOrder {
    pub fn validate(&self) -> Result<()> {
        if self.0.is_empty() {
            return Err(Error::InvalidConfig("sequence order must be non-empty".into()));
        }
        let mut seen = std::collections::BTreeSet::new();
        for &d in &self.0 {
            if !seen.insert(d) {
                return Err(Error::InvalidConfig(format!(
                    "sequence order repeats domain {d}"
                )));
            }
        }
        Ok(())
    }

    pub fn stages(&self) -> usize {
        self.0.len()
    }

    /// Domain trained at 1-based stage `t`.
    pub fn domain_at(&self, t: usize) -> usize {
        self.0[t - 1]
    }
}

/// One stage's raw input: the clips of a single domain.
#[derive(Clone, Debug)]
pub struct StageData {
    pub domain_id: usize,
    pub train: Vec<RawClip>,
    pub dev: Vec<RawClip>,
}

/// Builds the pseudo-spoofed batch: each bona fide feature matrix plus the
/// perturbation, labeled spoof and tagged with the perturbation's origin
/// stage.
pub fn build_pseudo_batch(reals: &[FeatureMatrix], p: &UapRecord) -> Result<Vec<FeatureMatrix>> {
    if p.level != crate::uap::UapLevel::Feature {
        return Err(Error::InvalidConfig(
            "build_pseudo_batch takes feature-level records; waveform records apply before extraction".into(),
        ));
    }
    let mut out = Vec::with_capacity(reals.len());
    for r in reals {
        if r.label != Label::BonaFide {
            return Err(Error::InvalidConfig(
                "pseudo batches are built from bona fide samples only".into(),
            ));
        }
        out.push(FeatureMatrix {
            frames: crate::uap::apply_uap(&r.frames, &p.perturbation)?,
            label: Label::Spoof,
            domain_id: r.domain_id,
            attack_id: r.attack_id,
            provenance: Provenance::Pseudo { source_stage: p.stage_index },
        });
    }
    Ok(out)
}

fn tap_value(
    params: &ClassifierParams,
    frames: &crate::tensor::Tensor,
    on: DistillOn,
) -> Result<Vec<f64>> {
    let (logit, pooled) = params.eval_forward(frames)?;
    Ok(match on {
        DistillOn::Embedding => pooled.data().to_vec(),
        DistillOn::Logit => vec![logit],
    })
}

fn distill_mean(
    student: &ClassifierParams,
    teacher: Option<&ClassifierSnapshot>,
    batch: &[FeatureMatrix],
    on: DistillOn,
    context: &'static str,
) -> Result<f64> {
    let teacher = teacher.ok_or(Error::MissingTeacher)?;
    if batch.is_empty() {
        return Err(Error::EmptyInput(context));
    }
    let mut total = 0.0;
    for f in batch {
        let s = tap_value(student, &f.frames, on)?;
        let t = tap_value(teacher.params(), &f.frames, on)?;
        total += s
            .iter()
            .zip(&t)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>();
    }
    Ok(total / batch.len() as f64)
}

/// Distillation penalty on the pseudo-spoofed batch: mean over samples of
/// the squared tap difference between student and frozen teacher.
pub fn loss_lp(
    student: &ClassifierParams,
    teacher: Option<&ClassifierSnapshot>,
    pseudo: &[FeatureMatrix],
    on: DistillOn,
) -> Result<f64> {
    distill_mean(student, teacher, pseudo, on, "loss_lp")
}

/// Distillation penalty on the real bona fide batch; same form as
/// [`loss_lp`], normalized by its own batch size.
pub fn loss_lr(
    student: &ClassifierParams,
    teacher: Option<&ClassifierSnapshot>,
    reals: &[FeatureMatrix],
    on: DistillOn,
) -> Result<f64> {
    distill_mean(student, teacher, reals, on, "loss_lr")
}

/// Combined stage objective.
pub fn total_loss(ce: f64, lr_loss: f64, lp_loss: f64, lambda: f64) -> Result<f64> {
    if !(lambda >= 0.0) {
        return Err(Error::InvalidConfig(format!(
            "lambda must be non-negative, got {lambda}"
        )));
    }
    Ok(ce + lambda * (lr_loss + lp_loss))
}

/// On-tape distillation term for one batch: the student taps stay
/// differentiable, the teacher taps enter as constants. Returns the mean
/// squared tap difference as a tape value.
pub(crate) fn distill_on_tape(
    tape: &mut Tape,
    student_taps: &[Val],
    teacher: &ClassifierSnapshot,
    batch: &[&FeatureMatrix],
    on: DistillOn,
) -> Result<Val> {
    debug_assert_eq!(student_taps.len(), batch.len());
    let mut per_sample = Vec::with_capacity(batch.len());
    for (&f, &tap) in batch.iter().zip(student_taps) {
        let t_tap = tap_value(teacher.params(), &f.frames, on)?;
        // The leaf must match the student tap's shape: a vector for
        // embedding taps, a scalar for the logit tap. Vectors count as one
        // row, so mse is exactly the squared norm either way.
        let t_leaf = match on {
            DistillOn::Embedding => tape.leaf(crate::tensor::Tensor::vector(t_tap)),
            DistillOn::Logit => tape.leaf(crate::tensor::Tensor::scalar(t_tap[0])),
        };
        per_sample.push(tape.mse(tap, t_leaf)?);
    }
    let stacked = tape.stack_scalars(&per_sample)?;
    let sum = tape.sum(stacked)?;
    tape.scale(sum, 1.0 / batch.len() as f64)
}

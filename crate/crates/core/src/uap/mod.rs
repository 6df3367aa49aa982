//! Universal adversarial perturbation (UAP) synthesis.
//!
//! A UAP is a single perturbation that pushes many bona fide inputs across
//! the spoof decision boundary at once. Generation is iterative targeted
//! signed-gradient descent: each iteration takes a mini-batch of bona fide
//! samples, computes the cross-entropy of the perturbed batch toward the
//! fake label, steps `p` by `-alpha * sgn(grad)` to decrease it, and clamps
//! to the L-inf budget as the final act of the iteration — so the budget
//! holds exactly at every point a caller can observe. The loop stops once
//! the fooling rate over the full bona fide set reaches `sigma` (checked
//! every `check_every` iterations) or at `max_iters`, in which case the
//! record is returned flagged unconverged instead of failing the pipeline.
//!
//! Feature-level perturbations live in T x D feature space and add to the
//! extracted frames directly. Waveform-level perturbations live on raw
//! stored samples: ingestion normalizes every clip by its own scale before
//! framing, so the same raw perturbation lands on each normalized crop
//! divided by that clip's [`ingest_scale`] and then still has to survive
//! the frozen extractor. The per-clip attenuation and distortion of that
//! path are what make the waveform channel the weaker one.

mod pool;

pub use pool::UapPool;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSnapshot;
use crate::data::{ingest_scale, FeatureMatrix, FrozenExtractor, Label, RawClip};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};
use crate::tensor::{Tape, Tensor};

/// One waveform-attack target: a crop of the ingestion-normalized clip
/// paired with the raw scale the normalization divided by.
#[derive(Clone, Debug)]
pub struct WaveformSample {
    pub crop: RawClip,
    /// [`ingest_scale`] of the source clip; must be positive and finite.
    pub scale: f64,
}

impl WaveformSample {
    /// Pairs an already-normalized crop with its source clip's scale.
    pub fn new(crop: RawClip, source: &RawClip) -> Self {
        WaveformSample { scale: ingest_scale(source), crop }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UapLevel {
    Feature,
    Waveform,
}

impl UapLevel {
    pub fn name(self) -> &'static str {
        match self {
            UapLevel::Feature => "feature",
            UapLevel::Waveform => "waveform",
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UapGenConfig {
    /// L-inf budget for the perturbation.
    pub epsilon: f64,
    /// Signed-gradient step size.
    pub alpha: f64,
    /// Fooling-rate threshold that ends generation. 0 is allowed as a
    /// degenerate value: the first full-set check then always succeeds.
    pub sigma: f64,
    pub max_iters: usize,
    pub level: UapLevel,
    pub seed: u64,
    /// Mini-batch size for the gradient step; the full set is used when it
    /// is larger than the available samples.
    pub batch_size: usize,
    /// Fooling-rate evaluation cadence in iterations.
    pub check_every: usize,
}

impl Default for UapGenConfig {
    fn default() -> Self {
        UapGenConfig {
            epsilon: 0.03,
            alpha: 0.0001,
            sigma: 0.8,
            max_iters: 2000,
            level: UapLevel::Feature,
            seed: 0,
            batch_size: 32,
            check_every: 10,
        }
    }
}

impl UapGenConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be positive, got {}", self.epsilon)));
        }
        if !(self.alpha > 0.0) {
            return Err(Error::InvalidConfig(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(0.0..=1.0).contains(&self.sigma) {
            return Err(Error::InvalidConfig(format!("sigma must lie in [0, 1], got {}", self.sigma)));
        }
        if self.max_iters == 0 || self.batch_size == 0 || self.check_every == 0 {
            return Err(Error::InvalidConfig(
                "max_iters, batch_size and check_every must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// One finished perturbation plus its provenance.
#[derive(Clone, Debug)]
pub struct UapRecord {
    pub perturbation: Tensor,
    pub stage_index: usize,
    pub level: UapLevel,
    pub epsilon: f64,
    pub achieved_fooling_rate: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

/// Per-iteration measurements from a traced generation run; test-facing.
#[derive(Clone, Debug)]
pub struct IterStat {
    pub linf: f64,
    /// Full-set cross-entropy toward the fake label after this iteration.
    pub full_ce: f64,
}

/// Clamps every entry of `p` into [-epsilon, epsilon].
pub fn project_linf(p: &Tensor, epsilon: f64) -> Result<Tensor> {
    if !(epsilon > 0.0) {
        return Err(Error::InvalidConfig(format!("epsilon must be positive, got {epsilon}")));
    }
    Ok(p.clamped(epsilon))
}

/// Elementwise x + p; inputs are untouched.
pub fn apply_uap(x: &Tensor, p: &Tensor) -> Result<Tensor> {
    if x.shape() != p.shape() {
        return Err(Error::shape(
            "apply_uap",
            format!("{:?}", x.shape()),
            format!("{:?}", p.shape()),
        ));
    }
    x.add(p)
}

/// Fraction of bona fide feature matrices the perturbed classifier calls
/// spoof.
pub fn fooling_rate(
    snapshot: &ClassifierSnapshot,
    reals: &[FeatureMatrix],
    p: &Tensor,
) -> Result<f64> {
    check_all_bona_fide(reals)?;
    let mut fooled = 0usize;
    for f in reals {
        let perturbed = apply_uap(&f.frames, p)?;
        if snapshot.params().predict(&perturbed)? == Label::Spoof {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / reals.len() as f64)
}

/// Waveform-level fooling rate: the raw-domain perturbation is applied to
/// each normalized crop through its ingestion scale, then passes through
/// the frozen extractor.
pub fn fooling_rate_waveform(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    samples: &[WaveformSample],
    p: &Tensor,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::EmptyInput("fooling_rate_waveform"));
    }
    let mut fooled = 0usize;
    for s in samples {
        if s.crop.label != Label::BonaFide {
            return Err(Error::InvalidConfig(
                "fooling rate is defined over bona fide clips only".into(),
            ));
        }
        let perturbed = perturb_crop(&s.crop, p, s.scale)?;
        let feats = extractor.extract(&perturbed)?;
        if snapshot.params().predict(&feats.frames)? == Label::Spoof {
            fooled += 1;
        }
    }
    Ok(fooled as f64 / samples.len() as f64)
}

/// Generates a feature-level UAP against a frozen snapshot from the stage's
/// bona fide training features. See the module docs for the loop contract.
pub fn generate_uap(
    snapshot: &ClassifierSnapshot,
    reals: &[FeatureMatrix],
    cfg: &UapGenConfig,
) -> Result<UapRecord> {
    generate_uap_traced(snapshot, reals, cfg, None)
}

/// As [`generate_uap`], additionally recording per-iteration statistics
/// (budget norm and full-set fake-label cross-entropy). Tracing runs the
/// full forward set every iteration; use it on small inputs.
pub fn generate_uap_traced(
    snapshot: &ClassifierSnapshot,
    reals: &[FeatureMatrix],
    cfg: &UapGenConfig,
    mut trace: Option<&mut Vec<IterStat>>,
) -> Result<UapRecord> {
    cfg.validate()?;
    if cfg.level != UapLevel::Feature {
        return Err(Error::InvalidConfig(
            "generate_uap builds feature-level perturbations; use generate_uap_waveform".into(),
        ));
    }
    check_all_bona_fide(reals)?;
    let shape = reals[0].frames.shape().to_vec();
    for f in reals {
        if f.frames.shape() != shape {
            return Err(Error::shape(
                "generate_uap",
                format!("{shape:?}"),
                format!("{:?}", f.frames.shape()),
            ));
        }
    }
    let mut rng = stream(cfg.seed, salt::UAP_GEN);

    let grad_fn = |p: &Tensor, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let idx = batch_indices(rng, reals.len(), cfg.batch_size);
        let mut tape = Tape::new();
        let bound = snapshot.params().bind(&mut tape, false);
        let pv = tape.param(p.clone());
        let mut logits = Vec::with_capacity(idx.len());
        for i in idx {
            let x = tape.leaf(reals[i].frames.clone());
            let xp = tape.add(x, pv)?;
            let out = snapshot.params().forward(&mut tape, &bound, xp, None)?;
            logits.push(out.logit);
        }
        let z = tape.stack_scalars(&logits)?;
        let y = tape.leaf(Tensor::vector(vec![1.0; z_len(&tape, z)?]));
        let loss = tape.bce_with_logits(z, y)?;
        tape.backward(loss)?;
        tape.grad(pv)
    };
    let fool_fn = |p: &Tensor| fooling_rate(snapshot, reals, p);
    let ce_fn = |p: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for f in reals {
            let perturbed = apply_uap(&f.frames, p)?;
            let (logit, _) = snapshot.params().eval_forward(&perturbed)?;
            total += fake_ce(logit);
        }
        Ok(total / reals.len() as f64)
    };

    let before = snapshot.checksum();
    let out = run_uap_loop(&shape, cfg, &mut rng, grad_fn, fool_fn, ce_fn, trace.as_deref_mut())?;
    debug_assert_eq!(snapshot.checksum(), before);
    Ok(UapRecord {
        perturbation: out.p,
        stage_index: snapshot.stage(),
        level: UapLevel::Feature,
        epsilon: cfg.epsilon,
        achieved_fooling_rate: out.fooling,
        iterations_used: out.iterations,
        converged: out.converged,
    })
}

/// Generates a waveform-level UAP. The perturbation lives on raw samples
/// and is clamped there; every sample's crop sees it divided by that clip's
/// ingestion scale, and the gradient flows through the scale and the frozen
/// extractor into it.
pub fn generate_uap_waveform(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    samples: &[WaveformSample],
    cfg: &UapGenConfig,
) -> Result<UapRecord> {
    cfg.validate()?;
    if cfg.level != UapLevel::Waveform {
        return Err(Error::InvalidConfig(
            "generate_uap_waveform requires level = waveform".into(),
        ));
    }
    if samples.is_empty() {
        return Err(Error::EmptyInput("generate_uap_waveform"));
    }
    let len = samples[0].crop.samples.len();
    for s in samples {
        if s.crop.label != Label::BonaFide {
            return Err(Error::InvalidConfig(
                "waveform UAP generation expects bona fide clips only".into(),
            ));
        }
        if s.crop.samples.len() != len {
            return Err(Error::shape(
                "generate_uap_waveform",
                format!("[{len}]"),
                format!("[{}]", s.crop.samples.len()),
            ));
        }
        if !(s.scale > 0.0 && s.scale.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "ingestion scale must be positive and finite, got {}",
                s.scale
            )));
        }
    }
    let mut rng = stream(cfg.seed, salt::UAP_GEN);

    let grad_fn = |p: &Tensor, rng: &mut ChaCha8Rng| -> Result<Tensor> {
        let idx = batch_indices(rng, samples.len(), cfg.batch_size);
        let mut tape = Tape::new();
        let bound = snapshot.params().bind(&mut tape, false);
        let pv = tape.param(p.clone());
        let mut logits = Vec::with_capacity(idx.len());
        for i in idx {
            let x = tape.leaf(Tensor::vector(samples[i].crop.samples.clone()));
            let scaled = tape.scale(pv, 1.0 / samples[i].scale)?;
            let xp = tape.add(x, scaled)?;
            let feats = extractor.extract_on_tape(&mut tape, xp)?;
            let out = snapshot.params().forward(&mut tape, &bound, feats, None)?;
            logits.push(out.logit);
        }
        let z = tape.stack_scalars(&logits)?;
        let y = tape.leaf(Tensor::vector(vec![1.0; z_len(&tape, z)?]));
        let loss = tape.bce_with_logits(z, y)?;
        tape.backward(loss)?;
        tape.grad(pv)
    };
    let fool_fn = |p: &Tensor| fooling_rate_waveform(snapshot, extractor, samples, p);
    let ce_fn = |p: &Tensor| -> Result<f64> {
        let mut total = 0.0;
        for s in samples {
            let feats = extractor.extract(&perturb_crop(&s.crop, p, s.scale)?)?;
            let (logit, _) = snapshot.params().eval_forward(&feats.frames)?;
            total += fake_ce(logit);
        }
        Ok(total / samples.len() as f64)
    };

    let before = (snapshot.checksum(), extractor.checksum());
    let out = run_uap_loop(&[len], cfg, &mut rng, grad_fn, fool_fn, ce_fn, None)?;
    debug_assert_eq!((snapshot.checksum(), extractor.checksum()), before);
    Ok(UapRecord {
        perturbation: out.p,
        stage_index: snapshot.stage(),
        level: UapLevel::Waveform,
        epsilon: cfg.epsilon,
        achieved_fooling_rate: out.fooling,
        iterations_used: out.iterations,
        converged: out.converged,
    })
}

struct LoopOut {
    p: Tensor,
    iterations: usize,
    fooling: f64,
    converged: bool,
}

/// The shared generation loop. `grad_fn` returns the mini-batch gradient of
/// the fake-label cross-entropy at `p`; `fool_fn` scores the full set;
/// `ce_fn` is only consulted when tracing.
fn run_uap_loop<G, F, C>(
    shape: &[usize],
    cfg: &UapGenConfig,
    rng: &mut ChaCha8Rng,
    mut grad_fn: G,
    mut fool_fn: F,
    mut ce_fn: C,
    mut trace: Option<&mut Vec<IterStat>>,
) -> Result<LoopOut>
where
    G: FnMut(&Tensor, &mut ChaCha8Rng) -> Result<Tensor>,
    F: FnMut(&Tensor) -> Result<f64>,
    C: FnMut(&Tensor) -> Result<f64>,
{
    let mut p = Tensor::zeros(shape);
    let mut last_fooling = 0.0;
    for iter in 1..=cfg.max_iters {
        let grad = grad_fn(&p, rng)?;
        {
            let data = p.data_mut();
            for (v, g) in data.iter_mut().zip(grad.data()) {
                // sgn(0) = 0: coordinates with an exactly zero gradient stay
                // where they are.
                *v -= cfg.alpha * sgn(*g);
            }
        }
        p = project_linf(&p, cfg.epsilon)?;
        if let Some(tr) = trace.as_deref_mut() {
            tr.push(IterStat { linf: p.linf(), full_ce: ce_fn(&p)? });
        }
        if iter % cfg.check_every == 0 || iter == cfg.max_iters {
            last_fooling = fool_fn(&p)?;
            if last_fooling >= cfg.sigma {
                return Ok(LoopOut { p, iterations: iter, fooling: last_fooling, converged: true });
            }
        }
    }
    Ok(LoopOut {
        p,
        iterations: cfg.max_iters,
        fooling: last_fooling,
        converged: false,
    })
}

fn sgn(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Numerically stable BCE of one logit against the fake label 1.
fn fake_ce(logit: f64) -> f64 {
    logit.max(0.0) - logit + (-logit.abs()).exp().ln_1p()
}

/// Applies a raw-domain perturbation to an ingestion-normalized crop:
/// sample i becomes `crop[i] + p[i] / scale`. The normalization statistics
/// are the stored clip's own (they are computed before any perturbation
/// exists), so raw addition turns into exactly this scaled addition.
pub(crate) fn perturb_crop(c: &RawClip, p: &Tensor, scale: f64) -> Result<RawClip> {
    if p.rank() != 1 || p.numel() != c.samples.len() {
        return Err(Error::shape(
            "perturb_crop",
            format!("[{}]", c.samples.len()),
            format!("{:?}", p.shape()),
        ));
    }
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidConfig(format!(
            "ingestion scale must be positive and finite, got {scale}"
        )));
    }
    Ok(RawClip {
        samples: c.samples.iter().zip(p.data()).map(|(a, b)| a + b / scale).collect(),
        ..c.clone()
    })
}

fn batch_indices(rng: &mut ChaCha8Rng, n: usize, batch: usize) -> Vec<usize> {
    if batch >= n {
        (0..n).collect()
    } else {
        rand::seq::index::sample(rng, n, batch).into_vec()
    }
}

fn check_all_bona_fide(reals: &[FeatureMatrix]) -> Result<()> {
    if reals.is_empty() {
        return Err(Error::EmptyInput("fooling_rate"));
    }
    if reals.iter().any(|f| f.label != Label::BonaFide) {
        return Err(Error::InvalidConfig(
            "fooling rate is defined over bona fide samples only".into(),
        ));
    }
    Ok(())
}

fn z_len(tape: &Tape, z: crate::tensor::Val) -> Result<usize> {
    Ok(tape.value(z)?.numel())
}

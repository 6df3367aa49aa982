//! The trainable detector: encoder blocks over frame features, temporal
//! mean pooling, dropout, and a single-logit head.
//!
//! Each encoder block is multi-head self-attention plus a tanh feed-forward
//! net, both with residual connections followed by layer norm. The pooled
//! pre-dropout embedding doubles as the knowledge-distillation tap. There is
//! no positional encoding: the synthetic features carry no meaningful frame
//! order, and none of the losses need one.
//!
//! Parameters bind onto a caller's [`Tape`] once per step ([`bind`]), so a
//! whole batch shares one set of tracked tensors and gradients accumulate
//! across samples automatically.
//!
//! [`bind`]: ClassifierParams::bind

mod ckpt;

pub use ckpt::{load_checkpoint, save_checkpoint};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Label;
use crate::error::{Error, Result};
use crate::rng::{salt, stream};
use crate::tensor::{Tape, Tensor, Val};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub n_blocks: usize,
    pub n_heads: usize,
    pub model_dim: usize,
    pub ff_dim: usize,
    /// Feature dimension D of the incoming T x D matrices.
    pub input_dim: usize,
    pub dropout_p: f64,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        ClassifierConfig {
            n_blocks: 2,
            n_heads: 2,
            model_dim: 8,
            ff_dim: 16,
            input_dim: 8,
            dropout_p: 0.2,
            seed: 0,
        }
    }
}

impl ClassifierConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_blocks == 0 || self.n_heads == 0 || self.model_dim == 0 || self.ff_dim == 0 {
            return Err(Error::InvalidConfig(
                "classifier dimensions must all be positive".into(),
            ));
        }
        if self.model_dim % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "model_dim {} not divisible by n_heads {}",
                self.model_dim, self.n_heads
            )));
        }
        if self.input_dim == 0 {
            return Err(Error::InvalidConfig("input_dim must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::InvalidConfig(format!(
                "dropout_p must lie in [0, 1), got {}",
                self.dropout_p
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
struct BlockParams {
    /// Per-head projections, each model_dim x head_dim, no biases.
    wq: Vec<Tensor>,
    wk: Vec<Tensor>,
    wv: Vec<Tensor>,
    /// Output mix, model_dim x model_dim.
    wo: Tensor,
    ln1_gamma: Tensor,
    ln1_beta: Tensor,
    w1: Tensor,
    b1: Tensor,
    w2: Tensor,
    b2: Tensor,
    ln2_gamma: Tensor,
    ln2_beta: Tensor,
}

/// All trainable tensors plus the config they were built for.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    config: ClassifierConfig,
    /// input_dim x model_dim, no bias.
    input_proj: Tensor,
    blocks: Vec<BlockParams>,
    /// Length model_dim; the single-logit head has no bias.
    head: Tensor,
}

/// Tape handles for one binding of the parameters, in the same fixed order
/// as [`ClassifierParams::tensors`].
pub struct BoundParams {
    vals: Vec<Val>,
    n_heads: usize,
}

/// The three tape values a forward pass yields. `logit` is the training
/// logit (dropout applied in train mode); `clean_logit` is the same head on
/// the un-dropped embedding (identical node in eval mode); `pooled` is the
/// pre-dropout mean-pooled last-block embedding, the distillation tap.
pub struct ForwardOut {
    pub logit: Val,
    pub clean_logit: Val,
    pub pooled: Val,
}

impl ClassifierParams {
    /// Glorot-uniform initialization: every weight matrix is drawn uniformly
    /// from ±sqrt(6/(fan_in+fan_out)); biases start at 0, layer-norm gains
    /// at 1. Fully determined by `config.seed`.
    pub fn init(config: &ClassifierConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = stream(config.seed, salt::INIT);
        let m = config.model_dim;
        let dh = config.head_dim();
        let input_proj = xavier(&mut rng, config.input_dim, m)?;
        let mut blocks = Vec::with_capacity(config.n_blocks);
        for _ in 0..config.n_blocks {
            let mut wq = Vec::with_capacity(config.n_heads);
            let mut wk = Vec::with_capacity(config.n_heads);
            let mut wv = Vec::with_capacity(config.n_heads);
            for _ in 0..config.n_heads {
                wq.push(xavier(&mut rng, m, dh)?);
                wk.push(xavier(&mut rng, m, dh)?);
                wv.push(xavier(&mut rng, m, dh)?);
            }
            blocks.push(BlockParams {
                wq,
                wk,
                wv,
                wo: xavier(&mut rng, m, m)?,
                ln1_gamma: Tensor::vector(vec![1.0; m]),
                ln1_beta: Tensor::vector(vec![0.0; m]),
                w1: xavier(&mut rng, m, config.ff_dim)?,
                b1: Tensor::vector(vec![0.0; config.ff_dim]),
                w2: xavier(&mut rng, config.ff_dim, m)?,
                b2: Tensor::vector(vec![0.0; m]),
                ln2_gamma: Tensor::vector(vec![1.0; m]),
                ln2_beta: Tensor::vector(vec![0.0; m]),
            });
        }
        let head = {
            let bound = (6.0 / (m as f64 + 1.0)).sqrt();
            Tensor::vector((0..m).map(|_| rng.gen_range(-bound..bound)).collect())
        };
        Ok(ClassifierParams { config: config.clone(), input_proj, blocks, head })
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    /// All tensors with stable names, in the fixed order used by gradient
    /// collection, the optimizer, and the checkpoint format.
    pub fn tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        out.push(("input_proj".to_string(), &self.input_proj));
        for (b, blk) in self.blocks.iter().enumerate() {
            for h in 0..self.config.n_heads {
                out.push((format!("block{b}.head{h}.wq"), &blk.wq[h]));
                out.push((format!("block{b}.head{h}.wk"), &blk.wk[h]));
                out.push((format!("block{b}.head{h}.wv"), &blk.wv[h]));
            }
            out.push((format!("block{b}.wo"), &blk.wo));
            out.push((format!("block{b}.ln1_gamma"), &blk.ln1_gamma));
            out.push((format!("block{b}.ln1_beta"), &blk.ln1_beta));
            out.push((format!("block{b}.w1"), &blk.w1));
            out.push((format!("block{b}.b1"), &blk.b1));
            out.push((format!("block{b}.w2"), &blk.w2));
            out.push((format!("block{b}.b2"), &blk.b2));
            out.push((format!("block{b}.ln2_gamma"), &blk.ln2_gamma));
            out.push((format!("block{b}.ln2_beta"), &blk.ln2_beta));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Mutable view in the same order as [`tensors`](Self::tensors).
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out: Vec<&mut Tensor> = Vec::new();
        out.push(&mut self.input_proj);
        for blk in &mut self.blocks {
            for ((q, k), v) in blk.wq.iter_mut().zip(&mut blk.wk).zip(&mut blk.wv) {
                out.push(q);
                out.push(k);
                out.push(v);
            }
            out.push(&mut blk.wo);
            out.push(&mut blk.ln1_gamma);
            out.push(&mut blk.ln1_beta);
            out.push(&mut blk.w1);
            out.push(&mut blk.b1);
            out.push(&mut blk.w2);
            out.push(&mut blk.b2);
            out.push(&mut blk.ln2_gamma);
            out.push(&mut blk.ln2_beta);
        }
        out.push(&mut self.head);
        out
    }

    /// Combined order-dependent checksum over every tensor.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0x9e37_79b9_7f4a_7c15;
        for (_, t) in self.tensors() {
            h = h.rotate_left(7) ^ t.checksum();
        }
        h
    }

    /// Binds every tensor onto `tape`, tracked (`trainable`) or constant
    /// (teacher / frozen evaluation).
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundParams {
        let vals = self
            .tensors()
            .into_iter()
            .map(|(_, t)| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.leaf(t.clone())
                }
            })
            .collect();
        BoundParams { vals, n_heads: self.config.n_heads }
    }

    /// Runs the classifier over one T x D feature matrix already on the
    /// tape. Train mode is selected by passing the step's dropout stream;
    /// with `None` (eval) or `dropout_p == 0` the pass is deterministic and
    /// consumes no randomness.
    pub fn forward(
        &self,
        tape: &mut Tape,
        bound: &BoundParams,
        x: Val,
        dropout_rng: Option<&mut ChaCha8Rng>,
    ) -> Result<ForwardOut> {
        let shape = tape.value(x)?.shape().to_vec();
        if shape.len() != 2 || shape[1] != self.config.input_dim || shape[0] == 0 {
            return Err(Error::shape(
                "classifier forward",
                format!("[T >= 1, {}]", self.config.input_dim),
                format!("{shape:?}"),
            ));
        }
        let m = self.config.model_dim;
        let dh = self.config.head_dim();
        let mut cursor = bound.vals.iter().copied();
        let mut next = || cursor.next().expect("bound value order");

        let mut h = tape.matmul(x, next())?;
        for _ in 0..self.config.n_blocks {
            // Self-attention over frames, one (Q, K, V) triple per head.
            let mut head_outs = Vec::with_capacity(bound.n_heads);
            for _ in 0..bound.n_heads {
                let q = tape.matmul(h, next())?;
                let k = tape.matmul(h, next())?;
                let v = tape.matmul(h, next())?;
                let kt = tape.transpose(k)?;
                let scores = tape.matmul(q, kt)?;
                let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt())?;
                let attn = tape.softmax_rows(scaled)?;
                head_outs.push(tape.matmul(attn, v)?);
            }
            let concat = tape.concat_cols(&head_outs)?;
            let mixed = tape.matmul(concat, next())?;
            let res1 = tape.add(h, mixed)?;
            let (g1, b1) = (next(), next());
            h = tape.layer_norm(res1, g1, b1, LAYER_NORM_EPS)?;

            let ff_in = tape.matmul(h, next())?;
            let ff_b1 = tape.add_row(ff_in, next())?;
            let act = tape.tanh(ff_b1)?;
            let ff_out = tape.matmul(act, next())?;
            let ff_b2 = tape.add_row(ff_out, next())?;
            let res2 = tape.add(h, ff_b2)?;
            let (g2, b2) = (next(), next());
            h = tape.layer_norm(res2, g2, b2, LAYER_NORM_EPS)?;
        }
        let pooled = tape.mean_rows(h)?;
        let head = next();
        debug_assert!(cursor.next().is_none(), "all bound values consumed");

        let clean_logit = tape.dot(pooled, head)?;
        let logit = match dropout_rng {
            Some(rng) if self.config.dropout_p > 0.0 => {
                // Inverted dropout on the pooled embedding only: kept
                // coordinates are scaled by 1/(1-p) so eval needs no rescale.
                let p = self.config.dropout_p;
                let mask: Vec<f64> = (0..m)
                    .map(|_| if rng.gen::<f64>() < p { 0.0 } else { 1.0 / (1.0 - p) })
                    .collect();
                let mask = tape.leaf(Tensor::vector(mask));
                let dropped = tape.mul(pooled, mask)?;
                tape.dot(dropped, head)?
            }
            _ => clean_logit,
        };
        Ok(ForwardOut { logit, clean_logit, pooled })
    }

    /// Deterministic single-sample evaluation: (logit, pooled embedding).
    pub fn eval_forward(&self, frames: &Tensor) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.leaf(frames.clone());
        let out = self.forward(&mut tape, &bound, x, None)?;
        Ok((
            tape.value(out.logit)?.scalar_value()?,
            tape.value(out.pooled)?.clone(),
        ))
    }

    /// Decision rule: spoof iff logit > 0; a logit of exactly 0 counts as
    /// bona fide.
    pub fn predict(&self, frames: &Tensor) -> Result<Label> {
        let (logit, _) = self.eval_forward(frames)?;
        Ok(if logit > 0.0 { Label::Spoof } else { Label::BonaFide })
    }
}

impl BoundParams {
    /// Gradients after backward, in [`ClassifierParams::tensors`] order.
    pub fn grads(&self, tape: &Tape) -> Result<Vec<Tensor>> {
        self.vals.iter().map(|v| tape.grad(*v)).collect()
    }
}

/// Frozen copy of trained parameters, the distillation teacher and scoring
/// model for later stages. Immutable by construction: only shared access.
#[derive(Clone, Debug)]
pub struct ClassifierSnapshot {
    params: ClassifierParams,
    stage: usize,
}

impl ClassifierSnapshot {
    pub fn new(params: ClassifierParams, stage: usize) -> Self {
        ClassifierSnapshot { params, stage }
    }

    pub fn params(&self) -> &ClassifierParams {
        &self.params
    }

    pub fn stage(&self) -> usize {
        self.stage
    }

    pub fn checksum(&self) -> u64 {
        self.params.checksum()
    }
}

fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Result<Tensor> {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::from_vec(
        vec![rows, cols],
        (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_stream, synth_domain, FrozenExtractor, Split};
    use crate::rng::{salt as s, stream as mkstream};

    fn sample_frames(seed: u64) -> Tensor {
        let ex = FrozenExtractor::new(seed, 16, 8, 8).unwrap();
        let clips = synth_domain(&default_stream(seed)[0], Split::Dev).unwrap();
        ex.extract(&clips[0]).unwrap().frames
    }

    fn bits(t: &Tensor) -> Vec<u64> {
        t.data().iter().map(|v| v.to_bits()).collect()
    }

    #[test]
    fn init_is_seed_deterministic() {
        let cfg = ClassifierConfig { seed: 9, ..Default::default() };
        let a = ClassifierParams::init(&cfg).unwrap();
        let b = ClassifierParams::init(&cfg).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = ClassifierParams::init(&ClassifierConfig { seed: 10, ..cfg }).unwrap();
        assert_ne!(a.checksum(), c.checksum());
    }

    #[test]
    fn layer_norm_init_is_identity() {
        let p = ClassifierParams::init(&ClassifierConfig::default()).unwrap();
        for (name, t) in p.tensors() {
            if name.contains("ln") && name.contains("gamma") {
                assert!(t.data().iter().all(|v| *v == 1.0), "{name}");
            }
            if name.contains("ln") && name.contains("beta") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
            if name.ends_with(".b1") || name.ends_with(".b2") {
                assert!(t.data().iter().all(|v| *v == 0.0), "{name}");
            }
        }
    }

    #[test]
    fn init_logit_scale_is_bounded() {
        // Across many inits on a fixed realistic input, the untrained model
        // must not start saturated; otherwise early training gradients die.
        let frames = sample_frames(3);
        let mut worst: f64 = 0.0;
        for seed in 0..1000 {
            let cfg = ClassifierConfig { seed, ..Default::default() };
            let p = ClassifierParams::init(&cfg).unwrap();
            let (logit, _) = p.eval_forward(&frames).unwrap();
            worst = worst.max(logit.abs());
        }
        assert!(worst <= 5.0, "max init |logit| {worst}");
    }

    #[test]
    fn eval_forward_is_deterministic() {
        let p = ClassifierParams::init(&ClassifierConfig::default()).unwrap();
        let frames = sample_frames(4);
        let (l1, e1) = p.eval_forward(&frames).unwrap();
        let (l2, e2) = p.eval_forward(&frames).unwrap();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert_eq!(bits(&e1), bits(&e2));
    }

    #[test]
    fn zero_dropout_train_equals_eval_bitwise() {
        let cfg = ClassifierConfig { dropout_p: 0.0, ..Default::default() };
        let p = ClassifierParams::init(&cfg).unwrap();
        let frames = sample_frames(5);
        let (eval_logit, _) = p.eval_forward(&frames).unwrap();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let x = tape.leaf(frames.clone());
        let mut rng = mkstream(1, s::DROPOUT);
        let out = p.forward(&mut tape, &bound, x, Some(&mut rng)).unwrap();
        let train_logit = tape.value(out.logit).unwrap().scalar_value().unwrap();
        assert_eq!(train_logit.to_bits(), eval_logit.to_bits());
        // The stream must be untouched so disabled dropout cannot shift
        // later randomness.
        let mut fresh = mkstream(1, s::DROPOUT);
        assert_eq!(rng.gen::<u64>(), fresh.gen::<u64>());
    }

    #[test]
    fn dropout_perturbs_train_logit_but_not_tap() {
        let cfg = ClassifierConfig { dropout_p: 0.5, ..Default::default() };
        let p = ClassifierParams::init(&cfg).unwrap();
        let frames = sample_frames(6);
        let (eval_logit, eval_pooled) = p.eval_forward(&frames).unwrap();

        let mut tape = Tape::new();
        let bound = p.bind(&mut tape, false);
        let x = tape.leaf(frames.clone());
        let mut rng = mkstream(2, s::DROPOUT);
        let out = p.forward(&mut tape, &bound, x, Some(&mut rng)).unwrap();
        let train_logit = tape.value(out.logit).unwrap().scalar_value().unwrap();
        let clean = tape.value(out.clean_logit).unwrap().scalar_value().unwrap();
        let pooled = tape.value(out.pooled).unwrap().clone();
        assert_ne!(train_logit.to_bits(), eval_logit.to_bits());
        assert_eq!(clean.to_bits(), eval_logit.to_bits());
        assert_eq!(bits(&pooled), bits(&eval_pooled));
    }

    #[test]
    fn full_model_gradient_check() {
        let cfg = ClassifierConfig { dropout_p: 0.0, seed: 12, ..Default::default() };
        let params = ClassifierParams::init(&cfg).unwrap();
        let frames = sample_frames(12);
        let label = 1.0;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape, true);
        let x = tape.leaf(frames.clone());
        let out = params.forward(&mut tape, &bound, x, None).unwrap();
        let z = tape.stack_scalars(&[out.logit]).unwrap();
        let y = tape.leaf(Tensor::vector(vec![label]));
        let loss = tape.bce_with_logits(z, y).unwrap();
        tape.backward(loss).unwrap();
        let grads = bound.grads(&tape).unwrap();

        let eval_loss = |p: &ClassifierParams| -> f64 {
            let (logit, _) = p.eval_forward(&frames).unwrap();
            logit.max(0.0) - logit * label + (-logit.abs()).exp().ln_1p()
        };

        let h = 1e-6;
        let mut worst = 0.0_f64;
        for ti in 0..grads.len() {
            for i in 0..grads[ti].numel() {
                let mut plus = params.clone();
                plus.tensors_mut()[ti].data_mut()[i] += h;
                let mut minus = params.clone();
                minus.tensors_mut()[ti].data_mut()[i] -= h;
                let step = plus.tensors()[ti].1.data()[i] - minus.tensors()[ti].1.data()[i];
                let numeric = (eval_loss(&plus) - eval_loss(&minus)) / step;
                let a = grads[ti].data()[i];
                let err = (a - numeric).abs() / 1.0_f64.max(a.abs()).max(numeric.abs());
                worst = worst.max(err);
            }
        }
        assert!(worst <= 1e-5, "worst relative error {worst}");
    }

    #[test]
    fn batch_binding_accumulates_over_samples() {
        // Two samples on one tape must produce the sum of their individual
        // gradients (same binding, additive accumulation).
        let cfg = ClassifierConfig { dropout_p: 0.0, seed: 3, ..Default::default() };
        let params = ClassifierParams::init(&cfg).unwrap();
        let fa = sample_frames(21);
        let fb = sample_frames(22);

        let grad_of = |inputs: &[&Tensor]| -> Vec<Tensor> {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let mut logits = Vec::new();
            for f in inputs {
                let x = tape.leaf((*f).clone());
                let out = params.forward(&mut tape, &bound, x, None).unwrap();
                logits.push(out.logit);
            }
            let z = tape.stack_scalars(&logits).unwrap();
            let y = tape.leaf(Tensor::vector(vec![1.0; inputs.len()]));
            let loss = tape.bce_with_logits(z, y).unwrap();
            // Undo the batch mean so the sum of per-sample gradients is the
            // comparison target.
            let scaled = tape.scale(loss, inputs.len() as f64).unwrap();
            tape.backward(scaled).unwrap();
            bound.grads(&tape).unwrap()
        };

        let ga = grad_of(&[&fa]);
        let gb = grad_of(&[&fb]);
        let gab = grad_of(&[&fa, &fb]);
        for ((a, b), ab) in ga.iter().zip(&gb).zip(&gab) {
            for ((x, y), z) in a.data().iter().zip(b.data()).zip(ab.data()) {
                assert!((x + y - z).abs() <= 1e-12 * (1.0 + z.abs()), "{x} + {y} vs {z}");
            }
        }
    }

    #[test]
    fn predict_sign_rule_and_tie_break() {
        let cfg = ClassifierConfig { dropout_p: 0.0, ..Default::default() };
        let mut p = ClassifierParams::init(&cfg).unwrap();
        let frames = sample_frames(7);

        // Zero head forces logit exactly 0: the tie goes to bona fide.
        let last = p.tensors_mut().len() - 1;
        p.tensors_mut()[last].data_mut().iter_mut().for_each(|v| *v = 0.0);
        let (logit, _) = p.eval_forward(&frames).unwrap();
        assert_eq!(logit, 0.0);
        assert_eq!(p.predict(&frames).unwrap(), Label::BonaFide);
    }

    #[test]
    fn doubling_head_never_flips_nonzero_predictions() {
        let cfg = ClassifierConfig { dropout_p: 0.0, seed: 8, ..Default::default() };
        let base = ClassifierParams::init(&cfg).unwrap();
        let mut doubled = base.clone();
        let last = doubled.tensors_mut().len() - 1;
        doubled.tensors_mut()[last].data_mut().iter_mut().for_each(|v| *v *= 2.0);

        let ex = FrozenExtractor::new(8, 16, 8, 8).unwrap();
        let clips = synth_domain(&default_stream(8)[0], Split::Dev).unwrap();
        let mut checked = 0;
        for clip in clips.iter().take(40) {
            let frames = ex.extract(clip).unwrap().frames;
            let (logit, _) = base.eval_forward(&frames).unwrap();
            if logit != 0.0 {
                assert_eq!(
                    base.predict(&frames).unwrap(),
                    doubled.predict(&frames).unwrap()
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn wrong_input_width_is_rejected() {
        let p = ClassifierParams::init(&ClassifierConfig::default()).unwrap();
        let bad = Tensor::zeros(&[5, 7]);
        assert!(matches!(
            p.eval_forward(&bad),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn snapshot_unaffected_by_later_training() {
        let cfg = ClassifierConfig { seed: 5, ..Default::default() };
        let mut params = ClassifierParams::init(&cfg).unwrap();
        let snap = ClassifierSnapshot::new(params.clone(), 1);
        let before = snap.checksum();
        for t in params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|v| *v += 0.25);
        }
        assert_eq!(snap.checksum(), before);
        assert_ne!(params.checksum(), before);
    }
}

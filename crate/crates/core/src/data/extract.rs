//! The frozen front end that turns raw samples into frame-level features.
//!
//! A fixed random linear map over sliding windows followed by tanh stands in
//! for a pretrained convolutional feature extractor: it is seeded once per
//! experiment, never trained, and shared by every stage. Waveform-level
//! perturbations must pass through it, which is exactly the structural
//! property the experiments probe.

use rand_distr::{Distribution, StandardNormal};

use crate::data::{FeatureMatrix, Provenance, RawClip};
use crate::error::{Error, Result};
use crate::rng::{salt, stream};
use crate::tensor::{Tape, Tensor, Val};

#[derive(Clone, Debug)]
pub struct FrozenExtractor {
    /// W x D projection applied to each window.
    projection: Tensor,
    frame_width: usize,
    hop: usize,
}

impl FrozenExtractor {
    /// Draws the projection from the experiment seed. Entries are Gaussian
    /// with standard deviation 1/sqrt(W), so window projections of
    /// unit-variance input land in tanh's responsive range.
    pub fn new(seed: u64, frame_width: usize, hop: usize, dim: usize) -> Result<Self> {
        Self::with_gain(seed, frame_width, hop, dim, 1.0)
    }

    /// Like `new` with the projection scaled by `gain`. Gains above 1 push
    /// pre-activations into tanh saturation, which makes the front end's
    /// response to additive raw-sample signals strongly input-dependent —
    /// the property that separates waveform-level from feature-level
    /// perturbations.
    pub fn with_gain(
        seed: u64,
        frame_width: usize,
        hop: usize,
        dim: usize,
        gain: f64,
    ) -> Result<Self> {
        if frame_width == 0 || hop == 0 || dim == 0 {
            return Err(Error::InvalidConfig(format!(
                "extractor needs positive frame width, hop and dim, got {frame_width}, {hop}, {dim}"
            )));
        }
        if !(gain > 0.0) || !gain.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "extractor gain must be positive and finite, got {gain}"
            )));
        }
        let mut rng = stream(seed, salt::EXTRACTOR);
        let scale = gain / (frame_width as f64).sqrt();
        let data: Vec<f64> = (0..frame_width * dim)
            .map(|_| <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng) * scale)
            .collect();
        Ok(FrozenExtractor {
            projection: Tensor::from_vec(vec![frame_width, dim], data)?,
            frame_width,
            hop,
        })
    }

    pub fn frame_width(&self) -> usize {
        self.frame_width
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn dim(&self) -> usize {
        self.projection.shape()[1]
    }

    /// Frames per clip of length `l`: floor((L - W) / H) + 1.
    pub fn n_frames(&self, l: usize) -> Result<usize> {
        if l < self.frame_width {
            return Err(Error::ClipTooShort { len: l, min: self.frame_width });
        }
        Ok((l - self.frame_width) / self.hop + 1)
    }

    /// Order-dependent checksum of the projection, used to assert the
    /// extractor is never mutated.
    pub fn checksum(&self) -> u64 {
        self.projection.checksum()
    }

    /// Maps a clip to its T x D feature matrix: tanh of the projected
    /// sliding windows. Tags are copied from the clip.
    pub fn extract(&self, clip: &RawClip) -> Result<FeatureMatrix> {
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::vector(clip.samples.clone()));
        let out = self.extract_on_tape(&mut tape, x)?;
        Ok(FeatureMatrix {
            frames: tape.value(out)?.clone(),
            label: clip.label,
            domain_id: clip.domain_id,
            attack_id: clip.attack_id,
            provenance: Provenance::Real,
        })
    }

    /// Same computation expressed on a caller-provided tape, so gradients
    /// can flow through the (constant) extractor back to the raw signal.
    pub fn extract_on_tape(&self, tape: &mut Tape, samples: Val) -> Result<Val> {
        let frames = tape.frame_signal(samples, self.frame_width, self.hop)?;
        let proj = tape.leaf(self.projection.clone());
        let mixed = tape.matmul(frames, proj)?;
        tape.tanh(mixed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Label;

    fn clip(samples: Vec<f64>) -> RawClip {
        RawClip { samples, label: Label::BonaFide, domain_id: 1, attack_id: 0 }
    }

    #[test]
    fn zero_clip_gives_zero_features() {
        let ex = FrozenExtractor::new(7, 16, 8, 8).unwrap();
        let f = ex.extract(&clip(vec![0.0; 256])).unwrap();
        assert_eq!(f.frames.shape(), &[31, 8]);
        assert!(f.frames.data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn unit_framing_is_elementwise_tanh() {
        // W = H = 1 with a 1x1 projection of exactly 1 reduces the extractor
        // to tanh over samples. Overwrite the random projection by scaling a
        // dedicated extractor is not possible, so build one with dim 1 and
        // compare against tanh(samples * p) with the drawn p.
        let ex = FrozenExtractor::new(3, 1, 1, 1).unwrap();
        let samples = vec![0.0, 0.5, -1.0, 2.0];
        let f = ex.extract(&clip(samples.clone())).unwrap();
        assert_eq!(f.frames.shape(), &[4, 1]);
        let p = {
            // Recover the scalar projection through the zero-preserving map:
            // feature(tanh) of sample 1.0 equals tanh(p).
            let probe = ex.extract(&clip(vec![1.0])).unwrap();
            probe.frames.data()[0].atanh()
        };
        for (s, got) in samples.iter().zip(f.frames.data()) {
            assert!((got - (s * p).tanh()).abs() < 1e-12);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = FrozenExtractor::new(42, 16, 8, 8).unwrap();
        let b = FrozenExtractor::new(42, 16, 8, 8).unwrap();
        assert_eq!(a.checksum(), b.checksum());
        let c = clip((0..64).map(|i| (i as f64 * 0.21).cos()).collect());
        let fa = a.extract(&c).unwrap();
        let fb = b.extract(&c).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&fa.frames), bits(&fb.frames));

        let other = FrozenExtractor::new(43, 16, 8, 8).unwrap();
        assert_ne!(a.checksum(), other.checksum());
    }

    #[test]
    fn short_clip_is_rejected() {
        let ex = FrozenExtractor::new(7, 16, 8, 8).unwrap();
        assert!(matches!(
            ex.extract(&clip(vec![0.0; 10])),
            Err(Error::ClipTooShort { len: 10, min: 16 })
        ));
    }

    #[test]
    fn extraction_leaves_projection_untouched() {
        let ex = FrozenExtractor::new(7, 16, 8, 8).unwrap();
        let before = ex.checksum();
        for i in 0..5 {
            let c = clip((0..64).map(|j| ((i * 64 + j) as f64 * 0.3).sin()).collect());
            ex.extract(&c).unwrap();
        }
        assert_eq!(ex.checksum(), before);
    }

    #[test]
    fn frame_count_formula() {
        let ex = FrozenExtractor::new(7, 16, 8, 8).unwrap();
        assert_eq!(ex.n_frames(256).unwrap(), 31);
        assert_eq!(ex.n_frames(16).unwrap(), 1);
        assert!(ex.n_frames(15).is_err());
    }
}

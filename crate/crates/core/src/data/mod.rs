//! Synthetic labeled audio-like data and its feature pipeline.
//!
//! Clips are short f64 sample sequences with a bona-fide/spoof label and a
//! domain tag. The pipeline is: generate ([`synth_domain`]), standardize
//! per clip ([`normalize_sample`]), cut fixed-length segments
//! ([`crop_segments`]), and map each segment to a T x D feature matrix with
//! the [`FrozenExtractor`]. Everything is pure given the seeds, so any stage
//! of the pipeline can be regenerated bit-identically.

mod extract;
mod io;
mod synth;

pub use extract::FrozenExtractor;
pub use io::{load_clips, load_features, save_clips, save_features};
pub use synth::{
    default_stream, hadamard_row, synth_domain, AttackCluster, DomainSpec, SplitCounts,
};

use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

/// Binary ground truth. Bona fide is genuine audio (numeric label 0), spoof
/// is synthesized or converted audio (numeric label 1).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    BonaFide,
    Spoof,
}

impl Label {
    pub fn as_f64(self) -> f64 {
        match self {
            Label::BonaFide => 0.0,
            Label::Spoof => 1.0,
        }
    }

    pub fn as_u8(self) -> u8 {
        match self {
            Label::BonaFide => 0,
            Label::Spoof => 1,
        }
    }

    pub fn from_u8(v: u8) -> crate::Result<Self> {
        match v {
            0 => Ok(Label::BonaFide),
            1 => Ok(Label::Spoof),
            other => Err(crate::Error::InvalidLabel(other as f64)),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Label::BonaFide => "bona_fide",
            Label::Spoof => "spoof",
        }
    }
}

/// Dataset split. Splits of one domain draw from disjoint random streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub(crate) fn stream_index(self) -> u64 {
        match self {
            Split::Train => 0,
            Split::Dev => 1,
            Split::Eval => 2,
        }
    }
}

/// Where a feature matrix came from: a real clip, or a rehearsal sample
/// manufactured from a bona-fide clip plus a pooled perturbation generated
/// after `source_stage`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Real,
    Pseudo { source_stage: usize },
}

/// A raw sample sequence with its label and provenance tags. `attack_id` is
/// 0 for bona fide clips and a per-cluster id for spoofs, so evaluation can
/// break results down by attack cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct RawClip {
    pub samples: Vec<f64>,
    pub label: Label,
    pub domain_id: usize,
    pub attack_id: u32,
}

/// Frame-level features for one segment: a T x D tensor plus the clip's
/// tags. This is the unit the classifier consumes.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub frames: Tensor,
    pub label: Label,
    pub domain_id: usize,
    pub attack_id: u32,
    pub provenance: Provenance,
}

/// Population standard deviation of the raw samples, clamped below at 1e-8:
/// the scale [`normalize_sample`] divides by. Anything added to the stored
/// raw samples is attenuated by exactly this factor on ingestion, which is
/// how waveform-level perturbations reach the model.
pub fn ingest_scale(clip: &RawClip) -> f64 {
    let n = clip.samples.len() as f64;
    let mean = clip.samples.iter().sum::<f64>() / n;
    let var = clip.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    var.sqrt().max(1e-8)
}

/// Standardizes a clip to zero mean and unit population standard deviation.
/// The deviation is clamped below at 1e-8, so a constant clip maps to all
/// zeros instead of dividing by zero.
pub fn normalize_sample(clip: &RawClip) -> RawClip {
    let n = clip.samples.len() as f64;
    let mean = clip.samples.iter().sum::<f64>() / n;
    let s = ingest_scale(clip);
    RawClip {
        samples: clip.samples.iter().map(|v| (v - mean) / s).collect(),
        ..clip.clone()
    }
}

/// Cuts `n_crops` segments of exactly `crop_len` samples. Clips shorter than
/// `crop_len` are right-padded with zeros (after which all crops coincide);
/// otherwise crop starts are spread evenly over the valid offset range
/// `0..=L-crop_len`, start i = floor(i * (L - crop_len) / (n_crops - 1)).
pub fn crop_segments(clip: &RawClip, crop_len: usize, n_crops: usize) -> Vec<RawClip> {
    assert!(crop_len >= 1 && n_crops >= 1, "crop_len and n_crops must be positive");
    let l = clip.samples.len();
    let starts: Vec<usize> = if l <= crop_len || n_crops == 1 {
        vec![0; n_crops]
    } else {
        (0..n_crops).map(|i| i * (l - crop_len) / (n_crops - 1)).collect()
    };
    starts
        .into_iter()
        .map(|s| {
            let mut samples: Vec<f64> =
                clip.samples[s..(s + crop_len).min(l)].to_vec();
            samples.resize(crop_len, 0.0);
            RawClip { samples, ..clip.clone() }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(samples: Vec<f64>) -> RawClip {
        RawClip { samples, label: Label::BonaFide, domain_id: 1, attack_id: 0 }
    }

    #[test]
    fn normalize_two_points() {
        let out = normalize_sample(&clip(vec![1.0, 3.0]));
        assert!((out.samples[0] + 1.0).abs() < 1e-12);
        assert!((out.samples[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ingest_scale_is_the_normalization_divisor() {
        let raw = clip((0..64).map(|i| (i as f64 * 0.37).cos() * 2.5 - 0.4).collect());
        let s = ingest_scale(&raw);
        let n = raw.samples.len() as f64;
        let mean = raw.samples.iter().sum::<f64>() / n;
        let normalized = normalize_sample(&raw);
        for (r, z) in raw.samples.iter().zip(&normalized.samples) {
            assert_eq!(((r - mean) / s).to_bits(), z.to_bits());
        }
        // Constant clips hit the 1e-8 floor rather than reporting zero.
        assert_eq!(ingest_scale(&clip(vec![7.0, 7.0, 7.0])), 1e-8);
    }

    #[test]
    fn normalize_constant_clip_to_zeros() {
        let out = normalize_sample(&clip(vec![7.0, 7.0, 7.0]));
        assert_eq!(out.samples, vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn normalize_statistics_and_idempotence() {
        let samples: Vec<f64> = (0..100).map(|i| (i as f64 * 0.13).sin() * 3.0 + 1.7).collect();
        let once = normalize_sample(&clip(samples));
        let n = once.samples.len() as f64;
        let mean = once.samples.iter().sum::<f64>() / n;
        let var = once.samples.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 1e-10, "mean {mean}");
        assert!((var - 1.0).abs() < 1e-10, "var {var}");

        let twice = normalize_sample(&once);
        for (a, b) in once.samples.iter().zip(&twice.samples) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn crop_pads_short_clips() {
        let out = crop_segments(&clip(vec![1.0, 2.0]), 4, 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].samples, vec![1.0, 2.0, 0.0, 0.0]);
    }

    #[test]
    fn crop_exact_length_repeats_full_clip() {
        let out = crop_segments(&clip(vec![1.0, 2.0, 3.0, 4.0]), 4, 3);
        assert_eq!(out.len(), 3);
        for c in &out {
            assert_eq!(c.samples, vec![1.0, 2.0, 3.0, 4.0]);
        }
    }

    #[test]
    fn crop_starts_evenly_spaced() {
        // L=10, crop 4, 3 crops: starts floor(i * 6 / 2) = 0, 3, 6.
        let samples: Vec<f64> = (0..10).map(f64::from).collect();
        let out = crop_segments(&clip(samples), 4, 3);
        assert_eq!(out[0].samples, vec![0.0, 1.0, 2.0, 3.0]);
        assert_eq!(out[1].samples, vec![3.0, 4.0, 5.0, 6.0]);
        assert_eq!(out[2].samples, vec![6.0, 7.0, 8.0, 9.0]);
    }

    #[test]
    fn crop_preserves_tags() {
        let c = RawClip { samples: vec![1.0; 8], label: Label::Spoof, domain_id: 2, attack_id: 21 };
        let out = crop_segments(&c, 4, 2);
        for seg in out {
            assert_eq!(seg.label, Label::Spoof);
            assert_eq!(seg.domain_id, 2);
            assert_eq!(seg.attack_id, 21);
        }
    }
}

//! Seeded synthetic domain generation.
//!
//! Each domain draws clips from a small family of periodic patterns plus
//! Gaussian noise. Bona fide clips share one carrier pattern across all
//! domains (optionally drifted), while every domain owns private spoof
//! patterns built from mutually orthogonal Hadamard rows at the same
//! amplitude and noise level as the carrier — so a detector fit to one
//! domain keys on that domain's directions and has no energy shortcut that
//! would generalize to the next, which is the forgetting setup the
//! continual experiments need.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Label, RawClip, Split};
use crate::error::{Error, Result};
use crate::rng::{salt, stream2};

/// One spoof cluster: a length-D periodic pattern (amplitude included) and
/// the standard deviation of the additive noise around it.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackCluster {
    pub mean: Vec<f64>,
    pub scale: f64,
}

/// Clip counts per split as (bona fide, spoof) pairs.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SplitCounts {
    pub train: (usize, usize),
    pub dev: (usize, usize),
    pub eval: (usize, usize),
}

impl SplitCounts {
    pub fn for_split(&self, split: Split) -> (usize, usize) {
        match split {
            Split::Train => self.train,
            Split::Dev => self.dev,
            Split::Eval => self.eval,
        }
    }
}

/// Full recipe for one synthetic domain. Serializes as JSON so domain sets
/// can be described in experiment configs and on the command line.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainSpec {
    pub domain_id: usize,
    /// Length-D periodic pattern tiled over the clip for bona fide audio.
    pub bona_fide_mean: Vec<f64>,
    pub bona_fide_scale: f64,
    /// Strength of the domain-indexed shift of the bona fide pattern. The
    /// shift runs along a fixed zero-mean direction (a spare Hadamard row),
    /// not a constant offset, so per-clip normalization cannot cancel it.
    pub bona_fide_drift: f64,
    pub attack_clusters: Vec<AttackCluster>,
    pub counts: SplitCounts,
    pub seed: u64,
    pub clip_len: usize,
}

impl DomainSpec {
    pub fn validate(&self) -> Result<()> {
        if self.attack_clusters.is_empty() {
            return Err(Error::InvalidConfig(format!(
                "domain {} has no attack clusters",
                self.domain_id
            )));
        }
        let d = self.bona_fide_mean.len();
        if d == 0 {
            return Err(Error::InvalidConfig("empty bona fide pattern".into()));
        }
        if !(self.bona_fide_scale > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "bona fide scale must be positive, got {}",
                self.bona_fide_scale
            )));
        }
        for (k, c) in self.attack_clusters.iter().enumerate() {
            if c.mean.len() != d {
                return Err(Error::InvalidConfig(format!(
                    "cluster {k} pattern length {} != bona fide length {d}",
                    c.mean.len()
                )));
            }
            if !(c.scale > 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "cluster {k} scale must be positive, got {}",
                    c.scale
                )));
            }
        }
        for split in Split::ALL {
            let (r, f) = self.counts.for_split(split);
            if r == 0 || f == 0 {
                return Err(Error::InvalidConfig(format!(
                    "domain {} {} split needs clips of both labels, got {r} real / {f} fake",
                    self.domain_id,
                    split.name()
                )));
            }
        }
        if self.clip_len == 0 {
            return Err(Error::InvalidConfig("clip_len must be positive".into()));
        }
        Ok(())
    }

    /// Attack id for cluster `k` of this domain: distinct across all
    /// domains and never 0 (0 is reserved for bona fide).
    pub fn attack_id(&self, cluster: usize) -> u32 {
        (self.domain_id * 10 + cluster + 1) as u32
    }
}

/// Row `k` of the order-`d` Hadamard matrix (d a power of two), entries
/// +1/-1 via the parity of popcount(k & i). Rows 1..d are zero-mean and
/// mutually orthogonal — the source of per-domain spoof directions.
pub fn hadamard_row(k: usize, d: usize) -> Vec<f64> {
    assert!(d.is_power_of_two() && k < d, "need k < d with d a power of two");
    (0..d)
        .map(|i| if (k & i).count_ones() % 2 == 0 { 1.0 } else { -1.0 })
        .collect()
}

/// The default three-domain desk stream over D=8 patterns.
///
/// The construction mimics channel drift across recording conditions:
///
/// * Bona fide clips carry a channel pattern. Domain 1's channel is the
///   spare Hadamard row 7; every later domain's channel leans toward the
///   *previous* domain's primary spoof row (weights 0.9/sqrt(0.19)), so
///   each new domain's genuine audio lands close to the spoof cluster the
///   detector just learned. Fine-tuning on the new domain must relabel
///   that neighborhood bona fide, which is the catastrophic-forgetting
///   pressure the continual experiments need.
/// * Spoof clips keep 0.8 of their domain's channel and add 0.6 of a
///   private artifact: domain 1 rows (1, 5), domain 2 rows (2, 6), domain
///   3 rows (4, 3), the second cluster mixing its rows 0.8/0.6. Because
///   spoofs retain the channel, channel strength alone never separates
///   the classes — there is no domain-general shortcut to relearn, only
///   domain-specific artifact directions.
///
/// All patterns are unit norm times one amplitude and all classes share
/// one noise level, so energy and residual-noise statistics carry no label
/// information; only direction does.
pub fn default_stream(base_seed: u64) -> Vec<DomainSpec> {
    const D: usize = 8;
    const AMPLITUDE: f64 = 1.0;
    const NOISE: f64 = 3.5;
    // Channel mix: keep^2 + shift^2 = 1 keeps carriers unit norm.
    const CHANNEL_KEEP: f64 = 0.9;
    let channel_shift = (1.0 - CHANNEL_KEEP * CHANNEL_KEEP).sqrt();
    // Spoof mix: carrier^2 + artifact^2 = 1 keeps spoof patterns unit norm.
    const SPOOF_CARRIER: f64 = 0.8;
    const SPOOF_ARTIFACT: f64 = 0.6;
    let base_channel = hadamard_row(7, D);
    let rows: [(usize, usize); 3] = [(1, 5), (2, 6), (4, 3)];
    rows.iter()
        .enumerate()
        .map(|(i, &(primary, secondary))| {
            let domain_id = i + 1;
            let rp = hadamard_row(primary, D);
            let rs = hadamard_row(secondary, D);
            let channel: Vec<f64> = match i {
                0 => base_channel.clone(),
                _ => {
                    let prev_primary = hadamard_row(rows[i - 1].0, D);
                    base_channel
                        .iter()
                        .zip(&prev_primary)
                        .map(|(c, p)| CHANNEL_KEEP * c + channel_shift * p)
                        .collect()
                }
            };
            let artifact0 = rp.clone();
            let artifact1: Vec<f64> = rp
                .iter()
                .zip(&rs)
                .map(|(p, s)| 0.8 * p + 0.6 * s)
                .collect();
            let spoof_mean = |artifact: &[f64]| -> Vec<f64> {
                channel
                    .iter()
                    .zip(artifact)
                    .map(|(c, a)| AMPLITUDE * (SPOOF_CARRIER * c + SPOOF_ARTIFACT * a))
                    .collect()
            };
            DomainSpec {
                domain_id,
                bona_fide_mean: channel.iter().map(|c| AMPLITUDE * c).collect(),
                bona_fide_scale: NOISE,
                bona_fide_drift: 0.0,
                attack_clusters: vec![
                    AttackCluster { mean: spoof_mean(&artifact0), scale: NOISE },
                    AttackCluster { mean: spoof_mean(&artifact1), scale: NOISE },
                ],
                counts: SplitCounts {
                    train: (128, 128),
                    dev: (48, 48),
                    eval: (64, 64),
                },
                seed: crate::rng::derive2(base_seed, salt::DATA, domain_id as u64),
                clip_len: 320,
            }
        })
        .collect()
}

/// Materializes one split of a domain. Bona fide clips come first, then the
/// spoof clips round-robined over the attack clusters. The stream is fully
/// determined by (spec.seed, split), and different splits use disjoint
/// sub-seeded streams.
pub fn synth_domain(spec: &DomainSpec, split: Split) -> Result<Vec<RawClip>> {
    spec.validate()?;
    let mut rng = stream2(spec.seed, salt::DATA, split.stream_index());
    let d = spec.bona_fide_mean.len();
    let drift_dir = drift_direction(d);
    let (n_real, n_fake) = spec.counts.for_split(split);
    let mut clips = Vec::with_capacity(n_real + n_fake);

    let drift = spec.bona_fide_drift * spec.domain_id as f64;
    let bona_pattern: Vec<f64> = spec
        .bona_fide_mean
        .iter()
        .zip(&drift_dir)
        .map(|(m, dir)| m + drift * dir)
        .collect();
    for _ in 0..n_real {
        clips.push(draw_clip(
            &mut rng,
            &bona_pattern,
            spec.bona_fide_scale,
            spec.clip_len,
            Label::BonaFide,
            spec.domain_id,
            0,
        ));
    }
    for k in 0..n_fake {
        let cluster_idx = k % spec.attack_clusters.len();
        let cluster = &spec.attack_clusters[cluster_idx];
        clips.push(draw_clip(
            &mut rng,
            &cluster.mean,
            cluster.scale,
            spec.clip_len,
            Label::Spoof,
            spec.domain_id,
            spec.attack_id(cluster_idx),
        ));
    }
    Ok(clips)
}

/// Zero-mean direction along which `bona_fide_drift` shifts the bona fide
/// pattern: the last Hadamard row when D is a power of two (the default
/// carrier direction, so drift modulates carrier strength per domain),
/// alternating signs otherwise. No default attack cluster uses it.
fn drift_direction(d: usize) -> Vec<f64> {
    if d.is_power_of_two() && d > 1 {
        hadamard_row(d - 1, d)
    } else {
        (0..d).map(|i| if i % 2 == 0 { 1.0 } else { -1.0 }).collect()
    }
}

fn draw_clip(
    rng: &mut impl Rng,
    pattern: &[f64],
    scale: f64,
    len: usize,
    label: Label,
    domain_id: usize,
    attack_id: u32,
) -> RawClip {
    let samples = (0..len)
        .map(|i| {
            let noise: f64 = StandardNormal.sample(rng);
            pattern[i % pattern.len()] + scale * noise
        })
        .collect();
    RawClip { samples, label, domain_id, attack_id }
}

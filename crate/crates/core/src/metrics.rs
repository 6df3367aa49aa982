//! Scoring and the equal error rate.
//!
//! The detection score of an utterance is the negated classifier logit
//! averaged over deterministic crops, so higher scores mean "more bona
//! fide". Given scored utterances of both classes, the equal error rate
//! (EER) is found by sweeping a decision threshold theta over every
//! position the finite score set allows: a spoof utterance is falsely
//! accepted when its score is >= theta, a bona fide utterance falsely
//! rejected when its score is < theta. The EER is the midpoint of the two
//! rates at the position where their absolute difference is smallest,
//! which is where the curves cross. Because both rates depend only on the
//! ordering of scores, the EER is invariant under any strictly increasing
//! transform of the scores.

use serde::{Deserialize, Serialize};

use crate::classifier::ClassifierSnapshot;
use crate::data::{crop_segments, normalize_sample, FrozenExtractor, Label, RawClip};
use crate::error::{Error, Result};

/// One scored utterance.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub utt_id: usize,
    pub domain_id: usize,
    pub attack_id: u32,
    pub label: Label,
    pub score: f64,
}

/// Scores one utterance: normalize, crop, extract, classify, and average
/// the negated logits over the crops.
pub fn score_utterance(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    clip: &RawClip,
    crop_len: usize,
    n_crops: usize,
) -> Result<f64> {
    if n_crops == 0 {
        return Err(Error::InvalidConfig("n_crops must be at least 1".into()));
    }
    let normalized = normalize_sample(clip);
    let crops = crop_segments(&normalized, crop_len, n_crops);
    let mut total = 0.0;
    for c in &crops {
        let feats = extractor.extract(c)?;
        let (logit, _) = snapshot.params().eval_forward(&feats.frames)?;
        total += -logit;
    }
    Ok(total / crops.len() as f64)
}

/// EER from two score slices. Errors when either class is absent or any
/// score is not finite.
pub fn eer_from_scores(bona: &[f64], spoof: &[f64]) -> Result<f64> {
    if bona.is_empty() || spoof.is_empty() {
        return Err(Error::SingleClass);
    }
    if bona.iter().chain(spoof).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite { op: "eer_from_scores" });
    }
    let nb = bona.len() as f64;
    let ns = spoof.len() as f64;
    let mut all: Vec<(f64, bool)> = bona
        .iter()
        .map(|&s| (s, true))
        .chain(spoof.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("scores are finite"));

    // Walk the threshold upward through every gap between distinct score
    // values. Records with tied scores change sides together, and a
    // threshold placed exactly on a value yields the same rates as the gap
    // just below it, so the gaps cover every achievable (FAR, FRR) pair.
    let mut spoof_ge = spoof.len();
    let mut bona_lt = 0usize;
    let mut best_diff = f64::INFINITY;
    let mut best_mid = 0.0;
    let consider = |spoof_ge: usize, bona_lt: usize, best_diff: &mut f64, best_mid: &mut f64| {
        let far = spoof_ge as f64 / ns;
        let frr = bona_lt as f64 / nb;
        let diff = (far - frr).abs();
        if diff < *best_diff {
            *best_diff = diff;
            *best_mid = (far + frr) / 2.0;
        }
    };
    consider(spoof_ge, bona_lt, &mut best_diff, &mut best_mid);
    let mut i = 0;
    while i < all.len() {
        let v = all[i].0;
        while i < all.len() && all[i].0 == v {
            if all[i].1 {
                bona_lt += 1;
            } else {
                spoof_ge -= 1;
            }
            i += 1;
        }
        consider(spoof_ge, bona_lt, &mut best_diff, &mut best_mid);
    }
    Ok(best_mid)
}

/// EER over score records; splits by label first.
pub fn compute_eer(records: &[ScoreRecord]) -> Result<f64> {
    let bona: Vec<f64> = records
        .iter()
        .filter(|r| r.label == Label::BonaFide)
        .map(|r| r.score)
        .collect();
    let spoof: Vec<f64> = records
        .iter()
        .filter(|r| r.label == Label::Spoof)
        .map(|r| r.score)
        .collect();
    eer_from_scores(&bona, &spoof)
}

//! Embedding-cloud export: pooled eval-mode embeddings of a clip set,
//! projected onto their top-2 principal components and written as CSV.
//!
//! The dump mirrors utterance scoring: each clip is normalized, cut into
//! the same deterministic eval crops, and the pooled embeddings of the
//! crops are averaged, so a dump row corresponds one-to-one to a score.
//! Pseudo-spoof rows reuse the training-time perturbation paths
//! (feature-level records add to extracted frames, waveform-level records
//! add to the normalized crop samples), which lets cluster proximity
//! between pseudo and true spoofs be measured on equal footing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::classifier::ClassifierSnapshot;
use crate::data::{crop_segments, ingest_scale, normalize_sample, FrozenExtractor, Label, RawClip};
use crate::error::{Error, Result};
use crate::pca::{write_embedding_csv, EmbeddingRow, Pca2};
use crate::uap::{apply_uap, perturb_crop, UapLevel, UapRecord};

/// A finished dump: projected rows plus a zero-variance flag (when set, the
/// cloud had no variance and every projection was emitted as zeros).
#[derive(Clone, Debug)]
pub struct EmbeddingDump {
    pub rows: Vec<EmbeddingRow>,
    pub degenerate: bool,
}

/// Pooled embedding of one clip: mean of the eval-mode embedding tap over
/// the deterministic eval crops (the same crops scoring uses).
pub fn clip_embedding(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    clip: &RawClip,
    crop_len: usize,
    n_crops: usize,
) -> Result<Vec<f64>> {
    if n_crops == 0 {
        return Err(Error::InvalidConfig("n_crops must be at least 1".into()));
    }
    let normalized = normalize_sample(clip);
    let crops = crop_segments(&normalized, crop_len, n_crops);
    mean_embedding(snapshot, extractor, &crops, ingest_scale(clip), None)
}

/// Pooled embedding of one bona fide clip with a perturbation applied at
/// the record's level, exactly as rehearsal applies it during training.
pub fn pseudo_clip_embedding(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    clip: &RawClip,
    record: &UapRecord,
    crop_len: usize,
    n_crops: usize,
) -> Result<Vec<f64>> {
    if n_crops == 0 {
        return Err(Error::InvalidConfig("n_crops must be at least 1".into()));
    }
    if clip.label != Label::BonaFide {
        return Err(Error::InvalidConfig(
            "pseudo embeddings are built from bona fide clips only".into(),
        ));
    }
    let normalized = normalize_sample(clip);
    let crops = crop_segments(&normalized, crop_len, n_crops);
    mean_embedding(snapshot, extractor, &crops, ingest_scale(clip), Some(record))
}

fn mean_embedding(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    crops: &[RawClip],
    scale: f64,
    record: Option<&UapRecord>,
) -> Result<Vec<f64>> {
    let mut acc: Option<Vec<f64>> = None;
    for crop in crops {
        let frames = match record {
            None => extractor.extract(crop)?.frames,
            Some(r) => match r.level {
                UapLevel::Feature => {
                    apply_uap(&extractor.extract(crop)?.frames, &r.perturbation)?
                }
                UapLevel::Waveform => {
                    extractor.extract(&perturb_crop(crop, &r.perturbation, scale)?)?.frames
                }
            },
        };
        let (_, pooled) = snapshot.params().eval_forward(&frames)?;
        match &mut acc {
            None => acc = Some(pooled.data().to_vec()),
            Some(a) => {
                for (x, v) in a.iter_mut().zip(pooled.data()) {
                    *x += v;
                }
            }
        }
    }
    let mut mean = acc.ok_or(Error::EmptyInput("mean_embedding"))?;
    let n = crops.len() as f64;
    for x in &mut mean {
        *x /= n;
    }
    Ok(mean)
}

/// Dumps the clip set's embedding cloud as a 2-D projection CSV at `out`.
///
/// Zero-variance clouds are not an error: the projections are emitted as
/// zeros and the returned flag is set so callers can surface a warning.
pub fn embedding_dump(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    clips: &[RawClip],
    crop_len: usize,
    n_crops: usize,
    out: &Path,
) -> Result<EmbeddingDump> {
    if clips.len() < 3 {
        return Err(Error::InvalidConfig(format!(
            "embedding dump needs at least 3 clips, got {}",
            clips.len()
        )));
    }
    let embeddings: Vec<Vec<f64>> = clips
        .iter()
        .map(|c| clip_embedding(snapshot, extractor, c, crop_len, n_crops))
        .collect::<Result<_>>()?;
    let (pca, degenerate) = Pca2::fit_or_degenerate(&embeddings)?;
    let mut rows = Vec::with_capacity(clips.len());
    for (i, (clip, emb)) in clips.iter().zip(&embeddings).enumerate() {
        let (pc1, pc2) = pca.project(emb)?;
        rows.push(EmbeddingRow {
            utt_id: i,
            domain_id: clip.domain_id,
            label: clip.label,
            attack_id: clip.attack_id,
            pc1,
            pc2,
        });
    }
    let mut w = BufWriter::new(File::create(out)?);
    write_embedding_csv(&mut w, &rows)?;
    w.flush()?;
    Ok(EmbeddingDump { rows, degenerate })
}

/// Companion number for the dump: distance between the centroid of
/// pseudo-spoof embeddings (each bona clip plus the record's perturbation)
/// and the centroid of true-spoof embeddings, under one snapshot. Smaller
/// means the perturbation reproduces the artifact signature more closely.
pub fn pseudo_true_centroid_distance(
    snapshot: &ClassifierSnapshot,
    extractor: &FrozenExtractor,
    bona: &[RawClip],
    spoofs: &[RawClip],
    record: &UapRecord,
    crop_len: usize,
    n_crops: usize,
) -> Result<f64> {
    let pseudo: Vec<Vec<f64>> = bona
        .iter()
        .map(|c| pseudo_clip_embedding(snapshot, extractor, c, record, crop_len, n_crops))
        .collect::<Result<_>>()?;
    let truth: Vec<Vec<f64>> = spoofs
        .iter()
        .map(|c| clip_embedding(snapshot, extractor, c, crop_len, n_crops))
        .collect::<Result<_>>()?;
    crate::pca::centroid_distance(&pseudo, &truth)
}

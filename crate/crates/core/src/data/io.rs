//! Clip and feature containers.
//!
//! Both formats are a single UTF-8 JSON manifest line, a newline, then the
//! tensor payloads as back-to-back `UFT1` records (see [`crate::tensor`]):
//! `.uffeat` holds rank-2 feature matrices of one shared T x D shape,
//! `.ufclips` holds rank-1 raw clips. Round trips are bit-exact, which the
//! determinism guarantees elsewhere rely on.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{FeatureMatrix, Label, Provenance, RawClip};
use crate::error::{Error, Result};
use crate::tensor::{read_uft1, write_uft1, Tensor};

const FEATURE_VERSION: &str = "uffeat-1";
const CLIPS_VERSION: &str = "ufclips-1";

#[derive(Serialize, Deserialize)]
struct FeatureManifest {
    version: String,
    count: usize,
    t: usize,
    d: usize,
    labels: Vec<u8>,
    domain_ids: Vec<usize>,
    attack_ids: Vec<u32>,
    provenance: Vec<Provenance>,
}

#[derive(Serialize, Deserialize)]
struct ClipsManifest {
    version: String,
    count: usize,
    labels: Vec<u8>,
    domain_ids: Vec<usize>,
    attack_ids: Vec<u32>,
}

pub fn save_features(batch: &[FeatureMatrix], path: &Path) -> Result<()> {
    let (t, d) = match batch.first() {
        Some(f) => (f.frames.shape()[0], f.frames.shape()[1]),
        None => (0, 0),
    };
    for f in batch {
        if f.frames.shape() != [t, d] {
            return Err(Error::shape(
                "save_features",
                format!("[{t}, {d}]"),
                format!("{:?}", f.frames.shape()),
            ));
        }
    }
    let manifest = FeatureManifest {
        version: FEATURE_VERSION.into(),
        count: batch.len(),
        t,
        d,
        labels: batch.iter().map(|f| f.label.as_u8()).collect(),
        domain_ids: batch.iter().map(|f| f.domain_id).collect(),
        attack_ids: batch.iter().map(|f| f.attack_id).collect(),
        provenance: batch.iter().map(|f| f.provenance).collect(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    write_manifest(&mut w, &manifest)?;
    for f in batch {
        write_uft1(&mut w, &f.frames)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<Vec<FeatureMatrix>> {
    let mut r = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let manifest: FeatureManifest = read_manifest(&mut r, "feature manifest")?;
    if manifest.version != FEATURE_VERSION {
        return Err(Error::FormatVersion {
            expected: FEATURE_VERSION.into(),
            got: manifest.version,
        });
    }
    check_field_len("labels", manifest.labels.len(), manifest.count)?;
    check_field_len("domain_ids", manifest.domain_ids.len(), manifest.count)?;
    check_field_len("attack_ids", manifest.attack_ids.len(), manifest.count)?;
    check_field_len("provenance", manifest.provenance.len(), manifest.count)?;

    let tensors = read_records(&mut r, manifest.count, "feature record")?;
    let mut out = Vec::with_capacity(manifest.count);
    for (i, frames) in tensors.into_iter().enumerate() {
        if manifest.count > 0 && frames.shape() != [manifest.t, manifest.d] {
            return Err(Error::shape(
                "load_features",
                format!("[{}, {}]", manifest.t, manifest.d),
                format!("{:?}", frames.shape()),
            ));
        }
        out.push(FeatureMatrix {
            frames,
            label: Label::from_u8(manifest.labels[i])?,
            domain_id: manifest.domain_ids[i],
            attack_id: manifest.attack_ids[i],
            provenance: manifest.provenance[i],
        });
    }
    Ok(out)
}

pub fn save_clips(clips: &[RawClip], path: &Path) -> Result<()> {
    let manifest = ClipsManifest {
        version: CLIPS_VERSION.into(),
        count: clips.len(),
        labels: clips.iter().map(|c| c.label.as_u8()).collect(),
        domain_ids: clips.iter().map(|c| c.domain_id).collect(),
        attack_ids: clips.iter().map(|c| c.attack_id).collect(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    write_manifest(&mut w, &manifest)?;
    for c in clips {
        write_uft1(&mut w, &Tensor::vector(c.samples.clone()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_clips(path: &Path) -> Result<Vec<RawClip>> {
    let mut r = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let manifest: ClipsManifest = read_manifest(&mut r, "clips manifest")?;
    if manifest.version != CLIPS_VERSION {
        return Err(Error::FormatVersion {
            expected: CLIPS_VERSION.into(),
            got: manifest.version,
        });
    }
    check_field_len("labels", manifest.labels.len(), manifest.count)?;
    check_field_len("domain_ids", manifest.domain_ids.len(), manifest.count)?;
    check_field_len("attack_ids", manifest.attack_ids.len(), manifest.count)?;

    let tensors = read_records(&mut r, manifest.count, "clip record")?;
    let mut out = Vec::with_capacity(manifest.count);
    for (i, t) in tensors.into_iter().enumerate() {
        if t.rank() != 1 {
            return Err(Error::shape("load_clips", "rank 1", format!("{:?}", t.shape())));
        }
        out.push(RawClip {
            samples: t.data().to_vec(),
            label: Label::from_u8(manifest.labels[i])?,
            domain_id: manifest.domain_ids[i],
            attack_id: manifest.attack_ids[i],
        });
    }
    Ok(out)
}

fn write_manifest<W: Write, M: Serialize>(w: &mut W, manifest: &M) -> Result<()> {
    let line = serde_json::to_string(manifest)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    Ok(())
}

fn read_manifest<R: Read, M: for<'a> Deserialize<'a>>(
    r: &mut R,
    context: &'static str,
) -> Result<M> {
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => return Err(Error::Truncated { context }),
            _ if byte[0] == b'\n' => break,
            _ => line.push(byte[0]),
        }
    }
    Ok(serde_json::from_slice(&line)?)
}

/// Reads exactly `count` records; a clean end-of-file between records is a
/// count mismatch, not a truncation, and trailing bytes after the last
/// record are a mismatch too.
fn read_records<R: Read>(
    r: &mut R,
    count: usize,
    context: &'static str,
) -> Result<Vec<Tensor>> {
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut cursor = payload.as_slice();
    let mut out = Vec::with_capacity(count);
    for found in 0..count {
        if cursor.is_empty() {
            return Err(Error::CountMismatch { manifest: count, found });
        }
        out.push(read_uft1(&mut cursor, context)?);
    }
    if !cursor.is_empty() {
        return Err(Error::CountMismatch { manifest: count, found: count + 1 });
    }
    Ok(out)
}

fn check_field_len(field: &str, len: usize, count: usize) -> Result<()> {
    if len != count {
        return Err(Error::InvalidConfig(format!(
            "manifest lists {len} {field} entries for {count} records"
        )));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_stream, synth_domain, FrozenExtractor, Split};

    fn sample_features(n: usize) -> Vec<FeatureMatrix> {
        let spec = &default_stream(5)[0];
        let ex = FrozenExtractor::new(5, 16, 8, 8).unwrap();
        synth_domain(spec, Split::Dev)
            .unwrap()
            .iter()
            .take(n)
            .map(|c| ex.extract(c).unwrap())
            .collect()
    }

    #[test]
    fn features_roundtrip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dev.uffeat");
        let batch = sample_features(3);
        save_features(&batch, &path).unwrap();
        let back = load_features(&path).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in batch.iter().zip(&back) {
            assert_eq!(a.label, b.label);
            assert_eq!(a.domain_id, b.domain_id);
            assert_eq!(a.attack_id, b.attack_id);
            assert_eq!(a.provenance, b.provenance);
            let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.frames), bits(&b.frames));
        }
    }

    #[test]
    fn empty_feature_file_roundtrips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.uffeat");
        save_features(&[], &path).unwrap();
        assert!(load_features(&path).unwrap().is_empty());
    }

    #[test]
    fn record_count_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("short.uffeat");
        let batch = sample_features(2);
        save_features(&batch, &path).unwrap();

        // Rewrite the file keeping the manifest (count 2) but only one record.
        let raw = std::fs::read(&path).unwrap();
        let newline = raw.iter().position(|b| *b == b'\n').unwrap();
        let record_len = (raw.len() - newline - 1) / 2;
        std::fs::write(&path, &raw[..=newline + record_len]).unwrap();
        assert!(matches!(
            load_features(&path),
            Err(Error::CountMismatch { manifest: 2, found: 1 })
        ));
    }

    #[test]
    fn truncated_record_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.uffeat");
        save_features(&sample_features(1), &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        std::fs::write(&path, &raw[..raw.len() - 3]).unwrap();
        assert!(matches!(load_features(&path), Err(Error::Truncated { .. })));
    }

    #[test]
    fn bad_magic_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("magic.uffeat");
        save_features(&sample_features(1), &path).unwrap();
        let mut raw = std::fs::read(&path).unwrap();
        let newline = raw.iter().position(|b| *b == b'\n').unwrap();
        raw[newline + 1] = b'Z';
        std::fs::write(&path, &raw).unwrap();
        assert!(matches!(load_features(&path), Err(Error::BadMagic { .. })));
    }

    #[test]
    fn version_mismatch_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("version.uffeat");
        save_features(&[], &path).unwrap();
        let raw = std::fs::read(&path).unwrap();
        let text = String::from_utf8(raw).unwrap().replace("uffeat-1", "uffeat-9");
        std::fs::write(&path, text).unwrap();
        assert!(matches!(load_features(&path), Err(Error::FormatVersion { .. })));
    }

    #[test]
    fn clips_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("train.ufclips");
        let clips = synth_domain(&default_stream(5)[1], Split::Train).unwrap();
        save_clips(&clips, &path).unwrap();
        let back = load_clips(&path).unwrap();
        assert_eq!(clips, back);
    }
}

//! On-disk pool of generated perturbations.
//!
//! A pool is a directory holding `manifest.json` plus one `.uft` tensor file
//! per record, named `uap_<stage>_<level>.uft`. The manifest carries every
//! record field except the tensor itself, so a pool can be listed without
//! touching the payloads. Appending a record for a (stage, level) pair that
//! already exists replaces the old record, which keeps re-runs idempotent
//! and enforces one perturbation per stage and level.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_uft1, write_uft1};
use crate::uap::{UapLevel, UapRecord};

const POOL_VERSION: &str = "ufpool-1";

#[derive(Serialize, Deserialize)]
struct PoolManifest {
    version: String,
    entries: Vec<PoolEntry>,
}

#[derive(Serialize, Deserialize)]
struct PoolEntry {
    stage_index: usize,
    level: UapLevel,
    epsilon: f64,
    achieved_fooling_rate: f64,
    iterations_used: usize,
    converged: bool,
    file: String,
}

/// An open pool; records are kept in memory sorted by stage index and
/// mirrored to disk on every append.
#[derive(Debug)]
pub struct UapPool {
    dir: PathBuf,
    records: Vec<UapRecord>,
}

impl UapPool {
    /// Creates the pool directory (and parents) with an empty manifest.
    pub fn create(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(Error::file(dir))?;
        let pool = UapPool { dir: dir.to_path_buf(), records: Vec::new() };
        pool.write_manifest()?;
        Ok(pool)
    }

    /// Opens an existing pool, loading every perturbation tensor.
    pub fn open(dir: &Path) -> Result<Self> {
        let manifest_path = dir.join("manifest.json");
        let file = File::open(&manifest_path).map_err(Error::file(&manifest_path))?;
        let manifest: PoolManifest = serde_json::from_reader(BufReader::new(file))?;
        if manifest.version != POOL_VERSION {
            return Err(Error::FormatVersion {
                expected: POOL_VERSION.into(),
                got: manifest.version,
            });
        }
        let mut records = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            let path = dir.join(&e.file);
            let f = File::open(&path).map_err(Error::file(&path))?;
            let perturbation = read_uft1(&mut BufReader::new(f), "uap pool record")?;
            records.push(UapRecord {
                perturbation,
                stage_index: e.stage_index,
                level: e.level,
                epsilon: e.epsilon,
                achieved_fooling_rate: e.achieved_fooling_rate,
                iterations_used: e.iterations_used,
                converged: e.converged,
            });
        }
        records.sort_by_key(|r| (r.stage_index, r.level.name()));
        Ok(UapPool { dir: dir.to_path_buf(), records })
    }

    /// Adds a record, replacing any existing one for the same
    /// (stage, level), and persists both tensor and manifest.
    pub fn append(&mut self, record: UapRecord) -> Result<()> {
        let path = self.dir.join(Self::file_name(record.stage_index, record.level));
        let f = File::create(&path).map_err(Error::file(&path))?;
        let mut w = BufWriter::new(f);
        write_uft1(&mut w, &record.perturbation)?;

        self.records
            .retain(|r| (r.stage_index, r.level) != (record.stage_index, record.level));
        self.records.push(record);
        self.records.sort_by_key(|r| (r.stage_index, r.level.name()));
        self.write_manifest()
    }

    pub fn records(&self) -> &[UapRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    /// Records usable when training stage `stage`: those generated at any
    /// strictly earlier stage.
    pub fn eligible(&self, stage: usize) -> Vec<&UapRecord> {
        self.records.iter().filter(|r| r.stage_index < stage).collect()
    }

    /// Draws one eligible record uniformly at random.
    pub fn sample(&self, stage: usize, rng: &mut ChaCha8Rng) -> Result<&UapRecord> {
        let eligible = self.eligible(stage);
        if eligible.is_empty() {
            return Err(Error::EmptyPool { stage });
        }
        Ok(eligible[rng.gen_range(0..eligible.len())])
    }

    fn file_name(stage: usize, level: UapLevel) -> String {
        format!("uap_{stage}_{}.uft", level.name())
    }

    fn write_manifest(&self) -> Result<()> {
        let manifest = PoolManifest {
            version: POOL_VERSION.into(),
            entries: self
                .records
                .iter()
                .map(|r| PoolEntry {
                    stage_index: r.stage_index,
                    level: r.level,
                    epsilon: r.epsilon,
                    achieved_fooling_rate: r.achieved_fooling_rate,
                    iterations_used: r.iterations_used,
                    converged: r.converged,
                    file: Self::file_name(r.stage_index, r.level),
                })
                .collect(),
        };
        let path = self.dir.join("manifest.json");
        let f = File::create(&path).map_err(Error::file(&path))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, &manifest)?;
        use std::io::Write as _;
        writeln!(w).map_err(Error::from)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{salt, stream};
    use crate::tensor::Tensor;

    fn record(stage: usize, level: UapLevel, fill: f64) -> UapRecord {
        UapRecord {
            perturbation: Tensor::matrix(2, 3, vec![fill; 6]).unwrap(),
            stage_index: stage,
            level,
            epsilon: 0.03,
            achieved_fooling_rate: 0.85,
            iterations_used: 120,
            converged: true,
        }
    }

    #[test]
    fn roundtrip_preserves_records_bit_for_bit() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("pool");
        let mut pool = UapPool::create(&dir).unwrap();
        let mut r1 = record(1, UapLevel::Feature, 0.01);
        r1.perturbation = Tensor::matrix(2, 3, vec![0.1, -0.2, 0.3, 0.1 + 1e-16, 0.0, -0.0]).unwrap();
        pool.append(r1.clone()).unwrap();
        pool.append(record(2, UapLevel::Feature, 0.02)).unwrap();

        let loaded = UapPool::open(&dir).unwrap();
        assert_eq!(loaded.len(), 2);
        let got = &loaded.records()[0];
        assert_eq!(got.stage_index, 1);
        assert_eq!(got.level, UapLevel::Feature);
        assert_eq!(got.epsilon, 0.03);
        assert_eq!(got.achieved_fooling_rate, 0.85);
        assert_eq!(got.iterations_used, 120);
        assert!(got.converged);
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&got.perturbation), bits(&r1.perturbation));
    }

    #[test]
    fn append_replaces_same_stage_and_level() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pool = UapPool::create(tmp.path()).unwrap();
        pool.append(record(1, UapLevel::Feature, 0.5)).unwrap();
        pool.append(record(1, UapLevel::Feature, 0.7)).unwrap();
        assert_eq!(pool.len(), 1);
        assert_eq!(pool.records()[0].perturbation.data()[0], 0.7);

        // A different level at the same stage is a distinct slot.
        pool.append(record(1, UapLevel::Waveform, 0.9)).unwrap();
        assert_eq!(pool.len(), 2);

        let reloaded = UapPool::open(tmp.path()).unwrap();
        assert_eq!(reloaded.len(), 2);
    }

    #[test]
    fn records_sorted_by_stage() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pool = UapPool::create(tmp.path()).unwrap();
        pool.append(record(3, UapLevel::Feature, 0.3)).unwrap();
        pool.append(record(1, UapLevel::Feature, 0.1)).unwrap();
        pool.append(record(2, UapLevel::Feature, 0.2)).unwrap();
        let stages: Vec<usize> = pool.records().iter().map(|r| r.stage_index).collect();
        assert_eq!(stages, vec![1, 2, 3]);
    }

    #[test]
    fn sample_is_uniform_over_eligible_stages() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pool = UapPool::create(tmp.path()).unwrap();
        pool.append(record(1, UapLevel::Feature, 0.1)).unwrap();
        pool.append(record(2, UapLevel::Feature, 0.2)).unwrap();
        // Stage 3 exists but must be excluded when sampling for stage 3.
        pool.append(record(3, UapLevel::Feature, 0.3)).unwrap();

        let mut rng = stream(7, salt::POOL);
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let r = pool.sample(3, &mut rng).unwrap();
            assert!(r.stage_index < 3);
            counts[r.stage_index - 1] += 1;
        }
        for c in counts {
            let freq = c as f64 / 10_000.0;
            assert!((0.45..=0.55).contains(&freq), "frequency {freq} outside [0.45, 0.55]");
        }
    }

    #[test]
    fn sample_with_no_eligible_records_errors() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pool = UapPool::create(tmp.path()).unwrap();
        assert!(matches!(pool.sample(1, &mut stream(0, salt::POOL)), Err(Error::EmptyPool { stage: 1 })));
        pool.append(record(2, UapLevel::Feature, 0.1)).unwrap();
        // Only stage >= current are present: still empty for stage 1.
        assert!(matches!(pool.sample(1, &mut stream(0, salt::POOL)), Err(Error::EmptyPool { stage: 1 })));
        assert!(pool.sample(3, &mut stream(0, salt::POOL)).is_ok());
    }

    #[test]
    fn open_rejects_wrong_version() {
        let tmp = tempfile::tempdir().unwrap();
        UapPool::create(tmp.path()).unwrap();
        let path = tmp.path().join("manifest.json");
        let text = std::fs::read_to_string(&path).unwrap();
        std::fs::write(&path, text.replace("ufpool-1", "ufpool-9")).unwrap();
        assert!(matches!(UapPool::open(tmp.path()), Err(Error::FormatVersion { .. })));
    }

    #[test]
    fn open_missing_tensor_file_names_the_path() {
        let tmp = tempfile::tempdir().unwrap();
        let mut pool = UapPool::create(tmp.path()).unwrap();
        pool.append(record(1, UapLevel::Feature, 0.1)).unwrap();
        std::fs::remove_file(tmp.path().join("uap_1_feature.uft")).unwrap();
        match UapPool::open(tmp.path()) {
            Err(Error::File { path, .. }) => {
                assert!(path.to_string_lossy().contains("uap_1_feature.uft"))
            }
            other => panic!("expected File error, got {other:?}"),
        }
    }
}

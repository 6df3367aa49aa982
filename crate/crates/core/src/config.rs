//! Experiment configuration: one JSON document drives a full run.
//!
//! The master `seed` feeds every random stream through purpose-specific
//! salts, so two runs from the same document are bit-for-bit identical.
//! `digest()` hashes the canonical serialization and is stamped into
//! reports, tying every artifact back to the exact configuration that
//! produced it.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifier::ClassifierConfig;
use crate::continual::{SequenceOrder, StageConfig};
use crate::data::{default_stream, DomainSpec, FrozenExtractor};
use crate::error::{Error, Result};
use crate::uap::UapGenConfig;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExtractorConfig {
    pub seed: u64,
    pub frame_width: usize,
    pub hop: usize,
    pub dim: usize,
    /// Projection scale multiplier; values above 1 saturate the tanh front
    /// end, strengthening the raw-sample/feature-space asymmetry.
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

impl ExtractorConfig {
    pub fn build(&self) -> Result<FrozenExtractor> {
        FrozenExtractor::with_gain(self.seed, self.frame_width, self.hop, self.dim, self.gain)
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub name: String,
    pub seed: u64,
    pub domains: Vec<DomainSpec>,
    pub order: Vec<usize>,
    pub stage: StageConfig,
    pub uap: UapGenConfig,
    pub classifier: ClassifierConfig,
    pub extractor: ExtractorConfig,
    /// Training and scoring crop length in samples.
    pub crop_len: usize,
    /// Crops averaged per utterance when scoring.
    pub eval_crops: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults: three synthetic domains, a small transformer,
    /// and step sizes sized for minutes-long runs.
    pub fn desk_default(seed: u64) -> Self {
        ExperimentConfig {
            name: "desk".into(),
            seed,
            domains: default_stream(seed),
            order: vec![1, 2, 3],
            stage: StageConfig {
                lr: 1e-2,
                batch_size: 32,
                seed,
                ..Default::default()
            },
            uap: UapGenConfig {
                epsilon: 0.5,
                alpha: 0.01,
                max_iters: 400,
                // Checking after every iteration stops generation at the
                // first sigma crossing, keeping perturbations no larger
                // than the fooling target demands.
                check_every: 1,
                seed,
                ..Default::default()
            },
            classifier: ClassifierConfig { seed, ..Default::default() },
            extractor: ExtractorConfig { seed, frame_width: 16, hop: 8, dim: 8, gain: 1.0 },
            crop_len: 256,
            eval_crops: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.domains.is_empty() {
            return Err(Error::InvalidConfig("no domains declared".into()));
        }
        for d in &self.domains {
            d.validate()?;
        }
        let order = SequenceOrder(self.order.clone());
        order.validate()?;
        for &id in &self.order {
            if !self.domains.iter().any(|d| d.domain_id == id) {
                return Err(Error::InvalidConfig(format!(
                    "order references unknown domain {id}"
                )));
            }
        }
        self.stage.validate()?;
        self.uap.validate()?;
        self.classifier.validate()?;
        if self.extractor.dim == 0 || self.extractor.frame_width == 0 || self.extractor.hop == 0 {
            return Err(Error::InvalidConfig("extractor dims must be positive".into()));
        }
        if self.classifier.input_dim != self.extractor.dim {
            return Err(Error::InvalidConfig(format!(
                "classifier input_dim {} must match extractor dim {}",
                self.classifier.input_dim, self.extractor.dim
            )));
        }
        if self.crop_len < self.extractor.frame_width {
            return Err(Error::InvalidConfig(format!(
                "crop_len {} is shorter than one frame ({})",
                self.crop_len, self.extractor.frame_width
            )));
        }
        if self.eval_crops == 0 {
            return Err(Error::InvalidConfig("eval_crops must be at least 1".into()));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON serialization, hex-encoded.
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(canonical.as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(Error::file(path))?;
        let cfg: ExperimentConfig = serde_json::from_reader(BufReader::new(f))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(Error::file(path))?;
        let mut w = BufWriter::new(f);
        serde_json::to_writer_pretty(&mut w, self)?;
        writeln!(w)?;
        Ok(())
    }
}

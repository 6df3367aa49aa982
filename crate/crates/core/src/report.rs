//! Run reports: the stage x domain EER matrix and its renderings.
//!
//! A finished run leaves one artifact file per stage; the report builder
//! reads them back, checks the matrix is complete, and renders JSON, CSV,
//! and an aligned text table. In the table the best value per eval column
//! is marked `*` and the second best `+`. All renderings are pure
//! functions of the report value, so re-rendering saved artifacts is
//! byte-identical — which is also how end-to-end determinism is checked.
//!
//! Score polarity throughout: higher score = more bona fide (score is the
//! negated logit), and EERs are reported in percent.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::continual::{StageMetrics, Strategy};
use crate::error::{Error, Result};

pub const SCORE_POLARITY: &str = "higher score = bona fide (score = -logit)";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DomainEer {
    pub domain_id: usize,
    pub eer_percent: f64,
}

/// Everything one stage leaves behind for reporting.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageArtifact {
    pub metrics: StageMetrics,
    pub eval: Vec<DomainEer>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StageEval {
    pub stage: usize,
    pub trained_domain: usize,
    pub eers: Vec<DomainEer>,
    pub average: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct UapMeta {
    pub stage: usize,
    pub level: crate::uap::UapLevel,
    pub epsilon: f64,
    pub achieved_fooling_rate: f64,
    pub iterations_used: usize,
    pub converged: bool,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EvalReport {
    pub strategy: Strategy,
    pub order: Vec<usize>,
    /// Eval column order.
    pub domains: Vec<usize>,
    pub seed: u64,
    pub config_digest: String,
    pub score_polarity: String,
    pub stages: Vec<StageEval>,
    pub uaps: Vec<UapMeta>,
}

impl EvalReport {
    /// Assembles a report from per-stage artifacts, computing averages.
    pub fn from_artifacts(
        cfg: &ExperimentConfig,
        artifacts: &[StageArtifact],
    ) -> Result<EvalReport> {
        let domains: Vec<usize> = cfg.domains.iter().map(|d| d.domain_id).collect();
        let mut stages = Vec::with_capacity(artifacts.len());
        let mut uaps = Vec::new();
        for a in artifacts {
            let got: Vec<usize> = a.eval.iter().map(|e| e.domain_id).collect();
            if got != domains {
                return Err(Error::InvalidConfig(format!(
                    "stage {} eval row covers domains {got:?}, expected {domains:?}",
                    a.metrics.stage
                )));
            }
            for e in &a.eval {
                if !(0.0..=100.0).contains(&e.eer_percent) {
                    return Err(Error::InvalidConfig(format!(
                        "EER {}% out of range for stage {} domain {}",
                        e.eer_percent, a.metrics.stage, e.domain_id
                    )));
                }
            }
            let average =
                a.eval.iter().map(|e| e.eer_percent).sum::<f64>() / a.eval.len() as f64;
            stages.push(StageEval {
                stage: a.metrics.stage,
                trained_domain: a.metrics.domain_id,
                eers: a.eval.clone(),
                average,
            });
            if let Some(u) = &a.metrics.uap {
                uaps.push(UapMeta {
                    stage: a.metrics.stage,
                    level: u.level,
                    epsilon: u.epsilon,
                    achieved_fooling_rate: u.achieved_fooling_rate,
                    iterations_used: u.iterations_used,
                    converged: u.converged,
                });
            }
        }
        Ok(EvalReport {
            strategy: cfg.stage.strategy,
            order: cfg.order.clone(),
            domains,
            seed: cfg.seed,
            config_digest: cfg.digest(),
            score_polarity: SCORE_POLARITY.into(),
            stages,
            uaps,
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<EvalReport> {
        Ok(serde_json::from_str(text)?)
    }

    /// CSV with full-precision floats.
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        out.push_str("stage,trained_domain");
        for d in &self.domains {
            out.push_str(&format!(",eer_domain_{d}"));
        }
        out.push_str(",average\n");
        for s in &self.stages {
            out.push_str(&format!("{},{}", s.stage, s.trained_domain));
            for e in &s.eers {
                out.push_str(&format!(",{}", e.eer_percent));
            }
            out.push_str(&format!(",{}\n", s.average));
        }
        out
    }

    /// Aligned text table; per eval column the lowest EER carries `*` and
    /// the second lowest `+` (earlier stages win ties).
    pub fn to_table(&self) -> String {
        let mut marks = vec![vec![String::new(); self.domains.len()]; self.stages.len()];
        for col in 0..self.domains.len() {
            let mut ranked: Vec<(f64, usize)> = self
                .stages
                .iter()
                .enumerate()
                .map(|(row, s)| (s.eers[col].eer_percent, row))
                .collect();
            ranked.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite EER").then(a.1.cmp(&b.1)));
            if let Some(&(_, row)) = ranked.first() {
                marks[row][col] = "*".into();
            }
            if let Some(&(_, row)) = ranked.get(1) {
                marks[row][col] = "+".into();
            }
        }

        let mut rows: Vec<Vec<String>> = Vec::new();
        let mut header = vec!["stage".to_string(), "trained".to_string()];
        for d in &self.domains {
            header.push(format!("d{d}"));
        }
        header.push("avg".into());
        rows.push(header);
        for (i, s) in self.stages.iter().enumerate() {
            let mut row = vec![s.stage.to_string(), format!("d{}", s.trained_domain)];
            for (col, e) in s.eers.iter().enumerate() {
                row.push(format!("{:.2}{}", e.eer_percent, marks[i][col]));
            }
            row.push(format!("{:.2}", s.average));
            rows.push(row);
        }
        let widths: Vec<usize> = (0..rows[0].len())
            .map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0))
            .collect();

        let mut out = String::new();
        out.push_str(&format!(
            "# strategy={} order={:?} seed={} digest={}\n",
            self.strategy.name(),
            self.order,
            self.seed,
            &self.config_digest[..12.min(self.config_digest.len())]
        ));
        out.push_str(&format!("# eer%, {}; * best, + second best per column\n", self.score_polarity));
        for r in &rows {
            let line: Vec<String> = r
                .iter()
                .enumerate()
                .map(|(c, cell)| format!("{cell:>width$}", width = widths[c]))
                .collect();
            out.push_str(&line.join("  "));
            out.push('\n');
        }
        if !self.uaps.is_empty() {
            out.push_str("# uaps:\n");
            for u in &self.uaps {
                out.push_str(&format!(
                    "#   stage {} {} eps={} fooling={:.3} iters={} converged={}\n",
                    u.stage,
                    u.level.name(),
                    u.epsilon,
                    u.achieved_fooling_rate,
                    u.iterations_used,
                    u.converged
                ));
            }
        }
        out
    }
}

pub fn stage_dir(run_dir: &Path, stage: usize) -> std::path::PathBuf {
    run_dir.join(format!("stage_{stage}"))
}

/// Stage count a run of this strategy is expected to leave behind.
fn expected_stages(cfg: &ExperimentConfig) -> usize {
    match cfg.stage.strategy {
        Strategy::Base | Strategy::Joint => 1,
        _ => cfg.order.len(),
    }
}

/// Reads a finished run directory back into a report. Missing stage
/// artifacts produce an incomplete-run error listing the gaps.
pub fn build_report(run_dir: &Path) -> Result<EvalReport> {
    let cfg = ExperimentConfig::load(&run_dir.join("config.json"))?;
    let total = expected_stages(&cfg);
    let mut missing = Vec::new();
    let mut artifacts = Vec::new();
    for t in 1..=total {
        let path = stage_dir(run_dir, t).join("metrics.json");
        if !path.is_file() {
            missing.push(t);
            continue;
        }
        let f = File::open(&path).map_err(Error::file(&path))?;
        let artifact: StageArtifact = serde_json::from_reader(BufReader::new(f))?;
        artifacts.push(artifact);
    }
    if !missing.is_empty() {
        return Err(Error::IncompleteRun { missing });
    }
    EvalReport::from_artifacts(&cfg, &artifacts)
}

/// Writes the three renderings next to the stage directories.
pub fn write_report_files(report: &EvalReport, run_dir: &Path) -> Result<()> {
    for (name, content) in [
        ("report.json", report.to_json()),
        ("report.csv", report.to_csv()),
        ("report_table.txt", report.to_table()),
    ] {
        let path = run_dir.join(name);
        let f = File::create(&path).map_err(Error::file(&path))?;
        let mut w = BufWriter::new(f);
        w.write_all(content.as_bytes())?;
    }
    Ok(())
}

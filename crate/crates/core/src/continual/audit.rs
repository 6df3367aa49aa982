//! Access-audited dataset handle.
//!
//! Every clip file read during a run goes through [`DataStore`], which
//! appends an [`AccessRecord`] before touching the file; pool and
//! checkpoint accesses are noted through the same log. The promise that
//! stage t never reads earlier stages' training data is then a checkable
//! property of the log, not a convention: [`isolation_violations`] returns
//! every training-phase data read whose domain is not the one being
//! trained.

use std::cell::RefCell;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::continual::SequenceOrder;
use crate::data::{load_clips, RawClip, Split};
use crate::error::Result;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Train,
    Eval,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AccessKind {
    Data,
    Pool,
    Checkpoint,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessRecord {
    pub stage: usize,
    pub phase: Phase,
    pub kind: AccessKind,
    pub domain_id: Option<usize>,
    pub split: Option<Split>,
    pub path: String,
}

/// A clip-file store rooted at one directory, logging every access.
#[derive(Debug)]
pub struct DataStore {
    root: PathBuf,
    log: RefCell<Vec<AccessRecord>>,
}

impl DataStore {
    pub fn open(root: &Path) -> Self {
        DataStore { root: root.to_path_buf(), log: RefCell::new(Vec::new()) }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn clip_path(&self, domain_id: usize, split: Split) -> PathBuf {
        self.root
            .join(format!("domain_{domain_id}"))
            .join(format!("{}.ufclips", split.name()))
    }

    /// Loads one split of one domain, recording the access first.
    pub fn load_split(
        &self,
        stage: usize,
        phase: Phase,
        domain_id: usize,
        split: Split,
    ) -> Result<Vec<RawClip>> {
        let path = self.clip_path(domain_id, split);
        self.log.borrow_mut().push(AccessRecord {
            stage,
            phase,
            kind: AccessKind::Data,
            domain_id: Some(domain_id),
            split: Some(split),
            path: path.display().to_string(),
        });
        load_clips(&path)
    }

    /// Notes a non-data access (pool directory, checkpoint file).
    pub fn note(&self, stage: usize, phase: Phase, kind: AccessKind, path: &Path) {
        self.log.borrow_mut().push(AccessRecord {
            stage,
            phase,
            kind,
            domain_id: None,
            split: None,
            path: path.display().to_string(),
        });
    }

    pub fn records(&self) -> Vec<AccessRecord> {
        self.log.borrow().clone()
    }

    pub fn stage_records(&self, stage: usize) -> Vec<AccessRecord> {
        self.log
            .borrow()
            .iter()
            .filter(|r| r.stage == stage)
            .cloned()
            .collect()
    }
}

/// Every training-phase data read that breaks stage isolation: at stage t
/// only the domain trained at t may be read, and only its train/dev
/// splits. Pool and checkpoint accesses are always allowed.
pub fn isolation_violations(records: &[AccessRecord], order: &SequenceOrder) -> Vec<String> {
    let mut out = Vec::new();
    for r in records {
        if r.phase != Phase::Train || r.kind != AccessKind::Data {
            continue;
        }
        if r.stage == 0 || r.stage > order.stages() {
            out.push(format!("stage {} outside the declared order: {}", r.stage, r.path));
            continue;
        }
        let expected = order.domain_at(r.stage);
        match (r.domain_id, r.split) {
            (Some(d), Some(s)) if d == expected && s != Split::Eval => {}
            _ => out.push(format!(
                "stage {}: training-phase read of {} (allowed: domain {expected} train/dev)",
                r.stage, r.path
            )),
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{default_stream, save_clips, synth_domain};

    fn materialize(root: &Path, seed: u64) {
        for spec in &default_stream(seed) {
            let dir = root.join(format!("domain_{}", spec.domain_id));
            std::fs::create_dir_all(&dir).unwrap();
            for split in Split::ALL {
                let clips = synth_domain(spec, split).unwrap();
                save_clips(&clips, &dir.join(format!("{}.ufclips", split.name()))).unwrap();
            }
        }
    }

    #[test]
    fn loads_are_logged_with_full_context() {
        let tmp = tempfile::tempdir().unwrap();
        materialize(tmp.path(), 21);
        let store = DataStore::open(tmp.path());
        let clips = store.load_split(1, Phase::Train, 1, Split::Train).unwrap();
        assert!(!clips.is_empty());
        store.note(1, Phase::Train, AccessKind::Pool, &tmp.path().join("pool"));
        let records = store.records();
        assert_eq!(records.len(), 2);
        assert_eq!(records[0].kind, AccessKind::Data);
        assert_eq!(records[0].domain_id, Some(1));
        assert_eq!(records[0].split, Some(Split::Train));
        assert!(records[0].path.contains("domain_1"));
        assert_eq!(records[1].kind, AccessKind::Pool);
        assert_eq!(records[1].domain_id, None);
    }

    #[test]
    fn failed_reads_still_appear_in_the_log() {
        let tmp = tempfile::tempdir().unwrap();
        let store = DataStore::open(tmp.path());
        assert!(store.load_split(1, Phase::Train, 9, Split::Train).is_err());
        assert_eq!(store.records().len(), 1, "the attempt itself is auditable");
    }

    #[test]
    fn isolation_accepts_clean_runs_and_flags_leaks() {
        let order = SequenceOrder(vec![2, 1]);
        let rec = |stage, phase, kind, domain, split: Option<Split>| AccessRecord {
            stage,
            phase,
            kind,
            domain_id: domain,
            split,
            path: format!("d{domain:?}/{split:?}"),
        };
        let clean = vec![
            rec(1, Phase::Train, AccessKind::Data, Some(2), Some(Split::Train)),
            rec(1, Phase::Train, AccessKind::Data, Some(2), Some(Split::Dev)),
            rec(1, Phase::Eval, AccessKind::Data, Some(1), Some(Split::Eval)),
            rec(1, Phase::Eval, AccessKind::Data, Some(2), Some(Split::Eval)),
            rec(2, Phase::Train, AccessKind::Data, Some(1), Some(Split::Train)),
            rec(2, Phase::Train, AccessKind::Pool, None, None),
            rec(2, Phase::Train, AccessKind::Checkpoint, None, None),
            rec(2, Phase::Eval, AccessKind::Data, Some(2), Some(Split::Eval)),
        ];
        assert!(isolation_violations(&clean, &order).is_empty());

        // Stage 2 touching stage 1's training domain is the forgetting
        // cheat the audit exists to catch.
        let mut leaky = clean.clone();
        leaky.push(rec(2, Phase::Train, AccessKind::Data, Some(2), Some(Split::Train)));
        let violations = isolation_violations(&leaky, &order);
        assert_eq!(violations.len(), 1);
        assert!(violations[0].contains("stage 2"));

        // Reading an eval split during training is also flagged.
        let mut eval_leak = clean;
        eval_leak.push(rec(1, Phase::Train, AccessKind::Data, Some(2), Some(Split::Eval)));
        assert_eq!(isolation_violations(&eval_leak, &order).len(), 1);
    }

    #[test]
    fn stage_records_filter() {
        let tmp = tempfile::tempdir().unwrap();
        materialize(tmp.path(), 22);
        let store = DataStore::open(tmp.path());
        store.load_split(1, Phase::Train, 1, Split::Train).unwrap();
        store.load_split(2, Phase::Train, 2, Split::Train).unwrap();
        store.load_split(2, Phase::Eval, 1, Split::Eval).unwrap();
        assert_eq!(store.stage_records(1).len(), 1);
        assert_eq!(store.stage_records(2).len(), 2);
    }
}

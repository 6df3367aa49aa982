//! Checkpoint files (`.ufckpt`).
//!
//! Layout: one UTF-8 JSON header line (format version, config, stage, tensor
//! count), a newline, then every parameter tensor as a `UFT1` record in
//! [`ClassifierParams::tensors`] order. Round trips are bit-exact; loading
//! validates the format version and every tensor shape against the header's
//! config before accepting the file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{ClassifierConfig, ClassifierParams, ClassifierSnapshot};
use crate::error::{Error, Result};
use crate::tensor::{read_uft1, write_uft1};

const CKPT_VERSION: &str = "ufckpt-1";

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    version: String,
    config: ClassifierConfig,
    stage: usize,
    tensor_count: usize,
}

pub fn save_checkpoint(params: &ClassifierParams, stage: usize, path: &Path) -> Result<()> {
    let tensors = params.tensors();
    let header = CkptHeader {
        version: CKPT_VERSION.into(),
        config: params.config().clone(),
        stage,
        tensor_count: tensors.len(),
    };
    let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
    let line = serde_json::to_string(&header)?;
    w.write_all(line.as_bytes())?;
    w.write_all(b"\n")?;
    for (_, t) in tensors {
        write_uft1(&mut w, t)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ClassifierSnapshot> {
    let mut r = BufReader::new(File::open(path).map_err(Error::file(path))?);
    let mut line = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        match r.read(&mut byte)? {
            0 => return Err(Error::Truncated { context: "checkpoint header" }),
            _ if byte[0] == b'\n' => break,
            _ => line.push(byte[0]),
        }
    }
    let header: CkptHeader = serde_json::from_slice(&line)?;
    if header.version != CKPT_VERSION {
        return Err(Error::FormatVersion { expected: CKPT_VERSION.into(), got: header.version });
    }
    header.config.validate()?;

    // Build a same-shaped parameter set, then overwrite every tensor from
    // the records, verifying shapes named by position.
    let mut params = ClassifierParams::init(&header.config)?;
    let names: Vec<String> = params.tensors().into_iter().map(|(n, _)| n).collect();
    if names.len() != header.tensor_count {
        return Err(Error::CountMismatch { manifest: header.tensor_count, found: names.len() });
    }
    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    let mut cursor = payload.as_slice();
    {
        let mut slots = params.tensors_mut();
        for (i, slot) in slots.iter_mut().enumerate() {
            if cursor.is_empty() {
                return Err(Error::CountMismatch { manifest: header.tensor_count, found: i });
            }
            let t = read_uft1(&mut cursor, "checkpoint tensor")?;
            if t.shape() != slot.shape() {
                return Err(Error::CheckpointShape {
                    name: names[i].clone(),
                    expected: slot.shape().to_vec(),
                    got: t.shape().to_vec(),
                });
            }
            **slot = t;
        }
    }
    if !cursor.is_empty() {
        return Err(Error::CountMismatch {
            manifest: header.tensor_count,
            found: header.tensor_count + 1,
        });
    }
    Ok(ClassifierSnapshot::new(params, header.stage))
}

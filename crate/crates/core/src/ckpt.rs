//! Checkpoint container: every parameter and normalization buffer by
//! canonical name, the class centers, the config echo and the RNG state,
//! in one binary file.
//!
//! Layout: `b"SGCK"`, `u32` version, `u64` header length, a JSON header
//! (config echo plus an ordered manifest of entry names and shapes), then
//! the raw `f64` little-endian payload of each entry in manifest order.
//! Loading is strict: missing entries, unknown entries, shape mismatches,
//! truncation and trailing bytes are all errors, and nothing is returned
//! on failure. Values round-trip bit-exactly.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use crate::backbone::BackboneConfig;
use crate::data::InputNorm;
use crate::metric::ClassCenters;
use crate::model::Recognizer;
use crate::nn::Rng;
use crate::{Error, Result};

pub const CKPT_MAGIC: &[u8; 4] = b"SGCK";
pub const CKPT_VERSION: u32 = 1;

/// Serializable ChaCha state: seed, stream and 128-bit word position.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn capture(rng: &Rng) -> Self {
        let word_pos = rng.get_word_pos();
        RngState {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn restore(&self) -> Rng {
        let mut rng = Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(((self.word_pos_hi as u128) << 64) | self.word_pos_lo as u128);
        rng
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: BackboneConfig,
    input_norm: InputNorm,
    num_classes: usize,
    epoch: u32,
    rng: RngState,
    entries: Vec<Entry>,
}

/// Fully materialized training/inference state.
pub struct Checkpoint {
    pub model: Recognizer,
    pub centers: ClassCenters,
    pub input_norm: InputNorm,
    pub epoch: u32,
    pub rng: Rng,
}

fn collect_arrays(model: &mut Recognizer, centers: &mut ClassCenters) -> Vec<(String, ArrayD<f64>)> {
    let mut arrays = Vec::new();
    model.visit_params(&mut |name, p| arrays.push((name, p.value.clone())));
    model.visit_buffers(&mut |name, b| arrays.push((name, b.clone())));
    centers.visit_params("centers", &mut |name, p| arrays.push((name, p.value.clone())));
    arrays
}

pub fn save_checkpoint(
    path: &Path,
    model: &mut Recognizer,
    centers: &mut ClassCenters,
    input_norm: &InputNorm,
    epoch: u32,
    rng: &Rng,
) -> Result<()> {
    let arrays = collect_arrays(model, centers);
    let header = Header {
        config: model.config().clone(),
        input_norm: *input_norm,
        num_classes: centers.num_classes(),
        epoch,
        rng: RngState::capture(rng),
        entries: arrays
            .iter()
            .map(|(name, a)| Entry { name: name.clone(), shape: a.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header serialization failed: {e}")))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CKPT_MAGIC)?;
    w.write_all(&CKPT_VERSION.to_le_bytes())?;
    w.write_all(&(header_json.len() as u64).to_le_bytes())?;
    w.write_all(&header_json)?;
    for (_, a) in &arrays {
        for &v in a.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Checkpoint(format!("unexpected end of file while reading {what}")))
}

fn read_array(r: &mut impl Read, shape: &[usize], name: &str) -> Result<ArrayD<f64>> {
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 8];
    read_exact_or(r, &mut bytes, &format!("entry '{name}'"))?;
    let data: Vec<f64> = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    ArrayD::from_shape_vec(IxDyn(shape), data)
        .map_err(|e| Error::Checkpoint(format!("entry '{name}' has invalid shape {shape:?}: {e}")))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(File::open(path)?);

    let mut magic = [0u8; 4];
    read_exact_or(&mut r, &mut magic, "magic")?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:?}, not a checkpoint file")));
    }
    let mut buf4 = [0u8; 4];
    read_exact_or(&mut r, &mut buf4, "version")?;
    let version = u32::from_le_bytes(buf4);
    if version != CKPT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {CKPT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    read_exact_or(&mut r, &mut buf8, "header length")?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    if header_len > 64 << 20 {
        return Err(Error::Checkpoint(format!("implausible header length {header_len}")));
    }
    let mut header_bytes = vec![0u8; header_len];
    read_exact_or(&mut r, &mut header_bytes, "header")?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("malformed header: {e}")))?;

    let mut arrays = Vec::with_capacity(header.entries.len());
    let mut index = HashMap::with_capacity(header.entries.len());
    for entry in &header.entries {
        if index.insert(entry.name.clone(), arrays.len()).is_some() {
            return Err(Error::Checkpoint(format!("duplicate entry '{}'", entry.name)));
        }
        arrays.push(read_array(&mut r, &entry.shape, &entry.name)?);
    }
    if r.read(&mut [0u8; 1])? != 0 {
        return Err(Error::Checkpoint("trailing data after last entry".into()));
    }

    // Rebuild the skeleton from the config echo, then overwrite every
    // array. The build RNG is throwaway: all values come from the file.
    let mut build_rng = Rng::seed_from_u64(0);
    let mut model = Recognizer::build(header.config.clone(), &mut build_rng)?;
    let mut centers = ClassCenters::new(header.num_classes, &mut build_rng);

    let mut consumed = vec![false; arrays.len()];
    let mut missing: Vec<String> = Vec::new();
    let mut shape_errors: Vec<String> = Vec::new();
    {
        let mut assign = |name: String, target: &mut ArrayD<f64>| match index.get(&name) {
            None => missing.push(name),
            Some(&i) => {
                consumed[i] = true;
                if arrays[i].shape() != target.shape() {
                    shape_errors.push(format!(
                        "'{name}': checkpoint {:?}, model {:?}",
                        arrays[i].shape(),
                        target.shape()
                    ));
                } else {
                    target.assign(&arrays[i]);
                }
            }
        };
        model.visit_params(&mut |name, p| assign(name, &mut p.value));
        model.visit_buffers(&mut |name, b| assign(name, b));
        centers.visit_params("centers", &mut |name, p| assign(name, &mut p.value));
    }
    if let Some(first) = shape_errors.first() {
        return Err(Error::Checkpoint(format!("shape mismatch for {first}")));
    }
    if !missing.is_empty() {
        return Err(Error::Checkpoint(format!("missing entries: {}", missing.join(", "))));
    }
    let unknown: Vec<&str> = header
        .entries
        .iter()
        .enumerate()
        .filter(|(i, _)| !consumed[*i])
        .map(|(_, e)| e.name.as_str())
        .collect();
    if !unknown.is_empty() {
        return Err(Error::Checkpoint(format!("unknown entries: {}", unknown.join(", "))));
    }

    Ok(Checkpoint {
        model,
        centers,
        input_norm: header.input_norm,
        epoch: header.epoch,
        rng: header.rng.restore(),
    })
}

//! Single-file checkpoint format.
//!
//! Layout: 8-byte magic, u32 format version, u64 header length, a JSON
//! header, then raw little-endian tensor blobs in header order. The header
//! records the full run configuration, the training position (step, data
//! cursor, RNG word position), and a checksummed directory of every model
//! parameter and optimizer moment, so a resumed run is bit-identical to an
//! uninterrupted one and a corrupted file is rejected loudly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::codec::CodecConfig;
use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::tensor::{Dtype, Scalar, Tensor};
use crate::train::Trainer;

const MAGIC: &[u8; 8] = b"BITGENCK";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
    byte_len: u64,
    sha256: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: Dtype,
    run: RunConfig,
    codec: CodecConfig,
    step: u64,
    cursor: usize,
    opt_step: u64,
    rng_seed: u64,
    rng_word_pos: u128,
    tensors: Vec<TensorEntry>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

fn blob<T: Scalar>(data: &[T]) -> Vec<u8> {
    let mut out = Vec::with_capacity(data.len() * T::BYTE_WIDTH);
    for &x in data {
        x.write_le(&mut out);
    }
    out
}

fn unblob<T: Scalar>(bytes: &[u8]) -> Vec<T> {
    bytes
        .chunks_exact(T::BYTE_WIDTH)
        .map(T::read_le)
        .collect()
}

/// All tensors a checkpoint carries: model parameters plus the first and
/// second optimizer moments under reserved name prefixes.
fn collect_tensors<T: Scalar>(trainer: &Trainer<T>) -> Vec<(String, Vec<usize>, Vec<T>)> {
    let mut out: Vec<(String, Vec<usize>, Vec<T>)> = trainer
        .named_params()
        .into_iter()
        .map(|(name, p)| (name, p.shape().to_vec(), p.to_vec()))
        .collect();
    for (name, (m, v)) in &trainer.opt.moments {
        out.push((format!("opt.m.{name}"), vec![m.len()], m.clone()));
        out.push((format!("opt.v.{name}"), vec![v.len()], v.clone()));
    }
    out
}

pub fn save_checkpoint<T: Scalar>(trainer: &Trainer<T>, path: &Path) -> Result<()> {
    let tensors = collect_tensors(trainer);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut body: Vec<u8> = Vec::new();
    for (name, shape, data) in &tensors {
        let bytes = blob(data);
        entries.push(TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
            offset: body.len() as u64,
            byte_len: bytes.len() as u64,
            sha256: sha256_hex(&bytes),
        });
        body.extend_from_slice(&bytes);
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: T::DTYPE,
        run: trainer.run.clone(),
        codec: trainer.codec.clone(),
        step: trainer.step,
        cursor: trainer.cursor,
        opt_step: trainer.opt.step,
        rng_seed: trainer.run.train.seed,
        rng_word_pos: trainer.rng.get_word_pos(),
        tensors: entries,
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| Error::Checkpoint(format!("header encode: {e}")))?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(MAGIC)?;
        f.write_all(&FORMAT_VERSION.to_le_bytes())?;
        f.write_all(&(header_json.len() as u64).to_le_bytes())?;
        f.write_all(&header_json)?;
        f.write_all(&body)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Rebuild a trainer from a checkpoint plus the original corpus. The data is
/// re-packed deterministically; parameters, moments, counters, and the RNG
/// position are restored from the file. Dtype, version, and per-tensor
/// checksums are all enforced.
pub fn load_checkpoint<T: Scalar>(path: &Path, samples: &[Vec<u32>]) -> Result<Trainer<T>> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic", path.display()
        )));
    }
    let mut buf4 = [0u8; 4];
    f.read_exact(&mut buf4)?;
    let version = u32::from_le_bytes(buf4);
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {version} (supported: {FORMAT_VERSION})"
        )));
    }
    let mut buf8 = [0u8; 8];
    f.read_exact(&mut buf8)?;
    let header_len = u64::from_le_bytes(buf8) as usize;
    let mut header_bytes = vec![0u8; header_len];
    f.read_exact(&mut header_bytes)?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("header decode: {e}")))?;
    if header.dtype != T::DTYPE {
        return Err(Error::Checkpoint(format!(
            "dtype mismatch: checkpoint is {:?}, loader wants {:?}",
            header.dtype,
            T::DTYPE
        )));
    }
    let mut body = Vec::new();
    f.read_to_end(&mut body)?;

    let mut trainer = Trainer::<T>::new(header.run.clone(), samples)?;
    if trainer.codec != header.codec {
        return Err(Error::Checkpoint(format!(
            "derived codec {:?} disagrees with checkpoint codec {:?}",
            trainer.codec, header.codec
        )));
    }
    let params: std::collections::BTreeMap<String, Tensor<T>> =
        trainer.named_params().into_iter().collect();
    let mut seen_params = 0usize;
    for entry in &header.tensors {
        let start = entry.offset as usize;
        let end = start + entry.byte_len as usize;
        let bytes = body.get(start..end).ok_or_else(|| {
            Error::Checkpoint(format!("tensor {} extends past end of file", entry.name))
        })?;
        if sha256_hex(bytes) != entry.sha256 {
            return Err(Error::Checkpoint(format!(
                "tensor {} failed its checksum",
                entry.name
            )));
        }
        let data: Vec<T> = unblob(bytes);
        if let Some(moment_name) = entry.name.strip_prefix("opt.m.") {
            trainer
                .opt
                .moments
                .entry(moment_name.to_string())
                .or_insert_with(|| (Vec::new(), Vec::new()))
                .0 = data;
        } else if let Some(moment_name) = entry.name.strip_prefix("opt.v.") {
            trainer
                .opt
                .moments
                .entry(moment_name.to_string())
                .or_insert_with(|| (Vec::new(), Vec::new()))
                .1 = data;
        } else {
            let p = params.get(&entry.name).ok_or_else(|| {
                Error::Checkpoint(format!("unknown parameter {} in checkpoint", entry.name))
            })?;
            if p.shape() != entry.shape.as_slice() {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {:?} in checkpoint, {:?} in model",
                    entry.name,
                    entry.shape,
                    p.shape()
                )));
            }
            p.set_data(data)?;
            seen_params += 1;
        }
    }
    if seen_params != params.len() {
        return Err(Error::Checkpoint(format!(
            "checkpoint restored {seen_params} of {} parameters",
            params.len()
        )));
    }
    trainer.step = header.step;
    trainer.cursor = header.cursor;
    trainer.opt.step = header.opt_step;
    trainer.rng = {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(header.rng_seed);
        rng.set_word_pos(header.rng_word_pos);
        rng
    };
    Ok(trainer)
}

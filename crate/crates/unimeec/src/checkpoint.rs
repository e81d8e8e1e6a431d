//! Checkpoint container: a JSON header describing the run followed by
//! raw little-endian 64-bit floats for every parameter, in registration
//! order. Saving and loading round-trip bit-exactly, and loading rebuilds
//! the full model from the header alone.

use serde::{Deserialize, Serialize};
use std::fs;
use std::io::Write as _;
use std::path::Path;

use crate::config::Config;
use crate::corpus::Corpus;
use crate::encoder::ModelDims;
use crate::error::{Error, Result};
use crate::model::Model;

/// File identity and container revision.
const MAGIC: &[u8; 8] = b"UMECKPT1";

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: Config,
    dims: ModelDims,
    labels: Vec<String>,
    neutral_index: usize,
    tensors: Vec<TensorMeta>,
}

/// Write the model to `path`. The byte stream is a pure function of the
/// model state, so identical models produce identical files.
pub fn save(model: &Model, path: &Path) -> Result<()> {
    let header = Header {
        config: model.cfg.clone(),
        dims: model.dims,
        labels: model.labels.clone(),
        neutral_index: model.neutral_index,
        tensors: (0..model.store.len())
            .map(|i| {
                let (rows, cols) = model.store.value_at(i).dim();
                TensorMeta {
                    name: model.store.name_at(i).to_string(),
                    rows,
                    cols,
                }
            })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut buf = Vec::with_capacity(
        16 + header_bytes.len() + 8 * model.store.total_scalars(),
    );
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for i in 0..model.store.len() {
        for &x in model.store.value_at(i).iter() {
            buf.extend_from_slice(&x.to_le_bytes());
        }
    }

    let mut file = fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(&buf).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(())
}

/// Rebuild a model from a checkpoint file, bit-exactly.
pub fn load(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let corrupt = |msg: &str| Error::Checkpoint(format!("{}: {msg}", path.display()));

    if bytes.len() < 16 {
        return Err(corrupt("file shorter than the fixed preamble"));
    }
    if &bytes[..8] != MAGIC {
        return Err(corrupt("bad magic, not a checkpoint"));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body_start = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: Header = serde_json::from_slice(&bytes[16..body_start])?;

    let mut model = Model::from_parts(
        header.config,
        header.dims,
        header.labels,
        header.neutral_index,
    )?;
    if header.tensors.len() != model.store.len() {
        return Err(corrupt(&format!(
            "header lists {} tensors, architecture has {}",
            header.tensors.len(),
            model.store.len()
        )));
    }

    let mut offset = body_start;
    for (idx, meta) in header.tensors.iter().enumerate() {
        let dim = model.store.value_at(idx).dim();
        if model.store.name_at(idx) != meta.name || dim != (meta.rows, meta.cols) {
            return Err(corrupt(&format!(
                "tensor {idx} is {:?} in the header but the architecture expects {} {:?}",
                (&meta.name, meta.rows, meta.cols),
                model.store.name_at(idx),
                dim
            )));
        }
        let n_bytes = 8 * meta.rows * meta.cols;
        if offset + n_bytes > bytes.len() {
            return Err(corrupt("tensor data truncated"));
        }
        let value = model.store.value_at_mut(idx);
        for (x, chunk) in value.iter_mut().zip(bytes[offset..offset + n_bytes].chunks_exact(8)) {
            *x = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        offset += n_bytes;
    }
    if offset != bytes.len() {
        return Err(corrupt("trailing bytes after tensor data"));
    }
    Ok(model)
}

/// Reject evaluation of a checkpoint against a corpus it was not built
/// for.
pub fn check_compat(model: &Model, corpus: &Corpus) -> Result<()> {
    let mismatch = |msg: String| Err(Error::ConfigMismatch(msg));
    if corpus.vocab_size != model.dims.corpus_vocab {
        return mismatch(format!(
            "corpus vocab {} vs checkpoint {}",
            corpus.vocab_size, model.dims.corpus_vocab
        ));
    }
    if corpus.audio_dim != model.dims.audio_dim || corpus.vision_dim != model.dims.vision_dim {
        return mismatch(format!(
            "corpus feature dims (audio {}, vision {}) vs checkpoint (audio {}, vision {})",
            corpus.audio_dim, corpus.vision_dim, model.dims.audio_dim, model.dims.vision_dim
        ));
    }
    if corpus.label_names != model.labels {
        return mismatch(format!(
            "corpus labels {:?} vs checkpoint {:?}",
            corpus.label_names, model.labels
        ));
    }
    if corpus.neutral_index != model.neutral_index {
        return mismatch(format!(
            "corpus neutral index {} vs checkpoint {}",
            corpus.neutral_index, model.neutral_index
        ));
    }
    for conv in &corpus.conversations {
        if conv.utterances.len() > model.cfg.model.max_conv_len {
            return mismatch(format!(
                "conversation {} has {} utterances, checkpoint caps at {}",
                conv.id,
                conv.utterances.len(),
                model.cfg.model.max_conv_len
            ));
        }
    }
    Ok(())
}

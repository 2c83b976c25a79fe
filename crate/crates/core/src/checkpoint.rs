// SPDX-License-Identifier: Apache-2.0

//! Binary model files.
//!
//! Layout: the 8-byte magic `PSEQCKPT`, a little-endian `u32` format version,
//! a little-endian `u64` header length, a JSON header, then every tensor
//! listed in the header as little-endian `f64` values. The first tensor is
//! always the embedding table the network was built with.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numcore::Tensor;

pub const MAGIC: &[u8; 8] = b"PSEQCKPT";
pub const VERSION: u32 = 1;
const EMBEDDING_TABLE: &str = "@embedding_table";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    labels: Vec<String>,
    vocab: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &Model, path: &Path) -> Result<()> {
    let table = model.network.embeddings();
    let mut tensors = vec![(EMBEDDING_TABLE.to_string(), table)];
    tensors.extend(model.store.iter().map(|(_, p)| (p.name().to_string(), p.tensor())));
    let header = Header {
        model: model.network.config().clone(),
        labels: model.labels.clone(),
        vocab: model.vocab.tokens().to_vec(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header)?;
    let mut buf = Vec::with_capacity(json.len() + 20 + tensors.iter().map(|(_, t)| t.numel() * 8).sum::<usize>());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

fn take<'a>(bytes: &mut &'a [u8], n: usize) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Checkpoint("file is truncated".into()));
    }
    let (head, rest) = bytes.split_at(n);
    *bytes = rest;
    Ok(head)
}

fn read_tensor(bytes: &mut &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let raw = take(bytes, n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
    let data = raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Loads a model. With `expected`, any difference from the stored model
/// configuration is refused.
pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<Model> {
    let mut file = Vec::new();
    fs::File::open(path)?.read_to_end(&mut file)?;
    let mut bytes = file.as_slice();
    if take(&mut bytes, 8)? != MAGIC {
        return Err(Error::Checkpoint(format!("{} is not a model file", path.display())));
    }
    let version = u32::from_le_bytes(take(&mut bytes, 4)?.try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Checkpoint(format!("format version {version}, expected {VERSION}")));
    }
    let len = u64::from_le_bytes(take(&mut bytes, 8)?.try_into().expect("8 bytes"));
    let header: Header = serde_json::from_slice(take(&mut bytes, len as usize)?)?;
    if let Some(cfg) = expected {
        if *cfg != header.model {
            let stored = serde_json::to_value(&header.model)?;
            let requested = serde_json::to_value(cfg)?;
            let diffs: Vec<String> = stored
                .as_object()
                .into_iter()
                .flatten()
                .filter(|(k, v)| requested.get(k.as_str()) != Some(*v))
                .map(|(k, v)| format!("{k}: stored {v}, requested {}", requested[k.as_str()]))
                .collect();
            return Err(Error::Checkpoint(format!(
                "stored model configuration differs from the requested one ({})",
                diffs.join("; ")
            )));
        }
    }
    let first = header.tensors.first().filter(|t| t.name == EMBEDDING_TABLE);
    let Some(first) = first else {
        return Err(Error::Checkpoint("missing embedding table".into()));
    };
    let table = read_tensor(&mut bytes, &first.shape)?;

    let vocab = Vocab::from_tokens(header.vocab.iter().cloned());
    if vocab.tokens() != header.vocab.as_slice() {
        return Err(Error::Checkpoint("stored vocabulary is not in canonical order".into()));
    }
    // Initial values are overwritten below; the generator only fills the shapes.
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut model = Model::new(header.model, header.labels, vocab, table, &mut rng)?;

    let stored = &header.tensors[1..];
    let expected_names: Vec<String> = model.store.names().into_iter().map(String::from).collect();
    let stored_names: Vec<String> = stored.iter().map(|t| t.name.clone()).collect();
    if expected_names != stored_names {
        return Err(Error::Checkpoint(format!(
            "parameter set {stored_names:?} does not match the model's {expected_names:?}"
        )));
    }
    for entry in stored {
        let id = model.store.find(&entry.name).expect("names checked");
        if model.store.tensor(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!(
                "parameter `{}` has shape {:?}, the model expects {:?}",
                entry.name,
                entry.shape,
                model.store.tensor(id).shape()
            )));
        }
        let t = read_tensor(&mut bytes, &entry.shape)?;
        *model.store.get_mut(id).tensor_mut() = t;
    }
    if !bytes.is_empty() {
        return Err(Error::Checkpoint(format!("{} unexpected trailing bytes", bytes.len())));
    }
    Ok(model)
}

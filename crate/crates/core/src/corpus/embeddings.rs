// SPDX-License-Identifier: Apache-2.0

use std::collections::{BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub const PAD_TOKEN: &str = "<pad>";
pub const UNK_TOKEN: &str = "<unk>";
pub const PAD_INDEX: usize = 0;
pub const UNK_INDEX: usize = 1;

/// Half-width of the uniform range used for tokens without a pretrained vector.
pub const UNKNOWN_INIT_RANGE: f64 = 0.05;

/// Token → row index. Row 0 is padding and row 1 the unknown token;
/// corpus tokens follow in lexicographic order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let set: BTreeSet<String> = tokens
            .into_iter()
            .map(Into::into)
            .filter(|t| t != PAD_TOKEN && t != UNK_TOKEN)
            .collect();
        let all = [PAD_TOKEN.to_string(), UNK_TOKEN.to_string()]
            .into_iter()
            .chain(set)
            .collect();
        Self::from_ordered(all)
    }

    /// Every token of every message of the given corpora.
    pub fn build<'a>(corpora: impl IntoIterator<Item = &'a Corpus>) -> Self {
        Self::from_tokens(
            corpora
                .into_iter()
                .flat_map(|c| c.conversations.iter())
                .flat_map(|c| c.messages.iter())
                .flat_map(|m| m.tokens.iter().cloned()),
        )
    }

    fn from_ordered(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    /// Row index of `token`, or [`UNK_INDEX`].
    pub fn lookup(&self, token: &str) -> usize {
        self.get(token).unwrap_or(UNK_INDEX)
    }

    pub fn token(&self, index: usize) -> &str {
        &self.tokens[index]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Self {
        Self::from_ordered(self.tokens)
    }
}

/// Frozen token vectors, one row per vocab entry.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    pub matrix: Tensor,
    /// Vocab rows filled from the file.
    pub found: usize,
    /// Lines that could not be parsed or had the wrong width.
    pub skipped_lines: usize,
}

impl EmbeddingMatrix {
    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn row(&self, index: usize) -> &[f64] {
        self.matrix.row(index)
    }

    /// Rows for every token drawn from uniform(−0.05, 0.05); padding row zero.
    pub fn random(vocab: &Vocab, dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut data = vec![0.0; vocab.len() * dim];
        for row in data.chunks_mut(dim).skip(1) {
            for v in row {
                *v = rng.random_range(-UNKNOWN_INIT_RANGE..UNKNOWN_INIT_RANGE);
            }
        }
        Self {
            matrix: Tensor::new(vec![vocab.len(), dim], data).expect("consistent shape"),
            found: 0,
            skipped_lines: 0,
        }
    }
}

/// Reads a plain-text word-vector file (`token v1 … vdim` per line, with an
/// optional `count dim` header). Vocab tokens missing from the file keep the
/// seeded random rows of [`EmbeddingMatrix::random`].
pub fn load_embeddings(path: &Path, vocab: &Vocab, dim: usize, seed: u64) -> Result<EmbeddingMatrix> {
    let reader = BufReader::new(File::open(path)?);
    let mut emb = EmbeddingMatrix::random(vocab, dim, seed);
    let mut filled = vec![false; vocab.len()];
    let mut values = Vec::with_capacity(dim);

    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let mut fields = line.split_whitespace();
        let Some(token) = fields.next() else { continue };

        if lineno == 0 {
            let rest: Vec<&str> = fields.clone().collect();
            if let (Ok(_), [Ok(d)]) = (
                token.parse::<usize>(),
                rest.iter().map(|d| d.parse::<usize>()).collect::<Vec<_>>().as_slice(),
            ) {
                let d = *d;
                if d != dim {
                    return Err(Error::Embedding(format!(
                        "{}: header declares dimension {d}, configured dimension is {dim}",
                        path.display()
                    )));
                }
                continue;
            }
        }

        let Some(row) = vocab.get(token) else { continue };
        values.clear();
        let parsed = fields.try_for_each(|f| f.parse::<f64>().map(|v| values.push(v)));
        if parsed.is_err() || values.len() != dim || values.iter().any(|v| !v.is_finite()) {
            emb.skipped_lines += 1;
            continue;
        }
        if row == PAD_INDEX || filled[row] {
            continue;
        }
        emb.matrix.data_mut()[row * dim..(row + 1) * dim].copy_from_slice(&values);
        filled[row] = true;
        emb.found += 1;
    }
    Ok(emb)
}

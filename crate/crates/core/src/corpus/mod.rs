// SPDX-License-Identifier: Apache-2.0

//! Conversations, jsonl ingestion, tokenization, vocabulary and embeddings.

mod embeddings;
mod synth;
mod tokenize;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};

pub use embeddings::{
    load_embeddings, EmbeddingMatrix, Vocab, PAD_INDEX, PAD_TOKEN, UNKNOWN_INIT_RANGE, UNK_INDEX, UNK_TOKEN,
};
pub use synth::{generate_splits, generate_synthetic, SynthSpec};
pub use tokenize::{tokenize, EMPTY_TOKEN};

/// Sequence length cap used for DailyDialog-style corpora.
pub const MAX_LEN_DAILYDIALOG: usize = 35;
/// Sequence length cap used for customer-service chat corpora.
pub const MAX_LEN_CHAT: usize = 18;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Message {
    pub speaker: String,
    pub text: String,
    pub tokens: Vec<String>,
    pub label: String,
}

impl Message {
    /// Tokenizes `text` with [`tokenize`].
    pub fn new(speaker: impl Into<String>, text: impl Into<String>, label: impl Into<String>) -> Self {
        let text = text.into();
        Self {
            speaker: speaker.into(),
            tokens: tokenize(&text),
            text,
            label: label.into(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Meta {
    /// Conversation-level satisfaction in −3..=3.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub satisfaction: Option<i64>,
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Conversation {
    pub id: String,
    pub messages: Vec<Message>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<Meta>,
}

impl Conversation {
    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    pub fn has_label(&self, label: &str) -> bool {
        self.messages.iter().any(|m| m.label == label)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Corpus {
    pub split: Split,
    pub conversations: Vec<Conversation>,
    label_set: Vec<String>,
}

impl Corpus {
    /// Label set = every label that occurs, sorted lexicographically.
    pub fn new(split: Split, conversations: Vec<Conversation>) -> Result<Self> {
        if let Some(c) = conversations.iter().find(|c| c.messages.is_empty()) {
            return Err(Error::invalid("corpus", format!("conversation `{}` has no messages", c.id)));
        }
        let label_set: BTreeSet<&str> = conversations
            .iter()
            .flat_map(|c| c.messages.iter().map(|m| m.label.as_str()))
            .collect();
        let label_set = label_set.into_iter().map(String::from).collect();
        Ok(Self {
            split,
            conversations,
            label_set,
        })
    }

    pub fn label_set(&self) -> &[String] {
        &self.label_set
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    /// Replaces the label set by a sorted superset of the labels in use.
    pub fn set_label_set(&mut self, mut labels: Vec<String>) -> Result<()> {
        labels.sort();
        labels.dedup();
        if let Some(missing) = self.label_set.iter().find(|l| labels.binary_search(l).is_err()) {
            return Err(Error::invalid("corpus", format!("label `{missing}` missing from label set")));
        }
        self.label_set = labels;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.conversations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.conversations.is_empty()
    }

    pub fn num_messages(&self) -> usize {
        self.conversations.iter().map(Conversation::len).sum()
    }

    /// Message count per label, in label-set order.
    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.label_set.len()];
        for m in self.conversations.iter().flat_map(|c| &c.messages) {
            counts[self.label_index(&m.label).expect("label in set")] += 1;
        }
        counts
    }

    /// Most frequent message label; ties go to the lexicographically first.
    pub fn majority_label(&self) -> Option<&str> {
        let counts = self.label_counts();
        let best = counts.iter().enumerate().max_by(|a, b| a.1.cmp(b.1).then(b.0.cmp(&a.0)))?;
        Some(&self.label_set[best.0])
    }

    /// Orders an evaluation-exclusion list so that the majority label, when
    /// excluded, comes first. The remaining labels keep their given order.
    pub fn exclusion_list(&self, excluded: &[String]) -> Vec<String> {
        let mut out: Vec<String> = excluded.to_vec();
        if let Some(major) = self.majority_label() {
            if let Some(pos) = out.iter().position(|l| l == major) {
                let m = out.remove(pos);
                out.insert(0, m);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSplits {
    pub train: Corpus,
    pub val: Corpus,
    pub test: Corpus,
}

impl CorpusSplits {
    /// Gives all three splits the union label set so label indices agree.
    pub fn new(mut train: Corpus, mut val: Corpus, mut test: Corpus) -> Result<Self> {
        let union: BTreeSet<String> = [&train, &val, &test]
            .iter()
            .flat_map(|c| c.label_set.iter().cloned())
            .collect();
        let union: Vec<String> = union.into_iter().collect();
        for c in [&mut train, &mut val, &mut test] {
            c.set_label_set(union.clone())?;
        }
        Ok(Self { train, val, test })
    }

    pub fn label_set(&self) -> &[String] {
        self.train.label_set()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Corpus> {
        [&self.train, &self.val, &self.test].into_iter()
    }
}

/// Counters gathered while reading a jsonl corpus.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LoadReport {
    pub lines: usize,
    /// Unknown keys encountered (and ignored) across all objects.
    pub ignored_fields: usize,
}

#[derive(Deserialize)]
struct RawMessage {
    #[serde(default)]
    speaker: String,
    text: String,
    #[serde(default)]
    tokens: Option<Vec<String>>,
    label: String,
    #[serde(flatten)]
    extra: HashMap<String, Value>,
}

#[derive(Deserialize)]
struct RawConversation {
    id: String,
    messages: Vec<RawMessage>,
    #[serde(default)]
    meta: Option<Meta>,
    #[serde(flatten)]
    extra: HashMap<String, Value>,
}

/// Reads one conversation object per line. Blank lines are skipped.
pub fn read_jsonl(path: &Path, split: Split) -> Result<(Corpus, LoadReport)> {
    let reader = BufReader::new(File::open(path)?);
    let mut report = LoadReport::default();
    let mut conversations = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |msg: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        };
        let raw: RawConversation = serde_json::from_str(&line).map_err(|e| parse_err(e.to_string()))?;
        if raw.messages.is_empty() {
            return Err(parse_err(format!("conversation `{}` has no messages", raw.id)));
        }
        report.lines += 1;
        report.ignored_fields += raw.extra.len();
        let messages = raw
            .messages
            .into_iter()
            .map(|m| {
                report.ignored_fields += m.extra.len();
                let tokens = match m.tokens {
                    Some(t) if !t.is_empty() => t,
                    Some(_) => vec![EMPTY_TOKEN.to_string()],
                    None => tokenize(&m.text),
                };
                Message {
                    speaker: m.speaker,
                    text: m.text,
                    tokens,
                    label: m.label,
                }
            })
            .collect();
        conversations.push(Conversation {
            id: raw.id,
            messages,
            meta: raw.meta,
        });
    }
    Ok((Corpus::new(split, conversations)?, report))
}

/// [`read_jsonl`], logging the ignored-field count.
pub fn load_corpus(path: &Path, split: Split) -> Result<Corpus> {
    let (corpus, report) = read_jsonl(path, split)?;
    if report.ignored_fields > 0 {
        log::warn!("{}: ignored {} unknown field(s)", path.display(), report.ignored_fields);
    }
    Ok(corpus)
}

pub fn write_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for c in &corpus.conversations {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// A conversation cut or padded to a fixed number of positions.
/// Only the unmasked prefix takes part in encoding, loss and metrics.
#[derive(Clone, Debug)]
pub struct PaddedConversation<'a> {
    pub messages: &'a [Message],
    /// `true` for real messages, `false` for padding. Padding only ever follows real messages.
    pub mask: Vec<bool>,
}

impl PaddedConversation<'_> {
    pub fn real_len(&self) -> usize {
        self.messages.len()
    }

    pub fn padded_len(&self) -> usize {
        self.mask.len()
    }
}

pub fn pad_or_trim(conv: &Conversation, max_len: usize) -> PaddedConversation<'_> {
    assert!(max_len >= 1, "max_len must be positive");
    let real = conv.messages.len().min(max_len);
    let mut mask = vec![true; real];
    mask.resize(max_len, false);
    PaddedConversation {
        messages: &conv.messages[..real],
        mask,
    }
}

/// A conversation reduced to vocab and label indices, trimmed to `max_len`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedConversation {
    pub id: String,
    pub utterances: Vec<Vec<usize>>,
    pub labels: Vec<usize>,
}

impl EncodedConversation {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

pub fn encode_corpus(corpus: &Corpus, vocab: &Vocab, max_len: usize) -> Vec<EncodedConversation> {
    corpus
        .conversations
        .iter()
        .map(|c| {
            let view = pad_or_trim(c, max_len);
            EncodedConversation {
                id: c.id.clone(),
                utterances: view
                    .messages
                    .iter()
                    .map(|m| m.tokens.iter().map(|t| vocab.lookup(t)).collect())
                    .collect(),
                labels: view
                    .messages
                    .iter()
                    .map(|m| corpus.label_index(&m.label).expect("label in set"))
                    .collect(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::io::Write as _;

    use super::*;

    fn file(contents: &str) -> tempfile::NamedTempFile {
        let mut f = tempfile::NamedTempFile::new().unwrap();
        f.write_all(contents.as_bytes()).unwrap();
        f
    }

    #[test]
    fn minimal_file() {
        let f = file(concat!(
            r#"{"id":"c1","messages":[{"speaker":"a","text":"Hi!","label":"b"}]}"#,
            "\n",
            r#"{"id":"c2","messages":[{"speaker":"b","text":"ok","label":"a"}],"meta":{"satisfaction":2}}"#,
            "\n",
        ));
        let corpus = load_corpus(f.path(), Split::Train).unwrap();
        assert_eq!(corpus.len(), 2);
        assert_eq!(corpus.label_set(), &["a", "b"]);
        assert_eq!(corpus.conversations[0].messages[0].tokens, ["hi", "!"]);
        assert_eq!(corpus.conversations[1].meta.as_ref().unwrap().satisfaction, Some(2));
    }

    #[test]
    fn missing_label_reports_line() {
        let f = file(concat!(
            r#"{"id":"c1","messages":[{"speaker":"a","text":"x","label":"b"}]}"#,
            "\n",
            r#"{"id":"c2","messages":[{"speaker":"a","text":"x"}]}"#,
            "\n",
        ));
        match read_jsonl(f.path(), Split::Train) {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 2);
                assert!(msg.contains("label"), "{msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_fields_are_counted() {
        let f = file(r#"{"id":"c","lang":"fr","messages":[{"text":"x","label":"a","ts":3}]}"#);
        let (_, report) = read_jsonl(f.path(), Split::Train).unwrap();
        assert_eq!(report.ignored_fields, 2);
    }

    #[test]
    fn pretokenized_input_wins() {
        let f = file(r#"{"id":"c","messages":[{"text":"Can't stop","tokens":["ca","n't","stop"],"label":"a"}]}"#);
        let corpus = load_corpus(f.path(), Split::Train).unwrap();
        assert_eq!(corpus.conversations[0].messages[0].tokens, ["ca", "n't", "stop"]);
    }

    fn conv(n: usize) -> Conversation {
        Conversation {
            id: "c".into(),
            messages: (0..n).map(|i| Message::new("s", format!("m{i}"), "a")).collect(),
            meta: None,
        }
    }

    #[test]
    fn pad_and_trim() {
        let short = conv(8);
        let v = pad_or_trim(&short, MAX_LEN_DAILYDIALOG);
        assert_eq!(v.real_len(), 8);
        assert_eq!(v.mask.iter().filter(|m| !**m).count(), 27);

        let long = conv(40);
        let v = pad_or_trim(&long, 35);
        assert_eq!(v.real_len(), 35);
        assert_eq!(v.messages[34].text, "m34");
        assert!(v.mask.iter().all(|m| *m));

        let exact = conv(18);
        let v = pad_or_trim(&exact, MAX_LEN_CHAT);
        assert_eq!(v.real_len(), 18);
        assert!(v.mask.iter().all(|m| *m));
    }

    #[test]
    fn majority_and_exclusion_order() {
        let mut c = conv(3);
        c.messages[0].label = "z".into();
        let corpus = Corpus::new(Split::Train, vec![c]).unwrap();
        assert_eq!(corpus.majority_label(), Some("a"));
        assert_eq!(corpus.exclusion_list(&["z".into(), "a".into()]), ["a", "z"]);
    }

    #[test]
    fn splits_share_label_indices() {
        let mut a = conv(2);
        a.messages[1].label = "c".into();
        let b = conv(1);
        let splits = CorpusSplits::new(
            Corpus::new(Split::Train, vec![b.clone()]).unwrap(),
            Corpus::new(Split::Val, vec![a]).unwrap(),
            Corpus::new(Split::Test, vec![b]).unwrap(),
        )
        .unwrap();
        for c in splits.iter() {
            assert_eq!(c.label_set(), &["a", "c"]);
        }
    }
}

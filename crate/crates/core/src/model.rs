// SPDX-License-Identifier: Apache-2.0

//! Model variants and the episodic loss.
//!
//! | variant         | utterance | context | projection | decoder |
//! |-----------------|-----------|---------|------------|---------|
//! | `proto`         | AVG       |         |            | argmax  |
//! | `warmproto-crf` | BiLSTM    |         |            | CRF     |
//! | `protoseq`      | CNN       | BiLSTM  | MLP        | CRF     |
//! | `protoseq-cnn`  | CNN       |         | MLP        | CRF     |
//! | `protoseq-avg`  | AVG       | BiLSTM  | MLP        | CRF     |
//! | `protoseq-nocrf`| CNN       | BiLSTM  | MLP        | argmax  |

use std::fmt;
use std::str::FromStr;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::corpus::{EncodedConversation, Vocab};
use crate::encoders::{BiLstm, CnnEncoder, Mlp};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::numcore::{ParamId, ParamStore, Tape, Tensor, Var};
use crate::protocrf::{
    crf_nll_on_tape, emissions_on_tape, predict_nocrf, prototypes_on_tape, softmax_nll_on_tape, viterbi_decode,
    CrfParams, EmissionMatrix,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    Proto,
    WarmProtoCrf,
    ProtoSeq,
    ProtoSeqCnn,
    ProtoSeqAvg,
    ProtoSeqNoCrf,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Proto,
        Variant::WarmProtoCrf,
        Variant::ProtoSeq,
        Variant::ProtoSeqCnn,
        Variant::ProtoSeqAvg,
        Variant::ProtoSeqNoCrf,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Proto => "proto",
            Variant::WarmProtoCrf => "warmproto-crf",
            Variant::ProtoSeq => "protoseq",
            Variant::ProtoSeqCnn => "protoseq-cnn",
            Variant::ProtoSeqAvg => "protoseq-avg",
            Variant::ProtoSeqNoCrf => "protoseq-nocrf",
        }
    }

    pub fn valid_names() -> String {
        Self::ALL.map(Variant::name).join(", ")
    }

    pub fn uses_crf(self) -> bool {
        !matches!(self, Variant::Proto | Variant::ProtoSeqNoCrf)
    }

    fn utterance(self) -> UtteranceKind {
        match self {
            Variant::Proto | Variant::ProtoSeqAvg => UtteranceKind::Avg,
            Variant::WarmProtoCrf => UtteranceKind::BiLstm,
            _ => UtteranceKind::Cnn,
        }
    }

    fn has_context(self) -> bool {
        matches!(self, Variant::ProtoSeq | Variant::ProtoSeqAvg | Variant::ProtoSeqNoCrf)
    }

    fn has_mlp(self) -> bool {
        !matches!(self, Variant::Proto | Variant::WarmProtoCrf)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        if lower == "protoseq-tr" {
            return Err(Error::Config(format!(
                "variant `protoseq-tr` (transformer utterance encoder) is not implemented; valid variants: {}",
                Self::valid_names()
            )));
        }
        Self::ALL
            .into_iter()
            .find(|v| v.name() == lower)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`; valid variants: {}", Self::valid_names())))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_string()
    }
}

fn reborrow<'a>(rng: &'a mut Option<&mut dyn RngCore>) -> Option<&'a mut dyn RngCore> {
    match rng {
        Some(r) => Some(&mut **r),
        None => None,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UtteranceKind {
    Avg,
    Cnn,
    BiLstm,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub variant: Variant,
    pub embed_dim: usize,
    pub cnn_widths: Vec<usize>,
    pub cnn_filters: usize,
    /// Per direction, for both the context and the utterance BiLSTM.
    pub hidden: usize,
    pub mlp_hidden: usize,
    pub proto_dim: usize,
    pub dropout: f64,
    /// Registers the embedding table as a parameter instead of a constant.
    pub train_embeddings: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            variant: Variant::ProtoSeq,
            embed_dim: 300,
            cnn_widths: vec![3, 4, 5],
            cnn_filters: 50,
            hidden: 150,
            mlp_hidden: 128,
            proto_dim: 128,
            dropout: 0.2,
            train_embeddings: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("cnn_filters", self.cnn_filters),
            ("hidden", self.hidden),
            ("mlp_hidden", self.mlp_hidden),
            ("proto_dim", self.proto_dim),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("model.{name} must be positive")));
        }
        if self.cnn_widths.is_empty() || self.cnn_widths.contains(&0) {
            return Err(Error::Config("model.cnn_widths must be nonempty and positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("model.dropout = {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

enum UtteranceEncoder {
    Avg,
    Cnn(CnnEncoder),
    BiLstm(BiLstm),
}

/// Encoder stack and CRF head. Parameter values live in a separate [`ParamStore`].
pub struct Network {
    config: ModelConfig,
    n_labels: usize,
    embeddings: Tensor,
    embedding_param: Option<ParamId>,
    utterance: UtteranceEncoder,
    context: Option<BiLstm>,
    mlp: Option<Mlp>,
    transitions: Option<ParamId>,
}

/// Gold and decoded labels of one query conversation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QueryPrediction {
    pub conversation: usize,
    pub gold: Vec<usize>,
    pub pred: Vec<usize>,
}

impl Network {
    /// Registers every parameter of `config.variant` in `store`, drawing
    /// initial values from `rng`. CRF transitions start at zero.
    pub fn new(
        config: ModelConfig,
        n_labels: usize,
        embeddings: Tensor,
        store: &mut ParamStore,
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        config.validate()?;
        if n_labels == 0 {
            return Err(Error::Config("no labels".into()));
        }
        if embeddings.shape().len() != 2 || embeddings.cols() != config.embed_dim {
            return Err(Error::shape("embeddings", embeddings.shape(), &[embeddings.rows(), config.embed_dim]));
        }
        let variant = config.variant;
        let embedding_param = config
            .train_embeddings
            .then(|| store.register("embeddings", embeddings.clone()));
        let (utterance, mut dim) = match variant.utterance() {
            UtteranceKind::Avg => (UtteranceEncoder::Avg, config.embed_dim),
            UtteranceKind::Cnn => {
                let cnn = CnnEncoder::new(store, "cnn", config.embed_dim, &config.cnn_widths, config.cnn_filters, rng);
                let d = cnn.output_dim();
                (UtteranceEncoder::Cnn(cnn), d)
            }
            UtteranceKind::BiLstm => {
                let lstm = BiLstm::new(store, "utt", config.embed_dim, config.hidden, rng);
                let d = lstm.output_dim();
                (UtteranceEncoder::BiLstm(lstm), d)
            }
        };
        let context = variant.has_context().then(|| BiLstm::new(store, "ctx", dim, config.hidden, rng));
        if let Some(ctx) = &context {
            dim = ctx.output_dim();
        }
        let mlp = variant
            .has_mlp()
            .then(|| Mlp::new(store, "mlp", dim, config.mlp_hidden, config.proto_dim, config.dropout, rng));
        let transitions = variant
            .uses_crf()
            .then(|| store.register("crf.transitions", Tensor::zeros(&[n_labels + 2, n_labels + 2])));
        Ok(Self {
            config,
            n_labels,
            embeddings,
            embedding_param,
            utterance,
            context,
            mlp,
            transitions,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    pub fn n_labels(&self) -> usize {
        self.n_labels
    }

    /// The embedding table as constructed. With trainable embeddings the
    /// current values are in the store under `embeddings`.
    pub fn embeddings(&self) -> &Tensor {
        &self.embeddings
    }

    pub fn crf(&self, store: &ParamStore) -> Option<CrfParams> {
        self.transitions
            .map(|id| CrfParams::from_tensor(self.n_labels, store.tensor(id).clone()).expect("registered with this shape"))
    }

    fn token_matrix(&self, tape: &mut Tape, store: &ParamStore, tokens: &[usize]) -> Result<Var> {
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.embeddings.rows()) {
            return Err(Error::invalid("embeddings", format!("token index {bad} outside the table")));
        }
        match self.embedding_param {
            Some(id) => {
                let table = tape.param(store, id);
                tape.gather_rows(table, tokens)
            }
            None => {
                let d = self.config.embed_dim;
                let mut data = Vec::with_capacity(tokens.len() * d);
                for &t in tokens {
                    data.extend_from_slice(self.embeddings.row(t));
                }
                tape.constant(Tensor::new(vec![tokens.len(), d], data)?)
            }
        }
    }

    /// Prototype-space representation `[L × D]` of every message.
    /// `rng = None` evaluates without dropout.
    pub fn represent(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        conv: &EncodedConversation,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        if conv.utterances.is_empty() || conv.utterances.iter().any(Vec::is_empty) {
            return Err(Error::invalid("represent", format!("conversation {} has an empty message", conv.id)));
        }
        let tokens = conv
            .utterances
            .iter()
            .map(|u| self.token_matrix(tape, store, u))
            .collect::<Result<Vec<_>>>()?;
        let mut x = match &self.utterance {
            UtteranceEncoder::Avg => {
                let rows = tokens.into_iter().map(|t| tape.mean_rows(t)).collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)?
            }
            UtteranceEncoder::Cnn(cnn) => cnn.encode(tape, store, &tokens)?,
            UtteranceEncoder::BiLstm(lstm) => {
                let rows = tokens
                    .into_iter()
                    .map(|t| lstm.encode_final(tape, store, t))
                    .collect::<Result<Vec<_>>>()?;
                tape.concat_rows(&rows)?
            }
        };
        if let Some(ctx) = &self.context {
            x = ctx.encode_sequence(tape, store, x)?;
        }
        if let Some(mlp) = &self.mlp {
            x = mlp.forward(tape, store, x, rng)?;
        }
        Ok(x)
    }

    /// Prototypes from every message of the support conversations, as a `[K × D]` node.
    fn prototypes(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        convs: &[EncodedConversation],
        episode: &Episode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let mut reprs = Vec::new();
        let mut labels = Vec::new();
        for id in episode.support_ids() {
            let conv = &convs[id];
            reprs.push(self.represent(tape, store, conv, reborrow(&mut rng))?);
            labels.extend_from_slice(&conv.labels);
        }
        let stacked = tape.concat_rows(&reprs)?;
        Ok(prototypes_on_tape(tape, stacked, &labels, self.n_labels)?.0)
    }

    /// Mean over query conversations of the sequence negative log-likelihood
    /// (CRF variants) or of the summed per-message cross-entropy (others).
    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        convs: &[EncodedConversation],
        episode: &Episode,
        mut rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        let protos = self.prototypes(tape, store, convs, episode, reborrow(&mut rng))?;
        let transitions = self.transitions.map(|id| tape.param(store, id));
        let mut losses = Vec::new();
        for id in episode.query_ids() {
            let conv = &convs[id];
            let r = self.represent(tape, store, conv, reborrow(&mut rng))?;
            let em = emissions_on_tape(tape, r, protos)?;
            losses.push(match transitions {
                Some(tr) => crf_nll_on_tape(tape, em, tr, &conv.labels)?,
                None => softmax_nll_on_tape(tape, em, &conv.labels)?,
            });
        }
        if losses.is_empty() {
            return Err(Error::invalid("episode_loss", "episode has no query conversations"));
        }
        let n = losses.len() as f64;
        let mut total = losses[0];
        for &l in &losses[1..] {
            total = tape.add(total, l)?;
        }
        tape.scale(total, 1.0 / n)
    }

    /// Decodes every query conversation of `episode` in evaluation mode.
    pub fn predict_episode(
        &self,
        store: &ParamStore,
        convs: &[EncodedConversation],
        episode: &Episode,
    ) -> Result<Vec<QueryPrediction>> {
        let mut tape = Tape::new();
        let protos = self.prototypes(&mut tape, store, convs, episode, None)?;
        let crf = self.crf(store);
        let mut out = Vec::new();
        for id in episode.query_ids() {
            let conv = &convs[id];
            let r = self.represent(&mut tape, store, conv, None)?;
            let em_var = emissions_on_tape(&mut tape, r, protos)?;
            let em = EmissionMatrix::new(tape.value(em_var).clone())?;
            let pred = match &crf {
                Some(crf) => viterbi_decode(&em, crf)?,
                None => predict_nocrf(&em),
            };
            out.push(QueryPrediction {
                conversation: id,
                gold: conv.labels.clone(),
                pred,
            });
        }
        Ok(out)
    }
}

/// A network together with its parameters, label set and vocabulary.
pub struct Model {
    pub network: Network,
    pub store: ParamStore,
    pub labels: Vec<String>,
    pub vocab: Vocab,
}

impl Model {
    pub fn new(config: ModelConfig, labels: Vec<String>, vocab: Vocab, embeddings: Tensor, rng: &mut dyn RngCore) -> Result<Self> {
        if embeddings.rows() != vocab.len() {
            return Err(Error::Config(format!(
                "embedding table has {} rows for a vocabulary of {}",
                embeddings.rows(),
                vocab.len()
            )));
        }
        let mut store = ParamStore::new();
        let network = Network::new(config, labels.len(), embeddings, &mut store, rng)?;
        Ok(Self {
            network,
            store,
            labels,
            vocab,
        })
    }

    pub fn variant(&self) -> Variant {
        self.network.variant()
    }

    pub fn episode_loss(
        &self,
        tape: &mut Tape,
        convs: &[EncodedConversation],
        episode: &Episode,
        rng: Option<&mut dyn RngCore>,
    ) -> Result<Var> {
        self.network.episode_loss(tape, &self.store, convs, episode, rng)
    }

    pub fn predict_episode(&self, convs: &[EncodedConversation], episode: &Episode) -> Result<Vec<QueryPrediction>> {
        self.network.predict_episode(&self.store, convs, episode)
    }
}

//! Caption pipeline: vocabulary, recurrent sentence encoder, and the
//! attention decoder behind the generation objective.
//!
//! The encoder embeds each token and folds the sequence through a recurrent
//! cell from a zero state; its final hidden state is the caption
//! representation. The decoder is teacher-forced: at every step it embeds
//! the previous target token, concatenates a dot-product attention context
//! over the region vectors, updates its state, and scores the vocabulary.

use std::collections::HashMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::global::{gru_step, GruCellIds, GruCellParams, MemoryState};
use crate::region::EmbeddedRegions;
use crate::tensor::{Tape, Tensor, TensorId};

/// Width of the word-embedding vectors.
pub const WORD_EMBED_DIM: usize = 300;

pub const PAD_ID: u32 = 0;
pub const BOS_ID: u32 = 1;
pub const EOS_ID: u32 = 2;
pub const UNK_ID: u32 = 3;

const RESERVED_TOKENS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bidirectional token/id map with four reserved ids.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    token_to_id: HashMap<String, u32>,
    id_to_token: Vec<String>,
}

impl Vocabulary {
    /// Build from caption texts: tokens enter in order of first appearance.
    pub fn from_texts<S: AsRef<str>>(texts: &[S]) -> Self {
        let mut vocab = Vocabulary::reserved_only();
        for text in texts {
            for token in tokenize(text.as_ref()) {
                vocab.intern(token);
            }
        }
        vocab
    }

    fn reserved_only() -> Self {
        let id_to_token: Vec<String> = RESERVED_TOKENS.iter().map(|s| s.to_string()).collect();
        let token_to_id = id_to_token
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i as u32))
            .collect();
        Vocabulary {
            token_to_id,
            id_to_token,
        }
    }

    fn intern(&mut self, token: String) -> u32 {
        if let Some(&id) = self.token_to_id.get(&token) {
            return id;
        }
        let id = self.id_to_token.len() as u32;
        self.token_to_id.insert(token.clone(), id);
        self.id_to_token.push(token);
        id
    }

    /// Restore from an ordered token list (one entry per id). The first four
    /// entries must be the reserved tokens and entries must be unique.
    pub fn from_token_list(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS.len() {
            return Err(Error::Format(format!(
                "vocabulary needs at least {} entries, got {}",
                RESERVED_TOKENS.len(),
                tokens.len()
            )));
        }
        for (i, expected) in RESERVED_TOKENS.iter().enumerate() {
            if tokens[i] != *expected {
                return Err(Error::Format(format!(
                    "reserved vocabulary slot {i} is {:?}, expected {expected:?}",
                    tokens[i]
                )));
            }
        }
        let mut token_to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if token_to_id.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Format(format!("duplicate vocabulary token {t:?}")));
            }
        }
        Ok(Vocabulary {
            token_to_id,
            id_to_token: tokens,
        })
    }

    /// Encode a caption; unknown tokens map to `<unk>`.
    pub fn encode(&self, text: &str) -> TokenSequence {
        let ids = tokenize(text)
            .into_iter()
            .map(|t| self.token_to_id.get(&t).copied().unwrap_or(UNK_ID))
            .collect();
        TokenSequence { ids }
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.token_to_id.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.id_to_token.get(id as usize).map(String::as_str)
    }

    pub fn size(&self) -> usize {
        self.id_to_token.len()
    }

    pub fn tokens(&self) -> &[String] {
        &self.id_to_token
    }
}

/// Lowercase and split on any run of non-alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|s| !s.is_empty())
        .map(str::to_string)
        .collect()
}

/// Integer-encoded caption without sentinels; begin/end markers are added by
/// the decoder.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<u32>,
}

impl TokenSequence {
    /// Validate content ids against a vocabulary size: no padding ids, all
    /// ids in range.
    pub fn new(ids: Vec<u32>, vocab_size: usize) -> Result<Self> {
        if ids.iter().any(|&id| id == PAD_ID) {
            return Err(Error::Input("caption contains a padding id".into()));
        }
        if let Some(&id) = ids.iter().find(|&&id| id as usize >= vocab_size) {
            return Err(Error::Input(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        Ok(TokenSequence { ids })
    }

    pub fn ids(&self) -> &[u32] {
        &self.ids
    }

    /// Content length, excluding sentinels.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// All caption-side weights: shared word embeddings, encoder cell, decoder
/// cell, and the vocabulary projection.
#[derive(Debug, Clone)]
pub struct TextEncoderParams {
    pub embedding: Tensor,
    pub encoder: GruCellParams,
    pub decoder: GruCellParams,
    pub output_w: Tensor,
    pub output_b: Tensor,
}

impl TextEncoderParams {
    pub fn init<R: Rng>(vocab_size: usize, joint_dim: usize, rng: &mut R) -> Self {
        let embed_limit = 1.0 / (WORD_EMBED_DIM as f64).sqrt();
        let out_limit = 1.0 / (joint_dim as f64).sqrt();
        TextEncoderParams {
            embedding: Tensor::uniform_param(&[vocab_size, WORD_EMBED_DIM], embed_limit, rng)
                .expect("valid shape"),
            encoder: GruCellParams::init(WORD_EMBED_DIM, joint_dim, rng),
            decoder: GruCellParams::init(WORD_EMBED_DIM + joint_dim, joint_dim, rng),
            output_w: Tensor::uniform_param(&[joint_dim, vocab_size], out_limit, rng)
                .expect("valid shape"),
            output_b: Tensor::param(&[1, vocab_size], vec![0.0; vocab_size]).expect("valid shape"),
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.embedding.shape()[0]
    }

    pub fn joint_dim(&self) -> usize {
        self.encoder.state_dim()
    }

    pub fn bind(&self, tape: &mut Tape) -> TextEncoderIds {
        TextEncoderIds {
            embedding: tape.leaf(&self.embedding),
            encoder: self.encoder.bind(tape),
            decoder: self.decoder.bind(tape),
            output_w: tape.leaf(&self.output_w),
            output_b: tape.leaf(&self.output_b),
        }
    }

    pub fn accumulate_grads(&mut self, tape: &Tape, ids: &TextEncoderIds) -> Result<()> {
        self.embedding.accumulate_grad(tape.grad(ids.embedding)?)?;
        self.encoder.accumulate_grads(tape, &ids.encoder)?;
        self.decoder.accumulate_grads(tape, &ids.decoder)?;
        self.output_w.accumulate_grad(tape.grad(ids.output_w)?)?;
        self.output_b.accumulate_grad(tape.grad(ids.output_b)?)?;
        Ok(())
    }
}

/// Tape bindings for the caption-side weights.
#[derive(Debug, Clone, Copy)]
pub struct TextEncoderIds {
    pub embedding: TensorId,
    pub encoder: GruCellIds,
    pub decoder: GruCellIds,
    pub output_w: TensorId,
    pub output_b: TensorId,
}

/// Encode a caption into the joint space: embed each token, fold the
/// sequence through the encoder cell from a zero state, return the final
/// hidden state.
pub fn encode_caption(
    tape: &mut Tape,
    tokens: &TokenSequence,
    text: &TextEncoderIds,
) -> Result<TensorId> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty caption".into()));
    }
    let (vocab_size, _) = tape.dims2(text.embedding)?;
    let (_, state_dim) = tape.dims2(text.encoder.u_z)?;
    let mut state = MemoryState::zero(tape, state_dim)?;
    for &id in tokens.ids() {
        if id as usize >= vocab_size {
            return Err(Error::Input(format!(
                "token id {id} out of range for vocabulary of {vocab_size}"
            )));
        }
        let embedded = tape.select_row(text.embedding, id as usize)?;
        state = gru_step(tape, embedded, &state, &text.encoder)?;
    }
    Ok(state.m)
}

/// Teacher-forced negative log-likelihood of `target` plus a final
/// end-sentinel, conditioned on the region vectors.
///
/// Step t embeds the previous target token (begin sentinel first),
/// concatenates an attention context (softmax over dot products of the
/// decoder state with the region rows, then a weighted sum of the rows),
/// advances the decoder cell, and scores the vocabulary.
pub fn generation_loss(
    tape: &mut Tape,
    v_star: EmbeddedRegions,
    target: &TokenSequence,
    text: &TextEncoderIds,
) -> Result<TensorId> {
    let (loss, _) = generation_loss_with_attention(tape, v_star, target, text)?;
    Ok(loss)
}

/// As [`generation_loss`], also returning the per-step attention rows.
pub fn generation_loss_with_attention(
    tape: &mut Tape,
    v_star: EmbeddedRegions,
    target: &TokenSequence,
    text: &TextEncoderIds,
) -> Result<(TensorId, Vec<TensorId>)> {
    if target.is_empty() {
        return Err(Error::Input("cannot score an empty caption".into()));
    }
    let (vocab_size, _) = tape.dims2(text.embedding)?;
    if let Some(&id) = target.ids().iter().find(|&&id| id as usize >= vocab_size) {
        return Err(Error::Input(format!(
            "token id {id} out of range for vocabulary of {vocab_size}"
        )));
    }
    let (_, state_dim) = tape.dims2(text.decoder.u_z)?;

    let mut inputs = Vec::with_capacity(target.len() + 1);
    inputs.push(BOS_ID);
    inputs.extend_from_slice(target.ids());
    let mut targets = Vec::with_capacity(target.len() + 1);
    targets.extend_from_slice(target.ids());
    targets.push(EOS_ID);

    let mut state = MemoryState::zero(tape, state_dim)?;
    let mut attention_rows = Vec::with_capacity(targets.len());
    let mut total: Option<TensorId> = None;
    for (&input_id, &target_id) in inputs.iter().zip(&targets) {
        let embedded = tape.select_row(text.embedding, input_id as usize)?;
        let scores = tape.matmul_nt(state.m, v_star.id)?;
        let attention = tape.row_softmax(scores)?;
        attention_rows.push(attention);
        let context = tape.matmul(attention, v_star.id)?;
        let step_input = tape.concat_cols(embedded, context)?;
        state = gru_step(tape, step_input, &state, &text.decoder)?;
        let projected = tape.matmul(state.m, text.output_w)?;
        let logits = tape.add(projected, text.output_b)?;
        let nll = tape.nll_from_logits(logits, target_id as usize)?;
        total = Some(match total {
            Some(t) => tape.add(t, nll)?,
            None => nll,
        });
    }
    Ok((total.expect("at least one step"), attention_rows))
}

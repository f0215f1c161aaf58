//! Shared Transformer encoder, belief-span and response decoders, and the
//! copy-augmented output head.

mod config;
pub mod layers;
#[cfg(test)]
mod tests;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use config::{grid, ModelConfig};
use layers::{CopyNetwork, DecoderLayer, EncoderLayer, GenGate, Linear};

use crate::data::vocab::TokenId;
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::{Init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

/// Which of the two decoders to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    Bspan,
    Response,
}

impl DecoderKind {
    fn index(self) -> usize {
        match self {
            DecoderKind::Bspan => 0,
            DecoderKind::Response => 1,
        }
    }
}

impl fmt::Display for DecoderKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderKind::Bspan => "bspan",
            DecoderKind::Response => "response",
        })
    }
}

impl FromStr for DecoderKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bspan" => Ok(DecoderKind::Bspan),
            "response" => Ok(DecoderKind::Response),
            other => Err(Error::InvalidArgument(format!("unknown decoder `{other}`"))),
        }
    }
}

/// Final encoder layer outputs for one input sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderStates {
    /// `[src_len, d_model]`.
    pub states: Tensor,
    pub src_tokens: Vec<TokenId>,
    pub pad_mask: Vec<bool>,
}

/// Next-token distribution of one decoding step.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureDistribution {
    pub gen_dist: Vec<f64>,
    /// Over encoder positions; zero at padding. Empty when copying is disabled.
    pub copy_dist: Vec<f64>,
    pub p_gen: f64,
    pub mixed: Vec<f64>,
}

/// `p_gen * gen + (1 - p_gen) * copy`, with copy mass scatter-added onto the
/// vocabulary ids of the source tokens.
pub fn mixture(gen_dist: &[f64], copy_dist: &[f64], src_tokens: &[TokenId], p_gen: f64) -> Result<Vec<f64>> {
    if copy_dist.len() != src_tokens.len() {
        return Err(Error::shape(
            "mixture",
            format!("{} copy weights for {} source tokens", copy_dist.len(), src_tokens.len()),
        ));
    }
    let mut mixed: Vec<f64> = gen_dist.iter().map(|p| p_gen * p).collect();
    for (&w, &tok) in copy_dist.iter().zip(src_tokens) {
        let slot = mixed.get_mut(tok).ok_or(Error::OutOfRange {
            what: "vocabulary",
            index: tok,
            len: gen_dist.len(),
        })?;
        *slot += (1.0 - p_gen) * w;
    }
    Ok(mixed)
}

#[derive(Clone, Debug)]
struct Decoder {
    layers: Vec<DecoderLayer>,
    output: Linear,
    copy: CopyNetwork,
    gate: GenGate,
}

/// Tape handles produced by one decoder pass over a whole prefix.
pub struct DecoderVars {
    /// `[len, d_model]` final decoder states.
    pub states: Var,
    /// `[len, vocab]`.
    pub gen_dist: Var,
    /// `[len, src_len]`; absent when copying is disabled.
    pub copy_dist: Option<Var>,
    /// `[len, 1]`; absent when copying is disabled (p_gen is 1).
    pub p_gen: Option<Var>,
    /// `[len, vocab]`.
    pub mixed: Var,
}

/// Sinusoidal position table `[max_positions, d_model]`.
pub fn positional_encoding(max_positions: usize, d_model: usize) -> Tensor {
    let mut data = vec![0.0; max_positions * d_model];
    for pos in 0..max_positions {
        for i in 0..d_model {
            let exponent = (2 * (i / 2)) as f64 / d_model as f64;
            let angle = pos as f64 / 10000f64.powf(exponent);
            data[pos * d_model + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::raw(vec![max_positions, d_model], data)
}

/// The full model: one shared embedding table, one encoder, two decoders.
#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    embedding: ParamId,
    encoder: Vec<EncoderLayer>,
    decoders: [Decoder; 2],
    positional: Tensor,
}

impl Model {
    /// Randomly initialized model; parameters come from the `param-init` stream of `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::derive(seed, streams::PARAM_INIT, 0);
        let mut store = ParamStore::new();
        let (d, h, ff) = (config.d_model, config.n_heads, config.d_ff);
        let table = Tensor::new(&[config.vocab_size, d], Init::Uniform(0.1, &mut rng))?;
        let embedding = store.add("embedding", table)?;
        let encoder = (0..config.n_layers)
            .map(|l| EncoderLayer::new(&mut store, &format!("encoder.{l}"), d, h, ff, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let mut decoder = |name: &str, rng: &mut Rng| -> Result<Decoder> {
            let layers = (0..config.n_layers)
                .map(|l| DecoderLayer::new(&mut store, &format!("{name}.{l}"), d, h, ff, rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(Decoder {
                layers,
                output: Linear::new(&mut store, &format!("{name}.output"), d, config.vocab_size, rng)?,
                copy: CopyNetwork::new(&mut store, &format!("{name}.copy"), d, ff, rng)?,
                gate: GenGate::new(&mut store, &format!("{name}.gate"), d, rng)?,
            })
        };
        let bspan = decoder("bspan_decoder", &mut rng)?;
        let response = decoder("response_decoder", &mut rng)?;
        let positional = positional_encoding(config.max_positions, d);
        Ok(Self {
            config,
            params: store,
            embedding,
            encoder,
            decoders: [bspan, response],
            positional,
        })
    }

    /// Rebuilds a model around stored parameters; names and shapes must
    /// match the layout of `config` exactly.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        if model.params.len() != params.len() {
            return Err(Error::Config(format!(
                "expected {} parameter tensors, found {}",
                model.params.len(),
                params.len()
            )));
        }
        for (id, name, tensor) in model.params.iter() {
            let other = params.id(name).map(|i| params.get(i));
            match other {
                Some(t) if t.shape() == tensor.shape() && params.id(name) == Some(id) => {}
                _ => return Err(Error::Config(format!("parameter {name} missing or mis-shaped"))),
            }
        }
        model.params = params;
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn embedding_id(&self) -> ParamId {
        self.embedding
    }

    /// Replaces the embedding table (e.g. with pretrained vectors).
    pub fn set_embeddings(&mut self, table: Tensor) -> Result<()> {
        self.params.set(self.embedding, table)
    }

    pub fn copy_enabled(&self) -> bool {
        self.config.copy
    }

    fn dropout(&self, tape: &Tape<'_>) -> f64 {
        if tape.dropout_enabled() {
            self.config.dropout
        } else {
            0.0
        }
    }

    /// Token embedding scaled by `sqrt(d_model)` plus the sinusoidal position
    /// encoding, then dropout. The encoder also applies `word_dropout`.
    pub fn embed(&self, tape: &mut Tape<'_>, tokens: &[TokenId]) -> Result<Var> {
        self.embed_with(tape, tokens, 0.0)
    }

    fn embed_with(&self, tape: &mut Tape<'_>, tokens: &[TokenId], word_dropout: f64) -> Result<Var> {
        if tokens.len() > self.config.max_positions {
            return Err(Error::InvalidArgument(format!(
                "sequence of {} tokens exceeds max_positions {}",
                tokens.len(),
                self.config.max_positions
            )));
        }
        let d = self.config.d_model;
        if tokens.is_empty() {
            return tape.constant(Tensor::raw(vec![0, d], Vec::new()));
        }
        let table = tape.param(self.embedding);
        let rows = tape.gather(table, tokens)?;
        let rows = tape.scale(rows, (d as f64).sqrt())?;
        let rows = tape.row_dropout(rows, word_dropout)?;
        let pos = Tensor::raw(
            vec![tokens.len(), d],
            self.positional.data()[..tokens.len() * d].to_vec(),
        );
        let pos = tape.constant(pos)?;
        let x = tape.add(rows, pos)?;
        let rate = self.dropout(tape);
        tape.dropout(x, rate)
    }

    /// Encoder pass on a tape; returns `[src_len, d_model]` states.
    pub fn encode_on(&self, tape: &mut Tape<'_>, src: &[TokenId], pad_mask: &[bool]) -> Result<Var> {
        if src.is_empty() {
            return Err(Error::InvalidArgument("empty encoder input".into()));
        }
        if pad_mask.len() != src.len() {
            return Err(Error::shape(
                "encode",
                format!("{} tokens, {} mask entries", src.len(), pad_mask.len()),
            ));
        }
        if !pad_mask.iter().any(|&m| m) {
            return Err(Error::InvalidArgument("encoder input is all padding".into()));
        }
        let rate = self.dropout(tape);
        let mut x = self.embed_with(tape, src, self.config.word_dropout)?;
        for layer in &self.encoder {
            x = layer.forward(tape, x, pad_mask, rate)?;
        }
        Ok(x)
    }

    /// Decoder pass over a whole (teacher-forced or partial) prefix.
    ///
    /// Row `i` of every output is the distribution for the token following
    /// `prefix[..=i]`.
    pub fn decode_on(
        &self,
        tape: &mut Tape<'_>,
        kind: DecoderKind,
        enc: Var,
        src_tokens: &[TokenId],
        pad_mask: &[bool],
        prefix: &[TokenId],
    ) -> Result<DecoderVars> {
        let x = self.decode_states_on(tape, kind, enc, src_tokens, pad_mask, prefix)?;
        self.heads_on(tape, kind, enc, src_tokens, pad_mask, x)
    }

    /// Final decoder-layer states `[prefix_len, d_model]`.
    fn decode_states_on(
        &self,
        tape: &mut Tape<'_>,
        kind: DecoderKind,
        enc: Var,
        src_tokens: &[TokenId],
        pad_mask: &[bool],
        prefix: &[TokenId],
    ) -> Result<Var> {
        if prefix.is_empty() {
            return Err(Error::InvalidArgument("empty decoder prefix".into()));
        }
        if src_tokens.len() != tape.shape(enc)[0] || pad_mask.len() != src_tokens.len() {
            return Err(Error::shape(
                "decode",
                format!(
                    "encoder states {:?}, {} source tokens, {} mask entries",
                    tape.shape(enc),
                    src_tokens.len(),
                    pad_mask.len()
                ),
            ));
        }
        let decoder = &self.decoders[kind.index()];
        let rate = self.dropout(tape);
        let t = prefix.len();
        let causal: Vec<bool> = (0..t * t).map(|k| k % t <= k / t).collect();
        let mut x = self.embed(tape, prefix)?;
        for layer in &decoder.layers {
            x = layer.forward(tape, x, &causal, enc, pad_mask, rate)?;
        }
        Ok(x)
    }

    /// Generation, copy and gate heads over decoder states `x`.
    fn heads_on(
        &self,
        tape: &mut Tape<'_>,
        kind: DecoderKind,
        enc: Var,
        src_tokens: &[TokenId],
        pad_mask: &[bool],
        x: Var,
    ) -> Result<DecoderVars> {
        let decoder = &self.decoders[kind.index()];
        let logits = decoder.output.forward(tape, x)?;
        let gen_dist = tape.softmax_masked(logits, 1, None)?;
        if !self.config.copy {
            return Ok(DecoderVars {
                states: x,
                gen_dist,
                copy_dist: None,
                p_gen: None,
                mixed: gen_dist,
            });
        }
        let scores = decoder.copy.logits(tape, enc, x)?;
        let copy_dist = tape.softmax_masked(scores, 1, Some(pad_mask))?;
        let context = tape.matmul(copy_dist, enc)?;
        let p_gen = decoder.gate.forward(tape, x, context)?;
        let generated = tape.mul_column(gen_dist, p_gen)?;
        let copy_vocab = tape.scatter_cols(copy_dist, src_tokens, self.config.vocab_size)?;
        let p_copy = tape.affine(p_gen, -1.0, 1.0)?;
        let copied = tape.mul_column(copy_vocab, p_copy)?;
        let mixed = tape.add(generated, copied)?;
        Ok(DecoderVars {
            states: x,
            gen_dist,
            copy_dist: Some(copy_dist),
            p_gen: Some(p_gen),
            mixed,
        })
    }

    /// Inference-mode encoder pass (no dropout, no gradients).
    pub fn encode(&self, src: &[TokenId], pad_mask: &[bool]) -> Result<EncoderStates> {
        let mut tape = Tape::with_params(&self.params, false);
        let v = self.encode_on(&mut tape, src, pad_mask)?;
        Ok(EncoderStates {
            states: tape.value(v).clone(),
            src_tokens: src.to_vec(),
            pad_mask: pad_mask.to_vec(),
        })
    }

    /// Distribution over the token following `prefix`.
    pub fn decode_step(&self, kind: DecoderKind, enc: &EncoderStates, prefix: &[TokenId]) -> Result<MixtureDistribution> {
        let mut tape = Tape::with_params(&self.params, false);
        let states = tape.constant(enc.states.clone())?;
        let full = self.decode_states_on(&mut tape, kind, states, &enc.src_tokens, &enc.pad_mask, prefix)?;
        // Only the last position is needed; skip the heads on earlier rows.
        let t = prefix.len();
        let last = tape.slice(full, 0, t - 1, t)?;
        let out = self.heads_on(&mut tape, kind, states, &enc.src_tokens, &enc.pad_mask, last)?;
        let row = |v: Var| tape.value(v).row(0).to_vec();
        let gen_dist = row(out.gen_dist);
        let mixed = row(out.mixed);
        let (copy_dist, p_gen) = match (out.copy_dist, out.p_gen) {
            (Some(c), Some(p)) => (row(c), tape.value(p).data()[0]),
            _ => (Vec::new(), 1.0),
        };
        Ok(MixtureDistribution {
            gen_dist,
            copy_dist,
            p_gen,
            mixed,
        })
    }

    /// Copy logits for one decoder state; padded positions are `-inf`.
    pub fn copy_scores(&self, kind: DecoderKind, enc: &EncoderStates, dec_state: &[f64]) -> Result<Vec<f64>> {
        let mut tape = Tape::with_params(&self.params, false);
        let states = tape.constant(enc.states.clone())?;
        let dec = tape.constant(Tensor::from_vec(&[1, dec_state.len()], dec_state.to_vec())?)?;
        let logits = self.decoders[kind.index()].copy.logits(&mut tape, states, dec)?;
        Ok(tape
            .value(logits)
            .data()
            .iter()
            .zip(&enc.pad_mask)
            .map(|(&l, &keep)| if keep { l } else { f64::NEG_INFINITY })
            .collect())
    }

    /// `p_gen` for one decoder state and copy context.
    pub fn gen_gate(&self, kind: DecoderKind, dec_state: &[f64], context: &[f64]) -> Result<f64> {
        let mut tape = Tape::with_params(&self.params, false);
        let d = tape.constant(Tensor::from_vec(&[1, dec_state.len()], dec_state.to_vec())?)?;
        let c = tape.constant(Tensor::from_vec(&[1, context.len()], context.to_vec())?)?;
        let p = self.decoders[kind.index()].gate.forward(&mut tape, d, c)?;
        Ok(tape.value(p).item())
    }

    pub fn gate_params(&self, kind: DecoderKind) -> (ParamId, ParamId) {
        let g = &self.decoders[kind.index()].gate;
        (g.weight, g.bias)
    }

    pub fn output_params(&self, kind: DecoderKind) -> (ParamId, ParamId) {
        let o = &self.decoders[kind.index()].output;
        (o.weight, o.bias)
    }

    /// Greedy decoding from `start` until `eos` or `max_len` tokens. The
    /// result excludes `start` and includes `eos` when produced; exact ties
    /// go to the lowest token id.
    pub fn greedy_decode(
        &self,
        kind: DecoderKind,
        enc: &EncoderStates,
        start: TokenId,
        eos: TokenId,
        max_len: usize,
    ) -> Result<Vec<TokenId>> {
        let mut prefix = vec![start];
        let mut out = Vec::new();
        let max_len = max_len.min(self.config.max_positions.saturating_sub(1));
        while out.len() < max_len {
            let dist = self.decode_step(kind, enc, &prefix)?;
            let next = argmax(&dist.mixed);
            out.push(next);
            if next == eos {
                break;
            }
            prefix.push(next);
        }
        Ok(out)
    }
}

/// Index of the largest entry; the first (lowest) index wins ties.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

//! Parameter groups and their forward passes.

use crate::error::{Error, Result};
use crate::numerics::{Init, ParamId, ParamStore, Rng, Tape, Tensor, Var};

fn xavier(store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut Rng) -> Result<ParamId> {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    store.add(name, Tensor::new(&[rows, cols], Init::Uniform(a, rng))?)
}

/// `x W + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = xavier(store, format!("{name}.weight"), d_in, d_out, rng)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d_out]))?;
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_bias(y, b)
    }
}

/// `x W` with no bias.
#[derive(Clone, Debug)]
pub struct Projection {
    pub weight: ParamId,
}

impl Projection {
    pub fn new(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, rng: &mut Rng) -> Result<Self> {
        let weight = xavier(store, format!("{name}.weight"), d_in, d_out, rng)?;
        Ok(Self { weight })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        tape.matmul(x, w)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

pub const LAYER_NORM_EPS: f64 = 1e-6;

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Result<Self> {
        let gain = store.add(format!("{name}.gain"), Tensor::new(&[d], Init::Constant(1.0))?)?;
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[d]))?;
        Ok(Self { gain, bias })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let g = tape.param(self.gain);
        let b = tape.param(self.bias);
        tape.layer_norm(x, g, b, LAYER_NORM_EPS)
    }
}

/// Multi-head scaled dot-product attention with input and output projections.
/// The key projection has no bias: it would add the same amount to every
/// score of a query, which the softmax cancels.
#[derive(Clone, Debug)]
pub struct Attention {
    pub query: Linear,
    pub key: Projection,
    pub value: Linear,
    pub output: Linear,
    pub n_heads: usize,
}

/// Result of an attention call; `weights` holds one `[q_len, k_len]` matrix per head.
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Vec<Var>,
}

impl Attention {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, rng: &mut Rng) -> Result<Self> {
        if n_heads == 0 || d_model % n_heads != 0 {
            return Err(Error::Config(format!("{n_heads} heads for d_model {d_model}")));
        }
        Ok(Self {
            query: Linear::new(store, &format!("{name}.query"), d_model, d_model, rng)?,
            key: Projection::new(store, &format!("{name}.key"), d_model, d_model, rng)?,
            value: Linear::new(store, &format!("{name}.value"), d_model, d_model, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_model, d_model, rng)?,
            n_heads,
        })
    }

    /// `mask` is either a key mask of length `k_len` (shared by every query)
    /// or a full `[q_len, k_len]` mask; `false` entries get zero weight.
    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        queries: Var,
        keys: Var,
        mask: Option<&[bool]>,
    ) -> Result<AttentionOutput> {
        let d_model = tape.shape(queries)[1];
        if tape.shape(keys)[1] != d_model {
            return Err(Error::shape(
                "attention",
                format!("{:?} vs {:?}", tape.shape(queries), tape.shape(keys)),
            ));
        }
        let (q_len, k_len) = (tape.shape(queries)[0], tape.shape(keys)[0]);
        if let Some(m) = mask {
            if m.len() != k_len && m.len() != q_len * k_len {
                return Err(Error::shape(
                    "attention",
                    format!("mask of {} for {q_len}x{k_len}", m.len()),
                ));
            }
        }
        let head_dim = d_model / self.n_heads;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let q = self.query.forward(tape, queries)?;
        let k = self.key.forward(tape, keys)?;
        let v = self.value.forward(tape, keys)?;
        let mut heads = Vec::with_capacity(self.n_heads);
        let mut weights = Vec::with_capacity(self.n_heads);
        for h in 0..self.n_heads {
            let (qh, kh, vh) = if self.n_heads == 1 {
                (q, k, v)
            } else {
                let (lo, hi) = (h * head_dim, (h + 1) * head_dim);
                (tape.slice(q, 1, lo, hi)?, tape.slice(k, 1, lo, hi)?, tape.slice(v, 1, lo, hi)?)
            };
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, scale)?;
            let w = tape.softmax_masked(scores, 1, mask)?;
            heads.push(tape.matmul(w, vh)?);
            weights.push(w);
        }
        let joined = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat(&heads, 1)?
        };
        let output = self.output.forward(tape, joined)?;
        Ok(AttentionOutput { output, weights })
    }
}

/// Position-wise `relu(x W1 + b1) W2 + b2`.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub hidden: Linear,
    pub output: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            hidden: Linear::new(store, &format!("{name}.hidden"), d_model, d_ff, rng)?,
            output: Linear::new(store, &format!("{name}.output"), d_ff, d_model, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.relu(h)?;
        self.output.forward(tape, h)
    }
}

/// Residual connection followed by layer norm (post-norm).
fn add_norm(tape: &mut Tape<'_>, x: Var, sub: Var, norm: &LayerNorm, dropout: f64) -> Result<Var> {
    let sub = tape.dropout(sub, dropout)?;
    let sum = tape.add(x, sub)?;
    norm.forward(tape, sum)
}

#[derive(Clone, Debug)]
pub struct EncoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub ff: FeedForward,
    pub norm2: LayerNorm,
}

impl EncoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d_model, n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var, key_mask: &[bool], dropout: f64) -> Result<Var> {
        let a = self.self_attn.forward(tape, x, x, Some(key_mask))?.output;
        let x = add_norm(tape, x, a, &self.norm1, dropout)?;
        let f = self.ff.forward(tape, x)?;
        add_norm(tape, x, f, &self.norm2, dropout)
    }
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub self_attn: Attention,
    pub norm1: LayerNorm,
    pub cross_attn: Attention,
    pub norm2: LayerNorm,
    pub ff: FeedForward,
    pub norm3: LayerNorm,
}

impl DecoderLayer {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, n_heads: usize, d_ff: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d_model, n_heads, rng)?,
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), d_model)?,
            cross_attn: Attention::new(store, &format!("{name}.cross_attn"), d_model, n_heads, rng)?,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), d_model)?,
            ff: FeedForward::new(store, &format!("{name}.ff"), d_model, d_ff, rng)?,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), d_model)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape<'_>,
        x: Var,
        causal_mask: &[bool],
        memory: Var,
        memory_mask: &[bool],
        dropout: f64,
    ) -> Result<Var> {
        let a = self.self_attn.forward(tape, x, x, Some(causal_mask))?.output;
        let x = add_norm(tape, x, a, &self.norm1, dropout)?;
        let c = self.cross_attn.forward(tape, x, memory, Some(memory_mask))?.output;
        let x = add_norm(tape, x, c, &self.norm2, dropout)?;
        let f = self.ff.forward(tape, x)?;
        add_norm(tape, x, f, &self.norm3, dropout)
    }
}

/// Scores every encoder position for being copied at each decoder position.
///
/// The network is one relu hidden layer over `concat(encoder_state, decoder_state)`
/// with a scalar output and no output bias, which the softmax over positions
/// would cancel. The hidden pre-activation is linear in the
/// concatenation, so it is evaluated as `enc W_e + dec W_d + b` without
/// materializing every concatenated pair.
#[derive(Clone, Debug)]
pub struct CopyNetwork {
    pub enc_weight: ParamId,
    pub dec_weight: ParamId,
    pub hidden_bias: ParamId,
    pub out_weight: ParamId,
}

impl CopyNetwork {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        // One Xavier draw over the full [2d, hidden] matrix, split in halves.
        let a = (6.0 / (2 * d_model + hidden) as f64).sqrt();
        let enc = Tensor::new(&[d_model, hidden], Init::Uniform(a, rng))?;
        let dec = Tensor::new(&[d_model, hidden], Init::Uniform(a, rng))?;
        Ok(Self {
            enc_weight: store.add(format!("{name}.enc_weight"), enc)?,
            dec_weight: store.add(format!("{name}.dec_weight"), dec)?,
            hidden_bias: store.add(format!("{name}.hidden_bias"), Tensor::zeros(&[hidden]))?,
            out_weight: xavier(store, format!("{name}.out_weight"), hidden, 1, rng)?,
        })
    }

    /// Logits of shape `[dec_len, enc_len]`.
    pub fn logits(&self, tape: &mut Tape<'_>, enc: Var, dec: Var) -> Result<Var> {
        let (t, s) = (tape.shape(dec)[0], tape.shape(enc)[0]);
        let we = tape.param(self.enc_weight);
        let wd = tape.param(self.dec_weight);
        let b1 = tape.param(self.hidden_bias);
        let e = tape.matmul(enc, we)?;
        let d = tape.matmul(dec, wd)?;
        let d = tape.add_bias(d, b1)?;
        let pairs = tape.outer_add(d, e)?;
        let hidden = tape.relu(pairs)?;
        let w2 = tape.param(self.out_weight);
        let scores = tape.matmul(hidden, w2)?;
        tape.reshape(scores, &[t, s])
    }
}

/// `p_gen = sigmoid(w . concat(dec, context) + b)`.
#[derive(Clone, Debug)]
pub struct GenGate {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GenGate {
    pub fn new(store: &mut ParamStore, name: &str, d_model: usize, rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            weight: xavier(store, format!("{name}.weight"), 2 * d_model, 1, rng)?,
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[1]))?,
        })
    }

    /// `[rows, 1]` gate values for `[rows, d]` decoder states and contexts.
    pub fn forward(&self, tape: &mut Tape<'_>, dec: Var, context: Var) -> Result<Var> {
        let joined = tape.concat(&[dec, context], 1)?;
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        let z = tape.matmul(joined, w)?;
        let z = tape.add_bias(z, b)?;
        tape.sigmoid(z)
    }
}

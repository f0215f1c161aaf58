use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Architecture hyperparameters. Defaults are the best configuration from
/// the original grid search: 3 layers, 1 head, 512-wide feed-forward,
/// 50-dimensional embeddings, dropout 0.1.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub d_model: usize,
    pub dropout: f64,
    /// Probability of zeroing a whole source token embedding during
    /// training (its position encoding and copy id are kept).
    pub word_dropout: f64,
    pub vocab_size: usize,
    pub max_positions: usize,
    pub max_bspan_len: usize,
    pub max_response_len: usize,
    /// When false, the copy path is disabled and `p_gen` is fixed at 1.
    pub copy: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_layers: 3,
            n_heads: 1,
            d_ff: 512,
            d_model: 50,
            dropout: 0.1,
            word_dropout: 0.0,
            vocab_size: 0,
            max_positions: 128,
            max_bspan_len: 30,
            max_response_len: 50,
            copy: true,
        }
    }
}

/// Values explored by the original hyperparameter search.
pub mod grid {
    pub const D_FF: [usize; 3] = [256, 512, 1024];
    pub const N_HEADS: [usize; 4] = [1, 2, 5, 10];
    pub const N_LAYERS: [usize; 3] = [2, 3, 4];
    pub const DROPOUT: [f64; 2] = [0.1, 0.2];
    pub const D_MODEL: [usize; 2] = [50, 100];
    pub const WARMUP: [u64; 5] = [100, 500, 4000, 6000, 12000];
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("d_model", self.d_model),
            ("vocab_size", self.vocab_size),
            ("max_positions", self.max_positions),
            ("max_bspan_len", self.max_bspan_len),
            ("max_response_len", self.max_response_len),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..1.0).contains(&self.word_dropout) {
            return Err(Error::Config(format!("word_dropout {} outside [0, 1)", self.word_dropout)));
        }
        Ok(())
    }

    /// Fields whose values lie outside the original search grid.
    pub fn off_grid(&self) -> Vec<&'static str> {
        let mut out = Vec::new();
        if !grid::D_FF.contains(&self.d_ff) {
            out.push("d_ff");
        }
        if !grid::N_HEADS.contains(&self.n_heads) {
            out.push("n_heads");
        }
        if !grid::N_LAYERS.contains(&self.n_layers) {
            out.push("n_layers");
        }
        if !grid::DROPOUT.contains(&self.dropout) {
            out.push("dropout");
        }
        if !grid::D_MODEL.contains(&self.d_model) {
            out.push("d_model");
        }
        out
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

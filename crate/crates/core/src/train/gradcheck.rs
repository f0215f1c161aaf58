//! Finite-difference check of the full two-stage training loss.

use super::loss::{example_loss, LossWeights, TokenCounts};
use crate::data::{build_examples, build_vocab, generate_toy_corpus, Example};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::numerics::gradcheck::{finite_difference_check_params, ParamCheck};
use crate::numerics::{Rng, Tape};

/// Central-difference step.
pub const EPS: f64 = 1e-5;
/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;

/// Checks the summed bspan and response loss of the first two turns of a
/// toy dialogue against finite differences, dropout off.
///
/// `config.vocab_size` is replaced by the toy vocabulary size. At most
/// `max_entries` coordinates of each parameter are probed.
pub fn model_gradient_check(config: &ModelConfig, seed: u64, max_entries: usize) -> Result<Vec<ParamCheck>> {
    let toy = generate_toy_corpus(seed, 4)?;
    let vocab = build_vocab(&toy.corpus, Some(&toy.ontology), 1);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        ..config.clone()
    };
    let examples = build_examples(&toy.corpus, &vocab, &toy.db, &toy.ontology, config.max_positions)?;
    let dialogue = examples
        .iter()
        .map(|e| e.dialogue)
        .find(|&d| examples.iter().filter(|e| e.dialogue == d).count() >= 2)
        .ok_or_else(|| Error::InvalidArgument("toy corpus has no two-turn dialogue".into()))?;
    let batch: Vec<&Example> = examples.iter().filter(|e| e.dialogue == dialogue).take(2).collect();
    let model = Model::new(config, seed)?;
    let counts = TokenCounts::of(&batch);
    let loss = |tape: &mut Tape<'_>| {
        let mut total = example_loss(&model, &vocab, tape, batch[0], counts, LossWeights::default())?;
        for ex in &batch[1..] {
            let l = example_loss(&model, &vocab, tape, ex, counts, LossWeights::default())?;
            total = tape.add(total, l)?;
        }
        Ok(total)
    };
    finite_difference_check_params(model.params(), loss, EPS, max_entries, &mut Rng::new(seed))
}

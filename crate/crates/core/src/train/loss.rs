use crate::data::batch::{shift_right, Example};
use crate::data::vocab::{Vocab, GO_BSPAN, GO_RESPONSE};
use crate::error::{Error, Result};
use crate::exec::{map_ordered, ExecMode};
use crate::model::{DecoderKind, Model};
use crate::numerics::rng::streams;
use crate::numerics::{Gradients, Rng, Tape, Var};

/// Relative weights of the two decoder terms.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub bspan: f64,
    pub response: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            bspan: 1.0,
            response: 1.0,
        }
    }
}

/// Summed NLL of `target` under one decoder, teacher-forced.
fn decoder_nll(
    model: &Model,
    tape: &mut Tape<'_>,
    kind: DecoderKind,
    source: &[usize],
    start: usize,
    target: &[usize],
) -> Result<Var> {
    let mask = vec![true; source.len()];
    let enc = model.encode_on(tape, source, &mask)?;
    let prefix = shift_right(start, target);
    let out = model.decode_on(tape, kind, enc, source, &mask, &prefix)?;
    tape.nll(out.mixed, target)
}

/// Token counts that normalize the two loss terms of a batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenCounts {
    pub bspan: usize,
    pub response: usize,
}

impl TokenCounts {
    pub fn of(examples: &[&Example]) -> Self {
        Self {
            bspan: examples.iter().map(|e| e.bspan_target.len()).sum(),
            response: examples.iter().map(|e| e.response_target.len()).sum(),
        }
    }
}

/// One example's share of the batch loss:
/// `w_b * nll_bspan / N_bspan + w_r * nll_response / N_response`.
pub fn example_loss(
    model: &Model,
    vocab: &Vocab,
    tape: &mut Tape<'_>,
    example: &Example,
    counts: TokenCounts,
    weights: LossWeights,
) -> Result<Var> {
    if counts.bspan == 0 || counts.response == 0 {
        return Err(Error::InvalidArgument("batch without target tokens".into()));
    }
    let b = decoder_nll(
        model,
        tape,
        DecoderKind::Bspan,
        &example.stage1,
        vocab.id(GO_BSPAN),
        &example.bspan_target,
    )?;
    let r = decoder_nll(
        model,
        tape,
        DecoderKind::Response,
        &example.stage2,
        vocab.id(GO_RESPONSE),
        &example.response_target,
    )?;
    let b = tape.scale(b, weights.bspan / counts.bspan as f64)?;
    let r = tape.scale(r, weights.response / counts.response as f64)?;
    tape.add(b, r)
}

/// Batch loss without gradients, dropout off.
pub fn turn_loss(model: &Model, vocab: &Vocab, batch: &[&Example], weights: LossWeights) -> Result<f64> {
    let counts = TokenCounts::of(batch);
    let mut total = 0.0;
    for ex in batch {
        let mut tape = Tape::with_params(model.params(), false);
        let l = example_loss(model, vocab, &mut tape, ex, counts, weights)?;
        total += tape.value(l).item();
    }
    Ok(total)
}

/// Number of examples whose gradients are summed sequentially inside one
/// parallel task. Fixed so that the floating-point summation order, and
/// therefore the result, does not depend on the thread count.
pub const GRAD_CHUNK: usize = 4;

/// Loss and parameter gradients of one batch.
pub struct BatchGradients {
    pub loss: f64,
    pub grads: Gradients,
}

/// Where per-example dropout masks come from.
#[derive(Clone, Copy, Debug)]
pub struct DropoutSeed {
    pub seed: u64,
    pub step: u64,
}

impl DropoutSeed {
    fn rng(self, position: usize) -> Rng {
        Rng::derive(self.seed, streams::DROPOUT, (self.step << 20) | position as u64)
    }
}

/// Loss and gradients of a batch, with examples processed in fixed-size
/// chunks that run in parallel under `mode`. `dropout = None` disables dropout.
pub fn batch_gradients(
    model: &Model,
    vocab: &Vocab,
    batch: &[&Example],
    weights: LossWeights,
    dropout: Option<DropoutSeed>,
    mode: ExecMode,
) -> Result<BatchGradients> {
    let counts = TokenCounts::of(batch);
    let chunks: Vec<(usize, &[&Example])> = batch
        .chunks(GRAD_CHUNK)
        .enumerate()
        .map(|(i, c)| (i * GRAD_CHUNK, c))
        .collect();
    let n_params = model.params().len();
    let partials = map_ordered(mode, &chunks, |&(offset, chunk)| -> Result<BatchGradients> {
        let mut grads = Gradients::empty(n_params);
        let mut loss = 0.0;
        for (k, ex) in chunk.iter().enumerate() {
            let mut tape = Tape::with_params(model.params(), true);
            if let Some(d) = dropout {
                tape.enable_dropout(d.rng(offset + k));
            }
            let l = example_loss(model, vocab, &mut tape, ex, counts, weights)?;
            loss += tape.value(l).item();
            tape.backward(l)?;
            tape.add_param_grads_into(&mut grads);
        }
        Ok(BatchGradients { loss, grads })
    });
    let mut total = BatchGradients {
        loss: 0.0,
        grads: Gradients::empty(n_params),
    };
    for part in partials {
        let part = part?;
        total.loss += part.loss;
        total.grads.accumulate(&part.grads);
    }
    Ok(total)
}

use super::corpus::Corpus;
use super::vocab::{TokenId, Vocab, EOS_BSPAN, EOS_RESPONSE, GO_BSPAN, GO_RESPONSE};
use crate::dialogue::db::{db_count_token, db_lookup, DbRecord, Ontology};
use crate::dialogue::input::{build_stage1_input, build_stage2_input};
use crate::dialogue::BeliefSpan;
use crate::error::{Error, Result};
use crate::numerics::Rng;

/// One teacher-forced training example: a single turn with gold history.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub dialogue: usize,
    pub turn: usize,
    pub stage1: Vec<TokenId>,
    /// Gold belief span tokens ending with `<eos_b>`.
    pub bspan_target: Vec<TokenId>,
    pub stage2: Vec<TokenId>,
    /// Gold delexicalized response tokens ending with `<eos_r>`.
    pub response_target: Vec<TokenId>,
    pub db_matches: usize,
}

/// Decoder input for teacher forcing: the start token followed by every
/// target token but the last.
pub fn shift_right(start: TokenId, target: &[TokenId]) -> Vec<TokenId> {
    let mut out = Vec::with_capacity(target.len());
    out.push(start);
    out.extend_from_slice(&target[..target.len().saturating_sub(1)]);
    out
}

impl Example {
    pub fn bspan_input(&self, vocab: &Vocab) -> Vec<TokenId> {
        shift_right(vocab.id(GO_BSPAN), &self.bspan_target)
    }

    pub fn response_input(&self, vocab: &Vocab) -> Vec<TokenId> {
        shift_right(vocab.id(GO_RESPONSE), &self.response_target)
    }

    pub fn n_target_tokens(&self) -> (usize, usize) {
        (self.bspan_target.len(), self.response_target.len())
    }
}

fn check_len(what: &str, len: usize, max: usize, d: usize, t: usize) -> Result<()> {
    if len > max {
        return Err(Error::InvalidArgument(format!(
            "dialogue {d} turn {t}: {what} of {len} tokens exceeds max_positions {max}"
        )));
    }
    Ok(())
}

/// Builds one example per turn using the gold previous belief span and
/// response as history. The DB count token in the stage-2 input comes from
/// looking up the gold belief span.
pub fn build_examples(
    corpus: &Corpus,
    vocab: &Vocab,
    db: &[DbRecord],
    ontology: &Ontology,
    max_positions: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::with_capacity(corpus.n_turns());
    for (d, dialogue) in corpus.dialogues.iter().enumerate() {
        let mut prev_bspan = BeliefSpan::default();
        let mut prev_response: Vec<&str> = Vec::new();
        for (t, turn) in dialogue.turns.iter().enumerate() {
            let stage1 = build_stage1_input(&prev_bspan, &prev_response, &turn.user_tokens(), max_positions)?;
            let bspan = turn.belief();
            let matches = db_lookup(&bspan, db, ontology).len();
            let stage2 = build_stage2_input(&stage1, &bspan, db_count_token(matches), max_positions);
            let bspan_target = vocab.encode(&bspan.tokens());
            let mut response_target = vocab.encode(&turn.response_tokens());
            response_target.push(vocab.id(EOS_RESPONSE));
            check_len("belief span", bspan_target.len(), max_positions, d, t)?;
            check_len("response", response_target.len(), max_positions, d, t)?;
            debug_assert_eq!(bspan_target.last(), Some(&vocab.id(EOS_BSPAN)));
            out.push(Example {
                dialogue: d,
                turn: t,
                stage1: vocab.encode(&stage1),
                bspan_target,
                stage2: vocab.encode(&stage2),
                response_target,
                db_matches: matches,
            });
            prev_bspan = bspan;
            prev_response = turn.response_tokens();
        }
    }
    Ok(out)
}

/// A padded token matrix with its mask (`true` on real tokens).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Padded {
    pub ids: Vec<Vec<TokenId>>,
    pub mask: Vec<Vec<bool>>,
}

impl Padded {
    pub fn new(rows: &[&[TokenId]], pad: TokenId) -> Self {
        let width = rows.iter().map(|r| r.len()).max().unwrap_or(0);
        let ids = rows
            .iter()
            .map(|r| {
                let mut row = r.to_vec();
                row.resize(width, pad);
                row
            })
            .collect();
        let mask = rows
            .iter()
            .map(|r| (0..width).map(|i| i < r.len()).collect())
            .collect();
        Self { ids, mask }
    }

    /// Row `i` without its padding.
    pub fn row(&self, i: usize) -> &[TokenId] {
        let n = self.mask[i].iter().filter(|&&m| m).count();
        &self.ids[i][..n]
    }

    pub fn n_tokens(&self) -> usize {
        self.mask.iter().flatten().filter(|&&m| m).count()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub stage1: Padded,
    pub bspan_target: Padded,
    pub stage2: Padded,
    pub response_target: Padded,
    /// `(dialogue, turn)` of each row.
    pub provenance: Vec<(usize, usize)>,
    /// Index of each row in the example list the batch was cut from.
    pub example_indices: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[Example], indices: &[usize], pad: TokenId) -> Self {
        let pick = |f: fn(&Example) -> &[TokenId]| -> Vec<&[TokenId]> {
            indices.iter().map(|&i| f(&examples[i])).collect()
        };
        Self {
            stage1: Padded::new(&pick(|e| &e.stage1), pad),
            bspan_target: Padded::new(&pick(|e| &e.bspan_target), pad),
            stage2: Padded::new(&pick(|e| &e.stage2), pad),
            response_target: Padded::new(&pick(|e| &e.response_target), pad),
            provenance: indices.iter().map(|&i| (examples[i].dialogue, examples[i].turn)).collect(),
            example_indices: indices.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }
}

/// Shuffles example indices with `rng` and cuts them into batches of at
/// most `batch_size`.
pub fn make_batches(examples: &[Example], pad: TokenId, batch_size: usize, rng: &mut Rng) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be at least 1".into()));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    Ok(order
        .chunks(batch_size)
        .map(|chunk| Batch::from_examples(examples, chunk, pad))
        .collect())
}

use serde::{Deserialize, Serialize};

use super::bspan::BeliefSpan;
use super::db::{db_count_token, db_lookup, DbRecord, Ontology};
use super::input::{build_stage1_input, build_stage2_input, lexicalize};
use crate::data::corpus::normalize;
use crate::data::vocab::{Vocab, EOS_BSPAN, EOS_RESPONSE, GO_BSPAN, GO_RESPONSE};
use crate::error::{Error, Result};
use crate::model::{DecoderKind, Model};

/// Splits off sentence punctuation and lowercases everything but
/// `*_SLOT` placeholders.
pub fn tokenize(text: &str) -> Vec<String> {
    let mut spaced = String::with_capacity(text.len() + 8);
    for c in text.chars() {
        if matches!(c, '.' | ',' | '?' | '!') {
            spaced.push(' ');
            spaced.push(c);
            spaced.push(' ');
        } else {
            spaced.push(c);
        }
    }
    normalize(&spaced).split(' ').filter(|t| !t.is_empty()).map(str::to_string).collect()
}

/// The two decoding steps of a turn, as token strings.
pub trait TurnModel {
    fn max_positions(&self) -> usize;
    /// Belief span tokens for a stage-1 input.
    fn decode_bspan(&self, stage1: &[String]) -> Result<Vec<String>>;
    /// Delexicalized response tokens (without end marker) for a stage-2 input.
    fn decode_response(&self, stage2: &[String]) -> Result<Vec<String>>;
}

/// A trained model and its vocabulary, decoded greedily.
#[derive(Clone, Debug)]
pub struct DialogueModel {
    pub model: Model,
    pub vocab: Vocab,
}

impl DialogueModel {
    pub fn new(model: Model, vocab: Vocab) -> Result<Self> {
        if model.config().vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "model vocabulary of {} does not match {} tokens",
                model.config().vocab_size,
                vocab.len()
            )));
        }
        Ok(Self { model, vocab })
    }

    fn decode(&self, kind: DecoderKind, input: &[String], start: &str, eos: &str, max_len: usize) -> Result<Vec<String>> {
        let ids = self.vocab.encode(input);
        let enc = self.model.encode(&ids, &vec![true; ids.len()])?;
        let out = self
            .model
            .greedy_decode(kind, &enc, self.vocab.id(start), self.vocab.id(eos), max_len)?;
        Ok(self.vocab.decode(&out))
    }
}

impl TurnModel for DialogueModel {
    fn max_positions(&self) -> usize {
        self.model.config().max_positions
    }

    fn decode_bspan(&self, stage1: &[String]) -> Result<Vec<String>> {
        let max = self.model.config().max_bspan_len;
        self.decode(DecoderKind::Bspan, stage1, GO_BSPAN, EOS_BSPAN, max)
    }

    fn decode_response(&self, stage2: &[String]) -> Result<Vec<String>> {
        let max = self.model.config().max_response_len;
        let mut out = self.decode(DecoderKind::Response, stage2, GO_RESPONSE, EOS_RESPONSE, max)?;
        if out.last().map(String::as_str) == Some(EOS_RESPONSE) {
            out.pop();
        }
        Ok(out)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Session {
    pub id: String,
    pub prev_bspan: BeliefSpan,
    pub prev_response: Vec<String>,
    /// Number of completed turns.
    pub turn: u64,
    pub selected: Option<DbRecord>,
}

impl Session {
    pub fn new(id: impl Into<String>) -> Self {
        Self {
            id: id.into(),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TurnResult {
    pub bspan: BeliefSpan,
    pub db_matches: usize,
    pub db_token: String,
    pub delex_response: Vec<String>,
    pub surface_response: String,
    /// Placeholders left in the surface response for lack of a value.
    pub unfilled: Vec<String>,
    pub selected: Option<DbRecord>,
}

/// Runs both stages for one user utterance against an explicit history.
pub fn run_turn_with_history<M: TurnModel + ?Sized>(
    model: &M,
    prev_bspan: &BeliefSpan,
    prev_response: &[String],
    user: &[String],
    db: &[DbRecord],
    ontology: &Ontology,
) -> Result<TurnResult> {
    let stage1 = build_stage1_input(prev_bspan, prev_response, user, model.max_positions())?;
    let bspan = BeliefSpan::parse(&model.decode_bspan(&stage1)?);
    let matches = db_lookup(&bspan, db, ontology);
    let db_token = db_count_token(matches.len());
    let stage2 = build_stage2_input(&stage1, &bspan, db_token, model.max_positions());
    let delex_response = model.decode_response(&stage2)?;
    let selected = matches.first().map(|r| (*r).clone());
    let lex = lexicalize(&delex_response, selected.as_ref(), &bspan, ontology);
    Ok(TurnResult {
        db_matches: matches.len(),
        db_token: db_token.to_string(),
        bspan,
        delex_response,
        surface_response: lex.text,
        unfilled: lex.unfilled,
        selected,
    })
}

/// Runs a turn on `session`'s own history and advances it. On error the
/// session is left untouched.
pub fn run_turn<M: TurnModel + ?Sized>(
    session: &mut Session,
    user_utterance: &str,
    model: &M,
    db: &[DbRecord],
    ontology: &Ontology,
) -> Result<TurnResult> {
    let user = tokenize(user_utterance);
    let result = run_turn_with_history(model, &session.prev_bspan, &session.prev_response, &user, db, ontology)?;
    session.prev_bspan = result.bspan.clone();
    session.prev_response = result.delex_response.clone();
    session.selected = result.selected.clone();
    session.turn += 1;
    Ok(result)
}

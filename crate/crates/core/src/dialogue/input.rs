//! Construction of the two encoder inputs for a turn, and lexicalization
//! of the decoded response.

use super::bspan::BeliefSpan;
use super::db::{placeholder_slot, DbRecord, Ontology};
use crate::data::vocab::{EOS_USER, SEP, STAGE1, STAGE2};
use crate::error::{Error, Result};

/// Keeps the leading marker and the newest `max_len - 1` tokens.
fn truncate_left(mut tokens: Vec<String>, max_len: usize) -> Vec<String> {
    if tokens.len() > max_len && max_len >= 1 {
        let drop = tokens.len() - max_len;
        tokens.drain(1..1 + drop);
    }
    tokens
}

/// `<s1> bspan(prev) <sep> prev_response <sep> user <eos_u>`, truncated from
/// the left (oldest history first) to `max_positions`.
pub fn build_stage1_input<S: AsRef<str>>(
    prev_bspan: &BeliefSpan,
    prev_response: &[S],
    user: &[S],
    max_positions: usize,
) -> Result<Vec<String>> {
    if user.is_empty() {
        return Err(Error::InvalidArgument("empty user utterance".into()));
    }
    if max_positions < 2 {
        return Err(Error::InvalidArgument(format!("max_positions {max_positions}")));
    }
    let mut out = vec![STAGE1.to_string()];
    out.extend(prev_bspan.tokens());
    out.push(SEP.to_string());
    out.extend(prev_response.iter().map(|t| t.as_ref().to_string()));
    out.push(SEP.to_string());
    out.extend(user.iter().map(|t| t.as_ref().to_string()));
    out.push(EOS_USER.to_string());
    Ok(truncate_left(out, max_positions))
}

/// `<s2>` followed by the stage-1 input without its marker, then
/// `<sep> bspan(new) <sep> db_token`; truncated like stage 1.
pub fn build_stage2_input(
    stage1: &[String],
    new_bspan: &BeliefSpan,
    db_token: &str,
    max_positions: usize,
) -> Vec<String> {
    let body = match stage1.first().map(String::as_str) {
        Some(STAGE1) => &stage1[1..],
        _ => stage1,
    };
    let mut out = vec![STAGE2.to_string()];
    out.extend(body.iter().cloned());
    out.push(SEP.to_string());
    out.extend(new_bspan.tokens());
    out.push(SEP.to_string());
    out.push(db_token.to_string());
    truncate_left(out, max_positions)
}

/// Surface text plus the placeholders that could not be filled.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicalized {
    pub text: String,
    pub unfilled: Vec<String>,
}

/// Replaces `slot_SLOT` placeholders with attributes of `record`. Without a
/// record, informable slots fall back to the belief span's constraint values.
/// Anything left unresolved stays verbatim and is reported.
pub fn lexicalize<S: AsRef<str>>(
    delex: &[S],
    record: Option<&DbRecord>,
    bspan: &BeliefSpan,
    ontology: &Ontology,
) -> Lexicalized {
    let constraints = ontology.constraints(&bspan.informable);
    let mut unfilled = Vec::new();
    let words: Vec<String> = delex
        .iter()
        .map(|tok| {
            let tok = tok.as_ref();
            let Some(slot) = placeholder_slot(tok) else {
                return tok.to_string();
            };
            let value = match record {
                Some(r) => r.get(slot).map(str::to_string),
                None => constraints
                    .iter()
                    .find(|(s, _)| s == slot)
                    .map(|(_, v)| v.clone()),
            };
            value.unwrap_or_else(|| {
                unfilled.push(tok.to_string());
                tok.to_string()
            })
        })
        .collect();
    Lexicalized {
        text: words.join(" "),
        unfilled,
    }
}

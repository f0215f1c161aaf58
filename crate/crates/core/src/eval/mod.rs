//! Success F1 and corpus BLEU, and the driver that decodes a corpus turn by
//! turn to compute them.

pub mod metrics;

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

pub use metrics::{bleu, dialogue_slot_counts, success_f1, PrecisionRecall, SlotAggregation, SlotCounts};

use crate::data::Corpus;
use crate::dialogue::db::{DbRecord, Ontology};
use crate::dialogue::{run_turn_with_history, BeliefSpan, TurnModel};
use crate::error::{Error, Result};
use crate::exec::{map_ordered, ExecMode};

/// Which history the model sees from turn 2 on.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// The gold previous belief span and response.
    Gold,
    /// The model's own previous outputs.
    #[default]
    Own,
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ContextMode::Gold => "gold",
            ContextMode::Own => "own",
        })
    }
}

impl FromStr for ContextMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gold" => Ok(ContextMode::Gold),
            "own" => Ok(ContextMode::Own),
            other => Err(Error::InvalidArgument(format!("context mode `{other}` (expected gold or own)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TurnOutput {
    pub user: String,
    pub gold_bspan: BeliefSpan,
    pub pred_bspan: BeliefSpan,
    pub gold_response: String,
    pub pred_response: String,
    pub db_matches: usize,
}

impl TurnOutput {
    pub fn bspan_exact(&self) -> bool {
        self.gold_bspan == self.pred_bspan
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DialogueReport {
    pub dialogue: usize,
    pub success: PrecisionRecall,
    pub turns: Vec<TurnOutput>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub context_mode: ContextMode,
    pub aggregation: SlotAggregation,
    pub success_precision: f64,
    pub success_recall: f64,
    pub success_f1: f64,
    pub bleu: f64,
    /// Fraction of turns whose decoded belief span equals the gold one.
    pub bspan_exact_match: f64,
    pub dialogues: Vec<DialogueReport>,
}

impl EvalReport {
    pub fn turns(&self) -> impl Iterator<Item = &TurnOutput> {
        self.dialogues.iter().flat_map(|d| &d.turns)
    }

    /// Among turns whose gold informables include any of `values`, the
    /// fraction whose decoded informables contain all of those gold values.
    /// `None` when no turn qualifies.
    pub fn value_recall(&self, values: &[String]) -> Option<f64> {
        let mut hit = 0usize;
        let mut total = 0usize;
        for t in self.turns() {
            let wanted: Vec<&String> = t.gold_bspan.informable.iter().filter(|v| values.contains(v)).collect();
            if wanted.is_empty() {
                continue;
            }
            total += 1;
            if wanted.iter().all(|v| t.pred_bspan.informable.contains(v)) {
                hit += 1;
            }
        }
        (total > 0).then(|| hit as f64 / total as f64)
    }
}

pub struct EvalOptions {
    pub context_mode: ContextMode,
    pub aggregation: SlotAggregation,
    pub exec: ExecMode,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            context_mode: ContextMode::Own,
            aggregation: SlotAggregation::PerDialogue,
            exec: ExecMode::Parallel,
        }
    }
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Decodes every turn of `corpus` and scores the delexicalized responses.
pub fn evaluate<M: TurnModel + Sync + ?Sized>(
    model: &M,
    corpus: &Corpus,
    db: &[DbRecord],
    ontology: &Ontology,
    options: &EvalOptions,
) -> Result<EvalReport> {
    if corpus.n_turns() == 0 {
        return Err(Error::InvalidArgument("evaluation corpus has no turns".into()));
    }
    let slots: BTreeSet<String> = ontology.placeholders.iter().cloned().collect();
    let indexed: Vec<(usize, &crate::data::Dialogue)> = corpus.dialogues.iter().enumerate().collect();
    let decoded = map_ordered(options.exec, &indexed, |&(d, dialogue)| -> Result<DialogueReport> {
        let mut prev_bspan = BeliefSpan::default();
        let mut prev_response: Vec<String> = Vec::new();
        let mut turns = Vec::with_capacity(dialogue.turns.len());
        for turn in &dialogue.turns {
            let user = words(&turn.user);
            let out = run_turn_with_history(model, &prev_bspan, &prev_response, &user, db, ontology)?;
            let gold_bspan = turn.belief();
            match options.context_mode {
                ContextMode::Gold => {
                    prev_bspan = gold_bspan.clone();
                    prev_response = words(&turn.response_delex);
                }
                ContextMode::Own => {
                    prev_bspan = out.bspan.clone();
                    prev_response = out.delex_response.clone();
                }
            }
            turns.push(TurnOutput {
                user: turn.user.clone(),
                gold_bspan,
                pred_bspan: out.bspan,
                gold_response: turn.response_delex.clone(),
                pred_response: out.delex_response.join(" "),
                db_matches: out.db_matches,
            });
        }
        let generated: Vec<Vec<String>> = turns.iter().map(|t| words(&t.pred_response)).collect();
        let reference: Vec<Vec<String>> = turns.iter().map(|t| words(&t.gold_response)).collect();
        let c = dialogue_slot_counts(&generated, &reference, &slots, options.aggregation)?;
        Ok(DialogueReport {
            dialogue: d,
            success: PrecisionRecall::from_counts(c.tp, c.fp, c.fn_),
            turns,
        })
    });
    let dialogues = decoded.into_iter().collect::<Result<Vec<_>>>()?;

    let generated: Vec<Vec<Vec<String>>> = dialogues
        .iter()
        .map(|d| d.turns.iter().map(|t| words(&t.pred_response)).collect())
        .collect();
    let reference: Vec<Vec<Vec<String>>> = dialogues
        .iter()
        .map(|d| d.turns.iter().map(|t| words(&t.gold_response)).collect())
        .collect();
    let success = success_f1(&generated, &reference, &slots, options.aggregation)?;
    let hyps: Vec<Vec<String>> = generated.into_iter().flatten().collect();
    let refs: Vec<Vec<String>> = reference.into_iter().flatten().collect();
    let bleu = bleu(&hyps, &refs, 4)?;
    let n_turns = hyps.len();
    let exact = dialogues.iter().flat_map(|d| &d.turns).filter(|t| t.bspan_exact()).count();
    Ok(EvalReport {
        context_mode: options.context_mode,
        aggregation: options.aggregation,
        success_precision: success.precision,
        success_recall: success.recall,
        success_f1: success.f1,
        bleu,
        bspan_exact_match: exact as f64 / n_turns as f64,
        dialogues,
    })
}

#[cfg(test)]
mod tests;

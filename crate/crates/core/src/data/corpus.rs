use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::vocab::Vocab;
use crate::dialogue::db::{placeholder_slot, Ontology};
use crate::dialogue::BeliefSpan;
use crate::error::{Error, Result};

/// One exchange: the user utterance, the gold belief span after it and the
/// gold delexicalized system response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub user: String,
    pub bspan: String,
    pub response_delex: String,
}

impl Turn {
    pub fn new(user: impl Into<String>, bspan: &BeliefSpan, response_delex: impl Into<String>) -> Self {
        Self {
            user: user.into(),
            bspan: bspan.to_text(),
            response_delex: response_delex.into(),
        }
    }

    pub fn belief(&self) -> BeliefSpan {
        BeliefSpan::parse_text(&self.bspan)
    }

    pub fn user_tokens(&self) -> Vec<&str> {
        self.user.split_whitespace().collect()
    }

    pub fn response_tokens(&self) -> Vec<&str> {
        self.response_delex.split_whitespace().collect()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Dialogue {
    pub turns: Vec<Turn>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<String>,
    pub dialogues: Vec<Dialogue>,
}

/// Lowercases every token except `*_SLOT` placeholders and collapses whitespace.
pub fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(|t| {
            if placeholder_slot(t).is_some() {
                t.to_string()
            } else {
                t.to_lowercase()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

const TURN_FIELDS: [&str; 3] = ["user", "bspan", "response_delex"];

impl Corpus {
    pub fn new(split: Option<String>, dialogues: Vec<Dialogue>) -> Self {
        Self { split, dialogues }
    }

    pub fn len(&self) -> usize {
        self.dialogues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dialogues.is_empty()
    }

    pub fn n_turns(&self) -> usize {
        self.dialogues.iter().map(|d| d.turns.len()).sum()
    }

    pub fn turns(&self) -> impl Iterator<Item = &Turn> {
        self.dialogues.iter().flat_map(|d| &d.turns)
    }

    /// Validates a parsed document. `source` names it in diagnostics.
    pub fn from_value(value: &Value, source: &str) -> Result<Self> {
        let schema = |detail: String| Error::Schema {
            path: source.to_string(),
            detail,
        };
        let obj = value
            .as_object()
            .ok_or_else(|| schema("top level must be an object with a `dialogues` list".into()))?;
        let split = match obj.get("split") {
            None | Some(Value::Null) => None,
            Some(Value::String(s)) => Some(s.clone()),
            Some(_) => return Err(schema("`split` must be a string".into())),
        };
        let dialogues = obj
            .get("dialogues")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("missing `dialogues` list".into()))?;
        let mut out = Vec::with_capacity(dialogues.len());
        for (d, dialogue) in dialogues.iter().enumerate() {
            let turns = dialogue
                .as_array()
                .ok_or_else(|| schema(format!("dialogues[{d}] must be a list of turns")))?;
            let mut parsed = Vec::with_capacity(turns.len());
            for (t, turn) in turns.iter().enumerate() {
                let mut fields = [String::new(), String::new(), String::new()];
                for (slot, name) in fields.iter_mut().zip(TURN_FIELDS) {
                    *slot = match turn.get(name) {
                        Some(Value::String(s)) => normalize(s),
                        Some(_) => return Err(schema(format!("dialogues[{d}][{t}].{name} must be a string"))),
                        None => return Err(schema(format!("dialogues[{d}][{t}] is missing `{name}`"))),
                    };
                }
                let [user, bspan, response_delex] = fields;
                if user.is_empty() {
                    return Err(schema(format!("dialogues[{d}][{t}].user is empty")));
                }
                parsed.push(Turn {
                    user,
                    bspan,
                    response_delex,
                });
            }
            out.push(Dialogue { turns: parsed });
        }
        Ok(Self::new(split, out))
    }

    pub fn from_json(text: &str, source: &str) -> Result<Self> {
        let value: Value = serde_json::from_str(text).map_err(|e| Error::Schema {
            path: source.to_string(),
            detail: format!("line {}, column {}: {e}", e.line(), e.column()),
        })?;
        Self::from_value(&value, source)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

pub fn load_corpus(path: &Path) -> Result<Corpus> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let corpus = Corpus::from_json(&text, &path.display().to_string())?;
    log::info!(
        "loaded {}: {} dialogues, {} turns",
        path.display(),
        corpus.len(),
        corpus.n_turns()
    );
    Ok(corpus)
}

/// Unified vocabulary over user, belief-span and response text. Ontology
/// values and placeholders are always included so that any value can be
/// represented, and therefore copied, even if the corpus never uses it.
pub fn build_vocab(corpus: &Corpus, ontology: Option<&Ontology>, min_freq: usize) -> Vocab {
    let mut counts: HashMap<String, usize> = HashMap::new();
    for turn in corpus.turns() {
        for text in [&turn.user, &turn.bspan, &turn.response_delex] {
            for tok in text.split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
    }
    if let Some(ont) = ontology {
        let extra = ont
            .informable
            .keys()
            .flat_map(|v| v.split_whitespace())
            .chain(ont.placeholders.iter().map(String::as_str));
        for tok in extra {
            let c = counts.entry(tok.to_string()).or_insert(0);
            *c = (*c).max(min_freq);
        }
    }
    Vocab::from_counts(&counts, min_freq)
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_corpus_is_valid() {
        let c = Corpus::from_json(r#"{"dialogues": []}"#, "t").unwrap();
        assert!(c.is_empty());
        assert_eq!(c.split, None);
    }

    #[test]
    fn missing_field_names_the_turn() {
        let doc = json!({"dialogues": [[
            {"user": "hi", "bspan": "<inf> <req> <eos_b>", "response_delex": "hello"},
            {"user": "hi", "bspan": "<inf> <req> <eos_b>"}
        ]]});
        let err = Corpus::from_value(&doc, "c.json").unwrap_err().to_string();
        assert!(err.contains("dialogues[0][1]") && err.contains("response_delex"), "{err}");
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = Corpus::from_json("{\n  \"dialogues\": [,]\n}", "c.json").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
    }

    #[test]
    fn normalizes_case_except_placeholders() {
        assert_eq!(normalize(" I want  name_SLOT "), "i want name_SLOT");
    }

    #[test]
    fn round_trips_through_json() {
        let c = Corpus::new(
            Some("train".into()),
            vec![Dialogue {
                turns: vec![Turn::new("i want cheap food", &BeliefSpan::new(["cheap"], [""; 0]), "ok")],
            }],
        );
        assert_eq!(Corpus::from_json(&c.to_json().unwrap(), "t").unwrap(), c);
    }

    #[test]
    fn vocab_frequency_order_and_threshold() {
        let c = Corpus::new(
            None,
            vec![Dialogue {
                turns: vec![Turn {
                    user: "a a b".into(),
                    bspan: String::new(),
                    response_delex: String::new(),
                }],
            }],
        );
        let v = build_vocab(&c, None, 1);
        assert_eq!(v.get("a"), Some(16));
        assert_eq!(v.get("b"), Some(17));
        let v = build_vocab(&c, None, 2);
        assert_eq!(v.get("b"), None);
        assert_eq!(v.id("b"), 1);
    }
}

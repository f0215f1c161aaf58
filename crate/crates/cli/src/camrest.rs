//! One-shot converter from the published CamRest676 layout.
//!
//! Input files: `CamRest676.json` (a list of `{dial: [{usr: {transcript,
//! slu}, sys: {sent}}]}`), `CamRestDB.json` (a list of records) and
//! `CamRestOTGY.json` (`{informable: {slot: [values]}, requestable: [slots]}`).
//!
//! Belief spans accumulate `inform` annotations over the dialogue, a later
//! value replacing an earlier one for the same slot; `dontcare` and `none`
//! are dropped. Requests are per turn. System sentences are delexicalized
//! by replacing database and ontology values with `<slot>_SLOT`, longest
//! match first. The upstream files carry no split, so dialogues are split
//! 3:1:1 into train, dev and test in file order.

use std::collections::BTreeMap;

use anyhow::{anyhow, bail, Context, Result};
use serde::Deserialize;
use serde_json::Value;

use dialogue_core::data::{Corpus, Dialogue, Turn};
use dialogue_core::dialogue::db::{placeholder, DbRecord, Ontology};
use dialogue_core::dialogue::{tokenize, BeliefSpan};

#[derive(Deserialize)]
struct RawDialogue {
    dial: Vec<RawTurn>,
}

#[derive(Deserialize)]
struct RawTurn {
    usr: RawUser,
    sys: RawSystem,
}

#[derive(Deserialize)]
struct RawUser {
    transcript: String,
    #[serde(default)]
    slu: Vec<RawAct>,
}

#[derive(Deserialize)]
struct RawAct {
    act: String,
    slots: Vec<Vec<String>>,
}

#[derive(Deserialize)]
struct RawSystem {
    sent: String,
}

#[derive(Deserialize)]
struct RawOntology {
    informable: BTreeMap<String, Vec<String>>,
    requestable: Vec<String>,
}

/// Slots whose values are replaced in system sentences.
const DELEX_SLOTS: [&str; 7] = ["name", "food", "area", "pricerange", "address", "phone", "postcode"];

pub struct Converted {
    pub splits: Vec<(String, Corpus)>,
    pub db: Vec<DbRecord>,
    pub ontology: Ontology,
}

fn norm(text: &str) -> String {
    tokenize(text).join(" ")
}

fn records(text: &str) -> Result<Vec<DbRecord>> {
    let raw: Vec<BTreeMap<String, Value>> = serde_json::from_str(text).context("parsing CamRestDB")?;
    raw.into_iter()
        .enumerate()
        .map(|(i, r)| {
            let attrs: Vec<(String, String)> = r
                .into_iter()
                .filter_map(|(k, v)| {
                    let s = match v {
                        Value::String(s) => s,
                        Value::Number(n) => n.to_string(),
                        _ => return None,
                    };
                    Some((k, norm(&s)))
                })
                .collect();
            DbRecord::new(attrs).map_err(|e| anyhow!("database record {i}: {e}"))
        })
        .collect()
}

/// Token sequences to replace, longest first.
fn delex_table(db: &[DbRecord], ontology: &Ontology) -> Vec<(Vec<String>, String)> {
    let mut table: BTreeMap<Vec<String>, String> = BTreeMap::new();
    for r in db {
        for slot in DELEX_SLOTS {
            if let Some(v) = r.get(slot).filter(|v| !v.is_empty()) {
                table.entry(tokenize(v)).or_insert_with(|| placeholder(slot));
            }
        }
    }
    for (value, slot) in &ontology.informable {
        table.entry(tokenize(value)).or_insert_with(|| placeholder(slot));
    }
    let mut out: Vec<_> = table.into_iter().collect();
    out.sort_by(|a, b| b.0.len().cmp(&a.0.len()).then_with(|| a.0.cmp(&b.0)));
    out
}

fn delexicalize(sentence: &str, table: &[(Vec<String>, String)]) -> String {
    let toks = tokenize(sentence);
    let mut out = Vec::new();
    let mut i = 0;
    'outer: while i < toks.len() {
        for (value, ph) in table {
            let n = value.len();
            if n > 0 && i + n <= toks.len() && toks[i..i + n] == value[..] {
                out.push(ph.clone());
                i += n;
                continue 'outer;
            }
        }
        out.push(toks[i].clone());
        i += 1;
    }
    out.join(" ")
}

fn convert_dialogue(raw: &RawDialogue, table: &[(Vec<String>, String)]) -> Dialogue {
    let mut state: Vec<(String, String)> = Vec::new();
    let mut turns = Vec::new();
    for t in &raw.dial {
        let mut requests = Vec::new();
        for act in &t.usr.slu {
            for pair in &act.slots {
                let [slot, value] = pair.as_slice() else { continue };
                let value = norm(value);
                match act.act.as_str() {
                    "inform" if value != "dontcare" && value != "none" && !value.is_empty() => {
                        match state.iter_mut().find(|(s, _)| s == slot) {
                            Some(entry) => entry.1 = value,
                            None => state.push((slot.clone(), value)),
                        }
                    }
                    "request" => requests.push(value),
                    _ => {}
                }
            }
        }
        let informable: Vec<String> = state.iter().flat_map(|(_, v)| tokenize(v)).collect();
        let bspan = BeliefSpan::new(informable, requests);
        turns.push(Turn::new(norm(&t.usr.transcript), &bspan, delexicalize(&t.sys.sent, table)));
    }
    Dialogue { turns }
}

pub fn convert(dialogues: &str, db: &str, ontology: &str) -> Result<Converted> {
    let raw: Vec<RawDialogue> = serde_json::from_str(dialogues).context("parsing CamRest676")?;
    if raw.is_empty() {
        bail!("CamRest676 file has no dialogues");
    }
    let db = records(db)?;
    let raw_ont: RawOntology = serde_json::from_str(ontology).context("parsing CamRestOTGY")?;
    let mut informable = BTreeMap::new();
    for (slot, values) in &raw_ont.informable {
        for v in values {
            informable.insert(norm(v), slot.clone());
        }
    }
    let ontology = Ontology {
        informable,
        requestable: raw_ont.requestable.clone(),
        placeholders: DELEX_SLOTS.iter().map(|s| placeholder(s)).collect(),
    };
    let table = delex_table(&db, &ontology);
    let all: Vec<Dialogue> = raw.iter().map(|d| convert_dialogue(d, &table)).collect();
    let n = all.len();
    let (n_train, n_dev) = (n * 3 / 5, n / 5);
    let mut splits = Vec::new();
    let mut rest = all.into_iter();
    for (name, count) in [("train", n_train), ("dev", n_dev), ("test", n - n_train - n_dev)] {
        let dialogues: Vec<Dialogue> = rest.by_ref().take(count).collect();
        splits.push((
            name.to_string(),
            Corpus {
                split: Some(name.to_string()),
                dialogues,
            },
        ));
    }
    Ok(Converted { splits, db, ontology })
}

#[cfg(test)]
mod tests {
    use super::*;

    const DIALS: &str = r#"[
      {"dial": [
        {"turn": 0, "usr": {"transcript": "I want Italian food.", "slu": [{"act": "inform", "slots": [["food", "italian"]]}]},
         "sys": {"sent": "Pizza Hut serves italian food in the north."}},
        {"turn": 1, "usr": {"transcript": "What is the phone number?", "slu": [
            {"act": "inform", "slots": [["food", "italian"]]},
            {"act": "inform", "slots": [["area", "dontcare"]]},
            {"act": "request", "slots": [["slot", "phone"]]}]},
         "sys": {"sent": "The number is 01223 323737."}}
      ]},
      {"dial": [{"usr": {"transcript": "cheap please", "slu": [{"act": "inform", "slots": [["pricerange", "cheap"]]}]}, "sys": {"sent": "ok"}}]},
      {"dial": [{"usr": {"transcript": "bye", "slu": []}, "sys": {"sent": "bye"}}]},
      {"dial": [{"usr": {"transcript": "bye", "slu": []}, "sys": {"sent": "bye"}}]},
      {"dial": [{"usr": {"transcript": "bye", "slu": []}, "sys": {"sent": "bye"}}]}
    ]"#;
    const DB: &str = r#"[{"id": 7, "name": "pizza hut", "food": "italian", "area": "north", "pricerange": "cheap",
        "phone": "01223 323737", "address": "1 regent street", "postcode": "cb2 1ab", "location": [52.2, 0.1]}]"#;
    const OTGY: &str = r#"{"informable": {"food": ["italian", "modern european"], "area": ["north"], "pricerange": ["cheap"]},
        "requestable": ["phone", "address"]}"#;

    #[test]
    fn converts_turns_splits_and_delexicalizes() {
        let c = convert(DIALS, DB, OTGY).unwrap();
        let sizes: Vec<(&str, usize)> = c.splits.iter().map(|(s, k)| (s.as_str(), k.dialogues.len())).collect();
        assert_eq!(sizes, vec![("train", 3), ("dev", 1), ("test", 1)]);
        let d = &c.splits[0].1.dialogues[0];
        assert_eq!(d.turns[0].user, "i want italian food .");
        assert_eq!(d.turns[0].bspan, "<inf> italian <req> <eos_b>");
        assert_eq!(d.turns[0].response_delex, "name_SLOT serves food_SLOT food in the area_SLOT .");
        assert_eq!(d.turns[1].bspan, "<inf> italian <req> phone <eos_b>");
        assert_eq!(d.turns[1].response_delex, "the number is phone_SLOT .");
        assert_eq!(c.db[0].get("id"), Some("7"));
        assert_eq!(c.db[0].get("location"), None);
        assert_eq!(c.ontology.slot_of("modern european"), Some("food"));
    }

    #[test]
    fn malformed_input_is_an_error() {
        assert!(convert("{}", DB, OTGY).is_err());
        assert!(convert("[]", DB, OTGY).is_err());
        assert!(convert(DIALS, r#"[{"food": "thai"}]"#, OTGY).is_err());
    }
}

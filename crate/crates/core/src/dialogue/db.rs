use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::bspan::BeliefSpan;
use crate::data::vocab::{DB_0, DB_1, DB_2, DB_3PLUS};
use crate::error::{Error, Result};

/// One database entity: slot name to lowercase value. Always has `name`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "BTreeMap<String, String>", into = "BTreeMap<String, String>")]
pub struct DbRecord {
    attributes: BTreeMap<String, String>,
}

impl TryFrom<BTreeMap<String, String>> for DbRecord {
    type Error = String;

    fn try_from(map: BTreeMap<String, String>) -> std::result::Result<Self, String> {
        if !map.contains_key("name") {
            return Err("record without a `name` attribute".into());
        }
        Ok(Self {
            attributes: map.into_iter().map(|(k, v)| (k, v.to_lowercase())).collect(),
        })
    }
}

impl From<DbRecord> for BTreeMap<String, String> {
    fn from(r: DbRecord) -> Self {
        r.attributes
    }
}

impl DbRecord {
    pub fn new<K, V>(attrs: impl IntoIterator<Item = (K, V)>) -> Result<Self>
    where
        K: Into<String>,
        V: Into<String>,
    {
        let map = attrs
            .into_iter()
            .map(|(k, v)| (k.into(), v.into()))
            .collect::<BTreeMap<_, _>>();
        Self::try_from(map).map_err(Error::InvalidArgument)
    }

    pub fn get(&self, slot: &str) -> Option<&str> {
        self.attributes.get(slot).map(String::as_str)
    }

    pub fn name(&self) -> &str {
        &self.attributes["name"]
    }

    pub fn attributes(&self) -> &BTreeMap<String, String> {
        &self.attributes
    }
}

/// Value-to-slot map for informable values plus requestable slot names
/// and the delexicalization placeholders.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ontology {
    /// Value (possibly several space-separated tokens) to slot name.
    pub informable: BTreeMap<String, String>,
    pub requestable: Vec<String>,
    /// Placeholder tokens such as `name_SLOT`.
    pub placeholders: Vec<String>,
}

/// Suffix shared by all placeholder tokens.
pub const SLOT_SUFFIX: &str = "_SLOT";

pub fn placeholder(slot: &str) -> String {
    format!("{slot}{SLOT_SUFFIX}")
}

/// Slot name of a placeholder token, if it is one.
pub fn placeholder_slot(token: &str) -> Option<&str> {
    token.strip_suffix(SLOT_SUFFIX).filter(|s| !s.is_empty())
}

impl Ontology {
    pub fn slot_of(&self, value: &str) -> Option<&str> {
        self.informable.get(value).map(String::as_str)
    }

    fn longest_value(&self) -> usize {
        self.informable
            .keys()
            .map(|k| k.split_whitespace().count())
            .max()
            .unwrap_or(1)
    }

    /// Groups informable tokens into (slot, value) constraints, matching the
    /// longest known multi-token value first. Unknown tokens are skipped
    /// with a warning.
    pub fn constraints(&self, informable: &[String]) -> Vec<(String, String)> {
        let longest = self.longest_value();
        let mut out = Vec::new();
        let mut i = 0;
        while i < informable.len() {
            let mut matched = false;
            for n in (1..=longest.min(informable.len() - i)).rev() {
                let value = informable[i..i + n].join(" ");
                if let Some(slot) = self.slot_of(&value) {
                    out.push((slot.to_string(), value));
                    i += n;
                    matched = true;
                    break;
                }
            }
            if !matched {
                log::warn!("belief value `{}` is not in the ontology; ignored", informable[i]);
                i += 1;
            }
        }
        out
    }

    pub fn slot_tokens(&self) -> Vec<String> {
        self.placeholders.clone()
    }
}

/// Records satisfying every known informable constraint, in database order.
pub fn db_lookup<'a>(bspan: &BeliefSpan, db: &'a [DbRecord], ontology: &Ontology) -> Vec<&'a DbRecord> {
    let constraints = ontology.constraints(&bspan.informable);
    db.iter()
        .filter(|r| {
            constraints
                .iter()
                .all(|(slot, value)| r.get(slot) == Some(value.as_str()))
        })
        .collect()
}

/// Match-count bucket token.
pub fn db_count_token(n: usize) -> &'static str {
    match n {
        0 => DB_0,
        1 => DB_1,
        2 => DB_2,
        _ => DB_3PLUS,
    }
}

fn read(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn load_db(path: &Path) -> Result<Vec<DbRecord>> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

pub fn load_ontology(path: &Path) -> Result<Ontology> {
    serde_json::from_str(&read(path)?).map_err(|e| Error::Schema {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

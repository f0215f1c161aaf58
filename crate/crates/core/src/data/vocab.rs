use std::collections::HashMap;

use serde::{Deserialize, Serialize};

pub type TokenId = usize;

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const STAGE1: &str = "<s1>";
pub const STAGE2: &str = "<s2>";
pub const SEP: &str = "<sep>";
pub const EOS_USER: &str = "<eos_u>";
pub const EOS_BSPAN: &str = "<eos_b>";
pub const EOS_RESPONSE: &str = "<eos_r>";
pub const INFORM: &str = "<inf>";
pub const REQUEST: &str = "<req>";
pub const GO_BSPAN: &str = "<go_b>";
pub const GO_RESPONSE: &str = "<go_r>";
pub const DB_0: &str = "<db_0>";
pub const DB_1: &str = "<db_1>";
pub const DB_2: &str = "<db_2>";
pub const DB_3PLUS: &str = "<db_3plus>";

/// Reserved tokens; their ids are their positions here.
pub const SPECIALS: [&str; 16] = [
    PAD,
    UNK,
    STAGE1,
    STAGE2,
    SEP,
    EOS_USER,
    EOS_BSPAN,
    EOS_RESPONSE,
    INFORM,
    REQUEST,
    GO_BSPAN,
    GO_RESPONSE,
    DB_0,
    DB_1,
    DB_2,
    DB_3PLUS,
];

pub fn is_special(token: &str) -> bool {
    SPECIALS.contains(&token)
}

/// Bidirectional token/id map shared by the encoder and both decoders.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, TokenId>,
}

impl From<Vec<String>> for Vocab {
    fn from(tokens: Vec<String>) -> Self {
        let ids = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Self { tokens, ids }
    }
}

impl From<Vocab> for Vec<String> {
    fn from(v: Vocab) -> Self {
        v.tokens
    }
}

impl Vocab {
    /// Specials first, then tokens by descending count (ties alphabetical).
    /// Tokens seen fewer than `min_freq` times are left out and encode as `<unk>`.
    pub fn from_counts(counts: &HashMap<String, usize>, min_freq: usize) -> Self {
        let mut ranked: Vec<(&String, &usize)> = counts
            .iter()
            .filter(|(t, &c)| c >= min_freq && !is_special(t))
            .collect();
        ranked.sort_by(|a, b| b.1.cmp(a.1).then_with(|| a.0.cmp(b.0)));
        let tokens: Vec<String> = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(ranked.into_iter().map(|(t, _)| t.clone()))
            .collect();
        Self::from(tokens)
    }

    /// Counts whitespace tokens over all given texts.
    pub fn from_texts<'a>(texts: impl IntoIterator<Item = &'a str>, min_freq: usize) -> Self {
        let mut counts = HashMap::new();
        for text in texts {
            for tok in text.split_whitespace() {
                *counts.entry(tok.to_string()).or_insert(0) += 1;
            }
        }
        Self::from_counts(&counts, min_freq)
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> TokenId {
        self.ids.get(token).copied().unwrap_or(1)
    }

    pub fn get(&self, token: &str) -> Option<TokenId> {
        self.ids.get(token).copied()
    }

    pub fn contains(&self, token: &str) -> bool {
        self.ids.contains_key(token)
    }

    pub fn token(&self, id: TokenId) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<TokenId> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[TokenId]) -> Vec<String> {
        ids.iter().map(|&i| self.token(i).to_string()).collect()
    }

    pub fn pad(&self) -> TokenId {
        0
    }
}

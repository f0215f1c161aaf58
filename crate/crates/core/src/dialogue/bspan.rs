use serde::{Deserialize, Serialize};

use crate::data::vocab::{EOS_BSPAN, INFORM, REQUEST};

/// Dialogue state: accumulated constraint values and this turn's requested slots.
///
/// Serializes as `<inf> v1 .. vk <req> r1 .. rm <eos_b>`.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BeliefSpan {
    pub informable: Vec<String>,
    pub requestable: Vec<String>,
}

fn dedup(items: impl IntoIterator<Item = String>) -> Vec<String> {
    let mut out: Vec<String> = Vec::new();
    for item in items {
        if !out.contains(&item) {
            out.push(item);
        }
    }
    out
}

impl BeliefSpan {
    pub fn new<I, R>(informable: I, requestable: R) -> Self
    where
        I: IntoIterator,
        I::Item: Into<String>,
        R: IntoIterator,
        R::Item: Into<String>,
    {
        Self {
            informable: dedup(informable.into_iter().map(Into::into)),
            requestable: dedup(requestable.into_iter().map(Into::into)),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.informable.is_empty() && self.requestable.is_empty()
    }

    pub fn tokens(&self) -> Vec<String> {
        let mut out = Vec::with_capacity(self.informable.len() + self.requestable.len() + 3);
        out.push(INFORM.to_string());
        out.extend(self.informable.iter().cloned());
        out.push(REQUEST.to_string());
        out.extend(self.requestable.iter().cloned());
        out.push(EOS_BSPAN.to_string());
        out
    }

    pub fn to_text(&self) -> String {
        self.tokens().join(" ")
    }

    /// Total parse of (possibly malformed) decoder output.
    ///
    /// Tokens between `<inf>` and the next marker are informable, tokens
    /// between `<req>` and the next marker are requestable; anything else
    /// is ignored and parsing stops at `<eos_b>`.
    pub fn parse<S: AsRef<str>>(tokens: &[S]) -> Self {
        #[derive(PartialEq)]
        enum Section {
            None,
            Inform,
            Request,
        }
        let mut section = Section::None;
        let mut informable = Vec::new();
        let mut requestable = Vec::new();
        for tok in tokens {
            match tok.as_ref() {
                INFORM => section = Section::Inform,
                REQUEST => section = Section::Request,
                EOS_BSPAN => break,
                t if t.starts_with('<') && t.ends_with('>') => section = Section::None,
                t => match section {
                    Section::Inform => informable.push(t.to_string()),
                    Section::Request => requestable.push(t.to_string()),
                    Section::None => {}
                },
            }
        }
        Self::new(informable, requestable)
    }

    pub fn parse_text(text: &str) -> Self {
        Self::parse(&text.split_whitespace().collect::<Vec<_>>())
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn toks(s: &str) -> Vec<&str> {
        s.split_whitespace().collect()
    }

    #[test]
    fn parses_both_sections() {
        let b = BeliefSpan::parse(&toks("<inf> italian centre <req> phone <eos_b>"));
        assert_eq!(b, BeliefSpan::new(["italian", "centre"], ["phone"]));
    }

    #[test]
    fn lone_terminator_is_empty() {
        assert_eq!(BeliefSpan::parse(&toks("<eos_b>")), BeliefSpan::default());
        assert_eq!(BeliefSpan::parse::<&str>(&[]), BeliefSpan::default());
    }

    #[test]
    fn duplicates_are_dropped() {
        let b = BeliefSpan::parse(&toks("<inf> italian italian <req> <eos_b>"));
        assert_eq!(b, BeliefSpan::new(["italian"], Vec::<String>::new()));
    }

    #[test]
    fn missing_markers_degrade_to_empty_sections() {
        assert_eq!(BeliefSpan::parse(&toks("italian phone")), BeliefSpan::default());
        let b = BeliefSpan::parse(&toks("<req> phone"));
        assert_eq!(b, BeliefSpan::new(Vec::<String>::new(), ["phone"]));
        let b = BeliefSpan::parse(&toks("<inf> cheap <eos_b> <req> phone"));
        assert_eq!(b, BeliefSpan::new(["cheap"], Vec::<String>::new()));
    }

    #[test]
    fn serializes_empty_span() {
        assert_eq!(BeliefSpan::default().to_text(), "<inf> <req> <eos_b>");
    }

    proptest! {
        #[test]
        fn serialize_then_parse_is_identity(
            inf in proptest::collection::vec("[a-z]{1,6}", 0..5),
            req in proptest::collection::vec("[a-z]{1,6}", 0..3),
        ) {
            let b = BeliefSpan::new(inf, req);
            prop_assert_eq!(BeliefSpan::parse(&b.tokens()), b);
        }

        #[test]
        fn parse_is_total(tokens in proptest::collection::vec(
            prop_oneof![
                Just("<inf>".to_string()),
                Just("<req>".to_string()),
                Just("<eos_b>".to_string()),
                Just("<sep>".to_string()),
                "[a-z]{1,4}",
            ],
            0..20,
        )) {
            let b = BeliefSpan::parse(&tokens);
            prop_assert_eq!(BeliefSpan::parse(&b.tokens()), b);
        }
    }
}

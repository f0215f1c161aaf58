use std::collections::HashMap;

use proptest::prelude::*;

use super::*;
use crate::data::toy::generate_toy_corpus;
use crate::dialogue::db::{db_count_token, db_lookup};
use crate::dialogue::input::{build_stage1_input, build_stage2_input};

/// Answers every gold input with the gold output.
struct Oracle {
    bspans: HashMap<Vec<String>, Vec<String>>,
    responses: HashMap<Vec<String>, Vec<String>>,
}

impl Oracle {
    fn new(corpus: &Corpus, db: &[DbRecord], ont: &Ontology) -> Self {
        let mut bspans = HashMap::new();
        let mut responses = HashMap::new();
        for d in &corpus.dialogues {
            let mut prev = BeliefSpan::default();
            let mut prev_r: Vec<String> = vec![];
            for t in &d.turns {
                let s1 = build_stage1_input(&prev, &prev_r, &words(&t.user), 128).unwrap();
                let b = t.belief();
                let s2 = build_stage2_input(&s1, &b, db_count_token(db_lookup(&b, db, ont).len()), 128);
                bspans.insert(s1, b.tokens());
                responses.insert(s2, words(&t.response_delex));
                prev = b;
                prev_r = words(&t.response_delex);
            }
        }
        Self { bspans, responses }
    }
}

impl TurnModel for Oracle {
    fn max_positions(&self) -> usize {
        128
    }
    fn decode_bspan(&self, stage1: &[String]) -> Result<Vec<String>> {
        Ok(self.bspans.get(stage1).cloned().unwrap_or_default())
    }
    fn decode_response(&self, stage2: &[String]) -> Result<Vec<String>> {
        Ok(self.responses.get(stage2).cloned().unwrap_or_default())
    }
}

struct Silent;

impl TurnModel for Silent {
    fn max_positions(&self) -> usize {
        128
    }
    fn decode_bspan(&self, _: &[String]) -> Result<Vec<String>> {
        Ok(vec![])
    }
    fn decode_response(&self, _: &[String]) -> Result<Vec<String>> {
        Ok(vec![])
    }
}

#[test]
fn oracle_scores_perfectly_in_both_modes() {
    let toy = generate_toy_corpus(1, 12).unwrap();
    let oracle = Oracle::new(&toy.corpus, &toy.db, &toy.ontology);
    for mode in [ContextMode::Gold, ContextMode::Own] {
        let opts = EvalOptions {
            context_mode: mode,
            ..EvalOptions::default()
        };
        let r = evaluate(&oracle, &toy.corpus, &toy.db, &toy.ontology, &opts).unwrap();
        assert_eq!(r.bleu, 1.0);
        assert_eq!(r.success_f1, 1.0);
        assert_eq!(r.bspan_exact_match, 1.0);
    }
}

#[test]
fn silent_model_scores_zero() {
    let toy = generate_toy_corpus(1, 4).unwrap();
    let r = evaluate(&Silent, &toy.corpus, &toy.db, &toy.ontology, &EvalOptions::default()).unwrap();
    assert_eq!(r.bleu, 0.0);
    assert_eq!(r.success_f1, 0.0);
    let json = serde_json::to_string(&r).unwrap();
    assert!(json.contains("\"success_f1\":0.0"));
}

#[test]
fn sequential_and_parallel_agree() {
    let toy = generate_toy_corpus(5, 10).unwrap();
    let mut shifted = toy.corpus.clone();
    for d in &mut shifted.dialogues {
        d.turns.retain(|t| !t.response_delex.starts_with("you are"));
    }
    let oracle = Oracle::new(&shifted, &toy.db, &toy.ontology);
    let run = |exec| {
        let opts = EvalOptions {
            exec,
            ..EvalOptions::default()
        };
        evaluate(&oracle, &toy.corpus, &toy.db, &toy.ontology, &opts).unwrap()
    };
    assert_eq!(run(ExecMode::Sequential), run(ExecMode::Parallel));
}

#[test]
fn value_recall_counts_turns_with_values() {
    let toy = generate_toy_corpus(1, 6).unwrap();
    let r = evaluate(&Silent, &toy.corpus, &toy.db, &toy.ontology, &EvalOptions::default()).unwrap();
    assert_eq!(r.value_recall(&["italian".into(), "thai".into(), "north".into()]), Some(0.0));
    assert_eq!(r.value_recall(&["klingon".into()]), None);
}

#[test]
fn context_mode_parses() {
    assert_eq!("gold".parse::<ContextMode>().unwrap(), ContextMode::Gold);
    assert!("mine".parse::<ContextMode>().is_err());
}

const VOCAB: [&str; 6] = ["a", "b", "c", "name_SLOT", "phone_SLOT", "food_SLOT"];

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(0..VOCAB.len(), 0..8).prop_map(|ids| ids.into_iter().map(|i| VOCAB[i].to_string()).collect())
}

fn corpus_pair() -> impl Strategy<Value = (Vec<Vec<Vec<String>>>, Vec<Vec<Vec<String>>>)> {
    let dialogue = prop::collection::vec((sentence(), sentence()), 1..4).prop_map(|turns| turns.into_iter().unzip());
    prop::collection::vec(dialogue, 1..6).prop_map(|pairs: Vec<(Vec<_>, Vec<_>)>| pairs.into_iter().unzip())
}

fn slot_set() -> BTreeSet<String> {
    VOCAB.iter().filter(|t| t.ends_with("_SLOT")).map(|t| t.to_string()).collect()
}

proptest! {
    #[test]
    fn f1_duality((g, r) in corpus_pair()) {
        let a = success_f1(&g, &r, &slot_set(), SlotAggregation::PerDialogue).unwrap();
        let b = success_f1(&r, &g, &slot_set(), SlotAggregation::PerDialogue).unwrap();
        prop_assert_eq!(a.precision, b.recall);
        prop_assert_eq!(a.recall, b.precision);
        prop_assert!((a.f1 - b.f1).abs() < 1e-12);
    }

    #[test]
    fn metrics_permutation_invariant((g, r) in corpus_pair(), seed in any::<u64>()) {
        let mut order: Vec<usize> = (0..g.len()).collect();
        crate::numerics::Rng::new(seed).shuffle(&mut order);
        let pg: Vec<_> = order.iter().map(|&i| g[i].clone()).collect();
        let pr: Vec<_> = order.iter().map(|&i| r[i].clone()).collect();
        let f = |g: &[Vec<Vec<String>>], r: &[Vec<Vec<String>>]| success_f1(g, r, &slot_set(), SlotAggregation::PerDialogue).unwrap();
        prop_assert_eq!(f(&g, &r), f(&pg, &pr));
        let flat = |c: &[Vec<Vec<String>>]| c.iter().flatten().cloned().collect::<Vec<_>>();
        let b1 = bleu(&flat(&g), &flat(&r), 4).unwrap();
        let b2 = bleu(&flat(&pg), &flat(&pr), 4).unwrap();
        prop_assert!((b1 - b2).abs() < 1e-12);
    }

    #[test]
    fn bleu_self_is_one(h in prop::collection::vec(sentence(), 1..5)) {
        prop_assume!(h.iter().any(|s| !s.is_empty()));
        prop_assert!((bleu(&h, &h, 4).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn bleu_non_increasing_as_overlap_is_destroyed() {
    let reference: Vec<String> = "the phone number of name_SLOT is phone_SLOT and the address is address_SLOT ."
        .split(' ')
        .map(str::to_string)
        .collect();
    let mut hyp = reference.clone();
    let mut last = bleu(&[hyp.clone()], &[reference.clone()], 4).unwrap();
    for i in 0..hyp.len() {
        hyp[i] = format!("zz{i}");
        let s = bleu(&[hyp.clone()], &[reference.clone()], 4).unwrap();
        assert!(s <= last + 1e-15);
        last = s;
    }
    assert_eq!(last, 0.0);
}

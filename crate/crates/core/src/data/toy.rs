//! A closed restaurant domain with grammar-generated dialogues, small
//! enough to train on in seconds.

use super::corpus::{Corpus, Dialogue, Turn};
use crate::dialogue::db::{db_lookup, placeholder, DbRecord, Ontology};
use crate::dialogue::BeliefSpan;
use crate::error::{Error, Result};
use crate::numerics::rng::streams;
use crate::numerics::Rng;

pub const FOODS: [&str; 5] = ["italian", "chinese", "indian", "thai", "french"];
pub const AREAS: [&str; 3] = ["north", "south", "centre"];
pub const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
pub const REQUESTABLES: [&str; 3] = ["address", "phone", "postcode"];
/// Informable slots in the order the system asks for them.
pub const SLOTS: [&str; 3] = ["food", "area", "pricerange"];

const NAMES: [&str; 20] = [
    "pizza hut", "golden wok", "curry garden", "bangkok city", "la maison",
    "da vinci", "jade house", "taj tandoori", "sala thong", "cote",
    "pizza express", "charlie chan", "the gandhi", "thai orchid", "bistro paris",
    "ristorante roma", "lucky star", "spice route", "lotus leaf", "le gourmet",
];

const STREETS: [&str; 5] = ["regent street", "mill road", "hills road", "king street", "bridge street"];

pub fn toy_ontology() -> Ontology {
    let mut informable = std::collections::BTreeMap::new();
    for (slot, values) in SLOTS.iter().zip([&FOODS[..], &AREAS[..], &PRICES[..]]) {
        for v in values {
            informable.insert(v.to_string(), slot.to_string());
        }
    }
    let placeholders = ["name", "food", "area", "pricerange", "address", "phone", "postcode"]
        .iter()
        .map(|s| placeholder(s))
        .collect();
    Ontology {
        informable,
        requestable: REQUESTABLES.iter().map(|s| s.to_string()).collect(),
        placeholders,
    }
}

/// Twenty fixed records; every food has four, spread over areas and prices.
pub fn toy_db() -> Vec<DbRecord> {
    NAMES
        .iter()
        .enumerate()
        .map(|(i, name)| {
            let phone = format!("01223 {:06}", 350_000 + 1_379 * i);
            let address = format!("{} {}", 1 + 7 * i % 90, STREETS[i % STREETS.len()]);
            let postcode = format!("cb{} {}ab", 1 + i % 4, i % 9);
            DbRecord::new([
                ("name", name.to_string()),
                ("food", FOODS[i % 5].to_string()),
                ("area", AREAS[(i + i / 5) % 3].to_string()),
                ("pricerange", PRICES[(i / 2 + i / 5) % 3].to_string()),
                ("address", address),
                ("phone", phone),
                ("postcode", postcode),
            ])
            .expect("toy record has a name")
        })
        .collect()
}

/// A generated toy corpus with the database and ontology it was generated against.
#[derive(Clone, Debug)]
pub struct ToyDomain {
    pub corpus: Corpus,
    pub db: Vec<DbRecord>,
    pub ontology: Ontology,
}

/// Train and eval corpora where a few value tokens never occur in training.
#[derive(Clone, Debug)]
pub struct CopyAblationSplit {
    pub train: Corpus,
    pub eval: Corpus,
    /// Value tokens absent from every training turn.
    pub held_out: Vec<String>,
    pub db: Vec<DbRecord>,
    pub ontology: Ontology,
}

struct Grammar<'a> {
    values: [Vec<&'static str>; 3],
    db: &'a [DbRecord],
    ontology: &'a Ontology,
}

fn slot_phrase(rng: &mut Rng, slot: usize, value: &str) -> String {
    let options: &[&str] = match slot {
        0 => &["serving {} food", "that serves {} food"],
        1 => &["in the {}", "in the {} part of town"],
        _ => &["in the {} price range", "that is {}"],
    };
    rng.choose(options).replace("{}", value)
}

fn slot_answer(rng: &mut Rng, slot: usize, value: &str) -> String {
    let options: &[&str] = match slot {
        0 => &["{} food please .", "i would like {} food .", "{} ."],
        1 => &["the {} please .", "in the {} .", "{} part of town ."],
        _ => &["{} please .", "something {} .", "{} price range ."],
    };
    rng.choose(options).replace("{}", value)
}

const ASK: [&str; 3] = [
    "what type of food would you like ?",
    "what part of town do you have in mind ?",
    "what price range would you like ?",
];
const OFFER: &str = "name_SLOT serves food_SLOT food in the area_SLOT part of town and is in the pricerange_SLOT price range .";
const NO_MATCH: &str = "i am sorry , there is no restaurant matching your request .";
const GOODBYE: &str = "you are welcome . goodbye .";

fn request_name(slot: &str) -> &'static str {
    match slot {
        "address" => "address",
        "phone" => "phone number",
        _ => "postcode",
    }
}

impl Grammar<'_> {
    fn dialogue(&self, rng: &mut Rng) -> Dialogue {
        let goal: Vec<&str> = self.values.iter().map(|vs| *rng.choose(vs)).collect();
        let mut order = vec![0, 1, 2];
        rng.shuffle(&mut order);
        let n_first = 1 + rng.below(3);
        let mut mentioned: Vec<usize> = order[..n_first].to_vec();

        let intro = *rng.choose(&[
            "i am looking for a restaurant",
            "i want a restaurant",
            "i need a place to eat",
            "can you help me find a restaurant",
        ]);
        let phrases: Vec<String> = mentioned.iter().map(|&s| slot_phrase(rng, s, goal[s])).collect();
        let mut user = format!("{intro} {} .", phrases.join(" and "));
        let mut turns = Vec::new();
        loop {
            let informable: Vec<&str> = mentioned.iter().map(|&s| goal[s]).collect();
            let bspan = BeliefSpan::new(informable.iter().copied(), [""; 0]);
            let count = db_lookup(&bspan, self.db, self.ontology).len();
            let unset = (0..3).find(|s| !mentioned.contains(s));
            let response = match (count, unset) {
                (0, _) => NO_MATCH.to_string(),
                (2.., Some(slot)) => ASK[slot].to_string(),
                _ => OFFER.to_string(),
            };
            turns.push(Turn::new(user, &bspan, &response));
            match (count, unset) {
                (2.., Some(slot)) => {
                    user = slot_answer(rng, slot, goal[slot]);
                    mentioned.push(slot);
                }
                _ => break,
            }
        }
        let informable: Vec<&str> = mentioned.iter().map(|&s| goal[s]).collect();
        let offered = turns.last().is_some_and(|t| t.response_delex == OFFER);
        if offered && rng.bernoulli(0.7) {
            let mut req: Vec<&str> = REQUESTABLES.to_vec();
            rng.shuffle(&mut req);
            req.truncate(1 + rng.below(3));
            let names: Vec<&str> = req.iter().map(|r| request_name(r)).collect();
            let user = if req.len() == 1 {
                format!("what is the {} ?", names[0])
            } else {
                format!("can i get the {} ?", names.join(" and "))
            };
            let parts: Vec<String> = req
                .iter()
                .map(|r| format!("the {} is {}", request_name(r), placeholder(r)))
                .collect();
            let response = format!("for name_SLOT , {} .", parts.join(" and "));
            let bspan = BeliefSpan::new(informable.iter().copied(), req.iter().copied());
            turns.push(Turn::new(user, &bspan, response));
        }
        let bye = *rng.choose(&["thank you , goodbye .", "thanks , bye .", "that is all , thank you ."]);
        turns.push(Turn::new(bye, &BeliefSpan::new(informable, [""; 0]), GOODBYE));
        Dialogue { turns }
    }
}

fn all_values() -> [Vec<&'static str>; 3] {
    [FOODS.to_vec(), AREAS.to_vec(), PRICES.to_vec()]
}

/// Deterministic under `seed`. Every informable value in a gold belief span
/// is stated by the user in that turn or an earlier one.
pub fn generate_toy_corpus(seed: u64, n_dialogues: usize) -> Result<ToyDomain> {
    if n_dialogues == 0 {
        return Err(Error::InvalidArgument("n_dialogues must be at least 1".into()));
    }
    let db = toy_db();
    let ontology = toy_ontology();
    let grammar = Grammar {
        values: all_values(),
        db: &db,
        ontology: &ontology,
    };
    let mut rng = Rng::derive(seed, streams::TOY_CORPUS, 0);
    let dialogues = (0..n_dialogues).map(|_| grammar.dialogue(&mut rng)).collect();
    Ok(ToyDomain {
        corpus: Corpus::new(Some("train".into()), dialogues),
        db,
        ontology,
    })
}

fn mentions_any(dialogue: &Dialogue, tokens: &[String]) -> bool {
    dialogue
        .turns
        .iter()
        .any(|t| t.belief().informable.iter().any(|v| tokens.contains(v)))
}

/// Holds out two foods, one area and one price range (picked by `seed`).
/// Training dialogues never use them; each eval dialogue uses at least one
/// in its belief spans. One fifth of `n_dialogues` go to eval.
pub fn generate_copy_ablation(seed: u64, n_dialogues: usize) -> Result<CopyAblationSplit> {
    if n_dialogues < 5 {
        return Err(Error::InvalidArgument("copy ablation needs at least 5 dialogues".into()));
    }
    let db = toy_db();
    let ontology = toy_ontology();
    let mut rng = Rng::derive(seed, streams::TOY_CORPUS, 1);
    let mut foods = FOODS.to_vec();
    rng.shuffle(&mut foods);
    let held: Vec<&'static str> = vec![foods[0], foods[1], *rng.choose(&AREAS), *rng.choose(&PRICES)];
    let held_out: Vec<String> = held.iter().map(|s| s.to_string()).collect();

    let kept = all_values().map(|vs| vs.into_iter().filter(|v| !held.contains(v)).collect());
    let train_grammar = Grammar {
        values: kept,
        db: &db,
        ontology: &ontology,
    };
    let eval_grammar = Grammar {
        values: all_values(),
        db: &db,
        ontology: &ontology,
    };
    let n_eval = n_dialogues / 5;
    let train = (0..n_dialogues - n_eval).map(|_| train_grammar.dialogue(&mut rng)).collect();
    let mut eval = Vec::with_capacity(n_eval);
    while eval.len() < n_eval {
        let d = eval_grammar.dialogue(&mut rng);
        if mentions_any(&d, &held_out) {
            eval.push(d);
        }
    }
    Ok(CopyAblationSplit {
        train: Corpus::new(Some("train".into()), train),
        eval: Corpus::new(Some("test".into()), eval),
        held_out,
        db,
        ontology,
    })
}

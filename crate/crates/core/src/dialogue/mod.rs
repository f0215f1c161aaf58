//! Belief spans, the restaurant database and per-turn inputs.

pub mod bspan;
pub mod db;
pub mod input;
pub mod pipeline;

pub use bspan::BeliefSpan;
pub use db::{db_count_token, db_lookup, load_db, load_ontology, placeholder, DbRecord, Ontology};
pub use input::{build_stage1_input, build_stage2_input, lexicalize, Lexicalized};
pub use pipeline::{run_turn, run_turn_with_history, tokenize, DialogueModel, Session, TurnModel, TurnResult};

use std::collections::{BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            let key: Vec<&str> = w.iter().map(AsRef::as_ref).collect();
            *counts.entry(key).or_insert(0) += 1;
        }
    }
    counts
}

/// Corpus BLEU with one reference per hypothesis, uniform weights over
/// orders `1..=max_n` and no smoothing.
///
/// Clipped matches and candidate n-gram totals are pooled over the corpus.
/// If any order has candidates but no matches the score is 0. An order
/// without any candidate n-grams (every hypothesis shorter than `n`) carries
/// no evidence and contributes a factor of 1.
pub fn bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<S>], max_n: usize) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidArgument(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() || max_n == 0 {
        return Err(Error::InvalidArgument("bleu needs a nonempty corpus".into()));
    }
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (h, rf) in hypotheses.iter().zip(references) {
        c += h.len();
        r += rf.len();
        for n in 1..=max_n {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(rf, n);
            for (gram, count) in &hc {
                matches[n - 1] += (*count).min(rc.get(gram).copied().unwrap_or(0));
                totals[n - 1] += count;
            }
        }
    }
    if c == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..max_n {
        if totals[n] == 0 {
            continue;
        }
        if matches[n] == 0 {
            return Ok(0.0);
        }
        log_sum += (matches[n] as f64 / totals[n] as f64).ln();
    }
    let bp = if c < r { (1.0 - r as f64 / c as f64).exp() } else { 1.0 };
    Ok(bp * (log_sum / max_n as f64).exp())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PrecisionRecall {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl PrecisionRecall {
    pub fn from_counts(tp: usize, fp: usize, fn_: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self { precision, recall, f1 }
    }
}

/// How slot placeholders are counted for Success F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SlotAggregation {
    /// One set of slots per dialogue.
    #[default]
    PerDialogue,
    /// One multiset of slots per turn.
    PerTurn,
}

/// True/false positive and false negative counts for one unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl SlotCounts {
    fn add(&mut self, other: SlotCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
    }
}

fn set_counts<'a>(generated: impl Iterator<Item = &'a str>, reference: impl Iterator<Item = &'a str>, slots: &BTreeSet<String>) -> SlotCounts {
    let g: BTreeSet<&str> = generated.filter(|t| slots.contains(*t)).collect();
    let r: BTreeSet<&str> = reference.filter(|t| slots.contains(*t)).collect();
    let tp = g.intersection(&r).count();
    SlotCounts {
        tp,
        fp: g.len() - tp,
        fn_: r.len() - tp,
    }
}

fn multiset_counts<S: AsRef<str>>(generated: &[S], reference: &[S], slots: &BTreeSet<String>) -> SlotCounts {
    fn count<'a, S: AsRef<str>>(toks: &'a [S], slots: &BTreeSet<String>) -> HashMap<&'a str, usize> {
        let mut m = HashMap::new();
        for t in toks.iter().map(AsRef::as_ref).filter(|t| slots.contains(*t)) {
            *m.entry(t).or_insert(0) += 1;
        }
        m
    }
    let (g, r) = (count(generated, slots), count(reference, slots));
    let tp: usize = g.iter().map(|(k, &c)| c.min(r.get(k).copied().unwrap_or(0))).sum();
    SlotCounts {
        tp,
        fp: g.values().sum::<usize>() - tp,
        fn_: r.values().sum::<usize>() - tp,
    }
}

/// Slot counts of one dialogue (responses as token lists).
pub fn dialogue_slot_counts<S: AsRef<str>>(
    generated: &[Vec<S>],
    reference: &[Vec<S>],
    slots: &BTreeSet<String>,
    mode: SlotAggregation,
) -> Result<SlotCounts> {
    match mode {
        SlotAggregation::PerDialogue => Ok(set_counts(
            generated.iter().flatten().map(AsRef::as_ref),
            reference.iter().flatten().map(AsRef::as_ref),
            slots,
        )),
        SlotAggregation::PerTurn => {
            if generated.len() != reference.len() {
                return Err(Error::InvalidArgument(format!(
                    "{} generated turns for {} reference turns",
                    generated.len(),
                    reference.len()
                )));
            }
            let mut total = SlotCounts::default();
            for (g, r) in generated.iter().zip(reference) {
                total.add(multiset_counts(g, r, slots));
            }
            Ok(total)
        }
    }
}

/// Micro-averaged Success F1 over dialogues of responses.
pub fn success_f1<S: AsRef<str>>(
    generated: &[Vec<Vec<S>>],
    reference: &[Vec<Vec<S>>],
    slots: &BTreeSet<String>,
    mode: SlotAggregation,
) -> Result<PrecisionRecall> {
    if generated.len() != reference.len() {
        return Err(Error::InvalidArgument(format!(
            "{} generated dialogues for {} references",
            generated.len(),
            reference.len()
        )));
    }
    let mut total = SlotCounts::default();
    for (g, r) in generated.iter().zip(reference) {
        total.add(dialogue_slot_counts(g, r, slots, mode)?);
    }
    if total == SlotCounts::default() {
        log::warn!("success F1: no slots in either generated or reference responses");
    }
    Ok(PrecisionRecall::from_counts(total.tp, total.fp, total.fn_))
}

//! Pair scoring, top-down bootstrapping expansion and binary metrics.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{pooled_inputs, Model};
use crate::taxonomy::{normalize_term, Taxonomy};

/// A candidate edge; the image key defaults to the hyponym term.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub hyper: String,
    pub hypo: String,
    pub image: Option<String>,
    pub label: Option<u8>,
}

impl Candidate {
    pub fn new(hyper: &str, hypo: &str) -> Self {
        Self {
            hyper: normalize_term(hyper),
            hypo: normalize_term(hypo),
            image: None,
            label: None,
        }
    }

    pub fn with_label(mut self, label: u8) -> Self {
        self.label = Some(label);
        self
    }

    pub fn with_image(mut self, key: &str) -> Self {
        self.image = Some(key.to_string());
        self
    }
}

/// `hypernym<TAB>hyponym[<TAB>image-key[<TAB>label]]`; empty image fields
/// mean "none". `#` lines and blank lines are skipped.
pub fn parse_candidates(text: &str) -> Result<Vec<Candidate>> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.starts_with('#') || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if !(2..=4).contains(&f.len()) {
            return Err(Error::parse(line_no, format!("expected 2 to 4 fields, got {}", f.len())));
        }
        if f[0].is_empty() || f[1].is_empty() {
            return Err(Error::parse(line_no, "empty term"));
        }
        let mut c = Candidate::new(f[0], f[1]);
        if let Some(k) = f.get(2).filter(|k| !k.is_empty()) {
            c.image = Some(normalize_term(k));
        }
        if let Some(l) = f.get(3).filter(|l| !l.is_empty()) {
            c.label = Some(match *l {
                "0" => 0,
                "1" => 1,
                other => return Err(Error::parse(line_no, format!("label must be 0 or 1, got {other:?}"))),
            });
        }
        out.push(c);
    }
    Ok(out)
}

pub fn load_candidates(path: impl AsRef<Path>) -> Result<Vec<Candidate>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_candidates(&text).map_err(|e| e.with_path(path))
}

pub fn candidates_to_tsv(cands: &[Candidate]) -> String {
    let mut out = String::new();
    for c in cands {
        let _ = write!(out, "{}\t{}", c.hyper, c.hypo);
        match (&c.image, c.label) {
            (None, None) => {}
            (img, None) => {
                let _ = write!(out, "\t{}", img.as_deref().unwrap_or(""));
            }
            (img, Some(l)) => {
                let _ = write!(out, "\t{}\t{l}", img.as_deref().unwrap_or(""));
            }
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub hyper: String,
    pub hypo: String,
    pub probability: f64,
    /// `1` iff `probability > θ`.
    pub decision: u8,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub gold: Option<u8>,
}

pub fn predictions_to_jsonl(records: &[PredictionRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("record serializes"));
        out.push('\n');
    }
    out
}

pub fn parse_predictions(text: &str) -> Result<Vec<PredictionRecord>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::parse(i + 1, e.to_string())))
        .collect()
}

/// Anything that assigns a probability to a candidate edge.
pub trait EdgeScorer {
    fn probability(&self, hyper: &str, hypo: &str, image: Option<&str>) -> Result<f64>;
}

/// A trained model together with the embeddings it reads.
pub struct ModelScorer<'a> {
    pub model: &'a Model,
    pub embeddings: &'a EmbeddingTable,
}

impl EdgeScorer for ModelScorer<'_> {
    fn probability(&self, hyper: &str, hypo: &str, image: Option<&str>) -> Result<f64> {
        let (a, b, img) = pooled_inputs(self.embeddings, hyper, hypo, image)?;
        Ok(self.model.score(&a, &b, img)?.1)
    }
}

impl<F> EdgeScorer for F
where
    F: Fn(&str, &str) -> f64,
{
    fn probability(&self, hyper: &str, hypo: &str, _image: Option<&str>) -> Result<f64> {
        Ok(self(hyper, hypo))
    }
}

pub fn score_candidate<S: EdgeScorer + ?Sized>(scorer: &S, c: &Candidate, threshold: f64) -> Result<PredictionRecord> {
    let p = scorer.probability(&c.hyper, &c.hypo, c.image.as_deref())?;
    Ok(PredictionRecord {
        hyper: c.hyper.clone(),
        hypo: c.hypo.clone(),
        probability: p,
        decision: u8::from(p > threshold),
        gold: c.label,
    })
}

/// Scores one pair with a model at the model's own threshold.
pub fn score_pair(
    model: &Model,
    emb: &EmbeddingTable,
    hyper: &str,
    hypo: &str,
    image: Option<&str>,
) -> Result<PredictionRecord> {
    let scorer = ModelScorer { model, embeddings: emb };
    let mut c = Candidate::new(hyper, hypo);
    c.image = image.map(str::to_string);
    score_candidate(&scorer, &c, model.config.threshold)
}

pub fn score_all<S: EdgeScorer + ?Sized>(
    scorer: &S,
    cands: &[Candidate],
    threshold: f64,
) -> Result<Vec<PredictionRecord>> {
    cands.iter().map(|c| score_candidate(scorer, c, threshold)).collect()
}

#[derive(Debug, Clone)]
pub struct Expansion {
    pub taxonomy: Taxonomy,
    /// Accepted edges in attachment order.
    pub accepted: Vec<(String, String)>,
    /// Every scored candidate in scoring order.
    pub predictions: Vec<PredictionRecord>,
}

/// Level-order bootstrapping expansion.
///
/// Levels are walked from the roots. At each node every remaining candidate
/// naming it as hypernym is scored once; accepted hyponyms are attached and
/// scheduled one level deeper, so they can act as hypernyms later in the same
/// run. Acceptances that would close a cycle are skipped.
pub fn expand<S: EdgeScorer + ?Sized>(
    scorer: &S,
    taxonomy: &Taxonomy,
    candidates: &[Candidate],
    threshold: f64,
) -> Expansion {
    let mut tax = taxonomy.clone();
    let mut pending: BTreeMap<&str, Vec<&Candidate>> = BTreeMap::new();
    for c in candidates {
        pending.entry(c.hyper.as_str()).or_default().push(c);
    }
    let mut levels = taxonomy.level_order_levels();
    let mut scheduled: BTreeSet<String> = levels.iter().flatten().cloned().collect();
    let mut accepted = Vec::new();
    let mut predictions = Vec::new();
    let mut i = 0;
    while i < levels.len() {
        let level = levels[i].clone();
        let mut next = Vec::new();
        for node in &level {
            let Some(cands) = pending.remove(node.as_str()) else { continue };
            for c in cands {
                let rec = match score_candidate(scorer, c, threshold) {
                    Ok(r) => r,
                    Err(e) => {
                        warn!("skipping candidate {} -> {}: {e}", c.hyper, c.hypo);
                        continue;
                    }
                };
                let accept = rec.decision == 1;
                predictions.push(rec);
                if !accept {
                    continue;
                }
                match tax.add_edge(&c.hyper, &c.hypo) {
                    Ok(()) => {
                        accepted.push((c.hyper.clone(), c.hypo.clone()));
                        if scheduled.insert(c.hypo.clone()) {
                            next.push(c.hypo.clone());
                        }
                    }
                    Err(e) => info!("not attaching {} -> {}: {e}", c.hyper, c.hypo),
                }
            }
        }
        if !next.is_empty() {
            if levels.len() == i + 1 {
                levels.push(Vec::new());
            }
            levels[i + 1].extend(next);
        }
        i += 1;
    }
    Expansion {
        taxonomy: tax,
        accepted,
        predictions,
    }
}

/// Binary classification metrics, each in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn report(&self) -> Result<MetricsReport> {
        if self.total() == 0 {
            return Err(Error::EmptyInput("no labeled predictions"));
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        Ok(MetricsReport {
            accuracy: ratio(self.tp + self.tn, self.total()),
            precision,
            recall,
            f1: f1_score(precision, recall),
        })
    }
}

/// Harmonic mean; 0 when both inputs are 0.
pub fn f1_score(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

/// Metrics over predictions carrying a gold label; unlabeled ones are ignored.
pub fn evaluate(predictions: &[PredictionRecord]) -> Result<MetricsReport> {
    let mut c = Confusion::default();
    for p in predictions {
        match (p.gold, p.decision) {
            (Some(1), 1) => c.tp += 1,
            (Some(0), 1) => c.fp += 1,
            (Some(1), _) => c.fn_ += 1,
            (Some(_), _) => c.tn += 1,
            (None, _) => {}
        }
    }
    c.report()
}

impl MetricsReport {
    /// JSON object with every metric as a percentage with two decimals.
    pub fn to_json(&self) -> String {
        format!(
            "{{\"accuracy\": {:.2}, \"precision\": {:.2}, \"recall\": {:.2}, \"f1\": {:.2}}}\n",
            100.0 * self.accuracy,
            100.0 * self.precision,
            100.0 * self.recall,
            100.0 * self.f1
        )
    }
}

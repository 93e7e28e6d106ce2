//! Expansion against an oracle classifier and metrics against a brute-force
//! confusion count.

use std::collections::BTreeSet;

use proptest::prelude::*;

use vte_core::inference::{evaluate, expand, Candidate, PredictionRecord};
use vte_core::taxonomy::Taxonomy;

const GOLD: &str = "\
root\tanimal
root\tplant
animal\tbird
animal\tfish
plant\ttree
bird\tsparrow
bird\tcrow
fish\ttrout
tree\toak
";

/// Seed taxonomy keeps the root and one first-level node; everything else is
/// a candidate, including `plant -> tree -> oak`, which only attaches once
/// `plant` itself has been accepted.
#[test]
fn oracle_reconstructs_gold_taxonomy() {
    let gold = Taxonomy::parse_edges(GOLD).unwrap();
    let seed = Taxonomy::parse_edges("root\tanimal\n").unwrap();
    let gold_edges: BTreeSet<(String, String)> =
        gold.edges().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    let mut cands: Vec<Candidate> = gold
        .edges()
        .filter(|(a, b)| !seed.has_edge(a, b))
        .map(|(a, b)| Candidate::new(a, b))
        .collect();
    // distractors the oracle rejects
    cands.push(Candidate::new("fish", "sparrow"));
    cands.push(Candidate::new("oak", "root"));
    cands.reverse();
    let oracle = |a: &str, b: &str| if gold.has_edge(a, b) { 1.0 } else { 0.0 };
    let out = expand(&oracle, &seed, &cands, 0.5);

    let got: BTreeSet<(String, String)> =
        out.taxonomy.edges().map(|(a, b)| (a.to_string(), b.to_string())).collect();
    assert_eq!(got, gold_edges);
    assert_eq!(out.taxonomy.to_tsv(), gold.to_tsv());
    assert!(out.taxonomy.is_acyclic());
    let pos = |e: (&str, &str)| out.accepted.iter().position(|(a, b)| (a.as_str(), b.as_str()) == e).unwrap();
    assert!(pos(("root", "plant")) < pos(("plant", "tree")));
    assert!(pos(("plant", "tree")) < pos(("tree", "oak")));
}

fn brute_force(gold: &[bool], decision: &[bool]) -> (f64, f64, f64, f64) {
    let (mut tp, mut fp, mut fn_, mut tn) = (0.0, 0.0, 0.0, 0.0);
    for (&g, &d) in gold.iter().zip(decision) {
        match (g, d) {
            (true, true) => tp += 1.0,
            (false, true) => fp += 1.0,
            (true, false) => fn_ += 1.0,
            (false, false) => tn += 1.0,
        }
    }
    let acc = (tp + tn) / gold.len() as f64;
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    let f = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
    (acc, p, r, f)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]
    #[test]
    fn evaluate_matches_confusion_count(pairs in prop::collection::vec((any::<bool>(), any::<bool>()), 1..60)) {
        let preds: Vec<PredictionRecord> = pairs
            .iter()
            .map(|&(g, d)| PredictionRecord {
                hyper: "a".into(),
                hypo: "b".into(),
                probability: if d { 0.9 } else { 0.1 },
                decision: u8::from(d),
                gold: Some(u8::from(g)),
            })
            .collect();
        let gold: Vec<bool> = pairs.iter().map(|p| p.0).collect();
        let dec: Vec<bool> = pairs.iter().map(|p| p.1).collect();
        let (acc, p, r, f) = brute_force(&gold, &dec);
        let m = evaluate(&preds).unwrap();
        prop_assert!((m.accuracy - acc).abs() < 1e-12);
        prop_assert!((m.precision - p).abs() < 1e-12);
        prop_assert!((m.recall - r).abs() < 1e-12);
        prop_assert!((m.f1 - f).abs() < 1e-12);
    }
}

//! Properties of the synthetic benchmark and of models trained on it.

use std::collections::BTreeMap;

use vte_core::embeddings::{load_embeddings, Modality};
use vte_core::inference::score_pair;
use vte_core::model::Model;
use vte_core::synth::{files, generate, hyponym_name, hypernym_name, run_benchmark, SynthConfig, SynthDataset};
use vte_core::training::EpochLog;

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    xs[xs.len() / 2]
}

struct Run {
    ds: SynthDataset,
    model: Model,
    log: Vec<EpochLog>,
}

fn five_runs() -> Vec<Run> {
    (0..5)
        .map(|seed| {
            let ds = generate(&SynthConfig {
                seed,
                ..SynthConfig::default()
            })
            .unwrap();
            let (model, outcome) = run_benchmark(&ds, &ds.config.train_config()).unwrap();
            Run {
                ds,
                model,
                log: outcome.log,
            }
        })
        .collect()
}

/// Smallest share, over planted classes, of a class's images that land on
/// the class's most common prototype.
fn worst_modal_share(run: &Run) -> f64 {
    let c = &run.ds.config;
    let mut worst: f64 = 1.0;
    for cls in 0..c.num_hypernyms {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for i in 0..c.hyponyms_per_hypernym {
            let img = run.ds.embeddings.image(&hyponym_name(cls, i)).unwrap();
            let v = run.model.heads.encode_image(img).unwrap();
            *counts.entry(run.model.prototypes.assign(&v).unwrap().0).or_default() += 1;
        }
        let modal = *counts.values().max().unwrap() as f64;
        worst = worst.min(modal / c.hyponyms_per_hypernym as f64);
    }
    worst
}

#[test]
fn trained_models_behave_on_planted_structure() {
    let runs = five_runs();

    let ratios: Vec<f64> = runs.iter().map(|r| r.log.last().unwrap().total / r.log[0].total).collect();
    assert!(median(ratios.clone()) < 0.2, "loss ratios {ratios:?}");

    let shares: Vec<f64> = runs.iter().map(worst_modal_share).collect();
    assert!(median(shares.clone()) >= 0.95, "modal shares {shares:?}");

    // the last hyponym of each class is a plain training member
    let probs: Vec<f64> = runs
        .iter()
        .map(|r| {
            let last = r.ds.config.hyponyms_per_hypernym - 1;
            let name = hyponym_name(0, last);
            assert!(!r.ds.confusers.contains(&name));
            score_pair(&r.model, &r.ds.embeddings, &hypernym_name(0), &name, None).unwrap().probability
        })
        .collect();
    assert!(median(probs.clone()) > 0.9, "planted pair probabilities {probs:?}");
}

#[test]
fn written_dataset_is_deterministic_and_loads_cleanly() {
    let cfg = SynthConfig {
        seed: 7,
        ..SynthConfig::default()
    };
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    generate(&cfg).unwrap().write(a.path()).unwrap();
    generate(&cfg).unwrap().write(b.path()).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 9);
    for name in names {
        assert_eq!(
            std::fs::read(a.path().join(&name)).unwrap(),
            std::fs::read(b.path().join(&name)).unwrap(),
            "{name:?}"
        );
    }
    // root, ten hypernyms and every hyponym have text; only hyponyms have images
    for (file, kind, count) in [(files::TEXT, Modality::Text, 211), (files::IMAGES, Modality::Image, 200)] {
        let report = load_embeddings(a.path().join(file), kind).unwrap();
        assert_eq!(report.duplicates, 0);
        assert_eq!(report.table.text_len() + report.table.image_len(), count);
    }
}

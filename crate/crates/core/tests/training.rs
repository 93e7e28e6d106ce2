//! Negative sampling, the training loop contract and determinism.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vte_core::embeddings::{EmbeddingTable, TextEntry};
use vte_core::model::Model;
use vte_core::synth::{generate, SynthConfig};
use vte_core::taxonomy::{Relation, Taxonomy};
use vte_core::training::{
    batch_ranges, fit, positives_from_taxonomy, sample_negatives, train, PairKind, TrainData, TrainingPair,
};
use vte_core::Error;

fn food() -> Taxonomy {
    Taxonomy::parse_edges("Food\tFruit\nFood\tMeat\nFruit\tApple\nFruit\tPear\nMeat\tBeef\n").unwrap()
}

#[test]
fn child_negative_inverts_direction() {
    let tax = food();
    let anchor = TrainingPair::positive("Food", "Fruit", None);
    let emb = EmbeddingTable::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let draws = sample_negatives(&anchor, &tax, &[], &emb, &mut rng, 200).unwrap();
    let children = tax.relatives("Food", Relation::Children).unwrap();
    assert!(draws.iter().all(|p| p.kind == PairKind::Child && p.label == 0));
    for p in &draws {
        assert_eq!(p.hypo, "Food");
        assert!(children.contains(&p.hyper));
    }
}

#[test]
fn leaf_without_siblings_or_pool_has_no_negative() {
    let mut tax = Taxonomy::new();
    tax.add_node("Lonely");
    let anchor = TrainingPair::positive("Lonely", "Thing", None);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let err = sample_negatives(&anchor, &tax, &[], &EmbeddingTable::new(), &mut rng, 1).unwrap_err();
    assert!(matches!(err, Error::NoNegativeAvailable { .. }));
}

#[test]
fn type_proportions_are_uniform_over_available_types() {
    let tax = food();
    let anchor = TrainingPair::positive("Fruit", "Apple", None);
    let pool: Vec<String> = ["Food", "Fruit", "Apple", "Beef", "Bread", "Tea"].map(String::from).to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let draws = sample_negatives(&anchor, &tax, &pool, &EmbeddingTable::new(), &mut rng, 10_000).unwrap();
    for kind in [PairKind::Child, PairKind::Sibling, PairKind::Random] {
        let share = draws.iter().filter(|p| p.kind == kind).count() as f64 / 10_000.0;
        assert!((share - 1.0 / 3.0).abs() < 0.02, "{kind:?}: {share}");
    }
    let related = ["Food", "Fruit", "Apple", "Pear"];
    for p in draws.iter().filter(|p| p.kind == PairKind::Random) {
        assert_eq!(p.hyper, "Fruit");
        assert!(!related.contains(&p.hypo.as_str()), "{}", p.hypo);
    }
    for p in draws.iter().filter(|p| p.kind == PairKind::Sibling) {
        assert_eq!((p.hyper.as_str(), p.hypo.as_str()), ("Meat", "Apple"));
    }
}

#[test]
fn missing_types_fall_back_to_the_rest() {
    let tax = food();
    // Meat has a child and a sibling but the pool offers nothing unrelated
    let anchor = TrainingPair::positive("Meat", "Beef", None);
    let pool: Vec<String> = vec!["Food".into(), "Beef".into()];
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws = sample_negatives(&anchor, &tax, &pool, &EmbeddingTable::new(), &mut rng, 3000).unwrap();
    assert!(draws.iter().all(|p| p.kind != PairKind::Random));
    let child = draws.iter().filter(|p| p.kind == PairKind::Child).count() as f64 / 3000.0;
    assert!((child - 0.5).abs() < 0.03, "{child}");
}

#[test]
fn trailing_singleton_joins_previous_batch() {
    assert_eq!(batch_ranges(9, 4), vec![0..4, 4..9]);
    assert_eq!(batch_ranges(8, 4), vec![0..4, 4..8]);
    assert_eq!(batch_ranges(10, 4), vec![0..4, 4..8, 8..10]);
}

fn small_setup(epochs: usize, seed: u64) -> (vte_core::synth::SynthDataset, vte_core::config::TrainConfig) {
    let sc = SynthConfig {
        num_hypernyms: 4,
        hyponyms_per_hypernym: 6,
        text_dim: 8,
        image_dim: 8,
        seed,
        ..SynthConfig::default()
    };
    let ds = generate(&sc).unwrap();
    let mut cfg = sc.train_config();
    cfg.epochs = epochs;
    cfg.k = 6;
    (ds, cfg)
}

fn run(ds: &vte_core::synth::SynthDataset, cfg: &vte_core::config::TrainConfig) -> (Model, Vec<vte_core::training::EpochLog>) {
    let pool: Vec<String> = ds.taxonomy.nodes().map(String::from).collect();
    let data = TrainData {
        taxonomy: &ds.taxonomy,
        embeddings: &ds.embeddings,
        positives: &ds.train,
        random_pool: &pool,
    };
    train(cfg, &data).unwrap()
}

#[test]
fn zero_epochs_returns_the_initialization() {
    let (ds, cfg) = small_setup(0, 1);
    let (model, log) = run(&ds, &cfg);
    assert!(log.is_empty());
    let init = Model::init(&cfg, 8, 8).unwrap();
    assert_eq!(model.to_bytes().unwrap(), init.to_bytes().unwrap());
}

#[test]
fn same_seed_gives_identical_checkpoints() {
    let (ds, cfg) = small_setup(3, 2);
    let a = run(&ds, &cfg).0.to_bytes().unwrap();
    let b = run(&ds, &cfg).0.to_bytes().unwrap();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(run(&ds, &other).0.to_bytes().unwrap(), a);
}

#[test]
fn logged_components_sum_to_total() {
    let (ds, cfg) = small_setup(4, 3);
    let (_, log) = run(&ds, &cfg);
    assert_eq!(log.len(), 4);
    for e in &log {
        assert!((e.text + e.proto + e.hpc + e.bce - e.total).abs() < 1e-9);
        assert!(e.proto > 0.0 && e.hpc > 0.0);
    }
}

#[test]
fn one_positive_is_too_small() {
    let (ds, cfg) = small_setup(1, 0);
    let pool: Vec<String> = Vec::new();
    let data = TrainData {
        taxonomy: &ds.taxonomy,
        embeddings: &ds.embeddings,
        positives: &ds.train[..1],
        random_pool: &pool,
    };
    let mut model = Model::init(&cfg, 8, 8).unwrap();
    assert!(matches!(fit(&mut model, &data), Err(Error::BatchTooSmall(1))));
}

#[test]
fn text_only_pairs_train_without_images() {
    let mut emb = EmbeddingTable::new();
    let tax = food();
    for (i, term) in ["Food", "Fruit", "Meat", "Apple", "Pear", "Beef"].iter().enumerate() {
        let v: Vec<f64> = (0..4).map(|j| ((i * 4 + j) as f64).sin()).collect();
        emb.insert_text(term, TextEntry::Pooled(v)).unwrap();
    }
    let positives = positives_from_taxonomy(&tax, &emb);
    assert!(positives.iter().all(|p| p.image.is_none()));
    let cfg = vte_core::config::TrainConfig {
        batch_size: 2,
        k: 2,
        d: 4,
        d_z: 2,
        epochs: 2,
        ..Default::default()
    };
    let pool: Vec<String> = tax.nodes().map(String::from).collect();
    let data = TrainData {
        taxonomy: &tax,
        embeddings: &emb,
        positives: &positives,
        random_pool: &pool,
    };
    let (_, log) = train(&cfg, &data).unwrap();
    assert!(log.iter().all(|e| e.proto == 0.0 && e.hpc == 0.0 && e.total.is_finite()));
}

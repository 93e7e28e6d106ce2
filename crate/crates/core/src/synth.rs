//! Seeded synthetic multimodal taxonomy with planted confusers.
//!
//! Each hypernym class owns a text centroid and an image centroid drawn from
//! a shared latent. A confuser hyponym copies one class's text centroid but
//! takes its image and its gold parent from another class, so text alone
//! points at the wrong hypernym.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::embeddings::{vector_record, EmbeddingTable, Modality, TextEntry};
use crate::error::{Error, Result};
use crate::heads::HeadInit;
use crate::inference::{candidates_to_tsv, evaluate, score_all, Candidate, MetricsReport, ModelScorer};
use crate::model::Model;
use crate::numeric::Tensor2;
use crate::taxonomy::Taxonomy;
use crate::training::{train, EpochLog, TrainData, TrainingPair};

pub const ROOT: &str = "root";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_hypernyms: usize,
    pub hyponyms_per_hypernym: usize,
    pub text_dim: usize,
    pub image_dim: usize,
    /// Within-class noise scale.
    pub sigma_w: f64,
    /// Scale of class centroids.
    pub sigma_b: f64,
    pub confuser_fraction: f64,
    /// Every `eval_every`-th hyponym of a class is held out for evaluation.
    pub eval_every: usize,
    /// Correlation between a class's text and image centroids.
    pub modality_correlation: f64,
    /// Text vectors sit at `offset` along the last coordinate while image
    /// vectors are centred there, mimicking encoders with different means.
    pub modality_offset: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_hypernyms: 10,
            hyponyms_per_hypernym: 20,
            text_dim: 32,
            image_dim: 32,
            sigma_w: 0.2,
            sigma_b: 1.0,
            confuser_fraction: 0.2,
            eval_every: 4,
            modality_correlation: 0.9,
            modality_offset: 100.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_hypernyms < 2 {
            return bad("num_hypernyms must be at least 2");
        }
        if self.hyponyms_per_hypernym < 2 {
            return bad("hyponyms_per_hypernym must be at least 2");
        }
        if self.text_dim < 2 || self.image_dim < 2 {
            return bad("dims must be at least 2");
        }
        if !(self.sigma_w >= 0.0 && self.sigma_w < self.sigma_b) {
            return bad("need 0 <= sigma_w < sigma_b");
        }
        if !(0.0..=1.0).contains(&self.confuser_fraction) {
            return bad("confuser_fraction must lie in [0, 1]");
        }
        if !(-1.0..=1.0).contains(&self.modality_correlation) {
            return bad("modality_correlation must lie in [-1, 1]");
        }
        if self.eval_every < 2 {
            return bad("eval_every must be at least 2");
        }
        if !self.modality_offset.is_finite() {
            return bad("modality_offset must be finite");
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<T: std::str::FromStr>(k: &str, v: &str) -> Result<T> {
            v.trim().parse().map_err(|_| Error::Config(format!("{k}: cannot parse {v:?}")))
        }
        match key.trim() {
            "num_hypernyms" => self.num_hypernyms = num(key, value)?,
            "hyponyms_per_hypernym" => self.hyponyms_per_hypernym = num(key, value)?,
            "text_dim" => self.text_dim = num(key, value)?,
            "image_dim" => self.image_dim = num(key, value)?,
            "sigma_w" => self.sigma_w = num(key, value)?,
            "sigma_b" => self.sigma_b = num(key, value)?,
            "confuser_fraction" => self.confuser_fraction = num(key, value)?,
            "eval_every" => self.eval_every = num(key, value)?,
            "modality_correlation" => self.modality_correlation = num(key, value)?,
            "modality_offset" => self.modality_offset = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            other => return Err(Error::Config(format!("unknown synth key {other:?}"))),
        }
        Ok(())
    }

    /// Applies `key = value` lines; `#` starts a comment line.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::parse(i + 1, "expected `key = value`"))?;
            self.set(k, v).map_err(|e| match e {
                Error::Config(m) => Error::parse(i + 1, m),
                other => other,
            })?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        format!(
            "num_hypernyms = {}\nhyponyms_per_hypernym = {}\ntext_dim = {}\nimage_dim = {}\n\
             sigma_w = {}\nsigma_b = {}\nconfuser_fraction = {}\neval_every = {}\n\
             modality_correlation = {}\nmodality_offset = {}\nseed = {}\n",
            self.num_hypernyms,
            self.hyponyms_per_hypernym,
            self.text_dim,
            self.image_dim,
            self.sigma_w,
            self.sigma_b,
            self.confuser_fraction,
            self.eval_every,
            self.modality_correlation,
            self.modality_offset,
            self.seed
        )
    }

    /// Training settings matched to this dataset: heads as wide as the
    /// inputs, one prototype slot per planted class and some to spare.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: 4,
            k: 32,
            d: self.text_dim.max(self.image_dim),
            d_z: (self.text_dim.min(self.image_dim) / 2).max(1),
            epochs: 200,
            seed: self.seed,
            head_init: HeadInit::Identity,
            ..TrainConfig::default()
        }
    }
}

pub fn hypernym_name(c: usize) -> String {
    format!("class_{c:02}")
}

pub fn hyponym_name(gold_class: usize, i: usize) -> String {
    format!("class_{gold_class:02}.item_{i:02}")
}

#[derive(Debug, Clone)]
pub struct SynthDataset {
    pub config: SynthConfig,
    /// Seed taxonomy: root, hypernyms and training hyponyms.
    pub taxonomy: Taxonomy,
    /// Seed taxonomy plus held-out hyponyms.
    pub gold: Taxonomy,
    pub embeddings: EmbeddingTable,
    pub train: Vec<TrainingPair>,
    pub eval: Vec<Candidate>,
    pub confusers: BTreeSet<String>,
    /// Text-side class of each confuser, in the order of `confusers`.
    pub text_class_of: Vec<(String, usize)>,
}

fn gaussian(rng: &mut ChaCha8Rng, dim: usize, sigma: f64) -> Vec<f64> {
    if sigma == 0.0 {
        return vec![0.0; dim];
    }
    let n = Normal::new(0.0, sigma).expect("valid sigma");
    (0..dim).map(|_| n.sample(rng)).collect()
}

fn noisy(rng: &mut ChaCha8Rng, centroid: &[f64], sigma: f64) -> Vec<f64> {
    centroid.iter().zip(gaussian(rng, centroid.len(), sigma)).map(|(c, e)| c + e).collect()
}

/// Fully deterministic in `config.seed`.
pub fn generate(config: &SynthConfig) -> Result<SynthDataset> {
    config.validate()?;
    let c = config;
    let mut rng = ChaCha8Rng::seed_from_u64(c.seed);
    let k = c.num_hypernyms;
    let latent_dim = c.text_dim.max(c.image_dim) - 1;
    let rho = c.modality_correlation;
    let rest = (1.0 - rho * rho).max(0.0).sqrt();

    let mut text_centroids = Vec::with_capacity(k);
    let mut image_centroids = Vec::with_capacity(k);
    for _ in 0..k {
        let shared = gaussian(&mut rng, latent_dim, c.sigma_b);
        let own = gaussian(&mut rng, latent_dim, c.sigma_b);
        let mut t: Vec<f64> = shared[..c.text_dim - 1].to_vec();
        t.push(c.modality_offset);
        let mut img: Vec<f64> = shared
            .iter()
            .zip(&own)
            .take(c.image_dim - 1)
            .map(|(s, o)| rho * s + rest * o)
            .collect();
        img.push(0.0);
        text_centroids.push(t);
        image_centroids.push(img);
    }

    let mut emb = EmbeddingTable::new();
    let mut taxonomy = Taxonomy::new();
    let mut root_text = gaussian(&mut rng, c.text_dim - 1, c.sigma_b);
    root_text.push(c.modality_offset);
    emb.insert_text(ROOT, TextEntry::Pooled(root_text))?;
    taxonomy.add_node(ROOT);
    for (cls, centroid) in text_centroids.iter().enumerate() {
        let name = hypernym_name(cls);
        taxonomy.add_edge(ROOT, &name)?;
        emb.insert_text(&name, TextEntry::Pooled(noisy(&mut rng, centroid, c.sigma_w)))?;
    }
    let mut gold = taxonomy.clone();

    let n = c.hyponyms_per_hypernym;
    let n_conf = (c.confuser_fraction * n as f64).round() as usize;
    let mut train = Vec::new();
    let mut eval_hypos: Vec<(String, usize, Option<usize>)> = Vec::new();
    let mut confusers = BTreeSet::new();
    let mut text_class_of = Vec::new();
    for cls in 0..k {
        for i in 0..n {
            let name = hyponym_name(cls, i);
            let text_class = if i < n_conf {
                let mut other = rng.random_range(0..k - 1);
                if other >= cls {
                    other += 1;
                }
                Some(other)
            } else {
                None
            };
            let t = noisy(&mut rng, &text_centroids[text_class.unwrap_or(cls)], c.sigma_w);
            let img = noisy(&mut rng, &image_centroids[cls], c.sigma_w);
            emb.insert_text(&name, TextEntry::Pooled(t))?;
            emb.insert_image(&name, img)?;
            if let Some(tc) = text_class {
                confusers.insert(name.clone());
                text_class_of.push((name.clone(), tc));
            }
            gold.add_edge(&hypernym_name(cls), &name)?;
            if i % c.eval_every == 0 {
                eval_hypos.push((name, cls, text_class));
            } else {
                taxonomy.add_edge(&hypernym_name(cls), &name)?;
                train.push(TrainingPair::positive(&hypernym_name(cls), &name, Some(&name)));
            }
        }
    }

    let mut eval = Vec::with_capacity(2 * eval_hypos.len());
    for (name, cls, text_class) in &eval_hypos {
        eval.push(Candidate::new(&hypernym_name(*cls), name).with_image(name).with_label(1));
        let wrong = match text_class {
            Some(tc) => *tc,
            None => {
                let mut other = rng.random_range(0..k - 1);
                if other >= *cls {
                    other += 1;
                }
                other
            }
        };
        eval.push(Candidate::new(&hypernym_name(wrong), name).with_image(name).with_label(0));
    }
    eval.shuffle(&mut rng);

    Ok(SynthDataset {
        config: c.clone(),
        taxonomy,
        gold,
        embeddings: emb,
        train,
        eval,
        confusers,
        text_class_of,
    })
}

pub mod files {
    pub const TAXONOMY: &str = "taxonomy.tsv";
    pub const GOLD: &str = "gold_taxonomy.tsv";
    pub const TEXT: &str = "text.jsonl";
    pub const IMAGES: &str = "images.jsonl";
    pub const TRAIN: &str = "train.tsv";
    pub const EVAL: &str = "eval.tsv";
    pub const CONFUSERS: &str = "confusers.txt";
    pub const TRAIN_CONFIG: &str = "train.conf";
    pub const SYNTH_CONFIG: &str = "synth.conf";
}

fn write_file(dir: &Path, name: &str, contents: &str) -> Result<()> {
    let path = dir.join(name);
    std::fs::write(&path, contents).map_err(|e| Error::io(path, e))
}

impl SynthDataset {
    /// Writes every artifact into `dir`, creating it if needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_file(dir, files::TAXONOMY, &self.taxonomy.to_tsv())?;
        write_file(dir, files::GOLD, &self.gold.to_tsv())?;
        let mut text = String::new();
        for (key, entry) in self.embeddings.text_entries() {
            text.push_str(&vector_record(key, Modality::Text, &entry.pooled()?));
        }
        write_file(dir, files::TEXT, &text)?;
        write_file(dir, files::IMAGES, &self.embeddings.to_jsonl(Modality::Image))?;
        let train: Vec<Candidate> = self
            .train
            .iter()
            .map(|p| {
                let mut c = Candidate::new(&p.hyper, &p.hypo).with_label(p.label);
                c.image = p.image.clone();
                c
            })
            .collect();
        write_file(dir, files::TRAIN, &candidates_to_tsv(&train))?;
        write_file(dir, files::EVAL, &candidates_to_tsv(&self.eval))?;
        let mut conf = String::new();
        for (name, tc) in &self.text_class_of {
            let _ = writeln!(conf, "{name}\t{}", hypernym_name(*tc));
        }
        write_file(dir, files::CONFUSERS, &conf)?;
        write_file(dir, files::TRAIN_CONFIG, &self.config.train_config().to_text())?;
        write_file(dir, files::SYNTH_CONFIG, &self.config.to_text())?;
        Ok(())
    }

    /// Candidates whose hyponym is a confuser: their gold edges and the trap
    /// negatives pointing at the text-side class.
    pub fn trap_subset(&self) -> Vec<Candidate> {
        self.eval
            .iter()
            .filter(|c| self.confusers.contains(&c.hypo))
            .cloned()
            .collect()
    }
}

/// Scores of one train-then-evaluate run on a synthetic dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchOutcome {
    pub overall: MetricsReport,
    pub trap: MetricsReport,
    pub log: Vec<EpochLog>,
}

/// Trains on the seed taxonomy and evaluates on the held-out candidates.
/// Every taxonomy node is eligible as a random negative.
pub fn run_benchmark(ds: &SynthDataset, cfg: &TrainConfig) -> Result<(Model, BenchOutcome)> {
    let pool: Vec<String> = ds.taxonomy.nodes().map(str::to_string).collect();
    let data = TrainData {
        taxonomy: &ds.taxonomy,
        embeddings: &ds.embeddings,
        positives: &ds.train,
        random_pool: &pool,
    };
    let (model, log) = train(cfg, &data)?;
    let scorer = ModelScorer {
        model: &model,
        embeddings: &ds.embeddings,
    };
    let preds = score_all(&scorer, &ds.eval, cfg.threshold)?;
    let trap: Vec<_> = preds
        .iter()
        .filter(|p| ds.confusers.contains(&p.hypo))
        .cloned()
        .collect();
    let outcome = BenchOutcome {
        overall: evaluate(&preds)?,
        trap: evaluate(&trap)?,
        log,
    };
    Ok((model, outcome))
}

/// Reads the confuser list written by [`SynthDataset::write`]: first column
/// of each non-empty line.
pub fn load_confusers(path: impl AsRef<Path>) -> Result<BTreeSet<String>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| l.split('\t').next().unwrap_or(l).to_string())
        .collect())
}

/// Exhaustive nearest row by squared Euclidean distance; ties go to the
/// lowest index.
pub fn oracle_nearest(vectors: &[Vec<f64>], codebook: &Tensor2) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(vectors.len());
    for v in vectors {
        if v.len() != codebook.cols() {
            return Err(Error::Shape(format!(
                "vector of length {} against codebook width {}",
                v.len(),
                codebook.cols()
            )));
        }
        let dists: Vec<f64> = (0..codebook.rows())
            .map(|j| codebook.row(j).iter().zip(v).map(|(a, b)| (a - b).powi(2)).sum())
            .collect();
        let min = dists.iter().copied().fold(f64::INFINITY, f64::min);
        out.push(dists.iter().position(|d| *d == min).unwrap_or(0));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn confuser_free_classes_agree() {
        let cfg = SynthConfig {
            confuser_fraction: 0.0,
            ..SynthConfig::default()
        };
        let ds = generate(&cfg).unwrap();
        assert!(ds.confusers.is_empty());
        assert!(ds.trap_subset().is_empty());
    }

    #[test]
    fn eval_is_balanced() {
        for seed in 0..5 {
            let ds = generate(&SynthConfig { seed, ..SynthConfig::default() }).unwrap();
            let pos = ds.eval.iter().filter(|c| c.label == Some(1)).count();
            let neg = ds.eval.len() - pos;
            assert!(pos.abs_diff(neg) <= 1);
            assert_eq!(ds.confusers.len(), 40);
            assert_eq!(ds.trap_subset().len(), 20);
        }
    }

    #[test]
    fn planted_classes_are_recoverable() {
        let ds = generate(&SynthConfig::default()).unwrap();
        // centroid of each class estimated from its images
        let k = ds.config.num_hypernyms;
        let dim = ds.config.image_dim;
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        let class_of = |name: &str| name[6..8].parse::<usize>().unwrap();
        for (key, v) in ds.embeddings.image_entries() {
            let c = class_of(key);
            crate::numeric::axpy(1.0, v, &mut sums[c]);
            counts[c] += 1;
        }
        let centroids =
            Tensor2::from_rows(&sums.iter().zip(&counts).map(|(s, n)| s.iter().map(|x| x / *n as f64).collect()).collect::<Vec<_>>()).unwrap();
        let keys: Vec<&str> = ds.embeddings.image_entries().map(|(k, _)| k).collect();
        let vecs: Vec<Vec<f64>> = ds.embeddings.image_entries().map(|(_, v)| v.to_vec()).collect();
        let nearest = oracle_nearest(&vecs, &centroids).unwrap();
        let correct = keys.iter().zip(&nearest).filter(|(k, n)| class_of(k) == **n).count();
        assert!(correct as f64 / keys.len() as f64 >= 0.99);
    }

    #[test]
    fn config_text_round_trip() {
        let mut c = SynthConfig::default();
        c.apply_text("# small\nnum_hypernyms = 3\nsigma_w=0.1\nseed = 9\n").unwrap();
        assert_eq!((c.num_hypernyms, c.sigma_w, c.seed), (3, 0.1, 9));
        let mut back = SynthConfig::default();
        back.apply_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(matches!(back.apply_text("\nbogus = 1"), Err(Error::Parse { line: 2, .. })));
    }

    #[test]
    fn oracle_ties_and_single_row() {
        let one = Tensor2::from_rows(&[vec![5.0, 5.0]]).unwrap();
        assert_eq!(oracle_nearest(&[vec![0.0, 0.0], vec![-3.0, 9.0]], &one).unwrap(), vec![0, 0]);
        let tie = Tensor2::from_rows(&[vec![1.0, 0.0], vec![-1.0, 0.0]]).unwrap();
        assert_eq!(oracle_nearest(&[vec![0.0, 3.0]], &tie).unwrap(), vec![0]);
        assert!(oracle_nearest(&[vec![0.0]], &tie).is_err());
    }
}

//! Negative sampling, batching and the joint training loop.

use std::collections::BTreeMap;

use log::{debug, info};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::model::{Batch, Model, PairExample, StMode};
use crate::numeric::{relative_error, OptimizerState};
use crate::objectives::LossParts;
use crate::taxonomy::{Relation, Taxonomy};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairKind {
    Positive,
    Child,
    Sibling,
    Random,
}

/// A labeled candidate edge. The label is 1 exactly for [`PairKind::Positive`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingPair {
    pub hyper: String,
    pub hypo: String,
    pub image: Option<String>,
    pub label: u8,
    pub kind: PairKind,
}

impl TrainingPair {
    pub fn positive(hyper: &str, hypo: &str, image: Option<&str>) -> Self {
        Self {
            hyper: hyper.to_string(),
            hypo: hypo.to_string(),
            image: image.map(str::to_string),
            label: 1,
            kind: PairKind::Positive,
        }
    }

    fn negative(hyper: &str, hypo: &str, image: Option<String>, kind: PairKind) -> Self {
        Self {
            hyper: hyper.to_string(),
            hypo: hypo.to_string(),
            image,
            label: 0,
            kind,
        }
    }
}

/// Image key of a term if the table holds an image under that name.
pub fn image_key_for(emb: &EmbeddingTable, term: &str) -> Option<String> {
    emb.image(term).map(|_| term.to_string())
}

/// Positives for every taxonomy edge, using the hyponym name as image key
/// when such an image exists.
pub fn positives_from_taxonomy(tax: &Taxonomy, emb: &EmbeddingTable) -> Vec<TrainingPair> {
    tax.edges()
        .map(|(a, b)| TrainingPair::positive(a, b, image_key_for(emb, b).as_deref()))
        .collect()
}

/// Draws `ratio` labeled negatives for one positive `(n, o)`.
///
/// Each draw picks a type uniformly among the non-empty pools:
/// child `(c, n)` for a child `c` of `n`, sibling `(s, o)` for a sibling `s`
/// of `n`, and random `(n, r)` for a pool term `r` that is neither an
/// ancestor nor a descendant of `n`.
pub fn sample_negatives<R: Rng + ?Sized>(
    anchor: &TrainingPair,
    taxonomy: &Taxonomy,
    random_pool: &[String],
    emb: &EmbeddingTable,
    rng: &mut R,
    ratio: usize,
) -> Result<Vec<TrainingPair>> {
    let n = &anchor.hyper;
    let children: Vec<String> = taxonomy.relatives(n, Relation::Children)?.into_iter().collect();
    let siblings: Vec<String> = taxonomy.relatives(n, Relation::Siblings)?.into_iter().collect();
    let ancestors = taxonomy.relatives(n, Relation::Ancestors)?;
    let descendants = taxonomy.relatives(n, Relation::Descendants)?;
    let randoms: Vec<&String> = random_pool
        .iter()
        .filter(|r| *r != n && !ancestors.contains(*r) && !descendants.contains(*r))
        .collect();

    let mut kinds = Vec::with_capacity(3);
    if !children.is_empty() {
        kinds.push(PairKind::Child);
    }
    if !siblings.is_empty() {
        kinds.push(PairKind::Sibling);
    }
    if !randoms.is_empty() {
        kinds.push(PairKind::Random);
    }
    if kinds.is_empty() {
        return Err(Error::NoNegativeAvailable {
            hyper: anchor.hyper.clone(),
            hypo: anchor.hypo.clone(),
        });
    }
    let mut out = Vec::with_capacity(ratio);
    for _ in 0..ratio {
        let kind = *kinds.choose(rng).expect("non-empty");
        let pair = match kind {
            PairKind::Child => {
                let c = children.choose(rng).expect("non-empty");
                TrainingPair::negative(c, n, image_key_for(emb, n), kind)
            }
            PairKind::Sibling => {
                let s = siblings.choose(rng).expect("non-empty");
                TrainingPair::negative(s, &anchor.hypo, anchor.image.clone(), kind)
            }
            PairKind::Random => {
                let r = randoms.choose(rng).expect("non-empty");
                TrainingPair::negative(n, r, image_key_for(emb, r), kind)
            }
            PairKind::Positive => unreachable!("never drawn"),
        };
        out.push(pair);
    }
    Ok(out)
}

/// Mean loss components of one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub text: f64,
    pub proto: f64,
    pub hpc: f64,
    pub bce: f64,
    pub total: f64,
}

impl EpochLog {
    fn from_sum(epoch: usize, batches: usize, sum: LossParts) -> Self {
        let b = batches as f64;
        let parts = LossParts {
            text: sum.text / b,
            proto: sum.proto / b,
            hpc: sum.hpc / b,
            bce: sum.bce / b,
        };
        Self {
            epoch,
            batches,
            text: parts.text,
            proto: parts.proto,
            hpc: parts.hpc,
            bce: parts.bce,
            total: parts.total(),
        }
    }
}

/// Resolves term names to pooled vectors once and caches them.
pub struct ExampleBuilder<'a> {
    emb: &'a EmbeddingTable,
    use_images: bool,
    pooled: BTreeMap<String, Vec<f64>>,
}

impl<'a> ExampleBuilder<'a> {
    pub fn new(emb: &'a EmbeddingTable, use_images: bool) -> Self {
        Self {
            emb,
            use_images,
            pooled: BTreeMap::new(),
        }
    }

    fn text(&mut self, term: &str) -> Result<Vec<f64>> {
        if let Some(v) = self.pooled.get(term) {
            return Ok(v.clone());
        }
        let v = self
            .emb
            .text(term)
            .ok_or_else(|| Error::MissingTextEmbedding(term.to_string()))?
            .pooled()?;
        self.pooled.insert(term.to_string(), v.clone());
        Ok(v)
    }

    pub fn example(&mut self, pair: &TrainingPair) -> Result<PairExample> {
        let image = if self.use_images {
            pair.image
                .as_deref()
                .and_then(|k| self.emb.image(k))
                .map(<[f64]>::to_vec)
        } else {
            None
        };
        Ok(PairExample {
            hyper: self.text(&pair.hyper)?,
            hypo: self.text(&pair.hypo)?,
            image,
            label: f64::from(pair.label),
        })
    }
}

/// Splits `n` shuffled items into chunks of `size`, folding a trailing
/// singleton into the previous chunk.
pub fn batch_ranges(n: usize, size: usize) -> Vec<std::ops::Range<usize>> {
    let mut out: Vec<std::ops::Range<usize>> = (0..n)
        .step_by(size.max(1))
        .map(|s| s..(s + size).min(n))
        .collect();
    if out.len() > 1 && out.last().is_some_and(|r| r.len() == 1) {
        let last = out.pop().expect("non-empty");
        out.last_mut().expect("non-empty").end = last.end;
    }
    out
}

/// Everything the loop needs besides the model.
pub struct TrainData<'a> {
    pub taxonomy: &'a Taxonomy,
    pub embeddings: &'a EmbeddingTable,
    pub positives: &'a [TrainingPair],
    /// Candidate terms for random negatives.
    pub random_pool: &'a [String],
}

/// Initialize a model from `config` and train it.
pub fn train(config: &TrainConfig, data: &TrainData<'_>) -> Result<(Model, Vec<EpochLog>)> {
    config.validate()?;
    let text_dim = data
        .embeddings
        .text_dim()
        .ok_or(Error::EmptyInput("text embeddings"))?;
    let image_dim = data.embeddings.image_dim().unwrap_or(config.d);
    let mut model = Model::init(config, text_dim, image_dim)?;
    let log = fit(&mut model, data)?;
    Ok((model, log))
}

/// Runs `model.config.epochs` epochs. Each batch is one forward/backward
/// pass, one optimizer step and then one EMA update of the codebook.
pub fn fit(model: &mut Model, data: &TrainData<'_>) -> Result<Vec<EpochLog>> {
    let cfg = model.config.clone();
    if data.positives.len() < 2 {
        return Err(Error::BatchTooSmall(data.positives.len()));
    }
    if let Some(p) = data.positives.iter().find(|p| p.label != 1) {
        return Err(Error::Config(format!("training positive {} -> {} has label 0", p.hyper, p.hypo)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1);
    let sizes: Vec<usize> = model.trainable().iter().map(|(_, t)| t.len()).collect();
    let mut opt = OptimizerState::new(cfg.optimizer, cfg.lr, cfg.weight_decay, &sizes);
    let mut builder = ExampleBuilder::new(data.embeddings, cfg.use_images);
    let mut order: Vec<usize> = (0..data.positives.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let ranges = batch_ranges(order.len(), cfg.batch_size);
        let mut sum = LossParts::default();
        for (b, range) in ranges.iter().enumerate() {
            let mut batch = Batch::default();
            for &i in &order[range.clone()] {
                let pos = &data.positives[i];
                batch.positives.push(builder.example(pos)?);
                for neg in sample_negatives(
                    pos,
                    data.taxonomy,
                    data.random_pool,
                    data.embeddings,
                    &mut rng,
                    cfg.negative_ratio,
                )? {
                    batch.negatives.push(builder.example(&neg)?);
                }
            }
            let out = model.forward_backward(&batch, StMode::Live)?;
            if !out.parts.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            let grads: Vec<&[f64]> = out.grads.tensors().into_iter().map(|(_, g)| g).collect();
            opt.step(&mut model.trainable_mut(), &grads)?;
            model.prototypes.ema_update(&out.assignments)?;
            sum += out.parts;
            debug!("epoch {epoch} batch {b}: {:.6}", out.parts.total());
        }
        let entry = EpochLog::from_sum(epoch, ranges.len(), sum);
        info!(
            "epoch {epoch}: total {:.6} (text {:.6}, proto {:.6}, hpc {:.6}, bce {:.6})",
            entry.total, entry.text, entry.proto, entry.hpc, entry.bce
        );
        log.push(entry);
    }
    Ok(log)
}

/// Max relative error between analytic and central-difference gradients
/// for one tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckEntry {
    pub tensor: String,
    pub max_rel_err: f64,
}

/// Compares analytic gradients of the total loss with central differences
/// for every trainable tensor, plus the codebook and the visual inputs.
/// Differences are taken with assignments and straight-through offsets
/// frozen at their values in the analytic pass.
pub fn grad_check(model: &Model, batch: &Batch, h: f64) -> Result<Vec<GradCheckEntry>> {
    let out = model.forward_backward(batch, StMode::Live)?;
    let frozen = out.st.clone();
    let total = |m: &Model, b: &Batch| -> f64 {
        m.loss(b, StMode::Frozen(&frozen))
            .map(|p| p.total())
            .unwrap_or(f64::NAN)
    };
    let mut report = Vec::new();
    let analytic = out.grads.tensors();
    let mut probe = model.clone();
    for (t, (name, grad)) in analytic.iter().enumerate() {
        let mut numeric = Vec::with_capacity(grad.len());
        for j in 0..grad.len() {
            let orig = probe.trainable_mut()[t][j];
            probe.trainable_mut()[t][j] = orig + h;
            let up = total(&probe, batch);
            probe.trainable_mut()[t][j] = orig - h;
            let down = total(&probe, batch);
            probe.trainable_mut()[t][j] = orig;
            numeric.push((up - down) / (2.0 * h));
        }
        report.push(GradCheckEntry {
            tensor: name.to_string(),
            max_rel_err: relative_error(grad, &numeric),
        });
    }

    let cb = model.prototypes.codebook().data().len();
    let mut numeric = Vec::with_capacity(cb);
    for j in 0..cb {
        let orig = probe.prototypes.codebook().data()[j];
        probe.prototypes.codebook_mut().data_mut()[j] = orig + h;
        let up = total(&probe, batch);
        probe.prototypes.codebook_mut().data_mut()[j] = orig - h;
        let down = total(&probe, batch);
        probe.prototypes.codebook_mut().data_mut()[j] = orig;
        numeric.push((up - down) / (2.0 * h));
    }
    report.push(GradCheckEntry {
        tensor: "codebook".into(),
        max_rel_err: relative_error(out.grads.codebook.data(), &numeric),
    });

    let mut analytic_img = Vec::new();
    let mut numeric_img = Vec::new();
    let mut probe_batch = batch.clone();
    let slots = (0..batch.positives.len())
        .map(|i| (true, i))
        .chain((0..batch.negatives.len()).map(|i| (false, i)));
    for (is_pos, i) in slots {
        let grad = if is_pos {
            &out.d_positive_images[i]
        } else {
            &out.d_negative_images[i]
        };
        let Some(grad) = grad else { continue };
        for (j, g) in grad.iter().enumerate() {
            let orig = image_mut(&mut probe_batch, is_pos, i)[j];
            image_mut(&mut probe_batch, is_pos, i)[j] = orig + h;
            let up = total(model, &probe_batch);
            image_mut(&mut probe_batch, is_pos, i)[j] = orig - h;
            let down = total(model, &probe_batch);
            image_mut(&mut probe_batch, is_pos, i)[j] = orig;
            analytic_img.push(*g);
            numeric_img.push((up - down) / (2.0 * h));
        }
    }
    if !analytic_img.is_empty() {
        report.push(GradCheckEntry {
            tensor: "visual_inputs".into(),
            max_rel_err: relative_error(&analytic_img, &numeric_img),
        });
    }
    Ok(report)
}

fn image_mut(b: &mut Batch, positive: bool, i: usize) -> &mut [f64] {
    let ex = if positive { &mut b.positives[i] } else { &mut b.negatives[i] };
    ex.image.as_mut().expect("gradient implies an image")
}

/// Model and batch used by the finite-difference suite: `N = 8` positives
/// and as many negatives, `d = e = 16`, `d_z = 8`, `k = 8`. One positive and
/// every third negative lack an image so the text-only path is covered.
pub fn grad_check_setup(seed: u64, detector_hidden: usize) -> Result<(Model, Batch)> {
    let cfg = TrainConfig {
        batch_size: 8,
        k: 8,
        d: 16,
        d_z: 8,
        seed,
        detector_hidden,
        ..TrainConfig::default()
    };
    let mut model = Model::init(&cfg, 16, 16)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    for x in model.prototypes.codebook_mut().data_mut() {
        *x = rng.random_range(-1.0..1.0);
    }
    let vec16 = |rng: &mut ChaCha8Rng| (0..16).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
    let mut batch = Batch::default();
    for i in 0..8 {
        batch.positives.push(PairExample {
            hyper: vec16(&mut rng),
            hypo: vec16(&mut rng),
            image: (i != 7).then(|| vec16(&mut rng)),
            label: 1.0,
        });
    }
    for i in 0..8 {
        batch.negatives.push(PairExample {
            hyper: vec16(&mut rng),
            hypo: vec16(&mut rng),
            image: (i % 3 != 0).then(|| vec16(&mut rng)),
            label: 0.0,
        });
    }
    Ok((model, batch))
}

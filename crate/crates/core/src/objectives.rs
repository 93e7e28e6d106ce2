//! Contrastive and classification losses with analytic gradients.
//!
//! All three contrastive tasks share one kernel: for a batch of anchors and
//! keys, anchor `i` is pulled towards key `i` and pushed from every other key
//! in the batch. Losses are averaged over anchors.

use crate::error::{Error, Result};
use crate::numeric::{axpy, dot, l2_normalize, l2_normalize_backward, log_sum_exp, sigmoid, softmax, softplus};

/// `−log( e^{a·p/τ} / (e^{a·p/τ} + Σᵢ e^{a·nᵢ/τ}) )`
pub fn info_nce(anchor: &[f64], positive: &[f64], negatives: &[&[f64]], tau: f64) -> Result<f64> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if negatives.is_empty() {
        return Err(Error::BatchTooSmall(1));
    }
    let mut logits = Vec::with_capacity(negatives.len() + 1);
    logits.push(dot(anchor, positive) / tau);
    logits.extend(negatives.iter().map(|n| dot(anchor, n) / tau));
    Ok(nce_term(&logits, 0))
}

/// `LSE(logits) − logits[pos]`, evaluated relative to the positive logit so
/// that near-zero losses keep full relative precision.
fn nce_term(logits: &[f64], pos: usize) -> f64 {
    let lp = logits[pos];
    let m = logits
        .iter()
        .enumerate()
        .filter(|(j, _)| *j != pos)
        .map(|(_, l)| l - lp)
        .fold(f64::NEG_INFINITY, f64::max);
    if m <= 0.0 {
        let s: f64 = logits
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != pos)
            .map(|(_, l)| (l - lp).exp())
            .sum();
        s.ln_1p()
    } else {
        log_sum_exp(logits) - lp
    }
}

/// Loss and gradients of the in-batch contrastive kernel.
#[derive(Debug, Clone, PartialEq)]
pub struct ContrastiveGrad {
    pub loss: f64,
    pub d_anchors: Vec<Vec<f64>>,
    pub d_keys: Vec<Vec<f64>>,
}

/// Mean over `i` of `LSEⱼ(s·aᵢ·kⱼ) − s·aᵢ·kᵢ`.
pub fn in_batch_contrastive(anchors: &[Vec<f64>], keys: &[Vec<f64>], scale: f64) -> Result<ContrastiveGrad> {
    let n = anchors.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    if keys.len() != n {
        return Err(Error::Shape(format!("{n} anchors but {} keys", keys.len())));
    }
    let dim = anchors[0].len();
    if anchors.iter().chain(keys).any(|v| v.len() != dim) {
        return Err(Error::Shape("contrastive vectors differ in dimension".into()));
    }
    let mut loss = 0.0;
    let mut d_anchors = vec![vec![0.0; dim]; n];
    let mut d_keys = vec![vec![0.0; dim]; n];
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let logits: Vec<f64> = keys.iter().map(|k| scale * dot(&anchors[i], k)).collect();
        loss += nce_term(&logits, i);
        let probs = softmax(&logits);
        for (j, pj) in probs.iter().enumerate() {
            let g = (pj - if i == j { 1.0 } else { 0.0 }) * inv_n * scale;
            if g == 0.0 {
                continue;
            }
            axpy(g, &keys[j], &mut d_anchors[i]);
            axpy(g, &anchors[i], &mut d_keys[j]);
        }
    }
    Ok(ContrastiveGrad {
        loss: loss * inv_n,
        d_anchors,
        d_keys,
    })
}

/// Hyponym representations are anchors, their hypernyms the positives; the
/// other pairs' hypernyms act as negatives.
pub fn text_hypernymy_loss(hypos: &[Vec<f64>], hypers: &[Vec<f64>], tau: f64) -> Result<ContrastiveGrad> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    in_batch_contrastive(hypos, hypers, 1.0 / tau)
}

/// Gradients of the prototype loss with respect to the raw (unnormalized)
/// visual features and the straight-through prototype values.
#[derive(Debug, Clone, PartialEq)]
pub struct ProtoGrad {
    pub loss: f64,
    pub d_features: Vec<Vec<f64>>,
    pub d_prototypes: Vec<Vec<f64>>,
}

/// Instance-to-cluster contrast between normalized features and their assigned
/// prototypes; other items' prototypes are the negatives.
pub fn proto_loss(features: &[Vec<f64>], prototypes: &[Vec<f64>], tau: f64) -> Result<ProtoGrad> {
    if tau <= 0.0 {
        return Err(Error::Config(format!("temperature must be positive, got {tau}")));
    }
    if features.len() < 2 {
        return Err(Error::BatchTooSmall(features.len()));
    }
    let nv = features.iter().map(|v| l2_normalize(v)).collect::<Result<Vec<_>>>()?;
    let np = prototypes.iter().map(|p| l2_normalize(p)).collect::<Result<Vec<_>>>()?;
    let g = in_batch_contrastive(&nv, &np, 1.0 / tau)?;
    let d_features = features
        .iter()
        .zip(&g.d_anchors)
        .map(|(v, d)| l2_normalize_backward(v, d))
        .collect::<Result<Vec<_>>>()?;
    let d_prototypes = prototypes
        .iter()
        .zip(&g.d_keys)
        .map(|(p, d)| l2_normalize_backward(p, d))
        .collect::<Result<Vec<_>>>()?;
    Ok(ProtoGrad {
        loss: g.loss,
        d_features,
        d_prototypes,
    })
}

/// One item of the hyper-proto constraint: projected hypernym `z_h` with its
/// uncertainty logit `u_h`, and the projected prototype `z_p` with `u_p`.
#[derive(Debug, Clone, PartialEq)]
pub struct HpcItem {
    pub z_h: Vec<f64>,
    pub u_h: f64,
    pub z_p: Vec<f64>,
    pub u_p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpcGrad {
    pub loss: f64,
    pub d_z_h: Vec<Vec<f64>>,
    pub d_u_h: Vec<f64>,
    pub d_z_p: Vec<Vec<f64>>,
    pub d_u_p: Vec<f64>,
}

/// Contrast with per-vector temperatures: logits are `(τ_h z_h)·(τ_p z_p)`
/// where `τ = σ(u)`; no fixed temperature divisor.
pub fn hpc_loss(items: &[HpcItem]) -> Result<HpcGrad> {
    let n = items.len();
    if n < 2 {
        return Err(Error::BatchTooSmall(n));
    }
    let tau_h: Vec<f64> = items.iter().map(|it| sigmoid(it.u_h)).collect();
    let tau_p: Vec<f64> = items.iter().map(|it| sigmoid(it.u_p)).collect();
    let anchors: Vec<Vec<f64>> = items
        .iter()
        .zip(&tau_h)
        .map(|(it, t)| it.z_h.iter().map(|x| t * x).collect())
        .collect();
    let keys: Vec<Vec<f64>> = items
        .iter()
        .zip(&tau_p)
        .map(|(it, t)| it.z_p.iter().map(|x| t * x).collect())
        .collect();
    let g = in_batch_contrastive(&anchors, &keys, 1.0)?;
    let mut out = HpcGrad {
        loss: g.loss,
        d_z_h: Vec::with_capacity(n),
        d_u_h: Vec::with_capacity(n),
        d_z_p: Vec::with_capacity(n),
        d_u_p: Vec::with_capacity(n),
    };
    for (i, it) in items.iter().enumerate() {
        let (th, tp) = (tau_h[i], tau_p[i]);
        out.d_z_h.push(g.d_anchors[i].iter().map(|d| th * d).collect());
        out.d_u_h.push(dot(&g.d_anchors[i], &it.z_h) * th * (1.0 - th));
        out.d_z_p.push(g.d_keys[i].iter().map(|d| tp * d).collect());
        out.d_u_p.push(dot(&g.d_keys[i], &it.z_p) * tp * (1.0 - tp));
    }
    Ok(out)
}

/// Binary cross-entropy on a probability.
pub fn bce_loss(prob: f64, label: f64) -> f64 {
    -label * prob.ln() - (1.0 - label) * (1.0 - prob).ln()
}

/// Binary cross-entropy on the pre-sigmoid logit, `softplus(x) − y·x`, and
/// its derivative `σ(x) − y`.
pub fn bce_with_logit(logit: f64, label: f64) -> (f64, f64) {
    (softplus(logit) - label * logit, sigmoid(logit) - label)
}

/// Per-task loss values of one batch.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossParts {
    pub text: f64,
    pub proto: f64,
    pub hpc: f64,
    pub bce: f64,
}

impl LossParts {
    /// Unit-weight sum of the four tasks.
    pub fn total(&self) -> f64 {
        self.text + self.proto + self.hpc + self.bce
    }

    pub fn is_finite(&self) -> bool {
        self.total().is_finite()
    }
}

impl std::ops::AddAssign for LossParts {
    fn add_assign(&mut self, rhs: Self) {
        self.text += rhs.text;
        self.proto += rhs.proto;
        self.hpc += rhs.hpc;
        self.bce += rhs.bce;
    }
}

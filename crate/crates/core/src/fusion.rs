//! Similarity-gated fusion of text and visual features and the pair detector.
//!
//! Gates are computed from projected vectors, fusion mixes raw head outputs.
//! The detector reads `[c_e ‖ c_o ‖ c_e ⊙ c_o]`; hypernym and hyponym roles are
//! not interchangeable.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{cosine_with_grad, sigmoid, Affine, AffineGrad};

/// `σ(cos(a, b))` and its partials with respect to `a` and `b`.
pub fn gate_with_grad(a: &[f64], b: &[f64]) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    let (c, da, db) = cosine_with_grad(a, b)?;
    let g = sigmoid(c);
    let s = g * (1.0 - g);
    Ok((g, da.into_iter().map(|x| s * x).collect(), db.into_iter().map(|x| s * x).collect()))
}

/// `(α_e, α_o)`: hypernym text against prototype, hyponym text against its image.
pub fn gate_weights(z_e: &[f64], z_p: &[f64], z_o: &[f64], z_v: &[f64]) -> Result<(f64, f64)> {
    Ok((gate_with_grad(z_e, z_p)?.0, gate_with_grad(z_o, z_v)?.0))
}

/// `c = (1 − α) t + α visual`
pub fn fuse(t: &[f64], visual: &[f64], alpha: f64) -> Result<Vec<f64>> {
    if t.len() != visual.len() {
        return Err(Error::Shape(format!(
            "fusing text of dim {} with visual of dim {}",
            t.len(),
            visual.len()
        )));
    }
    Ok(t.iter().zip(visual).map(|(a, b)| (1.0 - alpha) * a + alpha * b).collect())
}

/// Partials of [`fuse`]: `(dt, dvisual, dα)`.
pub fn fuse_backward(t: &[f64], visual: &[f64], alpha: f64, upstream: &[f64]) -> (Vec<f64>, Vec<f64>, f64) {
    let dt = upstream.iter().map(|g| (1.0 - alpha) * g).collect();
    let dv = upstream.iter().map(|g| alpha * g).collect();
    let da = upstream.iter().zip(visual.iter().zip(t)).map(|(g, (v, t))| g * (v - t)).sum();
    (dt, dv, da)
}

/// Fused representation of one candidate pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FusedPair {
    pub c_e: Vec<f64>,
    pub c_o: Vec<f64>,
    pub alpha_e: f64,
    pub alpha_o: f64,
}

/// Pair classifier. Without a hidden layer this is a single affine map from
/// `3d` features to a logit; with one, a tanh layer sits in between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detector {
    pub hidden: Option<Affine>,
    pub out: Affine,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorGrad {
    pub hidden: Option<AffineGrad>,
    pub out: AffineGrad,
}

impl DetectorGrad {
    pub fn zeros_like(det: &Detector) -> Self {
        Self {
            hidden: det.hidden.as_ref().map(AffineGrad::zeros_like),
            out: AffineGrad::zeros_like(&det.out),
        }
    }
}

/// Concatenation `[c_e ‖ c_o ‖ c_e ⊙ c_o]`.
pub fn pair_features(c_e: &[f64], c_o: &[f64]) -> Result<Vec<f64>> {
    if c_e.len() != c_o.len() {
        return Err(Error::Shape(format!(
            "detector inputs of dims {} and {}",
            c_e.len(),
            c_o.len()
        )));
    }
    let mut x = Vec::with_capacity(3 * c_e.len());
    x.extend_from_slice(c_e);
    x.extend_from_slice(c_o);
    x.extend(c_e.iter().zip(c_o).map(|(a, b)| a * b));
    Ok(x)
}

impl Detector {
    /// Xavier-initialised detector over `d`-dimensional fused vectors.
    pub fn init<R: Rng + ?Sized>(d: usize, hidden: usize, rng: &mut R) -> Self {
        if hidden == 0 {
            Self {
                hidden: None,
                out: Affine::xavier(3 * d, 1, rng),
            }
        } else {
            Self {
                hidden: Some(Affine::xavier(3 * d, hidden, rng)),
                out: Affine::xavier(hidden, 1, rng),
            }
        }
    }

    /// All-zero single-layer detector; scores every pair at exactly 0.5.
    pub fn zeros(d: usize) -> Self {
        Self {
            hidden: None,
            out: Affine::zeros(3 * d, 1),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().unwrap_or(&self.out).in_dim()
    }

    /// `(logit, σ(logit))`
    pub fn detect(&self, c_e: &[f64], c_o: &[f64]) -> Result<(f64, f64)> {
        let x = pair_features(c_e, c_o)?;
        let logit = match &self.hidden {
            None => self.out.forward(&x)?[0],
            Some(h) => {
                let a: Vec<f64> = h.forward(&x)?.into_iter().map(f64::tanh).collect();
                self.out.forward(&a)?[0]
            }
        };
        Ok((logit, sigmoid(logit)))
    }

    /// Accumulates parameter gradients for `dL/dlogit` and returns `(dc_e, dc_o)`.
    pub fn backward(
        &self,
        c_e: &[f64],
        c_o: &[f64],
        dlogit: f64,
        grad: &mut DetectorGrad,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let x = pair_features(c_e, c_o)?;
        let dx = match (&self.hidden, &mut grad.hidden) {
            (None, _) => self.out.backward(&x, &[dlogit], &mut grad.out)?,
            (Some(h), Some(hg)) => {
                let a: Vec<f64> = h.forward(&x)?.into_iter().map(f64::tanh).collect();
                let da = self.out.backward(&a, &[dlogit], &mut grad.out)?;
                let dpre: Vec<f64> = da.iter().zip(&a).map(|(g, a)| g * (1.0 - a * a)).collect();
                h.backward(&x, &dpre, hg)?
            }
            (Some(_), None) => return Err(Error::Shape("detector gradient lacks a hidden layer".into())),
        };
        let d = c_e.len();
        let mut dce = dx[..d].to_vec();
        let mut dco = dx[d..2 * d].to_vec();
        for i in 0..d {
            let g = dx[2 * d + i];
            dce[i] += g * c_o[i];
            dco[i] += g * c_e[i];
        }
        Ok((dce, dco))
    }
}

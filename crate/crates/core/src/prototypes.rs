//! Vector-quantized prototype codebook.
//!
//! Rows are never touched by gradients. Assignment picks the nearest row in
//! Euclidean distance on raw vectors; rows move only through the EMA update.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numeric::{axpy, Tensor2};

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeTable {
    codebook: Tensor2,
    pub ema_alpha: f64,
    pub ema_eps: f64,
}

/// Visual features of one batch together with their prototype indices.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentBatch {
    pub entries: Vec<(usize, Vec<f64>)>,
}

impl AssignmentBatch {
    pub fn push(&mut self, index: usize, v: Vec<f64>) {
        self.entries.push((index, v));
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn counts(&self, k: usize) -> Vec<usize> {
        let mut c = vec![0; k];
        for (i, _) in &self.entries {
            c[*i] += 1;
        }
        c
    }
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

impl PrototypeTable {
    pub fn new(codebook: Tensor2, ema_alpha: f64, ema_eps: f64) -> Result<Self> {
        if codebook.rows() < 1 {
            return Err(Error::Config("codebook needs at least one prototype".into()));
        }
        if !codebook.is_finite() {
            return Err(Error::NonFinite {
                context: "codebook".into(),
            });
        }
        if ema_eps <= 0.0 || !(0.0..=1.0).contains(&ema_alpha) {
            return Err(Error::Config(format!(
                "ema_alpha must be in [0,1] and ema_eps > 0 (got {ema_alpha}, {ema_eps})"
            )));
        }
        Ok(Self {
            codebook,
            ema_alpha,
            ema_eps,
        })
    }

    /// Rows uniform on `[-1/√e, 1/√e]`.
    pub fn random<R: Rng + ?Sized>(
        k: usize,
        e: usize,
        ema_alpha: f64,
        ema_eps: f64,
        rng: &mut R,
    ) -> Result<Self> {
        let bound = 1.0 / (e as f64).sqrt();
        Self::new(Tensor2::uniform(k, e, bound, rng), ema_alpha, ema_eps)
    }

    pub fn k(&self) -> usize {
        self.codebook.rows()
    }

    pub fn e(&self) -> usize {
        self.codebook.cols()
    }

    pub fn codebook(&self) -> &Tensor2 {
        &self.codebook
    }

    pub fn codebook_mut(&mut self) -> &mut Tensor2 {
        &mut self.codebook
    }

    pub fn row(&self, i: usize) -> &[f64] {
        self.codebook.row(i)
    }

    /// Index of the nearest prototype (lowest index on ties) and the row itself.
    pub fn assign(&self, v: &[f64]) -> Result<(usize, &[f64])> {
        if v.len() != self.e() {
            return Err(Error::Shape(format!(
                "feature of length {} against prototypes of dimension {}",
                v.len(),
                self.e()
            )));
        }
        if !v.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite {
                context: "visual feature".into(),
            });
        }
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for j in 0..self.k() {
            let d = squared_distance(self.row(j), v);
            if d < best_d {
                best = j;
                best_d = d;
            }
        }
        Ok((best, self.row(best)))
    }

    /// `Pᵢ ← α Pᵢ + (1 − α) Σ v / (count + ε)` for every prototype that received
    /// at least one assignment. Unassigned rows are left as they are.
    pub fn ema_update(&mut self, batch: &AssignmentBatch) -> Result<()> {
        let k = self.k();
        let e = self.e();
        let mut sums = vec![vec![0.0; e]; k];
        let mut counts = vec![0usize; k];
        for (i, v) in &batch.entries {
            if *i >= k || v.len() != e {
                return Err(Error::Shape(format!(
                    "assignment ({i}, len {}) against a {k}x{e} codebook",
                    v.len()
                )));
            }
            axpy(1.0, v, &mut sums[*i]);
            counts[*i] += 1;
        }
        let alpha = self.ema_alpha;
        for i in 0..k {
            if counts[i] == 0 {
                continue;
            }
            let denom = counts[i] as f64 + self.ema_eps;
            let row = self.codebook.row_mut(i);
            for (p, s) in row.iter_mut().zip(&sums[i]) {
                *p = alpha * *p + (1.0 - alpha) * (s / denom);
            }
        }
        Ok(())
    }

    /// Group instance keys by their assigned prototype. Keys within a group
    /// keep input order.
    pub fn dump_clusters<'a, I>(&self, instances: I) -> Result<BTreeMap<usize, Vec<String>>>
    where
        I: IntoIterator<Item = (&'a str, &'a [f64])>,
    {
        let mut out: BTreeMap<usize, Vec<String>> = BTreeMap::new();
        for (key, v) in instances {
            let (i, _) = self.assign(v)?;
            out.entry(i).or_default().push(key.to_string());
        }
        Ok(out)
    }
}

/// Forward of `p + sg(p − v)`-style quantization: the value is exactly `p`.
pub fn straight_through(v: &[f64], p: &[f64]) -> Result<Vec<f64>> {
    if v.len() != p.len() {
        return Err(Error::Shape(format!(
            "straight-through on lengths {} and {}",
            v.len(),
            p.len()
        )));
    }
    Ok(p.to_vec())
}

/// Backward of the straight-through estimator: the upstream gradient goes to
/// `v` unchanged and nothing reaches the codebook row.
pub fn straight_through_backward(upstream: &[f64]) -> (Vec<f64>, Vec<f64>) {
    (upstream.to_vec(), vec![0.0; upstream.len()])
}

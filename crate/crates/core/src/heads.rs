//! Trainable shallow heads on top of the frozen encoders.
//!
//! `f_text` and `f_vis` lift pooled encoder outputs into the shared head
//! space of dimension `d`; `g_text` and `g_vis` project head vectors to
//! `d_z + 1` outputs whose last component is an uncertainty logit.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::embeddings::TextEntry;
use crate::error::{Error, Result};
use crate::numeric::{sigmoid, Affine};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Rectangular identity weights, zero bias.
    Identity,
    /// Glorot-uniform weights, zero bias.
    Xavier,
}

impl std::str::FromStr for HeadInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(HeadInit::Identity),
            "xavier" => Ok(HeadInit::Xavier),
            other => Err(Error::Config(format!("unknown head_init {other:?}"))),
        }
    }
}

impl std::fmt::Display for HeadInit {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            HeadInit::Identity => "identity",
            HeadInit::Xavier => "xavier",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Text,
    Visual,
}

/// Output of a projector: the projected vector and its uncertainty logit.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub z: Vec<f64>,
    pub u: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadParams {
    pub f_text: Affine,
    pub f_vis: Affine,
    pub g_text: Affine,
    pub g_vis: Affine,
}

impl HeadParams {
    pub fn init<R: Rng + ?Sized>(
        text_dim: usize,
        image_dim: usize,
        d: usize,
        d_z: usize,
        init: HeadInit,
        rng: &mut R,
    ) -> Result<Self> {
        if d == 0 || d_z == 0 || text_dim == 0 || image_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        let make = |i: usize, o: usize, rng: &mut R| match init {
            HeadInit::Identity => Affine::identity(i, o),
            HeadInit::Xavier => Affine::xavier(i, o, rng),
        };
        Ok(Self {
            f_text: make(text_dim, d, rng),
            f_vis: make(image_dim, d, rng),
            g_text: make(d, d_z + 1, rng),
            g_vis: make(d, d_z + 1, rng),
        })
    }

    pub fn d(&self) -> usize {
        self.f_text.out_dim()
    }

    pub fn d_z(&self) -> usize {
        self.g_text.out_dim() - 1
    }

    /// `t = f_text(mean(S))`; pooled entries skip the mean.
    pub fn encode_text_term(&self, entry: &TextEntry) -> Result<Vec<f64>> {
        self.f_text.forward(&entry.pooled()?)
    }

    /// `v = f_vis(i)`
    pub fn encode_image(&self, image: &[f64]) -> Result<Vec<f64>> {
        self.f_vis.forward(image)
    }

    pub fn projector(&self, side: Side) -> &Affine {
        match side {
            Side::Text => &self.g_text,
            Side::Visual => &self.g_vis,
        }
    }

    /// Splits `g_side(x)` into the leading `d_z` components and the trailing uncertainty logit.
    pub fn project_with_uncertainty(&self, x: &[f64], side: Side) -> Result<Projection> {
        Ok(split_projection(self.projector(side).forward(x)?))
    }
}

pub fn split_projection(mut y: Vec<f64>) -> Projection {
    let u = y.pop().expect("projector has at least two outputs");
    Projection { z: y, u }
}

/// Maps an uncertainty logit into `(0, 1)`.
pub fn uncertainty_scale(u: f64) -> f64 {
    sigmoid(u)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::{finite_diff_grad, relative_error, AffineGrad, Tensor2};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn identity_heads(d: usize) -> HeadParams {
        HeadParams {
            f_text: Affine::identity(d, d),
            f_vis: Affine::identity(d, d),
            g_text: Affine::identity(d, d),
            g_vis: Affine::identity(d, d),
        }
    }

    #[test]
    fn text_mean_then_affine() {
        let h = identity_heads(2);
        let m = TextEntry::Tokens(Tensor2::from_rows(&[vec![2.0, 0.0], vec![0.0, 2.0]]).unwrap());
        assert_eq!(h.encode_text_term(&m).unwrap(), vec![1.0, 1.0]);
        assert_eq!(
            h.encode_text_term(&TextEntry::Pooled(vec![0.25, -3.0])).unwrap(),
            vec![0.25, -3.0]
        );
        assert!(matches!(
            h.encode_text_term(&TextEntry::Pooled(vec![1.0])),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn token_matrix_equals_hand_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut h = identity_heads(3);
        h.f_text = Affine::xavier(3, 3, &mut rng);
        let rows: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let mean: Vec<f64> = (0..3)
            .map(|c| rows.iter().map(|r| r[c]).sum::<f64>() / 4.0)
            .collect();
        let t = h
            .encode_text_term(&TextEntry::Tokens(Tensor2::from_rows(&rows).unwrap()))
            .unwrap();
        assert_eq!(t, h.f_text.forward(&mean).unwrap());
    }

    #[test]
    fn image_head() {
        let mut h = identity_heads(3);
        assert_eq!(h.encode_image(&[1.0, 2.0, 3.0]).unwrap(), vec![1.0, 2.0, 3.0]);
        h.f_vis = Affine::new(Tensor2::zeros(3, 3), vec![1.0; 3]).unwrap();
        assert_eq!(h.encode_image(&[4.0, 5.0, 6.0]).unwrap(), vec![1.0; 3]);
    }

    #[test]
    fn image_head_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let layer = Affine::xavier(4, 3, &mut rng);
        let img: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        // L = ‖f_vis(i)‖² / 2
        let loss = |l: &Affine| {
            let v = l.forward(&img).unwrap();
            0.5 * v.iter().map(|x| x * x).sum::<f64>()
        };
        let v = layer.forward(&img).unwrap();
        let mut g = AffineGrad::zeros_like(&layer);
        layer.backward(&img, &v, &mut g).unwrap();
        let numeric = finite_diff_grad(
            |w| {
                let mut l = layer.clone();
                l.weight.data_mut().copy_from_slice(w);
                loss(&l)
            },
            layer.weight.data(),
            1e-5,
        )
        .unwrap();
        assert!(relative_error(g.weight.data(), &numeric) < 1e-4);
    }

    #[test]
    fn projection_split() {
        let h = identity_heads(3);
        let p = h.project_with_uncertainty(&[1.0, 2.0, 3.0], Side::Text).unwrap();
        assert_eq!(p, Projection { z: vec![1.0, 2.0], u: 3.0 });

        let mut h = identity_heads(3);
        h.g_vis = Affine::new(Tensor2::zeros(3, 3), vec![0.0, 0.0, 5.0]).unwrap();
        let p = h.project_with_uncertainty(&[7.0, 8.0, 9.0], Side::Visual).unwrap();
        assert_eq!(p, Projection { z: vec![0.0, 0.0], u: 5.0 });
    }

    #[test]
    fn projection_reassembles() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = HeadParams::init(5, 6, 4, 3, HeadInit::Xavier, &mut rng).unwrap();
        let x: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let p = h.project_with_uncertainty(&x, Side::Text).unwrap();
        assert_eq!(p.z.len(), 3);
        let mut joined = p.z.clone();
        joined.push(p.u);
        assert_eq!(joined, h.g_text.forward(&x).unwrap());
    }

    #[test]
    fn uncertainty_values() {
        assert_eq!(uncertainty_scale(0.0), 0.5);
        assert!((uncertainty_scale(40.0) - 1.0).abs() < 1e-12);
        assert!((uncertainty_scale(1.0) - 0.731_058_578_6).abs() < 1e-9);
    }

    #[test]
    fn zero_bias_heads_are_homogeneous() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let h = HeadParams::init(5, 5, 4, 2, HeadInit::Xavier, &mut rng).unwrap();
        let x: Vec<f64> = (0..5).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x2: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let y = h.encode_image(&x).unwrap();
        let y2 = h.encode_image(&x2).unwrap();
        for (a, b) in y.iter().zip(&y2) {
            assert_eq!(2.0 * a, *b);
        }
    }
}

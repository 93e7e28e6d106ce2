//! Model parameters, the joint four-task forward/backward pass, pair
//! representation for inference, and the checkpoint container.

use std::io::Write as _;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::embeddings::EmbeddingTable;
use crate::error::{Error, Result};
use crate::fusion::{fuse, fuse_backward, gate_with_grad, Detector, DetectorGrad, FusedPair};
use crate::heads::{split_projection, HeadInit, HeadParams};
use crate::numeric::{add, axpy, sigmoid, sub, Affine, AffineGrad, Tensor2};
use crate::objectives::{bce_with_logit, hpc_loss, proto_loss, text_hypernymy_loss, HpcItem, LossParts};
use crate::prototypes::{straight_through, straight_through_backward, AssignmentBatch, PrototypeTable};

/// One pair with pooled text inputs and an optional hyponym image.
#[derive(Debug, Clone, PartialEq)]
pub struct PairExample {
    pub hyper: Vec<f64>,
    pub hypo: Vec<f64>,
    pub image: Option<Vec<f64>>,
    pub label: f64,
}

/// Positives drive the contrastive tasks; positives and negatives together
/// drive detection.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Batch {
    pub positives: Vec<PairExample>,
    pub negatives: Vec<PairExample>,
}

/// Quantization results recorded during a forward pass, in call order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StState {
    pub indices: Vec<usize>,
    /// `p − v` at recording time.
    pub offsets: Vec<Vec<f64>>,
}

/// How the straight-through path is evaluated.
#[derive(Debug, Clone, Copy)]
pub enum StMode<'a> {
    /// Assign by nearest prototype; the quantized value is exactly `p`.
    Live,
    /// Reuse recorded assignments and offsets: `p_st = v + (p − v₀)`. The loss
    /// is then a smooth function of `v` with the codebook held constant.
    Frozen(&'a StState),
}

struct StTape<'a> {
    mode: StMode<'a>,
    cursor: usize,
    record: StState,
}

impl<'a> StTape<'a> {
    fn new(mode: StMode<'a>) -> Self {
        Self {
            mode,
            cursor: 0,
            record: StState::default(),
        }
    }

    fn quantize(&mut self, table: &PrototypeTable, v: &[f64]) -> Result<(usize, Vec<f64>)> {
        let (idx, p_st, offset) = match self.mode {
            StMode::Live => {
                let (idx, p) = table.assign(v)?;
                (idx, straight_through(v, p)?, sub(p, v))
            }
            StMode::Frozen(state) => {
                let k = self.cursor;
                let (Some(&idx), Some(off)) = (state.indices.get(k), state.offsets.get(k)) else {
                    return Err(Error::Shape(format!("frozen state has no entry {k}")));
                };
                if off.len() != v.len() {
                    return Err(Error::Shape("frozen offset dimension".into()));
                }
                (idx, add(v, off), off.clone())
            }
        };
        self.cursor += 1;
        self.record.indices.push(idx);
        self.record.offsets.push(offset);
        Ok((idx, p_st))
    }
}

/// Gradients for every parameter tensor. The codebook entry exists to make
/// the stop-gradient contract observable; it is always zero.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub f_text: AffineGrad,
    pub f_vis: AffineGrad,
    pub g_text: AffineGrad,
    pub g_vis: AffineGrad,
    pub detector: DetectorGrad,
    pub codebook: Tensor2,
}

impl ModelGrads {
    pub fn zeros_like(model: &Model) -> Self {
        Self {
            f_text: AffineGrad::zeros_like(&model.heads.f_text),
            f_vis: AffineGrad::zeros_like(&model.heads.f_vis),
            g_text: AffineGrad::zeros_like(&model.heads.g_text),
            g_vis: AffineGrad::zeros_like(&model.heads.g_vis),
            detector: DetectorGrad::zeros_like(&model.detector),
            codebook: Tensor2::zeros(model.prototypes.k(), model.prototypes.e()),
        }
    }

    /// Named gradient slices aligned with [`Model::trainable`].
    pub fn tensors(&self) -> Vec<(&'static str, &[f64])> {
        let mut out = vec![
            ("f_text.weight", self.f_text.weight.data()),
            ("f_text.bias", &self.f_text.bias[..]),
            ("f_vis.weight", self.f_vis.weight.data()),
            ("f_vis.bias", &self.f_vis.bias[..]),
            ("g_text.weight", self.g_text.weight.data()),
            ("g_text.bias", &self.g_text.bias[..]),
            ("g_vis.weight", self.g_vis.weight.data()),
            ("g_vis.bias", &self.g_vis.bias[..]),
        ];
        if let Some(h) = &self.detector.hidden {
            out.push(("detector.hidden.weight", h.weight.data()));
            out.push(("detector.hidden.bias", &h.bias[..]));
        }
        out.push(("detector.out.weight", self.detector.out.weight.data()));
        out.push(("detector.out.bias", &self.detector.out.bias[..]));
        out
    }
}

/// Result of one joint pass over a batch.
#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub parts: LossParts,
    pub grads: ModelGrads,
    pub st: StState,
    /// Visual features of image-bearing positives with their prototypes; the
    /// input of the EMA update.
    pub assignments: AssignmentBatch,
    /// Gradient with respect to each positive's image input, when used.
    pub d_positive_images: Vec<Option<Vec<f64>>>,
    /// Gradient with respect to each negative's image input, when used.
    pub d_negative_images: Vec<Option<Vec<f64>>>,
}

struct VisualTrace {
    image: Vec<f64>,
    v: Vec<f64>,
    idx: usize,
    p_st: Vec<f64>,
    d_gate_e: (Vec<f64>, Vec<f64>),
    d_gate_o: (Vec<f64>, Vec<f64>),
}

struct PairTrace {
    t_e: Vec<f64>,
    t_o: Vec<f64>,
    visual: Option<VisualTrace>,
    fused: FusedPair,
    logit: f64,
}

/// Dimensions that must agree between a checkpoint and its consumer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub text_dim: usize,
    pub image_dim: usize,
    pub d: usize,
    pub d_z: usize,
    pub k: usize,
    pub detector_hidden: usize,
}

impl std::fmt::Display for ModelShape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "text_dim={} image_dim={} d={} d_z={} k={} detector_hidden={}",
            self.text_dim, self.image_dim, self.d, self.d_z, self.k, self.detector_hidden
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: TrainConfig,
    pub text_dim: usize,
    pub image_dim: usize,
    pub heads: HeadParams,
    pub detector: Detector,
    pub prototypes: PrototypeTable,
}

impl Model {
    /// Deterministic initialization from `config.seed`.
    pub fn init(config: &TrainConfig, text_dim: usize, image_dim: usize) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let heads = HeadParams::init(text_dim, image_dim, config.d, config.d_z, config.head_init, &mut rng)?;
        let mut detector = Detector::init(config.d, config.detector_hidden, &mut rng);
        if config.head_init == HeadInit::Identity {
            // a deterministic start for the classifier as well: every pair at 0.5
            detector.out = Affine::zeros(detector.out.in_dim(), 1);
        }
        let prototypes =
            PrototypeTable::random(config.k, config.d, config.ema_alpha, config.ema_eps, &mut rng)?;
        Ok(Self {
            config: config.clone(),
            text_dim,
            image_dim,
            heads,
            detector,
            prototypes,
        })
    }

    pub fn shape(&self) -> ModelShape {
        ModelShape {
            text_dim: self.text_dim,
            image_dim: self.image_dim,
            d: self.heads.d(),
            d_z: self.heads.d_z(),
            k: self.prototypes.k(),
            detector_hidden: self.detector.hidden.as_ref().map_or(0, Affine::out_dim),
        }
    }

    /// Named parameter slices updated by the optimizer, in a fixed order.
    pub fn trainable(&self) -> Vec<(&'static str, &[f64])> {
        let h = &self.heads;
        let mut out = vec![
            ("f_text.weight", h.f_text.weight.data()),
            ("f_text.bias", &h.f_text.bias[..]),
            ("f_vis.weight", h.f_vis.weight.data()),
            ("f_vis.bias", &h.f_vis.bias[..]),
            ("g_text.weight", h.g_text.weight.data()),
            ("g_text.bias", &h.g_text.bias[..]),
            ("g_vis.weight", h.g_vis.weight.data()),
            ("g_vis.bias", &h.g_vis.bias[..]),
        ];
        if let Some(l) = &self.detector.hidden {
            out.push(("detector.hidden.weight", l.weight.data()));
            out.push(("detector.hidden.bias", &l.bias[..]));
        }
        out.push(("detector.out.weight", self.detector.out.weight.data()));
        out.push(("detector.out.bias", &self.detector.out.bias[..]));
        out
    }

    /// Mutable counterpart of [`trainable`](Self::trainable), same order.
    pub fn trainable_mut(&mut self) -> Vec<&mut [f64]> {
        let HeadParams {
            f_text,
            f_vis,
            g_text,
            g_vis,
        } = &mut self.heads;
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in [f_text, f_vis, g_text, g_vis] {
            let Affine { weight, bias } = l;
            out.push(weight.data_mut());
            out.push(&mut bias[..]);
        }
        let Detector { hidden, out: last } = &mut self.detector;
        if let Some(Affine { weight, bias }) = hidden {
            out.push(weight.data_mut());
            out.push(&mut bias[..]);
        }
        let Affine { weight, bias } = last;
        out.push(weight.data_mut());
        out.push(&mut bias[..]);
        out
    }

    fn visual_enabled(&self, image: Option<&[f64]>) -> Option<Vec<f64>> {
        if self.config.use_images {
            image.map(<[f64]>::to_vec)
        } else {
            None
        }
    }

    fn pair_forward(
        &self,
        hyper: &[f64],
        hypo: &[f64],
        image: Option<&[f64]>,
        tape: &mut StTape<'_>,
    ) -> Result<PairTrace> {
        let h = &self.heads;
        let t_e = h.f_text.forward(hyper)?;
        let t_o = h.f_text.forward(hypo)?;
        let (visual, fused) = match self.visual_enabled(image) {
            None => {
                let fused = FusedPair {
                    c_e: t_e.clone(),
                    c_o: t_o.clone(),
                    alpha_e: 0.0,
                    alpha_o: 0.0,
                };
                (None, fused)
            }
            Some(image) => {
                let v = h.f_vis.forward(&image)?;
                let (idx, p_st) = tape.quantize(&self.prototypes, &v)?;
                let z_e = split_projection(h.g_text.forward(&t_e)?).z;
                let z_p = split_projection(h.g_vis.forward(&p_st)?).z;
                let z_o = split_projection(h.g_text.forward(&t_o)?).z;
                let z_v = split_projection(h.g_vis.forward(&v)?).z;
                let (alpha_e, dze, dzp) = gate_with_grad(&z_e, &z_p)?;
                let (alpha_o, dzo, dzv) = gate_with_grad(&z_o, &z_v)?;
                let fused = FusedPair {
                    c_e: fuse(&t_e, &p_st, alpha_e)?,
                    c_o: fuse(&t_o, &v, alpha_o)?,
                    alpha_e,
                    alpha_o,
                };
                let trace = VisualTrace {
                    image,
                    v,
                    idx,
                    p_st,
                    d_gate_e: (dze, dzp),
                    d_gate_o: (dzo, dzv),
                };
                (Some(trace), fused)
            }
        };
        let (logit, _) = self.detector.detect(&fused.c_e, &fused.c_o)?;
        Ok(PairTrace {
            t_e,
            t_o,
            visual,
            fused,
            logit,
        })
    }

    fn pair_backward(
        &self,
        hyper: &[f64],
        hypo: &[f64],
        trace: &PairTrace,
        dlogit: f64,
        grads: &mut ModelGrads,
    ) -> Result<Option<Vec<f64>>> {
        let h = &self.heads;
        let f = &trace.fused;
        let (dce, dco) = self.detector.backward(&f.c_e, &f.c_o, dlogit, &mut grads.detector)?;
        let (dte, dto, d_image) = match &trace.visual {
            None => (dce, dco, None),
            Some(vt) => {
                let (mut dte, mut dp, dae) = fuse_backward(&trace.t_e, &vt.p_st, f.alpha_e, &dce);
                let (mut dto, mut dv, dao) = fuse_backward(&trace.t_o, &vt.v, f.alpha_o, &dco);
                // gates read only the z part; the uncertainty output gets no gradient here
                let upstream = |dz: &[f64], s: f64| {
                    let mut u: Vec<f64> = dz.iter().map(|x| s * x).collect();
                    u.push(0.0);
                    u
                };
                let g = h.g_text.backward(&trace.t_e, &upstream(&vt.d_gate_e.0, dae), &mut grads.g_text)?;
                axpy(1.0, &g, &mut dte);
                let g = h.g_vis.backward(&vt.p_st, &upstream(&vt.d_gate_e.1, dae), &mut grads.g_vis)?;
                axpy(1.0, &g, &mut dp);
                let g = h.g_text.backward(&trace.t_o, &upstream(&vt.d_gate_o.0, dao), &mut grads.g_text)?;
                axpy(1.0, &g, &mut dto);
                let g = h.g_vis.backward(&vt.v, &upstream(&vt.d_gate_o.1, dao), &mut grads.g_vis)?;
                axpy(1.0, &g, &mut dv);
                let (dv_st, d_row) = straight_through_backward(&dp);
                axpy(1.0, &dv_st, &mut dv);
                axpy(1.0, &d_row, grads.codebook.row_mut(vt.idx));
                let d_image = h.f_vis.backward(&vt.image, &dv, &mut grads.f_vis)?;
                (dte, dto, Some(d_image))
            }
        };
        h.f_text.backward(hyper, &dte, &mut grads.f_text)?;
        h.f_text.backward(hypo, &dto, &mut grads.f_text)?;
        Ok(d_image)
    }

    /// Total loss of the four tasks and the gradient of their sum.
    ///
    /// Contrastive tasks use positives only. Image-bearing positives feed the
    /// prototype and hyper-proto tasks, which contribute zero when fewer than
    /// two such items are present. Detection averages over all labeled pairs.
    pub fn forward_backward(&self, batch: &Batch, mode: StMode<'_>) -> Result<ForwardOutput> {
        let n = batch.positives.len();
        if n < 2 {
            return Err(Error::BatchTooSmall(n));
        }
        let cfg = &self.config;
        let h = &self.heads;
        let mut grads = ModelGrads::zeros_like(self);
        let mut tape = StTape::new(mode);
        let mut parts = LossParts::default();
        let mut assignments = AssignmentBatch::default();
        let mut d_positive_images: Vec<Option<Vec<f64>>> = vec![None; n];
        let mut d_negative_images: Vec<Option<Vec<f64>>> = vec![None; batch.negatives.len()];

        let t_o = batch
            .positives
            .iter()
            .map(|p| h.f_text.forward(&p.hypo))
            .collect::<Result<Vec<_>>>()?;
        let t_e = batch
            .positives
            .iter()
            .map(|p| h.f_text.forward(&p.hyper))
            .collect::<Result<Vec<_>>>()?;
        let text = text_hypernymy_loss(&t_o, &t_e, cfg.tau_text)?;
        parts.text = text.loss;
        let dt_o = text.d_anchors;
        let mut dt_e = text.d_keys;

        let visual: Vec<(usize, Vec<f64>)> = batch
            .positives
            .iter()
            .enumerate()
            .filter_map(|(i, p)| self.visual_enabled(p.image.as_deref()).map(|img| (i, img)))
            .collect();
        if visual.len() >= 2 {
            let mut v = Vec::with_capacity(visual.len());
            let mut p_st = Vec::with_capacity(visual.len());
            let mut idx = Vec::with_capacity(visual.len());
            for (_, img) in &visual {
                let vi = h.f_vis.forward(img)?;
                let (j, p) = tape.quantize(&self.prototypes, &vi)?;
                assignments.push(j, vi.clone());
                v.push(vi);
                p_st.push(p);
                idx.push(j);
            }
            let proto = proto_loss(&v, &p_st, cfg.tau_proto)?;
            parts.proto = proto.loss;
            let mut dv = proto.d_features;
            let mut dp = proto.d_prototypes;

            let mut items = Vec::with_capacity(visual.len());
            for (j, (i, _)) in visual.iter().enumerate() {
                let a = split_projection(h.g_text.forward(&t_e[*i])?);
                let b = split_projection(h.g_vis.forward(&p_st[j])?);
                items.push(HpcItem {
                    z_h: a.z,
                    u_h: a.u,
                    z_p: b.z,
                    u_p: b.u,
                });
            }
            let hpc = hpc_loss(&items)?;
            parts.hpc = hpc.loss;
            for (j, (i, img)) in visual.iter().enumerate() {
                let mut up = hpc.d_z_h[j].clone();
                up.push(hpc.d_u_h[j]);
                let g = h.g_text.backward(&t_e[*i], &up, &mut grads.g_text)?;
                axpy(1.0, &g, &mut dt_e[*i]);
                let mut up = hpc.d_z_p[j].clone();
                up.push(hpc.d_u_p[j]);
                let g = h.g_vis.backward(&p_st[j], &up, &mut grads.g_vis)?;
                axpy(1.0, &g, &mut dp[j]);
                let (dv_st, d_row) = straight_through_backward(&dp[j]);
                axpy(1.0, &dv_st, &mut dv[j]);
                axpy(1.0, &d_row, grads.codebook.row_mut(idx[j]));
                let di = h.f_vis.backward(img, &dv[j], &mut grads.f_vis)?;
                accumulate(&mut d_positive_images[*i], di);
            }
        }
        for (i, p) in batch.positives.iter().enumerate() {
            h.f_text.backward(&p.hypo, &dt_o[i], &mut grads.f_text)?;
            h.f_text.backward(&p.hyper, &dt_e[i], &mut grads.f_text)?;
        }

        let m = (batch.positives.len() + batch.negatives.len()) as f64;
        let slots = d_positive_images.iter_mut().chain(d_negative_images.iter_mut());
        for (ex, slot) in batch.positives.iter().chain(&batch.negatives).zip(slots) {
            let trace = self.pair_forward(&ex.hyper, &ex.hypo, ex.image.as_deref(), &mut tape)?;
            let (loss, dlogit) = bce_with_logit(trace.logit, ex.label);
            parts.bce += loss / m;
            if let Some(di) = self.pair_backward(&ex.hyper, &ex.hypo, &trace, dlogit / m, &mut grads)? {
                accumulate(slot, di);
            }
        }

        Ok(ForwardOutput {
            parts,
            grads,
            st: tape.record,
            assignments,
            d_positive_images,
            d_negative_images,
        })
    }

    /// Loss value only; used by finite-difference checks.
    pub fn loss(&self, batch: &Batch, mode: StMode<'_>) -> Result<LossParts> {
        Ok(self.forward_backward(batch, mode)?.parts)
    }

    /// Fused representation of a pooled text pair and optional hyponym image.
    /// Without an image both gates are 0 and the text vectors pass through.
    pub fn represent(&self, hyper: &[f64], hypo: &[f64], image: Option<&[f64]>) -> Result<FusedPair> {
        let mut tape = StTape::new(StMode::Live);
        Ok(self.pair_forward(hyper, hypo, image, &mut tape)?.fused)
    }

    /// `(logit, ŷ)` for a pooled pair.
    pub fn score(&self, hyper: &[f64], hypo: &[f64], image: Option<&[f64]>) -> Result<(f64, f64)> {
        let mut tape = StTape::new(StMode::Live);
        let logit = self.pair_forward(hyper, hypo, image, &mut tape)?.logit;
        Ok((logit, sigmoid(logit)))
    }

    /// Looks up both terms and the image in `emb`. The image key defaults to
    /// the hyponym term.
    pub fn represent_pair(
        &self,
        emb: &EmbeddingTable,
        hyper: &str,
        hypo: &str,
        image_key: Option<&str>,
    ) -> Result<FusedPair> {
        let (a, b, img) = pooled_inputs(emb, hyper, hypo, image_key)?;
        self.represent(&a, &b, img)
    }

    /// Save to the binary checkpoint container.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes).map_err(|e| e.with_path(path))
    }

    /// Loads and rejects checkpoints whose dimensions differ from `expected`.
    pub fn load_expecting(path: impl AsRef<Path>, expected: &ModelShape) -> Result<Self> {
        let model = Self::load(path)?;
        let found = model.shape();
        if &found != expected {
            return Err(Error::Version(format!(
                "checkpoint shape [{found}] does not match expected [{expected}]"
            )));
        }
        Ok(model)
    }

    fn stored_tensors(&self) -> Vec<(&'static str, usize, usize, &[f64])> {
        let h = &self.heads;
        let mut out = Vec::new();
        for (w, b, l) in [
            ("f_text.weight", "f_text.bias", &h.f_text),
            ("f_vis.weight", "f_vis.bias", &h.f_vis),
            ("g_text.weight", "g_text.bias", &h.g_text),
            ("g_vis.weight", "g_vis.bias", &h.g_vis),
        ] {
            out.push((w, l.weight.rows(), l.weight.cols(), l.weight.data()));
            out.push((b, l.bias.len(), 1, &l.bias[..]));
        }
        if let Some(l) = &self.detector.hidden {
            out.push(("detector.hidden.weight", l.weight.rows(), l.weight.cols(), l.weight.data()));
            out.push(("detector.hidden.bias", l.bias.len(), 1, &l.bias[..]));
        }
        let l = &self.detector.out;
        out.push(("detector.out.weight", l.weight.rows(), l.weight.cols(), l.weight.data()));
        out.push(("detector.out.bias", l.bias.len(), 1, &l.bias[..]));
        let c = self.prototypes.codebook();
        out.push(("codebook", c.rows(), c.cols(), c.data()));
        out
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut entries = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut offset = 0usize;
        for (name, rows, cols, data) in self.stored_tensors() {
            entries.push(TensorEntry {
                name: name.to_string(),
                rows,
                cols,
                offset,
            });
            offset += data.len();
            for x in data {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            config: self.config.clone(),
            text_dim: self.text_dim,
            image_dim: self.image_dim,
            tensors: entries,
        };
        let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
        let mut out = Vec::with_capacity(MAGIC.len() + 12 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = MAGIC.len() + 12;
        if bytes.len() < header {
            return Err(Error::parse(0, "checkpoint truncated in header"));
        }
        if &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::parse(0, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::Version(format!(
                "format_version {version}, this build reads {FORMAT_VERSION}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[header..];
        if body.len() < mlen {
            return Err(Error::parse(0, "checkpoint truncated in manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::parse(0, format!("bad manifest: {e}")))?;
        let payload = &body[mlen..];
        let total: usize = manifest.tensors.iter().map(|t| t.rows * t.cols).sum();
        if payload.len() != total * 8 {
            return Err(Error::parse(
                0,
                format!("checkpoint payload has {} bytes, manifest needs {}", payload.len(), total * 8),
            ));
        }
        let mut model = Model::init(&manifest.config, manifest.text_dim, manifest.image_dim)?;
        let expected: Vec<(String, usize, usize)> = model
            .stored_tensors()
            .into_iter()
            .map(|(n, r, c, _)| (n.to_string(), r, c))
            .collect();
        if expected.len() != manifest.tensors.len() {
            return Err(Error::Version(format!(
                "checkpoint lists {} tensors, config implies {}",
                manifest.tensors.len(),
                expected.len()
            )));
        }
        let mut values = Vec::with_capacity(expected.len());
        for ((name, rows, cols), entry) in expected.iter().zip(&manifest.tensors) {
            if &entry.name != name {
                return Err(Error::parse(0, format!("expected tensor {name}, found {}", entry.name)));
            }
            if (entry.rows, entry.cols) != (*rows, *cols) {
                return Err(Error::Version(format!(
                    "tensor {name} stored as {}x{}, config implies {rows}x{cols}",
                    entry.rows, entry.cols
                )));
            }
            let start = entry.offset * 8;
            let end = start + rows * cols * 8;
            if end > payload.len() {
                return Err(Error::parse(0, format!("tensor {name} out of range")));
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            values.push(data);
        }
        let codebook = values.pop().expect("codebook is stored last");
        for (slot, data) in model.trainable_mut().into_iter().zip(values) {
            slot.copy_from_slice(&data);
        }
        model.prototypes.codebook_mut().data_mut().copy_from_slice(&codebook);
        Ok(model)
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match slot {
        Some(acc) => axpy(1.0, &g, acc),
        None => *slot = Some(g),
    }
}

/// Pooled hypernym text, pooled hyponym text and the hyponym image.
pub type PooledPair<'a> = (Vec<f64>, Vec<f64>, Option<&'a [f64]>);

/// Pooled text of both terms plus the hyponym image if present.
pub fn pooled_inputs<'a>(
    emb: &'a EmbeddingTable,
    hyper: &str,
    hypo: &str,
    image_key: Option<&str>,
) -> Result<PooledPair<'a>> {
    let text = |t: &str| {
        emb.text(t)
            .ok_or_else(|| Error::MissingTextEmbedding(t.to_string()))
            .and_then(|e| e.pooled())
    };
    let a = text(hyper)?;
    let b = text(hypo)?;
    let img = emb.image(image_key.unwrap_or(hypo));
    Ok((a, b, img))
}

const MAGIC: &[u8; 8] = b"VTECKPT\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    config: TrainConfig,
    text_dim: usize,
    image_dim: usize,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    /// In units of `f64` from the start of the payload.
    offset: usize,
}

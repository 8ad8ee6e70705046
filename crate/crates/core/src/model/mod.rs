//! Multi-person pose model: stub encoder, query selection and a grouped
//! decoder with keypoint refinement and quality-aware classification.

pub mod attention;
pub mod decoder;
pub mod deformable;
pub mod encoder;
pub mod heads;
pub mod params;
pub mod query;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::denoise::{build_attention_mask, DnLayout, NoisySample};
use crate::error::{Error, Result};
use crate::numeric::{Float, Graph, Tensor, Var};

pub use decoder::decoder_forward;
pub use deformable::DeformGeometry;
pub use encoder::{encode_stub, FeaturePyramid};
pub use params::{Bound, ParamStore};
pub use query::{prepend_denoising, select_queries, Proposals, QuerySet};

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub heads: usize,
    /// Pyramid levels used (at most 3).
    pub levels: usize,
    /// Sampling points per head and level in deformable attention.
    pub points: usize,
    pub decoder_layers: usize,
    /// Matching (instance) queries per image.
    pub num_queries: usize,
    pub num_keypoints: usize,
    pub ffn_dim: usize,
    /// Bins per axis of the refinement distribution.
    pub bins: usize,
    /// Half-width of the first layer's bin range, normalized units.
    pub bin_range: f64,
    /// Channels kept per keypoint by the quality head.
    pub k_lqe: usize,
    pub pos_freqs: usize,
    pub in_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Preset::Tiny.config()
    }
}

/// Named architecture sizes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Tiny,
    SLike,
    MLike,
    LLike,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        let tiny = ModelConfig {
            hidden_dim: 32,
            heads: 4,
            levels: 3,
            points: 4,
            decoder_layers: 3,
            num_queries: 20,
            num_keypoints: 17,
            ffn_dim: 64,
            bins: 16,
            bin_range: 0.25,
            k_lqe: 4,
            pos_freqs: 8,
            in_channels: 1,
        };
        let large = |layers| ModelConfig {
            hidden_dim: 256,
            heads: 8,
            decoder_layers: layers,
            num_queries: 60,
            ffn_dim: 1024,
            pos_freqs: 16,
            ..tiny.clone()
        };
        match self {
            Preset::Tiny => tiny,
            Preset::SLike => large(3),
            Preset::MLike => large(4),
            Preset::LLike => large(6),
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tiny" => Ok(Preset::Tiny),
            "s-like" => Ok(Preset::SLike),
            "m-like" => Ok(Preset::MLike),
            "l-like" => Ok(Preset::LLike),
            _ => Err(Error::Config(format!("unknown preset {s:?}"))),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.hidden_dim == 0 || self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return bad(format!(
                "hidden_dim {} not divisible by heads {}",
                self.hidden_dim, self.heads
            ));
        }
        if self.levels == 0 || self.levels > encoder::STRIDES.len() {
            return bad(format!(
                "levels must be 1..={}, got {}",
                encoder::STRIDES.len(),
                self.levels
            ));
        }
        for (name, v) in [
            ("points", self.points),
            ("decoder_layers", self.decoder_layers),
            ("num_queries", self.num_queries),
            ("num_keypoints", self.num_keypoints),
            ("ffn_dim", self.ffn_dim),
            ("bins", self.bins),
            ("pos_freqs", self.pos_freqs),
            ("in_channels", self.in_channels),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.pos_freqs > 30 {
            return bad(format!("pos_freqs {} too large", self.pos_freqs));
        }
        if !(self.bin_range > 0.0 && self.bin_range.is_finite()) {
            return bad(format!("bin_range must be positive, got {}", self.bin_range));
        }
        if self.k_lqe == 0 || self.k_lqe > self.hidden_dim {
            return Err(Error::Argument(format!(
                "k_lqe {} must be in 1..={}",
                self.k_lqe, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn deform_geometry(&self) -> DeformGeometry {
        DeformGeometry {
            heads: self.heads,
            levels: self.levels,
            points: self.points,
        }
    }
}

/// Output of one decoder layer for every instance (denoising first).
#[derive(Clone, Copy, Debug)]
pub struct LayerPrediction {
    /// `[I, K, 2]`
    pub keypoints: Var,
    /// `[I]` classification logits before the quality head.
    pub logits: Var,
    /// `[I]` logits after the quality head.
    pub refined_logits: Var,
    /// `[I, K, 2, B]`
    pub fdr_logits: Var,
}

#[derive(Clone, Debug)]
pub struct ModelOutput {
    pub proposals: Proposals,
    pub layers: Vec<LayerPrediction>,
    pub num_dn: usize,
    pub num_matching: usize,
}

/// A decoded person hypothesis.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Normalized `(x, y)` per keypoint.
    pub keypoints: Vec<(f64, f64)>,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PoseModel {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl PoseModel {
    /// Fresh weights drawn deterministically from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = params::Initializer {
            store: &mut store,
            rng: &mut rng,
        };
        encoder::init(&mut p, &config);
        query::init(&mut p, &config);
        attention::init_pos_embed(&mut p, config.pos_freqs, config.hidden_dim);
        decoder::init(&mut p, &config);
        Ok(Self { config, params: store })
    }

    /// Wraps loaded weights after checking they fit `config`.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let reference = Self::new(config, 0)?;
        reference.params.check_compatible(&params)?;
        Ok(Self {
            config: reference.config,
            params,
        })
    }

    /// Copy with every quality head zeroed, so refined logits equal the
    /// plain classification logits.
    pub fn without_lqe(&self) -> Self {
        let mut m = self.clone();
        for (name, t) in m.params.iter_mut() {
            if name.contains(".lqe.") {
                t.data_mut().iter_mut().for_each(|v| *v = 0.0);
            }
        }
        m
    }

    /// Full forward pass. `dn_samples` follow `layout` order; pass
    /// [`DnLayout::empty`] and no samples for plain inference.
    pub fn forward<T: Float>(
        &self,
        g: &mut Graph<T>,
        w: &Bound,
        image: &Tensor<f32>,
        layout: &DnLayout,
        dn_samples: &[NoisySample],
    ) -> Result<ModelOutput> {
        let cfg = &self.config;
        let k = cfg.num_keypoints;
        if dn_samples.len() != layout.total_dn_queries() {
            return Err(Error::Dimension(format!(
                "{} denoising samples for a layout of {}",
                dn_samples.len(),
                layout.total_dn_queries()
            )));
        }
        let pyramid = encode_stub(g, w, image, cfg)?;
        let (queries, proposals) = select_queries(g, w, &pyramid, cfg.num_queries, k)?;
        let mut dn = Vec::with_capacity(dn_samples.len() * k * 2);
        for s in dn_samples {
            if s.instance.num_keypoints() != k {
                return Err(Error::Dimension(format!(
                    "denoising sample has {} keypoints, model expects {k}",
                    s.instance.num_keypoints()
                )));
            }
            for kp in &s.instance.keypoints {
                dn.push(T::of(kp.x));
                dn.push(T::of(kp.y));
            }
        }
        let dn = Tensor::new(&[dn_samples.len(), k, 2], dn)?;
        let queries = prepend_denoising(g, w, queries, dn)?;
        let mask = Arc::new(build_attention_mask(layout, queries.num_matching)?);
        let layers = decoder_forward(g, w, cfg, &pyramid, &queries, &mask)?;
        Ok(ModelOutput {
            proposals,
            layers,
            num_dn: queries.num_dn,
            num_matching: queries.num_matching,
        })
    }

    /// Inference on one image: final-layer keypoints with sigmoid scores,
    /// sorted by descending score.
    pub fn predict(&self, image: &Tensor<f32>) -> Result<Vec<Prediction>> {
        let mut g = Graph::<f32>::new();
        let w = self.params.bind(&mut g);
        let out = self.forward(&mut g, &w, image, &DnLayout::empty(), &[])?;
        let last = out.layers.last().expect("at least one decoder layer");
        let kp = g.data(last.keypoints);
        let logits = g.data(last.refined_logits);
        let k = self.config.num_keypoints;
        let mut preds: Vec<Prediction> = (0..out.num_matching)
            .map(|i| Prediction {
                keypoints: (0..k)
                    .map(|j| (kp[(i * k + j) * 2] as f64, kp[(i * k + j) * 2 + 1] as f64))
                    .collect(),
                score: 1.0 / (1.0 + (-(logits[i] as f64)).exp()),
            })
            .collect();
        preds.sort_by(|a, b| b.score.total_cmp(&a.score));
        Ok(preds)
    }
}

//! Clinical encoder, the two fusion strategies and the classification head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::features::FeatureSet;
use crate::nn::{self, Buffers, Forward};
use crate::pose::NUM_CLASSES;
use crate::stgcn::{self, build_coco_graph, BackboneConfig, Preset, SkeletonGraph};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub enum FusionMode {
    #[default]
    #[serde(rename = "concat")]
    Concat,
    #[serde(rename = "xattn")]
    CrossAttention,
}

impl std::str::FromStr for FusionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(FusionMode::Concat),
            "xattn" => Ok(FusionMode::CrossAttention),
            _ => Err(Error::Config(format!("unknown fusion mode {s:?} (concat | xattn)"))),
        }
    }
}

/// Which streams feed the head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    #[default]
    Fused,
    Skeleton,
    Clinical,
}

impl Variant {
    pub fn uses_skeleton(self) -> bool {
        self != Variant::Clinical
    }
    pub fn uses_clinical(self) -> bool {
        self != Variant::Skeleton
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fused" => Ok(Variant::Fused),
            "skeleton" => Ok(Variant::Skeleton),
            "clinical" => Ok(Variant::Clinical),
            _ => Err(Error::Config(format!("unknown model variant {s:?} (fused | skeleton | clinical)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub preset: Preset,
    pub variant: Variant,
    pub fusion: FusionMode,
    pub features: FeatureSet,
    pub num_classes: usize,
    pub clinical_hidden: usize,
    pub clinical_dropout: f64,
    pub head_dropout: f64,
    /// Insert a relu between the two head layers (off: the head is two
    /// affine maps around dropout).
    pub head_relu: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            preset: Preset::Desk,
            variant: Variant::Fused,
            fusion: FusionMode::Concat,
            features: FeatureSet::Selected14,
            num_classes: NUM_CLASSES,
            clinical_hidden: 64,
            clinical_dropout: 0.3,
            head_dropout: 0.3,
            head_relu: false,
        }
    }
}

impl ModelConfig {
    pub fn backbone(&self) -> BackboneConfig {
        BackboneConfig::preset(self.preset)
    }

    pub fn embed_dim(&self) -> usize {
        self.backbone().embed_dim()
    }

    pub fn num_features(&self) -> usize {
        self.features.len()
    }

    pub fn head_in(&self) -> usize {
        match self.variant {
            Variant::Fused => 2 * self.embed_dim(),
            _ => self.embed_dim(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        contract!(self.num_classes >= 2, "need at least 2 classes");
        contract!(self.clinical_hidden >= 1, "clinical hidden width must be positive");
        contract!(
            (0.0..1.0).contains(&self.clinical_dropout) && (0.0..1.0).contains(&self.head_dropout),
            "dropout rates must be in [0, 1)"
        );
        self.backbone().validate()
    }
}

/// Inputs for one batch. Which fields are required depends on the variant.
#[derive(Debug, Clone, Default)]
pub struct ModelInput<T: Scalar> {
    /// `N x 3 x T x 17`
    pub skeleton: Option<Tensor<T>>,
    /// `N x F` standardized features.
    pub clinical: Option<Tensor<T>>,
}

impl<T: Scalar> ModelInput<T> {
    pub fn batch_size(&self) -> usize {
        self.skeleton
            .as_ref()
            .map(|s| s.shape()[0])
            .or_else(|| self.clinical.as_ref().map(|c| c.shape()[0]))
            .unwrap_or(0)
    }
}

pub struct ModelOutput {
    pub logits: Var,
    pub skeleton_embedding: Option<Var>,
    pub clinical_embedding: Option<Var>,
    pub fused: Var,
    /// Final backbone block activations (Grad-CAM target layer).
    pub last_block: Option<Var>,
    /// Cross-attention gate, `N x 1`.
    pub alpha: Option<Var>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub params: ParamStore<T>,
    pub buffers: Buffers<T>,
    pub graph: SkeletonGraph,
}

impl Model<f32> {
    /// Deterministic initialization from `seed`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let mut buffers = Buffers::new();
        let e = config.embed_dim();
        if config.variant.uses_skeleton() {
            stgcn::init_backbone(&config.backbone(), &mut params, &mut buffers, &mut rng)?;
        }
        if config.variant.uses_clinical() {
            let (f, h) = (config.num_features(), config.clinical_hidden);
            nn::init_affine(&mut params, &mut rng, "clinical.fc1", &[h, f], f)?;
            nn::init_affine(&mut params, &mut rng, "clinical.fc2", &[e, h], h)?;
        }
        if config.variant == Variant::Fused && config.fusion == FusionMode::CrossAttention {
            nn::init_layer_norm(&mut params, "fusion.ln_a", e)?;
            nn::init_layer_norm(&mut params, "fusion.ln_b", e)?;
        }
        let hin = config.head_in();
        nn::init_affine(&mut params, &mut rng, "head.fc1", &[e, hin], hin)?;
        nn::init_affine(&mut params, &mut rng, "head.fc2", &[config.num_classes, e], e)?;
        Ok(Model {
            config,
            params,
            buffers,
            graph: build_coco_graph(),
        })
    }
}

impl<T: Scalar> Model<T> {
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            buffers: nn::cast_buffers(&self.buffers),
            graph: self.graph.clone(),
        }
    }

    /// Record the full forward pass on `f.tape`.
    pub fn forward(&self, f: &mut Forward<T>, input: &ModelInput<T>) -> Result<ModelOutput> {
        let cfg = &self.config;
        let (mut skeleton_embedding, mut last_block, mut clinical_embedding, mut alpha) = (None, None, None, None);
        if cfg.variant.uses_skeleton() {
            let x = input
                .skeleton
                .as_ref()
                .ok_or_else(|| Error::Contract("model needs skeleton input".into()))?;
            let x = f.tape.constant(x.clone());
            let a = f.tape.constant(self.graph.a_hat_tensor());
            let b = stgcn::backbone_forward(f, &cfg.backbone(), x, a)?;
            skeleton_embedding = Some(b.embedding);
            last_block = Some(b.last_block);
        }
        if cfg.variant.uses_clinical() {
            let z = input
                .clinical
                .as_ref()
                .ok_or_else(|| Error::Contract("model needs clinical input".into()))?;
            let z = f.tape.constant(z.clone());
            clinical_embedding = Some(encode_clinical(f, z, cfg)?);
        }
        let fused = match (skeleton_embedding, clinical_embedding) {
            (Some(s), Some(c)) => match cfg.fusion {
                FusionMode::Concat => fuse_concat(f, s, c)?,
                FusionMode::CrossAttention => {
                    let (y, a) = fuse_cross_attention(f, s, c)?;
                    alpha = Some(a);
                    y
                }
            },
            (Some(s), None) => s,
            (None, Some(c)) => c,
            (None, None) => unreachable!("every variant uses a stream"),
        };
        let logits = classify(f, fused, cfg)?;
        Ok(ModelOutput {
            logits,
            skeleton_embedding,
            clinical_embedding,
            fused,
            last_block,
            alpha,
        })
    }

    /// Eval-mode logits `N x K` on a fresh tape.
    pub fn logits(&self, input: &ModelInput<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let params = nn::register_params(&mut tape, &self.params);
        let mut f = Forward::new(&mut tape, &params, &self.buffers, false, None);
        let out = self.forward(&mut f, input)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Softmax probabilities and argmax class (0-based) per sample.
    pub fn predict(&self, input: &ModelInput<T>) -> Result<Vec<Prediction>> {
        let logits = self.logits(input)?;
        let (n, _) = logits.dims2()?;
        Ok((0..n)
            .map(|i| {
                let row: Vec<f64> = logits.row(i).iter().map(|v| v.as_f64()).collect();
                Prediction::from_logits(&row)
            })
            .collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    /// 0-based class index.
    pub class: usize,
    pub probs: Vec<f64>,
}

impl Prediction {
    pub fn from_logits(logits: &[f64]) -> Self {
        let probs = softmax(logits);
        Prediction {
            class: argmax(&probs),
            probs,
        }
    }
}

pub fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Index of the largest value; the lowest index wins ties.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Two-layer MLP from standardized features to the embedding dimension.
pub fn encode_clinical<T: Scalar>(f: &mut Forward<T>, z: Var, cfg: &ModelConfig) -> Result<Var> {
    let (_, d) = f.tape.value(z).dims2()?;
    contract!(d == cfg.num_features(), "clinical encoder expects {} features, got {d}", cfg.num_features());
    let h = f.linear(z, "clinical.fc1")?;
    let h = f.tape.relu(h);
    let h = f.dropout(h, cfg.clinical_dropout)?;
    f.linear(h, "clinical.fc2")
}

pub fn fuse_concat<T: Scalar>(f: &mut Forward<T>, fs: Var, fc: Var) -> Result<Var> {
    contract!(
        f.tape.value(fs).shape() == f.tape.value(fc).shape(),
        "fusion needs equal embedding shapes, got {:?} and {:?}",
        f.tape.value(fs).shape(),
        f.tape.value(fc).shape()
    );
    f.tape.concat(fs, fc)
}

/// `alpha = sigmoid(<fs, fc> / sqrt(d))` per sample, then
/// `[LN_a(fs + alpha fc), LN_b(fc + alpha fs)]`. Returns the fused vector
/// and `alpha`.
pub fn fuse_cross_attention<T: Scalar>(f: &mut Forward<T>, fs: Var, fc: Var) -> Result<(Var, Var)> {
    let (_, d) = f.tape.value(fs).dims2()?;
    contract!(
        f.tape.value(fs).shape() == f.tape.value(fc).shape(),
        "fusion needs equal embedding shapes"
    );
    let dot = f.tape.row_dot(fs, fc)?;
    let scaled = f.tape.scale(dot, 1.0 / (d as f64).sqrt());
    let alpha = f.tape.sigmoid(scaled);
    let a_fc = f.tape.scale_rows(fc, alpha)?;
    let a_fs = f.tape.scale_rows(fs, alpha)?;
    let left = f.tape.add(fs, a_fc)?;
    let right = f.tape.add(fc, a_fs)?;
    let left = f.layer_norm(left, "fusion.ln_a")?;
    let right = f.layer_norm(right, "fusion.ln_b")?;
    Ok((f.tape.concat(left, right)?, alpha))
}

/// Affine, dropout, affine.
pub fn classify<T: Scalar>(f: &mut Forward<T>, fused: Var, cfg: &ModelConfig) -> Result<Var> {
    let (_, d) = f.tape.value(fused).dims2()?;
    contract!(d == cfg.head_in(), "head expects {} inputs, got {d}", cfg.head_in());
    let mut h = f.linear(fused, "head.fc1")?;
    if cfg.head_relu {
        h = f.tape.relu(h);
    }
    let h = f.dropout(h, cfg.head_dropout)?;
    f.linear(h, "head.fc2")
}

//! Toy distance-estimation network: per-camera strided-conv tokenizers with
//! 2D sinusoidal position embeddings, a joint-angle token, a transformer
//! encoder, a query-based decoder, per-head distance MLPs and a shared
//! confidence projection — with hand-rolled reverse-mode differentiation so
//! training needs no external framework.
//!
//! The single-head ablation is the same network with one query; the plain
//! ablation replaces the encoder/decoder with mean-pooled tokenizer features
//! fed through an MLP. Blocks use pre-norm residuals with a final
//! normalization after the encoder and decoder stacks; the usual batch
//! normalization + L2 pairing is realized as per-token layer norm plus
//! decoupled weight decay in the optimizer.

mod checkpoint;
mod layers;
mod net;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use net::{backward, embed_angles, forward, forward_with_cache, tokenize_image, ForwardPass};
pub use train::{close_range_error, train, EpochStats, TrainConfig};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_chacha::ChaCha12Rng;

use layers::{
    AttentionParams, ConvParams, LayerNormParams, LinearParams, CONV_STRIDE,
};

/// Which trunk connects the tokenizers to the output heads.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    /// Encoder memory decoded by learnable queries.
    Transformer,
    /// Mean-pooled tokens through an MLP; no attention anywhere.
    PlainMlp,
}

/// The three trained variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Mph,
    Sph,
    Plain,
}

impl Variant {
    pub fn name(&self) -> &'static str {
        match self {
            Variant::Mph => "mph",
            Variant::Sph => "sph",
            Variant::Plain => "plain",
        }
    }

    pub fn parse(s: &str) -> Option<Variant> {
        match s {
            "mph" => Some(Variant::Mph),
            "sph" => Some(Variant::Sph),
            "plain" => Some(Variant::Plain),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    /// Square input image size; must be divisible by 2^(conv layers).
    pub image_size: u32,
    /// Output channels of the stride-2 conv stack (input is 1 channel).
    pub conv_channels: Vec<usize>,
    pub embed_dim: usize,
    pub attn_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ff_dim: usize,
    /// Perception-head count = decoder query count.
    pub n_heads: usize,
    /// Hidden width of the two-hidden-layer per-head MLPs.
    pub head_hidden: usize,
    pub arch: Arch,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            conv_channels: vec![8, 16, 32, 64],
            embed_dim: 64,
            attn_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ff_dim: 128,
            n_heads: 4,
            head_hidden: 64,
            arch: Arch::Transformer,
        }
    }
}

#[derive(Debug)]
pub enum ModelError {
    InvalidConfig(String),
    ShapeMismatch { expected: String, got: String },
    NonFinite { stage: String },
    Diverged { epoch: usize },
    Io(std::io::Error),
    Format(String),
}

impl std::fmt::Display for ModelError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::InvalidConfig(msg) => write!(f, "invalid model config: {msg}"),
            Self::ShapeMismatch { expected, got } => {
                write!(f, "shape mismatch: expected {expected}, got {got}")
            }
            Self::NonFinite { stage } => write!(f, "non-finite activations at {stage}"),
            Self::Diverged { epoch } => write!(f, "training diverged at epoch {epoch}"),
            Self::Io(e) => write!(f, "io error: {e}"),
            Self::Format(msg) => write!(f, "checkpoint format error: {msg}"),
        }
    }
}

impl std::error::Error for ModelError {}

impl From<std::io::Error> for ModelError {
    fn from(e: std::io::Error) -> Self {
        Self::Io(e)
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.embed_dim % self.attn_heads != 0 {
            return Err(ModelError::InvalidConfig(
                "embed_dim must be divisible by attn_heads".into(),
            ));
        }
        if self.embed_dim % 4 != 0 {
            return Err(ModelError::InvalidConfig(
                "embed_dim must be divisible by 4 for 2D sinusoidal embeddings".into(),
            ));
        }
        if self.conv_channels.is_empty() {
            return Err(ModelError::InvalidConfig("need at least one conv".into()));
        }
        let down = CONV_STRIDE.pow(self.conv_channels.len() as u32) as u32;
        if self.image_size % down != 0 || self.image_size / down == 0 {
            return Err(ModelError::InvalidConfig(format!(
                "image size {} not divisible by conv downsampling {down}",
                self.image_size
            )));
        }
        if self.n_heads == 0 {
            return Err(ModelError::InvalidConfig("need at least one head".into()));
        }
        Ok(())
    }

    /// Side length of the token grid produced by the conv stack.
    pub fn token_grid(&self) -> usize {
        self.image_size as usize / CONV_STRIDE.pow(self.conv_channels.len() as u32)
    }

    pub fn tokens_per_image(&self) -> usize {
        self.token_grid() * self.token_grid()
    }

    /// Derives the variant-specific config from a shared base: the
    /// single-head ablation only drops to one query, the plain ablation
    /// additionally removes the transformer trunk.
    pub fn for_variant(&self, variant: Variant) -> ModelConfig {
        let mut cfg = self.clone();
        match variant {
            Variant::Mph => {}
            Variant::Sph => cfg.n_heads = 1,
            Variant::Plain => {
                cfg.n_heads = 1;
                cfg.arch = Arch::PlainMlp;
            }
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerParams {
    pub convs: Vec<ConvParams>,
    /// Per-position normalization after each conv; without it the sparse
    /// image features vanish relative to the position embeddings.
    pub norms: Vec<LayerNormParams>,
    pub proj: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayerParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayerParams {
    pub ln1: LayerNormParams,
    pub self_attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub cross_attn: AttentionParams,
    pub ln3: LayerNormParams,
    pub ff1: LinearParams,
    pub ff2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerParams {
    pub encoder: Vec<EncoderLayerParams>,
    pub encoder_norm: LayerNormParams,
    pub decoder: Vec<DecoderLayerParams>,
    pub decoder_norm: LayerNormParams,
    /// (n_heads, d) learnable query vectors.
    pub queries: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlainMlpParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrunkParams {
    Transformer(TransformerParams),
    Plain(PlainMlpParams),
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadMlpParams {
    pub lin1: LinearParams,
    pub lin2: LinearParams,
    pub lin3: LinearParams,
}

/// All learnable tensors. Structure depends only on the config, so two
/// instances built from the same config can be walked in lockstep.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkParams {
    pub head_tokenizer: TokenizerParams,
    pub torso_tokenizer: TokenizerParams,
    /// Linear (2 → d) on [yaw, pitch].
    pub angle_proj: LinearParams,
    /// Learnable positional embedding added to the angle token.
    pub angle_pos: Array1<f64>,
    pub trunk: TrunkParams,
    pub heads: Vec<HeadMlpParams>,
    /// Shared (d → 1) confidence projection applied to every head feature.
    pub confidence: LinearParams,
}

fn init_tokenizer(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> TokenizerParams {
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut c_in = 1;
    for &c_out in &cfg.conv_channels {
        convs.push(ConvParams::init(c_out, c_in, rng));
        norms.push(LayerNormParams::init(c_out));
        c_in = c_out;
    }
    TokenizerParams {
        convs,
        norms,
        proj: LinearParams::init(cfg.embed_dim, c_in, rng),
    }
}

fn zeros_tokenizer(cfg: &ModelConfig) -> TokenizerParams {
    let mut convs = Vec::new();
    let mut norms = Vec::new();
    let mut c_in = 1;
    for &c_out in &cfg.conv_channels {
        convs.push(ConvParams::zeros(c_out, c_in));
        norms.push(LayerNormParams::zeros(c_out));
        c_in = c_out;
    }
    TokenizerParams {
        convs,
        norms,
        proj: LinearParams::zeros(cfg.embed_dim, c_in),
    }
}

impl NetworkParams {
    pub fn init(cfg: &ModelConfig, rng: &mut ChaCha12Rng) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let trunk = match cfg.arch {
            Arch::Transformer => TrunkParams::Transformer(TransformerParams {
                encoder: (0..cfg.encoder_layers)
                    .map(|_| EncoderLayerParams {
                        ln1: LayerNormParams::init(d),
                        attn: AttentionParams::init(d, rng),
                        ln2: LayerNormParams::init(d),
                        ff1: LinearParams::init(cfg.ff_dim, d, rng),
                        ff2: LinearParams::init(d, cfg.ff_dim, rng),
                    })
                    .collect(),
                encoder_norm: LayerNormParams::init(d),
                decoder: (0..cfg.decoder_layers)
                    .map(|_| DecoderLayerParams {
                        ln1: LayerNormParams::init(d),
                        self_attn: AttentionParams::init(d, rng),
                        ln2: LayerNormParams::init(d),
                        cross_attn: AttentionParams::init(d, rng),
                        ln3: LayerNormParams::init(d),
                        ff1: LinearParams::init(cfg.ff_dim, d, rng),
                        ff2: LinearParams::init(d, cfg.ff_dim, rng),
                    })
                    .collect(),
                decoder_norm: LayerNormParams::init(d),
                queries: {
                    let s = (1.0 / d as f64).sqrt();
                    Array2::from_shape_fn((cfg.n_heads, d), |_| rng.random_range(-s..s))
                },
            }),
            Arch::PlainMlp => TrunkParams::Plain(PlainMlpParams {
                lin1: LinearParams::init(cfg.ff_dim, (2 * cfg.tokens_per_image() + 1) * d, rng),
                lin2: LinearParams::init(d, cfg.ff_dim, rng),
            }),
        };
        Ok(Self {
            head_tokenizer: init_tokenizer(cfg, rng),
            torso_tokenizer: init_tokenizer(cfg, rng),
            angle_proj: LinearParams::init(d, 2, rng),
            angle_pos: {
                let s = (1.0 / d as f64).sqrt();
                Array1::from_shape_fn(d, |_| rng.random_range(-s..s))
            },
            trunk,
            heads: (0..cfg.n_heads)
                .map(|_| HeadMlpParams {
                    lin1: LinearParams::init(cfg.head_hidden, d, rng),
                    lin2: LinearParams::init(cfg.head_hidden, cfg.head_hidden, rng),
                    lin3: LinearParams::init(3, cfg.head_hidden, rng),
                })
                .collect(),
            confidence: LinearParams::init(1, d, rng),
        })
    }

    /// Same structure as `init` with every tensor zeroed: gradient and
    /// optimizer-moment buffers.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let d = cfg.embed_dim;
        let trunk = match cfg.arch {
            Arch::Transformer => TrunkParams::Transformer(TransformerParams {
                encoder: (0..cfg.encoder_layers)
                    .map(|_| EncoderLayerParams {
                        ln1: LayerNormParams::zeros(d),
                        attn: AttentionParams::zeros(d),
                        ln2: LayerNormParams::zeros(d),
                        ff1: LinearParams::zeros(cfg.ff_dim, d),
                        ff2: LinearParams::zeros(d, cfg.ff_dim),
                    })
                    .collect(),
                encoder_norm: LayerNormParams::zeros(d),
                decoder: (0..cfg.decoder_layers)
                    .map(|_| DecoderLayerParams {
                        ln1: LayerNormParams::zeros(d),
                        self_attn: AttentionParams::zeros(d),
                        ln2: LayerNormParams::zeros(d),
                        cross_attn: AttentionParams::zeros(d),
                        ln3: LayerNormParams::zeros(d),
                        ff1: LinearParams::zeros(cfg.ff_dim, d),
                        ff2: LinearParams::zeros(d, cfg.ff_dim),
                    })
                    .collect(),
                decoder_norm: LayerNormParams::zeros(d),
                queries: Array2::zeros((cfg.n_heads, d)),
            }),
            Arch::PlainMlp => TrunkParams::Plain(PlainMlpParams {
                lin1: LinearParams::zeros(cfg.ff_dim, (2 * cfg.tokens_per_image() + 1) * d),
                lin2: LinearParams::zeros(d, cfg.ff_dim),
            }),
        };
        Ok(Self {
            head_tokenizer: zeros_tokenizer(cfg),
            torso_tokenizer: zeros_tokenizer(cfg),
            angle_proj: LinearParams::zeros(d, 2),
            angle_pos: Array1::zeros(d),
            trunk,
            heads: (0..cfg.n_heads)
                .map(|_| HeadMlpParams {
                    lin1: LinearParams::zeros(cfg.head_hidden, d),
                    lin2: LinearParams::zeros(cfg.head_hidden, cfg.head_hidden),
                    lin3: LinearParams::zeros(3, cfg.head_hidden),
                })
                .collect(),
            confidence: LinearParams::zeros(1, d),
        })
    }

    /// Ordered (name, shape, data) views over every tensor. The order is
    /// stable and identical for any two instances built from one config.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[f64])> {
        let mut out: Vec<(String, Vec<usize>, &[f64])> = Vec::new();
        let mat = |m: &Array2<f64>| (vec![m.nrows(), m.ncols()],);
        fn push_lin<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: &str,
            p: &'a LinearParams,
        ) {
            out.push((
                format!("{name}.weight"),
                p.weight.shape().to_vec(),
                p.weight.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                vec![p.bias.len()],
                p.bias.as_slice().expect("standard layout"),
            ));
        }
        fn push_ln<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: &str,
            p: &'a LayerNormParams,
        ) {
            out.push((
                format!("{name}.gamma"),
                vec![p.gamma.len()],
                p.gamma.as_slice().expect("standard layout"),
            ));
            out.push((
                format!("{name}.beta"),
                vec![p.beta.len()],
                p.beta.as_slice().expect("standard layout"),
            ));
        }
        fn push_attn<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: &str,
            p: &'a AttentionParams,
        ) {
            push_lin(out, &format!("{name}.wq"), &p.wq);
            push_lin(out, &format!("{name}.wk"), &p.wk);
            push_lin(out, &format!("{name}.wv"), &p.wv);
            push_lin(out, &format!("{name}.wo"), &p.wo);
        }
        fn push_tok<'a>(
            out: &mut Vec<(String, Vec<usize>, &'a [f64])>,
            name: &str,
            p: &'a TokenizerParams,
        ) {
            for (i, (conv, norm)) in p.convs.iter().zip(&p.norms).enumerate() {
                out.push((
                    format!("{name}.conv{i}.weight"),
                    conv.weight.shape().to_vec(),
                    conv.weight.as_slice().expect("standard layout"),
                ));
                out.push((
                    format!("{name}.conv{i}.bias"),
                    vec![conv.bias.len()],
                    conv.bias.as_slice().expect("standard layout"),
                ));
                push_ln(out, &format!("{name}.conv{i}.norm"), norm);
            }
            push_lin(out, &format!("{name}.proj"), &p.proj);
        }

        push_tok(&mut out, "head_tokenizer", &self.head_tokenizer);
        push_tok(&mut out, "torso_tokenizer", &self.torso_tokenizer);
        push_lin(&mut out, "angle_proj", &self.angle_proj);
        out.push((
            "angle_pos".into(),
            vec![self.angle_pos.len()],
            self.angle_pos.as_slice().expect("standard layout"),
        ));
        match &self.trunk {
            TrunkParams::Transformer(t) => {
                for (i, layer) in t.encoder.iter().enumerate() {
                    let n = format!("encoder{i}");
                    push_ln(&mut out, &format!("{n}.ln1"), &layer.ln1);
                    push_attn(&mut out, &format!("{n}.attn"), &layer.attn);
                    push_ln(&mut out, &format!("{n}.ln2"), &layer.ln2);
                    push_lin(&mut out, &format!("{n}.ff1"), &layer.ff1);
                    push_lin(&mut out, &format!("{n}.ff2"), &layer.ff2);
                }
                push_ln(&mut out, "encoder_norm", &t.encoder_norm);
                for (i, layer) in t.decoder.iter().enumerate() {
                    let n = format!("decoder{i}");
                    push_ln(&mut out, &format!("{n}.ln1"), &layer.ln1);
                    push_attn(&mut out, &format!("{n}.self_attn"), &layer.self_attn);
                    push_ln(&mut out, &format!("{n}.ln2"), &layer.ln2);
                    push_attn(&mut out, &format!("{n}.cross_attn"), &layer.cross_attn);
                    push_ln(&mut out, &format!("{n}.ln3"), &layer.ln3);
                    push_lin(&mut out, &format!("{n}.ff1"), &layer.ff1);
                    push_lin(&mut out, &format!("{n}.ff2"), &layer.ff2);
                }
                push_ln(&mut out, "decoder_norm", &t.decoder_norm);
                let (shape,) = mat(&t.queries);
                out.push((
                    "queries".into(),
                    shape,
                    t.queries.as_slice().expect("standard layout"),
                ));
            }
            TrunkParams::Plain(p) => {
                push_lin(&mut out, "plain.lin1", &p.lin1);
                push_lin(&mut out, "plain.lin2", &p.lin2);
            }
        }
        for (i, head) in self.heads.iter().enumerate() {
            push_lin(&mut out, &format!("head{i}.lin1"), &head.lin1);
            push_lin(&mut out, &format!("head{i}.lin2"), &head.lin2);
            push_lin(&mut out, &format!("head{i}.lin3"), &head.lin3);
        }
        push_lin(&mut out, "confidence", &self.confidence);
        out
    }

    /// Mutable counterpart of [`tensors`](Self::tensors), same order.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        fn push_lin<'a>(out: &mut Vec<(String, &'a mut [f64])>, name: &str, p: &'a mut LinearParams) {
            out.push((
                format!("{name}.weight"),
                p.weight.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.bias"),
                p.bias.as_slice_mut().expect("standard layout"),
            ));
        }
        fn push_ln<'a>(
            out: &mut Vec<(String, &'a mut [f64])>,
            name: &str,
            p: &'a mut LayerNormParams,
        ) {
            out.push((
                format!("{name}.gamma"),
                p.gamma.as_slice_mut().expect("standard layout"),
            ));
            out.push((
                format!("{name}.beta"),
                p.beta.as_slice_mut().expect("standard layout"),
            ));
        }
        fn push_attn<'a>(
            out: &mut Vec<(String, &'a mut [f64])>,
            name: &str,
            p: &'a mut AttentionParams,
        ) {
            push_lin(out, &format!("{name}.wq"), &mut p.wq);
            push_lin(out, &format!("{name}.wk"), &mut p.wk);
            push_lin(out, &format!("{name}.wv"), &mut p.wv);
            push_lin(out, &format!("{name}.wo"), &mut p.wo);
        }
        fn push_tok<'a>(
            out: &mut Vec<(String, &'a mut [f64])>,
            name: &str,
            p: &'a mut TokenizerParams,
        ) {
            for (i, (conv, norm)) in p.convs.iter_mut().zip(p.norms.iter_mut()).enumerate() {
                out.push((
                    format!("{name}.conv{i}.weight"),
                    conv.weight.as_slice_mut().expect("standard layout"),
                ));
                out.push((
                    format!("{name}.conv{i}.bias"),
                    conv.bias.as_slice_mut().expect("standard layout"),
                ));
                push_ln(out, &format!("{name}.conv{i}.norm"), norm);
            }
            push_lin(out, &format!("{name}.proj"), &mut p.proj);
        }

        push_tok(&mut out, "head_tokenizer", &mut self.head_tokenizer);
        push_tok(&mut out, "torso_tokenizer", &mut self.torso_tokenizer);
        push_lin(&mut out, "angle_proj", &mut self.angle_proj);
        out.push((
            "angle_pos".into(),
            self.angle_pos.as_slice_mut().expect("standard layout"),
        ));
        match &mut self.trunk {
            TrunkParams::Transformer(t) => {
                for (i, layer) in t.encoder.iter_mut().enumerate() {
                    let n = format!("encoder{i}");
                    push_ln(&mut out, &format!("{n}.ln1"), &mut layer.ln1);
                    push_attn(&mut out, &format!("{n}.attn"), &mut layer.attn);
                    push_ln(&mut out, &format!("{n}.ln2"), &mut layer.ln2);
                    push_lin(&mut out, &format!("{n}.ff1"), &mut layer.ff1);
                    push_lin(&mut out, &format!("{n}.ff2"), &mut layer.ff2);
                }
                push_ln(&mut out, "encoder_norm", &mut t.encoder_norm);
                for (i, layer) in t.decoder.iter_mut().enumerate() {
                    let n = format!("decoder{i}");
                    push_ln(&mut out, &format!("{n}.ln1"), &mut layer.ln1);
                    push_attn(&mut out, &format!("{n}.self_attn"), &mut layer.self_attn);
                    push_ln(&mut out, &format!("{n}.ln2"), &mut layer.ln2);
                    push_attn(&mut out, &format!("{n}.cross_attn"), &mut layer.cross_attn);
                    push_ln(&mut out, &format!("{n}.ln3"), &mut layer.ln3);
                    push_lin(&mut out, &format!("{n}.ff1"), &mut layer.ff1);
                    push_lin(&mut out, &format!("{n}.ff2"), &mut layer.ff2);
                }
                push_ln(&mut out, "decoder_norm", &mut t.decoder_norm);
                out.push((
                    "queries".into(),
                    t.queries.as_slice_mut().expect("standard layout"),
                ));
            }
            TrunkParams::Plain(p) => {
                push_lin(&mut out, "plain.lin1", &mut p.lin1);
                push_lin(&mut out, "plain.lin2", &mut p.lin2);
            }
        }
        for (i, head) in self.heads.iter_mut().enumerate() {
            push_lin(&mut out, &format!("head{i}.lin1"), &mut head.lin1);
            push_lin(&mut out, &format!("head{i}.lin2"), &mut head.lin2);
            push_lin(&mut out, &format!("head{i}.lin3"), &mut head.lin3);
        }
        push_lin(&mut out, "confidence", &mut self.confidence);
        out
    }

    /// Total number of scalar parameters.
    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Elementwise `self += other * scale`; structures must match.
    pub fn add_scaled(&mut self, other: &NetworkParams, scale: f64) {
        let theirs = other.tensors();
        for ((_, mine), (_, _, theirs)) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, b) in mine.iter_mut().zip(theirs) {
                *a += b * scale;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (_, t) in self.tensors_mut() {
            for v in t {
                *v *= factor;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut cfg = ModelConfig::default();
        cfg.embed_dim = 63;
        assert!(cfg.validate().is_err());
        let mut cfg = ModelConfig::default();
        cfg.image_size = 60;
        assert!(cfg.validate().is_err());
        assert!(ModelConfig::default().validate().is_ok());
    }

    #[test]
    fn token_grid_shape_arithmetic() {
        let cfg = ModelConfig::default();
        assert_eq!(cfg.token_grid(), 4);
        assert_eq!(cfg.tokens_per_image(), 16);
        let three_convs = ModelConfig {
            conv_channels: vec![8, 16, 32],
            ..ModelConfig::default()
        };
        assert_eq!(three_convs.token_grid(), 8);
        assert_eq!(three_convs.tokens_per_image(), 64);
    }

    #[test]
    fn tensor_walks_agree_and_are_stable() {
        let cfg = ModelConfig {
            image_size: 16,
            conv_channels: vec![4, 8],
            embed_dim: 16,
            attn_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 32,
            n_heads: 4,
            head_hidden: 16,
            arch: Arch::Transformer,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut params = NetworkParams::init(&cfg, &mut rng).unwrap();
        let names: Vec<String> = params.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        let names_mut: Vec<String> = params.tensors_mut().iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(names, names_mut);
        let zeros = NetworkParams::zeros(&cfg).unwrap();
        let zero_names: Vec<String> = zeros.tensors().iter().map(|(n, _, _)| n.clone()).collect();
        assert_eq!(names, zero_names);
        for ((_, sa, da), (_, sb, db)) in params.tensors().iter().zip(zeros.tensors().iter()) {
            assert_eq!(sa, sb);
            assert_eq!(da.len(), db.len());
        }
    }

    #[test]
    fn add_scaled_accumulates() {
        let cfg = ModelConfig {
            image_size: 16,
            conv_channels: vec![4],
            embed_dim: 8,
            attn_heads: 2,
            encoder_layers: 1,
            decoder_layers: 1,
            ff_dim: 16,
            n_heads: 2,
            head_hidden: 8,
            arch: Arch::Transformer,
        };
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let a = NetworkParams::init(&cfg, &mut rng).unwrap();
        let mut acc = NetworkParams::zeros(&cfg).unwrap();
        acc.add_scaled(&a, 2.0);
        acc.add_scaled(&a, -1.0);
        for ((_, _, x), (_, _, y)) in acc.tensors().iter().zip(a.tensors().iter()) {
            for (va, vb) in x.iter().zip(y.iter()) {
                assert!((va - vb).abs() < 1e-15);
            }
        }
    }
}

//! Tiny decoder-only transformer: RoPE attention, RMS norm, GELU MLP.
//!
//! Parameters live in one flat vector described by a [`ParamLayout`], which
//! keeps optimizer updates, checkpoints and finite-difference checks simple.

mod backprop;
mod checkpoint;
mod train;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::layout::Token;
use crate::numerics::RotaryParams;

pub use backprop::{backprop, forward_logits, grad_check, loss_forward, Example, GradCheck, ParamSubset, Scalar};
pub(crate) use backprop::gelu;
pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, LrSchedule, Optimizer, TrainConfig, TrainOutcome};

/// Beginning-of-sequence token.
pub const BOS: Token = 256;
/// End-of-sequence token.
pub const EOS: Token = 257;
/// Byte vocabulary plus the two specials.
pub const VOCAB: usize = 258;

/// Byte-level tokenization.
pub fn encode_text(s: &str) -> Vec<Token> {
    s.bytes().map(Token::from).collect()
}

/// Inverse of [`encode_text`]; specials are dropped.
pub fn decode_tokens(tokens: &[Token]) -> String {
    let bytes: Vec<u8> = tokens.iter().filter(|&&t| t < 256).map(|&t| t as u8).collect();
    String::from_utf8_lossy(&bytes).into_owned()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    pub layers: usize,
    pub heads: usize,
    pub model_dim: usize,
    pub mlp_dim: usize,
    pub rope_base: f32,
    pub norm_eps: f32,
    /// Longest position the model is expected to handle.
    pub max_seq_len: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self::reference()
    }
}

impl ModelConfig {
    /// Configuration trained for the recall experiments.
    pub fn reference() -> Self {
        Self {
            vocab: VOCAB,
            layers: 2,
            heads: 4,
            model_dim: 128,
            mlp_dim: 512,
            rope_base: 10000.0,
            norm_eps: 1e-5,
            max_seq_len: 512,
            seed: 0,
        }
    }

    /// Configuration used for gradient checking.
    pub fn small() -> Self {
        Self { layers: 1, heads: 1, model_dim: 8, mlp_dim: 16, max_seq_len: 64, ..Self::reference() }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.heads
    }

    pub fn rotary(&self) -> RotaryParams {
        RotaryParams { head_dim: self.head_dim(), base: self.rope_base }
    }

    pub fn validate(&self) -> Result<()> {
        let counts = [self.vocab, self.layers, self.heads, self.model_dim, self.mlp_dim, self.max_seq_len];
        if counts.contains(&0) {
            return Err(Error::Config("model sizes must all be at least 1".into()));
        }
        if self.model_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} is not divisible by {} heads",
                self.model_dim, self.heads
            )));
        }
        if !(self.norm_eps > 0.0) {
            return Err(Error::Config("norm_eps must be positive".into()));
        }
        self.rotary().validate()
    }
}

/// Named parameter tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ParamKind {
    TokenEmbedding,
    AttnNorm(usize),
    Query(usize),
    Key(usize),
    Value(usize),
    AttnOut(usize),
    MlpNorm(usize),
    MlpIn(usize),
    MlpOut(usize),
    FinalNorm,
    Unembedding,
}

impl ParamKind {
    pub fn is_norm_gain(self) -> bool {
        matches!(self, ParamKind::AttnNorm(_) | ParamKind::MlpNorm(_) | ParamKind::FinalNorm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamEntry {
    pub kind: ParamKind,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Offsets of every tensor in the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamLayout {
    pub entries: Vec<ParamEntry>,
    pub total: usize,
}

impl ParamLayout {
    pub fn new(cfg: &ModelConfig) -> Self {
        let (d, m, v) = (cfg.model_dim, cfg.mlp_dim, cfg.vocab);
        let mut shapes = vec![(ParamKind::TokenEmbedding, v, d)];
        for l in 0..cfg.layers {
            shapes.extend([
                (ParamKind::AttnNorm(l), 1, d),
                (ParamKind::Query(l), d, d),
                (ParamKind::Key(l), d, d),
                (ParamKind::Value(l), d, d),
                (ParamKind::AttnOut(l), d, d),
                (ParamKind::MlpNorm(l), 1, d),
                (ParamKind::MlpIn(l), d, m),
                (ParamKind::MlpOut(l), m, d),
            ]);
        }
        shapes.extend([(ParamKind::FinalNorm, 1, d), (ParamKind::Unembedding, d, v)]);
        let mut offset = 0;
        let entries = shapes
            .into_iter()
            .map(|(kind, rows, cols)| {
                let e = ParamEntry { kind, offset, rows, cols };
                offset += rows * cols;
                e
            })
            .collect();
        Self { entries, total: offset }
    }

    pub fn entry(&self, kind: ParamKind) -> &ParamEntry {
        self.entries.iter().find(|e| e.kind == kind).expect("parameter kind belongs to this layout")
    }
}

/// Model weights over a scalar type (`f32` for inference and training, `f64`
/// for gradient checks).
#[derive(Debug, Clone, PartialEq)]
pub struct Transformer<T = f32> {
    cfg: ModelConfig,
    layout: ParamLayout,
    params: Vec<T>,
}

/// Single-precision model.
pub type Model = Transformer<f32>;

impl<T: Copy> Transformer<T> {
    pub fn from_params(cfg: ModelConfig, params: Vec<T>) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        if params.len() != layout.total {
            return Err(Error::Dimension(format!(
                "{} parameters supplied, configuration needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self { cfg, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn layout(&self) -> &ParamLayout {
        &self.layout
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [T] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, kind: ParamKind) -> &[T] {
        &self.params[self.layout.entry(kind).range()]
    }

    pub fn map<U: Copy>(&self, f: impl Fn(T) -> U) -> Transformer<U> {
        Transformer { cfg: self.cfg, layout: self.layout.clone(), params: self.params.iter().map(|&x| f(x)).collect() }
    }
}

impl Model {
    /// Seeded initialization: normal(0, 0.02) weights, unit norm gains.
    pub fn init(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = ParamLayout::new(&cfg);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut params = vec![0.0f32; layout.total];
        for e in &layout.entries {
            let slice = &mut params[e.range()];
            if e.kind.is_norm_gain() {
                slice.fill(1.0);
            } else {
                slice.iter_mut().for_each(|w| *w = normal.sample(&mut rng));
            }
        }
        Ok(Self { cfg, layout, params })
    }

    /// SHA-256 of the serialized checkpoint body, hex encoded.
    pub fn digest(&self) -> String {
        let body = checkpoint::encode_body(self);
        hex_digest(&Sha256::digest(&body))
    }

    pub fn to_f64(&self) -> Transformer<f64> {
        self.map(|x| x as f64)
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

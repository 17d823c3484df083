//! The transformer block zoo: every normalization placement, the SwiGLU
//! feed-forward, first-block variants, model stacking, initialization
//! schemes, and reverse-mode gradients through the whole stack.
//!
//! Parameters live in a flat slot list whose order is a deterministic
//! function of the config ([`ParamLayout`]); gradients, optimizer state, and
//! checkpoints all use that order.

use crate::attention::AttnNormScheme;
use crate::autograd::{Tape, Var};
use crate::tensor::Matrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("config field `{field}`: {msg}")]
    InvalidConfig { field: &'static str, msg: String },
    #[error("token id {id} out of range for vocab {vocab}")]
    TokenOutOfRange { id: usize, vocab: usize },
    #[error("checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Placement of normalization layers within a block. Each value is one
/// two-equation composition; `Variant*` values carry the attention-internal
/// normalization subset.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum BlockScheme {
    /// Y = Norm(MHA(X) + X); X' = Norm(FFN(Y) + Y).
    PostNorm,
    /// Y = MHA(Norm(X)) + X; X' = FFN(Norm(Y)) + Y.
    PreNorm,
    /// Pre-Norm block with QK-Norm inside attention.
    PreQk,
    /// Y = MHA_QKV(X) + X; X' = FFN(Norm(Y)) + Norm(Y).
    HybridNorm,
    /// Post-Norm for layers below ⌊split·L⌋, Pre-Norm above.
    MixLn,
    /// Y = MHA(Norm(X)) + X; X' = FFN(Norm(Y)) + Norm(Y).
    PrePost,
    /// Y = MHA(Norm(X)) + Norm(X); X' = FFN(Norm(Y)) + Y.
    PostPre,
    /// Y = Norm(MHA(X)) + X; X' = Norm(FFN(Y)) + Y.
    OutputNorm,
    /// Y = MHA_#(X) + X; X' = FFN(Norm(Y)) + Norm(Y).
    VariantPost(AttnNormScheme),
    /// Y = MHA_#(X) + X; X' = FFN(Norm(Y)) + Y.
    VariantPre(AttnNormScheme),
    /// Y = MHA_#(Norm(X)) + X; X' = FFN(Norm(Y)) + Norm(Y).
    PreVariantPost(AttnNormScheme),
    /// Y = MHA_#(Norm(X)) + X; X' = FFN(Norm(Y)) + Y.
    PreVariantPre(AttnNormScheme),
}

/// What the first block does differently from the rest.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FirstBlockVariant {
    SameAsRest,
    /// Layer 0 uses Pre-Norm around MHA_QKV and a Pre-Norm FFN.
    HybridStar,
    /// Layer 0 feeds raw embeddings into MHA_QKV, Pre-Norm FFN.
    FirstQkvPre,
    /// A normalization layer directly after the embedding lookup.
    EmbedNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum InitScheme {
    Standard,
    /// Output projections of layer l divided by √(2(l+1)).
    DepthScaled,
    /// Output projections divided by √(2L).
    Megatron,
}

/// Full architectural description of a model instance.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub ffn_dim: usize,
    pub heads: usize,
    pub kv_heads: usize,
    pub vocab: usize,
    pub context: usize,
    pub scheme: BlockScheme,
    pub first_block: FirstBlockVariant,
    pub init: InitScheme,
    /// RoPE base; `None` disables positional encoding.
    pub rope_theta: Option<f64>,
    pub tied_embeddings: bool,
    pub causal: bool,
    pub mix_ln_split: f64,
    /// Extra normalization on the attention output after W_O in every layer.
    pub attn_out_norm: bool,
    pub norm_eps: f64,
}

impl ModelConfig {
    /// A small causal Pre-Norm baseline; tests and commands override fields.
    pub fn toy(layers: usize, d_model: usize, heads: usize, vocab: usize) -> Self {
        Self {
            layers,
            d_model,
            ffn_dim: 4 * d_model,
            heads,
            kv_heads: heads,
            vocab,
            context: 64,
            scheme: BlockScheme::PreNorm,
            first_block: FirstBlockVariant::SameAsRest,
            init: InitScheme::Standard,
            rope_theta: Some(10_000.0),
            tied_embeddings: true,
            causal: true,
            mix_ln_split: 0.25,
            attn_out_norm: false,
            norm_eps: 1e-8,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let err = |field, msg: String| Err(ModelError::InvalidConfig { field, msg });
        if self.layers == 0 {
            return err("layers", "must be at least 1".into());
        }
        if self.d_model == 0 || self.ffn_dim == 0 || self.heads == 0 || self.kv_heads == 0 {
            return err("dims", "all dimension counts must be at least 1".into());
        }
        if self.vocab < 2 {
            return err("vocab", "need at least 2 tokens".into());
        }
        if self.context == 0 {
            return err("context", "must be at least 1".into());
        }
        if self.d_model % self.heads != 0 {
            return err("heads", format!("{} does not divide d_model {}", self.heads, self.d_model));
        }
        if self.heads % self.kv_heads != 0 {
            return err("kv_heads", format!("{} does not divide heads {}", self.kv_heads, self.heads));
        }
        if !(self.mix_ln_split > 0.0 && self.mix_ln_split < 1.0) {
            return err("mix_ln_split", format!("{} not in (0,1)", self.mix_ln_split));
        }
        if let Some(theta) = self.rope_theta {
            if !(theta > 0.0) {
                return err("rope_theta", format!("{theta} must be positive"));
            }
        }
        if !(self.norm_eps >= 0.0) {
            return err("norm_eps", format!("{} must be nonnegative", self.norm_eps));
        }
        if let BlockScheme::VariantPost(nu)
        | BlockScheme::VariantPre(nu)
        | BlockScheme::PreVariantPost(nu)
        | BlockScheme::PreVariantPre(nu) = self.scheme
        {
            if nu == AttnNormScheme::Vanilla {
                return err("scheme", "variant schemes require a non-vanilla norm subset".into());
            }
        }
        Ok(())
    }

    fn shape(&self, l: usize) -> BlockShape {
        if l == 0 {
            match self.first_block {
                FirstBlockVariant::HybridStar => {
                    return BlockShape {
                        nu: AttnNormScheme::Qkv,
                        attn_pre: true,
                        residual: AttnResidual::Raw,
                        ffn: FfnForm::Pre,
                    }
                }
                FirstBlockVariant::FirstQkvPre => {
                    return BlockShape {
                        nu: AttnNormScheme::Qkv,
                        attn_pre: false,
                        residual: AttnResidual::Raw,
                        ffn: FfnForm::Pre,
                    }
                }
                FirstBlockVariant::SameAsRest | FirstBlockVariant::EmbedNorm => {}
            }
        }
        let scheme = match self.scheme {
            BlockScheme::MixLn => {
                if l < (self.mix_ln_split * self.layers as f64).floor() as usize {
                    BlockScheme::PostNorm
                } else {
                    BlockScheme::PreNorm
                }
            }
            s => s,
        };
        match scheme {
            BlockScheme::PostNorm => BlockShape {
                nu: AttnNormScheme::Vanilla,
                attn_pre: false,
                residual: AttnResidual::PostNorm,
                ffn: FfnForm::Post,
            },
            BlockScheme::PreNorm => BlockShape {
                nu: AttnNormScheme::Vanilla,
                attn_pre: true,
                residual: AttnResidual::Raw,
                ffn: FfnForm::Pre,
            },
            BlockScheme::PreQk => BlockShape {
                nu: AttnNormScheme::Qk,
                attn_pre: true,
                residual: AttnResidual::Raw,
                ffn: FfnForm::Pre,
            },
            BlockScheme::HybridNorm => BlockShape {
                nu: AttnNormScheme::Qkv,
                attn_pre: false,
                residual: AttnResidual::Raw,
                ffn: FfnForm::PostBoth,
            },
            BlockScheme::PrePost => BlockShape {
                nu: AttnNormScheme::Vanilla,
                attn_pre: true,
                residual: AttnResidual::Raw,
                ffn: FfnForm::PostBoth,
            },
            BlockScheme::PostPre => BlockShape {
                nu: AttnNormScheme::Vanilla,
                attn_pre: true,
                residual: AttnResidual::NormedResidual,
                ffn: FfnForm::Pre,
            },
            BlockScheme::OutputNorm => BlockShape {
                nu: AttnNormScheme::Vanilla,
                attn_pre: false,
                residual: AttnResidual::OutNorm,
                ffn: FfnForm::OutNorm,
            },
            BlockScheme::VariantPost(nu) => BlockShape {
                nu,
                attn_pre: false,
                residual: AttnResidual::Raw,
                ffn: FfnForm::PostBoth,
            },
            BlockScheme::VariantPre(nu) => BlockShape {
                nu,
                attn_pre: false,
                residual: AttnResidual::Raw,
                ffn: FfnForm::Pre,
            },
            BlockScheme::PreVariantPost(nu) => BlockShape {
                nu,
                attn_pre: true,
                residual: AttnResidual::Raw,
                ffn: FfnForm::PostBoth,
            },
            BlockScheme::PreVariantPre(nu) => BlockShape {
                nu,
                attn_pre: true,
                residual: AttnResidual::Raw,
                ffn: FfnForm::Pre,
            },
            BlockScheme::MixLn => unreachable!("resolved above"),
        }
    }
}

/// How the attention half of a block forms Y from the MHA output and X.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum AttnResidual {
    /// Y = attn + X.
    Raw,
    /// Y = Norm(attn + X).
    PostNorm,
    /// Y = Norm(attn) + X.
    OutNorm,
    /// Y = attn + Norm(X), sharing the input norm.
    NormedResidual,
}

/// How the FFN half forms X' from Y.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FfnForm {
    /// X' = FFN(Norm(Y)) + Y.
    Pre,
    /// X' = Norm(FFN(Y) + Y).
    Post,
    /// X' = FFN(Norm(Y)) + Norm(Y).
    PostBoth,
    /// X' = Norm(FFN(Y)) + Y.
    OutNorm,
}

#[derive(Debug, Clone, Copy)]
struct BlockShape {
    nu: AttnNormScheme,
    attn_pre: bool,
    residual: AttnResidual,
    ffn: FfnForm,
}

impl BlockShape {
    fn needs_block_attn_norm(&self) -> bool {
        self.attn_pre || !matches!(self.residual, AttnResidual::Raw)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    Embedding,
    Linear,
    Gain,
}

/// One named parameter tensor in the flat layout.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ParamSlot {
    pub name: String,
    pub layer: Option<usize>,
    pub kind: ParamKind,
    pub rows: usize,
    pub cols: usize,
    /// True for attention/FFN output projections (the depth-scaled ones).
    pub out_proj: bool,
    /// Initial value for gain slots.
    pub init_gain: f64,
}

/// Per-layer slot indices, resolved once from the config.
#[derive(Debug, Clone, Default)]
pub struct LayerSlots {
    pub w_q: usize,
    pub w_k: usize,
    pub w_v: usize,
    pub w_o: usize,
    pub gate: usize,
    pub up: usize,
    pub down: usize,
    pub attn_norm: Option<usize>,
    pub ffn_norm: usize,
    pub gain_q: Option<usize>,
    pub gain_k: Option<usize>,
    pub gain_v: Option<usize>,
    pub gain_c: Option<usize>,
    pub attn_out_norm: Option<usize>,
}

/// Deterministic tensor order for a config: embedding, optional embed norm,
/// layer 0..L−1 slots, final norm, optional untied head.
#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub embed: usize,
    pub embed_norm: Option<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
    pub head: Option<usize>,
    pub slots: Vec<ParamSlot>,
}

impl ParamLayout {
    pub fn build(cfg: &ModelConfig) -> Self {
        let d = cfg.d_model;
        let d_k = cfg.head_dim();
        let kv_width = cfg.kv_heads * d_k;
        let mut slots = Vec::new();
        let mut push = |name: String, layer, kind, rows, cols, out_proj, init_gain| {
            slots.push(ParamSlot { name, layer, kind, rows, cols, out_proj, init_gain });
            slots.len() - 1
        };

        let embed = push("embed".into(), None, ParamKind::Embedding, cfg.vocab, d, false, 1.0);
        let embed_norm = (cfg.first_block == FirstBlockVariant::EmbedNorm)
            .then(|| push("embed_norm".into(), None, ParamKind::Gain, 1, d, false, 1.0));

        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let shape = cfg.shape(l);
            let nu = shape.nu;
            let name = |part: &str| format!("layer{l}.{part}");
            let w_q = push(name("w_q"), Some(l), ParamKind::Linear, d, d, false, 1.0);
            let w_k = push(name("w_k"), Some(l), ParamKind::Linear, d, kv_width, false, 1.0);
            let w_v = push(name("w_v"), Some(l), ParamKind::Linear, d, kv_width, false, 1.0);
            let w_o = push(name("w_o"), Some(l), ParamKind::Linear, d, d, true, 1.0);
            let gain_q = nu
                .norms_q()
                .then(|| push(name("gain_q"), Some(l), ParamKind::Gain, 1, d, false, 1.0));
            let gain_k = nu
                .norms_k()
                .then(|| push(name("gain_k"), Some(l), ParamKind::Gain, 1, kv_width, false, 1.0));
            let gain_v = nu
                .norms_v()
                .then(|| push(name("gain_v"), Some(l), ParamKind::Gain, 1, kv_width, false, 1.0));
            let gain_c = nu
                .norms_c()
                .then(|| push(name("gain_c"), Some(l), ParamKind::Gain, 1, d, false, 1.0));
            let attn_out_norm = cfg.attn_out_norm.then(|| {
                let g = 1.0 / (2.0 * cfg.layers as f64).sqrt();
                push(name("attn_out_norm"), Some(l), ParamKind::Gain, 1, d, false, g)
            });
            let attn_norm = shape
                .needs_block_attn_norm()
                .then(|| push(name("attn_norm"), Some(l), ParamKind::Gain, 1, d, false, 1.0));
            let ffn_norm = push(name("ffn_norm"), Some(l), ParamKind::Gain, 1, d, false, 1.0);
            let gate = push(name("gate"), Some(l), ParamKind::Linear, d, cfg.ffn_dim, false, 1.0);
            let up = push(name("up"), Some(l), ParamKind::Linear, d, cfg.ffn_dim, false, 1.0);
            let down = push(name("down"), Some(l), ParamKind::Linear, cfg.ffn_dim, d, true, 1.0);
            layers.push(LayerSlots {
                w_q,
                w_k,
                w_v,
                w_o,
                gate,
                up,
                down,
                attn_norm,
                ffn_norm,
                gain_q,
                gain_k,
                gain_v,
                gain_c,
                attn_out_norm,
            });
        }

        let final_norm = push("final_norm".into(), None, ParamKind::Gain, 1, d, false, 1.0);
        let head = (!cfg.tied_embeddings)
            .then(|| push("head".into(), None, ParamKind::Linear, d, cfg.vocab, false, 1.0));

        Self { embed, embed_norm, layers, final_norm, head, slots }
    }

    /// Total gain parameters inside layers (the cost-accounting norm count,
    /// which excludes embedding/final/head-side norms).
    pub fn layer_norm_param_count(&self) -> u128 {
        self.slots
            .iter()
            .filter(|s| s.kind == ParamKind::Gain && s.layer.is_some())
            .map(|s| (s.rows * s.cols) as u128)
            .sum()
    }

    /// Total linear (non-embedding, non-head) parameters inside layers.
    pub fn layer_linear_param_count(&self) -> u128 {
        self.slots
            .iter()
            .filter(|s| s.kind == ParamKind::Linear && s.layer.is_some())
            .map(|s| (s.rows * s.cols) as u128)
            .sum()
    }
}

/// All parameter tensors of one model, in layout order.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub layout: ParamLayout,
    pub values: Vec<Matrix>,
}

impl ModelParams {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let layout = ParamLayout::build(cfg);
        let values = layout.slots.iter().map(|s| Matrix::zeros(s.rows, s.cols)).collect();
        Self { layout, values }
    }

    pub fn slot_index(&self, name: &str) -> usize {
        self.layout
            .slots
            .iter()
            .position(|s| s.name == name)
            .unwrap_or_else(|| panic!("no parameter slot named {name}"))
    }

    pub fn total_parameters(&self) -> u128 {
        self.values.iter().map(|m| (m.rows() * m.cols()) as u128).sum()
    }
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    let dist = Normal::new(0.0, std).expect("positive std");
    loop {
        let z = dist.sample(rng);
        if z.abs() <= 3.0 * std {
            return z;
        }
    }
}

/// Samples all parameters: truncated normal (mean 0, std 1/√(2.5·d),
/// cut at 3 std) for embedding/linear slots in layout order, gains at their
/// configured initial value, and the init scheme's output-projection scaling.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> ModelParams {
    let mut params = ModelParams::zeros(cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let std = 1.0 / (2.5 * cfg.d_model as f64).sqrt();
    for (slot, value) in params.layout.slots.iter().zip(params.values.iter_mut()) {
        match slot.kind {
            ParamKind::Gain => value.data_mut().fill(slot.init_gain),
            ParamKind::Embedding | ParamKind::Linear => {
                for v in value.data_mut() {
                    *v = truncated_normal(&mut rng, std);
                }
                if slot.out_proj {
                    let div = match cfg.init {
                        InitScheme::Standard => 1.0,
                        InitScheme::DepthScaled => {
                            (2.0 * (slot.layer.expect("out_proj is per-layer") + 1) as f64).sqrt()
                        }
                        InitScheme::Megatron => (2.0 * cfg.layers as f64).sqrt(),
                    };
                    if div != 1.0 {
                        *value = value.scaled(1.0 / div);
                    }
                }
            }
        }
    }
    params
}

/// Tape nodes of interest from one full forward build.
pub struct TapeModel {
    pub tape: Tape,
    /// One Var per parameter slot, in layout order.
    pub param_vars: Vec<Var>,
    pub logits: Var,
    /// X^{l+1} for each layer l.
    pub block_outputs: Vec<Var>,
    /// Attention probability matrices per layer, per query head.
    pub attn_probs: Vec<Vec<Var>>,
}

fn mha_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    slots: &LayerSlots,
    vars: &[Var],
    nu: AttnNormScheme,
    x: Var,
    probs: &mut Vec<Var>,
) -> Var {
    let d_k = cfg.head_dim();
    let group = cfg.heads / cfg.kv_heads;
    let eps = cfg.norm_eps;
    let q_all = tape.matmul(x, vars[slots.w_q]);
    let k_all = tape.matmul(x, vars[slots.w_k]);
    let v_all = tape.matmul(x, vars[slots.w_v]);

    let mut k_heads = Vec::with_capacity(cfg.kv_heads);
    let mut v_heads = Vec::with_capacity(cfg.kv_heads);
    for g in 0..cfg.kv_heads {
        let start = g * d_k;
        let mut k_h = tape.slice_cols(k_all, start, d_k);
        if nu.norms_k() {
            let gain = tape.slice_cols(vars[slots.gain_k.expect("gain_k slot")], start, d_k);
            k_h = tape.rms_norm_rows(k_h, gain, eps);
        }
        if let Some(theta) = cfg.rope_theta {
            k_h = tape.rope(k_h, theta);
        }
        let mut v_h = tape.slice_cols(v_all, start, d_k);
        if nu.norms_v() {
            let gain = tape.slice_cols(vars[slots.gain_v.expect("gain_v slot")], start, d_k);
            v_h = tape.rms_norm_rows(v_h, gain, eps);
        }
        k_heads.push(k_h);
        v_heads.push(v_h);
    }

    let scale = 1.0 / (d_k as f64).sqrt();
    let mut ctxs = Vec::with_capacity(cfg.heads);
    for i in 0..cfg.heads {
        let start = i * d_k;
        let mut q_h = tape.slice_cols(q_all, start, d_k);
        if nu.norms_q() {
            let gain = tape.slice_cols(vars[slots.gain_q.expect("gain_q slot")], start, d_k);
            q_h = tape.rms_norm_rows(q_h, gain, eps);
        }
        if let Some(theta) = cfg.rope_theta {
            q_h = tape.rope(q_h, theta);
        }
        let g = i / group;
        let scores = tape.matmul_nt(q_h, k_heads[g]);
        let scaled = tape.scale(scores, scale);
        let a = tape.softmax_rows(scaled, cfg.causal);
        probs.push(a);
        let mut ctx = tape.matmul(a, v_heads[g]);
        if nu.norms_c() {
            let gain = tape.slice_cols(vars[slots.gain_c.expect("gain_c slot")], start, d_k);
            ctx = tape.rms_norm_rows(ctx, gain, eps);
        }
        ctxs.push(ctx);
    }
    let concat = tape.concat_cols(&ctxs);
    let mut out = tape.matmul(concat, vars[slots.w_o]);
    if let Some(slot) = slots.attn_out_norm {
        out = tape.rms_norm_rows(out, vars[slot], eps);
    }
    out
}

fn ffn_on_tape(tape: &mut Tape, slots: &LayerSlots, vars: &[Var], x: Var) -> Var {
    let gate = tape.matmul(x, vars[slots.gate]);
    let up = tape.matmul(x, vars[slots.up]);
    let act = tape.silu(gate);
    let gated = tape.hadamard(act, up);
    tape.matmul(gated, vars[slots.down])
}

fn block_on_tape(
    tape: &mut Tape,
    cfg: &ModelConfig,
    slots: &LayerSlots,
    vars: &[Var],
    l: usize,
    x: Var,
    probs: &mut Vec<Var>,
) -> Var {
    let shape = cfg.shape(l);
    let eps = cfg.norm_eps;
    let block_norm =
        |tape: &mut Tape, slot: Option<usize>, v: Var| -> Var {
            tape.rms_norm_rows(v, vars[slot.expect("block norm slot")], eps)
        };

    let attn_in = if shape.attn_pre { block_norm(tape, slots.attn_norm, x) } else { x };
    let attn_out = mha_on_tape(tape, cfg, slots, vars, shape.nu, attn_in, probs);
    let y = match shape.residual {
        AttnResidual::Raw => tape.add(attn_out, x),
        AttnResidual::NormedResidual => tape.add(attn_out, attn_in),
        AttnResidual::PostNorm => {
            let sum = tape.add(attn_out, x);
            block_norm(tape, slots.attn_norm, sum)
        }
        AttnResidual::OutNorm => {
            let normed = block_norm(tape, slots.attn_norm, attn_out);
            tape.add(normed, x)
        }
    };

    match shape.ffn {
        FfnForm::Pre => {
            let ny = block_norm(tape, Some(slots.ffn_norm), y);
            let f = ffn_on_tape(tape, slots, vars, ny);
            tape.add(f, y)
        }
        FfnForm::PostBoth => {
            let ny = block_norm(tape, Some(slots.ffn_norm), y);
            let f = ffn_on_tape(tape, slots, vars, ny);
            tape.add(f, ny)
        }
        FfnForm::Post => {
            let f = ffn_on_tape(tape, slots, vars, y);
            let sum = tape.add(f, y);
            block_norm(tape, Some(slots.ffn_norm), sum)
        }
        FfnForm::OutNorm => {
            let f = ffn_on_tape(tape, slots, vars, y);
            let nf = block_norm(tape, Some(slots.ffn_norm), f);
            tape.add(nf, y)
        }
    }
}

/// Builds the full forward pass on a fresh tape.
pub fn build_tape(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
) -> Result<TapeModel, ModelError> {
    cfg.validate()?;
    if tokens.len() > cfg.context {
        return Err(ModelError::InvalidConfig {
            field: "context",
            msg: format!("sequence length {} exceeds context {}", tokens.len(), cfg.context),
        });
    }
    for &id in tokens {
        if id >= cfg.vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab });
        }
    }
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.values.iter().map(|m| tape.leaf(m.clone())).collect();
    let layout = &params.layout;

    let mut x = tape.embed(param_vars[layout.embed], tokens);
    if let Some(slot) = layout.embed_norm {
        x = tape.rms_norm_rows(x, param_vars[slot], cfg.norm_eps);
    }
    let mut block_outputs = Vec::with_capacity(cfg.layers);
    let mut attn_probs = Vec::with_capacity(cfg.layers);
    for l in 0..cfg.layers {
        let mut probs = Vec::new();
        x = block_on_tape(&mut tape, cfg, &layout.layers[l], &param_vars, l, x, &mut probs);
        block_outputs.push(x);
        attn_probs.push(probs);
    }
    let final_normed = tape.rms_norm_rows(x, param_vars[layout.final_norm], cfg.norm_eps);
    let logits = match layout.head {
        Some(slot) => tape.matmul(final_normed, param_vars[slot]),
        None => tape.matmul_nt(final_normed, param_vars[layout.embed]),
    };
    Ok(TapeModel { tape, param_vars, logits, block_outputs, attn_probs })
}

/// One block applied to an explicit s×d input (layer-local view used by the
/// conformance tests and layer-wise experiments).
pub fn block_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    l: usize,
    x: &Matrix,
) -> Result<Matrix, ModelError> {
    cfg.validate()?;
    let mut tape = Tape::new();
    let param_vars: Vec<Var> = params.values.iter().map(|m| tape.leaf(m.clone())).collect();
    let xv = tape.leaf(x.clone());
    let mut probs = Vec::new();
    let out = block_on_tape(&mut tape, cfg, &params.layout.layers[l], &param_vars, l, xv, &mut probs);
    Ok(tape.value(out).clone())
}

/// Full forward: embed → blocks → final norm → head; returns s×vocab logits.
pub fn model_forward(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
) -> Result<Matrix, ModelError> {
    let tm = build_tape(cfg, params, tokens)?;
    Ok(tm.tape.value(tm.logits).clone())
}

/// Forward pass with per-layer activations and attention maps retained.
pub struct ForwardTrace {
    pub logits: Matrix,
    pub block_outputs: Vec<Matrix>,
    pub attn_probs: Vec<Vec<Matrix>>,
}

pub fn model_forward_traced(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
) -> Result<ForwardTrace, ModelError> {
    let tm = build_tape(cfg, params, tokens)?;
    Ok(ForwardTrace {
        logits: tm.tape.value(tm.logits).clone(),
        block_outputs: tm.block_outputs.iter().map(|&v| tm.tape.value(v).clone()).collect(),
        attn_probs: tm
            .attn_probs
            .iter()
            .map(|layer| layer.iter().map(|&v| tm.tape.value(v).clone()).collect())
            .collect(),
    })
}

/// Loss and exact gradients for one sequence.
pub struct LossGrads {
    pub loss: f64,
    /// One gradient per parameter slot, in layout order.
    pub grads: Vec<Matrix>,
    /// Set when the loss came out non-finite; gradients are zeroed.
    pub diverged: bool,
}

/// Mean cross-entropy over positions plus reverse-mode gradients of every
/// parameter. A non-finite loss is reported via the divergence flag.
pub fn loss_and_grads(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &[usize],
    targets: &[usize],
) -> Result<LossGrads, ModelError> {
    if targets.len() != tokens.len() {
        return Err(ModelError::InvalidConfig {
            field: "targets",
            msg: format!("{} targets for {} tokens", targets.len(), tokens.len()),
        });
    }
    for &id in targets {
        if id >= cfg.vocab {
            return Err(ModelError::TokenOutOfRange { id, vocab: cfg.vocab });
        }
    }
    let mut tm = build_tape(cfg, params, tokens)?;
    let loss_var = tm.tape.cross_entropy(tm.logits, targets);
    let loss = tm.tape.value(loss_var).get(0, 0);
    if !loss.is_finite() {
        let grads =
            params.layout.slots.iter().map(|s| Matrix::zeros(s.rows, s.cols)).collect();
        return Ok(LossGrads { loss, grads, diverged: true });
    }
    tm.tape.backward(loss_var);
    let grads = tm.param_vars.iter().map(|&v| tm.tape.grad(v).clone()).collect();
    Ok(LossGrads { loss, grads, diverged: false })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct CheckpointHeader {
    config: ModelConfig,
    seed: u64,
    step: u64,
    tensors: usize,
    optimizer: bool,
    opt_step: u64,
}

/// Loaded checkpoint contents; optimizer moments present when saved.
pub struct CheckpointData {
    pub config: ModelConfig,
    pub seed: u64,
    pub step: u64,
    pub params: ModelParams,
    pub optimizer: Option<(Vec<Matrix>, Vec<Matrix>, u64)>,
}

/// Writes a checkpoint: one JSON header line, then every parameter tensor as
/// raw little-endian f64 in layout order. When optimizer moments are given
/// they follow the parameters (all first moments, then all second moments).
pub fn save_checkpoint(
    path: &std::path::Path,
    cfg: &ModelConfig,
    seed: u64,
    step: u64,
    params: &ModelParams,
    optimizer: Option<(&[Matrix], &[Matrix], u64)>,
) -> Result<(), ModelError> {
    let header = CheckpointHeader {
        config: cfg.clone(),
        seed,
        step,
        tensors: params.values.len(),
        optimizer: optimizer.is_some(),
        opt_step: optimizer.map_or(0, |(_, _, t)| t),
    };
    let mut file = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(&mut file, &header)
        .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
    file.write_all(b"\n")?;
    let mut write_all = |tensors: &[Matrix]| -> Result<(), ModelError> {
        for m in tensors {
            for v in m.data() {
                file.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    };
    write_all(&params.values)?;
    if let Some((m, v, _)) = optimizer {
        write_all(m)?;
        write_all(v)?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &std::path::Path) -> Result<CheckpointData, ModelError> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut header_bytes = Vec::new();
    let mut byte = [0u8; 1];
    loop {
        file.read_exact(&mut byte)?;
        if byte[0] == b'\n' {
            break;
        }
        header_bytes.push(byte[0]);
    }
    let header: CheckpointHeader = serde_json::from_slice(&header_bytes)
        .map_err(|e| ModelError::BadCheckpoint(format!("bad header: {e}")))?;
    let mut params = ModelParams::zeros(&header.config);
    if params.values.len() != header.tensors {
        return Err(ModelError::BadCheckpoint(format!(
            "config implies {} tensors, header says {}",
            params.values.len(),
            header.tensors
        )));
    }
    let mut read_into = |tensors: &mut [Matrix]| -> Result<(), ModelError> {
        let mut buf = [0u8; 8];
        for m in tensors {
            for v in m.data_mut() {
                file.read_exact(&mut buf)?;
                *v = f64::from_le_bytes(buf);
            }
        }
        Ok(())
    };
    read_into(&mut params.values)?;
    let optimizer = if header.optimizer {
        let mut m: Vec<Matrix> =
            params.values.iter().map(|t| Matrix::zeros(t.rows(), t.cols())).collect();
        let mut v = m.clone();
        read_into(&mut m)?;
        read_into(&mut v)?;
        Some((m, v, header.opt_step))
    } else {
        None
    };
    Ok(CheckpointData { config: header.config, seed: header.seed, step: header.step, params, optimizer })
}

impl fmt::Display for BlockScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::PostNorm => write!(f, "post_norm"),
            Self::PreNorm => write!(f, "pre_norm"),
            Self::PreQk => write!(f, "pre_qk"),
            Self::HybridNorm => write!(f, "hybrid_norm"),
            Self::MixLn => write!(f, "mix_ln"),
            Self::PrePost => write!(f, "pre_post"),
            Self::PostPre => write!(f, "post_pre"),
            Self::OutputNorm => write!(f, "output_norm"),
            Self::VariantPost(nu) => write!(f, "variant_post:{}", nu.name()),
            Self::VariantPre(nu) => write!(f, "variant_pre:{}", nu.name()),
            Self::PreVariantPost(nu) => write!(f, "pre_variant_post:{}", nu.name()),
            Self::PreVariantPre(nu) => write!(f, "pre_variant_pre:{}", nu.name()),
        }
    }
}

impl FromStr for AttnNormScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vanilla" => Ok(Self::Vanilla),
            "qk" => Ok(Self::Qk),
            "kv" => Ok(Self::Kv),
            "qkv" => Ok(Self::Qkv),
            "qkc" => Ok(Self::Qkc),
            "kc" => Ok(Self::Kc),
            "qkvc" => Ok(Self::Qkvc),
            other => Err(format!("unknown attention norm scheme `{other}`")),
        }
    }
}

impl FromStr for BlockScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if let Some((family, nu)) = s.split_once(':') {
            let nu: AttnNormScheme = nu.parse()?;
            return match family {
                "variant_post" => Ok(Self::VariantPost(nu)),
                "variant_pre" => Ok(Self::VariantPre(nu)),
                "pre_variant_post" => Ok(Self::PreVariantPost(nu)),
                "pre_variant_pre" => Ok(Self::PreVariantPre(nu)),
                other => Err(format!("unknown block scheme family `{other}`")),
            };
        }
        match s {
            "post_norm" => Ok(Self::PostNorm),
            "pre_norm" => Ok(Self::PreNorm),
            "pre_qk" => Ok(Self::PreQk),
            "hybrid_norm" => Ok(Self::HybridNorm),
            "mix_ln" => Ok(Self::MixLn),
            "pre_post" => Ok(Self::PrePost),
            "post_pre" => Ok(Self::PostPre),
            "output_norm" => Ok(Self::OutputNorm),
            other => Err(format!("unknown block scheme `{other}`")),
        }
    }
}

impl fmt::Display for FirstBlockVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::SameAsRest => write!(f, "same"),
            Self::HybridStar => write!(f, "hybrid_star"),
            Self::FirstQkvPre => write!(f, "first_qkv_pre"),
            Self::EmbedNorm => write!(f, "embed_norm"),
        }
    }
}

impl FromStr for FirstBlockVariant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "same" => Ok(Self::SameAsRest),
            "hybrid_star" => Ok(Self::HybridStar),
            "first_qkv_pre" => Ok(Self::FirstQkvPre),
            "embed_norm" => Ok(Self::EmbedNorm),
            other => Err(format!("unknown first-block variant `{other}`")),
        }
    }
}

impl fmt::Display for InitScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Standard => write!(f, "standard"),
            Self::DepthScaled => write!(f, "depth_scaled"),
            Self::Megatron => write!(f, "megatron"),
        }
    }
}

impl FromStr for InitScheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "standard" => Ok(Self::Standard),
            "depth_scaled" => Ok(Self::DepthScaled),
            "megatron" => Ok(Self::Megatron),
            other => Err(format!("unknown init scheme `{other}`")),
        }
    }
}

//! Micro vision transformer with per-head attention capture.
//!
//! Pre-LayerNorm blocks (`LN -> MSA -> residual`, `LN -> MLP -> residual`),
//! learned positional embeddings, optional class token. Each head's
//! query/key/value projection is a column block of the layer's `d x d`
//! projection matrix, so head `h` owns columns `h*d/N .. (h+1)*d/N`.
//!
//! Every linear layer goes through a [`LinearHook`], which is where fake
//! quantization plugs in without the model knowing about it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ViTConfig {
    pub image_side: usize,
    pub patch_side: usize,
    pub channels: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_ratio: f64,
    pub classes: usize,
    pub use_class_token: bool,
}

impl Default for ViTConfig {
    fn default() -> Self {
        ViTConfig {
            image_side: 32,
            patch_side: 8,
            channels: 1,
            embed_dim: 32,
            layers: 2,
            heads: 4,
            mlp_ratio: 2.0,
            classes: 4,
            use_class_token: true,
        }
    }
}

impl ViTConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, msg: &str| Err(LabError::config(format!("model.{key}"), msg));
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return bad("patch_side", "image_side must be divisible by patch_side");
        }
        if self.image_side > 64 {
            return bad("image_side", "at most 64 pixels");
        }
        if self.heads == 0 || self.embed_dim % self.heads != 0 {
            return bad("heads", "embed_dim must be divisible by heads");
        }
        if self.layers == 0 {
            return bad("layers", "need at least one layer");
        }
        if self.classes == 0 {
            return bad("classes", "need at least one class");
        }
        if self.channels == 0 {
            return bad("channels", "need at least one channel");
        }
        if !(self.mlp_ratio > 0.0) || self.hidden_dim() == 0 {
            return bad("mlp_ratio", "must be positive");
        }
        Ok(())
    }

    /// Patches per side.
    pub fn grid(&self) -> usize {
        self.image_side / self.patch_side
    }

    /// Number of spatial patches `P`.
    pub fn patches(&self) -> usize {
        self.grid() * self.grid()
    }

    /// Token sequence length `N_d`.
    pub fn seq_len(&self) -> usize {
        self.patches() + usize::from(self.use_class_token)
    }

    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads
    }

    pub fn hidden_dim(&self) -> usize {
        (self.embed_dim as f64 * self.mlp_ratio).round() as usize
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }
}

/// Which linear layer a matmul belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LinearSite {
    PatchEmbed,
    Query(usize),
    Key(usize),
    Value(usize),
    Out(usize),
    Fc1(usize),
    Fc2(usize),
    Head,
}

/// Activation entering a linear layer; query, key and value share one.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ActSite {
    PatchEmbed,
    Qkv(usize),
    Out(usize),
    Fc1(usize),
    Fc2(usize),
    Head,
}

impl LinearSite {
    pub fn act_site(self) -> ActSite {
        match self {
            LinearSite::PatchEmbed => ActSite::PatchEmbed,
            LinearSite::Query(l) | LinearSite::Key(l) | LinearSite::Value(l) => ActSite::Qkv(l),
            LinearSite::Out(l) => ActSite::Out(l),
            LinearSite::Fc1(l) => ActSite::Fc1(l),
            LinearSite::Fc2(l) => ActSite::Fc2(l),
            LinearSite::Head => ActSite::Head,
        }
    }

    /// Every linear site of a model with `layers` blocks, in forward order.
    pub fn all(layers: usize) -> Vec<LinearSite> {
        let mut v = vec![LinearSite::PatchEmbed];
        for l in 0..layers {
            v.extend([
                LinearSite::Query(l),
                LinearSite::Key(l),
                LinearSite::Value(l),
                LinearSite::Out(l),
                LinearSite::Fc1(l),
                LinearSite::Fc2(l),
            ]);
        }
        v.push(LinearSite::Head);
        v
    }

    pub fn name(self) -> String {
        match self {
            LinearSite::PatchEmbed => "patch_embed".into(),
            LinearSite::Query(l) => format!("blocks.{l}.wq"),
            LinearSite::Key(l) => format!("blocks.{l}.wk"),
            LinearSite::Value(l) => format!("blocks.{l}.wv"),
            LinearSite::Out(l) => format!("blocks.{l}.wo"),
            LinearSite::Fc1(l) => format!("blocks.{l}.w1"),
            LinearSite::Fc2(l) => format!("blocks.{l}.w2"),
            LinearSite::Head => "head".into(),
        }
    }
}

impl ActSite {
    pub fn all(layers: usize) -> Vec<ActSite> {
        let mut v = vec![ActSite::PatchEmbed];
        for l in 0..layers {
            v.extend([ActSite::Qkv(l), ActSite::Out(l), ActSite::Fc1(l), ActSite::Fc2(l)]);
        }
        v.push(ActSite::Head);
        v
    }

    pub fn name(self) -> String {
        match self {
            ActSite::PatchEmbed => "act.patch_embed".into(),
            ActSite::Qkv(l) => format!("act.blocks.{l}.qkv"),
            ActSite::Out(l) => format!("act.blocks.{l}.out"),
            ActSite::Fc1(l) => format!("act.blocks.{l}.fc1"),
            ActSite::Fc2(l) => format!("act.blocks.{l}.fc2"),
            ActSite::Head => "act.head".into(),
        }
    }
}

/// Intercepts every `x W + b` of the forward pass.
pub trait LinearHook {
    fn linear(&mut self, tape: &mut Tape, site: LinearSite, x: Var, w: Var, b: Var) -> Result<Var>;
}

/// Plain full-precision arithmetic.
pub struct FullPrecision;

pub fn plain_linear(tape: &mut Tape, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    tape.add_broadcast(y, b)
}

impl LinearHook for FullPrecision {
    fn linear(&mut self, tape: &mut Tape, _site: LinearSite, x: Var, w: Var, b: Var) -> Result<Var> {
        plain_linear(tape, x, w, b)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams<T> {
    pub ln1_g: T,
    pub ln1_b: T,
    pub wq: T,
    pub bq: T,
    pub wk: T,
    pub bk: T,
    pub wv: T,
    pub bv: T,
    pub wo: T,
    pub bo: T,
    pub ln2_g: T,
    pub ln2_b: T,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

const BLOCK_FIELDS: [&str; 16] = [
    "ln1_g", "ln1_b", "wq", "bq", "wk", "bk", "wv", "bv", "wo", "bo", "ln2_g", "ln2_b", "w1", "b1",
    "w2", "b2",
];

impl<T> BlockParams<T> {
    fn refs(&self) -> [&T; 16] {
        [
            &self.ln1_g, &self.ln1_b, &self.wq, &self.bq, &self.wk, &self.bk, &self.wv, &self.bv,
            &self.wo, &self.bo, &self.ln2_g, &self.ln2_b, &self.w1, &self.b1, &self.w2, &self.b2,
        ]
    }

    fn refs_mut(&mut self) -> [&mut T; 16] {
        [
            &mut self.ln1_g, &mut self.ln1_b, &mut self.wq, &mut self.bq, &mut self.wk,
            &mut self.bk, &mut self.wv, &mut self.bv, &mut self.wo, &mut self.bo,
            &mut self.ln2_g, &mut self.ln2_b, &mut self.w1, &mut self.b1, &mut self.w2,
            &mut self.b2,
        ]
    }

    fn from_iter(it: &mut impl Iterator<Item = T>) -> Option<Self> {
        Some(BlockParams {
            ln1_g: it.next()?,
            ln1_b: it.next()?,
            wq: it.next()?,
            bq: it.next()?,
            wk: it.next()?,
            bk: it.next()?,
            wv: it.next()?,
            bv: it.next()?,
            wo: it.next()?,
            bo: it.next()?,
            ln2_g: it.next()?,
            ln2_b: it.next()?,
            w1: it.next()?,
            b1: it.next()?,
            w2: it.next()?,
            b2: it.next()?,
        })
    }

    /// Weight and bias of a linear site owned by this block.
    pub fn linear(&self, site: LinearSite) -> Option<(&T, &T)> {
        Some(match site {
            LinearSite::Query(_) => (&self.wq, &self.bq),
            LinearSite::Key(_) => (&self.wk, &self.bk),
            LinearSite::Value(_) => (&self.wv, &self.bv),
            LinearSite::Out(_) => (&self.wo, &self.bo),
            LinearSite::Fc1(_) => (&self.w1, &self.b1),
            LinearSite::Fc2(_) => (&self.w2, &self.b2),
            _ => return None,
        })
    }
}

/// All model parameters, generic over storage (`Tensor` or tape `Var`).
#[derive(Clone, Debug, PartialEq)]
pub struct ViTParams<T> {
    pub patch_w: T,
    pub patch_b: T,
    pub cls: T,
    pub pos: T,
    pub blocks: Vec<BlockParams<T>>,
    pub norm_g: T,
    pub norm_b: T,
    pub head_w: T,
    pub head_b: T,
}

impl<T> ViTParams<T> {
    /// Canonical parameter names in canonical order.
    pub fn names(layers: usize) -> Vec<String> {
        let mut v: Vec<String> = ["patch_w", "patch_b", "cls", "pos"].iter().map(|s| s.to_string()).collect();
        for l in 0..layers {
            v.extend(BLOCK_FIELDS.iter().map(|f| format!("blocks.{l}.{f}")));
        }
        v.extend(["norm_g", "norm_b", "head_w", "head_b"].iter().map(|s| s.to_string()));
        v
    }

    pub fn refs(&self) -> Vec<&T> {
        let mut v = vec![&self.patch_w, &self.patch_b, &self.cls, &self.pos];
        for b in &self.blocks {
            v.extend(b.refs());
        }
        v.extend([&self.norm_g, &self.norm_b, &self.head_w, &self.head_b]);
        v
    }

    pub fn refs_mut(&mut self) -> Vec<&mut T> {
        let mut v = vec![&mut self.patch_w, &mut self.patch_b, &mut self.cls, &mut self.pos];
        for b in &mut self.blocks {
            v.extend(b.refs_mut());
        }
        v.extend([&mut self.norm_g, &mut self.norm_b, &mut self.head_w, &mut self.head_b]);
        v
    }

    /// Rebuilds from values in canonical order.
    pub fn from_ordered(layers: usize, values: Vec<T>) -> Option<Self> {
        let expected = 8 + 16 * layers;
        if values.len() != expected {
            return None;
        }
        let mut it = values.into_iter();
        let patch_w = it.next()?;
        let patch_b = it.next()?;
        let cls = it.next()?;
        let pos = it.next()?;
        let mut blocks = Vec::with_capacity(layers);
        for _ in 0..layers {
            blocks.push(BlockParams::from_iter(&mut it)?);
        }
        Some(ViTParams {
            patch_w,
            patch_b,
            cls,
            pos,
            blocks,
            norm_g: it.next()?,
            norm_b: it.next()?,
            head_w: it.next()?,
            head_b: it.next()?,
        })
    }

    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> ViTParams<U> {
        let names = Self::names(self.blocks.len());
        let values: Vec<U> = names.iter().zip(self.refs()).map(|(n, t)| f(n, t)).collect();
        ViTParams::from_ordered(self.blocks.len(), values).expect("same layout")
    }

    pub fn linear(&self, site: LinearSite) -> (&T, &T) {
        match site {
            LinearSite::PatchEmbed => (&self.patch_w, &self.patch_b),
            LinearSite::Head => (&self.head_w, &self.head_b),
            LinearSite::Query(l)
            | LinearSite::Key(l)
            | LinearSite::Value(l)
            | LinearSite::Out(l)
            | LinearSite::Fc1(l)
            | LinearSite::Fc2(l) => self.blocks[l].linear(site).expect("block site"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MicroViT {
    pub config: ViTConfig,
    pub params: ViTParams<Tensor>,
}

/// Model parameters placed on a tape.
pub struct BoundViT {
    pub config: ViTConfig,
    pub params: ViTParams<Var>,
}

/// One layer's attention internals for a batch, all on the tape.
#[derive(Clone, Copy, Debug)]
pub struct LayerAttention {
    /// `Q_h K_h^T / sqrt(d)`, shape `[B*N, N_d, N_d]`, index `b*N + h`.
    pub logits: Var,
    /// Row softmax of `logits`.
    pub probs: Var,
    /// Head outputs `H_h`, shape `[B*N, N_d, d/N]`.
    pub head_out: Var,
}

/// Per-layer, per-head attention record of one forward pass.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub batch: usize,
    pub heads: usize,
    pub seq_len: usize,
    pub has_class_token: bool,
    pub layers: Vec<LayerAttention>,
}

impl AttentionStack {
    pub fn depth(&self) -> usize {
        self.layers.len()
    }

    /// Index of the first spatial token.
    pub fn spatial_offset(&self) -> usize {
        usize::from(self.has_class_token)
    }

    pub fn patches(&self) -> usize {
        self.seq_len - self.spatial_offset()
    }
}

pub struct ForwardOutput {
    pub logits: Var,
    pub attn: Option<AttentionStack>,
}

fn linear_init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let std = (2.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::randn(&[fan_in, fan_out], std, rng)
}

impl MicroViT {
    pub fn new(config: ViTConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let hd = config.hidden_dim();
        let pd = config.patch_dim();
        let patch_w = linear_init(&mut rng, pd, d);
        let cls = Tensor::randn(&[1, d], 0.02, &mut rng);
        let pos = Tensor::randn(&[config.seq_len(), d], 0.02, &mut rng);
        let mut blocks = Vec::with_capacity(config.layers);
        for _ in 0..config.layers {
            blocks.push(BlockParams {
                ln1_g: Tensor::full(&[d], 1.0),
                ln1_b: Tensor::zeros(&[d]),
                wq: linear_init(&mut rng, d, d),
                bq: Tensor::zeros(&[d]),
                wk: linear_init(&mut rng, d, d),
                bk: Tensor::zeros(&[d]),
                wv: linear_init(&mut rng, d, d),
                bv: Tensor::zeros(&[d]),
                wo: linear_init(&mut rng, d, d),
                bo: Tensor::zeros(&[d]),
                ln2_g: Tensor::full(&[d], 1.0),
                ln2_b: Tensor::zeros(&[d]),
                w1: linear_init(&mut rng, d, hd),
                b1: Tensor::zeros(&[hd]),
                w2: linear_init(&mut rng, hd, d),
                b2: Tensor::zeros(&[d]),
            });
        }
        let params = ViTParams {
            patch_w,
            patch_b: Tensor::zeros(&[d]),
            cls,
            pos,
            blocks,
            norm_g: Tensor::full(&[d], 1.0),
            norm_b: Tensor::zeros(&[d]),
            head_w: linear_init(&mut rng, d, config.classes),
            head_b: Tensor::zeros(&[config.classes]),
        };
        Ok(MicroViT { config, params })
    }

    /// Checks every tensor against the shapes implied by the config.
    pub fn from_params(config: ViTConfig, params: ViTParams<Tensor>) -> Result<Self> {
        config.validate()?;
        let reference = MicroViT::new(config.clone(), 0)?;
        if params.blocks.len() != config.layers {
            return Err(LabError::Format(format!(
                "{} blocks for a {}-layer config",
                params.blocks.len(),
                config.layers
            )));
        }
        let names = ViTParams::<Tensor>::names(config.layers);
        for ((name, a), b) in names.iter().zip(params.refs()).zip(reference.params.refs()) {
            if a.shape() != b.shape() {
                return Err(LabError::Format(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    a.shape(),
                    b.shape()
                )));
            }
        }
        Ok(MicroViT { config, params })
    }

    pub fn num_params(&self) -> usize {
        self.params.refs().iter().map(|t| t.numel()).sum()
    }

    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundViT {
        BoundViT {
            config: self.config.clone(),
            params: self.params.map(|_, t| {
                if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            }),
        }
    }

    /// Per-head projection matrices `(W^Q_h, W^K_h, W^V_h)`, each `d x d/N`.
    pub fn head_projections(&self, layer: usize, head: usize) -> (Tensor, Tensor, Tensor) {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let cols = |w: &Tensor| {
            let mut out = Vec::with_capacity(d * dh);
            for r in 0..d {
                out.extend_from_slice(&w.data()[r * d + head * dh..r * d + (head + 1) * dh]);
            }
            Tensor::from_parts(vec![d, dh], out)
        };
        let b = &self.params.blocks[layer];
        (cols(&b.wq), cols(&b.wk), cols(&b.wv))
    }

    /// Full-precision logits without recording gradients.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(images.clone());
        let out = forward(&mut tape, &bound, x, &mut FullPrecision, false)?;
        Ok(tape.value(out.logits).clone())
    }

    /// Predicted classes, evaluated in chunks of `batch`.
    pub fn predict(&self, images: &Tensor, batch: usize) -> Result<Vec<usize>> {
        predict_with(images, batch, |chunk| self.logits(chunk))
    }
}

/// Runs `logits_fn` over chunks of the leading axis and returns row argmaxes.
pub fn predict_with(
    images: &Tensor,
    batch: usize,
    mut logits_fn: impl FnMut(&Tensor) -> Result<Tensor>,
) -> Result<Vec<usize>> {
    let n = images.shape()[0];
    let mut preds = Vec::with_capacity(n);
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let logits = logits_fn(&images.slice_leading(start, len)?)?;
        preds.extend(argmax_rows(&logits));
        start += len;
    }
    Ok(preds)
}

pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let w = *logits.shape().last().unwrap();
    logits
        .data()
        .chunks(w)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> f64 {
    if labels.is_empty() {
        return 0.0;
    }
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    hits as f64 / labels.len() as f64
}

/// `[B, C, H, W]` images to `[B*P, C*p*p]` patch rows, row-major over the grid.
fn patchify(tape: &mut Tape, cfg: &ViTConfig, images: Var) -> Result<Var> {
    let s = tape.shape(images).to_vec();
    if s.len() != 4 || s[1] != cfg.channels || s[2] != cfg.image_side || s[3] != cfg.image_side {
        return Err(LabError::shape(
            "vit_input",
            &s,
            &[0, cfg.channels, cfg.image_side, cfg.image_side],
        ));
    }
    let (b, g, p) = (s[0], cfg.grid(), cfg.patch_side);
    let x = tape.reshape(images, &[b, cfg.channels, g, p, g, p])?;
    let x = tape.permute(x, &[0, 2, 4, 1, 3, 5])?;
    tape.reshape(x, &[b * g * g, cfg.patch_dim()])
}

/// `[B*N_d, d]` to `[B*N, N_d, d/N]`.
fn split_heads(tape: &mut Tape, x: Var, b: usize, nd: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, nd, heads, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * heads, nd, dh])
}

fn merge_heads(tape: &mut Tape, x: Var, b: usize, nd: usize, heads: usize, dh: usize) -> Result<Var> {
    let x = tape.reshape(x, &[b, heads, nd, dh])?;
    let x = tape.permute(x, &[0, 2, 1, 3])?;
    tape.reshape(x, &[b * nd, heads * dh])
}

/// Multi-head self-attention of one block on normalized tokens `h`
/// (`[B*N_d, d]`). Returns the merged projection input and the attention
/// record.
fn attention(
    tape: &mut Tape,
    cfg: &ViTConfig,
    blk: &BlockParams<Var>,
    layer: usize,
    h: Var,
    batch: usize,
    hook: &mut dyn LinearHook,
) -> Result<(Var, LayerAttention)> {
    let (nd, heads, dh) = (cfg.seq_len(), cfg.heads, cfg.head_dim());
    let q = hook.linear(tape, LinearSite::Query(layer), h, blk.wq, blk.bq)?;
    let k = hook.linear(tape, LinearSite::Key(layer), h, blk.wk, blk.bk)?;
    let v = hook.linear(tape, LinearSite::Value(layer), h, blk.wv, blk.bv)?;
    let qh = split_heads(tape, q, batch, nd, heads, dh)?;
    let kh = split_heads(tape, k, batch, nd, heads, dh)?;
    let vh = split_heads(tape, v, batch, nd, heads, dh)?;
    let raw = tape.matmul_nt(qh, kh)?;
    let logits = tape.scale(raw, 1.0 / (cfg.embed_dim as f64).sqrt());
    let probs = tape.softmax(logits);
    let head_out = tape.matmul(probs, vh)?;
    let merged = merge_heads(tape, head_out, batch, nd, heads, dh)?;
    Ok((
        merged,
        LayerAttention {
            logits,
            probs,
            head_out,
        },
    ))
}

/// Forward pass on `images` (`[B, C, H, W]`) producing `[B, classes]` logits.
pub fn forward(
    tape: &mut Tape,
    model: &BoundViT,
    images: Var,
    hook: &mut dyn LinearHook,
    capture: bool,
) -> Result<ForwardOutput> {
    let cfg = &model.config;
    let p = &model.params;
    let batch = tape.shape(images)[0];
    let (d, nd) = (cfg.embed_dim, cfg.seq_len());

    let patches = patchify(tape, cfg, images)?;
    let tokens = hook.linear(tape, LinearSite::PatchEmbed, patches, p.patch_w, p.patch_b)?;
    let tokens = tape.reshape(tokens, &[batch, cfg.patches(), d])?;
    let tokens = if cfg.use_class_token {
        let cls = tape.repeat_leading(p.cls, batch)?;
        tape.concat(&[cls, tokens], 1)?
    } else {
        tokens
    };
    let tokens = tape.add_broadcast(tokens, p.pos)?;
    let mut x = tape.reshape(tokens, &[batch * nd, d])?;

    let mut layers = Vec::with_capacity(cfg.layers);
    for (l, blk) in p.blocks.iter().enumerate() {
        let h = tape.layer_norm(x, blk.ln1_g, blk.ln1_b, LN_EPS)?;
        let (merged, record) = attention(tape, cfg, blk, l, h, batch, hook)?;
        let o = hook.linear(tape, LinearSite::Out(l), merged, blk.wo, blk.bo)?;
        x = tape.add(x, o)?;
        let h2 = tape.layer_norm(x, blk.ln2_g, blk.ln2_b, LN_EPS)?;
        let f = hook.linear(tape, LinearSite::Fc1(l), h2, blk.w1, blk.b1)?;
        let f = tape.gelu(f);
        let f = hook.linear(tape, LinearSite::Fc2(l), f, blk.w2, blk.b2)?;
        x = tape.add(x, f)?;
        if capture {
            layers.push(record);
        }
    }

    let x = tape.layer_norm(x, p.norm_g, p.norm_b, LN_EPS)?;
    let x = tape.reshape(x, &[batch, nd, d])?;
    let pooled = if cfg.use_class_token {
        let c = tape.narrow(x, 1, 0, 1)?;
        tape.reshape(c, &[batch, d])?
    } else {
        let t = tape.permute(x, &[0, 2, 1])?;
        let avg = tape.constant(Tensor::full(&[nd, 1], 1.0 / nd as f64));
        let m = tape.matmul(t, avg)?;
        tape.reshape(m, &[batch, d])?
    };
    let logits = hook.linear(tape, LinearSite::Head, pooled, p.head_w, p.head_b)?;
    let attn = capture.then(|| AttentionStack {
        batch,
        heads: cfg.heads,
        seq_len: nd,
        has_class_token: cfg.use_class_token,
        layers,
    });
    Ok(ForwardOutput { logits, attn })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn small() -> ViTConfig {
        ViTConfig {
            image_side: 16,
            patch_side: 4,
            embed_dim: 16,
            heads: 4,
            layers: 2,
            ..ViTConfig::default()
        }
    }

    fn images(n: usize, cfg: &ViTConfig, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::randn(&[n, cfg.channels, cfg.image_side, cfg.image_side], 1.0, &mut rng)
    }

    #[test]
    fn config_validation() {
        assert!(ViTConfig { patch_side: 5, ..ViTConfig::default() }.validate().is_err());
        assert!(ViTConfig { heads: 3, ..ViTConfig::default() }.validate().is_err());
        assert!(ViTConfig { image_side: 128, patch_side: 8, ..ViTConfig::default() }.validate().is_err());
        let c = ViTConfig::default();
        assert_eq!(c.patches(), 16);
        assert_eq!(c.seq_len(), 17);
    }

    #[test]
    fn logits_shape_and_stack_shape() {
        let cfg = small();
        let m = MicroViT::new(cfg.clone(), 1).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let x = tape.constant(images(3, &cfg, 0));
        let out = forward(&mut tape, &b, x, &mut FullPrecision, true).unwrap();
        assert_eq!(tape.shape(out.logits), &[3, cfg.classes]);
        let attn = out.attn.unwrap();
        assert_eq!(attn.depth(), cfg.layers);
        assert_eq!(attn.heads, cfg.heads);
        let nd = cfg.seq_len();
        for la in &attn.layers {
            assert_eq!(tape.shape(la.logits), &[3 * cfg.heads, nd, nd]);
            assert_eq!(tape.shape(la.head_out), &[3 * cfg.heads, nd, cfg.head_dim()]);
            for row in tape.value(la.probs).data().chunks(nd) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        let (wq, _, _) = m.head_projections(0, 1);
        assert_eq!(wq.shape(), &[cfg.embed_dim, cfg.head_dim()]);
    }

    #[test]
    fn wrong_input_shape_is_error() {
        let cfg = small();
        let m = MicroViT::new(cfg, 1).unwrap();
        assert!(m.logits(&Tensor::zeros(&[1, 1, 12, 12])).is_err());
    }

    #[test]
    fn capture_does_not_change_logits() {
        let cfg = small();
        let m = MicroViT::new(cfg.clone(), 2).unwrap();
        let x = images(2, &cfg, 1);
        let run = |capture| {
            let mut tape = Tape::new();
            let b = m.bind(&mut tape, false);
            let xv = tape.constant(x.clone());
            let out = forward(&mut tape, &b, xv, &mut FullPrecision, capture).unwrap();
            tape.value(out.logits).clone()
        };
        assert_eq!(run(true), run(false));
    }

    #[test]
    fn zero_query_key_weights_give_uniform_attention() {
        let cfg = small();
        let mut m = MicroViT::new(cfg.clone(), 3).unwrap();
        m.params.pos = Tensor::zeros(m.params.pos.shape());
        for b in &mut m.params.blocks {
            b.wq = Tensor::zeros(b.wq.shape());
            b.wk = Tensor::zeros(b.wk.shape());
        }
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let x = tape.constant(Tensor::zeros(&[1, 1, 16, 16]));
        let out = forward(&mut tape, &b, x, &mut FullPrecision, true).unwrap();
        let nd = cfg.seq_len() as f64;
        for la in &out.attn.unwrap().layers {
            for &v in tape.value(la.probs).data() {
                assert!((v - 1.0 / nd).abs() < 1e-12);
            }
        }
    }

    /// Concatenated heads times W^O equals the sum of per-head products with
    /// the matching row blocks of W^O.
    #[test]
    fn msa_is_concat_times_output_projection() {
        let cfg = small();
        let m = MicroViT::new(cfg.clone(), 4).unwrap();
        let mut tape = Tape::new();
        let b = m.bind(&mut tape, false);
        let x = tape.constant(images(2, &cfg, 2));
        let out = forward(&mut tape, &b, x, &mut FullPrecision, true).unwrap();
        let la = out.attn.unwrap().layers[0];
        let (nd, n, dh, d) = (cfg.seq_len(), cfg.heads, cfg.head_dim(), cfg.embed_dim);
        let ho = tape.value(la.head_out).clone();
        let wo = &m.params.blocks[0].wo;
        let merged = merge_heads(&mut tape, la.head_out, 2, nd, n, dh).unwrap();
        let wov = tape.constant(wo.clone());
        let msa = tape.matmul(merged, wov).unwrap();
        let msa = tape.value(msa).clone();
        for bi in 0..2 {
            for t in 0..nd {
                for j in 0..d {
                    let mut acc = 0.0;
                    for h in 0..n {
                        for c in 0..dh {
                            let hv = ho.data()[((bi * n + h) * nd + t) * dh + c];
                            acc += hv * wo.data()[(h * dh + c) * d + j];
                        }
                    }
                    let got = msa.data()[(bi * nd + t) * d + j];
                    assert!((acc - got).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn head_permutation_leaves_logits_unchanged() {
        let cfg = small();
        let m = MicroViT::new(cfg.clone(), 5).unwrap();
        let perm = [2usize, 0, 3, 1];
        let (d, dh) = (cfg.embed_dim, cfg.head_dim());
        let mut p = m.clone();
        for blk in &mut p.params.blocks {
            for w in [&mut blk.wq, &mut blk.wk, &mut blk.wv] {
                let src = w.clone();
                for r in 0..d {
                    for (new_h, &old_h) in perm.iter().enumerate() {
                        for c in 0..dh {
                            w.data_mut()[r * d + new_h * dh + c] = src.data()[r * d + old_h * dh + c];
                        }
                    }
                }
            }
            for bvec in [&mut blk.bq, &mut blk.bk, &mut blk.bv] {
                let src = bvec.clone();
                for (new_h, &old_h) in perm.iter().enumerate() {
                    for c in 0..dh {
                        bvec.data_mut()[new_h * dh + c] = src.data()[old_h * dh + c];
                    }
                }
            }
            let src = blk.wo.clone();
            for (new_h, &old_h) in perm.iter().enumerate() {
                for c in 0..dh {
                    for j in 0..d {
                        blk.wo.data_mut()[(new_h * dh + c) * d + j] = src.data()[(old_h * dh + c) * d + j];
                    }
                }
            }
        }
        let x = images(3, &cfg, 3);
        let a = m.logits(&x).unwrap();
        let b = p.logits(&x).unwrap();
        for (u, v) in a.data().iter().zip(b.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn mean_pool_variant_runs() {
        let cfg = ViTConfig {
            use_class_token: false,
            ..small()
        };
        let m = MicroViT::new(cfg.clone(), 6).unwrap();
        let l = m.logits(&images(2, &cfg, 4)).unwrap();
        assert_eq!(l.shape(), &[2, cfg.classes]);
        assert!(l.all_finite());
    }

    #[test]
    fn params_roundtrip_through_ordered_list() {
        let m = MicroViT::new(small(), 7).unwrap();
        let flat: Vec<Tensor> = m.params.refs().into_iter().cloned().collect();
        let back = ViTParams::from_ordered(m.config.layers, flat).unwrap();
        assert_eq!(back, m.params);
        assert!(MicroViT::from_params(m.config.clone(), back).is_ok());
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let cfg = ViTConfig {
            image_side: 8,
            patch_side: 4,
            embed_dim: 8,
            heads: 2,
            layers: 1,
            ..ViTConfig::default()
        };
        let m = MicroViT::new(cfg.clone(), 8).unwrap();
        let x = images(1, &cfg, 5);
        let err = crate::gradcheck::max_relative_error(&[x], 1e-5, |tape, v| {
            let b = m.bind(tape, false);
            let out = forward(tape, &b, v[0], &mut FullPrecision, false)?;
            let l = tape.log_softmax(out.logits);
            let w = tape.constant(Tensor::new(vec![1, 4], vec![1.0, 0.0, 0.0, 0.0]).unwrap());
            let p = tape.mul(l, w)?;
            Ok(tape.sum(p))
        })
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }
}

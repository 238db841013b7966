//! Mixed-modality token backbone: dual-path latent embedder, hybrid
//! attention mask and modality-routed low-rank adapters.
//!
//! Parameter prefixes: `emb.sem.*`, `emb.gen.*`, `emb.fuse.*` for the
//! embedder and `bb.*` for the transformer stack.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::nn::{self, Initializer, Projection};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Text,
    Image,
    Motion,
}

impl Modality {
    /// Adapter branch: text and image share one, motion has its own.
    pub fn uses_motion_adapter(self) -> bool {
        self == Modality::Motion
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Span {
    pub modality: Modality,
    pub start: usize,
    pub len: usize,
}

impl Span {
    pub fn end(&self) -> usize {
        self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SegmentLayout {
    spans: Vec<Span>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("span {0} is empty")]
    EmptySpan(usize),
    #[error("span {index} starts at {start}, expected {expected}")]
    NotContiguous { index: usize, start: usize, expected: usize },
    #[error("{tags} modality tags for {tokens} tokens")]
    TagCount { tags: usize, tokens: usize },
}

impl SegmentLayout {
    /// Contiguous spans from `(modality, length)` pairs.
    pub fn from_lengths(parts: &[(Modality, usize)]) -> Result<Self, LayoutError> {
        let mut start = 0;
        let mut spans = Vec::with_capacity(parts.len());
        for &(modality, len) in parts {
            spans.push(Span { modality, start, len });
            start += len;
        }
        Self::new(spans)
    }

    pub fn new(spans: Vec<Span>) -> Result<Self, LayoutError> {
        let mut expected = 0;
        for (index, s) in spans.iter().enumerate() {
            if s.len == 0 {
                return Err(LayoutError::EmptySpan(index));
            }
            if s.start != expected {
                return Err(LayoutError::NotContiguous { index, start: s.start, expected });
            }
            expected = s.end();
        }
        Ok(Self { spans })
    }

    pub fn spans(&self) -> &[Span] {
        &self.spans
    }

    pub fn len(&self) -> usize {
        self.spans.last().map_or(0, Span::end)
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }

    pub fn span_of(&self, i: usize) -> &Span {
        self.spans.iter().find(|s| i < s.end()).expect("token index within layout")
    }

    pub fn modalities(&self) -> Vec<Modality> {
        self.spans.iter().flat_map(|s| std::iter::repeat_n(s.modality, s.len)).collect()
    }
}

/// Whether token `i` may attend to token `j`: text is causal; a motion or
/// image token sees its whole span plus everything before the span.
pub fn attention_allowed(layout: &SegmentLayout, i: usize, j: usize) -> bool {
    let s = layout.span_of(i);
    match s.modality {
        Modality::Text => j <= i,
        Modality::Motion | Modality::Image => j < s.end(),
    }
}

/// Additive `L × L` mask with `0` where attention is allowed and `-inf`
/// elsewhere.
pub fn build_hybrid_mask(layout: &SegmentLayout) -> Tensor {
    let l = layout.len();
    let mut m = Tensor::full(&[l, l], f64::NEG_INFINITY);
    for i in 0..l {
        for j in 0..l {
            if attention_allowed(layout, i, j) {
                m.set(i, j, 0.0);
            }
        }
    }
    m
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeakageRule {
    /// Entry is neither `0` nor `-inf`.
    NotBinary,
    /// A row sees a column past the end of its own span.
    FutureSpan,
    /// A text row sees a later token.
    TextNotCausal,
    /// An allowed pair outside the hybrid rule.
    OutsideRule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Leak {
    pub row: usize,
    pub col: usize,
    pub rule: LeakageRule,
}

impl fmt::Display for Leak {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}) violates {:?}", self.row, self.col, self.rule)
    }
}

/// Brute-force audit of an additive mask against `layout`. Checks run as
/// whole-mask passes in this order: binary entries, no row sees past the
/// end of its span, text rows are causal, every allowed pair satisfies the
/// hybrid rule. The first failing pair is returned.
pub fn verify_no_leakage(layout: &SegmentLayout, mask: &Tensor) -> Result<(), Leak> {
    let l = layout.len();
    assert_eq!(mask.shape(), [l, l], "mask shape must match layout length");
    let allowed = |i: usize, j: usize| mask.get(i, j) == 0.0;
    let first = |pred: &dyn Fn(usize, usize) -> bool, rule| {
        for i in 0..l {
            for j in 0..l {
                if pred(i, j) {
                    return Err(Leak { row: i, col: j, rule });
                }
            }
        }
        Ok(())
    };
    first(&|i, j| !(mask.get(i, j) == 0.0 || mask.get(i, j) == f64::NEG_INFINITY), LeakageRule::NotBinary)?;
    first(&|i, j| allowed(i, j) && j >= layout.span_of(i).end(), LeakageRule::FutureSpan)?;
    first(&|i, j| allowed(i, j) && layout.span_of(i).modality == Modality::Text && j > i, LeakageRule::TextNotCausal)?;
    first(&|i, j| allowed(i, j) && !attention_allowed(layout, i, j), LeakageRule::OutsideRule)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EmbedderConfig {
    pub semantic_width: usize,
    pub semantic_layers: usize,
    pub semantic_heads: usize,
    pub hidden: usize,
    /// Layers in the generation-branch MLP (1 = a single linear map).
    pub generation_layers: usize,
}

impl Default for EmbedderConfig {
    fn default() -> Self {
        Self { semantic_width: 32, semantic_layers: 2, semantic_heads: 4, hidden: 64, generation_layers: 2 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BackboneConfig {
    pub blocks: usize,
    pub heads: usize,
    pub hidden: usize,
    pub lora_rank: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self { blocks: 2, heads: 4, hidden: 64, lora_rank: 4 }
    }
}

/// Latent geometry the embedder is built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LatentShape {
    pub tokens: usize,
    pub dim: usize,
}

pub fn init_embedder(store: &mut ParamStore, cfg: &EmbedderConfig, latent: LatentShape, seed: u64) {
    let mut init = Initializer::new(store, seed);
    let (ds, dh) = (cfg.semantic_width, cfg.hidden);
    init.mlp("emb.sem.mlp", latent.dim, ds, ds);
    init.normal("emb.sem.pos", &[latent.tokens, ds], 0.02);
    for i in 0..cfg.semantic_layers {
        init.block(&format!("emb.sem.blk{i}"), ds, 2 * ds, None);
    }
    if cfg.generation_layers <= 1 {
        init.linear("emb.gen.lin", latent.dim, dh);
    } else {
        init.mlp("emb.gen.mlp", latent.dim, dh, dh);
    }
    init.normal("emb.gen.pos", &[latent.tokens, dh], 0.02);
    init.norm("emb.fuse.norm", ds + dh);
    init.mlp("emb.fuse.mlp", ds + dh, dh, dh);
}

pub fn init_backbone(store: &mut ParamStore, cfg: &BackboneConfig, seed: u64) {
    let mut init = Initializer::new(store, seed);
    for i in 0..cfg.blocks {
        init.block(&format!("bb.blk{i}"), cfg.hidden, 2 * cfg.hidden, Some(cfg.lora_rank));
    }
    init.norm("bb.norm_out", cfg.hidden);
}

/// Whether a parameter is one of the routed adapters.
pub fn is_adapter(name: &str) -> bool {
    name.contains(&format!(".{}.", nn::LORA_TEXT)) || name.contains(&format!(".{}.", nn::LORA_MOTION))
}

pub fn is_motion_adapter(name: &str) -> bool {
    name.contains(&format!(".{}.", nn::LORA_MOTION))
}

/// Base (non-adapter) backbone weights.
pub fn is_backbone_base(name: &str) -> bool {
    name.starts_with("bb.") && !is_adapter(name)
}

fn tiled(g: &mut Graph, name: &str, batch: usize) -> Result<Var, DiffError> {
    let table = g.param(name)?;
    let n = g.shape(table)[0];
    let tile = g.constant(nn::tile_rows(batch, n));
    g.matmul(tile, table)
}

/// `[B·T_z, d] → [B·T_z, d_s]`: MLP, positions, bidirectional encoder layers.
pub fn semantic_branch(g: &mut Graph, cfg: &EmbedderConfig, z: Var, batch: usize) -> Result<Var, DiffError> {
    let tokens = g.shape(z)[0] / batch;
    let h = nn::mlp(g, z, "emb.sem.mlp")?;
    let pos = tiled(g, "emb.sem.pos", batch)?;
    let mut h = g.add(h, pos)?;
    let mask = g.constant(nn::block_diagonal_mask(batch, tokens));
    for i in 0..cfg.semantic_layers {
        h = nn::block(g, h, &format!("emb.sem.blk{i}"), cfg.semantic_heads, Some(mask), Projection::Plain)?;
    }
    Ok(h)
}

/// `[B·T_z, d] → [B·T_z, d_h]`: MLP plus positions, no attention.
pub fn generation_branch(g: &mut Graph, cfg: &EmbedderConfig, z: Var, batch: usize) -> Result<Var, DiffError> {
    let h = if cfg.generation_layers <= 1 { nn::linear(g, z, "emb.gen.lin")? } else { nn::mlp(g, z, "emb.gen.mlp")? };
    let pos = tiled(g, "emb.gen.pos", batch)?;
    g.add(h, pos)
}

/// Concatenate, RMS-normalize, project to `d_h`.
pub fn fuse_embeddings(g: &mut Graph, e_und: Var, e_gen: Var) -> Result<Var, DiffError> {
    if g.shape(e_und)[0] != g.shape(e_gen)[0] {
        return Err(DiffError::ShapeMismatch { op: "fuse_embeddings", lhs: g.shape(e_und).to_vec(), rhs: g.shape(e_gen).to_vec() });
    }
    let cat = g.concat_cols(&[e_und, e_gen])?;
    let n = nn::rms_norm(g, cat, "emb.fuse.norm")?;
    nn::mlp(g, n, "emb.fuse.mlp")
}

/// Full dual-path embedding of stacked latents.
pub fn embed_latents(g: &mut Graph, cfg: &EmbedderConfig, z: Var, batch: usize) -> Result<Var, DiffError> {
    let und = semantic_branch(g, cfg, z, batch)?;
    let gen = generation_branch(g, cfg, z, batch)?;
    fuse_embeddings(g, und, gen)
}

fn routing_columns(g: &mut Graph, modalities: &[Modality], batch: usize) -> (Var, Var) {
    let n = modalities.len() * batch;
    let mut text = Tensor::zeros(&[n, 1]);
    let mut motion = Tensor::zeros(&[n, 1]);
    for b in 0..batch {
        for (i, m) in modalities.iter().enumerate() {
            let r = b * modalities.len() + i;
            if m.uses_motion_adapter() {
                motion.set(r, 0, 1.0);
            } else {
                text.set(r, 0, 1.0);
            }
        }
    }
    (g.constant(text), g.constant(motion))
}

/// One routed projection `y_i = x_i W + b + x_i A_m B_m`, where `m` is the
/// adapter branch of token `i`'s modality.
pub fn routed_lora_forward(g: &mut Graph, x: Var, modalities: &[Modality], name: &str) -> Result<Var, DiffError> {
    let rows = g.shape(x)[0];
    if modalities.len() != rows {
        return Err(DiffError::ShapeMismatch { op: "routed_lora", lhs: vec![rows], rhs: vec![modalities.len()] });
    }
    let (text_rows, motion_rows) = routing_columns(g, modalities, 1);
    nn::project(g, x, name, Projection::Routed { text_rows, motion_rows })
}

/// Extra parameters of both adapter branches relative to the base
/// projections: `Σ 2·r·(d_in + d_out) / Σ d_in·d_out`.
pub fn lora_overhead(base_dims: &[(usize, usize)], rank: usize) -> f64 {
    let extra: usize = base_dims.iter().map(|(i, o)| 2 * rank * (i + o)).sum();
    let base: usize = base_dims.iter().map(|(i, o)| i * o).sum();
    extra as f64 / base as f64
}

/// Base shapes of the attention projections in a backbone.
pub fn attention_projection_dims(cfg: &BackboneConfig) -> Vec<(usize, usize)> {
    vec![(cfg.hidden, cfg.hidden); 4 * cfg.blocks]
}

/// Transformer stack over `batch` sequences, each laid out as `layout`,
/// stacked along rows.
pub fn backbone_forward(g: &mut Graph, cfg: &BackboneConfig, tokens: Var, layout: &SegmentLayout, batch: usize) -> Result<Var, DiffError> {
    let l = layout.len();
    if g.shape(tokens)[0] != l * batch {
        return Err(DiffError::ShapeMismatch { op: "backbone", lhs: g.shape(tokens).to_vec(), rhs: vec![l * batch, cfg.hidden] });
    }
    let mask = g.constant(nn::tile_mask(&build_hybrid_mask(layout), batch));
    let (text_rows, motion_rows) = routing_columns(g, &layout.modalities(), batch);
    let proj = Projection::Routed { text_rows, motion_rows };
    let mut h = tokens;
    for i in 0..cfg.blocks {
        h = nn::block(g, h, &format!("bb.blk{i}"), cfg.heads, Some(mask), proj)?;
    }
    nn::rms_norm(g, h, "bb.norm_out")
}

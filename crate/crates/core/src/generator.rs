//! Latent generator: embedder, backbone and flow head wired together, with
//! the two conditioning routes used in training. Self-conditioning feeds a
//! (degraded) latent through the embedder as one motion span; class
//! conditioning prepends a class token to a span of mask-token queries.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    self, backbone_forward, embed_latents, init_backbone, init_embedder, BackboneConfig, EmbedderConfig, LatentShape,
    Modality, SegmentLayout,
};
use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::flow::{self, FlowConfig};
use crate::nn::Initializer;

pub const MASK_TOKEN: &str = "lra.mask_token";
pub const CLASS_TABLE: &str = "gen.class_emb";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GeneratorConfig {
    pub embedder: EmbedderConfig,
    pub backbone: BackboneConfig,
    pub flow: FlowConfig,
    pub classes: usize,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self { embedder: EmbedderConfig::default(), backbone: BackboneConfig::default(), flow: FlowConfig::default(), classes: 3 }
    }
}

impl GeneratorConfig {
    /// Row of the class table holding the learned null condition.
    pub fn null_class(&self) -> usize {
        self.classes
    }
}

pub fn init_generator(store: &mut ParamStore, cfg: &GeneratorConfig, latent: LatentShape, seed: u64) {
    init_embedder(store, &cfg.embedder, latent, seed);
    init_backbone(store, &cfg.backbone, seed.wrapping_add(1));
    flow::init_flow_head(store, &cfg.flow, latent.tokens, latent.dim, cfg.backbone.hidden, seed.wrapping_add(2));
    let mut init = Initializer::new(store, seed.wrapping_add(3));
    init.normal(MASK_TOKEN, &[1, latent.dim], 0.02);
    init.normal(CLASS_TABLE, &[cfg.classes + 1, cfg.backbone.hidden], 0.02);
}

/// Parameters trained during latent self-reconstruction: embedder, flow
/// head, mask token and the motion adapters.
pub fn trains_in_self_conditioning(name: &str) -> bool {
    name.starts_with("emb.") || name.starts_with("flow.") || name == MASK_TOKEN || backbone::is_motion_adapter(name)
}

/// Parameters trained during class-conditional flow training. Base backbone
/// weights join only when `train_base` is set.
pub fn trains_in_class_conditioning(name: &str, train_base: bool) -> bool {
    !backbone::is_backbone_base(name) || train_base
}

/// Condition rows from latents in which dropped tokens are replaced by the
/// mask token. `inputs` is `[B·T_z, d]`; `dropped` flags rows to replace.
pub fn masked_latents(g: &mut Graph, inputs: &Tensor, dropped: &[bool]) -> Result<Var, DiffError> {
    let n = inputs.rows();
    assert_eq!(dropped.len(), n, "one drop flag per latent row");
    let keep = Tensor::from_vec(n, 1, dropped.iter().map(|&d| if d { 0.0 } else { 1.0 }).collect());
    let drop = Tensor::from_vec(n, 1, dropped.iter().map(|&d| if d { 1.0 } else { 0.0 }).collect());
    let x = g.constant(inputs.clone());
    let keep = g.constant(keep);
    let kept = g.mul(x, keep)?;
    let token = g.param(MASK_TOKEN)?;
    let drop = g.constant(drop);
    let fill = g.matmul(drop, token)?;
    g.add(kept, fill)
}

/// Backbone states for self-conditioning: the condition latents form one
/// motion span per sample.
pub fn self_condition_hidden(g: &mut Graph, cfg: &GeneratorConfig, cond: Var, batch: usize) -> Result<Var, DiffError> {
    let tokens = g.shape(cond)[0] / batch;
    let e = embed_latents(g, &cfg.embedder, cond, batch)?;
    let layout = SegmentLayout::from_lengths(&[(Modality::Motion, tokens)]).expect("non-empty span");
    backbone_forward(g, &cfg.backbone, e, &layout, batch)
}

/// Backbone states for class conditioning: `[Text: class][Motion: T_z
/// mask-token queries]` per sample; returns the motion rows.
pub fn class_condition_hidden(g: &mut Graph, cfg: &GeneratorConfig, labels: &[usize], tokens: usize) -> Result<Var, DiffError> {
    let batch = labels.len();
    let span = 1 + tokens;
    let mut onehot = Tensor::zeros(&[batch, cfg.classes + 1]);
    for (b, &c) in labels.iter().enumerate() {
        assert!(c <= cfg.classes, "class index {c} out of range");
        onehot.set(b, c, 1.0);
    }
    let onehot = g.constant(onehot);
    let table = g.param(CLASS_TABLE)?;
    let class_rows = g.matmul(onehot, table)?;

    let token = g.param(MASK_TOKEN)?;
    let spread = g.constant(Tensor::full(&[batch * tokens, 1], 1.0));
    let queries = g.matmul(spread, token)?;
    let queries = embed_latents(g, &cfg.embedder, queries, batch)?;

    let mut place_class = Tensor::zeros(&[batch * span, batch]);
    let mut place_motion = Tensor::zeros(&[batch * span, batch * tokens]);
    let mut pick_motion = Tensor::zeros(&[batch * tokens, batch * span]);
    for b in 0..batch {
        place_class.set(b * span, b, 1.0);
        for i in 0..tokens {
            place_motion.set(b * span + 1 + i, b * tokens + i, 1.0);
            pick_motion.set(b * tokens + i, b * span + 1 + i, 1.0);
        }
    }
    let pc = g.constant(place_class);
    let pm = g.constant(place_motion);
    let a = g.matmul(pc, class_rows)?;
    let m = g.matmul(pm, queries)?;
    let seq = g.add(a, m)?;
    let layout = SegmentLayout::from_lengths(&[(Modality::Text, 1), (Modality::Motion, tokens)]).expect("non-empty spans");
    let hidden = backbone_forward(g, &cfg.backbone, seq, &layout, batch)?;
    let pick = g.constant(pick_motion);
    g.matmul(pick, hidden)
}

/// Stacks equally shaped `[T_z, d]` latents into `[B·T_z, d]`.
pub fn stack(latents: &[&Tensor]) -> Tensor {
    let cols = latents[0].cols();
    let rows: usize = latents.iter().map(|t| t.rows()).sum();
    let mut data = Vec::with_capacity(rows * cols);
    for t in latents {
        assert_eq!(t.cols(), cols, "latent widths differ");
        data.extend_from_slice(t.data());
    }
    Tensor::from_vec(rows, cols, data)
}

/// Splits a `[B·T_z, d]` stack back into `B` latents.
pub fn unstack(t: &Tensor, batch: usize) -> Vec<Tensor> {
    let rows = t.rows() / batch;
    let cols = t.cols();
    (0..batch).map(|b| Tensor::from_vec(rows, cols, t.data()[b * rows * cols..(b + 1) * rows * cols].to_vec())).collect()
}

/// Velocity at `x_t` given precomputed conditioning states.
pub fn velocity(store: &ParamStore, cfg: &GeneratorConfig, x_t: &Tensor, t: f64, batch: usize, cond: &Tensor) -> Result<Tensor, DiffError> {
    flow::flow_head_eval(store, &cfg.flow, x_t, &vec![t; batch], cond)
}

/// Class-conditional flow objective: `flow_weight · MSE(v, z − z0)` with
/// `x_t = t·z + (1 − t)·z0`. `labels` already carry condition dropout.
pub fn class_flow_loss_graph(
    g: &mut Graph,
    cfg: &GeneratorConfig,
    latents: &[&Tensor],
    labels: &[usize],
    noise: &[Tensor],
    times: &[f64],
) -> Result<Var, flow::FlowError> {
    let tokens = latents[0].rows();
    let hidden = class_condition_hidden(g, cfg, labels, tokens)?;
    let mut x_t = Vec::with_capacity(latents.len());
    let mut target = Vec::with_capacity(latents.len());
    for ((z, z0), &t) in latents.iter().zip(noise).zip(times) {
        x_t.push(flow::interpolate(z0, z, t)?);
        target.push(flow::target_velocity(z0, z)?);
    }
    let x_t = g.constant(stack(&x_t.iter().collect::<Vec<_>>()));
    let target = g.constant(stack(&target.iter().collect::<Vec<_>>()));
    let v = flow::flow_head_forward(g, &cfg.flow, x_t, times, hidden)?;
    let l = g.mse(v, target)?;
    Ok(g.scale(l, cfg.flow.flow_weight))
}

fn class_hidden_value(store: &ParamStore, cfg: &GeneratorConfig, labels: &[usize], tokens: usize) -> Result<Tensor, DiffError> {
    let mut g = Graph::new(store);
    let h = class_condition_hidden(&mut g, cfg, labels, tokens)?;
    Ok(g.value(h).clone())
}

/// Guided class-conditional sampling from the given noise latents.
pub fn sample_classes(
    store: &ParamStore,
    cfg: &GeneratorConfig,
    labels: &[usize],
    noise: &[&Tensor],
    sampler: &flow::SamplerConfig,
) -> Result<Vec<Tensor>, flow::FlowError> {
    let batch = labels.len();
    let tokens = noise[0].rows();
    let cond = class_hidden_value(store, cfg, labels, tokens)?;
    let uncond = class_hidden_value(store, cfg, &vec![cfg.null_class(); batch], tokens)?;
    let x0 = stack(noise);
    let out = flow::euler_sample(
        |x, t, conditional| Ok(velocity(store, cfg, x, t, batch, if conditional { &cond } else { &uncond })?),
        &x0,
        sampler,
        true,
    )?;
    Ok(unstack(&out, batch))
}

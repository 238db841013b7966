//! Flow matching on motion latents: linear interpolation path, logit-normal
//! timesteps, an AdaLN-modulated velocity head and a guided Euler sampler.
//!
//! Head parameters live under `flow.*`.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::motion::{MotionRepr, JOINT_CHANNELS};
use crate::nn::{self, Initializer, Projection};

/// Latest time at which the point-target field is evaluated.
pub const ORACLE_T_MAX: f64 = 1.0 - 1e-6;

#[derive(Debug, thiserror::Error)]
pub enum FlowError {
    #[error("non-finite sampler state after step {0}")]
    NonFinite(usize),
    #[error("shape mismatch: {0:?} vs {1:?}")]
    Shape(Vec<usize>, Vec<usize>),
    #[error(transparent)]
    Diff(#[from] DiffError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowConfig {
    pub steps: usize,
    pub guidance: f64,
    pub shift: f64,
    pub shift_at_train: bool,
    pub shift_at_sample: bool,
    pub cond_dropout: f64,
    pub flow_weight: f64,
    /// Kept for parity with the full objective; the text loss is not
    /// implemented, so this weight is never applied.
    pub ntp_weight: f64,
    pub logit_mean: f64,
    pub logit_std: f64,
    pub head_blocks: usize,
    pub width: usize,
    pub heads: usize,
    pub time_dim: usize,
    pub joint_weight: f64,
    pub joint_warmup: u64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            guidance: 3.0,
            shift: 3.0,
            shift_at_train: true,
            shift_at_sample: true,
            cond_dropout: 0.1,
            flow_weight: 0.8,
            ntp_weight: 1.0,
            logit_mean: 0.0,
            logit_std: 1.0,
            head_blocks: 2,
            width: 64,
            heads: 4,
            time_dim: 64,
            joint_weight: 0.1,
            joint_warmup: 200,
        }
    }
}

impl FlowConfig {
    pub fn train_shift(&self) -> Option<f64> {
        self.shift_at_train.then_some(self.shift)
    }

    pub fn sample_shift(&self) -> Option<f64> {
        self.shift_at_sample.then_some(self.shift)
    }

    pub fn joint_aux_weight(&self, step: u64) -> f64 {
        if self.joint_warmup == 0 {
            self.joint_weight
        } else {
            self.joint_weight * (step as f64 / self.joint_warmup as f64).min(1.0)
        }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn logit(t: f64) -> f64 {
    (t / (1.0 - t)).ln()
}

/// Logit-normal draw `sigmoid(μ + σ·g)`.
pub fn sample_timestep<R: Rng + ?Sized>(rng: &mut R, cfg: &FlowConfig) -> f64 {
    let g: f64 = StandardNormal.sample(rng);
    sigmoid(cfg.logit_mean + cfg.logit_std * g)
}

/// `shift·t / (1 + (shift − 1)·t)`.
pub fn time_shift(t: f64, shift: f64) -> f64 {
    if shift == 1.0 {
        return t;
    }
    shift * t / (1.0 + (shift - 1.0) * t)
}

fn same_shape(a: &Tensor, b: &Tensor) -> Result<(), FlowError> {
    if a.shape() != b.shape() {
        return Err(FlowError::Shape(a.shape().to_vec(), b.shape().to_vec()));
    }
    Ok(())
}

/// `t·x1 + (1 − t)·x0`.
pub fn interpolate(x0: &Tensor, x1: &Tensor, t: f64) -> Result<Tensor, FlowError> {
    same_shape(x0, x1)?;
    Ok(x0.zip_map(x1, |a, b| t * b + (1.0 - t) * a))
}

pub fn target_velocity(x0: &Tensor, x1: &Tensor) -> Result<Tensor, FlowError> {
    same_shape(x0, x1)?;
    Ok(x1.zip_map(x0, |b, a| b - a))
}

pub fn flow_loss(pred: &Tensor, target: &Tensor) -> Result<f64, FlowError> {
    same_shape(pred, target)?;
    Ok(pred.zip_map(target, |a, b| (a - b) * (a - b)).mean())
}

/// `v_u + s·(v_c − v_u)`; `s = 1` returns `v_c` and `s = 0` returns `v_u`
/// unchanged.
pub fn cfg_velocity(v_uncond: &Tensor, v_cond: &Tensor, s: f64) -> Result<Tensor, FlowError> {
    same_shape(v_uncond, v_cond)?;
    if s == 1.0 {
        return Ok(v_cond.clone());
    }
    if s == 0.0 {
        return Ok(v_uncond.clone());
    }
    Ok(v_uncond.zip_map(v_cond, |u, c| u + s * (c - u)))
}

/// Replaces each sample's condition by `null` with probability `p`.
pub fn condition_dropout<T: Clone, R: Rng + ?Sized>(cond: &[T], null: &T, p: f64, rng: &mut R) -> Vec<T> {
    let p = p.clamp(0.0, 1.0);
    cond.iter().map(|c| if rng.random_bool(p) { null.clone() } else { c.clone() }).collect()
}

/// `N + 1` integration times from 0 to 1, optionally time-shifted.
pub fn time_grid(steps: usize, shift: Option<f64>) -> Vec<f64> {
    (0..=steps)
        .map(|k| {
            let u = if k == steps { 1.0 } else { k as f64 / steps as f64 };
            shift.map_or(u, |s| time_shift(u, s))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub guidance: f64,
    pub shift: Option<f64>,
}

impl SamplerConfig {
    pub fn from_flow(cfg: &FlowConfig) -> Self {
        Self { steps: cfg.steps, guidance: cfg.guidance, shift: cfg.sample_shift() }
    }
}

/// Euler integration of `velocity(x, t, conditional)` from `x0` at t = 0 to
/// t = 1. With `conditional`, each step combines an unconditional and a
/// conditional evaluation by guidance, except at guidance 1 where only the
/// conditional one is made.
pub fn euler_sample<F>(mut velocity: F, x0: &Tensor, cfg: &SamplerConfig, conditional: bool) -> Result<Tensor, FlowError>
where
    F: FnMut(&Tensor, f64, bool) -> Result<Tensor, FlowError>,
{
    assert!(cfg.steps >= 1, "at least one Euler step");
    let grid = time_grid(cfg.steps, cfg.shift);
    let mut x = x0.clone();
    for k in 0..cfg.steps {
        let (t, dt) = (grid[k], grid[k + 1] - grid[k]);
        let v = if !conditional {
            velocity(&x, t, false)?
        } else if cfg.guidance == 1.0 {
            velocity(&x, t, true)?
        } else {
            let vu = velocity(&x, t, false)?;
            let vc = velocity(&x, t, true)?;
            cfg_velocity(&vu, &vc, cfg.guidance)?
        };
        same_shape(&x, &v)?;
        x = x.zip_map(&v, |a, b| a + dt * b);
        if !x.is_finite() {
            return Err(FlowError::NonFinite(k));
        }
    }
    Ok(x)
}

/// Marginal velocity of the linear path toward a single point `x1`,
/// `(x1 − x)/(1 − t)` with `t` clamped below 1.
pub fn point_target_velocity(x1: &Tensor, x: &Tensor, t: f64) -> Tensor {
    let denom = 1.0 - t.min(ORACLE_T_MAX);
    x1.zip_map(x, |a, b| (a - b) / denom)
}

/// Mean SmoothL1 (β = 1) over the joint-position slice `[0, 67)`.
pub fn joint_aux_loss(decoded: &MotionRepr, target: &MotionRepr) -> Result<f64, FlowError> {
    if decoded.frames() != target.frames() {
        return Err(FlowError::Shape(vec![decoded.frames()], vec![target.frames()]));
    }
    let mut sum = 0.0;
    for t in 0..decoded.frames() {
        for (a, b) in decoded.frame(t)[..JOINT_CHANNELS].iter().zip(&target.frame(t)[..JOINT_CHANNELS]) {
            let d = (a - b).abs();
            sum += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        }
    }
    Ok(sum / (decoded.frames() * JOINT_CHANNELS) as f64)
}

/// Graph form of [`joint_aux_loss`] on `[rows, 269]` stacks.
pub fn joint_aux_loss_graph(g: &mut Graph, decoded: Var, target: Var) -> Result<Var, DiffError> {
    let a = g.slice_cols(decoded, 0, JOINT_CHANNELS)?;
    let b = g.slice_cols(target, 0, JOINT_CHANNELS)?;
    g.smooth_l1(a, b, 1.0)
}

pub fn init_flow_head(store: &mut ParamStore, cfg: &FlowConfig, tokens: usize, latent_dim: usize, cond_dim: usize, seed: u64) {
    let mut init = Initializer::new(store, seed);
    let w = cfg.width;
    init.linear("flow.in", latent_dim, w);
    init.linear("flow.cond", cond_dim, w);
    init.normal("flow.pos", &[tokens, w], 0.02);
    init.mlp("flow.time", cfg.time_dim, w, w);
    for i in 0..cfg.head_blocks {
        let name = format!("flow.blk{i}");
        init.linear_zero(&format!("{name}.ada"), w, 4 * w);
        for p in ["q", "k", "v", "o"] {
            init.linear(&format!("{name}.attn.{p}"), w, w);
        }
        init.mlp(&format!("{name}.mlp"), w, 2 * w, w);
    }
    init.linear_zero("flow.final.ada", w, 2 * w);
    init.linear_zero("flow.out", w, latent_dim);
}

fn modulate(g: &mut Graph, x: Var, shift: Var, scale: Var) -> Result<Var, DiffError> {
    let n = g.layer_norm_rows(x, nn::NORM_EPS);
    let s = g.offset(scale, 1.0);
    let y = g.mul(n, s)?;
    g.add(y, shift)
}

/// Velocity prediction for `batch` stacked latents `x_t: [B·T_z, d]` at
/// per-sample times `t`, conditioned token-wise on `cond: [B·T_z, d_c]`.
pub fn flow_head_forward(g: &mut Graph, cfg: &FlowConfig, x_t: Var, t: &[f64], cond: Var) -> Result<Var, DiffError> {
    let batch = t.len();
    let rows = g.shape(x_t)[0];
    if batch == 0 || rows % batch != 0 || g.shape(cond)[0] != rows {
        return Err(DiffError::ShapeMismatch { op: "flow_head", lhs: g.shape(x_t).to_vec(), rhs: g.shape(cond).to_vec() });
    }
    let tokens = rows / batch;
    let w = cfg.width;

    let a = nn::linear(g, x_t, "flow.in")?;
    let c = nn::linear(g, cond, "flow.cond")?;
    let pos = g.param("flow.pos")?;
    let tile = g.constant(nn::tile_rows(batch, tokens));
    let pos = g.matmul(tile, pos)?;
    let h = g.add(a, c)?;
    let mut h = g.add(h, pos)?;

    let temb: Vec<f64> = t.iter().flat_map(|&ti| nn::timestep_embedding(ti, cfg.time_dim)).collect();
    let temb = g.constant(Tensor::from_vec(batch, cfg.time_dim, temb));
    let temb = nn::mlp(g, temb, "flow.time")?;
    let temb = g.silu(temb);
    let spread = g.constant(nn::expand_rows(batch, tokens));
    let temb = g.matmul(spread, temb)?;

    let mask = g.constant(nn::block_diagonal_mask(batch, tokens));
    for i in 0..cfg.head_blocks {
        let name = format!("flow.blk{i}");
        let m = nn::linear(g, temb, &format!("{name}.ada"))?;
        let parts: Vec<Var> = (0..4).map(|k| g.slice_cols(m, k * w, (k + 1) * w)).collect::<Result<_, _>>()?;
        let x = modulate(g, h, parts[0], parts[1])?;
        let att = nn::attention(g, x, &format!("{name}.attn"), cfg.heads, Some(mask), Projection::Plain)?;
        h = g.add(h, att)?;
        let x = modulate(g, h, parts[2], parts[3])?;
        let mlp = nn::mlp(g, x, &format!("{name}.mlp"))?;
        h = g.add(h, mlp)?;
    }
    let m = nn::linear(g, temb, "flow.final.ada")?;
    let shift = g.slice_cols(m, 0, w)?;
    let scale = g.slice_cols(m, w, 2 * w)?;
    let x = modulate(g, h, shift, scale)?;
    nn::linear(g, x, "flow.out")
}

/// Tensor-level head evaluation.
pub fn flow_head_eval(store: &ParamStore, cfg: &FlowConfig, x_t: &Tensor, t: &[f64], cond: &Tensor) -> Result<Tensor, DiffError> {
    let mut g = Graph::new(store);
    let x = g.constant(x_t.clone());
    let c = g.constant(cond.clone());
    let v = flow_head_forward(&mut g, cfg, x, t, c)?;
    Ok(g.value(v).clone())
}

//! Cross-modal aligned motion VAE.
//!
//! A shared per-frame front-end feeds two encoders: a motion-only encoder
//! (used at inference) and a vision-fused encoder that also sees a reference
//! image. During training the motion posterior is pulled toward the fused
//! posterior with a reverse KL whose teacher side is detached.
//!
//! Parameter prefixes:
//!
//! * `vae.front.*` shared front-end
//! * `vae.enc_m.*`, `vae.head_m.*` motion encoder
//! * `vae.vis.*`, `vae.fuse_in.*`, `vae.enc_f.*`, `vae.head_f.*` fused encoder
//! * `vae.dec.*` decoder

use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::motion::{MotionRepr, JOINT_COUNT, REPR_DIM};
use crate::nn::{self, Initializer, Projection};
use crate::synth::FeatureMap;

pub const LOG_VAR_MIN: f64 = -30.0;
pub const LOG_VAR_MAX: f64 = 20.0;

/// Names of parameters owned by the fused encoder alone.
pub fn is_fused_exclusive(name: &str) -> bool {
    ["vae.vis.", "vae.fuse_in.", "vae.enc_f.", "vae.head_f."].iter().any(|p| name.starts_with(p))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeConfig {
    /// Frames per motion clip.
    pub frames: usize,
    /// Latent tokens; `0` means `ceil(frames / 8)`.
    pub latent_tokens: usize,
    pub latent_dim: usize,
    pub width: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub heads: usize,
    pub skip: bool,
    pub lambda_kl: f64,
    pub lambda_align: f64,
    pub align_warmup: u64,
    pub vision_dim: usize,
    pub feature_channels: usize,
}

impl Default for VaeConfig {
    fn default() -> Self {
        Self {
            frames: 32,
            latent_tokens: 0,
            latent_dim: 16,
            width: 64,
            encoder_layers: 4,
            decoder_layers: 4,
            heads: 4,
            skip: true,
            lambda_kl: 1e-4,
            lambda_align: 1e-3,
            align_warmup: 500,
            vision_dim: 16,
            feature_channels: 32,
        }
    }
}

impl VaeConfig {
    pub fn tokens(&self) -> usize {
        if self.latent_tokens == 0 {
            self.frames.div_ceil(8).max(1)
        } else {
            self.latent_tokens
        }
    }

    /// Frames per latent token; the last window may be shorter.
    pub fn stride(&self) -> usize {
        self.frames.div_ceil(self.tokens())
    }
}

/// Diagonal Gaussian over `T_z × d` latents.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianPosterior {
    pub mean: Tensor,
    pub log_var: Tensor,
}

/// Posterior parameters as graph nodes, batch stacked along rows.
#[derive(Debug, Clone, Copy)]
pub struct PosteriorVars {
    pub mean: Var,
    pub log_var: Var,
}

/// Reference image input for the fused encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct VisionInput {
    pub feature_map: FeatureMap,
    pub joints2d: [[f64; 2]; JOINT_COUNT],
}

/// One training example. `motion` is already standardized.
#[derive(Debug, Clone, PartialEq)]
pub struct VaeSample {
    pub motion: MotionRepr,
    pub vision: Option<VisionInput>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub recon: f64,
    pub kl_phi: f64,
    pub kl_psi: Option<f64>,
    pub align: Option<f64>,
    pub total: f64,
    pub align_weight: f64,
}

/// Graph handles for the loss terms.
#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub recon: Var,
    pub kl_phi: Var,
    pub kl_psi: Option<Var>,
    pub align: Option<Var>,
    pub total: Var,
}

pub fn init_vae(store: &mut ParamStore, cfg: &VaeConfig, seed: u64) {
    let mut init = Initializer::new(store, seed);
    let (w, t, tz, d) = (cfg.width, cfg.frames, cfg.tokens(), cfg.latent_dim);
    init.linear("vae.front.in", REPR_DIM, w);
    init.normal("vae.front.frame_pos", &[t, w], 0.02);
    init.norm("vae.front.norm", w);
    init.mlp("vae.front.mlp", w, 2 * w, w);
    init.normal("vae.front.token_pos", &[tz, w], 0.02);
    init_skip_stack(&mut init, "vae.enc_m", cfg.encoder_layers, w, cfg.skip);
    init.norm("vae.enc_m.norm_out", w);
    init.linear("vae.head_m", w, 2 * d);

    init.linear("vae.vis.proj", cfg.feature_channels, cfg.vision_dim);
    init.linear("vae.fuse_in", w + cfg.vision_dim, w);
    init_skip_stack(&mut init, "vae.enc_f", cfg.encoder_layers, w, cfg.skip);
    init.norm("vae.enc_f.norm_out", w);
    init.linear("vae.head_f", w, 2 * d);

    init.linear("vae.dec.in", d, w);
    init.normal("vae.dec.token_pos", &[tz, w], 0.02);
    init_skip_stack(&mut init, "vae.dec", cfg.decoder_layers, w, cfg.skip);
    init.norm("vae.dec.norm_mid", w);
    init.normal("vae.dec.frame_pos", &[t, w], 0.02);
    for i in 0..2 {
        init.norm(&format!("vae.dec.frame{i}.norm"), w);
        init.mlp(&format!("vae.dec.frame{i}.mlp"), w, 2 * w, w);
    }
    init.norm("vae.dec.norm_out", w);
    init.linear("vae.dec.out", w, REPR_DIM);
}

fn skip_from(i: usize, layers: usize) -> Option<usize> {
    let mirror = layers - 1 - i;
    (i >= layers.div_ceil(2) && mirror < i).then_some(mirror)
}

fn init_skip_stack(init: &mut Initializer, prefix: &str, layers: usize, w: usize, skip: bool) {
    for i in 0..layers {
        if skip && skip_from(i, layers).is_some() {
            init.linear(&format!("{prefix}.skip{i}"), 2 * w, w);
        }
        init.block(&format!("{prefix}.blk{i}"), w, 2 * w, None);
    }
}

/// Encoder stack whose layer `i` in the upper half also receives the output
/// of layer `N - 1 - i` (concatenated, then projected back to width).
fn skip_stack(g: &mut Graph, x: Var, prefix: &str, cfg: &VaeConfig, layers: usize, mask: Var) -> Result<Var, DiffError> {
    let mut outs: Vec<Var> = Vec::with_capacity(layers);
    let mut x = x;
    for i in 0..layers {
        if let (true, Some(m)) = (cfg.skip, skip_from(i, layers)) {
            let cat = g.concat_cols(&[x, outs[m]])?;
            x = nn::linear(g, cat, &format!("{prefix}.skip{i}"))?;
        }
        x = nn::block(g, x, &format!("{prefix}.blk{i}"), cfg.heads, Some(mask), Projection::Plain)?;
        outs.push(x);
    }
    Ok(x)
}

/// `[B·T_z, B·T]` strided mean pooling.
pub fn pooling_matrix(cfg: &VaeConfig, batch: usize) -> Tensor {
    let (t, tz, s) = (cfg.frames, cfg.tokens(), cfg.stride());
    let mut m = Tensor::zeros(&[batch * tz, batch * t]);
    for b in 0..batch {
        for k in 0..tz {
            let lo = (k * s).min(t);
            let hi = ((k + 1) * s).min(t);
            for f in lo..hi {
                m.set(b * tz + k, b * t + f, 1.0 / (hi - lo) as f64);
            }
        }
    }
    m
}

/// `[B·T, B·T_z]` nearest-token repeat followed by a `[1/4, 1/2, 1/4]`
/// temporal smoothing with replicated edges.
pub fn unpooling_matrix(cfg: &VaeConfig, batch: usize) -> Tensor {
    let (t, tz, s) = (cfg.frames, cfg.tokens(), cfg.stride());
    let token_of = |f: usize| (f / s).min(tz - 1);
    let mut m = Tensor::zeros(&[batch * t, batch * tz]);
    for b in 0..batch {
        for f in 0..t {
            let taps = [(f.saturating_sub(1), 0.25), (f, 0.5), ((f + 1).min(t - 1), 0.25)];
            for (src, w) in taps {
                let (r, c) = (b * t + f, b * tz + token_of(src));
                m.set(r, c, m.get(r, c) + w);
            }
        }
    }
    m
}

fn tiled(g: &mut Graph, name: &str, batch: usize) -> Result<Var, DiffError> {
    let table = g.param(name)?;
    let n = g.shape(table)[0];
    let tile = g.constant(nn::tile_rows(batch, n));
    g.matmul(tile, table)
}

fn motion_matrix(samples: &[&MotionRepr], frames: usize) -> Result<Tensor, DiffError> {
    let mut data = Vec::with_capacity(samples.len() * frames * REPR_DIM);
    for m in samples {
        if m.frames() != frames {
            return Err(DiffError::DataLength { shape: vec![frames, REPR_DIM], len: m.data().len() });
        }
        data.extend_from_slice(m.data());
    }
    Ok(Tensor::from_vec(samples.len() * frames, REPR_DIM, data))
}

/// Shared front-end: per-frame features pooled to latent tokens,
/// `[B·T, 269] → [B·T_z, w]`.
pub fn front_end(g: &mut Graph, cfg: &VaeConfig, x: Var, batch: usize) -> Result<Var, DiffError> {
    let h = nn::linear(g, x, "vae.front.in")?;
    let pos = tiled(g, "vae.front.frame_pos", batch)?;
    let h = g.add(h, pos)?;
    let n = nn::rms_norm(g, h, "vae.front.norm")?;
    let m = nn::mlp(g, n, "vae.front.mlp")?;
    let h = g.add(h, m)?;
    let pool = g.constant(pooling_matrix(cfg, batch));
    let tokens = g.matmul(pool, h)?;
    let tpos = tiled(g, "vae.front.token_pos", batch)?;
    g.add(tokens, tpos)
}

fn posterior_head(g: &mut Graph, cfg: &VaeConfig, h: Var, norm: &str, head: &str) -> Result<PosteriorVars, DiffError> {
    let h = nn::rms_norm(g, h, norm)?;
    let out = nn::linear(g, h, head)?;
    let d = cfg.latent_dim;
    let mean = g.slice_cols(out, 0, d)?;
    let lv = g.slice_cols(out, d, 2 * d)?;
    let log_var = g.clamp(lv, LOG_VAR_MIN, LOG_VAR_MAX);
    Ok(PosteriorVars { mean, log_var })
}

/// Motion encoder on front-end tokens.
pub fn motion_encoder(g: &mut Graph, cfg: &VaeConfig, tokens: Var, batch: usize) -> Result<PosteriorVars, DiffError> {
    let mask = g.constant(nn::block_diagonal_mask(batch, cfg.tokens()));
    let h = skip_stack(g, tokens, "vae.enc_m", cfg, cfg.encoder_layers, mask)?;
    posterior_head(g, cfg, h, "vae.enc_m.norm_out", "vae.head_m")
}

/// Joint-pooled grid samples, one `[1, C]` row per image.
pub fn pooled_visual_features(inputs: &[&VisionInput]) -> Tensor {
    let c = inputs.first().map_or(0, |v| v.feature_map.channels);
    let mut data = Vec::with_capacity(inputs.len() * c);
    for v in inputs {
        let s = grid_sample_at_joints(&v.feature_map, &v.joints2d);
        for ch in 0..c {
            data.push((0..JOINT_COUNT).map(|j| s.get(j, ch)).sum::<f64>() / JOINT_COUNT as f64);
        }
    }
    Tensor::from_vec(inputs.len(), c, data)
}

/// Vision-fused encoder on front-end tokens of `n` samples and their pooled
/// visual features `[n, C]`.
pub fn fused_encoder(g: &mut Graph, cfg: &VaeConfig, tokens: Var, visual: Var, n: usize) -> Result<PosteriorVars, DiffError> {
    let v = nn::linear(g, visual, "vae.vis.proj")?;
    let spread = g.constant(nn::expand_rows(n, cfg.tokens()));
    let v = g.matmul(spread, v)?;
    let cat = g.concat_cols(&[tokens, v])?;
    let h = nn::linear(g, cat, "vae.fuse_in")?;
    let mask = g.constant(nn::block_diagonal_mask(n, cfg.tokens()));
    let h = skip_stack(g, h, "vae.enc_f", cfg, cfg.encoder_layers, mask)?;
    posterior_head(g, cfg, h, "vae.enc_f.norm_out", "vae.head_f")
}

/// Decoder, `[B·T_z, d] → [B·T, 269]`.
pub fn decoder(g: &mut Graph, cfg: &VaeConfig, z: Var, batch: usize) -> Result<Var, DiffError> {
    let h = nn::linear(g, z, "vae.dec.in")?;
    let pos = tiled(g, "vae.dec.token_pos", batch)?;
    let h = g.add(h, pos)?;
    let mask = g.constant(nn::block_diagonal_mask(batch, cfg.tokens()));
    let h = skip_stack(g, h, "vae.dec", cfg, cfg.decoder_layers, mask)?;
    let h = nn::rms_norm(g, h, "vae.dec.norm_mid")?;
    let up = g.constant(unpooling_matrix(cfg, batch));
    let h = g.matmul(up, h)?;
    let fpos = tiled(g, "vae.dec.frame_pos", batch)?;
    let mut h = g.add(h, fpos)?;
    for i in 0..2 {
        let n = nn::rms_norm(g, h, &format!("vae.dec.frame{i}.norm"))?;
        let m = nn::mlp(g, n, &format!("vae.dec.frame{i}.mlp"))?;
        h = g.add(h, m)?;
    }
    let h = nn::rms_norm(g, h, "vae.dec.norm_out")?;
    nn::linear(g, h, "vae.dec.out")
}

fn posterior_value(g: &Graph, p: PosteriorVars) -> GaussianPosterior {
    GaussianPosterior { mean: g.value(p.mean).clone(), log_var: g.value(p.log_var).clone() }
}

fn split_rows(t: &Tensor, n: usize) -> Vec<Tensor> {
    let rows = t.rows() / n;
    (0..n)
        .map(|i| Tensor::from_vec(rows, t.cols(), t.data()[i * rows * t.cols()..(i + 1) * rows * t.cols()].to_vec()))
        .collect()
}

/// Motion-only posteriors for standardized motions.
pub fn encode_motion_batch(store: &ParamStore, cfg: &VaeConfig, motions: &[&MotionRepr]) -> Result<Vec<GaussianPosterior>, DiffError> {
    let mut g = Graph::new(store);
    let x = g.constant(motion_matrix(motions, cfg.frames)?);
    let tokens = front_end(&mut g, cfg, x, motions.len())?;
    let post = motion_encoder(&mut g, cfg, tokens, motions.len())?;
    let p = posterior_value(&g, post);
    Ok(split_rows(&p.mean, motions.len())
        .into_iter()
        .zip(split_rows(&p.log_var, motions.len()))
        .map(|(mean, log_var)| GaussianPosterior { mean, log_var })
        .collect())
}

pub fn encode_motion(store: &ParamStore, cfg: &VaeConfig, m: &MotionRepr) -> Result<GaussianPosterior, DiffError> {
    Ok(encode_motion_batch(store, cfg, &[m])?.remove(0))
}

pub fn encode_fused(store: &ParamStore, cfg: &VaeConfig, m: &MotionRepr, vision: &VisionInput) -> Result<GaussianPosterior, DiffError> {
    let mut g = Graph::new(store);
    let x = g.constant(motion_matrix(&[m], cfg.frames)?);
    let tokens = front_end(&mut g, cfg, x, 1)?;
    let vis = g.constant(pooled_visual_features(&[vision]));
    let p = fused_encoder(&mut g, cfg, tokens, vis, 1)?;
    Ok(posterior_value(&g, p))
}

/// Decodes latents (each `T_z × d`) to standardized motions of
/// `cfg.frames` frames.
pub fn decode_batch(store: &ParamStore, cfg: &VaeConfig, zs: &[&Tensor]) -> Result<Vec<MotionRepr>, DiffError> {
    let mut data = Vec::new();
    for z in zs {
        if z.shape() != [cfg.tokens(), cfg.latent_dim] {
            return Err(DiffError::ShapeMismatch { op: "decode", lhs: z.shape().to_vec(), rhs: vec![cfg.tokens(), cfg.latent_dim] });
        }
        data.extend_from_slice(z.data());
    }
    let mut g = Graph::new(store);
    let z = g.constant(Tensor::from_vec(zs.len() * cfg.tokens(), cfg.latent_dim, data));
    let out = decoder(&mut g, cfg, z, zs.len())?;
    let v = g.value(out);
    if !v.is_finite() {
        return Err(DiffError::NonFiniteValue("decoder output".into()));
    }
    Ok(split_rows(v, zs.len())
        .into_iter()
        .map(|t| MotionRepr::new(cfg.frames, t.into_data()).expect("decoder width is 269"))
        .collect())
}

pub fn decode_motion(store: &ParamStore, cfg: &VaeConfig, z: &Tensor) -> Result<MotionRepr, DiffError> {
    Ok(decode_batch(store, cfg, &[z])?.remove(0))
}

/// `μ + exp(½ log σ²) ⊙ ε`.
pub fn sample_posterior(post: &GaussianPosterior, eps: &Tensor) -> Result<Tensor, DiffError> {
    if eps.shape() != post.mean.shape() {
        return Err(DiffError::ShapeMismatch { op: "sample_posterior", lhs: post.mean.shape().to_vec(), rhs: eps.shape().to_vec() });
    }
    let std = post.log_var.map(|lv| (0.5 * lv).exp());
    Ok(post.mean.zip_map(&std.zip_map(eps, |s, e| s * e), |m, n| m + n))
}

pub fn sample_posterior_graph(g: &mut Graph, post: PosteriorVars, eps: Var) -> Result<Var, DiffError> {
    let half = g.scale(post.log_var, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    g.add(post.mean, noise)
}

/// `½ Σ_k (μ² + σ² − log σ² − 1)` summed over latent dims, averaged over
/// tokens.
pub fn kl_to_standard_normal(post: &GaussianPosterior) -> f64 {
    let rows = post.mean.rows() as f64;
    let s: f64 = post.mean.data().iter().zip(post.log_var.data()).map(|(m, lv)| m * m + lv.exp() - lv - 1.0).sum();
    0.5 * s / rows
}

/// Reverse KL `D(student ‖ teacher)` summed over dims, averaged over tokens.
pub fn kl_between(student: &GaussianPosterior, teacher: &GaussianPosterior) -> Result<f64, DiffError> {
    if student.mean.shape() != teacher.mean.shape() {
        return Err(DiffError::ShapeMismatch { op: "kl_between", lhs: student.mean.shape().to_vec(), rhs: teacher.mean.shape().to_vec() });
    }
    let mut s = 0.0;
    for i in 0..student.mean.len() {
        let (ms, ls) = (student.mean.data()[i], student.log_var.data()[i]);
        let (mt, lt) = (teacher.mean.data()[i], teacher.log_var.data()[i]);
        s += lt - ls + ((ls.exp() + (ms - mt).powi(2)) / lt.exp()) - 1.0;
    }
    Ok(0.5 * s / student.mean.rows() as f64)
}

/// Sum over every entry of the standard-normal KL integrand (times ½).
fn kl_std_sum(g: &mut Graph, p: PosteriorVars) -> Result<Var, DiffError> {
    let m2 = g.square(p.mean);
    let var = g.exp(p.log_var);
    let a = g.add(m2, var)?;
    let a = g.sub(a, p.log_var)?;
    let a = g.offset(a, -1.0);
    let s = g.sum(a);
    Ok(g.scale(s, 0.5))
}

/// Sum over every entry of the reverse-KL integrand (times ½). The teacher
/// is detached here, so no gradient reaches it.
pub fn kl_between_sum(g: &mut Graph, student: PosteriorVars, teacher: PosteriorVars) -> Result<Var, DiffError> {
    let tm = g.detach(teacher.mean);
    let tl = g.detach(teacher.log_var);
    let var_s = g.exp(student.log_var);
    let diff = g.sub(student.mean, tm)?;
    let d2 = g.square(diff);
    let num = g.add(var_s, d2)?;
    let neg = g.scale(tl, -1.0);
    let inv_t = g.exp(neg);
    let ratio = g.mul(num, inv_t)?;
    let a = g.sub(tl, student.log_var)?;
    let a = g.add(a, ratio)?;
    let a = g.offset(a, -1.0);
    let s = g.sum(a);
    Ok(g.scale(s, 0.5))
}

pub fn alignment_weight(step: u64, cfg: &VaeConfig) -> f64 {
    if cfg.align_warmup == 0 {
        return cfg.lambda_align;
    }
    cfg.lambda_align * (step as f64 / cfg.align_warmup as f64).min(1.0)
}

/// Builds the full training objective for a batch. `eps` holds one
/// standard-normal `T_z × d` draw per sample.
///
/// Paired samples decode from the fused latent and contribute `kl_psi` and
/// the alignment term; unpaired samples decode from the motion latent. Each
/// term is a per-sample mean averaged over the whole batch, with unpaired
/// samples counting as zero for the paired-only terms, which are absent when
/// nothing in the batch is paired.
pub fn vae_loss_graph(g: &mut Graph, cfg: &VaeConfig, batch: &[VaeSample], eps: &[Tensor], step: u64) -> Result<LossVars, DiffError> {
    let b = batch.len();
    let tz = cfg.tokens();
    let motions: Vec<&MotionRepr> = batch.iter().map(|s| &s.motion).collect();
    let target = g.constant(motion_matrix(&motions, cfg.frames)?);
    let tokens = front_end(g, cfg, target, b)?;
    let post_m = motion_encoder(g, cfg, tokens, b)?;

    let mut eps_data = Vec::with_capacity(b * tz * cfg.latent_dim);
    for e in eps {
        eps_data.extend_from_slice(e.data());
    }
    let eps_all = Tensor::from_vec(b * tz, cfg.latent_dim, eps_data);
    let eps_v = g.constant(eps_all.clone());
    let z_m = sample_posterior_graph(g, post_m, eps_v)?;

    let paired: Vec<usize> = (0..b).filter(|&i| batch[i].vision.is_some()).collect();
    let norm = 1.0 / (b * tz) as f64;
    let (z, kl_psi, align) = if paired.is_empty() {
        (z_m, None, None)
    } else {
        let rows: Vec<usize> = paired.iter().flat_map(|&i| i * tz..(i + 1) * tz).collect();
        let sel = nn::select_rows(&rows, b * tz);
        let sel_v = g.constant(sel.clone());
        let paired_tokens = g.matmul(sel_v, tokens)?;
        let vis_inputs: Vec<&VisionInput> = paired.iter().map(|&i| batch[i].vision.as_ref().unwrap()).collect();
        let vis = g.constant(pooled_visual_features(&vis_inputs));
        let post_f = fused_encoder(g, cfg, paired_tokens, vis, paired.len())?;
        let eps_f = g.constant(sel.matmul(&eps_all));
        let z_f = sample_posterior_graph(g, post_f, eps_f)?;

        let student = PosteriorVars { mean: g.matmul(sel_v, post_m.mean)?, log_var: g.matmul(sel_v, post_m.log_var)? };
        let align = kl_between_sum(g, student, post_f)?;
        let align = g.scale(align, norm);
        let kl_psi = kl_std_sum(g, post_f)?;
        let kl_psi = g.scale(kl_psi, norm);

        let mut keep = Tensor::full(&[b * tz, 1], 1.0);
        for &r in &rows {
            keep.set(r, 0, 0.0);
        }
        let keep = g.constant(keep);
        let scatter = g.constant(sel.transpose());
        let z_f_full = g.matmul(scatter, z_f)?;
        let z_m_kept = g.mul(z_m, keep)?;
        (g.add(z_m_kept, z_f_full)?, Some(kl_psi), Some(align))
    };

    let recon_out = decoder(g, cfg, z, b)?;
    let recon = g.smooth_l1(recon_out, target, 1.0)?;
    let kl_phi = kl_std_sum(g, post_m)?;
    let kl_phi = g.scale(kl_phi, norm);

    let mut kl_total = kl_phi;
    if let Some(k) = kl_psi {
        kl_total = g.add(kl_total, k)?;
    }
    let kl_w = g.scale(kl_total, cfg.lambda_kl);
    let mut total = g.add(recon, kl_w)?;
    if let Some(a) = align {
        let aw = g.scale(a, alignment_weight(step, cfg));
        total = g.add(total, aw)?;
    }
    Ok(LossVars { recon, kl_phi, kl_psi, align, total })
}

pub fn breakdown(g: &Graph, cfg: &VaeConfig, v: &LossVars, step: u64) -> LossBreakdown {
    LossBreakdown {
        recon: g.value(v.recon).item(),
        kl_phi: g.value(v.kl_phi).item(),
        kl_psi: v.kl_psi.map(|k| g.value(k).item()),
        align: v.align.map(|a| g.value(a).item()),
        total: g.value(v.total).item(),
        align_weight: alignment_weight(step, cfg),
    }
}

/// Evaluates the objective without building gradients.
pub fn vae_loss(store: &ParamStore, cfg: &VaeConfig, batch: &[VaeSample], eps: &[Tensor], step: u64) -> Result<LossBreakdown, DiffError> {
    let mut g = Graph::new(store);
    let v = vae_loss_graph(&mut g, cfg, batch, eps, step)?;
    Ok(breakdown(&g, cfg, &v, step))
}

/// Bilinear samples of every channel at each joint, `[22, C]`. Coordinates
/// outside the map clamp to the border.
pub fn grid_sample_at_joints(fm: &FeatureMap, joints2d: &[[f64; 2]; JOINT_COUNT]) -> Tensor {
    let mut out = Tensor::zeros(&[JOINT_COUNT, fm.channels]);
    let (w, h) = (fm.width, fm.height);
    for (j, [px, py]) in joints2d.iter().enumerate() {
        let x = px.clamp(0.0, (w - 1) as f64);
        let y = py.clamp(0.0, (h - 1) as f64);
        let (x0, y0) = (x.floor() as usize, y.floor() as usize);
        let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
        let (fx, fy) = (x - x0 as f64, y - y0 as f64);
        for c in 0..fm.channels {
            let v = fm.at(c, y0, x0) * (1.0 - fx) * (1.0 - fy)
                + fm.at(c, y0, x1) * fx * (1.0 - fy)
                + fm.at(c, y1, x0) * (1.0 - fx) * fy
                + fm.at(c, y1, x1) * fx * fy;
            out.set(j, c, v);
        }
    }
    out
}

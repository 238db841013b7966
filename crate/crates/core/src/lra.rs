//! Latent self-reconstruction pre-training: the generator reconstructs a
//! latent from noise while conditioned on a degraded copy of itself, plus
//! the shuffled-condition control.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{DiffError, Graph, ParamStore, Tensor, Var};
use crate::flow::{self, FlowError, SamplerConfig};
use crate::generator::{self, GeneratorConfig};
use crate::metrics::{self, MetricError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BottleneckConfig {
    /// Range of the fraction of latent tokens kept.
    pub keep: [f64; 2],
    pub dropout: f64,
    pub noise: f64,
}

impl Default for BottleneckConfig {
    fn default() -> Self {
        Self { keep: [0.2, 0.5], dropout: 0.15, noise: 0.02 }
    }
}

/// A degraded condition: token values plus which tokens were dropped (to be
/// replaced by the mask token).
#[derive(Debug, Clone, PartialEq)]
pub struct Degraded {
    pub values: Tensor,
    pub dropped: Vec<bool>,
}

impl Degraded {
    pub fn kept(&self) -> usize {
        self.dropped.iter().filter(|d| !**d).count()
    }
}

/// Keeps `⌈f·T_z⌉` tokens (sorted, random, `f` uniform in the keep range),
/// zeroes entries with probability `dropout` and adds `N(0, noise²)`.
/// Dropped tokens carry zeros in `values`.
pub fn bottleneck_condition<R: Rng + ?Sized>(z: &Tensor, cfg: &BottleneckConfig, rng: &mut R) -> Degraded {
    let (tokens, dim) = (z.rows(), z.cols());
    let [lo, hi] = cfg.keep;
    let f = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let keep = ((f * tokens as f64).ceil() as usize).clamp(1, tokens);
    let mut order: Vec<usize> = (0..tokens).collect();
    order.shuffle(rng);
    let mut dropped = vec![true; tokens];
    for &i in &order[..keep] {
        dropped[i] = false;
    }
    let mut values = Tensor::zeros(&[tokens, dim]);
    for (i, &d) in dropped.iter().enumerate() {
        if d {
            continue;
        }
        for j in 0..dim {
            let mut v = z.get(i, j);
            if cfg.dropout > 0.0 && rng.random_bool(cfg.dropout) {
                v = 0.0;
            }
            if cfg.noise > 0.0 {
                let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, rng);
                v += cfg.noise * g;
            }
            values.set(i, j, v);
        }
    }
    Degraded { values, dropped }
}

/// Draws for one self-reconstruction batch.
#[derive(Debug, Clone)]
pub struct LraDraws {
    pub conditions: Vec<Degraded>,
    pub noise: Vec<Tensor>,
    pub times: Vec<f64>,
}

impl LraDraws {
    pub fn sample<R: Rng + ?Sized>(latents: &[&Tensor], gen: &GeneratorConfig, bottleneck: &BottleneckConfig, rng: &mut R) -> Self {
        let mut conditions = Vec::with_capacity(latents.len());
        let mut noise = Vec::with_capacity(latents.len());
        let mut times = Vec::with_capacity(latents.len());
        for z in latents {
            conditions.push(bottleneck_condition(z, bottleneck, rng));
            noise.push(Tensor::randn(z.shape(), 1.0, rng));
            let t = flow::sample_timestep(rng, &gen.flow);
            times.push(gen.flow.train_shift().map_or(t, |s| flow::time_shift(t, s)));
        }
        Self { conditions, noise, times }
    }
}

/// Mean squared error between the predicted velocity and `z − z0`, where the
/// head sees `x_t = t·z + (1 − t)·z0` and the backbone sees only the
/// degraded condition.
pub fn lra_loss_graph(g: &mut Graph, cfg: &GeneratorConfig, latents: &[&Tensor], draws: &LraDraws) -> Result<Var, FlowError> {
    let batch = latents.len();
    let cond_vals: Vec<&Tensor> = draws.conditions.iter().map(|d| &d.values).collect();
    let dropped: Vec<bool> = draws.conditions.iter().flat_map(|d| d.dropped.iter().copied()).collect();
    let cond = generator::masked_latents(g, &generator::stack(&cond_vals), &dropped)?;
    let hidden = generator::self_condition_hidden(g, cfg, cond, batch)?;

    let mut x_t = Vec::with_capacity(batch);
    let mut target = Vec::with_capacity(batch);
    for ((z, z0), &t) in latents.iter().zip(&draws.noise).zip(&draws.times) {
        x_t.push(flow::interpolate(z0, z, t)?);
        target.push(flow::target_velocity(z0, z)?);
    }
    let x_t = g.constant(generator::stack(&x_t.iter().collect::<Vec<_>>()));
    let target = g.constant(generator::stack(&target.iter().collect::<Vec<_>>()));
    let v = flow::flow_head_forward(g, &cfg.flow, x_t, &draws.times, hidden)?;
    Ok(g.mse(v, target)?)
}

/// Generated latents for each condition, integrating from the given noise.
pub fn reconstruct(
    store: &ParamStore,
    cfg: &GeneratorConfig,
    conditions: &[&Degraded],
    noise: &[&Tensor],
    sampler: &SamplerConfig,
) -> Result<Vec<Tensor>, FlowError> {
    let batch = conditions.len();
    let hidden = {
        let mut g = Graph::new(store);
        let vals: Vec<&Tensor> = conditions.iter().map(|d| &d.values).collect();
        let dropped: Vec<bool> = conditions.iter().flat_map(|d| d.dropped.iter().copied()).collect();
        let cond = generator::masked_latents(&mut g, &generator::stack(&vals), &dropped)?;
        let h = generator::self_condition_hidden(&mut g, cfg, cond, batch)?;
        g.value(h).clone()
    };
    let x0 = generator::stack(noise);
    let out = flow::euler_sample(|x, t, _| Ok(generator::velocity(store, cfg, x, t, batch, &hidden)?), &x0, sampler, true)?;
    Ok(generator::unstack(&out, batch))
}

/// A permutation with no fixed points (a single random cycle).
pub fn derangement<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..i);
        p.swap(i, j);
    }
    p
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShuffleReport {
    pub matched: f64,
    pub shuffled: f64,
    pub ratio: f64,
    /// Fréchet distance between generated and target latent tokens.
    pub frechet_matched: f64,
    pub frechet_shuffled: f64,
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("need at least 2 latents, got {0}")]
    TooFew(usize),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl From<DiffError> for EvalError {
    fn from(e: DiffError) -> Self {
        EvalError::Flow(e.into())
    }
}

fn token_rows(latents: &[Tensor]) -> Vec<Vec<f64>> {
    latents.iter().flat_map(|z| (0..z.rows()).map(move |i| z.row_slice(i).to_vec())).collect()
}

/// Reconstructs every latent from its own degraded condition and from a
/// deranged partner's, with the same noise per target.
pub fn shuffled_condition_eval(
    store: &ParamStore,
    cfg: &GeneratorConfig,
    latents: &[Tensor],
    bottleneck: &BottleneckConfig,
    sampler: &SamplerConfig,
    seed: u64,
) -> Result<ShuffleReport, EvalError> {
    let n = latents.len();
    if n < 2 {
        return Err(EvalError::TooFew(n));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let conditions: Vec<Degraded> = latents.iter().map(|z| bottleneck_condition(z, bottleneck, &mut rng)).collect();
    let noise: Vec<Tensor> = latents.iter().map(|z| Tensor::randn(z.shape(), 1.0, &mut rng)).collect();
    let perm = derangement(n, &mut rng);
    let noise_refs: Vec<&Tensor> = noise.iter().collect();

    let own: Vec<&Degraded> = conditions.iter().collect();
    let other: Vec<&Degraded> = perm.iter().map(|&j| &conditions[j]).collect();
    let matched = reconstruct(store, cfg, &own, &noise_refs, sampler)?;
    let shuffled = reconstruct(store, cfg, &other, &noise_refs, sampler)?;

    let err = |gen: &[Tensor]| -> Result<f64, FlowError> {
        let mut s = 0.0;
        for (a, b) in gen.iter().zip(latents) {
            s += flow::flow_loss(a, b)?;
        }
        Ok(s / n as f64)
    };
    let (m, s) = (err(&matched)?, err(&shuffled)?);
    let target_rows = token_rows(latents);
    Ok(ShuffleReport {
        matched: m,
        shuffled: s,
        ratio: s / m,
        frechet_matched: metrics::frechet_gaussian(&token_rows(&matched), &target_rows)?,
        frechet_shuffled: metrics::frechet_gaussian(&token_rows(&shuffled), &target_rows)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_keep_without_noise_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let z = Tensor::randn(&[6, 3], 1.0, &mut rng);
        let cfg = BottleneckConfig { keep: [1.0, 1.0], dropout: 0.0, noise: 0.0 };
        let d = bottleneck_condition(&z, &cfg, &mut rng);
        assert_eq!(d.values, z);
        assert!(d.dropped.iter().all(|x| !x));
    }

    #[test]
    fn kept_count_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = BottleneckConfig::default();
        for tokens in 2..20 {
            let z = Tensor::zeros(&[tokens, 2]);
            let lo = (0.2 * tokens as f64).ceil() as usize;
            let hi = (0.5 * tokens as f64).ceil() as usize;
            for _ in 0..50 {
                let k = bottleneck_condition(&z, &cfg, &mut rng).kept();
                assert!((lo..=hi).contains(&k), "{k} not in [{lo}, {hi}] for {tokens}");
            }
        }
    }

    #[test]
    fn derangements_have_no_fixed_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in 2..30 {
            let p = derangement(n, &mut rng);
            assert!(p.iter().enumerate().all(|(i, &j)| i != j));
            let mut s = p.clone();
            s.sort();
            assert_eq!(s, (0..n).collect::<Vec<_>>());
        }
    }
}

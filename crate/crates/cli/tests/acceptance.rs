//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails. The long criteria share one full pipeline run
//! (A5, A9, A10) and a second identical run for reproducibility (A12).
//!
//! Set `MLAT_ACCEPTANCE_OUT` to keep the run directories.

use std::collections::BTreeMap;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use mlat::backbone::{backbone_forward, build_hybrid_mask, init_backbone, is_adapter, verify_no_leakage, BackboneConfig, EmbedderConfig, LatentShape, Modality, SegmentLayout};
use mlat::corpus::{plan_corpus, synthesize, vision_input, CorpusConfig, ImageConfig};
use mlat::diff::{AdamW, Graph, Gradients, ParamStore, Tensor, Var};
use mlat::flow::{self, FlowConfig, SamplerConfig};
use mlat::generator::{self, GeneratorConfig};
use mlat::metrics::{self, frechet_from_stats};
use mlat::motion::{self, axis_angle, JointSequence, Normalizer, SkeletonDef, JOINT_COUNT, LAYOUT_WIDTHS, REPR_DIM};
use mlat::pipeline::{self, RunConfig, RunContext, Stage, StageTimes};
use mlat::synth::{gen_motion, MotionClass, MotionTag};
use mlat::vae::{self, GaussianPosterior, VaeConfig, VaeSample};
use nalgebra::{DMatrix, DVector, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn ensure(cond: bool, detail: String) -> Outcome {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn report(id: &str, limit_s: f64, f: impl FnOnce() -> Outcome) -> bool {
    let clock = Instant::now();
    let r = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|p| {
        let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
        Err(format!("panicked: {}", msg.unwrap_or_default()))
    });
    finish(id, clock.elapsed().as_secs_f64(), limit_s, r)
}

fn finish(id: &str, secs: f64, limit_s: f64, r: Outcome) -> bool {
    let in_time = secs < limit_s;
    let (ok, detail) = match r {
        Ok(d) => (in_time, d),
        Err(d) => (false, d),
    };
    let time = format!("{secs:.1}s of {limit_s:.0}s");
    let time = if in_time { time } else { format!("{time} OVER BUDGET") };
    println!("{id} {} {detail} [{time}]", if ok { "PASS" } else { "FAIL" });
    ok
}

// ---------------------------------------------------------------- A1

fn log_density(x: &[f64], mean: &[f64], log_var: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_var)
        .map(|((x, m), lv)| -0.5 * (std::f64::consts::TAU.ln() + lv + (x - m) * (x - m) / lv.exp()))
        .sum()
}

fn a1() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    let mut min_kl = f64::INFINITY;
    for _ in 0..100 {
        let d = rng.random_range(1..=8);
        let draw = |rng: &mut ChaCha8Rng| GaussianPosterior {
            mean: Tensor::randn(&[1, d], 1.0, rng),
            log_var: Tensor::uniform(&[1, d], 1.0, rng),
        };
        let (q, p) = (draw(&mut rng), draw(&mut rng));
        let closed = vae::kl_between(&q, &p).map_err(|e| e.to_string())?;
        let (qm, ql, pm, pl) = (q.mean.data(), q.log_var.data(), p.mean.data(), p.log_var.data());
        let n = 100_000;
        let mut acc = 0.0;
        let mut x = vec![0.0; d];
        let mut mirror = vec![0.0; d];
        // antithetic pairs: each draw and its reflection about the mean
        for _ in 0..n / 2 {
            for k in 0..d {
                let g: f64 = rng.sample(StandardNormal);
                let step = (0.5 * ql[k]).exp() * g;
                x[k] = qm[k] + step;
                mirror[k] = qm[k] - step;
            }
            acc += log_density(&x, qm, ql) - log_density(&x, pm, pl);
            acc += log_density(&mirror, qm, ql) - log_density(&mirror, pm, pl);
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - closed).abs() / closed);
        let selfkl = vae::kl_between(&q, &q).map_err(|e| e.to_string())?;
        min_kl = min_kl.min(closed);
        if selfkl != 0.0 {
            return Err(format!("kl(p,p) = {selfkl:e}"));
        }
    }
    ensure(worst < 0.02 && min_kl >= 0.0, format!("max MC relative error {:.3}% (antithetic pairs), kl(p,p) = 0, min kl {min_kl:.4}", worst * 100.0))
}

// ---------------------------------------------------------------- A2

const FD_STEP: f64 = 1e-5;

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / 1f64.max(a.abs()).max(n.abs())
}

/// Central differences at up to `per_tensor` entries of every parameter
/// selected by `wrt` (all entries when `per_tensor` is `None`).
fn fd_check(
    store: &ParamStore,
    analytic: &Gradients,
    wrt: &dyn Fn(&str) -> bool,
    per_tensor: Option<usize>,
    f: &dyn Fn(&ParamStore) -> f64,
) -> f64 {
    let mut worst: f64 = 0.0;
    for (name, grad) in analytic.iter().filter(|(n, _)| wrt(n)) {
        let idx: Vec<usize> = match per_tensor {
            None => (0..grad.len()).collect(),
            Some(k) => (0..grad.len()).step_by(grad.len().div_ceil(k).max(1)).collect(),
        };
        for i in idx {
            let at = |d: f64| {
                let mut s = store.clone();
                s.get_mut(name).unwrap().data_mut()[i] += d;
                f(&s)
            };
            worst = worst.max(rel_err(grad.data()[i], (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP)));
        }
    }
    worst
}

fn weighted_sum(g: &mut Graph, x: Var, seed: u64) -> Var {
    let shape = g.shape(x).to_vec();
    let w = g.constant(Tensor::randn(&shape, 1.0, &mut ChaCha8Rng::seed_from_u64(seed)));
    let p = g.mul(x, w).unwrap();
    g.sum(p)
}

fn graph_check(store: &ParamStore, build: &dyn Fn(&mut Graph) -> Var) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let root = build(&mut g);
        g.backward(root).unwrap()
    };
    let eval = |s: &ParamStore| {
        let mut g = Graph::new(s);
        let r = build(&mut g);
        g.value(r).item()
    };
    fd_check(store, &analytic, &|_| true, None, &eval)
}

fn away_from_zero(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor {
    Tensor::from_vec(r, c, (0..r * c).map(|_| rng.random_range(0.1..2.0) * if rng.random_bool(0.5) { 1.0 } else { -1.0 }).collect())
}

fn a2() -> Outcome {
    type Unary = fn(&mut Graph, Var) -> Var;
    let unary: Vec<(&str, Unary, bool)> = vec![
        ("relu", |g, x| g.relu(x), true),
        ("gelu", |g, x| g.gelu(x), false),
        ("silu", |g, x| g.silu(x), false),
        ("tanh", |g, x| g.tanh(x), false),
        ("exp", |g, x| g.exp(x), false),
        ("log", |g, x| {
            let s = g.square(x);
            let s = g.offset(s, 0.5);
            g.log(s)
        }, false),
        ("square", |g, x| g.square(x), false),
        ("scale", |g, x| g.scale(x, -1.7), false),
        ("offset", |g, x| g.offset(x, 0.3), false),
        ("transpose", |g, x| g.transpose(x), false),
        ("clamp", |g, x| g.clamp(x, -0.05, 0.05), true),
        ("softmax_rows", |g, x| g.softmax_rows(x), false),
        ("rms_norm_rows", |g, x| g.rms_norm_rows(x, 1e-6), false),
        ("layer_norm_rows", |g, x| g.layer_norm_rows(x, 1e-6), false),
        ("sum", |g, x| g.sum(x), false),
        ("mean", |g, x| g.mean(x), false),
        ("slice_cols", |g, x| {
            let c = g.shape(x)[1];
            g.slice_cols(x, c / 2, c).unwrap()
        }, false),
        ("slice_rows", |g, x| {
            let r = g.shape(x)[0];
            g.slice_rows(x, 0, r.div_ceil(2)).unwrap()
        }, false),
        ("concat_cols", |g, x| {
            let s = g.square(x);
            g.concat_cols(&[x, s]).unwrap()
        }, false),
        ("concat_rows", |g, x| {
            let t = g.tanh(x);
            g.concat_rows(&[t, x]).unwrap()
        }, false),
        ("broadcast_rows", |g, x| {
            let row = g.slice_rows(x, 0, 1).unwrap();
            g.broadcast_rows(row, 3).unwrap()
        }, false),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut per_op: BTreeMap<&str, f64> = BTreeMap::new();
    for trial in 0..3u64 {
        for (name, op, kinked) in &unary {
            let (r, c) = (rng.random_range(1..=6), rng.random_range(1..=6));
            let mut store = ParamStore::new();
            store.insert("x", if *kinked { away_from_zero(&mut rng, r, c) } else { Tensor::randn(&[r, c], 1.0, &mut rng) });
            let e = graph_check(&store, &|g| {
                let x = g.param("x").unwrap();
                let y = op(g, x);
                weighted_sum(g, y, trial)
            });
            let w = per_op.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
        let (r, k, c) = (rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6));
        for (br, bc) in [(r, c), (1, c), (r, 1), (1, 1)] {
            let mut store = ParamStore::new();
            store.insert("a", Tensor::randn(&[r, c], 1.0, &mut rng));
            store.insert("b", away_from_zero(&mut rng, br, bc));
            for (name, op) in [("add", 0), ("sub", 1), ("mul", 2)] {
                let e = graph_check(&store, &|g| {
                    let (a, b) = (g.param("a").unwrap(), g.param("b").unwrap());
                    let y = match op {
                        0 => g.add(a, b).unwrap(),
                        1 => g.sub(a, b).unwrap(),
                        _ => g.mul(a, b).unwrap(),
                    };
                    weighted_sum(g, y, trial)
                });
                let w = per_op.entry(name).or_insert(0.0);
                *w = w.max(e);
            }
        }
        let mut store = ParamStore::new();
        store.insert("a", Tensor::randn(&[r, k], 1.0, &mut rng));
        store.insert("b", Tensor::randn(&[k, c], 1.0, &mut rng));
        store.insert("t", Tensor::randn(&[r, c], 1.0, &mut rng));
        let checks: [(&str, &dyn Fn(&mut Graph) -> Var); 3] = [
            ("matmul", &|g| {
                let (a, b) = (g_param(g, "a"), g_param(g, "b"));
                let y = g.matmul(a, b).unwrap();
                weighted_sum(g, y, trial)
            }),
            ("mse", &|g| {
                let (a, b) = (g_param(g, "a"), g_param(g, "b"));
                let y = g.matmul(a, b).unwrap();
                let t = g_param(g, "t");
                g.mse(y, t).unwrap()
            }),
            ("smooth_l1", &|g| {
                let (a, b) = (g_param(g, "a"), g_param(g, "b"));
                let y = g.matmul(a, b).unwrap();
                let t = g_param(g, "t");
                g.smooth_l1(y, t, 1.0).unwrap()
            }),
        ];
        for (name, build) in checks {
            let e = graph_check(&store, build);
            let w = per_op.entry(name).or_insert(0.0);
            *w = w.max(e);
        }
    }

    let vae_errs = composed_vae_errors();
    per_op.insert("vae_loss", vae_errs.0);
    per_op.insert("vae_align", vae_errs.1);
    per_op.insert("flow_loss", composed_flow_error());

    let (worst_name, worst) = per_op.iter().fold(("", 0.0f64), |acc, (n, e)| if *e > acc.1 { (n, *e) } else { acc });
    let failing: Vec<String> = per_op.iter().filter(|(_, e)| **e >= 1e-6).map(|(n, e)| format!("{n}={e:.1e}")).collect();
    ensure(
        failing.is_empty(),
        format!("{} checks, max relative error {worst:.1e} ({worst_name}){}", per_op.len(), if failing.is_empty() { String::new() } else { format!("; failing {failing:?}") }),
    )
}

fn g_param(g: &mut Graph, name: &str) -> Var {
    g.param(name).unwrap()
}

fn tiny_vae() -> (VaeConfig, ImageConfig) {
    let cfg = VaeConfig {
        frames: 8,
        latent_dim: 3,
        width: 8,
        encoder_layers: 2,
        decoder_layers: 2,
        heads: 2,
        vision_dim: 4,
        feature_channels: 4,
        lambda_kl: 0.1,
        lambda_align: 0.5,
        align_warmup: 0,
        ..VaeConfig::default()
    };
    (cfg, ImageConfig { channels: 4, size: 8, sigma: 1.5 })
}

fn vae_batch(cfg: &VaeConfig, image: &ImageConfig, n: usize, paired: usize, seed: u64) -> Vec<VaeSample> {
    let ccfg = CorpusConfig { samples: n.max(3), frames: cfg.frames, image: image.clone(), ..CorpusConfig::default() };
    let raw: Vec<_> = plan_corpus(&ccfg, seed).iter().take(n).map(|e| synthesize(e, &ccfg.codec).unwrap()).collect();
    let norm = Normalizer::fit(raw.iter());
    raw.iter()
        .enumerate()
        .map(|(i, m)| VaeSample { motion: norm.normalize(m), vision: (i < paired).then(|| vision_input(m, image).unwrap()) })
        .collect()
}

fn latent_noise(tokens: usize, dim: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| Tensor::randn(&[tokens, dim], 1.0, &mut rng)).collect()
}

/// The alignment teacher is detached, which finite differences cannot see:
/// the objective is checked at zero alignment weight, and the alignment
/// term alone against the student-only parameters.
fn composed_vae_errors() -> (f64, f64) {
    let (cfg, image) = tiny_vae();
    let b = vae_batch(&cfg, &image, 4, 2, 11);
    let e = latent_noise(cfg.tokens(), cfg.latent_dim, b.len(), 4);

    let no_align = VaeConfig { lambda_align: 0.0, ..cfg.clone() };
    let mut store = ParamStore::new();
    vae::init_vae(&mut store, &no_align, 3);
    let analytic = {
        let mut g = Graph::new(&store);
        let v = vae::vae_loss_graph(&mut g, &no_align, &b, &e, 10).unwrap();
        g.backward(v.total).unwrap()
    };
    let total = fd_check(&store, &analytic, &|_| true, Some(4), &|s| vae::vae_loss(s, &no_align, &b, &e, 10).unwrap().total);

    let analytic = {
        let mut g = Graph::new(&store);
        let v = vae::vae_loss_graph(&mut g, &cfg, &b, &e, 10).unwrap();
        g.backward(v.align.unwrap()).unwrap()
    };
    let student = |n: &str| n.starts_with("vae.enc_m.") || n.starts_with("vae.head_m.");
    let align = fd_check(&store, &analytic, &student, Some(4), &|s| vae::vae_loss(s, &cfg, &b, &e, 10).unwrap().align.unwrap());
    (total, align)
}

fn tiny_generator() -> GeneratorConfig {
    GeneratorConfig {
        embedder: EmbedderConfig { semantic_width: 8, semantic_layers: 1, semantic_heads: 2, hidden: 8, generation_layers: 1 },
        backbone: BackboneConfig { blocks: 1, heads: 2, hidden: 8, lora_rank: 2 },
        flow: FlowConfig { head_blocks: 1, width: 8, heads: 2, time_dim: 8, ..FlowConfig::default() },
        classes: 3,
    }
}

fn composed_flow_error() -> f64 {
    let cfg = tiny_generator();
    let shape = LatentShape { tokens: 3, dim: 2 };
    let mut store = ParamStore::new();
    generator::init_generator(&mut store, &cfg, shape, 5);
    // zero-initialized layers would hide whole branches from the check
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let names: Vec<String> = store.names().cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        *t = t.zip_map(&Tensor::randn(t.shape(), 0.2, &mut rng), |a, b| a + b);
    }
    let zs = latent_noise(3, 2, 3, 7);
    let noise = latent_noise(3, 2, 3, 8);
    let refs: Vec<&Tensor> = zs.iter().collect();
    let labels = [0, 2, cfg.null_class()];
    let times = [0.2, 0.55, 0.9];
    let build = |g: &mut Graph| generator::class_flow_loss_graph(g, &cfg, &refs, &labels, &noise, &times).unwrap();
    let analytic = {
        let mut g = Graph::new(&store);
        let l = build(&mut g);
        g.backward(l).unwrap()
    };
    fd_check(&store, &analytic, &|_| true, Some(4), &|s| {
        let mut g = Graph::new(s);
        let l = build(&mut g);
        g.value(l).item()
    })
}

// ---------------------------------------------------------------- A3

fn random_layout(rng: &mut ChaCha8Rng) -> SegmentLayout {
    let spans = rng.random_range(1..=6);
    let mut parts = Vec::new();
    let mut left = 32usize;
    for k in 0..spans {
        if left == 0 {
            break;
        }
        let len = if k + 1 == spans { rng.random_range(1..=left) } else { rng.random_range(1..=left.min(10)) };
        parts.push(([Modality::Text, Modality::Image, Modality::Motion][rng.random_range(0..3)], len));
        left -= len;
    }
    SegmentLayout::from_lengths(&parts).unwrap()
}

fn a3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    for k in 0..1000 {
        let layout = random_layout(&mut rng);
        verify_no_leakage(&layout, &build_hybrid_mask(&layout)).map_err(|e| format!("layout {k}: {e}"))?;
    }
    let cfg = BackboneConfig { blocks: 2, heads: 2, hidden: 8, lora_rank: 2 };
    let mut store = ParamStore::new();
    init_backbone(&mut store, &cfg, 1);
    let names: Vec<String> = store.names().filter(|n| is_adapter(n)).cloned().collect();
    for n in names {
        let t = store.get_mut(&n).unwrap();
        *t = Tensor::randn(t.shape(), 0.3, &mut rng);
    }
    let forward = |layout: &SegmentLayout, x: &Tensor| {
        let mut g = Graph::new(&store);
        let t = g.constant(x.clone());
        let y = backbone_forward(&mut g, &cfg, t, layout, 1).unwrap();
        g.value(y).clone()
    };
    let (mut blocked, mut open_moved) = (0usize, 0usize);
    for k in 0..50 {
        let layout = random_layout(&mut rng);
        let l = layout.len();
        let mask = build_hybrid_mask(&layout);
        let x = Tensor::randn(&[l, cfg.hidden], 1.0, &mut rng);
        let base = forward(&layout, &x);
        for j in 0..l {
            let mut xp = x.clone();
            for c in 0..cfg.hidden {
                xp.set(j, c, x.get(j, c) + 1e-3);
            }
            let out = forward(&layout, &xp);
            for i in 0..l {
                let moved = (0..cfg.hidden).map(|c| (out.get(i, c) - base.get(i, c)).abs()).fold(0.0, f64::max);
                if mask.get(i, j) == f64::NEG_INFINITY {
                    if moved != 0.0 {
                        return Err(format!("layout {k}: token {j} moved output {i} by {moved:e}"));
                    }
                    blocked += 1;
                } else if moved > 0.0 {
                    open_moved += 1;
                }
            }
        }
    }
    ensure(blocked > 0, format!("1000 layouts audited; {blocked} masked pairs probed with zero influence, {open_moved} allowed pairs respond"))
}

// ---------------------------------------------------------------- A4

fn a4() -> Outcome {
    let skel = SkeletonDef::default();
    let cfg = motion::CodecConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(404);
    let mut worst: f64 = 0.0;
    for i in 0..100 {
        let tag = MotionTag::ALL[i % 3];
        let class = MotionClass::random(tag, &mut rng);
        let (joints, rots) = gen_motion(&class, 32, 1000 + i as u64);
        let repr = motion::encode_repr(&joints, Some(&rots), &skel, &cfg).map_err(|e| e.to_string())?;
        let back = motion::recover_joints(&repr, &skel).map_err(|e| e.to_string())?;
        worst = worst.max(metrics::mpjpe(&back, &joints).map_err(|e| e.to_string())?.value);
    }
    let mut rot_err: f64 = 0.0;
    for _ in 0..100 {
        let axis = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)).normalize();
        let r = axis_angle(axis, rng.random_range(-3.1..3.1));
        let back = motion::rot6d_to_matrix(&motion::matrix_to_rot6d(&r).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
        rot_err = rot_err.max((back - r).amax());
    }
    let width: usize = LAYOUT_WIDTHS.iter().sum();
    ensure(
        worst < 1e-4 && rot_err < 1e-9 && width == 269 && REPR_DIM == 269,
        format!("max round-trip MPJPE {worst:.2e} m, 6D error {rot_err:.1e}, widths sum {width}"),
    )
}

// ---------------------------------------------------------------- A6

fn a6() -> Outcome {
    let cfg = VaeConfig::default();
    let image = CorpusConfig::default().image;
    let b = vae_batch(&cfg, &image, 6, 3, 17);
    let e = latent_noise(cfg.tokens(), cfg.latent_dim, b.len(), 18);
    let mut store = ParamStore::new();
    vae::init_vae(&mut store, &cfg, 19);
    let fused: Vec<String> = store.names().filter(|n| vae::is_fused_exclusive(n)).cloned().collect();
    let (grads, all) = {
        let mut g = Graph::new(&store);
        let v = vae::vae_loss_graph(&mut g, &cfg, &b, &e, 1000).unwrap();
        let align = v.align.ok_or("batch produced no alignment term")?;
        (g.gradient(align, &fused).unwrap(), g.backward(align).unwrap())
    };
    let mut nonzero = 0;
    for n in &fused {
        if let Some(t) = grads.get(n) {
            nonzero += t.data().iter().filter(|&&x| x != 0.0).count();
        }
    }
    if nonzero > 0 {
        return Err(format!("{nonzero} non-zero align gradients on fused-encoder parameters"));
    }
    let unpaired: Vec<&motion::MotionRepr> = b.iter().filter(|s| s.vision.is_none()).map(|s| &s.motion).collect();
    let before = vae::encode_motion_batch(&store, &cfg, &unpaired).unwrap();
    AdamW::default().step(&mut store, &all, 1e-3).map_err(|e| e.to_string())?;
    let after = vae::encode_motion_batch(&store, &cfg, &unpaired).unwrap();
    let moved = before.iter().zip(&after).map(|(a, b)| a.mean.zip_map(&b.mean, |x, y| (x - y).abs()).max_abs()).fold(0.0, f64::max);
    ensure(
        moved > 1e-6,
        format!("{} fused-only tensors with exactly zero align gradient; unpaired encodings moved {moved:.2e} after one align step", fused.len()),
    )
}

// ---------------------------------------------------------------- A7

fn a7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(707);
    let x0 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let x1 = Tensor::randn(&[4, 8], 1.0, &mut rng);
    let mut lines = Vec::new();
    for shift in [None, Some(3.0)] {
        let errs: Vec<f64> = [1, 2, 5, 10, 50]
            .iter()
            .map(|&steps| {
                let cfg = SamplerConfig { steps, guidance: 1.0, shift };
                let out = flow::euler_sample(|x, t, _| Ok(flow::point_target_velocity(&x1, x, t)), &x0, &cfg, false).unwrap();
                out.zip_map(&x1, |a, b| (a - b).abs()).max_abs()
            })
            .collect();
        if !(errs[4] < 1e-3 && errs.windows(2).all(|w| w[1] <= w[0])) {
            return Err(format!("shift {shift:?}: errors {errs:?}"));
        }
        lines.push(format!("shift {shift:?} errors {}", errs.iter().map(|e| format!("{e:.1e}")).collect::<Vec<_>>().join("/")));
    }
    let x0 = Tensor::from_vec(2, 2, vec![0.5, -1.25, 2.0, 0.125]);
    let v = Tensor::from_vec(2, 2, vec![1.5, 0.75, -3.0, 0.25]);
    let one = flow::euler_sample(|_, _, _| Ok(v.clone()), &x0, &SamplerConfig { steps: 1, guidance: 1.0, shift: None }, false).unwrap();
    if one != x0.zip_map(&v, |a, b| a + b) {
        return Err("constant field not recovered in one step".into());
    }
    let vu = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let vc = Tensor::randn(&[3, 5], 1.0, &mut rng);
    let s0 = flow::cfg_velocity(&vu, &vc, 0.0).unwrap() == vu;
    let s1 = flow::cfg_velocity(&vu, &vc, 1.0).unwrap() == vc;
    ensure(s0 && s1, format!("{}; one-step constant field exact; guidance s=0/s=1 bit-exact", lines.join(", ")))
}

// ---------------------------------------------------------------- A8

fn a8() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(808);
    let cfg = FlowConfig::default();
    let n = 100_000;
    let xs: Vec<f64> = (0..n).map(|_| flow::logit(flow::sample_timestep(&mut rng, &cfg))).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let mut shift_ok = true;
    for s in [0.5, 2.0, 3.0, 10.0] {
        shift_ok &= flow::time_shift(0.0, s) == 0.0 && flow::time_shift(1.0, s) == 1.0;
    }
    for _ in 0..1000 {
        let t: f64 = rng.random();
        shift_ok &= flow::time_shift(t, 1.0) == t;
    }
    ensure(
        mean.abs() <= 0.02 && (std - 1.0).abs() <= 0.02 && shift_ok,
        format!("logit mean {mean:+.4}, std {std:.4}; shift endpoints fixed and shift 1 identity: {shift_ok}"),
    )
}

// ---------------------------------------------------------------- A11

fn random_seq(rng: &mut ChaCha8Rng, t: usize) -> JointSequence {
    JointSequence::new(
        (0..t).map(|_| std::array::from_fn(|_| Vector3::new(rng.sample(StandardNormal), rng.sample(StandardNormal), rng.sample(StandardNormal)))).collect(),
    )
}

fn a11() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1111);
    let e = |r: Result<metrics::ErrorReport, metrics::MetricError>| r.map(|x| x.value).map_err(|e| e.to_string());

    let gt = random_seq(&mut rng, 6);
    let rot = axis_angle(Vector3::new(0.3, 1.0, -0.2).normalize(), 0.9);
    let moved = gt.map_points(|p| 1.7 * (rot * p) + Vector3::new(0.4, -1.0, 2.0));
    let pa_sim = e(metrics::pa_mpjpe(&moved, &gt))?;

    let mut pa_le = true;
    for _ in 0..200 {
        let a = random_seq(&mut rng, 4);
        let b = random_seq(&mut rng, 4);
        pa_le &= e(metrics::pa_mpjpe(&a, &b))? <= e(metrics::mpjpe(&a, &b))?;
    }

    let one = DMatrix::from_element(1, 1, 1.0);
    let fd = frechet_from_stats(&DVector::from_vec(vec![0.0]), &one, &DVector::from_vec(vec![1.0]), &one).map_err(|e| e.to_string())?;

    let a = random_seq(&mut rng, 37);
    let b = random_seq(&mut rng, 37);
    let s = metrics::residual_spectrum(&a, &b).map_err(|e| e.to_string())?;
    let mut time = 0.0;
    for f in 0..37 {
        for j in 0..JOINT_COUNT {
            time += (a.joint(f, j) - b.joint(f, j)).norm_squared();
        }
    }
    time /= (37 * JOINT_COUNT * 3) as f64;
    let parseval = (s.total() - time).abs() / time;

    // dyadic steps keep second differences exactly zero
    let linear = JointSequence::new((0..40).map(|t| std::array::from_fn(|j| Vector3::new(0.25 * t as f64, j as f64, -0.125 * t as f64))).collect());
    let jitter = metrics::jitter_std(&linear, 5).map_err(|e| e.to_string())?;

    let boundary = metrics::motion_accuracy(&[100.0], 100.0).map_err(|e| e.to_string())?;
    let just_over = metrics::motion_accuracy(&[100.000001], 100.0).map_err(|e| e.to_string())?;

    ensure(
        pa_sim < 1e-9 && pa_le && (fd - 1.0).abs() < 1e-8 && parseval < 1e-6 && jitter == 0.0 && boundary == 1.0 && just_over == 0.0,
        format!(
            "PA after similarity {pa_sim:.1e}; PA<=MPJPE on 200 pairs: {pa_le}; 1-D Frechet {fd:.10}; Parseval rel {parseval:.1e}; jitter {jitter}; accuracy at 100.0 mm {boundary}"
        ),
    )
}

// ---------------------------------------------------------------- pipeline

fn context(out: PathBuf) -> RunContext {
    let cfg = RunConfig { paths: pipeline::PathsConfig { out, corpus: None }, ..RunConfig::default() };
    let hash = mlat_cli::config_hash(&cfg);
    RunContext::new(cfg, hash)
}

fn metric(rows: &[mlat::metrics::MetricRow], name: &str) -> Result<f64, String> {
    rows.iter().find(|r| r.metric == name).map(|r| r.value).ok_or(format!("metric {name} missing"))
}

struct PipelineRun {
    rows: Vec<mlat::metrics::MetricRow>,
    times: StageTimes,
}

fn run_pipeline(out: &Path) -> Result<PipelineRun, String> {
    let _ = fs::remove_dir_all(out);
    let ctx = context(out.to_path_buf());
    let (rows, times) = pipeline::run_all_timed(&ctx).map_err(|e| e.to_string())?;
    Ok(PipelineRun { rows, times })
}

fn a5(run: &Result<PipelineRun, String>, out: &Path) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let held = metric(&run.rows, "mpjpe")?;
    let log = fs::read_to_string(out.join("vae_loss.csv")).map_err(|e| e.to_string())?;
    let mut steps = 0;
    let mut min_kl = f64::INFINITY;
    let mut finite = true;
    for line in log.lines().skip(2) {
        let f: Vec<f64> = line.split(',').filter(|s| !s.is_empty()).map(|s| s.parse().unwrap_or(f64::NAN)).collect();
        finite &= f.iter().all(|v| v.is_finite());
        min_kl = min_kl.min(f[2]);
        steps += 1;
    }
    let corpus = RunConfig::default().corpus.samples;
    ensure(
        held < 0.02 && finite && min_kl > 0.01 && steps == 2000,
        format!("{steps} steps on {corpus} samples; held-out MPJPE {held:.4} m; losses finite: {finite}; min kl_phi {min_kl:.3}"),
    )
}

fn a9(run: &Result<PipelineRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let ratio = metric(&run.rows, "shuffle_ratio")?;
    let control = metric(&run.rows, "control_shuffle_ratio")?;
    ensure(
        ratio >= 2.0 && (0.9..=1.1).contains(&control),
        format!("after {} stage-0 steps shuffle ratio {ratio:.2}; zero-output control {control:.3}", RunConfig::default().lra_stage.steps),
    )
}

fn a10(run: &Result<PipelineRun, String>) -> Outcome {
    let run = run.as_ref().map_err(Clone::clone)?;
    let acc = metric(&run.rows, "class_accuracy")?;
    let gain = metric(&run.rows, "frechet_reduction_min")?;
    let per_class: Vec<String> = MotionTag::ALL
        .iter()
        .map(|t| Ok(format!("{t} {:.3}->{:.3}", metric(&run.rows, &format!("frechet_untrained_{t}"))?, metric(&run.rows, &format!("frechet_{t}"))?)))
        .collect::<Result<_, String>>()?;
    let n = 3 * RunConfig::default().eval.samples_per_class;
    ensure(
        acc >= 0.9 && gain >= 5.0,
        format!("{n} samples, accuracy {:.1}%; Frechet {}; min reduction {gain:.1}x", acc * 100.0, per_class.join(", ")),
    )
}

fn csv_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir).map(|r| r.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.extension().is_some_and(|x| x == "csv")).collect()).unwrap_or_default();
    v.sort();
    v
}

fn a12(first: &Path, second: &Path) -> Outcome {
    let files = csv_files(first);
    if files.is_empty() {
        return Err("first run produced no CSV files".into());
    }
    let mut differing = Vec::new();
    for f in &files {
        let name = f.file_name().unwrap();
        if fs::read(f).ok() != fs::read(second.join(name)).ok() {
            differing.push(name.to_string_lossy().into_owned());
        }
    }
    ensure(differing.is_empty(), if differing.is_empty() { format!("{} CSV files bit-identical across two runs", files.len()) } else { format!("differing: {differing:?}") })
}

fn main() -> ExitCode {
    let keep = std::env::var_os("MLAT_ACCEPTANCE_OUT").map(PathBuf::from);
    let tmp = tempfile::tempdir().expect("temporary directory");
    let root = keep.unwrap_or_else(|| tmp.path().to_path_buf());

    // optional criterion ids on the command line, e.g. `-- A1 A7`
    let only: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let wanted = |id: &str| only.is_empty() || only.iter().any(|o| o == id);

    let mut all = true;
    let quick: [(&str, f64, fn() -> Outcome); 8] =
        [("A1", 10.0, a1), ("A2", 60.0, a2), ("A3", 60.0, a3), ("A4", 30.0, a4), ("A6", 30.0, a6), ("A7", 30.0, a7), ("A8", 5.0, a8), ("A11", 30.0, a11)];
    for (id, limit, f) in quick {
        if wanted(id) {
            all &= report(id, limit, f);
        }
    }
    if !["A5", "A9", "A10", "A12"].iter().any(|id| wanted(id)) {
        return summary(all);
    }

    let first_dir = root.join("run1");
    let clock = Instant::now();
    let first = catch_unwind(|| run_pipeline(&first_dir)).unwrap_or_else(|_| Err("pipeline panicked".into()));
    let first_secs = clock.elapsed().as_secs_f64();
    let times = first.as_ref().map(|r| r.times.clone()).unwrap_or_default();
    if wanted("A5") {
        all &= finish("A5", times.of(Stage::Vae), 600.0, a5(&first, &first_dir));
    }
    if wanted("A9") {
        all &= finish("A9", times.of(Stage::Lra), 600.0, a9(&first));
    }
    if wanted("A10") {
        all &= finish("A10", first_secs, 1800.0, a10(&first));
    }
    if !wanted("A12") {
        return summary(all);
    }

    let second_dir = root.join("run2");
    let clock = Instant::now();
    let second = catch_unwind(|| run_pipeline(&second_dir)).unwrap_or_else(|_| Err("pipeline panicked".into()));
    let both = first_secs + clock.elapsed().as_secs_f64();
    let r12 = match (&first, &second) {
        (Ok(_), Ok(_)) => a12(&first_dir, &second_dir),
        (Err(e), _) | (_, Err(e)) => Err(e.clone()),
    };
    all &= finish("A12", both, 3600.0, r12);
    summary(all)
}

fn summary(all: bool) -> ExitCode {
    if all {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: some criteria FAILED");
        ExitCode::FAILURE
    }
}

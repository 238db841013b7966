//! Staged runs over one output directory: corpus, VAE, latent
//! self-reconstruction (stage 0), class-conditional flow, then sampling and
//! evaluation. Every stage is deterministic given the config and seed; each
//! training step draws from its own RNG stream so resumed runs replay the
//! same batches.

use std::collections::BTreeMap;
use std::fs;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::LatentShape;
use crate::corpus::{self, Corpus, CorpusConfig, CorpusEntry, MANIFEST};
use crate::diff::{cosine_lr, load_checkpoint, save_checkpoint, AdamW, DiffError, Graph, ParamStore, Tensor};
use crate::features::{classification_features, compact_features, Centroids};
use crate::flow::{self, FlowError, SamplerConfig};
use crate::generator::{self, GeneratorConfig};
use crate::lra::{self, BottleneckConfig, EvalError, LraDraws};
use crate::metrics::{self, MetricError, MetricRow, Units};
use crate::motion::{io as motion_io, recover_joints, MotionError, MotionRepr, Normalizer, SkeletonDef, GLOBAL_ORIENT, JOINT_COUNT, ROOT_INC};
use crate::synth::MotionTag;
use crate::vae::{self, VaeConfig, VaeSample};

pub const SCHEMA_VERSION: u32 = 1;
/// Fixed chunk size for batched encoding and decoding.
const CHUNK: usize = 32;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    Config(String),
    #[error("missing prerequisite: {0}")]
    Prerequisite(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Motion(#[from] MotionError),
    #[error(transparent)]
    Diff(DiffError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl PipelineError {
    pub fn exit_code(&self) -> i32 {
        match self {
            PipelineError::Config(_) => 2,
            PipelineError::Prerequisite(_) => 3,
            PipelineError::Numerical(_) => 4,
            _ => 1,
        }
    }
}

impl From<DiffError> for PipelineError {
    fn from(e: DiffError) -> Self {
        match e {
            DiffError::NonFiniteGradient(_) | DiffError::NonFiniteValue(_) => PipelineError::Numerical(e.to_string()),
            e => PipelineError::Diff(e),
        }
    }
}

impl From<FlowError> for PipelineError {
    fn from(e: FlowError) -> Self {
        match e {
            FlowError::Diff(d) => d.into(),
            e @ FlowError::NonFinite(_) => PipelineError::Numerical(e.to_string()),
            e => PipelineError::Numerical(e.to_string()),
        }
    }
}

impl From<EvalError> for PipelineError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Flow(f) => f.into(),
            EvalError::Metric(m) => m.into(),
            e => PipelineError::Config(e.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Vae,
    Lra,
    Flow,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Vae => "vae",
            Stage::Lra => "lra",
            Stage::Flow => "flow",
        }
    }

    fn prerequisite(self) -> Option<Stage> {
        match self {
            Stage::Vae => None,
            Stage::Lra => Some(Stage::Vae),
            Stage::Flow => Some(Stage::Lra),
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "vae" => Ok(Stage::Vae),
            "lra" | "stage0" => Ok(Stage::Lra),
            "flow" | "stage1a" => Ok(Stage::Flow),
            _ => Err(format!("unknown stage `{s}` (expected vae, lra or flow)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VaeStageConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub final_lr_fraction: f64,
    /// Root increments and absolute root orientation are scaled up by this
    /// factor after standardization.
    pub root_emphasis: f64,
}

impl Default for VaeStageConfig {
    fn default() -> Self {
        Self { steps: 2000, batch: 32, lr: 3e-3, warmup: 100, final_lr_fraction: 0.05, root_emphasis: 20.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LraStageConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub final_lr_fraction: f64,
    pub bottleneck: BottleneckConfig,
}

impl Default for LraStageConfig {
    fn default() -> Self {
        Self { steps: 1500, batch: 16, lr: 1e-3, warmup: 100, final_lr_fraction: 0.1, bottleneck: BottleneckConfig::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowStageConfig {
    pub steps: u64,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    pub final_lr_fraction: f64,
    /// Also train the base backbone weights (adapters are always trained).
    pub train_base: bool,
}

impl Default for FlowStageConfig {
    fn default() -> Self {
        Self { steps: 1000, batch: 16, lr: 1e-3, warmup: 100, final_lr_fraction: 0.1, train_base: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub samples_per_class: usize,
    pub accuracy_threshold_mm: f64,
    /// Euler steps when reconstructing latents in the shuffled-condition
    /// control.
    pub lra_sample_steps: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self { samples_per_class: 20, accuracy_threshold_mm: 100.0, lra_sample_steps: 50 }
    }
}

/// Where outputs go. Excluded from the config hash so that identical runs in
/// different directories agree.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Corpus location; `<out>/corpus` when unset.
    pub corpus: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self { out: PathBuf::from("mlat_run"), corpus: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Stage trained by `train` when no stage is given on the command line.
    pub stage: Stage,
    pub paths: PathsConfig,
    pub corpus: CorpusConfig,
    pub vae: VaeConfig,
    pub generator: GeneratorConfig,
    pub vae_stage: VaeStageConfig,
    pub lra_stage: LraStageConfig,
    pub flow_stage: FlowStageConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 7,
            stage: Stage::Vae,
            paths: PathsConfig::default(),
            corpus: CorpusConfig::default(),
            vae: VaeConfig::default(),
            generator: GeneratorConfig::default(),
            vae_stage: VaeStageConfig::default(),
            lra_stage: LraStageConfig::default(),
            flow_stage: FlowStageConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), PipelineError> {
        let bad = |m: String| Err(PipelineError::Config(m));
        if self.schema_version != SCHEMA_VERSION {
            return bad(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", self.schema_version));
        }
        if self.vae.frames != self.corpus.frames {
            return bad(format!("vae.frames {} differs from corpus.frames {}", self.vae.frames, self.corpus.frames));
        }
        let every = self.corpus.heldout_every;
        let held: usize = if every == 0 {
            0
        } else {
            corpus::class_counts(self.corpus.samples, &self.corpus.class_split).iter().map(|c| c / every).sum()
        };
        if held < 2 {
            return bad(format!("corpus of {} samples with heldout_every = {every} holds out {held}; at least 2 are needed", self.corpus.samples));
        }
        if self.vae.latent_dim < 2 || self.vae.frames == 0 {
            return bad("vae.latent_dim must be at least 2 and frames positive".into());
        }
        if self.vae.tokens() < 2 {
            return bad("the VAE must produce at least 2 latent tokens".into());
        }
        if self.generator.classes != MotionTag::ALL.len() {
            return bad(format!("generator.classes must be {}", MotionTag::ALL.len()));
        }
        let [lo, hi] = self.lra_stage.bottleneck.keep;
        if !(0.0 < lo && lo <= hi && hi <= 1.0) {
            return bad("lra_stage.bottleneck.keep must satisfy 0 < lo <= hi <= 1".into());
        }
        for (name, b) in [("vae_stage", self.vae_stage.batch), ("lra_stage", self.lra_stage.batch), ("flow_stage", self.flow_stage.batch)] {
            if b == 0 {
                return bad(format!("{name}.batch must be positive"));
            }
        }
        if self.generator.flow.steps == 0 || self.eval.lra_sample_steps == 0 {
            return bad("sampler step counts must be positive".into());
        }
        Ok(())
    }

    /// Copy with output paths reset, the part of the config that the hash
    /// covers.
    pub fn hashed_part(&self) -> RunConfig {
        RunConfig { paths: PathsConfig::default(), ..self.clone() }
    }

    pub fn latent_shape(&self) -> LatentShape {
        LatentShape { tokens: self.vae.tokens(), dim: self.vae.latent_dim }
    }
}

/// A resolved config, its hash and the output directory.
#[derive(Debug, Clone)]
pub struct RunContext {
    pub cfg: RunConfig,
    pub hash: String,
    pub out: PathBuf,
}

impl RunContext {
    pub fn new(cfg: RunConfig, hash: String) -> Self {
        let out = cfg.paths.out.clone();
        Self { cfg, hash, out }
    }

    pub fn corpus_dir(&self) -> PathBuf {
        self.cfg.paths.corpus.clone().unwrap_or_else(|| self.out.join("corpus"))
    }

    pub fn checkpoint(&self, stage: Stage) -> PathBuf {
        self.out.join(format!("{}.ckpt", stage.name()))
    }

    pub fn loss_log(&self, stage: Stage) -> PathBuf {
        self.out.join(format!("{}_loss.csv", stage.name()))
    }

    fn require_checkpoint(&self, stage: Stage) -> Result<PathBuf, PipelineError> {
        let p = self.checkpoint(stage);
        if p.is_file() {
            Ok(p)
        } else {
            Err(PipelineError::Prerequisite(format!("{} not found; run `train --stage {}` first", p.display(), stage.name())))
        }
    }

    fn load_corpus(&self) -> Result<Corpus, PipelineError> {
        let dir = self.corpus_dir();
        if !dir.join(MANIFEST).is_file() {
            return Err(PipelineError::Prerequisite(format!("{} has no corpus; run `gen-corpus` first", dir.display())));
        }
        Ok(corpus::load_corpus(&dir)?)
    }
}

/// Independent random streams, one per purpose.
#[derive(Debug, Clone, Copy)]
enum Stream {
    Init = 1,
    Vae = 2,
    Lra = 3,
    Flow = 4,
    LraEval = 5,
    FlowEval = 6,
    Sample = 7,
}

fn stream_rng(seed: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((stream as u64) << 48) | index);
    rng
}

fn pick_batch<R: Rng>(rng: &mut R, pool: &[usize], batch: usize) -> Vec<usize> {
    if batch >= pool.len() {
        return pool.to_vec();
    }
    rand::seq::index::sample(rng, pool.len(), batch).into_iter().map(|i| pool[i]).collect()
}

fn text_tensor(s: &str) -> Tensor {
    Tensor::row(s.bytes().map(f64::from).collect())
}

fn text_from_tensor(t: &Tensor) -> String {
    t.data().iter().map(|&b| b as u8 as char).collect()
}

fn vector_tensor(v: &[f64]) -> Tensor {
    Tensor::row(v.to_vec())
}

fn meta_entry<'m>(meta: &'m BTreeMap<String, Tensor>, key: &str, path: &Path) -> Result<&'m Tensor, PipelineError> {
    meta.get(key).ok_or_else(|| PipelineError::Prerequisite(format!("{} lacks `{key}` metadata", path.display())))
}

/// Per-step loss rows with a hash comment and a fixed header. Resuming at
/// step `k` keeps earlier rows below `k` and appends after them.
struct LossLog {
    w: BufWriter<fs::File>,
}

impl LossLog {
    fn open(path: &Path, header: &str, hash: &str, start: u64) -> io::Result<Self> {
        let mut kept = Vec::new();
        if start > 0 && path.is_file() {
            for line in BufReader::new(fs::File::open(path)?).lines() {
                let line = line?;
                let step = line.split(',').next().and_then(|s| s.parse::<u64>().ok());
                if matches!(step, Some(s) if s < start) {
                    kept.push(line);
                }
            }
        }
        let mut w = BufWriter::new(fs::File::create(path)?);
        writeln!(w, "# config_hash={hash}")?;
        writeln!(w, "{header}")?;
        for l in kept {
            writeln!(w, "{l}")?;
        }
        Ok(Self { w })
    }

    fn row(&mut self, fields: &[String]) -> io::Result<()> {
        writeln!(self.w, "{}", fields.join(","))
    }

    fn finish(mut self) -> io::Result<()> {
        self.w.flush()
    }
}

fn opt_field(v: Option<f64>) -> String {
    v.map_or_else(String::new, |x| x.to_string())
}

/// Summary of a finished training stage.
#[derive(Debug, Clone, PartialEq)]
pub struct StageReport {
    pub stage: Stage,
    pub start_step: u64,
    pub end_step: u64,
    pub final_loss: f64,
}

pub fn gen_corpus(ctx: &RunContext) -> Result<Vec<CorpusEntry>, PipelineError> {
    Ok(corpus::gen_corpus(&ctx.corpus_dir(), &ctx.cfg.corpus, ctx.cfg.seed, &ctx.hash)?)
}

fn fit_normalizer(cfg: &RunConfig, corpus: &Corpus, train: &[usize]) -> Normalizer {
    let mut norm = Normalizer::fit(train.iter().map(|&i| &corpus.motions[i]));
    norm.emphasize(ROOT_INC, cfg.vae_stage.root_emphasis);
    norm.emphasize(GLOBAL_ORIENT, cfg.vae_stage.root_emphasis);
    norm
}

/// VAE weights plus the feature normalizer they were trained with.
pub struct VaeBundle {
    pub store: ParamStore,
    pub norm: Normalizer,
}

pub fn load_vae(ctx: &RunContext) -> Result<VaeBundle, PipelineError> {
    let path = ctx.require_checkpoint(Stage::Vae)?;
    let (store, meta) = load_checkpoint(&path)?;
    let norm = Normalizer {
        mean: meta_entry(&meta, "norm_mean", &path)?.data().to_vec(),
        std: meta_entry(&meta, "norm_std", &path)?.data().to_vec(),
    };
    Ok(VaeBundle { store, norm })
}

fn resume_state(path: &Path) -> Result<(ParamStore, BTreeMap<String, Tensor>, u64), PipelineError> {
    if !path.is_file() {
        return Err(PipelineError::Prerequisite(format!("resume checkpoint {} not found", path.display())));
    }
    let (store, meta) = load_checkpoint(path)?;
    let step = meta_entry(&meta, "step", path)?.item() as u64;
    Ok((store, meta, step))
}

pub fn train_vae(ctx: &RunContext, resume: Option<&Path>) -> Result<StageReport, PipelineError> {
    let cfg = &ctx.cfg;
    let corpus = ctx.load_corpus()?;
    let (train, _) = corpus.split(cfg.corpus.heldout_every);
    let norm = fit_normalizer(cfg, &corpus, &train);
    let samples: Vec<VaeSample> = corpus
        .motions
        .iter()
        .zip(&corpus.entries)
        .map(|(m, e)| {
            let vision = if e.paired { Some(corpus::vision_input(m, &cfg.corpus.image)) } else { None };
            Ok(VaeSample { motion: norm.normalize(m), vision: vision.transpose()? })
        })
        .collect::<Result<_, MotionError>>()?;

    let (mut store, start) = match resume {
        Some(p) => {
            let (s, _, step) = resume_state(p)?;
            (s, step)
        }
        None => {
            let mut s = ParamStore::new();
            vae::init_vae(&mut s, &cfg.vae, stream_rng(cfg.seed, Stream::Init, 0).random());
            (s, 0)
        }
    };
    let sc = &cfg.vae_stage;
    let opt = AdamW::default();
    let mut log = LossLog::open(&ctx.loss_log(Stage::Vae), "step,recon,kl_phi,kl_psi,align,total,align_weight", &ctx.hash, start)?;
    let mut last = f64::NAN;
    for step in start..sc.steps {
        let mut rng = stream_rng(cfg.seed, Stream::Vae, step);
        let batch: Vec<VaeSample> = pick_batch(&mut rng, &train, sc.batch).into_iter().map(|i| samples[i].clone()).collect();
        let eps: Vec<Tensor> = (0..batch.len()).map(|_| Tensor::randn(&[cfg.vae.tokens(), cfg.vae.latent_dim], 1.0, &mut rng)).collect();
        let (grads, br) = {
            let mut g = Graph::new(&store);
            let v = vae::vae_loss_graph(&mut g, &cfg.vae, &batch, &eps, step)?;
            let br = vae::breakdown(&g, &cfg.vae, &v, step);
            if !br.total.is_finite() {
                return Err(PipelineError::Numerical(format!("non-finite VAE loss at step {step}")));
            }
            (g.backward(v.total)?, br)
        };
        opt.step(&mut store, &grads, cosine_lr(sc.lr, step + 1, sc.warmup, sc.steps, sc.final_lr_fraction))?;
        log.row(&[
            step.to_string(),
            br.recon.to_string(),
            br.kl_phi.to_string(),
            opt_field(br.kl_psi),
            opt_field(br.align),
            br.total.to_string(),
            br.align_weight.to_string(),
        ])?;
        last = br.total;
    }
    log.finish()?;
    let end = start.max(sc.steps);
    let meta = BTreeMap::from([
        ("step".to_string(), Tensor::scalar(end as f64)),
        ("norm_mean".to_string(), vector_tensor(&norm.mean)),
        ("norm_std".to_string(), vector_tensor(&norm.std)),
        ("config_hash".to_string(), text_tensor(&ctx.hash)),
    ]);
    save_checkpoint(&ctx.checkpoint(Stage::Vae), &store, &meta)?;
    Ok(StageReport { stage: Stage::Vae, start_step: start, end_step: end, final_loss: last })
}

/// Per-dimension standardization of latent tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl LatentStats {
    pub fn fit<'a>(latents: impl IntoIterator<Item = &'a Tensor>) -> Self {
        let rows: Vec<&[f64]> = latents.into_iter().flat_map(|z| (0..z.rows()).map(move |r| z.row_slice(r))).collect();
        let d = rows.first().map_or(0, |r| r.len());
        let n = rows.len().max(1) as f64;
        let mut mean = vec![0.0; d];
        for r in &rows {
            for (m, v) in mean.iter_mut().zip(*r) {
                *m += v / n;
            }
        }
        let mut var = vec![0.0; d];
        for r in &rows {
            for ((s, v), m) in var.iter_mut().zip(*r).zip(&mean) {
                *s += (v - m) * (v - m) / n;
            }
        }
        Self { mean, std: var.into_iter().map(|v| v.sqrt().max(1e-6)).collect() }
    }

    pub fn standardize(&self, z: &Tensor) -> Tensor {
        let mut t = z.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                t.set(r, c, (z.get(r, c) - self.mean[c]) / self.std[c]);
            }
        }
        t
    }

    pub fn restore(&self, z: &Tensor) -> Tensor {
        let mut t = z.clone();
        for r in 0..t.rows() {
            for c in 0..t.cols() {
                t.set(r, c, z.get(r, c) * self.std[c] + self.mean[c]);
            }
        }
        t
    }

    fn to_meta(&self, meta: &mut BTreeMap<String, Tensor>) {
        meta.insert("latent_mean".into(), vector_tensor(&self.mean));
        meta.insert("latent_std".into(), vector_tensor(&self.std));
    }

    fn from_meta(meta: &BTreeMap<String, Tensor>, path: &Path) -> Result<Self, PipelineError> {
        Ok(Self {
            mean: meta_entry(meta, "latent_mean", path)?.data().to_vec(),
            std: meta_entry(meta, "latent_std", path)?.data().to_vec(),
        })
    }
}

/// Posterior means of every corpus motion, encoded in fixed-size chunks.
pub fn encode_corpus(vae_cfg: &VaeConfig, bundle: &VaeBundle, corpus: &Corpus) -> Result<Vec<Tensor>, PipelineError> {
    let normalized: Vec<MotionRepr> = corpus.motions.iter().map(|m| bundle.norm.normalize(m)).collect();
    let mut out = Vec::with_capacity(normalized.len());
    for chunk in normalized.chunks(CHUNK) {
        let refs: Vec<&MotionRepr> = chunk.iter().collect();
        out.extend(vae::encode_motion_batch(&bundle.store, vae_cfg, &refs)?.into_iter().map(|p| p.mean));
    }
    Ok(out)
}

/// Decodes latents (in VAE space) to raw motion features.
pub fn decode_latents(vae_cfg: &VaeConfig, bundle: &VaeBundle, latents: &[Tensor]) -> Result<Vec<MotionRepr>, PipelineError> {
    let mut out = Vec::with_capacity(latents.len());
    for chunk in latents.chunks(CHUNK) {
        let refs: Vec<&Tensor> = chunk.iter().collect();
        out.extend(vae::decode_batch(&bundle.store, vae_cfg, &refs)?.iter().map(|m| bundle.norm.denormalize(m)));
    }
    Ok(out)
}

struct LatentData {
    corpus: Corpus,
    train: Vec<usize>,
    held: Vec<usize>,
    latents: Vec<Tensor>,
    stats: LatentStats,
}

fn latent_data(ctx: &RunContext, bundle: &VaeBundle, stats: Option<LatentStats>) -> Result<LatentData, PipelineError> {
    let corpus = ctx.load_corpus()?;
    let (train, held) = corpus.split(ctx.cfg.corpus.heldout_every);
    let raw = encode_corpus(&ctx.cfg.vae, bundle, &corpus)?;
    let stats = stats.unwrap_or_else(|| LatentStats::fit(train.iter().map(|&i| &raw[i])));
    let latents = raw.iter().map(|z| stats.standardize(z)).collect();
    Ok(LatentData { corpus, train, held, latents, stats })
}

pub fn train_lra(ctx: &RunContext, resume: Option<&Path>) -> Result<StageReport, PipelineError> {
    let cfg = &ctx.cfg;
    let bundle = load_vae(ctx)?;
    let (mut store, start, stats) = match resume {
        Some(p) => {
            let (s, meta, step) = resume_state(p)?;
            (s, step, Some(LatentStats::from_meta(&meta, p)?))
        }
        None => {
            let mut s = ParamStore::new();
            generator::init_generator(&mut s, &cfg.generator, cfg.latent_shape(), stream_rng(cfg.seed, Stream::Init, 1).random());
            (s, 0, None)
        }
    };
    let data = latent_data(ctx, &bundle, stats)?;
    let sc = &cfg.lra_stage;
    let opt = AdamW::default();
    let mut log = LossLog::open(&ctx.loss_log(Stage::Lra), "step,loss,lr", &ctx.hash, start)?;
    let mut last = f64::NAN;
    for step in start..sc.steps {
        let mut rng = stream_rng(cfg.seed, Stream::Lra, step);
        let zs: Vec<&Tensor> = pick_batch(&mut rng, &data.train, sc.batch).into_iter().map(|i| &data.latents[i]).collect();
        let draws = LraDraws::sample(&zs, &cfg.generator, &sc.bottleneck, &mut rng);
        let (grads, loss) = {
            let mut g = Graph::with_frozen(&store, |n| !generator::trains_in_self_conditioning(n));
            let l = lra::lra_loss_graph(&mut g, &cfg.generator, &zs, &draws)?;
            (g.backward(l)?, g.value(l).item())
        };
        if !loss.is_finite() {
            return Err(PipelineError::Numerical(format!("non-finite stage-0 loss at step {step}")));
        }
        let lr = cosine_lr(sc.lr, step + 1, sc.warmup, sc.steps, sc.final_lr_fraction);
        opt.step(&mut store, &grads, lr)?;
        log.row(&[step.to_string(), loss.to_string(), lr.to_string()])?;
        last = loss;
    }
    log.finish()?;
    let end = start.max(sc.steps);
    let mut meta = BTreeMap::from([("step".to_string(), Tensor::scalar(end as f64)), ("config_hash".to_string(), text_tensor(&ctx.hash))]);
    data.stats.to_meta(&mut meta);
    save_checkpoint(&ctx.checkpoint(Stage::Lra), &store, &meta)?;
    Ok(StageReport { stage: Stage::Lra, start_step: start, end_step: end, final_loss: last })
}

pub fn train_flow(ctx: &RunContext, resume: Option<&Path>) -> Result<StageReport, PipelineError> {
    let cfg = &ctx.cfg;
    let bundle = load_vae(ctx)?;
    let (mut store, start, stats) = match resume {
        Some(p) => {
            let (s, meta, step) = resume_state(p)?;
            let stats = LatentStats::from_meta(&meta, p)?;
            (s, step, stats)
        }
        None => {
            let path = ctx.require_checkpoint(Stage::Lra)?;
            let (mut s, meta) = load_checkpoint(&path)?;
            s.reset_optimizer();
            (s, 0, LatentStats::from_meta(&meta, &path)?)
        }
    };
    let data = latent_data(ctx, &bundle, Some(stats))?;
    let labels: Vec<usize> = data.corpus.entries.iter().map(|e| e.class.index()).collect();
    let gen = &cfg.generator;
    let sc = &cfg.flow_stage;
    let opt = AdamW::default();
    let mut log = LossLog::open(&ctx.loss_log(Stage::Flow), "step,flow,total,lr", &ctx.hash, start)?;
    let mut last = f64::NAN;
    for step in start..sc.steps {
        let mut rng = stream_rng(cfg.seed, Stream::Flow, step);
        let idx = pick_batch(&mut rng, &data.train, sc.batch);
        let zs: Vec<&Tensor> = idx.iter().map(|&i| &data.latents[i]).collect();
        let lab: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let lab = flow::condition_dropout(&lab, &gen.null_class(), gen.flow.cond_dropout, &mut rng);
        let noise: Vec<Tensor> = zs.iter().map(|z| Tensor::randn(z.shape(), 1.0, &mut rng)).collect();
        let times: Vec<f64> = (0..zs.len())
            .map(|_| {
                let t = flow::sample_timestep(&mut rng, &gen.flow);
                gen.flow.train_shift().map_or(t, |s| flow::time_shift(t, s))
            })
            .collect();
        let (grads, total) = {
            let mut g = Graph::with_frozen(&store, |n| !generator::trains_in_class_conditioning(n, sc.train_base));
            let l = generator::class_flow_loss_graph(&mut g, gen, &zs, &lab, &noise, &times)?;
            (g.backward(l)?, g.value(l).item())
        };
        if !total.is_finite() {
            return Err(PipelineError::Numerical(format!("non-finite flow loss at step {step}")));
        }
        let lr = cosine_lr(sc.lr, step + 1, sc.warmup, sc.steps, sc.final_lr_fraction);
        opt.step(&mut store, &grads, lr)?;
        let flow_mse = if gen.flow.flow_weight != 0.0 { total / gen.flow.flow_weight } else { 0.0 };
        log.row(&[step.to_string(), flow_mse.to_string(), total.to_string(), lr.to_string()])?;
        last = total;
    }
    log.finish()?;
    let end = start.max(sc.steps);
    let mut meta = BTreeMap::from([("step".to_string(), Tensor::scalar(end as f64)), ("config_hash".to_string(), text_tensor(&ctx.hash))]);
    data.stats.to_meta(&mut meta);
    save_checkpoint(&ctx.checkpoint(Stage::Flow), &store, &meta)?;
    Ok(StageReport { stage: Stage::Flow, start_step: start, end_step: end, final_loss: last })
}

pub fn train(ctx: &RunContext, stage: Stage, resume: Option<&Path>) -> Result<StageReport, PipelineError> {
    if let Some(pre) = stage.prerequisite() {
        if resume.is_none() || pre != Stage::Lra {
            ctx.require_checkpoint(pre)?;
        }
    }
    match stage {
        Stage::Vae => train_vae(ctx, resume),
        Stage::Lra => train_lra(ctx, resume),
        Stage::Flow => train_flow(ctx, resume),
    }
}

/// Config hash stored in a checkpoint, if any.
pub fn checkpoint_hash(path: &Path) -> Result<Option<String>, PipelineError> {
    let (_, meta) = load_checkpoint(path)?;
    Ok(meta.get("config_hash").map(text_from_tensor))
}

/// Paths of all motion files under `root`, relative and sorted.
fn motion_files(root: &Path) -> Result<Vec<PathBuf>, PipelineError> {
    fn walk(dir: &Path, base: &Path, out: &mut Vec<PathBuf>) -> io::Result<()> {
        for e in fs::read_dir(dir)? {
            let p = e?.path();
            if p.is_dir() {
                walk(&p, base, out)?;
            } else if p.extension().is_some_and(|x| x == "m269") {
                out.push(p.strip_prefix(base).expect("inside base").to_path_buf());
            }
        }
        Ok(())
    }
    let mut out = Vec::new();
    walk(root, root, &mut out)?;
    out.sort();
    Ok(out)
}

/// Reconstruction metrics over paired motion files plus the series behind
/// them.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedEval {
    pub rows: Vec<MetricRow>,
    pub cdf: Vec<(f64, f64)>,
    pub spectrum: Vec<(f64, f64)>,
    pub pairs: usize,
}

/// Compares every motion file under `pred` with the file at the same
/// relative path under `gt`.
pub fn eval_dirs(pred: &Path, gt: &Path, threshold_mm: f64) -> Result<PairedEval, PipelineError> {
    let files = motion_files(pred)?;
    if files.is_empty() {
        return Err(PipelineError::Prerequisite(format!("no motion files under {}", pred.display())));
    }
    let skel = SkeletonDef::default();
    let mut pairs = Vec::with_capacity(files.len());
    for f in &files {
        let g = gt.join(f);
        if !g.is_file() {
            return Err(PipelineError::Prerequisite(format!("{} has no counterpart {}", pred.join(f).display(), g.display())));
        }
        let a = recover_joints(&motion_io::load_motion(&pred.join(f))?, &skel)?;
        let b = recover_joints(&motion_io::load_motion(&g)?, &skel)?;
        pairs.push((a, b));
    }
    paired_metrics(&pairs, threshold_mm)
}

/// Metric rows for `(prediction, ground truth)` joint pairs.
pub fn paired_metrics(pairs: &[(crate::motion::JointSequence, crate::motion::JointSequence)], threshold_mm: f64) -> Result<PairedEval, PipelineError> {
    let n = pairs.len() as f64;
    let (mut mp, mut pa, mut ape, mut ave, mut ade, mut fde, mut jp, mut jg) = (0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
    let mut pa_mm = Vec::with_capacity(pairs.len());
    let mut power: Vec<f64> = Vec::new();
    let mut freqs: Vec<f64> = Vec::new();
    let (mut low, mut mid, mut high) = (0.0, 0.0, 0.0);
    for (a, b) in pairs {
        mp += metrics::mpjpe(a, b)?.value / n;
        let p = metrics::pa_mpjpe(a, b)?.value;
        pa += p / n;
        pa_mm.push(p * 1000.0);
        let (e_ape, e_ave) = metrics::ape_ave(a, b)?;
        ape += e_ape.value / n;
        ave += e_ave.value / n;
        let (d, f) = metrics::ade_fde(a, b)?;
        ade += d / n;
        fde += f / n;
        for j in 0..JOINT_COUNT {
            jp += metrics::jitter_std(a, j)? / (n * JOINT_COUNT as f64);
            jg += metrics::jitter_std(b, j)? / (n * JOINT_COUNT as f64);
        }
        let s = metrics::residual_spectrum(a, b)?;
        if power.is_empty() {
            power = vec![0.0; s.power.len()];
            freqs = s.frequencies.clone();
        }
        if s.power.len() == power.len() {
            power.iter_mut().zip(&s.power).for_each(|(acc, v)| *acc += v / n);
        }
        low += s.low / n;
        mid += s.mid / n;
        high += s.high / n;
    }
    let cdf = metrics::error_cdf(&pa_mm)?;
    let scope = "all";
    let rows = vec![
        MetricRow::new("mpjpe", scope, mp, Units::Meters),
        MetricRow::new("pa_mpjpe", scope, pa, Units::Meters),
        MetricRow::new("ape", scope, ape, Units::Centimeters),
        MetricRow::new("ave", scope, ave, Units::CentimetersPerSecond),
        MetricRow::new("ade", scope, ade, Units::Meters),
        MetricRow::new("fde", scope, fde, Units::Meters),
        MetricRow::new("jitter_pred", scope, jp, Units::MetersPerSecondSquared),
        MetricRow::new("jitter_gt", scope, jg, Units::MetersPerSecondSquared),
        MetricRow::new("motion_accuracy", scope, metrics::motion_accuracy(&pa_mm, threshold_mm)?, Units::Unitless),
        MetricRow::new("pa_mpjpe_median", scope, metrics::cdf_quantile(&cdf, 0.5).unwrap_or(f64::NAN), Units::Millimeters),
        MetricRow::new("residual_power_low", scope, low, Units::Unitless),
        MetricRow::new("residual_power_mid", scope, mid, Units::Unitless),
        MetricRow::new("residual_power_high", scope, high, Units::Unitless),
    ];
    Ok(PairedEval { rows, cdf, spectrum: freqs.into_iter().zip(power).collect(), pairs: pairs.len() })
}

pub fn write_metrics(path: &Path, rows: &[MetricRow], hash: &str) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    metrics::write_metrics_csv(&mut w, rows, Some(hash))?;
    w.flush()
}

pub fn write_series(path: &Path, header: (&str, &str), points: &[(f64, f64)], hash: &str) -> io::Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    metrics::write_series_csv(&mut w, header, points, Some(hash))?;
    w.flush()
}

/// Writes the paired evaluation as `<stem>.csv`, `<stem>_cdf.csv` and
/// `<stem>_spectrum.csv` in `dir`.
pub fn write_paired_eval(dir: &Path, stem: &str, eval: &PairedEval, hash: &str) -> io::Result<()> {
    write_metrics(&dir.join(format!("{stem}.csv")), &eval.rows, hash)?;
    write_series(&dir.join(format!("{stem}_cdf.csv")), ("pa_mpjpe_mm", "fraction"), &eval.cdf, hash)?;
    write_series(&dir.join(format!("{stem}_spectrum.csv")), ("frequency_hz", "power"), &eval.spectrum, hash)
}

/// Held-out reconstructions through the motion encoder's mean: written to
/// `out/recon/`, scored against the corpus, scoped `vae`.
pub fn analyze_vae(ctx: &RunContext) -> Result<Vec<MetricRow>, PipelineError> {
    let bundle = load_vae(ctx)?;
    let corpus = ctx.load_corpus()?;
    let (_, held) = corpus.split(ctx.cfg.corpus.heldout_every);
    let held_corpus = Corpus {
        entries: held.iter().map(|&i| corpus.entries[i].clone()).collect(),
        motions: held.iter().map(|&i| corpus.motions[i].clone()).collect(),
    };
    let latents = encode_corpus(&ctx.cfg.vae, &bundle, &held_corpus)?;
    let recon = decode_latents(&ctx.cfg.vae, &bundle, &latents)?;
    let dir = ctx.out.join("recon");
    for tag in MotionTag::ALL {
        fs::create_dir_all(dir.join(tag.name()))?;
    }
    for (e, m) in held_corpus.entries.iter().zip(&recon) {
        motion_io::save_motion(&dir.join(e.relative_path()), m)?;
    }
    let eval = eval_dirs(&dir, &ctx.corpus_dir(), ctx.cfg.eval.accuracy_threshold_mm)?;
    write_paired_eval(&ctx.out, "vae_recon", &eval, &ctx.hash)?;
    Ok(eval.rows.into_iter().map(|r| MetricRow { scope: "vae_heldout".into(), ..r }).collect())
}

fn load_generator(ctx: &RunContext, stage: Stage) -> Result<(ParamStore, LatentStats), PipelineError> {
    let path = ctx.require_checkpoint(stage)?;
    let (store, meta) = load_checkpoint(&path)?;
    let stats = LatentStats::from_meta(&meta, &path)?;
    Ok((store, stats))
}

/// Copy of a generator whose flow head outputs exactly zero.
pub fn zero_output_copy(store: &ParamStore) -> ParamStore {
    let mut s = store.clone();
    for name in ["flow.out.w", "flow.out.b"] {
        if let Some(t) = s.get_mut(name) {
            *t = Tensor::zeros(t.shape());
        }
    }
    s
}

/// Shuffled-condition control on held-out latents for the trained stage-0
/// model and for a zero-output copy.
pub fn analyze_lra(ctx: &RunContext) -> Result<Vec<MetricRow>, PipelineError> {
    let cfg = &ctx.cfg;
    let bundle = load_vae(ctx)?;
    let (store, stats) = load_generator(ctx, Stage::Lra)?;
    let data = latent_data(ctx, &bundle, Some(stats))?;
    let held: Vec<Tensor> = data.held.iter().map(|&i| data.latents[i].clone()).collect();
    let sampler = SamplerConfig { steps: cfg.eval.lra_sample_steps, guidance: 1.0, shift: cfg.generator.flow.sample_shift() };
    let seed = stream_rng(cfg.seed, Stream::LraEval, 0).random();
    let r = lra::shuffled_condition_eval(&store, &cfg.generator, &held, &cfg.lra_stage.bottleneck, &sampler, seed)?;
    let control = lra::shuffled_condition_eval(&zero_output_copy(&store), &cfg.generator, &held, &cfg.lra_stage.bottleneck, &sampler, seed)?;
    let scope = "lra_heldout";
    Ok(vec![
        MetricRow::new("matched_mse", scope, r.matched, Units::Unitless),
        MetricRow::new("shuffled_mse", scope, r.shuffled, Units::Unitless),
        MetricRow::new("shuffle_ratio", scope, r.ratio, Units::Unitless),
        MetricRow::new("frechet_matched", scope, r.frechet_matched, Units::Unitless),
        MetricRow::new("frechet_shuffled", scope, r.frechet_shuffled, Units::Unitless),
        MetricRow::new("control_shuffle_ratio", scope, control.ratio, Units::Unitless),
    ])
}

/// Class-conditional samples decoded to raw features, with their labels.
pub fn generate(
    ctx: &RunContext,
    store: &ParamStore,
    stats: &LatentStats,
    bundle: &VaeBundle,
    labels: &[usize],
    seed: u64,
) -> Result<Vec<MotionRepr>, PipelineError> {
    let cfg = &ctx.cfg;
    let shape = cfg.latent_shape();
    let mut rng = stream_rng(seed, Stream::Sample, 0);
    let noise: Vec<Tensor> = labels.iter().map(|_| Tensor::randn(&[shape.tokens, shape.dim], 1.0, &mut rng)).collect();
    let sampler = SamplerConfig::from_flow(&cfg.generator.flow);
    let mut latents = Vec::with_capacity(labels.len());
    for (lab, nz) in labels.chunks(CHUNK).zip(noise.chunks(CHUNK)) {
        let refs: Vec<&Tensor> = nz.iter().collect();
        let out = generator::sample_classes(store, &cfg.generator, lab, &refs, &sampler)?;
        latents.extend(out.iter().map(|z| stats.restore(z)));
    }
    decode_latents(&cfg.vae, bundle, &latents)
}

/// Nearest-centroid accuracy and per-class Fréchet distances of generated
/// samples, against the same measures for an untrained generator.
pub fn analyze_flow(ctx: &RunContext) -> Result<Vec<MetricRow>, PipelineError> {
    let cfg = &ctx.cfg;
    let bundle = load_vae(ctx)?;
    let (store, stats) = load_generator(ctx, Stage::Flow)?;
    let corpus = ctx.load_corpus()?;
    let skel = SkeletonDef::default();
    let real: Vec<(MotionTag, crate::motion::JointSequence)> =
        corpus.entries.iter().zip(&corpus.motions).map(|(e, m)| Ok((e.class, recover_joints(m, &skel)?))).collect::<Result<_, MotionError>>()?;
    let centroids = Centroids::fit(&real.iter().map(|(t, j)| (*t, classification_features(j))).collect::<Vec<_>>());
    let per = cfg.eval.samples_per_class;
    let labels: Vec<usize> = (0..MotionTag::ALL.len() * per).map(|i| i / per).collect();
    let seed = stream_rng(cfg.seed, Stream::FlowEval, 0).random();

    let mut untrained = ParamStore::new();
    generator::init_generator(&mut untrained, &cfg.generator, cfg.latent_shape(), stream_rng(cfg.seed, Stream::Init, 1).random());

    let score = |motions: &[MotionRepr]| -> Result<(f64, Vec<f64>), PipelineError> {
        let joints: Vec<_> = motions.iter().map(|m| recover_joints(m, &skel)).collect::<Result<_, _>>()?;
        let correct = joints.iter().zip(&labels).filter(|(j, &l)| centroids.classify(&classification_features(j)).index() == l).count();
        let mut fds = Vec::new();
        for tag in MotionTag::ALL {
            let gen: Vec<Vec<f64>> = joints.iter().zip(&labels).filter(|(_, &l)| l == tag.index()).map(|(j, _)| compact_features(j)).collect();
            let refs: Vec<Vec<f64>> = real.iter().filter(|(t, _)| *t == tag).map(|(_, j)| compact_features(j)).collect();
            fds.push(metrics::frechet_gaussian(&gen, &refs)?);
        }
        Ok((correct as f64 / labels.len() as f64, fds))
    };
    let (acc, fd) = score(&generate(ctx, &store, &stats, &bundle, &labels, seed)?)?;
    let (base_acc, base_fd) = score(&generate(ctx, &untrained, &stats, &bundle, &labels, seed)?)?;

    let scope = "flow_generated";
    let mut rows = vec![
        MetricRow::new("class_accuracy", scope, acc, Units::Unitless),
        MetricRow::new("class_accuracy_untrained", scope, base_acc, Units::Unitless),
    ];
    let mut min_gain = f64::INFINITY;
    for (tag, (f, b)) in MotionTag::ALL.iter().zip(fd.iter().zip(&base_fd)) {
        rows.push(MetricRow::new(&format!("frechet_{tag}"), scope, *f, Units::Unitless));
        rows.push(MetricRow::new(&format!("frechet_untrained_{tag}"), scope, *b, Units::Unitless));
        min_gain = min_gain.min(b / f);
    }
    rows.push(MetricRow::new("frechet_reduction_min", scope, min_gain, Units::Unitless));
    Ok(rows)
}

/// Writes `count` samples of `class` (or of every class in turn) under
/// `out/samples/` with a manifest recording each sample's class.
pub fn sample(ctx: &RunContext, class: Option<MotionTag>, count: usize, seed: u64) -> Result<Vec<PathBuf>, PipelineError> {
    let bundle = load_vae(ctx)?;
    let (store, stats) = load_generator(ctx, Stage::Flow)?;
    let tags: Vec<MotionTag> = (0..count).map(|k| class.unwrap_or(MotionTag::ALL[k % MotionTag::ALL.len()])).collect();
    let labels: Vec<usize> = tags.iter().map(|t| t.index()).collect();
    let motions = generate(ctx, &store, &stats, &bundle, &labels, seed)?;
    let dir = ctx.out.join("samples");
    fs::create_dir_all(&dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join(MANIFEST))?);
    writeln!(manifest, "# config_hash={}", ctx.hash)?;
    writeln!(manifest, "# seed={seed}")?;
    writeln!(manifest, "file,class")?;
    let mut paths = Vec::with_capacity(count);
    for (k, (tag, m)) in tags.iter().zip(&motions).enumerate() {
        let name = format!("{k:04}_{tag}.m269");
        motion_io::save_motion(&dir.join(&name), m)?;
        writeln!(manifest, "{name},{tag}")?;
        paths.push(dir.join(name));
    }
    manifest.flush()?;
    Ok(paths)
}

/// Wall-clock seconds spent training and analyzing each stage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct StageTimes {
    pub corpus: f64,
    pub stages: Vec<(Stage, f64)>,
}

impl StageTimes {
    pub fn of(&self, stage: Stage) -> f64 {
        self.stages.iter().filter(|(s, _)| *s == stage).map(|(_, t)| t).sum()
    }

    pub fn total(&self) -> f64 {
        self.corpus + self.stages.iter().map(|(_, t)| t).sum::<f64>()
    }
}

/// Full pipeline: corpus, the three training stages, and every analysis,
/// collected into `out/metrics.csv`.
pub fn run_all(ctx: &RunContext) -> Result<Vec<MetricRow>, PipelineError> {
    run_all_timed(ctx).map(|(rows, _)| rows)
}

pub fn run_all_timed(ctx: &RunContext) -> Result<(Vec<MetricRow>, StageTimes), PipelineError> {
    fs::create_dir_all(&ctx.out)?;
    let mut times = StageTimes::default();
    let clock = Instant::now();
    gen_corpus(ctx)?;
    times.corpus = clock.elapsed().as_secs_f64();
    let mut rows = Vec::new();
    for stage in [Stage::Vae, Stage::Lra, Stage::Flow] {
        let clock = Instant::now();
        let report = train(ctx, stage, None)?;
        rows.push(MetricRow::new("final_loss", &format!("{}_train", stage.name()), report.final_loss, Units::Unitless));
        rows.extend(analyze(ctx, stage)?);
        times.stages.push((stage, clock.elapsed().as_secs_f64()));
    }
    write_metrics(&ctx.out.join("metrics.csv"), &rows, &ctx.hash)?;
    Ok((rows, times))
}

/// Runs the analysis for one stage and writes `<stage>_metrics.csv`.
pub fn analyze(ctx: &RunContext, stage: Stage) -> Result<Vec<MetricRow>, PipelineError> {
    let rows = match stage {
        Stage::Vae => analyze_vae(ctx)?,
        Stage::Lra => analyze_lra(ctx)?,
        Stage::Flow => analyze_flow(ctx)?,
    };
    write_metrics(&ctx.out.join(format!("{}_metrics.csv", stage.name())), &rows, &ctx.hash)?;
    Ok(rows)
}

//! On-disk synthetic corpus: `<root>/<class>/<seed>.m269` plus a CSV
//! manifest with one `class,seed,frames,paired` row per sample.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::motion::{
    encode_repr, io, project_weak_perspective, recover_joints, CodecConfig, MotionError, MotionRepr, SkeletonDef,
    WeakPerspectiveCam,
};
use crate::synth::{gen_motion, render_feature_map, MotionClass, MotionTag};
use crate::vae::VisionInput;

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub samples: usize,
    pub frames: usize,
    /// Relative class weights for walk, wave, squat.
    pub class_split: [f64; 3],
    /// Probability that a sample carries a reference image.
    pub paired_fraction: f64,
    /// Every `heldout_every`-th sample per class is held out; 0 disables.
    pub heldout_every: usize,
    pub image: ImageConfig,
    pub codec: CodecConfig,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 300,
            frames: 32,
            class_split: [1.0, 1.0, 1.0],
            paired_fraction: 0.5,
            heldout_every: 10,
            image: ImageConfig::default(),
            codec: CodecConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ImageConfig {
    pub channels: usize,
    pub size: usize,
    pub sigma: f64,
}

impl Default for ImageConfig {
    fn default() -> Self {
        Self { channels: 32, size: 16, sigma: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusEntry {
    pub class: MotionTag,
    pub seed: u64,
    pub frames: usize,
    pub paired: bool,
}

impl CorpusEntry {
    pub fn relative_path(&self) -> PathBuf {
        PathBuf::from(self.class.name()).join(format!("{}.m269", self.seed))
    }
}

#[derive(Debug, Clone)]
pub struct Corpus {
    pub entries: Vec<CorpusEntry>,
    pub motions: Vec<MotionRepr>,
}

/// Sample counts per class, proportional to `split`; rounding remainders go
/// to the earliest classes.
pub fn class_counts(samples: usize, split: &[f64; 3]) -> [usize; 3] {
    let total: f64 = split.iter().sum();
    let exact = split.map(|w| samples as f64 * w / total);
    let mut counts = exact.map(|x| x.floor() as usize);
    let left = samples - counts.iter().sum::<usize>();
    // largest remainders first, ties to the earlier class
    let mut order = [0, 1, 2];
    order.sort_by(|&a, &b| (exact[b] - exact[b].floor()).total_cmp(&(exact[a] - exact[a].floor())));
    for &k in order.iter().take(left) {
        counts[k] += 1;
    }
    counts
}

/// The sample list implied by a config and seed, without touching disk.
pub fn plan_corpus(cfg: &CorpusConfig, seed: u64) -> Vec<CorpusEntry> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let counts = class_counts(cfg.samples, &cfg.class_split);
    let mut out = Vec::with_capacity(cfg.samples);
    for (tag, n) in MotionTag::ALL.into_iter().zip(counts) {
        for _ in 0..n {
            let s: u64 = rng.random_range(0..1u64 << 48);
            let paired = rng.random_bool(cfg.paired_fraction.clamp(0.0, 1.0));
            out.push(CorpusEntry { class: tag, seed: s, frames: cfg.frames, paired });
        }
    }
    out
}

/// Generates one sample: class parameters and motion both derive from the
/// entry seed.
pub fn synthesize(entry: &CorpusEntry, codec: &CodecConfig) -> Result<MotionRepr, MotionError> {
    let mut rng = ChaCha8Rng::seed_from_u64(entry.seed);
    let class = MotionClass::random(entry.class, &mut rng);
    let (joints, rots) = gen_motion(&class, entry.frames, entry.seed);
    encode_repr(&joints, Some(&rots), &SkeletonDef::default(), codec)
}

pub fn write_manifest<W: Write>(w: &mut W, entries: &[CorpusEntry], config_hash: &str) -> std::io::Result<()> {
    writeln!(w, "# config_hash={config_hash}")?;
    writeln!(w, "class,seed,frames,paired")?;
    for e in entries {
        writeln!(w, "{},{},{},{}", e.class, e.seed, e.frames, u8::from(e.paired))?;
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<CorpusEntry>, MotionError> {
    let bad = |line: usize, msg: &str| MotionError::Format(format!("{}:{}: {msg}", path.display(), line + 1));
    let mut out = Vec::new();
    for (i, line) in BufReader::new(fs::File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.starts_with('#') || line.starts_with("class,") || line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 4 {
            return Err(bad(i, "expected 4 fields"));
        }
        out.push(CorpusEntry {
            class: f[0].parse().map_err(|e: String| bad(i, &e))?,
            seed: f[1].parse().map_err(|_| bad(i, "bad seed"))?,
            frames: f[2].parse().map_err(|_| bad(i, "bad frame count"))?,
            paired: match f[3] {
                "0" => false,
                "1" => true,
                _ => return Err(bad(i, "paired must be 0 or 1")),
            },
        });
    }
    Ok(out)
}

/// Writes every sample and the manifest under `root`.
pub fn gen_corpus(root: &Path, cfg: &CorpusConfig, seed: u64, config_hash: &str) -> Result<Vec<CorpusEntry>, MotionError> {
    let entries = plan_corpus(cfg, seed);
    for tag in MotionTag::ALL {
        fs::create_dir_all(root.join(tag.name()))?;
    }
    for e in &entries {
        io::save_motion(&root.join(e.relative_path()), &synthesize(e, &cfg.codec)?)?;
    }
    let mut w = BufWriter::new(fs::File::create(root.join(MANIFEST))?);
    write_manifest(&mut w, &entries, config_hash)?;
    w.flush()?;
    Ok(entries)
}

pub fn load_corpus(root: &Path) -> Result<Corpus, MotionError> {
    let entries = read_manifest(&root.join(MANIFEST))?;
    let motions = entries
        .iter()
        .map(|e| {
            let m = io::load_motion(&root.join(e.relative_path()))?;
            if m.frames() != e.frames {
                return Err(MotionError::FrameMismatch(m.frames(), e.frames));
            }
            Ok(m)
        })
        .collect::<Result<_, _>>()?;
    Ok(Corpus { entries, motions })
}

impl Corpus {
    /// Indices of held-out samples: every `every`-th sample of each class.
    pub fn split(&self, every: usize) -> (Vec<usize>, Vec<usize>) {
        let mut seen = [0usize; 3];
        let (mut train, mut held) = (Vec::new(), Vec::new());
        for (i, e) in self.entries.iter().enumerate() {
            let k = &mut seen[e.class.index()];
            if every > 0 && *k % every == every - 1 {
                held.push(i);
            } else {
                train.push(i);
            }
            *k += 1;
        }
        (train, held)
    }
}

/// Camera that frames a standing body inside a `size`-pixel square.
pub fn reference_camera(size: usize) -> WeakPerspectiveCam {
    let scale = size as f64 / 2.4;
    WeakPerspectiveCam { scale, translation: [size as f64 / 2.0, size as f64 / 2.0 - 0.9 * scale] }
}

/// Reference image for a motion: its first recovered frame, projected and
/// rendered as Gaussian feature maps.
pub fn vision_input(raw: &MotionRepr, cfg: &ImageConfig) -> Result<VisionInput, MotionError> {
    let joints = recover_joints(raw, &SkeletonDef::default())?;
    let joints2d = project_weak_perspective(joints.frame(0), &reference_camera(cfg.size));
    let feature_map = render_feature_map(&joints2d, cfg.channels, cfg.size, cfg.size, cfg.sigma);
    Ok(VisionInput { feature_map, joints2d })
}

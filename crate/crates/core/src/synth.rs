//! Procedural motions and feature maps standing in for captured data and
//! image backbones.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::motion::{
    axis_angle, forward_kinematics, yaw_matrix, JointSequence, LocalRotations, SkeletonDef, FRAME_RATE, JOINT_COUNT,
    LEFT_HIP, RIGHT_HIP,
};

const L_KNEE: usize = 4;
const R_KNEE: usize = 5;
const SPINE1: usize = 3;
const L_ANKLE: usize = 7;
const R_ANKLE: usize = 8;
const L_SHOULDER: usize = 16;
const R_SHOULDER: usize = 17;
const L_ELBOW: usize = 18;
const R_ELBOW: usize = 19;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MotionTag {
    Walk,
    Wave,
    Squat,
}

impl MotionTag {
    pub const ALL: [MotionTag; 3] = [MotionTag::Walk, MotionTag::Wave, MotionTag::Squat];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            MotionTag::Walk => "walk",
            MotionTag::Wave => "wave",
            MotionTag::Squat => "squat",
        }
    }
}

impl fmt::Display for MotionTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        MotionTag::ALL.into_iter().find(|t| t.name() == s).ok_or_else(|| format!("unknown motion class `{s}`"))
    }
}

/// Motion family plus its parameters. `frequency` is in Hz and must stay
/// below the 10 Hz Nyquist limit; `speed` is the root ground speed in m/s.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionClass {
    pub tag: MotionTag,
    pub amplitude: f64,
    pub frequency: f64,
    pub phase: f64,
    pub speed: f64,
}

impl MotionClass {
    /// Draws class parameters from their per-class ranges.
    pub fn random<R: Rng + ?Sized>(tag: MotionTag, rng: &mut R) -> Self {
        let phase = rng.random_range(0.0..TAU);
        match tag {
            MotionTag::Walk => Self {
                tag,
                amplitude: rng.random_range(0.3..0.6),
                frequency: rng.random_range(0.8..1.2),
                phase,
                speed: rng.random_range(0.9..1.4),
            },
            MotionTag::Wave => Self {
                tag,
                amplitude: rng.random_range(0.4..0.8),
                frequency: rng.random_range(1.0..2.0),
                phase,
                speed: 0.0,
            },
            MotionTag::Squat => Self {
                tag,
                amplitude: rng.random_range(0.5..1.0),
                frequency: rng.random_range(0.4..0.8),
                phase,
                speed: 0.0,
            },
        }
    }
}

fn rx(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::x(), a)
}

fn rz(a: f64) -> Matrix3<f64> {
    axis_angle(Vector3::z(), a)
}

/// Generates `frames` frames of `class`. `seed` fixes the heading (within
/// ±0.25 rad of +Z, like canonicalized capture data) and small posture
/// variations; output is a deterministic function of all three arguments.
/// The root starts at the ground-plane origin.
pub fn gen_motion(class: &MotionClass, frames: usize, seed: u64) -> (JointSequence, LocalRotations) {
    let skel = SkeletonDef::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let heading: f64 = rng.random_range(-0.25..0.25);
    let arm_drop = rng.random_range(1.1..1.35);
    let lean = rng.random_range(-0.05..0.05);
    let h0 = skel.standing_height();
    let w = TAU * class.frequency;
    let dir = Vector3::new(heading.sin(), 0.0, heading.cos());
    let mut joints = Vec::with_capacity(frames);
    let mut rots: LocalRotations = Vec::with_capacity(frames);
    for f in 0..frames {
        let t = f as f64 / FRAME_RATE;
        let ph = w * t + class.phase;
        let mut local = [Matrix3::identity(); JOINT_COUNT];
        local[0] = yaw_matrix(heading);
        local[SPINE1] = rx(lean);
        local[L_SHOULDER] = rz(-arm_drop);
        local[R_SHOULDER] = rz(arm_drop);
        let mut root = Vector3::new(0.0, h0, 0.0);
        match class.tag {
            MotionTag::Walk => {
                let a = class.amplitude;
                local[LEFT_HIP] = rx(a * ph.sin());
                local[RIGHT_HIP] = rx(-a * ph.sin());
                local[L_KNEE] = rx(0.6 * a * (1.0 - ph.cos()));
                local[R_KNEE] = rx(0.6 * a * (1.0 + ph.cos()));
                local[L_SHOULDER] = rx(-0.6 * a * ph.sin()) * rz(-arm_drop);
                local[R_SHOULDER] = rx(0.6 * a * ph.sin()) * rz(arm_drop);
                local[L_ELBOW] = rx(-0.3);
                local[R_ELBOW] = rx(-0.3);
                root += dir * (class.speed * t);
                root.y = h0 - 0.03 + 0.015 * (2.0 * ph).cos();
            }
            MotionTag::Wave => {
                local[R_SHOULDER] = rz(-0.9 - 0.2 * (arm_drop - 1.2));
                local[R_ELBOW] = rz(-0.4 + class.amplitude * ph.sin());
            }
            MotionTag::Squat => {
                let d = class.amplitude * 0.5 * (1.0 - ph.cos());
                for (hip, knee, ankle) in [(LEFT_HIP, L_KNEE, L_ANKLE), (RIGHT_HIP, R_KNEE, R_ANKLE)] {
                    local[hip] = rx(-d);
                    local[knee] = rx(2.0 * d);
                    local[ankle] = rx(-d);
                }
                local[L_SHOULDER] = rx(-d) * rz(-arm_drop);
                local[R_SHOULDER] = rx(-d) * rz(arm_drop);
                root.y = h0 - 0.79 * (1.0 - d.cos());
            }
        }
        joints.push(forward_kinematics(&skel, &local, &root));
        rots.push(local);
    }
    (JointSequence::new(joints), rots)
}

/// `C × H × W` feature volume.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self { channels, height, width, values: vec![0.0; channels * height * width] }
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.values[(c * self.height + y) * self.width + x]
    }

    /// Pixel `(x, y)` of the largest value in channel `c`.
    pub fn argmax(&self, c: usize) -> (usize, usize) {
        let plane = &self.values[c * self.height * self.width..(c + 1) * self.height * self.width];
        let idx = plane
            .iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
            .0;
        (idx % self.width, idx / self.width)
    }
}

/// Renders one isotropic Gaussian bump (peak 1) per channel, centered on
/// joint `c mod 22`. Channels past the first 22 use twice the width.
/// Pixel `(x, y)` samples the continuous plane at integer coordinates.
pub fn render_feature_map(joints2d: &[[f64; 2]; JOINT_COUNT], channels: usize, height: usize, width: usize, sigma: f64) -> FeatureMap {
    assert!(sigma > 0.0, "sigma must be positive");
    let mut fm = FeatureMap::zeros(channels, height, width);
    for c in 0..channels {
        let [px, py] = joints2d[c % JOINT_COUNT];
        let s = if c < JOINT_COUNT { sigma } else { 2.0 * sigma };
        let inv = 1.0 / (2.0 * s * s);
        for y in 0..height {
            for x in 0..width {
                let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
                fm.values[(c * height + y) * width + x] = (-d2 * inv).exp();
            }
        }
    }
    fm
}

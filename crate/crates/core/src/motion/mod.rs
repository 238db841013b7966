//! The 269-dimensional motion representation and its geometry.
//!
//! Per-frame layout:
//!
//! | range        | width | content                                        |
//! |--------------|-------|------------------------------------------------|
//! | `[0, 3)`     | 3     | root yaw increment, planar translation (x, z)  |
//! | `[3, 4)`     | 1     | root height                                    |
//! | `[4, 67)`    | 63    | joints 1..22 relative to root, heading removed |
//! | `[67, 193)`  | 126   | local 6D rotations of joints 1..22             |
//! | `[193, 259)` | 66    | joint velocities in the heading frame          |
//! | `[259, 263)` | 4     | foot contacts                                  |
//! | `[263, 269)` | 6     | global root orientation, 6D                    |
//!
//! The first 263 channels follow the conventional text-to-motion layout; the
//! 6D global orientation tail is absolute per frame.

mod camera;
mod codec;
pub mod io;
mod normalize;
mod rotation;
mod skeleton;

pub use camera::{project_weak_perspective, WeakPerspectiveCam};
pub use codec::{
    derive_local_rotations, detect_foot_contacts, encode_repr, forward_kinematics, integrate_root, recover_joints,
    CodecConfig, RootState,
};
pub use normalize::Normalizer;
pub use rotation::{align_vectors, axis_angle, matrix_to_rot6d, rot6d_to_matrix, wrap_angle, yaw_matrix, yaw_of, Rotation6D};
pub use skeleton::*;

use nalgebra::{Matrix3, Vector3};
use thiserror::Error;

pub const FRAME_RATE: f64 = 20.0;

pub const ROOT_INC: std::ops::Range<usize> = 0..3;
pub const ROOT_HEIGHT: std::ops::Range<usize> = 3..4;
pub const REL_POS: std::ops::Range<usize> = 4..67;
pub const LOCAL_ROT: std::ops::Range<usize> = 67..193;
pub const VELOCITY: std::ops::Range<usize> = 193..259;
pub const FOOT_CONTACT: std::ops::Range<usize> = 259..263;
pub const GLOBAL_ORIENT: std::ops::Range<usize> = 263..269;

/// Width of each layout component, in order.
pub const LAYOUT_WIDTHS: [usize; 7] = [3, 1, 63, 126, 66, 4, 6];
pub const REPR_DIM: usize = 269;
pub const LEGACY_DIM: usize = 263;
/// Root increment, height and relative joint positions.
pub const JOINT_CHANNELS: usize = 67;

#[derive(Debug, Error)]
pub enum MotionError {
    #[error("degenerate 6D rotation (zero or parallel columns)")]
    DegenerateRotation,
    #[error("matrix is not a rotation (orthonormality error {0:e})")]
    NotARotation(f64),
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("non-finite joint position at frame {frame}, joint {joint}")]
    NonFinite { frame: usize, joint: usize },
    #[error("feature width {0} is not {REPR_DIM}")]
    BadWidth(usize),
    #[error("frame count mismatch: {0} vs {1}")]
    FrameMismatch(usize, usize),
    #[error("motion file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// World-space joint positions, `T × 22 × 3` meters at [`FRAME_RATE`].
#[derive(Debug, Clone, PartialEq)]
pub struct JointSequence {
    frames: Vec<[Vector3<f64>; JOINT_COUNT]>,
}

impl JointSequence {
    pub fn new(frames: Vec<[Vector3<f64>; JOINT_COUNT]>) -> Self {
        Self { frames }
    }

    pub fn from_flat(t: usize, data: &[f64]) -> Result<Self, MotionError> {
        if data.len() != t * JOINT_COUNT * 3 {
            return Err(MotionError::Format(format!("expected {} values, got {}", t * JOINT_COUNT * 3, data.len())));
        }
        let frames = data
            .chunks_exact(JOINT_COUNT * 3)
            .map(|f| std::array::from_fn(|j| Vector3::new(f[3 * j], f[3 * j + 1], f[3 * j + 2])))
            .collect();
        Ok(Self { frames })
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.frames.iter().flat_map(|f| f.iter().flat_map(|p| [p.x, p.y, p.z])).collect()
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> &[Vector3<f64>; JOINT_COUNT] {
        &self.frames[t]
    }

    pub fn frames(&self) -> &[[Vector3<f64>; JOINT_COUNT]] {
        &self.frames
    }

    pub fn joint(&self, t: usize, j: usize) -> Vector3<f64> {
        self.frames[t][j]
    }

    pub fn map_points(&self, f: impl Fn(&Vector3<f64>) -> Vector3<f64>) -> Self {
        Self { frames: self.frames.iter().map(|fr| std::array::from_fn(|j| f(&fr[j]))).collect() }
    }

    pub fn check_finite(&self) -> Result<(), MotionError> {
        for (t, f) in self.frames.iter().enumerate() {
            if let Some(j) = f.iter().position(|p| !p.iter().all(|v| v.is_finite())) {
                return Err(MotionError::NonFinite { frame: t, joint: j });
            }
        }
        Ok(())
    }
}

/// Per-frame, per-joint local rotations (`T × 22`). Joint 0 holds the global
/// root orientation; every other joint is relative to its parent.
pub type LocalRotations = Vec<[Matrix3<f64>; JOINT_COUNT]>;

/// A `T × 269` motion feature sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionRepr {
    frames: usize,
    data: Vec<f64>,
}

impl MotionRepr {
    pub fn new(frames: usize, data: Vec<f64>) -> Result<Self, MotionError> {
        if frames == 0 || data.len() % frames != 0 {
            return Err(MotionError::BadWidth(if frames == 0 { 0 } else { data.len() / frames }));
        }
        if data.len() / frames != REPR_DIM {
            return Err(MotionError::BadWidth(data.len() / frames));
        }
        Ok(Self { frames, data })
    }

    pub fn zeros(frames: usize) -> Self {
        Self { frames, data: vec![0.0; frames * REPR_DIM] }
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        &self.data[t * REPR_DIM..(t + 1) * REPR_DIM]
    }

    pub fn frame_mut(&mut self, t: usize) -> &mut [f64] {
        &mut self.data[t * REPR_DIM..(t + 1) * REPR_DIM]
    }

    /// Per-channel mean over frames.
    pub fn channel_means(&self) -> Vec<f64> {
        let mut m = vec![0.0; REPR_DIM];
        for t in 0..self.frames {
            for (a, v) in m.iter_mut().zip(self.frame(t)) {
                *a += v;
            }
        }
        m.iter_mut().for_each(|v| *v /= self.frames as f64);
        m
    }
}

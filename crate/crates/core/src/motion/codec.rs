use nalgebra::{Matrix3, Vector3};

use super::rotation::{align_vectors, matrix_to_rot6d, rot6d_to_matrix, wrap_angle, yaw_matrix, yaw_of, Rotation6D};
use super::skeleton::{SkeletonDef, JOINT_COUNT, LEFT_HIP, LEFT_SHOULDER, RIGHT_HIP, RIGHT_SHOULDER};
use super::{
    JointSequence, LocalRotations, MotionError, MotionRepr, FOOT_CONTACT, GLOBAL_ORIENT, LOCAL_ROT, REL_POS, REPR_DIM,
    ROOT_HEIGHT, ROOT_INC, VELOCITY,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodecConfig {
    /// Squared foot speed (m²/frame²) below which a foot joint is in contact.
    pub contact_threshold: f64,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self { contact_threshold: 2e-3 }
    }
}

/// Root heading and ground-plane position.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RootState {
    pub yaw: f64,
    pub x: f64,
    pub z: f64,
}

/// Rotates a world vector into the heading-free frame at `yaw`.
fn unyaw(yaw: f64, v: &Vector3<f64>) -> Vector3<f64> {
    yaw_matrix(-yaw) * v
}

/// Global joint positions from local rotations and a root trajectory.
pub fn forward_kinematics(
    skel: &SkeletonDef,
    rots: &[Matrix3<f64>; JOINT_COUNT],
    root: &Vector3<f64>,
) -> [Vector3<f64>; JOINT_COUNT] {
    let mut global = [Matrix3::identity(); JOINT_COUNT];
    let mut pos = [Vector3::zeros(); JOINT_COUNT];
    global[0] = rots[0];
    pos[0] = *root;
    for j in 1..JOINT_COUNT {
        let p = skel.parents[j];
        pos[j] = pos[p] + global[p] * skel.offsets[j];
        global[j] = global[p] * rots[j];
    }
    pos
}

/// Twist-free local rotations derived from joint positions.
///
/// The root takes a pure heading from the hip/shoulder across-vector; every
/// other joint takes the minimal rotation aligning its first child's rest
/// bone with the observed bone. Twist about bones is not observable from
/// positions, so these are approximate; positions remain authoritative.
pub fn derive_local_rotations(joints: &JointSequence, skel: &SkeletonDef) -> LocalRotations {
    joints
        .frames()
        .iter()
        .map(|p| {
            let across = (p[LEFT_HIP] - p[RIGHT_HIP]) + (p[LEFT_SHOULDER] - p[RIGHT_SHOULDER]);
            let fwd = across.cross(&Vector3::y());
            let yaw = if fwd.x.hypot(fwd.z) < 1e-12 { 0.0 } else { fwd.x.atan2(fwd.z) };
            let mut global = [Matrix3::identity(); JOINT_COUNT];
            let mut local = [Matrix3::identity(); JOINT_COUNT];
            global[0] = yaw_matrix(yaw);
            local[0] = global[0];
            for j in 1..JOINT_COUNT {
                let parent = global[skel.parents[j]];
                global[j] = match skel.first_child(j) {
                    Some(c) => {
                        let rest = parent * skel.offsets[c];
                        let bone = p[c] - p[j];
                        if rest.norm() < 1e-12 || bone.norm() < 1e-12 {
                            parent
                        } else {
                            align_vectors(&rest, &bone) * parent
                        }
                    }
                    None => parent,
                };
                local[j] = parent.transpose() * global[j];
            }
            local
        })
        .collect()
}

/// Per-frame binary contacts for the four foot joints.
///
/// Frame `t` uses the displacement from `t` to `t + 1`; the last frame copies
/// its neighbor. Sequences shorter than two frames are all-contact.
pub fn detect_foot_contacts(joints: &JointSequence, skel: &SkeletonDef, cfg: &CodecConfig) -> Vec<[f64; 4]> {
    let t = joints.len();
    let mut out = Vec::with_capacity(t);
    for f in 0..t.saturating_sub(1) {
        out.push(std::array::from_fn(|k| {
            let j = skel.feet[k];
            let v = joints.joint(f + 1, j) - joints.joint(f, j);
            if v.norm_squared() < cfg.contact_threshold {
                1.0
            } else {
                0.0
            }
        }));
    }
    match out.last().copied() {
        Some(last) => out.push(last),
        None => out.extend(std::iter::repeat_n([1.0; 4], t)),
    }
    out
}

/// Integrates `[yaw increment, local dx, local dz]` rows into root states.
///
/// Returns `increments.len() + 1` states: the initial state followed by the
/// state after each increment. Planar deltas are expressed in the heading
/// frame of the state they start from.
pub fn integrate_root(increments: &[[f64; 3]], initial_yaw: f64, initial: (f64, f64)) -> Vec<RootState> {
    let mut s = RootState { yaw: initial_yaw, x: initial.0, z: initial.1 };
    let mut out = Vec::with_capacity(increments.len() + 1);
    out.push(s);
    for inc in increments {
        let (sn, cs) = s.yaw.sin_cos();
        s.x += cs * inc[1] + sn * inc[2];
        s.z += -sn * inc[1] + cs * inc[2];
        s.yaw += inc[0];
        out.push(s);
    }
    out
}

/// Encodes joints (and optionally their local rotations) into the 269-dim
/// representation. Emits `T` frames; the increment and velocity channels of
/// the last frame repeat frame `T - 2`.
pub fn encode_repr(
    joints: &JointSequence,
    local_rots: Option<&LocalRotations>,
    skel: &SkeletonDef,
    cfg: &CodecConfig,
) -> Result<MotionRepr, MotionError> {
    let t = joints.len();
    if t < 2 {
        return Err(MotionError::TooFewFrames { need: 2, got: t });
    }
    joints.check_finite()?;
    let derived;
    let rots = match local_rots {
        Some(r) => {
            if r.len() != t {
                return Err(MotionError::FrameMismatch(r.len(), t));
            }
            r
        }
        None => {
            derived = derive_local_rotations(joints, skel);
            &derived
        }
    };
    let yaws: Vec<f64> = rots.iter().map(|r| yaw_of(&r[0])).collect();
    let contacts = detect_foot_contacts(joints, skel, cfg);
    let mut repr = MotionRepr::zeros(t);
    for f in 0..t {
        let p = joints.frame(f);
        let yaw = yaws[f];
        let root = p[0];
        let out = repr.frame_mut(f);
        // increments and velocities look one frame ahead
        let g = if f + 1 < t { f } else { t - 2 };
        let (pg, pn) = (joints.frame(g), joints.frame(g + 1));
        let d = unyaw(yaws[g], &(pn[0] - pg[0]));
        out[ROOT_INC.start] = wrap_angle(yaws[g + 1] - yaws[g]);
        out[ROOT_INC.start + 1] = d.x;
        out[ROOT_INC.start + 2] = d.z;
        out[ROOT_HEIGHT.start] = root.y;
        for j in 1..JOINT_COUNT {
            let rel = unyaw(yaw, &Vector3::new(p[j].x - root.x, p[j].y, p[j].z - root.z));
            let o = REL_POS.start + 3 * (j - 1);
            out[o..o + 3].copy_from_slice(rel.as_slice());
            let r6 = matrix_to_rot6d(&rots[f][j])?;
            let o = LOCAL_ROT.start + 6 * (j - 1);
            out[o..o + 6].copy_from_slice(&r6.0);
        }
        for j in 0..JOINT_COUNT {
            let v = unyaw(yaws[g], &(pn[j] - pg[j]));
            let o = VELOCITY.start + 3 * j;
            out[o..o + 3].copy_from_slice(v.as_slice());
        }
        out[FOOT_CONTACT].copy_from_slice(&contacts[f]);
        out[GLOBAL_ORIENT].copy_from_slice(&matrix_to_rot6d(&rots[f][0])?.0);
    }
    Ok(repr)
}

/// Recovers world joint positions from the position channels.
///
/// The initial heading comes from frame 0's global-orientation tail (0 when
/// that tail is degenerate, e.g. zeroed); the trajectory starts at the
/// ground-plane origin.
pub fn recover_joints(repr: &MotionRepr, _skel: &SkeletonDef) -> Result<JointSequence, MotionError> {
    if repr.data().len() != repr.frames() * REPR_DIM {
        return Err(MotionError::BadWidth(repr.data().len() / repr.frames().max(1)));
    }
    let t = repr.frames();
    let tail = repr.frame(0)[GLOBAL_ORIENT].to_vec();
    let yaw0 = match rot6d_to_matrix(&Rotation6D(tail.try_into().unwrap())) {
        Ok(m) => yaw_of(&m),
        Err(_) => 0.0,
    };
    let incs: Vec<[f64; 3]> = (0..t.saturating_sub(1))
        .map(|f| {
            let r = &repr.frame(f)[ROOT_INC];
            [r[0], r[1], r[2]]
        })
        .collect();
    let states = integrate_root(&incs, yaw0, (0.0, 0.0));
    let frames = (0..t)
        .map(|f| {
            let fr = repr.frame(f);
            let s = states[f];
            let h = fr[ROOT_HEIGHT.start];
            let ry = yaw_matrix(s.yaw);
            std::array::from_fn(|j| {
                if j == 0 {
                    Vector3::new(s.x, h, s.z)
                } else {
                    let o = REL_POS.start + 3 * (j - 1);
                    let rel = ry * Vector3::new(fr[o], fr[o + 1], fr[o + 2]);
                    Vector3::new(rel.x + s.x, rel.y, rel.z + s.z)
                }
            })
        })
        .collect();
    Ok(JointSequence::new(frames))
}

use nalgebra::Vector3;

pub const JOINT_COUNT: usize = 22;

/// Joint names in the 22-joint convention used throughout.
pub const JOINT_NAMES: [&str; JOINT_COUNT] = [
    "pelvis", "left_hip", "right_hip", "spine1", "left_knee", "right_knee", "spine2", "left_ankle",
    "right_ankle", "spine3", "left_foot", "right_foot", "neck", "left_collar", "right_collar", "head",
    "left_shoulder", "right_shoulder", "left_elbow", "right_elbow", "left_wrist", "right_wrist",
];

pub const LEFT_HIP: usize = 1;
pub const RIGHT_HIP: usize = 2;
pub const LEFT_ANKLE: usize = 7;
pub const RIGHT_ANKLE: usize = 8;
pub const LEFT_FOOT: usize = 10;
pub const RIGHT_FOOT: usize = 11;
pub const LEFT_SHOULDER: usize = 16;
pub const RIGHT_SHOULDER: usize = 17;
pub const RIGHT_ELBOW: usize = 19;
pub const RIGHT_WRIST: usize = 21;

/// Kinematic tree with rest offsets (meters, Y up, facing +Z, left = +X).
#[derive(Debug, Clone, PartialEq)]
pub struct SkeletonDef {
    /// Parent of each joint; the root is its own parent.
    pub parents: [usize; JOINT_COUNT],
    /// Offset of each joint from its parent in the parent's frame.
    pub offsets: [Vector3<f64>; JOINT_COUNT],
    /// Foot joints in contact-channel order: left ankle, left toe, right ankle, right toe.
    pub feet: [usize; 4],
}

impl Default for SkeletonDef {
    fn default() -> Self {
        Self::humanml()
    }
}

impl SkeletonDef {
    pub fn humanml() -> Self {
        let v = Vector3::new;
        Self {
            parents: [0, 0, 0, 0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 9, 9, 12, 13, 14, 16, 17, 18, 19],
            offsets: [
                v(0.0, 0.0, 0.0),
                v(0.06, -0.09, 0.0),
                v(-0.06, -0.09, 0.0),
                v(0.0, 0.11, -0.01),
                v(0.0, -0.39, 0.0),
                v(0.0, -0.39, 0.0),
                v(0.0, 0.13, 0.0),
                v(0.0, -0.40, -0.02),
                v(0.0, -0.40, -0.02),
                v(0.0, 0.05, 0.02),
                v(0.0, -0.05, 0.12),
                v(0.0, -0.05, 0.12),
                v(0.0, 0.21, -0.02),
                v(0.08, 0.12, -0.01),
                v(-0.08, 0.12, -0.01),
                v(0.0, 0.09, 0.03),
                v(0.11, 0.03, 0.0),
                v(-0.11, 0.03, 0.0),
                v(0.26, 0.0, 0.0),
                v(-0.26, 0.0, 0.0),
                v(0.25, 0.0, 0.0),
                v(-0.25, 0.0, 0.0),
            ],
            feet: [LEFT_ANKLE, LEFT_FOOT, RIGHT_ANKLE, RIGHT_FOOT],
        }
    }

    /// Pelvis height when standing with all local rotations at identity and
    /// the toes on the ground.
    pub fn standing_height(&self) -> f64 {
        let mut y = 0.0;
        let mut j = LEFT_FOOT;
        while j != 0 {
            y += self.offsets[j].y;
            j = self.parents[j];
        }
        -y
    }

    /// First child of each joint, if any.
    pub fn first_child(&self, j: usize) -> Option<usize> {
        (1..JOINT_COUNT).find(|&c| self.parents[c] == j)
    }

    /// Parents precede children and the graph reaches the root from every joint.
    pub fn is_valid_tree(&self) -> bool {
        self.parents[0] == 0
            && (1..JOINT_COUNT).all(|j| self.parents[j] < j)
            && self.offsets.iter().all(|o| o.iter().all(|v| v.is_finite()))
    }

    pub fn bone_length(&self, j: usize) -> f64 {
        self.offsets[j].norm()
    }
}

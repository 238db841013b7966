//! Hand-crafted motion descriptors used to judge generated samples: a wide
//! vector for nearest-centroid classification and a compact one for
//! Fréchet distance.

use crate::motion::{JointSequence, FRAME_RATE};
use crate::synth::MotionTag;

const PELVIS: usize = 0;
const LEFT_KNEE: usize = 4;
const LEFT_FOOT: usize = 10;
const RIGHT_FOOT: usize = 11;
const LEFT_WRIST: usize = 20;
const RIGHT_WRIST: usize = 21;

fn mean_std(v: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = v.clone().count().max(1) as f64;
    let m = v.clone().sum::<f64>() / n;
    let var = v.map(|x| (x - m) * (x - m)).sum::<f64>() / n;
    (m, var.sqrt())
}

/// Mean planar pelvis speed in m/s.
pub fn planar_speed(j: &JointSequence) -> f64 {
    if j.len() < 2 {
        return 0.0;
    }
    let total: f64 = (1..j.len())
        .map(|t| {
            let d = j.joint(t, PELVIS) - j.joint(t - 1, PELVIS);
            d.x.hypot(d.z)
        })
        .sum();
    total * FRAME_RATE / (j.len() - 1) as f64
}

fn relative(j: &JointSequence, t: usize, joint: usize, axis: usize) -> f64 {
    let p = j.joint(t, joint) - j.joint(t, PELVIS);
    p[axis]
}

/// Mean and std over time of every pelvis-relative joint coordinate, then
/// mean planar speed: `22·3·2 + 1` values.
pub fn classification_features(j: &JointSequence) -> Vec<f64> {
    let joints = j.frame(0).len();
    let mut out = Vec::with_capacity(joints * 6 + 1);
    for joint in 0..joints {
        for axis in 0..3 {
            let (m, s) = mean_std((0..j.len()).map(|t| relative(j, t, joint, axis)));
            out.push(m);
            out.push(s);
        }
    }
    out.push(planar_speed(j));
    out
}

/// Ten summary statistics: speed, pelvis height level and bob, right-wrist
/// height level and spread, right-wrist lateral spread, foot and left-wrist
/// forward swing, left-knee height spread.
pub fn compact_features(j: &JointSequence) -> Vec<f64> {
    let series = |joint: usize, axis: usize| mean_std((0..j.len()).map(move |t| relative(j, t, joint, axis)));
    let (h_mean, h_std) = mean_std((0..j.len()).map(|t| j.joint(t, PELVIS).y));
    let (rw_y, rw_y_std) = series(RIGHT_WRIST, 1);
    vec![
        planar_speed(j),
        h_mean,
        h_std,
        rw_y,
        rw_y_std,
        series(RIGHT_WRIST, 0).1,
        series(LEFT_FOOT, 2).1,
        series(RIGHT_FOOT, 2).1,
        series(LEFT_WRIST, 2).1,
        series(LEFT_KNEE, 1).1,
    ]
}

/// Per-class centroids of feature vectors.
#[derive(Debug, Clone)]
pub struct Centroids {
    pub means: Vec<Vec<f64>>,
}

impl Centroids {
    pub fn fit(samples: &[(MotionTag, Vec<f64>)]) -> Self {
        let dim = samples.first().map_or(0, |s| s.1.len());
        let mut means = vec![vec![0.0; dim]; MotionTag::ALL.len()];
        let mut counts = vec![0usize; MotionTag::ALL.len()];
        for (tag, f) in samples {
            counts[tag.index()] += 1;
            for (a, b) in means[tag.index()].iter_mut().zip(f) {
                *a += b;
            }
        }
        for (m, &n) in means.iter_mut().zip(&counts) {
            m.iter_mut().for_each(|v| *v /= n.max(1) as f64);
        }
        Self { means }
    }

    pub fn classify(&self, f: &[f64]) -> MotionTag {
        let dist = |c: &[f64]| c.iter().zip(f).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        let best = (0..self.means.len()).min_by(|&a, &b| dist(&self.means[a]).total_cmp(&dist(&self.means[b]))).unwrap_or(0);
        MotionTag::ALL[best]
    }
}

use super::{MotionRepr, REPR_DIM};

/// Per-channel standardization statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Channels with smaller spread are scaled as if they had this std.
const STD_FLOOR: f64 = 1e-2;

impl Normalizer {
    pub fn identity() -> Self {
        Self { mean: vec![0.0; REPR_DIM], std: vec![1.0; REPR_DIM] }
    }

    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionRepr>) -> Self {
        let mut sum = vec![0.0; REPR_DIM];
        let mut sq = vec![0.0; REPR_DIM];
        let mut n = 0usize;
        for m in motions {
            for t in 0..m.frames() {
                for (c, v) in m.frame(t).iter().enumerate() {
                    sum[c] += v;
                    sq[c] += v * v;
                }
                n += 1;
            }
        }
        let n = n.max(1) as f64;
        let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let std = sq.iter().zip(&mean).map(|(q, m)| (q / n - m * m).max(0.0).sqrt().max(STD_FLOOR)).collect();
        Self { mean, std }
    }

    /// Shrinks the scale of `channels` by `factor`, so a unit error in
    /// normalized space costs `factor` times less in raw units there.
    pub fn emphasize(&mut self, channels: std::ops::Range<usize>, factor: f64) {
        for c in channels {
            self.std[c] /= factor;
        }
    }

    pub fn normalize(&self, m: &MotionRepr) -> MotionRepr {
        let mut out = m.clone();
        for t in 0..out.frames() {
            for (c, v) in out.frame_mut(t).iter_mut().enumerate() {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        out
    }

    pub fn denormalize(&self, m: &MotionRepr) -> MotionRepr {
        let mut out = m.clone();
        for t in 0..out.frames() {
            for (c, v) in out.frame_mut(t).iter_mut().enumerate() {
                *v = *v * self.std[c] + self.mean[c];
            }
        }
        out
    }
}

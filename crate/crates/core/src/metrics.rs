//! Reconstruction, distributional, spectral and temporal metrics.

use std::fmt;
use std::io::Write;

use nalgebra::{DMatrix, DVector, Matrix3, SymmetricEigen, Vector3};
use rustfft::{num_complex::Complex, FftPlanner};
use thiserror::Error;

use crate::motion::{JointSequence, FRAME_RATE, JOINT_COUNT};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("shape mismatch: {0} vs {1} frames")]
    ShapeMismatch(usize, usize),
    #[error("need at least {need} frames, got {got}")]
    TooFewFrames { need: usize, got: usize },
    #[error("empty input")]
    Empty,
    #[error("feature width mismatch: {0} vs {1}")]
    WidthMismatch(usize, usize),
    #[error("covariance not positive semi-definite (min eigenvalue {0:e})")]
    NotPsd(f64),
    #[error("every frame is degenerate; alignment failed")]
    AlignmentFailed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Units {
    Meters,
    Millimeters,
    Centimeters,
    CentimetersPerSecond,
    MetersPerSecondSquared,
    Unitless,
}

impl fmt::Display for Units {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Units::Meters => "m",
            Units::Millimeters => "mm",
            Units::Centimeters => "cm",
            Units::CentimetersPerSecond => "cm/s",
            Units::MetersPerSecondSquared => "m/s^2",
            Units::Unitless => "1",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorReport {
    pub value: f64,
    /// Mean error per joint, when the metric has one.
    pub per_joint: Option<Vec<f64>>,
    pub units: Units,
    /// Frames skipped because alignment was undefined.
    pub failed_frames: Vec<usize>,
}

impl ErrorReport {
    fn scalar(value: f64, units: Units) -> Self {
        Self { value, per_joint: None, units, failed_frames: Vec::new() }
    }
}

fn check_same(a: &JointSequence, b: &JointSequence) -> Result<(), MetricError> {
    if a.len() != b.len() {
        return Err(MetricError::ShapeMismatch(a.len(), b.len()));
    }
    if a.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(())
}

/// Mean joint error in meters, with a per-joint breakdown.
pub fn mpjpe(pred: &JointSequence, gt: &JointSequence) -> Result<ErrorReport, MetricError> {
    check_same(pred, gt)?;
    let mut per_joint = vec![0.0; JOINT_COUNT];
    for (p, g) in pred.frames().iter().zip(gt.frames()) {
        for j in 0..JOINT_COUNT {
            per_joint[j] += (p[j] - g[j]).norm();
        }
    }
    per_joint.iter_mut().for_each(|v| *v /= pred.len() as f64);
    let value = per_joint.iter().sum::<f64>() / JOINT_COUNT as f64;
    Ok(ErrorReport { value, per_joint: Some(per_joint), units: Units::Meters, failed_frames: Vec::new() })
}

/// Best similarity transform of `src` onto `dst` (rotation without
/// reflection, uniform scale, translation). `None` when `src` collapses to a
/// point.
pub fn procrustes_align(src: &[Vector3<f64>; JOINT_COUNT], dst: &[Vector3<f64>; JOINT_COUNT]) -> Option<[Vector3<f64>; JOINT_COUNT]> {
    let n = JOINT_COUNT as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let var_s: f64 = src.iter().map(|p| (p - mu_s).norm_squared()).sum();
    if var_s < 1e-12 {
        return None;
    }
    let mut h = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        h += (s - mu_s) * (d - mu_d).transpose();
    }
    let svd = h.svd(true, true);
    let (u, v_t) = (svd.u?, svd.v_t?);
    let v = v_t.transpose();
    let sign = (v * u.transpose()).determinant().signum();
    let d = Matrix3::from_diagonal(&Vector3::new(1.0, 1.0, sign));
    let rot = v * d * u.transpose();
    let scale = (svd.singular_values[0] + svd.singular_values[1] + sign * svd.singular_values[2]) / var_s;
    Some(std::array::from_fn(|j| scale * rot * (src[j] - mu_s) + mu_d))
}

/// MPJPE after per-frame similarity alignment of `pred` onto `gt`.
/// Degenerate frames are listed in `failed_frames` and left out of the mean.
pub fn pa_mpjpe(pred: &JointSequence, gt: &JointSequence) -> Result<ErrorReport, MetricError> {
    check_same(pred, gt)?;
    let mut per_joint = vec![0.0; JOINT_COUNT];
    let mut failed = Vec::new();
    for (t, (p, g)) in pred.frames().iter().zip(gt.frames()).enumerate() {
        match procrustes_align(p, g) {
            Some(aligned) => {
                for j in 0..JOINT_COUNT {
                    per_joint[j] += (aligned[j] - g[j]).norm();
                }
            }
            None => failed.push(t),
        }
    }
    let used = pred.len() - failed.len();
    if used == 0 {
        return Err(MetricError::AlignmentFailed);
    }
    per_joint.iter_mut().for_each(|v| *v /= used as f64);
    let value = per_joint.iter().sum::<f64>() / JOINT_COUNT as f64;
    Ok(ErrorReport { value, per_joint: Some(per_joint), units: Units::Meters, failed_frames: failed })
}

/// Absolute position error (cm) and average velocity error (cm/s).
pub fn ape_ave(pred: &JointSequence, gt: &JointSequence) -> Result<(ErrorReport, ErrorReport), MetricError> {
    check_same(pred, gt)?;
    let t = pred.len();
    if t < 2 {
        return Err(MetricError::TooFewFrames { need: 2, got: t });
    }
    let ape = mpjpe(pred, gt)?.value * 100.0;
    let mut ave = 0.0;
    for f in 0..t - 1 {
        for j in 0..JOINT_COUNT {
            let vp = pred.joint(f + 1, j) - pred.joint(f, j);
            let vg = gt.joint(f + 1, j) - gt.joint(f, j);
            ave += (vp - vg).norm() * FRAME_RATE;
        }
    }
    ave *= 100.0 / ((t - 1) * JOINT_COUNT) as f64;
    Ok((ErrorReport::scalar(ape, Units::Centimeters), ErrorReport::scalar(ave, Units::CentimetersPerSecond)))
}

/// Average and final displacement error over predicted frames, in meters.
pub fn ade_fde(pred: &JointSequence, gt: &JointSequence) -> Result<(f64, f64), MetricError> {
    check_same(pred, gt)?;
    let per_frame: Vec<f64> = pred
        .frames()
        .iter()
        .zip(gt.frames())
        .map(|(p, g)| (0..JOINT_COUNT).map(|j| (p[j] - g[j]).norm()).sum::<f64>() / JOINT_COUNT as f64)
        .collect();
    let ade = per_frame.iter().sum::<f64>() / per_frame.len() as f64;
    Ok((ade, *per_frame.last().unwrap()))
}

/// Sample mean and unbiased covariance of row-major samples.
pub fn mean_cov(samples: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>), MetricError> {
    let n = samples.len();
    if n == 0 {
        return Err(MetricError::Empty);
    }
    let k = samples[0].len();
    let mut mu = DVector::zeros(k);
    for s in samples {
        if s.len() != k {
            return Err(MetricError::WidthMismatch(s.len(), k));
        }
        mu += DVector::from_column_slice(s);
    }
    mu /= n as f64;
    let mut cov = DMatrix::zeros(k, k);
    for s in samples {
        let d = DVector::from_column_slice(s) - &mu;
        cov += &d * d.transpose();
    }
    cov /= (n.max(2) - 1) as f64;
    Ok((mu, cov))
}

const COV_REG: f64 = 1e-6;

fn sqrtm_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|l| l.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians given by their statistics. Both
/// covariances receive `1e-6·I` before use.
pub fn frechet_from_stats(
    mu_a: &DVector<f64>,
    cov_a: &DMatrix<f64>,
    mu_b: &DVector<f64>,
    cov_b: &DMatrix<f64>,
) -> Result<f64, MetricError> {
    let k = mu_a.len();
    if mu_b.len() != k || cov_a.nrows() != k || cov_b.nrows() != k {
        return Err(MetricError::WidthMismatch(mu_a.len(), mu_b.len()));
    }
    let reg = DMatrix::identity(k, k) * COV_REG;
    let a = cov_a + &reg;
    let b = cov_b + &reg;
    for c in [&a, &b] {
        let min = SymmetricEigen::new((c + c.transpose()) * 0.5).eigenvalues.min();
        if min < 0.0 {
            return Err(MetricError::NotPsd(min));
        }
    }
    let ra = sqrtm_psd(&a);
    let cross = sqrtm_psd(&(&ra * &b * &ra)).trace();
    let d = (mu_a - mu_b).norm_squared() + a.trace() + b.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Fréchet distance between Gaussian fits of two feature sets.
pub fn frechet_gaussian(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64, MetricError> {
    let (mu_a, cov_a) = mean_cov(a)?;
    let (mu_b, cov_b) = mean_cov(b)?;
    frechet_from_stats(&mu_a, &cov_a, &mu_b, &cov_b)
}

/// Standard deviation of a joint's acceleration (m/s²), computed per axis
/// from second differences and pooled as the root mean of the per-axis
/// variances.
pub fn jitter_std(joints: &JointSequence, joint: usize) -> Result<f64, MetricError> {
    let t = joints.len();
    if t < 3 {
        return Err(MetricError::TooFewFrames { need: 3, got: t });
    }
    let fps2 = FRAME_RATE * FRAME_RATE;
    let acc: Vec<Vector3<f64>> = (1..t - 1)
        .map(|f| (joints.joint(f + 1, joint) - 2.0 * joints.joint(f, joint) + joints.joint(f - 1, joint)) * fps2)
        .collect();
    let n = acc.len() as f64;
    let mean = acc.iter().sum::<Vector3<f64>>() / n;
    let var = acc.iter().map(|a| (a - mean).component_mul(&(a - mean))).sum::<Vector3<f64>>() / n;
    Ok((var.sum() / 3.0).sqrt())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumReport {
    /// Bin centers in Hz, from 0 up to (at most) the Nyquist frequency.
    pub frequencies: Vec<f64>,
    /// One-sided residual power per bin, averaged over joints and axes.
    pub power: Vec<f64>,
    pub low: f64,
    pub mid: f64,
    pub high: f64,
}

impl SpectrumReport {
    pub fn total(&self) -> f64 {
        self.low + self.mid + self.high
    }
}

/// Power spectrum of `pred - gt` with a rectangular window, so sinusoids off
/// the bin grid leak into neighbors. The one-sided power sums to the mean
/// squared residual.
pub fn residual_spectrum(pred: &JointSequence, gt: &JointSequence) -> Result<SpectrumReport, MetricError> {
    check_same(pred, gt)?;
    let t = pred.len();
    if t < 8 {
        return Err(MetricError::TooFewFrames { need: 8, got: t });
    }
    let fft = FftPlanner::new().plan_fft_forward(t);
    let bins = t / 2 + 1;
    let mut power = vec![0.0; bins];
    let mut buf = vec![Complex::new(0.0, 0.0); t];
    for j in 0..JOINT_COUNT {
        for axis in 0..3 {
            for (f, c) in buf.iter_mut().enumerate() {
                *c = Complex::new(pred.joint(f, j)[axis] - gt.joint(f, j)[axis], 0.0);
            }
            fft.process(&mut buf);
            for (k, p) in power.iter_mut().enumerate() {
                let doubled = k != 0 && !(t % 2 == 0 && k == t / 2);
                *p += buf[k].norm_sqr() * if doubled { 2.0 } else { 1.0 };
            }
        }
    }
    let norm = (t * t * JOINT_COUNT * 3) as f64;
    power.iter_mut().for_each(|p| *p /= norm);
    let frequencies: Vec<f64> = (0..bins).map(|k| k as f64 * FRAME_RATE / t as f64).collect();
    let (mut low, mut mid, mut high) = (0.0, 0.0, 0.0);
    for (f, p) in frequencies.iter().zip(&power) {
        match *f {
            f if f < 2.0 => low += p,
            f if f < 6.0 => mid += p,
            _ => high += p,
        }
    }
    Ok(SpectrumReport { frequencies, power, low, mid, high })
}

/// Empirical CDF as `(threshold, fraction ≤ threshold)` steps, one per
/// distinct value.
pub fn error_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>, MetricError> {
    if values.is_empty() {
        return Err(MetricError::Empty);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut curve: Vec<(f64, f64)> = Vec::new();
    for (i, v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match curve.last_mut() {
            Some(last) if last.0 == *v => last.1 = frac,
            _ => curve.push((*v, frac)),
        }
    }
    Ok(curve)
}

/// Smallest threshold whose cumulative fraction reaches `q`.
pub fn cdf_quantile(curve: &[(f64, f64)], q: f64) -> Option<f64> {
    curve.iter().find(|(_, f)| *f >= q - 1e-12).map(|(v, _)| *v)
}

/// Fraction of values at or below `threshold_mm`.
pub fn motion_accuracy(pa_mpjpe_mm: &[f64], threshold_mm: f64) -> Result<f64, MetricError> {
    if pa_mpjpe_mm.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(pa_mpjpe_mm.iter().filter(|v| **v <= threshold_mm).count() as f64 / pa_mpjpe_mm.len() as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub metric: String,
    pub scope: String,
    pub value: f64,
    pub units: Units,
}

impl MetricRow {
    pub fn new(metric: &str, scope: &str, value: f64, units: Units) -> Self {
        Self { metric: metric.into(), scope: scope.into(), value, units }
    }
}

/// `metric,scope,value,units` rows, preceded by a `# config_hash=` comment
/// when a hash is given.
pub fn write_metrics_csv<W: Write>(w: &mut W, rows: &[MetricRow], config_hash: Option<&str>) -> std::io::Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_hash={h}")?;
    }
    writeln!(w, "metric,scope,value,units")?;
    for r in rows {
        writeln!(w, "{},{},{},{}", r.metric, r.scope, r.value, r.units)?;
    }
    Ok(())
}

/// Two-column series for plotting, e.g. spectra or CDF curves.
pub fn write_series_csv<W: Write>(w: &mut W, header: (&str, &str), points: &[(f64, f64)], config_hash: Option<&str>) -> std::io::Result<()> {
    if let Some(h) = config_hash {
        writeln!(w, "# config_hash={h}")?;
    }
    writeln!(w, "{},{}", header.0, header.1)?;
    for (x, y) in points {
        writeln!(w, "{x},{y}")?;
    }
    Ok(())
}

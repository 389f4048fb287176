//! Pose evaluation metrics: ADD, ADD-S, rotation/translation error and the
//! area under the ADD-S accuracy curve.

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::losses::geodesic_angle;

/// Rotation-error histogram bin width in degrees.
pub const ROTATION_BIN_DEG: f64 = 3.0;

/// Default upper integration bound for the ADD-S AUC, in meters.
pub const DEFAULT_AUC_THRESHOLD_M: f64 = 0.1;

/// Object vertices used by the point-based metrics.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelPoints {
    pub points: Vec<Vector3<f64>>,
    pub symmetric: bool,
}

impl ModelPoints {
    pub fn new(points: Vec<Vector3<f64>>, symmetric: bool) -> Result<Self> {
        if points.len() < 4 {
            return Err(Error::Empty(format!(
                "model needs at least 4 points, got {}",
                points.len()
            )));
        }
        if !points.iter().all(|p| p.iter().all(|v| v.is_finite())) {
            return Err(Error::Config("model points must be finite".into()));
        }
        Ok(ModelPoints { points, symmetric })
    }

    /// Largest pairwise distance between model points.
    pub fn diameter(&self) -> f64 {
        let mut best = 0.0f64;
        for (i, a) in self.points.iter().enumerate() {
            for b in &self.points[i + 1..] {
                best = best.max((a - b).norm_squared());
            }
        }
        best.sqrt()
    }
}

fn non_empty(points: &[Vector3<f64>]) -> Result<()> {
    if points.is_empty() {
        return Err(Error::Empty("model point set".into()));
    }
    Ok(())
}

/// Mean distance between corresponding transformed model points, in meters.
pub fn add_metric(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    non_empty(points)?;
    let sum: f64 = points
        .iter()
        .map(|x| (pred.transform_point(x) - gt.transform_point(x)).norm())
        .sum();
    Ok(sum / points.len() as f64)
}

/// Mean over ground-truth-transformed points of the distance to the nearest
/// prediction-transformed point.
pub fn add_s_metric(pred: &Pose, gt: &Pose, points: &[Vector3<f64>]) -> Result<f64> {
    non_empty(points)?;
    let mut cloud: Vec<Vector3<f64>> = points.iter().map(|x| pred.transform_point(x)).collect();
    cloud.sort_by(|a, b| a.x.total_cmp(&b.x));
    let sum: f64 = points
        .iter()
        .map(|x| nearest_distance(&cloud, &gt.transform_point(x)))
        .sum();
    Ok(sum / points.len() as f64)
}

/// Nearest neighbour in a cloud sorted by x, sweeping outward from the query's
/// x position until the x gap alone exceeds the best distance.
fn nearest_distance(sorted: &[Vector3<f64>], q: &Vector3<f64>) -> f64 {
    let start = sorted.partition_point(|p| p.x < q.x);
    let mut best = f64::INFINITY;
    let mut lo = start;
    let mut hi = start;
    loop {
        let mut progressed = false;
        if hi < sorted.len() {
            let p = &sorted[hi];
            let dx = p.x - q.x;
            if dx * dx <= best {
                best = best.min((p - q).norm_squared());
                hi += 1;
                progressed = true;
            } else {
                hi = sorted.len();
            }
        }
        if lo > 0 {
            let p = &sorted[lo - 1];
            let dx = q.x - p.x;
            if dx * dx <= best {
                best = best.min((p - q).norm_squared());
                lo -= 1;
                progressed = true;
            } else {
                lo = 0;
            }
        }
        if !progressed {
            break;
        }
    }
    best.sqrt()
}

/// Geodesic rotation error in degrees and translation error in meters.
pub fn rotation_translation_error(pred: &Pose, gt: &Pose) -> (f64, f64) {
    (
        geodesic_angle(&pred.rotation, &gt.rotation).to_degrees(),
        (pred.translation - gt.translation).norm(),
    )
}

/// Area under `accuracy(τ) = #{e ≤ τ} / n` for `τ ∈ [0, max_threshold]`,
/// normalized by `max_threshold`, integrated exactly over the step function.
pub fn auc_add_s(errors: &[f64], max_threshold: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::Empty("error list".into()));
    }
    if !(max_threshold > 0.0) {
        return Err(Error::Config(format!(
            "AUC threshold must be positive, got {max_threshold}"
        )));
    }
    let mut sorted = errors.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut area = 0.0;
    for (i, e) in sorted.iter().enumerate() {
        let left = e.max(0.0);
        if left >= max_threshold {
            break;
        }
        let right = sorted.get(i + 1).map_or(max_threshold, |v| v.min(max_threshold));
        // accuracy is (i + 1) / n on [e_i, e_{i+1})
        area += (right - left).max(0.0) * (i + 1) as f64 / n;
    }
    Ok(area / max_threshold)
}

/// Fixed-width histogram over `[0, upper)`; values at or above `upper` land
/// in the last bin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    pub fn new(values: &[f64], bin_width: f64, upper: f64) -> Self {
        let bins = (upper / bin_width).ceil().max(1.0) as usize;
        let mut counts = vec![0; bins];
        for v in values {
            let idx = ((v / bin_width).floor().max(0.0) as usize).min(bins - 1);
            counts[idx] += 1;
        }
        Histogram { bin_width, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }
}

/// Per-sample evaluation result.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleMetrics {
    pub add_m: f64,
    pub add_s_m: f64,
    pub rotation_error_deg: f64,
    pub translation_error_m: f64,
}

impl SampleMetrics {
    pub fn compute(pred: &Pose, gt: &Pose, model: &ModelPoints) -> Result<Self> {
        let (rot, trans) = rotation_translation_error(pred, gt);
        Ok(SampleMetrics {
            add_m: add_metric(pred, gt, &model.points)?,
            add_s_m: add_s_metric(pred, gt, &model.points)?,
            rotation_error_deg: rot,
            translation_error_m: trans,
        })
    }
}

/// Aggregated metrics for one split. Lengths are in meters and angles in
/// degrees.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub split: String,
    pub sample_count: usize,
    pub mean_add_m: f64,
    pub mean_add_s_m: f64,
    /// ADD for asymmetric models, ADD-S for symmetric ones.
    pub mean_add_or_add_s_m: f64,
    pub mean_rotation_error_deg: f64,
    pub mean_translation_error_m: f64,
    pub auc_add_s: f64,
    pub auc_max_threshold_m: f64,
    pub rotation_error_histogram_deg: Histogram,
}

impl MetricsReport {
    pub fn from_samples(
        split: &str,
        samples: &[SampleMetrics],
        symmetric: bool,
        auc_max_threshold: f64,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Empty(format!("no samples evaluated for split {split}")));
        }
        let n = samples.len() as f64;
        let mean = |f: fn(&SampleMetrics) -> f64| samples.iter().map(f).sum::<f64>() / n;
        let add_s: Vec<f64> = samples.iter().map(|s| s.add_s_m).collect();
        let rot: Vec<f64> = samples.iter().map(|s| s.rotation_error_deg).collect();
        let mean_add = mean(|s| s.add_m);
        let mean_add_s = mean(|s| s.add_s_m);
        Ok(MetricsReport {
            split: split.to_string(),
            sample_count: samples.len(),
            mean_add_m: mean_add,
            mean_add_s_m: mean_add_s,
            mean_add_or_add_s_m: if symmetric { mean_add_s } else { mean_add },
            mean_rotation_error_deg: mean(|s| s.rotation_error_deg),
            mean_translation_error_m: mean(|s| s.translation_error_m),
            auc_add_s: auc_add_s(&add_s, auc_max_threshold)?,
            auc_max_threshold_m: auc_max_threshold,
            rotation_error_histogram_deg: Histogram::new(&rot, ROTATION_BIN_DEG, 180.0),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::axis_angle;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_vec(rng: &mut impl Rng, s: f64) -> Vector3<f64> {
        Vector3::new(
            rng.random_range(-s..s),
            rng.random_range(-s..s),
            rng.random_range(-s..s),
        )
    }

    fn random_pose(rng: &mut impl Rng) -> Pose {
        Pose::new(
            axis_angle(&random_vec(rng, 1.0), rng.random_range(-3.0..3.0)),
            random_vec(rng, 0.5),
        )
        .unwrap()
    }

    fn brute_add_s(pred: &Pose, gt: &Pose, pts: &[Vector3<f64>]) -> f64 {
        let mut total = 0.0;
        for x in pts {
            let g = gt.transform_point(x);
            let mut best = f64::INFINITY;
            for y in pts {
                best = best.min((pred.transform_point(y) - g).norm());
            }
            total += best;
        }
        total / pts.len() as f64
    }

    #[test]
    fn add_basic_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts: Vec<_> = (0..50).map(|_| random_vec(&mut rng, 0.1)).collect();
        let p = random_pose(&mut rng);
        assert_eq!(add_metric(&p, &p, &pts).unwrap(), 0.0);
        assert_eq!(add_s_metric(&p, &p, &pts).unwrap(), 0.0);
        let d = Vector3::new(0.01, -0.02, 0.02);
        let shifted = Pose::new(p.rotation, p.translation + d).unwrap();
        assert_relative_eq!(add_metric(&shifted, &p, &pts).unwrap(), d.norm(), epsilon = 1e-12);
        assert!(add_metric(&p, &p, &[]).is_err());
        assert!(add_s_metric(&p, &p, &[]).is_err());
    }

    #[test]
    fn add_s_matches_brute_force_on_sphere_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<_> = (0..300)
            .map(|_| random_vec(&mut rng, 1.0).normalize() * 0.1)
            .collect();
        for _ in 0..20 {
            let gt = random_pose(&mut rng);
            let rot = axis_angle(&random_vec(&mut rng, 1.0), rng.random_range(-1.0..1.0));
            let pred = Pose::new(rot * gt.rotation, gt.translation).unwrap();
            let fast = add_s_metric(&pred, &gt, &pts).unwrap();
            let slow = brute_add_s(&pred, &gt, &pts);
            assert_relative_eq!(fast, slow, max_relative = 1e-12);
            assert!(fast <= add_metric(&pred, &gt, &pts).unwrap() + 1e-15);
        }
    }

    #[test]
    fn rotation_translation_error_cases() {
        let p = Pose::identity();
        assert_eq!(rotation_translation_error(&p, &p), (0.0, 0.0));
        let q = Pose::new(axis_angle(&Vector3::z(), std::f64::consts::FRAC_PI_2), Vector3::zeros())
            .unwrap();
        let (r, t) = rotation_translation_error(&q, &p);
        assert_relative_eq!(r, 90.0, epsilon = 1e-9);
        assert_eq!(t, 0.0);
    }

    #[test]
    fn auc_closed_forms() {
        assert_relative_eq!(auc_add_s(&[0.0; 5], 0.1).unwrap(), 1.0);
        assert_eq!(auc_add_s(&[0.2, 0.5], 0.1).unwrap(), 0.0);
        assert_relative_eq!(auc_add_s(&[0.005; 7], 0.1).unwrap(), 0.95, epsilon = 1e-12);
        assert!(auc_add_s(&[], 0.1).is_err());
        assert!(auc_add_s(&[0.1], 0.0).is_err());
    }

    #[test]
    fn auc_matches_per_error_integral() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let n = rng.random_range(1..40);
            let errors: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..0.15)).collect();
            // Each error contributes (T - e) / T when e <= T.
            let oracle = errors.iter().map(|e| (0.1 - e).max(0.0) / 0.1).sum::<f64>() / n as f64;
            assert_relative_eq!(auc_add_s(&errors, 0.1).unwrap(), oracle, max_relative = 1e-9);
        }
    }

    #[test]
    fn histogram_bins() {
        let h = Histogram::new(&[0.0, 2.9, 3.0, 179.0, 250.0], 3.0, 180.0);
        assert_eq!(h.counts.len(), 60);
        assert_eq!(h.counts[0], 2);
        assert_eq!(h.counts[1], 1);
        assert_eq!(h.counts[59], 2);
        assert_eq!(h.total(), 5);
    }

    #[test]
    fn model_points_validation() {
        assert!(ModelPoints::new(vec![Vector3::zeros(); 3], false).is_err());
        let m = ModelPoints::new(
            vec![
                Vector3::new(1.0, 0.0, 0.0),
                Vector3::new(-1.0, 0.0, 0.0),
                Vector3::new(0.0, 0.5, 0.0),
                Vector3::new(0.0, 0.0, 0.2),
            ],
            false,
        )
        .unwrap();
        assert_eq!(m.diameter(), 2.0);
    }
}

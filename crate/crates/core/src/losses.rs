//! Training losses: Euclidean translation loss, geodesic rotation loss and
//! their weighted sum. Each loss has a plain `f64` form and a [`Graph`] form
//! used during training.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::check_rotation;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_rot: f64,
    pub lambda_t: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_rot: 1.0,
            lambda_t: 2.0,
        }
    }
}

impl LossWeights {
    pub fn new(lambda_rot: f64, lambda_t: f64) -> Result<Self> {
        let w = LossWeights {
            lambda_rot,
            lambda_t,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_rot >= 0.0 && self.lambda_t >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if self.lambda_rot == 0.0 && self.lambda_t == 0.0 {
            return Err(Error::Config("loss weights cannot both be zero".into()));
        }
        Ok(())
    }
}

pub fn translation_loss(t_pred: &Vector3<f64>, t_gt: &Vector3<f64>) -> f64 {
    (t_pred - t_gt).norm()
}

/// Geodesic angle `arccos((tr(R_gt R_predᵀ) - 1) / 2)` in radians, with the
/// arccos argument clamped to `[-1, 1]`.
pub fn rotation_loss(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> Result<f64> {
    check_rotation(r_pred)?;
    check_rotation(r_gt)?;
    Ok(geodesic_angle(r_pred, r_gt))
}

/// [`rotation_loss`] without input validation.
pub fn geodesic_angle(r_pred: &Matrix3<f64>, r_gt: &Matrix3<f64>) -> f64 {
    let trace = (r_gt * r_pred.transpose()).trace();
    ((trace - 1.0) / 2.0).clamp(-1.0, 1.0).acos()
}

pub fn total_loss(l_rot: f64, l_t: f64, w: &LossWeights) -> f64 {
    w.lambda_rot * l_rot + w.lambda_t * l_t
}

/// Graph form of [`translation_loss`] for a `1 × 3` prediction.
pub fn translation_loss_graph(g: &mut Graph, t_pred: Var, t_gt: &Vector3<f64>) -> Var {
    let gt = g.constant(Mat::row_vector(t_gt.as_slice().to_vec()));
    let d = g.sub(t_pred, gt);
    let sq = g.mul(d, d);
    let s = g.sum_all(sq);
    g.sqrt(s)
}

/// Graph form of [`rotation_loss`] for a `3 × 3` row-major prediction.
pub fn rotation_loss_graph(g: &mut Graph, r_pred: Var, r_gt: &Matrix3<f64>) -> Var {
    let gt = g.constant(rotation_to_mat(r_gt));
    // tr(R_gt R_predᵀ) = Σ_ij R_gt[i,j] R_pred[i,j]
    let prod = g.mul(r_pred, gt);
    let trace = g.sum_all(prod);
    let shifted = g.add_scalar(trace, -1.0);
    let cos = g.scale(shifted, 0.5);
    let cos = g.clamp(cos, -1.0, 1.0);
    g.acos(cos)
}

pub fn total_loss_graph(g: &mut Graph, l_rot: Var, l_t: Var, w: &LossWeights) -> Var {
    let a = g.scale(l_rot, w.lambda_rot);
    let b = g.scale(l_t, w.lambda_t);
    g.add(a, b)
}

/// Row-major `3 × 3` matrix as a [`Mat`].
pub fn rotation_to_mat(r: &Matrix3<f64>) -> Mat {
    Mat::from_vec(3, 3, crate::geometry::matrix_to_row_major(r).to_vec())
}

pub fn mat_to_rotation(m: &Mat) -> Matrix3<f64> {
    assert_eq!(m.shape(), (3, 3));
    Matrix3::from_row_slice(&m.data)
}

//! Continuous 6D rotation representation.

use nalgebra::{Matrix3, Vector3};

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};

pub const GS_EPS: f64 = 1e-8;

/// Orthonormalizes two 3-vectors `(v[0..3], v[3..6])` into the first two
/// columns of a rotation; the third column is their cross product.
pub fn gram_schmidt_6d(v: &[f64; 6]) -> Result<Matrix3<f64>> {
    let a1 = Vector3::new(v[0], v[1], v[2]);
    let a2 = Vector3::new(v[3], v[4], v[5]);
    let n1 = a1.norm();
    if !(n1 > GS_EPS) {
        return Err(Error::DegenerateRotation(format!("first vector norm {n1}")));
    }
    let c1 = a1 / n1;
    let u = a2 - c1 * a2.dot(&c1);
    let (n2, nu) = (a2.norm(), u.norm());
    if !(n2 > GS_EPS && nu > GS_EPS * n2) {
        return Err(Error::DegenerateRotation(
            "second vector is zero or parallel to the first".into(),
        ));
    }
    let c2 = u / nu;
    Ok(Matrix3::from_columns(&[c1, c2, c1.cross(&c2)]))
}

/// Graph form of [`gram_schmidt_6d`] for a `1 × 6` input. Returns the
/// rotation as a row-major `3 × 3` node. Degenerate inputs are not checked.
pub fn gram_schmidt_graph(g: &mut Graph, v: Var) -> Var {
    assert_eq!(g.shape(v), (1, 6), "gram_schmidt_graph expects 1 x 6");
    let a1 = g.slice_cols(v, 0, 3);
    let a2 = g.slice_cols(v, 3, 3);
    let c1 = normalize_row(g, a1);
    let prod = g.mul(a2, c1);
    let dot = g.sum_cols(prod);
    let proj = g.mul_col(c1, dot);
    let u = g.sub(a2, proj);
    let c2 = normalize_row(g, u);
    let c3 = g.cross(c1, c2);
    // Rows of this stack are the columns of R.
    let cols = g.concat_rows(&[c1, c2, c3]);
    g.transpose(cols)
}

fn normalize_row(g: &mut Graph, a: Var) -> Var {
    let sq = g.mul(a, a);
    let s = g.sum_cols(sq);
    let n = g.sqrt(s);
    let inv = g.recip(n);
    g.mul_col(a, inv)
}

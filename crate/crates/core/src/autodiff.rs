//! A small reverse-mode automatic differentiation engine over row-major
//! `f64` matrices.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks the record in reverse and returns the gradient of a scalar output
//! with respect to every node. Graphs are cheap to build and are thrown away
//! after each sample, which keeps per-sample work independent and lets batches
//! run on separate threads.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "matrix data length mismatch");
        Mat { rows, cols, data }
    }

    pub fn scalar(v: f64) -> Self {
        Mat::from_vec(1, 1, vec![v])
    }

    pub fn row_vector(data: Vec<f64>) -> Self {
        Mat::from_vec(1, data.len(), data)
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on a non-scalar matrix");
        self.data[0]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn add_assign(&mut self, other: &Mat) {
        debug_assert_eq!(self.shape(), other.shape());
        axpy(&mut self.data, 1.0, &other.data);
    }
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// `c ← a·b + beta·c` for an `m × k` by `k × n` product; `a` and `b` are
/// read through `(row, column)` strides, `c` is row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(c.len() >= m * n, "gemm output too small");
    if k > 0 {
        assert!(a.len() > (m - 1) * rsa + (k - 1) * csa, "gemm lhs too small");
        assert!(b.len() > (k - 1) * rsb + (n - 1) * csb, "gemm rhs too small");
    }
    // SAFETY: the asserts above keep every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Geometry of a 2D convolution over an `height × width` map stored as
/// `height*width` rows of channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }
}

/// Multi-scale deformable sampling layout.
///
/// For every query row `i`, head `h`, level `l` and point `k`, the sample
/// location in normalized `[0, 1]²` image coordinates is
/// `ref[i] + offset_scale[l] * offset[i, h, l, k]`. Feature maps are read by
/// bilinear interpolation between cell centers with zero padding outside the
/// map. Head `h` reads channel block `h*d/heads .. (h+1)*d/heads`.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformSpec {
    pub heads: usize,
    pub points: usize,
    /// `(height, width)` of every level.
    pub levels: Vec<(usize, usize)>,
    pub offset_scale: Vec<f64>,
}

impl DeformSpec {
    pub fn samples_per_head(&self) -> usize {
        self.levels.len() * self.points
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sqrt(Var),
    Recip(Var),
    Acos(Var),
    Clamp(Var, f64, f64),
    SumCols(Var),
    SumAll(Var),
    Concat(Vec<Var>),
    Slice(Var, usize),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    Reshape(Var),
    Transpose(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeom,
    },
    Cross(Var, Var),
    Deform {
        levels: Vec<Var>,
        refs: Var,
        offsets: Var,
        weights: Var,
        spec: Box<DeformSpec>,
    },
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Record of one forward computation.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients of a scalar with respect to every node of a [`Graph`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }

    /// Gradients for every parameter of `store` (zeros for unused ones).
    pub fn params(&self, graph: &Graph, store: &ParamStore) -> Vec<Mat> {
        store
            .ids()
            .map(|id| {
                let shape = store.get(id).shape();
                graph
                    .param_vars
                    .get(&id)
                    .and_then(|v| self.grads[v.0].clone())
                    .unwrap_or_else(|| Mat::zeros(shape.0, shape.1))
            })
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A leaf whose gradient is tracked.
    pub fn input(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf for a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    /// `a · b`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.rows, "matmul shape mismatch");
        let mut out = Mat::zeros(am.rows, bm.cols);
        let (m, k, n) = (am.rows, am.cols, bm.cols);
        gemm(m, k, n, &am.data, (k, 1), &bm.data, (n, 1), 0.0, &mut out.data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`, the layout of a linear layer with weights `[out, in]`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, bm.cols, "matmul_bt shape mismatch");
        let mut out = Mat::zeros(am.rows, bm.rows);
        let (m, k, n) = (am.rows, am.cols, bm.rows);
        gemm(m, k, n, &am.data, (k, 1), &bm.data, (1, k), 0.0, &mut out.data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMulBt(a, b), rg)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.shape(), bm.shape(), "elementwise shape mismatch");
        let data = am.data.iter().zip(&bm.data).map(|(x, y)| f(*x, *y)).collect();
        let out = Mat::from_vec(am.rows, am.cols, data);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds the `1 × n` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let (am, rm) = (self.value(a), self.value(r));
        assert_eq!((1, am.cols), rm.shape(), "add_row shape mismatch");
        let mut out = am.clone();
        for i in 0..out.rows {
            axpy(out.row_mut(i), 1.0, &rm.data);
        }
        let rg = self.rg(a) || self.rg(r);
        self.push(out, Op::AddRow(a, r), rg)
    }

    /// Multiplies row `i` of `a` by `c[i]` for an `m × 1` column `c`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let (am, cm) = (self.value(a), self.value(c));
        assert_eq!((am.rows, 1), cm.shape(), "mul_col shape mismatch");
        let mut out = am.clone();
        for i in 0..out.rows {
            let s = cm.data[i];
            out.row_mut(i).iter_mut().for_each(|v| *v *= s);
        }
        let rg = self.rg(a) || self.rg(c);
        self.push(out, Op::MulCol(a, c), rg)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let am = self.value(a);
        let out = Mat::from_vec(am.rows, am.cols, am.data.iter().map(|v| f(*v)).collect());
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.map(a, |v| v + s, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |v| v.max(0.0), Op::Relu(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.map(a, f64::sqrt, Op::Sqrt(a))
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.map(a, f64::recip, Op::Recip(a))
    }

    pub fn acos(&mut self, a: Var) -> Var {
        self.map(a, f64::acos, Op::Acos(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.map(a, |v| v.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row sums as an `m × 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let data = (0..am.rows).map(|i| am.row(i).iter().sum()).collect();
        let out = Mat::from_vec(am.rows, 1, data);
        let rg = self.rg(a);
        self.push(out, Op::SumCols(a), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).data.iter().sum();
        let rg = self.rg(a);
        self.push(Mat::scalar(s), Op::SumAll(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut start = 0;
        for p in parts {
            let pm = self.value(*p);
            assert_eq!(pm.rows, rows, "concat_cols row mismatch");
            for i in 0..rows {
                out.data[i * cols + start..i * cols + start + pm.cols].copy_from_slice(pm.row(i));
            }
            start += pm.cols;
        }
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.cols, "slice_cols out of range");
        let mut out = Mat::zeros(am.rows, len);
        for i in 0..am.rows {
            out.row_mut(i).copy_from_slice(&am.row(i)[start..start + len]);
        }
        let rg = self.rg(a);
        self.push(out, Op::Slice(a, start), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let cols = self.value(parts[0]).cols;
        let mut data = Vec::new();
        for p in parts {
            let pm = self.value(*p);
            assert_eq!(pm.cols, cols, "concat_rows column mismatch");
            data.extend_from_slice(&pm.data);
        }
        let out = Mat::from_vec(data.len() / cols.max(1), cols, data);
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let am = self.value(a);
        assert!(start + len <= am.rows, "slice_rows out of range");
        let out = Mat::from_vec(
            len,
            am.cols,
            am.data[start * am.cols..(start + len) * am.cols].to_vec(),
        );
        let rg = self.rg(a);
        self.push(out, Op::SliceRows(a, start), rg)
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let am = self.value(a);
        assert_eq!(am.data.len(), rows * cols, "reshape size mismatch");
        let out = Mat::from_vec(rows, cols, am.data.clone());
        let rg = self.rg(a);
        self.push(out, Op::Reshape(a), rg)
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let am = self.value(a);
        let mut out = Mat::zeros(am.cols, am.rows);
        for i in 0..am.rows {
            for j in 0..am.cols {
                out.data[j * am.rows + i] = am.data[i * am.cols + j];
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Softmax over consecutive groups of `group` columns in every row.
    pub fn softmax(&mut self, a: Var, group: usize) -> Var {
        let am = self.value(a);
        assert!(group > 0 && am.cols % group == 0, "softmax group mismatch");
        let mut out = am.clone();
        for chunk in out.data.chunks_mut(group) {
            let m = chunk.iter().fold(f64::NEG_INFINITY, |m, v| m.max(*v));
            let mut s = 0.0;
            for v in chunk.iter_mut() {
                *v = (*v - m).exp();
                s += *v;
            }
            chunk.iter_mut().for_each(|v| *v /= s);
        }
        let rg = self.rg(a);
        self.push(out, Op::Softmax(a, group), rg)
    }

    /// Row-wise layer normalization with learned `1 × n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        const EPS: f64 = 1e-5;
        let (xm, gm, bm) = (self.value(x), self.value(gain), self.value(bias));
        let n = xm.cols;
        assert_eq!(gm.shape(), (1, n), "layer_norm gain shape");
        assert_eq!(bm.shape(), (1, n), "layer_norm bias shape");
        let mut xhat = vec![0.0; xm.data.len()];
        let mut rstd = vec![0.0; xm.rows];
        let mut out = Mat::zeros(xm.rows, n);
        for i in 0..xm.rows {
            let row = xm.row(i);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + EPS).sqrt();
            rstd[i] = r;
            for j in 0..n {
                let h = (row[j] - mean) * r;
                xhat[i * n + j] = h;
                out.data[i * n + j] = h * gm.data[j] + bm.data[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        )
    }

    /// 2D convolution. `x` is `[h*w, cin]`, `w` is `[cout, k*k*cin]` with
    /// `(ky, kx, cin)` ordering, `b` is `[1, cout]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeom) -> Var {
        let (xm, wm, bm) = (self.value(x), self.value(w), self.value(b));
        let ConvGeom {
            height,
            width,
            in_channels: cin,
            out_channels: cout,
            kernel: k,
            ..
        } = geom;
        assert_eq!(xm.shape(), (height * width, cin), "conv2d input shape");
        assert_eq!(wm.shape(), (cout, k * k * cin), "conv2d weight shape");
        assert_eq!(bm.shape(), (1, cout), "conv2d bias shape");
        let (oh, ow) = (geom.out_height(), geom.out_width());
        let cols = im2col(&xm.data, &geom);
        let kk = k * k * cin;
        let mut out = Mat::zeros(oh * ow, cout);
        for row in out.data.chunks_mut(cout) {
            row.copy_from_slice(&bm.data);
        }
        gemm(oh * ow, kk, cout, &cols, (kk, 1), &wm.data, (1, kk), 1.0, &mut out.data);
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        self.push(out, Op::Conv2d { x, w, b, geom }, rg)
    }

    /// Row-wise cross product of two `m × 3` matrices.
    pub fn cross(&mut self, a: Var, b: Var) -> Var {
        let (am, bm) = (self.value(a), self.value(b));
        assert_eq!(am.cols, 3, "cross needs 3 columns");
        assert_eq!(am.shape(), bm.shape(), "cross shape mismatch");
        let mut out = Mat::zeros(am.rows, 3);
        for i in 0..am.rows {
            out.row_mut(i).copy_from_slice(&cross3(am.row(i), bm.row(i)));
        }
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Cross(a, b), rg)
    }

    /// Multi-scale deformable sampling (see [`DeformSpec`]). `levels[l]` is
    /// `[h_l*w_l, d]`, `refs` is `[n, 2]`, `offsets` is
    /// `[n, heads*L*K*2]` and `weights` is `[n, heads*L*K]`. Output is `[n, d]`.
    pub fn deform_sample(
        &mut self,
        levels: &[Var],
        refs: Var,
        offsets: Var,
        weights: Var,
        spec: DeformSpec,
    ) -> Var {
        let nl = spec.levels.len();
        assert_eq!(levels.len(), nl, "deform_sample level count");
        assert_eq!(spec.offset_scale.len(), nl, "deform_sample offset scales");
        let d = self.value(levels[0]).cols;
        assert!(d % spec.heads == 0, "channels not divisible by heads");
        for (l, lv) in levels.iter().enumerate() {
            let (h, w) = spec.levels[l];
            assert_eq!(self.value(*lv).shape(), (h * w, d), "deform_sample level shape");
        }
        let n = self.value(refs).rows;
        let per = spec.heads * spec.samples_per_head();
        assert_eq!(self.value(refs).shape(), (n, 2), "deform_sample refs shape");
        assert_eq!(self.value(offsets).shape(), (n, per * 2), "deform_sample offsets shape");
        assert_eq!(self.value(weights).shape(), (n, per), "deform_sample weights shape");
        let dh = d / spec.heads;
        let mut out = Mat::zeros(n, d);
        {
            let level_vals: Vec<&Mat> = levels.iter().map(|v| self.value(*v)).collect();
            let (rm, om, wm) = (self.value(refs), self.value(offsets), self.value(weights));
            for i in 0..n {
                let orow = &mut out.data[i * d..(i + 1) * d];
                for h in 0..spec.heads {
                    let ohead = &mut orow[h * dh..(h + 1) * dh];
                    for l in 0..nl {
                        for k in 0..spec.points {
                            let s = (h * nl + l) * spec.points + k;
                            let a = wm.data[i * per + s];
                            if a == 0.0 {
                                continue;
                            }
                            let loc = SampleLoc::new(&spec, l, rm.row(i), om.row(i), s);
                            loc.for_corners(|idx, cw, _, _| {
                                let src = &level_vals[l].row(idx)[h * dh..(h + 1) * dh];
                                axpy(ohead, a * cw, src);
                            });
                        }
                    }
                }
            }
        }
        let rg = levels.iter().any(|v| self.rg(*v))
            || self.rg(refs)
            || self.rg(offsets)
            || self.rg(weights);
        self.push(
            out,
            Op::Deform {
                levels: levels.to_vec(),
                refs,
                offsets,
                weights,
                spec: Box::new(spec),
            },
            rg,
        )
    }

    /// Gradient of the `1 × 1` node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar output");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Mat::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }

    fn backprop_node(&self, node: &Node, g: &Mat, grads: &mut [Option<Mat>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut Mat)| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = &mut grads[v.0];
            if slot.is_none() {
                let (r, c) = self.nodes[v.0].value.shape();
                *slot = Some(Mat::zeros(r, c));
            }
            f(slot.as_mut().unwrap());
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let (m, k, n) = (am.rows, am.cols, bm.cols);
                acc(*a, &mut |ga| gemm(m, n, k, &g.data, (n, 1), &bm.data, (1, n), 1.0, &mut ga.data));
                acc(*b, &mut |gb| gemm(k, m, n, &am.data, (1, k), &g.data, (n, 1), 1.0, &mut gb.data));
            }
            Op::MatMulBt(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                let (m, k, n) = (am.rows, am.cols, bm.rows);
                acc(*a, &mut |ga| gemm(m, n, k, &g.data, (n, 1), &bm.data, (k, 1), 1.0, &mut ga.data));
                acc(*b, &mut |gb| gemm(n, m, k, &g.data, (1, n), &am.data, (k, 1), 1.0, &mut gb.data));
            }
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| gb.add_assign(g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*b, &mut |gb| axpy(&mut gb.data, -1.0, &g.data));
            }
            Op::Mul(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((o, gv), bv) in ga.data.iter_mut().zip(&g.data).zip(&bm.data) {
                        *o += gv * bv;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((o, gv), av) in gb.data.iter_mut().zip(&g.data).zip(&am.data) {
                        *o += gv * av;
                    }
                });
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |ga| ga.add_assign(g));
                acc(*r, &mut |gr| {
                    for i in 0..g.rows {
                        axpy(&mut gr.data, 1.0, g.row(i));
                    }
                });
            }
            Op::MulCol(a, c) => {
                let (am, cm) = (val(*a), val(*c));
                acc(*a, &mut |ga| {
                    for i in 0..g.rows {
                        axpy(ga.row_mut(i), cm.data[i], g.row(i));
                    }
                });
                acc(*c, &mut |gc| {
                    for i in 0..g.rows {
                        gc.data[i] += dot(g.row(i), am.row(i));
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| axpy(&mut ga.data, *s, &g.data)),
            Op::AddScalar(a) => acc(*a, &mut |ga| ga.add_assign(g)),
            Op::Reshape(a) => acc(*a, &mut |ga| axpy(&mut ga.data, 1.0, &g.data)),
            Op::Relu(a) => {
                let am = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&am.data) {
                        if *x > 0.0 {
                            *o += gv;
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        if *yv > 0.0 {
                            *o += gv * 0.5 / yv;
                        }
                    }
                });
            }
            Op::Recip(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((o, gv), yv) in ga.data.iter_mut().zip(&g.data).zip(&y.data) {
                        *o -= gv * yv * yv;
                    }
                });
            }
            Op::Acos(a) => {
                let am = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&am.data) {
                        let denom = (1.0 - x * x).max(f64::EPSILON).sqrt();
                        *o -= gv / denom;
                    }
                });
            }
            Op::Clamp(a, lo, hi) => {
                let am = val(*a);
                acc(*a, &mut |ga| {
                    for ((o, gv), x) in ga.data.iter_mut().zip(&g.data).zip(&am.data) {
                        if *x >= *lo && *x <= *hi {
                            *o += gv;
                        }
                    }
                });
            }
            Op::SumCols(a) => acc(*a, &mut |ga| {
                let cols = ga.cols;
                for i in 0..ga.rows {
                    let gi = g.data[i];
                    ga.data[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v += gi);
                }
            }),
            Op::SumAll(a) => acc(*a, &mut |ga| {
                let gv = g.data[0];
                ga.data.iter_mut().for_each(|v| *v += gv);
            }),
            Op::Concat(parts) => {
                let mut start = 0;
                for p in parts {
                    let pc = val(*p).cols;
                    acc(*p, &mut |gp| {
                        for i in 0..gp.rows {
                            axpy(gp.row_mut(i), 1.0, &g.row(i)[start..start + pc]);
                        }
                    });
                    start += pc;
                }
            }
            Op::Slice(a, start) => acc(*a, &mut |ga| {
                for i in 0..g.rows {
                    axpy(&mut ga.row_mut(i)[*start..*start + g.cols], 1.0, g.row(i));
                }
            }),
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = val(*p).data.len();
                    acc(*p, &mut |gp| axpy(&mut gp.data, 1.0, &g.data[start..start + len]));
                    start += len;
                }
            }
            Op::SliceRows(a, start) => acc(*a, &mut |ga| {
                let off = start * ga.cols;
                axpy(&mut ga.data[off..off + g.data.len()], 1.0, &g.data);
            }),
            Op::Transpose(a) => acc(*a, &mut |ga| {
                for i in 0..ga.rows {
                    for j in 0..ga.cols {
                        ga.data[i * ga.cols + j] += g.data[j * ga.rows + i];
                    }
                }
            }),
            Op::Softmax(a, group) => {
                let y = &node.value;
                acc(*a, &mut |ga| {
                    for ((oc, gc), yc) in ga
                        .data
                        .chunks_mut(*group)
                        .zip(g.data.chunks(*group))
                        .zip(y.data.chunks(*group))
                    {
                        let s = dot(gc, yc);
                        for j in 0..*group {
                            oc[j] += yc[j] * (gc[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gm = val(*gain);
                let n = gm.cols;
                acc(*bias, &mut |gb| {
                    for i in 0..g.rows {
                        axpy(&mut gb.data, 1.0, g.row(i));
                    }
                });
                acc(*gain, &mut |gg| {
                    for i in 0..g.rows {
                        for j in 0..n {
                            gg.data[j] += g.data[i * n + j] * xhat[i * n + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; n];
                    for i in 0..g.rows {
                        for j in 0..n {
                            dxhat[j] = g.data[i * n + j] * gm.data[j];
                        }
                        let xh = &xhat[i * n..(i + 1) * n];
                        let s1: f64 = dxhat.iter().sum();
                        let s2 = dot(&dxhat, xh);
                        let r = rstd[i] / n as f64;
                        for j in 0..n {
                            gx.data[i * n + j] += r * (n as f64 * dxhat[j] - s1 - xh[j] * s2);
                        }
                    }
                });
            }
            Op::Conv2d { x, w, b, geom } => {
                let (xm, wm) = (val(*x), val(*w));
                let (oh, ow, cout) = (geom.out_height(), geom.out_width(), geom.out_channels);
                acc(*b, &mut |gb| {
                    for i in 0..g.rows {
                        axpy(&mut gb.data, 1.0, g.row(i));
                    }
                });
                let (np, kk) = (oh * ow, wm.cols);
                acc(*w, &mut |gw| {
                    let cols = im2col(&xm.data, geom);
                    gemm(cout, np, kk, &g.data, (1, cout), &cols, (kk, 1), 1.0, &mut gw.data);
                });
                acc(*x, &mut |gx| {
                    let mut gcols = vec![0.0; np * kk];
                    gemm(np, cout, kk, &g.data, (cout, 1), &wm.data, (kk, 1), 0.0, &mut gcols);
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let p = oy * ow + ox;
                            scatter_patch(&mut gx.data, geom, oy, ox, &gcols[p * kk..(p + 1) * kk]);
                        }
                    }
                });
            }
            Op::Cross(a, b) => {
                let (am, bm) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for i in 0..g.rows {
                        axpy(ga.row_mut(i), 1.0, &cross3(bm.row(i), g.row(i)));
                    }
                });
                acc(*b, &mut |gb| {
                    for i in 0..g.rows {
                        axpy(gb.row_mut(i), 1.0, &cross3(g.row(i), am.row(i)));
                    }
                });
            }
            Op::Deform {
                levels,
                refs,
                offsets,
                weights,
                spec,
            } => self.backprop_deform(levels, *refs, *offsets, *weights, spec, g, grads),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_deform(
        &self,
        levels: &[Var],
        refs: Var,
        offsets: Var,
        weights: Var,
        spec: &DeformSpec,
        g: &Mat,
        grads: &mut [Option<Mat>],
    ) {
        let nl = spec.levels.len();
        let d = g.cols;
        let dh = d / spec.heads;
        let per = spec.heads * spec.samples_per_head();
        let n = g.rows;
        let level_vals: Vec<&Mat> = levels.iter().map(|v| self.value(*v)).collect();
        let (rm, om, wm) = (self.value(refs), self.value(offsets), self.value(weights));
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let want_levels: Vec<bool> = levels.iter().map(|v| want(*v)).collect();
        let want_pos = want(refs) || want(offsets);
        let mut g_levels: Vec<Option<Mat>> = levels
            .iter()
            .zip(&want_levels)
            .map(|(v, w)| w.then(|| Mat::zeros(self.value(*v).rows, d)))
            .collect();
        let mut g_refs = Mat::zeros(n, 2);
        let mut g_offsets = Mat::zeros(n, per * 2);
        let mut g_weights = Mat::zeros(n, per);
        for i in 0..n {
            let grow = g.row(i);
            for h in 0..spec.heads {
                let ghead = &grow[h * dh..(h + 1) * dh];
                for l in 0..nl {
                    let (lh, lw) = spec.levels[l];
                    for k in 0..spec.points {
                        let s = (h * nl + l) * spec.points + k;
                        let a = wm.data[i * per + s];
                        let loc = SampleLoc::new(spec, l, rm.row(i), om.row(i), s);
                        let mut gw = 0.0;
                        let (mut gfx, mut gfy) = (0.0, 0.0);
                        let lv = level_vals[l];
                        let mut glv = g_levels[l].as_mut();
                        loc.for_corners(|idx, cw, dfx, dfy| {
                            let src = &lv.row(idx)[h * dh..(h + 1) * dh];
                            let gs = dot(ghead, src);
                            gw += cw * gs;
                            gfx += dfx * gs;
                            gfy += dfy * gs;
                            if let Some(gl) = glv.as_deref_mut() {
                                axpy(&mut gl.row_mut(idx)[h * dh..(h + 1) * dh], a * cw, ghead);
                            }
                        });
                        g_weights.data[i * per + s] += gw;
                        if want_pos {
                            // fx = px - floor(px) with px = u * w - 0.5
                            let gx = a * gfx * lw as f64;
                            let gy = a * gfy * lh as f64;
                            g_refs.data[i * 2] += gx;
                            g_refs.data[i * 2 + 1] += gy;
                            let sc = spec.offset_scale[l];
                            g_offsets.data[i * per * 2 + s * 2] += gx * sc;
                            g_offsets.data[i * per * 2 + s * 2 + 1] += gy * sc;
                        }
                    }
                }
            }
        }
        let mut add = |v: Var, m: Mat| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&m),
                slot => *slot = Some(m),
            }
        };
        for (v, gl) in levels.iter().zip(g_levels) {
            if let Some(gl) = gl {
                add(*v, gl);
            }
        }
        add(refs, g_refs);
        add(offsets, g_offsets);
        add(weights, g_weights);
    }
}

#[inline]
fn cross3(a: &[f64], b: &[f64]) -> [f64; 3] {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

/// One row of receptive-field values per output position.
fn im2col(x: &[f64], geom: &ConvGeom) -> Vec<f64> {
    let (oh, ow) = (geom.out_height(), geom.out_width());
    let kk = geom.kernel * geom.kernel * geom.in_channels;
    let mut cols = vec![0.0; oh * ow * kk];
    for oy in 0..oh {
        for ox in 0..ow {
            let p = oy * ow + ox;
            gather_patch(x, geom, oy, ox, &mut cols[p * kk..(p + 1) * kk]);
        }
    }
    cols
}

fn gather_patch(x: &[f64], geom: &ConvGeom, oy: usize, ox: usize, patch: &mut [f64]) {
    let (k, cin) = (geom.kernel, geom.in_channels);
    for ky in 0..k {
        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
        for kx in 0..k {
            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
            let dst = &mut patch[(ky * k + kx) * cin..(ky * k + kx + 1) * cin];
            if iy < 0 || ix < 0 || iy as usize >= geom.height || ix as usize >= geom.width {
                dst.iter_mut().for_each(|v| *v = 0.0);
            } else {
                let src = (iy as usize * geom.width + ix as usize) * cin;
                dst.copy_from_slice(&x[src..src + cin]);
            }
        }
    }
}

fn scatter_patch(gx: &mut [f64], geom: &ConvGeom, oy: usize, ox: usize, patch: &[f64]) {
    let (k, cin) = (geom.kernel, geom.in_channels);
    for ky in 0..k {
        let iy = (oy * geom.stride + ky) as isize - geom.padding as isize;
        for kx in 0..k {
            let ix = (ox * geom.stride + kx) as isize - geom.padding as isize;
            if iy < 0 || ix < 0 || iy as usize >= geom.height || ix as usize >= geom.width {
                continue;
            }
            let dst = (iy as usize * geom.width + ix as usize) * cin;
            axpy(
                &mut gx[dst..dst + cin],
                1.0,
                &patch[(ky * k + kx) * cin..(ky * k + kx + 1) * cin],
            );
        }
    }
}

/// One bilinear sample position on one level.
struct SampleLoc {
    x0: isize,
    y0: isize,
    fx: f64,
    fy: f64,
    width: usize,
    height: usize,
}

impl SampleLoc {
    fn new(spec: &DeformSpec, level: usize, r: &[f64], off: &[f64], s: usize) -> Self {
        let (height, width) = spec.levels[level];
        let sc = spec.offset_scale[level];
        let u = r[0] + sc * off[s * 2];
        let v = r[1] + sc * off[s * 2 + 1];
        let px = u * width as f64 - 0.5;
        let py = v * height as f64 - 0.5;
        let (x0, y0) = (px.floor(), py.floor());
        SampleLoc {
            x0: x0 as isize,
            y0: y0 as isize,
            fx: px - x0,
            fy: py - y0,
            width,
            height,
        }
    }

    /// Calls `f(cell index, weight, d weight/d fx, d weight/d fy)` for each
    /// in-bounds corner.
    #[inline]
    fn for_corners(&self, mut f: impl FnMut(usize, f64, f64, f64)) {
        let (fx, fy) = (self.fx, self.fy);
        let corners = [
            (0, 0, (1.0 - fx) * (1.0 - fy), -(1.0 - fy), -(1.0 - fx)),
            (1, 0, fx * (1.0 - fy), 1.0 - fy, -fx),
            (0, 1, (1.0 - fx) * fy, -fy, 1.0 - fx),
            (1, 1, fx * fy, fy, fx),
        ];
        for (dx, dy, w, dwx, dwy) in corners {
            let x = self.x0 + dx;
            let y = self.y0 + dy;
            if x < 0 || y < 0 || x as usize >= self.width || y as usize >= self.height {
                continue;
            }
            f(y as usize * self.width + x as usize, w, dwx, dwy);
        }
    }
}

/// Central finite-difference check of `f` at `x`; returns the largest
/// elementwise relative error `|a - n| / max(|a|, |n|, floor)`.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}

//! Parameterized building blocks shared by the network stages.

use rand::Rng;

use crate::autodiff::{ConvGeom, Graph, Mat, Var};
use crate::params::{ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        bias: bool,
        gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let w = store.glorot(format!("{name}.w"), output, input, gain, rng);
        let b = bias.then(|| store.zeros(format!("{name}.b"), 1, output));
        Linear { w, b }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let w = g.param(store, self.w);
        let y = g.matmul_bt(x, w);
        match self.b {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => y,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Norm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gain: store.filled(format!("{name}.gain"), 1, dim, 1.0),
            bias: store.zeros(format!("{name}.bias"), 1, dim),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let gain = g.param(store, self.gain);
        let bias = g.param(store, self.bias);
        g.layer_norm(x, gain, bias)
    }
}

/// Two-layer perceptron with a ReLU between the layers.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        out_gain: f64,
        rng: &mut impl Rng,
    ) -> Self {
        Mlp {
            hidden: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, true, 1.0, rng),
            out: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, true, out_gain, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Var {
        let h = self.hidden.apply(g, store, x);
        let h = g.relu(h);
        self.out.apply(g, store, h)
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = kernel * kernel * in_channels;
        // He-style uniform bound for ReLU stacks.
        let bound = (6.0 / fan_in as f64).sqrt();
        let data = (0..out_channels * fan_in)
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let w = store.insert(format!("{name}.w"), Mat::from_vec(out_channels, fan_in, data));
        let b = store.zeros(format!("{name}.b"), 1, out_channels);
        Conv {
            w,
            b,
            kernel,
            stride,
            padding,
            in_channels,
            out_channels,
        }
    }

    pub fn geom(&self, height: usize, width: usize) -> ConvGeom {
        ConvGeom {
            height,
            width,
            in_channels: self.in_channels,
            out_channels: self.out_channels,
            kernel: self.kernel,
            stride: self.stride,
            padding: self.padding,
        }
    }

    /// Returns the output and its spatial size.
    pub fn apply(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        height: usize,
        width: usize,
    ) -> (Var, usize, usize) {
        let geom = self.geom(height, width);
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let y = g.conv2d(x, w, b, geom);
        (y, geom.out_height(), geom.out_width())
    }
}

/// Sinusoidal code of a point in `[0, 1]²`: `dim / 4` frequencies
/// `2^i · π` per axis, each contributing a sine and a cosine.
pub fn sinusoidal_2d(x: f64, y: f64, dim: usize) -> Vec<f64> {
    let n = dim / 4;
    let mut out = Vec::with_capacity(dim);
    for v in [x, y] {
        for i in 0..n {
            out.push((v * std::f64::consts::PI * (1u64 << i) as f64).sin());
        }
        for i in 0..n {
            out.push((v * std::f64::consts::PI * (1u64 << i) as f64).cos());
        }
    }
    out.resize(dim, 0.0);
    out
}

/// Normalized cell centers of an `h × w` map, row-major `[h*w, 2]`.
pub fn cell_centers(h: usize, w: usize) -> Mat {
    let mut data = Vec::with_capacity(h * w * 2);
    for j in 0..h {
        for i in 0..w {
            data.push((i as f64 + 0.5) / w as f64);
            data.push((j as f64 + 0.5) / h as f64);
        }
    }
    Mat::from_vec(h * w, 2, data)
}

/// Positional codes of every cell of an `h × w` map, `[h*w, dim]`.
pub fn position_table(h: usize, w: usize, dim: usize) -> Mat {
    let centers = cell_centers(h, w);
    let data = (0..h * w)
        .flat_map(|i| sinusoidal_2d(centers.get(i, 0), centers.get(i, 1), dim))
        .collect();
    Mat::from_vec(h * w, dim, data)
}

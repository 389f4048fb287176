//! The multi-view pose transformer: a per-view convolutional backbone with
//! three output scales, a deformable multi-scale encoder, line-of-sight
//! feature enrichment (FLoSE), a decoder whose cross-attention samples every
//! view around per-view reference points, and class-specific pose heads.

pub mod nn;
pub mod rotation;

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{DeformSpec, Graph, Mat, Var};
use crate::error::{Error, Result};
use crate::geometry::{los_map, CameraExtrinsics, CameraIntrinsics, LosMode, Pose};
use crate::losses::{rotation_loss_graph, total_loss_graph, translation_loss_graph, LossWeights};
use crate::params::{ParamId, ParamStore};
use crate::scene::dataset::{read_json, write_json};
use nn::{cell_centers, position_table, sinusoidal_2d, Conv, Linear, Mlp, Norm};
pub use rotation::{gram_schmidt_6d, gram_schmidt_graph, GS_EPS};


pub const LEVELS: usize = 3;
pub const STRIDES: [usize; LEVELS] = [4, 8, 16];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// `[width, height]` of every input view.
    pub image_size: [usize; 2],
    pub d_model: usize,
    pub heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    /// Sampling points per scale in deformable and projective attention.
    pub points: usize,
    pub ffn_dim: usize,
    pub backbone_channels: [usize; LEVELS],
    pub num_queries: usize,
    pub num_classes: usize,
    pub max_views: usize,
    pub los_mode: LosMode,
    pub encoder: bool,
    /// Uniform reference-point jitter during training, as a fraction of the
    /// box size.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: [64, 64],
            d_model: 64,
            heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            points: 4,
            ffn_dim: 128,
            backbone_channels: [16, 32, 64],
            num_queries: 2,
            num_classes: 1,
            max_views: 4,
            los_mode: LosMode::DirOrigin,
            encoder: true,
            jitter: 0.05,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        let d = self.d_model;
        if d == 0 || d % 4 != 0 {
            return bad(format!("d_model must be a positive multiple of 4, got {d}"));
        }
        if self.heads == 0 || d % self.heads != 0 {
            return bad(format!("d_model {d} not divisible by {} heads", self.heads));
        }
        let s = STRIDES[LEVELS - 1];
        let [w, h] = self.image_size;
        if w == 0 || h == 0 || w % s != 0 || h % s != 0 {
            return bad(format!("image size {w}x{h} must be a positive multiple of {s}"));
        }
        for (name, v) in [
            ("points", self.points),
            ("ffn_dim", self.ffn_dim),
            ("num_queries", self.num_queries),
            ("num_classes", self.num_classes),
            ("max_views", self.max_views),
        ] {
            if v == 0 {
                return bad(format!("{name} must be positive"));
            }
        }
        if self.backbone_channels.contains(&0) {
            return bad("backbone_channels must be positive".into());
        }
        if !(0.0..=0.5).contains(&self.jitter) {
            return bad(format!("jitter must lie in [0, 0.5], got {}", self.jitter));
        }
        Ok(())
    }

    /// `(height, width)` of each feature level.
    pub fn level_dims(&self) -> [(usize, usize); LEVELS] {
        let [w, h] = self.image_size;
        STRIDES.map(|s| (h / s, w / s))
    }
}

/// One annotated object box in one view. `bbox` is `[x, y, w, h]` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectBox {
    pub obj_id: u32,
    pub class_id: usize,
    pub bbox: [f64; 4],
}

impl ObjectBox {
    pub fn normalized_center(&self, width: usize, height: usize) -> [f64; 2] {
        [
            (self.bbox[0] + self.bbox[2] / 2.0) / width as f64,
            (self.bbox[1] + self.bbox[3] / 2.0) / height as f64,
        ]
    }
}

/// One input view. `image` is `[h*w, 3]` (see [`image_tensor`]).
#[derive(Clone, Debug)]
pub struct ViewInput {
    pub image: Mat,
    pub intrinsics: CameraIntrinsics,
    pub extrinsics: CameraExtrinsics,
    pub boxes: Vec<ObjectBox>,
}

/// Normalizes RGB8 pixels to roughly zero mean, unit scale.
pub fn image_tensor(rgb: &[u8], width: usize, height: usize) -> Mat {
    assert_eq!(rgb.len(), width * height * 3, "image buffer size");
    Mat::from_vec(
        width * height,
        3,
        rgb.iter().map(|&v| (v as f64 / 255.0 - 0.5) * 4.0).collect(),
    )
}

/// Query bookkeeping: which object each query tracks and where it looks in
/// every view.
#[derive(Clone, Debug, PartialEq)]
pub struct QuerySet {
    /// Reference-view box per query; `None` for padding queries.
    pub objects: Vec<Option<ObjectBox>>,
    /// Normalized reference points, one `[n_q, 2]` matrix per view.
    pub refs: Vec<Mat>,
    /// `valid[v][i]`: query `i` has a box in view `v`.
    pub valid: Vec<Vec<bool>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.objects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.objects.is_empty()
    }
}

/// Builds the query set from per-view boxes; objects are matched across
/// views by id. With `jitter`, reference points move by up to `±jitter` times
/// the box size and are clamped to the image.
pub fn make_queries(
    config: &ModelConfig,
    boxes: &[&[ObjectBox]],
    mut jitter: Option<&mut dyn RngCore>,
) -> Result<QuerySet> {
    let reference = boxes
        .first()
        .ok_or_else(|| Error::Shape("no views given".into()))?;
    if reference.is_empty() {
        return Err(Error::Empty("reference view has no boxes".into()));
    }
    let nq = config.num_queries;
    if reference.len() > nq {
        return Err(Error::Capacity {
            queries: nq,
            objects: reference.len(),
        });
    }
    let [w, h] = config.image_size;
    let objects: Vec<Option<ObjectBox>> = (0..nq).map(|i| reference.get(i).copied()).collect();
    let mut refs = Vec::with_capacity(boxes.len());
    let mut valid = Vec::with_capacity(boxes.len());
    for view in boxes {
        let mut r = Mat::from_vec(nq, 2, [0.5, 0.5].repeat(nq));
        let mut ok = vec![false; nq];
        for (i, obj) in objects.iter().enumerate() {
            let Some(obj) = obj else { continue };
            let Some(b) = view.iter().find(|b| b.obj_id == obj.obj_id) else {
                continue;
            };
            let mut c = b.normalized_center(w, h);
            if let Some(rng) = jitter.as_deref_mut() {
                let j = config.jitter;
                if j > 0.0 {
                    c[0] += rng.random_range(-j..=j) * b.bbox[2] / w as f64;
                    c[1] += rng.random_range(-j..=j) * b.bbox[3] / h as f64;
                }
            }
            r.row_mut(i)
                .copy_from_slice(&[c[0].clamp(0.0, 1.0), c[1].clamp(0.0, 1.0)]);
            ok[i] = true;
        }
        refs.push(r);
        valid.push(ok);
    }
    Ok(QuerySet {
        objects,
        refs,
        valid,
    })
}

/// Per-view multi-scale features, one `[h_l*w_l, d]` node per level.
#[derive(Clone, Debug)]
pub struct FeatureMapSet {
    pub views: Vec<[Var; LEVELS]>,
    pub dims: [(usize, usize); LEVELS],
    pub enriched: bool,
}

#[derive(Clone, Debug)]
struct Backbone {
    stem: Conv,
    refine: Conv,
    down: [Conv; 2],
    proj: [Linear; LEVELS],
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    sampling: Linear,
    attn: Linear,
    value: Linear,
    output: Linear,
    norm1: Norm,
    ffn: Mlp,
    norm2: Norm,
}

/// Weights of the decoder's cross-view attention.
#[derive(Clone, Debug)]
pub struct ProjectiveAttention {
    pub w_offset: Linear,
    pub w_a: Linear,
    pub w_f: Linear,
    pub w_out: Linear,
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    norm1: Norm,
    cross: ProjectiveAttention,
    norm2: Norm,
    ffn: Mlp,
    norm3: Norm,
}

#[derive(Clone, Debug)]
struct Parts {
    backbone: Backbone,
    level_embed: ParamId,
    encoder: Vec<EncoderLayer>,
    flose: Linear,
    query_embed: ParamId,
    center_proj: Linear,
    decoder: Vec<DecoderLayer>,
    rot_head: Mlp,
    trans_head: Mlp,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    parts: Parts,
}

/// Graph nodes produced by a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardVars {
    pub queries: QuerySet,
    pub embeddings: Var,
    /// Row-major `3 × 3` rotation per query.
    pub rotations: Vec<Var>,
    /// `1 × 6` head output per query (class slice).
    pub rotation_6d: Vec<Var>,
    /// `1 × 3` translation per query, meters in the reference camera frame.
    pub translations: Vec<Var>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PosePrediction {
    pub obj_id: Option<u32>,
    pub class_id: usize,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl PosePrediction {
    pub fn pose(&self) -> Result<Pose> {
        Pose::new(self.rotation, self.translation)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub params: ParamStore,
}

fn deform_spec(config: &ModelConfig, heads: usize, points: usize, scale: [f64; LEVELS]) -> DeformSpec {
    DeformSpec {
        heads,
        points,
        levels: config.level_dims().to_vec(),
        offset_scale: scale.to_vec(),
    }
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::default();
        let parts = build(&config, &mut store, &mut rng);
        Ok(Model {
            config,
            params: store,
            parts,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    /// Rebuilds a model from a checkpoint; with `expected`, the stored
    /// config must match it exactly.
    pub fn from_checkpoint(ckpt: Checkpoint, expected: Option<&ModelConfig>) -> Result<Self> {
        if let Some(exp) = expected {
            if *exp != ckpt.config {
                return Err(Error::Config(format!(
                    "checkpoint config {:?} does not match expected {:?}",
                    ckpt.config, exp
                )));
            }
        }
        let mut model = Model::new(ckpt.config)?;
        let mut stored = ckpt.params;
        stored.rebuild_index();
        if stored.len() != model.params.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, model expects {}",
                stored.len(),
                model.params.len()
            )));
        }
        for id in model.params.ids().collect::<Vec<_>>() {
            let name = model.params.name(id).to_string();
            let sid = stored
                .id(&name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            let src = stored.get(sid);
            if src.shape() != model.params.get(id).shape() {
                return Err(Error::Config(format!("shape mismatch for parameter {name}")));
            }
            *model.params.get_mut(id) = src.clone();
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, &self.checkpoint())
    }

    pub fn load(path: &Path, expected: Option<&ModelConfig>) -> Result<Self> {
        Model::from_checkpoint(read_json(path)?, expected)
    }

    fn check_views(&self, views: &[ViewInput]) -> Result<()> {
        if views.is_empty() {
            return Err(Error::Shape("at least one view is required".into()));
        }
        if views.len() > self.config.max_views {
            return Err(Error::Config(format!(
                "{} views exceed the configured maximum of {}",
                views.len(),
                self.config.max_views
            )));
        }
        let [w, h] = self.config.image_size;
        for v in views {
            if v.image.shape() != (w * h, 3) || v.intrinsics.width() != w || v.intrinsics.height() != h
            {
                return Err(Error::Shape(format!(
                    "every view must be {w}x{h} with matching intrinsics"
                )));
            }
        }
        Ok(())
    }

    /// Per-view backbone features at strides 4, 8 and 16.
    pub fn backbone_forward(&self, g: &mut Graph, images: &[Var]) -> Result<FeatureMapSet> {
        let [w, h] = self.config.image_size;
        let s = STRIDES[LEVELS - 1];
        if w % s != 0 || h % s != 0 {
            return Err(Error::Shape(format!("image size {w}x{h} not divisible by {s}")));
        }
        let bb = &self.parts.backbone;
        let p = &self.params;
        let mut views = Vec::with_capacity(images.len());
        for &img in images {
            if g.shape(img) != (w * h, 3) {
                return Err(Error::Shape(format!("expected a {w}x{h} RGB image")));
            }
            let (x, h1, w1) = bb.stem.apply(g, p, img, h, w);
            let x = g.relu(x);
            let (x, _, _) = bb.refine.apply(g, p, x, h1, w1);
            let f1 = g.relu(x);
            let (x, h2, w2) = bb.down[0].apply(g, p, f1, h1, w1);
            let f2 = g.relu(x);
            let (x, _, _) = bb.down[1].apply(g, p, f2, h2, w2);
            let f3 = g.relu(x);
            views.push([
                bb.proj[0].apply(g, p, f1),
                bb.proj[1].apply(g, p, f2),
                bb.proj[2].apply(g, p, f3),
            ]);
        }
        Ok(FeatureMapSet {
            views,
            dims: self.config.level_dims(),
            enriched: false,
        })
    }

    /// Deformable self-attention over each view's flattened multi-scale
    /// tokens; the identity when the encoder is disabled.
    pub fn encode_views(&self, g: &mut Graph, features: &FeatureMapSet) -> Result<FeatureMapSet> {
        if features.enriched {
            return Err(Error::Shape("encoder expects unenriched features".into()));
        }
        if !self.config.encoder || self.parts.encoder.is_empty() {
            return Ok(features.clone());
        }
        let cfg = &self.config;
        let d = cfg.d_model;
        let dims = cfg.level_dims();
        let counts: Vec<usize> = dims.iter().map(|(h, w)| h * w).collect();
        let n: usize = counts.iter().sum();
        // Positional table plus one-hot level selector for the scale embedding.
        let mut pos = Vec::with_capacity(n * d);
        let mut refs = Vec::with_capacity(n * 2);
        let mut select = Mat::zeros(n, LEVELS);
        let mut row = 0;
        for (l, &(h, w)) in dims.iter().enumerate() {
            pos.extend(position_table(h, w, d).data);
            refs.extend(cell_centers(h, w).data);
            for _ in 0..h * w {
                select.data[row * LEVELS + l] = 1.0;
                row += 1;
            }
        }
        let pos = g.constant(Mat::from_vec(n, d, pos));
        let refs = g.constant(Mat::from_vec(n, 2, refs));
        let select = g.constant(select);
        let embed = g.param(&self.params, self.parts.level_embed);
        let scale_emb = g.matmul(select, embed);
        let pos = g.add(pos, scale_emb);
        let spec = deform_spec(cfg, cfg.heads, cfg.points, dims.map(|(_, w)| 1.0 / w as f64));
        let p = &self.params;

        let mut out = Vec::with_capacity(features.views.len());
        for levels in &features.views {
            let mut x = g.concat_rows(levels);
            for layer in &self.parts.encoder {
                let q = g.add(x, pos);
                let offsets = layer.sampling.apply(g, p, q);
                let logits = layer.attn.apply(g, p, q);
                let weights = g.softmax(logits, LEVELS * cfg.points);
                let values = layer.value.apply(g, p, x);
                let mut start = 0;
                let value_levels: Vec<Var> = counts
                    .iter()
                    .map(|&c| {
                        let v = g.slice_rows(values, start, c);
                        start += c;
                        v
                    })
                    .collect();
                let sampled = g.deform_sample(&value_levels, refs, offsets, weights, spec.clone());
                let o = layer.output.apply(g, p, sampled);
                let r = g.add(x, o);
                x = layer.norm1.apply(g, p, r);
                let f = layer.ffn.apply(g, p, x);
                let r = g.add(x, f);
                x = layer.norm2.apply(g, p, r);
            }
            let mut start = 0;
            let split: [Var; LEVELS] = std::array::from_fn(|l| {
                let v = g.slice_rows(x, start, counts[l]);
                start += counts[l];
                v
            });
            out.push(split);
        }
        Ok(FeatureMapSet {
            views: out,
            dims,
            enriched: false,
        })
    }

    /// Line-of-sight codes for every cell of every level of one view.
    pub fn los_tables(&self, view: &ViewInput) -> Result<[Mat; LEVELS]> {
        let mode = self.config.los_mode;
        let dims = self.config.level_dims();
        let mut out: [Mat; LEVELS] = std::array::from_fn(|_| Mat::zeros(0, 0));
        for l in 0..LEVELS {
            let (h, w) = dims[l];
            let data = los_map(&view.intrinsics, &view.extrinsics, w, h, STRIDES[l] as f64, mode)?;
            out[l] = Mat::from_vec(h * w, mode.ray_dim(), data);
        }
        Ok(out)
    }

    /// `F̂ = [F | R] Wᵀ` per cell.
    pub fn flose(
        &self,
        g: &mut Graph,
        features: &FeatureMapSet,
        los: &[[Mat; LEVELS]],
    ) -> Result<FeatureMapSet> {
        if los.len() != features.views.len() {
            return Err(Error::Shape("one LoS table set per view is required".into()));
        }
        let ray_dim = self.config.los_mode.ray_dim();
        let w = g.param(&self.params, self.parts.flose.w);
        let mut views = Vec::with_capacity(los.len());
        for (levels, tables) in features.views.iter().zip(los) {
            let mut out = *levels;
            for l in 0..LEVELS {
                if tables[l].cols != ray_dim {
                    return Err(Error::Config(format!(
                        "LoS code width {} does not match mode width {ray_dim}",
                        tables[l].cols
                    )));
                }
                let r = g.constant(tables[l].clone());
                let cat = g.concat_cols(&[levels[l], r]);
                out[l] = g.matmul_bt(cat, w);
            }
            views.push(out);
        }
        Ok(FeatureMapSet {
            views,
            dims: features.dims,
            enriched: true,
        })
    }

    /// Initial query embeddings `[n_q, d]`.
    pub fn embed_queries(&self, g: &mut Graph, queries: &QuerySet) -> Var {
        let d = self.config.d_model;
        let base = g.param(&self.params, self.parts.query_embed);
        let codes: Vec<f64> = (0..queries.len())
            .flat_map(|i| {
                let r = queries.refs[0].row(i);
                sinusoidal_2d(r[0], r[1], d)
            })
            .collect();
        let codes = g.constant(Mat::from_vec(queries.len(), d, codes));
        let enc = self.parts.center_proj.apply(g, &self.params, codes);
        let mask = Mat::from_vec(
            queries.len(),
            1,
            queries.objects.iter().map(|o| o.is_some() as u8 as f64).collect(),
        );
        let mask = g.constant(mask);
        let enc = g.mul_col(enc, mask);
        g.add(base, enc)
    }

    pub fn projective_attention_params(&self, layer: usize) -> &ProjectiveAttention {
        &self.parts.decoder[layer].cross
    }

    /// Mean over levels of the bilinear samples at each query's reference
    /// point in one view, `[n_q, d]`.
    pub fn features_at(&self, g: &mut Graph, levels: &[Var; LEVELS], refs: Var) -> Var {
        let nq = g.shape(refs).0;
        let zeros = g.constant(Mat::zeros(nq, LEVELS * 2));
        let w = g.constant(Mat::from_vec(nq, LEVELS, vec![1.0 / LEVELS as f64; nq * LEVELS]));
        let spec = deform_spec(&self.config, 1, 1, [1.0; LEVELS]);
        g.deform_sample(levels, refs, zeros, w, spec)
    }

    /// `Δc = (q + F̂(c)) W_offsetᵀ` for a `[n, d]` input; `[n, L*K*2]`.
    pub fn sampling_offsets(&self, g: &mut Graph, layer: usize, s: Var) -> Var {
        self.parts.decoder[layer].cross.w_offset.apply(g, &self.params, s)
    }

    /// Attention of one view given explicit offsets and logits; returns the
    /// sampled value `Σ a F̂(c + Δc)` before the value projection, and the
    /// attention weights.
    pub fn attend_view(
        &self,
        g: &mut Graph,
        levels: &[Var; LEVELS],
        refs: Var,
        offsets: Var,
        logits: Var,
    ) -> (Var, Var) {
        let k = self.config.points;
        let weights = g.softmax(logits, LEVELS * k);
        let spec = deform_spec(&self.config, 1, k, [1.0; LEVELS]);
        (g.deform_sample(levels, refs, offsets, weights, spec), weights)
    }

    /// Cross-view attention of decoder `layer`. `views` holds the enriched
    /// levels of each supplied view; missing views up to `max_views` and
    /// invalid reference points contribute zeros. Returns the `[n_q, d]`
    /// output and per-view attention weights.
    pub fn projective_attention(
        &self,
        g: &mut Graph,
        layer: usize,
        q: Var,
        queries: &QuerySet,
        views: &[[Var; LEVELS]],
    ) -> Result<(Var, Vec<Var>)> {
        let cfg = &self.config;
        if views.len() > cfg.max_views {
            return Err(Error::Config(format!(
                "{} views exceed the configured maximum of {}",
                views.len(),
                cfg.max_views
            )));
        }
        let pa = &self.parts.decoder[layer].cross;
        let p = &self.params;
        let nq = g.shape(q).0;
        let mut fs = Vec::with_capacity(cfg.max_views);
        let mut weights = Vec::with_capacity(views.len());
        for (v, levels) in views.iter().enumerate() {
            let refs = g.constant(queries.refs[v].clone());
            let center = self.features_at(g, levels, refs);
            let s = g.add(q, center);
            let offsets = pa.w_offset.apply(g, p, s);
            let logits = pa.w_a.apply(g, p, s);
            let (sampled, a) = self.attend_view(g, levels, refs, offsets, logits);
            let f = pa.w_f.apply(g, p, sampled);
            let mask = Mat::from_vec(
                nq,
                1,
                queries.valid[v].iter().map(|&b| b as u8 as f64).collect(),
            );
            let mask = g.constant(mask);
            fs.push(g.mul_col(f, mask));
            weights.push(a);
        }
        for _ in views.len()..cfg.max_views {
            fs.push(g.constant(Mat::zeros(nq, cfg.d_model)));
        }
        let cat = g.concat_cols(&fs);
        Ok((pa.w_out.apply(g, p, cat), weights))
    }

    fn self_attention(&self, g: &mut Graph, layer: &DecoderLayer, x: Var, queries: &QuerySet) -> Var {
        let p = &self.params;
        let (nq, d) = g.shape(x);
        let heads = self.config.heads;
        let dh = d / heads;
        let q = layer.q.apply(g, p, x);
        let k = layer.k.apply(g, p, x);
        let v = layer.v.apply(g, p, x);
        let mut bias = Mat::zeros(nq, nq);
        for i in 0..nq {
            for (j, obj) in queries.objects.iter().enumerate() {
                if obj.is_none() {
                    bias.data[i * nq + j] = -1e30;
                }
            }
        }
        let bias = g.constant(bias);
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh);
            let kh = g.slice_cols(k, h * dh, dh);
            let vh = g.slice_cols(v, h * dh, dh);
            let logits = g.matmul_bt(qh, kh);
            let logits = g.scale(logits, 1.0 / (dh as f64).sqrt());
            let logits = g.add(logits, bias);
            let a = g.softmax(logits, nq);
            outs.push(g.matmul(a, vh));
        }
        let cat = g.concat_cols(&outs);
        layer.o.apply(g, p, cat)
    }

    /// Runs every decoder layer on the query embeddings `x`.
    pub fn decoder_forward(
        &self,
        g: &mut Graph,
        x: Var,
        queries: &QuerySet,
        features: &FeatureMapSet,
    ) -> Result<Var> {
        if !features.enriched {
            return Err(Error::Shape("decoder expects enriched features".into()));
        }
        let p = &self.params;
        let mut x = x;
        for (li, layer) in self.parts.decoder.iter().enumerate() {
            let sa = self.self_attention(g, layer, x, queries);
            let r = g.add(x, sa);
            x = layer.norm1.apply(g, p, r);
            let (ca, _) = self.projective_attention(g, li, x, queries, &features.views)?;
            let r = g.add(x, ca);
            x = layer.norm2.apply(g, p, r);
            let f = layer.ffn.apply(g, p, x);
            let r = g.add(x, f);
            x = layer.norm3.apply(g, p, r);
        }
        Ok(x)
    }

    fn check_class(&self, class_id: usize) -> Result<()> {
        if class_id >= self.config.num_classes {
            return Err(Error::Config(format!(
                "class id {class_id} out of range for {} classes",
                self.config.num_classes
            )));
        }
        Ok(())
    }

    /// Class-specific 6D output of the rotation head for a `1 × d` embedding.
    pub fn rotation_head_6d(&self, g: &mut Graph, embedding: Var, class_id: usize) -> Result<Var> {
        self.check_class(class_id)?;
        let out = self.parts.rot_head.apply(g, &self.params, embedding);
        Ok(g.slice_cols(out, 6 * class_id, 6))
    }

    pub fn rotation_head(&self, g: &mut Graph, embedding: Var, class_id: usize) -> Result<Var> {
        let six = self.rotation_head_6d(g, embedding, class_id)?;
        Ok(gram_schmidt_graph(g, six))
    }

    pub fn translation_head(&self, g: &mut Graph, embedding: Var, class_id: usize) -> Result<Var> {
        self.check_class(class_id)?;
        let out = self.parts.trans_head.apply(g, &self.params, embedding);
        Ok(g.slice_cols(out, 3 * class_id, 3))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        views: &[ViewInput],
        jitter: Option<&mut dyn RngCore>,
    ) -> Result<ForwardVars> {
        self.check_views(views)?;
        let boxes: Vec<&[ObjectBox]> = views.iter().map(|v| v.boxes.as_slice()).collect();
        let queries = make_queries(&self.config, &boxes, jitter)?;
        let images: Vec<Var> = views.iter().map(|v| g.constant(v.image.clone())).collect();
        let feats = self.backbone_forward(g, &images)?;
        let feats = self.encode_views(g, &feats)?;
        let los = views
            .iter()
            .map(|v| self.los_tables(v))
            .collect::<Result<Vec<_>>>()?;
        let feats = self.flose(g, &feats, &los)?;
        let x0 = self.embed_queries(g, &queries);
        let x = self.decoder_forward(g, x0, &queries, &feats)?;
        let mut rotations = Vec::with_capacity(queries.len());
        let mut rotation_6d = Vec::with_capacity(queries.len());
        let mut translations = Vec::with_capacity(queries.len());
        for (i, obj) in queries.objects.iter().enumerate() {
            let class = obj.map_or(0, |o| o.class_id);
            let row = g.slice_rows(x, i, 1);
            let six = self.rotation_head_6d(g, row, class)?;
            rotation_6d.push(six);
            rotations.push(gram_schmidt_graph(g, six));
            translations.push(self.translation_head(g, row, class)?);
        }
        Ok(ForwardVars {
            queries,
            embeddings: x,
            rotations,
            rotation_6d,
            translations,
        })
    }

    /// One prediction per query; padding queries carry `obj_id: None`.
    pub fn predict(&self, views: &[ViewInput]) -> Result<Vec<PosePrediction>> {
        let mut g = Graph::new();
        let out = self.forward(&mut g, views, None)?;
        out.queries
            .objects
            .iter()
            .enumerate()
            .map(|(i, obj)| {
                let six: [f64; 6] = g.value(out.rotation_6d[i]).data[..]
                    .try_into()
                    .expect("6 values");
                let t = &g.value(out.translations[i]).data;
                Ok(PosePrediction {
                    obj_id: obj.map(|o| o.obj_id),
                    class_id: obj.map_or(0, |o| o.class_id),
                    rotation: gram_schmidt_6d(&six)?,
                    translation: Vector3::new(t[0], t[1], t[2]),
                })
            })
            .collect()
    }

    /// Weighted pose loss summed over queries that track an object with a
    /// target pose. Returns `(total, rotation, translation)` nodes.
    pub fn loss(
        &self,
        g: &mut Graph,
        out: &ForwardVars,
        targets: &[(u32, Pose)],
        weights: &LossWeights,
    ) -> Result<(Var, Var, Var)> {
        let mut rot = Vec::new();
        let mut trans = Vec::new();
        for (i, obj) in out.queries.objects.iter().enumerate() {
            let Some(obj) = obj else { continue };
            let Some((_, pose)) = targets.iter().find(|(id, _)| *id == obj.obj_id) else {
                continue;
            };
            rot.push(rotation_loss_graph(g, out.rotations[i], &pose.rotation));
            trans.push(translation_loss_graph(g, out.translations[i], &pose.translation));
        }
        if rot.is_empty() {
            return Err(Error::Empty("no query matches a target object".into()));
        }
        let sum = |g: &mut Graph, v: &[Var]| {
            let cat = g.concat_cols(v);
            g.sum_all(cat)
        };
        let lr = sum(g, &rot);
        let lt = sum(g, &trans);
        Ok((total_loss_graph(g, lr, lt, weights), lr, lt))
    }
}

fn build(cfg: &ModelConfig, store: &mut ParamStore, rng: &mut ChaCha8Rng) -> Parts {
    let d = cfg.d_model;
    let [c0, c1, c2] = cfg.backbone_channels;
    let backbone = Backbone {
        stem: Conv::new(store, "backbone.stem", 3, c0, 4, 4, 0, rng),
        refine: Conv::new(store, "backbone.refine", c0, c0, 3, 1, 1, rng),
        down: [
            Conv::new(store, "backbone.down.0", c0, c1, 3, 2, 1, rng),
            Conv::new(store, "backbone.down.1", c1, c2, 3, 2, 1, rng),
        ],
        proj: [
            Linear::new(store, "backbone.proj.0", c0, d, true, 1.0, rng),
            Linear::new(store, "backbone.proj.1", c1, d, true, 1.0, rng),
            Linear::new(store, "backbone.proj.2", c2, d, true, 1.0, rng),
        ],
    };
    let level_embed = store.glorot("encoder.level_embed", LEVELS, d, 1.0, rng);
    let hlk = cfg.heads * LEVELS * cfg.points;
    let encoder = (0..cfg.encoder_layers)
        .map(|i| {
            let n = format!("encoder.{i}");
            let sampling = Linear::new(store, &format!("{n}.sampling"), d, hlk * 2, true, 0.0, rng);
            // Initial sampling pattern: head h looks along direction 2πh/H,
            // point k at distance k+1 cells.
            let b = store.get_mut(sampling.b.expect("bias"));
            for h in 0..cfg.heads {
                let th = std::f64::consts::TAU * h as f64 / cfg.heads as f64;
                let (dx, dy) = (th.cos(), th.sin());
                let m = dx.abs().max(dy.abs());
                for l in 0..LEVELS {
                    for k in 0..cfg.points {
                        let s = ((h * LEVELS + l) * cfg.points + k) * 2;
                        b.data[s] = dx / m * (k + 1) as f64;
                        b.data[s + 1] = dy / m * (k + 1) as f64;
                    }
                }
            }
            EncoderLayer {
                sampling,
                attn: Linear::new(store, &format!("{n}.attn"), d, hlk, true, 0.0, rng),
                value: Linear::new(store, &format!("{n}.value"), d, d, true, 1.0, rng),
                output: Linear::new(store, &format!("{n}.output"), d, d, true, 1.0, rng),
                norm1: Norm::new(store, &format!("{n}.norm1"), d),
                ffn: Mlp::new(store, &format!("{n}.ffn"), (d, cfg.ffn_dim, d), 1.0, rng),
                norm2: Norm::new(store, &format!("{n}.norm2"), d),
            }
        })
        .collect();
    let flose = Linear::new(store, "flose", d + cfg.los_mode.ray_dim(), d, false, 1.0, rng);
    let query_embed = store.glorot("queries.embed", cfg.num_queries, d, 1.0, rng);
    let center_proj = Linear::new(store, "queries.center", d, d, true, 1.0, rng);
    let lk = LEVELS * cfg.points;
    let decoder = (0..cfg.decoder_layers)
        .map(|i| {
            let n = format!("decoder.{i}");
            DecoderLayer {
                q: Linear::new(store, &format!("{n}.self.q"), d, d, true, 1.0, rng),
                k: Linear::new(store, &format!("{n}.self.k"), d, d, true, 1.0, rng),
                v: Linear::new(store, &format!("{n}.self.v"), d, d, true, 1.0, rng),
                o: Linear::new(store, &format!("{n}.self.o"), d, d, true, 1.0, rng),
                norm1: Norm::new(store, &format!("{n}.norm1"), d),
                cross: ProjectiveAttention {
                    w_offset: Linear::new(store, &format!("{n}.cross.w_offset"), d, lk * 2, false, 0.05, rng),
                    w_a: Linear::new(store, &format!("{n}.cross.w_a"), d, lk, false, 1.0, rng),
                    w_f: Linear::new(store, &format!("{n}.cross.w_f"), d, d, false, 1.0, rng),
                    w_out: Linear::new(store, &format!("{n}.cross.w_out"), d * cfg.max_views, d, false, 1.0, rng),
                },
                norm2: Norm::new(store, &format!("{n}.norm2"), d),
                ffn: Mlp::new(store, &format!("{n}.ffn"), (d, cfg.ffn_dim, d), 1.0, rng),
                norm3: Norm::new(store, &format!("{n}.norm3"), d),
            }
        })
        .collect();
    let rot_head = Mlp::new(store, "heads.rotation", (d, d, 6 * cfg.num_classes), 0.1, rng);
    let b = store.get_mut(rot_head.out.b.expect("bias"));
    for c in 0..cfg.num_classes {
        b.data[6 * c] = 1.0;
        b.data[6 * c + 4] = 1.0;
    }
    let trans_head = Mlp::new(store, "heads.translation", (d, d, 3 * cfg.num_classes), 0.1, rng);
    Parts {
        backbone,
        level_embed,
        encoder,
        flose,
        query_embed,
        center_proj,
        decoder,
        rot_head,
        trans_head,
    }
}

impl Model {
    /// Bias of the final translation layer; exposed for initialization from
    /// dataset statistics.
    pub fn set_translation_bias(&mut self, t: &Vector3<f64>) {
        let id = self.parts.trans_head.out.b.expect("bias");
        let b = self.params.get_mut(id);
        for c in 0..self.config.num_classes {
            b.data[3 * c..3 * c + 3].copy_from_slice(t.as_slice());
        }
    }

    pub fn param_id(&self, name: &str) -> Option<ParamId> {
        self.params.id(name)
    }
}

/// Random unit-ish feature maps, for tests and benchmarks.
pub fn random_levels(config: &ModelConfig, rng: &mut impl Rng) -> [Mat; LEVELS] {
    let d = config.d_model;
    config.level_dims().map(|(h, w)| {
        Mat::from_vec(h * w, d, (0..h * w * d).map(|_| rng.random_range(-1.0..1.0)).collect())
    })
}

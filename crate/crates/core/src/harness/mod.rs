//! Run configuration, data loading, training, evaluation, ablation sweeps and
//! runtime measurement.

mod ablate;
mod eval;
pub mod optim;
mod train;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraExtrinsics, CameraIntrinsics, Pose};
use crate::losses::LossWeights;
use crate::metrics::{ModelPoints, DEFAULT_AUC_THRESHOLD_M};
use crate::model::{image_tensor, ModelConfig, ObjectBox, ViewInput};
use crate::par::Execution;
use crate::scene::dataset::{load_manifest, load_model, read_png, SampleRecord, Split, OBJECT_ID};

pub use ablate::{ablate, format_table, AblationRow, Delta, SweepSpec};
pub use eval::{
    evaluate, evaluate_oracle, evaluate_with, measure_runtime, RuntimeEntry, RuntimeReport,
};
pub use optim::{AdamW, OptimizerConfig};
pub use train::{split_validation, train, train_on, EpochRecord, StepRecord, TrainOutcome, TrainingLog};

/// Views stored per generated sample.
pub const VIEWS_PER_SAMPLE: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Root of a generated dataset.
    pub dataset: PathBuf,
    /// Directory receiving checkpoints, logs and reports.
    pub output: PathBuf,
    /// Views fed to the model per sample.
    pub views: usize,
    /// Draw the reference view per training sample; otherwise training uses
    /// the evaluation order.
    pub random_reference: bool,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optimizer: OptimizerConfig,
    /// Seeds data order, view order, jitter and (overriding `model.seed`)
    /// initialization.
    pub seed: u64,
    /// Fraction of training samples held out for checkpoint selection.
    pub val_fraction: f64,
    pub execution: Execution,
    pub auc_threshold_m: f64,
    /// Free-form hardware description copied into runtime reports.
    pub hardware: String,
    pub runtime_runs: usize,
    pub runtime_views: Vec<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: PathBuf::from("data/mv_ball"),
            output: PathBuf::from("runs/default"),
            views: 2,
            random_reference: true,
            model: ModelConfig::default(),
            loss: LossWeights::default(),
            optimizer: OptimizerConfig::default(),
            seed: 0,
            val_fraction: 0.05,
            execution: Execution::Parallel,
            auc_threshold_m: DEFAULT_AUC_THRESHOLD_M,
            hardware: String::from("unspecified"),
            runtime_runs: 5,
            runtime_views: vec![1, 2, 4],
        }
    }
}

impl RunConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.optimizer.validate()?;
        if self.views == 0 || self.views > VIEWS_PER_SAMPLE {
            return Err(Error::Config(format!(
                "views must lie in 1..={VIEWS_PER_SAMPLE} (views per sample), got {}",
                self.views
            )));
        }
        if self.views > self.model.max_views {
            return Err(Error::Config(format!(
                "views {} exceed model max_views {}",
                self.views, self.model.max_views
            )));
        }
        if !(0.0..0.5).contains(&self.val_fraction) {
            return Err(Error::Config("val_fraction must lie in [0, 0.5)".into()));
        }
        if !(self.auc_threshold_m > 0.0) {
            return Err(Error::Config("auc_threshold_m must be positive".into()));
        }
        Ok(())
    }

    /// Model configuration with the run seed applied.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: self.seed,
            ..self.model.clone()
        }
    }
}

/// One decoded sample with poses in meters.
#[derive(Clone, Debug)]
pub struct LoadedSample {
    pub record: SampleRecord,
    pub images: [Vec<u8>; VIEWS_PER_SAMPLE],
    pub intrinsics: [CameraIntrinsics; VIEWS_PER_SAMPLE],
    pub world_to_camera: [Pose; VIEWS_PER_SAMPLE],
    /// Object-to-camera pose per view.
    pub gt: [Pose; VIEWS_PER_SAMPLE],
}

impl LoadedSample {
    /// Model inputs for the given view order (the first entry is the
    /// reference view, indices may repeat) and the reference-view pose.
    pub fn inputs(&self, order: &[usize]) -> Result<(Vec<ViewInput>, Pose)> {
        let &r = order
            .first()
            .ok_or_else(|| Error::Config("view order is empty".into()))?;
        let mut views = Vec::with_capacity(order.len());
        for &j in order {
            if j >= VIEWS_PER_SAMPLE {
                return Err(Error::Config(format!("view index {j} out of range")));
            }
            let extrinsics = if j == r {
                CameraExtrinsics::reference()
            } else {
                CameraExtrinsics::new(self.world_to_camera[r].compose(&self.world_to_camera[j].inverse()))?
            };
            let v = &self.record.views[j];
            let [x, y, w, h] = v.info.bbox_obj;
            let intr = self.intrinsics[j];
            views.push(ViewInput {
                image: image_tensor(&self.images[j], intr.width(), intr.height()),
                intrinsics: intr,
                extrinsics,
                boxes: vec![ObjectBox {
                    obj_id: v.gt.obj_id,
                    class_id: 0,
                    bbox: [x as f64, y as f64, w as f64, h as f64],
                }],
            });
        }
        Ok((views, self.gt[r]))
    }
}

/// Fixed evaluation order: view 0 is the reference, further views cycle.
pub fn eval_order(views: usize) -> Vec<usize> {
    (0..views).map(|i| i % VIEWS_PER_SAMPLE).collect()
}

#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub split: Split,
    pub samples: Vec<LoadedSample>,
}

impl LoadedSplit {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn subset(&self, indices: &[usize]) -> LoadedSplit {
        LoadedSplit {
            split: self.split,
            samples: indices.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn arr<T>(v: Vec<T>) -> [T; VIEWS_PER_SAMPLE] {
    v.try_into().ok().expect("one entry per stored view")
}

fn load_sample(root: &Path, split: Split, record: &SampleRecord) -> Result<LoadedSample> {
    let dir = root.join(split.name());
    let mut images = Vec::with_capacity(VIEWS_PER_SAMPLE);
    let mut intr = Vec::with_capacity(VIEWS_PER_SAMPLE);
    let mut w2c = Vec::with_capacity(VIEWS_PER_SAMPLE);
    let mut gt = Vec::with_capacity(VIEWS_PER_SAMPLE);
    for v in &record.views {
        let path = dir.join(&v.rgb);
        let (w, h, rgb) = read_png(&path)?;
        images.push(rgb);
        intr.push(v.camera.intrinsics(w, h)?);
        w2c.push(v.camera.world_to_camera()?);
        gt.push(v.gt.pose()?);
    }
    Ok(LoadedSample {
        record: record.clone(),
        images: arr(images),
        intrinsics: arr(intr),
        world_to_camera: arr(w2c),
        gt: arr(gt),
    })
}

/// Reads the manifest and decodes every image of `split`.
pub fn load_split(root: &Path, split: Split, exec: Execution) -> Result<LoadedSplit> {
    let manifest = load_manifest(root, split)?;
    if manifest.records.is_empty() {
        return Err(Error::Empty(format!("split {} has no samples", split.name())));
    }
    let samples = exec
        .map(&manifest.records, |r| load_sample(root, split, r))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    Ok(LoadedSplit { split, samples })
}

/// Evaluation point set of the MV-ball object.
pub fn load_model_points(root: &Path) -> Result<ModelPoints> {
    let m = load_model(root, OBJECT_ID)?;
    ModelPoints::new(m.points_m(), m.symmetric)
}

/// Checks that a split's images match the model input size.
pub(crate) fn check_image_size(config: &ModelConfig, split: &LoadedSplit) -> Result<()> {
    let [w, h] = config.image_size;
    for s in &split.samples {
        for intr in &s.intrinsics {
            if intr.width() != w || intr.height() != h {
                return Err(Error::Config(format!(
                    "split {} has {}x{} images but the model expects {w}x{h}",
                    split.split.name(),
                    intr.width(),
                    intr.height()
                )));
            }
        }
    }
    Ok(())
}

/// Writes `value` as pretty JSON, creating parent directories.
pub fn write_report<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    crate::scene::dataset::write_json(path, value)
}

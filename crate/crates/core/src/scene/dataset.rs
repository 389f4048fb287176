//! Dataset generation and BOP-style annotation IO.
//!
//! Layout under the dataset root:
//!
//! ```text
//! models/obj_000001.json
//! <split>/manifest.json
//! <split>/<scene_id>/rgb/<image_id>.png
//! <split>/<scene_id>/scene_camera.json
//! <split>/<scene_id>/scene_gt.json
//! <split>/<scene_id>/scene_gt_info.json
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    find_ambiguous_pair, sample_scene, scaled_threshold, MVBallSpec, RenderedView, SceneSample,
    BASE_EASY_PIXELS, BASE_HARD_PIXELS,
};
use crate::error::{Error, Result};
use crate::geometry::{matrix_from_row_major, matrix_to_row_major, CameraJson, Pose};
use crate::par::Execution;

pub const OBJECT_ID: u32 = 1;
const MAX_SCENE_RETRIES: u64 = 10_000;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    TestEasy,
    TestHard,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::TestEasy, Split::TestHard];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::TestEasy => "test_easy",
            Split::TestHard => "test_hard",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::Train => 0x7472,
            Split::TestEasy => 0x6561,
            Split::TestHard => 0x6861,
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|x| x.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DatasetConfig {
    pub train: usize,
    pub easy: usize,
    pub hard: usize,
    pub seed: u64,
    pub spec: MVBallSpec,
    /// Visibility thresholds in pixels; scaled from 300 / 10 at
    /// 640×480 when absent.
    pub easy_threshold: Option<usize>,
    pub hard_threshold: Option<usize>,
    pub samples_per_scene: usize,
    pub model_points: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: 2000,
            easy: 200,
            hard: 200,
            seed: 7,
            spec: MVBallSpec::default(),
            easy_threshold: None,
            hard_threshold: None,
            samples_per_scene: 250,
            model_points: 400,
        }
    }
}

impl DatasetConfig {
    pub fn thresholds(&self) -> (usize, usize) {
        let [w, h] = self.spec.image_size;
        (
            self.easy_threshold
                .unwrap_or_else(|| scaled_threshold(BASE_EASY_PIXELS, w, h)),
            self.hard_threshold
                .unwrap_or_else(|| scaled_threshold(BASE_HARD_PIXELS, w, h)),
        )
    }

    pub fn count(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::TestEasy => self.easy,
            Split::TestHard => self.hard,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.spec.validate()?;
        let (easy, hard) = self.thresholds();
        if hard == 0 || easy < hard {
            return Err(Error::Config(
                "thresholds must satisfy 1 <= hard <= easy".into(),
            ));
        }
        if self.samples_per_scene == 0 {
            return Err(Error::Config("samples_per_scene must be positive".into()));
        }
        if self.model_points < 4 {
            return Err(Error::Config("model_points must be at least 4".into()));
        }
        Ok(())
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Independent stream seed for one sample of one split.
pub fn sample_seed(master: u64, split: Split, index: usize, retry: u64, stream: u64) -> u64 {
    [split.tag(), index as u64, retry, stream]
        .into_iter()
        .fold(mix(master), |acc, v| mix(acc ^ v))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtEntry {
    pub obj_id: u32,
    #[serde(rename = "cam_R_m2c")]
    pub cam_r_m2c: [f64; 9],
    /// Millimeters.
    #[serde(rename = "cam_t_m2c")]
    pub cam_t_m2c: [f64; 3],
}

impl GtEntry {
    pub fn new(obj_id: u32, object_to_camera: &Pose) -> Self {
        GtEntry {
            obj_id,
            cam_r_m2c: matrix_to_row_major(&object_to_camera.rotation),
            cam_t_m2c: (object_to_camera.translation * 1000.0).into(),
        }
    }

    /// Object-to-camera pose in meters.
    pub fn pose(&self) -> Result<Pose> {
        Pose::new(
            matrix_from_row_major(&self.cam_r_m2c),
            Vector3::from(self.cam_t_m2c) / 1000.0,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GtInfoEntry {
    pub bbox_obj: [usize; 4],
    pub px_count_visib: usize,
    pub cap_visibility: [usize; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewRecord {
    pub image_id: u32,
    /// Relative to the split directory.
    pub rgb: String,
    pub camera: CameraJson,
    pub gt: GtEntry,
    pub info: GtInfoEntry,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub index: usize,
    pub scene_id: u32,
    /// Cap-pixel threshold the pair was drawn with.
    pub min_pixels: usize,
    pub views: [ViewRecord; 2],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub split: Split,
    pub seed: u64,
    pub spec: MVBallSpec,
    pub easy_threshold: usize,
    pub hard_threshold: usize,
    pub records: Vec<SampleRecord>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelFile {
    pub obj_id: u32,
    pub symmetric: bool,
    /// Millimeters.
    pub diameter: f64,
    /// Millimeters, object frame.
    pub points: Vec<[f64; 3]>,
}

impl ModelFile {
    pub fn points_m(&self) -> Vec<Vector3<f64>> {
        self.points.iter().map(|p| Vector3::from(*p) / 1000.0).collect()
    }
}

pub fn model_path(root: &Path, obj_id: u32) -> PathBuf {
    root.join("models").join(format!("obj_{obj_id:06}.json"))
}

pub fn scene_dir(root: &Path, split: Split, scene_id: u32) -> PathBuf {
    root.join(split.name()).join(format!("{scene_id:06}"))
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::parse(path, e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.to_string()))
}

fn write_png(path: &Path, view: &RenderedView) -> Result<()> {
    let img = image::RgbImage::from_raw(view.width as u32, view.height as u32, view.image.clone())
        .expect("buffer matches image size");
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let rgb = img.to_rgb8();
    Ok((rgb.width() as usize, rgb.height() as usize, rgb.into_raw()))
}

/// Draws the scene and view pair for one sample, resampling scenes until a
/// pair is found.
pub fn generate_sample(
    config: &DatasetConfig,
    split: Split,
    index: usize,
) -> Result<(usize, RenderedView, RenderedView)> {
    generate_scene_pair(config, split, index).map(|(m, _, v1, v2)| (m, v1, v2))
}

/// [`generate_sample`] that also returns the accepted scene.
pub fn generate_scene_pair(
    config: &DatasetConfig,
    split: Split,
    index: usize,
) -> Result<(usize, SceneSample, RenderedView, RenderedView)> {
    let (easy, hard) = config.thresholds();
    let min_pixels = match split {
        Split::Train => {
            ChaCha8Rng::seed_from_u64(sample_seed(config.seed, split, index, 0, 2))
                .random_range(hard..=easy)
        }
        Split::TestEasy => easy,
        Split::TestHard => hard,
    };
    for retry in 0..MAX_SCENE_RETRIES {
        let scene = sample_scene(sample_seed(config.seed, split, index, retry, 0), &config.spec)?;
        let pair_seed = sample_seed(config.seed, split, index, retry, 1);
        match find_ambiguous_pair(&scene, &config.spec, pair_seed, min_pixels) {
            Ok((v1, v2)) => return Ok((min_pixels, scene, v1, v2)),
            Err(Error::NoValidPair(_)) => continue,
            Err(e) => return Err(e),
        }
    }
    Err(Error::NoValidPair(MAX_SCENE_RETRIES as usize))
}

fn view_record(view: &RenderedView, scene_id: u32, image_id: u32) -> ViewRecord {
    ViewRecord {
        image_id,
        rgb: format!("{scene_id:06}/rgb/{image_id:06}.png"),
        camera: CameraJson::new(&view.intrinsics, &view.camera_to_world.inverse()),
        gt: GtEntry::new(OBJECT_ID, &view.object_pose_cam),
        info: GtInfoEntry {
            bbox_obj: view.bbox.to_array(),
            px_count_visib: view.visible_pixels,
            cap_visibility: view.cap_visibility,
        },
    }
}

pub fn generate_split(
    root: &Path,
    config: &DatasetConfig,
    split: Split,
    exec: Execution,
) -> Result<DatasetManifest> {
    config.validate()?;
    let count = config.count(split);
    let per_scene = config.samples_per_scene;
    let scenes = count.div_ceil(per_scene) as u32;
    for scene_id in 0..scenes {
        let dir = scene_dir(root, split, scene_id).join("rgb");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let split_dir = root.join(split.name());
    fs::create_dir_all(&split_dir).map_err(|e| Error::io(&split_dir, e))?;

    let records = exec.map_range(count, |index| -> Result<SampleRecord> {
        let (min_pixels, v1, v2) = generate_sample(config, split, index)?;
        let scene_id = (index / per_scene) as u32;
        let local = (index % per_scene) as u32;
        let views = [
            view_record(&v1, scene_id, 2 * local),
            view_record(&v2, scene_id, 2 * local + 1),
        ];
        for (rec, view) in views.iter().zip([&v1, &v2]) {
            write_png(&split_dir.join(&rec.rgb), view)?;
        }
        Ok(SampleRecord {
            index,
            scene_id,
            min_pixels,
            views,
        })
    });
    let records = records.into_iter().collect::<Result<Vec<_>>>()?;

    for scene_id in 0..scenes {
        let mut cams = BTreeMap::new();
        let mut gts = BTreeMap::new();
        let mut infos = BTreeMap::new();
        for rec in records.iter().filter(|r| r.scene_id == scene_id) {
            for v in &rec.views {
                cams.insert(v.image_id, v.camera.clone());
                gts.insert(v.image_id, vec![v.gt.clone()]);
                infos.insert(v.image_id, vec![v.info.clone()]);
            }
        }
        let dir = scene_dir(root, split, scene_id);
        write_json(&dir.join("scene_camera.json"), &cams)?;
        write_json(&dir.join("scene_gt.json"), &gts)?;
        write_json(&dir.join("scene_gt_info.json"), &infos)?;
    }

    let (easy, hard) = config.thresholds();
    let manifest = DatasetManifest {
        split,
        seed: config.seed,
        spec: config.spec.clone(),
        easy_threshold: easy,
        hard_threshold: hard,
        records,
    };
    write_json(&split_dir.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

pub fn write_model(root: &Path, config: &DatasetConfig) -> Result<ModelFile> {
    let points: Vec<[f64; 3]> = config
        .spec
        .model_points(config.model_points)
        .into_iter()
        .map(|p| (p * 1000.0).into())
        .collect();
    let pts: Vec<Vector3<f64>> = points.iter().map(|p| Vector3::from(*p)).collect();
    let diameter = crate::metrics::ModelPoints::new(pts, false)?.diameter();
    let model = ModelFile {
        obj_id: OBJECT_ID,
        symmetric: false,
        diameter,
        points,
    };
    let path = model_path(root, OBJECT_ID);
    let dir = path.parent().expect("model path has a parent");
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&path, &model)?;
    Ok(model)
}

/// Generates the model file and all three splits.
pub fn generate_dataset(
    root: &Path,
    config: &DatasetConfig,
    exec: Execution,
) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    write_model(root, config)?;
    Split::ALL
        .into_iter()
        .map(|s| generate_split(root, config, s, exec))
        .collect()
}

pub fn load_manifest(root: &Path, split: Split) -> Result<DatasetManifest> {
    read_json(&root.join(split.name()).join("manifest.json"))
}

pub fn load_model(root: &Path, obj_id: u32) -> Result<ModelFile> {
    let path = model_path(root, obj_id);
    if !path.exists() {
        return Err(Error::MissingModel(vec![obj_id]));
    }
    read_json(&path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> DatasetConfig {
        DatasetConfig {
            train: 6,
            easy: 3,
            hard: 3,
            seed: 11,
            samples_per_scene: 4,
            model_points: 50,
            ..DatasetConfig::default()
        }
    }

    #[test]
    fn seeds_differ_across_streams() {
        let a = sample_seed(1, Split::Train, 0, 0, 0);
        assert_ne!(a, sample_seed(1, Split::TestEasy, 0, 0, 0));
        assert_ne!(a, sample_seed(1, Split::Train, 1, 0, 0));
        assert_ne!(a, sample_seed(1, Split::Train, 0, 1, 0));
        assert_ne!(a, sample_seed(1, Split::Train, 0, 0, 1));
        assert_ne!(a, sample_seed(2, Split::Train, 0, 0, 0));
        assert_eq!(a, sample_seed(1, Split::Train, 0, 0, 0));
    }

    #[test]
    fn split_names_round_trip() {
        for s in Split::ALL {
            assert_eq!(s.name().parse::<Split>().unwrap(), s);
        }
        assert!("val".parse::<Split>().is_err());
    }

    #[test]
    fn generation_writes_bop_layout() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small();
        let manifests = generate_dataset(dir.path(), &cfg, Execution::default()).unwrap();
        let total: usize = manifests.iter().map(|m| m.records.len()).sum();
        assert_eq!(total, 12);
        let train = &manifests[0];
        let (easy, hard) = cfg.thresholds();
        for rec in &train.records {
            assert!((hard..=easy).contains(&rec.min_pixels));
            for v in &rec.views {
                let (w, h, _) = read_png(&dir.path().join("train").join(&v.rgb)).unwrap();
                assert_eq!((w, h), (64, 64));
            }
        }
        // 6 samples at 4 per scene: two scene directories.
        let gt: BTreeMap<u32, Vec<GtEntry>> =
            read_json(&scene_dir(dir.path(), Split::Train, 1).join("scene_gt.json")).unwrap();
        assert_eq!(gt.keys().copied().collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert_eq!(load_manifest(dir.path(), Split::Train).unwrap(), *train);
        let model = load_model(dir.path(), OBJECT_ID).unwrap();
        let r = cfg.spec.sphere_radius * 1000.0;
        assert!(model.diameter > 2.0 * r && model.diameter < r + cfg.spec.outer_radius() * 1000.0);
        assert!(matches!(load_model(dir.path(), 9), Err(Error::MissingModel(_))));
    }

    #[test]
    fn generation_is_deterministic_across_execution_modes() {
        let cfg = small();
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        generate_split(a.path(), &cfg, Split::TestHard, Execution::Parallel).unwrap();
        generate_split(b.path(), &cfg, Split::TestHard, Execution::Sequential).unwrap();
        for file in ["manifest.json", "000000/scene_gt.json", "000000/scene_camera.json"] {
            let fa = fs::read(a.path().join("test_hard").join(file)).unwrap();
            let fb = fs::read(b.path().join("test_hard").join(file)).unwrap();
            assert_eq!(fa, fb, "{file}");
        }
    }
}

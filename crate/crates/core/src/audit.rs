//! Train/test pose-leakage audit: translation-duplicate scanning and the
//! ADD-difference histogram of matched pairs.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::metrics::{add_metric, ModelPoints};
use crate::par::Execution;
use crate::scene::dataset::{read_json, GtEntry, ModelFile};

/// Default duplicate threshold in millimeters.
pub const DEFAULT_THRESHOLD_MM: f64 = 0.01;
pub const DEFAULT_BIN_FRACTION: f64 = 0.01;

/// One annotated object pose. Translations are in millimeters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub split: String,
    pub scene_id: u32,
    pub image_id: u32,
    pub obj_id: u32,
    pub pose: Pose,
}

impl PoseRecord {
    fn key(&self) -> (u32, u32) {
        (self.scene_id, self.image_id)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub a: PoseRecord,
    pub b: PoseRecord,
    pub distance_mm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectCounts {
    pub obj_id: u32,
    pub records_a: usize,
    pub records_b: usize,
    pub a_with_duplicate: usize,
    pub b_with_duplicate: usize,
    pub pairs_within_threshold: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DuplicateReport {
    pub threshold_mm: f64,
    pub per_object: Vec<ObjectCounts>,
    pub records_a: usize,
    pub records_b: usize,
    pub a_with_duplicate: usize,
    pub b_with_duplicate: usize,
    pub fraction_of_a_with_duplicate_in_b: f64,
    pub fraction_of_b_drawn_from_a: f64,
    /// Nearest B match of every A record that has one, in A order.
    pub nearest: Vec<MatchedPair>,
    /// Every same-object pair within the threshold, sorted by A then B
    /// `(scene, image)`.
    pub pairs: Vec<MatchedPair>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMethod {
    BruteForce,
    #[default]
    Grid,
}

/// Indices into B within `threshold` of each A translation.
fn neighbors_brute(a: &[&PoseRecord], b: &[&PoseRecord], threshold: f64) -> Vec<Vec<(usize, f64)>> {
    a.iter()
        .map(|ra| {
            b.iter()
                .enumerate()
                .filter_map(|(j, rb)| {
                    let d = (ra.pose.translation - rb.pose.translation).norm();
                    (d <= threshold).then_some((j, d))
                })
                .collect()
        })
        .collect()
}

fn cell(t: &Vector3<f64>, size: f64) -> [i64; 3] {
    [0, 1, 2].map(|i| (t[i] / size).floor() as i64)
}

fn neighbors_grid(a: &[&PoseRecord], b: &[&PoseRecord], threshold: f64) -> Vec<Vec<(usize, f64)>> {
    let mut grid: HashMap<[i64; 3], Vec<usize>> = HashMap::new();
    for (j, rb) in b.iter().enumerate() {
        grid.entry(cell(&rb.pose.translation, threshold)).or_default().push(j);
    }
    a.iter()
        .map(|ra| {
            let c = cell(&ra.pose.translation, threshold);
            let mut out = Vec::new();
            for dx in -1..=1 {
                for dy in -1..=1 {
                    for dz in -1..=1 {
                        let Some(js) = grid.get(&[c[0] + dx, c[1] + dy, c[2] + dz]) else {
                            continue;
                        };
                        for &j in js {
                            let d = (ra.pose.translation - b[j].pose.translation).norm();
                            if d <= threshold {
                                out.push((j, d));
                            }
                        }
                    }
                }
            }
            out.sort_unstable_by_key(|&(j, _)| j);
            out
        })
        .collect()
}

struct ObjectScan {
    counts: ObjectCounts,
    nearest: Vec<MatchedPair>,
    pairs: Vec<MatchedPair>,
}

fn scan_object(
    obj_id: u32,
    a: &[&PoseRecord],
    b: &[&PoseRecord],
    threshold: f64,
    method: ScanMethod,
) -> ObjectScan {
    let hits = match method {
        ScanMethod::BruteForce => neighbors_brute(a, b, threshold),
        ScanMethod::Grid => neighbors_grid(a, b, threshold),
    };
    let mut b_hit = vec![false; b.len()];
    let mut nearest = Vec::new();
    let mut pairs = Vec::new();
    for (i, hs) in hits.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for &(j, d) in hs {
            b_hit[j] = true;
            pairs.push(MatchedPair {
                a: a[i].clone(),
                b: b[j].clone(),
                distance_mm: d,
            });
            let better = match best {
                None => true,
                Some((bj, bd)) => d < bd || (d == bd && b[j].key() < b[bj].key()),
            };
            if better {
                best = Some((j, d));
            }
        }
        if let Some((j, d)) = best {
            nearest.push(MatchedPair {
                a: a[i].clone(),
                b: b[j].clone(),
                distance_mm: d,
            });
        }
    }
    ObjectScan {
        counts: ObjectCounts {
            obj_id,
            records_a: a.len(),
            records_b: b.len(),
            a_with_duplicate: nearest.len(),
            b_with_duplicate: b_hit.iter().filter(|h| **h).count(),
            pairs_within_threshold: pairs.len(),
        },
        nearest,
        pairs,
    }
}

fn group(records: &[PoseRecord]) -> BTreeMap<u32, Vec<&PoseRecord>> {
    let mut m: BTreeMap<u32, Vec<&PoseRecord>> = BTreeMap::new();
    for r in records {
        m.entry(r.obj_id).or_default().push(r);
    }
    for v in m.values_mut() {
        v.sort_by_key(|r| r.key());
    }
    m
}

pub fn scan_duplicates(a: &[PoseRecord], b: &[PoseRecord], threshold_mm: f64) -> Result<DuplicateReport> {
    scan_duplicates_with(a, b, threshold_mm, ScanMethod::Grid, Execution::Parallel)
}

/// For each A record, finds same-object B records whose translation lies
/// within `threshold_mm` and keeps the nearest one (ties go to the lowest B
/// `(scene, image)`).
pub fn scan_duplicates_with(
    a: &[PoseRecord],
    b: &[PoseRecord],
    threshold_mm: f64,
    method: ScanMethod,
    exec: Execution,
) -> Result<DuplicateReport> {
    if !(threshold_mm > 0.0 && threshold_mm.is_finite()) {
        return Err(Error::Config(format!("threshold must be positive, got {threshold_mm}")));
    }
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("duplicate scan needs two non-empty splits".into()));
    }
    let ga = group(a);
    let gb = group(b);
    let ids: Vec<u32> = ga.keys().chain(gb.keys()).copied().collect::<std::collections::BTreeSet<_>>().into_iter().collect();
    let empty = Vec::new();
    let scans = exec.map(&ids, |id| {
        scan_object(
            *id,
            ga.get(id).unwrap_or(&empty),
            gb.get(id).unwrap_or(&empty),
            threshold_mm,
            method,
        )
    });
    let mut report = DuplicateReport {
        threshold_mm,
        per_object: Vec::with_capacity(scans.len()),
        records_a: a.len(),
        records_b: b.len(),
        a_with_duplicate: 0,
        b_with_duplicate: 0,
        fraction_of_a_with_duplicate_in_b: 0.0,
        fraction_of_b_drawn_from_a: 0.0,
        nearest: Vec::new(),
        pairs: Vec::new(),
    };
    for s in scans {
        report.a_with_duplicate += s.counts.a_with_duplicate;
        report.b_with_duplicate += s.counts.b_with_duplicate;
        report.per_object.push(s.counts);
        report.nearest.extend(s.nearest);
        report.pairs.extend(s.pairs);
    }
    report.fraction_of_a_with_duplicate_in_b = report.a_with_duplicate as f64 / a.len() as f64;
    report.fraction_of_b_drawn_from_a = report.b_with_duplicate as f64 / b.len() as f64;
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AddHistogram {
    pub bin_fraction: f64,
    /// ADD between the paired poses divided by the object diameter.
    pub normalized_add: Vec<f64>,
    /// `counts[i]` holds pairs in `[i, i + 1) · bin_fraction`.
    pub counts: Vec<usize>,
    pub fraction_below_first_bin: f64,
}

/// Bin index of `value` for bins of width `bin`; values within 1e-9 bin
/// widths below an edge count as on the edge.
pub fn bin_index(value: f64, bin: f64) -> usize {
    (value / bin + 1e-9).floor().max(0.0) as usize
}

pub fn add_difference_histogram(
    pairs: &[MatchedPair],
    models: &BTreeMap<u32, ModelPoints>,
    bin_fraction: f64,
) -> Result<AddHistogram> {
    if !(bin_fraction > 0.0) {
        return Err(Error::Config(format!("bin fraction must be positive, got {bin_fraction}")));
    }
    let missing: Vec<u32> = pairs
        .iter()
        .map(|p| p.a.obj_id)
        .filter(|id| !models.contains_key(id))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingModel(missing));
    }
    let mut normalized = Vec::with_capacity(pairs.len());
    let mut diameters: BTreeMap<u32, f64> = BTreeMap::new();
    for p in pairs {
        let m = &models[&p.a.obj_id];
        let diameter = *diameters.entry(p.a.obj_id).or_insert_with(|| m.diameter());
        // Records are in millimeters, model points in meters.
        let add = add_metric(&p.a.pose.scale_translation(1e-3), &p.b.pose.scale_translation(1e-3), &m.points)?;
        normalized.push(add / diameter);
    }
    let mut counts = Vec::new();
    for &v in &normalized {
        let i = bin_index(v, bin_fraction);
        if i >= counts.len() {
            counts.resize(i + 1, 0);
        }
        counts[i] += 1;
    }
    let fraction_below_first_bin = if normalized.is_empty() {
        0.0
    } else {
        counts.first().copied().unwrap_or(0) as f64 / normalized.len() as f64
    };
    Ok(AddHistogram {
        bin_fraction,
        normalized_add: normalized,
        counts,
        fraction_below_first_bin,
    })
}

/// Reads every `scene_gt.json` below a split directory.
pub fn load_split_annotations(split_dir: &Path, split_name: &str) -> Result<Vec<PoseRecord>> {
    let entries = fs::read_dir(split_dir).map_err(|e| Error::io(split_dir, e))?;
    let mut scenes = Vec::new();
    for e in entries {
        let e = e.map_err(|err| Error::io(split_dir, err))?;
        let path = e.path().join("scene_gt.json");
        if !path.is_file() {
            continue;
        }
        let name = e.file_name().to_string_lossy().into_owned();
        let scene_id: u32 = name
            .parse()
            .map_err(|_| Error::parse(&path, format!("scene directory {name} is not numeric")))?;
        scenes.push((scene_id, path));
    }
    scenes.sort();
    let mut out = Vec::new();
    for (scene_id, path) in scenes {
        let gt: BTreeMap<u32, Vec<GtEntry>> = read_json(&path)?;
        for (image_id, objs) in gt {
            for o in objs {
                let pose = Pose::new(
                    crate::geometry::matrix_from_row_major(&o.cam_r_m2c),
                    Vector3::from(o.cam_t_m2c),
                )
                .map_err(|e| Error::parse(&path, format!("image {image_id}: {e}")))?;
                out.push(PoseRecord {
                    split: split_name.to_string(),
                    scene_id,
                    image_id,
                    obj_id: o.obj_id,
                    pose,
                });
            }
        }
    }
    if out.is_empty() {
        return Err(Error::Empty(format!(
            "no pose annotations under {}",
            split_dir.display()
        )));
    }
    Ok(out)
}

/// Pose annotations of split `split` under a dataset root.
pub fn load_pose_annotations(root: &Path, split: &str) -> Result<Vec<PoseRecord>> {
    load_split_annotations(&root.join(split), split)
}

/// Reads every `obj_*.json` model file in `dir`, converting to meters.
pub fn load_models_dir(dir: &Path) -> Result<BTreeMap<u32, ModelPoints>> {
    let entries = fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut out = BTreeMap::new();
    for e in entries {
        let path = e.map_err(|err| Error::io(dir, err))?.path();
        let is_model = path
            .file_name()
            .and_then(|n| n.to_str())
            .is_some_and(|n| n.starts_with("obj_") && n.ends_with(".json"));
        if !is_model {
            continue;
        }
        let m: ModelFile = read_json(&path)?;
        out.insert(m.obj_id, ModelPoints::new(m.points_m(), m.symmetric)?);
    }
    Ok(out)
}

/// Draws the histogram as a bar chart; the bar height is the bin count
/// relative to the largest bin.
pub fn render_histogram_png(hist: &AddHistogram, path: &Path) -> Result<()> {
    const W: u32 = 400;
    const H: u32 = 200;
    let bins = hist.counts.len().max(1) as u32;
    let max = hist.counts.iter().copied().max().unwrap_or(0).max(1) as f64;
    let mut img = image::RgbImage::from_pixel(W, H, image::Rgb([255, 255, 255]));
    let bar = (W / bins).max(1);
    for (i, &c) in hist.counts.iter().enumerate() {
        let h = ((c as f64 / max) * (H - 1) as f64).round() as u32;
        let x0 = i as u32 * bar;
        for x in x0..(x0 + bar.saturating_sub(1).max(1)).min(W) {
            for y in (H - h)..H {
                img.put_pixel(x, y, image::Rgb([40, 90, 170]));
            }
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

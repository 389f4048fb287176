use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{check_image_size, eval_order, LoadedSample, LoadedSplit};
use crate::error::{Error, Result};
use crate::geometry::Pose;
use crate::metrics::{MetricsReport, ModelPoints, SampleMetrics};
use crate::model::{Model, ViewInput};
use crate::par::Execution;

/// Evaluates `predict` on every sample with the fixed view order of
/// [`eval_order`]. `predict` returns the reference-view pose.
pub fn evaluate_with<F>(
    split: &LoadedSplit,
    views: usize,
    points: &ModelPoints,
    auc_threshold_m: f64,
    exec: Execution,
    predict: F,
) -> Result<MetricsReport>
where
    F: Fn(&LoadedSample, &[ViewInput]) -> Result<Pose> + Sync + Send,
{
    let order = eval_order(views);
    let samples = exec
        .map(&split.samples, |s| {
            let (inputs, gt) = s.inputs(&order)?;
            let pred = predict(s, &inputs)?;
            SampleMetrics::compute(&pred, &gt, points)
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    MetricsReport::from_samples(split.split.name(), &samples, points.symmetric, auc_threshold_m)
}

/// Evaluates a model with `views` views per sample.
pub fn evaluate(
    model: &Model,
    split: &LoadedSplit,
    views: usize,
    points: &ModelPoints,
    auc_threshold_m: f64,
    exec: Execution,
) -> Result<MetricsReport> {
    check_image_size(&model.config, split)?;
    if views == 0 || views > model.config.max_views {
        return Err(Error::Config(format!(
            "checkpoint supports up to {} views, requested {views}",
            model.config.max_views
        )));
    }
    evaluate_with(split, views, points, auc_threshold_m, exec, |s, inputs| {
        let obj = s.record.views[0].gt.obj_id;
        let preds = model.predict(inputs)?;
        let p = preds
            .iter()
            .find(|p| p.obj_id == Some(obj))
            .ok_or_else(|| Error::Empty(format!("no prediction for object {obj}")))?;
        p.pose()
    })
}

/// Ground-truth passthrough; bounds every metric.
pub fn evaluate_oracle(
    split: &LoadedSplit,
    views: usize,
    points: &ModelPoints,
    auc_threshold_m: f64,
) -> Result<MetricsReport> {
    evaluate_with(split, views, points, auc_threshold_m, Execution::Sequential, |s, _| {
        Ok(s.gt[eval_order(views)[0]])
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeEntry {
    pub views: usize,
    /// Mean seconds per forward pass, one value per run.
    pub run_means_s: Vec<f64>,
    pub mean_s: f64,
    pub std_s: f64,
    /// `mean_s / views`.
    pub per_image_mean_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RuntimeReport {
    pub hardware: String,
    pub samples: usize,
    pub runs: usize,
    pub entries: Vec<RuntimeEntry>,
}

/// Times sequential inference over `split` for each view count, `runs`
/// passes per setting. Views beyond the two stored per sample repeat.
pub fn measure_runtime(
    model: &Model,
    split: &LoadedSplit,
    view_counts: &[usize],
    runs: usize,
    hardware: &str,
) -> Result<RuntimeReport> {
    check_image_size(&model.config, split)?;
    if split.is_empty() || runs == 0 {
        return Err(Error::Empty("runtime needs samples and at least one run".into()));
    }
    let mut entries = Vec::with_capacity(view_counts.len());
    for &v in view_counts {
        if v == 0 || v > model.config.max_views {
            return Err(Error::Config(format!(
                "checkpoint supports up to {} views, requested {v}",
                model.config.max_views
            )));
        }
        let inputs = split
            .samples
            .iter()
            .map(|s| s.inputs(&eval_order(v)).map(|(i, _)| i))
            .collect::<Result<Vec<_>>>()?;
        let mut run_means = Vec::with_capacity(runs);
        for _ in 0..runs {
            let t = Instant::now();
            for views in &inputs {
                std::hint::black_box(model.predict(views)?);
            }
            run_means.push(t.elapsed().as_secs_f64() / inputs.len() as f64);
        }
        let n = runs as f64;
        let mean = run_means.iter().sum::<f64>() / n;
        let var = run_means.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        entries.push(RuntimeEntry {
            views: v,
            run_means_s: run_means,
            mean_s: mean,
            std_s: var.sqrt(),
            per_image_mean_s: mean / v as f64,
        });
    }
    Ok(RuntimeReport {
        hardware: hardware.to_string(),
        samples: split.len(),
        runs,
        entries,
    })
}

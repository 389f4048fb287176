use std::path::Path;
use std::time::Instant;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    check_image_size, eval_order, eval::evaluate, load_model_points, load_split, write_report, AdamW,
    LoadedSample, LoadedSplit, RunConfig,
};
use crate::autodiff::{Graph, Mat};
use crate::error::{Error, Result};
use crate::metrics::ModelPoints;
use crate::model::Model;
use crate::scene::dataset::Split;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    /// Batch means.
    pub loss: f64,
    pub rotation_loss: f64,
    pub translation_loss: f64,
    pub grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_rotation_error_deg: Option<f64>,
    pub val_mean_add_m: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub config: RunConfig,
    pub train_samples: usize,
    pub val_samples: usize,
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose weights were kept; the last epoch without validation.
    pub best_epoch: usize,
    pub wall_clock_s: f64,
}

pub struct TrainOutcome {
    /// Best-validation weights.
    pub model: Model,
    pub last: Model,
    pub log: TrainingLog,
}

const VAL_STREAM: u64 = 0x7661_6c69_6461_7465;

/// Deterministic `(train, validation)` partition of `n` sample indices.
pub fn split_validation(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed ^ VAL_STREAM));
    let mut held = (n as f64 * fraction).round() as usize;
    if fraction > 0.0 && n >= 2 {
        held = held.clamp(1, n - 1);
    }
    let mut val = idx.split_off(n - held);
    idx.sort_unstable();
    val.sort_unstable();
    (idx, val)
}

/// Gradient of the weighted loss on one sample.
fn sample_gradient(
    model: &Model,
    config: &RunConfig,
    sample: &LoadedSample,
    order: &[usize],
    jitter_seed: u64,
) -> Result<(Vec<Mat>, [f64; 3])> {
    let (views, target) = sample.inputs(order)?;
    let obj = sample.record.views[order[0]].gt.obj_id;
    let mut rng = ChaCha8Rng::seed_from_u64(jitter_seed);
    let mut g = Graph::new();
    let out = model.forward(&mut g, &views, Some(&mut rng))?;
    let (total, rot, trans) = model.loss(&mut g, &out, &[(obj, target)], &config.loss)?;
    let losses = [g.value(total).item(), g.value(rot).item(), g.value(trans).item()];
    let grads = g.backward(total).params(&g, &model.params);
    Ok((grads, losses))
}

fn view_order(views: usize, random: bool, rng: &mut impl Rng) -> Vec<usize> {
    let r = rng.random_range(0..super::VIEWS_PER_SAMPLE);
    if !random {
        return eval_order(views);
    }
    (0..views).map(|i| (r + i) % super::VIEWS_PER_SAMPLE).collect()
}

fn mean_translation(split: &LoadedSplit, indices: &[usize]) -> Vector3<f64> {
    let mut sum = Vector3::zeros();
    let mut n = 0.0;
    for &i in indices {
        for p in &split.samples[i].gt {
            sum += p.translation;
            n += 1.0;
        }
    }
    sum / n
}

/// Trains on an already loaded training split. Validation uses the held-out
/// part of the same split.
pub fn train_on(
    config: &RunConfig,
    data: &LoadedSplit,
    points: &ModelPoints,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    config.validate()?;
    let start = Instant::now();
    let mcfg = config.model_config();
    check_image_size(&mcfg, data)?;
    let (train_idx, val_idx) = split_validation(data.len(), config.val_fraction, config.seed);
    if train_idx.is_empty() {
        return Err(Error::Empty("no training samples".into()));
    }
    let val = data.subset(&val_idx);

    let mut model = Model::new(mcfg)?;
    model.set_translation_bias(&mean_translation(data, &train_idx));
    let opt_cfg = &config.optimizer;
    let mut opt = AdamW::new(opt_cfg.clone(), &model.params);
    let batches_per_epoch = train_idx.len().div_ceil(opt_cfg.batch_size);
    let total_steps = batches_per_epoch * opt_cfg.epochs;

    let mut steps = Vec::with_capacity(total_steps);
    let mut epochs = Vec::with_capacity(opt_cfg.epochs);
    let mut best: Option<(f64, usize, crate::params::ParamStore)> = None;
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed);
    for epoch in 0..opt_cfg.epochs {
        let mut perm = train_idx.clone();
        perm.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        for batch in perm.chunks(opt_cfg.batch_size) {
            let step = steps.len();
            let jobs: Vec<(usize, Vec<usize>, u64)> = batch
                .iter()
                .map(|&i| (i, view_order(config.views, config.random_reference, &mut order_rng), order_rng.random()))
                .collect();
            let results = config.execution.map(&jobs, |(i, order, js)| {
                sample_gradient(&model, config, &data.samples[*i], order, *js)
            });
            let mut grads: Option<Vec<Mat>> = None;
            let mut losses = [0.0; 3];
            for r in results {
                let (gr, l) = r?;
                for k in 0..3 {
                    losses[k] += l[k];
                }
                match grads.as_mut() {
                    None => grads = Some(gr),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(&gr) {
                            for (x, y) in a.data.iter_mut().zip(&b.data) {
                                *x += y;
                            }
                        }
                    }
                }
            }
            let n = batch.len() as f64;
            let mut grads = grads.expect("non-empty batch");
            for v in grads.iter_mut().flat_map(|g| g.data.iter_mut()) {
                *v /= n;
            }
            let grad_norm = opt.clip(&mut grads);
            let lr = opt_cfg.lr_at(step, total_steps);
            opt.step(&mut model.params, &grads, lr);
            let rec = StepRecord {
                step,
                epoch,
                lr,
                loss: losses[0] / n,
                rotation_loss: losses[1] / n,
                translation_loss: losses[2] / n,
                grad_norm,
            };
            if !rec.loss.is_finite() {
                return Err(Error::Config(format!("training diverged at step {step}")));
            }
            epoch_loss += losses[0];
            steps.push(rec);
        }
        let mut rec = EpochRecord {
            epoch,
            train_loss: epoch_loss / train_idx.len() as f64,
            val_mean_rotation_error_deg: None,
            val_mean_add_m: None,
        };
        if !val.is_empty() {
            let report = evaluate(&model, &val, config.views, points, config.auc_threshold_m, config.execution)?;
            rec.val_mean_rotation_error_deg = Some(report.mean_rotation_error_deg);
            rec.val_mean_add_m = Some(report.mean_add_m);
            if best.as_ref().is_none_or(|(b, _, _)| report.mean_rotation_error_deg < *b) {
                best = Some((report.mean_rotation_error_deg, epoch, model.params.clone()));
            }
        }
        log::info!(
            "epoch {epoch}: train loss {:.4}, val rotation {:?}",
            rec.train_loss,
            rec.val_mean_rotation_error_deg
        );
        epochs.push(rec);
    }
    let last = model.clone();
    let best_epoch = match best {
        Some((_, e, params)) => {
            model.params = params;
            e
        }
        None => opt_cfg.epochs - 1,
    };
    let log = TrainingLog {
        config: config.clone(),
        train_samples: train_idx.len(),
        val_samples: val_idx.len(),
        steps,
        epochs,
        best_epoch,
        wall_clock_s: start.elapsed().as_secs_f64(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        model.save(&dir.join("best.json"))?;
        last.save(&dir.join("last.json"))?;
        write_report(&dir.join("training_log.json"), &log)?;
    }
    Ok(TrainOutcome { model, last, log })
}

/// Loads the training split named by `config.dataset`, trains, and writes
/// `best.json`, `last.json` and `training_log.json` to `config.output`.
pub fn train(config: &RunConfig) -> Result<TrainOutcome> {
    config.validate()?;
    let data = load_split(&config.dataset, Split::Train, config.execution)?;
    let points = load_model_points(&config.dataset)?;
    train_on(config, &data, &points, Some(&config.output))
}

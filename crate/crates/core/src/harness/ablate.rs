use serde::{Deserialize, Serialize};

use super::{eval::evaluate, load_model_points, load_split, train::train_on, write_report, LoadedSplit, RunConfig};
use crate::error::Result;
use crate::geometry::LosMode;
use crate::metrics::ModelPoints;
use crate::scene::dataset::Split;

/// Values to try per swept field; each value yields one variant that differs
/// from the base configuration in that field only.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub encoder: Vec<bool>,
    pub los_mode: Vec<LosMode>,
    pub num_queries: Vec<usize>,
    pub views: Vec<usize>,
}

impl SweepSpec {
    /// Every sweep the ablation tables report.
    pub fn full() -> Self {
        SweepSpec {
            encoder: vec![true, false],
            los_mode: LosMode::ALL.to_vec(),
            num_queries: vec![1, 2, 4, 8],
            views: vec![1, 2],
        }
    }

    pub fn deltas(&self) -> Vec<Delta> {
        let mut out: Vec<Delta> = self.encoder.iter().map(|&v| Delta::Encoder(v)).collect();
        out.extend(self.los_mode.iter().map(|&v| Delta::LosMode(v)));
        out.extend(self.num_queries.iter().map(|&v| Delta::NumQueries(v)));
        out.extend(self.views.iter().map(|&v| Delta::Views(v)));
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "field", content = "value")]
pub enum Delta {
    Encoder(bool),
    LosMode(LosMode),
    NumQueries(usize),
    Views(usize),
}

impl Delta {
    pub fn apply(&self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match *self {
            Delta::Encoder(v) => c.model.encoder = v,
            Delta::LosMode(v) => c.model.los_mode = v,
            Delta::NumQueries(v) => c.model.num_queries = v,
            Delta::Views(v) => c.views = v,
        }
        c.output = base.output.join("ablation").join(self.label());
        c
    }

    pub fn label(&self) -> String {
        match self {
            Delta::Encoder(v) => format!("encoder_{}", if *v { "on" } else { "off" }),
            Delta::LosMode(m) => format!("los_{}", m.name()),
            Delta::NumQueries(n) => format!("queries_{n}"),
            Delta::Views(v) => format!("views_{v}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub delta: Option<Delta>,
    pub mean_add_m: Option<f64>,
    pub mean_rotation_error_deg: Option<f64>,
    pub error: Option<String>,
}

fn run_variant(
    config: &RunConfig,
    train: &LoadedSplit,
    test: &LoadedSplit,
    points: &ModelPoints,
) -> Result<(f64, f64)> {
    let out = train_on(config, train, points, Some(&config.output))?;
    let report = evaluate(&out.model, test, config.views, points, config.auc_threshold_m, config.execution)?;
    write_report(&config.output.join(format!("eval_{}.json", test.split.name())), &report)?;
    Ok((report.mean_add_m, report.mean_rotation_error_deg))
}

/// Trains and evaluates the base configuration and every sweep variant on
/// `eval_split`. Variant failures are recorded in their row.
pub fn ablate(base: &RunConfig, sweep: &SweepSpec, eval_split: Split) -> Result<Vec<AblationRow>> {
    base.validate()?;
    let train = load_split(&base.dataset, Split::Train, base.execution)?;
    let test = load_split(&base.dataset, eval_split, base.execution)?;
    let points = load_model_points(&base.dataset)?;
    let mut variants: Vec<(String, Option<Delta>, RunConfig)> = Vec::new();
    let mut base_cfg = base.clone();
    base_cfg.output = base.output.join("ablation").join("base");
    variants.push(("base".into(), None, base_cfg));
    for d in sweep.deltas() {
        variants.push((d.label(), Some(d), d.apply(base)));
    }
    let rows = variants
        .into_iter()
        .map(|(variant, delta, cfg)| {
            let result = cfg.validate().and_then(|_| run_variant(&cfg, &train, &test, &points));
            match result {
                Ok((add, rot)) => AblationRow {
                    variant,
                    delta,
                    mean_add_m: Some(add),
                    mean_rotation_error_deg: Some(rot),
                    error: None,
                },
                Err(e) => AblationRow {
                    variant,
                    delta,
                    mean_add_m: None,
                    mean_rotation_error_deg: None,
                    error: Some(e.to_string()),
                },
            }
        })
        .collect();
    Ok(rows)
}

/// Plain-text table with one row per variant.
pub fn format_table(rows: &[AblationRow]) -> String {
    let mut s = format!("{:<24} {:>12} {:>14}\n", "variant", "mean ADD", "mean rot [deg]");
    for r in rows {
        match (r.mean_add_m, r.mean_rotation_error_deg) {
            (Some(a), Some(d)) => s.push_str(&format!("{:<24} {:>12.5} {:>14.3}\n", r.variant, a, d)),
            _ => s.push_str(&format!(
                "{:<24} failed: {}\n",
                r.variant,
                r.error.as_deref().unwrap_or("unknown error")
            )),
        }
    }
    s
}

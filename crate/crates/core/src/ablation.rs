//! Ablation sweeps: vary the pre-training set by image count or by subject
//! count (gender balanced), run the identical pre-train / head-replace /
//! fine-tune / evaluate procedure per grid point and seed, and emit
//! plot-ready series.

use std::fmt;

use crate::batch::{mix_seed, ImageStore};
use crate::error::Result;
use crate::manifest::Manifest;
use crate::metrics::{build_report, Provenance};
use crate::network::build_vgg13;
use crate::scalar::Scalar;
use crate::splits::{sample_by_images, sample_by_subjects, subject_kfold};
use crate::trainer::{finetune_subset, pretrain, evaluate_model, TrainConfig};

const TAG_SAMPLE: u64 = 0x53414d50;
const TAG_NET: u64 = 0x4e4554;
const TAG_HEAD: u64 = 0x48454144;
const TAG_FOLDS: u64 = 0x464c44;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    Images,
    Subjects,
}

impl AblationAxis {
    pub fn as_str(&self) -> &'static str {
        match self {
            AblationAxis::Images => "images",
            AblationAxis::Subjects => "subjects",
        }
    }
}

/// One grid point: a pre-training budget. `Count(0)` skips pre-training
/// entirely (the random-init baseline); `All` uses the full pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridPoint {
    Count(usize),
    All,
}

/// Default sweep grids, mirroring the study design.
pub fn default_grid(axis: AblationAxis) -> Vec<GridPoint> {
    match axis {
        AblationAxis::Images => vec![
            GridPoint::Count(1000),
            GridPoint::Count(2000),
            GridPoint::Count(10000),
            GridPoint::All,
        ],
        AblationAxis::Subjects => vec![
            GridPoint::Count(12),
            GridPoint::Count(200),
            GridPoint::Count(600),
            GridPoint::Count(1000),
            GridPoint::All,
        ],
    }
}

impl fmt::Display for GridPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            GridPoint::Count(n) => write!(f, "{n}"),
            GridPoint::All => write!(f, "all"),
        }
    }
}

#[derive(Clone)]
pub struct AblationPlan {
    pub axis: AblationAxis,
    pub grid: Vec<GridPoint>,
    pub seeds: Vec<u64>,
    pub pretrain_cfg: TrainConfig,
    pub finetune_cfg: TrainConfig,
    pub in_channels: usize,
    /// k of the subject-independent CV on the fine-tune set.
    pub finetune_folds: usize,
    /// Restrict fine-tuning/evaluation to these fold ids (cost control);
    /// empty means all folds.
    pub folds_to_run: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub axis: AblationAxis,
    pub point: GridPoint,
    pub seed: u64,
    pub pretrain_images: usize,
    pub pretrain_subjects: usize,
    pub macro_f1: f64,
    pub macro_roc_auc: Option<f64>,
    pub macro_pr_auc: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct AblationSeries {
    pub axis: AblationAxis,
    pub rows: Vec<AblationRow>,
}

impl AblationSeries {
    /// Per-seed rows as CSV; aggregation is the consumer's concern.
    pub fn render_csv(&self, config_hash: &str) -> String {
        let mut out = format!("# config_hash={config_hash}\n");
        out.push_str("axis,point,seed,pretrain_images,pretrain_subjects,macro_f1,macro_roc_auc,macro_pr_auc\n");
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{},{}\n",
                r.axis.as_str(),
                r.point,
                r.seed,
                r.pretrain_images,
                r.pretrain_subjects,
                r.macro_f1,
                r.macro_roc_auc.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
                r.macro_pr_auc.map(|v| format!("{v:.6}")).unwrap_or_else(|| "-".into()),
            ));
        }
        out
    }

    /// Mean macro-F1 per grid point, in grid order.
    pub fn mean_f1_by_point(&self, grid: &[GridPoint]) -> Vec<f64> {
        grid.iter()
            .map(|p| {
                let vals: Vec<f64> = self.rows.iter().filter(|r| r.point == *p).map(|r| r.macro_f1).collect();
                vals.iter().sum::<f64>() / vals.len().max(1) as f64
            })
            .collect()
    }

    /// Median macro-F1 at one grid point across seeds.
    pub fn median_f1_at(&self, point: GridPoint) -> f64 {
        let mut vals: Vec<f64> = self.rows.iter().filter(|r| r.point == point).map(|r| r.macro_f1).collect();
        vals.sort_by(|a, b| a.partial_cmp(b).expect("finite f1"));
        if vals.is_empty() {
            f64::NAN
        } else {
            vals[vals.len() / 2]
        }
    }
}

/// Run the sweep. `pool` is the pre-training pool with recorded (noisy)
/// labels; `finetune_data` is the clean fine-tune set, subject-disjoint from
/// the pool. `store` must cover the images of both.
pub fn run_ablation<T: Scalar>(
    pool: &Manifest,
    finetune_data: &Manifest,
    store: &ImageStore<T>,
    plan: &AblationPlan,
    mut progress: impl FnMut(&AblationRow),
) -> Result<AblationSeries> {
    let pool_subjects: std::collections::HashSet<String> = pool.subjects().into_iter().collect();
    if let Some(shared) = finetune_data.subjects().iter().find(|s| pool_subjects.contains(*s)) {
        return Err(crate::error::Error::config(format!(
            "subject {shared} appears in both the pre-training pool and the fine-tune set"
        )));
    }
    let mut rows = Vec::new();
    for &seed in &plan.seeds {
        for (pi, &point) in plan.grid.iter().enumerate() {
            let sample_seed = mix_seed(&[seed, TAG_SAMPLE, pi as u64]);
            let subset: Option<Manifest> = match (plan.axis, point) {
                (_, GridPoint::Count(0)) => None,
                (_, GridPoint::All) => Some(pool.clone()),
                (AblationAxis::Images, GridPoint::Count(n)) => {
                    Some(sample_by_images(pool, n, true, sample_seed)?)
                }
                (AblationAxis::Subjects, GridPoint::Count(n)) => {
                    Some(sample_by_subjects(pool, n, true, sample_seed, None)?)
                }
            };

            // Same seed => same initialization across grid points, so points
            // differ only in the pre-training data they saw.
            let net = build_vgg13::<T>(plan.in_channels, pool.label_width(), mix_seed(&[seed, TAG_NET]))?;
            let mut pretrain_images = 0usize;
            let mut pretrain_subjects = 0usize;
            if let Some(subset) = &subset {
                pretrain_images = subset.len();
                pretrain_subjects = subjects_count(subset);
                let mut cfg = plan.pretrain_cfg.clone();
                cfg.seed = mix_seed(&[seed, pi as u64, 1]);
                pretrain(&net, subset, store, &cfg)?;
            }

            // The transfer step of the pipeline: a fresh output layer, then
            // identical fine-tuning for every grid point.
            let transferred = net.replace_head(finetune_data.label_width(), mix_seed(&[seed, TAG_HEAD]))?;
            let folds = subject_kfold(finetune_data, plan.finetune_folds, mix_seed(&[seed, TAG_FOLDS]))?;
            let fold_ids: Vec<usize> = if plan.folds_to_run.is_empty() {
                (0..plan.finetune_folds).collect()
            } else {
                plan.folds_to_run.clone()
            };
            let mut cfg = plan.finetune_cfg.clone();
            cfg.seed = mix_seed(&[seed, pi as u64, 2]);
            let runs = finetune_subset(&transferred, finetune_data, &folds, store, &cfg, &fold_ids)?;

            let mut matrices = Vec::new();
            for run in &runs {
                matrices.push(evaluate_model(&run.network, &run.test_data, store, cfg.batch_size)?);
            }
            let report = build_report(
                &matrices,
                Provenance { fold_ids: fold_ids.clone(), config_hash: String::new(), seed },
            )?;

            let row = AblationRow {
                axis: plan.axis,
                point,
                seed,
                pretrain_images,
                pretrain_subjects,
                macro_f1: report.macro_avg.f1,
                macro_roc_auc: report.macro_avg.roc_auc,
                macro_pr_auc: report.macro_avg.pr_auc,
            };
            progress(&row);
            rows.push(row);
        }
    }
    Ok(AblationSeries { axis: plan.axis, rows })
}

fn subjects_count(m: &Manifest) -> usize {
    m.subjects().len()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grids_match_the_study_design() {
        assert_eq!(
            default_grid(AblationAxis::Images),
            vec![GridPoint::Count(1000), GridPoint::Count(2000), GridPoint::Count(10000), GridPoint::All]
        );
        assert_eq!(
            default_grid(AblationAxis::Subjects),
            vec![
                GridPoint::Count(12),
                GridPoint::Count(200),
                GridPoint::Count(600),
                GridPoint::Count(1000),
                GridPoint::All
            ]
        );
    }

    #[test]
    fn grid_points_render_for_series_files() {
        assert_eq!(GridPoint::Count(1000).to_string(), "1000");
        assert_eq!(GridPoint::All.to_string(), "all");
    }
}

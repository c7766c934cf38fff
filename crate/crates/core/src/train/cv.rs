use std::fmt::Write as _;

use crate::data::kfold_split;
use crate::error::{ensure, Result};
use crate::model::{build_model, ModelConfig};

use super::dataset::Dataset;
use super::fit::{train_with_progress, EpochRecord, TrainConfig};

/// One fold's loss summary: first-epoch and minimum losses, and epochs run.
#[derive(Clone, Debug, PartialEq)]
pub struct FoldReport {
    /// 1-based.
    pub fold: usize,
    pub init_train_loss: f32,
    pub min_train_loss: f32,
    pub init_val_loss: f32,
    pub min_val_loss: f32,
    pub epochs: usize,
    pub val_videos: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct CvReport {
    pub rows: Vec<FoldReport>,
}

pub const CV_CSV_HEADER: &str = "fold,init_train_loss,min_train_loss,init_val_loss,min_val_loss,epochs";

impl CvReport {
    pub fn mean_min_val_loss(&self) -> f32 {
        let sum: f64 = self.rows.iter().map(|r| r.min_val_loss as f64).sum();
        (sum / self.rows.len().max(1) as f64) as f32
    }

    /// One CSV row per fold.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CV_CSV_HEADER}\n");
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{},{}",
                r.fold, r.init_train_loss, r.min_train_loss, r.init_val_loss, r.min_val_loss, r.epochs
            )
            .expect("writing to a String");
        }
        out
    }
}

fn min_of(values: impl Iterator<Item = f32>) -> f32 {
    values.fold(f32::INFINITY, f32::min)
}

/// Trains a freshly initialized model on each stratified fold and summarizes
/// the loss curves. Every fold starts from the same initialization.
pub fn cross_validate(
    data: &Dataset,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    k: usize,
    mut progress: impl FnMut(usize, &EpochRecord),
) -> Result<CvReport> {
    let folds = kfold_split(&data.videos(), k, cfg.seed)?;
    let mut report = CvReport::default();
    for (i, fold) in folds.iter().enumerate() {
        let train_set = data.subset(&fold.train);
        let val_set = data.subset(&fold.val);
        ensure!(!val_set.is_empty(), "fold {} has no validation clips", i + 1);
        let model = build_model(model_cfg, cfg.seed)?;
        let trained = train_with_progress(model, &train_set, Some(&val_set), cfg, |r| progress(i + 1, r))?;
        let h = &trained.history;
        let val = |r: &EpochRecord| r.val_loss.expect("validation set present");
        report.rows.push(FoldReport {
            fold: i + 1,
            init_train_loss: h[0].train_loss,
            min_train_loss: min_of(h.iter().map(|r| r.train_loss)),
            init_val_loss: val(&h[0]),
            min_val_loss: min_of(h.iter().map(val)),
            epochs: h.len(),
            val_videos: fold.val.clone(),
        });
    }
    Ok(report)
}

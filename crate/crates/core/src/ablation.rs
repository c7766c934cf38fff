//! Controlled sweeps over one training or architecture setting, and the
//! paired comparison of the regression and classification heads.

use std::fmt::Write as _;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};

use crate::data::AugmentStrategy;
use crate::error::{ensure, Error, Result};
use crate::heads::{is_fatigued, HeadKind, LossConfig};
use crate::metrics::{ema_corrected, MetricsReport, RocCurve, DEFAULT_EMA_BETA};
use crate::model::{build_model, AttentionPosition, Backbone, ModelConfig};
use crate::train::{evaluate, train, write_loss_csv, Dataset, EpochRecord, TrainConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationVariable {
    BatchSize,
    Augmentation,
    Backbone,
    AttentionPosition,
    Loss,
}

impl std::str::FromStr for AblationVariable {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "batch_size" => Ok(Self::BatchSize),
            "augmentation" => Ok(Self::Augmentation),
            "backbone" => Ok(Self::Backbone),
            "attention_position" => Ok(Self::AttentionPosition),
            "loss" => Ok(Self::Loss),
            other => Err(format!(
                "unknown ablation variable {other:?} (expected batch_size|augmentation|backbone|attention_position|loss)"
            )),
        }
    }
}

impl std::fmt::Display for AblationVariable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::BatchSize => "batch_size",
            Self::Augmentation => "augmentation",
            Self::Backbone => "backbone",
            Self::AttentionPosition => "attention_position",
            Self::Loss => "loss",
        })
    }
}

impl AblationVariable {
    /// Provenance keys a value of this variable may change.
    pub fn varied_keys(self) -> &'static [&'static str] {
        match self {
            Self::BatchSize => &["train.batch_size"],
            Self::Augmentation => &["augment.strategy"],
            Self::Backbone => &["model.backbone", "model.attention_position"],
            Self::AttentionPosition => &["model.attention_position"],
            Self::Loss => &["model.head", "train.alpha"],
        }
    }

    /// Values swept when none are given.
    pub fn default_values(self) -> &'static [&'static str] {
        match self {
            Self::BatchSize => &["4", "16", "32"],
            Self::Augmentation => &["less", "more"],
            Self::Backbone => &["2d", "3d", "3d+attention"],
            Self::AttentionPosition => &["none", "after_block3", "after_block4"],
            Self::Loss => &["mse", "mse+ce"],
        }
    }
}

/// One sweep: `values` of `variable` applied on top of fixed base configurations.
#[derive(Clone, Debug)]
pub struct AblationSpec {
    pub variable: AblationVariable,
    pub values: Vec<String>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Recorded in each run's provenance.
    pub dataset: String,
    /// Initialization and training seed shared by every run.
    pub seed: u64,
}

/// Model and training configuration of one sweep value.
pub fn resolve(spec: &AblationSpec, value: &str) -> Result<(ModelConfig, TrainConfig)> {
    let mut model = spec.model.clone();
    let mut train = spec.train.clone();
    train.seed = spec.seed;
    let bad = |msg: String| Error::Contract(format!("{} value {value:?}: {msg}", spec.variable));
    match spec.variable {
        AblationVariable::BatchSize => {
            train.batch_size = value.parse().map_err(|e| bad(format!("{e}")))?;
        }
        AblationVariable::Augmentation => {
            train.augmentation = value.parse::<AugmentStrategy>().map_err(bad)?;
        }
        AblationVariable::Backbone => match value {
            "2d" | "2d-r18" => {
                model.backbone = Backbone::R2d;
                model.attention = AttentionPosition::None;
            }
            "3d" | "3d-r18" => {
                model.backbone = Backbone::R3d;
                model.attention = AttentionPosition::None;
            }
            "3d+attention" | "3d-r18+attention" => {
                model.backbone = Backbone::R3d;
                if model.attention == AttentionPosition::None {
                    model.attention = AttentionPosition::AfterBlock3;
                }
            }
            _ => return Err(bad("expected 2d|3d|3d+attention".into())),
        },
        AblationVariable::AttentionPosition => {
            model.attention = value.parse().map_err(bad)?;
        }
        AblationVariable::Loss => {
            let (head, alpha) = value.split_once(':').unwrap_or((value, ""));
            train.loss.head = match head {
                "mse" | "continuous" => HeadKind::Continuous,
                "mse+ce" | "categorical" => HeadKind::Categorical,
                _ => return Err(bad("expected mse|mse+ce[:alpha]".into())),
            };
            if !alpha.is_empty() {
                ensure!(train.loss.head == HeadKind::Categorical, "{} value {value:?}: alpha needs the categorical head", spec.variable);
                train.loss.alpha = alpha.parse().map_err(|e| bad(format!("{e}")))?;
            }
        }
    }
    model.head = train.loss;
    train.validate()?;
    train.loss.validate()?;
    Ok((model, train))
}

/// The full resolved configuration as `key=value` lines.
pub fn provenance(model: &ModelConfig, train: &TrainConfig, dataset: &str) -> String {
    let opt = |v: Option<String>| v.unwrap_or_else(|| "none".into());
    let lines = [
        ("dataset", dataset.to_string()),
        ("model.input_size", model.input_size.to_string()),
        ("model.clip_len", model.clip_len.to_string()),
        ("model.width", model.base_width.to_string()),
        ("model.stem_temporal", model.stem_temporal.to_string()),
        ("model.backbone", model.backbone.to_string()),
        ("model.attention_position", model.attention.to_string()),
        ("model.nonlocal.bottleneck", opt(model.nonlocal.bottleneck.map(|b| b.to_string()))),
        ("model.nonlocal.activation", model.nonlocal.activation.to_string()),
        ("model.head", model.head.head.to_string()),
        ("dataset.k", model.head.k.to_string()),
        ("train.alpha", train.loss.alpha.to_string()),
        ("train.lr", train.base_lr.to_string()),
        ("train.weight_decay", train.weight_decay.to_string()),
        ("train.batch_size", train.batch_size.to_string()),
        ("train.patience", train.patience.to_string()),
        ("train.total_iterations", train.total_iterations.to_string()),
        ("train.seed", train.seed.to_string()),
        ("train.target_accuracy", opt(train.target_train_accuracy.map(|v| v.to_string()))),
        ("train.max_epochs", opt(train.max_epochs.map(|v| v.to_string()))),
        ("augment.strategy", train.augmentation.to_string()),
    ];
    lines.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

/// Extremes of one run's loss curves.
#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub train_loss_max: f32,
    pub train_loss_min: f32,
    pub val_loss_max: Option<f32>,
    pub val_loss_min: Option<f32>,
    pub epochs: usize,
    pub history: Vec<EpochRecord>,
}

impl RunSummary {
    pub fn from_history(history: Vec<EpochRecord>) -> Self {
        let fold = |it: &mut dyn Iterator<Item = f32>| {
            it.fold(None, |acc: Option<(f32, f32)>, v| match acc {
                None => Some((v, v)),
                Some((hi, lo)) => Some((hi.max(v), lo.min(v))),
            })
        };
        let (train_loss_max, train_loss_min) =
            fold(&mut history.iter().map(|r| r.train_loss)).unwrap_or((f32::NAN, f32::NAN));
        let val = fold(&mut history.iter().filter_map(|r| r.val_loss));
        Self {
            train_loss_max,
            train_loss_min,
            val_loss_max: val.map(|v| v.0),
            val_loss_min: val.map(|v| v.1),
            epochs: history.len(),
            history,
        }
    }

    /// Validation losses, or training losses without a validation set.
    pub fn monitored(&self) -> Vec<f64> {
        self.history
            .iter()
            .map(|r| r.val_loss.unwrap_or(r.train_loss) as f64)
            .collect()
    }
}

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub value: String,
    pub dir: PathBuf,
    /// A failed run keeps its error message; the sweep carries on.
    pub outcome: std::result::Result<RunSummary, String>,
}

#[derive(Clone, Debug)]
pub struct AblationReport {
    pub variable: AblationVariable,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn header(&self) -> String {
        format!(
            "{}\ttrain_loss_max\ttrain_loss_min\tval_loss_max\tval_loss_min\ttotal_epochs\tstatus",
            self.variable
        )
    }

    pub fn to_tsv(&self) -> String {
        let mut out = self.header();
        out.push('\n');
        let opt = |v: Option<f32>| v.map(|x| x.to_string()).unwrap_or_else(|| "-".into());
        for row in &self.rows {
            match &row.outcome {
                Ok(s) => writeln!(
                    out,
                    "{}\t{}\t{}\t{}\t{}\t{}\tok",
                    row.value,
                    s.train_loss_max,
                    s.train_loss_min,
                    opt(s.val_loss_max),
                    opt(s.val_loss_min),
                    s.epochs
                ),
                Err(e) => {
                    let msg = e.replace(['\t', '\n'], " ");
                    writeln!(out, "{}\t-\t-\t-\t-\t-\terror: {msg}", row.value)
                }
            }
            .expect("writing to a String");
        }
        out
    }

    /// Bias-corrected EMA of each run's monitored loss, one column per run.
    pub fn ema_csv(&self) -> String {
        let curves: Vec<Vec<f64>> = self
            .rows
            .iter()
            .map(|r| match &r.outcome {
                Ok(s) => ema_corrected(&s.monitored(), DEFAULT_EMA_BETA).unwrap_or_default(),
                Err(_) => Vec::new(),
            })
            .collect();
        let mut out = String::from("epoch");
        for row in &self.rows {
            write!(out, ",{}", row.value).expect("writing to a String");
        }
        out.push('\n');
        let len = curves.iter().map(Vec::len).max().unwrap_or(0);
        for i in 0..len {
            write!(out, "{}", i + 1).expect("writing to a String");
            for c in &curves {
                match c.get(i) {
                    Some(v) => write!(out, ",{v}"),
                    None => write!(out, ","),
                }
                .expect("writing to a String");
            }
            out.push('\n');
        }
        out
    }
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(format!("writing {}", path.display()), e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))
}

fn dir_name(index: usize, value: &str) -> String {
    let clean: String = value
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || "+-.".contains(c) { c } else { '_' })
        .collect();
    format!("{:02}_{clean}", index + 1)
}

fn run_one(model_cfg: &ModelConfig, train_cfg: &TrainConfig, seed: u64, train_set: &Dataset, val_set: Option<&Dataset>) -> Result<RunSummary> {
    let model = build_model(model_cfg, seed)?;
    let trained = catch_unwind(AssertUnwindSafe(|| train(model, train_set, val_set, train_cfg)))
        .map_err(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Error::Contract(format!("run panicked: {msg}"))
        })??;
    Ok(RunSummary::from_history(trained.history))
}

/// Trains once per value and writes, under `out_dir`:
/// `report.tsv`, `val_ema.csv`, and per run `curves.csv`, `val_ema.csv`, `provenance.txt`.
pub fn run_ablation(
    spec: &AblationSpec,
    train_set: &Dataset,
    val_set: Option<&Dataset>,
    out_dir: &Path,
    mut progress: impl FnMut(&str, &std::result::Result<RunSummary, String>),
) -> Result<AblationReport> {
    ensure!(!spec.values.is_empty(), "ablation of {} has no values", spec.variable);
    let resolved = spec
        .values
        .iter()
        .map(|v| resolve(spec, v))
        .collect::<Result<Vec<_>>>()?;
    create_dir(out_dir)?;
    let mut rows = Vec::with_capacity(spec.values.len());
    for (i, (value, (model_cfg, train_cfg))) in spec.values.iter().zip(&resolved).enumerate() {
        let dir = out_dir.join(dir_name(i, value));
        create_dir(&dir)?;
        write(&dir.join("provenance.txt"), &provenance(model_cfg, train_cfg, &spec.dataset))?;
        let outcome = run_one(model_cfg, train_cfg, spec.seed, train_set, val_set).map_err(|e| e.to_string());
        if let Ok(summary) = &outcome {
            write_loss_csv(&dir.join("curves.csv"), &summary.history)?;
            let raw = summary.monitored();
            let ema = ema_corrected(&raw, DEFAULT_EMA_BETA)?;
            let mut csv = String::from("epoch,loss,loss_ema\n");
            for (e, (r, s)) in raw.iter().zip(&ema).enumerate() {
                writeln!(csv, "{},{r},{s}", e + 1).expect("writing to a String");
            }
            write(&dir.join("val_ema.csv"), &csv)?;
        }
        progress(value, &outcome);
        rows.push(AblationRow {
            value: value.clone(),
            dir,
            outcome,
        });
    }
    let report = AblationReport {
        variable: spec.variable,
        rows,
    };
    write(&out_dir.join("report.tsv"), &report.to_tsv())?;
    write(&out_dir.join("val_ema.csv"), &report.ema_csv())?;
    Ok(report)
}

/// Validation results of one head.
#[derive(Clone, Debug)]
pub struct HeadOutcome {
    pub head: HeadKind,
    pub history: Vec<EpochRecord>,
    pub val_loss: f32,
    /// Unweighted cross-entropy on the validation set (zero for the regression head).
    pub val_cross_entropy: f32,
    pub val_mse: f32,
    pub val_accuracy: f32,
}

#[derive(Clone, Debug)]
pub struct LossComparison {
    pub continuous: HeadOutcome,
    pub categorical: HeadOutcome,
    /// Both polarity treatments of the categorical head, with ROC curves.
    pub metrics: MetricsReport,
}

impl LossComparison {
    pub fn summary_tsv(&self) -> String {
        let mut out = String::from("head\tval_loss\tval_mse\tval_cross_entropy\tval_accuracy\tepochs\n");
        for (o, acc) in [
            (&self.continuous, "-".to_string()),
            (&self.categorical, self.categorical.val_accuracy.to_string()),
        ] {
            writeln!(
                out,
                "{}\t{}\t{}\t{}\t{acc}\t{}",
                o.head,
                o.val_loss,
                o.val_mse,
                o.val_cross_entropy,
                o.history.len()
            )
            .expect("writing to a String");
        }
        out
    }

    /// `curve,fpr,tpr` rows for the fatigue-positive, alert-positive and averaged curves.
    pub fn roc_csv(&self) -> String {
        let mut out = String::from("curve,fpr,tpr\n");
        let curves: [(&str, &RocCurve); 3] = [
            ("fatigue_pos", &self.metrics.roc_fatigue),
            ("alert_pos", &self.metrics.roc_alert),
            ("average", &self.metrics.roc_average),
        ];
        for (name, c) in curves {
            for (f, t) in &c.points {
                writeln!(out, "{name},{f},{t}").expect("writing to a String");
            }
        }
        out
    }
}

/// Trains the regression head and the classification head from the same
/// base settings and evaluates both on `val_set`. Writes `loss_heads.tsv`,
/// `metrics.txt`, `roc.csv` and a directory per head under `out_dir`.
pub fn compare_loss_heads(
    train_set: &Dataset,
    val_set: &Dataset,
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    dataset: &str,
    out_dir: &Path,
) -> Result<LossComparison> {
    create_dir(out_dir)?;
    let mut outcomes = Vec::new();
    let mut categorical_eval = None;
    for head in [HeadKind::Continuous, HeadKind::Categorical] {
        let mut train_cfg = base_train.clone();
        train_cfg.loss = LossConfig { head, ..base_train.loss };
        let model_cfg = ModelConfig {
            head: train_cfg.loss,
            ..base_model.clone()
        };
        let dir = out_dir.join(head.to_string());
        create_dir(&dir)?;
        write(&dir.join("provenance.txt"), &provenance(&model_cfg, &train_cfg, dataset))?;
        let trained = train(build_model(&model_cfg, train_cfg.seed)?, train_set, Some(val_set), &train_cfg)?;
        write_loss_csv(&dir.join("curves.csv"), &trained.history)?;
        let eval = evaluate(&trained.model, val_set, &train_cfg.loss, train_cfg.batch_size)?;
        outcomes.push(HeadOutcome {
            head,
            history: trained.history,
            val_loss: eval.loss,
            val_cross_entropy: eval.cross_entropy,
            val_mse: eval.mse,
            val_accuracy: eval.accuracy,
        });
        if head == HeadKind::Categorical {
            categorical_eval = Some(eval);
        }
    }
    let eval = categorical_eval.expect("categorical head evaluated");
    let k = base_train.loss.k;
    let binary = |c: usize| usize::from(is_fatigued(c, k));
    let preds: Vec<usize> = eval.predictions.iter().map(|p| binary(p.class)).collect();
    let labels: Vec<usize> = eval.labels.iter().map(|l| binary(l.categorical)).collect();
    let scores: Vec<f64> = eval.scores.iter().map(|&s| s as f64).collect();
    let metrics = MetricsReport::new(&preds, &labels, &scores)?;
    let categorical = outcomes.pop().expect("two heads");
    let continuous = outcomes.pop().expect("two heads");
    let cmp = LossComparison {
        continuous,
        categorical,
        metrics,
    };
    write(&out_dir.join("loss_heads.tsv"), &cmp.summary_tsv())?;
    write(&out_dir.join("metrics.txt"), &cmp.metrics.to_text())?;
    write(&out_dir.join("roc.csv"), &cmp.roc_csv())?;
    Ok(cmp)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthParams};

    fn spec(variable: AblationVariable) -> AblationSpec {
        AblationSpec {
            variable,
            values: variable.default_values().iter().map(|s| s.to_string()).collect(),
            model: ModelConfig {
                base_width: 2,
                ..Default::default()
            },
            train: TrainConfig {
                base_lr: 1e-3,
                batch_size: 2,
                max_epochs: Some(2),
                augmentation: AugmentStrategy::None,
                ..Default::default()
            },
            dataset: "synth".into(),
            seed: 5,
        }
    }

    fn tiny_data() -> (Dataset, Dataset) {
        let (samples, _) = synth_dataset(&SynthParams {
            n_videos: 4,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let data = Dataset::from_synth(&samples);
        let ids: Vec<String> = data.videos().into_iter().map(|(v, _)| v).collect();
        (data.subset(&ids[..2]), data.subset(&ids[2..]))
    }

    #[test]
    fn provenance_differs_only_in_varied_keys() {
        for var in [
            AblationVariable::BatchSize,
            AblationVariable::Augmentation,
            AblationVariable::Backbone,
            AblationVariable::AttentionPosition,
            AblationVariable::Loss,
        ] {
            let s = spec(var);
            let records: Vec<Vec<String>> = s
                .values
                .iter()
                .map(|v| {
                    let (m, t) = resolve(&s, v).unwrap();
                    provenance(&m, &t, &s.dataset)
                        .lines()
                        .filter(|l| !var.varied_keys().iter().any(|k| l.starts_with(&format!("{k}="))))
                        .map(String::from)
                        .collect()
                })
                .collect();
            assert!(records.windows(2).all(|w| w[0] == w[1]), "{var}");
            let full: Vec<String> = s
                .values
                .iter()
                .map(|v| {
                    let (m, t) = resolve(&s, v).unwrap();
                    provenance(&m, &t, &s.dataset)
                })
                .collect();
            assert!(full.windows(2).all(|w| w[0] != w[1]), "{var} values must differ");
        }
    }

    #[test]
    fn resolve_rejects_bad_values() {
        let s = spec(AblationVariable::AttentionPosition);
        assert!(resolve(&s, "after_block9").is_err());
        assert!(resolve(&spec(AblationVariable::BatchSize), "0").is_err());
        assert!(resolve(&spec(AblationVariable::Loss), "mse:0.5").is_err());
        let (m, t) = resolve(&spec(AblationVariable::Loss), "mse+ce:0").unwrap();
        assert_eq!((m.head.head, t.loss.alpha), (HeadKind::Categorical, 0.0));
        let (m, _) = resolve(&spec(AblationVariable::Backbone), "2d").unwrap();
        assert_eq!((m.backbone, m.attention), (Backbone::R2d, AttentionPosition::None));
    }

    #[test]
    fn sweep_writes_report_and_isolates_failures() {
        let (train_set, val_set) = tiny_data();
        let mut s = spec(AblationVariable::AttentionPosition);
        // An empty bottleneck only breaks the runs that build a non-local block.
        s.model.nonlocal.bottleneck = Some(0);
        s.values = vec!["none".into(), "after_block3".into(), "after_block4".into()];
        let dir = tempfile::tempdir().unwrap();
        let report = run_ablation(&s, &train_set, Some(&val_set), dir.path(), |_, _| {}).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert!(report.rows[0].outcome.is_ok());
        assert!(report.rows[1].outcome.is_err() && report.rows[2].outcome.is_err());
        let tsv = fs::read_to_string(dir.path().join("report.tsv")).unwrap();
        let lines: Vec<&str> = tsv.lines().collect();
        assert_eq!(
            lines[0],
            "attention_position\ttrain_loss_max\ttrain_loss_min\tval_loss_max\tval_loss_min\ttotal_epochs\tstatus"
        );
        assert!(lines.iter().all(|l| l.split('\t').count() == 7));
        assert!(lines[1].ends_with("\t2\tok") && lines[2].contains("error"));
        for f in ["curves.csv", "val_ema.csv", "provenance.txt"] {
            assert!(dir.path().join("01_none").join(f).exists(), "{f}");
        }
        assert!(dir.path().join("02_after_block3/provenance.txt").exists());
        let ema = fs::read_to_string(dir.path().join("val_ema.csv")).unwrap();
        assert!(ema.starts_with("epoch,none,after_block3,after_block4\n1,"));

        let again = tempfile::tempdir().unwrap();
        run_ablation(&s, &train_set, Some(&val_set), again.path(), |_, _| {}).unwrap();
        assert_eq!(tsv, fs::read_to_string(again.path().join("report.tsv")).unwrap());
    }

    #[test]
    fn loss_head_comparison_logs_unweighted_cross_entropy() {
        let (train_set, val_set) = tiny_data();
        let mut s = spec(AblationVariable::Loss);
        s.train.loss.alpha = 0.0;
        let dir = tempfile::tempdir().unwrap();
        let cmp = compare_loss_heads(&train_set, &val_set, &s.model, &s.train, "synth", dir.path()).unwrap();
        assert_eq!(cmp.continuous.val_cross_entropy, 0.0);
        assert!(cmp.categorical.val_cross_entropy > 0.0);
        assert_eq!(cmp.categorical.val_loss, cmp.categorical.val_mse);
        let roc = fs::read_to_string(dir.path().join("roc.csv")).unwrap();
        let curves: std::collections::BTreeSet<&str> =
            roc.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
        assert_eq!(curves.into_iter().collect::<Vec<_>>(), ["alert_pos", "average", "fatigue_pos"]);
        let text = fs::read_to_string(dir.path().join("metrics.txt")).unwrap();
        for key in ["fatigue_pos.f1", "alert_pos.f1", "average.f1"] {
            assert!(text.contains(key));
        }
    }
}

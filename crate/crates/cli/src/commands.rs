//! Subcommand implementations. Each writes only below its `--out` directory.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nl3d::ablation::{compare_loss_heads, run_ablation, AblationSpec, AblationVariable};
use nl3d::data::{kfold_split, read_clip, read_manifest, synth_generate, Clip, Manifest};
use nl3d::heads::is_fatigued;
use nl3d::metrics::MetricsReport;
use nl3d::model::{build_model, format_trace, inflate_into_model, shape_trace, Backbone, ModelGraph};
use nl3d::train::{cross_validate, evaluate, train_with_progress, write_loss_csv, Dataset, EpochRecord};
use nl3d::viz::{export_heatmaps, grad_cam_3d, guided_backprop, write_raw_map};
use nl3d::weights::load_weights;
use nl3d::Error;

use crate::config::Config;
use crate::{Command, Common};

/// A failed command and the exit status it maps to.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Config(String),
    Data(String),
    Numerical(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Config(_) => 2,
            Failure::Data(_) => 3,
            Failure::Numerical(_) => 4,
        }
    }
}

impl std::fmt::Display for Failure {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Failure::Usage(m) => write!(f, "{m}"),
            Failure::Config(m) => write!(f, "config: {m}"),
            Failure::Data(m) => write!(f, "data: {m}"),
            Failure::Numerical(m) => write!(f, "{m}"),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numerical(_) => Failure::Numerical(e.to_string()),
            Error::Contract(_) => Failure::Usage(e.to_string()),
            Error::WeightFile(_) | Error::ClipFormat { .. } | Error::Manifest { .. } | Error::Io { .. } => {
                Failure::Data(e.to_string())
            }
        }
    }
}

type Outcome<T = ()> = Result<T, Failure>;

/// Errors while reading inputs are data errors whatever their kind.
fn data_err(e: Error) -> Failure {
    match e {
        Error::Numerical(_) => Failure::Numerical(e.to_string()),
        other => Failure::Data(other.to_string()),
    }
}

fn load_config(common: &Common) -> Outcome<Config> {
    let mut cfg = match &common.config {
        Some(path) => Config::load(path).map_err(|e| Failure::Config(e.to_string()))?,
        None => Config::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn prepare_out(out: &Path, cfg: &Config) -> Outcome {
    fs::create_dir_all(out).map_err(|e| Failure::Data(format!("creating {}: {e}", out.display())))?;
    write(&out.join("config.txt"), &cfg.render())
}

fn write(path: &Path, text: &str) -> Outcome {
    fs::write(path, text).map_err(|e| Failure::Data(format!("writing {}: {e}", path.display())))
}

fn manifest_path(flag: Option<PathBuf>, cfg: &Config) -> Outcome<PathBuf> {
    flag.or_else(|| cfg.dataset_dir.as_ref().map(|d| d.join("manifest.tsv")))
        .ok_or_else(|| Failure::Usage("no dataset: pass --manifest or set dataset.dir".into()))
}

fn load_dataset(path: &Path, cfg: &Config) -> Outcome<Dataset> {
    let manifest: Manifest = read_manifest(path).map_err(data_err)?;
    let data = Dataset::load(&manifest).map_err(data_err)?;
    if data.is_empty() {
        return Err(Failure::Data(format!("{} lists no clips", path.display())));
    }
    let size = cfg.input_size;
    for s in &data.samples {
        let shape = s.clip.data.shape();
        if shape[2] != size || shape[3] != size {
            return Err(Failure::Data(format!(
                "clip of video {} is {}×{}, config expects {size}×{size}",
                s.clip.video_id, shape[2], shape[3]
            )));
        }
        if s.labels.categorical >= cfg.k {
            return Err(Failure::Data(format!(
                "video {} has class {} but dataset.k is {}",
                s.clip.video_id, s.labels.categorical, cfg.k
            )));
        }
    }
    Ok(data)
}

/// Holds out about `val_fraction` of the videos, stratified by class.
fn split(data: &Dataset, cfg: &Config) -> Outcome<(Dataset, Option<Dataset>)> {
    if cfg.val_fraction == 0.0 {
        return Ok((data.clone(), None));
    }
    let folds = ((1.0 / cfg.val_fraction).round() as usize).max(2);
    let videos = data.videos();
    if videos.len() < folds {
        return Err(Failure::Data(format!(
            "{} videos cannot hold out a 1/{folds} validation share",
            videos.len()
        )));
    }
    let fold = kfold_split(&videos, folds, cfg.seed).map_err(data_err)?.swap_remove(0);
    Ok((data.subset(&fold.train), Some(data.subset(&fold.val))))
}

fn print_epoch(prefix: &str, r: &EpochRecord) {
    let val = match (r.val_loss, r.val_accuracy) {
        (Some(l), Some(a)) => format!("  val_loss {l:.5}  val_acc {a:.3}"),
        _ => String::new(),
    };
    println!(
        "{prefix}epoch {:>3}  train_loss {:.5}  train_acc {:.3}{val}  lr {:e}",
        r.epoch, r.train_loss, r.train_accuracy, r.lr
    );
}

fn load_model(cfg: &Config, weights: &Path) -> Outcome<ModelGraph> {
    let mut model = build_model(&cfg.model_config(), cfg.seed)?;
    model.load_weights(weights).map_err(data_err)?;
    Ok(model)
}

pub fn run(command: Command) -> Outcome {
    match command {
        Command::Synth { common, out } => synth(&load_config(&common)?, &out),
        Command::Train {
            common,
            out,
            manifest,
            weights,
        } => train(&load_config(&common)?, &out, manifest, weights),
        Command::Eval {
            common,
            out,
            weights,
            manifest,
        } => eval(&load_config(&common)?, &out, &weights, manifest),
        Command::Cv { common, out, manifest } => cv(&load_config(&common)?, &out, manifest),
        Command::Ablate {
            common,
            out,
            manifest,
            variable,
            values,
            compare_heads,
        } => ablate(&load_config(&common)?, &out, manifest, variable, values, compare_heads),
        Command::Gradcam {
            common,
            out,
            weights,
            clip,
            class,
            layer,
        } => gradcam(&load_config(&common)?, &out, &weights, &clip, class, &layer),
        Command::Inflate { common, out, weights } => inflate(&load_config(&common)?, &out, &weights),
        Command::Inspect { common } => inspect(&load_config(&common)?),
    }
}

fn synth(cfg: &Config, out: &Path) -> Outcome {
    prepare_out(out, cfg)?;
    let manifest = synth_generate(&cfg.synth_params(), out)?;
    println!(
        "wrote {} clips from {} videos to {}",
        manifest.records.len(),
        manifest.videos().len(),
        out.display()
    );
    Ok(())
}

fn train(cfg: &Config, out: &Path, manifest: Option<PathBuf>, weights: Option<PathBuf>) -> Outcome {
    let data = load_dataset(&manifest_path(manifest, cfg)?, cfg)?;
    let (train_set, val_set) = split(&data, cfg)?;
    prepare_out(out, cfg)?;
    let mut split_tsv = String::from("video_id\tsplit\n");
    for (v, _) in train_set.videos() {
        writeln!(split_tsv, "{v}\ttrain").expect("writing to a String");
    }
    for (v, _) in val_set.iter().flat_map(|d| d.videos()) {
        writeln!(split_tsv, "{v}\tval").expect("writing to a String");
    }
    write(&out.join("split.tsv"), &split_tsv)?;
    let model = match &weights {
        Some(w) => load_model(cfg, w)?,
        None => build_model(&cfg.model_config(), cfg.seed)?,
    };
    println!(
        "training on {} clips, validating on {} clips",
        train_set.len(),
        val_set.as_ref().map_or(0, Dataset::len)
    );
    let trained = train_with_progress(model, &train_set, val_set.as_ref(), &cfg.train_config(), |r| {
        print_epoch("", r)
    })?;
    write_loss_csv(&out.join("curves.csv"), &trained.history)?;
    trained.model.save_weights(&out.join("weights.nlw"))?;
    println!(
        "stopped after {} epochs ({:?}); best epoch {}",
        trained.history.len(),
        trained.stop,
        trained.best_epoch
    );
    Ok(())
}

fn eval(cfg: &Config, out: &Path, weights: &Path, manifest: Option<PathBuf>) -> Outcome {
    let data = load_dataset(&manifest_path(manifest, cfg)?, cfg)?;
    let model = load_model(cfg, weights)?;
    prepare_out(out, cfg)?;
    let loss = cfg.loss();
    let result = evaluate(&model, &data, &loss, cfg.batch_size)?;
    let mut preds_csv = String::from("video_id,clip_index,label,predicted,continuous_label,continuous_predicted,score\n");
    for (((s, p), l), score) in data.samples.iter().zip(&result.predictions).zip(&result.labels).zip(&result.scores) {
        writeln!(
            preds_csv,
            "{},{},{},{},{},{},{}",
            s.clip.video_id, s.clip.clip_index, l.categorical, p.class, l.continuous, p.continuous, score
        )
        .expect("writing to a String");
    }
    write(&out.join("predictions.csv"), &preds_csv)?;
    let binary = |c: usize| usize::from(is_fatigued(c, cfg.k));
    let preds: Vec<usize> = result.predictions.iter().map(|p| binary(p.class)).collect();
    let labels: Vec<usize> = result.labels.iter().map(|l| binary(l.categorical)).collect();
    let scores: Vec<f64> = result.scores.iter().map(|&s| s as f64).collect();
    let mut text = format!(
        "loss\t{}\nmse\t{}\ncross_entropy\t{}\naccuracy\t{}\n",
        result.loss, result.mse, result.cross_entropy, result.accuracy
    );
    match MetricsReport::new(&preds, &labels, &scores) {
        Ok(report) => {
            text.push_str(&report.to_text());
            println!(
                "loss {:.5}  accuracy {:.4}  average F1 {:.4}  average AUC {:.4}",
                result.loss,
                result.accuracy,
                report.average.f1,
                report.roc_average.auc()
            );
        }
        Err(e) => {
            println!("loss {:.5}  accuracy {:.4}  ({e})", result.loss, result.accuracy);
        }
    }
    write(&out.join("metrics.txt"), &text)
}

fn cv(cfg: &Config, out: &Path, manifest: Option<PathBuf>) -> Outcome {
    let data = load_dataset(&manifest_path(manifest, cfg)?, cfg)?;
    prepare_out(out, cfg)?;
    let report = cross_validate(&data, &cfg.model_config(), &cfg.train_config(), cfg.folds, |fold, r| {
        print_epoch(&format!("fold {fold}  "), r)
    })?;
    write(&out.join("cv.csv"), &report.to_csv())?;
    println!("mean minimum validation loss {:.5}", report.mean_min_val_loss());
    Ok(())
}

fn ablate(
    cfg: &Config,
    out: &Path,
    manifest: Option<PathBuf>,
    variable: Option<String>,
    values: Option<String>,
    compare_heads: bool,
) -> Outcome {
    let manifest = manifest_path(manifest, cfg)?;
    let variable: Option<AblationVariable> = match variable {
        Some(v) => Some(v.parse().map_err(Failure::Usage)?),
        None => cfg.ablate_variable,
    };
    let variable = match (variable, compare_heads) {
        (_, true) => None,
        (Some(v), false) => Some(v),
        (None, false) => return Err(Failure::Usage("ablate needs --variable, ablate.variable or --compare-heads".into())),
    };
    let data = load_dataset(&manifest, cfg)?;
    let (train_set, val_set) = split(&data, cfg)?;
    prepare_out(out, cfg)?;
    let dataset = manifest.display().to_string();
    let Some(variable) = variable else {
        let val_set = val_set.ok_or_else(|| Failure::Usage("comparing heads needs train.val_fraction > 0".into()))?;
        let cmp = compare_loss_heads(&train_set, &val_set, &cfg.model_config(), &cfg.train_config(), &dataset, out)?;
        print!("{}", cmp.summary_tsv());
        println!(
            "average F1 {:.4}  average AUC {:.4}",
            cmp.metrics.average.f1,
            cmp.metrics.roc_average.auc()
        );
        return Ok(());
    };
    let values: Vec<String> = match values {
        Some(v) => v.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect(),
        None if !cfg.ablate_values.is_empty() => cfg.ablate_values.clone(),
        None => variable.default_values().iter().map(|s| s.to_string()).collect(),
    };
    let spec = AblationSpec {
        variable,
        values,
        model: cfg.model_config(),
        train: cfg.train_config(),
        dataset,
        seed: cfg.seed,
    };
    let report = run_ablation(&spec, &train_set, val_set.as_ref(), out, |value, outcome| match outcome {
        Ok(s) => println!("{variable}={value}: {} epochs, min train loss {:.5}", s.epochs, s.train_loss_min),
        Err(e) => eprintln!("{variable}={value}: run failed: {e}"),
    })?;
    print!("{}", report.to_tsv());
    Ok(())
}

/// Video id and clip index from a `{video}_{index}.vfc` file name.
fn clip_identity(path: &Path) -> (String, usize) {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    match stem.rsplit_once('_').and_then(|(v, i)| Some((v, i.parse().ok()?))) {
        Some((v, i)) => (v.to_string(), i),
        None => (stem, 0),
    }
}

fn gradcam(cfg: &Config, out: &Path, weights: &Path, clip_path: &Path, class: usize, layer: &str) -> Outcome {
    if class >= cfg.k {
        return Err(Failure::Usage(format!("--class {class} is outside 0..{}", cfg.k)));
    }
    let model = load_model(cfg, weights)?;
    let data = read_clip(clip_path).map_err(data_err)?;
    let (video_id, index) = clip_identity(clip_path);
    let clip = Clip::new(data, video_id, index).map_err(data_err)?;
    prepare_out(out, cfg)?;
    let mut map = grad_cam_3d(&model, &clip.data, class, layer)?;
    map.upsample_to(&clip.data)?;
    let files = export_heatmaps(&map, &clip, &out.join("heatmaps"))?;
    write_raw_map(&map, &out.join("cam_raw.vfc"))?;
    let guided = guided_backprop(&model, &clip.data, class)?;
    nl3d::data::write_clip(&out.join("guided.vfc"), &guided)?;
    println!(
        "class {class} at {layer}: map {:?}, {} heatmap files",
        map.values.shape(),
        files.len()
    );
    Ok(())
}

fn inflate(cfg: &Config, out: &Path, weights: &Path) -> Outcome {
    let tensors = load_weights(weights).map_err(data_err)?;
    let mut model_cfg = cfg.model_config();
    model_cfg.backbone = Backbone::R3d;
    let mut model = build_model(&model_cfg, cfg.seed)?;
    let report = inflate_into_model(&mut model, tensors, cfg.inflation_mode).map_err(data_err)?;
    prepare_out(out, cfg)?;
    model.save_weights(&out.join("weights.nlw"))?;
    let mut text = String::new();
    for (kind, names) in [
        ("inflated", &report.inflated),
        ("copied", &report.copied),
        ("untouched", &report.untouched),
    ] {
        for n in names {
            writeln!(text, "{kind}\t{n}").expect("writing to a String");
        }
    }
    write(&out.join("inflation.tsv"), &text)?;
    println!(
        "inflated {} kernels, copied {} tensors, {} left at initialization",
        report.inflated.len(),
        report.copied.len(),
        report.untouched.len()
    );
    Ok(())
}

fn inspect(cfg: &Config) -> Outcome {
    let model_cfg = cfg.model_config();
    let model = build_model(&model_cfg, cfg.seed)?;
    let size = model_cfg.input_size;
    let trace = shape_trace(&model, [model_cfg.clip_len, 3, size, size])?;
    print!("{}", format_trace(&trace));
    let entry = |name: &str| trace.iter().find(|(n, _)| n == name).map(|(_, s)| s.clone());
    if let Some(stage) = model_cfg.attention.stage() {
        if let Some(s) = entry(&format!("stage{stage}")) {
            println!("attention input (T×H×W×C): {}×{}×{}×{}", s[1], s[2], s[3], s[0]);
        }
    }
    let mut groups: BTreeMap<String, usize> = BTreeMap::new();
    for (_, p) in model.store.iter().filter(|(_, p)| p.trainable) {
        let group = p.name.split('.').next().unwrap_or("").to_string();
        *groups.entry(group).or_default() += p.value.numel();
    }
    for (g, n) in &groups {
        println!("params {g:<12} {n}");
    }
    println!("params total        {}", model.store.trainable_count());
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_identity_from_file_name() {
        assert_eq!(clip_identity(Path::new("clips/v0003_002.vfc")), ("v0003".into(), 2));
        assert_eq!(clip_identity(Path::new("face.vfc")), ("face".into(), 0));
        assert_eq!(clip_identity(Path::new("a_b.vfc")), ("a_b".into(), 0));
    }

    #[test]
    fn library_errors_map_to_exit_codes() {
        assert_eq!(Failure::from(Error::Numerical("nan".into())).code(), 4);
        assert_eq!(Failure::from(Error::Contract("x".into())).code(), 1);
        assert_eq!(data_err(Error::Contract("x".into())).code(), 3);
    }
}

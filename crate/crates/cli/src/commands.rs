use std::path::{Path, PathBuf};

use semprompt::archive::stored_precision;
use semprompt::cam::{export_cams, CamReport};
use semprompt::data::{apply_partial_mask, load_dataset, DatasetFormat, DatasetIndex, LabelVector, LoadOptions, MaskManifest, MaskMode, MaskSpec};
use semprompt::imaging::open_rgb;
use semprompt::metrics::{aggregate_reports, evaluate_scores, BinarizePolicy, MetricsReport, RunMeta, Summary};
use semprompt::trainer::{evaluate_features, Checkpoint, FeatureSet, TrainHooks, Trainer};
use semprompt::{Error, Model, Precision, Result, Scalar};
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::manifest::RunManifest;

pub const METRICS_JSON: &str = "metrics.json";
pub const METRICS_CSV: &str = "metrics.csv";
pub const RUN_META: &str = "run_meta.json";

fn write(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn manifest_beside(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

pub struct MaskArgs {
    pub dataset: PathBuf,
    pub format: DatasetFormat,
    pub proportion: f64,
    pub seed: u64,
    pub mode: MaskMode,
    pub out: PathBuf,
}

pub fn mask(args: &MaskArgs) -> Result<()> {
    let spec = MaskSpec::new(args.proportion, args.seed, args.mode)?;
    RunManifest::new("mask", None, None, &args.out).write(&manifest_beside(&args.out))?;
    let full = load_dataset(&args.dataset, args.format, &LoadOptions::default())?;
    let masked = apply_partial_mask(&full, &spec)?;
    let manifest = MaskManifest::from_masked(&spec, &masked);
    manifest.save(&args.out)?;
    println!(
        "{} images x {} categories: {} known labels ({:.4} of all entries)",
        masked.len(),
        masked.num_categories(),
        masked.known_count(),
        masked.known_fraction()
    );
    Ok(())
}

fn masked_train_set(cfg: &RunConfig, base: &Path, train: &DatasetIndex) -> Result<(DatasetIndex, f64)> {
    match (&cfg.data.mask, &cfg.data.mask_file) {
        (Some(spec), _) => Ok((apply_partial_mask(train, spec)?, spec.proportion)),
        (None, Some(file)) => {
            let m = MaskManifest::load(&base.join(file))?;
            Ok((m.apply_to(train)?, m.proportion))
        }
        (None, None) => Ok((train.clone(), train.known_fraction())),
    }
}

fn dataset_id(path: &Path) -> String {
    path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default()
}

fn labels_of(ds: &DatasetIndex) -> Vec<LabelVector> {
    ds.labels().cloned().collect()
}

pub fn train(config: &Path, out: &Path, precision: Precision) -> Result<()> {
    let (cfg, base) = RunConfig::load(config)?;
    create_dir(out)?;
    RunManifest::new("train", Some(config), Some(cfg.experiment().sha256()), out).write(&out.join("manifest.json"))?;
    match precision {
        Precision::F32 => train_with::<f32>(&cfg, &base, out),
        Precision::F64 => train_with::<f64>(&cfg, &base, out),
    }
}

fn train_with<T: Scalar>(cfg: &RunConfig, base: &Path, out: &Path) -> Result<()> {
    let full = cfg.data.train.load(base)?;
    let (masked, proportion) = masked_train_set(cfg, base, &full)?;
    let mut trainer = Trainer::<T>::new(cfg.experiment(), full.category_names())?;
    log::info!("trainable parameters:\n{}", trainer.model.parameter_breakdown());
    let feats = FeatureSet::extract(&trainer.model, &full, cfg.experiment().flips_enabled())?;

    // validation on the held-out set if given, else on the train images with their original labels
    let (val_ds, val_source) = match &cfg.data.val {
        Some(v) => (v.load(base)?, &v.path),
        None => (full.clone(), &cfg.data.train.path),
    };
    val_ds.check_categories(full.category_names())?;
    let val_labels = labels_of(&val_ds);
    let val_feats = match &cfg.data.val {
        Some(_) => Some(FeatureSet::extract(&trainer.model, &val_ds, false)?),
        None => None,
    };
    let val_feats_ref = val_feats.as_ref().unwrap_or(&feats);
    let hooks = TrainHooks {
        out_dir: Some(out.to_path_buf()),
        validation: val_ds.is_fully_annotated().then_some((val_feats_ref, val_labels.as_slice())),
        policy: cfg.eval.policy,
    };
    let log = trainer.train(&feats, &labels_of(&masked), &hooks)?;
    if let Some(last) = log.last() {
        println!("final epoch {}: loss {:.6}", last.epoch, last.loss);
    }
    let meta = RunMeta {
        proportion,
        seed: cfg.train.seed,
        epoch: trainer.epochs_done,
        dataset_id: dataset_id(val_source),
    };
    write(&out.join(RUN_META), &serde_json::to_string_pretty(&meta)?)?;
    if val_ds.is_fully_annotated() {
        let report = evaluate_features(&trainer.model, val_feats_ref, &val_labels, cfg.eval.policy, meta)?;
        println!("mAP {:.4}  OF1 {:.4}  CF1 {:.4}", report.map, report.of1, report.cf1);
        write_reports(out, &[report])?;
    }
    Ok(())
}

fn write_reports(out: &Path, reports: &[MetricsReport]) -> Result<()> {
    write(&out.join(METRICS_JSON), &serde_json::to_string_pretty(reports)?)?;
    write(&out.join(METRICS_CSV), &MetricsReport::to_csv(reports))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PolicyChoice {
    TopK,
    Threshold,
    All,
}

pub struct EvalArgs {
    pub checkpoint: Option<PathBuf>,
    pub scores_file: Option<PathBuf>,
    pub dataset: PathBuf,
    pub format: DatasetFormat,
    pub policy: PolicyChoice,
    pub topk: usize,
    pub threshold: Option<f64>,
    pub out: PathBuf,
}

/// Externally produced scores, rows aligned with the dataset's samples.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoresFile {
    pub categories: Vec<String>,
    pub scores: Vec<Vec<f64>>,
}

impl EvalArgs {
    fn policies(&self) -> Vec<BinarizePolicy> {
        let top = BinarizePolicy::TopK { k: self.topk };
        let thr = BinarizePolicy::Threshold { t: self.threshold };
        match self.policy {
            PolicyChoice::TopK => vec![top],
            PolicyChoice::Threshold => vec![thr],
            PolicyChoice::All => vec![top, thr],
        }
    }
}

fn read_meta(checkpoint: &Path) -> Option<RunMeta> {
    let path = checkpoint.parent()?.join(RUN_META);
    serde_json::from_str(&std::fs::read_to_string(path).ok()?).ok()
}

pub fn eval(args: &EvalArgs) -> Result<()> {
    create_dir(&args.out)?;
    RunManifest::new("eval", None, None, &args.out).write(&args.out.join("manifest.json"))?;
    let dataset = load_dataset(&args.dataset, args.format, &LoadOptions::default())?;
    if !dataset.is_fully_annotated() {
        return Err(Error::InvalidLabels("evaluation dataset must be fully annotated".into()));
    }
    let labels = labels_of(&dataset);
    let (scores, mut meta) = match (&args.scores_file, &args.checkpoint) {
        (Some(file), None) => {
            let text = std::fs::read_to_string(file).map_err(|e| Error::io(file, e))?;
            let sf: ScoresFile = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", file.display())))?;
            dataset.check_categories(&sf.categories)?;
            let (n, c) = (sf.scores.len(), sf.categories.len());
            if sf.scores.iter().any(|r| r.len() != c) {
                return Err(Error::InvalidArgument("every score row needs one value per category".into()));
            }
            let flat: Vec<f64> = sf.scores.into_iter().flatten().collect();
            let m = ndarray::Array2::from_shape_vec((n, c), flat).map_err(|e| Error::InvalidArgument(e.to_string()))?;
            (m, RunMeta::default())
        }
        (None, Some(ckpt)) => {
            let m = match checkpoint_precision(ckpt)? {
                Precision::F32 => score_with::<f32>(ckpt, &dataset)?,
                Precision::F64 => score_with::<f64>(ckpt, &dataset)?,
            };
            (m, read_meta(ckpt).unwrap_or_default())
        }
        _ => return Err(Error::InvalidArgument("pass exactly one of --checkpoint or --scores-file".into())),
    };
    meta.dataset_id = dataset_id(&args.dataset);
    let reports = args
        .policies()
        .into_iter()
        .map(|p| evaluate_scores(scores.view(), &labels, p, meta.clone()))
        .collect::<Result<Vec<_>>>()?;
    for r in &reports {
        println!("{}: mAP {:.4}  OF1 {:.4}  CF1 {:.4}", r.policy.label(), r.map, r.of1, r.cf1);
    }
    write_reports(&args.out, &reports)
}

fn checkpoint_precision(path: &Path) -> Result<Precision> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(stored_precision(&bytes)?.unwrap_or(Precision::F32))
}

fn load_model<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Ok(Checkpoint::<T>::load(path)?.into_model()?.0)
}

fn score_with<T: Scalar>(ckpt: &Path, dataset: &DatasetIndex) -> Result<ndarray::Array2<f64>> {
    let model = load_model::<T>(ckpt)?;
    dataset.check_categories(model.category_names())?;
    let feats = FeatureSet::extract(&model, dataset, false)?;
    Ok(model.score_batch(&feats.positions)?.mapv(|v| v.to_f64().unwrap_or(f64::NAN)))
}

pub fn cam(checkpoint: &Path, image: &Path, topk: usize, out: &Path) -> Result<CamReport> {
    create_dir(out)?;
    RunManifest::new("cam", None, None, out).write(&out.join("manifest.json"))?;
    match checkpoint_precision(checkpoint)? {
        Precision::F32 => cam_with::<f32>(checkpoint, image, topk, out),
        Precision::F64 => cam_with::<f64>(checkpoint, image, topk, out),
    }
}

fn cam_with<T: Scalar>(checkpoint: &Path, image: &Path, topk: usize, out: &Path) -> Result<CamReport> {
    let model = load_model::<T>(checkpoint)?;
    let rgb = open_rgb(image)?;
    let preprocess = model.encoders.visual.preprocess();
    let input_rgb = preprocess.resize_rgb(&rgb);
    let positions = model.positions(&preprocess.apply(&rgb))?;
    let inference = model.infer(positions.view())?;
    let report = export_cams(
        image,
        &input_rgb,
        inference.scores.as_slice().expect("contiguous scores"),
        inference.attention.view(),
        model.encoders.visual.output_extent(),
        model.category_names(),
        topk,
        out,
    )?;
    for m in &report.maps {
        println!("#{} {} {:.4} -> {}", m.rank, m.category, m.score, m.file.display());
    }
    Ok(report)
}

fn collect_metrics(dir: &Path, found: &mut Vec<PathBuf>) -> Result<()> {
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for p in paths {
        if p.is_dir() {
            collect_metrics(&p, found)?;
        } else if p.file_name().is_some_and(|n| n == METRICS_JSON) {
            found.push(p);
        }
    }
    Ok(())
}

/// Aggregates the first report of every `metrics.json` under `runs`.
pub fn report(runs: &Path, out: Option<&Path>) -> Result<Summary> {
    let out_dir = out.unwrap_or(runs);
    create_dir(out_dir)?;
    RunManifest::new("report", None, None, out_dir).write(&out_dir.join("report.manifest.json"))?;
    let mut files = Vec::new();
    collect_metrics(runs, &mut files)?;
    let mut reports = Vec::new();
    for f in &files {
        let text = std::fs::read_to_string(f).map_err(|e| Error::io(f, e))?;
        let mut rs: Vec<MetricsReport> = serde_json::from_str(&text)?;
        if !rs.is_empty() {
            reports.push(rs.swap_remove(0));
        }
    }
    if reports.is_empty() {
        return Err(Error::InvalidArgument(format!("no {METRICS_JSON} found under {}", runs.display())));
    }
    let summary = aggregate_reports(&reports)?;
    let md = summary.to_markdown();
    write(&out_dir.join("report.md"), &md)?;
    write(&out_dir.join("report.csv"), &summary.to_csv())?;
    print!("{md}");
    Ok(summary)
}

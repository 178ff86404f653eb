//! Metrics, experiment runner, CSV emission, and visual exports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::camops::PseudoMask;
use crate::dataio::{
    chw_from_hwc, generate_shapes_dataset, load_dataset_dir, Sample, ShapesConfig,
    ALL_SHAPE_KINDS,
};
use crate::error::{IsimError, Result};
use crate::model::{infer_features, DecoderKind, ModelParams};
use crate::numcore::kernels::sigmoid;
use crate::numcore::Tensor;
use crate::pipeline::{
    self, generate_pseudo_label_for_sample, RegenMode, TrainConfig, TrainState,
};

// ---------------------------------------------------------------------------
// mIoU
// ---------------------------------------------------------------------------

/// Global confusion matrix over a split: entry [gt * n + pred] counts
/// pixels. Accumulation over images is a plain sum, so per-image matrices
/// merge exactly.
pub fn confusion_matrix(preds: &[&[u8]], gts: &[&[u8]], num_labels: usize) -> Result<Vec<u64>> {
    if preds.len() != gts.len() {
        return Err(IsimError::shape(
            "mean_iou",
            format!("{} predictions for {} ground truths", preds.len(), gts.len()),
        ));
    }
    let mut m = vec![0u64; num_labels * num_labels];
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if p.len() != g.len() {
            return Err(IsimError::shape(
                "mean_iou",
                format!("image {i}: extent mismatch {} vs {}", p.len(), g.len()),
            ));
        }
        for (&pv, &gv) in p.iter().zip(g.iter()) {
            if pv as usize >= num_labels || gv as usize >= num_labels {
                return Err(IsimError::Config(format!(
                    "label out of range: pred {pv}, gt {gv}, num_labels {num_labels}"
                )));
            }
            m[gv as usize * num_labels + pv as usize] += 1;
        }
    }
    Ok(m)
}

/// Per-class IoU from a confusion matrix; classes whose union is empty get
/// NaN and are excluded from the mean.
pub fn miou_from_confusion(m: &[u64], num_labels: usize) -> (f64, Vec<f64>) {
    let mut per_class = vec![f64::NAN; num_labels];
    let mut sum = 0.0;
    let mut counted = 0usize;
    for c in 0..num_labels {
        let inter = m[c * num_labels + c];
        let row: u64 = (0..num_labels).map(|p| m[c * num_labels + p]).sum();
        let col: u64 = (0..num_labels).map(|g| m[g * num_labels + c]).sum();
        let union = row + col - inter;
        if union > 0 {
            per_class[c] = inter as f64 / union as f64;
            sum += per_class[c];
            counted += 1;
        }
    }
    let miou = if counted > 0 { sum / counted as f64 } else { f64::NAN };
    (miou, per_class)
}

/// VOC-style mIoU: background is label 0 and counts as a class.
pub fn mean_iou(preds: &[&[u8]], gts: &[&[u8]], num_labels: usize) -> Result<(f64, Vec<f64>)> {
    let m = confusion_matrix(preds, gts, num_labels)?;
    Ok(miou_from_confusion(&m, num_labels))
}

// ---------------------------------------------------------------------------
// classification accuracy
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AccuracyMode {
    /// Mean over samples x classes of [(sigma(logit) > t) == target].
    PerClass,
    /// Fraction of samples whose entire thresholded vector matches.
    Subset,
}

impl std::fmt::Display for AccuracyMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AccuracyMode::PerClass => "per_class",
            AccuracyMode::Subset => "subset",
        })
    }
}

impl std::str::FromStr for AccuracyMode {
    type Err = IsimError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per_class" => Ok(AccuracyMode::PerClass),
            "subset" => Ok(AccuracyMode::Subset),
            other => Err(IsimError::Parse {
                what: "accuracy mode".into(),
                detail: format!("unknown mode {other:?}"),
            }),
        }
    }
}

pub fn classification_accuracy(
    logits: &Tensor,
    targets: &[f64],
    threshold: f64,
    mode: AccuracyMode,
) -> Result<f64> {
    if !(0.0 < threshold && threshold < 1.0) {
        return Err(IsimError::Config(format!(
            "accuracy threshold must be in (0,1), got {threshold}"
        )));
    }
    let (n, c) = logits.dims2("classification_accuracy")?;
    if targets.len() != n * c {
        return Err(IsimError::shape(
            "classification_accuracy",
            format!("{} targets for {n}x{c} logits", targets.len()),
        ));
    }
    let d = logits.data();
    match mode {
        AccuracyMode::PerClass => {
            let hits = d
                .iter()
                .zip(targets)
                .filter(|&(&l, &t)| (sigmoid(l) > threshold) == (t > 0.0))
                .count();
            Ok(hits as f64 / (n * c) as f64)
        }
        AccuracyMode::Subset => {
            let mut hits = 0usize;
            for i in 0..n {
                let all = (0..c).all(|j| {
                    (sigmoid(d[i * c + j]) > threshold) == (targets[i * c + j] > 0.0)
                });
                if all {
                    hits += 1;
                }
            }
            Ok(hits as f64 / n as f64)
        }
    }
}

/// Classifier logits for a list of samples, one inference pass per image
/// so mixed extents are fine.
pub fn predict_logits(model: &ModelParams, samples: &[Sample]) -> Result<Tensor> {
    let c = model.num_classes;
    let mut out = Vec::with_capacity(samples.len() * c);
    for s in samples {
        let chw = chw_from_hwc(&s.image)?;
        let &[_, h, w] = chw.shape() else { unreachable!() };
        let batch = Tensor::new(vec![1, 3, h, w], chw.into_data())?;
        let (_, logits) = infer_features(model, &batch)?;
        out.extend_from_slice(logits.data());
    }
    Tensor::new(vec![samples.len(), c], out)
}

// ---------------------------------------------------------------------------
// run configuration file: flat "key = value" text
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub run_id: String,
    /// When unset, the synthetic generator supplies both splits.
    pub dataset_dir: Option<PathBuf>,
    pub eval_dir: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub train_images: usize,
    pub eval_images: usize,
    pub image_size: usize,
    pub max_shapes: usize,
    pub noise_level: f64,
    pub data_seed: u64,
    pub export_masks: bool,
    /// When off (default) the CSV seconds column is written as 0.000 so
    /// reruns are byte-identical.
    pub record_timing: bool,
    pub accuracy_mode: AccuracyMode,
    pub accuracy_threshold: f64,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            run_id: "run".into(),
            dataset_dir: None,
            eval_dir: None,
            out_dir: PathBuf::from("out"),
            train_images: 400,
            eval_images: 100,
            image_size: 64,
            max_shapes: 2,
            noise_level: 0.05,
            data_seed: 7,
            export_masks: false,
            record_timing: false,
            accuracy_mode: AccuracyMode::PerClass,
            accuracy_threshold: 0.5,
            train: TrainConfig::default(),
        }
    }
}

fn join_list<T: std::fmt::Display>(xs: &[T]) -> String {
    xs.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn join_floats(xs: &[f64]) -> String {
    xs.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",")
}

impl RunConfig {
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("run_id", self.run_id.clone());
        kv(
            "dataset_dir",
            self.dataset_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv(
            "eval_dir",
            self.eval_dir
                .as_ref()
                .map(|p| p.display().to_string())
                .unwrap_or_default(),
        );
        kv("out_dir", self.out_dir.display().to_string());
        kv("train_images", self.train_images.to_string());
        kv("eval_images", self.eval_images.to_string());
        kv("image_size", self.image_size.to_string());
        kv("max_shapes", self.max_shapes.to_string());
        kv("noise_level", format!("{:?}", self.noise_level));
        kv("data_seed", self.data_seed.to_string());
        kv("export_masks", self.export_masks.to_string());
        kv("record_timing", self.record_timing.to_string());
        kv("accuracy_mode", self.accuracy_mode.to_string());
        kv("accuracy_threshold", format!("{:?}", self.accuracy_threshold));
        kv("total_epochs", t.total_epochs.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        match t.regen {
            RegenMode::Fixed(f) => {
                kv("regen_mode", "fixed".into());
                kv("regen_frequency", f.to_string());
            }
            RegenMode::UntilConvergence { patience, delta } => {
                kv("regen_mode", "until_convergence".into());
                kv("regen_patience", patience.to_string());
                kv("regen_delta", format!("{delta:?}"));
            }
        }
        kv("tau", format!("{:?}", t.tau));
        kv("scales", join_floats(&t.scales));
        kv("use_flip", t.use_flip.to_string());
        kv("renormalize_cams", t.renormalize_cams.to_string());
        kv("crop", t.crop.to_string());
        kv("min_side", t.resize_bounds.0.to_string());
        kv("max_side", t.resize_bounds.1.to_string());
        kv("batch_size", t.batch_size.to_string());
        kv("lr_encoder", format!("{:?}", t.lrs.encoder));
        kv("lr_decoder", format!("{:?}", t.lrs.decoder));
        kv("lr_classifier", format!("{:?}", t.lrs.classifier));
        kv("momentum", format!("{:?}", t.momentum));
        kv("power", format!("{:?}", t.power));
        kv("lambda_seg", format!("{:?}", t.lambda_seg));
        kv("normalize_by_gated", t.normalize_by_gated.to_string());
        kv("literal_gate", t.literal_gate.to_string());
        kv("encoder_widths", join_list(&t.encoder.widths));
        kv("encoder_strides", join_list(&t.encoder.strides));
        kv("encoder_dilated", t.encoder.last_block_dilated.to_string());
        kv("decoder_kind", t.decoder.kind.to_string());
        kv("decoder_skips", t.decoder.use_skip_connections.to_string());
        kv("num_classes", t.num_classes.to_string());
        kv("seed", t.seed.to_string());
        kv("crf_iterations", t.crf.iterations.to_string());
        kv("crf_spatial_weight", format!("{:?}", t.crf.spatial_weight));
        kv("crf_spatial_sigma", format!("{:?}", t.crf.spatial_sigma));
        kv("crf_bilateral_weight", format!("{:?}", t.crf.bilateral_weight));
        kv("crf_bilateral_sigma_xy", format!("{:?}", t.crf.bilateral_sigma_xy));
        kv("crf_bilateral_sigma_rgb", format!("{:?}", t.crf.bilateral_sigma_rgb));
        s
    }

    pub fn from_text(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut regen_mode: Option<String> = None;
        let mut regen_frequency = 10usize;
        let mut regen_patience = 3usize;
        let mut regen_delta = 1e-3f64;
        let perr = |key: &str, e: &dyn std::fmt::Display| IsimError::Parse {
            what: "run config".into(),
            detail: format!("key {key}: {e}"),
        };
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once(" = ").map(|(k, v)| (k, v)).or_else(|| {
                line.split_once('=').map(|(k, v)| (k.trim(), v.trim()))
            }).ok_or_else(|| IsimError::Parse {
                what: "run config".into(),
                detail: format!("line {}: expected key = value", lineno + 1),
            })?;
            let t = &mut cfg.train;
            macro_rules! parse {
                () => {
                    value.parse().map_err(|e| perr(key, &e))?
                };
            }
            match key {
                "run_id" => cfg.run_id = value.to_string(),
                "dataset_dir" => {
                    cfg.dataset_dir = (!value.is_empty()).then(|| PathBuf::from(value))
                }
                "eval_dir" => cfg.eval_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
                "out_dir" => cfg.out_dir = PathBuf::from(value),
                "train_images" => cfg.train_images = parse!(),
                "eval_images" => cfg.eval_images = parse!(),
                "image_size" => cfg.image_size = parse!(),
                "max_shapes" => cfg.max_shapes = parse!(),
                "noise_level" => cfg.noise_level = parse!(),
                "data_seed" => cfg.data_seed = parse!(),
                "export_masks" => cfg.export_masks = parse!(),
                "record_timing" => cfg.record_timing = parse!(),
                "accuracy_mode" => cfg.accuracy_mode = parse!(),
                "accuracy_threshold" => cfg.accuracy_threshold = parse!(),
                "total_epochs" => t.total_epochs = parse!(),
                "warmup_epochs" => t.warmup_epochs = parse!(),
                "regen_mode" => regen_mode = Some(value.to_string()),
                "regen_frequency" => regen_frequency = parse!(),
                "regen_patience" => regen_patience = parse!(),
                "regen_delta" => regen_delta = parse!(),
                "tau" => t.tau = parse!(),
                "scales" => {
                    t.scales = value
                        .split(',')
                        .map(|v| v.trim().parse::<f64>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(key, &e))?
                }
                "use_flip" => t.use_flip = parse!(),
                "renormalize_cams" => t.renormalize_cams = parse!(),
                "crop" => t.crop = parse!(),
                "min_side" => t.resize_bounds.0 = parse!(),
                "max_side" => t.resize_bounds.1 = parse!(),
                "batch_size" => t.batch_size = parse!(),
                "lr_encoder" => t.lrs.encoder = parse!(),
                "lr_decoder" => t.lrs.decoder = parse!(),
                "lr_classifier" => t.lrs.classifier = parse!(),
                "momentum" => t.momentum = parse!(),
                "power" => t.power = parse!(),
                "lambda_seg" => t.lambda_seg = parse!(),
                "normalize_by_gated" => t.normalize_by_gated = parse!(),
                "literal_gate" => t.literal_gate = parse!(),
                "encoder_widths" => {
                    t.encoder.widths = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(key, &e))?
                }
                "encoder_strides" => {
                    t.encoder.strides = value
                        .split(',')
                        .map(|v| v.trim().parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| perr(key, &e))?
                }
                "encoder_dilated" => t.encoder.last_block_dilated = parse!(),
                "decoder_kind" => t.decoder.kind = value.parse::<DecoderKind>()?,
                "decoder_skips" => t.decoder.use_skip_connections = parse!(),
                "num_classes" => t.num_classes = parse!(),
                "seed" => t.seed = parse!(),
                "crf_iterations" => t.crf.iterations = parse!(),
                "crf_spatial_weight" => t.crf.spatial_weight = parse!(),
                "crf_spatial_sigma" => t.crf.spatial_sigma = parse!(),
                "crf_bilateral_weight" => t.crf.bilateral_weight = parse!(),
                "crf_bilateral_sigma_xy" => t.crf.bilateral_sigma_xy = parse!(),
                "crf_bilateral_sigma_rgb" => t.crf.bilateral_sigma_rgb = parse!(),
                other => {
                    return Err(IsimError::Parse {
                        what: "run config".into(),
                        detail: format!("unknown key {other:?}"),
                    })
                }
            }
        }
        match regen_mode.as_deref() {
            None | Some("fixed") => cfg.train.regen = RegenMode::Fixed(regen_frequency),
            Some("until_convergence") => {
                cfg.train.regen = RegenMode::UntilConvergence {
                    patience: regen_patience,
                    delta: regen_delta,
                }
            }
            Some(other) => {
                return Err(IsimError::Parse {
                    what: "run config".into(),
                    detail: format!("unknown regen_mode {other:?}"),
                })
            }
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }
}

// ---------------------------------------------------------------------------
// metrics CSV
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRecord {
    pub run_id: String,
    pub epoch: usize,
    pub split: String,
    pub miou: f64,
    pub acc: f64,
    pub seconds: f64,
    pub per_class_iou: Vec<f64>,
}

pub fn csv_header(num_labels: usize) -> String {
    let mut s = String::from("run_id,epoch,split,miou,acc,seconds");
    for c in 0..num_labels {
        let _ = write!(s, ",iou_{c}");
    }
    s.push('\n');
    s
}

pub fn csv_row(r: &MetricsRecord) -> String {
    let mut s = format!(
        "{},{},{},{:?},{:?},{:.3}",
        r.run_id, r.epoch, r.split, r.miou, r.acc, r.seconds
    );
    for v in &r.per_class_iou {
        let _ = write!(s, ",{v:?}");
    }
    s.push('\n');
    s
}

pub fn parse_csv(text: &str) -> Result<Vec<MetricsRecord>> {
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 || line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() < 6 {
            return Err(IsimError::Parse {
                what: "metrics csv".into(),
                detail: format!("line {}: expected >= 6 columns", i + 1),
            });
        }
        let f = |s: &str| -> Result<f64> {
            s.parse().map_err(|e| IsimError::Parse {
                what: "metrics csv".into(),
                detail: format!("line {}: {e}", i + 1),
            })
        };
        rows.push(MetricsRecord {
            run_id: parts[0].to_string(),
            epoch: parts[1].parse().map_err(|e| IsimError::Parse {
                what: "metrics csv".into(),
                detail: format!("line {}: {e}", i + 1),
            })?,
            split: parts[2].to_string(),
            miou: f(parts[3])?,
            acc: f(parts[4])?,
            seconds: f(parts[5])?,
            per_class_iou: parts[6..].iter().map(|s| f(s)).collect::<Result<_>>()?,
        });
    }
    Ok(rows)
}

// ---------------------------------------------------------------------------
// mask export
// ---------------------------------------------------------------------------

/// Background black, then saturated class colors.
pub fn default_palette(num_labels: usize) -> Vec<[u8; 3]> {
    let base: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 60, 60],
        [60, 200, 70],
        [70, 80, 230],
        [230, 200, 40],
        [200, 60, 200],
        [50, 200, 200],
        [240, 140, 40],
    ];
    (0..num_labels)
        .map(|i| {
            if i < base.len() {
                base[i]
            } else {
                let v = (37 * i % 256) as u8;
                [v, v.wrapping_add(85), v.wrapping_add(170)]
            }
        })
        .collect()
}

/// One palette-mapped PNG per mask, named `<id>_e<epoch>.png` so a
/// fixed-epoch progression tiles naturally.
pub fn export_masks(
    masks: &BTreeMap<String, PseudoMask>,
    palette: &[[u8; 3]],
    out_dir: &Path,
    epoch: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for (id, m) in masks {
        let (h, w) = m.extent();
        let mut img = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let l = m.labels()[y * w + x] as usize;
                if l >= palette.len() {
                    return Err(IsimError::Config(format!(
                        "label {l} outside palette of {}",
                        palette.len()
                    )));
                }
                img.put_pixel(x as u32, y as u32, image::Rgb(palette[l]));
            }
        }
        let path = out_dir.join(format!("{id}_e{epoch}.png"));
        img.save(&path)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// experiment runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalAblation {
    pub crf_miou: f64,
    pub threshold_miou: f64,
    /// Fraction of eval images where the CRF-refined mask scores at least
    /// as well as the threshold-only mask.
    pub crf_at_least_threshold: f64,
}

#[derive(Debug, Clone)]
pub struct Summary {
    pub cam_baseline_miou: Option<f64>,
    pub final_pseudo_miou: Option<f64>,
    pub eval: Option<EvalAblation>,
    pub csv_path: PathBuf,
    pub checkpoint_path: PathBuf,
}

impl Summary {
    pub fn table(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(v) => format!("{:6.2}", v * 100.0),
            None => "   n/a".into(),
        };
        let mut s = String::new();
        let _ = writeln!(s, "metric                                   mIoU");
        let _ = writeln!(s, "----------------------------------------------");
        let _ = writeln!(s, "CAM baseline (threshold-only, warmup)  {}", fmt(self.cam_baseline_miou));
        let _ = writeln!(s, "final pseudo-masks (train split)       {}", fmt(self.final_pseudo_miou));
        if let Some(e) = &self.eval {
            let _ = writeln!(s, "eval threshold-only                    {}", fmt(Some(e.threshold_miou)));
            let _ = writeln!(s, "eval CRF-refined                       {}", fmt(Some(e.crf_miou)));
            let _ = writeln!(
                s,
                "eval images where CRF >= threshold     {:5.1}%",
                e.crf_at_least_threshold * 100.0
            );
        }
        s
    }
}

pub fn make_splits(cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let train = match &cfg.dataset_dir {
        Some(dir) => load_dataset_dir(dir)?,
        None => generate_shapes_dataset(&ShapesConfig {
            num_images: cfg.train_images,
            image_size: cfg.image_size,
            classes: ALL_SHAPE_KINDS.to_vec(),
            max_shapes: cfg.max_shapes,
            noise_level: cfg.noise_level,
            seed: cfg.data_seed,
        })?,
    };
    let eval = match &cfg.eval_dir {
        Some(dir) => load_dataset_dir(dir)?,
        None if cfg.dataset_dir.is_none() && cfg.eval_images > 0 => {
            generate_shapes_dataset(&ShapesConfig {
                num_images: cfg.eval_images,
                image_size: cfg.image_size,
                classes: ALL_SHAPE_KINDS.to_vec(),
                max_shapes: cfg.max_shapes,
                noise_level: cfg.noise_level,
                seed: cfg.data_seed.wrapping_add(1),
            })?
        }
        _ => Vec::new(),
    };
    Ok((train, eval))
}

/// Per-image CRF-vs-threshold ablation on a held-out split, using the
/// trained model's pseudo-label generator.
pub fn eval_ablation(
    state: &TrainState,
    eval: &[Sample],
    cfg: &TrainConfig,
) -> Result<EvalAblation> {
    let num_labels = cfg.num_classes + 1;
    let mut crf_preds: Vec<Vec<u8>> = Vec::new();
    let mut thr_preds: Vec<Vec<u8>> = Vec::new();
    let mut gts: Vec<&[u8]> = Vec::new();
    let mut wins = 0usize;
    let mut scored = 0usize;
    for s in eval {
        let gt = match s.gt_mask.as_ref() {
            Some(g) => g,
            None => continue,
        };
        let out = generate_pseudo_label_for_sample(&state.model, s, cfg)?;
        let (crf_m, _) = mean_iou(&[out.mask.labels()], &[gt.labels()], num_labels)?;
        let (thr_m, _) = mean_iou(&[out.threshold_only.labels()], &[gt.labels()], num_labels)?;
        if crf_m >= thr_m {
            wins += 1;
        }
        scored += 1;
        crf_preds.push(out.mask.labels().to_vec());
        thr_preds.push(out.threshold_only.labels().to_vec());
        gts.push(gt.labels());
    }
    if scored == 0 {
        return Err(IsimError::Dataset("eval split has no ground truth".into()));
    }
    let crf_refs: Vec<&[u8]> = crf_preds.iter().map(|v| v.as_slice()).collect();
    let thr_refs: Vec<&[u8]> = thr_preds.iter().map(|v| v.as_slice()).collect();
    Ok(EvalAblation {
        crf_miou: mean_iou(&crf_refs, &gts, num_labels)?.0,
        threshold_miou: mean_iou(&thr_refs, &gts, num_labels)?.0,
        crf_at_least_threshold: wins as f64 / scored as f64,
    })
}

/// Full experiment: train, emit one CSV row per epoch, write the final
/// checkpoint (with pseudo-label archive), run the eval ablation, and
/// print nothing; the CLI layer handles presentation.
pub fn run_experiment(cfg: &RunConfig) -> Result<Summary> {
    cfg.train.validate()?;
    let (train_data, eval_data) = make_splits(cfg)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let csv_path = cfg.out_dir.join("metrics.csv");
    let checkpoint_path = cfg.out_dir.join("state.ckpt");
    let num_labels = cfg.train.num_classes + 1;
    let mut csv = csv_header(num_labels);

    let mut state = pipeline::init_state(&train_data, &cfg.train)?;
    let palette = default_palette(num_labels);
    while state.epoch < cfg.train.total_epochs {
        let t0 = Instant::now();
        pipeline::run_epoch(&mut state, &train_data, &cfg.train)?;
        let report = state.history.last().expect("epoch just ran").clone();
        let seconds = if cfg.record_timing {
            t0.elapsed().as_secs_f64()
        } else {
            0.0
        };
        let logits = predict_logits(&state.model, &train_data)?;
        let targets: Vec<f64> = train_data
            .iter()
            .flat_map(|s| s.class_labels.iter().copied())
            .collect();
        let acc = classification_accuracy(
            &logits,
            &targets,
            cfg.accuracy_threshold,
            cfg.accuracy_mode,
        )?;
        let (miou, per_class) = pseudo_split_metrics(&state, &train_data, num_labels)?;
        csv.push_str(&csv_row(&MetricsRecord {
            run_id: cfg.run_id.clone(),
            epoch: report.epoch,
            split: "train".into(),
            miou,
            acc,
            seconds,
            per_class_iou: per_class,
        }));
        if cfg.export_masks && report.regenerated {
            export_masks(
                &state.pseudo_labels,
                &palette,
                &cfg.out_dir.join("masks"),
                report.epoch,
            )?;
        }
    }
    std::fs::write(&csv_path, &csv)?;
    pipeline::save_train_state(&state, &checkpoint_path)?;

    let eval = if eval_data.is_empty() {
        None
    } else {
        Some(eval_ablation(&state, &eval_data, &cfg.train)?)
    };
    Ok(Summary {
        cam_baseline_miou: state.cam_baseline_miou,
        final_pseudo_miou: state.history.iter().rev().find_map(|r| r.pseudo_miou),
        eval,
        csv_path,
        checkpoint_path,
    })
}

fn pseudo_split_metrics(
    state: &TrainState,
    data: &[Sample],
    num_labels: usize,
) -> Result<(f64, Vec<f64>)> {
    let mut preds: Vec<&[u8]> = Vec::new();
    let mut gts: Vec<&[u8]> = Vec::new();
    for s in data {
        if let (Some(m), Some(gt)) = (state.pseudo_labels.get(&s.id), s.gt_mask.as_ref()) {
            preds.push(m.labels());
            gts.push(gt.labels());
        }
    }
    if preds.is_empty() {
        return Ok((f64::NAN, vec![f64::NAN; num_labels]));
    }
    mean_iou(&preds, &gts, num_labels)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_maps_give_miou_one() {
        let a: Vec<u8> = vec![0, 1, 2, 1];
        let (m, per) = mean_iou(&[&a], &[&a], 3).unwrap();
        assert_eq!(m, 1.0);
        assert_eq!(per, vec![1.0, 1.0, 1.0]);
    }

    #[test]
    fn hand_case_confusion_enumeration() {
        let pred: Vec<u8> = vec![0, 1, 1, 1];
        let gt: Vec<u8> = vec![0, 1, 0, 1];
        let (m, per) = mean_iou(&[&pred], &[&gt], 2).unwrap();
        assert!((per[0] - 0.5).abs() < 1e-12);
        assert!((per[1] - 2.0 / 3.0).abs() < 1e-12);
        assert!((m - (0.5 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((m - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn disjoint_foregrounds_score_zero() {
        let pred: Vec<u8> = vec![1, 1, 1, 1];
        let gt: Vec<u8> = vec![2, 2, 2, 2];
        let (m, per) = mean_iou(&[&pred], &[&gt], 3).unwrap();
        assert!(per[0].is_nan());
        assert_eq!(per[1], 0.0);
        assert_eq!(per[2], 0.0);
        assert_eq!(m, 0.0);
    }

    #[test]
    fn empty_union_classes_excluded_from_mean() {
        let pred: Vec<u8> = vec![0, 0];
        let gt: Vec<u8> = vec![0, 0];
        let (m, per) = mean_iou(&[&pred], &[&gt], 4).unwrap();
        assert_eq!(m, 1.0);
        assert!(per[1].is_nan() && per[2].is_nan() && per[3].is_nan());
    }

    #[test]
    fn split_accumulation_equals_concatenation() {
        let a: Vec<u8> = vec![0, 1, 2, 1];
        let b: Vec<u8> = vec![2, 2, 0, 1];
        let ga: Vec<u8> = vec![0, 1, 1, 2];
        let gb: Vec<u8> = vec![2, 0, 0, 1];
        let split = confusion_matrix(&[&a, &b], &[&ga, &gb], 3).unwrap();
        let concat_p: Vec<u8> = [a.clone(), b.clone()].concat();
        let concat_g: Vec<u8> = [ga.clone(), gb.clone()].concat();
        let joined = confusion_matrix(&[&concat_p], &[&concat_g], 3).unwrap();
        assert_eq!(split, joined);
    }

    #[test]
    fn miou_symmetric_under_label_permutation() {
        let pred: Vec<u8> = vec![0, 1, 2, 1, 0, 2];
        let gt: Vec<u8> = vec![0, 1, 1, 1, 2, 2];
        let (m, _) = mean_iou(&[&pred], &[&gt], 3).unwrap();
        // swap labels 1 and 2 in both
        let swap = |v: &[u8]| -> Vec<u8> {
            v.iter().map(|&x| match x {
                1 => 2,
                2 => 1,
                o => o,
            }).collect()
        };
        let (m2, _) = mean_iou(&[&swap(&pred)], &[&swap(&gt)], 3).unwrap();
        assert!((m - m2).abs() < 1e-15);
    }

    #[test]
    fn extent_mismatch_rejected() {
        let a: Vec<u8> = vec![0, 1];
        let b: Vec<u8> = vec![0, 1, 2];
        assert!(mean_iou(&[&a], &[&b], 3).is_err());
    }

    #[test]
    fn accuracy_perfect_and_zero_logit_cases() {
        let logits = Tensor::new(vec![2, 2], vec![50.0, -50.0, -50.0, 50.0]).unwrap();
        let targets = vec![1.0, 0.0, 0.0, 1.0];
        let acc =
            classification_accuracy(&logits, &targets, 0.5, AccuracyMode::PerClass).unwrap();
        assert_eq!(acc, 1.0);

        // sigma(0) = 0.5 is not > 0.5, so zero logits predict negative
        let zeros = Tensor::new(vec![2, 2], vec![0.0; 4]).unwrap();
        let targets = vec![1.0, 0.0, 0.0, 0.0];
        let acc = classification_accuracy(&zeros, &targets, 0.5, AccuracyMode::PerClass).unwrap();
        assert_eq!(acc, 0.75);
    }

    #[test]
    fn accuracy_matches_enumeration_on_random_case() {
        let logits = Tensor::new(
            vec![2, 3],
            vec![0.3, -1.2, 2.0, -0.4, 0.9, -2.5],
        )
        .unwrap();
        let targets = vec![1.0, 0.0, 1.0, 1.0, 1.0, 0.0];
        let mut hits = 0;
        for i in 0..6 {
            let p = sigmoid(logits.data()[i]) > 0.5;
            if p == (targets[i] > 0.0) {
                hits += 1;
            }
        }
        let acc =
            classification_accuracy(&logits, &targets, 0.5, AccuracyMode::PerClass).unwrap();
        assert!((acc - hits as f64 / 6.0).abs() < 1e-15);

        // sample 0 matches on every class, sample 1 misses class 0
        let subset =
            classification_accuracy(&logits, &targets, 0.5, AccuracyMode::Subset).unwrap();
        assert_eq!(subset, 0.5);
    }

    #[test]
    fn run_config_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.run_id = "abl_3".into();
        cfg.train.tau = 0.325;
        cfg.train.scales = vec![1.0, 0.75];
        cfg.train.regen = RegenMode::UntilConvergence {
            patience: 4,
            delta: 2.5e-4,
        };
        cfg.record_timing = true;
        let text = cfg.to_text();
        let back = RunConfig::from_text(&text).unwrap();
        assert_eq!(cfg, back);
        assert_eq!(back.to_text(), text);
    }

    #[test]
    fn run_config_rejects_unknown_key() {
        assert!(RunConfig::from_text("no_such_key = 5\n").is_err());
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![
            MetricsRecord {
                run_id: "r".into(),
                epoch: 0,
                split: "train".into(),
                miou: f64::NAN,
                acc: 0.5,
                seconds: 0.0,
                per_class_iou: vec![f64::NAN; 4],
            },
            MetricsRecord {
                run_id: "r".into(),
                epoch: 7,
                split: "train".into(),
                miou: 0.625,
                acc: 0.9375,
                seconds: 0.0,
                per_class_iou: vec![0.9, 0.5, 0.4, 0.7],
            },
        ];
        let mut text = csv_header(4);
        for r in &rows {
            text.push_str(&csv_row(r));
        }
        let parsed = parse_csv(&text).unwrap();
        assert_eq!(parsed.len(), 2);
        assert!(parsed[0].miou.is_nan());
        assert_eq!(parsed[1].miou, 0.625);
        assert_eq!(parsed[1].per_class_iou, rows[1].per_class_iou);
    }

    #[test]
    fn export_palette_round_trip() {
        let tmp = tempfile::tempdir().unwrap();
        let labels: Vec<u8> = vec![0, 1, 2, 3, 2, 1, 0, 0, 3];
        let mask = PseudoMask::new(labels.clone(), 3, 3).unwrap();
        let mut masks = BTreeMap::new();
        masks.insert("m".to_string(), mask);
        let palette = default_palette(4);
        let files = export_masks(&masks, &palette, tmp.path(), 15).unwrap();
        assert_eq!(files.len(), 1);
        assert!(files[0].file_name().unwrap().to_str().unwrap().ends_with("_e15.png"));
        let img = image::open(&files[0]).unwrap().to_rgb8();
        let back: Vec<u8> = img
            .pixels()
            .map(|p| {
                palette
                    .iter()
                    .position(|c| c == &[p[0], p[1], p[2]])
                    .unwrap() as u8
            })
            .collect();
        assert_eq!(back, labels);
    }

    #[test]
    fn all_background_mask_exports_uniform_color() {
        let tmp = tempfile::tempdir().unwrap();
        let mut masks = BTreeMap::new();
        masks.insert("b".to_string(), PseudoMask::new(vec![0; 16], 4, 4).unwrap());
        let palette = default_palette(2);
        let files = export_masks(&masks, &palette, tmp.path(), 5).unwrap();
        let img = image::open(&files[0]).unwrap().to_rgb8();
        assert!(img.pixels().all(|p| [p[0], p[1], p[2]] == palette[0]));
    }
}

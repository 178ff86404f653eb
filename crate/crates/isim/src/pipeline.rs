//! Training loop: classification-only warmup, periodic pseudo-label
//! regeneration, joint encoder-decoder training with the gated pixel loss.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camops::{generate_pseudo_label, multiscale_cams, PseudoMask};
use crate::dataio::{chw_from_hwc, preprocess_train, Sample, NUM_SHAPE_CLASSES};
use crate::dcrf::CrfParams;
use crate::error::{IsimError, Result};
use crate::harness::mean_iou;
use crate::model::{
    build_model, forward_opts, model_meta, Checkpoint, DecoderConfig, EncoderConfig, ModelParams,
};
use crate::numcore::Tensor;
use crate::optim::{background_gate, pixel_ce_spec, poly_sgd_step, GroupLrs, PolySchedule};

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RegenMode {
    /// Regenerate every `f` epochs starting at the end of warmup.
    Fixed(usize),
    /// Regenerate when the segmentation loss has stopped improving:
    /// relative change over the last `patience` epochs below `delta`.
    UntilConvergence { patience: usize, delta: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub warmup_epochs: usize,
    pub regen: RegenMode,
    pub tau: f64,
    pub scales: Vec<f64>,
    pub use_flip: bool,
    pub renormalize_cams: bool,
    pub crop: usize,
    /// (min_side, max_side) resize bounds applied before augmentation.
    pub resize_bounds: (usize, usize),
    pub batch_size: usize,
    pub lrs: GroupLrs,
    pub momentum: f64,
    pub power: f64,
    pub crf: CrfParams,
    pub lambda_seg: f64,
    pub normalize_by_gated: bool,
    pub literal_gate: bool,
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
    pub num_classes: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            total_epochs: 50,
            warmup_epochs: 5,
            regen: RegenMode::Fixed(10),
            tau: 0.3,
            scales: vec![1.0, 0.5, 1.5, 2.0],
            use_flip: true,
            renormalize_cams: true,
            crop: 64,
            resize_bounds: (64, 128),
            batch_size: 8,
            // desk-scale rates; GroupLrs::default() is tuned for the full-size model
            // and is unstable on the small encoder at this batch size
            lrs: GroupLrs {
                encoder: 0.005,
                decoder: 0.01,
                classifier: 0.05,
            },
            momentum: 0.9,
            power: 0.9,
            // 5 mean-field iterations are enough at desk image sizes and
            // halve regeneration cost; the library default stays at 10
            crf: CrfParams {
                iterations: 5,
                ..CrfParams::default()
            },
            lambda_seg: 1.0,
            normalize_by_gated: true,
            literal_gate: false,
            encoder: EncoderConfig::desk_small(),
            decoder: DecoderConfig::default(),
            num_classes: NUM_SHAPE_CLASSES,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.warmup_epochs >= self.total_epochs {
            return Err(IsimError::Config(format!(
                "warmup_epochs {} must be < total_epochs {}",
                self.warmup_epochs, self.total_epochs
            )));
        }
        match self.regen {
            RegenMode::Fixed(f) if f == 0 => {
                return Err(IsimError::Config("regen frequency must be >= 1".into()))
            }
            RegenMode::UntilConvergence { patience, .. } if patience == 0 => {
                return Err(IsimError::Config("patience must be >= 1".into()))
            }
            _ => {}
        }
        if !(0.0 < self.tau && self.tau < 1.0) {
            return Err(IsimError::Config(format!("tau must be in (0,1), got {}", self.tau)));
        }
        if self.crop == 0 || self.batch_size == 0 {
            return Err(IsimError::Config("crop and batch_size must be positive".into()));
        }
        if self.scales.is_empty() || self.scales.iter().any(|&s| s <= 0.0) {
            return Err(IsimError::Config("scales must be non-empty and positive".into()));
        }
        if self.lambda_seg < 0.0 {
            return Err(IsimError::Config("lambda_seg must be >= 0".into()));
        }
        self.encoder.validate()?;
        self.crf.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub cls_loss: f64,
    pub seg_loss: f64,
    /// Current pseudo-masks scored against ground truth, evaluation only.
    pub pseudo_miou: Option<f64>,
    pub regenerated: bool,
}

pub struct TrainState {
    pub model: ModelParams,
    pub schedule: PolySchedule,
    pub pseudo_labels: BTreeMap<String, PseudoMask>,
    /// Pre-CRF threshold-only masks from the latest regeneration, kept for
    /// ablation reporting.
    pub threshold_only: BTreeMap<String, PseudoMask>,
    /// Next epoch to run.
    pub epoch: usize,
    pub history: Vec<EpochReport>,
    /// Threshold-only mask mIoU recorded at the first regeneration.
    pub cam_baseline_miou: Option<f64>,
}

/// Fixed-frequency regeneration epochs: {warmup, warmup+f, ...} below the
/// horizon. Empty for the convergence-driven mode, which decides at run
/// time.
pub fn regen_schedule(cfg: &TrainConfig) -> Vec<usize> {
    match cfg.regen {
        RegenMode::Fixed(f) => (cfg.warmup_epochs..cfg.total_epochs).step_by(f).collect(),
        RegenMode::UntilConvergence { .. } => Vec::new(),
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

/// Per-epoch RNG derived from (seed, epoch) so a resumed run draws the
/// same augmentation stream without serializing generator state.
fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(splitmix64(seed) ^ splitmix64(0xE0C0 + epoch as u64))
}

fn batches_per_epoch(n: usize, batch: usize) -> usize {
    (n + batch - 1) / batch
}

pub fn init_state(data: &[Sample], cfg: &TrainConfig) -> Result<TrainState> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(IsimError::Dataset("empty training set".into()));
    }
    for s in data {
        if s.present_classes().is_empty() {
            return Err(IsimError::Dataset(format!(
                "sample {} has no positive class label",
                s.id
            )));
        }
    }
    let model = build_model(
        cfg.encoder.clone(),
        cfg.decoder.clone(),
        cfg.num_classes,
        cfg.seed,
    )?;
    let max_steps = cfg.total_epochs * batches_per_epoch(data.len(), cfg.batch_size);
    Ok(TrainState {
        model,
        schedule: PolySchedule::new(cfg.lrs.clone(), cfg.momentum, cfg.power, max_steps),
        pseudo_labels: BTreeMap::new(),
        threshold_only: BTreeMap::new(),
        epoch: 0,
        history: Vec::new(),
        cam_baseline_miou: None,
    })
}

fn should_regenerate(state: &TrainState, cfg: &TrainConfig) -> bool {
    let e = state.epoch;
    if e < cfg.warmup_epochs {
        return false;
    }
    match cfg.regen {
        RegenMode::Fixed(f) => (e - cfg.warmup_epochs) % f == 0,
        RegenMode::UntilConvergence { patience, delta } => {
            if e == cfg.warmup_epochs {
                return true;
            }
            let seg: Vec<f64> = state
                .history
                .iter()
                .filter(|r| r.epoch >= cfg.warmup_epochs)
                .map(|r| r.seg_loss)
                .collect();
            if seg.len() < patience {
                return false;
            }
            let recent = &seg[seg.len() - patience..];
            let first = recent[0];
            let last = recent[recent.len() - 1];
            let rel = (first - last).abs() / first.abs().max(1e-12);
            rel < delta
        }
    }
}

/// Multiscale CAMs, thresholding, and CRF refinement for one sample with
/// frozen model parameters.
pub fn generate_pseudo_label_for_sample(
    model: &ModelParams,
    sample: &Sample,
    cfg: &TrainConfig,
) -> Result<crate::camops::PseudoLabelOutput> {
    let chw = chw_from_hwc(&sample.image)?;
    let cams = multiscale_cams(
        model,
        &chw,
        &sample.present_classes(),
        &cfg.scales,
        cfg.use_flip,
        cfg.renormalize_cams,
    )?;
    generate_pseudo_label(&cams, &sample.image, cfg.tau, &cfg.crf)
}

/// Regenerate every pseudo-mask from the model exactly as it stands now
/// (before this epoch's gradient steps). Deterministic in model + data.
pub fn generate_pseudo_ground_truths(state: &mut TrainState, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    let mut pseudo = BTreeMap::new();
    let mut threshold_only = BTreeMap::new();
    for s in data {
        let out = generate_pseudo_label_for_sample(&state.model, s, cfg)?;
        pseudo.insert(s.id.clone(), out.mask);
        threshold_only.insert(s.id.clone(), out.threshold_only);
    }
    if state.cam_baseline_miou.is_none() {
        state.cam_baseline_miou = masks_miou(&threshold_only, data, cfg.num_classes);
    }
    state.pseudo_labels = pseudo;
    state.threshold_only = threshold_only;
    Ok(())
}

/// Score an id-keyed mask set against the ground truth (evaluation only).
pub fn masks_miou(
    masks: &BTreeMap<String, PseudoMask>,
    data: &[Sample],
    num_classes: usize,
) -> Option<f64> {
    let mut preds: Vec<&[u8]> = Vec::new();
    let mut gts: Vec<&[u8]> = Vec::new();
    for s in data {
        if let (Some(m), Some(gt)) = (masks.get(&s.id), s.gt_mask.as_ref()) {
            preds.push(m.labels());
            gts.push(gt.labels());
        }
    }
    if preds.is_empty() {
        return None;
    }
    mean_iou(&preds, &gts, num_classes + 1).ok().map(|(m, _)| m)
}

/// One epoch of gradient steps. Warmup epochs run the classification loss
/// alone with the decoder absent from the graph; later epochs add the
/// gated segmentation loss. Returns (mean cls loss, mean seg loss).
fn train_one_epoch(
    state: &mut TrainState,
    data: &[Sample],
    cfg: &TrainConfig,
    with_decoder: bool,
) -> Result<(f64, f64)> {
    let mut rng = epoch_rng(cfg.seed, state.epoch);
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(&mut rng);

    let mut cls_sum = 0.0;
    let mut seg_sum = 0.0;
    let mut count = 0usize;
    for chunk in order.chunks(cfg.batch_size) {
        let b = chunk.len();
        let mut images = Vec::with_capacity(b * 3 * cfg.crop * cfg.crop);
        let mut targets = Vec::with_capacity(b * cfg.num_classes);
        let mut masks: Vec<PseudoMask> = Vec::with_capacity(b);
        for &i in chunk {
            let s = &data[i];
            let pseudo = if with_decoder {
                Some(state.pseudo_labels.get(&s.id).ok_or_else(|| {
                    IsimError::Dataset(format!("no pseudo-label for sample {}", s.id))
                })?)
            } else {
                None
            };
            let aug = preprocess_train(s, pseudo, cfg.crop, cfg.resize_bounds, &mut rng)?;
            images.extend_from_slice(aug.image_chw.data());
            targets.extend_from_slice(&s.class_labels);
            if with_decoder {
                masks.push(aug.pseudo.expect("pseudo mask survives augmentation"));
            }
        }
        let batch = Tensor::new(vec![b, 3, cfg.crop, cfg.crop], images)?;
        let mut out = forward_opts(&state.model, &batch, with_decoder)?;
        let cls = out.graph.multilabel_soft_margin(out.class_logits, targets)?;
        let (loss, seg_val) = if with_decoder {
            let pixel = out.pixel_logits.expect("decoder ran");
            let mask_refs: Vec<&PseudoMask> = masks.iter().collect();
            let gate = background_gate(&mask_refs);
            let spec = pixel_ce_spec(
                out.graph.value(pixel),
                &mask_refs,
                &gate,
                cfg.normalize_by_gated,
                cfg.literal_gate,
            )?;
            let seg = out.graph.pixel_cross_entropy(pixel, spec)?;
            let seg_val = out.graph.value(seg).item();
            let total = out
                .graph
                .weighted_sum(&[cls, seg], vec![1.0, cfg.lambda_seg])?;
            (total, seg_val)
        } else {
            (cls, 0.0)
        };
        let cls_val = out.graph.value(cls).item();
        let loss_val = out.graph.value(loss).item();
        if !loss_val.is_finite() {
            return Err(IsimError::NonFiniteLoss {
                epoch: state.epoch,
                detail: format!("cls {cls_val}, seg {seg_val}"),
            });
        }
        out.graph.backward(loss)?;
        let grads: Vec<Vec<f64>> = out
            .param_nodes
            .iter()
            .enumerate()
            .map(|(i, &id)| match out.graph.grad(id) {
                Some(g) => g.to_vec(),
                None => vec![0.0; state.model.params[i].tensor.numel()],
            })
            .collect();
        poly_sgd_step(&mut state.model, &grads, &mut state.schedule)?;
        cls_sum += cls_val * b as f64;
        seg_sum += seg_val * b as f64;
        count += b;
    }
    Ok((cls_sum / count as f64, seg_sum / count as f64))
}

/// Classification-only epoch; decoder parameters are untouched.
pub fn train_encoder(state: &mut TrainState, data: &[Sample], cfg: &TrainConfig) -> Result<(f64, f64)> {
    train_one_epoch(state, data, cfg, false)
}

/// Joint epoch: classification loss plus lambda-weighted gated pixel loss,
/// image and pseudo-mask augmented by the identical transform.
pub fn train_encoder_decoder(
    state: &mut TrainState,
    data: &[Sample],
    cfg: &TrainConfig,
) -> Result<(f64, f64)> {
    train_one_epoch(state, data, cfg, true)
}

/// Advance the state by exactly one epoch: regenerate if scheduled, then
/// run the epoch's gradient steps, then append the report.
pub fn run_epoch(state: &mut TrainState, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if state.epoch >= cfg.total_epochs {
        return Err(IsimError::Config(format!(
            "epoch {} past horizon {}",
            state.epoch, cfg.total_epochs
        )));
    }
    let regenerated = should_regenerate(state, cfg);
    if regenerated {
        generate_pseudo_ground_truths(state, data, cfg)?;
    }
    let (cls_loss, seg_loss) = if state.epoch < cfg.warmup_epochs {
        train_encoder(state, data, cfg)?
    } else {
        train_encoder_decoder(state, data, cfg)?
    };
    let pseudo_miou = if state.pseudo_labels.is_empty() {
        None
    } else {
        masks_miou(&state.pseudo_labels, data, cfg.num_classes)
    };
    state.history.push(EpochReport {
        epoch: state.epoch,
        cls_loss,
        seg_loss,
        pseudo_miou,
        regenerated,
    });
    state.epoch += 1;
    Ok(())
}

/// Run from the state's current epoch to the horizon.
pub fn train_from(state: &mut TrainState, data: &[Sample], cfg: &TrainConfig) -> Result<()> {
    while state.epoch < cfg.total_epochs {
        run_epoch(state, data, cfg)?;
    }
    Ok(())
}

/// Full training run from scratch.
pub fn train(data: &[Sample], cfg: &TrainConfig) -> Result<TrainState> {
    let mut state = init_state(data, cfg)?;
    train_from(&mut state, data, cfg)?;
    Ok(state)
}

// ---------------------------------------------------------------------------
// state serialization: model checkpoint + optimizer state + pseudo-label
// archive + history, one file
// ---------------------------------------------------------------------------

pub fn save_train_state(state: &TrainState, path: &Path) -> Result<()> {
    let mut meta = model_meta(&state.model);
    meta.push(("train.epoch".into(), state.epoch.to_string()));
    meta.push(("train.step".into(), state.schedule.current_step.to_string()));
    meta.push(("train.max_steps".into(), state.schedule.max_steps.to_string()));
    meta.push(("train.momentum".into(), state.schedule.momentum.to_bits().to_string()));
    meta.push(("train.power".into(), state.schedule.power.to_bits().to_string()));
    meta.push((
        "train.lrs".into(),
        format!(
            "{},{},{}",
            state.schedule.base_lrs.encoder.to_bits(),
            state.schedule.base_lrs.decoder.to_bits(),
            state.schedule.base_lrs.classifier.to_bits()
        ),
    ));

    let mut arrays: Vec<(String, Vec<usize>, Vec<f64>)> = state
        .model
        .params
        .iter()
        .map(|p| (p.name.clone(), p.tensor.shape().to_vec(), p.tensor.data().to_vec()))
        .collect();
    for p in &state.model.params {
        arrays.push((format!("v:{}", p.name), p.tensor.shape().to_vec(), p.velocity.clone()));
    }
    let mask_array = |prefix: &str, id: &str, m: &PseudoMask| {
        let (h, w) = m.extent();
        (
            format!("{prefix}:{id}"),
            vec![h, w],
            m.labels().iter().map(|&l| l as f64).collect::<Vec<f64>>(),
        )
    };
    for (id, m) in &state.pseudo_labels {
        arrays.push(mask_array("pl", id, m));
    }
    for (id, m) in &state.threshold_only {
        arrays.push(mask_array("pt", id, m));
    }
    let mut hist = Vec::with_capacity(state.history.len() * 5);
    for r in &state.history {
        hist.push(r.epoch as f64);
        hist.push(r.cls_loss);
        hist.push(r.seg_loss);
        hist.push(r.pseudo_miou.unwrap_or(f64::NAN));
        hist.push(if r.regenerated { 1.0 } else { 0.0 });
    }
    arrays.push(("history".into(), vec![state.history.len(), 5], hist));
    arrays.push((
        "cam_baseline".into(),
        vec![state.cam_baseline_miou.iter().count()],
        state.cam_baseline_miou.iter().copied().collect(),
    ));

    Checkpoint { meta, arrays }.write(path)
}

pub fn load_train_state(path: &Path) -> Result<TrainState> {
    let (mut model, extra) = crate::model::load_model(path)?;
    // load_model surfaces only the arrays; reopen the header for the
    // training meta fields
    let ckpt = Checkpoint::read(path)?;
    let need = |key: &str| -> Result<&str> {
        ckpt.meta_value(key)
            .ok_or_else(|| IsimError::Checkpoint(format!("missing meta key {key}")))
    };
    let parse_usize = |key: &str| -> Result<usize> {
        need(key)?
            .parse()
            .map_err(|e| IsimError::Checkpoint(format!("bad {key}: {e}")))
    };
    let parse_bits = |s: &str| -> Result<f64> {
        s.parse::<u64>()
            .map(f64::from_bits)
            .map_err(|e| IsimError::Checkpoint(format!("bad float bits: {e}")))
    };
    let epoch = parse_usize("train.epoch")?;
    let current_step = parse_usize("train.step")?;
    let max_steps = parse_usize("train.max_steps")?;
    let momentum = parse_bits(need("train.momentum")?)?;
    let power = parse_bits(need("train.power")?)?;
    let lr_parts: Vec<&str> = need("train.lrs")?.split(',').collect();
    if lr_parts.len() != 3 {
        return Err(IsimError::Checkpoint("bad train.lrs".into()));
    }
    let lrs = GroupLrs {
        encoder: parse_bits(lr_parts[0])?,
        decoder: parse_bits(lr_parts[1])?,
        classifier: parse_bits(lr_parts[2])?,
    };
    let mut schedule = PolySchedule::new(lrs, momentum, power, max_steps);
    schedule.current_step = current_step;

    let mut pseudo_labels = BTreeMap::new();
    let mut threshold_only = BTreeMap::new();
    let mut history = Vec::new();
    let mut cam_baseline_miou = None;
    for (name, shape, data) in &extra {
        if let Some(pname) = name.strip_prefix("v:") {
            let idx = model.param_index(pname).ok_or_else(|| {
                IsimError::Checkpoint(format!("velocity for unknown parameter {pname}"))
            })?;
            model.params[idx].velocity = data.clone();
        } else if let Some(id) = name.strip_prefix("pl:") {
            pseudo_labels.insert(id.to_string(), mask_from_array(shape, data)?);
        } else if let Some(id) = name.strip_prefix("pt:") {
            threshold_only.insert(id.to_string(), mask_from_array(shape, data)?);
        } else if name == "history" {
            for row in data.chunks(5) {
                history.push(EpochReport {
                    epoch: row[0] as usize,
                    cls_loss: row[1],
                    seg_loss: row[2],
                    pseudo_miou: if row[3].is_nan() { None } else { Some(row[3]) },
                    regenerated: row[4] != 0.0,
                });
            }
        } else if name == "cam_baseline" {
            cam_baseline_miou = data.first().copied();
        }
    }
    Ok(TrainState {
        model,
        schedule,
        pseudo_labels,
        threshold_only,
        epoch,
        history,
        cam_baseline_miou,
    })
}

fn mask_from_array(shape: &[usize], data: &[f64]) -> Result<PseudoMask> {
    let &[h, w] = shape else {
        return Err(IsimError::Checkpoint(format!("bad mask shape {shape:?}")));
    };
    PseudoMask::new(data.iter().map(|&v| v as u8).collect(), h, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{generate_shapes_dataset, ShapeKind, ShapesConfig};
    use crate::model::ParamGroup;

    fn tiny_cfg(total: usize, warmup: usize) -> TrainConfig {
        TrainConfig {
            total_epochs: total,
            warmup_epochs: warmup,
            regen: RegenMode::Fixed(2),
            scales: vec![1.0],
            use_flip: false,
            crop: 32,
            resize_bounds: (32, 64),
            batch_size: 4,
            encoder: EncoderConfig {
                widths: vec![4, 8],
                strides: vec![1, 2],
                last_block_dilated: false,
            },
            crf: CrfParams {
                iterations: 2,
                ..CrfParams::default()
            },
            ..TrainConfig::default()
        }
    }

    fn tiny_data(n: usize) -> Vec<crate::dataio::Sample> {
        generate_shapes_dataset(&ShapesConfig {
            num_images: n,
            image_size: 32,
            classes: vec![ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle],
            max_shapes: 1,
            noise_level: 0.03,
            seed: 5,
        })
        .unwrap()
    }

    #[test]
    fn regen_schedule_reference_defaults() {
        let cfg = TrainConfig::default();
        assert_eq!(regen_schedule(&cfg), vec![5, 15, 25, 35, 45]);
    }

    #[test]
    fn regen_schedule_every_epoch_and_single() {
        let mut cfg = TrainConfig::default();
        cfg.regen = RegenMode::Fixed(1);
        assert_eq!(regen_schedule(&cfg), (5..50).collect::<Vec<_>>());
        cfg.regen = RegenMode::Fixed(100);
        assert_eq!(regen_schedule(&cfg), vec![5]);
    }

    #[test]
    fn warmup_leaves_decoder_untouched() {
        let cfg = tiny_cfg(4, 2);
        let data = tiny_data(6);
        let mut state = init_state(&data, &cfg).unwrap();
        let before = state.model.group_checksum(ParamGroup::Decoder);
        run_epoch(&mut state, &data, &cfg).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap();
        assert_eq!(state.model.group_checksum(ParamGroup::Decoder), before);
        assert_ne!(
            state.model.group_checksum(ParamGroup::Encoder),
            init_state(&data, &cfg).unwrap().model.group_checksum(ParamGroup::Encoder)
        );
    }

    #[test]
    fn regenerated_flags_match_schedule() {
        let cfg = tiny_cfg(6, 2);
        let data = tiny_data(6);
        let state = train(&data, &cfg).unwrap();
        let flagged: Vec<usize> = state
            .history
            .iter()
            .filter(|r| r.regenerated)
            .map(|r| r.epoch)
            .collect();
        assert_eq!(flagged, regen_schedule(&cfg));
        assert!(state.history.iter().take(2).all(|r| !r.regenerated));
    }

    #[test]
    fn pseudo_masks_constant_between_regenerations() {
        let cfg = tiny_cfg(5, 1);
        let data = tiny_data(4);
        let mut state = init_state(&data, &cfg).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap(); // warmup
        run_epoch(&mut state, &data, &cfg).unwrap(); // regen at 1
        let snapshot: Vec<Vec<u8>> = state
            .pseudo_labels
            .values()
            .map(|m| m.labels().to_vec())
            .collect();
        run_epoch(&mut state, &data, &cfg).unwrap(); // epoch 2, no regen
        let after: Vec<Vec<u8>> = state
            .pseudo_labels
            .values()
            .map(|m| m.labels().to_vec())
            .collect();
        assert_eq!(snapshot, after);
        run_epoch(&mut state, &data, &cfg).unwrap(); // epoch 3, regen
        assert!(state.history.last().unwrap().regenerated);
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = tiny_cfg(4, 1);
        let data = tiny_data(5);
        let a = train(&data, &cfg).unwrap();
        let b = train(&data, &cfg).unwrap();
        assert_eq!(a.history, b.history);
        for (pa, pb) in a.model.params.iter().zip(&b.model.params) {
            assert_eq!(pa.tensor.data(), pb.tensor.data());
        }
    }

    #[test]
    fn save_resume_reproduces_next_report() {
        let cfg = tiny_cfg(5, 1);
        let data = tiny_data(5);

        let mut full = init_state(&data, &cfg).unwrap();
        for _ in 0..3 {
            run_epoch(&mut full, &data, &cfg).unwrap();
        }

        let tmp = tempfile::tempdir().unwrap();
        let ckpt = tmp.path().join("state.ckpt");
        let mut partial = init_state(&data, &cfg).unwrap();
        for _ in 0..2 {
            run_epoch(&mut partial, &data, &cfg).unwrap();
        }
        save_train_state(&partial, &ckpt).unwrap();
        let mut resumed = load_train_state(&ckpt).unwrap();
        assert_eq!(resumed.epoch, 2);
        run_epoch(&mut resumed, &data, &cfg).unwrap();
        assert_eq!(resumed.history.last(), full.history.last());
    }

    #[test]
    fn until_convergence_infinite_delta_regenerates_every_epoch() {
        let mut cfg = tiny_cfg(5, 1);
        cfg.regen = RegenMode::UntilConvergence {
            patience: 1,
            delta: f64::INFINITY,
        };
        let data = tiny_data(4);
        let state = train(&data, &cfg).unwrap();
        for r in &state.history {
            assert_eq!(r.regenerated, r.epoch >= 1);
        }
    }

    #[test]
    fn pseudo_labels_cover_all_training_images_after_first_regen() {
        let cfg = tiny_cfg(3, 1);
        let data = tiny_data(5);
        let mut state = init_state(&data, &cfg).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap();
        for s in &data {
            assert!(state.pseudo_labels.contains_key(&s.id));
        }
    }

    #[test]
    fn regen_masks_match_manual_composition() {
        let cfg = tiny_cfg(3, 1);
        let data = tiny_data(2);
        let mut state = init_state(&data, &cfg).unwrap();
        run_epoch(&mut state, &data, &cfg).unwrap();
        generate_pseudo_ground_truths(&mut state, &data, &cfg).unwrap();
        for s in &data {
            let chw = chw_from_hwc(&s.image).unwrap();
            let cams = multiscale_cams(
                &state.model,
                &chw,
                &s.present_classes(),
                &cfg.scales,
                cfg.use_flip,
                cfg.renormalize_cams,
            )
            .unwrap();
            let manual = generate_pseudo_label(&cams, &s.image, cfg.tau, &cfg.crf).unwrap();
            assert_eq!(state.pseudo_labels[&s.id].labels(), manual.mask.labels());
        }
    }
}

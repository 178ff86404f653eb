//! Losses, the empty-mask gate, and the poly-scheduled momentum SGD with
//! per-group learning rates.

use crate::camops::PseudoMask;
use crate::error::{IsimError, Result};
use crate::model::{ModelParams, ParamGroup};
use crate::numcore::kernels as k;
use crate::numcore::{PixelCeSpec, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupLrs {
    pub encoder: f64,
    pub decoder: f64,
    pub classifier: f64,
}

impl Default for GroupLrs {
    fn default() -> Self {
        GroupLrs {
            encoder: 0.1,
            decoder: 0.01,
            classifier: 1.0,
        }
    }
}

impl GroupLrs {
    pub fn get(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Encoder => self.encoder,
            ParamGroup::Decoder => self.decoder,
            ParamGroup::Classifier => self.classifier,
        }
    }
}

/// lr(step) = base_lr * (1 - step/max_steps)^power per parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct PolySchedule {
    pub base_lrs: GroupLrs,
    pub momentum: f64,
    pub power: f64,
    pub max_steps: usize,
    pub current_step: usize,
}

impl PolySchedule {
    pub fn new(base_lrs: GroupLrs, momentum: f64, power: f64, max_steps: usize) -> Self {
        PolySchedule {
            base_lrs,
            momentum,
            power,
            max_steps,
            current_step: 0,
        }
    }

    pub fn lr(&self, group: ParamGroup) -> f64 {
        self.lr_at(group, self.current_step)
    }

    pub fn lr_at(&self, group: ParamGroup, step: usize) -> f64 {
        let frac = 1.0 - step as f64 / self.max_steps as f64;
        self.base_lrs.get(group) * frac.max(0.0).powf(self.power)
    }
}

/// Eq-style gate: r_i = 0 exactly when mask i is all background.
pub fn background_gate(masks: &[&PseudoMask]) -> Vec<f64> {
    masks
        .iter()
        .map(|m| if m.all_background() { 0.0 } else { 1.0 })
        .collect()
}

/// Multi-label soft margin classification loss (value only; the training
/// path registers the same computation on the graph).
pub fn multilabel_soft_margin(class_logits: &Tensor, targets: &[f64]) -> Result<f64> {
    k::multilabel_soft_margin_fwd(class_logits, targets)
}

/// Gated pixel-wise cross-entropy: per-sample CE over labels {0..C}
/// multiplied by the gate, normalized by the gated-in count (or batch
/// size). `literal_gate` instead multiplies the logits by the gate before
/// the softmax, reproducing the written form of the loss.
pub fn modified_cross_entropy(
    pixel_logits: &Tensor,
    masks: &[&PseudoMask],
    gate: &[f64],
    normalize_by_gated: bool,
    literal_gate: bool,
) -> Result<f64> {
    let spec = pixel_ce_spec(pixel_logits, masks, gate, normalize_by_gated, literal_gate)?;
    k::pixel_ce_fwd(pixel_logits, &spec)
}

/// Build the label/gate spec shared by the plain evaluation and the graph op.
pub fn pixel_ce_spec(
    pixel_logits: &Tensor,
    masks: &[&PseudoMask],
    gate: &[f64],
    normalize_by_gated: bool,
    literal_gate: bool,
) -> Result<PixelCeSpec> {
    let (n, _, h, w) = pixel_logits.dims4("modified_cross_entropy")?;
    if masks.len() != n || gate.len() != n {
        return Err(IsimError::shape(
            "modified_cross_entropy",
            format!("{} masks / {} gates for batch of {n}", masks.len(), gate.len()),
        ));
    }
    let mut labels = Vec::with_capacity(n * h * w);
    for (i, m) in masks.iter().enumerate() {
        if m.extent() != (h, w) {
            return Err(IsimError::shape(
                "modified_cross_entropy",
                format!("mask {i} extent {:?} != logits {h}x{w}", m.extent()),
            ));
        }
        let expected = if m.all_background() { 0.0 } else { 1.0 };
        if gate[i] != expected {
            return Err(IsimError::Config(format!(
                "gate[{i}] = {} inconsistent with mask (all_background = {})",
                gate[i],
                m.all_background()
            )));
        }
        labels.extend_from_slice(m.labels());
    }
    Ok(PixelCeSpec {
        labels,
        gate: gate.to_vec(),
        normalize_by_gated,
        literal_gate,
    })
}

/// Classical momentum update v <- momentum*v - lr*g; p <- p + v, with the
/// group learning rate from the poly schedule. Calls at or past
/// max_steps leave the parameters untouched (lr has decayed to zero).
pub fn poly_sgd_step(
    model: &mut ModelParams,
    grads: &[Vec<f64>],
    schedule: &mut PolySchedule,
) -> Result<()> {
    if grads.len() != model.params.len() {
        return Err(IsimError::shape(
            "poly_sgd_step",
            format!("{} grads for {} params", grads.len(), model.params.len()),
        ));
    }
    if schedule.current_step > schedule.max_steps {
        return Err(IsimError::StepOverflow(schedule.max_steps));
    }
    if schedule.current_step == schedule.max_steps {
        return Ok(());
    }
    for (p, g) in model.params.iter_mut().zip(grads) {
        if g.len() != p.tensor.numel() {
            return Err(IsimError::shape(
                "poly_sgd_step",
                format!("grad length {} for parameter {}", g.len(), p.name),
            ));
        }
        let lr = schedule.lr(p.group);
        let data = p.tensor.data_mut();
        for ((v, d), gv) in p.velocity.iter_mut().zip(data.iter_mut()).zip(g) {
            *v = schedule.momentum * *v - lr * gv;
            *d += *v;
        }
    }
    schedule.current_step += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{build_model, DecoderConfig, EncoderConfig};

    fn mask(labels: Vec<u8>, h: usize, w: usize) -> PseudoMask {
        PseudoMask::new(labels, h, w).unwrap()
    }

    #[test]
    fn soft_margin_zero_logits_is_ln2() {
        let logits = Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap();
        for targets in [vec![0.0; 6], vec![1.0; 6], vec![1.0, 0.0, 1.0, 0.0, 1.0, 0.0]] {
            let l = multilabel_soft_margin(&logits, &targets).unwrap();
            assert!((l - 2.0f64.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn soft_margin_saturated_correct_prediction() {
        let logits = Tensor::new(vec![1, 1], vec![20.0]).unwrap();
        let l = multilabel_soft_margin(&logits, &[1.0]).unwrap();
        assert!(l < 1e-8);
    }

    #[test]
    fn soft_margin_matches_direct_formula() {
        let logits = Tensor::new(vec![2, 3], vec![0.7, -1.2, 0.3, 2.0, -0.5, 0.1]).unwrap();
        let targets = [1.0, 0.0, 1.0, 0.0, 1.0, 1.0];
        let mut expect = 0.0;
        for (x, y) in logits.data().iter().zip(&targets) {
            let s = 1.0 / (1.0 + (-x).exp());
            expect += -(y * s.ln() + (1.0 - y) * (1.0 - s).ln());
        }
        expect /= 6.0;
        let got = multilabel_soft_margin(&logits, &targets).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn background_gate_cases() {
        let empty = mask(vec![0; 4], 2, 2);
        let one_fg = mask(vec![0, 0, 0, 2], 2, 2);
        assert_eq!(background_gate(&[&empty]), vec![0.0]);
        assert_eq!(background_gate(&[&one_fg]), vec![1.0]);
        assert_eq!(background_gate(&[&empty, &one_fg]), vec![0.0, 1.0]);
    }

    #[test]
    fn gated_batch_of_one_empty_mask_is_zero_loss() {
        let logits = Tensor::new(vec![1, 4, 2, 2], (0..16).map(|i| i as f64 * 0.1).collect())
            .unwrap();
        let m = mask(vec![0; 4], 2, 2);
        let l = modified_cross_entropy(&logits, &[&m], &[0.0], true, false).unwrap();
        assert_eq!(l, 0.0);
    }

    #[test]
    fn uniform_logits_gives_ln_l() {
        let logits = Tensor::new(vec![1, 4, 2, 2], vec![0.5; 16]).unwrap();
        let m = mask(vec![0, 1, 2, 3], 2, 2);
        let l = modified_cross_entropy(&logits, &[&m], &[1.0], true, false).unwrap();
        assert!((l - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn pixel_ce_matches_enumeration_oracle() {
        let data: Vec<f64> = (0..12).map(|i| ((i * 3) % 7) as f64 * 0.21 - 0.6).collect();
        let logits = Tensor::new(vec![1, 3, 2, 2], data.clone()).unwrap();
        let labels = [0u8, 2, 1, 0];
        let m = mask(labels.to_vec(), 2, 2);
        let mut expect = 0.0;
        for s in 0..4 {
            let col: Vec<f64> = (0..3).map(|c| data[c * 4 + s]).collect();
            let mx = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = col.iter().map(|v| (v - mx).exp()).sum();
            expect += mx + z.ln() - col[labels[s] as usize];
        }
        expect /= 4.0;
        let got = modified_cross_entropy(&logits, &[&m], &[1.0], true, false).unwrap();
        assert!((got - expect).abs() < 1e-12);
    }

    #[test]
    fn gate_inconsistency_rejected() {
        let logits = Tensor::new(vec![1, 2, 1, 1], vec![0.0, 0.0]).unwrap();
        let m = mask(vec![1], 1, 1);
        assert!(modified_cross_entropy(&logits, &[&m], &[0.0], true, false).is_err());
    }

    #[test]
    fn poly_lr_values() {
        let sched = PolySchedule::new(GroupLrs::default(), 0.9, 0.9, 100);
        assert_eq!(sched.lr(ParamGroup::Encoder), 0.1);
        assert_eq!(sched.lr(ParamGroup::Decoder), 0.01);
        assert_eq!(sched.lr(ParamGroup::Classifier), 1.0);
        let mid = sched.lr_at(ParamGroup::Encoder, 50);
        assert!((mid - 0.1 * 0.5f64.powf(0.9)).abs() < 1e-12);
        assert!((mid / 0.1 - 0.5359).abs() < 1e-3);
        assert_eq!(sched.lr_at(ParamGroup::Encoder, 100), 0.0);
    }

    #[test]
    fn lr_curve_monotone_non_increasing() {
        let sched = PolySchedule::new(GroupLrs::default(), 0.9, 0.9, 37);
        let mut last = f64::INFINITY;
        for step in 0..=37 {
            let lr = sched.lr_at(ParamGroup::Encoder, step);
            assert!(lr <= last);
            last = lr;
        }
    }

    #[test]
    fn step_at_max_is_noop() {
        let mut model = build_model(
            EncoderConfig {
                widths: vec![2, 3],
                strides: vec![1, 2],
                last_block_dilated: false,
            },
            DecoderConfig::default(),
            2,
            1,
        )
        .unwrap();
        let mut sched = PolySchedule::new(GroupLrs::default(), 0.9, 0.9, 1);
        let grads: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|p| vec![1.0; p.tensor.numel()])
            .collect();
        poly_sgd_step(&mut model, &grads, &mut sched).unwrap();
        assert_eq!(sched.current_step, 1);
        let before = model.group_data(ParamGroup::Encoder);
        poly_sgd_step(&mut model, &grads, &mut sched).unwrap();
        assert_eq!(model.group_data(ParamGroup::Encoder), before);
        assert_eq!(sched.current_step, 1);
    }

    #[test]
    fn momentum_update_formula() {
        let mut model = build_model(
            EncoderConfig {
                widths: vec![2, 3],
                strides: vec![1, 2],
                last_block_dilated: false,
            },
            DecoderConfig::default(),
            2,
            1,
        )
        .unwrap();
        let p0 = model.params[0].tensor.data().to_vec();
        let mut sched = PolySchedule::new(GroupLrs::default(), 0.9, 0.9, 10);
        let grads: Vec<Vec<f64>> = model
            .params
            .iter()
            .map(|p| vec![0.5; p.tensor.numel()])
            .collect();
        poly_sgd_step(&mut model, &grads, &mut sched).unwrap();
        // step 0: v = -lr*g, p += v with lr = base (encoder 0.1)
        let expect = p0[0] - 0.1 * 0.5;
        assert!((model.params[0].tensor.data()[0] - expect).abs() < 1e-12);
    }
}

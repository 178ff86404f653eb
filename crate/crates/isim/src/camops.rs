//! CAM post-processing: multi-scale aggregation, thresholding into
//! pseudo-masks, and the full CAM -> threshold -> dense-CRF label
//! generation step.

use std::io::{BufRead, BufReader, BufWriter, Read as IoRead, Write as IoWrite};
use std::path::Path;

use crate::dcrf::{build_unary, mean_field_refine, CrfParams};
use crate::error::{IsimError, Result};
use crate::model::{compute_cam, infer_features, ModelParams};
use crate::numcore::kernels as k;
use crate::numcore::Tensor;

/// Per-class activation maps in [0,1] plus the image's class-presence set.
/// Class ids are 1-based; index c-1 of `maps` holds class c.
#[derive(Debug, Clone)]
pub struct CamStack {
    maps: Tensor,
    present_classes: Vec<usize>,
    pub image_id: String,
}

impl CamStack {
    pub fn new(maps: Tensor, mut present_classes: Vec<usize>, image_id: String) -> Result<Self> {
        let &[c, h, w] = maps.shape() else {
            return Err(IsimError::shape(
                "CamStack",
                format!("maps must be rank 3 (C,H,W), got {:?}", maps.shape()),
            ));
        };
        present_classes.sort_unstable();
        present_classes.dedup();
        if present_classes.iter().any(|&pc| pc == 0 || pc > c) {
            return Err(IsimError::Config(format!(
                "present classes {present_classes:?} outside 1..={c}"
            )));
        }
        let hw = h * w;
        for cc in 0..c {
            let slice = &maps.data()[cc * hw..(cc + 1) * hw];
            if slice.iter().any(|&v| !(0.0..=1.0).contains(&v)) {
                return Err(IsimError::Config(format!(
                    "CAM values for class {} outside [0,1]",
                    cc + 1
                )));
            }
            if !present_classes.contains(&(cc + 1)) && slice.iter().any(|&v| v != 0.0) {
                return Err(IsimError::Config(format!(
                    "absent class {} has nonzero activation",
                    cc + 1
                )));
            }
        }
        Ok(CamStack {
            maps,
            present_classes,
            image_id,
        })
    }

    pub fn maps(&self) -> &Tensor {
        &self.maps
    }

    pub fn present_classes(&self) -> &[usize] {
        &self.present_classes
    }

    pub fn num_classes(&self) -> usize {
        self.maps.shape()[0]
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.maps.shape()[1], self.maps.shape()[2])
    }
}

/// Per-pixel integer label map; 0 is background.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoMask {
    labels: Vec<u8>,
    height: usize,
    width: usize,
    all_background: bool,
}

impl PseudoMask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(IsimError::shape(
                "PseudoMask",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        let all_background = labels.iter().all(|&l| l == 0);
        Ok(PseudoMask {
            labels,
            height,
            width,
            all_background,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn all_background(&self) -> bool {
        self.all_background
    }

    pub fn foreground_count(&self) -> usize {
        self.labels.iter().filter(|&&l| l != 0).count()
    }
}

fn flip_horizontal_chw(t: &Tensor) -> Tensor {
    let &[c, h, w] = t.shape() else { panic!("expected rank-3 CHW") };
    let mut out = vec![0.0f64; t.numel()];
    let d = t.data();
    for cc in 0..c {
        for y in 0..h {
            let row = (cc * h + y) * w;
            for x in 0..w {
                out[row + x] = d[row + (w - 1 - x)];
            }
        }
    }
    Tensor::new(vec![c, h, w], out).unwrap()
}

fn resize_chw(t: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(IsimError::shape("resize_chw", "expected rank-3 CHW".to_string()));
    };
    let as4 = Tensor::new(vec![1, c, h, w], t.data().to_vec())?;
    let r = k::upsample_bilinear_fwd(&as4, oh, ow)?;
    Tensor::new(vec![c, oh, ow], r.into_data())
}

/// Aggregate CAMs over scaled (and optionally flipped) variants of the
/// image: per variant compute the CAM, map it back to the original
/// geometry, average, then optionally re-normalize each class to [0,1].
pub fn multiscale_cams(
    params: &ModelParams,
    image: &Tensor,
    present_classes: &[usize],
    scales: &[f64],
    use_flip: bool,
    renormalize: bool,
) -> Result<CamStack> {
    if scales.is_empty() || scales.iter().any(|&s| s <= 0.0) {
        return Err(IsimError::Config("scales must be non-empty and positive".into()));
    }
    let &[_, h, w] = image.shape() else {
        return Err(IsimError::shape(
            "multiscale_cams",
            format!("image must be (3,H,W), got {:?}", image.shape()),
        ));
    };
    let c = params.num_classes;
    let hw = h * w;
    let mut acc = vec![0.0f64; c * hw];
    let mut count = 0usize;

    for &scale in scales {
        let sh = ((h as f64 * scale).round() as usize).max(1);
        let sw = ((w as f64 * scale).round() as usize).max(1);
        let scaled = resize_chw(image, sh, sw)?;
        for flip in [false, true] {
            if flip && !use_flip {
                continue;
            }
            let input = if flip {
                flip_horizontal_chw(&scaled)
            } else {
                scaled.clone()
            };
            let batch = Tensor::new(vec![1, 3, sh, sw], input.into_data())?;
            let (features, _) = infer_features(params, &batch)?;
            let &[_, _, fh, fw] = features.shape() else { unreachable!() };
            let feats3 = Tensor::new(
                vec![features.shape()[1], fh, fw],
                features.data().to_vec(),
            )?;
            let feats4 = Tensor::new(vec![1, feats3.shape()[0], fh, fw], feats3.into_data())?;
            let cam = compute_cam(params, &feats4, present_classes)?;
            let cam_maps = if flip {
                flip_horizontal_chw(cam.maps())
            } else {
                cam.maps().clone()
            };
            let resized = resize_chw(&cam_maps, h, w)?;
            for (a, v) in acc.iter_mut().zip(resized.data()) {
                *a += v;
            }
            count += 1;
        }
    }

    let inv = 1.0 / count as f64;
    for v in &mut acc {
        *v *= inv;
        // bilinear resampling stays inside the hull but guard the contract
        *v = v.clamp(0.0, 1.0);
    }
    if renormalize {
        for cc in 0..c {
            let slice = &mut acc[cc * hw..(cc + 1) * hw];
            let maxv = slice.iter().cloned().fold(0.0f64, f64::max);
            if maxv > 0.0 {
                for v in slice.iter_mut() {
                    *v /= maxv;
                }
            }
        }
    }
    CamStack::new(Tensor::new(vec![c, h, w], acc)?, present_classes.to_vec(), String::new())
}

/// Threshold rule: a pixel is foreground when its best present-class
/// response strictly exceeds tau; ties at the argmax break toward the
/// lowest class index.
pub fn cams_to_mask(cams: &CamStack, tau: f64) -> Result<PseudoMask> {
    if !(0.0 < tau && tau < 1.0) {
        return Err(IsimError::Config(format!("tau must be in (0,1), got {tau}")));
    }
    let (h, w) = cams.extent();
    let hw = h * w;
    let md = cams.maps().data();
    let mut labels = vec![0u8; hw];
    for s in 0..hw {
        let mut best_class = 0usize;
        let mut best_val = tau;
        for &pc in cams.present_classes() {
            let v = md[(pc - 1) * hw + s];
            if v > best_val {
                best_val = v;
                best_class = pc;
            }
        }
        labels[s] = best_class as u8;
    }
    PseudoMask::new(labels, h, w)
}

pub struct PseudoLabelOutput {
    /// CRF-refined final mask; the CRF argmax fully overrides the
    /// threshold decision.
    pub mask: PseudoMask,
    /// Pre-CRF threshold-only mask, retained for ablation reporting.
    pub threshold_only: PseudoMask,
}

/// Full label-generation step: unary from CAMs, mean-field refinement,
/// per-pixel argmax over background plus the present classes.
pub fn generate_pseudo_label(
    cams: &CamStack,
    image: &Tensor,
    tau: f64,
    crf: &CrfParams,
) -> Result<PseudoLabelOutput> {
    let (h, w) = cams.extent();
    match image.shape() {
        &[ih, iw, 3] if ih == h && iw == w => {}
        other => {
            return Err(IsimError::shape(
                "generate_pseudo_label",
                format!("image shape {other:?} does not match CAM extent {h}x{w}"),
            ))
        }
    }
    let threshold_only = cams_to_mask(cams, tau)?;
    let unary = build_unary(cams, tau)?;
    let beliefs = mean_field_refine(&unary, image, crf)?;
    let mut allowed = vec![0usize];
    allowed.extend(cams.present_classes().iter().copied());
    let labels = beliefs.argmax_restricted(&allowed);
    Ok(PseudoLabelOutput {
        mask: PseudoMask::new(labels, h, w)?,
        threshold_only,
    })
}

// ---------------------------------------------------------------------------
// debug dump: flat binary CAM array with a text header
// ---------------------------------------------------------------------------

const CAM_DUMP_MAGIC: &str = "ISIM-CAM v1";

pub fn write_cam_dump(cams: &CamStack, path: &Path) -> Result<()> {
    let mut f = BufWriter::new(std::fs::File::create(path)?);
    let (h, w) = cams.extent();
    writeln!(f, "{CAM_DUMP_MAGIC}")?;
    writeln!(f, "id = {}", cams.image_id)?;
    writeln!(f, "classes = {}", cams.num_classes())?;
    writeln!(f, "extent = {h},{w}")?;
    let present: Vec<String> = cams
        .present_classes()
        .iter()
        .map(|c| c.to_string())
        .collect();
    writeln!(f, "present = {}", present.join(","))?;
    writeln!(f, "BINARY")?;
    for v in cams.maps().data() {
        f.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_cam_dump(path: &Path) -> Result<CamStack> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut line = String::new();
    let read_trimmed = |r: &mut BufReader<std::fs::File>, line: &mut String| -> Result<String> {
        line.clear();
        if r.read_line(line)? == 0 {
            return Err(IsimError::Parse {
                what: "CAM dump".into(),
                detail: "unexpected end of file".into(),
            });
        }
        Ok(line.trim_end().to_string())
    };
    let bad = |detail: String| IsimError::Parse {
        what: "CAM dump".into(),
        detail,
    };
    if read_trimmed(&mut r, &mut line)? != CAM_DUMP_MAGIC {
        return Err(bad("bad magic".into()));
    }
    let mut id = String::new();
    let mut classes = 0usize;
    let mut extent = (0usize, 0usize);
    let mut present = Vec::new();
    loop {
        let l = read_trimmed(&mut r, &mut line)?;
        if l == "BINARY" {
            break;
        }
        let (key, val) = l
            .split_once(" = ")
            .ok_or_else(|| bad(format!("bad header line {l:?}")))?;
        match key {
            "id" => id = val.to_string(),
            "classes" => classes = val.parse().map_err(|e| bad(format!("classes: {e}")))?,
            "extent" => {
                let (a, b) = val
                    .split_once(',')
                    .ok_or_else(|| bad("extent needs two values".into()))?;
                extent = (
                    a.parse().map_err(|e| bad(format!("extent: {e}")))?,
                    b.parse().map_err(|e| bad(format!("extent: {e}")))?,
                );
            }
            "present" => {
                if !val.is_empty() {
                    present = val
                        .split(',')
                        .map(|v| v.parse::<usize>())
                        .collect::<std::result::Result<_, _>>()
                        .map_err(|e| bad(format!("present: {e}")))?;
                }
            }
            other => return Err(bad(format!("unknown header key {other:?}"))),
        }
    }
    let numel = classes * extent.0 * extent.1;
    let mut buf = vec![0u8; numel * 8];
    r.read_exact(&mut buf)?;
    let data: Vec<f64> = buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    CamStack::new(Tensor::new(vec![classes, extent.0, extent.1], data)?, present, id)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stack(c: usize, h: usize, w: usize, maps: Vec<f64>, present: Vec<usize>) -> CamStack {
        CamStack::new(Tensor::new(vec![c, h, w], maps).unwrap(), present, "t".into()).unwrap()
    }

    #[test]
    fn camstack_rejects_out_of_range_and_absent_activation() {
        assert!(CamStack::new(
            Tensor::new(vec![1, 1, 2], vec![0.5, 1.2]).unwrap(),
            vec![1],
            String::new()
        )
        .is_err());
        // class 1 absent but active
        assert!(CamStack::new(
            Tensor::new(vec![1, 1, 2], vec![0.5, 0.0]).unwrap(),
            vec![],
            String::new()
        )
        .is_err());
    }

    #[test]
    fn cams_to_mask_cases() {
        // all-zero CAMs -> all background
        let m = cams_to_mask(&stack(2, 2, 2, vec![0.0; 8], vec![1, 2]), 0.3).unwrap();
        assert!(m.all_background());

        // boundary behavior: 0.31 foreground, 0.29 background, 0.30 background
        let m = cams_to_mask(&stack(1, 1, 3, vec![0.31, 0.29, 0.30], vec![1]), 0.3).unwrap();
        assert_eq!(m.labels(), &[1, 0, 0]);
        assert!(!m.all_background());

        // argmax picks the stronger class
        let m = cams_to_mask(
            &stack(2, 1, 1, vec![0.4, 0.6], vec![1, 2]),
            0.3,
        )
        .unwrap();
        assert_eq!(m.labels(), &[2]);

        // exact tie breaks toward the lower class index
        let m = cams_to_mask(&stack(2, 1, 1, vec![0.6, 0.6], vec![1, 2]), 0.3).unwrap();
        assert_eq!(m.labels(), &[1]);
    }

    #[test]
    fn threshold_monotonicity() {
        let maps: Vec<f64> = (0..64).map(|i| i as f64 / 63.0).collect();
        let s = stack(1, 8, 8, maps, vec![1]);
        let mut last = usize::MAX;
        for tau in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let fg = cams_to_mask(&s, tau).unwrap().foreground_count();
            assert!(fg <= last);
            last = fg;
        }
    }

    #[test]
    fn generate_pseudo_label_zero_cams_is_background() {
        let s = stack(2, 4, 4, vec![0.0; 32], vec![1, 2]);
        let img = Tensor::new(vec![4, 4, 3], vec![0.5; 48]).unwrap();
        let out = generate_pseudo_label(&s, &img, 0.3, &CrfParams::default()).unwrap();
        assert!(out.mask.all_background());
        assert!(out.threshold_only.all_background());
    }

    #[test]
    fn generate_pseudo_label_zero_pairwise_equals_unary_argmax() {
        let maps: Vec<f64> = (0..16).map(|i| ((i * 5) % 11) as f64 / 10.0).collect();
        let s = stack(1, 4, 4, maps.clone(), vec![1]);
        let img = Tensor::new(vec![4, 4, 3], vec![0.2; 48]).unwrap();
        let crf = CrfParams {
            spatial_weight: 0.0,
            bilateral_weight: 0.0,
            ..CrfParams::default()
        };
        let out = generate_pseudo_label(&s, &img, 0.3, &crf).unwrap();
        // with the tau-as-background-score unary, argmax(fg vs bg) is the
        // strict threshold rule
        for (got, &cam) in out.mask.labels().iter().zip(&maps) {
            let expect = if cam > 0.3 { 1 } else { 0 };
            assert_eq!(*got, expect);
        }
        assert_eq!(out.mask.labels(), out.threshold_only.labels());
    }

    #[test]
    fn cam_dump_round_trip() {
        let dir = std::env::temp_dir().join("isim_cam_dump_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cam.bin");
        let maps: Vec<f64> = (0..24).map(|i| i as f64 / 23.0).collect();
        let mut s = stack(2, 3, 4, maps, vec![1, 2]);
        s.image_id = "img_007".into();
        write_cam_dump(&s, &path).unwrap();
        let r = read_cam_dump(&path).unwrap();
        assert_eq!(r.image_id, "img_007");
        assert_eq!(r.maps().data(), s.maps().data());
        assert_eq!(r.present_classes(), s.present_classes());
    }
}

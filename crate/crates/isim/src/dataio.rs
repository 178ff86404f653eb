//! Synthetic shapes dataset, directory-layout load/save, and the
//! preprocessing/augmentation rules (resize bounds, random flip + crop,
//! identical geometry for image and masks).

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::camops::PseudoMask;
use crate::error::{IsimError, Result};
use crate::numcore::kernels as k;
use crate::numcore::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShapeKind {
    Circle,
    Square,
    Triangle,
}

/// Canonical class registry: class id = canonical index + 1, background 0.
pub const ALL_SHAPE_KINDS: [ShapeKind; 3] = [ShapeKind::Circle, ShapeKind::Square, ShapeKind::Triangle];
pub const NUM_SHAPE_CLASSES: usize = 3;

impl ShapeKind {
    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Circle => "circle",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn from_name(s: &str) -> Result<Self> {
        match s {
            "circle" => Ok(ShapeKind::Circle),
            "square" => Ok(ShapeKind::Square),
            "triangle" => Ok(ShapeKind::Triangle),
            other => Err(IsimError::Dataset(format!("unknown class name {other:?}"))),
        }
    }

    pub fn class_id(self) -> usize {
        ALL_SHAPE_KINDS.iter().position(|&k| k == self).unwrap() + 1
    }

    /// Base color per class, 8-bit RGB; shapes jitter around these.
    fn base_color(self) -> [u8; 3] {
        match self {
            ShapeKind::Circle => [200, 50, 50],
            ShapeKind::Square => [50, 190, 60],
            ShapeKind::Triangle => [60, 70, 210],
        }
    }
}

/// Ground-truth mask, evaluation-only. Training code never consumes this;
/// it is handed to the metric functions alone.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GtMask {
    labels: Vec<u8>,
    height: usize,
    width: usize,
}

impl GtMask {
    pub fn new(labels: Vec<u8>, height: usize, width: usize) -> Result<Self> {
        if labels.len() != height * width {
            return Err(IsimError::shape(
                "GtMask",
                format!("{} labels for {height}x{width}", labels.len()),
            ));
        }
        Ok(GtMask {
            labels,
            height,
            width,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.height, self.width)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    /// (H, W, 3) reals in [0,1], quantized to the 8-bit grid.
    pub image: Tensor,
    /// Multi-hot over the canonical class registry.
    pub class_labels: Vec<f64>,
    pub gt_mask: Option<GtMask>,
}

impl Sample {
    pub fn present_classes(&self) -> Vec<usize> {
        self.class_labels
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.0)
            .map(|(i, _)| i + 1)
            .collect()
    }

    pub fn extent(&self) -> (usize, usize) {
        (self.image.shape()[0], self.image.shape()[1])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ShapesConfig {
    pub num_images: usize,
    pub image_size: usize,
    pub classes: Vec<ShapeKind>,
    pub max_shapes: usize,
    /// Background texture noise amplitude on the [0,1] scale.
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for ShapesConfig {
    fn default() -> Self {
        ShapesConfig {
            num_images: 400,
            image_size: 64,
            classes: ALL_SHAPE_KINDS.to_vec(),
            max_shapes: 2,
            noise_level: 0.05,
            seed: 7,
        }
    }
}

fn quantize(v: f64) -> f64 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

struct ShapeSpec {
    kind: ShapeKind,
    cx: i64,
    cy: i64,
    r: i64,
    color: [f64; 3],
}

fn inside(spec: &ShapeSpec, x: i64, y: i64) -> bool {
    let (dx, dy) = (x - spec.cx, y - spec.cy);
    match spec.kind {
        ShapeKind::Circle => dx * dx + dy * dy <= spec.r * spec.r,
        ShapeKind::Square => dx.abs() <= spec.r && dy.abs() <= spec.r,
        ShapeKind::Triangle => {
            // upward triangle: apex at cy-r, base at cy+r
            if dy < -spec.r || dy > spec.r {
                return false;
            }
            let t = (dy + spec.r) as f64 / (2 * spec.r) as f64;
            (dx.abs() as f64) <= t * spec.r as f64
        }
    }
}

/// Deterministic synthetic dataset: textured background, 1..max_shapes
/// color-coded shapes per image, exact rasterized ground truth.
pub fn generate_shapes_dataset(cfg: &ShapesConfig) -> Result<Vec<Sample>> {
    if cfg.image_size < 32 {
        return Err(IsimError::Config("image_size must be >= 32".into()));
    }
    if cfg.classes.is_empty() || cfg.max_shapes == 0 {
        return Err(IsimError::Config("need at least one class and one shape".into()));
    }
    let size = cfg.image_size as i64;
    let mut samples = Vec::with_capacity(cfg.num_images);
    for idx in 0..cfg.num_images {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ splitmix64(idx as u64 + 1));
        let hw = (size * size) as usize;
        let mut img = vec![0.0f64; hw * 3];
        let base = rng.gen_range(0.35..0.65);
        for px in 0..hw {
            let n = rng.gen_range(-cfg.noise_level..=cfg.noise_level);
            let v = quantize(base + n);
            img[px * 3] = v;
            img[px * 3 + 1] = v;
            img[px * 3 + 2] = v;
        }

        let n_shapes = rng.gen_range(1..=cfg.max_shapes);
        let mut specs = Vec::with_capacity(n_shapes);
        for _ in 0..n_shapes {
            let kind = cfg.classes[rng.gen_range(0..cfg.classes.len())];
            let r = rng.gen_range(size / 8..=size / 4);
            let cx = rng.gen_range(r + 1..size - r - 1);
            let cy = rng.gen_range(r + 1..size - r - 1);
            let bc = kind.base_color();
            let color = [
                quantize(bc[0] as f64 / 255.0 + rng.gen_range(-0.08..0.08)),
                quantize(bc[1] as f64 / 255.0 + rng.gen_range(-0.08..0.08)),
                quantize(bc[2] as f64 / 255.0 + rng.gen_range(-0.08..0.08)),
            ];
            specs.push(ShapeSpec { kind, cx, cy, r, color });
        }

        let mut mask = vec![0u8; hw];
        let mut drawn = 0usize;
        for spec in &specs {
            for y in (spec.cy - spec.r).max(0)..=(spec.cy + spec.r).min(size - 1) {
                for x in (spec.cx - spec.r).max(0)..=(spec.cx + spec.r).min(size - 1) {
                    if inside(spec, x, y) {
                        let px = (y * size + x) as usize;
                        if mask[px] == 0 {
                            drawn += 1;
                        }
                        mask[px] = spec.kind.class_id() as u8;
                        img[px * 3] = spec.color[0];
                        img[px * 3 + 1] = spec.color[1];
                        img[px * 3 + 2] = spec.color[2];
                    }
                }
            }
        }
        debug_assert_eq!(drawn, mask.iter().filter(|&&m| m != 0).count());

        let mut class_labels = vec![0.0f64; NUM_SHAPE_CLASSES];
        for spec in &specs {
            class_labels[spec.kind.class_id() - 1] = 1.0;
        }
        samples.push(Sample {
            id: format!("img_{idx:04}"),
            image: Tensor::new(vec![cfg.image_size, cfg.image_size, 3], img)?,
            class_labels,
            gt_mask: Some(GtMask::new(mask, cfg.image_size, cfg.image_size)?),
        });
    }
    Ok(samples)
}

// ---------------------------------------------------------------------------
// layout conversion helpers
// ---------------------------------------------------------------------------

pub fn chw_from_hwc(t: &Tensor) -> Result<Tensor> {
    let &[h, w, c] = t.shape() else {
        return Err(IsimError::shape("chw_from_hwc", format!("got {:?}", t.shape())));
    };
    let d = t.data();
    let mut out = vec![0.0f64; d.len()];
    for y in 0..h {
        for x in 0..w {
            for cc in 0..c {
                out[(cc * h + y) * w + x] = d[(y * w + x) * c + cc];
            }
        }
    }
    Tensor::new(vec![c, h, w], out)
}

pub fn hwc_from_chw(t: &Tensor) -> Result<Tensor> {
    let &[c, h, w] = t.shape() else {
        return Err(IsimError::shape("hwc_from_chw", format!("got {:?}", t.shape())));
    };
    let d = t.data();
    let mut out = vec![0.0f64; d.len()];
    for y in 0..h {
        for x in 0..w {
            for cc in 0..c {
                out[(y * w + x) * c + cc] = d[(cc * h + y) * w + x];
            }
        }
    }
    Tensor::new(vec![h, w, c], out)
}

// ---------------------------------------------------------------------------
// preprocessing / augmentation
// ---------------------------------------------------------------------------

/// Resize target under the two-sided rule: the longer side is pulled down
/// to `max_side` or up to `min_side`, aspect preserved.
pub fn resize_target(h: usize, w: usize, min_side: usize, max_side: usize) -> (usize, usize) {
    let longer = h.max(w);
    let scale = if longer > max_side {
        max_side as f64 / longer as f64
    } else if longer < min_side {
        min_side as f64 / longer as f64
    } else {
        return (h, w);
    };
    (
        ((h as f64 * scale).round() as usize).max(1),
        ((w as f64 * scale).round() as usize).max(1),
    )
}

fn resize_image_hwc(img: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let chw = chw_from_hwc(img)?;
    let &[c, h, w] = chw.shape() else { unreachable!() };
    let as4 = Tensor::new(vec![1, c, h, w], chw.into_data())?;
    let r = k::upsample_bilinear_fwd(&as4, oh, ow)?;
    hwc_from_chw(&Tensor::new(vec![c, oh, ow], r.into_data())?)
}

/// Nearest-neighbor label resize under the same align-corners coordinate
/// mapping the bilinear image resize uses.
fn resize_labels_nearest(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let map = |dst: usize, src_extent: usize, dst_extent: usize| -> usize {
        if dst_extent <= 1 || src_extent <= 1 {
            return 0;
        }
        let pos = dst as f64 * (src_extent - 1) as f64 / (dst_extent - 1) as f64;
        (pos.round() as usize).min(src_extent - 1)
    };
    let mut out = vec![0u8; oh * ow];
    for y in 0..oh {
        let sy = map(y, h, oh);
        for x in 0..ow {
            out[y * ow + x] = labels[sy * w + map(x, w, ow)];
        }
    }
    out
}

pub struct Augmented {
    /// (3, crop, crop) network input.
    pub image_chw: Tensor,
    pub pseudo: Option<PseudoMask>,
    pub gt: Option<GtMask>,
    pub flipped: bool,
    pub crop_origin: (usize, usize),
}

/// Apply the resize rules, a random horizontal flip, and a random crop;
/// the identical geometric transform hits the image and every mask.
pub fn preprocess_train(
    sample: &Sample,
    pseudo: Option<&PseudoMask>,
    crop: usize,
    bounds: (usize, usize),
    rng: &mut ChaCha8Rng,
) -> Result<Augmented> {
    let (h, w) = sample.extent();
    let (rh, rw) = resize_target(h, w, bounds.0, bounds.1);

    let image = if (rh, rw) == (h, w) {
        sample.image.clone()
    } else {
        resize_image_hwc(&sample.image, rh, rw)?
    };
    let mut pseudo_labels = pseudo.map(|m| {
        let (mh, mw) = m.extent();
        if (rh, rw) == (mh, mw) {
            m.labels().to_vec()
        } else {
            resize_labels_nearest(m.labels(), mh, mw, rh, rw)
        }
    });
    let mut gt_labels = sample.gt_mask.as_ref().map(|m| {
        if (rh, rw) == (h, w) {
            m.labels().to_vec()
        } else {
            resize_labels_nearest(m.labels(), h, w, rh, rw)
        }
    });

    // pad up to the crop extent with background
    let ph = rh.max(crop);
    let pw = rw.max(crop);
    let mut img = vec![0.0f64; ph * pw * 3];
    for y in 0..rh {
        let src = y * rw * 3;
        let dst = y * pw * 3;
        img[dst..dst + rw * 3].copy_from_slice(&image.data()[src..src + rw * 3]);
    }
    let pad_labels = |labels: &[u8]| -> Vec<u8> {
        let mut out = vec![0u8; ph * pw];
        for y in 0..rh {
            out[y * pw..y * pw + rw].copy_from_slice(&labels[y * rw..(y + 1) * rw]);
        }
        out
    };
    if ph != rh || pw != rw {
        pseudo_labels = pseudo_labels.map(|l| pad_labels(&l));
        gt_labels = gt_labels.map(|l| pad_labels(&l));
    }

    let flipped = rng.gen_bool(0.5);
    let oy = rng.gen_range(0..=(ph - crop));
    let ox = rng.gen_range(0..=(pw - crop));

    let mut out_img = vec![0.0f64; crop * crop * 3];
    for y in 0..crop {
        for x in 0..crop {
            let sx = if flipped { ox + crop - 1 - x } else { ox + x };
            let src = ((oy + y) * pw + sx) * 3;
            let dst = (y * crop + x) * 3;
            out_img[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
        }
    }
    let transform_labels = |labels: &[u8]| -> Vec<u8> {
        let mut out = vec![0u8; crop * crop];
        for y in 0..crop {
            for x in 0..crop {
                let sx = if flipped { ox + crop - 1 - x } else { ox + x };
                out[y * crop + x] = labels[(oy + y) * pw + sx];
            }
        }
        out
    };

    let image_hwc = Tensor::new(vec![crop, crop, 3], out_img)?;
    Ok(Augmented {
        image_chw: chw_from_hwc(&image_hwc)?,
        pseudo: match pseudo_labels {
            Some(l) => Some(PseudoMask::new(transform_labels(&l), crop, crop)?),
            None => None,
        },
        gt: match gt_labels {
            Some(l) => Some(GtMask::new(transform_labels(&l), crop, crop)?),
            None => None,
        },
        flipped,
        crop_origin: (oy, ox),
    })
}

// ---------------------------------------------------------------------------
// dataset directory layout: images/*.png, masks/*.png, labels.txt
// ---------------------------------------------------------------------------

pub fn save_dataset_dir(samples: &[Sample], dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir.join("images"))?;
    std::fs::create_dir_all(dir.join("masks"))?;
    let mut manifest = String::new();
    for s in samples {
        let (h, w) = s.extent();
        let mut rgb = image::RgbImage::new(w as u32, h as u32);
        for y in 0..h {
            for x in 0..w {
                let px = (y * w + x) * 3;
                rgb.put_pixel(
                    x as u32,
                    y as u32,
                    image::Rgb([
                        (s.image.data()[px] * 255.0).round() as u8,
                        (s.image.data()[px + 1] * 255.0).round() as u8,
                        (s.image.data()[px + 2] * 255.0).round() as u8,
                    ]),
                );
            }
        }
        rgb.save(dir.join("images").join(format!("{}.png", s.id)))?;
        if let Some(gt) = &s.gt_mask {
            let mut gray = image::GrayImage::new(w as u32, h as u32);
            for y in 0..h {
                for x in 0..w {
                    gray.put_pixel(x as u32, y as u32, image::Luma([gt.labels()[y * w + x]]));
                }
            }
            gray.save(dir.join("masks").join(format!("{}.png", s.id)))?;
        }
        let names: Vec<&str> = s
            .present_classes()
            .iter()
            .map(|&c| ALL_SHAPE_KINDS[c - 1].name())
            .collect();
        manifest.push_str(&format!("{}: {}\n", s.id, names.join(",")));
    }
    std::fs::write(dir.join("labels.txt"), manifest)?;
    Ok(())
}

pub fn load_dataset_dir(dir: &Path) -> Result<Vec<Sample>> {
    let manifest = std::fs::read_to_string(dir.join("labels.txt"))
        .map_err(|e| IsimError::Dataset(format!("cannot read labels.txt: {e}")))?;
    let mut entries: BTreeMap<String, Vec<ShapeKind>> = BTreeMap::new();
    for (lineno, line) in manifest.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let (id, classes) = line.split_once(':').ok_or_else(|| {
            IsimError::Dataset(format!("labels.txt line {}: missing ':'", lineno + 1))
        })?;
        let kinds = classes
            .split(',')
            .map(|c| ShapeKind::from_name(c.trim()))
            .collect::<Result<Vec<_>>>()?;
        entries.insert(id.trim().to_string(), kinds);
    }

    let mut samples = Vec::new();
    for (id, kinds) in entries {
        let img_path = dir.join("images").join(format!("{id}.png"));
        if !img_path.exists() {
            return Err(IsimError::Dataset(format!(
                "manifest id {id:?} has no image file {}",
                img_path.display()
            )));
        }
        let rgb = image::open(&img_path)?.to_rgb8();
        let (w, h) = (rgb.width() as usize, rgb.height() as usize);
        let mut data = vec![0.0f64; h * w * 3];
        for y in 0..h {
            for x in 0..w {
                let p = rgb.get_pixel(x as u32, y as u32);
                let px = (y * w + x) * 3;
                data[px] = p[0] as f64 / 255.0;
                data[px + 1] = p[1] as f64 / 255.0;
                data[px + 2] = p[2] as f64 / 255.0;
            }
        }
        let mask_path = dir.join("masks").join(format!("{id}.png"));
        let gt_mask = if mask_path.exists() {
            let gray = image::open(&mask_path)?.to_luma8();
            if gray.width() as usize != w || gray.height() as usize != h {
                return Err(IsimError::Dataset(format!(
                    "mask {id} extent {}x{} != image {h}x{w}",
                    gray.height(),
                    gray.width()
                )));
            }
            let labels: Vec<u8> = gray.pixels().map(|p| p[0]).collect();
            Some(GtMask::new(labels, h, w)?)
        } else {
            None
        };
        let mut class_labels = vec![0.0f64; NUM_SHAPE_CLASSES];
        for kind in kinds {
            class_labels[kind.class_id() - 1] = 1.0;
        }
        samples.push(Sample {
            id,
            image: Tensor::new(vec![h, w, 3], data)?,
            class_labels,
            gt_mask,
        });
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ShapesConfig {
        ShapesConfig {
            num_images: 6,
            image_size: 32,
            max_shapes: 2,
            seed: 11,
            ..ShapesConfig::default()
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_shapes_dataset(&small_cfg()).unwrap();
        let b = generate_shapes_dataset(&small_cfg()).unwrap();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x, y);
        }
    }

    #[test]
    fn single_class_single_shape_is_one_hot() {
        let cfg = ShapesConfig {
            classes: vec![ShapeKind::Circle],
            max_shapes: 1,
            ..small_cfg()
        };
        for s in generate_shapes_dataset(&cfg).unwrap() {
            assert_eq!(s.class_labels, vec![1.0, 0.0, 0.0]);
        }
    }

    #[test]
    fn gt_labels_subset_of_class_labels() {
        for s in generate_shapes_dataset(&small_cfg()).unwrap() {
            let present = s.present_classes();
            for &l in s.gt_mask.as_ref().unwrap().labels() {
                assert!(l == 0 || present.contains(&(l as usize)));
            }
            assert!(!present.is_empty());
        }
    }

    #[test]
    fn resize_rules() {
        assert_eq!(resize_target(700, 350, 320, 640), (640, 320));
        assert_eq!(resize_target(300, 150, 320, 640), (320, 160));
        assert_eq!(resize_target(500, 250, 320, 640), (500, 250));
    }

    #[test]
    fn augmentation_applies_identical_geometry_to_image_and_masks() {
        // encode the x coordinate in the red channel and in the mask label
        let size = 40;
        let mut img = vec![0.0f64; size * size * 3];
        let mut labels = vec![0u8; size * size];
        for y in 0..size {
            for x in 0..size {
                img[(y * size + x) * 3] = (x % 4) as f64 / 4.0;
                labels[y * size + x] = (x % 4) as u8;
            }
        }
        let sample = Sample {
            id: "t".into(),
            image: Tensor::new(vec![size, size, 3], img).unwrap(),
            class_labels: vec![1.0, 0.0, 0.0],
            gt_mask: Some(GtMask::new(labels.clone(), size, size).unwrap()),
        };
        let pseudo = PseudoMask::new(labels, size, size).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..8 {
            let aug =
                preprocess_train(&sample, Some(&pseudo), 24, (16, 128), &mut rng).unwrap();
            let crop = 24;
            let red = aug.image_chw.data(); // channel 0 first
            let gt = aug.gt.unwrap();
            let ps = aug.pseudo.unwrap();
            for i in 0..crop * crop {
                let expect = gt.labels()[i] as f64 / 4.0;
                assert!((red[i] - expect).abs() < 1e-12);
                assert_eq!(gt.labels()[i], ps.labels()[i]);
            }
        }
    }

    #[test]
    fn dataset_round_trip_through_directory() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let samples = generate_shapes_dataset(&small_cfg()).unwrap();
        save_dataset_dir(&samples, dir).unwrap();
        let loaded = load_dataset_dir(dir).unwrap();
        assert_eq!(samples.len(), loaded.len());
        for (a, b) in samples.iter().zip(&loaded) {
            assert_eq!(a.id, b.id);
            assert_eq!(a.class_labels, b.class_labels);
            assert_eq!(a.image.data(), b.image.data());
            assert_eq!(a.gt_mask, b.gt_mask);
        }
    }

    #[test]
    fn missing_image_for_manifest_id_is_an_error() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        std::fs::create_dir_all(dir.join("images")).unwrap();
        std::fs::write(dir.join("labels.txt"), "ghost: circle\n").unwrap();
        let err = load_dataset_dir(dir).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn empty_masks_dir_loads_without_gt() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path();
        let mut samples = generate_shapes_dataset(&small_cfg()).unwrap();
        for s in &mut samples {
            s.gt_mask = None;
        }
        save_dataset_dir(&samples, dir).unwrap();
        let loaded = load_dataset_dir(dir).unwrap();
        assert!(loaded.iter().all(|s| s.gt_mask.is_none()));
    }
}

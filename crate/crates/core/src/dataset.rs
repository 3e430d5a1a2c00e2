//! Samples on disk and in memory, network-ready views of them, and the
//! synthetic shapes generator used for fixtures and learning checks.

use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{s, Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::colorspace::{self, lab_to_rgb, rgb_to_lab, LabImage, RgbRaster};
use crate::detection::{
    crop_resize_instance, load_annotations, save_annotations, select_box_indices, AnnotationBox, AnnotationFile,
    AnnotationImage, BoundingBox, BoxStrategy, DetectionSet,
};
use crate::error::{Error, Result};
use crate::fusion::InstanceInput;
use crate::ops::BilinearResize;

/// One ground-truth image at its native resolution.
#[derive(Debug, Clone)]
pub struct Sample {
    pub id: String,
    pub lab: LabImage,
    pub detections: DetectionSet,
    /// Per-box binary masks at native resolution, in detection order.
    pub masks: Option<Vec<Array2<f64>>>,
}

/// A sample resampled to the network resolution with normalized planes.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    pub id: String,
    pub l: Array2<f64>,
    pub ab: Array3<f64>,
    pub detections: DetectionSet,
    pub masks: Option<Vec<Array2<f64>>>,
}

/// Normalized L input with its normalized ab target.
#[derive(Debug, Clone)]
pub struct TrainPair {
    pub l: Array2<f64>,
    pub ab: Array3<f64>,
}

/// A full image with the instance inputs chosen for it.
#[derive(Debug, Clone)]
pub struct FusionSample {
    pub l: Array2<f64>,
    pub ab: Array3<f64>,
    pub instances: Vec<InstanceInput>,
    /// Masks of the chosen instances at network resolution, when available.
    pub masks: Option<Vec<Array2<f64>>>,
}

fn resize_plane(p: &Array2<f64>, size: (usize, usize)) -> Array2<f64> {
    if p.dim() == size {
        return p.clone();
    }
    BilinearResize::new(p.dim(), size).plane(p.view())
}

fn resize_mask(m: &Array2<f64>, size: (usize, usize)) -> Array2<f64> {
    if m.dim() == size {
        return m.clone();
    }
    crate::ablation::downsample_mask_nearest(m.view(), size)
}

impl Sample {
    pub fn from_rgb(id: impl Into<String>, rgb: &RgbRaster, detections: DetectionSet, masks: Option<Vec<Array2<f64>>>) -> Result<Self> {
        let lab = rgb_to_lab(rgb)?;
        if detections.width != lab.width() || detections.height != lab.height() {
            return Err(Error::InvalidInput(format!(
                "detections are for {}x{} but the image is {}x{}",
                detections.width,
                detections.height,
                lab.width(),
                lab.height()
            )));
        }
        if let Some(m) = &masks {
            if m.len() != detections.boxes.len() {
                return Err(Error::InvalidInput(format!(
                    "{} masks for {} boxes",
                    m.len(),
                    detections.boxes.len()
                )));
            }
        }
        Ok(Sample {
            id: id.into(),
            lab,
            detections,
            masks,
        })
    }

    pub fn rgb(&self) -> Result<RgbRaster> {
        lab_to_rgb(&self.lab)
    }

    pub fn prepare(&self, resolution: usize) -> PreparedSample {
        let size = (resolution, resolution);
        let l = resize_plane(&self.lab.l, size);
        let mut ab = Array3::zeros((2, resolution, resolution));
        for c in 0..2 {
            let plane = self.lab.ab.slice(s![c, .., ..]).to_owned();
            ab.slice_mut(s![c, .., ..]).assign(&resize_plane(&plane, size));
        }
        PreparedSample {
            id: self.id.clone(),
            l: colorspace::normalize_l(l.view()),
            ab: colorspace::normalize_ab(ab.view()),
            detections: self.detections.rescaled(resolution, resolution),
            masks: self
                .masks
                .as_ref()
                .map(|ms| ms.iter().map(|m| resize_mask(m, size)).collect()),
        }
    }
}

impl PreparedSample {
    pub fn full_pair(&self) -> TrainPair {
        TrainPair {
            l: self.l.clone(),
            ab: self.ab.clone(),
        }
    }

    /// L/ab crops of the selected boxes resized to `side x side`.
    pub fn instance_pairs(&self, strategy: BoxStrategy, side: usize) -> Result<Vec<TrainPair>> {
        select_box_indices(&self.detections, strategy)
            .into_iter()
            .map(|i| {
                let b = &self.detections.boxes[i];
                let mut ab = Array3::zeros((2, side, side));
                for c in 0..2 {
                    ab.slice_mut(s![c, .., ..])
                        .assign(&crop_resize_instance(self.ab.slice(s![c, .., ..]), b, side)?);
                }
                Ok(TrainPair {
                    l: crop_resize_instance(self.l.view(), b, side)?,
                    ab,
                })
            })
            .collect()
    }

    pub fn fusion_sample(&self, strategy: BoxStrategy, side: usize) -> Result<FusionSample> {
        let chosen = select_box_indices(&self.detections, strategy);
        let instances = chosen
            .iter()
            .map(|&i| {
                let bbox = self.detections.boxes[i].clone();
                Ok(InstanceInput {
                    l: crop_resize_instance(self.l.view(), &bbox, side)?,
                    bbox,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let masks = self
            .masks
            .as_ref()
            .map(|ms| chosen.iter().map(|&i| ms[i].clone()).collect());
        Ok(FusionSample {
            l: self.l.clone(),
            ab: self.ab.clone(),
            instances,
            masks,
        })
    }
}

#[derive(Debug, Clone, Default)]
pub struct Dataset {
    pub samples: Vec<Sample>,
    /// Boxes dropped while loading annotations.
    pub dropped_boxes: usize,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn prepare(&self, resolution: usize) -> Vec<PreparedSample> {
        self.samples.iter().map(|s| s.prepare(resolution)).collect()
    }

    /// Loads every annotated image. Masks, when `masks_dir` is given, are read
    /// from `<masks_dir>/<image_id>/<box_index>.png` (nonzero = inside).
    pub fn load(images_dir: &Path, annotations: &Path, masks_dir: Option<&Path>) -> Result<Self> {
        let store = load_annotations(annotations)?;
        let mut samples = Vec::with_capacity(store.images.len());
        for meta in &store.images {
            let path = images_dir.join(&meta.file);
            let rgb = read_rgb(&path)?;
            if rgb.width() != meta.width || rgb.height() != meta.height {
                return Err(Error::Annotation(format!(
                    "{} is {}x{} but annotated as {}x{}",
                    path.display(),
                    rgb.width(),
                    rgb.height(),
                    meta.width,
                    meta.height
                )));
            }
            let dets = store.get(&meta.id).cloned().expect("every image has a set");
            let masks = match masks_dir {
                Some(dir) => Some(
                    (0..dets.boxes.len())
                        .map(|k| read_mask(&dir.join(&meta.id).join(format!("{k}.png")), meta.width, meta.height))
                        .collect::<Result<Vec<_>>>()?,
                ),
                None => None,
            };
            samples.push(Sample::from_rgb(&meta.id, &rgb, dets, masks)?);
        }
        Ok(Dataset {
            samples,
            dropped_boxes: store.dropped,
        })
    }

    /// Writes images, `annotations.json` and (if present) masks under `dir`.
    pub fn save(&self, dir: &Path) -> Result<DatasetPaths> {
        let paths = DatasetPaths::under(dir);
        fs::create_dir_all(&paths.images).map_err(|e| Error::io(format!("creating {}", paths.images.display()), e))?;
        let mut file = AnnotationFile::default();
        for s in &self.samples {
            let name = format!("{}.png", s.id);
            write_rgb(&paths.images.join(&name), &s.rgb()?)?;
            file.images.push(AnnotationImage {
                id: s.id.clone(),
                width: s.lab.width(),
                height: s.lab.height(),
                file: name,
            });
            for b in &s.detections.boxes {
                file.boxes.push(AnnotationBox {
                    image_id: s.id.clone(),
                    bbox: [b.x0, b.y0, b.x1, b.y1],
                    score: b.confidence,
                    label: b.label.clone(),
                });
            }
            if let Some(masks) = &s.masks {
                let mdir = paths.masks.join(&s.id);
                fs::create_dir_all(&mdir).map_err(|e| Error::io(format!("creating {}", mdir.display()), e))?;
                for (k, m) in masks.iter().enumerate() {
                    let img = image::GrayImage::from_fn(m.dim().1 as u32, m.dim().0 as u32, |x, y| {
                        image::Luma([if m[[y as usize, x as usize]] > 0.5 { 255 } else { 0 }])
                    });
                    let p = mdir.join(format!("{k}.png"));
                    img.save(&p).map_err(|e| Error::Image { path: p, source: e })?;
                }
            }
        }
        save_annotations(&paths.annotations, &file)?;
        Ok(paths)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetPaths {
    pub images: PathBuf,
    pub annotations: PathBuf,
    pub masks: PathBuf,
}

impl DatasetPaths {
    pub fn under(dir: &Path) -> Self {
        DatasetPaths {
            images: dir.join("images"),
            annotations: dir.join("annotations.json"),
            masks: dir.join("masks"),
        }
    }
}

pub fn read_rgb(path: &Path) -> Result<RgbRaster> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })?;
    RgbRaster::from_image(&img.to_rgb8())
}

pub fn write_rgb(path: &Path, rgb: &RgbRaster) -> Result<()> {
    rgb.to_image().save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

fn read_mask(path: &Path, width: usize, height: usize) -> Result<Array2<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.to_path_buf(),
            source: e,
        })?
        .to_luma8();
    if img.width() as usize != width || img.height() as usize != height {
        return Err(Error::InvalidInput(format!(
            "mask {} is {}x{}, expected {width}x{height}",
            path.display(),
            img.width(),
            img.height()
        )));
    }
    Ok(Array2::from_shape_fn((height, width), |(y, x)| {
        if img.get_pixel(x as u32, y as u32)[0] > 127 {
            1.0
        } else {
            0.0
        }
    }))
}

/// Settings of the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub size: usize,
    pub max_objects: usize,
    /// Upper bound on unannotated distractor shapes per image.
    pub max_distractors: usize,
    /// Stripe / checker half-period in pixels.
    pub period: usize,
    /// Largest absolute background tint in Lab units.
    pub background_tint: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        SyntheticConfig {
            count: 8,
            size: 64,
            max_objects: 3,
            max_distractors: 2,
            period: 2,
            background_tint: 12.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Texture {
    Horizontal,
    Vertical,
    Checker,
}

const TEXTURES: [Texture; 3] = [Texture::Horizontal, Texture::Vertical, Texture::Checker];

impl Texture {
    fn name(self) -> &'static str {
        match self {
            Texture::Horizontal => "horizontal",
            Texture::Vertical => "vertical",
            Texture::Checker => "checker",
        }
    }

    /// Object chroma for this class, Lab units.
    fn color(self) -> (f64, f64) {
        match self {
            Texture::Horizontal => (48.0, 36.0),
            Texture::Vertical => (-40.0, 38.0),
            Texture::Checker => (12.0, -44.0),
        }
    }

    fn value(self, y: usize, x: usize, half: usize, phase: (usize, usize)) -> f64 {
        let by = ((y + phase.0) / half) % 2;
        let bx = ((x + phase.1) / half) % 2;
        let bit = match self {
            Texture::Horizontal => by,
            Texture::Vertical => bx,
            Texture::Checker => by ^ bx,
        };
        if bit == 1 {
            1.0
        } else {
            -1.0
        }
    }
}

/// A rectangle or inscribed ellipse with its own texture phase and lightness.
struct Shape {
    x0: usize,
    y0: usize,
    w: usize,
    h: usize,
    ellipse: bool,
    phase: (usize, usize),
    lightness: f64,
}

impl Shape {
    fn random<R: Rng>(rng: &mut R, n: usize, lo: usize, hi: usize, period: usize) -> Self {
        let (w, h) = (rng.random_range(lo..=hi), rng.random_range(lo..=hi));
        Shape {
            x0: rng.random_range(0..=n - w),
            y0: rng.random_range(0..=n - h),
            w,
            h,
            ellipse: rng.random_bool(0.5),
            phase: (rng.random_range(0..2 * period), rng.random_range(0..2 * period)),
            lightness: rng.random_range(45.0..60.0),
        }
    }

    fn inside(&self, y: usize, x: usize) -> bool {
        if !self.ellipse {
            return true;
        }
        let dy = (y as f64 + 0.5 - self.y0 as f64 - self.h as f64 / 2.0) / (self.h as f64 / 2.0);
        let dx = (x as f64 + 0.5 - self.x0 as f64 - self.w as f64 / 2.0) / (self.w as f64 / 2.0);
        dx * dx + dy * dy <= 1.0
    }

    /// Paints the shape and returns its pixel mask.
    fn paint(&self, tex: Texture, color: (f64, f64), period: usize, l: &mut Array2<f64>, ab: &mut Array3<f64>) -> Array2<f64> {
        let mut mask = Array2::zeros(l.dim());
        for y in self.y0..self.y0 + self.h {
            for x in self.x0..self.x0 + self.w {
                if self.inside(y, x) {
                    mask[[y, x]] = 1.0;
                    l[[y, x]] = self.lightness + 10.0 * tex.value(y, x, period, self.phase);
                    ab[[0, y, x]] = color.0;
                    ab[[1, y, x]] = color.1;
                }
            }
        }
        mask
    }
}

/// Textured shapes whose chroma is fixed by their texture class, on a
/// textured background scattered with look-alike distractor shapes in random
/// tints. Only the boxes tell objects from distractors, so chroma outside
/// the boxes cannot be inferred from lightness.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<Dataset> {
    if cfg.size < 8 || cfg.count == 0 || cfg.period == 0 {
        return Err(Error::Config("synthetic dataset needs size >= 8, count >= 1, period >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.size;
    let mut samples = Vec::with_capacity(cfg.count);
    for idx in 0..cfg.count {
        let bg_tex = TEXTURES[rng.random_range(0..TEXTURES.len())];
        let bg_phase = (rng.random_range(0..2 * cfg.period), rng.random_range(0..2 * cfg.period));
        let bg_l = rng.random_range(45.0..60.0);
        let tint = cfg.background_tint;
        let bg_ab = (rng.random_range(-tint..=tint), rng.random_range(-tint..=tint));
        let mut l = Array2::from_shape_fn((n, n), |(y, x)| bg_l + 10.0 * bg_tex.value(y, x, cfg.period, bg_phase));
        let mut ab = Array3::zeros((2, n, n));
        ab.slice_mut(s![0, .., ..]).fill(bg_ab.0);
        ab.slice_mut(s![1, .., ..]).fill(bg_ab.1);

        let (lo, hi) = ((n / 5).max(3), (2 * n / 5).max(4));
        // Distractors look exactly like objects but carry a background tint.
        let n_distract = rng.random_range(0..=cfg.max_distractors);
        for _ in 0..n_distract {
            let tex = TEXTURES[rng.random_range(0..TEXTURES.len())];
            let shape = Shape::random(&mut rng, n, lo, hi, cfg.period);
            let color = (rng.random_range(-tint..=tint), rng.random_range(-tint..=tint));
            shape.paint(tex, color, cfg.period, &mut l, &mut ab);
        }

        let n_obj = rng.random_range(1..=cfg.max_objects.max(1));
        let mut dets = DetectionSet::new(format!("synth{idx:04}"), n, n);
        let mut masks: Vec<Array2<f64>> = Vec::with_capacity(n_obj);
        for _ in 0..n_obj {
            let tex = TEXTURES[rng.random_range(0..TEXTURES.len())];
            let shape = Shape::random(&mut rng, n, lo, hi, cfg.period);
            let mask = shape.paint(tex, tex.color(), cfg.period, &mut l, &mut ab);
            // Earlier objects lose the pixels covered by this one.
            for m in &mut masks {
                ndarray::Zip::from(m).and(&mask).for_each(|a, &b| {
                    if b > 0.5 {
                        *a = 0.0;
                    }
                });
            }
            masks.push(mask);
            dets.boxes.push(
                BoundingBox::new(
                    shape.x0 as f64,
                    shape.y0 as f64,
                    (shape.x0 + shape.w) as f64,
                    (shape.y0 + shape.h) as f64,
                    rng.random_range(0.3..1.0),
                )
                .with_label(tex.name()),
            );
        }
        // Round-trip through 8-bit RGB so in-memory samples equal what is written to disk.
        let rgb = lab_to_rgb(&LabImage { l, ab })?;
        let quantized = RgbRaster(rgb.to_u8_scale().mapv(|v| v / 255.0));
        samples.push(Sample::from_rgb(dets.image_id.clone(), &quantized, dets, Some(masks))?);
    }
    Ok(Dataset {
        samples,
        dropped_boxes: 0,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generator_is_deterministic_and_consistent() {
        let cfg = SyntheticConfig {
            count: 4,
            size: 32,
            ..Default::default()
        };
        let a = generate_synthetic(&cfg).unwrap();
        let b = generate_synthetic(&cfg).unwrap();
        assert_eq!(a.len(), 4);
        for (x, y) in a.samples.iter().zip(&b.samples) {
            assert_eq!(x.lab, y.lab);
            assert_eq!(x.detections, y.detections);
            let masks = x.masks.as_ref().unwrap();
            assert_eq!(masks.len(), x.detections.boxes.len());
            for (m, bx) in masks.iter().zip(&x.detections.boxes) {
                let r = bx.pixel_rect();
                for ((yy, xx), &v) in m.indexed_iter() {
                    if v > 0.5 {
                        assert!(r.contains(yy, xx));
                    }
                }
            }
        }
    }

    #[test]
    fn save_load_roundtrip() {
        let cfg = SyntheticConfig {
            count: 3,
            size: 16,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let paths = ds.save(dir.path()).unwrap();
        let back = Dataset::load(&paths.images, &paths.annotations, Some(&paths.masks)).unwrap();
        assert_eq!(back.len(), 3);
        for (x, y) in ds.samples.iter().zip(&back.samples) {
            assert_eq!(x.id, y.id);
            assert_eq!(x.detections, y.detections);
            assert_eq!(x.masks, y.masks);
            for (p, q) in x.lab.l.iter().zip(y.lab.l.iter()) {
                assert!((p - q).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn prepare_resizes_boxes_and_planes() {
        let cfg = SyntheticConfig {
            count: 1,
            size: 32,
            ..Default::default()
        };
        let ds = generate_synthetic(&cfg).unwrap();
        let p = ds.samples[0].prepare(16);
        assert_eq!(p.l.dim(), (16, 16));
        assert_eq!(p.ab.dim(), (2, 16, 16));
        assert_eq!(p.detections.width, 16);
        let b0 = &ds.samples[0].detections.boxes[0];
        assert_eq!(p.detections.boxes[0].x0, b0.x0 / 2.0);
        let pairs = p.instance_pairs(BoxStrategy::GroundTruth, 8).unwrap();
        assert_eq!(pairs.len(), p.detections.boxes.len());
        assert_eq!(pairs[0].l.dim(), (8, 8));
    }
}

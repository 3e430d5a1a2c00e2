//! Object boxes: annotation ingestion, selection strategies, instance crops
//! and projection of boxes onto coarser feature layers.
//!
//! Boxes are half-open pixel rectangles `[x0, x1) x [y0, y1)`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::BilinearResize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: f64,
    pub y0: f64,
    pub x1: f64,
    pub y1: f64,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

impl BoundingBox {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64, confidence: f64) -> Self {
        BoundingBox {
            x0,
            y0,
            x1,
            y1,
            confidence,
            label: None,
        }
    }

    pub fn with_label(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn width(&self) -> f64 {
        self.x1 - self.x0
    }

    pub fn height(&self) -> f64 {
        self.y1 - self.y0
    }

    /// Clamps to `[0, width] x [0, height]`; `None` if nothing of positive area remains.
    pub fn clamped(&self, width: usize, height: usize) -> Option<BoundingBox> {
        let (w, h) = (width as f64, height as f64);
        let b = BoundingBox {
            x0: self.x0.clamp(0.0, w),
            y0: self.y0.clamp(0.0, h),
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            confidence: self.confidence,
            label: self.label.clone(),
        };
        (b.x1 > b.x0 && b.y1 > b.y0).then_some(b)
    }

    /// Integer pixel rectangle covering the box: floor of the start, ceil of the end.
    pub fn pixel_rect(&self) -> PixelRect {
        PixelRect {
            x0: self.x0.floor().max(0.0) as usize,
            y0: self.y0.floor().max(0.0) as usize,
            x1: self.x1.ceil().max(0.0) as usize,
            y1: self.y1.ceil().max(0.0) as usize,
        }
    }
}

/// Integer half-open rectangle in some pixel grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PixelRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl PixelRect {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Self {
        PixelRect { x0, y0, x1, y1 }
    }

    pub fn width(&self) -> usize {
        self.x1.saturating_sub(self.x0)
    }

    pub fn height(&self) -> usize {
        self.y1.saturating_sub(self.y0)
    }

    pub fn is_degenerate(&self) -> bool {
        self.width() == 0 || self.height() == 0
    }

    pub fn contains(&self, y: usize, x: usize) -> bool {
        y >= self.y0 && y < self.y1 && x >= self.x0 && x < self.x1
    }

    pub fn fits(&self, height: usize, width: usize) -> bool {
        self.x1 <= width && self.y1 <= height
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionSet {
    pub image_id: String,
    pub width: usize,
    pub height: usize,
    pub boxes: Vec<BoundingBox>,
}

impl DetectionSet {
    pub fn new(image_id: impl Into<String>, width: usize, height: usize) -> Self {
        DetectionSet {
            image_id: image_id.into(),
            width,
            height,
            boxes: Vec::new(),
        }
    }

    /// Re-expresses all boxes for an image resized to `(height, width)`.
    pub fn rescaled(&self, height: usize, width: usize) -> DetectionSet {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        DetectionSet {
            image_id: self.image_id.clone(),
            width,
            height,
            boxes: self
                .boxes
                .iter()
                .map(|b| BoundingBox {
                    x0: b.x0 * sx,
                    y0: b.y0 * sy,
                    x1: b.x1 * sx,
                    y1: b.y1 * sy,
                    confidence: b.confidence,
                    label: b.label.clone(),
                })
                .collect(),
        }
    }
}

// Annotation file schema.

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationImage {
    pub id: String,
    pub width: usize,
    pub height: usize,
    pub file: String,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AnnotationBox {
    pub image_id: String,
    pub bbox: [f64; 4],
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
pub struct AnnotationFile {
    pub images: Vec<AnnotationImage>,
    pub boxes: Vec<AnnotationBox>,
}

/// Parsed annotations: detection sets keyed by image id, plus image metadata.
#[derive(Debug, Clone, Default)]
pub struct AnnotationStore {
    pub images: Vec<AnnotationImage>,
    pub detections: BTreeMap<String, DetectionSet>,
    /// Boxes dropped because nothing of positive area survived clamping.
    pub dropped: usize,
}

impl AnnotationStore {
    pub fn from_file(file: AnnotationFile) -> Result<Self> {
        let mut detections = BTreeMap::new();
        for img in &file.images {
            if img.width == 0 || img.height == 0 {
                return Err(Error::Annotation(format!("image {} has zero size", img.id)));
            }
            if detections
                .insert(img.id.clone(), DetectionSet::new(&img.id, img.width, img.height))
                .is_some()
            {
                return Err(Error::Annotation(format!("duplicate image id {}", img.id)));
            }
        }
        let mut dropped = 0;
        for b in file.boxes {
            let set = detections.get_mut(&b.image_id).ok_or_else(|| {
                Error::Annotation(format!("box references unknown image {}", b.image_id))
            })?;
            if !(0.0..=1.0).contains(&b.score) || b.bbox.iter().any(|v| !v.is_finite()) {
                return Err(Error::Annotation(format!(
                    "invalid box {:?} score {} for image {}",
                    b.bbox, b.score, b.image_id
                )));
            }
            let [x0, y0, x1, y1] = b.bbox;
            let mut raw = BoundingBox::new(x0, y0, x1, y1, b.score);
            raw.label = b.label;
            match raw.clamped(set.width, set.height) {
                Some(bb) => set.boxes.push(bb),
                None => dropped += 1,
            }
        }
        if dropped > 0 {
            log::warn!("dropped {dropped} degenerate boxes after clamping");
        }
        Ok(AnnotationStore {
            images: file.images,
            detections,
            dropped,
        })
    }

    pub fn get(&self, image_id: &str) -> Option<&DetectionSet> {
        self.detections.get(image_id)
    }
}

pub fn load_annotations(path: &Path) -> Result<AnnotationStore> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading annotations {}", path.display()), e))?;
    let file: AnnotationFile = serde_json::from_str(&text)
        .map_err(|e| Error::Annotation(format!("{}: {e}", path.display())))?;
    AnnotationStore::from_file(file)
}

pub fn save_annotations(path: &Path, file: &AnnotationFile) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(file)?)
        .map_err(|e| Error::io(format!("writing annotations {}", path.display()), e))
}

/// Source of boxes for an image. The shipped implementation reads annotations;
/// a real detector can be slotted in behind the same trait.
pub trait Detector {
    fn detect(&self, image_id: &str, l: ArrayView2<f64>) -> Result<DetectionSet>;
}

/// Detector stub backed by an annotation store.
pub struct AnnotationDetector<'a> {
    pub store: &'a AnnotationStore,
}

impl Detector for AnnotationDetector<'_> {
    fn detect(&self, image_id: &str, l: ArrayView2<f64>) -> Result<DetectionSet> {
        match self.store.get(image_id) {
            Some(set) => Ok(set.clone()),
            None => {
                let (h, w) = l.dim();
                Ok(DetectionSet::new(image_id, w, h))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum BoxStrategy {
    TopK { k: usize },
    RandomK { k: usize, seed: u64 },
    Threshold { tau: f64 },
    GroundTruth,
}

impl Default for BoxStrategy {
    fn default() -> Self {
        BoxStrategy::TopK { k: 8 }
    }
}

pub fn select_boxes(dets: &DetectionSet, strategy: BoxStrategy) -> Vec<BoundingBox> {
    select_box_indices(dets, strategy)
        .into_iter()
        .map(|i| dets.boxes[i].clone())
        .collect()
}

/// Indices into `dets.boxes` of the boxes `select_boxes` would return, in the same order.
pub fn select_box_indices(dets: &DetectionSet, strategy: BoxStrategy) -> Vec<usize> {
    let boxes = &dets.boxes;
    match strategy {
        BoxStrategy::TopK { k } => {
            let mut order: Vec<usize> = (0..boxes.len()).collect();
            // stable sort keeps list order among equal scores
            order.sort_by(|&a, &b| boxes[b].confidence.total_cmp(&boxes[a].confidence));
            order.truncate(k);
            order
        }
        BoxStrategy::RandomK { k, seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let amount = k.min(boxes.len());
            index::sample(&mut rng, boxes.len(), amount).into_vec()
        }
        BoxStrategy::Threshold { tau } => (0..boxes.len()).filter(|&i| boxes[i].confidence >= tau).collect(),
        BoxStrategy::GroundTruth => (0..boxes.len()).collect(),
    }
}

/// Crops `box` out of a plane and bilinearly resizes it to `target x target`.
pub fn crop_resize_instance(plane: ArrayView2<f64>, bbox: &BoundingBox, target: usize) -> Result<Array2<f64>> {
    let (h, w) = plane.dim();
    let r = bbox.pixel_rect();
    if target == 0 {
        return Err(Error::InvalidInput("crop target size must be positive".into()));
    }
    if r.is_degenerate() || !r.fits(h, w) {
        return Err(Error::InvalidInput(format!(
            "box {r:?} is degenerate or outside the {h}x{w} image"
        )));
    }
    let crop = plane.slice(s![r.y0..r.y1, r.x0..r.x1]);
    Ok(BilinearResize::new(crop.dim(), (target, target)).plane(crop))
}

/// Projects a full-image box onto a layer grid of `layer_size = (h, w)`.
///
/// Coordinates scale by `(h/H, w/W)` and round half away from zero; the
/// result is then clamped to the layer and widened to at least one pixel.
pub fn scale_box_to_layer(bbox: &BoundingBox, full_size: (usize, usize), layer_size: (usize, usize)) -> PixelRect {
    let (fh, fw) = (full_size.0 as f64, full_size.1 as f64);
    let (lh, lw) = layer_size;
    let sy = lh as f64 / fh;
    let sx = lw as f64 / fw;
    let round = |v: f64, limit: usize| (v.round().max(0.0) as usize).min(limit);
    let (x0, x1) = widen(round(bbox.x0 * sx, lw), round(bbox.x1 * sx, lw), lw);
    let (y0, y1) = widen(round(bbox.y0 * sy, lh), round(bbox.y1 * sy, lh), lh);
    PixelRect { x0, y0, x1, y1 }
}

fn widen(lo: usize, hi: usize, limit: usize) -> (usize, usize) {
    if hi > lo {
        (lo, hi)
    } else if lo < limit {
        (lo, lo + 1)
    } else {
        (limit - 1, limit)
    }
}

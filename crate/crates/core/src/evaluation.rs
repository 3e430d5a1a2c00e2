//! PSNR / SSIM, the full-image and instance-level evaluation protocols, and
//! an optional perceptual metric plug-in.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use serde::{Serialize, Serializer};

use crate::colorspace::RgbRaster;
use crate::dataset::{Dataset, Sample};
use crate::detection::{DetectionSet, PixelRect};
use crate::error::{Error, Result};

/// Peak value of 8-bit rasters; every protocol metric is computed on this scale.
pub const PEAK_8BIT: f64 = 255.0;

/// Peak signal-to-noise ratio in dB. Identical inputs give `f64::INFINITY`.
pub fn psnr(a: ArrayView3<f64>, b: ArrayView3<f64>, peak: f64) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("psnr of {:?} and {:?}", a.dim(), b.dim())));
    }
    if a.is_empty() {
        return Err(Error::InvalidInput("psnr of empty rasters".into()));
    }
    let mut sum = 0.0;
    ndarray::Zip::from(&a).and(&b).for_each(|&x, &y| sum += (x - y) * (x - y));
    let mse = sum / a.len() as f64;
    if mse == 0.0 {
        return Ok(f64::INFINITY);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimParams {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
    pub peak: f64,
}

impl Default for SsimParams {
    fn default() -> Self {
        SsimParams {
            window: 11,
            sigma: 1.5,
            k1: 0.01,
            k2: 0.03,
            peak: PEAK_8BIT,
        }
    }
}

/// Normalized 1-D Gaussian taps centred on the middle of the window.
pub fn gaussian_window(size: usize, sigma: f64) -> Array1<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let g = Array1::from_shape_fn(size, |i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp());
    let total = g.sum();
    g / total
}

/// Separable valid-mode filtering.
fn filter_valid(x: ArrayView2<f64>, g: &Array1<f64>) -> Array2<f64> {
    let (h, w) = x.dim();
    let k = g.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = Array2::zeros((h, ow));
    for y in 0..h {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (t, &gt) in g.iter().enumerate() {
                acc += gt * x[[y, ox + t]];
            }
            rows[[y, ox]] = acc;
        }
    }
    let mut out = Array2::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = 0.0;
            for (t, &gt) in g.iter().enumerate() {
                acc += gt * rows[[oy + t, ox]];
            }
            out[[oy, ox]] = acc;
        }
    }
    out
}

fn ssim_plane(x: ArrayView2<f64>, y: ArrayView2<f64>, p: &SsimParams, g: &Array1<f64>) -> f64 {
    let c1 = (p.k1 * p.peak).powi(2);
    let c2 = (p.k2 * p.peak).powi(2);
    let mx = filter_valid(x, g);
    let my = filter_valid(y, g);
    let xx = filter_valid((&x * &x).view(), g);
    let yy = filter_valid((&y * &y).view(), g);
    let xy = filter_valid((&x * &y).view(), g);
    let mut total = 0.0;
    ndarray::Zip::from(&mx)
        .and(&my)
        .and(&xx)
        .and(&yy)
        .and(&xy)
        .for_each(|&mx, &my, &xx, &yy, &xy| {
            let (vx, vy, cxy) = (xx - mx * mx, yy - my * my, xy - mx * my);
            // Written so that x == y gives exactly 1.
            let num = (2.0 * mx * my + c1) * (2.0 * cxy + c2);
            let den = (mx * mx + my * my + c1) * (vx + vy + c2);
            total += num / den;
        });
    total / mx.len() as f64
}

/// Mean SSIM of each channel, averaged over channels.
pub fn ssim_with(a: ArrayView3<f64>, b: ArrayView3<f64>, p: &SsimParams) -> Result<f64> {
    if a.dim() != b.dim() {
        return Err(Error::Shape(format!("ssim of {:?} and {:?}", a.dim(), b.dim())));
    }
    let (c, h, w) = a.dim();
    if h < p.window || w < p.window || c == 0 {
        return Err(Error::InvalidInput(format!(
            "ssim needs at least {0}x{0} pixels, got {h}x{w}",
            p.window
        )));
    }
    let g = gaussian_window(p.window, p.sigma);
    let sum: f64 = (0..c)
        .map(|ci| ssim_plane(a.index_axis(Axis(0), ci), b.index_axis(Axis(0), ci), p, &g))
        .sum();
    Ok(sum / c as f64)
}

/// SSIM with the canonical window and constants on 8-bit-range rasters.
pub fn ssim(a: ArrayView3<f64>, b: ArrayView3<f64>) -> Result<f64> {
    ssim_with(a, b, &SsimParams::default())
}

/// External perceptual metric (e.g. a learned distance). Errors and panics are
/// isolated per image.
pub trait PerceptualMetric {
    fn name(&self) -> &str;
    fn compute(&self, pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> std::result::Result<f64, String>;
}

fn run_perceptual(hook: &dyn PerceptualMetric, pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> PerceptualCell {
    match catch_unwind(AssertUnwindSafe(|| hook.compute(pred, gt))) {
        Ok(Ok(v)) => PerceptualCell::Value(v),
        Ok(Err(e)) => PerceptualCell::Failed(e),
        Err(_) => PerceptualCell::Failed("perceptual metric panicked".into()),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Protocol {
    FullImage,
    InstanceLevel,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PerceptualCell {
    Value(f64),
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    /// Image id, or `<image id>#<box index>` for instance rows.
    pub id: String,
    pub psnr_db: f64,
    /// `None` when the raster is smaller than the SSIM window.
    pub ssim: Option<f64>,
    pub perceptual: Option<PerceptualCell>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub protocol: Protocol,
    pub tag: Option<String>,
    pub perceptual_name: Option<String>,
    pub rows: Vec<MetricRow>,
}

fn mean(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (mut sum, mut n) = (0.0, 0usize);
    for v in values {
        sum += v;
        n += 1;
    }
    (n > 0).then(|| sum / n as f64)
}

/// Infinite PSNR (identical rasters) is written as the string "inf".
fn metric<S: Serializer>(v: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
    if v.is_finite() {
        s.serialize_f64(*v)
    } else {
        s.serialize_str(&format_metric(*v))
    }
}

fn opt_metric<S: Serializer>(v: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
    match v {
        Some(v) => metric(v, s),
        None => s.serialize_none(),
    }
}

pub fn format_metric(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".into()
    } else if v == f64::NEG_INFINITY {
        "-inf".into()
    } else {
        format!("{v}")
    }
}

#[derive(Serialize)]
struct RowOut<'a> {
    id: &'a str,
    #[serde(serialize_with = "metric")]
    psnr_db: f64,
    #[serde(serialize_with = "opt_metric")]
    ssim: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perceptual: Option<serde_json::Value>,
}

#[derive(Serialize)]
struct Means {
    count: usize,
    #[serde(serialize_with = "opt_metric")]
    psnr_db: Option<f64>,
    #[serde(serialize_with = "opt_metric")]
    ssim: Option<f64>,
    ssim_count: usize,
    #[serde(skip_serializing_if = "Option::is_none", serialize_with = "opt_metric")]
    perceptual: Option<f64>,
}

#[derive(Serialize)]
struct ReportOut<'a> {
    protocol: Protocol,
    #[serde(skip_serializing_if = "Option::is_none")]
    tag: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    perceptual_metric: Option<&'a str>,
    rows: Vec<RowOut<'a>>,
    mean: Means,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    pub fn mean_psnr(&self) -> Option<f64> {
        mean(self.rows.iter().map(|r| r.psnr_db))
    }

    /// Mean over rows that have an SSIM value.
    pub fn mean_ssim(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| r.ssim))
    }

    /// Mean over rows whose perceptual metric succeeded.
    pub fn mean_perceptual(&self) -> Option<f64> {
        mean(self.rows.iter().filter_map(|r| match r.perceptual {
            Some(PerceptualCell::Value(v)) => Some(v),
            _ => None,
        }))
    }

    fn id_column(&self) -> &'static str {
        match self.protocol {
            Protocol::FullImage => "image_id",
            Protocol::InstanceLevel => "instance_id",
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let out = ReportOut {
            protocol: self.protocol,
            tag: self.tag.as_deref(),
            perceptual_metric: self.perceptual_name.as_deref(),
            rows: self
                .rows
                .iter()
                .map(|r| RowOut {
                    id: &r.id,
                    psnr_db: r.psnr_db,
                    ssim: r.ssim,
                    perceptual: r.perceptual.as_ref().map(|p| match p {
                        PerceptualCell::Value(v) => serde_json::json!(v),
                        PerceptualCell::Failed(e) => serde_json::json!({ "failed": e }),
                    }),
                })
                .collect(),
            mean: Means {
                count: self.count(),
                psnr_db: self.mean_psnr(),
                ssim: self.mean_ssim(),
                ssim_count: self.rows.iter().filter(|r| r.ssim.is_some()).count(),
                perceptual: self.perceptual_name.as_ref().and(self.mean_perceptual()),
            },
        };
        Ok(serde_json::to_string_pretty(&out)?)
    }

    /// CSV with one row per image / instance and a trailing `mean` record.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_p = self.perceptual_name.is_some();
        let mut header = vec![self.id_column(), "psnr_db", "ssim"];
        if with_p {
            header.push("perceptual");
        }
        w.write_record(&header).map_err(csv_err)?;
        let opt = |v: Option<f64>| v.map(format_metric).unwrap_or_default();
        for r in &self.rows {
            let mut rec = vec![r.id.clone(), format_metric(r.psnr_db), opt(r.ssim)];
            if with_p {
                rec.push(match &r.perceptual {
                    Some(PerceptualCell::Value(v)) => format_metric(*v),
                    Some(PerceptualCell::Failed(_)) => "failed".into(),
                    None => String::new(),
                });
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
        let mut footer = vec!["mean".to_string(), opt(self.mean_psnr()), opt(self.mean_ssim())];
        if with_p {
            footer.push(opt(self.mean_perceptual()));
        }
        w.write_record(&footer).map_err(csv_err)?;
        let bytes = w.into_inner().map_err(|e| Error::InvalidInput(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    /// Writes `<stem>.csv` and `<stem>.json` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
        for (ext, text) in [("csv", self.to_csv()?), ("json", self.to_json()?)] {
            let p = dir.join(format!("{stem}.{ext}"));
            fs::write(&p, text).map_err(|e| Error::io(format!("writing {}", p.display()), e))?;
        }
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::InvalidInput(format!("csv: {e}"))
}

/// Anything that turns a sample's lightness into an RGB image of the same size.
pub trait Colorizer {
    fn colorize(&self, sample: &Sample) -> Result<RgbRaster>;
}

/// Returns the ground truth; useful as an upper bound and in tests.
#[derive(Debug, Clone, Copy, Default)]
pub struct GroundTruthColorizer;

impl Colorizer for GroundTruthColorizer {
    fn colorize(&self, sample: &Sample) -> Result<RgbRaster> {
        sample.rgb()
    }
}

fn predict_8bit(model: &dyn Colorizer, sample: &Sample) -> Result<(Array3<f64>, Array3<f64>)> {
    let pred = model.colorize(sample)?;
    let gt = sample.rgb()?;
    if pred.0.dim() != gt.0.dim() {
        return Err(Error::Shape(format!(
            "colorizer returned {:?} for {} of {:?}",
            pred.0.dim(),
            sample.id,
            gt.0.dim()
        )));
    }
    Ok((pred.to_u8_scale(), gt.to_u8_scale()))
}

fn row(id: String, pred: ArrayView3<f64>, gt: ArrayView3<f64>, hook: Option<&dyn PerceptualMetric>) -> Result<MetricRow> {
    let params = SsimParams::default();
    let (_, h, w) = pred.dim();
    Ok(MetricRow {
        id,
        psnr_db: psnr(pred, gt, PEAK_8BIT)?,
        ssim: if h >= params.window && w >= params.window {
            Some(ssim_with(pred, gt, &params)?)
        } else {
            None
        },
        perceptual: hook.map(|hk| run_perceptual(hk, pred, gt)),
    })
}

/// Per-image PSNR/SSIM between recomposed predictions and the ground truth.
pub fn evaluate_full(model: &dyn Colorizer, dataset: &Dataset, hook: Option<&dyn PerceptualMetric>) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut rows = Vec::with_capacity(dataset.len());
    for s in &dataset.samples {
        let (pred, gt) = predict_8bit(model, s)?;
        rows.push(row(s.id.clone(), pred.view(), gt.view(), hook)?);
    }
    Ok(MetricReport {
        protocol: Protocol::FullImage,
        tag: None,
        perceptual_name: hook.map(|h| h.name().to_string()),
        rows,
    })
}

/// The `(prediction, ground truth)` crops of every box, sliced from 8-bit rasters.
pub fn instance_crops(pred: &Array3<f64>, gt: &Array3<f64>, boxes: &DetectionSet) -> Vec<(PixelRect, Array3<f64>, Array3<f64>)> {
    let (_, h, w) = gt.dim();
    boxes
        .boxes
        .iter()
        .filter_map(|b| b.clamped(w, h))
        .map(|b| {
            let r = b.pixel_rect();
            let sl = s![.., r.y0..r.y1, r.x0..r.x1];
            (r, pred.slice(sl).to_owned(), gt.slice(sl).to_owned())
        })
        .collect()
}

/// Metrics on ground-truth box crops, averaged over instances rather than
/// images. `gt_boxes[i]` belongs to `dataset.samples[i]`.
pub fn evaluate_instance_level(
    model: &dyn Colorizer,
    dataset: &Dataset,
    gt_boxes: &[DetectionSet],
    hook: Option<&dyn PerceptualMetric>,
) -> Result<MetricReport> {
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if gt_boxes.len() != dataset.len() {
        return Err(Error::InvalidInput(format!(
            "{} box sets for {} images",
            gt_boxes.len(),
            dataset.len()
        )));
    }
    let mut rows = Vec::new();
    for (s, boxes) in dataset.samples.iter().zip(gt_boxes) {
        if boxes.boxes.is_empty() {
            continue;
        }
        let (pred, gt) = predict_8bit(model, s)?;
        for (k, (_, p, g)) in instance_crops(&pred, &gt, boxes).into_iter().enumerate() {
            rows.push(row(format!("{}#{k}", s.id), p.view(), g.view(), hook)?);
        }
    }
    Ok(MetricReport {
        protocol: Protocol::InstanceLevel,
        tag: None,
        perceptual_name: hook.map(|h| h.name().to_string()),
        rows,
    })
}

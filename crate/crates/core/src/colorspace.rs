//! sRGB (D65) <-> CIE L*a*b* conversion and L / ab plane handling.

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};

use crate::error::{Error, Result};

/// Linear sRGB -> XYZ (D65), IEC 61966-2-1 primaries.
const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.412_456_4, 0.357_576_1, 0.180_437_5],
    [0.212_672_9, 0.715_152_2, 0.072_175_0],
    [0.019_333_9, 0.119_192_0, 0.950_304_1],
];

const EPSILON: f64 = 216.0 / 24389.0;
const KAPPA: f64 = 24389.0 / 27.0;

/// Scale applied to ab before it enters a network.
pub const AB_SCALE: f64 = 128.0;

fn white_point() -> [f64; 3] {
    // Row sums, so that sRGB white lands exactly on a = b = 0.
    let mut w = [0.0; 3];
    for (wi, row) in w.iter_mut().zip(RGB_TO_XYZ.iter()) {
        *wi = row.iter().sum();
    }
    w
}

fn xyz_to_rgb_matrix() -> [[f64; 3]; 3] {
    let m = RGB_TO_XYZ;
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (r, inv_row) in inv.iter_mut().enumerate() {
        for (c, v) in inv_row.iter_mut().enumerate() {
            // cofactor of (c, r)
            let (r1, r2) = ((c + 1) % 3, (c + 2) % 3);
            let (c1, c2) = ((r + 1) % 3, (r + 2) % 3);
            *v = (m[r1][c1] * m[r2][c2] - m[r1][c2] * m[r2][c1]) / det;
        }
    }
    inv
}

fn srgb_to_linear(v: f64) -> f64 {
    if v <= 0.04045 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn linear_to_srgb(v: f64) -> f64 {
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

fn lab_f(t: f64) -> f64 {
    if t > EPSILON {
        t.cbrt()
    } else {
        (KAPPA * t + 16.0) / 116.0
    }
}

fn lab_f_inv(f: f64) -> f64 {
    let f3 = f * f * f;
    if f3 > EPSILON {
        f3
    } else {
        (116.0 * f - 16.0) / KAPPA
    }
}

/// Converts one unit-range sRGB pixel to `[L, a, b]`.
pub fn rgb_pixel_to_lab(rgb: [f64; 3]) -> [f64; 3] {
    let lin = rgb.map(srgb_to_linear);
    let wp = white_point();
    let mut f = [0.0; 3];
    for i in 0..3 {
        let xyz = RGB_TO_XYZ[i][0] * lin[0] + RGB_TO_XYZ[i][1] * lin[1] + RGB_TO_XYZ[i][2] * lin[2];
        f[i] = lab_f(xyz / wp[i]);
    }
    [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])]
}

/// Converts `[L, a, b]` to unit-range sRGB, clipped to `[0, 1]`.
///
/// L is clamped to `[0, 100]`; zero lightness carries no chroma and renders black.
pub fn lab_pixel_to_rgb(lab: [f64; 3]) -> [f64; 3] {
    let l = lab[0].clamp(0.0, 100.0);
    if l == 0.0 {
        return [0.0; 3];
    }
    let lab = [l, lab[1], lab[2]];
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let wp = white_point();
    let xyz = [lab_f_inv(fx) * wp[0], lab_f_inv(fy) * wp[1], lab_f_inv(fz) * wp[2]];
    let inv = xyz_to_rgb_matrix();
    let mut out = [0.0; 3];
    for (i, o) in out.iter_mut().enumerate() {
        let lin = inv[i][0] * xyz[0] + inv[i][1] * xyz[1] + inv[i][2] * xyz[2];
        *o = linear_to_srgb(lin.clamp(0.0, 1.0)).clamp(0.0, 1.0);
    }
    out
}

/// A unit-range RGB raster stored as `(3, height, width)`.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbRaster(pub Array3<f64>);

impl RgbRaster {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c != 3 {
            return Err(Error::InvalidInput(format!("expected 3 channels, got {c}")));
        }
        if h == 0 || w == 0 {
            return Err(Error::InvalidInput("empty raster".into()));
        }
        if let Some(v) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!(
                "pixel value {v} outside [0, 1]"
            )));
        }
        Ok(RgbRaster(data))
    }

    pub fn from_image(img: &image::RgbImage) -> Result<Self> {
        let (w, h) = img.dimensions();
        if w == 0 || h == 0 {
            return Err(Error::InvalidInput("empty raster".into()));
        }
        let data = Array3::from_shape_fn((3, h as usize, w as usize), |(c, y, x)| {
            img.get_pixel(x as u32, y as u32)[c] as f64 / 255.0
        });
        Ok(RgbRaster(data))
    }

    pub fn to_image(&self) -> image::RgbImage {
        let (_, h, w) = self.0.dim();
        image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
            let px = |c: usize| (self.0[[c, y as usize, x as usize]] * 255.0).round().clamp(0.0, 255.0) as u8;
            image::Rgb([px(0), px(1), px(2)])
        })
    }

    /// Values rescaled to `[0, 255]` after 8-bit quantization.
    pub fn to_u8_scale(&self) -> Array3<f64> {
        self.0.mapv(|v| (v * 255.0).round().clamp(0.0, 255.0))
    }

    pub fn height(&self) -> usize {
        self.0.dim().1
    }

    pub fn width(&self) -> usize {
        self.0.dim().2
    }
}

/// An image as lightness plus two chrominance planes.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    /// `(height, width)`, nominally in `[0, 100]`.
    pub l: Array2<f64>,
    /// `(2, height, width)`, nominally in `[-128, 127]`.
    pub ab: Array3<f64>,
}

impl LabImage {
    pub fn new(l: Array2<f64>, ab: Array3<f64>) -> Result<Self> {
        merge_channels(l, ab)
    }

    pub fn height(&self) -> usize {
        self.l.dim().0
    }

    pub fn width(&self) -> usize {
        self.l.dim().1
    }
}

pub fn rgb_to_lab(img: &RgbRaster) -> Result<LabImage> {
    let (_, h, w) = img.0.dim();
    if h == 0 || w == 0 {
        return Err(Error::InvalidInput("empty raster".into()));
    }
    let mut l = Array2::zeros((h, w));
    let mut ab = Array3::zeros((2, h, w));
    for y in 0..h {
        for x in 0..w {
            let p = [img.0[[0, y, x]], img.0[[1, y, x]], img.0[[2, y, x]]];
            if p.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::InvalidInput(format!(
                    "pixel ({x}, {y}) = {p:?} outside [0, 1]"
                )));
            }
            let lab = rgb_pixel_to_lab(p);
            l[[y, x]] = lab[0];
            ab[[0, y, x]] = lab[1];
            ab[[1, y, x]] = lab[2];
        }
    }
    Ok(LabImage { l, ab })
}

pub fn lab_to_rgb(img: &LabImage) -> Result<RgbRaster> {
    if img.l.iter().chain(img.ab.iter()).any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("non-finite Lab value".into()));
    }
    let (h, w) = img.l.dim();
    let mut out = Array3::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            let rgb = lab_pixel_to_rgb([img.l[[y, x]], img.ab[[0, y, x]], img.ab[[1, y, x]]]);
            for c in 0..3 {
                out[[c, y, x]] = rgb[c];
            }
        }
    }
    Ok(RgbRaster(out))
}

pub fn split_channels(img: &LabImage) -> (Array2<f64>, Array3<f64>) {
    (img.l.clone(), img.ab.clone())
}

pub fn merge_channels(l: Array2<f64>, ab: Array3<f64>) -> Result<LabImage> {
    let (h, w) = l.dim();
    if ab.dim() != (2, h, w) {
        return Err(Error::Shape(format!(
            "L plane is {h}x{w} but ab is {:?}",
            ab.dim()
        )));
    }
    Ok(LabImage { l, ab })
}

/// `L / 50 - 1`, mapping `[0, 100]` to `[-1, 1]`.
pub fn normalize_l(l: ArrayView2<f64>) -> Array2<f64> {
    l.mapv(|v| v / 50.0 - 1.0)
}

pub fn denormalize_l(l: ArrayView2<f64>) -> Array2<f64> {
    l.mapv(|v| (v + 1.0) * 50.0)
}

pub fn normalize_ab(ab: ArrayView3<f64>) -> Array3<f64> {
    ab.mapv(|v| v / AB_SCALE)
}

pub fn denormalize_ab(ab: ArrayView3<f64>) -> Array3<f64> {
    ab.mapv(|v| v * AB_SCALE)
}

/// Lightness-only RGB rendering (ab = 0).
pub fn grayscale_rgb(l: ArrayView2<f64>) -> Result<RgbRaster> {
    let (h, w) = l.dim();
    lab_to_rgb(&LabImage {
        l: l.to_owned(),
        ab: Array3::zeros((2, h, w)),
    })
}

/// Lightness plane of an RGB raster; grayscale inputs are read as RGB.
pub fn lightness_of(img: &RgbRaster) -> Result<Array2<f64>> {
    Ok(rgb_to_lab(img)?.l)
}

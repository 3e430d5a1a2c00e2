//! Differentiable tensor kernels shared by the backbone, the weight heads and
//! the retargeting code. Every forward has a matching adjoint; feature maps are
//! `(channels, height, width)` arrays of `f64`.

use ndarray::{s, Array1, Array2, Array3, ArrayView1, ArrayView2, ArrayView3, ArrayView4, Axis};

/// Cached input of a convolution, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Array2<f64>,
    in_shape: (usize, usize, usize),
    out_hw: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeometry {
    pub const SAME3: ConvGeometry = ConvGeometry {
        kernel: 3,
        stride: 1,
        pad: 1,
    };
    pub const DOWN3: ConvGeometry = ConvGeometry {
        kernel: 3,
        stride: 2,
        pad: 1,
    };
    pub const POINT: ConvGeometry = ConvGeometry {
        kernel: 1,
        stride: 1,
        pad: 0,
    };

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let oh = (h + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (w + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }
}

fn im2col(x: ArrayView3<f64>, g: ConvGeometry) -> (Array2<f64>, (usize, usize)) {
    let (c, h, w) = x.dim();
    let (oh, ow) = g.output_size(h, w);
    let k = g.kernel;
    let mut cols = Array2::<f64>::zeros((c * k * k, oh * ow));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let mut dst = cols.row_mut(row);
                let dst = dst.as_slice_mut().expect("row-major cols");
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        dst[oy * ow + ox] = x[[ci, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    (cols, (oh, ow))
}

fn col2im(cols: &Array2<f64>, in_shape: (usize, usize, usize), out_hw: (usize, usize), g: ConvGeometry) -> Array3<f64> {
    let (c, h, w) = in_shape;
    let (oh, ow) = out_hw;
    let k = g.kernel;
    let mut x = Array3::<f64>::zeros((c, h, w));
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = cols.row(row);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[ci, iy as usize, ix as usize]] += src[oy * ow + ox];
                    }
                }
            }
        }
    }
    x
}

/// 2-D convolution with bias. `weight` is `(out, in, k, k)`.
pub fn conv2d(
    x: ArrayView3<f64>,
    weight: ArrayView4<f64>,
    bias: ArrayView1<f64>,
    g: ConvGeometry,
) -> (Array3<f64>, ConvCache) {
    let (out_c, in_c, kh, kw) = weight.dim();
    assert_eq!(in_c, x.dim().0, "conv input channels");
    assert_eq!((kh, kw), (g.kernel, g.kernel), "conv kernel size");
    let (cols, (oh, ow)) = im2col(x, g);
    let wmat = weight
        .to_shape((out_c, in_c * kh * kw))
        .expect("contiguous conv weight");
    let mut out = wmat.dot(&cols);
    for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(bias.iter()) {
        row += b;
    }
    let out = out
        .into_shape_with_order((out_c, oh, ow))
        .expect("conv output reshape");
    let cache = ConvCache {
        cols,
        in_shape: x.dim(),
        out_hw: (oh, ow),
    };
    (out, cache)
}

/// Adjoint of [`conv2d`]. Returns `(grad_input, grad_weight, grad_bias)`.
pub fn conv2d_backward(
    cache: &ConvCache,
    weight: ArrayView4<f64>,
    grad_out: ArrayView3<f64>,
    g: ConvGeometry,
) -> (Array3<f64>, Array2<f64>, Array1<f64>) {
    let (out_c, in_c, kh, kw) = weight.dim();
    let (oh, ow) = cache.out_hw;
    let gmat = grad_out
        .to_shape((out_c, oh * ow))
        .expect("contiguous conv grad");
    let grad_w = gmat.dot(&cache.cols.t());
    let grad_b = gmat.sum_axis(Axis(1));
    let wmat = weight
        .to_shape((out_c, in_c * kh * kw))
        .expect("contiguous conv weight");
    let grad_cols = wmat.t().dot(&gmat);
    let grad_x = col2im(&grad_cols, cache.in_shape, cache.out_hw, g);
    (grad_x, grad_w, grad_b)
}

pub fn relu(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| if v > 0.0 { v } else { 0.0 });
}

/// Masks `grad` by the sign of the (post-activation) output.
pub fn relu_backward(out: &Array3<f64>, grad: &mut Array3<f64>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Nearest-neighbour ×2 upsampling.
pub fn upsample2(x: ArrayView3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ci, y, xx)| x[[ci, y / 2, xx / 2]])
}

pub fn upsample2_backward(grad: ArrayView3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad.dim();
    let mut out = Array3::<f64>::zeros((c, h2 / 2, w2 / 2));
    for ((ci, y, x), &g) in grad.indexed_iter() {
        out[[ci, y / 2, x / 2]] += g;
    }
    out
}

/// Per-axis interpolation taps: output index -> (lo, hi, weight_lo, weight_hi).
#[derive(Debug, Clone)]
struct AxisTaps(Vec<(usize, usize, f64, f64)>);

impl AxisTaps {
    /// Half-pixel-centre sampling with edge clamping.
    fn new(src: usize, dst: usize) -> Self {
        let scale = src as f64 / dst as f64;
        let taps = (0..dst)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                let frac = pos - lo as f64;
                (lo, hi, 1.0 - frac, frac)
            })
            .collect();
        AxisTaps(taps)
    }
}

/// A precomputed bilinear resampling operator between two plane sizes.
#[derive(Debug, Clone)]
pub struct BilinearResize {
    src: (usize, usize),
    dst: (usize, usize),
    rows: AxisTaps,
    cols: AxisTaps,
}

impl BilinearResize {
    /// Panics on zero-sized source or destination.
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        assert!(src.0 > 0 && src.1 > 0 && dst.0 > 0 && dst.1 > 0, "empty resize");
        BilinearResize {
            src,
            dst,
            rows: AxisTaps::new(src.0, dst.0),
            cols: AxisTaps::new(src.1, dst.1),
        }
    }

    pub fn dst(&self) -> (usize, usize) {
        self.dst
    }

    pub fn plane(&self, x: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(x.dim(), self.src, "resize source shape");
        let (dh, dw) = self.dst;
        let mut out = Array2::<f64>::zeros((dh, dw));
        for (oy, &(y0, y1, wy0, wy1)) in self.rows.0.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in self.cols.0.iter().enumerate() {
                out[[oy, ox]] = wy0 * (wx0 * x[[y0, x0]] + wx1 * x[[y0, x1]])
                    + wy1 * (wx0 * x[[y1, x0]] + wx1 * x[[y1, x1]]);
            }
        }
        out
    }

    /// Transpose of [`BilinearResize::plane`].
    pub fn plane_adjoint(&self, g: ArrayView2<f64>) -> Array2<f64> {
        assert_eq!(g.dim(), self.dst, "resize adjoint shape");
        let mut out = Array2::<f64>::zeros(self.src);
        for (oy, &(y0, y1, wy0, wy1)) in self.rows.0.iter().enumerate() {
            for (ox, &(x0, x1, wx0, wx1)) in self.cols.0.iter().enumerate() {
                let v = g[[oy, ox]];
                out[[y0, x0]] += wy0 * wx0 * v;
                out[[y0, x1]] += wy0 * wx1 * v;
                out[[y1, x0]] += wy1 * wx0 * v;
                out[[y1, x1]] += wy1 * wx1 * v;
            }
        }
        out
    }

    pub fn feature(&self, x: ArrayView3<f64>) -> Array3<f64> {
        let c = x.dim().0;
        let mut out = Array3::<f64>::zeros((c, self.dst.0, self.dst.1));
        for ci in 0..c {
            out.slice_mut(s![ci, .., ..])
                .assign(&self.plane(x.slice(s![ci, .., ..])));
        }
        out
    }

    pub fn feature_adjoint(&self, g: ArrayView3<f64>) -> Array3<f64> {
        let c = g.dim().0;
        let mut out = Array3::<f64>::zeros((c, self.src.0, self.src.1));
        for ci in 0..c {
            out.slice_mut(s![ci, .., ..])
                .assign(&self.plane_adjoint(g.slice(s![ci, .., ..])));
        }
        out
    }
}

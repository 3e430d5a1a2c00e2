//! Encoder-decoder colorization network with per-layer feature taps.
//!
//! Every tappable layer is one 3x3 convolution followed by ReLU. A layer whose
//! stride doubles uses a stride-2 convolution; a layer whose stride halves
//! upsamples its input (nearest, x2) first and adds a 1x1 shortcut from the
//! last encoder layer at the same resolution. A 1x1 convolution after the
//! final layer produces the two normalized ab channels.

use ndarray::{Array2, Array3, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ops::{self, ConvCache, ConvGeometry};
use crate::params::{config_hash, ParamSet};

/// A layer activation, `(channels, height, width)`.
pub type FeatureMap = Array3<f64>;

pub const PAPER_CHANNELS: [usize; 13] = [64, 128, 256, 512, 512, 512, 512, 256, 256, 128, 128, 128, 128];
pub const PAPER_STRIDES: [usize; 13] = [1, 2, 4, 8, 8, 8, 8, 4, 4, 2, 2, 1, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub layer_channels: Vec<usize>,
    /// Spatial stride of each layer relative to the input.
    pub scale_profile: Vec<usize>,
    pub base_resolution: usize,
    /// Layer indices where instance features are fused in.
    pub fusion_layers: Vec<usize>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Serialize)]
struct Architecture<'a> {
    layer_channels: &'a [usize],
    scale_profile: &'a [usize],
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Same,
    Down,
    /// Upsampling layer with a shortcut from the given earlier layer.
    Up { skip: usize },
}

impl BackboneConfig {
    /// The 13-layer configuration with the published channel widths.
    pub fn paper() -> Self {
        BackboneConfig {
            layer_channels: PAPER_CHANNELS.to_vec(),
            scale_profile: PAPER_STRIDES.to_vec(),
            base_resolution: 256,
            fusion_layers: (0..13).collect(),
            seed: 0,
        }
    }

    /// A small configuration with a stride schedule derived from the layer count:
    /// up to three downsamplings at the start, matching upsamplings at the end.
    pub fn toy(layer_channels: Vec<usize>, base_resolution: usize) -> Self {
        let n = layer_channels.len();
        let down = (n.saturating_sub(1) / 2).min(3);
        let mut strides = Vec::with_capacity(n);
        for i in 0..n {
            let from_start = i.min(down);
            let from_end = (n - 1 - i).min(down);
            strides.push(1usize << from_start.min(from_end));
        }
        BackboneConfig {
            fusion_layers: (0..n).collect(),
            layer_channels,
            scale_profile: strides,
            base_resolution,
            seed: 0,
        }
    }

    pub fn num_layers(&self) -> usize {
        self.layer_channels.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.layer_channels.len();
        if n < 2 {
            return Err(Error::Config("at least two layers are required".into()));
        }
        if self.layer_channels.contains(&0) {
            return Err(Error::Config("layer channel counts must be positive".into()));
        }
        if self.scale_profile.len() != n {
            return Err(Error::Config(format!(
                "scale profile has {} entries for {n} layers",
                self.scale_profile.len()
            )));
        }
        let mut prev = 1;
        for (j, &s) in self.scale_profile.iter().enumerate() {
            if !(s == prev || s == 2 * prev || 2 * s == prev) {
                return Err(Error::Config(format!(
                    "layer {j} stride {s} does not follow {prev} by a factor of 1 or 2"
                )));
            }
            prev = s;
        }
        if prev != 1 {
            return Err(Error::Config("the last layer must be at input resolution".into()));
        }
        if self.base_resolution == 0 || !self.base_resolution.is_multiple_of(self.max_stride()) {
            return Err(Error::Config(format!(
                "base resolution {} is not divisible by the maximum stride {}",
                self.base_resolution,
                self.max_stride()
            )));
        }
        if let Some(&j) = self.fusion_layers.iter().find(|&&j| j >= n) {
            return Err(Error::Config(format!("fusion layer {j} out of range")));
        }
        self.layer_kinds()?;
        Ok(())
    }

    pub fn max_stride(&self) -> usize {
        self.scale_profile.iter().copied().max().unwrap_or(1)
    }

    /// Index of the last layer at the coarsest stride; layers up to it form the encoder.
    pub fn bottleneck_end(&self) -> usize {
        let max = self.max_stride();
        self.scale_profile
            .iter()
            .rposition(|&s| s == max)
            .unwrap_or(0)
    }

    pub fn encoder_layers(&self) -> Vec<usize> {
        (0..=self.bottleneck_end()).collect()
    }

    pub fn decoder_layers(&self) -> Vec<usize> {
        (self.bottleneck_end() + 1..self.num_layers()).collect()
    }

    pub fn layer_kinds(&self) -> Result<Vec<LayerKind>> {
        let mut kinds = Vec::with_capacity(self.num_layers());
        let mut prev = 1;
        let enc_end = self.bottleneck_end();
        for (j, &s) in self.scale_profile.iter().enumerate() {
            let kind = if s == prev {
                LayerKind::Same
            } else if s > prev {
                LayerKind::Down
            } else {
                let skip = (0..j.min(enc_end + 1))
                    .rev()
                    .find(|&k| self.scale_profile[k] == s)
                    .ok_or_else(|| Error::Config(format!("layer {j} has no encoder layer at stride {s}")))?;
                LayerKind::Up { skip }
            };
            kinds.push(kind);
            prev = s;
        }
        Ok(kinds)
    }

    /// Spatial size of layer `j` for an `h x w` input.
    pub fn layer_size(&self, j: usize, h: usize, w: usize) -> (usize, usize) {
        let s = self.scale_profile[j];
        (h / s, w / s)
    }

    pub fn check_input(&self, h: usize, w: usize) -> Result<()> {
        let m = self.max_stride();
        if h == 0 || w == 0 || !h.is_multiple_of(m) || !w.is_multiple_of(m) {
            return Err(Error::Shape(format!(
                "input {h}x{w} is not divisible by the maximum stride {m}"
            )));
        }
        Ok(())
    }

    /// Hash of the parameter-shaping fields only.
    pub fn architecture_hash(&self) -> String {
        config_hash(&Architecture {
            layer_channels: &self.layer_channels,
            scale_profile: &self.scale_profile,
        })
    }

    pub fn same_architecture(&self, other: &BackboneConfig) -> bool {
        self.layer_channels == other.layer_channels && self.scale_profile == other.scale_profile
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FullImage,
    Instance,
}

#[derive(Debug, Clone)]
struct LayerParams {
    kind: LayerKind,
    conv: (usize, usize),
    skip: Option<(usize, usize)>,
}

#[derive(Debug, Clone)]
pub struct ColorizationNetwork {
    config: BackboneConfig,
    pub params: ParamSet,
    pub role: Role,
    layers: Vec<LayerParams>,
    head: (usize, usize),
}

/// Intermediate values of one layer needed by its backward pass.
#[derive(Debug, Clone)]
pub struct LayerCache {
    conv: ConvCache,
    skip: Option<ConvCache>,
    out: Array3<f64>,
}

/// Record of a plain forward pass.
#[derive(Debug, Clone)]
pub struct Trace {
    pub ab: Array3<f64>,
    pub taps: Vec<FeatureMap>,
    layers: Vec<LayerCache>,
    head: ConvCache,
}

impl ColorizationNetwork {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn num_params(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Replaces the parameters, checking names and shapes against the config.
    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(self)
    }

    pub fn layer_forward(&self, j: usize, prev: &Array3<f64>, acts: &[FeatureMap]) -> (FeatureMap, LayerCache) {
        let lp = &self.layers[j];
        let w = self.params.conv_weight(lp.conv.0);
        let b = self.params.vector(lp.conv.1);
        let (mut out, conv, skip) = match lp.kind {
            LayerKind::Same => {
                let (o, c) = ops::conv2d(prev.view(), w, b, ConvGeometry::SAME3);
                (o, c, None)
            }
            LayerKind::Down => {
                let (o, c) = ops::conv2d(prev.view(), w, b, ConvGeometry::DOWN3);
                (o, c, None)
            }
            LayerKind::Up { skip } => {
                let up = ops::upsample2(prev.view());
                let (mut o, c) = ops::conv2d(up.view(), w, b, ConvGeometry::SAME3);
                let (sw, sb) = lp.skip.expect("up layer has a shortcut");
                let (s, sc) = ops::conv2d(
                    acts[skip].view(),
                    self.params.conv_weight(sw),
                    self.params.vector(sb),
                    ConvGeometry::POINT,
                );
                o += &s;
                (o, c, Some(sc))
            }
        };
        ops::relu(&mut out);
        let cache = LayerCache {
            conv,
            skip,
            out: out.clone(),
        };
        (out, cache)
    }

    /// Backward through layer `j`. Returns the gradient for the previous
    /// activation and, for upsampling layers, `(skip_layer, gradient)`.
    pub fn layer_backward(
        &self,
        j: usize,
        cache: &LayerCache,
        mut grad: Array3<f64>,
        grads: Option<&mut ParamSet>,
    ) -> (Array3<f64>, Option<(usize, Array3<f64>)>) {
        let lp = &self.layers[j];
        ops::relu_backward(&cache.out, &mut grad);
        let w = self.params.conv_weight(lp.conv.0);
        let geometry = match lp.kind {
            LayerKind::Down => ConvGeometry::DOWN3,
            _ => ConvGeometry::SAME3,
        };
        let (gin, gw, gb) = ops::conv2d_backward(&cache.conv, w, grad.view(), geometry);
        let mut skip_grad = None;
        let mut grads = grads;
        if let LayerKind::Up { skip } = lp.kind {
            let (sw, sb) = lp.skip.expect("up layer has a shortcut");
            let sc = cache.skip.as_ref().expect("shortcut cache");
            let (gs, gsw, gsb) = ops::conv2d_backward(sc, self.params.conv_weight(sw), grad.view(), ConvGeometry::POINT);
            if let Some(g) = grads.as_deref_mut() {
                g.accumulate(sw, gsw.as_slice().expect("contiguous"));
                g.accumulate(sb, gsb.as_slice().expect("contiguous"));
            }
            skip_grad = Some((skip, gs));
        }
        if let Some(g) = grads {
            g.accumulate(lp.conv.0, gw.as_slice().expect("contiguous"));
            g.accumulate(lp.conv.1, gb.as_slice().expect("contiguous"));
        }
        let gprev = match lp.kind {
            LayerKind::Up { .. } => ops::upsample2_backward(gin.view()),
            _ => gin,
        };
        (gprev, skip_grad)
    }

    pub fn output_forward(&self, last: &FeatureMap) -> (Array3<f64>, ConvCache) {
        ops::conv2d(
            last.view(),
            self.params.conv_weight(self.head.0),
            self.params.vector(self.head.1),
            ConvGeometry::POINT,
        )
    }

    pub fn output_backward(&self, cache: &ConvCache, grad_ab: &Array3<f64>, grads: Option<&mut ParamSet>) -> Array3<f64> {
        let (gin, gw, gb) = ops::conv2d_backward(
            cache,
            self.params.conv_weight(self.head.0),
            grad_ab.view(),
            ConvGeometry::POINT,
        );
        if let Some(g) = grads {
            g.accumulate(self.head.0, gw.as_slice().expect("contiguous"));
            g.accumulate(self.head.1, gb.as_slice().expect("contiguous"));
        }
        gin
    }

    /// Forward pass keeping everything needed for [`ColorizationNetwork::backward`].
    pub fn forward_traced(&self, l: &Array2<f64>) -> Result<Trace> {
        let (h, w) = l.dim();
        self.config.check_input(h, w)?;
        let input = l.clone().insert_axis(Axis(0));
        let mut taps: Vec<FeatureMap> = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for j in 0..self.layers.len() {
            let prev = if j == 0 { &input } else { &taps[j - 1] };
            let (out, cache) = self.layer_forward(j, prev, &taps);
            taps.push(out);
            caches.push(cache);
        }
        let (ab, head) = self.output_forward(taps.last().expect("at least two layers"));
        Ok(Trace {
            ab,
            taps,
            layers: caches,
            head,
        })
    }

    /// Maps a normalized L plane to normalized ab plus every layer's activation.
    pub fn forward_with_taps(&self, l: &Array2<f64>) -> Result<(Array3<f64>, Vec<FeatureMap>)> {
        let t = self.forward_traced(l)?;
        Ok((t.ab, t.taps))
    }

    pub fn forward(&self, l: &Array2<f64>) -> Result<Array3<f64>> {
        Ok(self.forward_traced(l)?.ab)
    }

    /// Accumulates `d loss / d params` into `grads` given `d loss / d ab`.
    pub fn backward(&self, trace: &Trace, grad_ab: &Array3<f64>, grads: &mut ParamSet) {
        let n = self.layers.len();
        let mut act_grads: Vec<Option<Array3<f64>>> = vec![None; n];
        act_grads[n - 1] = Some(self.output_backward(&trace.head, grad_ab, Some(grads)));
        self.backward_from_taps(trace, act_grads, grads);
    }

    /// Backward pass seeded with gradients on the layer activations.
    pub fn backward_from_taps(&self, trace: &Trace, mut act_grads: Vec<Option<Array3<f64>>>, grads: &mut ParamSet) {
        for j in (0..self.layers.len()).rev() {
            // Layer j only receives gradient from later layers, so a gap here is final.
            let Some(g) = act_grads[j].take() else {
                continue;
            };
            let (gprev, skip) = self.layer_backward(j, &trace.layers[j], g, Some(grads));
            if let Some((k, gs)) = skip {
                add_grad(&mut act_grads[k], gs);
            }
            if j > 0 {
                add_grad(&mut act_grads[j - 1], gprev);
            }
        }
    }
}

pub(crate) fn add_grad(slot: &mut Option<Array3<f64>>, g: Array3<f64>) {
    match slot {
        Some(acc) => *acc += &g,
        None => *slot = Some(g),
    }
}

pub fn build_backbone(config: &BackboneConfig, role: Role) -> Result<ColorizationNetwork> {
    config.validate()?;
    let kinds = config.layer_kinds()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = ParamSet::new();
    let mut layers = Vec::with_capacity(kinds.len());
    let mut in_c = 1;
    for (j, &kind) in kinds.iter().enumerate() {
        let out_c = config.layer_channels[j];
        let conv = params.push_conv(&format!("layer{j:02}.conv"), out_c, in_c, 3, &mut rng);
        let skip = match kind {
            LayerKind::Up { skip } => Some(params.push_conv(
                &format!("layer{j:02}.shortcut"),
                out_c,
                config.layer_channels[skip],
                1,
                &mut rng,
            )),
            _ => None,
        };
        layers.push(LayerParams { kind, conv, skip });
        in_c = out_c;
    }
    let head = params.push_conv("output", 2, in_c, 1, &mut rng);
    Ok(ColorizationNetwork {
        config: config.clone(),
        params,
        role,
        layers,
        head,
    })
}

/// Deep-copies `src` into a network of role `dst_role` built for `dst_config`.
pub fn transfer_weights(src: &ColorizationNetwork, dst_config: &BackboneConfig, dst_role: Role) -> Result<ColorizationNetwork> {
    if !src.config.same_architecture(dst_config) {
        return Err(Error::Config(format!(
            "cannot transfer weights between architectures {:?} and {:?}",
            src.config.layer_channels, dst_config.layer_channels
        )));
    }
    let mut dst = src.clone();
    dst.config = dst_config.clone();
    dst.role = dst_role;
    Ok(dst)
}

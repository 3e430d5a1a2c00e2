//! Instance-to-full-image feature fusion.
//!
//! At every fusion layer a pair of three-convolution heads scores the
//! full-image feature and each instance feature per pixel. Instance features
//! and scores are resized into the instance's box on the layer grid, and the
//! fused feature is the per-pixel softmax-weighted sum over the full-image
//! branch and the instances covering that pixel.

use std::collections::BTreeSet;

use ndarray::{s, Array2, Array3, ArrayView2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{add_grad, ColorizationNetwork, FeatureMap, LayerCache, Trace};
use crate::detection::{scale_box_to_layer, BoundingBox, PixelRect};
use crate::error::{Error, Result};
use crate::ops::{self, BilinearResize, ConvCache, ConvGeometry};
use crate::params::{config_hash, ParamSet};

/// How out-of-box pixels of an instance enter the per-pixel softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SoftmaxMode {
    /// Instances only compete where their box covers the pixel.
    #[default]
    Masked,
    /// Literal zero padding: out-of-box instances contribute a zero logit
    /// (and a zero feature) everywhere.
    ZeroLogitPadding,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub head_hidden: usize,
    pub max_instances: usize,
    pub softmax: SoftmaxMode,
    pub seed: u64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            head_hidden: 16,
            max_instances: 8,
            softmax: SoftmaxMode::Masked,
            seed: 1,
        }
    }
}

/// Three 3x3 convolutions (ReLU between) mapping a feature map to one logit per pixel.
#[derive(Debug, Clone)]
pub struct WeightHead {
    convs: [(usize, usize); 3],
    in_channels: usize,
}

#[derive(Debug, Clone)]
pub struct HeadCache {
    convs: [ConvCache; 3],
    hidden: [Array3<f64>; 2],
}

impl WeightHead {
    pub fn build<R: rand::Rng>(params: &mut ParamSet, prefix: &str, in_channels: usize, hidden: usize, rng: &mut R) -> Self {
        let c1 = params.push_conv(&format!("{prefix}.conv1"), hidden, in_channels, 3, rng);
        let c2 = params.push_conv(&format!("{prefix}.conv2"), hidden, hidden, 3, rng);
        let c3 = params.push_conv(&format!("{prefix}.conv3"), 1, hidden, 3, rng);
        WeightHead {
            convs: [c1, c2, c3],
            in_channels,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    /// Indices of this head's tensors inside its parameter set.
    pub fn param_indices(&self) -> Vec<usize> {
        self.convs.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}

pub fn predict_weight_logits(params: &ParamSet, head: &WeightHead, feat: &FeatureMap) -> Result<(Array2<f64>, HeadCache)> {
    if feat.dim().0 != head.in_channels {
        return Err(Error::Shape(format!(
            "weight head expects {} channels, feature has {}",
            head.in_channels,
            feat.dim().0
        )));
    }
    let conv = |x: &Array3<f64>, i: usize| {
        let (w, b) = head.convs[i];
        ops::conv2d(x.view(), params.conv_weight(w), params.vector(b), ConvGeometry::SAME3)
    };
    let (mut h1, c1) = conv(feat, 0);
    ops::relu(&mut h1);
    let (mut h2, c2) = conv(&h1, 1);
    ops::relu(&mut h2);
    let (out, c3) = conv(&h2, 2);
    let logits = out.index_axis_move(Axis(0), 0);
    Ok((
        logits,
        HeadCache {
            convs: [c1, c2, c3],
            hidden: [h1, h2],
        },
    ))
}

/// Backward through a weight head; returns the gradient for its input feature.
pub fn weight_head_backward(
    params: &ParamSet,
    head: &WeightHead,
    cache: &HeadCache,
    grad_logits: &Array2<f64>,
    grads: &mut ParamSet,
) -> Array3<f64> {
    let mut g = grad_logits.clone().insert_axis(Axis(0));
    for i in (0..3).rev() {
        if i < 2 {
            ops::relu_backward(&cache.hidden[i], &mut g);
        }
        let (w, b) = head.convs[i];
        let (gin, gw, gb) = ops::conv2d_backward(&cache.convs[i], params.conv_weight(w), g.view(), ConvGeometry::SAME3);
        grads.accumulate(w, gw.as_slice().expect("contiguous"));
        grads.accumulate(b, gb.as_slice().expect("contiguous"));
        g = gin;
    }
    g
}

#[derive(Debug, Clone)]
struct HeadPair {
    layer: usize,
    full: WeightHead,
    instance: WeightHead,
}

/// All weight heads of a fused model: one independent (full, instance) pair per fusion layer.
#[derive(Debug, Clone)]
pub struct FusionHeads {
    pub params: ParamSet,
    pairs: Vec<HeadPair>,
    hidden: usize,
    layer_channels: Vec<usize>,
}

#[derive(Serialize)]
struct HeadsArchitecture<'a> {
    layer_channels: &'a [usize],
    layers: Vec<usize>,
    hidden: usize,
}

impl FusionHeads {
    pub fn build(layer_channels: &[usize], layers: &[usize], hidden: usize, seed: u64) -> Result<Self> {
        let set: BTreeSet<usize> = layers.iter().copied().collect();
        if let Some(&j) = set.iter().find(|&&j| j >= layer_channels.len()) {
            return Err(Error::Config(format!("fusion layer {j} out of range")));
        }
        if hidden == 0 {
            return Err(Error::Config("weight head width must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let pairs = set
            .into_iter()
            .map(|j| {
                let c = layer_channels[j];
                HeadPair {
                    layer: j,
                    full: WeightHead::build(&mut params, &format!("fusion{j:02}.full"), c, hidden, &mut rng),
                    instance: WeightHead::build(&mut params, &format!("fusion{j:02}.instance"), c, hidden, &mut rng),
                }
            })
            .collect();
        Ok(FusionHeads {
            params,
            pairs,
            hidden,
            layer_channels: layer_channels.to_vec(),
        })
    }

    /// Sorted fusion layer indices.
    pub fn layers(&self) -> Vec<usize> {
        self.pairs.iter().map(|p| p.layer).collect()
    }

    fn pair(&self, layer: usize) -> Option<&HeadPair> {
        self.pairs.iter().find(|p| p.layer == layer)
    }

    pub fn full_head(&self, layer: usize) -> Option<&WeightHead> {
        self.pair(layer).map(|p| &p.full)
    }

    pub fn instance_head(&self, layer: usize) -> Option<&WeightHead> {
        self.pair(layer).map(|p| &p.instance)
    }

    pub fn architecture_hash(&self) -> String {
        config_hash(&HeadsArchitecture {
            layer_channels: &self.layer_channels,
            layers: self.layers(),
            hidden: self.hidden,
        })
    }

    pub fn with_params(mut self, params: ParamSet) -> Result<Self> {
        self.params.check_layout(&params)?;
        self.params = params;
        Ok(self)
    }
}

/// An instance feature and logit map resized into its layer box and zero padded.
#[derive(Debug, Clone, PartialEq)]
pub struct RetargetedInstance {
    pub feature: FeatureMap,
    pub logits: Array2<f64>,
    pub rect: PixelRect,
}

impl RetargetedInstance {
    /// 1 inside the box, 0 elsewhere.
    pub fn mask(&self) -> Array2<f64> {
        let (_, h, w) = self.feature.dim();
        Array2::from_shape_fn((h, w), |(y, x)| if self.rect.contains(y, x) { 1.0 } else { 0.0 })
    }
}

pub fn retarget_instance(
    feat: &FeatureMap,
    logits: &Array2<f64>,
    rect: PixelRect,
    full_layer_size: (usize, usize),
) -> Result<RetargetedInstance> {
    let (h, w) = full_layer_size;
    if rect.is_degenerate() || !rect.fits(h, w) {
        return Err(Error::InvalidInput(format!(
            "layer box {rect:?} is degenerate or outside {h}x{w}"
        )));
    }
    let (c, ih, iw) = feat.dim();
    if logits.dim() != (ih, iw) {
        return Err(Error::Shape(format!(
            "instance logits {:?} do not match feature {ih}x{iw}",
            logits.dim()
        )));
    }
    let resize = BilinearResize::new((ih, iw), (rect.height(), rect.width()));
    let mut feature = Array3::zeros((c, h, w));
    feature
        .slice_mut(s![.., rect.y0..rect.y1, rect.x0..rect.x1])
        .assign(&resize.feature(feat.view()));
    let mut padded = Array2::zeros((h, w));
    padded
        .slice_mut(s![rect.y0..rect.y1, rect.x0..rect.x1])
        .assign(&resize.plane(logits.view()));
    Ok(RetargetedInstance {
        feature,
        logits: padded,
        rect,
    })
}

/// Adjoint of [`retarget_instance`] for the feature and logits of one instance.
fn retarget_backward(
    rect: PixelRect,
    src: (usize, usize),
    grad_feature: &Array3<f64>,
    grad_logits: &Array2<f64>,
) -> (Array3<f64>, Array2<f64>) {
    let resize = BilinearResize::new(src, (rect.height(), rect.width()));
    let gf = resize.feature_adjoint(grad_feature.slice(s![.., rect.y0..rect.y1, rect.x0..rect.x1]));
    let gl = resize.plane_adjoint(grad_logits.slice(s![rect.y0..rect.y1, rect.x0..rect.x1]));
    (gf, gl)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBundle {
    pub full_feature: FeatureMap,
    pub full_logits: Array2<f64>,
    pub instances: Vec<RetargetedInstance>,
}

impl FusionBundle {
    fn check(&self) -> Result<(usize, usize, usize)> {
        let (c, h, w) = self.full_feature.dim();
        if self.full_logits.dim() != (h, w) {
            return Err(Error::Shape(format!(
                "full logits {:?} vs feature {h}x{w}",
                self.full_logits.dim()
            )));
        }
        for (i, inst) in self.instances.iter().enumerate() {
            if inst.feature.dim() != (c, h, w) || inst.logits.dim() != (h, w) {
                return Err(Error::Shape(format!(
                    "instance {i} is {:?}, full feature is {:?}",
                    inst.feature.dim(),
                    (c, h, w)
                )));
            }
        }
        Ok((c, h, w))
    }
}

/// Per-pixel blending weights of one fused layer. Each instance map is zero
/// where the instance does not take part in the softmax.
#[derive(Debug, Clone, PartialEq)]
pub struct BlendWeights {
    pub full: Array2<f64>,
    pub instances: Vec<Array2<f64>>,
}

fn participates(mode: SoftmaxMode, inst: &RetargetedInstance, y: usize, x: usize) -> bool {
    match mode {
        SoftmaxMode::Masked => inst.rect.contains(y, x),
        SoftmaxMode::ZeroLogitPadding => true,
    }
}

/// Softmax-weighted sum of the full-image feature and the retargeted instances.
pub fn fuse_layer(bundle: &FusionBundle, mode: SoftmaxMode) -> Result<(FeatureMap, BlendWeights)> {
    let (c, h, w) = bundle.check()?;
    let n = bundle.instances.len();
    let mut full_w = Array2::zeros((h, w));
    let mut inst_w = vec![Array2::zeros((h, w)); n];
    let mut exps = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let lf = bundle.full_logits[[y, x]];
            let mut max = lf;
            for inst in &bundle.instances {
                if participates(mode, inst, y, x) {
                    max = max.max(inst.logits[[y, x]]);
                }
            }
            let ef = (lf - max).exp();
            let mut sum = ef;
            for (e, inst) in exps.iter_mut().zip(&bundle.instances) {
                *e = if participates(mode, inst, y, x) {
                    (inst.logits[[y, x]] - max).exp()
                } else {
                    0.0
                };
                sum += *e;
            }
            full_w[[y, x]] = ef / sum;
            for (wi, e) in inst_w.iter_mut().zip(&exps) {
                wi[[y, x]] = e / sum;
            }
        }
    }
    let mut fused = Array3::zeros((c, h, w));
    for ci in 0..c {
        let mut plane = fused.index_axis_mut(Axis(0), ci);
        plane.assign(&(&bundle.full_feature.index_axis(Axis(0), ci) * &full_w));
        for (inst, wi) in bundle.instances.iter().zip(&inst_w) {
            plane += &(&inst.feature.index_axis(Axis(0), ci) * wi);
        }
    }
    Ok((
        fused,
        BlendWeights {
            full: full_w,
            instances: inst_w,
        },
    ))
}

/// Gradients of [`fuse_layer`] with respect to its inputs.
#[derive(Debug, Clone)]
pub struct FuseGrads {
    pub full_feature: Array3<f64>,
    pub full_logits: Array2<f64>,
    /// `(feature, logits)` per instance, restricted to the instance's box.
    pub instances: Vec<(Array3<f64>, Array2<f64>)>,
}

pub fn fuse_layer_backward(bundle: &FusionBundle, weights: &BlendWeights, grad: &Array3<f64>) -> FuseGrads {
    let (c, h, w) = bundle.full_feature.dim();
    let n = bundle.instances.len();
    let mut full_feature = Array3::zeros((c, h, w));
    let mut full_logits = Array2::zeros((h, w));
    let mut instances: Vec<(Array3<f64>, Array2<f64>)> =
        (0..n).map(|_| (Array3::zeros((c, h, w)), Array2::zeros((h, w)))).collect();
    let mut dots = vec![0.0; n];
    for y in 0..h {
        for x in 0..w {
            let wf = weights.full[[y, x]];
            let mut df = 0.0;
            for ci in 0..c {
                let g = grad[[ci, y, x]];
                df += g * bundle.full_feature[[ci, y, x]];
                full_feature[[ci, y, x]] = wf * g;
            }
            let mut mean = wf * df;
            for (i, inst) in bundle.instances.iter().enumerate() {
                let wi = weights.instances[i][[y, x]];
                let mut d = 0.0;
                for ci in 0..c {
                    d += grad[[ci, y, x]] * inst.feature[[ci, y, x]];
                }
                dots[i] = d;
                mean += wi * d;
            }
            full_logits[[y, x]] = wf * (df - mean);
            for (i, inst) in bundle.instances.iter().enumerate() {
                if !inst.rect.contains(y, x) {
                    continue;
                }
                let wi = weights.instances[i][[y, x]];
                let (gf, gl) = &mut instances[i];
                for ci in 0..c {
                    gf[[ci, y, x]] = wi * grad[[ci, y, x]];
                }
                gl[[y, x]] = wi * (dots[i] - mean);
            }
        }
    }
    FuseGrads {
        full_feature,
        full_logits,
        instances,
    }
}

/// How instance features are merged at a fusion layer.
#[derive(Debug, Clone, Copy)]
pub enum Blend<'a> {
    /// Learned per-pixel softmax weights.
    Learned(SoftmaxMode),
    /// Instance feature replaces the full feature inside its box.
    BoxMask,
    /// Instance feature replaces the full feature where its image-resolution mask is set.
    GtMask(&'a [Array2<f64>]),
}

/// One instance input to the fused model: its normalized L crop and its box
/// in full-image pixel coordinates.
#[derive(Debug, Clone)]
pub struct InstanceInput {
    pub l: Array2<f64>,
    pub bbox: BoundingBox,
}

/// The assembled two-branch model with its fusion settings.
#[derive(Debug, Clone, Copy)]
pub struct FusedModel<'a> {
    pub full: &'a ColorizationNetwork,
    pub instance: &'a ColorizationNetwork,
    pub heads: Option<&'a FusionHeads>,
    /// Layers where fusion is applied; `None` means every layer the heads cover.
    pub layers: Option<&'a [usize]>,
    pub blend: Blend<'a>,
    pub max_instances: usize,
}

#[derive(Debug)]
struct FusionLayerTrace {
    layer: usize,
    bundle: FusionBundle,
    weights: BlendWeights,
    full_head: Option<HeadCache>,
    instance_heads: Vec<HeadCache>,
    instance_src: Vec<(usize, usize)>,
}

/// Everything recorded by a fused forward pass.
#[derive(Debug)]
pub struct FusedTrace {
    pub ab: Array3<f64>,
    instance_traces: Vec<Trace>,
    layers: Vec<LayerCache>,
    fusion: Vec<Option<FusionLayerTrace>>,
    head: ConvCache,
}

impl FusedTrace {
    /// Per fused layer: `(layer, blending weights)`.
    pub fn blend_weights(&self) -> Vec<(usize, &BlendWeights)> {
        self.fusion
            .iter()
            .flatten()
            .map(|f| (f.layer, &f.weights))
            .collect()
    }
}

/// Gradient sinks for a fused backward pass; `None` skips that component.
#[derive(Debug, Default)]
pub struct FusedGrads {
    pub full: Option<ParamSet>,
    pub instance: Option<ParamSet>,
    pub heads: Option<ParamSet>,
}

impl<'a> FusedModel<'a> {
    pub fn new(full: &'a ColorizationNetwork, instance: &'a ColorizationNetwork, heads: &'a FusionHeads) -> Self {
        FusedModel {
            full,
            instance,
            heads: Some(heads),
            layers: None,
            blend: Blend::Learned(SoftmaxMode::Masked),
            max_instances: 8,
        }
    }

    fn fusion_layers(&self) -> Result<Vec<usize>> {
        match (self.layers, self.heads) {
            (Some(l), _) => Ok(l.to_vec()),
            (None, Some(h)) => Ok(h.layers()),
            (None, None) => Err(Error::Config("fusion layers are unspecified and there are no heads".into())),
        }
    }

    fn validate(&self, n_instances: usize) -> Result<Vec<bool>> {
        if !self.full.config().same_architecture(self.instance.config()) {
            return Err(Error::Config("full-image and instance networks differ in architecture".into()));
        }
        if n_instances > self.max_instances {
            return Err(Error::TooManyInstances {
                count: n_instances,
                max: self.max_instances,
            });
        }
        let n = self.full.num_layers();
        let layers = self.fusion_layers()?;
        let mut mask = vec![false; n];
        for &j in &layers {
            if j >= n {
                return Err(Error::Config(format!("fusion layer {j} out of range")));
            }
            mask[j] = true;
        }
        if let Blend::Learned(_) = self.blend {
            let heads = self
                .heads
                .ok_or_else(|| Error::Config("learned fusion needs weight heads".into()))?;
            if let Some(&j) = layers.iter().find(|&&j| heads.pair(j).is_none()) {
                return Err(Error::Config(format!("no weight head for fusion layer {j}")));
            }
            if self.layers.is_none() && heads.layer_channels != self.full.config().layer_channels {
                return Err(Error::Config("weight heads were built for another architecture".into()));
            }
        }
        if let Blend::GtMask(masks) = self.blend {
            if masks.len() != n_instances {
                return Err(Error::InvalidInput(format!(
                    "{} masks for {n_instances} instances",
                    masks.len()
                )));
            }
        }
        Ok(mask)
    }

    pub fn forward(&self, l: &Array2<f64>, instances: &[InstanceInput]) -> Result<Array3<f64>> {
        Ok(self.forward_traced(l, instances)?.ab)
    }

    pub fn forward_traced(&self, l: &Array2<f64>, instances: &[InstanceInput]) -> Result<FusedTrace> {
        let is_fused = self.validate(instances.len())?;
        let (h, w) = l.dim();
        let cfg = self.full.config();
        cfg.check_input(h, w)?;
        let instance_traces = instances
            .iter()
            .map(|inst| self.instance.forward_traced(&inst.l))
            .collect::<Result<Vec<_>>>()?;

        let input = l.clone().insert_axis(Axis(0));
        let n = self.full.num_layers();
        let mut acts: Vec<FeatureMap> = Vec::with_capacity(n);
        let mut caches = Vec::with_capacity(n);
        let mut fusion = Vec::with_capacity(n);
        for j in 0..n {
            let prev = if j == 0 { &input } else { &acts[j - 1] };
            let (out, cache) = self.full.layer_forward(j, prev, &acts);
            caches.push(cache);
            if !is_fused[j] {
                acts.push(out);
                fusion.push(None);
                continue;
            }
            let layer_size = cfg.layer_size(j, h, w);
            let (fused, trace) = self.fuse_at(j, out, layer_size, (h, w), instances, &instance_traces)?;
            acts.push(fused);
            fusion.push(Some(trace));
        }
        let (ab, head) = self.full.output_forward(acts.last().expect("at least two layers"));
        Ok(FusedTrace {
            ab,
            instance_traces,
            layers: caches,
            fusion,
            head,
        })
    }

    fn fuse_at(
        &self,
        j: usize,
        full_feature: FeatureMap,
        layer_size: (usize, usize),
        image_size: (usize, usize),
        instances: &[InstanceInput],
        traces: &[Trace],
    ) -> Result<(FeatureMap, FusionLayerTrace)> {
        let rects: Vec<PixelRect> = instances
            .iter()
            .map(|inst| scale_box_to_layer(&inst.bbox, image_size, layer_size))
            .collect();
        let instance_src: Vec<(usize, usize)> = traces
            .iter()
            .map(|t| {
                let (_, ih, iw) = t.taps[j].dim();
                (ih, iw)
            })
            .collect();
        match self.blend {
            Blend::Learned(mode) => {
                let heads = self.heads.expect("validated");
                let pair = heads.pair(j).expect("validated");
                let (full_logits, full_cache) = predict_weight_logits(&heads.params, &pair.full, &full_feature)?;
                let mut retargeted = Vec::with_capacity(instances.len());
                let mut instance_heads = Vec::with_capacity(instances.len());
                for (t, &rect) in traces.iter().zip(&rects) {
                    let (logits, hc) = predict_weight_logits(&heads.params, &pair.instance, &t.taps[j])?;
                    retargeted.push(retarget_instance(&t.taps[j], &logits, rect, layer_size)?);
                    instance_heads.push(hc);
                }
                let bundle = FusionBundle {
                    full_feature,
                    full_logits,
                    instances: retargeted,
                };
                let (fused, weights) = fuse_layer(&bundle, mode)?;
                Ok((
                    fused,
                    FusionLayerTrace {
                        layer: j,
                        bundle,
                        weights,
                        full_head: Some(full_cache),
                        instance_heads,
                        instance_src,
                    },
                ))
            }
            Blend::BoxMask | Blend::GtMask(_) => {
                let (hh, ww) = layer_size;
                let mut retargeted = Vec::with_capacity(instances.len());
                for (t, &rect) in traces.iter().zip(&rects) {
                    let (_, ih, iw) = t.taps[j].dim();
                    retargeted.push(retarget_instance(&t.taps[j], &Array2::zeros((ih, iw)), rect, layer_size)?);
                }
                let bundle = FusionBundle {
                    full_feature,
                    full_logits: Array2::zeros((hh, ww)),
                    instances: retargeted,
                };
                let (fused, weights) = match self.blend {
                    Blend::GtMask(masks) => {
                        let layer_masks: Vec<Array2<f64>> = masks
                            .iter()
                            .map(|m| crate::ablation::downsample_mask_nearest(m.view(), layer_size))
                            .collect();
                        crate::ablation::replace_with_weights(&bundle, Some(&layer_masks))?
                    }
                    _ => crate::ablation::replace_with_weights(&bundle, None)?,
                };
                Ok((
                    fused,
                    FusionLayerTrace {
                        layer: j,
                        bundle,
                        weights,
                        full_head: None,
                        instance_heads: Vec::new(),
                        instance_src,
                    },
                ))
            }
        }
    }

    /// Accumulates parameter gradients given `d loss / d ab`. Only learned
    /// blending is differentiable with respect to head parameters.
    pub fn backward(&self, trace: &FusedTrace, grad_ab: &Array3<f64>, grads: &mut FusedGrads) -> Result<()> {
        if !matches!(self.blend, Blend::Learned(_)) {
            return Err(Error::Config("mask blending has no trainable fusion parameters".into()));
        }
        let heads = self.heads.expect("learned blending has heads");
        let n = self.full.num_layers();
        let need_instance = grads.instance.is_some();
        let mut act_grads: Vec<Option<Array3<f64>>> = vec![None; n];
        let mut tap_grads: Vec<Vec<Option<Array3<f64>>>> = vec![vec![None; n]; trace.instance_traces.len()];
        act_grads[n - 1] = Some(self.full.output_backward(&trace.head, grad_ab, grads.full.as_mut()));
        for j in (0..n).rev() {
            let mut g = act_grads[j].take().expect("every layer feeds the output");
            if let Some(ft) = &trace.fusion[j] {
                let fg = fuse_layer_backward(&ft.bundle, &ft.weights, &g);
                let pair = heads.pair(j).expect("validated");
                let mut head_grads = grads.heads.take().unwrap_or_else(|| heads.params.zeros_like());
                let gfull = weight_head_backward(
                    &heads.params,
                    &pair.full,
                    ft.full_head.as_ref().expect("learned layer"),
                    &fg.full_logits,
                    &mut head_grads,
                );
                g = fg.full_feature + gfull;
                for (i, (gf, gl)) in fg.instances.iter().enumerate() {
                    let (gtap, glog) = retarget_backward(ft.bundle.instances[i].rect, ft.instance_src[i], gf, gl);
                    let ghead = weight_head_backward(&heads.params, &pair.instance, &ft.instance_heads[i], &glog, &mut head_grads);
                    if need_instance {
                        add_grad(&mut tap_grads[i][j], gtap + ghead);
                    }
                }
                grads.heads = Some(head_grads);
            }
            let (gprev, skip) = self.full.layer_backward(j, &trace.layers[j], g, grads.full.as_mut());
            if let Some((k, gs)) = skip {
                add_grad(&mut act_grads[k], gs);
            }
            if j > 0 {
                add_grad(&mut act_grads[j - 1], gprev);
            }
        }
        if let Some(inst_grads) = grads.instance.as_mut() {
            for (t, taps) in trace.instance_traces.iter().zip(tap_grads) {
                self.instance.backward_from_taps(t, taps, inst_grads);
            }
        }
        Ok(())
    }
}

/// Fused prediction with learned masked-softmax blending at every head layer.
pub fn fused_forward(
    full: &ColorizationNetwork,
    instance: &ColorizationNetwork,
    heads: &FusionHeads,
    l: &Array2<f64>,
    instances: &[InstanceInput],
) -> Result<Array3<f64>> {
    FusedModel::new(full, instance, heads).forward(l, instances)
}

/// Weight map as an 8-bit grayscale image (0 -> black, 1 -> white).
pub fn weight_map_image(weights: ArrayView2<f64>) -> image::GrayImage {
    let (h, w) = weights.dim();
    image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(weights[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

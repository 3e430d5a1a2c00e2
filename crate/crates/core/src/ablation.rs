//! Design-choice variants: where fusion is applied, how boxes are chosen, and
//! how instance features are merged (learned weights, box masks, or
//! segmentation masks).

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeatureMap};
use crate::dataset::Dataset;
use crate::detection::BoxStrategy;
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_full, evaluate_instance_level, MetricReport, PerceptualMetric, Protocol};
use crate::fusion::{BlendWeights, FusionBundle};
use crate::inference::{FusedColorizer, InferenceSettings, ModelBundle};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionPlacement {
    None,
    EncoderOnly,
    DecoderOnly,
    #[default]
    Both,
}

impl FusionPlacement {
    /// Fusion layers for this placement, restricted to `available`.
    pub fn layers(&self, config: &BackboneConfig, available: &[usize]) -> Vec<usize> {
        let allowed = match self {
            FusionPlacement::None => Vec::new(),
            FusionPlacement::EncoderOnly => config.encoder_layers(),
            FusionPlacement::DecoderOnly => config.decoder_layers(),
            FusionPlacement::Both => (0..config.num_layers()).collect(),
        };
        available.iter().copied().filter(|j| allowed.contains(j)).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BlendMode {
    #[default]
    LearnedFusion,
    BoxMask,
    GtMask,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationSpec {
    pub fusion_placement: FusionPlacement,
    pub box_strategy: BoxStrategy,
    pub blend_mode: BlendMode,
}

impl AblationSpec {
    pub fn tag(&self) -> String {
        let placement = match self.fusion_placement {
            FusionPlacement::None => "none",
            FusionPlacement::EncoderOnly => "encoder_only",
            FusionPlacement::DecoderOnly => "decoder_only",
            FusionPlacement::Both => "both",
        };
        let boxes = match self.box_strategy {
            BoxStrategy::TopK { k } => format!("top_{k}"),
            BoxStrategy::RandomK { k, seed } => format!("random_{k}_seed{seed}"),
            BoxStrategy::Threshold { tau } => format!("threshold_{tau}"),
            BoxStrategy::GroundTruth => "ground_truth".to_string(),
        };
        let blend = match self.blend_mode {
            BlendMode::LearnedFusion => "learned_fusion",
            BlendMode::BoxMask => "box_mask",
            BlendMode::GtMask => "gt_mask",
        };
        format!("{placement}/{boxes}/{blend}")
    }
}

/// Nearest-neighbour resampling of a binary image-resolution mask to a layer grid.
pub fn downsample_mask_nearest(mask: ArrayView2<f64>, layer_size: (usize, usize)) -> Array2<f64> {
    let (h, w) = mask.dim();
    let (lh, lw) = layer_size;
    Array2::from_shape_fn((lh, lw), |(y, x)| {
        let sy = (((y as f64 + 0.5) * h as f64 / lh as f64) as usize).min(h - 1);
        let sx = (((x as f64 + 0.5) * w as f64 / lw as f64) as usize).min(w - 1);
        if mask[[sy, sx]] > 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

/// Replacement blend: start from the full feature and, in ascending instance
/// order, overwrite every gated pixel with that instance's retargeted feature.
/// The gate is the instance box, intersected with `masks[i]` when given.
pub(crate) fn replace_with_weights(bundle: &FusionBundle, masks: Option<&[Array2<f64>]>) -> Result<(FeatureMap, BlendWeights)> {
    let (c, h, w) = bundle.full_feature.dim();
    if let Some(m) = masks {
        if m.len() != bundle.instances.len() {
            return Err(Error::InvalidInput(format!(
                "{} masks for {} instances",
                m.len(),
                bundle.instances.len()
            )));
        }
        if let Some(bad) = m.iter().find(|m| m.dim() != (h, w)) {
            return Err(Error::Shape(format!("mask {:?} vs layer {h}x{w}", bad.dim())));
        }
    }
    for inst in &bundle.instances {
        if inst.feature.dim() != (c, h, w) {
            return Err(Error::Shape(format!(
                "instance feature {:?} vs full {:?}",
                inst.feature.dim(),
                (c, h, w)
            )));
        }
    }
    let mut fused = bundle.full_feature.clone();
    let mut full_w = Array2::ones((h, w));
    let mut inst_w = vec![Array2::zeros((h, w)); bundle.instances.len()];
    for y in 0..h {
        for x in 0..w {
            let mut owner = None;
            for (i, inst) in bundle.instances.iter().enumerate() {
                let gated = inst.rect.contains(y, x) && masks.is_none_or(|m| m[i][[y, x]] > 0.5);
                if gated {
                    owner = Some(i);
                }
            }
            if let Some(i) = owner {
                for ci in 0..c {
                    fused[[ci, y, x]] = bundle.instances[i].feature[[ci, y, x]];
                }
                full_w[[y, x]] = 0.0;
                inst_w[i][[y, x]] = 1.0;
            }
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

pub fn fuse_layer_box_mask(bundle: &FusionBundle) -> Result<FeatureMap> {
    Ok(replace_with_weights(bundle, None)?.0)
}

/// `masks` are per-instance binary maps already at layer resolution.
pub fn fuse_layer_gt_mask(bundle: &FusionBundle, masks: &[Array2<f64>]) -> Result<FeatureMap> {
    Ok(replace_with_weights(bundle, Some(masks))?.0)
}

/// Evaluates the trained components under `spec`; the report is tagged with
/// the spec. Placement variants reuse the trained per-layer heads for the
/// layers they keep.
pub fn run_ablation(
    spec: &AblationSpec,
    bundle: &ModelBundle,
    dataset: &Dataset,
    settings: &InferenceSettings,
    protocol: Protocol,
    hook: Option<&dyn PerceptualMetric>,
) -> Result<MetricReport> {
    if spec.blend_mode == BlendMode::GtMask {
        if let Some(s) = dataset.samples.iter().find(|s| s.masks.is_none()) {
            return Err(Error::InvalidInput(format!(
                "gt_mask ablation needs segmentation masks; {} has none",
                s.id
            )));
        }
    }
    let settings = InferenceSettings {
        spec: spec.clone(),
        ..settings.clone()
    };
    let model = FusedColorizer {
        bundle,
        settings: &settings,
    };
    let mut report = match protocol {
        Protocol::FullImage => evaluate_full(&model, dataset, hook)?,
        Protocol::InstanceLevel => {
            let boxes: Vec<_> = dataset.samples.iter().map(|s| s.detections.clone()).collect();
            evaluate_instance_level(&model, dataset, &boxes, hook)?
        }
    };
    report.tag = Some(spec.tag());
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::PixelRect;
    use crate::fusion::RetargetedInstance;
    use ndarray::Array3;

    fn bundle(rects: &[PixelRect]) -> FusionBundle {
        let (c, h, w) = (2, 6, 6);
        FusionBundle {
            full_feature: Array3::from_shape_fn((c, h, w), |(ci, y, x)| (ci * 100 + y * 6 + x) as f64),
            full_logits: Array2::zeros((h, w)),
            instances: rects
                .iter()
                .enumerate()
                .map(|(i, &rect)| {
                    let mut feature = Array3::zeros((c, h, w));
                    for ci in 0..c {
                        for y in rect.y0..rect.y1 {
                            for x in rect.x0..rect.x1 {
                                feature[[ci, y, x]] = -1.0 - i as f64 - 0.5 * ci as f64;
                            }
                        }
                    }
                    RetargetedInstance {
                        feature,
                        logits: Array2::zeros((h, w)),
                        rect,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn box_mask_reductions() {
        let empty = bundle(&[]);
        assert_eq!(fuse_layer_box_mask(&empty).unwrap(), empty.full_feature);

        let b = bundle(&[PixelRect::new(1, 1, 4, 3)]);
        let fused = fuse_layer_box_mask(&b).unwrap();
        for ((ci, y, x), &v) in fused.indexed_iter() {
            if b.instances[0].rect.contains(y, x) {
                assert_eq!(v, b.instances[0].feature[[ci, y, x]]);
            } else {
                assert_eq!(v, b.full_feature[[ci, y, x]]);
            }
        }
    }

    #[test]
    fn box_mask_overlap_takes_later_instance() {
        let b = bundle(&[PixelRect::new(0, 0, 4, 4), PixelRect::new(2, 2, 6, 6)]);
        let fused = fuse_layer_box_mask(&b).unwrap();
        // naive paste oracle
        let mut expected = b.full_feature.clone();
        for inst in &b.instances {
            for ci in 0..2 {
                for y in inst.rect.y0..inst.rect.y1 {
                    for x in inst.rect.x0..inst.rect.x1 {
                        expected[[ci, y, x]] = inst.feature[[ci, y, x]];
                    }
                }
            }
        }
        assert_eq!(fused, expected);
        assert_eq!(fused[[0, 3, 3]], -2.0);
    }

    #[test]
    fn gt_mask_variants() {
        let b = bundle(&[PixelRect::new(1, 1, 5, 5)]);
        let zeros = vec![Array2::zeros((6, 6))];
        assert_eq!(fuse_layer_gt_mask(&b, &zeros).unwrap(), b.full_feature);

        let boxed = vec![b.instances[0].mask()];
        assert_eq!(fuse_layer_gt_mask(&b, &boxed).unwrap(), fuse_layer_box_mask(&b).unwrap());

        let checker = vec![Array2::from_shape_fn((6, 6), |(y, x)| ((y + x) % 2) as f64)];
        let fused = fuse_layer_gt_mask(&b, &checker).unwrap();
        for ((ci, y, x), &v) in fused.indexed_iter() {
            let on = (y + x) % 2 == 1 && b.instances[0].rect.contains(y, x);
            let expected = if on {
                b.instances[0].feature[[ci, y, x]]
            } else {
                b.full_feature[[ci, y, x]]
            };
            assert_eq!(v, expected);
        }

        assert!(fuse_layer_gt_mask(&b, &[]).is_err());
    }

    #[test]
    fn nearest_downsample_of_block_mask() {
        let mut m = Array2::zeros((8, 8));
        m.slice_mut(ndarray::s![0..4, 4..8]).fill(1.0);
        let d = downsample_mask_nearest(m.view(), (2, 2));
        assert_eq!(d, ndarray::array![[0.0, 1.0], [0.0, 0.0]]);
    }

    #[test]
    fn placement_layers() {
        let cfg = BackboneConfig::toy(vec![4, 4, 4, 4, 4, 4], 16);
        let all: Vec<usize> = (0..6).collect();
        assert_eq!(FusionPlacement::EncoderOnly.layers(&cfg, &all), vec![0, 1, 2, 3]);
        assert_eq!(FusionPlacement::DecoderOnly.layers(&cfg, &all), vec![4, 5]);
        assert_eq!(FusionPlacement::Both.layers(&cfg, &all), all);
        assert!(FusionPlacement::None.layers(&cfg, &all).is_empty());
    }
}

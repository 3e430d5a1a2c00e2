//! Colorizing samples with trained components.

use ndarray::{Array2, Array3};

use crate::ablation::{AblationSpec, BlendMode};
use crate::backbone::ColorizationNetwork;
use crate::colorspace::{denormalize_ab, lab_to_rgb, merge_channels, RgbRaster};
use crate::dataset::Sample;
use crate::detection::{crop_resize_instance, select_box_indices};
use crate::error::{Error, Result};
use crate::evaluation::Colorizer;
use crate::fusion::{Blend, BlendWeights, FusedModel, FusionHeads, InstanceInput, SoftmaxMode};
use crate::ops::BilinearResize;

/// The three trained components.
#[derive(Debug, Clone)]
pub struct ModelBundle {
    pub full: ColorizationNetwork,
    pub instance: ColorizationNetwork,
    pub heads: FusionHeads,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InferenceSettings {
    /// Side of the square network input.
    pub resolution: usize,
    /// Side of the square instance crops.
    pub instance_resolution: usize,
    pub spec: AblationSpec,
    pub softmax: SoftmaxMode,
    pub max_instances: usize,
}

/// One colorized sample plus the blending weights used at each fused layer.
#[derive(Debug, Clone)]
pub struct Colorized {
    pub rgb: RgbRaster,
    /// `(layer, weights)` with weights at layer resolution.
    pub weights: Vec<(usize, BlendWeights)>,
    /// Number of instances fed to the fused model.
    pub instances: usize,
}

/// Colorizes with the fused model under an ablation spec.
#[derive(Debug, Clone, Copy)]
pub struct FusedColorizer<'a> {
    pub bundle: &'a ModelBundle,
    pub settings: &'a InferenceSettings,
}

fn resize_ab(ab: &Array3<f64>, size: (usize, usize)) -> Array3<f64> {
    let (_, h, w) = ab.dim();
    if (h, w) == size {
        return ab.clone();
    }
    BilinearResize::new((h, w), size).feature(ab.view())
}

impl FusedColorizer<'_> {
    pub fn colorize_traced(&self, sample: &Sample) -> Result<Colorized> {
        let st = self.settings;
        let prepared = sample.prepare(st.resolution);
        let chosen = select_box_indices(&prepared.detections, st.spec.box_strategy);
        let instances = chosen
            .iter()
            .map(|&i| {
                let bbox = prepared.detections.boxes[i].clone();
                Ok(InstanceInput {
                    l: crop_resize_instance(prepared.l.view(), &bbox, st.instance_resolution)?,
                    bbox,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let masks: Option<Vec<Array2<f64>>> = prepared
            .masks
            .as_ref()
            .map(|ms| chosen.iter().map(|&i| ms[i].clone()).collect());
        let blend = match st.spec.blend_mode {
            BlendMode::LearnedFusion => Blend::Learned(st.softmax),
            BlendMode::BoxMask => Blend::BoxMask,
            BlendMode::GtMask => Blend::GtMask(masks.as_deref().ok_or_else(|| {
                Error::InvalidInput(format!("gt_mask blending needs segmentation masks, {} has none", sample.id))
            })?),
        };
        let layers = st
            .spec
            .fusion_placement
            .layers(self.bundle.full.config(), &self.bundle.heads.layers());
        let model = FusedModel {
            full: &self.bundle.full,
            instance: &self.bundle.instance,
            heads: Some(&self.bundle.heads),
            layers: Some(&layers),
            blend,
            max_instances: st.max_instances,
        };
        let trace = model.forward_traced(&prepared.l, &instances)?;
        let ab = resize_ab(&denormalize_ab(trace.ab.view()), (sample.lab.height(), sample.lab.width()));
        let rgb = lab_to_rgb(&merge_channels(sample.lab.l.clone(), ab)?)?;
        Ok(Colorized {
            rgb,
            weights: trace
                .blend_weights()
                .into_iter()
                .map(|(j, w)| (j, w.clone()))
                .collect(),
            instances: instances.len(),
        })
    }
}

impl Colorizer for FusedColorizer<'_> {
    fn colorize(&self, sample: &Sample) -> Result<RgbRaster> {
        Ok(self.colorize_traced(sample)?.rgb)
    }
}

/// Full-image branch alone, no instances.
#[derive(Debug, Clone, Copy)]
pub struct FullImageColorizer<'a> {
    pub net: &'a ColorizationNetwork,
    pub resolution: usize,
}

impl Colorizer for FullImageColorizer<'_> {
    fn colorize(&self, sample: &Sample) -> Result<RgbRaster> {
        let prepared = sample.prepare(self.resolution);
        let ab = self.net.forward(&prepared.l)?;
        let ab = resize_ab(&denormalize_ab(ab.view()), (sample.lab.height(), sample.lab.width()));
        lab_to_rgb(&merge_channels(sample.lab.l.clone(), ab)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ablation::FusionPlacement;
    use crate::backbone::{build_backbone, transfer_weights, BackboneConfig, Role};
    use crate::dataset::{generate_synthetic, SyntheticConfig};
    use crate::detection::BoxStrategy;

    fn bundle() -> ModelBundle {
        let cfg = BackboneConfig::toy(vec![4, 4, 4, 4], 16);
        let full = build_backbone(&cfg, Role::FullImage).unwrap();
        let instance = transfer_weights(&full, &cfg, Role::Instance).unwrap();
        let heads = FusionHeads::build(&cfg.layer_channels, &[0, 1, 2, 3], 4, 5).unwrap();
        ModelBundle { full, instance, heads }
    }

    fn settings(spec: AblationSpec) -> InferenceSettings {
        InferenceSettings {
            resolution: 16,
            instance_resolution: 16,
            spec,
            softmax: SoftmaxMode::Masked,
            max_instances: 8,
        }
    }

    #[test]
    fn no_boxes_matches_full_branch() {
        let b = bundle();
        let ds = generate_synthetic(&SyntheticConfig {
            count: 2,
            size: 24,
            ..Default::default()
        })
        .unwrap();
        let mut s = ds.samples[0].clone();
        s.detections.boxes.clear();
        s.masks = Some(Vec::new());
        let st = settings(AblationSpec::default());
        let fused = FusedColorizer { bundle: &b, settings: &st }.colorize_traced(&s).unwrap();
        let plain = FullImageColorizer {
            net: &b.full,
            resolution: 16,
        }
        .colorize(&s)
        .unwrap();
        assert_eq!(fused.rgb, plain);
        assert_eq!(fused.rgb.0.dim(), (3, 24, 24));
        assert_eq!(fused.weights.len(), 4);
    }

    #[test]
    fn weights_per_layer_and_instance() {
        let b = bundle();
        let ds = generate_synthetic(&SyntheticConfig {
            count: 1,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        for spec in [
            AblationSpec::default(),
            AblationSpec {
                blend_mode: BlendMode::BoxMask,
                ..Default::default()
            },
            AblationSpec {
                blend_mode: BlendMode::GtMask,
                box_strategy: BoxStrategy::GroundTruth,
                fusion_placement: FusionPlacement::DecoderOnly,
            },
        ] {
            let st = settings(spec.clone());
            let out = FusedColorizer { bundle: &b, settings: &st }.colorize_traced(&ds.samples[0]).unwrap();
            let expected_layers = spec.fusion_placement.layers(b.full.config(), &[0, 1, 2, 3]).len();
            assert_eq!(out.weights.len(), expected_layers);
            for (_, w) in &out.weights {
                assert_eq!(w.instances.len(), out.instances);
            }
        }
    }

    #[test]
    fn gt_mask_without_masks_is_an_error() {
        let b = bundle();
        let mut ds = generate_synthetic(&SyntheticConfig {
            count: 1,
            size: 16,
            ..Default::default()
        })
        .unwrap();
        ds.samples[0].masks = None;
        let st = settings(AblationSpec {
            blend_mode: BlendMode::GtMask,
            ..Default::default()
        });
        assert!(FusedColorizer { bundle: &b, settings: &st }.colorize(&ds.samples[0]).is_err());
    }
}

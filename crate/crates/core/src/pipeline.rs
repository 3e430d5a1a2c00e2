//! End-to-end commands: staged training with resumable checkpoints,
//! colorization with weight-map export, evaluation and ablation reports,
//! and fixture generation.

use std::fs;
use std::path::{Path, PathBuf};

use crate::ablation::{run_ablation, BlendMode, FusionPlacement};
use crate::backbone::{build_backbone, ColorizationNetwork, Role};
use crate::config::{DataConfig, EvalModel, RunConfig};
use crate::dataset::{generate_synthetic, read_rgb, write_rgb, Dataset, PreparedSample, Sample, SyntheticConfig};
use crate::detection::{load_annotations, DetectionSet};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate_full, evaluate_instance_level, Colorizer, GroundTruthColorizer, MetricReport, Protocol};
use crate::fusion::{weight_map_image, FusionHeads};
use crate::inference::{FullImageColorizer, FusedColorizer, ModelBundle};
use crate::params::ParamSet;
use crate::training::{
    train_stage_fusion, train_stage_full, train_stage_instance, CheckpointSink, FusionTrainOptions, Stage, FULL_DIR,
    HEADS_DIR, INSTANCE_DIR,
};

/// Directory layout under a run's output directory.
#[derive(Debug, Clone)]
pub struct RunLayout {
    pub root: PathBuf,
}

impl RunLayout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        RunLayout { root: root.into() }
    }

    pub fn stage_dir(&self, stage: Stage) -> PathBuf {
        self.root.join("checkpoints").join(stage.name())
    }

    /// Final checkpoint of a stage. For the fusion stage this holds `heads/`
    /// (plus `full/` and `instance/` when the backbones were unfrozen).
    pub fn stage_final(&self, stage: Stage) -> PathBuf {
        self.stage_dir(stage).join("final")
    }

    pub fn log(&self, stage: Stage) -> PathBuf {
        self.root.join("logs").join(format!("{}.jsonl", stage.name()))
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }

    pub fn colorized(&self) -> PathBuf {
        self.root.join("colorized")
    }

    pub fn weights(&self) -> PathBuf {
        self.root.join("weights")
    }
}

pub fn load_dataset(data: &DataConfig) -> Result<Dataset> {
    for p in [&data.images, &data.annotations] {
        if !p.exists() {
            return Err(Error::InvalidInput(format!("dataset path {} does not exist", p.display())));
        }
    }
    let ds = Dataset::load(&data.images, &data.annotations, data.masks.as_deref())?;
    if ds.dropped_boxes > 0 {
        log::warn!("dropped {} degenerate or out-of-frame boxes", ds.dropped_boxes);
    }
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    Ok(ds)
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Reuse final checkpoints of stages that already finished.
    pub resume: bool,
    /// Run only this stage; earlier stages are loaded from checkpoints.
    pub stage: Option<Stage>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub trained: Vec<Stage>,
    pub loaded: Vec<Stage>,
    /// Final checkpoint directory of every stage that exists after the run.
    pub finals: Vec<PathBuf>,
}

fn load_network(cfg: &RunConfig, dir: &Path, role: Role) -> Result<ColorizationNetwork> {
    let params = ParamSet::load(dir, &cfg.training_hash())?;
    build_backbone(&cfg.backbone, role)?.with_params(params).map_err(|e| Error::Checkpoint {
        path: dir.to_path_buf(),
        reason: format!("parameters do not fit the configured backbone: {e}"),
    })
}

fn fresh_heads(cfg: &RunConfig, layers: &[usize]) -> Result<FusionHeads> {
    FusionHeads::build(&cfg.backbone.layer_channels, layers, cfg.fusion.head_hidden, cfg.fusion.seed)
}

fn load_heads(cfg: &RunConfig, dir: &Path) -> Result<FusionHeads> {
    let params = ParamSet::load(dir, &cfg.training_hash())?;
    fresh_heads(cfg, &cfg.backbone.fusion_layers)?
        .with_params(params)
        .map_err(|e| Error::Checkpoint {
            path: dir.to_path_buf(),
            reason: format!("parameters do not fit the configured heads: {e}"),
        })
}

fn require_final(layout: &RunLayout, stage: Stage) -> Result<PathBuf> {
    let dir = layout.stage_final(stage);
    if !dir.exists() {
        return Err(Error::Checkpoint {
            path: dir,
            reason: format!("no finished {} stage; train it first", stage.name()),
        });
    }
    Ok(dir)
}

/// Loads the three trained components from a run directory.
pub fn load_bundle(cfg: &RunConfig) -> Result<ModelBundle> {
    let layout = RunLayout::new(&cfg.output_dir);
    let fusion = require_final(&layout, Stage::Fusion)?;
    let heads = load_heads(cfg, &fusion.join(HEADS_DIR))?;
    // Unfrozen fusion training stores its own copies of both backbones.
    let (full, instance) = if fusion.join(FULL_DIR).exists() {
        (
            load_network(cfg, &fusion.join(FULL_DIR), Role::FullImage)?,
            load_network(cfg, &fusion.join(INSTANCE_DIR), Role::Instance)?,
        )
    } else {
        (
            load_network(cfg, &require_final(&layout, Stage::Full)?, Role::FullImage)?,
            load_network(cfg, &require_final(&layout, Stage::Instance)?, Role::Instance)?,
        )
    };
    Ok(ModelBundle { full, instance, heads })
}

fn fusion_samples(cfg: &RunConfig, prepared: &[PreparedSample]) -> Result<Vec<crate::dataset::FusionSample>> {
    prepared
        .iter()
        .map(|s| s.fusion_sample(cfg.training.box_strategy, cfg.instance_resolution()))
        .collect()
}

fn reset_dir(dir: &Path) -> Result<()> {
    if dir.exists() {
        fs::remove_dir_all(dir).map_err(|e| Error::io(format!("clearing {}", dir.display()), e))?;
    }
    Ok(())
}

/// Runs full -> instance -> fusion, writing per-epoch and final checkpoints
/// and a JSON-lines log per stage.
pub fn cmd_train(cfg: &RunConfig, opts: &TrainOptions) -> Result<TrainSummary> {
    cfg.validate()?;
    let layout = RunLayout::new(&cfg.output_dir);
    let dataset = load_dataset(&cfg.data)?;
    let prepared = dataset.prepare(cfg.backbone.base_resolution);
    let hash = cfg.training_hash();
    let mut summary = TrainSummary::default();

    // Once a stage is retrained, the checkpoints after it are stale.
    let mut upstream_trained = false;
    let mut action = |stage: Stage| -> Option<bool> {
        // Some(true) = train, Some(false) = load, None = stop.
        let a = match opts.stage {
            Some(sel) if stage == sel => Some(true),
            Some(sel) if (stage as u8) < (sel as u8) => Some(false),
            Some(_) => None,
            None => Some(upstream_trained || !(opts.resume && layout.stage_final(stage).exists())),
        };
        upstream_trained |= a == Some(true);
        a
    };
    let sink = |stage: Stage| -> Result<CheckpointSink> {
        reset_dir(&layout.stage_dir(stage))?;
        Ok(CheckpointSink::new(layout.stage_dir(stage), hash.clone()))
    };

    // Stage 1: full-image network.
    let full = match action(Stage::Full) {
        None => return Ok(summary),
        Some(false) => {
            summary.loaded.push(Stage::Full);
            load_network(cfg, &require_final(&layout, Stage::Full)?, Role::FullImage)?
        }
        Some(true) => {
            log::info!("training full-image network on {} images", prepared.len());
            let mut net = build_backbone(&cfg.backbone, Role::FullImage)?;
            let pairs: Vec<_> = prepared.iter().map(|s| s.full_pair()).collect();
            let rec = train_stage_full(&cfg.training.full, &pairs, &mut net, Some(&sink(Stage::Full)?))?;
            rec.write_jsonl(&layout.log(Stage::Full))?;
            summary.trained.push(Stage::Full);
            net
        }
    };
    summary.finals.push(layout.stage_final(Stage::Full));

    // Stage 2: instance network, initialized from stage 1.
    let instance = match action(Stage::Instance) {
        None => return Ok(summary),
        Some(false) => {
            summary.loaded.push(Stage::Instance);
            load_network(cfg, &require_final(&layout, Stage::Instance)?, Role::Instance)?
        }
        Some(true) => {
            let crops = prepared
                .iter()
                .map(|s| s.instance_pairs(cfg.training.box_strategy, cfg.instance_resolution()))
                .collect::<Result<Vec<_>>>()?
                .concat();
            log::info!("training instance network on {} crops", crops.len());
            let (net, rec) = train_stage_instance(&cfg.training.instance, &crops, &full, Some(&sink(Stage::Instance)?))?;
            rec.write_jsonl(&layout.log(Stage::Instance))?;
            summary.trained.push(Stage::Instance);
            net
        }
    };
    summary.finals.push(layout.stage_final(Stage::Instance));

    // Stage 3: fusion heads.
    match action(Stage::Fusion) {
        None => return Ok(summary),
        Some(false) => {
            summary.loaded.push(Stage::Fusion);
            load_heads(cfg, &require_final(&layout, Stage::Fusion)?.join(HEADS_DIR))?;
        }
        Some(true) => {
            let data = fusion_samples(cfg, &prepared)?;
            let (mut full, mut instance) = (full, instance);
            let mut heads = fresh_heads(cfg, &cfg.backbone.fusion_layers)?;
            let opts = FusionTrainOptions {
                softmax: cfg.fusion.softmax,
                max_instances: cfg.fusion.max_instances,
            };
            log::info!("training fusion heads on {} images", data.len());
            let rec = train_stage_fusion(
                &cfg.training.fusion,
                &data,
                &mut full,
                &mut instance,
                &mut heads,
                opts,
                Some(&sink(Stage::Fusion)?),
            )?;
            rec.write_jsonl(&layout.log(Stage::Fusion))?;
            summary.trained.push(Stage::Fusion);
        }
    }
    summary.finals.push(layout.stage_final(Stage::Fusion));
    Ok(summary)
}

fn sample_for_image(path: &Path, annotations: Option<&crate::detection::AnnotationStore>) -> Result<Sample> {
    let rgb = read_rgb(path)?;
    let stem = path
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::InvalidInput(format!("cannot name output for {}", path.display())))?
        .to_string();
    let file_name = path.file_name().and_then(|s| s.to_str()).unwrap_or_default();
    let dets = annotations
        .and_then(|store| {
            store
                .images
                .iter()
                .find(|m| m.id == stem || m.file == file_name)
                .and_then(|m| store.get(&m.id))
        })
        .map(|d| d.rescaled(rgb.height(), rgb.width()))
        .unwrap_or_else(|| DetectionSet::new(stem.clone(), rgb.width(), rgb.height()));
    Sample::from_rgb(stem, &rgb, dets, None)
}

#[derive(Debug, Clone, Default)]
pub struct ColorizeOutput {
    pub images: Vec<PathBuf>,
    pub heatmaps: Vec<PathBuf>,
}

/// Colorizes each image (only its lightness is used). Boxes come from the
/// configured annotation file, matched by image id or file name; images
/// without annotations get no instances. With `dump_weights`, every fused
/// layer writes one heatmap for the full-image weight and one per instance.
pub fn cmd_colorize(cfg: &RunConfig, images: &[PathBuf], dump_weights: bool) -> Result<ColorizeOutput> {
    if images.is_empty() {
        return Err(Error::InvalidInput("no images to colorize".into()));
    }
    let bundle = load_bundle(cfg)?;
    let store = if cfg.data.annotations.exists() {
        Some(load_annotations(&cfg.data.annotations)?)
    } else {
        None
    };
    let layout = RunLayout::new(&cfg.output_dir);
    let out_dir = layout.colorized();
    fs::create_dir_all(&out_dir).map_err(|e| Error::io(format!("creating {}", out_dir.display()), e))?;
    let settings = cfg.inference_settings();
    let model = FusedColorizer {
        bundle: &bundle,
        settings: &settings,
    };
    let mut out = ColorizeOutput::default();
    for path in images {
        let sample = sample_for_image(path, store.as_ref())?;
        let result = model.colorize_traced(&sample)?;
        let dest = out_dir.join(format!("{}.png", sample.id));
        write_rgb(&dest, &result.rgb)?;
        out.images.push(dest);
        if dump_weights {
            let dir = layout.weights().join(&sample.id);
            fs::create_dir_all(&dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
            for (layer, w) in &result.weights {
                let maps = std::iter::once(("full".to_string(), &w.full))
                    .chain(w.instances.iter().enumerate().map(|(i, m)| (format!("instance{i}"), m)));
                for (name, map) in maps {
                    let p = dir.join(format!("layer{layer:02}_{name}.png"));
                    weight_map_image(map.view())
                        .save(&p)
                        .map_err(|e| Error::Image { path: p.clone(), source: e })?;
                    out.heatmaps.push(p);
                }
            }
        }
    }
    Ok(out)
}

fn write_reports(dir: &Path, prefix: &str, reports: &[MetricReport]) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    for r in reports {
        let stem = match r.protocol {
            Protocol::FullImage => format!("{prefix}full_image"),
            Protocol::InstanceLevel => format!("{prefix}instance_level"),
        };
        r.write(dir, &stem)?;
        written.push(dir.join(format!("{stem}.csv")));
        written.push(dir.join(format!("{stem}.json")));
    }
    Ok(written)
}

fn protocols(cfg: &RunConfig) -> Vec<Protocol> {
    if cfg.evaluation.instance_level {
        vec![Protocol::FullImage, Protocol::InstanceLevel]
    } else {
        vec![Protocol::FullImage]
    }
}

fn evaluate_with(model: &dyn Colorizer, ds: &Dataset, protocol: Protocol) -> Result<MetricReport> {
    match protocol {
        Protocol::FullImage => evaluate_full(model, ds, None),
        Protocol::InstanceLevel => {
            let boxes: Vec<_> = ds.samples.iter().map(|s| s.detections.clone()).collect();
            evaluate_instance_level(model, ds, &boxes, None)
        }
    }
}

/// Full-image and (optionally) instance-level reports as CSV + JSON.
pub fn cmd_evaluate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let ds = load_dataset(cfg.evaluation_data())?;
    let settings = cfg.inference_settings();
    let bundle;
    let model: Box<dyn Colorizer + '_> = match cfg.evaluation.model {
        EvalModel::GroundTruth => Box::new(GroundTruthColorizer),
        EvalModel::FullImage => {
            let layout = RunLayout::new(&cfg.output_dir);
            let net = load_network(cfg, &require_final(&layout, Stage::Full)?, Role::FullImage)?;
            bundle = ModelBundle {
                instance: net.clone(),
                full: net,
                heads: fresh_heads(cfg, &[])?,
            };
            Box::new(FullImageColorizer {
                net: &bundle.full,
                resolution: cfg.backbone.base_resolution,
            })
        }
        EvalModel::Fused => {
            bundle = load_bundle(cfg)?;
            Box::new(FusedColorizer {
                bundle: &bundle,
                settings: &settings,
            })
        }
    };
    let reports = protocols(cfg)
        .into_iter()
        .map(|p| evaluate_with(model.as_ref(), &ds, p))
        .collect::<Result<Vec<_>>>()?;
    write_reports(&RunLayout::new(&cfg.output_dir).reports(), "", &reports)
}

fn sanitize(tag: &str) -> String {
    tag.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '.' { c } else { '-' })
        .collect()
}

/// Evaluates the `[ablation]` variant. With `retrain`, a learned-fusion
/// placement variant gets freshly trained heads on its layer subset.
pub fn cmd_ablate(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let spec = &cfg.ablation.spec;
    let ds = load_dataset(cfg.evaluation_data())?;
    let mut bundle = load_bundle(cfg)?;
    let tag = sanitize(&spec.tag());
    let layout = RunLayout::new(&cfg.output_dir);
    if cfg.ablation.retrain && spec.blend_mode == BlendMode::LearnedFusion && spec.fusion_placement != FusionPlacement::Both {
        let layers = spec
            .fusion_placement
            .layers(&cfg.backbone, &cfg.backbone.fusion_layers);
        let train = load_dataset(&cfg.data)?.prepare(cfg.backbone.base_resolution);
        let data = fusion_samples(cfg, &train)?;
        let mut heads = fresh_heads(cfg, &layers)?;
        let dir = layout.root.join("checkpoints").join("ablation").join(&tag);
        reset_dir(&dir)?;
        let sink = CheckpointSink::new(&dir, cfg.training_hash());
        let mut stage = cfg.training.fusion.clone();
        stage.unfreeze_backbones = false;
        let (mut full, mut instance) = (bundle.full.clone(), bundle.instance.clone());
        train_stage_fusion(
            &stage,
            &data,
            &mut full,
            &mut instance,
            &mut heads,
            FusionTrainOptions {
                softmax: cfg.fusion.softmax,
                max_instances: cfg.fusion.max_instances,
            },
            Some(&sink),
        )?;
        bundle.heads = heads;
    }
    let settings = cfg.inference_settings();
    let reports = protocols(cfg)
        .into_iter()
        .map(|p| run_ablation(spec, &bundle, &ds, &settings, p, None))
        .collect::<Result<Vec<_>>>()?;
    write_reports(&layout.reports(), &format!("ablation_{tag}_"), &reports)
}

/// Writes a synthetic dataset plus a ready-to-run `config.toml` into `dir`.
pub fn cmd_gen_fixture(dir: &Path, synthetic: &SyntheticConfig, seed: u64) -> Result<PathBuf> {
    let ds = generate_synthetic(synthetic)?;
    ds.save(dir)?;
    let mut cfg = RunConfig::toy("run", Path::new("."));
    cfg.data.images = PathBuf::from("images");
    cfg.data.annotations = PathBuf::from("annotations.json");
    cfg.data.masks = Some(PathBuf::from("masks"));
    cfg.set_seed(seed);
    // Keep the generator settings that produced these files.
    cfg.fixture = Some(synthetic.clone());
    let path = dir.join("config.toml");
    fs::write(&path, cfg.to_toml()?).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    Ok(path)
}

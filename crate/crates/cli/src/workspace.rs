//! Artifact layout of an output directory and the helpers shared by the
//! subcommands.

use std::fs;
use std::path::{Path, PathBuf};

use lesionforge::backbones::{build_backbone_with, import_features, BackboneKind, FeatureTable};
use lesionforge::dataset::{load_manifest_with, DatasetManifest, LabelSource, Sample};
use lesionforge::ensemble::{FeatureTriple, MaskStage, Pipeline};
use lesionforge::imageops::{read_image, write_png, Image};
use lesionforge::nncore::{
    load_module, module_tensors, read_weights_file, write_weights_file, NamedTensor, Tensor,
};
use lesionforge::segmentation::{apply_mask, DualEncoder, DualEncoderConfig, MaskImage};
use rayon::prelude::*;

use crate::config::{ExperimentConfig, MaskSource};
use crate::error::{CliError, CliResult};
use crate::record::Recorder;

pub const SPLIT_MANIFEST: &str = "split_manifest.csv";
pub const CLASS_WEIGHTS: &str = "class_weights.csv";
pub const AUGMENTED_DIR: &str = "augmented";
pub const SEG_MODEL: &str = "seg/model.lfw";
pub const SEG_LOSS: &str = "seg/loss.csv";
pub const HEADS: &str = "heads.lfw";
pub const HISTORY: &str = "history.csv";
pub const REPORT: &str = "report.json";
pub const PREDICTIONS: &str = "predictions.csv";
pub const TIMING: &str = "timing.json";

pub struct Workspace<'a> {
    pub cfg: &'a ExperimentConfig,
    pub out: PathBuf,
}

impl<'a> Workspace<'a> {
    pub fn create(cfg: &'a ExperimentConfig) -> CliResult<Self> {
        let out = cfg.out_dir.clone();
        fs::create_dir_all(&out).map_err(|e| CliError::io(&out, e))?;
        Ok(Workspace { cfg, out })
    }

    pub fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }

    /// Comment lines stamped into text artifacts.
    pub fn comments(&self) -> Vec<String> {
        vec![self.cfg.stamp()]
    }

    /// Writes `text` under the output directory and records it.
    pub fn write_text(&self, rel: &str, text: &str, rec: &mut Recorder) -> CliResult<PathBuf> {
        let path = self.path(rel);
        ensure_parent(&path)?;
        fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        rec.output(&path);
        Ok(path)
    }

    pub fn write_png(&self, rel: &str, img: &Image, rec: &mut Recorder) -> CliResult<PathBuf> {
        let path = self.path(rel);
        ensure_parent(&path)?;
        let digest = self.cfg.digest();
        let seed = self.cfg.seed.to_string();
        write_png(&path, img, &[("config_digest", &digest), ("seed", &seed)])?;
        rec.output(&path);
        Ok(path)
    }

    pub fn write_weights(&self, rel: &str, mut items: Vec<NamedTensor>, rec: &mut Recorder) -> CliResult<PathBuf> {
        let path = self.path(rel);
        ensure_parent(&path)?;
        items.push(NamedTensor::meta(&format!("config_digest={}", self.cfg.digest())));
        items.push(NamedTensor::meta(&format!("seed={}", self.cfg.seed)));
        write_weights_file(&path, &items)?;
        rec.output(&path);
        Ok(path)
    }

    /// The manifest written by `prepare`.
    pub fn load_split(&self) -> CliResult<DatasetManifest> {
        let path = self.path(SPLIT_MANIFEST);
        if !path.exists() {
            return Err(CliError::Validation(format!(
                "{} not found; run `lesionforge prepare` with this config first",
                path.display()
            )));
        }
        // the split file always carries the label order it was written with
        Ok(load_manifest_with(&path, LabelSource::Header)?)
    }

    pub fn require(&self, rel: &str, producer: &str) -> CliResult<PathBuf> {
        let path = self.path(rel);
        if path.exists() {
            Ok(path)
        } else {
            Err(CliError::Validation(format!(
                "{} not found; run `lesionforge {producer}` with this config first",
                path.display()
            )))
        }
    }

    fn feature_cache(&self, kind: BackboneKind) -> PathBuf {
        self.path(&format!("features/{}-{}.csv", kind.key(), &self.cfg.digest()[..16]))
    }

    /// Image pipeline without heads. The mask stage is set only for
    /// model-predicted masks; manifest masks are applied by
    /// [`Workspace::preprocess`].
    pub fn pipeline(&self) -> CliResult<Pipeline> {
        let cfg = self.cfg;
        let mask = if cfg.seg.enabled && cfg.seg.mask_source == MaskSource::Model {
            let path = self.require(SEG_MODEL, "seg train")?;
            Some(MaskStage {
                net: load_seg_model(&path)?,
                mode: cfg.seg.mode,
                size: cfg.seg.size,
            })
        } else {
            None
        };
        Ok(Pipeline {
            image_size: cfg.image_size,
            filter: cfg.filter.clone(),
            mask,
            backbones: BackboneKind::ALL.map(|k| build_backbone_with(k, cfg.input_channels(), cfg.seed)),
            model: None,
        })
    }

    /// Backbone-ready image for one sample.
    pub fn preprocess(&self, pipe: &Pipeline, s: &Sample) -> CliResult<Image> {
        let img = read_image(&s.image_path)?;
        let pre = pipe.preprocess(&img)?;
        if !(self.cfg.seg.enabled && self.cfg.seg.mask_source == MaskSource::Manifest) {
            return Ok(pre);
        }
        let mask_path = s.mask_path.as_ref().ok_or_else(|| {
            CliError::Validation(format!(
                "sample {} has no mask; set seg.mask_source=model or seg.enabled=false",
                s.id()
            ))
        })?;
        let mask = read_mask(mask_path)?.resize(pipe.image_size, pipe.image_size);
        Ok(apply_mask(&pre, &mask, self.cfg.seg.mode)?.image)
    }

    /// Pooled features of every manifest sample, through the per-backbone
    /// caches. Imported tables replace extraction for their backbone.
    pub fn features(&self, m: &DatasetManifest, rec: &mut Recorder) -> CliResult<Vec<FeatureTriple>> {
        let ids: Vec<String> = m.samples().iter().map(Sample::id).collect();
        let mut tables: Vec<Option<FeatureTable>> = vec![None, None, None];
        for (j, kind) in BackboneKind::ALL.into_iter().enumerate() {
            if let Some(p) = &self.cfg.imported[j] {
                tables[j] = Some(import_features(p, None, ids.iter().map(String::as_str))?);
                continue;
            }
            let cache = self.feature_cache(kind);
            if cache.exists() {
                let t = FeatureTable::read(&cache)?;
                if t.check_coverage(ids.iter().map(String::as_str)).is_ok() {
                    tables[j] = Some(t);
                }
            }
        }
        let missing: Vec<usize> = (0..3).filter(|&j| tables[j].is_none()).collect();
        if !missing.is_empty() {
            let pipe = self.pipeline()?;
            let rows: Vec<Vec<Vec<f32>>> = m
                .samples()
                .par_iter()
                .map(|s| {
                    let pre = self.preprocess(&pipe, s)?;
                    let t = pipe.features_of(&pre)?;
                    Ok(missing.iter().map(|&j| t[j].clone()).collect())
                })
                .collect::<CliResult<_>>()?;
            for (slot, &j) in missing.iter().enumerate() {
                let mut table = FeatureTable::new(rows[0][slot].len())?;
                for (id, r) in ids.iter().zip(&rows) {
                    table.insert(id.clone(), r[slot].clone())?;
                }
                let cache = self.feature_cache(BackboneKind::ALL[j]);
                ensure_parent(&cache)?;
                table.write(&cache, &self.comments())?;
                rec.output(&cache);
                tables[j] = Some(table);
            }
        }
        let tables: Vec<FeatureTable> = tables.into_iter().map(|t| t.expect("filled above")).collect();
        Ok(ids
            .iter()
            .map(|id| {
                [0, 1, 2].map(|j| tables[j].get(id).expect("coverage checked").to_vec())
            })
            .collect())
    }
}

pub fn ensure_parent(path: &Path) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(())
}

/// Binary mask from an image file (first channel, thresholded at 0.5).
pub fn read_mask(path: &Path) -> CliResult<MaskImage> {
    Ok(MaskImage::new(read_image(path)?).binarize())
}

const SEG_PREFIX: &str = "seg.";

pub fn seg_model_tensors(net: &DualEncoder) -> Vec<NamedTensor> {
    let c = net.config();
    let mut v = module_tensors(SEG_PREFIX, net);
    let shape = [c.encoder_a_depth, c.encoder_b_depth, c.base_channels, c.in_channels];
    v.push(NamedTensor::new(
        "seg.config",
        Tensor::new(&[4], shape.iter().map(|&d| d as f32).collect()).expect("4 values"),
    ));
    v
}

pub fn load_seg_model(path: &Path) -> CliResult<DualEncoder> {
    let items = read_weights_file(path)?;
    let c = items
        .iter()
        .find(|t| t.name == "seg.config")
        .ok_or_else(|| CliError::Validation(format!("{}: not a segmentation model file", path.display())))?;
    let d: Vec<usize> = c.tensor.data().iter().map(|&v| v as usize).collect();
    let cfg = DualEncoderConfig {
        encoder_a_depth: d[0],
        encoder_b_depth: d[1],
        base_channels: d[2],
        in_channels: d[3],
    };
    let mut net = DualEncoder::new(cfg, 0)?;
    load_module(SEG_PREFIX, &mut net, &items)?;
    Ok(net)
}

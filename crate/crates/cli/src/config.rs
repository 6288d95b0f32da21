//! Flat `key=value` experiment configuration with dotted keys.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Relative paths resolve against the config file's directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use lesionforge::dataset::{LabelSource, SplitFractions};
use lesionforge::ensemble::{uniform_weights, EnsembleMode, TrainConfig};
use lesionforge::imageops::{AugmentRanges, FilterChainConfig};
use lesionforge::segmentation::{DualEncoderConfig, MaskMode, SegTrainConfig};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Every key with its default. An empty default means "unset".
pub const DEFAULTS: &[(&str, &str)] = &[
    ("data.manifest", ""),
    ("data.label_source", "auto"),
    ("data.image_size", "128"),
    ("split.train", "0.6"),
    ("split.val", "0.2"),
    ("split.test", "0.2"),
    ("seed", "0"),
    ("rebalance.class_weights", "true"),
    ("rebalance.augment", "true"),
    ("rebalance.cap_ratio", "inf"),
    ("augment.rotation_deg", "30"),
    ("augment.zoom_min", "0.8"),
    ("augment.zoom_max", "1.2"),
    ("augment.max_shift", "0.1"),
    ("augment.flip_h", "0.5"),
    ("augment.flip_v", "0.5"),
    ("filter.chain", "gaussian(1.0,5), median(3), hist_eq"),
    ("filter.sobel_channel", "false"),
    ("seg.enabled", "false"),
    ("seg.mask_source", "model"),
    ("seg.mode", "multiply"),
    ("seg.size", "64"),
    ("seg.epochs", "50"),
    ("seg.lr", "0.001"),
    ("seg.batch_size", "8"),
    ("seg.encoder_a_depth", "2"),
    ("seg.encoder_b_depth", "3"),
    ("seg.base_channels", "16"),
    ("ensemble.mode", "soft_vote"),
    ("ensemble.model_weights", "uniform"),
    ("train.epochs", "10"),
    ("train.batch_size", "32"),
    ("train.lr", "0.001"),
    ("train.standardize", "true"),
    ("eval.timing_runs", "10"),
    ("eval.timing_warmup", "2"),
    ("features.s_mobile", ""),
    ("features.s_vgg", ""),
    ("features.s_incept", ""),
    ("output.dir", "out"),
];

/// Keys left out of the config digest: they move files around without
/// changing any result.
const UNDIGESTED: &[&str] = &["output.dir"];

/// Where lesion masks come from when `seg.enabled=true`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaskSource {
    /// Predicted by the trained dual encoder.
    Model,
    /// Ground-truth masks from the manifest's mask column.
    Manifest,
    /// All-ones mask; images pass through unchanged.
    Identity,
}

impl FromStr for MaskSource {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "model" => Ok(MaskSource::Model),
            "manifest" => Ok(MaskSource::Manifest),
            "identity" => Ok(MaskSource::Identity),
            o => Err(format!("expected model, manifest or identity, got `{o}`")),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SegSettings {
    pub enabled: bool,
    pub mask_source: MaskSource,
    pub mode: MaskMode,
    /// Side length the segmenter trains and predicts at.
    pub size: usize,
    pub model: DualEncoderConfig,
    pub train: SegTrainConfig,
}

#[derive(Clone, Debug)]
pub struct ExperimentConfig {
    /// Resolved `key → value` for every key, defaults included.
    pub entries: BTreeMap<String, String>,
    pub manifest: Option<PathBuf>,
    pub label_source: LabelSource,
    pub image_size: usize,
    pub split: SplitFractions,
    pub seed: u64,
    pub class_weights: bool,
    pub augment: bool,
    pub cap_ratio: f64,
    pub augment_ranges: AugmentRanges,
    pub filter: FilterChainConfig,
    pub sobel_channel: bool,
    pub seg: SegSettings,
    pub ensemble_mode: EnsembleMode,
    pub model_weights: [f64; 3],
    pub train: TrainConfig,
    pub timing_runs: usize,
    pub timing_warmup: usize,
    /// Imported feature tables, in backbone fusion order.
    pub imported: [Option<PathBuf>; 3],
    pub out_dir: PathBuf,
}

fn parse_lines(text: &str, origin: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| {
            CliError::Validation(format!("{}:{}: expected key=value, got `{line}`", origin.display(), i + 1))
        })?;
        let k = k.trim();
        if !DEFAULTS.iter().any(|(d, _)| *d == k) {
            return Err(CliError::Validation(format!("{}:{}: unknown key `{k}`", origin.display(), i + 1)));
        }
        if map.insert(k.to_string(), v.trim().to_string()).is_some() {
            return Err(CliError::Validation(format!("{}:{}: duplicate key `{k}`", origin.display(), i + 1)));
        }
    }
    Ok(map)
}

struct Fields<'a> {
    entries: &'a BTreeMap<String, String>,
}

impl Fields<'_> {
    fn raw(&self, key: &str) -> &str {
        self.entries.get(key).map(String::as_str).unwrap_or_default()
    }

    fn get<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: std::fmt::Display,
    {
        let raw = self.raw(key);
        raw.parse()
            .map_err(|e| CliError::Validation(format!("{key}: cannot parse `{raw}`: {e}")))
    }

    fn flag(&self, key: &str) -> Result<bool, CliError> {
        match self.raw(key) {
            "true" | "yes" | "on" | "1" => Ok(true),
            "false" | "no" | "off" | "0" => Ok(false),
            o => Err(CliError::Validation(format!("{key}: expected true or false, got `{o}`"))),
        }
    }

    fn positive(&self, key: &str) -> Result<usize, CliError> {
        let v: usize = self.get(key)?;
        if v == 0 {
            return Err(CliError::Validation(format!("{key}: must be positive")));
        }
        Ok(v)
    }

    fn path(&self, key: &str, base: &Path) -> Option<PathBuf> {
        let raw = self.raw(key);
        (!raw.is_empty()).then(|| base.join(raw))
    }
}

fn check(key: &str, r: lesionforge::Result<()>) -> Result<(), CliError> {
    r.map_err(|e| CliError::Validation(format!("{key}: {e}")))
}

impl ExperimentConfig {
    /// Reads a config file. `seed` overrides the file's `seed` key and
    /// `out` its `output.dir` (taken relative to the working directory).
    pub fn load(path: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Validation(format!("cannot read config {}: {e}", path.display())))?;
        let path = path
            .canonicalize()
            .map_err(|e| CliError::Validation(format!("cannot resolve {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("/")).to_path_buf();
        Self::from_map(parse_lines(&text, &path)?, &base, seed, out)
    }

    /// Defaults only, with paths relative to `base`.
    pub fn defaults(base: &Path, seed: Option<u64>, out: Option<&Path>) -> Result<Self, CliError> {
        Self::from_map(BTreeMap::new(), base, seed, out)
    }

    fn from_map(
        given: BTreeMap<String, String>,
        base: &Path,
        seed: Option<u64>,
        out: Option<&Path>,
    ) -> Result<Self, CliError> {
        let mut entries: BTreeMap<String, String> =
            DEFAULTS.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect();
        entries.extend(given);
        if let Some(s) = seed {
            entries.insert("seed".into(), s.to_string());
        }
        let f = Fields { entries: &entries };

        let split = SplitFractions::new(f.get("split.train")?, f.get("split.val")?, f.get("split.test")?)
            .map_err(|e| CliError::Validation(format!("split: {e}")))?;
        let seed: u64 = f.get("seed")?;
        let cap_ratio: f64 = f.get("rebalance.cap_ratio")?;
        if !(cap_ratio >= 1.0) {
            return Err(CliError::Validation(format!("rebalance.cap_ratio: must be at least 1, got {cap_ratio}")));
        }
        let augment_ranges = AugmentRanges {
            rotation_deg: f.get("augment.rotation_deg")?,
            zoom_min: f.get("augment.zoom_min")?,
            zoom_max: f.get("augment.zoom_max")?,
            max_shift: f.get("augment.max_shift")?,
            flip_h_prob: f.get("augment.flip_h")?,
            flip_v_prob: f.get("augment.flip_v")?,
        };
        check("augment", augment_ranges.validate())?;
        let filter: FilterChainConfig = f.get("filter.chain")?;

        let model = DualEncoderConfig {
            encoder_a_depth: f.positive("seg.encoder_a_depth")?,
            encoder_b_depth: f.positive("seg.encoder_b_depth")?,
            base_channels: f.positive("seg.base_channels")?,
            ..DualEncoderConfig::default()
        };
        check("seg", model.validate())?;
        let seg_train = SegTrainConfig {
            epochs: f.get("seg.epochs")?,
            lr: f.get("seg.lr")?,
            batch_size: f.positive("seg.batch_size")?,
            seed,
            ..SegTrainConfig::default()
        };
        if !(seg_train.lr > 0.0) {
            return Err(CliError::Validation("seg.lr: must be positive".into()));
        }
        let seg_size = f.positive("seg.size")?;
        if seg_size % model.scale() != 0 || seg_size < 8 {
            return Err(CliError::Validation(format!(
                "seg.size: must be at least 8 and a multiple of {}, got {seg_size}",
                model.scale()
            )));
        }
        let seg = SegSettings {
            enabled: f.flag("seg.enabled")?,
            mask_source: f.get("seg.mask_source")?,
            mode: f.get("seg.mode")?,
            size: seg_size,
            model,
            train: seg_train,
        };

        let model_weights = match f.raw("ensemble.model_weights") {
            "uniform" => uniform_weights(),
            raw => {
                let w: Vec<f64> = raw
                    .split(',')
                    .map(|v| v.trim().parse::<f64>())
                    .collect::<Result<_, _>>()
                    .map_err(|e| CliError::Validation(format!("ensemble.model_weights: {e}")))?;
                let sum: f64 = w.iter().sum();
                if w.len() != 3 || w.iter().any(|v| !(*v >= 0.0)) || !(sum > 0.0) {
                    return Err(CliError::Validation(
                        "ensemble.model_weights: expected `uniform` or three non-negative numbers".into(),
                    ));
                }
                [w[0] / sum, w[1] / sum, w[2] / sum]
            }
        };
        let train = TrainConfig {
            epochs: f.get("train.epochs")?,
            batch_size: f.positive("train.batch_size")?,
            lr: f.get("train.lr")?,
            seed,
            standardize: f.flag("train.standardize")?,
        };
        check("train", train.validate())?;
        let timing_runs: usize = f.get("eval.timing_runs")?;
        if timing_runs < 10 {
            return Err(CliError::Validation(format!("eval.timing_runs: at least 10 needed, got {timing_runs}")));
        }

        let image_size = f.positive("data.image_size")?;
        if image_size < 16 {
            return Err(CliError::Validation(format!("data.image_size: at least 16 needed, got {image_size}")));
        }
        let manifest = f.path("data.manifest", base);
        let imported = ["features.s_mobile", "features.s_vgg", "features.s_incept"].map(|k| f.path(k, base));
        for (key, p) in [("data.manifest", &manifest)]
            .into_iter()
            .chain(["features.s_mobile", "features.s_vgg", "features.s_incept"].into_iter().zip(&imported))
        {
            if let Some(p) = p {
                if !p.exists() {
                    return Err(CliError::Validation(format!("{key}: {} does not exist", p.display())));
                }
            }
        }
        let out_dir = match out {
            Some(o) => o.to_path_buf(),
            None => base.join(f.raw("output.dir")),
        };
        Ok(ExperimentConfig {
            manifest,
            label_source: f.get("data.label_source")?,
            image_size,
            split,
            seed,
            class_weights: f.flag("rebalance.class_weights")?,
            augment: f.flag("rebalance.augment")?,
            cap_ratio,
            augment_ranges,
            filter,
            sobel_channel: f.flag("filter.sobel_channel")?,
            seg,
            ensemble_mode: f.get("ensemble.mode")?,
            model_weights,
            train,
            timing_runs,
            timing_warmup: f.get("eval.timing_warmup")?,
            imported,
            out_dir,
            entries,
        })
    }

    /// Hex SHA-256 of the sorted `key=value` lines, output location aside.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for (k, v) in &self.entries {
            if !UNDIGESTED.contains(&k.as_str()) {
                h.update(format!("{k}={v}\n").as_bytes());
            }
        }
        hex(&h.finalize())
    }

    /// The manifest path, or a validation error naming the key.
    pub fn require_manifest(&self) -> Result<&Path, CliError> {
        self.manifest
            .as_deref()
            .ok_or_else(|| CliError::Validation("data.manifest: required for this command".into()))
    }

    /// `config_digest=<hex> seed=<n>`, the provenance line put into every
    /// artifact.
    pub fn stamp(&self) -> String {
        format!("config_digest={} seed={}", self.digest(), self.seed)
    }

    pub fn input_channels(&self) -> usize {
        if self.sobel_channel {
            4
        } else {
            3
        }
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &Path, text: &str) -> PathBuf {
        let p = dir.join("exp.cfg");
        fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn defaults_match_training_recipe() {
        let c = ExperimentConfig::defaults(Path::new("/tmp"), None, None).unwrap();
        assert_eq!(c.train, TrainConfig::default());
        assert_eq!(c.image_size, 128);
        assert_eq!(c.ensemble_mode, EnsembleMode::SoftVote);
        assert_eq!(c.filter, FilterChainConfig::default());
        assert_eq!(c.out_dir, Path::new("/tmp/out"));
        assert!(c.cap_ratio.is_infinite());
    }

    #[test]
    fn overrides_and_digest() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "# comment\ntrain.epochs = 3\nseed=4\n");
        let a = ExperimentConfig::load(&p, None, None).unwrap();
        assert_eq!((a.train.epochs, a.seed, a.train.seed), (3, 4, 4));
        let b = ExperimentConfig::load(&p, Some(9), None).unwrap();
        assert_eq!(b.seed, 9);
        assert_ne!(a.digest(), b.digest());
        let c = ExperimentConfig::load(&p, None, Some(Path::new("elsewhere"))).unwrap();
        assert_eq!(a.digest(), c.digest());
        assert_eq!(a.digest().len(), 64);
    }

    #[test]
    fn field_level_errors() {
        let dir = tempfile::tempdir().unwrap();
        for (text, needle) in [
            ("train.epochs=ten\n", "train.epochs"),
            ("bogus.key=1\n", "unknown key"),
            ("split.train=0.9\n", "split"),
            ("data.manifest=missing.csv\n", "data.manifest"),
            ("seg.size=30\n", "seg.size"),
            ("ensemble.mode=majority\n", "ensemble.mode"),
            ("no equals sign\n", "key=value"),
            ("seed=1\nseed=2\n", "duplicate"),
        ] {
            let p = write(dir.path(), text);
            let e = ExperimentConfig::load(&p, None, None).unwrap_err();
            assert!(matches!(e, CliError::Validation(_)), "{text}");
            assert!(e.to_string().contains(needle), "{text}: {e}");
        }
    }

    #[test]
    fn model_weights_normalized() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(dir.path(), "ensemble.model_weights=2,1,1\n");
        let c = ExperimentConfig::load(&p, None, None).unwrap();
        assert_eq!(c.model_weights, [0.5, 0.25, 0.25]);
    }
}

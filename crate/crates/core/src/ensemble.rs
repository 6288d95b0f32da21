//! Softmax heads over frozen backbone features, feature fusion and soft
//! voting.
//!
//! Training always fits one head per backbone plus a fusion head on the
//! concatenated features. [`EnsembleMode`] picks which of them forms the
//! ensemble prediction: the fusion head alone, or the weighted average of
//! the per-backbone heads.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::Serialize;

use crate::backbones::{extract_features, Backbone, BackboneKind};
use crate::dataset::ClassWeights;
use crate::imageops::{apply_filter_chain, FilterChainConfig, Image};
use crate::metrics::argmax;
use crate::nncore::{
    global_avg_pool, softmax, softmax_cross_entropy_grad, weighted_cross_entropy, Adam, AdamConfig,
    Dense, Module, NamedTensor, Parameter, Tensor,
};
use crate::segmentation::{apply_mask, predict_mask, DualEncoder, MaskMode};
use crate::{rng, Error, Result};

/// Probabilities closer than this to the maximum count as tied.
pub const TIE_TOLERANCE: f64 = 1e-12;
/// Allowed deviation of a probability vector's sum from 1.
pub const SUM_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub enum EnsembleMode {
    Fusion,
    #[default]
    SoftVote,
}

impl EnsembleMode {
    pub fn key(self) -> &'static str {
        match self {
            EnsembleMode::Fusion => "fusion",
            EnsembleMode::SoftVote => "soft_vote",
        }
    }
}

impl fmt::Display for EnsembleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for EnsembleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "fusion" => Ok(EnsembleMode::Fusion),
            "soft_vote" => Ok(EnsembleMode::SoftVote),
            o => Err(Error::InvalidArgument(format!("unknown ensemble mode `{o}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// Z-score every input feature with training-set statistics before the
    /// dense layer.
    pub standardize: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            lr: 0.001,
            seed: 0,
            standardize: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Prediction {
    pub probs: Vec<f64>,
    pub label: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_model_probs: Option<Vec<Vec<f64>>>,
    pub model_weights: Vec<f64>,
}

/// Lowest index whose probability is within [`TIE_TOLERANCE`] of the
/// maximum.
pub fn tie_break_argmax(p: &[f64]) -> usize {
    let max = p[argmax(p)];
    p.iter().position(|&v| v >= max - TIE_TOLERANCE).unwrap_or(0)
}

fn check_distribution(p: &[f64], what: &str) -> Result<()> {
    let sum: f64 = p.iter().sum();
    if p.iter().any(|v| !(*v >= 0.0)) || (sum - 1.0).abs() > SUM_TOLERANCE {
        return Err(Error::InvalidArgument(format!("{what} is not a probability vector (sum {sum})")));
    }
    Ok(())
}

/// Weighted average `Σ_j w_j·p_j` of per-model class probabilities.
pub fn soft_vote(per_model: &[Vec<f64>], weights: &[f64]) -> Result<Prediction> {
    if per_model.is_empty() || per_model.len() != weights.len() {
        return Err(Error::Shape(format!("{} models vs {} weights", per_model.len(), weights.len())));
    }
    let k = per_model[0].len();
    if k == 0 || per_model.iter().any(|p| p.len() != k) {
        return Err(Error::Shape("model outputs differ in length".into()));
    }
    check_distribution(weights, "model weights")?;
    for (j, p) in per_model.iter().enumerate() {
        check_distribution(p, &format!("model {j} output"))?;
    }
    let mut probs = vec![0.0; k];
    for (p, &w) in per_model.iter().zip(weights) {
        for (acc, &v) in probs.iter_mut().zip(p) {
            *acc += w * v;
        }
    }
    Ok(Prediction {
        label: tie_break_argmax(&probs),
        probs,
        per_model_probs: Some(per_model.to_vec()),
        model_weights: weights.to_vec(),
    })
}

/// Global-average-pools three feature maps and concatenates them in the
/// order given (S-MOBILE, S-VGG, S-INCEPT by convention).
pub fn pool_and_concat(maps: &[&Tensor]) -> Result<Vec<f32>> {
    if maps.len() != 3 {
        return Err(Error::InvalidArgument(format!("expected 3 feature maps, got {}", maps.len())));
    }
    let mut out = Vec::new();
    for m in maps {
        let (n, ..) = m.dims4()?;
        if n != 1 {
            return Err(Error::Shape(format!("feature map batch must be 1, got {n}")));
        }
        out.extend(global_avg_pool(m)?.into_data());
    }
    Ok(out)
}

/// Pooled features of one sample from each backbone, in fusion order.
pub type FeatureTriple = [Vec<f32>; 3];

pub fn fuse(t: &FeatureTriple) -> Vec<f32> {
    t.concat()
}

/// Dense + softmax classifier with optional fixed input standardization.
///
/// Weights start at zero: the head is a single linear layer, so there is no
/// symmetry to break, and the first updates already point along the
/// class-mean directions.
#[derive(Clone, Debug, PartialEq)]
pub struct SoftmaxHead {
    pub dense: Dense<f32>,
    mean: Vec<f32>,
    inv_std: Vec<f32>,
}

impl SoftmaxHead {
    pub fn new(inputs: usize, classes: usize) -> Self {
        SoftmaxHead {
            dense: Dense {
                weight: Parameter::new(Tensor::zeros(&[inputs, classes])),
                bias: Parameter::new(Tensor::zeros(&[classes])),
            },
            mean: vec![0.0; inputs],
            inv_std: vec![1.0; inputs],
        }
    }

    pub fn inputs(&self) -> usize {
        self.dense.inputs()
    }

    pub fn classes(&self) -> usize {
        self.dense.outputs()
    }

    fn fit_standardizer(&mut self, rows: &[&[f32]]) {
        let f = self.inputs();
        let n = rows.len() as f64;
        for j in 0..f {
            let m = rows.iter().map(|r| r[j] as f64).sum::<f64>() / n;
            let var = rows.iter().map(|r| (r[j] as f64 - m).powi(2)).sum::<f64>() / n;
            self.mean[j] = m as f32;
            self.inv_std[j] = if var > 1e-12 { (1.0 / var.sqrt()) as f32 } else { 1.0 };
        }
    }

    fn input(&self, rows: &[&[f32]]) -> Result<Tensor> {
        let f = self.inputs();
        if let Some(r) = rows.iter().find(|r| r.len() != f) {
            return Err(Error::Shape(format!("head expects {f} features, got {}", r.len())));
        }
        let mut data = Vec::with_capacity(rows.len() * f);
        for r in rows {
            data.extend(r.iter().zip(&self.mean).zip(&self.inv_std).map(|((v, m), s)| (v - m) * s));
        }
        Tensor::new(&[rows.len(), f], data)
    }

    /// Class probabilities for each row.
    pub fn probs(&self, rows: &[&[f32]]) -> Result<Vec<Vec<f64>>> {
        if rows.is_empty() {
            return Ok(Vec::new());
        }
        let p = softmax(&self.dense.forward(&self.input(rows)?)?)?;
        Ok(p.data().chunks(self.classes()).map(|r| r.iter().map(|&v| v as f64).collect()).collect())
    }

    fn tensors(&self, prefix: &str) -> Vec<NamedTensor> {
        let f = self.inputs();
        let mut v = crate::nncore::module_tensors(prefix, self);
        v.push(NamedTensor::new(format!("{prefix}norm.mean"), Tensor::new(&[f], self.mean.clone()).expect("f > 0")));
        v.push(NamedTensor::new(format!("{prefix}norm.inv_std"), Tensor::new(&[f], self.inv_std.clone()).expect("f > 0")));
        v
    }

    fn from_tensors(prefix: &str, items: &[NamedTensor]) -> Result<Self> {
        let get = |n: &str| {
            items
                .iter()
                .find(|t| t.name == format!("{prefix}{n}"))
                .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {prefix}{n}")))
        };
        let (f, k) = get("weight")?.tensor.dims2().map_err(|e| Error::WeightsFormat(e.to_string()))?;
        let mut head = SoftmaxHead::new(f, k);
        crate::nncore::load_module(prefix, &mut head, items)?;
        head.mean = get("norm.mean")?.tensor.data().to_vec();
        head.inv_std = get("norm.inv_std")?.tensor.data().to_vec();
        if head.mean.len() != f || head.inv_std.len() != f {
            return Err(Error::WeightsFormat(format!("{prefix}norm: width mismatch")));
        }
        Ok(head)
    }
}

impl Module<f32> for SoftmaxHead {
    fn params(&self) -> Vec<(String, &Parameter<f32>)> {
        vec![("weight".into(), &self.dense.weight), ("bias".into(), &self.dense.bias)]
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<f32>)> {
        vec![("weight".into(), &mut self.dense.weight), ("bias".into(), &mut self.dense.bias)]
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct HeadHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub val_accuracy: Vec<f64>,
}

/// Labelled rows for evaluation during training.
pub type LabelledRows<'a> = (&'a [&'a [f32]], &'a [usize]);

fn loss_and_accuracy(head: &SoftmaxHead, rows: &[&[f32]], y: &[usize], w: Option<&[f64]>) -> Result<(f64, f64)> {
    let p = head.probs(rows)?;
    let correct = p.iter().zip(y).filter(|(p, &t)| tie_break_argmax(p) == t).count();
    let t = Tensor::new(&[p.len(), head.classes()], p.concat())?;
    Ok((weighted_cross_entropy(&t, y, w)?, correct as f64 / y.len() as f64))
}

/// Fits a softmax head with class-weighted cross-entropy and Adam. Every
/// epoch's shuffle is keyed by `(seed, name, epoch)`.
pub fn train_head(
    name: &str,
    rows: &[&[f32]],
    labels: &[usize],
    classes: usize,
    weights: Option<&ClassWeights>,
    cfg: &TrainConfig,
    val: Option<LabelledRows<'_>>,
) -> Result<(SoftmaxHead, HeadHistory)> {
    cfg.validate()?;
    if rows.is_empty() || rows.len() != labels.len() {
        return Err(Error::Shape(format!("{} rows vs {} labels", rows.len(), labels.len())));
    }
    let mut counts = vec![0usize; classes];
    for &y in labels {
        *counts
            .get_mut(y)
            .ok_or_else(|| Error::InvalidArgument(format!("label {y} outside 0..{classes}")))? += 1;
    }
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(Error::ClassCount {
            class: c.to_string(),
            count: 0,
            msg: "every class must appear in the training set",
        });
    }
    let w = weights.map(ClassWeights::as_slice);
    let mut head = SoftmaxHead::new(rows[0].len(), classes);
    if cfg.standardize {
        head.fit_standardizer(rows);
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut hist = HeadHistory::default();
    let mut order: Vec<usize> = (0..rows.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::name_key(name), rng::name_key("epoch"), epoch as u64]));
        for batch in order.chunks(cfg.batch_size) {
            let xb: Vec<&[f32]> = batch.iter().map(|&i| rows[i]).collect();
            let yb: Vec<usize> = batch.iter().map(|&i| labels[i]).collect();
            let x = head.input(&xb)?;
            let probs = softmax(&head.dense.forward(&x)?)?;
            let loss = weighted_cross_entropy(&probs, &yb, w)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("{name}: loss at epoch {epoch}")));
            }
            let g = softmax_cross_entropy_grad(&probs, &yb, w)?;
            head.zero_grad();
            head.dense.backward(&x, &g)?;
            opt.step(head.params_mut())?;
        }
        let (l, a) = loss_and_accuracy(&head, rows, labels, w)?;
        hist.train_loss.push(l);
        hist.train_accuracy.push(a);
        if let Some((vr, vy)) = val {
            if !vr.is_empty() {
                let (l, a) = loss_and_accuracy(&head, vr, vy, w)?;
                hist.val_loss.push(l);
                hist.val_accuracy.push(a);
            }
        }
    }
    Ok((head, hist))
}

/// Display name of the fusion head and of the ensemble row in reports.
pub const ENSEMBLE_NAME: &str = "Ensemble";

/// Three per-backbone heads plus a fusion head.
#[derive(Clone, Debug, PartialEq)]
pub struct EnsembleModel {
    pub mode: EnsembleMode,
    pub model_weights: [f64; 3],
    heads: [SoftmaxHead; 3],
    fusion: SoftmaxHead,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EnsembleHistory {
    pub heads: Vec<(String, HeadHistory)>,
}

pub fn uniform_weights() -> [f64; 3] {
    [1.0 / 3.0; 3]
}

/// Trains all four heads on the same samples.
pub fn train_ensemble(
    train: &[FeatureTriple],
    labels: &[usize],
    classes: usize,
    weights: Option<&ClassWeights>,
    cfg: &TrainConfig,
    val: Option<(&[FeatureTriple], &[usize])>,
) -> Result<(EnsembleModel, EnsembleHistory)> {
    let mut heads = Vec::with_capacity(3);
    let mut history = Vec::with_capacity(4);
    for (j, kind) in BackboneKind::ALL.iter().enumerate() {
        let rows: Vec<&[f32]> = train.iter().map(|t| t[j].as_slice()).collect();
        let vrows: Vec<&[f32]> = val.map(|(v, _)| v.iter().map(|t| t[j].as_slice()).collect()).unwrap_or_default();
        let vsplit = val.map(|(_, y)| (&vrows[..], y));
        let (h, hist) = train_head(&format!("head.{}", kind.key()), &rows, labels, classes, weights, cfg, vsplit)?;
        heads.push(h);
        history.push((kind.label().to_string(), hist));
    }
    let fused: Vec<Vec<f32>> = train.iter().map(fuse).collect();
    let rows: Vec<&[f32]> = fused.iter().map(Vec::as_slice).collect();
    let vfused: Vec<Vec<f32>> = val.map(|(v, _)| v.iter().map(fuse).collect()).unwrap_or_default();
    let vrows: Vec<&[f32]> = vfused.iter().map(Vec::as_slice).collect();
    let vsplit = val.map(|(_, y)| (&vrows[..], y));
    let (fusion, hist) = train_head("head.fusion", &rows, labels, classes, weights, cfg, vsplit)?;
    history.push(("Fusion".to_string(), hist));
    let heads: [SoftmaxHead; 3] = heads.try_into().expect("three heads");
    Ok((
        EnsembleModel {
            mode: EnsembleMode::default(),
            model_weights: uniform_weights(),
            heads,
            fusion,
        },
        EnsembleHistory { heads: history },
    ))
}

impl EnsembleModel {
    pub fn classes(&self) -> usize {
        self.fusion.classes()
    }

    pub fn head(&self, j: usize) -> &SoftmaxHead {
        &self.heads[j]
    }

    pub fn fusion_head(&self) -> &SoftmaxHead {
        &self.fusion
    }

    pub fn set_model_weights(&mut self, w: [f64; 3]) -> Result<()> {
        check_distribution(&w, "model weights")?;
        self.model_weights = w;
        Ok(())
    }

    /// Probabilities of backbone head `j` for each sample.
    pub fn head_probs(&self, j: usize, samples: &[FeatureTriple]) -> Result<Vec<Vec<f64>>> {
        let rows: Vec<&[f32]> = samples.iter().map(|t| t[j].as_slice()).collect();
        self.heads[j].probs(&rows)
    }

    /// Ensemble predictions in the current mode.
    pub fn predict_batch(&self, samples: &[FeatureTriple]) -> Result<Vec<Prediction>> {
        match self.mode {
            EnsembleMode::Fusion => {
                let fused: Vec<Vec<f32>> = samples.iter().map(fuse).collect();
                let rows: Vec<&[f32]> = fused.iter().map(Vec::as_slice).collect();
                Ok(self
                    .fusion
                    .probs(&rows)?
                    .into_iter()
                    .map(|probs| Prediction {
                        label: tie_break_argmax(&probs),
                        probs,
                        per_model_probs: None,
                        model_weights: self.model_weights.to_vec(),
                    })
                    .collect())
            }
            EnsembleMode::SoftVote => {
                let per: Vec<Vec<Vec<f64>>> = (0..3).map(|j| self.head_probs(j, samples)).collect::<Result<_>>()?;
                (0..samples.len())
                    .map(|i| soft_vote(&[per[0][i].clone(), per[1][i].clone(), per[2][i].clone()], &self.model_weights))
                    .collect()
            }
        }
    }

    pub fn predict(&self, sample: &FeatureTriple) -> Result<Prediction> {
        Ok(self.predict_batch(std::slice::from_ref(sample))?.remove(0))
    }

    pub fn tensors(&self) -> Vec<NamedTensor> {
        let mut v = Vec::new();
        for (kind, h) in BackboneKind::ALL.iter().zip(&self.heads) {
            v.extend(h.tensors(&format!("head.{}.", kind.key())));
        }
        v.extend(self.fusion.tensors("head.fusion."));
        let mode = match self.mode {
            EnsembleMode::Fusion => 0.0,
            EnsembleMode::SoftVote => 1.0,
        };
        v.push(NamedTensor::new("ensemble.mode", Tensor::full(&[1], mode)));
        let w: Vec<f32> = self.model_weights.iter().map(|&w| w as f32).collect();
        v.push(NamedTensor::new("ensemble.model_weights", Tensor::new(&[3], w).expect("3 weights")));
        v
    }

    /// Rebuilds a model from [`EnsembleModel::tensors`]. Stored model
    /// weights are `f32`; they are renormalized to sum to 1.
    pub fn from_tensors(items: &[NamedTensor]) -> Result<Self> {
        let find = |n: &str| {
            items
                .iter()
                .find(|t| t.name == n)
                .ok_or_else(|| Error::WeightsFormat(format!("missing tensor {n}")))
        };
        let mut heads = Vec::with_capacity(3);
        for kind in BackboneKind::ALL {
            heads.push(SoftmaxHead::from_tensors(&format!("head.{}.", kind.key()), items)?);
        }
        let fusion = SoftmaxHead::from_tensors("head.fusion.", items)?;
        let k = fusion.classes();
        if heads.iter().any(|h| h.classes() != k) {
            return Err(Error::WeightsFormat("heads disagree on the class count".into()));
        }
        let mode = if find("ensemble.mode")?.tensor.data()[0] == 0.0 {
            EnsembleMode::Fusion
        } else {
            EnsembleMode::SoftVote
        };
        let w = find("ensemble.model_weights")?.tensor.data().to_vec();
        let sum: f64 = w.iter().map(|&v| v as f64).sum();
        if w.len() != 3 || !(sum > 0.0) {
            return Err(Error::WeightsFormat("bad model weights".into()));
        }
        let model_weights = [w[0] as f64 / sum, w[1] as f64 / sum, w[2] as f64 / sum];
        Ok(EnsembleModel {
            mode,
            model_weights,
            heads: heads.try_into().expect("three heads"),
            fusion,
        })
    }
}

/// Segmenter used to focus images before feature extraction.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskStage {
    pub net: DualEncoder,
    pub mode: MaskMode,
    /// Side length the segmenter runs at.
    pub size: usize,
}

/// Everything needed to go from an image to a prediction.
#[derive(Clone, Debug, PartialEq)]
pub struct Pipeline {
    pub image_size: usize,
    pub filter: FilterChainConfig,
    pub mask: Option<MaskStage>,
    pub backbones: [Backbone; 3],
    pub model: Option<EnsembleModel>,
}

impl Pipeline {
    /// Resize, filter chain, then (if configured) multiply or crop by the
    /// mask predicted from the resized unfiltered image.
    pub fn preprocess(&self, img: &Image) -> Result<Image> {
        let resized = img.resize(self.image_size, self.image_size);
        let filtered = apply_filter_chain(&resized, &self.filter)?;
        match &self.mask {
            None => Ok(filtered),
            Some(stage) => {
                let small = resized.resize(stage.size, stage.size);
                let mask = predict_mask(&stage.net, &small)?.resize(self.image_size, self.image_size);
                Ok(apply_mask(&filtered, &mask, stage.mode)?.image)
            }
        }
    }

    /// Pooled features of a preprocessed image from each backbone.
    pub fn features_of(&self, pre: &Image) -> Result<FeatureTriple> {
        let mut out: [Vec<f32>; 3] = Default::default();
        for (slot, net) in out.iter_mut().zip(&self.backbones) {
            *slot = global_avg_pool(&extract_features(net, pre)?)?.into_data();
        }
        Ok(out)
    }

    pub fn features(&self, img: &Image) -> Result<FeatureTriple> {
        self.features_of(&self.preprocess(img)?)
    }

    pub fn predict(&self, img: &Image) -> Result<Prediction> {
        let model = self
            .model
            .as_ref()
            .ok_or_else(|| Error::Untrained("pipeline has no trained heads".into()))?;
        model.predict(&self.features(img)?)
    }
}

/// Prediction CSV `sample_id,label,prob_0..prob_{K−1}`.
pub fn predictions_csv(ids: &[String], preds: &[Prediction], comments: &[String]) -> String {
    let k = preds.first().map_or(0, |p| p.probs.len());
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("sample_id,label");
    for c in 0..k {
        out.push_str(&format!(",prob_{c}"));
    }
    out.push('\n');
    for (id, p) in ids.iter().zip(preds) {
        out.push_str(&format!("{id},{}", p.label));
        for v in &p.probs {
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    out
}

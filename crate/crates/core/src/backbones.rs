//! Frozen surrogate feature extractors and feature tables.
//!
//! Three small seeded networks with distinct structural signatures:
//!
//! * `S-MOBILE`: strided stem, then inverted-residual style blocks
//!   (expand, depthwise, linear projection without activation);
//! * `S-VGG`: four plain 3×3 conv + max-pool stages;
//! * `S-INCEPT`: strided stem, then two mixed blocks running 3×3 and 5×5
//!   branches in parallel and concatenating them.
//!
//! All three map an `H×W` input to 64 channels at `H/16 × W/16`. Their
//! parameters are frozen at construction. Externally computed features can
//! be swapped in through [`FeatureTable`].

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rayon::prelude::*;

use crate::imageops::{sobel_magnitude, Image};
use crate::nncore::{
    concat_channels, global_avg_pool, max_pool2d, relu, uniform_bias, Conv2d, DepthwiseConv2d,
    Module, Padding, Parameter, Real, Tensor,
};
use crate::{Error, Result};

/// Channels emitted by every surrogate.
pub const FEATURE_CHANNELS: usize = 64;
/// Smallest accepted input side.
pub const MIN_INPUT: usize = 16;

const BIAS_SCALE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BackboneKind {
    SMobile,
    SVgg,
    SIncept,
}

impl BackboneKind {
    /// Fixed fusion order.
    pub const ALL: [BackboneKind; 3] = [BackboneKind::SMobile, BackboneKind::SVgg, BackboneKind::SIncept];

    /// Snake-case key used in file names and config.
    pub fn key(self) -> &'static str {
        match self {
            BackboneKind::SMobile => "s_mobile",
            BackboneKind::SVgg => "s_vgg",
            BackboneKind::SIncept => "s_incept",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            BackboneKind::SMobile => "S-MOBILE",
            BackboneKind::SVgg => "S-VGG",
            BackboneKind::SIncept => "S-INCEPT",
        }
    }

    pub fn seed_offset(self) -> u64 {
        match self {
            BackboneKind::SMobile => 0x100,
            BackboneKind::SVgg => 0x200,
            BackboneKind::SIncept => 0x300,
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.label())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        BackboneKind::ALL
            .into_iter()
            .find(|k| k.key() == norm)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown backbone `{s}`")))
    }
}

/// One step of a surrogate's forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum Stage<T: Real = f32> {
    Conv(Conv2d<T>),
    Depthwise(DepthwiseConv2d<T>),
    Relu,
    MaxPool { k: usize, stride: usize },
    /// Parallel convolutions on the same input, outputs concatenated along
    /// channels in order.
    Mixed(Vec<Conv2d<T>>),
}

impl<T: Real> Stage<T> {
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        match self {
            Stage::Conv(c) => c.forward(x),
            Stage::Depthwise(d) => d.forward(x),
            Stage::Relu => Ok(relu(x)),
            Stage::MaxPool { k, stride } => Ok(max_pool2d(x, *k, *stride)?.0),
            Stage::Mixed(branches) => {
                let outs = branches.iter().map(|b| b.forward(x)).collect::<Result<Vec<_>>>()?;
                concat_channels(&outs.iter().collect::<Vec<_>>())
            }
        }
    }

    fn cast<U: Real>(&self) -> Stage<U> {
        match self {
            Stage::Conv(c) => Stage::Conv(c.cast()),
            Stage::Depthwise(d) => Stage::Depthwise(d.cast()),
            Stage::Relu => Stage::Relu,
            Stage::MaxPool { k, stride } => Stage::MaxPool { k: *k, stride: *stride },
            Stage::Mixed(b) => Stage::Mixed(b.iter().map(Conv2d::cast).collect()),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Backbone<T: Real = f32> {
    kind: BackboneKind,
    in_channels: usize,
    stages: Vec<(String, Stage<T>)>,
}

/// Three-channel surrogate of the given kind.
pub fn build_backbone(kind: BackboneKind, seed: u64) -> Backbone {
    build_backbone_with(kind, 3, seed)
}

/// Surrogate taking `in_channels` input planes (4 when a Sobel channel is
/// appended to RGB).
pub fn build_backbone_with(kind: BackboneKind, in_channels: usize, seed: u64) -> Backbone {
    let seed = seed.wrapping_add(kind.seed_offset());
    let mut b = Builder {
        prefix: kind.key(),
        seed,
        stages: Vec::new(),
    };
    match kind {
        BackboneKind::SMobile => {
            b.conv("stem", in_channels, 16, 3, 2);
            b.push("stem_relu", Stage::Relu);
            b.depthwise("b1_dw", 16, 2);
            b.push("b1_relu", Stage::Relu);
            b.conv("b1_project", 16, 32, 1, 1);
            b.pool("pool1");
            b.conv("b2_expand", 32, 128, 1, 1);
            b.push("b2_expand_relu", Stage::Relu);
            b.depthwise("b2_dw", 128, 2);
            b.push("b2_dw_relu", Stage::Relu);
            b.conv("b2_project", 128, 64, 1, 1);
        }
        BackboneKind::SVgg => {
            let widths = [in_channels, 16, 32, 64, 64];
            for i in 0..4 {
                b.conv(&format!("conv{}", i + 1), widths[i], widths[i + 1], 3, 1);
                b.push(&format!("relu{}", i + 1), Stage::Relu);
                b.pool(&format!("pool{}", i + 1));
            }
        }
        BackboneKind::SIncept => {
            b.conv("stem", in_channels, 16, 3, 2);
            b.push("stem_relu", Stage::Relu);
            b.pool("pool0");
            b.mixed("mix1", 16, 16);
            b.push("mix1_relu", Stage::Relu);
            b.pool("pool1");
            b.mixed("mix2", 32, 32);
            b.push("mix2_relu", Stage::Relu);
            b.pool("pool2");
        }
    }
    let mut net = Backbone {
        kind,
        in_channels,
        stages: b.stages,
    };
    net.freeze();
    net
}

struct Builder {
    prefix: &'static str,
    seed: u64,
    stages: Vec<(String, Stage<f32>)>,
}

impl Builder {
    fn name(&self, n: &str) -> String {
        format!("{}.{n}", self.prefix)
    }

    fn push(&mut self, n: &str, s: Stage<f32>) {
        self.stages.push((self.name(n), s));
    }

    fn conv_layer(&self, n: &str, i: usize, o: usize, k: usize, stride: usize) -> Conv2d<f32> {
        let name = self.name(n);
        let mut c = Conv2d::new(&name, i, o, k, stride, Padding::Same, self.seed);
        c.bias = Parameter::new(uniform_bias(o, BIAS_SCALE, self.seed, &format!("{name}.bias")));
        c
    }

    fn conv(&mut self, n: &str, i: usize, o: usize, k: usize, stride: usize) {
        let c = self.conv_layer(n, i, o, k, stride);
        self.push(n, Stage::Conv(c));
    }

    fn depthwise(&mut self, n: &str, ch: usize, stride: usize) {
        let name = self.name(n);
        let mut d = DepthwiseConv2d::new(&name, ch, 3, stride, Padding::Same, self.seed);
        d.bias = Parameter::new(uniform_bias(ch, BIAS_SCALE, self.seed, &format!("{name}.bias")));
        self.push(n, Stage::Depthwise(d));
    }

    fn mixed(&mut self, n: &str, i: usize, per_branch: usize) {
        let a = self.conv_layer(&format!("{n}_3x3"), i, per_branch, 3, 1);
        let b = self.conv_layer(&format!("{n}_5x5"), i, per_branch, 5, 1);
        self.push(n, Stage::Mixed(vec![a, b]));
    }

    fn pool(&mut self, n: &str) {
        self.push(n, Stage::MaxPool { k: 2, stride: 2 });
    }
}

impl<T: Real> Backbone<T> {
    pub fn kind(&self) -> BackboneKind {
        self.kind
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn stages(&self) -> &[(String, Stage<T>)] {
        &self.stages
    }

    pub fn cast<U: Real>(&self) -> Backbone<U> {
        Backbone {
            kind: self.kind,
            in_channels: self.in_channels,
            stages: self.stages.iter().map(|(n, s)| (n.clone(), s.cast())).collect(),
        }
    }

    /// Runs all stages on an `N×C×H×W` batch and returns the `N×64×h×w`
    /// feature map.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (_, c, h, w) = x.dims4()?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "{} expects {} input channels, got {c}",
                self.kind, self.in_channels
            )));
        }
        if h < MIN_INPUT || w < MIN_INPUT {
            return Err(Error::Undersized(format!(
                "{} needs at least {MIN_INPUT}x{MIN_INPUT}, got {h}x{w}",
                self.kind
            )));
        }
        let mut cur = x.clone();
        for (_, s) in &self.stages {
            cur = s.forward(&cur)?;
        }
        Ok(cur)
    }
}

impl<T: Real> Module<T> for Backbone<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        let mut out = Vec::new();
        for (name, s) in &self.stages {
            match s {
                Stage::Conv(c) => {
                    out.push((format!("{name}.weight"), &c.weight));
                    out.push((format!("{name}.bias"), &c.bias));
                }
                Stage::Depthwise(d) => {
                    out.push((format!("{name}.weight"), &d.weight));
                    out.push((format!("{name}.bias"), &d.bias));
                }
                Stage::Mixed(branches) => {
                    for (i, c) in branches.iter().enumerate() {
                        out.push((format!("{name}.{i}.weight"), &c.weight));
                        out.push((format!("{name}.{i}.bias"), &c.bias));
                    }
                }
                Stage::Relu | Stage::MaxPool { .. } => {}
            }
        }
        out
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        let mut out = Vec::new();
        for (name, s) in &mut self.stages {
            match s {
                Stage::Conv(c) => {
                    out.push((format!("{name}.weight"), &mut c.weight));
                    out.push((format!("{name}.bias"), &mut c.bias));
                }
                Stage::Depthwise(d) => {
                    out.push((format!("{name}.weight"), &mut d.weight));
                    out.push((format!("{name}.bias"), &mut d.bias));
                }
                Stage::Mixed(branches) => {
                    for (i, c) in branches.iter_mut().enumerate() {
                        out.push((format!("{name}.{i}.weight"), &mut c.weight));
                        out.push((format!("{name}.{i}.bias"), &mut c.bias));
                    }
                }
                Stage::Relu | Stage::MaxPool { .. } => {}
            }
        }
        out
    }
}

/// Network input for an image, rescaled from `[0, 1]` to `[-1, 1]`.
/// Grayscale is replicated to RGB, and with four input channels the Sobel
/// magnitude is appended as the last plane.
pub fn input_tensor<T: Real>(img: &Image, in_channels: usize) -> Result<Tensor<T>> {
    let rgb = img.to_gray_or_rgb(3).to_tensor::<T>();
    let x = match in_channels {
        3 => rgb,
        4 => concat_channels(&[&rgb, &sobel_magnitude(img).to_tensor::<T>()])?,
        n => return Err(Error::InvalidArgument(format!("unsupported input channel count {n}"))),
    };
    Ok(x.map(|v| v * T::lit(2.0) - T::one()))
}

/// Feature map (`1×64×h×w`) of one image. Forward only.
pub fn extract_features(net: &Backbone, img: &Image) -> Result<Tensor> {
    net.forward(&input_tensor(img, net.in_channels)?)
}

/// Global-average-pooled 64-vector of one image.
pub fn pooled_features(net: &Backbone, img: &Image) -> Result<Vec<f32>> {
    Ok(global_avg_pool(&extract_features(net, img)?)?.into_data())
}

/// Mapping from sample id to a pooled feature vector of fixed width.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureTable {
    width: usize,
    ids: Vec<String>,
    rows: Vec<Vec<f32>>,
    index: HashMap<String, usize>,
}

impl FeatureTable {
    pub fn new(width: usize) -> Result<Self> {
        if width == 0 {
            return Err(Error::FeatureTable("width must be positive".into()));
        }
        Ok(FeatureTable {
            width,
            ids: Vec::new(),
            rows: Vec::new(),
            index: HashMap::new(),
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn insert(&mut self, id: String, row: Vec<f32>) -> Result<()> {
        if row.len() != self.width {
            return Err(Error::FeatureTable(format!(
                "row `{id}` has {} values, table width is {}",
                row.len(),
                self.width
            )));
        }
        if let Some(v) = row.iter().find(|v| !v.is_finite()) {
            return Err(Error::FeatureTable(format!("row `{id}` holds non-finite value {v}")));
        }
        if self.index.contains_key(&id) {
            return Err(Error::FeatureTable(format!("duplicate id `{id}`")));
        }
        self.index.insert(id.clone(), self.ids.len());
        self.ids.push(id);
        self.rows.push(row);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&[f32]> {
        self.index.get(id).map(|&i| self.rows[i].as_slice())
    }

    /// Fails naming the first id absent from the table.
    pub fn check_coverage<'a>(&self, ids: impl IntoIterator<Item = &'a str>) -> Result<()> {
        let mut missing = Vec::new();
        for id in ids {
            if !self.index.contains_key(id) {
                missing.push(id.to_string());
            }
        }
        if missing.is_empty() {
            return Ok(());
        }
        Err(Error::FeatureTable(format!(
            "{} sample id(s) missing, first `{}`",
            missing.len(),
            missing[0]
        )))
    }

    /// Text form: optional `#` comment lines, a header `id,<width>`, then one
    /// row per sample.
    pub fn to_csv(&self, comments: &[String]) -> String {
        let mut out = String::new();
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(&format!("id,{}\n", self.width));
        for (id, row) in self.ids.iter().zip(&self.rows) {
            out.push_str(id);
            for v in row {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }

    /// Parses the text form. The header's second field may be the literal
    /// word `width`, in which case the width is taken from the first row.
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let err = |line: usize, msg: String| Error::Parse {
            path: origin.to_path_buf(),
            line,
            msg,
        };
        let mut table: Option<FeatureTable> = None;
        let mut declared: Option<Option<usize>> = None;
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let Some(decl) = declared else {
                if fields.len() != 2 || fields[0] != "id" {
                    return Err(err(lineno, "header must be `id,<width>`".into()));
                }
                declared = Some(fields[1].parse::<usize>().ok());
                continue;
            };
            let t = match table.as_mut() {
                Some(t) => t,
                None => {
                    let w = decl.unwrap_or(fields.len() - 1);
                    table.insert(FeatureTable::new(w).map_err(|e| err(lineno, e.to_string()))?)
                }
            };
            let row = fields[1..]
                .iter()
                .map(|f| f.parse::<f32>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| err(lineno, format!("bad number: {e}")))?;
            t.insert(fields[0].to_string(), row).map_err(|e| err(lineno, e.to_string()))?;
        }
        match (table, declared) {
            (Some(t), _) => Ok(t),
            (None, Some(Some(w))) => FeatureTable::new(w),
            _ => Err(err(1, "no header or rows".into())),
        }
    }

    pub fn write(&self, path: &Path, comments: &[String]) -> Result<()> {
        fs::write(path, self.to_csv(comments)).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        FeatureTable::parse(&text, path)
    }
}

/// Reads a feature table and checks its width (when given) and that every
/// id in `required` is present.
pub fn import_features<'a>(
    path: &Path,
    expected_width: Option<usize>,
    required: impl IntoIterator<Item = &'a str>,
) -> Result<FeatureTable> {
    let t = FeatureTable::read(path)?;
    if let Some(w) = expected_width {
        if t.width() != w {
            return Err(Error::FeatureTable(format!(
                "{}: width {} but {w} expected",
                path.display(),
                t.width()
            )));
        }
    }
    t.check_coverage(required)?;
    Ok(t)
}

/// Pools features for every `(id, loader)` pair on the current rayon pool.
/// Row order follows `ids`.
pub fn extract_table<F>(net: &Backbone, ids: &[String], load: F) -> Result<FeatureTable>
where
    F: Fn(usize) -> Result<Image> + Sync,
{
    let unique: HashSet<&String> = ids.iter().collect();
    if unique.len() != ids.len() {
        return Err(Error::FeatureTable("duplicate sample ids".into()));
    }
    let rows = (0..ids.len())
        .into_par_iter()
        .map(|i| pooled_features(net, &load(i)?))
        .collect::<Result<Vec<_>>>()?;
    let mut t = FeatureTable::new(FEATURE_CHANNELS)?;
    for (id, row) in ids.iter().zip(rows) {
        t.insert(id.clone(), row)?;
    }
    Ok(t)
}

/// Writes the pooled features of `(id, image)` pairs to `path`.
pub fn export_features(
    net: &Backbone,
    items: &[(String, Image)],
    path: &Path,
    comments: &[String],
) -> Result<FeatureTable> {
    let ids: Vec<String> = items.iter().map(|(id, _)| id.clone()).collect();
    let t = extract_table(net, &ids, |i| Ok(items[i].1.clone()))?;
    t.write(path, comments)?;
    Ok(t)
}

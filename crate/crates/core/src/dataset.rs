//! Manifests, stratified splits, class weights and rebalancing plans.
//!
//! A manifest is a comma-separated file with a `path,label` header plus the
//! optional columns `split` and `mask`. Paths are resolved relative to the
//! manifest's directory. An optional first comment line
//! `# labels: a,b,c` fixes the class order; otherwise classes are numbered
//! in the order they first appear.

use std::collections::{HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;

use crate::{rng, Error, Result};

/// Ordered class names; ids are positions in the list.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMap {
    names: Vec<String>,
}

impl LabelMap {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least 2 classes, got {}",
                names.len()
            )));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if n.is_empty() || !seen.insert(n.as_str()) {
                return Err(Error::InvalidArgument(format!("duplicate or empty class name `{n}`")));
            }
        }
        Ok(LabelMap { names })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "" | "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::InvalidArgument(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Sample {
    pub image_path: PathBuf,
    pub label_id: usize,
    pub split: Split,
    pub mask_path: Option<PathBuf>,
}

impl Sample {
    /// File stem of the image; unique within a manifest.
    pub fn id(&self) -> String {
        sample_id(&self.image_path)
    }
}

pub fn sample_id(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DatasetManifest {
    samples: Vec<Sample>,
    label_map: LabelMap,
    counts: Vec<usize>,
}

impl DatasetManifest {
    /// Validates labels and sample-id uniqueness and tallies per-class
    /// counts. Every class must have at least one sample.
    pub fn new(samples: Vec<Sample>, label_map: LabelMap) -> Result<Self> {
        let k = label_map.len();
        let mut counts = vec![0; k];
        let mut ids = HashSet::new();
        for s in &samples {
            if s.label_id >= k {
                return Err(Error::InvalidArgument(format!(
                    "label id {} outside 0..{k}",
                    s.label_id
                )));
            }
            if !ids.insert(s.id()) {
                return Err(Error::InvalidArgument(format!("duplicate sample id `{}`", s.id())));
            }
            counts[s.label_id] += 1;
        }
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::ClassCount {
                class: label_map.name(c).to_string(),
                count: 0,
                msg: "every class needs at least one sample",
            });
        }
        Ok(DatasetManifest {
            samples,
            label_map,
            counts,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn label_map(&self) -> &LabelMap {
        &self.label_map
    }

    pub fn counts(&self) -> &[usize] {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.label_map.len()
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Per-class counts restricted to one split.
    pub fn split_counts(&self, split: Split) -> Vec<usize> {
        let mut c = vec![0; self.num_classes()];
        for s in self.in_split(split) {
            c[s.label_id] += 1;
        }
        c
    }

    pub fn fully_assigned(&self) -> bool {
        self.samples.iter().all(|s| s.split != Split::Unassigned)
    }

    /// Appends samples (e.g. augmented copies) and recounts.
    pub fn with_extra(&self, extra: Vec<Sample>) -> Result<Self> {
        let mut samples = self.samples.clone();
        samples.extend(extra);
        DatasetManifest::new(samples, self.label_map.clone())
    }

    /// Manifest text with the split column filled. Paths are written
    /// relative to `base` when they live under it. `comments` are emitted
    /// after the `labels:` line.
    pub fn to_csv(&self, base: &Path, comments: &[String]) -> String {
        let with_masks = self.samples.iter().any(|s| s.mask_path.is_some());
        let mut out = format!("# labels: {}\n", self.label_map.names.join(","));
        for c in comments {
            out.push_str(&format!("# {c}\n"));
        }
        out.push_str(if with_masks { "path,label,split,mask\n" } else { "path,label,split\n" });
        let rel = |p: &Path| p.strip_prefix(base).unwrap_or(p).display().to_string();
        for s in &self.samples {
            out.push_str(&format!(
                "{},{},{}",
                rel(&s.image_path),
                self.label_map.name(s.label_id),
                s.split
            ));
            if with_masks {
                out.push(',');
                if let Some(m) = &s.mask_path {
                    out.push_str(&rel(m));
                }
            }
            out.push('\n');
        }
        out
    }
}

/// How class names are resolved while loading a manifest.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabelSource {
    /// Use the `# labels:` line if present, otherwise first-seen order.
    #[default]
    Auto,
    /// Require the `# labels:` line; other labels are errors.
    Header,
    /// Ignore any `# labels:` line and number classes by first appearance.
    FirstSeen,
}

impl FromStr for LabelSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "auto" => Ok(LabelSource::Auto),
            "header" => Ok(LabelSource::Header),
            "first_seen" | "first-seen" => Ok(LabelSource::FirstSeen),
            o => Err(Error::InvalidArgument(format!("unknown label source `{o}`"))),
        }
    }
}

pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest_with(path, LabelSource::Auto)
}

pub fn load_manifest_with(path: &Path, labels: LabelSource) -> Result<DatasetManifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, path, base, labels)
}

/// Parses manifest text. `origin` only labels error messages; relative
/// paths are joined onto `base`.
pub fn parse_manifest(text: &str, origin: &Path, base: &Path, labels: LabelSource) -> Result<DatasetManifest> {
    let err = |line: usize, msg: String| Error::Parse {
        path: origin.to_path_buf(),
        line,
        msg,
    };
    let mut declared: Option<Vec<String>> = None;
    let mut header: Option<(usize, usize, Option<usize>, Option<usize>, usize)> = None;
    let mut rows = Vec::new();
    let mut first_content = true;
    for (i, raw) in text.lines().enumerate() {
        let lineno = i + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(comment) = line.strip_prefix('#') {
            if first_content {
                if let Some(list) = comment.trim().strip_prefix("labels:") {
                    declared = Some(list.split(',').map(|s| s.trim().to_string()).filter(|s| !s.is_empty()).collect());
                }
            }
            first_content = false;
            continue;
        }
        first_content = false;
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        match header {
            None => {
                let col = |name: &str| fields.iter().position(|f| *f == name);
                let (Some(p), Some(l)) = (col("path"), col("label")) else {
                    return Err(err(lineno, "header must name `path` and `label` columns".into()));
                };
                header = Some((p, l, col("split"), col("mask"), fields.len()));
            }
            Some((p, l, s, m, width)) => {
                if fields.len() != width {
                    return Err(err(lineno, format!("expected {width} fields, found {}", fields.len())));
                }
                if fields[p].is_empty() || fields[l].is_empty() {
                    return Err(err(lineno, "empty path or label".into()));
                }
                let split = match s {
                    Some(s) => fields[s].parse::<Split>().map_err(|e| err(lineno, e.to_string()))?,
                    None => Split::Unassigned,
                };
                let mask = m.and_then(|m| (!fields[m].is_empty()).then(|| base.join(fields[m])));
                rows.push((lineno, base.join(fields[p]), fields[l].to_string(), split, mask));
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::EmptyManifest(origin.to_path_buf()));
    }
    let names = match (labels, declared) {
        (LabelSource::Header, None) => {
            return Err(err(1, "expected a `# labels:` first line".into()));
        }
        (LabelSource::Header | LabelSource::Auto, Some(d)) => d,
        (LabelSource::FirstSeen, _) | (LabelSource::Auto, None) => {
            let mut seen: Vec<String> = Vec::new();
            for (_, _, l, _, _) in &rows {
                if !seen.contains(l) {
                    seen.push(l.clone());
                }
            }
            seen
        }
    };
    let label_map = LabelMap::new(names).map_err(|e| err(1, e.to_string()))?;
    let index: HashMap<&str, usize> = label_map.names().iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut samples = Vec::with_capacity(rows.len());
    for (lineno, path, label, split, mask) in rows {
        let label_id = *index
            .get(label.as_str())
            .ok_or_else(|| err(lineno, format!("unknown label `{label}`")))?;
        samples.push(Sample {
            image_path: path,
            label_id,
            split,
            mask_path: mask,
        });
    }
    DatasetManifest::new(samples, label_map)
}

/// Fractions of each class sent to train/val/test.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        SplitFractions {
            train: 0.6,
            val: 0.2,
            test: 0.2,
        }
    }
}

impl SplitFractions {
    pub fn new(train: f64, val: f64, test: f64) -> Result<Self> {
        let f = SplitFractions { train, val, test };
        let inside = [train, val, test].iter().all(|v| *v > 0.0 && *v < 1.0);
        if !inside || (train + val + test - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "split fractions must lie in (0,1) and sum to 1, got {train}/{val}/{test}"
            )));
        }
        Ok(f)
    }
}

/// Largest-remainder apportionment of `n` into train/val/test; remainder
/// ties favour train, then val. Val and test get at least one sample each.
pub fn split_counts(n: usize, f: &SplitFractions) -> [usize; 3] {
    let quotas = [f.train, f.val, f.test].map(|q| {
        let v = n as f64 * q;
        // absorb representation error like 0.6·450 = 270.00000000000006
        if (v - v.round()).abs() < 1e-9 {
            v.round()
        } else {
            v
        }
    });
    let mut counts = quotas.map(|q| q.floor() as usize);
    let mut left = n - counts.iter().sum::<usize>();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.total_cmp(&ra).then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        counts[i] += 1;
        left -= 1;
    }
    for i in [1, 2] {
        if counts[i] == 0 && counts[0] > 1 {
            counts[i] += 1;
            counts[0] -= 1;
        }
    }
    counts
}

/// Assigns every sample to train/val/test, class by class. Within a class
/// the samples are shuffled by a generator keyed by `(seed, class id)`, so
/// the result depends only on manifest order and seed.
pub fn stratified_split(m: &DatasetManifest, f: &SplitFractions, seed: u64) -> Result<DatasetManifest> {
    let mut samples = m.samples.clone();
    for class in 0..m.num_classes() {
        let mut members: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label_id == class).collect();
        if members.len() < 3 {
            return Err(Error::ClassCount {
                class: m.label_map.name(class).to_string(),
                count: members.len(),
                msg: "need at least 3 to place one in each split",
            });
        }
        members.shuffle(&mut rng::stream(seed, &[rng::name_key("split"), class as u64]));
        let [train, val, _] = split_counts(members.len(), f);
        for (rank, &i) in members.iter().enumerate() {
            samples[i].split = if rank < train {
                Split::Train
            } else if rank < train + val {
                Split::Val
            } else {
                Split::Test
            };
        }
    }
    DatasetManifest::new(samples, m.label_map.clone())
}

/// Per-class loss weights `N/(K·n_c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights {
    w: Vec<f64>,
}

impl ClassWeights {
    pub fn from_counts(counts: &[usize]) -> Result<Self> {
        if let Some(c) = counts.iter().position(|&n| n == 0) {
            return Err(Error::ClassCount {
                class: c.to_string(),
                count: 0,
                msg: "class weights need every class present",
            });
        }
        let n: usize = counts.iter().sum();
        let per_class = n as f64 / counts.len() as f64;
        Ok(ClassWeights {
            w: counts.iter().map(|&c| per_class / c as f64).collect(),
        })
    }

    pub fn uniform(k: usize) -> Self {
        ClassWeights { w: vec![1.0; k] }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.w
    }
}

/// Weights from the manifest's overall class counts.
pub fn compute_class_weights(m: &DatasetManifest) -> Result<ClassWeights> {
    ClassWeights::from_counts(m.counts())
}

/// Number of synthetic samples per class: `min(max_count, ceil(cap·n_c)) −
/// n_c`. `cap_ratio = ∞` targets parity with the largest class.
pub fn rebalance_plan(counts: &[usize], cap_ratio: f64) -> Result<Vec<usize>> {
    if !(cap_ratio >= 1.0) {
        return Err(Error::InvalidArgument(format!("cap ratio must be at least 1, got {cap_ratio}")));
    }
    let max = counts.iter().copied().max().unwrap_or(0);
    Ok(counts
        .iter()
        .map(|&n| {
            let target = (cap_ratio * n as f64).ceil().min(max as f64) as usize;
            target.saturating_sub(n)
        })
        .collect())
}

/// Plan computed from the training split only.
pub fn rebalance_plan_for(m: &DatasetManifest, cap_ratio: f64) -> Result<Vec<usize>> {
    rebalance_plan(&m.split_counts(Split::Train), cap_ratio)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(counts: &[usize]) -> DatasetManifest {
        let names: Vec<String> = (0..counts.len()).map(|i| format!("c{i}")).collect();
        let mut samples = Vec::new();
        for (c, &n) in counts.iter().enumerate() {
            for i in 0..n {
                samples.push(Sample {
                    image_path: PathBuf::from(format!("img/{c}_{i}.png")),
                    label_id: c,
                    split: Split::Unassigned,
                    mask_path: None,
                });
            }
        }
        DatasetManifest::new(samples, LabelMap::new(names).unwrap()).unwrap()
    }

    fn parse(text: &str) -> Result<DatasetManifest> {
        parse_manifest(text, Path::new("m.csv"), Path::new("/data"), LabelSource::Auto)
    }

    #[test]
    fn parses_declared_and_first_seen_labels() {
        let m = parse("# labels: mel,nev\npath,label\na.png,nev\nb.png,mel\n").unwrap();
        assert_eq!(m.label_map().names(), ["mel", "nev"]);
        assert_eq!(m.samples()[0].label_id, 1);
        assert_eq!(m.samples()[0].image_path, Path::new("/data/a.png"));
        let m = parse("path,label\na.png,nev\nb.png,mel\n").unwrap();
        assert_eq!(m.label_map().names(), ["nev", "mel"]);
    }

    #[test]
    fn parse_errors() {
        assert!(matches!(parse("path,label\n"), Err(Error::EmptyManifest(_))));
        assert!(matches!(parse(""), Err(Error::EmptyManifest(_))));
        match parse("# labels: a,b\npath,label\nx.png,a\ny.png,b\nz.png,xyz\n") {
            Err(Error::Parse { line, msg, .. }) => {
                assert_eq!(line, 5);
                assert!(msg.contains("xyz"));
            }
            other => panic!("{other:?}"),
        }
        match parse("path,label\nx.png,a,extra\n") {
            Err(Error::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(parse("file,class\nx.png,a\n").is_err());
        assert!(parse("path,label\nx.png,a\nx.png,b\n").is_err());
        let header_only = parse_manifest("path,label\nx.png,a\n", Path::new("m"), Path::new(""), LabelSource::Header);
        assert!(header_only.is_err());
    }

    #[test]
    fn split_and_mask_columns() {
        let m = parse("path,label,split,mask\na.png,x,train,a_m.png\nb.png,y,test,\n").unwrap();
        assert_eq!(m.samples()[0].split, Split::Train);
        assert_eq!(m.samples()[0].mask_path.as_deref(), Some(Path::new("/data/a_m.png")));
        assert_eq!(m.samples()[1].mask_path, None);
        let again = parse_manifest(&m.to_csv(Path::new("/data"), &[]), Path::new("m"), Path::new("/data"), LabelSource::Header).unwrap();
        assert_eq!(again, m);
    }

    #[test]
    fn nine_hundred_balanced() {
        let m = stratified_split(&manifest(&[450, 450]), &SplitFractions::default(), 3).unwrap();
        assert_eq!(m.split_counts(Split::Train).iter().sum::<usize>(), 540);
        assert_eq!(m.split_counts(Split::Val).iter().sum::<usize>(), 180);
        assert_eq!(m.split_counts(Split::Test).iter().sum::<usize>(), 180);
    }

    #[test]
    fn ten_per_class_is_six_two_two() {
        let m = stratified_split(&manifest(&[10, 10]), &SplitFractions::default(), 0).unwrap();
        for s in [Split::Train, Split::Val, Split::Test] {
            let want = if s == Split::Train { 6 } else { 2 };
            assert_eq!(m.split_counts(s), vec![want, want]);
        }
    }

    #[test]
    fn split_is_deterministic() {
        let base = manifest(&[17, 5, 9]);
        let a = stratified_split(&base, &SplitFractions::default(), 11).unwrap();
        let b = stratified_split(&base, &SplitFractions::default(), 11).unwrap();
        assert_eq!(a.to_csv(Path::new(""), &[]), b.to_csv(Path::new(""), &[]));
        let c = stratified_split(&base, &SplitFractions::default(), 12).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn tiny_class_rejected_and_three_fills_every_split() {
        assert!(stratified_split(&manifest(&[2, 10]), &SplitFractions::default(), 0).is_err());
        assert_eq!(split_counts(3, &SplitFractions::default()), [1, 1, 1]);
    }

    #[test]
    fn class_weight_examples() {
        assert_eq!(ClassWeights::from_counts(&[10, 10]).unwrap().as_slice(), &[1.0, 1.0]);
        let w = ClassWeights::from_counts(&[30, 10, 10]).unwrap();
        let want = [50.0 / 90.0, 50.0 / 30.0, 50.0 / 30.0];
        for (a, b) in w.as_slice().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((w.as_slice()[0] - 0.5556).abs() < 1e-4);
        let w = ClassWeights::from_counts(&[1, 99]).unwrap();
        assert_eq!(w.as_slice()[0], 50.0);
        assert!((w.as_slice()[1] - 0.505_050_505).abs() < 1e-9);
        assert!(ClassWeights::from_counts(&[3, 0]).is_err());
    }

    #[test]
    fn rebalance_examples() {
        assert_eq!(rebalance_plan(&[100, 20], f64::INFINITY).unwrap(), vec![0, 80]);
        assert_eq!(rebalance_plan(&[100, 20], 3.0).unwrap(), vec![0, 40]);
        assert_eq!(rebalance_plan(&[50, 50], f64::INFINITY).unwrap(), vec![0, 0]);
        assert!(rebalance_plan(&[5, 1], 0.5).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn split_partitions_and_stratifies(
                counts in proptest::collection::vec(3usize..40, 2..5),
                seed in any::<u64>(),
                train in 0.3f64..0.8,
            ) {
                let rest = 1.0 - train;
                let f = SplitFractions::new(train, rest / 2.0, rest / 2.0).unwrap();
                let m = stratified_split(&manifest(&counts), &f, seed).unwrap();
                prop_assert!(m.fully_assigned());
                for (c, &n) in counts.iter().enumerate() {
                    for (s, frac) in [(Split::Train, f.train), (Split::Val, f.val), (Split::Test, f.test)] {
                        let got = m.split_counts(s)[c] as f64;
                        prop_assert!(got >= 1.0);
                        prop_assert!((got - n as f64 * frac).abs() < 1.0 + 1e-9 || n < 6,
                            "class {} split {:?}: {} vs {}", c, s, got, n as f64 * frac);
                    }
                }
            }

            #[test]
            fn weight_identity(counts in proptest::collection::vec(1usize..1000, 2..9)) {
                let w = ClassWeights::from_counts(&counts).unwrap();
                let n: usize = counts.iter().sum();
                let target = n as f64 / counts.len() as f64;
                for (wc, &nc) in w.as_slice().iter().zip(&counts) {
                    // one rounding in the quotient and one in the product
                    prop_assert!((wc * nc as f64 - target).abs() <= f64::EPSILON * target);
                }
            }
        }
    }
}

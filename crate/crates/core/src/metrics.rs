//! Confusion matrices, classification reports, one-vs-rest ROC/AUC and an
//! inference timing harness.

use std::time::Instant;

use serde::Serialize;

use crate::{Error, Result};

/// Version of the JSON layout produced by [`EvaluationReport`].
pub const REPORT_SCHEMA_VERSION: u32 = 1;

/// `K×K` counts; rows are true classes, columns predictions.
#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct ConfusionMatrix {
    counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn from_counts(counts: Vec<Vec<u64>>) -> Result<Self> {
        let k = counts.len();
        if k == 0 || counts.iter().any(|r| r.len() != k) {
            return Err(Error::Shape("confusion matrix must be square and non-empty".into()));
        }
        Ok(ConfusionMatrix { counts })
    }

    pub fn k(&self) -> usize {
        self.counts.len()
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth][pred]
    }

    pub fn rows(&self) -> &[Vec<u64>] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.counts[i][i]).sum()
    }
}

pub fn confusion(truth: &[usize], pred: &[usize], k: usize) -> Result<ConfusionMatrix> {
    if truth.len() != pred.len() {
        return Err(Error::Shape(format!("{} labels vs {} predictions", truth.len(), pred.len())));
    }
    let mut counts = vec![vec![0u64; k]; k];
    for (i, (&t, &p)) in truth.iter().zip(pred).enumerate() {
        if t >= k || p >= k {
            return Err(Error::InvalidArgument(format!("label pair ({t}, {p}) at {i} outside 0..{k}")));
        }
        counts[t][p] += 1;
    }
    ConfusionMatrix::from_counts(counts)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// Names of the quantities that were 0/0 and set to 0.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub undefined: Vec<&'static str>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Averages {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub macro_avg: Averages,
    pub weighted_avg: Averages,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

/// Precision, recall and F1 per class, their macro and support-weighted
/// means, and accuracy. Any 0/0 is reported as 0 and listed in the class's
/// `undefined` field.
pub fn report(m: &ConfusionMatrix) -> Result<MetricReport> {
    let total = m.total();
    if total == 0 {
        return Err(Error::InvalidArgument("empty confusion matrix".into()));
    }
    let k = m.k();
    let mut per_class = Vec::with_capacity(k);
    for c in 0..k {
        let tp = m.get(c, c);
        let predicted: u64 = (0..k).map(|t| m.get(t, c)).sum();
        let support: u64 = m.rows()[c].iter().sum();
        let mut undefined = Vec::new();
        let precision = ratio(tp, predicted).unwrap_or_else(|| {
            undefined.push("precision");
            0.0
        });
        let recall = ratio(tp, support).unwrap_or_else(|| {
            undefined.push("recall");
            0.0
        });
        // 2PR/(P+R) in count form, 2·tp/(predicted + support), so it is
        // exact for hand-checkable matrices
        let f1 = if precision + recall > 0.0 {
            (2 * tp) as f64 / (predicted + support) as f64
        } else {
            undefined.push("f1");
            0.0
        };
        per_class.push(ClassMetrics {
            precision,
            recall,
            f1,
            support,
            undefined,
        });
    }
    let mean = |f: &dyn Fn(&ClassMetrics) -> f64, weighted: bool| {
        let num: f64 = per_class
            .iter()
            .map(|c| f(c) * if weighted { c.support as f64 } else { 1.0 })
            .sum();
        num / if weighted { total as f64 } else { k as f64 }
    };
    let avg = |weighted| Averages {
        precision: mean(&|c| c.precision, weighted),
        recall: mean(&|c| c.recall, weighted),
        f1: mean(&|c| c.f1, weighted),
    };
    Ok(MetricReport {
        accuracy: m.trace() as f64 / total as f64,
        macro_avg: avg(false),
        weighted_avg: avg(true),
        per_class,
        confusion: m.clone(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct RocPoint {
    /// Scores `>= threshold` are called positive; the first point uses +∞.
    pub threshold: f64,
    pub fpr: f64,
    pub tpr: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RocCurve {
    pub class: usize,
    pub points: Vec<RocPoint>,
    pub auc: f64,
}

/// One-vs-rest ROC curve of class `class`. One point per distinct score
/// (tied scores move FPR and TPR together), plus the `(0, 0)` origin; AUC
/// by the trapezoid rule.
pub fn roc_auc<S: AsRef<[f64]>>(scores: &[S], truth: &[usize], class: usize) -> Result<RocCurve> {
    if scores.len() != truth.len() {
        return Err(Error::Shape(format!("{} score rows vs {} labels", scores.len(), truth.len())));
    }
    let mut pairs = Vec::with_capacity(scores.len());
    for (i, (s, &t)) in scores.iter().zip(truth).enumerate() {
        let v = *s.as_ref().get(class).ok_or_else(|| {
            Error::Shape(format!("score row {i} has no entry for class {class}"))
        })?;
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("score row {i}, class {class}")));
        }
        pairs.push((v, t == class));
    }
    let n_pos = pairs.iter().filter(|p| p.1).count();
    let n_neg = pairs.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidArgument(format!(
            "class {class} needs positive and negative samples ({n_pos} / {n_neg})"
        )));
    }
    pairs.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut points = vec![RocPoint {
        threshold: f64::INFINITY,
        fpr: 0.0,
        tpr: 0.0,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut auc = 0.0;
    let mut i = 0;
    while i < pairs.len() {
        let thr = pairs[i].0;
        while i < pairs.len() && pairs[i].0 == thr {
            if pairs[i].1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let p = RocPoint {
            threshold: thr,
            fpr: fp as f64 / n_neg as f64,
            tpr: tp as f64 / n_pos as f64,
        };
        let prev = points.last().expect("origin present");
        auc += (p.fpr - prev.fpr) * (p.tpr + prev.tpr) / 2.0;
        points.push(p);
    }
    Ok(RocCurve { class, points, auc })
}

/// ROC curves as CSV `class,threshold,fpr,tpr`.
pub fn roc_csv(curves: &[RocCurve], comments: &[String]) -> String {
    let mut out = String::new();
    for c in comments {
        out.push_str(&format!("# {c}\n"));
    }
    out.push_str("class,threshold,fpr,tpr\n");
    for c in curves {
        for p in &c.points {
            out.push_str(&format!("{},{},{},{}\n", c.class, p.threshold, p.fpr, p.tpr));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct TimingReport {
    pub median_s: f64,
    pub p95_s: f64,
    pub n: usize,
    pub warmup: usize,
    #[serde(skip)]
    pub samples_s: Vec<f64>,
}

impl TimingReport {
    /// Median and nearest-rank 95th percentile of `samples` (seconds).
    pub fn from_samples(mut samples: Vec<f64>, warmup: usize) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::InvalidArgument("no timing samples".into()));
        }
        let mut sorted = samples.clone();
        sorted.sort_by(f64::total_cmp);
        let n = sorted.len();
        let median = if n % 2 == 1 {
            sorted[n / 2]
        } else {
            (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
        };
        let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
        samples.shrink_to_fit();
        Ok(TimingReport {
            median_s: median,
            p95_s: sorted[rank - 1],
            n,
            warmup,
            samples_s: samples,
        })
    }
}

/// Smallest recorded duration; keeps the median strictly positive on
/// coarse clocks.
const MIN_TICK: f64 = 1e-9;

/// Times `run(i)` for `runs` calls after `warmup` discarded calls, cycling
/// `i` over `0..n_samples`. Calls run one after another on the current
/// thread.
pub fn time_inference(
    mut run: impl FnMut(usize) -> Result<()>,
    n_samples: usize,
    warmup: usize,
    runs: usize,
) -> Result<TimingReport> {
    if runs < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 timed runs, got {runs}")));
    }
    if n_samples == 0 {
        return Err(Error::InvalidArgument("no samples to time".into()));
    }
    for i in 0..warmup {
        run(i % n_samples)?;
    }
    let mut samples = Vec::with_capacity(runs);
    for i in 0..runs {
        let t0 = Instant::now();
        run((warmup + i) % n_samples)?;
        samples.push(t0.elapsed().as_secs_f64().max(MIN_TICK));
    }
    TimingReport::from_samples(samples, warmup)
}

/// Metrics of one model in an evaluation report.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ModelEvaluation {
    pub model: String,
    pub metrics: MetricReport,
    /// One-vs-rest AUC per class; `None` when the class is absent from the
    /// evaluated labels (or is the only one present).
    pub auc: Vec<Option<f64>>,
    pub macro_auc: Option<f64>,
}

impl ModelEvaluation {
    /// Evaluates probability rows against labels; predictions are row
    /// argmaxes with ties to the lowest index.
    pub fn new(model: &str, probs: &[Vec<f64>], truth: &[usize], k: usize) -> Result<(Self, Vec<RocCurve>)> {
        let pred: Vec<usize> = probs.iter().map(|p| argmax(p)).collect();
        let metrics = report(&confusion(truth, &pred, k)?)?;
        let mut curves = Vec::new();
        let mut auc = Vec::with_capacity(k);
        for c in 0..k {
            match roc_auc(probs, truth, c) {
                Ok(curve) => {
                    auc.push(Some(curve.auc));
                    curves.push(curve);
                }
                Err(Error::InvalidArgument(_)) => auc.push(None),
                Err(e) => return Err(e),
            }
        }
        let defined: Vec<f64> = auc.iter().flatten().copied().collect();
        let macro_auc = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Ok((
            ModelEvaluation {
                model: model.to_string(),
                metrics,
                auc,
                macro_auc,
            },
            curves,
        ))
    }
}

/// Lowest index attaining the maximum.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Versioned evaluation report, one section per model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvaluationReport {
    pub schema_version: u32,
    pub class_names: Vec<String>,
    pub split: String,
    pub samples: usize,
    pub config_digest: String,
    pub seed: u64,
    pub models: Vec<ModelEvaluation>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

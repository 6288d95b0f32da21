use lesionforge::backbones::{pooled_features, BackboneKind};
use lesionforge::dataset::Split;
use lesionforge::ensemble::{predictions_csv, EnsembleModel, ENSEMBLE_NAME};
use lesionforge::metrics::{roc_csv, time_inference, EvaluationReport, ModelEvaluation, TimingReport, REPORT_SCHEMA_VERSION};
use lesionforge::nncore::read_weights_file;
use serde::Serialize;

use crate::commands::train::split_rows;
use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::record::{Recorder, RunRecord};
use crate::workspace::{Workspace, HEADS, PREDICTIONS, REPORT, TIMING};

#[derive(Serialize)]
struct ModelTiming {
    model: String,
    /// `None` when the backbone's features were imported.
    timing: Option<TimingReport>,
}

#[derive(Serialize)]
struct TimingFile {
    config_digest: String,
    seed: u64,
    /// Seconds per image from the preprocessed image to class probabilities.
    models: Vec<ModelTiming>,
}

/// Test-split metrics of the three single-backbone heads and the ensemble,
/// ROC curves, predictions and inference timing.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunRecord> {
    let ws = Workspace::create(cfg)?;
    let mut rec = Recorder::new("evaluate", &ws.out);
    let m = ws.load_split()?;
    let heads_path = ws.require(HEADS, "train")?;
    let items = read_weights_file(&heads_path)?;
    let stamp = format!("config_digest={}", cfg.digest());
    if !items.iter().any(|t| t.name == format!("meta/{stamp}")) {
        eprintln!("warning: {} was trained under a different config", heads_path.display());
    }
    let mut model = EnsembleModel::from_tensors(&items)?;
    model.mode = cfg.ensemble_mode;
    model.set_model_weights(cfg.model_weights)?;
    if model.classes() != m.num_classes() {
        return Err(CliError::Validation(format!(
            "heads predict {} classes, the manifest has {}",
            model.classes(),
            m.num_classes()
        )));
    }
    let feats = ws.features(&m, &mut rec)?;
    let (x, y) = split_rows(&m, &feats, Split::Test);
    let ids: Vec<String> = m.in_split(Split::Test).map(|s| s.id()).collect();
    rec.stage("features");

    let k = m.num_classes();
    let mut models = Vec::with_capacity(4);
    let mut roc_files = Vec::new();
    for (j, kind) in BackboneKind::ALL.iter().enumerate() {
        let (ev, curves) = ModelEvaluation::new(kind.label(), &model.head_probs(j, &x)?, &y, k)?;
        models.push(ev);
        roc_files.push((kind.key().to_string(), curves));
    }
    let preds = model.predict_batch(&x)?;
    let probs: Vec<Vec<f64>> = preds.iter().map(|p| p.probs.clone()).collect();
    let (ev, curves) = ModelEvaluation::new(ENSEMBLE_NAME, &probs, &y, k)?;
    models.push(ev);
    roc_files.push(("ensemble".to_string(), curves));
    let report = EvaluationReport {
        schema_version: REPORT_SCHEMA_VERSION,
        class_names: m.label_map().names().to_vec(),
        split: Split::Test.to_string(),
        samples: y.len(),
        config_digest: cfg.digest(),
        seed: cfg.seed,
        models,
    };
    ws.write_text(REPORT, &report.to_json(), &mut rec)?;
    for (key, curves) in &roc_files {
        ws.write_text(&format!("roc/{key}.csv"), &roc_csv(curves, &ws.comments()), &mut rec)?;
    }
    ws.write_text(PREDICTIONS, &predictions_csv(&ids, &preds, &ws.comments()), &mut rec)?;
    rec.stage("metrics");

    let timing = time_models(&ws, &m, &model)?;
    // timings vary run to run, so the file stays out of the output digests
    let path = ws.path(TIMING);
    std::fs::write(&path, serde_json::to_string_pretty(&timing).expect("timing serializes") + "\n")
        .map_err(|e| CliError::io(&path, e))?;
    rec.stage("timing");

    for ev in &report.models {
        let auc = ev.macro_auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
        println!(
            "evaluate: {:<9} accuracy {:.4} macro-F1 {:.4} macro-AUC {auc}",
            ev.model, ev.metrics.accuracy, ev.metrics.macro_avg.f1
        );
    }
    let median = |i: usize| timing.models[i].timing.as_ref().map(|t| t.median_s);
    if let (Some(a), Some(b)) = (median(0), median(1)) {
        println!(
            "evaluate: median latency S-MOBILE {:.3} ms, S-VGG {:.3} ms (informational)",
            a * 1e3,
            b * 1e3
        );
    }
    rec.finish(Some(cfg), cfg.seed)
}

/// Times each single-backbone model and the ensemble on the first test
/// images, one measurement at a time.
fn time_models(ws: &Workspace, m: &lesionforge::dataset::DatasetManifest, model: &EnsembleModel) -> CliResult<TimingFile> {
    let cfg = ws.cfg;
    let imported = cfg.imported.iter().any(Option::is_some);
    let samples: Vec<_> = m.in_split(Split::Test).take(8).collect();
    let mut models = Vec::new();
    if imported || samples.is_empty() {
        for kind in BackboneKind::ALL {
            models.push(ModelTiming {
                model: kind.label().to_string(),
                timing: None,
            });
        }
        models.push(ModelTiming {
            model: ENSEMBLE_NAME.to_string(),
            timing: None,
        });
    } else {
        let pipe = ws.pipeline()?;
        let images = samples
            .iter()
            .map(|s| ws.preprocess(&pipe, s))
            .collect::<CliResult<Vec<_>>>()?;
        for (j, kind) in BackboneKind::ALL.iter().enumerate() {
            let t = time_inference(
                |i| {
                    let f = pooled_features(&pipe.backbones[j], &images[i])?;
                    model.head(j).probs(&[f.as_slice()]).map(|_| ())
                },
                images.len(),
                cfg.timing_warmup,
                cfg.timing_runs,
            )?;
            models.push(ModelTiming {
                model: kind.label().to_string(),
                timing: Some(t),
            });
        }
        let t = time_inference(
            |i| model.predict(&pipe.features_of(&images[i])?).map(|_| ()),
            images.len(),
            cfg.timing_warmup,
            cfg.timing_runs,
        )?;
        models.push(ModelTiming {
            model: ENSEMBLE_NAME.to_string(),
            timing: Some(t),
        });
    }
    Ok(TimingFile {
        config_digest: cfg.digest(),
        seed: cfg.seed,
        models,
    })
}

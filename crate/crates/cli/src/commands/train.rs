use lesionforge::dataset::{ClassWeights, Split};
use lesionforge::ensemble::{fuse, train_ensemble, EnsembleModel, FeatureTriple, TrainConfig};
use lesionforge::nncore::{weighted_cross_entropy, Tensor};

use crate::config::ExperimentConfig;
use crate::error::{CliError, CliResult};
use crate::record::{Recorder, RunRecord};
use crate::workspace::{Workspace, HEADS, HISTORY};

/// Rows and labels of one split.
pub fn split_rows(
    m: &lesionforge::dataset::DatasetManifest,
    feats: &[FeatureTriple],
    split: Split,
) -> (Vec<FeatureTriple>, Vec<usize>) {
    m.samples()
        .iter()
        .zip(feats)
        .filter(|(s, _)| s.split == split)
        .map(|(s, f)| (f.clone(), s.label_id))
        .unzip()
}

/// Training loss of each head (three backbones, then fusion) at
/// initialization.
fn initial_losses(model: &EnsembleModel, x: &[FeatureTriple], y: &[usize], w: Option<&ClassWeights>) -> CliResult<Vec<f64>> {
    let k = model.classes();
    let fused: Vec<Vec<f32>> = x.iter().map(fuse).collect();
    let rows: Vec<&[f32]> = fused.iter().map(Vec::as_slice).collect();
    let mut probs: Vec<Vec<Vec<f64>>> = (0..3).map(|j| model.head_probs(j, x)).collect::<Result<_, _>>()?;
    probs.push(model.fusion_head().probs(&rows)?);
    probs
        .into_iter()
        .map(|p| {
            let t = Tensor::new(&[p.len(), k], p.concat())?;
            Ok(weighted_cross_entropy(&t, y, w.map(ClassWeights::as_slice))?)
        })
        .collect()
}

/// Extracts (or reuses cached) features and fits the four heads.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunRecord> {
    let ws = Workspace::create(cfg)?;
    let mut rec = Recorder::new("train", &ws.out);
    let m = ws.load_split()?;
    let feats = ws.features(&m, &mut rec)?;
    rec.stage("features");

    let (x, y) = split_rows(&m, &feats, Split::Train);
    let (vx, vy) = split_rows(&m, &feats, Split::Val);
    let counts = m.split_counts(Split::Train);
    if let Some(c) = counts.iter().position(|&n| n == 0) {
        return Err(CliError::Validation(format!(
            "training split has no samples of class `{}`",
            m.label_map().name(c)
        )));
    }
    let weights = cfg.class_weights.then(|| ClassWeights::from_counts(&counts)).transpose()?;
    if cfg.train.epochs == 0 {
        eprintln!("warning: train.epochs=0, heads are written at initialization");
    }
    let val = (!vx.is_empty()).then_some((&vx[..], &vy[..]));
    let at_init = TrainConfig {
        epochs: 0,
        ..cfg.train
    };
    let (init, _) = train_ensemble(&x, &y, m.num_classes(), weights.as_ref(), &at_init, None)?;
    let init_loss = initial_losses(&init, &x, &y, weights.as_ref())?;
    let (mut model, history) = train_ensemble(&x, &y, m.num_classes(), weights.as_ref(), &cfg.train, val)?;
    model.mode = cfg.ensemble_mode;
    model.set_model_weights(cfg.model_weights)?;
    rec.stage("train");

    ws.write_weights(HEADS, model.tensors(), &mut rec)?;
    let mut csv = format!("# {}\nhead,epoch,train_loss,train_accuracy,val_loss,val_accuracy\n", cfg.stamp());
    let opt = |v: &[f64], i: usize| v.get(i).map_or(String::new(), |x| format!("{x:?}"));
    for ((name, h), l0) in history.heads.iter().zip(&init_loss) {
        csv.push_str(&format!("{name},0,{l0:?},,,\n"));
        for e in 0..h.train_loss.len() {
            csv.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                e + 1,
                opt(&h.train_loss, e),
                opt(&h.train_accuracy, e),
                opt(&h.val_loss, e),
                opt(&h.val_accuracy, e)
            ));
        }
    }
    ws.write_text(HISTORY, &csv, &mut rec)?;
    for ((name, h), l0) in history.heads.iter().zip(&init_loss) {
        let last = h.train_loss.last().unwrap_or(l0);
        println!("train: {name:<9} loss {l0:.4} -> {last:.4} after {} epochs", h.train_loss.len());
    }
    rec.finish(Some(cfg), cfg.seed)
}

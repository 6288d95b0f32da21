use lesionforge::dataset::{Sample, Split};
use lesionforge::imageops::{read_image, write_pnm, Image};
use lesionforge::segmentation::{
    apply_mask, build_dual_encoder, dice_coefficient, predict_mask, train_segmenter, DualEncoderConfig,
    MaskImage,
};

use crate::config::{ExperimentConfig, MaskSource};
use crate::error::{CliError, CliResult};
use crate::record::{Recorder, RunRecord};
use crate::workspace::{ensure_parent, load_seg_model, read_mask, seg_model_tensors, Workspace, SEG_LOSS, SEG_MODEL};

fn pair(s: &Sample, size: usize) -> CliResult<(Image, MaskImage)> {
    let img = read_image(&s.image_path)?.resize(size, size);
    let mask = read_mask(s.mask_path.as_ref().expect("filtered on mask"))?
        .resize(size, size)
        .binarize();
    Ok((img, mask))
}

/// Trains the dual encoder on every training sample that has a mask.
pub fn train(cfg: &ExperimentConfig) -> CliResult<RunRecord> {
    let ws = Workspace::create(cfg)?;
    let mut rec = Recorder::new("seg_train", &ws.out);
    let m = ws.load_split()?;
    let with_mask = |split| m.in_split(split).filter(|s| s.mask_path.is_some()).collect::<Vec<_>>();
    let train_samples = with_mask(Split::Train);
    if train_samples.is_empty() {
        return Err(CliError::Validation(
            "no training rows have a mask; add a `mask` column to the manifest, or set seg.enabled=false \
             to pass images through unmasked"
                .into(),
        ));
    }
    let size = cfg.seg.size;
    let pairs: Vec<(Image, MaskImage)> = train_samples.iter().map(|s| pair(s, size)).collect::<CliResult<_>>()?;
    rec.stage("load");

    let mut net = build_dual_encoder(
        DualEncoderConfig {
            in_channels: 3,
            ..cfg.seg.model
        },
        cfg.seed,
    )?;
    let history = train_segmenter(&mut net, &pairs, &cfg.seg.train)?;
    rec.stage("train");
    ws.write_weights(SEG_MODEL, seg_model_tensors(&net), &mut rec)?;
    let mut csv = format!("# {}\nepoch,loss\n", cfg.stamp());
    for (e, l) in history.iter().enumerate() {
        csv.push_str(&format!("{},{l:?}\n", e + 1));
    }
    ws.write_text(SEG_LOSS, &csv, &mut rec)?;

    let mut held_out = with_mask(Split::Val);
    held_out.extend(with_mask(Split::Test));
    let (scored, label) = if held_out.is_empty() {
        (train_samples, "training")
    } else {
        (held_out, "held-out")
    };
    let mut total = 0.0;
    for s in &scored {
        let (img, gt) = pair(s, size)?;
        total += dice_coefficient(&predict_mask(&net, &img)?.binarize(), &gt)?;
    }
    let dice = total / scored.len() as f64;
    rec.stage("score");
    println!(
        "seg train: {} images, {} epochs, final loss {:.4}, {label} dice {dice:.4} over {} images",
        pairs.len(),
        history.len(),
        history.last().copied().unwrap_or(f64::NAN),
        scored.len()
    );
    rec.finish(Some(cfg), cfg.seed)
}

/// Writes the masked image and the mask of every manifest sample.
pub fn apply(cfg: &ExperimentConfig) -> CliResult<RunRecord> {
    let ws = Workspace::create(cfg)?;
    let mut rec = Recorder::new("seg_apply", &ws.out);
    let m = ws.load_split()?;
    let net = match cfg.seg.mask_source {
        MaskSource::Model => Some(load_seg_model(&ws.require(SEG_MODEL, "seg train")?)?),
        _ => None,
    };
    let mut fallbacks = 0;
    for s in m.samples() {
        let img = read_image(&s.image_path)?;
        let (h, w) = (img.height(), img.width());
        let mask = match (cfg.seg.mask_source, &net) {
            (MaskSource::Identity, _) => MaskImage::filled(h, w, 1.0),
            (MaskSource::Manifest, _) => {
                let p = s.mask_path.as_ref().ok_or_else(|| {
                    CliError::Validation(format!("sample {} has no mask in the manifest", s.id()))
                })?;
                read_mask(p)?.resize(h, w).binarize()
            }
            (MaskSource::Model, Some(net)) => {
                let small = img.resize(cfg.seg.size, cfg.seg.size);
                predict_mask(net, &small)?.resize(h, w).binarize()
            }
            (MaskSource::Model, None) => unreachable!("model loaded above"),
        };
        let masked = apply_mask(&img, &mask, cfg.seg.mode)?;
        fallbacks += masked.fell_back as usize;
        let id = s.id();
        ws.write_png(&format!("seg/masked/{id}.png"), &masked.image, &mut rec)?;
        let pgm = ws.path(&format!("seg/masks/{id}.pgm"));
        ensure_parent(&pgm)?;
        write_pnm(&pgm, mask.image(), Some(&cfg.stamp()))?;
        rec.output(&pgm);
    }
    rec.stage("apply");
    println!(
        "seg apply: {} images masked ({:?}), {fallbacks} empty-mask crop fallbacks",
        m.len(),
        cfg.seg.mode
    );
    rec.finish(Some(cfg), cfg.seed)
}

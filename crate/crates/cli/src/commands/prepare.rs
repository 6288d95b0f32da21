use lesionforge::dataset::{load_manifest_with, rebalance_plan_for, stratified_split, ClassWeights, Sample, Split};
use lesionforge::imageops::{affine_transform, augment_seed, read_image};
use lesionforge::rng;
use lesionforge::segmentation::MaskImage;

use crate::config::ExperimentConfig;
use crate::error::CliResult;
use crate::record::{Recorder, RunRecord};
use crate::workspace::{read_mask, Workspace, AUGMENTED_DIR, CLASS_WEIGHTS, SPLIT_MANIFEST};

/// Split, rebalance and weight the dataset.
pub fn run(cfg: &ExperimentConfig) -> CliResult<RunRecord> {
    let ws = Workspace::create(cfg)?;
    let mut rec = Recorder::new("prepare", &ws.out);
    let manifest = load_manifest_with(cfg.require_manifest()?, cfg.label_source)?;
    let split = if manifest.fully_assigned() {
        manifest
    } else {
        stratified_split(&manifest, &cfg.split, cfg.seed)?
    };
    rec.stage("split");

    let plan = if cfg.augment {
        rebalance_plan_for(&split, cfg.cap_ratio)?
    } else {
        vec![0; split.num_classes()]
    };
    let mut extra = Vec::new();
    for (class, &n_new) in plan.iter().enumerate() {
        let members: Vec<(usize, &Sample)> = split
            .samples()
            .iter()
            .enumerate()
            .filter(|(_, s)| s.split == Split::Train && s.label_id == class)
            .collect();
        for j in 0..n_new {
            let (index, src) = members[j % members.len()];
            let k = j / members.len();
            let params = cfg
                .augment_ranges
                .sample(&mut rng::stream(augment_seed(cfg.seed, index as u64, k as u64), &[]));
            let stem = format!("aug_{}_{k}", src.id());
            let img = affine_transform(&read_image(&src.image_path)?, &params)?;
            let image_path = ws.write_png(&format!("{AUGMENTED_DIR}/{stem}.png"), &img, &mut rec)?;
            let mask_path = match &src.mask_path {
                Some(p) => {
                    let warped = affine_transform(read_mask(p)?.image(), &params)?;
                    let mask = MaskImage::new(warped).binarize();
                    Some(ws.write_png(&format!("{AUGMENTED_DIR}/{stem}_mask.png"), mask.image(), &mut rec)?)
                }
                None => None,
            };
            extra.push(Sample {
                image_path,
                label_id: class,
                split: Split::Train,
                mask_path,
            });
        }
    }
    let n_aug = extra.len();
    let prepared = split.with_extra(extra)?;
    rec.stage("augment");

    let train_counts = prepared.split_counts(Split::Train);
    let weights = if cfg.class_weights {
        ClassWeights::from_counts(&train_counts)?
    } else {
        ClassWeights::uniform(prepared.num_classes())
    };
    let mut text = format!("# {}\nclass,train_count,weight\n", cfg.stamp());
    for (c, (n, w)) in train_counts.iter().zip(weights.as_slice()).enumerate() {
        text.push_str(&format!("{},{n},{w:?}\n", prepared.label_map().name(c)));
    }
    ws.write_text(CLASS_WEIGHTS, &text, &mut rec)?;
    ws.write_text(SPLIT_MANIFEST, &prepared.to_csv(&ws.out, &ws.comments()), &mut rec)?;
    rec.stage("write");

    let counts = |s| {
        prepared
            .split_counts(s)
            .iter()
            .map(usize::to_string)
            .collect::<Vec<_>>()
            .join("/")
    };
    println!(
        "prepare: {} samples, {} classes; train {} val {} test {}; {n_aug} augmented",
        prepared.len(),
        prepared.num_classes(),
        counts(Split::Train),
        counts(Split::Val),
        counts(Split::Test),
    );
    rec.finish(Some(cfg), cfg.seed)
}

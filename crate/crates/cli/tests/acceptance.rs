//! Acceptance run: one PASS/FAIL line per criterion, nonzero exit if any
//! criterion fails. Built with `harness = false` so the lines are printed
//! in order and never captured.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::Instant;

use lesionforge::backbones::{build_backbone, BackboneKind};
use lesionforge::dataset::{
    rebalance_plan, stratified_split, ClassWeights, DatasetManifest, LabelMap, Sample, Split, SplitFractions,
};
use lesionforge::ensemble::{train_ensemble, EnsembleMode, EnsembleModel, FeatureTriple, Pipeline, TrainConfig};
use lesionforge::gradsuite::{run_grad_suite, GradSuiteConfig};
use lesionforge::imageops::{
    affine_transform, apply_filter_chain, gaussian_blur, gaussian_kernel, hist_equalize, median_filter,
    sobel_magnitude, write_png, AffineParams, FilterChainConfig, Image,
};
use lesionforge::metrics::{argmax, report, roc_auc, ConfusionMatrix};
use lesionforge::nncore::{conv2d, dense, depthwise_conv2d, read_weights, write_weights, Padding, Tensor};
use lesionforge::rng;
use lesionforge::segmentation::{
    build_dual_encoder, dice_coefficient, predict_mask, train_segmenter, DualEncoderConfig, SegTrainConfig,
};
use lesionforge::synth::{blob_dataset, ellipse_dataset, write_blob_manifest};
use lesionforge_cli::workspace::{load_seg_model, seg_model_tensors};
use rand::Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("gradient checks", gradients),
        ("oracle equivalence", oracles),
        ("AUC vs rank statistic", auc),
        ("metrics on fixed confusion matrices", metrics),
        ("toy ensemble beats individuals", toy_ensemble),
        ("toy segmentation", toy_segmentation),
        ("rebalancing", rebalancing),
        ("determinism and persistence", determinism),
        ("imported-feature smoke run", imported_smoke),
        ("filter invariants", filter_invariants),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let o = catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        failed += !o.pass as usize;
        println!(
            "criterion {:>2} {} {name}: {} [{:.1}s]",
            i + 1,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            t.elapsed().as_secs_f64()
        );
    }
    println!("acceptance: {} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}

// 1 ------------------------------------------------------------------------

fn gradients() -> Outcome {
    let t = Instant::now();
    let r = run_grad_suite(&GradSuiteConfig::default()).unwrap();
    let secs = t.elapsed().as_secs_f64();
    print!("{}", r.to_text());
    let worst = r.results.iter().map(|o| o.max_rel_err / o.tolerance).fold(0.0, f64::max);
    outcome(
        r.passed() && secs < 60.0,
        format!("{} checks, worst err/tol {worst:.3}, {secs:.1}s of 60s", r.results.len()),
    )
}

// 2 ------------------------------------------------------------------------

fn rand_tensor(r: &mut impl Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Output length and leading pad of one spatial axis.
fn axis(len: usize, k: usize, stride: usize, pad: Padding) -> (usize, usize) {
    match pad {
        Padding::Valid => ((len - k) / stride + 1, 0),
        Padding::Same => {
            let out = len.div_ceil(stride);
            let need = ((out - 1) * stride + k).saturating_sub(len);
            (out, need / 2)
        }
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>, stride: usize, pad: Padding, depthwise: bool) -> Vec<f64> {
    let [n, c, h, wd] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
    let (o, k) = (w.shape()[0], w.shape()[2]);
    let (oh, pt) = axis(h, k, stride, pad);
    let (ow, pl) = axis(wd, k, stride, pad);
    let at = |i: usize, ch: usize, y: isize, xx: isize| -> f64 {
        if y < 0 || xx < 0 || y >= h as isize || xx >= wd as isize {
            0.0
        } else {
            x.data()[((i * c + ch) * h + y as usize) * wd + xx as usize]
        }
    };
    let mut out = Vec::new();
    for i in 0..n {
        for f in 0..o {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = b.data()[f];
                    let chans = if depthwise { f..f + 1 } else { 0..c };
                    for ch in chans {
                        // depthwise filters hold a single input plane
                        let plane = if depthwise { f } else { f * c + ch };
                        for ky in 0..k {
                            for kx in 0..k {
                                let y = (oy * stride + ky) as isize - pt as isize;
                                let xx = (ox * stride + kx) as isize - pl as isize;
                                s += w.data()[(plane * k + ky) * k + kx] * at(i, ch, y, xx);
                            }
                        }
                    }
                    out.push(s);
                }
            }
        }
    }
    out
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "length mismatch");
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Mirror without repeating the edge pixel.
fn mirror(mut p: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let n = n as isize;
    loop {
        if p < 0 {
            p = -p;
        } else if p >= n {
            p = 2 * (n - 1) - p;
        } else {
            return p as usize;
        }
    }
}

fn blur_oracle(img: &Image, sigma: f64, ksize: usize) -> Vec<f64> {
    let r = (ksize / 2) as isize;
    let taps: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
    let total: f64 = taps.iter().sum();
    let (h, w, ch) = (img.height(), img.width(), img.channels());
    let mut out = Vec::with_capacity(h * w * ch);
    for y in 0..h {
        for x in 0..w {
            for c in 0..ch {
                let mut s = 0.0;
                for dy in -r..=r {
                    for dx in -r..=r {
                        let wgt = taps[(dy + r) as usize] * taps[(dx + r) as usize] / (total * total);
                        let v = img.get(mirror(y as isize + dy, h), mirror(x as isize + dx, w), c);
                        s += wgt * v as f64;
                    }
                }
                out.push(s);
            }
        }
    }
    out
}

fn random_image(r: &mut impl Rng, h: usize, w: usize, ch: usize) -> Image {
    Image::new(h, w, ch, (0..h * w * ch).map(|_| r.random_range(0.0f32..1.0)).collect()).unwrap()
}

fn oracles() -> Outcome {
    let mut worst = [0.0f64; 4];
    for s in 0..20u64 {
        let mut r = rng::stream(s, &[rng::name_key("oracle")]);
        let (n, c, o) = (r.random_range(1..3), r.random_range(1..4), r.random_range(1..4));
        let k = [1, 3, 5][r.random_range(0..3)];
        let (h, w) = (r.random_range(k..k + 6), r.random_range(k..k + 6));
        let stride = r.random_range(1..3);
        let pad = if r.random_bool(0.5) { Padding::Same } else { Padding::Valid };
        let x = rand_tensor(&mut r, &[n, c, h, w]);

        let wt = rand_tensor(&mut r, &[o, c, k, k]);
        let b = rand_tensor(&mut r, &[o]);
        let got = conv2d(&x, &wt, &b, stride, pad).unwrap();
        worst[0] = worst[0].max(max_abs_diff(got.data(), &conv_oracle(&x, &wt, &b, stride, pad, false)));

        let wd = rand_tensor(&mut r, &[c, 1, k, k]);
        let bd = rand_tensor(&mut r, &[c]);
        let got = depthwise_conv2d(&x, &wd, &bd, stride, pad).unwrap();
        worst[1] = worst[1].max(max_abs_diff(got.data(), &conv_oracle(&x, &wd, &bd, stride, pad, true)));

        let (rows, ins, outs) = (r.random_range(1..5), r.random_range(1..12), r.random_range(1..8));
        let xd = rand_tensor(&mut r, &[rows, ins]);
        let wdn = rand_tensor(&mut r, &[ins, outs]);
        let bdn = rand_tensor(&mut r, &[outs]);
        let got = dense(&xd, &wdn, &bdn).unwrap();
        let mut want = Vec::new();
        for i in 0..rows {
            for j in 0..outs {
                want.push(bdn.data()[j] + (0..ins).map(|p| xd.data()[i * ins + p] * wdn.data()[p * outs + j]).sum::<f64>());
            }
        }
        worst[2] = worst[2].max(max_abs_diff(got.data(), &want));

        let (ih, iw, ic) = (r.random_range(4..13), r.random_range(4..13), [1, 3][r.random_range(0..2)]);
        let img = random_image(&mut r, ih, iw, ic);
        let sigma = r.random_range(0.5..2.0);
        let ksize = [3, 5, 7][r.random_range(0..3)];
        let got: Vec<f64> = gaussian_blur(&img, sigma, ksize).unwrap().data().iter().map(|&v| v as f64).collect();
        worst[3] = worst[3].max(max_abs_diff(&got, &blur_oracle(&img, sigma, ksize)));
    }
    outcome(
        worst.iter().all(|&e| e <= 1e-6),
        format!(
            "20 inputs each, max abs err conv2d {:.1e} depthwise {:.1e} dense {:.1e} blur {:.1e} (tol 1e-6)",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// 3 ------------------------------------------------------------------------

fn auc() -> Outcome {
    let mut worst = 0.0f64;
    let mut tie_heavy = 0;
    for s in 0..100u64 {
        let mut r = rng::stream(s, &[rng::name_key("auc")]);
        let n = r.random_range(4..120);
        let levels = if s % 2 == 0 { Some(r.random_range(2..5)) } else { None };
        tie_heavy += levels.is_some() as usize;
        let mut truth: Vec<usize> = (0..n).map(|_| r.random_range(0..2)).collect();
        truth[0] = 0;
        truth[1] = 1;
        let scores: Vec<f64> = truth
            .iter()
            .map(|&t| {
                let v: f64 = r.random_range(0.0..1.0) + 0.3 * t as f64;
                match levels {
                    Some(l) => (v * l as f64).floor() / l as f64,
                    None => v,
                }
            })
            .collect();
        let rows: Vec<[f64; 2]> = scores.iter().map(|&v| [1.0 - v, v]).collect();
        let got = roc_auc(&rows, &truth, 1).unwrap().auc;
        let (mut wins, mut pairs) = (0.0, 0.0);
        for (i, &ti) in truth.iter().enumerate() {
            for (j, &tj) in truth.iter().enumerate() {
                if ti == 1 && tj == 0 {
                    pairs += 1.0;
                    wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 1.0,
                        std::cmp::Ordering::Equal => 0.5,
                        std::cmp::Ordering::Less => 0.0,
                    };
                }
            }
        }
        worst = worst.max((got - wins / pairs).abs());
    }
    outcome(worst <= 1e-9, format!("100 sets ({tie_heavy} tie-heavy), max |diff| {worst:.1e} (tol 1e-9)"))
}

// 4 ------------------------------------------------------------------------

/// Matrix (rows truth, columns predicted), then per class hand-derived
/// (precision, recall, F1) as fractions, then accuracy. A zero denominator
/// stands for an undefined quantity reported as 0.
type Frac = (u64, u64);

fn metrics() -> Outcome {
    let cases: Vec<(Vec<Vec<u64>>, Vec<[Frac; 3]>, Frac)> = vec![
        (vec![vec![8, 2], vec![2, 8]], vec![[(8, 10), (8, 10), (16, 20)], [(8, 10), (8, 10), (16, 20)]], (16, 20)),
        (vec![vec![5, 0], vec![0, 5]], vec![[(1, 1), (1, 1), (1, 1)], [(1, 1), (1, 1), (1, 1)]], (10, 10)),
        (vec![vec![0, 5], vec![5, 0]], vec![[(0, 5), (0, 5), (0, 0)], [(0, 5), (0, 5), (0, 0)]], (0, 10)),
        (vec![vec![9, 1], vec![3, 7]], vec![[(9, 12), (9, 10), (18, 22)], [(7, 8), (7, 10), (14, 18)]], (16, 20)),
        (vec![vec![10, 0], vec![10, 0]], vec![[(10, 20), (10, 10), (20, 30)], [(0, 0), (0, 10), (0, 0)]], (10, 20)),
        (
            vec![vec![3, 1, 0], vec![1, 3, 0], vec![0, 0, 4]],
            vec![[(3, 4), (3, 4), (6, 8)], [(3, 4), (3, 4), (6, 8)], [(4, 4), (4, 4), (8, 8)]],
            (10, 12),
        ),
        (
            vec![vec![6, 2, 2], vec![1, 8, 1], vec![0, 3, 7]],
            vec![[(6, 7), (6, 10), (12, 17)], [(8, 13), (8, 10), (16, 23)], [(7, 10), (7, 10), (14, 20)]],
            (21, 30),
        ),
        (
            vec![vec![1, 0, 0], vec![0, 0, 0], vec![0, 0, 1]],
            vec![[(1, 1), (1, 1), (2, 2)], [(0, 0), (0, 0), (0, 0)], [(1, 1), (1, 1), (2, 2)]],
            (2, 2),
        ),
        (vec![vec![2, 3], vec![0, 5]], vec![[(2, 2), (2, 5), (4, 7)], [(5, 8), (5, 5), (10, 13)]], (7, 10)),
        (
            vec![vec![4, 1, 0, 0], vec![0, 3, 2, 0], vec![1, 0, 5, 1], vec![0, 0, 0, 6]],
            vec![
                [(4, 5), (4, 5), (8, 10)],
                [(3, 4), (3, 5), (6, 9)],
                [(5, 7), (5, 7), (10, 14)],
                [(6, 7), (6, 6), (12, 13)],
            ],
            (18, 23),
        ),
    ];
    let val = |(n, d): Frac| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    let mut mismatches = Vec::new();
    for (i, (m, want, acc)) in cases.iter().enumerate() {
        let rep = report(&ConfusionMatrix::from_counts(m.clone()).unwrap()).unwrap();
        if rep.accuracy != val(*acc) {
            mismatches.push(format!("matrix {i} accuracy"));
        }
        for (c, w) in want.iter().enumerate() {
            let got = &rep.per_class[c];
            for (name, g, e) in [("P", got.precision, w[0]), ("R", got.recall, w[1]), ("F1", got.f1, w[2])] {
                if g != val(e) {
                    mismatches.push(format!("matrix {i} class {c} {name}: {g} vs {}", val(e)));
                }
            }
        }
    }
    outcome(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "10 matrices, every P/R/F1/accuracy bit-exact".to_string()
        } else {
            mismatches.join("; ")
        },
    )
}

// 5 ------------------------------------------------------------------------

fn toy_run(seed: u64) -> (f64, [f64; 3]) {
    let data = blob_dataset(300, 32, seed);
    let names = ["smooth", "striped", "checker"].map(String::from).to_vec();
    let samples = data
        .iter()
        .enumerate()
        .map(|(i, (_, label, _))| Sample {
            image_path: PathBuf::from(format!("toy/{i}.png")),
            label_id: *label,
            split: Split::Unassigned,
            mask_path: None,
        })
        .collect();
    let m = DatasetManifest::new(samples, LabelMap::new(names).unwrap()).unwrap();
    let m = stratified_split(&m, &SplitFractions::default(), seed).unwrap();
    let pipe = Pipeline {
        image_size: 64,
        filter: FilterChainConfig::default(),
        mask: None,
        backbones: BackboneKind::ALL.map(|k| build_backbone(k, seed)),
        model: None,
    };
    let feats: Vec<FeatureTriple> = data.iter().map(|(img, _, _)| pipe.features(img).unwrap()).collect();
    let rows = |split| -> (Vec<FeatureTriple>, Vec<usize>) {
        m.samples()
            .iter()
            .zip(&feats)
            .filter(|(s, _)| s.split == split)
            .map(|(s, f)| (f.clone(), s.label_id))
            .unzip()
    };
    let (x, y) = rows(Split::Train);
    let (vx, vy) = rows(Split::Val);
    let (tx, ty) = rows(Split::Test);
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let (mut model, _) = train_ensemble(&x, &y, 3, None, &cfg, Some((&vx, &vy))).unwrap();
    model.mode = EnsembleMode::SoftVote;
    let accuracy = |pred: Vec<usize>| pred.iter().zip(&ty).filter(|(p, t)| p == t).count() as f64 / ty.len() as f64;
    let heads = [0, 1, 2].map(|j| accuracy(model.head_probs(j, &tx).unwrap().iter().map(|p| argmax(p)).collect()));
    let sv = accuracy(model.predict_batch(&tx).unwrap().iter().map(|p| p.label).collect());
    (sv, heads)
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    v[v.len() / 2]
}

fn toy_ensemble() -> Outcome {
    let t = Instant::now();
    let runs: Vec<(f64, [f64; 3])> = (0..5).map(toy_run).collect();
    let secs = t.elapsed().as_secs_f64();
    for (s, (sv, h)) in runs.iter().enumerate() {
        println!("  seed {s}: soft vote {sv:.4}, heads {:.4} {:.4} {:.4}", h[0], h[1], h[2]);
    }
    let sv = median(runs.iter().map(|r| r.0).collect());
    let best = median(runs.iter().map(|r| r.1.iter().copied().fold(0.0, f64::max)).collect());
    outcome(
        sv >= 0.90 && sv >= best - 0.02 && secs < 600.0,
        format!("median soft vote {sv:.4}, median best head {best:.4}, {secs:.0}s of 600s"),
    )
}

// 6 ------------------------------------------------------------------------

fn toy_segmentation() -> Outcome {
    let t = Instant::now();
    let train = ellipse_dataset(40, 32, 0.1, 61);
    let held = ellipse_dataset(20, 32, 0.1, 62);
    let mut net = build_dual_encoder(DualEncoderConfig::default(), 6).unwrap();
    let cfg = SegTrainConfig {
        epochs: 200,
        seed: 6,
        ..SegTrainConfig::default()
    };
    let losses = train_segmenter(&mut net, &train, &cfg).unwrap();
    let (mut dice, mut area_err) = (0.0, 0.0f64);
    for (img, gt) in &held {
        let p = predict_mask(&net, img).unwrap().binarize();
        dice += dice_coefficient(&p, gt).unwrap();
        area_err = area_err.max((p.area() as f64 - gt.area() as f64).abs() / gt.area() as f64);
    }
    dice /= held.len() as f64;
    let secs = t.elapsed().as_secs_f64();
    outcome(
        dice >= 0.90 && area_err <= 0.20 && secs < 600.0,
        format!(
            "held-out dice {dice:.4} on {} images after {} epochs (loss {:.4}), worst area error {:.1}%, {secs:.0}s of 600s",
            held.len(),
            losses.len(),
            losses.last().unwrap(),
            100.0 * area_err
        ),
    )
}

// 7 ------------------------------------------------------------------------

fn cli(args: &[&str], config: &Path, out: &Path) -> std::process::Output {
    let o = Command::new(env!("CARGO_BIN_EXE_lesionforge"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .env("LESIONFORGE_THREADS", "0")
        .output()
        .unwrap();
    assert!(
        o.status.success(),
        "lesionforge {args:?} failed:\n{}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn rebalancing() -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;
    // cases where the quotient and product are exact in binary
    for counts in [vec![100, 20], vec![100, 100], vec![30, 10, 10], vec![8, 2], vec![7, 3], vec![180, 60, 60], vec![50, 25, 25, 20]] {
        let w = ClassWeights::from_counts(&counts).unwrap();
        let target = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        pass &= w.as_slice().iter().zip(&counts).all(|(wc, &n)| wc * n as f64 == target);
    }
    notes.push(format!("exact identity on fixed counts {}", if pass { "holds" } else { "broken" }));
    let mut r = rng::stream(7, &[rng::name_key("weights")]);
    let mut ulp_ok = true;
    for _ in 0..1000 {
        let counts: Vec<usize> = (0..r.random_range(2..8)).map(|_| r.random_range(1..2000)).collect();
        let w = ClassWeights::from_counts(&counts).unwrap();
        let target = counts.iter().sum::<usize>() as f64 / counts.len() as f64;
        ulp_ok &= w
            .as_slice()
            .iter()
            .zip(&counts)
            .all(|(wc, &n)| (wc * n as f64 - target).abs() <= f64::EPSILON * target);
    }
    pass &= ulp_ok;
    notes.push(format!("1000 random count vectors within one ulp: {ulp_ok}"));

    pass &= rebalance_plan(&[100, 20], f64::INFINITY).unwrap() == vec![0, 80];

    // through the CLI, on a manifest whose train split holds 100/20
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_blob_manifest(&data, &[130, 30], 16, 7).unwrap();
    let text = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let mut lines = text.lines();
    let mut split = format!("{}\npath,label,split,mask\n", lines.next().unwrap());
    lines.next();
    let mut seen = [0usize; 2];
    for l in lines {
        let f: Vec<&str> = l.split(',').collect();
        let c = (f[1] != "smooth") as usize;
        let train = [100, 20][c];
        let which = match seen[c] {
            i if i < train => "train",
            i if i < train + [15, 5][c] => "val",
            _ => "test",
        };
        seen[c] += 1;
        split.push_str(&format!("{},{},{which},{}\n", f[0], f[1], f[2]));
    }
    fs::write(data.join("split.csv"), split).unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "data.manifest=data/split.csv\ndata.image_size=16\n").unwrap();
    let out = dir.path().join("out");
    cli(&["prepare"], &cfg, &out);
    let prepared = fs::read_to_string(out.join("split_manifest.csv")).unwrap();
    let aug: Vec<&str> = prepared.lines().filter(|l| l.starts_with("augmented/")).collect();
    let aug_train = aug.iter().filter(|l| l.contains(",train")).count();
    let aug_files = fs::read_dir(out.join("augmented"))
        .unwrap()
        .filter(|e| !e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_mask.png"))
        .count();
    let count = |s: &str| prepared.lines().filter(|l| l.split(',').nth(2) == Some(s)).count();
    let weights = fs::read_to_string(out.join("class_weights.csv")).unwrap();
    let cli_ok = aug.len() == 80 && aug_train == 80 && aug_files == 80 && count("val") == 20 && count("test") == 20;
    pass &= cli_ok && weights.contains("smooth,100,1.0\n") && weights.contains("striped,100,1.0\n");
    notes.push(format!(
        "prepare on train 100/20: {} augmented rows, {aug_train} in train; val/test rows {}/{} (expected 20/20)",
        aug.len(),
        count("val"),
        count("test")
    ));
    outcome(pass, notes.join("; "))
}

// 8 ------------------------------------------------------------------------

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    write_blob_manifest(&dir.path().join("data"), &[24, 24, 24], 32, 8).unwrap();
    let cfg = dir.path().join("exp.cfg");
    fs::write(&cfg, "data.manifest=data/manifest.csv\ndata.image_size=32\nseed=8\n").unwrap();
    let mut reports = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        for cmd in ["prepare", "train", "evaluate"] {
            cli(&[cmd], &cfg, &out);
        }
        reports.push(fs::read(out.join("report.json")).unwrap());
    }
    let same_report = reports[0] == reports[1];

    // heads: write, read back, predict
    let mut r = rng::stream(8, &[rng::name_key("persist")]);
    let x: Vec<FeatureTriple> = (0..60)
        .map(|_| [4, 5, 6].map(|w| (0..w).map(|_| r.random_range(-1.0f32..1.0)).collect()))
        .collect();
    let y: Vec<usize> = (0..60).map(|i| i % 3).collect();
    let (model, _) = train_ensemble(&x, &y, 3, None, &TrainConfig::default(), None).unwrap();
    let mut buf = Vec::new();
    write_weights(&mut buf, &model.tensors()).unwrap();
    let back = EnsembleModel::from_tensors(&read_weights(&buf[..]).unwrap()).unwrap();
    let bits = |m: &EnsembleModel| -> Vec<u64> {
        m.predict_batch(&x).unwrap().iter().flat_map(|p| p.probs.iter().map(|v| v.to_bits())).collect()
    };
    let heads_ok = bits(&model) == bits(&back);

    // segmenter: save to disk, load, predict
    let net = build_dual_encoder(DualEncoderConfig::default(), 8).unwrap();
    let path = dir.path().join("seg.lfw");
    lesionforge::nncore::write_weights_file(&path, &seg_model_tensors(&net)).unwrap();
    let loaded = load_seg_model(&path).unwrap();
    let img = ellipse_dataset(1, 32, 0.1, 8).remove(0).0;
    let seg_ok = predict_mask(&net, &img).unwrap() == predict_mask(&loaded, &img).unwrap();
    outcome(
        same_report && heads_ok && seg_ok,
        format!(
            "report.json byte-identical across runs: {same_report}; head round trip bit-identical: {heads_ok}; segmenter round trip bit-identical: {seg_ok}"
        ),
    )
}

// 9 ------------------------------------------------------------------------

fn imported_smoke() -> Outcome {
    println!(
        "  disclosure: the published accuracies (96.32%, 90.86%, 93.92%) and per-model table values need the \
         real dermoscopy datasets and ImageNet-pretrained backbones; they are not reproduced here"
    );
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    write_blob_manifest(&data, &[15, 15, 15], 16, 9).unwrap();
    let text = fs::read_to_string(data.join("manifest.csv")).unwrap();
    let mut r = rng::stream(9, &[rng::name_key("tables")]);
    let mut tables = [
        "id,24\n".to_string(),
        "id,40\n".to_string(),
        "id,56\n".to_string(),
    ];
    for l in text.lines().skip(2) {
        let f: Vec<&str> = l.split(',').collect();
        let id = Path::new(f[0]).file_stem().unwrap().to_string_lossy().into_owned();
        let class = ["smooth", "striped", "checker"].iter().position(|c| *c == f[1]).unwrap();
        for (t, w) in tables.iter_mut().zip([24, 40, 56]) {
            let row: Vec<String> = (0..w)
                .map(|j| format!("{:.5}", (j % 3 == class) as u8 as f32 + r.random_range(-0.8f32..0.8)))
                .collect();
            t.push_str(&format!("{id},{}\n", row.join(",")));
        }
    }
    for (name, t) in ["mobile", "vgg", "incept"].iter().zip(&tables) {
        fs::write(data.join(format!("{name}.csv")), t).unwrap();
    }
    let cfg = dir.path().join("exp.cfg");
    fs::write(
        &cfg,
        "data.manifest=data/manifest.csv\nfeatures.s_mobile=data/mobile.csv\nfeatures.s_vgg=data/vgg.csv\n\
         features.s_incept=data/incept.csv\nrebalance.augment=false\n",
    )
    .unwrap();
    let out = dir.path().join("out");
    for cmd in ["prepare", "train", "evaluate"] {
        cli(&[cmd], &cfg, &out);
    }
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let models: Vec<String> = report["models"]
        .as_array()
        .unwrap()
        .iter()
        .map(|m| {
            format!(
                "{} {:.3}",
                m["model"].as_str().unwrap(),
                m["metrics"]["accuracy"].as_f64().unwrap()
            )
        })
        .collect();
    let names: Vec<&str> = models.iter().map(|m| m.split(' ').next().unwrap()).collect();
    outcome(
        names == ["S-MOBILE", "S-VGG", "S-INCEPT", "Ensemble"],
        format!("end to end on imported tables, four-model report: {}", models.join(", ")),
    )
}

// 10 -----------------------------------------------------------------------

fn filter_invariants() -> Outcome {
    let panels = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join("filter_panels");
    fs::create_dir_all(&panels).unwrap();
    let mut broken: Vec<String> = Vec::new();
    let mut check = |ok: bool, what: &str| {
        if !ok && !broken.iter().any(|b| b == what) {
            broken.push(what.to_string());
        }
    };
    let mut median_moved = 0;
    for (sigma, k) in [(0.5, 3), (1.0, 5), (1.5, 7), (3.0, 9), (0.3, 11)] {
        check((gaussian_kernel(sigma, k).unwrap().iter().sum::<f64>() - 1.0).abs() <= 1e-12, "kernel sum");
    }
    let chain = FilterChainConfig::default();
    for s in 0..50u64 {
        let mut r = rng::stream(s, &[rng::name_key("filters")]);
        let (h, w) = (r.random_range(8..33), r.random_range(8..33));
        let img = random_image(&mut r, h, w, 3);
        let outputs = [
            gaussian_blur(&img, 1.0, 5).unwrap(),
            median_filter(&img, 3).unwrap(),
            sobel_magnitude(&img),
            hist_equalize(&img),
            apply_filter_chain(&img, &chain).unwrap(),
        ];
        check(
            outputs.iter().all(|o| o.data().iter().all(|v| (0.0..=1.0).contains(v))),
            "outputs in [0,1]",
        );
        let level = r.random_range(0.0f32..1.0);
        let flat = Image::filled(h, w, 3, level);
        check(gaussian_blur(&flat, r.random_range(0.5..2.0), 5).unwrap() == flat, "blur keeps constants");
        check(sobel_magnitude(&flat).data().iter().all(|&v| v == 0.0), "sobel of constant");

        let bin = Image::new(h, w, 1, (0..h * w).map(|_| r.random_bool(0.5) as u8 as f32).collect()).unwrap();
        let once = median_filter(&bin, 3).unwrap();
        if median_filter(&once, 3).unwrap() != once {
            median_moved += 1;
        }

        check(affine_transform(&img, &AffineParams::identity()).unwrap() == img, "identity affine");
        for (fh, fv) in [(true, false), (false, true)] {
            let p = AffineParams {
                flip_h: fh,
                flip_v: fv,
                ..AffineParams::identity()
            };
            let twice = affine_transform(&affine_transform(&img, &p).unwrap(), &p).unwrap();
            check(twice == img, "flip involution");
        }

        let small = random_image(&mut r, 16, 16, 3);
        let got: Vec<f64> = gaussian_blur(&small, 1.0, 5).unwrap().data().iter().map(|&v| v as f64).collect();
        check(max_abs_diff(&got, &blur_oracle(&small, 1.0, 5)) <= 1e-6, "blur vs oracle on 16x16");

        if s < 4 {
            write_panel(&panels.join(format!("panel_{s}.png")), &img, &outputs);
        }
    }
    check(median_moved == 0, "median idempotent on binary images");
    outcome(
        broken.is_empty(),
        format!(
            "50 images; median(median(b)) != median(b) on {median_moved}/50 random binary images; broken: [{}]; panels in {}",
            broken.join(", "),
            panels.display()
        ),
    )
}

/// Input and each filter output side by side, 2 px grey gutters.
fn write_panel(path: &Path, img: &Image, outputs: &[Image]) {
    let (h, w) = (img.height(), img.width());
    let tiles: Vec<Image> = std::iter::once(img.clone())
        .chain(outputs.iter().map(|o| o.to_gray_or_rgb(3)))
        .collect();
    let pw = tiles.len() * (w + 2) - 2;
    let panel = Image::from_fn(h, pw, 3, |y, x, c| {
        let (t, off) = (x / (w + 2), x % (w + 2));
        if off >= w {
            0.5
        } else {
            tiles[t].get(y, off, c)
        }
    });
    write_png(path, &panel, &[]).unwrap();
}

//! Dual-encoder lesion segmenter and mask application.
//!
//! Two convolutional encoders read the same image. Encoder A has
//! `encoder_a_depth` conv+ReLU+pool blocks. Encoder B repeats those blocks,
//! adds `encoder_b_depth − encoder_a_depth` unpooled conv+ReLU blocks and a
//! 1×1 projection, so both end at the same scale. Their outputs are
//! concatenated along channels; the decoder upsamples back to full size
//! with nearest-neighbour upsampling + conv blocks, and a final 1×1 conv
//! produces one logit per pixel.

use rand::seq::SliceRandom;

use crate::imageops::Image;
use crate::nncore::{
    concat_channels, dice_bce_with_logits, max_pool2d, max_pool2d_backward, relu, relu_backward,
    sigmoid, split_channels, upsample_nearest2x, upsample_nearest2x_backward, Adam, AdamConfig,
    Conv2d, DiceBce, Module, Padding, Parameter, PoolIndices, Real, Tensor,
};
use crate::{rng, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DualEncoderConfig {
    pub encoder_a_depth: usize,
    pub encoder_b_depth: usize,
    pub base_channels: usize,
    pub in_channels: usize,
}

impl Default for DualEncoderConfig {
    fn default() -> Self {
        DualEncoderConfig {
            encoder_a_depth: 2,
            encoder_b_depth: 3,
            base_channels: 16,
            in_channels: 3,
        }
    }
}

impl DualEncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.encoder_a_depth == 0 || self.encoder_b_depth < self.encoder_a_depth {
            return Err(Error::InvalidArgument(format!(
                "encoder depths must satisfy 1 <= a <= b, got a={} b={}",
                self.encoder_a_depth, self.encoder_b_depth
            )));
        }
        if self.base_channels == 0 || self.in_channels == 0 {
            return Err(Error::InvalidArgument("channel counts must be positive".into()));
        }
        Ok(())
    }

    /// Input sides must be multiples of this.
    pub fn scale(&self) -> usize {
        1 << self.encoder_a_depth
    }

    fn width(&self, block: usize) -> usize {
        self.base_channels << block
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualEncoder<T: Real = f32> {
    cfg: DualEncoderConfig,
    enc_a: Vec<Conv2d<T>>,
    enc_b: Vec<Conv2d<T>>,
    enc_b_proj: Conv2d<T>,
    dec: Vec<Conv2d<T>>,
    head: Conv2d<T>,
}

/// Activations kept by [`DualEncoder::forward`] for the backward pass.
pub struct SegCache<T: Real> {
    a: BlockCache<T>,
    b: BlockCache<T>,
    b_proj_in: Tensor<T>,
    dec: BlockCache<T>,
    head_in: Tensor<T>,
}

struct BlockCache<T: Real> {
    conv_in: Vec<Tensor<T>>,
    pre: Vec<Tensor<T>>,
    pool: Vec<Option<PoolIndices>>,
}

impl<T: Real> BlockCache<T> {
    fn new() -> Self {
        BlockCache {
            conv_in: Vec::new(),
            pre: Vec::new(),
            pool: Vec::new(),
        }
    }
}

pub fn build_dual_encoder(cfg: DualEncoderConfig, seed: u64) -> Result<DualEncoder> {
    DualEncoder::new(cfg, seed)
}

impl<T: Real> DualEncoder<T> {
    pub fn new(cfg: DualEncoderConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let conv = |name: &str, i, o, k| Conv2d::new(name, i, o, k, 1, Padding::Same, seed);
        let a = cfg.encoder_a_depth;
        let mut enc_a = Vec::new();
        let mut enc_b = Vec::new();
        let mut ch = cfg.in_channels;
        for i in 0..a {
            enc_a.push(conv(&format!("enc_a.{i}"), ch, cfg.width(i), 3));
            enc_b.push(conv(&format!("enc_b.{i}"), ch, cfg.width(i), 3));
            ch = cfg.width(i);
        }
        for i in a..cfg.encoder_b_depth {
            enc_b.push(conv(&format!("enc_b.{i}"), ch, ch, 3));
        }
        let enc_b_proj = conv("enc_b.proj", ch, ch, 1);
        let mut dec = Vec::new();
        let mut dch = 2 * ch;
        for j in 0..a {
            let out = cfg.width(a - 1 - j);
            dec.push(conv(&format!("dec.{j}"), dch, out, 3));
            dch = out;
        }
        let head = conv("head", dch, 1, 1);
        Ok(DualEncoder {
            cfg,
            enc_a,
            enc_b,
            enc_b_proj,
            dec,
            head,
        })
    }

    pub fn config(&self) -> &DualEncoderConfig {
        &self.cfg
    }

    pub fn cast<U: Real>(&self) -> DualEncoder<U> {
        DualEncoder {
            cfg: self.cfg,
            enc_a: self.enc_a.iter().map(Conv2d::cast).collect(),
            enc_b: self.enc_b.iter().map(Conv2d::cast).collect(),
            enc_b_proj: self.enc_b_proj.cast(),
            dec: self.dec.iter().map(Conv2d::cast).collect(),
            head: self.head.cast(),
        }
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, h, w) = x.dims4()?;
        let s = self.cfg.scale();
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!("segmenter expects {} channels, got {c}", self.cfg.in_channels)));
        }
        if h < 2 * s || w < 2 * s {
            return Err(Error::Undersized(format!("segmenter needs at least {0}x{0}, got {h}x{w}", 2 * s)));
        }
        if h % s != 0 || w % s != 0 {
            return Err(Error::Shape(format!("input sides must be multiples of {s}, got {h}x{w}")));
        }
        Ok(())
    }

    /// Per-pixel logits (`N×1×H×W`) plus the activations needed by
    /// [`DualEncoder::backward`].
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, SegCache<T>)> {
        self.check_input(x)?;
        let depth = self.cfg.encoder_a_depth;
        let mut ca = BlockCache::new();
        let fa = run_blocks(&self.enc_a, x, |_| true, &mut ca)?;
        let mut cb = BlockCache::new();
        let b_proj_in = run_blocks(&self.enc_b, x, |i| i < depth, &mut cb)?;
        let fb = self.enc_b_proj.forward(&b_proj_in)?;
        let mut cur = concat_channels(&[&fa, &fb])?;
        let mut cd = BlockCache::new();
        for conv in &self.dec {
            let up = upsample_nearest2x(&cur)?;
            let z = conv.forward(&up)?;
            cur = relu(&z);
            cd.conv_in.push(up);
            cd.pre.push(z);
            cd.pool.push(None);
        }
        let logits = self.head.forward(&cur)?;
        Ok((
            logits,
            SegCache {
                a: ca,
                b: cb,
                b_proj_in,
                dec: cd,
                head_in: cur,
            },
        ))
    }

    /// Accumulates parameter gradients for `dlogits`.
    pub fn backward(&mut self, cache: &SegCache<T>, dlogits: &Tensor<T>) -> Result<()> {
        let mut d = self.head.backward(&cache.head_in, dlogits)?;
        for (j, conv) in self.dec.iter_mut().enumerate().rev() {
            d = relu_backward(&cache.dec.pre[j], &d);
            d = conv.backward(&cache.dec.conv_in[j], &d)?;
            d = upsample_nearest2x_backward(&d)?;
        }
        let ca = self.enc_a.last().map_or(0, Conv2d::out_channels);
        let parts = split_channels(&d, &[ca, self.enc_b_proj.out_channels()])?;
        back_blocks(&mut self.enc_a, &cache.a, parts[0].clone())?;
        let db = self.enc_b_proj.backward(&cache.b_proj_in, &parts[1])?;
        back_blocks(&mut self.enc_b, &cache.b, db)?;
        Ok(())
    }

    /// Sigmoid probabilities, `N×1×H×W`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(sigmoid(&self.forward(x)?.0))
    }
}

fn run_blocks<T: Real>(
    convs: &[Conv2d<T>],
    x: &Tensor<T>,
    pooled: impl Fn(usize) -> bool,
    cache: &mut BlockCache<T>,
) -> Result<Tensor<T>> {
    let mut cur = x.clone();
    for (i, conv) in convs.iter().enumerate() {
        let z = conv.forward(&cur)?;
        let a = relu(&z);
        cache.conv_in.push(cur);
        cache.pre.push(z);
        if pooled(i) {
            let (p, idx) = max_pool2d(&a, 2, 2)?;
            cache.pool.push(Some(idx));
            cur = p;
        } else {
            cache.pool.push(None);
            cur = a;
        }
    }
    Ok(cur)
}

fn back_blocks<T: Real>(convs: &mut [Conv2d<T>], cache: &BlockCache<T>, mut d: Tensor<T>) -> Result<()> {
    for (i, conv) in convs.iter_mut().enumerate().rev() {
        if let Some(idx) = &cache.pool[i] {
            d = max_pool2d_backward(idx, &d);
        }
        d = relu_backward(&cache.pre[i], &d);
        d = conv.backward(&cache.conv_in[i], &d)?;
    }
    Ok(())
}

impl<T: Real> DualEncoder<T> {
    fn named_convs(&self) -> Vec<(String, &Conv2d<T>)> {
        let mut v: Vec<(String, &Conv2d<T>)> = Vec::new();
        v.extend(self.enc_a.iter().enumerate().map(|(i, c)| (format!("enc_a.{i}"), c)));
        v.extend(self.enc_b.iter().enumerate().map(|(i, c)| (format!("enc_b.{i}"), c)));
        v.push(("enc_b.proj".into(), &self.enc_b_proj));
        v.extend(self.dec.iter().enumerate().map(|(j, c)| (format!("dec.{j}"), c)));
        v.push(("head".into(), &self.head));
        v
    }

    fn named_convs_mut(&mut self) -> Vec<(String, &mut Conv2d<T>)> {
        let mut v: Vec<(String, &mut Conv2d<T>)> = Vec::new();
        v.extend(self.enc_a.iter_mut().enumerate().map(|(i, c)| (format!("enc_a.{i}"), c)));
        v.extend(self.enc_b.iter_mut().enumerate().map(|(i, c)| (format!("enc_b.{i}"), c)));
        v.push(("enc_b.proj".into(), &mut self.enc_b_proj));
        v.extend(self.dec.iter_mut().enumerate().map(|(j, c)| (format!("dec.{j}"), c)));
        v.push(("head".into(), &mut self.head));
        v
    }
}

impl<T: Real> Module<T> for DualEncoder<T> {
    fn params(&self) -> Vec<(String, &Parameter<T>)> {
        self.named_convs()
            .into_iter()
            .flat_map(|(n, c)| [(format!("{n}.weight"), &c.weight), (format!("{n}.bias"), &c.bias)])
            .collect()
    }

    fn params_mut(&mut self) -> Vec<(String, &mut Parameter<T>)> {
        self.named_convs_mut()
            .into_iter()
            .flat_map(|(n, c)| [(format!("{n}.weight"), &mut c.weight), (format!("{n}.bias"), &mut c.bias)])
            .collect()
    }
}

/// Single-channel mask with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskImage(Image);

impl MaskImage {
    /// Colour images are reduced to luma.
    pub fn new(img: Image) -> Self {
        MaskImage(img.to_gray_or_rgb(1))
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        MaskImage(Image::filled(height, width, 1, value))
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> f32) -> Self {
        MaskImage(Image::from_fn(height, width, 1, |y, x, _| f(y, x)))
    }

    pub fn image(&self) -> &Image {
        &self.0
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }

    pub fn get(&self, y: usize, x: usize) -> f32 {
        self.0.get(y, x, 0)
    }

    /// Threshold at 0.5; exactly 0.5 maps to 1.
    pub fn binarize(&self) -> MaskImage {
        MaskImage(Image::from_fn(self.height(), self.width(), 1, |y, x, _| {
            if self.get(y, x) >= 0.5 {
                1.0
            } else {
                0.0
            }
        }))
    }

    /// Number of pixels at or above 0.5.
    pub fn area(&self) -> usize {
        self.0.data().iter().filter(|&&v| v >= 0.5).count()
    }

    /// Tight `(y0, x0, y1, x1)` box (exclusive ends) of the binary mask.
    pub fn bounding_box(&self) -> Option<(usize, usize, usize, usize)> {
        let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0, 0);
        for y in 0..self.height() {
            for x in 0..self.width() {
                if self.get(y, x) >= 0.5 {
                    y0 = y0.min(y);
                    x0 = x0.min(x);
                    y1 = y1.max(y + 1);
                    x1 = x1.max(x + 1);
                }
            }
        }
        (y0 != usize::MAX).then_some((y0, x0, y1, x1))
    }

    pub fn resize(&self, height: usize, width: usize) -> MaskImage {
        MaskImage(self.0.resize(height, width))
    }
}

/// Dice coefficient `2|P∩G|/(|P|+|G|)` of the binarized masks; two empty
/// masks score 1.
pub fn dice_coefficient(pred: &MaskImage, gt: &MaskImage) -> Result<f64> {
    same_dims(pred.height(), pred.width(), gt.image())?;
    let (mut inter, mut total) = (0usize, 0usize);
    for (p, g) in pred.0.data().iter().zip(gt.0.data()) {
        let (p, g) = (*p >= 0.5, *g >= 0.5);
        inter += (p && g) as usize;
        total += p as usize + g as usize;
    }
    Ok(if total == 0 { 1.0 } else { 2.0 * inter as f64 / total as f64 })
}

fn same_dims(h: usize, w: usize, img: &Image) -> Result<()> {
    if img.height() != h || img.width() != w {
        return Err(Error::Shape(format!(
            "mask is {h}x{w} but image is {}x{}",
            img.height(),
            img.width()
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MaskMode {
    #[default]
    Multiply,
    Crop,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "multiply" => Ok(MaskMode::Multiply),
            "crop" => Ok(MaskMode::Crop),
            o => Err(Error::InvalidArgument(format!("unknown mask mode `{o}`"))),
        }
    }
}

/// Padding around the lesion box in crop mode.
pub const CROP_PAD: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct MaskedImage {
    pub image: Image,
    /// Crop was requested but the mask was empty, so multiply was used.
    pub fell_back: bool,
}

/// Focuses `img` on the lesion. Multiply scales every channel by the mask;
/// crop cuts the padded bounding box of the binary mask and resizes it
/// back to the input size.
pub fn apply_mask(img: &Image, mask: &MaskImage, mode: MaskMode) -> Result<MaskedImage> {
    same_dims(mask.height(), mask.width(), img)?;
    let multiply = || {
        Image::from_fn(img.height(), img.width(), img.channels(), |y, x, c| {
            img.get(y, x, c) * mask.get(y, x)
        })
    };
    match mode {
        MaskMode::Multiply => Ok(MaskedImage {
            image: multiply(),
            fell_back: false,
        }),
        MaskMode::Crop => match mask.bounding_box() {
            None => Ok(MaskedImage {
                image: multiply(),
                fell_back: true,
            }),
            Some((y0, x0, y1, x1)) => {
                let crop = img.crop(
                    y0.saturating_sub(CROP_PAD),
                    x0.saturating_sub(CROP_PAD),
                    (y1 + CROP_PAD).min(img.height()),
                    (x1 + CROP_PAD).min(img.width()),
                );
                Ok(MaskedImage {
                    image: crop.resize(img.height(), img.width()),
                    fell_back: false,
                })
            }
        },
    }
}

/// Probability mask for one image. Inputs whose sides are not multiples of
/// the network scale are resized up to the next multiple and the mask is
/// resized back.
pub fn predict_mask(net: &DualEncoder, img: &Image) -> Result<MaskImage> {
    let s = net.cfg.scale();
    let (h, w) = (img.height(), img.width());
    if h < 2 * s || w < 2 * s {
        return Err(Error::Undersized(format!("segmenter needs at least {0}x{0}, got {h}x{w}", 2 * s)));
    }
    let (th, tw) = (h.div_ceil(s) * s, w.div_ceil(s) * s);
    let x = seg_input(&img.resize(th, tw), net.cfg.in_channels)?;
    let p = net.predict(&x)?;
    let mask = MaskImage(Image::from_tensor(&p)?);
    Ok(if (th, tw) == (h, w) { mask } else { mask.resize(h, w) })
}

fn seg_input<T: Real>(img: &Image, channels: usize) -> Result<Tensor<T>> {
    match channels {
        1 | 3 => Ok(img.to_gray_or_rgb(channels).to_tensor()),
        n => Err(Error::InvalidArgument(format!("segmenter input must have 1 or 3 channels, got {n}"))),
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SegTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: DiceBce,
}

impl Default for SegTrainConfig {
    fn default() -> Self {
        SegTrainConfig {
            epochs: 50,
            lr: 0.001,
            batch_size: 8,
            seed: 0,
            loss: DiceBce::default(),
        }
    }
}

/// Trains with Adam on the Dice+BCE loss, averaged over the images of each
/// minibatch. Returns the mean loss of every epoch. The epoch order is
/// shuffled by a stream keyed on `(seed, epoch)`.
pub fn train_segmenter(net: &mut DualEncoder, pairs: &[(Image, MaskImage)], cfg: &SegTrainConfig) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("segmenter training needs at least one pair".into()));
    }
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::InvalidArgument("batch size and learning rate must be positive".into()));
    }
    let mut inputs = Vec::with_capacity(pairs.len());
    let mut targets = Vec::with_capacity(pairs.len());
    for (i, (img, mask)) in pairs.iter().enumerate() {
        same_dims(mask.height(), mask.width(), img)?;
        if (img.height(), img.width()) != (pairs[0].0.height(), pairs[0].0.width()) {
            return Err(Error::Shape(format!("training pair {i} differs in size from pair 0")));
        }
        if mask.0.data().iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::InvalidArgument(format!("training mask {i} is not binary")));
        }
        inputs.push(seg_input::<f32>(img, net.cfg.in_channels)?);
        targets.push(mask.0.data().to_vec());
    }
    let mut opt = Adam::new(AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    });
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng::stream(cfg.seed, &[rng::name_key("seg-epoch"), epoch as u64]));
        let mut total = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let items: Vec<Tensor> = batch.iter().map(|&i| inputs[i].clone()).collect();
            let x = Tensor::stack(&items)?;
            let (logits, cache) = net.forward(&x)?;
            let per = logits.len() / batch.len();
            let mut dlogits = Tensor::zeros(logits.shape());
            let scale = 1.0 / batch.len() as f32;
            for (k, &i) in batch.iter().enumerate() {
                let span = k * per..(k + 1) * per;
                let (loss, grad) = dice_bce_with_logits(&logits.data()[span.clone()], &targets[i], &cfg.loss)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!("segmentation loss at epoch {epoch}")));
                }
                total += loss as f64;
                for (d, g) in dlogits.data_mut()[span].iter_mut().zip(grad) {
                    *d = g * scale;
                }
            }
            net.zero_grad();
            net.backward(&cache, &dlogits)?;
            opt.step(net.params_mut())?;
        }
        history.push(total / pairs.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nncore::gradcheck::{grad_check, spread_coords};
    use crate::synth;
    use rand::Rng;

    fn tiny() -> DualEncoderConfig {
        DualEncoderConfig {
            base_channels: 4,
            ..DualEncoderConfig::default()
        }
    }

    #[test]
    fn shape_contract() {
        let net = build_dual_encoder(DualEncoderConfig::default(), 1).unwrap();
        let img = Image::filled(64, 64, 3, 0.3);
        let m = predict_mask(&net, &img).unwrap();
        assert_eq!((m.height(), m.width()), (64, 64));
        assert!(m.image().data().iter().all(|v| (0.0..=1.0).contains(v)));
        let odd = predict_mask(&net, &Image::filled(18, 21, 1, 0.3)).unwrap();
        assert_eq!((odd.height(), odd.width()), (18, 21));
        assert!(matches!(predict_mask(&net, &Image::filled(6, 40, 3, 0.0)), Err(Error::Undersized(_))));
    }

    #[test]
    fn init_is_seeded() {
        let a = build_dual_encoder(tiny(), 3).unwrap();
        assert_eq!(a, build_dual_encoder(tiny(), 3).unwrap());
        assert_ne!(a.flat_values(), build_dual_encoder(tiny(), 4).unwrap().flat_values());
    }

    #[test]
    fn gradient_check_8x8() {
        let net64: DualEncoder<f64> = DualEncoder::new(tiny(), 11).unwrap();
        let mut r = rng::stream(5, &[]);
        let x = Tensor::<f64>::from_fn(&[1, 3, 8, 8], |_| r.random::<f64>());
        let gt: Vec<f64> = (0..64).map(|i| ((i / 8 + i % 8) % 3 == 0) as u8 as f64).collect();
        let loss_of = |net: &DualEncoder<f64>| {
            let (z, _) = net.forward(&x).unwrap();
            dice_bce_with_logits(z.data(), &gt, &DiceBce::default()).unwrap()
        };
        let mut net = net64.clone();
        let (z, cache) = net.forward(&x).unwrap();
        let (_, g) = dice_bce_with_logits(z.data(), &gt, &DiceBce::default()).unwrap();
        net.zero_grad();
        net.backward(&cache, &Tensor::new(z.shape(), g).unwrap()).unwrap();
        let theta = net.flat_values();
        let analytic = net.flat_grads();
        let mut probe = net64.clone();
        let coords = spread_coords(theta.len(), 300);
        let rep = grad_check(
            "dual_encoder",
            |p| {
                probe.set_flat_values(p);
                loss_of(&probe).0
            },
            &theta,
            &analytic,
            Some(&coords),
            1e-3,
        );
        assert!(rep.passed, "{rep:?}");
    }

    #[test]
    fn zero_epochs_leaves_net_unchanged() {
        let mut net = build_dual_encoder(tiny(), 0).unwrap();
        let before = net.clone();
        let pair = (Image::filled(8, 8, 3, 0.0), MaskImage::filled(8, 8, 0.0));
        let cfg = SegTrainConfig {
            epochs: 0,
            ..SegTrainConfig::default()
        };
        assert!(train_segmenter(&mut net, &[pair], &cfg).unwrap().is_empty());
        assert_eq!(net, before);
    }

    #[test]
    fn blank_pair_learns_empty_mask() {
        // a uniform mid-grey image, so every layer sees a nonzero input
        let mut net = build_dual_encoder(tiny(), 2).unwrap();
        let img = Image::filled(16, 16, 3, 0.5);
        let pair = (img.clone(), MaskImage::filled(16, 16, 0.0));
        let cfg = SegTrainConfig {
            epochs: 50,
            lr: 0.01,
            ..SegTrainConfig::default()
        };
        let hist = train_segmenter(&mut net, &[pair], &cfg).unwrap();
        assert!(hist.last().unwrap() < hist.first().unwrap());
        assert!(predict_mask(&net, &img).unwrap().image().mean() < 0.1);
    }

    #[test]
    fn training_is_deterministic_and_rejects_soft_masks() {
        let data = synth::ellipse_dataset(4, 16, 0.05, 8);
        let cfg = SegTrainConfig {
            epochs: 3,
            batch_size: 3,
            seed: 4,
            ..SegTrainConfig::default()
        };
        let mut a = build_dual_encoder(tiny(), 1).unwrap();
        let mut b = a.clone();
        let ha = train_segmenter(&mut a, &data, &cfg).unwrap();
        let hb = train_segmenter(&mut b, &data, &cfg).unwrap();
        assert_eq!(ha, hb);
        assert_eq!(a.flat_values(), b.flat_values());
        let soft = (data[0].0.clone(), MaskImage::filled(16, 16, 0.3));
        assert!(train_segmenter(&mut a, &[soft], &cfg).is_err());
    }

    #[test]
    fn mask_application() {
        let img = Image::from_fn(20, 20, 3, |y, x, c| ((y + x + c) % 7) as f32 / 7.0);
        let ones = MaskImage::filled(20, 20, 1.0);
        assert_eq!(apply_mask(&img, &ones, MaskMode::Multiply).unwrap().image, img);
        let zeros = MaskImage::filled(20, 20, 0.0);
        let black = apply_mask(&img, &zeros, MaskMode::Multiply).unwrap().image;
        assert!(black.data().iter().all(|&v| v == 0.0));
        let half = MaskImage::from_fn(20, 20, |y, x| ((5..15).contains(&y) && (5..15).contains(&x)) as u8 as f32);
        let out = apply_mask(&img, &half, MaskMode::Multiply).unwrap().image;
        for y in 0..20 {
            for x in 0..20 {
                for c in 0..3 {
                    let want = if half.get(y, x) == 1.0 { img.get(y, x, c) } else { 0.0 };
                    assert_eq!(out.get(y, x, c), want);
                }
            }
        }
        let twice = apply_mask(&out, &half, MaskMode::Multiply).unwrap().image;
        assert_eq!(twice, out);
        let fb = apply_mask(&img, &zeros, MaskMode::Crop).unwrap();
        assert!(fb.fell_back);
        let cropped = apply_mask(&img, &half, MaskMode::Crop).unwrap();
        assert!(!cropped.fell_back);
        assert_eq!((cropped.image.height(), cropped.image.width()), (20, 20));
        assert!(apply_mask(&img, &MaskImage::filled(10, 20, 1.0), MaskMode::Multiply).is_err());
    }

    #[test]
    fn binarize_ties_to_one() {
        let m = MaskImage::from_fn(1, 3, |_, x| [0.49, 0.5, 0.9][x]);
        let b = m.binarize();
        assert_eq!(b.image().data(), &[0.0, 1.0, 1.0]);
        assert_eq!(m.area(), 2);
        assert_eq!(m.bounding_box(), Some((0, 1, 1, 3)));
    }

    #[test]
    fn dice_values() {
        let a = MaskImage::from_fn(4, 4, |y, _| (y < 2) as u8 as f32);
        let b = MaskImage::from_fn(4, 4, |y, _| (y < 1) as u8 as f32);
        assert!((dice_coefficient(&a, &b).unwrap() - 2.0 * 4.0 / 12.0).abs() < 1e-12);
        let e = MaskImage::filled(4, 4, 0.0);
        assert_eq!(dice_coefficient(&e, &e).unwrap(), 1.0);
    }
}

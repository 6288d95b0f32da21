use crate::{Error, Result};

use super::{Real, Tensor};

/// Spatial padding mode for convolutions.
///
/// `Same` pads with zeros so the output is `ceil(H / stride)` tall, putting
/// the odd pixel of padding at the bottom/right. `Valid` never pads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Clone, Copy, Debug)]
struct Geom {
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad_t: usize,
    pad_l: usize,
    oh: usize,
    ow: usize,
}

fn out_dim(len: usize, k: usize, stride: usize, pad: Padding) -> Result<(usize, usize)> {
    match pad {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if len < k {
                return Err(Error::Shape(format!(
                    "kernel {k} larger than input extent {len}"
                )));
            }
            Ok(((len - k) / stride + 1, 0))
        }
    }
}

fn geom(h: usize, w: usize, k: usize, stride: usize, pad: Padding) -> Result<Geom> {
    if stride == 0 || k == 0 {
        return Err(Error::Shape("stride and kernel size must be positive".into()));
    }
    let (oh, pad_t) = out_dim(h, k, stride, pad)?;
    let (ow, pad_l) = out_dim(w, k, stride, pad)?;
    Ok(Geom {
        h,
        w,
        k,
        stride,
        pad_t,
        pad_l,
        oh,
        ow,
    })
}

impl Geom {
    /// Input coordinate read by output `o` at kernel tap `t`, if inside.
    #[inline]
    fn src(o: usize, t: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let p = (o * stride + t) as isize - pad as isize;
        (p >= 0 && (p as usize) < len).then_some(p as usize)
    }
}

fn im2col<T: Real>(x: &[T], c: usize, g: &Geom, cols: &mut [T]) {
    let p = g.oh * g.ow;
    for ch in 0..c {
        let plane = &x[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let sy = Geom::src(oy, ki, g.stride, g.pad_t, g.h);
                    for ox in 0..g.ow {
                        dst[oy * g.ow + ox] = match (sy, Geom::src(ox, kj, g.stride, g.pad_l, g.w)) {
                            (Some(y), Some(xx)) => plane[y * g.w + xx],
                            _ => T::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<T: Real>(cols: &[T], c: usize, g: &Geom, dx: &mut [T]) {
    let p = g.oh * g.ow;
    for ch in 0..c {
        let plane = &mut dx[ch * g.h * g.w..(ch + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (ch * g.k + ki) * g.k + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.oh {
                    let Some(y) = Geom::src(oy, ki, g.stride, g.pad_t, g.h) else {
                        continue;
                    };
                    for ox in 0..g.ow {
                        if let Some(xx) = Geom::src(ox, kj, g.stride, g.pad_l, g.w) {
                            plane[y * g.w + xx] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

fn check_conv_shapes<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    depthwise: bool,
) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, wd) = x.dims4()?;
    let (o, wc, kh, kw) = w.dims4()?;
    if kh != kw {
        return Err(Error::Shape(format!("only square kernels, got {kh}x{kw}")));
    }
    if depthwise {
        if o != c || wc != 1 {
            return Err(Error::Shape(format!(
                "depthwise weight {:?} does not match {c} input channels",
                w.shape()
            )));
        }
    } else if wc != c {
        return Err(Error::Shape(format!(
            "weight expects {wc} input channels, input has {c}"
        )));
    }
    if b.shape() != [o] {
        return Err(Error::Shape(format!("bias {:?} for {o} filters", b.shape())));
    }
    Ok((n, c, h, wd, o, kh))
}

/// Cross-correlation of an NCHW batch with `O×C×k×k` filters plus bias.
pub fn conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, wd, o, k) = check_conv_shapes(x, w, b, false)?;
    let g = geom(h, wd, k, stride, pad)?;
    let p = g.oh * g.ow;
    let ckk = c * k * k;
    let mut out = Tensor::zeros(&[n, o, g.oh, g.ow]);
    let mut cols = vec![T::zero(); ckk * p];
    for i in 0..n {
        im2col(&x.data()[i * c * h * wd..(i + 1) * c * h * wd], c, &g, &mut cols);
        let y = &mut out.data_mut()[i * o * p..(i + 1) * o * p];
        for (oc, row) in y.chunks_mut(p).enumerate() {
            row.iter_mut().for_each(|v| *v = b.data()[oc]);
        }
        T::gemm(o, ckk, p, w.data(), false, &cols, false, y, true);
    }
    Ok(out)
}

/// Gradients of a convolution with respect to input, weight and bias.
#[derive(Clone, Debug)]
pub struct ConvGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let b = Tensor::zeros(&[w.shape()[0]]);
    let (n, c, h, wd, o, k) = check_conv_shapes(x, w, &b, false)?;
    let g = geom(h, wd, k, stride, pad)?;
    if dy.shape() != [n, o, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match output [{n}, {o}, {}, {}]",
            dy.shape(),
            g.oh,
            g.ow
        )));
    }
    let p = g.oh * g.ow;
    let ckk = c * k * k;
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[o]);
    let mut cols = vec![T::zero(); ckk * p];
    let mut dcols = vec![T::zero(); ckk * p];
    for i in 0..n {
        let xs = &x.data()[i * c * h * wd..(i + 1) * c * h * wd];
        let dys = &dy.data()[i * o * p..(i + 1) * o * p];
        im2col(xs, c, &g, &mut cols);
        T::gemm(o, p, ckk, dys, false, &cols, true, dw.data_mut(), true);
        for (oc, row) in dys.chunks(p).enumerate() {
            db.data_mut()[oc] += row.iter().copied().sum::<T>();
        }
        T::gemm(ckk, o, p, w.data(), true, dys, false, &mut dcols, false);
        col2im(&dcols, c, &g, &mut dx.data_mut()[i * c * h * wd..(i + 1) * c * h * wd]);
    }
    Ok(ConvGrads { dx, dw, db })
}

/// One `k×k` filter per channel (`C×1×k×k` weights), no channel mixing.
pub fn depthwise_conv2d<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    stride: usize,
    pad: Padding,
) -> Result<Tensor<T>> {
    let (n, c, h, wd, _, k) = check_conv_shapes(x, w, b, true)?;
    let g = geom(h, wd, k, stride, pad)?;
    let mut out = Tensor::zeros(&[n, c, g.oh, g.ow]);
    let od = out.data_mut();
    for i in 0..n {
        for ch in 0..c {
            let plane = &x.data()[(i * c + ch) * h * wd..(i * c + ch + 1) * h * wd];
            let ker = &w.data()[ch * k * k..(ch + 1) * k * k];
            let dst = &mut od[(i * c + ch) * g.oh * g.ow..(i * c + ch + 1) * g.oh * g.ow];
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = b.data()[ch];
                    for ki in 0..k {
                        let Some(y) = Geom::src(oy, ki, stride, g.pad_t, h) else {
                            continue;
                        };
                        for kj in 0..k {
                            if let Some(xx) = Geom::src(ox, kj, stride, g.pad_l, wd) {
                                acc += ker[ki * k + kj] * plane[y * wd + xx];
                            }
                        }
                    }
                    dst[oy * g.ow + ox] = acc;
                }
            }
        }
    }
    Ok(out)
}

pub fn depthwise_conv2d_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: Padding,
    dy: &Tensor<T>,
) -> Result<ConvGrads<T>> {
    let b = Tensor::zeros(&[w.shape()[0]]);
    let (n, c, h, wd, _, k) = check_conv_shapes(x, w, &b, true)?;
    let g = geom(h, wd, k, stride, pad)?;
    if dy.shape() != [n, c, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match depthwise output",
            dy.shape()
        )));
    }
    let mut dx = Tensor::zeros(x.shape());
    let mut dw = Tensor::zeros(w.shape());
    let mut db = Tensor::zeros(&[c]);
    for i in 0..n {
        for ch in 0..c {
            let base = (i * c + ch) * h * wd;
            let dbase = (i * c + ch) * g.oh * g.ow;
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let gy = dy.data()[dbase + oy * g.ow + ox];
                    db.data_mut()[ch] += gy;
                    for ki in 0..k {
                        let Some(y) = Geom::src(oy, ki, stride, g.pad_t, h) else {
                            continue;
                        };
                        for kj in 0..k {
                            if let Some(xx) = Geom::src(ox, kj, stride, g.pad_l, wd) {
                                let wi = ch * k * k + ki * k + kj;
                                dw.data_mut()[wi] += gy * x.data()[base + y * wd + xx];
                                dx.data_mut()[base + y * wd + xx] += gy * w.data()[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(ConvGrads { dx, dw, db })
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.max(T::zero()))
}

/// Gradient of ReLU given its input `x`; zero at and below 0.
pub fn relu_backward<T: Real>(x: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= T::zero() {
            *g = T::zero();
        }
    }
    dx
}

pub fn sigmoid<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

pub(crate) fn sigmoid_scalar<T: Real>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Gradient of the sigmoid given its output `y`.
pub fn sigmoid_backward<T: Real>(y: &Tensor<T>, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = dy.clone();
    for (g, &s) in dx.data_mut().iter_mut().zip(y.data()) {
        *g *= s * (T::one() - s);
    }
    dx
}

/// Flat input index of the maximum feeding each pooled output.
#[derive(Clone, Debug)]
pub struct PoolIndices {
    input_shape: Vec<usize>,
    argmax: Vec<usize>,
}

/// Max pooling over `k×k` windows without padding. Ties go to the first
/// position in row-major order.
pub fn max_pool2d<T: Real>(x: &Tensor<T>, k: usize, stride: usize) -> Result<(Tensor<T>, PoolIndices)> {
    let (n, c, h, w) = x.dims4()?;
    if k == 0 || stride == 0 {
        return Err(Error::Shape("pool window and stride must be positive".into()));
    }
    if k > h || k > w {
        return Err(Error::Shape(format!("pool window {k} larger than input {h}x{w}")));
    }
    let oh = (h - k) / stride + 1;
    let ow = (w - k) / stride + 1;
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    let mut argmax = Vec::with_capacity(n * c * oh * ow);
    let xd = x.data();
    for (plane, dst) in out.data_mut().chunks_mut(oh * ow).enumerate() {
        let base = plane * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    for kx in 0..k {
                        let idx = base + (oy * stride + ky) * w + ox * stride + kx;
                        if xd[idx] > xd[best] {
                            best = idx;
                        }
                    }
                }
                dst[oy * ow + ox] = xd[best];
                argmax.push(best);
            }
        }
    }
    Ok((
        out,
        PoolIndices {
            input_shape: x.shape().to_vec(),
            argmax,
        },
    ))
}

pub fn max_pool2d_backward<T: Real>(idx: &PoolIndices, dy: &Tensor<T>) -> Tensor<T> {
    let mut dx = Tensor::zeros(&idx.input_shape);
    for (&src, &g) in idx.argmax.iter().zip(dy.data()) {
        dx.data_mut()[src] += g;
    }
    dx
}

/// Spatial mean per channel: `N×C×H×W → N×C`.
pub fn global_avg_pool<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let inv = T::lit(1.0 / (h * w) as f64);
    let data = x
        .data()
        .chunks(h * w)
        .map(|plane| plane.iter().copied().sum::<T>() * inv)
        .collect();
    Tensor::new(&[n, c], data)
}

pub fn global_avg_pool_backward<T: Real>(input_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = input_shape[2] * input_shape[3];
    let inv = T::lit(1.0 / hw as f64);
    let mut dx = Tensor::zeros(input_shape);
    for (plane, &g) in dx.data_mut().chunks_mut(hw).zip(dy.data()) {
        plane.iter_mut().for_each(|v| *v = g * inv);
    }
    dx
}

/// `x·w + b` for `x: N×F`, `w: F×K`, `b: K`.
pub fn dense<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, f) = x.dims2()?;
    let (wf, k) = w.dims2()?;
    if wf != f || b.shape() != [k] {
        return Err(Error::Shape(format!(
            "dense: input {:?}, weight {:?}, bias {:?}",
            x.shape(),
            w.shape(),
            b.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, k]);
    for row in out.data_mut().chunks_mut(k) {
        row.copy_from_slice(b.data());
    }
    T::gemm(n, f, k, x.data(), false, w.data(), false, out.data_mut(), true);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct DenseGrads<T> {
    pub dx: Tensor<T>,
    pub dw: Tensor<T>,
    pub db: Tensor<T>,
}

pub fn dense_backward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, dy: &Tensor<T>) -> Result<DenseGrads<T>> {
    let (n, f) = x.dims2()?;
    let (_, k) = w.dims2()?;
    if dy.shape() != [n, k] {
        return Err(Error::Shape(format!("dense upstream gradient {:?}", dy.shape())));
    }
    let mut dw = Tensor::zeros(&[f, k]);
    T::gemm(f, n, k, x.data(), true, dy.data(), false, dw.data_mut(), false);
    let mut db = Tensor::zeros(&[k]);
    for row in dy.data().chunks(k) {
        for (a, &g) in db.data_mut().iter_mut().zip(row) {
            *a += g;
        }
    }
    let mut dx = Tensor::zeros(&[n, f]);
    T::gemm(n, k, f, dy.data(), false, w.data(), true, dx.data_mut(), false);
    Ok(DenseGrads { dx, dw, db })
}

/// Row-wise softmax of `N×K` logits, max-subtracted.
pub fn softmax<T: Real>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2()?;
    let mut out = logits.clone();
    for row in out.data_mut().chunks_mut(k) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Ok(out)
}

/// Nearest-neighbour 2× upsampling.
pub fn upsample_nearest2x<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = Tensor::zeros(&[n, c, oh, ow]);
    for (src, dst) in x.data().chunks(h * w).zip(out.data_mut().chunks_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = src[(y / 2) * w + xx / 2];
            }
        }
    }
    Ok(out)
}

pub fn upsample_nearest2x_backward<T: Real>(dy: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, oh, ow) = dy.dims4()?;
    let (h, w) = (oh / 2, ow / 2);
    let mut dx = Tensor::zeros(&[n, c, h, w]);
    for (src, dst) in dy.data().chunks(oh * ow).zip(dx.data_mut().chunks_mut(h * w)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[(y / 2) * w + xx / 2] += src[y * ow + xx];
            }
        }
    }
    Ok(dx)
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels<T: Real>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    let (n, _, h, w) = parts
        .first()
        .ok_or_else(|| Error::Shape("nothing to concatenate".into()))?
        .dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return Err(Error::Shape(format!(
                "cannot concatenate {:?} with batch {n} at {h}x{w}",
                p.shape()
            )));
        }
        total_c += pc;
    }
    let mut data = Vec::with_capacity(n * total_c * h * w);
    for i in 0..n {
        for p in parts {
            let per = p.shape()[1] * h * w;
            data.extend_from_slice(&p.data()[i * per..(i + 1) * per]);
        }
    }
    Tensor::new(&[n, total_c, h, w], data)
}

/// Inverse of [`concat_channels`]: splits a gradient by channel counts.
pub fn split_channels<T: Real>(x: &Tensor<T>, channels: &[usize]) -> Result<Vec<Tensor<T>>> {
    let (n, c, h, w) = x.dims4()?;
    if channels.iter().sum::<usize>() != c {
        return Err(Error::Shape(format!("cannot split {c} channels as {channels:?}")));
    }
    let mut out: Vec<Vec<T>> = channels.iter().map(|&k| Vec::with_capacity(n * k * h * w)).collect();
    for i in 0..n {
        let mut offset = i * c * h * w;
        for (buf, &k) in out.iter_mut().zip(channels) {
            buf.extend_from_slice(&x.data()[offset..offset + k * h * w]);
            offset += k * h * w;
        }
    }
    out.into_iter()
        .zip(channels)
        .map(|(d, &k)| Tensor::new(&[n, k, h, w], d))
        .collect()
}

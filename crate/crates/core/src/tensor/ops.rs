//! Forward operators. Every operator validates shapes, reports its cost to
//! the active tally (see [`super::tally`]) and maps all-finite inputs to
//! all-finite outputs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::tally;
use super::Tensor;

/// Output spatial size of a convolution/pooling window sweep.
pub fn conv_out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if input + 2 * pad < k {
        return Err(Error::shape(
            "conv2d",
            format!("window {k} larger than padded input {input}+2*{pad}"),
        ));
    }
    Ok((input + 2 * pad - k) / stride + 1)
}

/// C[m x n] += A[m x k] * B[k x n], all row-major. The k-unrolled inner
/// loop over columns is what the autovectorizer turns into FMA lanes.
fn matmul_acc<T: Scalar>(a: &[T], m: usize, kk: usize, b: &[T], n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * kk);
    debug_assert_eq!(b.len(), kk * n);
    debug_assert_eq!(c.len(), m * n);
    // Register-tiled microkernel: an MR x NR accumulator block is held in
    // registers across the whole k loop, so each b element is loaded once
    // per MR output rows instead of once per row.
    const MR: usize = 4;
    const NR: usize = 16;
    let mut i = 0;
    while i < m {
        let ir = (m - i).min(MR);
        let mut j = 0;
        while j < n {
            let jr = (n - j).min(NR);
            if ir == MR && jr == NR {
                let mut acc = [[T::zero(); NR]; MR];
                for k in 0..kk {
                    let brow: &[T; NR] = b[k * n + j..k * n + j + NR].try_into().unwrap();
                    for (r, accr) in acc.iter_mut().enumerate() {
                        let av = a[(i + r) * kk + k];
                        for jj in 0..NR {
                            accr[jj] = accr[jj] + av * brow[jj];
                        }
                    }
                }
                for (r, accr) in acc.iter().enumerate() {
                    let crow = &mut c[(i + r) * n + j..(i + r) * n + j + NR];
                    for (cv, av) in crow.iter_mut().zip(accr) {
                        *cv = *cv + *av;
                    }
                }
            } else {
                // edge tiles: plain dot products
                for r in 0..ir {
                    let arow = &a[(i + r) * kk..(i + r + 1) * kk];
                    for jj in j..j + jr {
                        let mut s = T::zero();
                        for (k, av) in arow.iter().enumerate() {
                            s = s + *av * b[k * n + jj];
                        }
                        c[(i + r) * n + jj] = c[(i + r) * n + jj] + s;
                    }
                }
            }
            j += jr;
        }
        i += ir;
    }
}

/// Unfolds one image's group slice into a (cin_g*kh*kw) x (ho*wo) matrix.
#[allow(clippy::too_many_arguments)]
pub(crate) fn im2col<T: Scalar>(
    x: &Tensor<T>,
    n: usize,
    c0: usize,
    cin_g: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
    col: &mut [T],
) {
    let (kh, kw) = k;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (ho, wo) = out;
    let (h, w) = (x.h(), x.w());
    let p = ho * wo;
    debug_assert_eq!(col.len(), cin_g * kh * kw * p);
    for cg in 0..cin_g {
        let xc = &x.data()[x.idx(n, c0 + cg, 0, 0)..x.idx(n, c0 + cg, 0, 0) + h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &mut col[((cg * kh + ki) * kw + kj) * p..((cg * kh + ki) * kw + kj + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    let dst = &mut row[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= h as isize {
                        dst.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * w..(ii as usize + 1) * w];
                    for (oj, d) in dst.iter_mut().enumerate() {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        *d = if jj < 0 || jj >= w as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Reverse of [`im2col`]: scatter-adds a column matrix back into an image.
#[allow(clippy::too_many_arguments)]
pub(crate) fn col2im_add<T: Scalar>(
    col: &[T],
    dx: &mut Tensor<T>,
    n: usize,
    c0: usize,
    cin_g: usize,
    k: (usize, usize),
    stride: (usize, usize),
    pad: (usize, usize),
    out: (usize, usize),
) {
    let (kh, kw) = k;
    let (sh, sw) = stride;
    let (ph, pw) = pad;
    let (ho, wo) = out;
    let (h, w) = (dx.h(), dx.w());
    let p = ho * wo;
    for cg in 0..cin_g {
        let base = dx.idx(n, c0 + cg, 0, 0);
        for ki in 0..kh {
            for kj in 0..kw {
                let row = &col[((cg * kh + ki) * kw + kj) * p..((cg * kh + ki) * kw + kj + 1) * p];
                for oi in 0..ho {
                    let ii = (oi * sh + ki) as isize - ph as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * sw + kj) as isize - pw as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        let di = base + ii as usize * w + jj as usize;
                        dx.data_mut()[di] += row[oi * wo + oj];
                    }
                }
            }
        }
    }
}

pub(crate) struct ConvGeom {
    pub cin_g: usize,
    pub cout_g: usize,
    pub ho: usize,
    pub wo: usize,
}

pub(crate) fn conv_geometry<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> Result<ConvGeom> {
    let [_, cin, h, ww] = x.dims();
    let [cout, cin_g, kh, kw] = w.dims();
    if groups == 0 {
        return Err(Error::shape("conv2d", "groups must be positive"));
    }
    if cin % groups != 0 || cout % groups != 0 {
        return Err(Error::shape(
            "conv2d",
            format!("cin {cin} / cout {cout} not divisible by groups {groups}"),
        ));
    }
    if cin_g != cin / groups {
        return Err(Error::shape(
            "conv2d",
            format!("weight cin/groups {cin_g} != input cin {cin} / groups {groups}"),
        ));
    }
    if stride.0 == 0 || stride.1 == 0 {
        return Err(Error::shape("conv2d", "stride must be positive"));
    }
    if let Some(b) = bias {
        if b.numel() != cout {
            return Err(Error::shape(
                "conv2d",
                format!("bias length {} != cout {cout}", b.numel()),
            ));
        }
    }
    let ho = conv_out_dim(h, kh, stride.0, pad.0)?;
    let wo = conv_out_dim(ww, kw, stride.1, pad.1)?;
    Ok(ConvGeom {
        cin_g,
        cout_g: cout / groups,
        ho,
        wo,
    })
}

/// 2-D cross-correlation with zero padding.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
) -> Result<Tensor<T>> {
    let g = conv_geometry(x, w, bias, stride, pad, groups)?;
    let [n, cin, _, _] = x.dims();
    let [cout, _, kh, kw] = w.dims();
    let (ho, wo) = (g.ho, g.wo);
    let p = ho * wo;

    let macs = (n * cout * g.cin_g * kh * kw * p) as u64;
    let bias_flops = if bias.is_some() { (n * cout * p) as u64 } else { 0 };
    tally::record(
        || format!("conv2d {cout}x{}x{kh}x{kw} g{groups} -> {ho}x{wo}", g.cin_g),
        macs,
        2 * macs + bias_flops,
    );

    let mut out = Tensor::zeros([n, cout, ho, wo]);
    if let Some(b) = bias {
        for ni in 0..n {
            for oc in 0..cout {
                let s = out.idx(ni, oc, 0, 0);
                out.data_mut()[s..s + p].fill(b.data()[oc]);
            }
        }
    }

    // Depthwise path: per kernel tap, a strided saxpy over the valid part
    // of each output row (contiguous when the column stride is 1).
    if groups == cin && g.cin_g == 1 {
        let m = cout / cin; // channel multiplier, 1 for plain depthwise
        let (sh, sw) = stride;
        let (ph, pw) = pad;
        let (h, w2) = (x.h(), x.w());
        for ni in 0..n {
            for oc in 0..cout {
                let ic = oc / m;
                let xb = x.idx(ni, ic, 0, 0);
                let wk = &w.data()[oc * kh * kw..(oc + 1) * kh * kw];
                let ob = out.idx(ni, oc, 0, 0);
                for oi in 0..ho {
                    for ki in 0..kh {
                        let ii = (oi * sh + ki) as isize - ph as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        let xrow =
                            &x.data()[xb + ii as usize * w2..xb + (ii as usize + 1) * w2];
                        let orow = &mut out.data_mut()[ob + oi * wo..ob + (oi + 1) * wo];
                        for kj in 0..kw {
                            // output columns oj with 0 <= oj*sw + kj - pw < w2
                            if kj > w2 - 1 + pw {
                                continue;
                            }
                            let lo = if pw > kj { (pw - kj).div_ceil(sw) } else { 0 };
                            let hi = ((w2 - 1 + pw - kj) / sw).min(wo - 1);
                            if lo > hi {
                                continue;
                            }
                            let wv = wk[ki * kw + kj];
                            if sw == 1 {
                                let xoff = lo + kj - pw;
                                let xs = &xrow[xoff..xoff + (hi - lo + 1)];
                                for (o, xv) in orow[lo..=hi].iter_mut().zip(xs) {
                                    *o = *o + wv * *xv;
                                }
                            } else {
                                for oj in lo..=hi {
                                    orow[oj] = orow[oj] + wv * xrow[oj * sw + kj - pw];
                                }
                            }
                        }
                    }
                }
            }
        }
        return Ok(out);
    }

    // 1x1 stride-1 unpadded convs are a plain matmul over the input as-is.
    let direct_1x1 = kh == 1 && kw == 1 && stride == (1, 1) && pad == (0, 0);
    let kdim = g.cin_g * kh * kw;
    let mut col = if direct_1x1 { Vec::new() } else { vec![T::zero(); kdim * p] };
    for ni in 0..n {
        for gi in 0..groups {
            let wslice = &w.data()[gi * g.cout_g * kdim..(gi + 1) * g.cout_g * kdim];
            let ob = out.idx(ni, gi * g.cout_g, 0, 0);
            let oslice = &mut out.data_mut()[ob..ob + g.cout_g * p];
            if direct_1x1 {
                let xb = x.idx(ni, gi * g.cin_g, 0, 0);
                let xslice = &x.data()[xb..xb + g.cin_g * p];
                matmul_acc(wslice, g.cout_g, kdim, xslice, p, oslice);
            } else {
                im2col(x, ni, gi * g.cin_g, g.cin_g, (kh, kw), stride, pad, (ho, wo), &mut col);
                matmul_acc(wslice, g.cout_g, kdim, &col, p, oslice);
            }
        }
    }
    Ok(out)
}

fn bn_check<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mu: &Tensor<T>,
    var: &Tensor<T>,
) -> Result<()> {
    let c = x.c();
    for (name, v) in [("gamma", gamma), ("beta", beta), ("mu", mu), ("var", var)] {
        if v.numel() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{name} length {} != channels {c}", v.numel()),
            ));
        }
    }
    if var.data().iter().any(|v| *v < T::zero()) {
        return Err(Error::InvalidInput("batchnorm variance must be >= 0".into()));
    }
    Ok(())
}

/// Inference-mode batch normalization: y = gamma*(x-mu)/sqrt(var+eps) + beta.
pub fn batchnorm_infer<T: Scalar>(
    x: &Tensor<T>,
    gamma: &Tensor<T>,
    beta: &Tensor<T>,
    mu: &Tensor<T>,
    var: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    bn_check(x, gamma, beta, mu, var)?;
    tally::record(|| format!("batchnorm c{}", x.c()), 0, 2 * x.numel() as u64);
    let [n, c, h, w] = x.dims();
    let hw = h * w;
    let mut out = Tensor::zeros([n, c, h, w]);
    for ci in 0..c {
        let inv = T::one() / (var.data()[ci] + eps).sqrt();
        let scale = gamma.data()[ci] * inv;
        let shift = beta.data()[ci] - mu.data()[ci] * scale;
        for ni in 0..n {
            let b = x.idx(ni, ci, 0, 0);
            let src = &x.data()[b..b + hw];
            let dst = &mut out.data_mut()[b..b + hw];
            for (d, s) in dst.iter_mut().zip(src) {
                *d = *s * scale + shift;
            }
        }
    }
    Ok(out)
}

pub fn relu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    tally::record(|| "relu".into(), 0, x.numel() as u64);
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn relu6<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    tally::record(|| "relu6".into(), 0, x.numel() as u64);
    let six = T::from_f64(6.0);
    x.map(|v| v.max(T::zero()).min(six))
}

pub fn sigmoid<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    tally::record(|| "sigmoid".into(), 0, 4 * x.numel() as u64);
    x.map(sigmoid_scalar)
}

#[inline(always)]
pub fn sigmoid_scalar<T: Scalar>(v: T) -> T {
    // Split on sign so exp never overflows.
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Softmax across the channel axis, independently per (n, h, w) position.
pub fn softmax_channels<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    tally::record(|| "softmax_channels".into(), 0, 5 * x.numel() as u64);
    let [n, c, h, w] = x.dims();
    let mut out = Tensor::zeros([n, c, h, w]);
    for ni in 0..n {
        for hi in 0..h {
            for wi in 0..w {
                let mut m = x.at(ni, 0, hi, wi);
                for ci in 1..c {
                    m = m.max(x.at(ni, ci, hi, wi));
                }
                let mut sum = T::zero();
                for ci in 0..c {
                    let e = (x.at(ni, ci, hi, wi) - m).exp();
                    out.set(ni, ci, hi, wi, e);
                    sum += e;
                }
                for ci in 0..c {
                    let v = out.at(ni, ci, hi, wi) / sum;
                    out.set(ni, ci, hi, wi, v);
                }
            }
        }
    }
    out
}

pub fn elementwise_add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.same_shape(b, "elementwise_add")?;
    tally::record(|| "add".into(), 0, a.numel() as u64);
    let mut out = a.clone();
    for (d, s) in out.data_mut().iter_mut().zip(b.data()) {
        *d += *s;
    }
    Ok(out)
}

pub fn concat_channels<T: Scalar>(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
    if parts.is_empty() {
        return Err(Error::shape("concat_channels", "no operands"));
    }
    let [n, _, h, w] = parts[0].dims();
    for p in parts.iter().skip(1) {
        if p.n() != n || p.h() != h || p.w() != w {
            return Err(Error::shape(
                "concat_channels",
                format!("operands disagree on n/h/w: {:?} vs {:?}", parts[0].dims(), p.dims()),
            ));
        }
    }
    tally::record(|| "concat".into(), 0, 0);
    let ctot: usize = parts.iter().map(|p| p.c()).sum();
    let mut out = Tensor::zeros([n, ctot, h, w]);
    let hw = h * w;
    for ni in 0..n {
        let mut co = 0;
        for p in parts {
            let src = &p.data()[p.idx(ni, 0, 0, 0)..p.idx(ni, 0, 0, 0) + p.c() * hw];
            let db = out.idx(ni, co, 0, 0);
            out.data_mut()[db..db + p.c() * hw].copy_from_slice(src);
            co += p.c();
        }
    }
    Ok(out)
}

/// Max pooling; padded positions are ignored (never win the max).
/// Returns the flat input index of each winner for the backward pass.
pub fn maxpool_with_argmax<T: Scalar>(
    x: &Tensor<T>,
    k: usize,
    s: usize,
    pad: usize,
) -> Result<(Tensor<T>, Vec<u32>)> {
    if k == 0 || s == 0 {
        return Err(Error::shape("maxpool", "k and s must be positive"));
    }
    if x.numel() > u32::MAX as usize {
        return Err(Error::shape("maxpool", "tensor too large for argmax index"));
    }
    let [n, c, h, w] = x.dims();
    let ho = conv_out_dim(h, k, s, pad)?;
    let wo = conv_out_dim(w, k, s, pad)?;
    tally::record(
        || format!("maxpool k{k}s{s}"),
        0,
        (k * k * n * c * ho * wo) as u64,
    );
    let mut out = Tensor::zeros([n, c, ho, wo]);
    let mut arg = vec![0u32; out.numel()];
    for ni in 0..n {
        for ci in 0..c {
            let base = x.idx(ni, ci, 0, 0);
            let plane = &x.data()[base..base + h * w];
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut best = T::neg_infinity();
                    let mut bi = 0usize;
                    for ki in 0..k {
                        let ii = (oi * s + ki) as isize - pad as isize;
                        if ii < 0 || ii >= h as isize {
                            continue;
                        }
                        for kj in 0..k {
                            let jj = (oj * s + kj) as isize - pad as isize;
                            if jj < 0 || jj >= w as isize {
                                continue;
                            }
                            let v = plane[ii as usize * w + jj as usize];
                            if v > best {
                                best = v;
                                bi = base + ii as usize * w + jj as usize;
                            }
                        }
                    }
                    let o = out.idx(ni, ci, oi, oj);
                    out.data_mut()[o] = best;
                    arg[o] = bi as u32;
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool<T: Scalar>(x: &Tensor<T>, k: usize, s: usize, pad: usize) -> Result<Tensor<T>> {
    maxpool_with_argmax(x, k, s, pad).map(|(t, _)| t)
}

/// Average pooling over full (unpadded) windows.
pub fn avgpool<T: Scalar>(x: &Tensor<T>, k: usize, s: usize) -> Result<Tensor<T>> {
    if k == 0 || s == 0 {
        return Err(Error::shape("avgpool", "k and s must be positive"));
    }
    let [n, c, h, w] = x.dims();
    let ho = conv_out_dim(h, k, s, 0)?;
    let wo = conv_out_dim(w, k, s, 0)?;
    tally::record(
        || format!("avgpool k{k}s{s}"),
        0,
        (k * k * n * c * ho * wo) as u64,
    );
    let inv = T::one() / T::from_usize(k * k);
    let mut out = Tensor::zeros([n, c, ho, wo]);
    for ni in 0..n {
        for ci in 0..c {
            for oi in 0..ho {
                for oj in 0..wo {
                    let mut acc = T::zero();
                    for ki in 0..k {
                        for kj in 0..k {
                            acc += x.at(ni, ci, oi * s + ki, oj * s + kj);
                        }
                    }
                    out.set(ni, ci, oi, oj, acc * inv);
                }
            }
        }
    }
    Ok(out)
}

pub fn global_avgpool<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let [n, c, h, w] = x.dims();
    tally::record(|| "global_avgpool".into(), 0, (n * c * h * w) as u64);
    let inv = T::one() / T::from_usize(h * w);
    Tensor::from_fn([n, c, 1, 1], |ni, ci, _, _| {
        let b = x.idx(ni, ci, 0, 0);
        let mut acc = T::zero();
        for v in &x.data()[b..b + h * w] {
            acc += *v;
        }
        acc * inv
    })
}

/// Source coordinate and blend weights for one output row/column under
/// half-pixel-center sampling (align_corners = false).
#[inline]
pub(crate) fn bilinear_axis(o: usize, in_dim: usize, out_dim: usize) -> (usize, usize, f64) {
    let scale = in_dim as f64 / out_dim as f64;
    let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_dim - 1);
    let i1 = (i0 + 1).min(in_dim - 1);
    let frac = src - i0 as f64;
    (i0, i1, frac.clamp(0.0, 1.0))
}

/// Half-pixel-center bilinear interpolation to (out_h, out_w).
pub fn resize_bilinear<T: Scalar>(x: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    if out_h == 0 || out_w == 0 {
        return Err(Error::shape("resize_bilinear", "output dims must be >= 1"));
    }
    let [n, c, h, w] = x.dims();
    tally::record(
        || format!("resize_bilinear {h}x{w}->{out_h}x{out_w}"),
        0,
        8 * (n * c * out_h * out_w) as u64,
    );
    if out_h == h && out_w == w {
        return Ok(x.clone());
    }
    let rows: Vec<(usize, usize, f64)> = (0..out_h).map(|o| bilinear_axis(o, h, out_h)).collect();
    let cols: Vec<(usize, usize, f64)> = (0..out_w).map(|o| bilinear_axis(o, w, out_w)).collect();
    let mut out = Tensor::zeros([n, c, out_h, out_w]);
    for ni in 0..n {
        for ci in 0..c {
            let b = x.idx(ni, ci, 0, 0);
            let plane = &x.data()[b..b + h * w];
            let ob = out.idx(ni, ci, 0, 0);
            for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                let fi = T::from_f64(fi);
                let r0 = &plane[i0 * w..i0 * w + w];
                let r1 = &plane[i1 * w..i1 * w + w];
                let dst = &mut out.data_mut()[ob + oi * out_w..ob + (oi + 1) * out_w];
                for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
                    let fj = T::from_f64(fj);
                    let top = r0[j0] + (r0[j1] - r0[j0]) * fj;
                    let bot = r1[j0] + (r1[j1] - r1[j0]) * fj;
                    dst[oj] = top + (bot - top) * fi;
                }
            }
        }
    }
    Ok(out)
}

/// Fast normalized fusion: O = sum_i w_i/(eps + sum_j w_j) * I_i with
/// weights clamped nonnegative by relu.
pub fn weighted_merge<T: Scalar>(
    weights: &Tensor<T>,
    inputs: &[&Tensor<T>],
    eps: T,
) -> Result<Tensor<T>> {
    let k = inputs.len();
    if k == 0 {
        return Err(Error::shape("weighted_merge", "no inputs"));
    }
    if weights.numel() != k {
        return Err(Error::shape(
            "weighted_merge",
            format!("{} weights for {k} inputs", weights.numel()),
        ));
    }
    for i in 1..k {
        inputs[0].same_shape(inputs[i], "weighted_merge")?;
    }
    tally::record(
        || format!("weighted_merge k{k}"),
        0,
        (2 * k - 1) as u64 * inputs[0].numel() as u64 + 3 * k as u64,
    );
    let coefs = merge_coefficients(weights, eps);
    let mut out = Tensor::zeros(inputs[0].dims());
    for (i, inp) in inputs.iter().enumerate() {
        let ci = coefs[i];
        for (d, s) in out.data_mut().iter_mut().zip(inp.data()) {
            *d += ci * *s;
        }
    }
    Ok(out)
}

pub(crate) fn merge_coefficients<T: Scalar>(weights: &Tensor<T>, eps: T) -> Vec<T> {
    let relu_w: Vec<T> = weights
        .data()
        .iter()
        .map(|&v| if v > T::zero() { v } else { T::zero() })
        .collect();
    let denom = relu_w.iter().fold(eps, |a, &b| a + b);
    relu_w.iter().map(|&v| v / denom).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::tally::tally_scope;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn randn(dims: [usize; 4], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(dims, |_, _, _, _| rng.gen_range(-1.0..1.0))
    }

    /// Direct 6-loop convolution, the independent oracle for conv2d.
    pub(crate) fn conv2d_naive(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        bias: Option<&Tensor<f64>>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Tensor<f64> {
        let [n, cin, h, ww] = x.dims();
        let [cout, cin_g, kh, kw] = w.dims();
        let ho = (h + 2 * pad.0 - kh) / stride.0 + 1;
        let wo = (ww + 2 * pad.1 - kw) / stride.1 + 1;
        let cout_g = cout / groups;
        let _ = cin;
        let mut out = Tensor::zeros([n, cout, ho, wo]);
        for ni in 0..n {
            for oc in 0..cout {
                let gi = oc / cout_g;
                for oi in 0..ho {
                    for oj in 0..wo {
                        let mut acc = bias.map(|b| b.data()[oc]).unwrap_or(0.0);
                        for cg in 0..cin_g {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let ii = (oi * stride.0 + ki) as isize - pad.0 as isize;
                                    let jj = (oj * stride.1 + kj) as isize - pad.1 as isize;
                                    if ii < 0 || jj < 0 || ii >= h as isize || jj >= ww as isize {
                                        continue;
                                    }
                                    acc += w.at(oc, cg, ki, kj)
                                        * x.at(ni, gi * cin_g + cg, ii as usize, jj as usize);
                                }
                            }
                        }
                        out.set(ni, oc, oi, oj, acc);
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_single_multiply() {
        let x = Tensor::new([1, 1, 1, 1], vec![3.0f64]).unwrap();
        let w = Tensor::new([1, 1, 1, 1], vec![2.0f64]).unwrap();
        let (y, t) = tally_scope(|| conv2d(&x, &w, None, (1, 1), (0, 0), 1).unwrap());
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.item(), 6.0);
        assert_eq!(t.macs, 1);
        assert_eq!(t.flops, 2);
    }

    #[test]
    fn conv_mac_count_closed_form() {
        let x = Tensor::<f32>::zeros([1, 3, 64, 64]);
        let w = Tensor::<f32>::zeros([16, 3, 3, 3]);
        let (y, t) = tally_scope(|| conv2d(&x, &w, None, (1, 1), (1, 1), 1).unwrap());
        assert_eq!(y.dims(), [1, 16, 64, 64]);
        assert_eq!(t.macs, 64 * 64 * 16 * 3 * 3 * 3);
        assert_eq!(t.macs, 1_769_472);
        assert_eq!(t.flops, 3_538_944);
    }

    #[test]
    fn conv_matches_naive_oracle() {
        for (seed, stride, pad, groups, bias) in [
            (1u64, (2, 2), (1, 1), 1, false),
            (2, (1, 1), (0, 0), 1, true),
            (3, (1, 2), (2, 1), 2, true),
            (4, (1, 1), (1, 1), 4, false),
        ] {
            let x = randn([1, 4, 8, 8], seed);
            let w = randn([8, 4 / groups, 3, 3], seed + 100);
            let b = randn([1, 8, 1, 1], seed + 200);
            let bia = bias.then_some(&b);
            let got = conv2d(&x, &w, bia, stride, pad, groups).unwrap();
            let want = conv2d_naive(&x, &w, bia, stride, pad, groups);
            assert_eq!(got.dims(), want.dims());
            for (g, w_) in got.data().iter().zip(want.data()) {
                assert!((g - w_).abs() <= 1e-5 * w_.abs().max(1.0), "{g} vs {w_}");
            }
        }
    }

    #[test]
    fn conv_depthwise_matches_naive() {
        let x = randn([2, 6, 9, 7], 5);
        let w = randn([6, 1, 3, 3], 6);
        let got = conv2d(&x, &w, None, (2, 1), (1, 1), 6).unwrap();
        let want = conv2d_naive(&x, &w, None, (2, 1), (1, 1), 6);
        for (g, w_) in got.data().iter().zip(want.data()) {
            assert!((g - w_).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_shape_errors_are_structured() {
        let x = Tensor::<f32>::zeros([1, 3, 4, 4]);
        let w = Tensor::<f32>::zeros([8, 4, 3, 3]);
        let e = conv2d(&x, &w, None, (1, 1), (0, 0), 1).unwrap_err();
        assert!(e.to_string().contains("cin"), "{e}");
        // window larger than padded input
        let w2 = Tensor::<f32>::zeros([8, 3, 7, 7]);
        assert!(conv2d(&x, &w2, None, (1, 1), (0, 0), 1).is_err());
    }

    #[test]
    fn conv_linearity_in_input() {
        let x = randn([1, 3, 6, 6], 7);
        let w = randn([4, 3, 3, 3], 8);
        let xs = x.map(|v| v * 3.5);
        let y1 = conv2d(&x, &w, None, (1, 1), (1, 1), 1).unwrap();
        let y2 = conv2d(&xs, &w, None, (1, 1), (1, 1), 1).unwrap();
        for (a, b) in y1.data().iter().zip(y2.data()) {
            assert!((a * 3.5 - b).abs() <= 1e-5 * b.abs().max(1e-6));
        }
    }

    #[test]
    fn relu_definition() {
        let x = Tensor::new([1, 3, 1, 1], vec![-1.0f32, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(
            relu6(&Tensor::new([1, 2, 1, 1], vec![7.5f32, -3.0]).unwrap()).data(),
            &[6.0, 0.0]
        );
    }

    #[test]
    fn batchnorm_identity_case() {
        let x = randn([1, 3, 4, 4], 9);
        let ones = Tensor::from_channel_vec(vec![1.0; 3]);
        let zeros = Tensor::from_channel_vec(vec![0.0; 3]);
        let y = batchnorm_infer(&x, &ones, &zeros, &zeros, &ones, 0.0).unwrap();
        for (a, b) in x.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn batchnorm_rejects_negative_variance() {
        let x = Tensor::<f32>::zeros([1, 1, 2, 2]);
        let v = Tensor::from_channel_vec(vec![-1.0f32]);
        let one = Tensor::from_channel_vec(vec![1.0f32]);
        let zero = Tensor::from_channel_vec(vec![0.0f32]);
        assert!(batchnorm_infer(&x, &one, &zero, &zero, &v, 1e-5).is_err());
    }

    #[test]
    fn softmax_channels_sums_to_one() {
        let x = randn([2, 2, 5, 5], 10);
        // direct exp-normalize oracle
        let y = softmax_channels(&x);
        for n in 0..2 {
            for h in 0..5 {
                for w in 0..5 {
                    let e0 = x.at(n, 0, h, w).exp();
                    let e1 = x.at(n, 1, h, w).exp();
                    let want0 = e0 / (e0 + e1);
                    assert!((y.at(n, 0, h, w) - want0).abs() < 1e-9);
                    let s: f64 = y.at(n, 0, h, w) + y.at(n, 1, h, w);
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn resize_constant_field_stays_constant() {
        let x = Tensor::new([1, 1, 1, 1], vec![5.0f32]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        assert!(y.data().iter().all(|&v| v == 5.0));
    }

    #[test]
    fn resize_identity_is_bitwise() {
        let x = randn([1, 2, 3, 5], 11);
        let y = resize_bilinear(&x, 3, 5).unwrap();
        assert_eq!(x.data(), y.data());
    }

    #[test]
    fn resize_matches_scalar_oracle() {
        let x = Tensor::new([1, 1, 2, 2], vec![0.0f64, 1.0, 2.0, 3.0]).unwrap();
        let y = resize_bilinear(&x, 4, 4).unwrap();
        // hand-coded per-pixel half-pixel-center interpolation
        let sample = |oi: usize, oj: usize| -> f64 {
            let s = 2.0 / 4.0;
            let fi = ((oi as f64 + 0.5) * s - 0.5).clamp(0.0, 1.0);
            let fj = ((oj as f64 + 0.5) * s - 0.5).clamp(0.0, 1.0);
            let (i0, i1) = (fi.floor() as usize, (fi.floor() as usize + 1).min(1));
            let (j0, j1) = (fj.floor() as usize, (fj.floor() as usize + 1).min(1));
            let (di, dj) = (fi - i0 as f64, fj - j0 as f64);
            let top = x.at(0, 0, i0, j0) * (1.0 - dj) + x.at(0, 0, i0, j1) * dj;
            let bot = x.at(0, 0, i1, j0) * (1.0 - dj) + x.at(0, 0, i1, j1) * dj;
            top * (1.0 - di) + bot * di
        };
        for oi in 0..4 {
            for oj in 0..4 {
                assert!((y.at(0, 0, oi, oj) - sample(oi, oj)).abs() < 1e-6);
            }
        }
        // corners replicate, center blends
        assert!((y.at(0, 0, 0, 0) - 0.0).abs() < 1e-12);
        assert!((y.at(0, 0, 3, 3) - 3.0).abs() < 1e-12);
    }

    #[test]
    fn maxpool_padded_windows_ignore_padding() {
        let x = Tensor::new([1, 1, 2, 2], vec![-5.0f32, -6.0, -7.0, -8.0]).unwrap();
        let (y, arg) = maxpool_with_argmax(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), [1, 1, 1, 1]);
        assert_eq!(y.item(), -5.0);
        assert_eq!(arg[0], 0);
    }

    #[test]
    fn avgpool_and_global() {
        let x = Tensor::new([1, 1, 2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(avgpool(&x, 2, 2).unwrap().item(), 2.5);
        assert_eq!(global_avgpool(&x).item(), 2.5);
    }

    #[test]
    fn merge_weight_semantics() {
        let a = Tensor::new([1, 1, 1, 2], vec![2.0f64, 4.0]).unwrap();
        let b = Tensor::new([1, 1, 1, 2], vec![6.0f64, 8.0]).unwrap();
        // equal weights with eps -> 0 give the arithmetic mean
        let w = Tensor::new([2, 1, 1, 1], vec![1.0f64, 1.0]).unwrap();
        let y = weighted_merge(&w, &[&a, &b], 0.0).unwrap();
        assert!((y.data()[0] - 4.0).abs() < 1e-12);
        assert!((y.data()[1] - 6.0).abs() < 1e-12);
        // zero/one weights pass the weighted input through exactly
        let w01 = Tensor::new([2, 1, 1, 1], vec![0.0f64, 1.0]).unwrap();
        let y01 = weighted_merge(&w01, &[&a, &b], 0.0).unwrap();
        assert_eq!(y01.data(), b.data());
    }

    #[test]
    fn merge_coefficients_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..200 {
            let k = rng.gen_range(2..5usize);
            let w = Tensor::new(
                [k, 1, 1, 1],
                (0..k).map(|_| rng.gen_range(-1.0..5.0f64)).collect(),
            )
            .unwrap();
            let coefs = merge_coefficients(&w, 1e-4);
            let sum: f64 = coefs.iter().sum();
            assert!(sum <= 1.0 + 1e-12);
            for c in coefs {
                assert!((0.0..=1.0).contains(&c));
            }
        }
    }

    #[test]
    fn tally_determinism() {
        let x = randn([1, 3, 16, 16], 12);
        let w = randn([8, 3, 3, 3], 13);
        let run = || {
            tally_scope(|| {
                let y = conv2d(&x, &w, None, (1, 1), (1, 1), 1).unwrap();
                let y = relu(&y);
                resize_bilinear(&y, 32, 32).unwrap()
            })
            .1
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn conv_shape_law_property() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..50 {
            let h = rng.gen_range(1..20usize);
            let w = rng.gen_range(1..20usize);
            let k = rng.gen_range(1..6usize);
            let s = rng.gen_range(1..4usize);
            let p = rng.gen_range(0..3usize);
            if h + 2 * p < k || w + 2 * p < k {
                continue;
            }
            let x = Tensor::<f32>::zeros([1, 2, h, w]);
            let wt = Tensor::<f32>::zeros([3, 2, k, k]);
            let y = conv2d(&x, &wt, None, (s, s), (p, p), 1).unwrap();
            assert_eq!(y.h(), (h + 2 * p - k) / s + 1);
            assert_eq!(y.w(), (w + 2 * p - k) / s + 1);
        }
    }
}

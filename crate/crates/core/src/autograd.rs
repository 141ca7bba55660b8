//! Reverse-mode gradients for the exact operator set the network uses.
//! A [`Tape`] records each executed op together with whatever the backward
//! pass needs; [`Tape::backward`] composes vector-Jacobian products over
//! the recorded graph. This is deliberately not a general autograd for
//! arbitrary programs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::{self, bilinear_axis, col2im_add, conv_geometry, im2col};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub usize);

enum BackOp<T: Scalar> {
    Leaf,
    NonDifferentiable(&'static str),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mu: Tensor<T>,
        inv_std: Tensor<T>,
    },
    Relu {
        x: Var,
    },
    Relu6 {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    SoftmaxChannels {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Concat {
        parts: Vec<Var>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<u32>,
    },
    AvgPool {
        x: Var,
        k: usize,
        s: usize,
    },
    GlobalAvgPool {
        x: Var,
    },
    ResizeBilinear {
        x: Var,
    },
    WeightedMerge {
        w: Var,
        inputs: Vec<Var>,
        eps: T,
    },
    /// Scalar-valued node whose input gradients were computed analytically
    /// at forward time (used by the loss functions).
    CustomScalar {
        inputs: Vec<Var>,
        input_grads: Vec<Tensor<T>>,
    },
    AffineCombine {
        a: Var,
        b: Var,
        alpha: T,
        beta: T,
    },
}

struct TapeNode<T: Scalar> {
    value: Tensor<T>,
    back: BackOp<T>,
}

pub struct Tape<T: Scalar> {
    nodes: Vec<TapeNode<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Tensor<T>, back: BackOp<T>) -> Var {
        self.nodes.push(TapeNode { value, back });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, BackOp::Leaf)
    }

    /// Records a value produced by a non-differentiable operation
    /// (argmax, thresholding). Backward through it is an error.
    pub fn non_differentiable(&mut self, value: Tensor<T>, what: &'static str) -> Var {
        self.push(value, BackOp::NonDifferentiable(what))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        pad: (usize, usize),
        groups: usize,
    ) -> Result<Var> {
        let y = ops::conv2d(
            self.value(x),
            self.value(w),
            b.map(|bv| self.value(bv)),
            stride,
            pad,
            groups,
        )?;
        Ok(self.push(
            y,
            BackOp::Conv2d {
                x,
                w,
                b,
                stride,
                pad,
                groups,
            },
        ))
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mu: &Tensor<T>,
        var: &Tensor<T>,
        eps: T,
    ) -> Result<Var> {
        let y = ops::batchnorm_infer(
            self.value(x),
            self.value(gamma),
            self.value(beta),
            mu,
            var,
            eps,
        )?;
        let inv_std = var.map(|v| T::one() / (v + eps).sqrt());
        Ok(self.push(
            y,
            BackOp::BatchNorm {
                x,
                gamma,
                beta,
                mu: mu.clone(),
                inv_std,
            },
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = ops::relu(self.value(x));
        self.push(y, BackOp::Relu { x })
    }

    pub fn relu6(&mut self, x: Var) -> Var {
        let y = ops::relu6(self.value(x));
        self.push(y, BackOp::Relu6 { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let y = ops::sigmoid(self.value(x));
        self.push(y, BackOp::Sigmoid { x })
    }

    pub fn softmax_channels(&mut self, x: Var) -> Var {
        let y = ops::softmax_channels(self.value(x));
        self.push(y, BackOp::SoftmaxChannels { x })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = ops::elementwise_add(self.value(a), self.value(b))?;
        Ok(self.push(y, BackOp::Add { a, b }))
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = ops::concat_channels(&tensors)?;
        Ok(self.push(
            y,
            BackOp::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn maxpool(&mut self, x: Var, k: usize, s: usize, pad: usize) -> Result<Var> {
        let (y, argmax) = ops::maxpool_with_argmax(self.value(x), k, s, pad)?;
        Ok(self.push(y, BackOp::MaxPool { x, argmax }))
    }

    pub fn avgpool(&mut self, x: Var, k: usize, s: usize) -> Result<Var> {
        let y = ops::avgpool(self.value(x), k, s)?;
        Ok(self.push(y, BackOp::AvgPool { x, k, s }))
    }

    pub fn global_avgpool(&mut self, x: Var) -> Var {
        let y = ops::global_avgpool(self.value(x));
        self.push(y, BackOp::GlobalAvgPool { x })
    }

    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let y = ops::resize_bilinear(self.value(x), out_h, out_w)?;
        Ok(self.push(y, BackOp::ResizeBilinear { x }))
    }

    pub fn weighted_merge(&mut self, w: Var, inputs: &[Var], eps: T) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&p| self.value(p)).collect();
        let y = ops::weighted_merge(self.value(w), &tensors, eps)?;
        Ok(self.push(
            y,
            BackOp::WeightedMerge {
                w,
                inputs: inputs.to_vec(),
                eps,
            },
        ))
    }

    /// Scalar node with analytically precomputed input gradients.
    pub fn custom_scalar(
        &mut self,
        value: T,
        inputs: Vec<Var>,
        input_grads: Vec<Tensor<T>>,
    ) -> Result<Var> {
        if inputs.len() != input_grads.len() {
            return Err(Error::shape("custom_scalar", "inputs/grads length mismatch"));
        }
        for (v, g) in inputs.iter().zip(&input_grads) {
            self.value(*v).same_shape(g, "custom_scalar")?;
        }
        Ok(self.push(
            Tensor::scalar(value),
            BackOp::CustomScalar {
                inputs,
                input_grads,
            },
        ))
    }

    /// alpha*a + beta*b on scalar nodes.
    pub fn affine_combine(&mut self, a: Var, alpha: T, b: Var, beta: T) -> Result<Var> {
        if self.value(a).numel() != 1 || self.value(b).numel() != 1 {
            return Err(Error::shape("affine_combine", "operands must be scalars"));
        }
        let v = alpha * self.value(a).item() + beta * self.value(b).item();
        Ok(self.push(Tensor::scalar(v), BackOp::AffineCombine { a, b, alpha, beta }))
    }

    /// Vector-Jacobian products of a scalar loss with respect to every
    /// node. Returns one optional gradient per node; `None` means the node
    /// does not influence the loss.
    pub fn backward(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::scalar(T::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.back {
                BackOp::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                BackOp::NonDifferentiable(what) => {
                    return Err(Error::NonDifferentiable(what));
                }
                BackOp::Conv2d {
                    x,
                    w,
                    b,
                    stride,
                    pad,
                    groups,
                } => {
                    let (dx, dw, db) = conv2d_vjp(
                        self.value(*x),
                        self.value(*w),
                        &g,
                        *stride,
                        *pad,
                        *groups,
                        b.is_some(),
                    )?;
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *w, dw);
                    if let (Some(bv), Some(db)) = (b, db) {
                        accumulate(&mut grads, *bv, db);
                    }
                }
                BackOp::BatchNorm {
                    x,
                    gamma,
                    beta,
                    mu,
                    inv_std,
                } => {
                    let xv = self.value(*x);
                    let gv = self.value(*gamma);
                    let [n, c, h, w] = xv.dims();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    let mut dgamma = vec![T::zero(); c];
                    let mut dbeta = vec![T::zero(); c];
                    for ci in 0..c {
                        let s = gv.data()[ci] * inv_std.data()[ci];
                        let m = mu.data()[ci];
                        let istd = inv_std.data()[ci];
                        for ni in 0..n {
                            let base = xv.idx(ni, ci, 0, 0);
                            for o in base..base + h * w {
                                let gi = g.data()[o];
                                dx.data_mut()[o] = gi * s;
                                dgamma[ci] += gi * (xv.data()[o] - m) * istd;
                                dbeta[ci] += gi;
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                    accumulate(&mut grads, *gamma, Tensor::from_channel_vec(dgamma));
                    accumulate(&mut grads, *beta, Tensor::from_channel_vec(dbeta));
                }
                BackOp::Relu { x } => {
                    let xv = self.value(*x);
                    let mut dx = g.clone();
                    for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if xi <= T::zero() {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::Relu6 { x } => {
                    let xv = self.value(*x);
                    let six = T::from_f64(6.0);
                    let mut dx = g.clone();
                    for (d, &xi) in dx.data_mut().iter_mut().zip(xv.data()) {
                        if xi <= T::zero() || xi >= six {
                            *d = T::zero();
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::Sigmoid { x } => {
                    let y = &node.value;
                    let mut dx = g.clone();
                    for (d, &yi) in dx.data_mut().iter_mut().zip(y.data()) {
                        *d = *d * yi * (T::one() - yi);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::SoftmaxChannels { x } => {
                    let y = &node.value;
                    let [n, c, h, w] = y.dims();
                    let mut dx = Tensor::zeros([n, c, h, w]);
                    for ni in 0..n {
                        for hi in 0..h {
                            for wi in 0..w {
                                let mut dot = T::zero();
                                for ci in 0..c {
                                    dot += g.at(ni, ci, hi, wi) * y.at(ni, ci, hi, wi);
                                }
                                for ci in 0..c {
                                    let v =
                                        y.at(ni, ci, hi, wi) * (g.at(ni, ci, hi, wi) - dot);
                                    dx.set(ni, ci, hi, wi, v);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::Add { a, b } => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                BackOp::Concat { parts } => {
                    let [n, _, h, w] = node.value.dims();
                    let hw = h * w;
                    let mut co = 0usize;
                    for p in parts {
                        let pc = self.value(*p).c();
                        let mut dp = Tensor::zeros([n, pc, h, w]);
                        for ni in 0..n {
                            let src = g.idx(ni, co, 0, 0);
                            let dst = dp.idx(ni, 0, 0, 0);
                            dp.data_mut()[dst..dst + pc * hw]
                                .copy_from_slice(&g.data()[src..src + pc * hw]);
                        }
                        accumulate(&mut grads, *p, dp);
                        co += pc;
                    }
                }
                BackOp::MaxPool { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).dims());
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data_mut()[src as usize] += g.data()[o];
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::AvgPool { x, k, s } => {
                    let xv = self.value(*x);
                    let [n, c, _, _] = xv.dims();
                    let [_, _, ho, wo] = node.value.dims();
                    let inv = T::one() / T::from_usize(k * k);
                    let mut dx = Tensor::zeros(xv.dims());
                    for ni in 0..n {
                        for ci in 0..c {
                            for oi in 0..ho {
                                for oj in 0..wo {
                                    let gv = g.at(ni, ci, oi, oj) * inv;
                                    for ki in 0..*k {
                                        for kj in 0..*k {
                                            let i = dx.idx(ni, ci, oi * s + ki, oj * s + kj);
                                            dx.data_mut()[i] += gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::GlobalAvgPool { x } => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims();
                    let inv = T::one() / T::from_usize(h * w);
                    let mut dx = Tensor::zeros(xv.dims());
                    for ni in 0..n {
                        for ci in 0..c {
                            let gv = g.at(ni, ci, 0, 0) * inv;
                            let base = dx.idx(ni, ci, 0, 0);
                            dx.data_mut()[base..base + h * w].fill(gv);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::ResizeBilinear { x } => {
                    let xv = self.value(*x);
                    let [n, c, h, w] = xv.dims();
                    let [_, _, oh, ow] = node.value.dims();
                    let mut dx = Tensor::zeros(xv.dims());
                    if oh == h && ow == w {
                        for (d, s) in dx.data_mut().iter_mut().zip(g.data()) {
                            *d += *s;
                        }
                    } else {
                        let rows: Vec<_> = (0..oh).map(|o| bilinear_axis(o, h, oh)).collect();
                        let cols: Vec<_> = (0..ow).map(|o| bilinear_axis(o, w, ow)).collect();
                        for ni in 0..n {
                            for ci in 0..c {
                                let base = dx.idx(ni, ci, 0, 0);
                                for (oi, &(i0, i1, fi)) in rows.iter().enumerate() {
                                    let fi = T::from_f64(fi);
                                    for (oj, &(j0, j1, fj)) in cols.iter().enumerate() {
                                        let fj = T::from_f64(fj);
                                        let gv = g.at(ni, ci, oi, oj);
                                        let one = T::one();
                                        dx.data_mut()[base + i0 * w + j0] +=
                                            gv * (one - fi) * (one - fj);
                                        dx.data_mut()[base + i0 * w + j1] += gv * (one - fi) * fj;
                                        dx.data_mut()[base + i1 * w + j0] += gv * fi * (one - fj);
                                        dx.data_mut()[base + i1 * w + j1] += gv * fi * fj;
                                    }
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                BackOp::WeightedMerge { w, inputs, eps } => {
                    let wv = self.value(*w);
                    let coefs = crate::tensor::ops::merge_coefficients(wv, *eps);
                    let denom = wv
                        .data()
                        .iter()
                        .map(|&v| if v > T::zero() { v } else { T::zero() })
                        .fold(*eps, |a, b| a + b);
                    let out = &node.value;
                    let mut dw = vec![T::zero(); wv.numel()];
                    for (i, inp) in inputs.iter().enumerate() {
                        let xv = self.value(*inp);
                        let mut dx = g.clone();
                        for d in dx.data_mut().iter_mut() {
                            *d = *d * coefs[i];
                        }
                        accumulate(&mut grads, *inp, dx);
                        if wv.data()[i] > T::zero() {
                            let mut acc = T::zero();
                            for ((gv, xi), oi) in g.data().iter().zip(xv.data()).zip(out.data()) {
                                acc += *gv * (*xi - *oi);
                            }
                            dw[i] = acc / denom;
                        }
                    }
                    accumulate(
                        &mut grads,
                        *w,
                        Tensor::new([wv.numel(), 1, 1, 1], dw).expect("dw shape"),
                    );
                }
                BackOp::CustomScalar {
                    inputs,
                    input_grads,
                } => {
                    let gs = g.item();
                    for (v, ig) in inputs.iter().zip(input_grads) {
                        let mut d = ig.clone();
                        for x in d.data_mut().iter_mut() {
                            *x = *x * gs;
                        }
                        accumulate(&mut grads, *v, d);
                    }
                }
                BackOp::AffineCombine { a, b, alpha, beta } => {
                    let gs = g.item();
                    accumulate(&mut grads, *a, Tensor::scalar(gs * *alpha));
                    accumulate(&mut grads, *b, Tensor::scalar(gs * *beta));
                }
            }
        }
        Ok(grads)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Tensor<T>>], v: Var, d: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, n) in existing.data_mut().iter_mut().zip(d.data()) {
                *e += *n;
            }
        }
        slot => *slot = Some(d),
    }
}

/// Gradients of a convolution with respect to input, weight and bias.
pub fn conv2d_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: (usize, usize),
    pad: (usize, usize),
    groups: usize,
    has_bias: bool,
) -> Result<(Tensor<T>, Tensor<T>, Option<Tensor<T>>)> {
    let geom = conv_geometry(x, w, None, stride, pad, groups)?;
    let [n, _, _, _] = x.dims();
    let [cout, cin_g, kh, kw] = w.dims();
    let (ho, wo) = (geom.ho, geom.wo);
    if g.dims() != [n, cout, ho, wo] {
        return Err(Error::shape(
            "conv2d_vjp",
            format!("upstream shape {:?} != output {:?}", g.dims(), [n, cout, ho, wo]),
        ));
    }
    let p = ho * wo;
    let kdim = cin_g * kh * kw;
    let cout_g = geom.cout_g;

    let mut dx = Tensor::zeros(x.dims());
    let mut dw = Tensor::zeros(w.dims());
    let mut col = vec![T::zero(); kdim * p];
    let mut dcol = vec![T::zero(); kdim * p];

    for ni in 0..n {
        for gi in 0..groups {
            let wslice = &w.data()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            let gb = g.idx(ni, gi * cout_g, 0, 0);
            let gslice = &g.data()[gb..gb + cout_g * p];

            // dcol = W^T * g, then scatter back to dx
            dcol.fill(T::zero());
            for oc in 0..cout_g {
                let grow = &gslice[oc * p..(oc + 1) * p];
                let wrow = &wslice[oc * kdim..(oc + 1) * kdim];
                for (kd, &coef) in wrow.iter().enumerate() {
                    if coef == T::zero() {
                        continue;
                    }
                    let drow = &mut dcol[kd * p..(kd + 1) * p];
                    for (d, s) in drow.iter_mut().zip(grow) {
                        *d += coef * *s;
                    }
                }
            }
            col2im_add(
                &dcol,
                &mut dx,
                ni,
                gi * cin_g,
                cin_g,
                (kh, kw),
                stride,
                pad,
                (ho, wo),
            );

            // dW += g * col^T
            im2col(x, ni, gi * cin_g, cin_g, (kh, kw), stride, pad, (ho, wo), &mut col);
            let dwslice = &mut dw.data_mut()[gi * cout_g * kdim..(gi + 1) * cout_g * kdim];
            for oc in 0..cout_g {
                let grow = &gslice[oc * p..(oc + 1) * p];
                let dwrow = &mut dwslice[oc * kdim..(oc + 1) * kdim];
                for (kd, dwv) in dwrow.iter_mut().enumerate() {
                    let crow = &col[kd * p..(kd + 1) * p];
                    let mut acc = T::zero();
                    for (a, b) in grow.iter().zip(crow) {
                        acc += *a * *b;
                    }
                    *dwv += acc;
                }
            }
        }
    }

    let db = if has_bias {
        let mut db = vec![T::zero(); cout];
        for ni in 0..n {
            for oc in 0..cout {
                let base = g.idx(ni, oc, 0, 0);
                for v in &g.data()[base..base + p] {
                    db[oc] += *v;
                }
            }
        }
        Some(Tensor::from_channel_vec(db))
    } else {
        None
    };
    Ok((dx, dw, db))
}

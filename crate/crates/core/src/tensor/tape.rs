use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{gemm, gemm_strided, BufferId, MatRef, ParamId, ParamStore, Real, Strided, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        dilation: (usize, usize),
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu {
        x: Var,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    /// Concatenation along axis 1; `blocks[i]` is input i's per-sample element count.
    Concat {
        xs: Vec<Var>,
        blocks: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
    },
    CrossEntropy {
        p: Var,
        labels: Vec<usize>,
        /// Per-sample weight divided by the total weight.
        coef: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    len: usize,
    op: Op<T>,
    needs_grad: bool,
}

/// Running-statistic update produced by a train-mode batch-norm call.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormUpdate<T> {
    pub running_mean: BufferId,
    pub running_var: BufferId,
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Real> BatchNormUpdate<T> {
    pub fn apply(&self, store: &mut ParamStore<T>) {
        store.buffer_mut(self.running_mean).value.data_mut().copy_from_slice(&self.mean);
        store.buffer_mut(self.running_var).value.data_mut().copy_from_slice(&self.var);
    }
}

/// Parameter gradients indexed by [`ParamId`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&[T]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<T>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn zeros_like(store: &ParamStore<T>) -> Self {
        Gradients {
            grads: store.params().iter().map(|p| Some(vec![T::zero(); p.value.len()])).collect(),
        }
    }
}

/// Records one forward pass for reverse-mode differentiation.
pub struct Tape<'p, T: Real> {
    store: &'p ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<ParamId, Var>,
    mode: Mode,
    rng: ChaCha8Rng,
    track_kinks: bool,
    kink_signature: u64,
    bn_updates: Vec<BatchNormUpdate<T>>,
}

fn fold_hash(h: u64, v: u64) -> u64 {
    (h ^ v).wrapping_mul(0x0000_0100_0000_01B3)
}

impl<'p, T: Real> Tape<'p, T> {
    /// `seed` drives dropout masks; identical seeds give identical masks.
    pub fn new(store: &'p ParamStore<T>, mode: Mode, seed: u64) -> Self {
        Tape {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            mode,
            rng: ChaCha8Rng::seed_from_u64(seed),
            track_kinks: false,
            kink_signature: 0xcbf2_9ce4_8422_2325,
            bn_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Fold relu activation patterns and pooling choices into [`Tape::kink_signature`].
    pub fn track_kinks(&mut self, on: bool) {
        self.track_kinks = on;
    }

    /// Hash of every piecewise branch taken so far; equal signatures mean the
    /// same linear piece of the network was evaluated.
    pub fn kink_signature(&self) -> u64 {
        self.kink_signature
    }

    pub fn batch_norm_updates(&self) -> &[BatchNormUpdate<T>] {
        &self.bn_updates
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match self.nodes[v.0].op {
            Op::Param(id) => &self.store.get(id).value,
            _ => &self.nodes[v.0].value,
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let len = value.len();
        self.nodes.push(Node {
            value,
            len,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let len = self.store.get(id).value.len();
        self.nodes.push(Node {
            value: Tensor {
                shape: Vec::new(),
                data: Vec::new(),
            },
            len,
            op: Op::Param(id),
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    /// Valid (unpadded) stride-1 convolution of an NCHW batch with OIHW weights.
    pub fn conv2d(&mut self, x: Var, weight: ParamId, bias: ParamId, dilation: (usize, usize)) -> Result<Var> {
        let w = self.param(weight);
        let b = self.param(bias);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!("conv2d expects NCHW input and OIHW weights, got {xs:?} and {ws:?}")));
        }
        let (batch, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::Shape(format!("conv2d weight expects {wc} input channels, got {c}")));
        }
        let (dh, dw) = dilation;
        if dh == 0 || dw == 0 {
            return Err(Error::Shape("dilation must be positive".into()));
        }
        let ext_h = (kh - 1) * dh + 1;
        let ext_w = (kw - 1) * dw + 1;
        if h < ext_h || wd < ext_w {
            return Err(Error::Shape(format!(
                "conv2d input {h}x{wd} smaller than kernel extent {ext_h}x{ext_w}"
            )));
        }
        let geo = ConvGeometry {
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            dh,
            dw,
        };
        let (ho, wo) = geo.out_dims();
        let p = ho * wo;
        let span = geo.span();
        let mut out = vec![T::zero(); batch * o * p];
        let mut full = vec![T::zero(); o * span];
        {
            let xv = self.value(x).data();
            let wv = self.value(w).data();
            let bv = self.value(b).data();
            for n in 0..batch {
                for (first, (i, j)) in geo.taps().enumerate() {
                    gemm_strided(
                        o,
                        c,
                        span,
                        wv,
                        geo.tap_weights(i, j),
                        xv,
                        geo.tap_window(n, i, j),
                        &mut full,
                        Strided { offset: 0, rs: span, cs: 1 },
                        first > 0,
                    );
                }
                let dst = &mut out[n * o * p..(n + 1) * o * p];
                for oc in 0..o {
                    let bias = bv[oc];
                    for oh in 0..ho {
                        let src = &full[oc * span + oh * wd..oc * span + oh * wd + wo];
                        let row = &mut dst[(oc * ho + oh) * wo..(oc * ho + oh + 1) * wo];
                        row.iter_mut().zip(src).for_each(|(d, &v)| *d = v + bias);
                    }
                }
            }
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { x, w, b, dilation }, needs))
    }

    /// `x·W + b` for `x` of shape [B, in] and `W` of shape [in, out].
    pub fn dense(&mut self, x: Var, weight: ParamId, bias: ParamId) -> Result<Var> {
        let w = self.param(weight);
        let b = self.param(bias);
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] {
            return Err(Error::Shape(format!("dense: input {xs:?} incompatible with weight {ws:?}")));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); batch * fout];
        {
            let bv = self.value(b).data();
            for row in out.chunks_exact_mut(fout) {
                row.copy_from_slice(bv);
            }
            gemm(
                MatRef::new(self.value(x).data(), batch, fin),
                MatRef::new(self.value(w).data(), fin, fout),
                &mut out,
                true,
            );
        }
        let needs = self.needs(x) || self.needs(w) || self.needs(b);
        let value = Tensor::new(vec![batch, fout], out)?;
        Ok(self.push(value, Op::Dense { x, w, b }, needs))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let data: Vec<T> = src.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        if self.track_kinks {
            let mut h = self.kink_signature;
            let mut word = 0u64;
            for (i, &v) in self.value(x).data().iter().enumerate() {
                word = (word << 1) | u64::from(v > T::zero());
                if i % 64 == 63 {
                    h = fold_hash(h, word);
                    word = 0;
                }
            }
            self.kink_signature = fold_hash(h, word);
        }
        let needs = self.needs(x);
        self.push(Tensor { shape, data }, Op::Relu { x }, needs)
    }

    /// Per-channel batch normalization of an NCHW tensor. Train mode normalizes
    /// with batch statistics and records a running-statistic update; eval mode
    /// uses the running statistics.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d(
        &mut self,
        x: Var,
        gamma: ParamId,
        beta: ParamId,
        running_mean: BufferId,
        running_var: BufferId,
        momentum: f64,
        eps: f64,
    ) -> Result<Var> {
        let g = self.param(gamma);
        let bt = self.param(beta);
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("batch_norm2d expects NCHW, got {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if self.value(g).len() != c {
            return Err(Error::Shape(format!("batch_norm2d: {c} channels, gamma has {}", self.value(g).len())));
        }
        let plane = h * w;
        let count = batch * plane;
        let eps_t = T::of_f64(eps);
        let batch_stats = self.mode == Mode::Train;
        let xv = self.value(x).data();
        let (mean, var) = if batch_stats {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut s = 0.0f64;
                for n in 0..batch {
                    let base = (n * c + ch) * plane;
                    s += xv[base..base + plane].iter().map(|v| v.as_f64()).sum::<f64>();
                }
                let mu = s / count as f64;
                let mut ss = 0.0f64;
                for n in 0..batch {
                    let base = (n * c + ch) * plane;
                    ss += xv[base..base + plane].iter().map(|v| (v.as_f64() - mu).powi(2)).sum::<f64>();
                }
                mean[ch] = T::of_f64(mu);
                var[ch] = T::of_f64(ss / count as f64);
            }
            (mean, var)
        } else {
            (
                self.store.buffer(running_mean).value.data().to_vec(),
                self.store.buffer(running_var).value.data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps_t).sqrt()).collect();
        let gv = self.value(g).data();
        let bv = self.value(bt).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for n in 0..batch {
            for ch in 0..c {
                let base = (n * c + ch) * plane;
                for i in base..base + plane {
                    let z = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = z;
                    out[i] = gv[ch] * z + bv[ch];
                }
            }
        }
        if batch_stats {
            let mom = T::of_f64(momentum);
            let unbias = if count > 1 {
                T::of_f64(count as f64 / (count - 1) as f64)
            } else {
                T::one()
            };
            let old_mean = self.store.buffer(running_mean).value.data();
            let old_var = self.store.buffer(running_var).value.data();
            let new_mean = (0..c).map(|i| (T::one() - mom) * old_mean[i] + mom * mean[i]).collect();
            let new_var = (0..c).map(|i| (T::one() - mom) * old_var[i] + mom * var[i] * unbias).collect();
            self.bn_updates.push(BatchNormUpdate {
                running_mean,
                running_var,
                mean: new_mean,
                var: new_var,
            });
        }
        let needs = self.needs(x) || self.needs(g) || self.needs(bt);
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma: g,
                beta: bt,
                xhat,
                inv_std,
                batch_stats,
            },
            needs,
        ))
    }

    /// Non-overlapping `size`×`size` max pooling (stride = size, floor).
    pub fn max_pool2d(&mut self, x: Var, size: usize) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || size == 0 || xs[2] < size || xs[3] < size {
            return Err(Error::Shape(format!("max_pool2d {size}x{size} cannot pool {xs:?}")));
        }
        let (batch, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (ho, wo) = (h / size, w / size);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(batch * c * ho * wo);
        let mut argmax = Vec::with_capacity(batch * c * ho * wo);
        for plane in 0..batch * c {
            let base = plane * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = base + oh * size * w + ow * size;
                    for i in 0..size {
                        for j in 0..size {
                            let idx = base + (oh * size + i) * w + ow * size + j;
                            if xv[idx] > xv[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        if self.track_kinks {
            self.kink_signature = argmax.iter().fold(self.kink_signature, |h, &i| fold_hash(h, i as u64));
        }
        let needs = self.needs(x);
        let value = Tensor::new(vec![batch, c, ho, wo], out)?;
        Ok(self.push(value, Op::MaxPool { x, argmax }, needs))
    }

    /// Inverted dropout: train mode zeroes with probability `rate` and scales
    /// survivors by 1/(1−rate); eval mode returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidRate(rate));
        }
        if self.mode == Mode::Eval || rate == 0.0 {
            return Ok(x);
        }
        let keep = T::of_f64(1.0 / (1.0 - rate));
        let n = self.value(x).len();
        let mask: Vec<T> = (0..n)
            .map(|_| if self.rng.random::<f64>() < rate { T::zero() } else { keep })
            .collect();
        let src = self.value(x);
        let shape = src.shape().to_vec();
        let data = src.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Dropout { x, mask }, needs))
    }

    /// Concatenates along axis 1; all other axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.value(*xs.first().ok_or(Error::EmptyInput)?).shape().to_vec();
        if first.len() < 2 {
            return Err(Error::Shape("concat needs at least two axes".into()));
        }
        let batch = first[0];
        let mut blocks = Vec::with_capacity(xs.len());
        let mut axis_total = 0;
        for &v in xs {
            let s = self.value(v).shape();
            if s.len() != first.len() || s[0] != batch || s[2..] != first[2..] {
                return Err(Error::Shape(format!("cannot concatenate {first:?} with {s:?}")));
            }
            axis_total += s[1];
            blocks.push(s[1..].iter().product::<usize>());
        }
        let per_sample: usize = blocks.iter().sum();
        let mut data = Vec::with_capacity(batch * per_sample);
        for n in 0..batch {
            for (&v, &blk) in xs.iter().zip(&blocks) {
                data.extend_from_slice(&self.value(v).data()[n * blk..(n + 1) * blk]);
            }
        }
        let mut shape = first.clone();
        shape[1] = axis_total;
        let needs = xs.iter().any(|&v| self.needs(v));
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                xs: xs.to_vec(),
                blocks,
            },
            needs,
        ))
    }

    /// [B, ...] → [B, prod(...)].
    pub fn flatten(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let batch = src.shape()[0];
        let rest = src.len() / batch;
        let value = Tensor {
            shape: vec![batch, rest],
            data: src.data().to_vec(),
        };
        let needs = self.needs(x);
        self.push(value, Op::Reshape { x }, needs)
    }

    /// Row-wise softmax over the last axis of a [B, K] tensor.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let src = self.value(x);
        let shape = src.shape().to_vec();
        if shape.len() != 2 {
            return Err(Error::Shape(format!("softmax expects [B, K], got {shape:?}")));
        }
        let k = shape[1];
        let mut data = src.data().to_vec();
        for row in data.chunks_exact_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v = *v / sum);
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor { shape, data }, Op::Softmax { x }, needs))
    }

    /// Weighted mean of −ln p[label] over the batch, as a scalar of shape [1].
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize], class_weights: Option<&[f64]>) -> Result<Var> {
        let shape = self.value(probs).shape().to_vec();
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Shape(format!(
                "cross_entropy: probabilities {shape:?} for {} labels",
                labels.len()
            )));
        }
        let k = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Shape(format!("label {bad} out of range for {k} classes")));
        }
        let weights: Vec<f64> = labels
            .iter()
            .map(|&l| class_weights.and_then(|w| w.get(l).copied()).unwrap_or(1.0))
            .collect();
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) {
            return Err(Error::Config("class weights must be positive".into()));
        }
        let pv = self.value(probs).data();
        let tiny = T::min_positive_value();
        let mut loss = T::zero();
        let coef: Vec<T> = weights.iter().map(|w| T::of_f64(w / total)).collect();
        for (b, &l) in labels.iter().enumerate() {
            loss += coef[b] * -(pv[b * k + l].max(tiny)).ln();
        }
        let needs = self.needs(probs);
        Ok(self.push(
            Tensor {
                shape: vec![1],
                data: vec![loss],
            },
            Op::CrossEntropy {
                p: probs,
                labels: labels.to_vec(),
                coef,
            },
            needs,
        ))
    }

    /// Reverse pass from a scalar output; returns gradients of every parameter reached.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Shape("backward needs a scalar output".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        let mut param_grads: Vec<Option<Vec<T>>> = (0..self.store.len()).map(|_| None).collect();

        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            match &node.op {
                Op::Input => {}
                Op::Param(id) => param_grads[id.0] = Some(g),
                Op::Conv2d { x, w, b, dilation } => self.conv2d_backward(&g, *x, *w, *b, *dilation, &mut grads),
                Op::Dense { x, w, b } => {
                    let xs = self.value(*x).shape();
                    let (batch, fin) = (xs[0], xs[1]);
                    let fout = self.value(*w).shape()[1];
                    if let Some(dw) = self.slot(&mut grads, *w) {
                        gemm(
                            MatRef::new(self.value(*x).data(), batch, fin).t(),
                            MatRef::new(&g, batch, fout),
                            dw,
                            true,
                        );
                    }
                    if let Some(db) = self.slot(&mut grads, *b) {
                        for row in g.chunks_exact(fout) {
                            db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                        }
                    }
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        gemm(
                            MatRef::new(&g, batch, fout),
                            MatRef::new(self.value(*w).data(), fin, fout).t(),
                            dx,
                            true,
                        );
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for ((d, &gv), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            if v > T::zero() {
                                *d += gv;
                            }
                        }
                    }
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    batch_stats,
                } => {
                    let xs = self.value(*x).shape();
                    let (batch, c, plane) = (xs[0], xs[1], xs[2] * xs[3]);
                    let gv = self.value(*gamma).data().to_vec();
                    let mut sum_g = vec![T::zero(); c];
                    let mut sum_gx = vec![T::zero(); c];
                    for n in 0..batch {
                        for ch in 0..c {
                            let base = (n * c + ch) * plane;
                            for i in base..base + plane {
                                sum_g[ch] += g[i];
                                sum_gx[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                    if let Some(dg) = self.slot(&mut grads, *gamma) {
                        dg.iter_mut().zip(&sum_gx).for_each(|(d, &s)| *d += s);
                    }
                    if let Some(db) = self.slot(&mut grads, *beta) {
                        db.iter_mut().zip(&sum_g).for_each(|(d, &s)| *d += s);
                    }
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        let count = T::of_f64((batch * plane) as f64);
                        for n in 0..batch {
                            for ch in 0..c {
                                let base = (n * c + ch) * plane;
                                let scale = gv[ch] * inv_std[ch];
                                for i in base..base + plane {
                                    dx[i] += if *batch_stats {
                                        scale * (g[i] - sum_g[ch] / count - xhat[i] * sum_gx[ch] / count)
                                    } else {
                                        scale * g[i]
                                    };
                                }
                            }
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for (&idx, &gv) in argmax.iter().zip(&g) {
                            dx[idx] += gv;
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for ((d, &gv), &m) in dx.iter_mut().zip(&g).zip(mask) {
                            *d += gv * m;
                        }
                    }
                }
                Op::Concat { xs, blocks } => {
                    let per_sample: usize = blocks.iter().sum();
                    let batch = g.len() / per_sample;
                    let mut offset = 0;
                    for (&v, &blk) in xs.iter().zip(blocks) {
                        if let Some(dx) = self.slot(&mut grads, v) {
                            for n in 0..batch {
                                let src = &g[n * per_sample + offset..n * per_sample + offset + blk];
                                dx[n * blk..(n + 1) * blk]
                                    .iter_mut()
                                    .zip(src)
                                    .for_each(|(d, &s)| *d += s);
                            }
                        }
                        offset += blk;
                    }
                }
                Op::Reshape { x } => {
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        dx.iter_mut().zip(&g).for_each(|(d, &s)| *d += s);
                    }
                }
                Op::Softmax { x } => {
                    let y = node.value.data();
                    let k = node.value.shape()[1];
                    if let Some(dx) = self.slot(&mut grads, *x) {
                        for ((drow, grow), yrow) in dx.chunks_exact_mut(k).zip(g.chunks_exact(k)).zip(y.chunks_exact(k)) {
                            let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                            for ((d, &gv), &yv) in drow.iter_mut().zip(grow).zip(yrow) {
                                *d += yv * (gv - dot);
                            }
                        }
                    }
                }
                Op::CrossEntropy { p, labels, coef } => {
                    let upstream = g[0];
                    let probs = self.value(*p);
                    let k = probs.shape()[1];
                    let pv = probs.data();
                    if let Op::Softmax { x: logits } = self.nodes[p.0].op {
                        // fused route: d/dlogits = coef·(p − onehot)
                        if let Some(dx) = self.slot(&mut grads, logits) {
                            for (b, &l) in labels.iter().enumerate() {
                                let c = upstream * coef[b];
                                for j in 0..k {
                                    let target = if j == l { T::one() } else { T::zero() };
                                    dx[b * k + j] += c * (pv[b * k + j] - target);
                                }
                            }
                        }
                    } else if let Some(dp) = self.slot(&mut grads, *p) {
                        let tiny = T::min_positive_value();
                        for (b, &l) in labels.iter().enumerate() {
                            dp[b * k + l] -= upstream * coef[b] / pv[b * k + l].max(tiny);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads: param_grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut Vec<T>> {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return None;
        }
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); node.len]))
    }

    fn conv2d_backward(
        &self,
        g: &[T],
        x: Var,
        w: Var,
        b: Var,
        dilation: (usize, usize),
        grads: &mut [Option<Vec<T>>],
    ) {
        let xs = self.value(x).shape();
        let ws = self.value(w).shape();
        let geo = ConvGeometry {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            kh: ws[2],
            kw: ws[3],
            dh: dilation.0,
            dw: dilation.1,
        };
        let batch = xs[0];
        let (ho, wo) = geo.out_dims();
        let (p, o, c) = (ho * wo, geo.o, geo.c);
        let span = geo.span();
        let xv = self.value(x).data();
        let wv = self.value(w).data();

        if let Some(db) = self.slot(grads, b) {
            for n in 0..batch {
                for (oc, row) in g[n * o * p..(n + 1) * o * p].chunks_exact(p).enumerate() {
                    db[oc] += row.iter().copied().sum();
                }
            }
        }
        let want_w = self.needs(w);
        let want_x = self.needs(x);
        // gradient laid out on full-width rows; the wrap-around columns stay zero
        let mut g_full = vec![T::zero(); o * span];
        let mut dw_acc = if want_w { vec![T::zero(); self.nodes[w.0].len] } else { Vec::new() };
        let mut dx_acc = if want_x { vec![T::zero(); self.nodes[x.0].len] } else { Vec::new() };
        for n in 0..batch {
            for oc in 0..o {
                for oh in 0..ho {
                    let src = &g[n * o * p + (oc * ho + oh) * wo..n * o * p + (oc * ho + oh + 1) * wo];
                    g_full[oc * span + oh * geo.w..oc * span + oh * geo.w + wo].copy_from_slice(src);
                }
            }
            let g_view = Strided { offset: 0, rs: span, cs: 1 };
            for (i, j) in geo.taps() {
                let win = geo.tap_window(n, i, j);
                if want_w && c == 1 {
                    // a single input plane makes this a handful of dot products,
                    // which the packed GEMM handles poorly
                    let xw = &xv[win.offset..win.offset + span];
                    let tw = geo.tap_weights(i, j);
                    for oc in 0..o {
                        dw_acc[tw.offset + oc * tw.rs] += dot(&g_full[oc * span..(oc + 1) * span], xw);
                    }
                } else if want_w {
                    let transposed = Strided { offset: win.offset, rs: win.cs, cs: win.rs };
                    gemm_strided(o, span, c, &g_full, g_view, xv, transposed, &mut dw_acc, geo.tap_weights(i, j), true);
                }
                if want_x {
                    let wt = geo.tap_weights(i, j);
                    let wt = Strided { offset: wt.offset, rs: wt.cs, cs: wt.rs };
                    gemm_strided(c, o, span, wv, wt, &g_full, g_view, &mut dx_acc, win, true);
                }
            }
        }
        if let Some(dw) = self.slot(grads, w) {
            dw.iter_mut().zip(&dw_acc).for_each(|(d, &s)| *d += s);
        }
        if let Some(dx) = self.slot(grads, x) {
            dx.iter_mut().zip(&dx_acc).for_each(|(d, &s)| *d += s);
        }
    }
}

fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ca.remainder().iter().zip(cb.remainder()).map(|(&x, &y)| x * y).sum();
    for (xa, xb) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    acc.iter().copied().sum::<T>() + tail
}

#[derive(Debug, Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    dh: usize,
    dw: usize,
}

impl ConvGeometry {
    fn out_dims(&self) -> (usize, usize) {
        (self.h - (self.kh - 1) * self.dh, self.w - (self.kw - 1) * self.dw)
    }

    /// Output positions per channel when rows are kept at the full input
    /// width; the trailing `(kw−1)·dw` columns of each row are wrap-around junk.
    fn span(&self) -> usize {
        let (ho, _) = self.out_dims();
        ho * self.w - (self.kw - 1) * self.dw
    }

    fn taps(&self) -> impl Iterator<Item = (usize, usize)> {
        let kw = self.kw;
        (0..self.kh).flat_map(move |i| (0..kw).map(move |j| (i, j)))
    }

    /// O×C slice of an OIHW weight tensor at kernel tap (i, j).
    fn tap_weights(&self, i: usize, j: usize) -> Strided {
        Strided {
            offset: i * self.kw + j,
            rs: self.c * self.kh * self.kw,
            cs: self.kh * self.kw,
        }
    }

    /// C×span view of sample `n` shifted by tap (i, j): column q is input
    /// position `q + i·dh·W + j·dw` of each channel plane.
    fn tap_window(&self, n: usize, i: usize, j: usize) -> Strided {
        let plane = self.h * self.w;
        Strided {
            offset: n * self.c * plane + i * self.dh * self.w + j * self.dw,
            rs: plane,
            cs: 1,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store_with(entries: &[(&str, Vec<usize>, Vec<f64>)]) -> (ParamStore<f64>, Vec<ParamId>) {
        let mut store = ParamStore::new();
        let ids = entries
            .iter()
            .map(|(n, s, d)| store.add(n, Tensor::new(s.clone(), d.clone()).unwrap()).unwrap())
            .collect();
        (store, ids)
    }

    #[test]
    fn zero_and_delta_kernels() {
        let input: Vec<f64> = (0..25).map(|v| v as f64).collect();
        let (store, ids) = store_with(&[
            ("zero_w", vec![1, 1, 3, 3], vec![0.0; 9]),
            ("b", vec![1], vec![0.0]),
            ("delta_w", vec![1, 1, 3, 3], vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]),
        ]);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::new(vec![1, 1, 5, 5], input).unwrap());
        let zero = tape.conv2d(x, ids[0], ids[1], (1, 1)).unwrap();
        assert_eq!(tape.value(zero).shape(), &[1, 1, 3, 3]);
        assert!(tape.value(zero).data().iter().all(|&v| v == 0.0));
        let delta = tape.conv2d(x, ids[2], ids[1], (1, 1)).unwrap();
        assert_eq!(
            tape.value(delta).data(),
            &[6.0, 7.0, 8.0, 11.0, 12.0, 13.0, 16.0, 17.0, 18.0]
        );
    }

    #[test]
    fn conv_matches_direct_sum() {
        let (c, h, w, o) = (2, 9, 8, 3);
        let xv: Vec<f64> = (0..c * h * w).map(|i| ((i * 7919) % 23) as f64 - 11.0).collect();
        let wv: Vec<f64> = (0..o * c * 9).map(|i| ((i * 31) % 7) as f64 - 3.0).collect();
        let bv = vec![0.5, -1.0, 2.0];
        let (store, ids) = store_with(&[("w", vec![o, c, 3, 3], wv.clone()), ("b", vec![o], bv.clone())]);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::new(vec![1, c, h, w], xv.clone()).unwrap());
        let y = tape.conv2d(x, ids[0], ids[1], (3, 2)).unwrap();
        let (ho, wo) = (h - 6, w - 4);
        assert_eq!(tape.value(y).shape(), &[1, o, ho, wo]);
        for oc in 0..o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut s = bv[oc];
                    for ci in 0..c {
                        for a in 0..3 {
                            for bb in 0..3 {
                                s += wv[((oc * c + ci) * 3 + a) * 3 + bb] * xv[(ci * h + i + 3 * a) * w + j + 2 * bb];
                            }
                        }
                    }
                    assert_eq!(tape.value(y).data()[(oc * ho + i) * wo + j], s);
                }
            }
        }
    }

    #[test]
    fn conv_rejects_small_input() {
        let (store, ids) = store_with(&[("w", vec![1, 1, 3, 3], vec![0.0; 9]), ("b", vec![1], vec![0.0])]);
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::zeros(&[1, 1, 5, 5]));
        assert!(matches!(tape.conv2d(x, ids[0], ids[1], (3, 3)), Err(Error::Shape(_))));
    }

    #[test]
    fn relu_and_softmax_values() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::new(vec![1, 3], vec![-1.0, 0.0, 2.0]).unwrap());
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 0.0, 2.0]);
        let z = tape.input(Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap());
        let s = tape.softmax(z).unwrap();
        assert_eq!(tape.value(s).data(), &[0.5, 0.5]);
    }

    #[test]
    fn fused_softmax_cross_entropy_gradient_is_exact() {
        let (store, ids) = store_with(&[("z", vec![1, 3], vec![0.3, -1.2, 2.5])]);
        let mut tape = Tape::new(&store, Mode::Train, 0);
        let z = tape.param(ids[0]);
        let p = tape.softmax(z).unwrap();
        let loss = tape.cross_entropy(p, &[1], None).unwrap();
        assert!(tape.value(loss).data()[0] >= 0.0);
        let grads = tape.backward(loss).unwrap();
        let probs = tape.value(p).data().to_vec();
        let expected = [probs[0], probs[1] - 1.0, probs[2]];
        assert_eq!(grads.get(ids[0]).unwrap(), &expected);
    }

    #[test]
    fn dropout_modes() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::filled(&[1, 100], 1.0));
        assert_eq!(tape.dropout(x, 0.3).unwrap(), x);
        assert!(matches!(tape.dropout(x, 1.0), Err(Error::InvalidRate(_))));
        assert!(matches!(tape.dropout(x, -0.1), Err(Error::InvalidRate(_))));

        let mut tape = Tape::new(&store, Mode::Train, 0);
        let x = tape.input(Tensor::filled(&[1, 10_000], 1.0));
        let y = tape.dropout(x, 0.5).unwrap();
        assert!(tape.value(y).data().iter().all(|&v| v == 0.0 || v == 2.0));
    }

    #[test]
    fn max_pool_floor_geometry() {
        let store = ParamStore::<f64>::new();
        let mut tape = Tape::new(&store, Mode::Eval, 0);
        let x = tape.input(Tensor::new(vec![1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap());
        let y = tape.max_pool2d(x, 2).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[4.0]);
    }
}

use super::conv::{conv2d_backward, conv2d_forward, matmul_acc, transpose, Conv2dGeometry};
use super::tape::{BackwardCtx, Tape, Var};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Lower clamp applied to softmax probabilities before the log.
pub const CLAMP_MIN_PROB: f64 = 1e-5;

const FRAC_1_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Row-wise softmax of an `N x K` buffer, max-shifted.
pub fn softmax_rows<T: Scalar>(logits: &[T], classes: usize) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(classes).zip(out.chunks_mut(classes)) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut total = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst.iter_mut().for_each(|d| *d = *d / total);
    }
    out
}

/// Running mean and (unbiased) variance of a batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T: Scalar = f32> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    pub fn new(channels: usize) -> Self {
        Self {
            mean: vec![T::zero(); channels],
            var: vec![T::one(); channels],
        }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// Exponential moving average toward the batch statistics.
    pub fn update(&mut self, batch: &BatchStats, momentum: f64) {
        for c in 0..self.mean.len() {
            let m = self.mean[c].as_f64();
            let v = self.var[c].as_f64();
            self.mean[c] = T::of_f64((1.0 - momentum) * m + momentum * batch.mean[c]);
            self.var[c] = T::of_f64((1.0 - momentum) * v + momentum * batch.unbiased_var[c]);
        }
    }
}

/// Per-channel statistics of one training-mode batch-norm call.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub unbiased_var: Vec<f64>,
}

#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T: Scalar> {
    /// Normalize by batch statistics.
    Train,
    /// Normalize by the given running statistics.
    Eval(&'a RunningStats<T>),
}

fn same_shape_or_scalar(a: &Tensor<impl Scalar>, b: &Tensor<impl Scalar>, op: &str) -> Result<()> {
    if a.shape() == b.shape() || a.is_scalar() || b.is_scalar() {
        Ok(())
    } else {
        Err(Error::Dimension(format!(
            "{op}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )))
    }
}

/// Sums a broadcast gradient back down to a scalar operand.
fn reduce_for<T: Scalar>(grad: Vec<T>, operand: &Tensor<T>) -> Vec<T> {
    if operand.numel() == grad.len() {
        grad
    } else {
        vec![grad.into_iter().sum()]
    }
}

fn broadcast_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Vec<usize> {
    if a.numel() >= b.numel() {
        a.shape().to_vec()
    } else {
        b.shape().to_vec()
    }
}

fn zip_broadcast<T: Scalar>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    match (a.len(), b.len()) {
        (x, y) if x == y => a.iter().zip(b).map(|(&p, &q)| f(p, q)).collect(),
        (1, _) => b.iter().map(|&q| f(a[0], q)).collect(),
        _ => a.iter().map(|&p| f(p, b[0])).collect(),
    }
}

impl<T: Scalar> Tape<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape_or_scalar(ta, tb, "add")?;
        let shape = broadcast_shape(ta, tb);
        let value = Tensor::new(&shape, zip_broadcast(ta.data(), tb.data(), |p, q| p + q))?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(|ctx: &BackwardCtx<T>| {
                ctx.inputs
                    .iter()
                    .zip(&ctx.needs)
                    .map(|(t, &need)| need.then(|| reduce_for(ctx.grad_out.to_vec(), t)))
                    .collect()
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape_or_scalar(ta, tb, "mul")?;
        let shape = broadcast_shape(ta, tb);
        let value = Tensor::new(&shape, zip_broadcast(ta.data(), tb.data(), |p, q| p * q))?;
        Ok(self.record(
            value,
            &[a, b],
            Box::new(|ctx: &BackwardCtx<T>| {
                let (ta, tb) = (ctx.inputs[0], ctx.inputs[1]);
                let ga = ctx.needs[0].then(|| {
                    let g = zip_broadcast(ctx.grad_out, tb.data(), |g, q| g * q);
                    reduce_for(g, ta)
                });
                let gb = ctx.needs[1].then(|| {
                    let g = zip_broadcast(ctx.grad_out, ta.data(), |g, p| g * p);
                    reduce_for(g, tb)
                });
                vec![ga, gb]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ta = self.value(a);
        let value = Tensor::new(ta.shape(), ta.data().iter().map(|&v| v * factor).collect()).expect("shape preserved");
        self.record(
            value,
            &[a],
            Box::new(move |ctx: &BackwardCtx<T>| vec![Some(ctx.grad_out.iter().map(|&g| g * factor).collect())]),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total: T = self.value(a).data().iter().copied().sum();
        self.record(
            Tensor::scalar(total),
            &[a],
            Box::new(|ctx: &BackwardCtx<T>| vec![Some(vec![ctx.grad_out[0]; ctx.inputs[0].numel()])]),
        )
    }

    /// Exact GELU, `x * Phi(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let half = T::of_f64(0.5);
        let inv_sqrt2 = T::of_f64(std::f64::consts::FRAC_1_SQRT_2);
        let cdf: Vec<T> = ta
            .data()
            .iter()
            .map(|&x| half * (T::one() + (x * inv_sqrt2).erf()))
            .collect();
        let data = ta.data().iter().zip(&cdf).map(|(&x, &c)| x * c).collect();
        let value = Tensor::new(ta.shape(), data).expect("shape preserved");
        let inv_sqrt_2pi = T::of_f64(FRAC_1_SQRT_2PI);
        self.record(
            value,
            &[a],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let g = ctx.inputs[0]
                    .data()
                    .iter()
                    .zip(&cdf)
                    .zip(ctx.grad_out)
                    .map(|((&x, &c), &g)| {
                        let pdf = inv_sqrt_2pi * (-half * x * x).exp();
                        g * (c + x * pdf)
                    })
                    .collect();
                vec![Some(g)]
            }),
        )
    }

    /// `ln(clamp(softmax(logits), 1e-5, 1))` along the class axis.
    ///
    /// Entries where the clamp is active get zero gradient.
    pub fn log_softmax_clamped(&mut self, logits: Var) -> Result<Var> {
        self.check(logits)?;
        let t = self.value(logits);
        let &[_, classes] = t.shape() else {
            return Err(Error::Dimension(format!(
                "log_softmax_clamped expects N x K logits, got {:?}",
                t.shape()
            )));
        };
        if classes < 2 {
            return Err(Error::Dimension("log_softmax_clamped needs K >= 2".into()));
        }
        let floor = T::of_f64(CLAMP_MIN_PROB);
        let probs = softmax_rows(t.data(), classes);
        let data = probs.iter().map(|&p| p.max(floor).min(T::one()).ln()).collect();
        let value = Tensor::new(t.shape(), data)?;
        Ok(self.record(
            value,
            &[logits],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut grad = vec![T::zero(); probs.len()];
                for ((p_row, g_row), dst) in probs
                    .chunks(classes)
                    .zip(ctx.grad_out.chunks(classes))
                    .zip(grad.chunks_mut(classes))
                {
                    // gradient w.r.t. the clamped probabilities
                    let gq: Vec<T> = p_row
                        .iter()
                        .zip(g_row)
                        .map(|(&p, &g)| if p < floor { T::zero() } else { g / p.min(T::one()) })
                        .collect();
                    let dot: T = p_row.iter().zip(&gq).map(|(&p, &g)| p * g).sum();
                    for ((d, &p), &g) in dst.iter_mut().zip(p_row).zip(&gq) {
                        *d = p * (g - dot);
                    }
                }
                vec![Some(grad)]
            }),
        ))
    }

    /// `input (N x F) * weight^T (F x K) + bias`.
    pub fn linear(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        for v in [input, weight, bias] {
            self.check(v)?;
        }
        let (x, w, b) = (self.value(input), self.value(weight), self.value(bias));
        let (&[n, f], &[k, wf]) = (x.shape(), w.shape()) else {
            return Err(Error::Dimension(format!(
                "linear expects N x F input and K x F weight, got {:?} and {:?}",
                x.shape(),
                w.shape()
            )));
        };
        if f != wf || b.numel() != k {
            return Err(Error::Dimension(format!(
                "linear: input {:?}, weight {:?}, bias {:?} disagree",
                x.shape(),
                w.shape(),
                b.shape()
            )));
        }
        let w_t = transpose(w.data(), k, f);
        let mut out = vec![T::zero(); n * k];
        matmul_acc(x.data(), &w_t, &mut out, n, f, k);
        for row in out.chunks_mut(k) {
            row.iter_mut().zip(b.data()).for_each(|(o, &bv)| *o += bv);
        }
        let value = Tensor::new(&[n, k], out)?;
        Ok(self.record(
            value,
            &[input, weight, bias],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let (x, w) = (ctx.inputs[0], ctx.inputs[1]);
                let g = ctx.grad_out;
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); n * f];
                    matmul_acc(g, w.data(), &mut gx, n, k, f);
                    gx
                });
                let gw = ctx.needs[1].then(|| {
                    let g_t = transpose(g, n, k);
                    let mut gw = vec![T::zero(); k * f];
                    matmul_acc(&g_t, x.data(), &mut gw, k, n, f);
                    gw
                });
                let gb = ctx.needs[2].then(|| {
                    let mut gb = vec![T::zero(); k];
                    for row in g.chunks(k) {
                        gb.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                    }
                    gb
                });
                vec![gx, gw, gb]
            }),
        ))
    }

    /// Spatial mean per channel, `N x C x H x W -> N x C`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        self.check(input)?;
        let x = self.value(input);
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::Dimension(format!(
                "global_avg_pool expects N x C x H x W, got {:?}",
                x.shape()
            )));
        };
        let plane = h * w;
        let inv = T::of_f64(1.0 / plane as f64);
        let data = x
            .data()
            .chunks(plane)
            .map(|p| p.iter().copied().sum::<T>() * inv)
            .collect();
        let value = Tensor::new(&[n, c], data)?;
        Ok(self.record(
            value,
            &[input],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let mut g = Vec::with_capacity(ctx.inputs[0].numel());
                for &go in ctx.grad_out {
                    g.extend(std::iter::repeat_n(go * inv, plane));
                }
                vec![Some(g)]
            }),
        ))
    }

    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        self.check(input)?;
        self.check(weight)?;
        let geo = Conv2dGeometry::new(self.value(input).shape(), self.value(weight).shape(), stride, padding)?;
        if let Some(b) = bias {
            self.check(b)?;
            if self.value(b).numel() != geo.out_channels {
                return Err(Error::Dimension(format!(
                    "conv2d bias has {} entries for {} output channels",
                    self.value(b).numel(),
                    geo.out_channels
                )));
            }
        }
        let out = conv2d_forward(
            self.value(input).data(),
            self.value(weight).data(),
            bias.map(|b| self.value(b).data()),
            &geo,
        );
        let value = Tensor::new(&geo.out_shape(), out)?;
        let mut parents = vec![input, weight];
        parents.extend(bias);
        Ok(self.record(
            value,
            &parents,
            Box::new(move |ctx: &BackwardCtx<T>| {
                let has_bias = ctx.inputs.len() == 3;
                let needs = [ctx.needs[0], ctx.needs[1], has_bias && ctx.needs[2]];
                let grads = conv2d_backward(ctx.inputs[0].data(), ctx.inputs[1].data(), ctx.grad_out, &geo, needs);
                let mut out = vec![grads.input, grads.weight];
                if has_bias {
                    out.push(grads.bias);
                }
                out
            }),
        ))
    }

    /// Batch normalization over `N x C x H x W`.
    ///
    /// In training mode the batch statistics are returned so the caller can
    /// fold them into its running statistics.
    pub fn batch_norm2d(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        for v in [input, gamma, beta] {
            self.check(v)?;
        }
        let x = self.value(input);
        let &[n, c, h, w] = x.shape() else {
            return Err(Error::Dimension(format!(
                "batch_norm2d expects N x C x H x W, got {:?}",
                x.shape()
            )));
        };
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.numel() != c || b.numel() != c {
            return Err(Error::Dimension(format!(
                "batch_norm2d input has {c} channels, gamma {} and beta {}",
                g.numel(),
                b.numel()
            )));
        }
        if let BatchNormMode::Eval(running) = mode {
            if running.channels() != c {
                return Err(Error::Dimension(format!(
                    "batch_norm2d input has {c} channels, running stats {}",
                    running.channels()
                )));
            }
        }
        let plane = h * w;
        let count = (n * plane) as f64;
        let xd = x.data();
        let planes = move |ch: usize| (0..n).map(move |i| (i * c + ch) * plane..(i * c + ch + 1) * plane);

        let (mean, var, stats) = match mode {
            BatchNormMode::Train => {
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut total = 0.0;
                    for r in planes(ch) {
                        total += xd[r].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = total / count;
                    let mut sq = 0.0;
                    for r in planes(ch) {
                        sq += xd[r].iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
                    }
                    mean[ch] = m;
                    var[ch] = sq / count;
                }
                let unbiased = var
                    .iter()
                    .map(|v| if count > 1.0 { v * count / (count - 1.0) } else { *v })
                    .collect();
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: var.clone(),
                    unbiased_var: unbiased,
                };
                (mean, var, Some(stats))
            }
            BatchNormMode::Eval(running) => (
                running.mean.iter().map(|v| v.as_f64()).collect(),
                running.var.iter().map(|v| v.as_f64()).collect(),
                None,
            ),
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

        let mut xhat = vec![T::zero(); xd.len()];
        let mut out = vec![T::zero(); xd.len()];
        for ch in 0..c {
            let (m, s) = (T::of_f64(mean[ch]), T::of_f64(inv_std[ch]));
            let (gv, bv) = (g.data()[ch], b.data()[ch]);
            for r in planes(ch) {
                for ((xh, o), &xv) in xhat[r.clone()].iter_mut().zip(&mut out[r.clone()]).zip(&xd[r]) {
                    *xh = (xv - m) * s;
                    *o = gv * *xh + bv;
                }
            }
        }
        let value = Tensor::new(x.shape(), out)?;
        let training = matches!(mode, BatchNormMode::Train);
        let var = self.record(
            value,
            &[input, gamma, beta],
            Box::new(move |ctx: &BackwardCtx<T>| {
                let go = ctx.grad_out;
                let gamma = ctx.inputs[1].data();
                let mut sum_g = vec![0.0; c];
                let mut sum_g_xhat = vec![0.0; c];
                for ch in 0..c {
                    for r in planes(ch) {
                        for (&gv, &xh) in go[r.clone()].iter().zip(&xhat[r]) {
                            sum_g[ch] += gv.as_f64();
                            sum_g_xhat[ch] += (gv * xh).as_f64();
                        }
                    }
                }
                let gx = ctx.needs[0].then(|| {
                    let mut gx = vec![T::zero(); go.len()];
                    for ch in 0..c {
                        let scale = T::of_f64(gamma[ch].as_f64() * inv_std[ch]);
                        let (mg, mgx) = if training {
                            (T::of_f64(sum_g[ch] / count), T::of_f64(sum_g_xhat[ch] / count))
                        } else {
                            (T::zero(), T::zero())
                        };
                        for r in planes(ch) {
                            for ((d, &gv), &xh) in gx[r.clone()].iter_mut().zip(&go[r.clone()]).zip(&xhat[r]) {
                                *d = scale * (gv - mg - xh * mgx);
                            }
                        }
                    }
                    gx
                });
                let gg = ctx.needs[1].then(|| sum_g_xhat.iter().map(|&v| T::of_f64(v)).collect());
                let gb = ctx.needs[2].then(|| sum_g.iter().map(|&v| T::of_f64(v)).collect());
                vec![gx, gg, gb]
            }),
        );
        Ok((var, stats))
    }

    /// Batch norm that updates `running` in place when `train` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn batch_norm2d_update(
        &mut self,
        input: Var,
        gamma: Var,
        beta: Var,
        running: &mut RunningStats<T>,
        train: bool,
        eps: f64,
        momentum: f64,
    ) -> Result<Var> {
        if train {
            let (out, stats) = self.batch_norm2d(input, gamma, beta, BatchNormMode::Train, eps)?;
            if running.channels() != stats.as_ref().map_or(0, |s| s.mean.len()) {
                return Err(Error::Dimension("running stats channel count mismatch".into()));
            }
            running.update(&stats.expect("train mode returns stats"), momentum);
            Ok(out)
        } else {
            let (out, _) = self.batch_norm2d(input, gamma, beta, BatchNormMode::Eval(running), eps)?;
            Ok(out)
        }
    }
}

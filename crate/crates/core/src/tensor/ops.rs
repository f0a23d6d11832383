use super::{Kernel, Tensor, TensorError};

/// Frozen inference statistics of a batch-normalization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormRecord {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BatchNormRecord {
    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Per-channel `(scale, shift)` with `y = scale * x + shift`.
    pub fn affine(&self) -> Vec<(f64, f64)> {
        (0..self.channels())
            .map(|c| {
                let scale = self.gamma[c] / (self.var[c] + self.eps).sqrt();
                (scale, self.beta[c] - scale * self.mean[c])
            })
            .collect()
    }
}

fn out_dim(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let span = input + 2 * pad;
    (span >= k && stride > 0).then(|| (span - k) / stride + 1)
}

/// Cross-correlation with zero padding. Every output value accumulates its
/// terms in `(p, q, in-channel)` order starting from the bias (or 0).
pub fn conv2d(
    x: &Tensor,
    w: &Kernel,
    bias: Option<&[f64]>,
    stride: usize,
    padding: [usize; 2],
) -> Result<Tensor, TensorError> {
    let [n, c, h, wd] = x.shape();
    let [k1, k2, ci, co] = w.dims();
    if c != ci {
        return Err(TensorError::Shape(format!(
            "conv expects {ci} input channels, got {c}"
        )));
    }
    if let Some(b) = bias {
        if b.len() != co {
            return Err(TensorError::Shape(format!(
                "bias has {} entries for {co} output channels",
                b.len()
            )));
        }
    }
    let (Some(oh), Some(ow)) = (
        out_dim(h, k1, stride, padding[0]),
        out_dim(wd, k2, stride, padding[1]),
    ) else {
        return Err(TensorError::EmptyOutput {
            kernel: [k1, k2],
            padding,
            input: [h, wd],
        });
    };
    let mut out = Tensor::zeros([n, co, oh, ow]);
    let mut acc = vec![0.0f64; co];
    let wdata = w.data();
    for b in 0..n {
        for oy in 0..oh {
            for ox in 0..ow {
                match bias {
                    Some(bv) => acc.copy_from_slice(bv),
                    None => acc.iter_mut().for_each(|a| *a = 0.0),
                }
                for p in 0..k1 {
                    let iy = (oy * stride + p) as isize - padding[0] as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for q in 0..k2 {
                        let ix = (ox * stride + q) as isize - padding[1] as isize;
                        if ix < 0 || ix >= wd as isize {
                            continue;
                        }
                        for t in 0..ci {
                            let xv = x.at(b, t, iy as usize, ix as usize);
                            let row = &wdata[w.offset(p, q, t, 0)..][..co];
                            for (a, &wv) in acc.iter_mut().zip(row) {
                                *a += wv * xv;
                            }
                        }
                    }
                }
                for (j, &a) in acc.iter().enumerate() {
                    let o = out.index(b, j, oy, ox);
                    out.data_mut()[o] = a;
                }
            }
        }
    }
    Ok(out)
}

/// `1 / (k1 * k2)` rounded to single precision, so that the constant is
/// preserved exactly by 32-bit weight files.
pub fn pool_reciprocal(k1: usize, k2: usize) -> f64 {
    (1.0f32 / (k1 * k2) as f32) as f64
}

fn pool(
    x: &Tensor,
    k: [usize; 2],
    stride: usize,
    padding: [usize; 2],
    mut reduce: impl FnMut(&mut dyn Iterator<Item = f64>) -> f64,
) -> Result<Tensor, TensorError> {
    let [n, c, h, wd] = x.shape();
    let (Some(oh), Some(ow)) = (
        out_dim(h, k[0], stride, padding[0]),
        out_dim(wd, k[1], stride, padding[1]),
    ) else {
        return Err(TensorError::EmptyOutput {
            kernel: k,
            padding,
            input: [h, wd],
        });
    };
    let mut out = Tensor::zeros([n, c, oh, ow]);
    for b in 0..n {
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut window = (0..k[0]).flat_map(|p| (0..k[1]).map(move |q| (p, q))).filter_map(|(p, q)| {
                        let iy = (oy * stride + p) as isize - padding[0] as isize;
                        let ix = (ox * stride + q) as isize - padding[1] as isize;
                        (iy >= 0 && iy < h as isize && ix >= 0 && ix < wd as isize)
                            .then(|| x.at(b, ch, iy as usize, ix as usize))
                    });
                    let v = reduce(&mut window);
                    let o = out.index(b, ch, oy, ox);
                    out.data_mut()[o] = v;
                }
            }
        }
    }
    Ok(out)
}

/// Window mean with padded cells counted in the denominator. Computed as
/// `sum(x * pool_reciprocal(k))` in row-major window order.
pub fn avg_pool(
    x: &Tensor,
    k: [usize; 2],
    stride: usize,
    padding: [usize; 2],
) -> Result<Tensor, TensorError> {
    let inv = pool_reciprocal(k[0], k[1]);
    pool(x, k, stride, padding, |it| {
        let mut acc = 0.0;
        for v in it {
            acc += v * inv;
        }
        acc
    })
}

/// Window max over in-bounds cells; padding never wins.
pub fn max_pool(
    x: &Tensor,
    k: [usize; 2],
    stride: usize,
    padding: [usize; 2],
) -> Result<Tensor, TensorError> {
    pool(x, k, stride, padding, |it| it.fold(f64::NEG_INFINITY, f64::max))
}

pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let [n, c, h, w] = x.shape();
    let mut out = Tensor::zeros([n, c, 1, 1]);
    let area = (h * w) as f64;
    for b in 0..n {
        for ch in 0..c {
            let start = x.index(b, ch, 0, 0);
            let s: f64 = x.data()[start..start + h * w].iter().sum();
            out.data_mut()[b * c + ch] = s / area;
        }
    }
    out
}

pub fn batchnorm_inference(x: &Tensor, r: &BatchNormRecord) -> Result<Tensor, TensorError> {
    let [n, c, h, w] = x.shape();
    let [g, b, m, v] = [&r.gamma, &r.beta, &r.mean, &r.var].map(|s| s.len());
    if [g, b, m, v] != [c; 4] {
        return Err(TensorError::Shape(format!(
            "batchnorm record sized {:?} for {c} channels",
            [g, b, m, v]
        )));
    }
    let affine = r.affine();
    let mut out = x.clone();
    for bi in 0..n {
        for (ch, &(scale, shift)) in affine.iter().enumerate() {
            let start = x.index(bi, ch, 0, 0);
            for val in &mut out.data_mut()[start..start + h * w] {
                *val = *val * scale + shift;
            }
        }
    }
    Ok(out)
}

pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn swish(x: &Tensor) -> Tensor {
    x.map(|v| v * (1.0 / (1.0 + (-v).exp())))
}

/// `x * (t / t)` with `t = 1 + exp(-x)`; the exponential saturates at
/// `f64::MAX` so `t / t` is exactly 1 for every finite input.
pub fn fake_swish(x: &Tensor) -> Tensor {
    x.map(|v| {
        let t = 1.0 + (-v).exp().min(f64::MAX);
        v * (t / t)
    })
}

/// `sum_i gates[i] * xs[i]`. Per element, the gated terms are added in
/// ascending order, so the result does not depend on input order and exact
/// zero terms never change it.
pub fn elementwise_sum(xs: &[&Tensor], gates: &[f64]) -> Result<Tensor, TensorError> {
    let Some(first) = xs.first() else {
        return Err(TensorError::Shape("sum of zero tensors".into()));
    };
    if xs.len() != gates.len() {
        return Err(TensorError::Shape(format!(
            "{} tensors but {} gates",
            xs.len(),
            gates.len()
        )));
    }
    if let Some(bad) = xs.iter().find(|t| t.shape() != first.shape()) {
        return Err(TensorError::Shape(format!(
            "cannot sum {:?} with {:?}",
            first.shape(),
            bad.shape()
        )));
    }
    if xs.len() == 1 && gates[0] == 1.0 {
        return Ok((*first).clone());
    }
    let mut out = Tensor::zeros(first.shape());
    let mut terms = Vec::with_capacity(xs.len());
    for (i, o) in out.data_mut().iter_mut().enumerate() {
        terms.clear();
        terms.extend(xs.iter().zip(gates).map(|(t, &g)| {
            let v = t.data()[i];
            if g == 1.0 {
                v
            } else {
                g * v
            }
        }));
        terms.sort_unstable_by(f64::total_cmp);
        *o = terms[1..].iter().fold(terms[0], |acc, &v| acc + v);
    }
    Ok(out)
}

pub fn concat_channels(xs: &[&Tensor]) -> Result<Tensor, TensorError> {
    let Some(first) = xs.first() else {
        return Err(TensorError::Shape("concat of zero tensors".into()));
    };
    let [n, _, h, w] = first.shape();
    let mut total = 0;
    for t in xs {
        let [tn, tc, th, tw] = t.shape();
        if (tn, th, tw) != (n, h, w) {
            return Err(TensorError::Shape(format!(
                "cannot concat {:?} with {:?}",
                first.shape(),
                t.shape()
            )));
        }
        total += tc;
    }
    let mut out = Tensor::zeros([n, total, h, w]);
    let plane = h * w;
    for b in 0..n {
        let mut c0 = 0;
        for t in xs {
            let tc = t.shape()[1];
            let src = &t.data()[b * tc * plane..(b + 1) * tc * plane];
            let dst = out.index(b, c0, 0, 0);
            out.data_mut()[dst..dst + tc * plane].copy_from_slice(src);
            c0 += tc;
        }
    }
    Ok(out)
}

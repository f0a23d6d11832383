//! Parameter construction for rewritten layers. Every value is exactly
//! representable in single precision so weight files round-trip bit-exactly.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::rewrite::Fill;
use crate::network::{f32_round, ConvParams, LayerSpec, LayerOp, BN_EPS};
use crate::tensor::{pool_reciprocal, BatchNormRecord, Kernel};

/// Epsilon of the normalization-undo record; a power of two keeps
/// `var + eps` exact.
const UNDO_EPS: f64 = 1.0 / 131072.0;

fn neutral_bn(channels: usize, eps: f64, gamma: f64) -> BatchNormRecord {
    BatchNormRecord {
        gamma: vec![gamma; channels],
        beta: vec![0.0; channels],
        mean: vec![0.0; channels],
        var: vec![f32_round(1.0 - eps); channels],
        eps,
    }
}

/// `gamma = sqrt(var + eps)` and `beta = mean`, so the layer maps x to x.
pub fn undo_batchnorm(channels: usize, rng: &mut ChaCha8Rng) -> BatchNormRecord {
    let gamma: Vec<f64> = (0..channels).map(|_| rng.random_range(8..=24) as f64 / 16.0).collect();
    let mean: Vec<f64> = (0..channels).map(|_| f32_round(rng.random_range(-1.0..1.0))).collect();
    BatchNormRecord {
        var: gamma.iter().map(|g| g * g - UNDO_EPS).collect(),
        beta: mean.clone(),
        gamma,
        mean,
        eps: UNDO_EPS,
    }
}

/// Parameters for a conv layer `l` rewritten by `fill`; `old` is the layer it
/// replaces, if any.
pub(crate) fn fill_conv(
    fill: Fill,
    l: &LayerSpec,
    old: Option<&ConvParams>,
    rng: &mut ChaCha8Rng,
) -> ConvParams {
    let LayerOp::Conv(spec) = l.op else {
        unreachable!("fills only target convolutions")
    };
    let dims = [spec.kernel[0], spec.kernel[1], l.in_shape[0], l.out_shape[0]];
    let [k1, k2, ci, co] = dims;
    let zero_bias = || spec.bias.then(|| vec![0.0; co]);
    match fill {
        Fill::WidenOut => {
            let old = old.expect("widened layers exist");
            let [_, _, _, o] = old.weight.dims();
            let mut w = Kernel::zeros(dims);
            for p in 0..k1 {
                for q in 0..k2 {
                    for t in 0..ci {
                        for j in 0..o {
                            w.set(p, q, t, j, old.weight.get(p, q, t, j));
                        }
                    }
                }
            }
            let bias = old.bias.as_ref().map(|b| {
                let mut b = b.clone();
                b.resize(co, 0.0);
                b
            });
            let bn = old.bn.as_ref().map(|r| {
                let extra = neutral_bn(co - o, r.eps, 1.0);
                let cat = |a: &[f64], b: &[f64]| [a, b].concat();
                BatchNormRecord {
                    gamma: cat(&r.gamma, &extra.gamma),
                    beta: cat(&r.beta, &extra.beta),
                    mean: cat(&r.mean, &extra.mean),
                    var: cat(&r.var, &extra.var),
                    eps: r.eps,
                }
            });
            ConvParams { weight: w, bias, bn }
        }
        Fill::WidenIn => {
            let old = old.expect("successor layers exist");
            let [_, _, i, _] = old.weight.dims();
            let bound = 1.0 / ((k1 * k2 * ci) as f64).sqrt();
            let mut w = Kernel::zeros(dims);
            for p in 0..k1 {
                for q in 0..k2 {
                    for t in 0..ci {
                        for j in 0..co {
                            let v = if t < i {
                                old.weight.get(p, q, t, j)
                            } else {
                                f32_round(rng.random_range(-bound..bound))
                            };
                            w.set(p, q, t, j, v);
                        }
                    }
                }
            }
            ConvParams {
                weight: w,
                bias: old.bias.clone(),
                bn: old.bn.clone(),
            }
        }
        Fill::Identity => ConvParams {
            weight: Kernel::identity(k1, k2, co),
            bias: zero_bias(),
            bn: spec.batchnorm.then(|| undo_batchnorm(co, rng)),
        },
        Fill::GrowKernel => {
            let old = old.expect("grown layers exist");
            let [o1, o2, _, _] = old.weight.dims();
            let (dp, dq) = ((k1 - o1) / 2, (k2 - o2) / 2);
            let mut w = Kernel::zeros(dims);
            for p in 0..o1 {
                for q in 0..o2 {
                    for t in 0..ci {
                        for j in 0..co {
                            w.set(p + dp, q + dq, t, j, old.weight.get(p, q, t, j));
                        }
                    }
                }
            }
            ConvParams {
                weight: w,
                bias: old.bias.clone(),
                bn: old.bn.clone(),
            }
        }
        Fill::PoolDiagonal => {
            let inv = pool_reciprocal(k1, k2);
            let mut w = Kernel::zeros(dims);
            for p in 0..k1 {
                for q in 0..k2 {
                    for t in 0..ci.min(co) {
                        w.set(p, q, t, t, inv);
                    }
                }
            }
            ConvParams {
                weight: w,
                bias: zero_bias(),
                bn: None,
            }
        }
        Fill::Zero => ConvParams {
            weight: Kernel::zeros(dims),
            bias: zero_bias(),
            bn: spec.batchnorm.then(|| neutral_bn(co, BN_EPS, 0.0)),
        },
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;

    use super::*;
    use crate::tensor::{batchnorm_inference, Tensor};

    #[test]
    fn undo_record_is_exact_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let bn = undo_batchnorm(5, &mut rng);
        for (scale, shift) in bn.affine() {
            assert_eq!((scale, shift), (1.0, 0.0));
        }
        for v in bn.gamma.iter().chain(&bn.var).chain(&bn.mean).chain([&bn.eps]) {
            assert_eq!(f32_round(*v), *v);
        }
        let x = Tensor::standard_normal([2, 5, 3, 3], &mut rng);
        assert_eq!(batchnorm_inference(&x, &bn).unwrap(), x);
    }

    #[test]
    fn zero_record_outputs_zero() {
        let bn = neutral_bn(3, BN_EPS, 0.0);
        let x = Tensor::standard_normal([1, 3, 2, 2], &mut ChaCha8Rng::seed_from_u64(1));
        assert!(batchnorm_inference(&x, &bn).unwrap().data().iter().all(|&v| v == 0.0));
    }
}

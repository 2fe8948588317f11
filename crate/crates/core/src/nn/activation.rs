use super::Tensor;
use crate::error::Result;

pub fn relu(input: &Tensor) -> Tensor {
    let data = input.data().iter().map(|&v| v.max(0.0)).collect();
    Tensor::new(input.shape().to_vec(), data).expect("same shape")
}

/// Masks `grad_out` by `input > 0`. The gradient at exactly zero is zero.
pub fn relu_backward(grad_out: &Tensor, input: &Tensor) -> Result<Tensor> {
    grad_out.expect_shape(input.shape())?;
    let data = grad_out
        .data()
        .iter()
        .zip(input.data())
        .map(|(&g, &x)| if x > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::new(input.shape().to_vec(), data)
}

/// Zeroes subnormal values. Arithmetic on them is two orders of magnitude
/// slower on common CPUs, and a confident policy produces them constantly.
#[inline]
pub fn flush_subnormal(v: f32) -> f32 {
    if v.abs() < f32::MIN_POSITIVE {
        0.0
    } else {
        v
    }
}

/// Numerically stable softmax of one slice, written into `out`.
/// Probabilities below the normal range are flushed to zero.
pub fn softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = (z - max).exp();
        sum += *o;
    }
    let inv = 1.0 / sum;
    for o in out.iter_mut() {
        *o = flush_subnormal(*o * inv);
    }
}

/// Log-softmax of one slice, written into `out`.
pub fn log_softmax_into(logits: &[f32], out: &mut [f32]) {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let lse = logits.iter().map(|&z| (z - max).exp()).sum::<f32>().ln() + max;
    for (o, &z) in out.iter_mut().zip(logits) {
        *o = z - lse;
    }
}

/// Softmax over the last dimension.
pub fn softmax_lastdim(logits: &Tensor) -> Tensor {
    let k = *logits.shape().last().unwrap_or(&1);
    let mut out = vec![0.0; logits.len()];
    if k > 0 {
        for (src, dst) in logits.data().chunks(k).zip(out.chunks_mut(k)) {
            softmax_into(src, dst);
        }
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

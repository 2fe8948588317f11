//! Same-padded, stride-1 2-d convolution backed by im2col and an `sgemm` kernel.

use std::cell::RefCell;

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{shape_err, Error, Result};

/// Kernel `out × in × k × k` plus a bias of length `out`. Stride is 1 and the
/// zero padding is `(k - 1) / 2`, so spatial size is preserved.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvLayerParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

impl ConvLayerParams {
    pub fn new(kernel: Tensor, bias: Tensor) -> Result<Self> {
        let p = Self { kernel, bias };
        p.validate()?;
        Ok(p)
    }

    pub fn zeros(out_ch: usize, in_ch: usize, k: usize) -> Result<Self> {
        Self::new(Tensor::zeros(&[out_ch, in_ch, k, k]), Tensor::zeros(&[out_ch]))
    }

    fn validate(&self) -> Result<()> {
        let &[out_ch, _, kh, kw] = self.kernel.shape() else {
            return Err(Error::Contract(format!(
                "kernel must be 4-d, got {:?}",
                self.kernel.shape()
            )));
        };
        if kh != kw || kh % 2 == 0 {
            return Err(Error::Contract(format!("kernel must be square with odd size, got {kh}x{kw}")));
        }
        self.bias.expect_shape(&[out_ch])
    }

    pub fn out_channels(&self) -> usize {
        self.kernel.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.kernel.shape()[1]
    }

    pub fn kernel_size(&self) -> usize {
        self.kernel.shape()[2]
    }
}

/// Gradients of a convolution. `input` is `None` when it was not requested.
#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub kernel: Tensor,
    pub bias: Tensor,
}

fn check_input(input: &Tensor, params: &ConvLayerParams) -> Result<(usize, usize, usize)> {
    let (c, h, w) = input.chw()?;
    if c != params.in_channels() {
        return Err(shape_err([params.in_channels(), h, w], input.shape()));
    }
    Ok((c, h, w))
}

/// Unfolds `input` (C×H×W) into a `(C·k·k) × (H·W)` matrix.
fn im2col(input: &[f32], c: usize, h: usize, w: usize, k: usize, cols: &mut [f32]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &input[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let dst = &mut cols[row..row + hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                // valid x range: 0 <= x + dx < w
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                for y in 0..h {
                    let sy = y as isize + dy;
                    let out = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize || x0 >= x1 {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sy as usize * w..(sy as usize + 1) * w];
                    out[..x0].fill(0.0);
                    out[x1..].fill(0.0);
                    let sx0 = (x0 as isize + dx) as usize;
                    out[x0..x1].copy_from_slice(&src[sx0..sx0 + (x1 - x0)]);
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates column gradients back into C×H×W.
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, k: usize, out: &mut [f32]) {
    let pad = (k - 1) / 2;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut out[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ch * k + ky) * k + kx) * hw;
                let src = &cols[row..row + hw];
                let dx = kx as isize - pad as isize;
                let dy = ky as isize - pad as isize;
                let x0 = (-dx).max(0) as usize;
                let x1 = ((w as isize - dx).min(w as isize)).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    let sx0 = (x0 as isize + dx) as usize;
                    let dst = &mut dst[sx0..sx0 + (x1 - x0)];
                    for (d, s) in dst.iter_mut().zip(&src[y * w + x0..y * w + x1]) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// `C = alpha * A·B + beta * C` for row/column strided operands; `C` is
/// row-major `m × n`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    (rsa, csa): (usize, usize),
    b: &[f32],
    (rsb, csb): (usize, usize),
    beta: f32,
    c: &mut [f32],
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    // SAFETY: the operand extents are checked above (in debug builds) and
    // by the shape validation every caller performs before reaching here.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

thread_local! {
    // im2col scratch, reused across calls: unfolded inputs of a 32-channel
    // layer are tens of megabytes, and fresh allocations fault in every page.
    static SCRATCH: RefCell<(Vec<f32>, Vec<f32>)> = const { RefCell::new((Vec::new(), Vec::new())) };
}

fn grow(buf: &mut Vec<f32>, len: usize) -> &mut [f32] {
    if buf.len() < len {
        buf.resize(len, 0.0);
    }
    &mut buf[..len]
}

/// Runs `f` on the unfolded input and a second scratch slice of `extra` floats.
fn with_unfolded<T>(
    input: &Tensor,
    (c, h, w, k): (usize, usize, usize, usize),
    extra: usize,
    f: impl FnOnce(&[f32], &mut [f32]) -> T,
) -> T {
    SCRATCH.with(|cell| {
        let mut guard = cell.borrow_mut();
        let (cols_buf, extra_buf) = &mut *guard;
        let extra = grow(extra_buf, extra);
        if k == 1 {
            return f(input.data(), extra);
        }
        let cols = grow(cols_buf, c * k * k * h * w);
        im2col(input.data(), c, h, w, k, cols);
        f(cols, extra)
    })
}

pub fn conv2d_forward(input: &Tensor, params: &ConvLayerParams) -> Result<Tensor> {
    params.validate()?;
    let (c, h, w) = check_input(input, params)?;
    let k = params.kernel_size();
    let out_ch = params.out_channels();
    let hw = h * w;
    let depth = c * k * k;
    let mut out = vec![0.0; out_ch * hw];
    for (o, &b) in params.bias.data().iter().enumerate() {
        out[o * hw..(o + 1) * hw].fill(b);
    }
    with_unfolded(input, (c, h, w, k), 0, |cols, _| {
        gemm(out_ch, depth, hw, params.kernel.data(), (depth, 1), cols, (hw, 1), 1.0, &mut out);
    });
    Tensor::new(vec![out_ch, h, w], out)
}

/// Backward pass of [`conv2d_forward`]. `cached_input` is the input the
/// forward pass saw; `want_input_grad` can be switched off for a first layer.
pub fn conv2d_backward(
    grad_out: &Tensor,
    cached_input: Option<&Tensor>,
    params: &ConvLayerParams,
    want_input_grad: bool,
) -> Result<ConvGrads> {
    params.validate()?;
    let input = cached_input
        .ok_or_else(|| Error::Contract("conv backward called without a cached forward input".into()))?;
    let (c, h, w) = check_input(input, params)?;
    let out_ch = params.out_channels();
    grad_out.expect_shape(&[out_ch, h, w])?;
    let k = params.kernel_size();
    let hw = h * w;
    let depth = c * k * k;
    let g = grad_out.data();

    let mut gk = vec![0.0; out_ch * depth];
    let gb: Vec<f32> = (0..out_ch)
        .map(|o| g[o * hw..(o + 1) * hw].iter().map(|&v| v as f64).sum::<f64>() as f32)
        .collect();
    let extra = if want_input_grad { depth * hw } else { 0 };
    let grad_input = with_unfolded(input, (c, h, w, k), extra, |cols, gcols| {
        // dK[o, j] = Σ_p g[o, p] · cols[j, p]
        gemm(out_ch, hw, depth, g, (hw, 1), cols, (1, hw), 0.0, &mut gk);
        if !want_input_grad {
            return None;
        }
        // dcols[j, p] = Σ_o K[o, j] · g[o, p]
        gemm(depth, out_ch, hw, params.kernel.data(), (1, depth), g, (hw, 1), 0.0, gcols);
        if k == 1 {
            return Some(gcols.to_vec());
        }
        let mut gi = vec![0.0; c * hw];
        col2im(gcols, c, h, w, k, &mut gi);
        Some(gi)
    });
    let grad_input = grad_input.map(|gi| Tensor::new(vec![c, h, w], gi)).transpose()?;

    Ok(ConvGrads {
        input: grad_input,
        kernel: Tensor::new(params.kernel.shape().to_vec(), gk)?,
        bias: Tensor::new(vec![out_ch], gb)?,
    })
}

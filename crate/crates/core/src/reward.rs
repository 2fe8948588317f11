//! Non-reference losses, their gradients, and the per-pixel reward.
//!
//! Every loss returns its scalar value, a per-pixel map whose mean equals the
//! scalar, and the gradient of the scalar with respect to its image (or, for
//! the smoothness term, coefficient map) argument. Region losses spread each
//! region's term over its member pixels, scaled so partial border regions
//! keep the map mean exact.

use serde::{Deserialize, Serialize};

use crate::curve::ParamMap;
use crate::error::{shape_err, Error, Result};
use crate::image::ImageRGB;

pub const SPA_REGION: usize = 4;
pub const EXP_REGION: usize = 16;
pub const DEFAULT_EXPOSURE: f32 = 0.6;
pub const CRL_EPS: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub spa: f32,
    pub exp: f32,
    pub tva: f32,
    pub crl: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            spa: 1.0,
            exp: 100.0,
            tva: 200.0,
            crl: 20.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for v in [self.spa, self.exp, self.tva, self.crl] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidParameter(format!("loss weights must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn scaled(&self, k: f32) -> Self {
        Self {
            spa: self.spa * k,
            exp: self.exp * k,
            tva: self.tva * k,
            crl: self.crl * k,
        }
    }
}

impl std::str::FromStr for LossWeights {
    type Err = Error;

    /// Parses `spa,exp,tva,crl`.
    fn from_str(s: &str) -> Result<Self> {
        let vals: Vec<f32> = s
            .split(',')
            .map(|v| v.trim().parse::<f32>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::InvalidParameter(format!("bad weights {s:?}: {e}")))?;
        let [spa, exp, tva, crl] = vals[..] else {
            return Err(Error::InvalidParameter(format!("expected 4 weights, got {}", vals.len())));
        };
        let w = Self { spa, exp, tva, crl };
        w.validate()?;
        Ok(w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub spa: f64,
    pub exp: f64,
    pub tva: f64,
    pub crl: f64,
    pub total: f64,
}

/// One loss evaluated on a state.
#[derive(Debug, Clone)]
pub struct LossTerm {
    pub value: f64,
    /// Per-pixel contribution, `H × W`; its mean is `value`.
    pub map: Vec<f64>,
    /// Gradient of `value`, planar `3 × H × W`.
    pub grad: Vec<f64>,
}

/// Per-pixel reward, `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct RewardMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RewardMap {
    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len().max(1) as f64
    }
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn check_nonempty(h: usize, w: usize) -> Result<()> {
    if h == 0 || w == 0 {
        return Err(Error::ImageTooSmall { height: h, width: w, min: 1 });
    }
    Ok(())
}

/// Non-overlapping square tiling; border tiles may be partial.
struct Regions {
    size: usize,
    h: usize,
    w: usize,
    rows: usize,
    cols: usize,
}

impl Regions {
    fn new(h: usize, w: usize, size: usize) -> Self {
        Self {
            size,
            h,
            w,
            rows: h.div_ceil(size),
            cols: w.div_ceil(size),
        }
    }

    fn count(&self) -> usize {
        self.rows * self.cols
    }

    fn of_pixel(&self, y: usize, x: usize) -> usize {
        (y / self.size) * self.cols + x / self.size
    }

    fn pixel_count(&self, r: usize) -> usize {
        let (ry, rx) = (r / self.cols, r % self.cols);
        let hh = (self.h - ry * self.size).min(self.size);
        let ww = (self.w - rx * self.size).min(self.size);
        hh * ww
    }

    /// Mean of `values` (an `H × W` plane) over each region.
    fn means(&self, values: &[f64]) -> Vec<f64> {
        let mut sums = vec![0.0; self.count()];
        for y in 0..self.h {
            for x in 0..self.w {
                sums[self.of_pixel(y, x)] += values[y * self.w + x];
            }
        }
        for (r, s) in sums.iter_mut().enumerate() {
            *s /= self.pixel_count(r) as f64;
        }
        sums
    }

    /// Spreads per-region terms over pixels so the pixel mean equals the
    /// region mean of `terms`.
    fn broadcast(&self, terms: &[f64]) -> Vec<f64> {
        let k = self.count() as f64;
        let hw = (self.h * self.w) as f64;
        let mut map = vec![0.0; self.h * self.w];
        for y in 0..self.h {
            for x in 0..self.w {
                let r = self.of_pixel(y, x);
                map[y * self.w + x] = terms[r] * hw / (k * self.pixel_count(r) as f64);
            }
        }
        map
    }

    /// Chains a gradient with respect to region means down to planar
    /// per-channel pixels through the `(R + G + B) / 3` intensity.
    fn grad_to_pixels(&self, grad_means: &[f64]) -> Vec<f64> {
        let n = self.h * self.w;
        let mut grad = vec![0.0; 3 * n];
        for y in 0..self.h {
            for x in 0..self.w {
                let r = self.of_pixel(y, x);
                let g = grad_means[r] / (3.0 * self.pixel_count(r) as f64);
                for c in 0..3 {
                    grad[c * n + y * self.w + x] = g;
                }
            }
        }
        grad
    }
}

fn intensity64(img: &ImageRGB) -> Vec<f64> {
    let n = img.pixels();
    let d = img.data();
    (0..n)
        .map(|i| (d[i] as f64 + d[n + i] as f64 + d[2 * n + i] as f64) / 3.0)
        .collect()
}

/// Spatial consistency: preserves the contrast between each 4×4 region and
/// its four neighbours.
pub fn loss_spa(enhanced: &ImageRGB, input: &ImageRGB) -> Result<LossTerm> {
    enhanced.expect_same_dims(input)?;
    let (h, w) = enhanced.dims();
    check_nonempty(h, w)?;
    let regions = Regions::new(h, w, SPA_REGION);
    let ym = regions.means(&intensity64(enhanced));
    let im = regions.means(&intensity64(input));
    let k = regions.count();

    let mut terms = vec![0.0; k];
    let mut grad_means = vec![0.0; k];
    for ry in 0..regions.rows {
        for rx in 0..regions.cols {
            let i = ry * regions.cols + rx;
            let neighbours = [
                (ry > 0).then(|| i - regions.cols),
                (ry + 1 < regions.rows).then(|| i + regions.cols),
                (rx > 0).then(|| i - 1),
                (rx + 1 < regions.cols).then(|| i + 1),
            ];
            for j in neighbours.into_iter().flatten() {
                let dy = ym[i] - ym[j];
                let d = dy.abs() - (im[i] - im[j]).abs();
                terms[i] += d * d;
                let g = 2.0 * d * sign(dy) / k as f64;
                grad_means[i] += g;
                grad_means[j] -= g;
            }
        }
    }
    let value = terms.iter().sum::<f64>() / k as f64;
    Ok(LossTerm {
        value,
        map: regions.broadcast(&terms),
        grad: regions.grad_to_pixels(&grad_means),
    })
}

/// Exposure control: distance of each 16×16 region's mean intensity from
/// the well-exposedness level.
pub fn loss_exp(enhanced: &ImageRGB, level: f32) -> Result<LossTerm> {
    let (h, w) = enhanced.dims();
    check_nonempty(h, w)?;
    let regions = Regions::new(h, w, EXP_REGION);
    let ym = regions.means(&intensity64(enhanced));
    let m = regions.count() as f64;
    let level = level as f64;
    let terms: Vec<f64> = ym.iter().map(|y| (y - level).abs()).collect();
    let grad_means: Vec<f64> = ym.iter().map(|y| sign(y - level) / m).collect();
    Ok(LossTerm {
        value: terms.iter().sum::<f64>() / m,
        map: regions.broadcast(&terms),
        grad: regions.grad_to_pixels(&grad_means),
    })
}

/// Illumination smoothness of an applied coefficient map: per pixel and
/// channel `(|∂x A| + |∂y A|)²` with forward differences that are zero on
/// the last row and column, averaged over pixels and channels.
pub fn loss_tva(params: &ParamMap) -> Result<LossTerm> {
    let (h, w) = params.dims();
    check_nonempty(h, w)?;
    let n = h * w;
    let a = params.data();
    let denom = (3 * n) as f64;
    let mut map = vec![0.0; n];
    let mut grad = vec![0.0; 3 * n];
    let mut total = 0.0;
    for c in 0..3 {
        let base = c * n;
        for y in 0..h {
            for x in 0..w {
                let p = base + y * w + x;
                let here = a[p] as f64;
                let dx = if x + 1 < w { a[p + 1] as f64 - here } else { 0.0 };
                let dy = if y + 1 < h { a[p + w] as f64 - here } else { 0.0 };
                let s = dx.abs() + dy.abs();
                total += s * s;
                map[y * w + x] += s * s / 3.0;
                let gx = 2.0 * s * sign(dx) / denom;
                let gy = 2.0 * s * sign(dy) / denom;
                if x + 1 < w {
                    grad[p + 1] += gx;
                    grad[p] -= gx;
                }
                if y + 1 < h {
                    grad[p + w] += gy;
                    grad[p] -= gy;
                }
            }
        }
    }
    Ok(LossTerm {
        value: total / denom,
        map,
        grad,
    })
}

/// Channel-ratio constancy: per-pixel squared L1 change of the R/G, R/B and
/// G/B ratios, with an ε guard on the divisions, averaged over pixels.
pub fn loss_crl(enhanced: &ImageRGB, input: &ImageRGB) -> Result<LossTerm> {
    enhanced.expect_same_dims(input)?;
    let (h, w) = enhanced.dims();
    check_nonempty(h, w)?;
    let n = h * w;
    let (yd, id) = (enhanced.data(), input.data());
    let mut map = vec![0.0; n];
    let mut grad = vec![0.0; 3 * n];
    const PAIRS: [(usize, usize); 3] = [(0, 1), (0, 2), (1, 2)];
    for p in 0..n {
        let yv = [0, 1, 2].map(|c| yd[c * n + p] as f64 + CRL_EPS);
        let iv = [0, 1, 2].map(|c| id[c * n + p] as f64 + CRL_EPS);
        let mut s = 0.0;
        let mut signs = [0.0; 3];
        for (k, &(a, b)) in PAIRS.iter().enumerate() {
            let diff = iv[a] / iv[b] - yv[a] / yv[b];
            s += diff.abs();
            signs[k] = sign(diff);
        }
        map[p] = s * s;
        let outer = 2.0 * s / n as f64;
        for (k, &(a, b)) in PAIRS.iter().enumerate() {
            // d|r(I) - r(Y)| / dY = -sign · dr(Y)/dY
            grad[a * n + p] -= outer * signs[k] / yv[b];
            grad[b * n + p] += outer * signs[k] * yv[a] / (yv[b] * yv[b]);
        }
    }
    Ok(LossTerm {
        value: map.iter().sum::<f64>() / n as f64,
        map,
        grad,
    })
}

/// Weighted sum of component values.
pub fn total_loss(spa: f64, exp: f64, tva: f64, crl: f64, weights: &LossWeights) -> LossBreakdown {
    LossBreakdown {
        spa,
        exp,
        tva,
        crl,
        total: weights.spa as f64 * spa + weights.exp as f64 * exp + weights.tva as f64 * tva + weights.crl as f64 * crl,
    }
}

/// Per-pixel component maps of one state, each `H × W`.
#[derive(Debug, Clone)]
pub struct ComponentMaps<'a> {
    pub spa: &'a [f64],
    pub exp: &'a [f64],
    pub tva: &'a [f64],
    pub crl: &'a [f64],
}

/// Negative weighted sum of the component maps.
pub fn reward_map(height: usize, width: usize, maps: &ComponentMaps<'_>, weights: &LossWeights) -> Result<RewardMap> {
    let n = height * width;
    for m in [maps.spa, maps.exp, maps.tva, maps.crl] {
        if m.len() != n {
            return Err(shape_err(n, m.len()));
        }
    }
    let (ws, we, wt, wc) = (weights.spa as f64, weights.exp as f64, weights.tva as f64, weights.crl as f64);
    let data = (0..n)
        .map(|p| -(ws * maps.spa[p] + we * maps.exp[p] + wt * maps.tva[p] + wc * maps.crl[p]))
        .collect();
    Ok(RewardMap { height, width, data })
}

/// Losses and reward of a state `enhanced` reached from `input` by applying
/// `applied` (absent for the untouched input).
#[derive(Debug, Clone)]
pub struct StateLoss {
    pub breakdown: LossBreakdown,
    pub reward: RewardMap,
}

pub fn evaluate_state(
    enhanced: &ImageRGB,
    input: &ImageRGB,
    applied: Option<&ParamMap>,
    weights: &LossWeights,
    exposure_level: f32,
) -> Result<StateLoss> {
    let (h, w) = enhanced.dims();
    let spa = loss_spa(enhanced, input)?;
    let exp = loss_exp(enhanced, exposure_level)?;
    let tva = match applied {
        Some(a) => {
            if a.dims() != (h, w) {
                return Err(shape_err((h, w), a.dims()));
            }
            loss_tva(a)?
        }
        None => LossTerm {
            value: 0.0,
            map: vec![0.0; h * w],
            grad: Vec::new(),
        },
    };
    let crl = loss_crl(enhanced, input)?;
    let breakdown = total_loss(spa.value, exp.value, tva.value, crl.value, weights);
    let reward = reward_map(
        h,
        w,
        &ComponentMaps {
            spa: &spa.map,
            exp: &exp.map,
            tva: &tva.map,
            crl: &crl.map,
        },
        weights,
    )?;
    Ok(StateLoss { breakdown, reward })
}

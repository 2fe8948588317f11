//! Action decoding, the quadratic light-enhancement curve, channel-dependent
//! momentum, the skip blend toward the raw input, and the reachable envelope.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::image::ImageRGB;

pub const NUM_ACTIONS: usize = 27;
pub const ALPHA_MIN: f32 = -0.3;
pub const ALPHA_MAX: f32 = 1.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Channel {
    #[default]
    R,
    G,
    B,
}

impl Channel {
    pub fn index(self) -> usize {
        match self {
            Channel::R => 0,
            Channel::G => 1,
            Channel::B => 2,
        }
    }
}

impl std::str::FromStr for Channel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "r" => Ok(Channel::R),
            "g" => Ok(Channel::G),
            "b" => Ok(Channel::B),
            _ => Err(Error::InvalidParameter(format!("unknown channel {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurveConfig {
    /// Weight of the enhanced image in the blend with the raw input.
    pub skip_weight: f32,
    /// Weight of a channel's own coefficient against the reference channel's.
    pub channel_momentum: f32,
    pub reference: Channel,
}

impl Default for CurveConfig {
    fn default() -> Self {
        Self {
            skip_weight: 0.8,
            channel_momentum: 0.2,
            reference: Channel::R,
        }
    }
}

impl CurveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("skip weight", self.skip_weight), ("channel momentum", self.channel_momentum)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidParameter(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        Ok(())
    }
}

/// Per-pixel, per-channel action indices in `0..27`, planar like [`ImageRGB`].
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ActionMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl ActionMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err([3, height, width], data.len()));
        }
        if let Some(&a) = data.iter().find(|&&a| a as usize >= NUM_ACTIONS) {
            return Err(Error::OutOfRange(format!("action index {a} outside 0..{NUM_ACTIONS}")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, action: u8) -> Result<Self> {
        Self::new(height, width, vec![action; 3 * height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.height + y) * self.width + x]
    }
}

/// Per-pixel, per-channel curve coefficients in `[-0.3, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ParamMap {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * height * width {
            return Err(shape_err([3, height, width], data.len()));
        }
        if let Some(v) = data.iter().find(|v| !(ALPHA_MIN..=ALPHA_MAX).contains(*v)) {
            return Err(Error::OutOfRange(format!("curve coefficient {v} outside [-0.3, 1]")));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, alpha: f32) -> Result<Self> {
        Self::new(height, width, vec![alpha; 3 * height * width])
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn decode(actions: &ActionMap) -> Self {
        Self {
            height: actions.height,
            width: actions.width,
            data: actions.data.iter().map(|&a| alpha_of(a)).collect(),
        }
    }
}

#[inline]
fn alpha_of(index: u8) -> f32 {
    (index as f32 - 6.0) / 20.0
}

/// Curve coefficient of an action: `-0.3 + 0.05 · index`.
pub fn action_to_alpha(index: usize) -> Result<f32> {
    if index >= NUM_ACTIONS {
        return Err(Error::OutOfRange(format!("action index {index} outside 0..{NUM_ACTIONS}")));
    }
    Ok(alpha_of(index as u8))
}

/// `x + α·x·(1 − x)`.
#[inline]
pub fn lec(x: f32, alpha: f32) -> f32 {
    (x + alpha * x * (1.0 - x)).clamp(0.0, 1.0)
}

#[inline]
fn blend(enhanced: f32, raw: f32, w: f32) -> f32 {
    (w * enhanced + (1.0 - w) * raw).clamp(0.0, 1.0)
}

pub fn apply_lec(img: &ImageRGB, params: &ParamMap) -> Result<ImageRGB> {
    if img.dims() != params.dims() {
        return Err(shape_err(img.dims(), params.dims()));
    }
    let data = img.data().iter().zip(&params.data).map(|(&x, &a)| lec(x, a)).collect();
    ImageRGB::from_planar(img.height(), img.width(), data)
}

/// Blends each non-reference channel's coefficients toward the reference
/// channel: `A*_c = ω_CD·A_c + (1 − ω_CD)·A_ref`.
pub fn apply_cdmu(raw: &ParamMap, cfg: &CurveConfig) -> ParamMap {
    let n = raw.height * raw.width;
    let r = cfg.reference.index();
    let w = cfg.channel_momentum;
    let mut out = raw.data.clone();
    let reference = &raw.data[r * n..(r + 1) * n];
    for c in (0..3).filter(|&c| c != r) {
        for (o, &a_ref) in out[c * n..(c + 1) * n].iter_mut().zip(reference) {
            *o = (w * *o + (1.0 - w) * a_ref).clamp(ALPHA_MIN, ALPHA_MAX);
        }
    }
    ParamMap {
        height: raw.height,
        width: raw.width,
        data: out,
    }
}

/// `ω·enhanced + (1 − ω)·raw`.
pub fn apply_skip(enhanced: &ImageRGB, raw: &ImageRGB, skip_weight: f32) -> Result<ImageRGB> {
    enhanced.expect_same_dims(raw)?;
    let data = enhanced
        .data()
        .iter()
        .zip(raw.data())
        .map(|(&e, &r)| blend(e, r, skip_weight))
        .collect();
    ImageRGB::from_planar(enhanced.height(), enhanced.width(), data)
}

/// One enhancement step. Returns the next state and the post-momentum
/// coefficient map that was actually applied.
pub fn enhance_step(
    state: &ImageRGB,
    raw_input: &ImageRGB,
    actions: &ActionMap,
    cfg: &CurveConfig,
) -> Result<(ImageRGB, ParamMap)> {
    cfg.validate()?;
    state.expect_same_dims(raw_input)?;
    if actions.dims() != state.dims() {
        return Err(shape_err(state.dims(), actions.dims()));
    }
    let applied = apply_cdmu(&ParamMap::decode(actions), cfg);
    let curved = apply_lec(state, &applied)?;
    let next = apply_skip(&curved, raw_input, cfg.skip_weight)?;
    Ok((next, applied))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnvelopeRow {
    pub input: f32,
    pub min: f32,
    pub max: f32,
}

/// Extremes reachable from each level `v ∈ {0, 0.01, …, 1}` after `steps`
/// curve applications with the skip blend toward `v`. The curve is monotone
/// in α on `(0, 1)`, so the extremes come from holding α at its bounds.
pub fn reachable_envelope(steps: usize, skip_weight: f32) -> Vec<EnvelopeRow> {
    (0..=100)
        .map(|i| {
            let v = i as f32 / 100.0;
            let (mut lo, mut hi) = (v, v);
            for _ in 0..steps {
                lo = blend(lec(lo, ALPHA_MIN), v, skip_weight);
                hi = blend(lec(hi, ALPHA_MAX), v, skip_weight);
            }
            EnvelopeRow { input: v, min: lo, max: hi }
        })
        .collect()
}

/// Envelope table as CSV with columns `input, min_N, max_N` per requested `N`.
pub fn envelope_csv(steps: &[usize], skip_weight: f32) -> String {
    let tables: Vec<_> = steps.iter().map(|&n| reachable_envelope(n, skip_weight)).collect();
    let mut out = String::from("input");
    for n in steps {
        out.push_str(&format!(",min_{n},max_{n}"));
    }
    out.push('\n');
    for i in 0..=100 {
        out.push_str(&format!("{:.2}", i as f32 / 100.0));
        for t in &tables {
            out.push_str(&format!(",{:.6},{:.6}", t[i].min, t[i].max));
        }
        out.push('\n');
    }
    out
}

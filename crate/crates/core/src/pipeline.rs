//! Inference: running a trained agent for a number of steps, optionally
//! refining after some of them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{greedy_actions, sample_actions, Agent};
use crate::curve::{enhance_step, ActionMap, CurveConfig, ParamMap};
use crate::error::{Error, Result};
use crate::image::ImageRGB;
use crate::refine::{noise_level_map, Denoiser};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum Decoding {
    /// Most probable action per pixel and channel.
    #[default]
    Greedy,
    /// Actions drawn from the policy. Step `t` uses its own stream derived
    /// from `seed` and `t`, so any step can be recomputed on its own.
    Sampled { seed: u64 },
}

/// Which image the enlightening ratio is measured against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MapMode {
    /// The raw input.
    #[default]
    Cumulative,
    /// The state the step started from.
    PerStep,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Refinement {
    pub denoiser: Denoiser,
    pub map: MapMode,
}

#[derive(Debug, Clone)]
pub struct StepResult {
    pub image: ImageRGB,
    pub actions: ActionMap,
    pub applied: ParamMap,
    pub refined: bool,
}

pub fn select_actions(agent: &Agent, state: &ImageRGB, decoding: Decoding, step: usize) -> Result<ActionMap> {
    let (policy, _) = agent.forward(state)?;
    Ok(match decoding {
        Decoding::Greedy => greedy_actions(&policy),
        Decoding::Sampled { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(step as u64);
            sample_actions(&policy, &mut rng).0
        }
    })
}

/// Step `step` (0-based) from `prev`, refining afterwards if `refine` is set.
pub fn advance(
    agent: &Agent,
    prev: &ImageRGB,
    input: &ImageRGB,
    step: usize,
    curve: &CurveConfig,
    decoding: Decoding,
    refine: Option<&Refinement>,
) -> Result<StepResult> {
    let actions = select_actions(agent, prev, decoding, step)?;
    let (mut image, applied) = enhance_step(prev, input, &actions, curve)?;
    if let Some(rf) = refine {
        let reference = match rf.map {
            MapMode::Cumulative => input,
            MapMode::PerStep => prev,
        };
        let map = noise_level_map(&image, reference)?;
        image = rf.denoiser.apply(&image, &map)?;
    }
    Ok(StepResult {
        image,
        actions,
        applied,
        refined: refine.is_some(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnhanceOptions {
    pub steps: usize,
    pub curve: CurveConfig,
    pub decoding: Decoding,
    pub refine: Option<Refinement>,
    /// Refine after steps `k, 2k, …` (1-based); 1 refines after every step.
    pub refine_every: usize,
}

impl Default for EnhanceOptions {
    fn default() -> Self {
        Self {
            steps: 6,
            curve: CurveConfig::default(),
            decoding: Decoding::Greedy,
            refine: None,
            refine_every: 1,
        }
    }
}

/// Runs `opts.steps` steps from `input` and returns every intermediate result.
pub fn enhance(agent: &Agent, input: &ImageRGB, opts: &EnhanceOptions) -> Result<Vec<StepResult>> {
    if opts.refine.is_some() && opts.refine_every == 0 {
        return Err(Error::InvalidParameter("refinement interval must be at least 1".into()));
    }
    let mut out: Vec<StepResult> = Vec::with_capacity(opts.steps);
    for t in 0..opts.steps {
        let prev = out.last().map_or(input, |s| &s.image);
        let refine = opts.refine.as_ref().filter(|_| (t + 1) % opts.refine_every.max(1) == 0);
        let next = advance(agent, prev, input, t, &opts.curve, opts.decoding, refine)?;
        out.push(next);
    }
    Ok(out)
}

/// The final image of [`enhance`], or the input itself for zero steps.
pub fn enhance_image(agent: &Agent, input: &ImageRGB, opts: &EnhanceOptions) -> Result<ImageRGB> {
    Ok(enhance(agent, input, opts)?
        .pop()
        .map_or_else(|| input.clone(), |s| s.image))
}

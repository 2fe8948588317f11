//! Episode rollout, discounted returns, actor-critic gradients and the two
//! training loops.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agent::{sample_actions, Agent, AgentConfig, AgentGrads, ForwardCache, PolicyOutput, ValueOutput, POLICY_MAPS};
use crate::checkpoint::save_checkpoint;
use crate::curve::{enhance_step, ActionMap, CurveConfig, ParamMap, NUM_ACTIONS};
use crate::error::{shape_err, Error, Result};
use crate::image::{list_images, load_image, random_crop, ImageRGB};
use crate::nn::{flush_subnormal, log_softmax_into, softmax_into, AdamState};
use crate::reward::{evaluate_state, LossBreakdown, LossWeights, RewardMap, DEFAULT_EXPOSURE};

/// Images with at most this many pixels are used whole in zero-shot mode.
pub const ZERO_SHOT_MAX_PIXELS: usize = 256 * 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdvantageMode {
    /// Each pixel's own return minus its value estimate.
    #[default]
    PerPixel,
    /// The spatial mean of the per-pixel advantage, shared by every pixel.
    Scalar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub agent: AgentConfig,
    pub gamma: f32,
    pub lr: f32,
    pub iterations: usize,
    pub steps: usize,
    pub weights: LossWeights,
    pub curve: CurveConfig,
    pub exposure: f32,
    pub entropy_weight: f32,
    /// Scale of the value regression term relative to the policy term.
    pub value_weight: f32,
    pub advantage: AdvantageMode,
    pub seed: u64,
    pub workers: usize,
    /// Side of the square training crop.
    pub patch_size: usize,
    /// Save a checkpoint every this many iterations; 0 saves only at the end.
    pub checkpoint_every: usize,
}

impl TrainConfig {
    pub fn unsupervised() -> Self {
        Self {
            agent: AgentConfig::unsupervised(),
            gamma: 0.95,
            lr: 0.001,
            iterations: 20_000,
            steps: 6,
            weights: LossWeights::default(),
            curve: CurveConfig::default(),
            exposure: DEFAULT_EXPOSURE,
            entropy_weight: 0.01,
            value_weight: 1.0,
            advantage: AdvantageMode::PerPixel,
            seed: 0,
            workers: 1,
            patch_size: 128,
            checkpoint_every: 1000,
        }
    }

    pub fn zero_shot() -> Self {
        Self {
            agent: AgentConfig::zero_shot(),
            iterations: 1000,
            steps: 8,
            patch_size: 256,
            checkpoint_every: 0,
            ..Self::unsupervised()
        }
    }

    /// Sets the seed used for both parameter initialization and rollouts.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.agent.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.agent.validate()?;
        self.weights.validate()?;
        self.curve.validate()?;
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad(format!("discount must be in [0, 1], got {}", self.gamma));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.steps == 0 {
            return bad("episodes need at least one step".into());
        }
        if !(self.entropy_weight >= 0.0) || !(self.value_weight >= 0.0) {
            return bad("entropy and value weights must be non-negative".into());
        }
        if self.workers == 0 {
            return bad("worker count must be at least 1".into());
        }
        if self.patch_size == 0 {
            return bad("patch size must be positive".into());
        }
        Ok(())
    }
}

/// One step of an episode: the state the agent saw, what it did, and what
/// it got for it.
#[derive(Debug, Clone)]
pub struct Transition {
    pub state: ImageRGB,
    pub actions: ActionMap,
    pub applied: ParamMap,
    /// Per pixel, summed over the three channels' draws.
    pub logprob: Vec<f32>,
    pub values: ValueOutput,
    /// Reward of the successor state.
    pub reward: RewardMap,
    /// Losses of the successor state.
    pub breakdown: LossBreakdown,
    policy: PolicyOutput,
    cache: ForwardCache,
}

impl Transition {
    pub fn policy(&self) -> &PolicyOutput {
        &self.policy
    }
}

#[derive(Debug, Clone)]
pub struct Trajectory {
    pub input: ImageRGB,
    pub transitions: Vec<Transition>,
    pub terminal: ImageRGB,
    pub terminal_value: ValueOutput,
}

/// Per step, per pixel discounted returns.
#[derive(Debug, Clone, PartialEq)]
pub struct ReturnsMap {
    pub steps: Vec<Vec<f64>>,
}

/// Runs one sampled episode of `cfg.steps` steps from `input`.
pub fn rollout<R: Rng + ?Sized>(agent: &Agent, input: &ImageRGB, cfg: &TrainConfig, rng: &mut R) -> Result<Trajectory> {
    cfg.validate()?;
    let mut state = input.clone();
    let mut transitions = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let (policy, values, cache) = agent.forward_cached(&state)?;
        let (actions, logprob) = sample_actions(&policy, rng);
        let (next, applied) = enhance_step(&state, input, &actions, &cfg.curve)?;
        let loss = evaluate_state(&next, input, Some(&applied), &cfg.weights, cfg.exposure)?;
        transitions.push(Transition {
            state: std::mem::replace(&mut state, next),
            actions,
            applied,
            logprob,
            values,
            reward: loss.reward,
            breakdown: loss.breakdown,
            policy,
            cache,
        });
    }
    let (_, terminal_value) = agent.forward(&state)?;
    Ok(Trajectory {
        input: input.clone(),
        transitions,
        terminal: state,
        terminal_value,
    })
}

/// `r_t = R_t + γ·r_{t+1}`, seeded with the terminal value estimate.
pub fn discounted_returns(traj: &Trajectory, gamma: f32) -> ReturnsMap {
    let gamma = gamma as f64;
    let mut next: Vec<f64> = traj.terminal_value.values.iter().map(|&v| v as f64).collect();
    let mut steps = vec![Vec::new(); traj.transitions.len()];
    for (t, tr) in traj.transitions.iter().enumerate().rev() {
        next = tr.reward.data.iter().zip(&next).map(|(&r, &n)| r + gamma * n).collect();
        steps[t] = next.clone();
    }
    ReturnsMap { steps }
}

/// Logit gradients this small are dropped: multiplied through the backward
/// pass they would land in the subnormal range, where arithmetic is very slow.
fn flush_negligible(v: f32) -> f32 {
    if v.abs() < 1e-30 {
        0.0
    } else {
        v
    }
}

/// Diagnostics of one gradient computation, averaged over pixels and steps.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradStats {
    pub value_loss: f64,
    pub advantage: f64,
    /// Summed over the three channels.
    pub entropy: f64,
}

/// Gradients of
/// `value_weight·mean (r − V)² − mean adv·log π(A) − β·mean H(π)`,
/// means taken over pixels and steps, with the advantage held constant.
pub fn a3c_gradients(agent: &Agent, traj: &Trajectory, returns: &ReturnsMap, cfg: &TrainConfig) -> Result<(AgentGrads, GradStats)> {
    let n_steps = traj.transitions.len();
    if returns.steps.len() != n_steps || n_steps == 0 {
        return Err(shape_err(n_steps, returns.steps.len()));
    }
    let (h, w) = traj.input.dims();
    let n = h * w;
    let scale = 1.0 / (n * n_steps) as f64;
    let beta = cfg.entropy_weight as f64;
    let mut grads = AgentGrads::zeros_like(agent);
    let mut stats = GradStats::default();
    let mut probs = [0.0f32; NUM_ACTIONS];
    let mut logp = [0.0f32; NUM_ACTIONS];

    for (tr, ret) in traj.transitions.iter().zip(&returns.steps) {
        if ret.len() != n || tr.values.values.len() != n {
            return Err(shape_err(n, ret.len()));
        }
        let td: Vec<f64> = ret.iter().zip(&tr.values.values).map(|(&r, &v)| r - v as f64).collect();
        let adv = match cfg.advantage {
            AdvantageMode::PerPixel => td.clone(),
            AdvantageMode::Scalar => vec![td.iter().sum::<f64>() / n as f64; n],
        };

        let grad_values: Vec<f32> = td
            .iter()
            .map(|&d| flush_subnormal((-2.0 * cfg.value_weight as f64 * d * scale) as f32))
            .collect();
        let mut grad_logits = vec![0.0f32; n * POLICY_MAPS];
        for p in 0..n {
            stats.value_loss += td[p] * td[p] * scale;
            stats.advantage += adv[p] * scale;
            for c in 0..3 {
                let z = tr.policy.slice(p, c);
                softmax_into(z, &mut probs);
                log_softmax_into(z, &mut logp);
                let entropy: f64 = -probs.iter().zip(&logp).map(|(&q, &l)| q as f64 * l as f64).sum::<f64>();
                stats.entropy += entropy * scale;
                let a = tr.actions.get(c, p / w, p % w) as usize;
                let g = &mut grad_logits[(p * 3 + c) * NUM_ACTIONS..(p * 3 + c + 1) * NUM_ACTIONS];
                for k in 0..NUM_ACTIONS {
                    let q = probs[k] as f64;
                    let onehot = if k == a { 1.0 } else { 0.0 };
                    let policy = -adv[p] * (onehot - q);
                    let ent = beta * q * (logp[k] as f64 + entropy);
                    g[k] = flush_negligible(((policy + ent) * scale) as f32);
                }
            }
        }
        grads.add_assign(&agent.backward(&tr.cache, &grad_logits, &grad_values)?)?;
    }
    Ok((grads, stats))
}

/// What one training iteration produced.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterationLog {
    pub iteration: usize,
    /// Losses of the final state of the (first worker's) episode.
    pub breakdown: LossBreakdown,
    /// Reward averaged over pixels and steps.
    pub mean_reward: f64,
    pub stats: GradStats,
}

impl IterationLog {
    pub const CSV_HEADER: &'static str = "iteration,l_spa,l_exp,l_tva,l_crl,l_total,mean_reward";

    pub fn csv_row(&self) -> String {
        let b = &self.breakdown;
        format!(
            "{},{},{},{},{},{},{}",
            self.iteration, b.spa, b.exp, b.tva, b.crl, b.total, self.mean_reward
        )
    }
}

/// Training state: parameters, optimizer and random streams.
#[derive(Debug, Clone)]
pub struct Trainer {
    cfg: TrainConfig,
    agent: Agent,
    adam: AdamState,
    rng: ChaCha8Rng,
    worker_rngs: Vec<ChaCha8Rng>,
    iteration: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let agent = Agent::new(cfg.agent)?;
        Self::from_agent(agent, cfg)
    }

    /// Continues training from existing parameters with a fresh optimizer.
    pub fn from_agent(agent: Agent, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let shapes = agent.tensor_shapes();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let adam = AdamState::new(cfg.lr, &shape_refs);
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let worker_rngs = (0..cfg.workers).map(|_| ChaCha8Rng::seed_from_u64(rng.random())).collect();
        Ok(Self {
            cfg,
            agent,
            adam,
            rng,
            worker_rngs,
            iteration: 0,
        })
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn into_agent(self) -> Agent {
        self.agent
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// The trainer's own stream, used for data sampling.
    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// One iteration on `images`, one per worker. Every worker rolls out
    /// against the same parameters; the resulting updates are then applied in
    /// worker order.
    pub fn step(&mut self, images: &[ImageRGB]) -> Result<IterationLog> {
        if images.len() != self.cfg.workers {
            return Err(shape_err(self.cfg.workers, images.len()));
        }
        let agent = &self.agent;
        let cfg = &self.cfg;
        let work = |(img, rng): (&ImageRGB, &mut ChaCha8Rng)| -> Result<(AgentGrads, IterationLog)> {
            let traj = rollout(agent, img, cfg, rng)?;
            let returns = discounted_returns(&traj, cfg.gamma);
            let (grads, stats) = a3c_gradients(agent, &traj, &returns, cfg)?;
            let steps = traj.transitions.len() as f64;
            let mean_reward = traj.transitions.iter().map(|t| t.reward.mean()).sum::<f64>() / steps;
            let last = traj.transitions.last().expect("at least one step");
            let log = IterationLog {
                iteration: 0,
                breakdown: last.breakdown,
                mean_reward,
                stats,
            };
            Ok((grads, log))
        };
        let results: Vec<Result<(AgentGrads, IterationLog)>> = if images.len() == 1 {
            vec![work((&images[0], &mut self.worker_rngs[0]))]
        } else {
            std::thread::scope(|s| {
                let handles: Vec<_> = images
                    .iter()
                    .zip(self.worker_rngs.iter_mut())
                    .map(|job| s.spawn(move || work(job)))
                    .collect();
                handles.into_iter().map(|h| h.join().expect("worker panicked")).collect()
            })
        };

        let mut first = None;
        for r in results {
            let (grads, log) = r?;
            if !grads.is_finite() {
                return Err(Error::Contract(format!("non-finite gradient at iteration {}", self.iteration)));
            }
            let mut params = self.agent.tensors_mut();
            self.adam.step(&mut params, &grads.tensors())?;
            first.get_or_insert(log);
        }
        let mut log = first.expect("at least one worker");
        log.iteration = self.iteration;
        self.iteration += 1;
        Ok(log)
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainRun {
    pub agent: Agent,
    pub log: Vec<IterationLog>,
}

fn run(
    mut trainer: Trainer,
    mut next_image: impl FnMut(&mut ChaCha8Rng) -> Result<ImageRGB>,
    checkpoint: Option<&Path>,
    mut on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainRun> {
    let cfg = trainer.config().clone();
    let mut log = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let images = (0..cfg.workers)
            .map(|_| next_image(trainer.rng()))
            .collect::<Result<Vec<_>>>()?;
        let entry = trainer.step(&images)?;
        on_iteration(&entry);
        log.push(entry);
        if let Some(path) = checkpoint {
            if cfg.checkpoint_every > 0 && (it + 1) % cfg.checkpoint_every == 0 {
                save_checkpoint(trainer.agent(), &cfg, path)?;
            }
        }
    }
    if let Some(path) = checkpoint {
        save_checkpoint(trainer.agent(), &cfg, path)?;
    }
    log::info!("finished {} iterations", cfg.iterations);
    Ok(TrainRun {
        agent: trainer.into_agent(),
        log,
    })
}

/// Trains on random crops of the images in `dataset`, loading each image
/// when it is drawn.
pub fn train_unsupervised(
    dataset: &Path,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainRun> {
    let files = list_images(dataset)?;
    if files.is_empty() {
        return Err(Error::EmptyDataset(dataset.to_path_buf()));
    }
    let trainer = Trainer::new(cfg.clone())?;
    let patch = cfg.patch_size;
    let next = |rng: &mut ChaCha8Rng| {
        let img = load_image(&files[rng.random_range(0..files.len())])?;
        let side = patch.min(img.height()).min(img.width());
        random_crop(&img, side, rng)
    };
    run(trainer, next, checkpoint, on_iteration)
}

/// Trains on a single image, used whole unless it exceeds
/// [`ZERO_SHOT_MAX_PIXELS`], in which case random crops are drawn from it.
pub fn train_zero_shot(
    image: &ImageRGB,
    cfg: &TrainConfig,
    checkpoint: Option<&Path>,
    on_iteration: impl FnMut(&IterationLog),
) -> Result<TrainRun> {
    let trainer = Trainer::new(cfg.clone())?;
    let whole = image.pixels() <= ZERO_SHOT_MAX_PIXELS;
    let side = cfg.patch_size.min(image.height()).min(image.width());
    let next = |rng: &mut ChaCha8Rng| {
        if whole {
            Ok(image.clone())
        } else {
            random_crop(image, side, rng)
        }
    };
    run(trainer, next, checkpoint, on_iteration)
}

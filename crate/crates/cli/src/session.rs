//! Interactive enhancement sessions: a history of states that can be
//! stepped, rewound and re-scored, plus the operation log that rebuilds it.

use std::path::PathBuf;
use std::sync::Arc;

use rellie_core::agent::Agent;
use rellie_core::curve::{CurveConfig, ParamMap};
use rellie_core::image::ImageRGB;
use rellie_core::pipeline::{advance, Decoding, Refinement};
use rellie_core::reward::{evaluate_state, LossBreakdown, LossWeights, DEFAULT_EXPOSURE};
use rellie_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "kebab-case")]
pub enum Operation {
    Step { apply_rf: bool },
    Rewind { to_step: usize },
    Reweight { weights: LossWeights },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StateMeta {
    pub step: usize,
    pub refined: bool,
    /// Weights the breakdown was computed with.
    pub weights: LossWeights,
    pub breakdown: LossBreakdown,
    pub mean_reward: f64,
    /// SHA-256 of the dimensions and the exact pixel values.
    pub hash: String,
}

/// Where a state's pixels live.
#[derive(Debug)]
enum Slot {
    Memory(ImageRGB),
    /// Raw little-endian f32 planes, so reloading is exact.
    Disk { path: PathBuf, height: usize, width: usize },
}

impl Slot {
    fn load(&self) -> Result<ImageRGB> {
        match self {
            Slot::Memory(img) => Ok(img.clone()),
            Slot::Disk { path, height, width } => {
                let bytes = std::fs::read(path)?;
                let data = bytes
                    .chunks_exact(4)
                    .map(|b| f32::from_le_bytes(b.try_into().expect("4 bytes")))
                    .collect();
                ImageRGB::from_planar(*height, *width, data)
            }
        }
    }
}

#[derive(Debug)]
struct StateRecord {
    slot: Slot,
    meta: StateMeta,
}

pub fn state_hash(img: &ImageRGB) -> String {
    let mut h = Sha256::new();
    h.update((img.height() as u64).to_le_bytes());
    h.update((img.width() as u64).to_le_bytes());
    for v in img.data() {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

fn breakdown(img: &ImageRGB, input: &ImageRGB, applied: Option<&ParamMap>, weights: &LossWeights) -> Result<(LossBreakdown, f64)> {
    let s = evaluate_state(img, input, applied, weights, DEFAULT_EXPOSURE)?;
    Ok((s.breakdown, s.reward.mean()))
}

#[derive(Debug)]
pub struct Session {
    checkpoint: String,
    agent: Arc<Agent>,
    input: ImageRGB,
    curve: CurveConfig,
    decoding: Decoding,
    refinement: Refinement,
    weights: LossWeights,
    states: Vec<StateRecord>,
    ops: Vec<Operation>,
    spill: Option<PathBuf>,
}

impl Session {
    /// A session whose history holds only the raw input. With `spill` set,
    /// state pixels are kept in files under that directory, which the
    /// session owns and removes when dropped.
    pub fn new(
        checkpoint: String,
        agent: Arc<Agent>,
        input: ImageRGB,
        decoding: Decoding,
        refinement: Refinement,
        spill: Option<PathBuf>,
    ) -> Result<Self> {
        if let Some(dir) = &spill {
            std::fs::create_dir_all(dir)?;
        }
        let mut s = Self {
            checkpoint,
            agent,
            input: input.clone(),
            curve: CurveConfig::default(),
            decoding,
            refinement,
            weights: LossWeights::default(),
            states: Vec::new(),
            ops: Vec::new(),
            spill,
        };
        let (b, r) = breakdown(&input, &input, None, &s.weights)?;
        s.push(input, false, b, r)?;
        Ok(s)
    }

    /// Rebuilds a session by applying `ops` in order.
    pub fn replay(
        checkpoint: String,
        agent: Arc<Agent>,
        input: ImageRGB,
        decoding: Decoding,
        refinement: Refinement,
        ops: &[Operation],
    ) -> Result<Self> {
        let mut s = Self::new(checkpoint, agent, input, decoding, refinement, None)?;
        for op in ops {
            s.apply(op)?;
        }
        Ok(s)
    }

    pub fn apply(&mut self, op: &Operation) -> Result<()> {
        match op {
            Operation::Step { apply_rf } => self.step(*apply_rf).map(|_| ()),
            Operation::Rewind { to_step } => self.rewind(*to_step).map(|_| ()),
            Operation::Reweight { weights } => self.reweight(*weights),
        }
    }

    fn push(&mut self, img: ImageRGB, refined: bool, breakdown: LossBreakdown, mean_reward: f64) -> Result<()> {
        let step = self.states.len();
        let meta = StateMeta {
            step,
            refined,
            weights: self.weights,
            breakdown,
            mean_reward,
            hash: state_hash(&img),
        };
        let slot = match &self.spill {
            Some(dir) => {
                let path = dir.join(format!("state-{step}.f32"));
                let bytes: Vec<u8> = img.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                std::fs::write(&path, bytes)?;
                Slot::Disk {
                    path,
                    height: img.height(),
                    width: img.width(),
                }
            }
            None => Slot::Memory(img),
        };
        self.states.push(StateRecord { slot, meta });
        Ok(())
    }

    pub fn checkpoint(&self) -> &str {
        &self.checkpoint
    }

    pub fn decoding(&self) -> Decoding {
        self.decoding
    }

    pub fn input(&self) -> &ImageRGB {
        &self.input
    }

    pub fn weights(&self) -> LossWeights {
        self.weights
    }

    /// Index of the latest state.
    pub fn current(&self) -> usize {
        self.states.len() - 1
    }

    pub fn operations(&self) -> &[Operation] {
        &self.ops
    }

    pub fn hashes(&self) -> Vec<String> {
        self.states.iter().map(|s| s.meta.hash.clone()).collect()
    }

    pub fn state(&self, k: usize) -> Result<(ImageRGB, &StateMeta)> {
        let rec = self.states.get(k).ok_or_else(|| {
            Error::OutOfRange(format!("step {k} is not in the history (current step is {})", self.current()))
        })?;
        Ok((rec.slot.load()?, &rec.meta))
    }

    /// One enhancement step from the latest state. On error the history is
    /// left as it was.
    pub fn step(&mut self, apply_rf: bool) -> Result<&StateMeta> {
        let t = self.current();
        let (prev, _) = self.state(t)?;
        let refine = apply_rf.then_some(&self.refinement);
        let out = advance(&self.agent, &prev, &self.input, t, &self.curve, self.decoding, refine)?;
        let (b, r) = breakdown(&out.image, &self.input, Some(&out.applied), &self.weights)?;
        self.push(out.image, out.refined, b, r)?;
        self.ops.push(Operation::Step { apply_rf });
        Ok(&self.states.last().expect("just pushed").meta)
    }

    /// Drops every state after `to_step`.
    pub fn rewind(&mut self, to_step: usize) -> Result<&StateMeta> {
        if to_step > self.current() {
            return Err(Error::OutOfRange(format!(
                "cannot rewind to step {to_step}, current step is {}",
                self.current()
            )));
        }
        for rec in self.states.drain(to_step + 1..) {
            if let Slot::Disk { path, .. } = rec.slot {
                let _ = std::fs::remove_file(path);
            }
        }
        self.ops.push(Operation::Rewind { to_step });
        Ok(&self.states[to_step].meta)
    }

    /// Changes the weights used to score future states. The policy, and so
    /// the pixels of future states, are unaffected.
    pub fn reweight(&mut self, weights: LossWeights) -> Result<()> {
        weights.validate()?;
        self.weights = weights;
        self.ops.push(Operation::Reweight { weights });
        Ok(())
    }
}

impl Drop for Session {
    fn drop(&mut self) {
        if let Some(dir) = &self.spill {
            let _ = std::fs::remove_dir_all(dir);
        }
    }
}

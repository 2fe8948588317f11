//! Fully-convolutional actor-critic: a shared conv/ReLU encoder feeding a
//! policy head (27 logits per pixel and channel) and a value head (one
//! estimate per pixel).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::curve::{ActionMap, NUM_ACTIONS};
use crate::error::{shape_err, Error, Result};
use crate::image::ImageRGB;
use crate::nn::{conv2d_backward, conv2d_forward, log_softmax_into, relu, relu_backward, softmax_into, ConvLayerParams, Tensor};

/// Policy maps per pixel: 3 channels × 27 actions.
pub const POLICY_MAPS: usize = 3 * NUM_ACTIONS;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AgentConfig {
    /// Total conv layers: the shared encoder plus the two heads.
    pub layers: usize,
    pub width: usize,
    pub kernel: usize,
    pub seed: u64,
}

impl AgentConfig {
    /// Seven layers, for training on a dataset.
    pub fn unsupervised() -> Self {
        Self { layers: 7, width: 32, kernel: 3, seed: 0 }
    }

    /// Four layers, for training on the single image being enhanced.
    pub fn zero_shot() -> Self {
        Self { layers: 4, ..Self::unsupervised() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers < 3 {
            return Err(Error::InvalidParameter(format!("agent needs at least 3 layers, got {}", self.layers)));
        }
        if self.width == 0 {
            return Err(Error::InvalidParameter("agent width must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::InvalidParameter(format!("kernel size must be odd, got {}", self.kernel)));
        }
        Ok(())
    }

    /// Kernel shapes in parameter order: encoder layers, policy head, value head.
    pub fn layer_shapes(&self) -> Vec<[usize; 4]> {
        let k = self.kernel;
        let mut shapes = Vec::with_capacity(self.layers);
        for i in 0..self.layers - 2 {
            let inp = if i == 0 { 3 } else { self.width };
            shapes.push([self.width, inp, k, k]);
        }
        shapes.push([POLICY_MAPS, self.width, k, k]);
        shapes.push([1, self.width, k, k]);
        shapes
    }
}

impl Default for AgentConfig {
    fn default() -> Self {
        Self::unsupervised()
    }
}

/// Logits laid out `H × W × 3 × 27`.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyOutput {
    pub height: usize,
    pub width: usize,
    pub logits: Vec<f32>,
}

impl PolicyOutput {
    pub fn new(height: usize, width: usize, logits: Vec<f32>) -> Result<Self> {
        if logits.len() != height * width * POLICY_MAPS {
            return Err(shape_err([height, width, 3, NUM_ACTIONS], logits.len()));
        }
        Ok(Self { height, width, logits })
    }

    /// The 27 logits of pixel `p` (row-major) and channel `c`.
    pub fn slice(&self, p: usize, c: usize) -> &[f32] {
        let o = (p * 3 + c) * NUM_ACTIONS;
        &self.logits[o..o + NUM_ACTIONS]
    }

    pub fn probabilities(&self, p: usize, c: usize) -> [f32; NUM_ACTIONS] {
        let mut out = [0.0; NUM_ACTIONS];
        softmax_into(self.slice(p, c), &mut out);
        out
    }
}

/// One value estimate per pixel, `H × W`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueOutput {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
}

/// Activations kept from a forward pass for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// Input of each encoder layer, then the shared features.
    activations: Vec<Tensor>,
}

impl ForwardCache {
    /// Which hidden units were active, in layer order. Two passes with the
    /// same pattern are on the same linear piece of the network.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.activations[1..]
            .iter()
            .flat_map(|t| t.data().iter().map(|&x| x > 0.0))
            .collect()
    }
}

/// Gradients in parameter order, kernel then bias per layer.
#[derive(Debug, Clone)]
pub struct AgentGrads {
    pub layers: Vec<(Tensor, Tensor)>,
}

impl AgentGrads {
    pub fn zeros_like(agent: &Agent) -> Self {
        Self {
            layers: agent
                .layers()
                .map(|l| (Tensor::zeros(l.kernel.shape()), Tensor::zeros(l.bias.shape())))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &AgentGrads) -> Result<()> {
        if self.layers.len() != other.layers.len() {
            return Err(shape_err(self.layers.len(), other.layers.len()));
        }
        for ((k, b), (ok, ob)) in self.layers.iter_mut().zip(&other.layers) {
            k.add_assign(ok)?;
            b.add_assign(ob)?;
        }
        Ok(())
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers.iter().flat_map(|(k, b)| [k, b]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(k, b)| k.is_finite() && b.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Agent {
    config: AgentConfig,
    encoder: Vec<ConvLayerParams>,
    policy_head: ConvLayerParams,
    value_head: ConvLayerParams,
}

impl Agent {
    /// He-normal encoder weights and down-scaled LeCun-normal head weights,
    /// zero biases, drawn from `config.seed`.
    pub fn new(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let shapes = config.layer_shapes();
        let n_enc = shapes.len() - 2;
        let mut layers = Vec::with_capacity(shapes.len());
        for (i, s) in shapes.iter().enumerate() {
            let fan_in = (s[1] * s[2] * s[3]) as f32;
            let std = if i < n_enc {
                (2.0 / fan_in).sqrt()
            } else {
                0.1 * (1.0 / fan_in).sqrt()
            };
            let normal = Normal::new(0.0, std).expect("finite std");
            let n = s.iter().product();
            let kernel = Tensor::new(s.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect())?;
            layers.push(ConvLayerParams::new(kernel, Tensor::zeros(&[s[0]]))?);
        }
        Self::from_layers(config, layers)
    }

    /// All-zero parameters: a uniform policy and zero values everywhere.
    pub fn zeros(config: AgentConfig) -> Result<Self> {
        config.validate()?;
        let layers = config
            .layer_shapes()
            .iter()
            .map(|s| ConvLayerParams::zeros(s[0], s[1], s[2]))
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(config, layers)
    }

    /// Assembles an agent from layers in parameter order, checking shapes.
    pub fn from_layers(config: AgentConfig, mut layers: Vec<ConvLayerParams>) -> Result<Self> {
        config.validate()?;
        let shapes = config.layer_shapes();
        if layers.len() != shapes.len() {
            return Err(shape_err(shapes.len(), layers.len()));
        }
        for (l, s) in layers.iter().zip(&shapes) {
            l.kernel.expect_shape(s)?;
            l.bias.expect_shape(&[s[0]])?;
        }
        let value_head = layers.pop().expect("value head");
        let policy_head = layers.pop().expect("policy head");
        Ok(Self {
            config,
            encoder: layers,
            policy_head,
            value_head,
        })
    }

    pub fn config(&self) -> &AgentConfig {
        &self.config
    }

    pub fn layers(&self) -> impl Iterator<Item = &ConvLayerParams> {
        self.encoder.iter().chain([&self.policy_head, &self.value_head])
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.encoder
            .iter_mut()
            .chain([&mut self.policy_head, &mut self.value_head])
            .flat_map(|l| [&mut l.kernel, &mut l.bias])
            .collect()
    }

    pub fn tensor_shapes(&self) -> Vec<Vec<usize>> {
        self.layers()
            .flat_map(|l| [l.kernel.shape().to_vec(), l.bias.shape().to_vec()])
            .collect()
    }

    /// Both heads read the same features, so they run as one convolution
    /// whose last output channel is the value map.
    fn fused_heads(&self) -> Result<ConvLayerParams> {
        let mut kernel = self.policy_head.kernel.data().to_vec();
        kernel.extend_from_slice(self.value_head.kernel.data());
        let mut bias = self.policy_head.bias.data().to_vec();
        bias.extend_from_slice(self.value_head.bias.data());
        let mut shape = self.policy_head.kernel.shape().to_vec();
        shape[0] = POLICY_MAPS + 1;
        ConvLayerParams::new(Tensor::new(shape, kernel)?, Tensor::new(vec![POLICY_MAPS + 1], bias)?)
    }

    pub fn forward(&self, img: &ImageRGB) -> Result<(PolicyOutput, ValueOutput)> {
        let (p, v, _) = self.forward_cached(img)?;
        Ok((p, v))
    }

    pub fn forward_cached(&self, img: &ImageRGB) -> Result<(PolicyOutput, ValueOutput, ForwardCache)> {
        let (h, w) = img.dims();
        if h == 0 || w == 0 {
            return Err(Error::ImageTooSmall { height: h, width: w, min: 1 });
        }
        let mut activations = Vec::with_capacity(self.encoder.len() + 1);
        activations.push(img.to_tensor());
        for layer in &self.encoder {
            let pre = conv2d_forward(activations.last().expect("input"), layer)?;
            activations.push(relu(&pre));
        }
        let features = activations.last().expect("features");
        let heads = conv2d_forward(features, &self.fused_heads()?)?;

        let n = h * w;
        let (maps, values) = heads.data().split_at(POLICY_MAPS * n);
        let mut logits = vec![0.0; n * POLICY_MAPS];
        transpose(maps, POLICY_MAPS, n, &mut logits);
        let values = values.to_vec();
        Ok((
            PolicyOutput { height: h, width: w, logits },
            ValueOutput { height: h, width: w, values },
            ForwardCache { activations },
        ))
    }

    /// Gradients of a scalar objective given its gradients with respect to
    /// the logits (`H × W × 3 × 27`) and the values (`H × W`).
    pub fn backward(&self, cache: &ForwardCache, grad_logits: &[f32], grad_values: &[f32]) -> Result<AgentGrads> {
        let features = cache
            .activations
            .last()
            .ok_or_else(|| Error::Contract("empty forward cache".into()))?;
        if cache.activations.len() != self.encoder.len() + 1 {
            return Err(Error::Contract("forward cache does not belong to this agent".into()));
        }
        let (_, h, w) = features.chw()?;
        let n = h * w;
        if grad_logits.len() != n * POLICY_MAPS || grad_values.len() != n {
            return Err(shape_err((n * POLICY_MAPS, n), (grad_logits.len(), grad_values.len())));
        }

        let mut g_heads = vec![0.0; (POLICY_MAPS + 1) * n];
        transpose(grad_logits, n, POLICY_MAPS, &mut g_heads[..POLICY_MAPS * n]);
        g_heads[POLICY_MAPS * n..].copy_from_slice(grad_values);
        let g_heads = Tensor::new(vec![POLICY_MAPS + 1, h, w], g_heads)?;
        let hg = conv2d_backward(&g_heads, Some(features), &self.fused_heads()?, true)?;
        let mut g_feat = hg.input.expect("requested");
        let split = self.policy_head.kernel.len();
        let (pk, vk) = hg.kernel.data().split_at(split);
        let (pb, vb) = hg.bias.data().split_at(POLICY_MAPS);
        let policy_grads = (
            Tensor::new(self.policy_head.kernel.shape().to_vec(), pk.to_vec())?,
            Tensor::new(vec![POLICY_MAPS], pb.to_vec())?,
        );
        let value_grads = (
            Tensor::new(self.value_head.kernel.shape().to_vec(), vk.to_vec())?,
            Tensor::new(vec![1], vb.to_vec())?,
        );

        let mut enc_grads = Vec::with_capacity(self.encoder.len());
        for (i, layer) in self.encoder.iter().enumerate().rev() {
            let out = &cache.activations[i + 1];
            let g_pre = relu_backward(&g_feat, out)?;
            let g = conv2d_backward(&g_pre, Some(&cache.activations[i]), layer, i > 0)?;
            enc_grads.push((g.kernel, g.bias));
            if let Some(gi) = g.input {
                g_feat = gi;
            }
        }
        enc_grads.reverse();
        enc_grads.push(policy_grads);
        enc_grads.push(value_grads);
        Ok(AgentGrads { layers: enc_grads })
    }
}

/// Writes the transpose of the row-major `rows × cols` matrix `src` into `dst`.
fn transpose(src: &[f32], rows: usize, cols: usize, dst: &mut [f32]) {
    const TILE: usize = 32;
    for r0 in (0..rows).step_by(TILE) {
        for c0 in (0..cols).step_by(TILE) {
            for r in r0..(r0 + TILE).min(rows) {
                for c in c0..(c0 + TILE).min(cols) {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
    }
}

/// Draws one action per pixel and channel. Returns the actions and, per
/// pixel, the summed log-probability of its three draws.
pub fn sample_actions<R: Rng + ?Sized>(policy: &PolicyOutput, rng: &mut R) -> (ActionMap, Vec<f32>) {
    let n = policy.height * policy.width;
    let mut actions = vec![0u8; 3 * n];
    let mut logprob = vec![0.0f32; n];
    let mut probs = [0.0f32; NUM_ACTIONS];
    let mut logp = [0.0f32; NUM_ACTIONS];
    for p in 0..n {
        for c in 0..3 {
            let z = policy.slice(p, c);
            softmax_into(z, &mut probs);
            let u: f32 = rng.random();
            let mut acc = 0.0;
            let mut chosen = None;
            for (a, &pa) in probs.iter().enumerate() {
                acc += pa;
                if u < acc {
                    chosen = Some(a);
                    break;
                }
            }
            // rounding can leave the cumulative sum a hair below 1
            let a = chosen.unwrap_or_else(|| probs.iter().rposition(|&pa| pa > 0.0).unwrap_or(0));
            log_softmax_into(z, &mut logp);
            actions[c * n + p] = a as u8;
            logprob[p] += logp[a];
        }
    }
    let map = ActionMap::new(policy.height, policy.width, actions).expect("indices in range");
    (map, logprob)
}

/// Per pixel and channel argmax; ties go to the lowest index.
pub fn greedy_actions(policy: &PolicyOutput) -> ActionMap {
    let n = policy.height * policy.width;
    let mut actions = vec![0u8; 3 * n];
    for p in 0..n {
        for c in 0..3 {
            let z = policy.slice(p, c);
            let mut best = 0;
            for a in 1..NUM_ACTIONS {
                if z[a] > z[best] {
                    best = a;
                }
            }
            actions[c * n + p] = best as u8;
        }
    }
    ActionMap::new(policy.height, policy.width, actions).expect("indices in range")
}

/// Per pixel, the sum over channels of the categorical entropy in nats.
pub fn entropy_map(policy: &PolicyOutput) -> Vec<f32> {
    let n = policy.height * policy.width;
    let mut probs = [0.0f32; NUM_ACTIONS];
    let mut logp = [0.0f32; NUM_ACTIONS];
    (0..n)
        .map(|p| {
            (0..3)
                .map(|c| {
                    let z = policy.slice(p, c);
                    softmax_into(z, &mut probs);
                    log_softmax_into(z, &mut logp);
                    -probs.iter().zip(&logp).map(|(&pa, &l)| pa * l).sum::<f32>()
                })
                .sum::<f32>()
                .max(0.0)
        })
        .collect()
}

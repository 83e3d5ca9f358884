//! A small convolutional classifier with manual reverse-mode differentiation.
//!
//! Each block is `conv3x3 -> ReLU -> [avg pool 2x2]`, followed by a hook
//! point where style modules may rewrite the block output. The head is global
//! average pooling and a linear layer. There are no normalization layers, so
//! the statistics seen at a hook are exactly the block's activations.

pub mod hooks;
mod layers;
pub mod train;

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{derive_rng, streams};
use crate::shift::byte_offset;
use crate::tensor::FeatureBatch;
use hooks::{AppliedTransform, HookPlan};
use layers::{
    avg_pool_backward, avg_pool_forward, conv_backward, conv_forward, relu_in_place, ConvShape,
};

fn default_stride() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub out_channels: usize,
    #[serde(default = "default_stride")]
    pub stride: usize,
    #[serde(default)]
    pub pool: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub blocks: Vec<BlockConfig>,
    pub classes: usize,
}

impl NetConfig {
    /// Three blocks of 8, 16 and 32 channels; the first two pool.
    pub fn standard(in_channels: usize, height: usize, width: usize, classes: usize) -> Self {
        let block = |out_channels, pool| BlockConfig {
            out_channels,
            stride: 1,
            pool,
        };
        Self {
            in_channels,
            height,
            width,
            blocks: vec![block(8, true), block(16, true), block(32, false)],
            classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.len() < 2 {
            return Err(Error::Config(format!(
                "the network needs at least 2 blocks, got {}",
                self.blocks.len()
            )));
        }
        if self.in_channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::Config("input dimensions must be positive".into()));
        }
        if self.classes < 2 {
            return Err(Error::Config("at least 2 classes are required".into()));
        }
        let (mut h, mut w) = (self.height, self.width);
        for (i, b) in self.blocks.iter().enumerate() {
            if b.out_channels == 0 || b.stride == 0 {
                return Err(Error::Config(format!(
                    "block {} needs positive channels and stride",
                    i + 1
                )));
            }
            h = layers::conv_out(h, b.stride);
            w = layers::conv_out(w, b.stride);
            if b.pool {
                if h < 2 || w < 2 {
                    return Err(Error::Config(format!(
                        "block {} pools a {h}x{w} map",
                        i + 1
                    )));
                }
                h /= 2;
                w /= 2;
            }
        }
        Ok(())
    }

    pub fn num_hooks(&self) -> usize {
        self.blocks.len()
    }

    /// `(C, H, W)` of the input to every block, plus the final block output.
    pub fn shapes(&self) -> Vec<(usize, usize, usize)> {
        let mut out = vec![(self.in_channels, self.height, self.width)];
        let (mut h, mut w) = (self.height, self.width);
        for b in &self.blocks {
            h = layers::conv_out(h, b.stride);
            w = layers::conv_out(w, b.stride);
            if b.pool {
                h /= 2;
                w /= 2;
            }
            out.push((b.out_channels, h, w));
        }
        out
    }

    /// Shape of the features at hook `hook`.
    pub fn hook_shape(&self, hook: usize) -> (usize, usize, usize) {
        self.shapes()[hook + 1]
    }
}

/// Name of hook `index` (zero-based): `"block1"`, `"block2"`, ...
pub fn hook_name(index: usize) -> String {
    format!("block{}", index + 1)
}

/// Inverse of [`hook_name`].
pub fn hook_index(name: &str, config: &NetConfig) -> Result<usize> {
    name.strip_prefix("block")
        .and_then(|n| n.parse::<usize>().ok())
        .filter(|&n| n >= 1 && n <= config.num_hooks())
        .map(|n| n - 1)
        .ok_or_else(|| {
            Error::Config(format!(
                "unknown hook {name:?}; expected block1..block{}",
                config.num_hooks()
            ))
        })
}

/// Name, shape and position of one parameter tensor in the flat vector.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

fn layout_of(config: &NetConfig) -> Vec<TensorSpec> {
    let mut specs = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, shape: Vec<usize>| {
        let spec = TensorSpec {
            name,
            shape,
            offset,
        };
        offset += spec.len();
        specs.push(spec);
    };
    let mut in_c = config.in_channels;
    for (i, b) in config.blocks.iter().enumerate() {
        push(
            format!("block{}.conv.weight", i + 1),
            vec![b.out_channels, in_c, 3, 3],
        );
        push(format!("block{}.conv.bias", i + 1), vec![b.out_channels]);
        in_c = b.out_channels;
    }
    push("head.weight".into(), vec![config.classes, in_c]);
    push("head.bias".into(), vec![config.classes]);
    specs
}

#[derive(Debug, Clone, PartialEq)]
pub struct MicroNet {
    config: NetConfig,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
}

struct BlockTape {
    input: FeatureBatch,
    /// Conv output before ReLU.
    pre_act: Vec<f64>,
    /// Block output before any hook transform.
    out: FeatureBatch,
}

/// Pre-transform features at a hook and the transforms applied there.
pub struct HookTape {
    pub pre: FeatureBatch,
    /// Each applied transform together with its own input.
    pub applied: Vec<(AppliedTransform, FeatureBatch)>,
}

/// Everything the backward pass needs.
pub struct Tape {
    start_block: usize,
    blocks: Vec<Option<BlockTape>>,
    hooks: Vec<Option<HookTape>>,
    head_in: FeatureBatch,
    pooled: Vec<f64>,
}

impl Tape {
    pub fn hook(&self, hook: usize) -> Option<&HookTape> {
        self.hooks.get(hook).and_then(Option::as_ref)
    }

    pub fn applied(&self) -> impl Iterator<Item = (usize, &AppliedTransform)> {
        self.hooks.iter().enumerate().flat_map(|(i, h)| {
            h.iter()
                .flat_map(move |h| h.applied.iter().map(move |(t, _)| (i, t)))
        })
    }
}

pub struct Forward {
    /// Row-major `B x K`.
    pub logits: Vec<f64>,
    pub tape: Tape,
}

pub struct Gradients {
    /// Same layout as the flat parameter vector.
    pub params: Vec<f64>,
    /// Gradient with respect to the pre-transform features at each hook
    /// reached by the forward pass.
    pub hook_inputs: Vec<Option<FeatureBatch>>,
}

impl MicroNet {
    /// He-initialized weights and zero biases, drawn from the seed's init stream.
    pub fn new(config: NetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = layout_of(&config);
        let total = layout.last().map(|s| s.offset + s.len()).unwrap_or(0);
        let mut params = vec![0.0; total];
        let mut rng = derive_rng(seed, streams::INIT);
        for spec in &layout {
            if spec.name.ends_with("weight") {
                let fan_in: usize = spec.shape[1..].iter().product();
                let std = if spec.name.starts_with("head") {
                    (1.0 / fan_in as f64).sqrt()
                } else {
                    (2.0 / fan_in as f64).sqrt()
                };
                for p in &mut params[spec.range()] {
                    *p = std * rng.sample::<f64, _>(StandardNormal);
                }
            }
        }
        Ok(Self {
            config,
            layout,
            params,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_hooks(&self) -> usize {
        self.config.num_hooks()
    }

    fn tensor(&self, name: &str) -> &[f64] {
        let spec = self
            .layout
            .iter()
            .find(|s| s.name == name)
            .expect("tensor exists");
        &self.params[spec.range()]
    }

    fn spec(&self, name: &str) -> &TensorSpec {
        self.layout
            .iter()
            .find(|s| s.name == name)
            .expect("tensor exists")
    }

    fn check_input(&self, input: &FeatureBatch, expected: (usize, usize, usize)) -> Result<()> {
        let (_, c, h, w) = input.shape();
        if (c, h, w) != expected {
            return Err(Error::Dimension(format!(
                "expected samples of shape {expected:?}, got {:?}",
                (c, h, w)
            )));
        }
        Ok(())
    }

    fn run_block(&self, i: usize, input: &FeatureBatch) -> BlockTape {
        let shapes = self.config.shapes();
        let block = &self.config.blocks[i];
        let (in_c, h, w) = shapes[i];
        let cs = ConvShape {
            in_c,
            out_c: block.out_channels,
            h,
            w,
            stride: block.stride,
        };
        let (ch, cw) = (cs.out_h(), cs.out_w());
        let weight = self.tensor(&format!("block{}.conv.weight", i + 1));
        let bias = self.tensor(&format!("block{}.conv.bias", i + 1));
        let n = input.batch_size();
        let conv_len = cs.out_c * ch * cw;
        let mut pre_act = vec![0.0; n * conv_len];
        for (b, out) in pre_act.chunks_exact_mut(conv_len).enumerate() {
            conv_forward(&cs, input.sample_slice(b), weight, bias, out);
        }
        let mut act = pre_act.clone();
        relu_in_place(&mut act);
        let out = if block.pool {
            let (oh, ow) = (ch / 2, cw / 2);
            let pooled_len = cs.out_c * oh * ow;
            let mut pooled = vec![0.0; n * pooled_len];
            for (b, o) in pooled.chunks_exact_mut(pooled_len).enumerate() {
                avg_pool_forward(cs.out_c, ch, cw, &act[b * conv_len..(b + 1) * conv_len], o);
            }
            FeatureBatch::from_raw(n, cs.out_c, oh, ow, pooled)
        } else {
            FeatureBatch::from_raw(n, cs.out_c, ch, cw, act)
        };
        BlockTape {
            input: input.clone(),
            pre_act,
            out,
        }
    }

    fn run_hook<R: Rng + ?Sized>(
        &self,
        hook: usize,
        features: FeatureBatch,
        plan: &HookPlan,
        rng: &mut R,
    ) -> Result<(FeatureBatch, HookTape)> {
        let mut x = features.clone();
        let mut applied = Vec::new();
        for module in plan.modules(hook) {
            let t = module.instantiate(&x, rng)?;
            let y = t.forward(&x)?;
            applied.push((t, x));
            x = y;
        }
        Ok((
            x,
            HookTape {
                pre: features,
                applied,
            },
        ))
    }

    fn run_from<R: Rng + ?Sized>(
        &self,
        start_hook: Option<usize>,
        x: FeatureBatch,
        plan: &HookPlan,
        rng: &mut R,
    ) -> Result<Forward> {
        let nb = self.config.blocks.len();
        let mut blocks: Vec<Option<BlockTape>> = (0..nb).map(|_| None).collect();
        let mut hooks: Vec<Option<HookTape>> = (0..nb).map(|_| None).collect();
        let (mut x, first_block) = match start_hook {
            None => (x, 0),
            Some(h) => {
                let (y, tape) = self.run_hook(h, x, plan, rng)?;
                hooks[h] = Some(tape);
                (y, h + 1)
            }
        };
        for i in first_block..nb {
            let bt = self.run_block(i, &x);
            let (y, ht) = self.run_hook(i, bt.out.clone(), plan, rng)?;
            blocks[i] = Some(bt);
            hooks[i] = Some(ht);
            x = y;
        }
        let (n, c, h, w) = x.shape();
        let hw = (h * w) as f64;
        let pooled: Vec<f64> = (0..n * c)
            .map(|k| x.as_slice()[k * h * w..(k + 1) * h * w].iter().sum::<f64>() / hw)
            .collect();
        let k = self.config.classes;
        let weight = self.tensor("head.weight");
        let bias = self.tensor("head.bias");
        let mut logits = vec![0.0; n * k];
        for b in 0..n {
            let f = &pooled[b * c..(b + 1) * c];
            for j in 0..k {
                let row = &weight[j * c..(j + 1) * c];
                logits[b * k + j] = bias[j] + row.iter().zip(f).map(|(a, v)| a * v).sum::<f64>();
            }
        }
        Ok(Forward {
            logits,
            tape: Tape {
                start_block: start_hook.map_or(0, |h| h + 1),
                blocks,
                hooks,
                head_in: x,
                pooled,
            },
        })
    }

    /// Full forward pass with the plan's modules applied at their hooks.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        input: &FeatureBatch,
        plan: &HookPlan,
        rng: &mut R,
    ) -> Result<Forward> {
        self.check_input(input, self.config.shapes()[0])?;
        self.run_from(None, input.clone(), plan, rng)
    }

    /// Forward pass that starts from given pre-transform features at `hook`.
    pub fn forward_from_hook<R: Rng + ?Sized>(
        &self,
        hook: usize,
        features: &FeatureBatch,
        plan: &HookPlan,
        rng: &mut R,
    ) -> Result<Forward> {
        if hook >= self.num_hooks() {
            return Err(Error::Config(format!("hook {hook} does not exist")));
        }
        self.check_input(features, self.config.hook_shape(hook))?;
        self.run_from(Some(hook), features.clone(), plan, rng)
    }

    /// Clean block outputs at `hook`, with no modules applied anywhere.
    pub fn features_at(&self, input: &FeatureBatch, hook: usize) -> Result<FeatureBatch> {
        if hook >= self.num_hooks() {
            return Err(Error::Config(format!("hook {hook} does not exist")));
        }
        self.check_input(input, self.config.shapes()[0])?;
        let mut x = input.clone();
        for i in 0..=hook {
            x = self.run_block(i, &x).out;
        }
        Ok(x)
    }

    /// Reverse pass given `dL/dlogits` (row-major `B x K`).
    pub fn backward(&self, tape: &Tape, grad_logits: &[f64]) -> Result<Gradients> {
        let (n, c, h, w) = tape.head_in.shape();
        let k = self.config.classes;
        if grad_logits.len() != n * k {
            return Err(Error::Dimension(format!(
                "{} logit gradients for {n} x {k} logits",
                grad_logits.len()
            )));
        }
        let mut grads = vec![0.0; self.params.len()];
        let nb = self.config.blocks.len();
        let mut hook_inputs: Vec<Option<FeatureBatch>> = (0..nb).map(|_| None).collect();

        // head
        let hw_spec = self.spec("head.weight").clone();
        let hb_spec = self.spec("head.bias").clone();
        let weight = self.tensor("head.weight");
        let mut grad_pooled = vec![0.0; n * c];
        for b in 0..n {
            let f = &tape.pooled[b * c..(b + 1) * c];
            for j in 0..k {
                let g = grad_logits[b * k + j];
                grads[hb_spec.offset + j] += g;
                for ch in 0..c {
                    grads[hw_spec.offset + j * c + ch] += g * f[ch];
                    grad_pooled[b * c + ch] += g * weight[j * c + ch];
                }
            }
        }
        let hw = (h * w) as f64;
        let mut data = vec![0.0; n * c * h * w];
        for (kidx, plane) in data.chunks_exact_mut(h * w).enumerate() {
            plane.fill(grad_pooled[kidx] / hw);
        }
        let mut grad = FeatureBatch::from_raw(n, c, h, w, data);

        let shapes = self.config.shapes();
        for i in (0..nb).rev() {
            let Some(ht) = tape.hooks[i].as_ref() else {
                break;
            };
            for (t, input) in ht.applied.iter().rev() {
                grad = t.backward(input, &grad)?;
            }
            hook_inputs[i] = Some(grad.clone());
            if i < tape.start_block {
                break;
            }
            let bt = tape.blocks[i]
                .as_ref()
                .ok_or_else(|| Error::Invariant(format!("block {i} missing from tape")))?;
            let block = &self.config.blocks[i];
            let (in_c, ih, iw) = shapes[i];
            let cs = ConvShape {
                in_c,
                out_c: block.out_channels,
                h: ih,
                w: iw,
                stride: block.stride,
            };
            let (ch, cw) = (cs.out_h(), cs.out_w());
            let conv_len = cs.out_c * ch * cw;
            let mut grad_act = vec![0.0; n * conv_len];
            if block.pool {
                for b in 0..n {
                    avg_pool_backward(
                        cs.out_c,
                        ch,
                        cw,
                        grad.sample_slice(b),
                        &mut grad_act[b * conv_len..(b + 1) * conv_len],
                    );
                }
            } else {
                grad_act.copy_from_slice(grad.as_slice());
            }
            for (g, &z) in grad_act.iter_mut().zip(&bt.pre_act) {
                if z <= 0.0 {
                    *g = 0.0;
                }
            }
            let w_spec = self.spec(&format!("block{}.conv.weight", i + 1)).clone();
            let b_spec = self.spec(&format!("block{}.conv.bias", i + 1)).clone();
            let weight = &self.params[w_spec.range()];
            let need_input_grad = i > tape.start_block;
            let mut grad_in = vec![
                0.0;
                if need_input_grad {
                    n * in_c * ih * iw
                } else {
                    0
                }
            ];
            let in_len = in_c * ih * iw;
            for b in 0..n {
                let (gw, rest) = grads.split_at_mut(b_spec.offset);
                let gw = &mut gw[w_spec.offset..];
                let gb = &mut rest[..b_spec.len()];
                let gi = if need_input_grad {
                    Some(&mut grad_in[b * in_len..(b + 1) * in_len])
                } else {
                    None
                };
                conv_backward(
                    &cs,
                    bt.input.sample_slice(b),
                    weight,
                    &grad_act[b * conv_len..(b + 1) * conv_len],
                    gw,
                    gb,
                    gi,
                );
            }
            if !need_input_grad {
                break;
            }
            grad = FeatureBatch::from_raw(n, in_c, ih, iw, grad_in);
        }
        Ok(Gradients {
            params: grads,
            hook_inputs,
        })
    }

    /// Serializes the configuration and every named parameter tensor.
    pub fn to_checkpoint_json(&self) -> String {
        let file = CheckpointFile {
            config: self.config.clone(),
            tensors: self
                .layout
                .iter()
                .map(|s| CheckpointTensor {
                    name: s.name.clone(),
                    shape: s.shape.clone(),
                    values: self.params[s.range()].to_vec(),
                })
                .collect(),
        };
        serde_json::to_string_pretty(&file).expect("checkpoint serializes")
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let file: CheckpointFile = serde_json::from_str(text).map_err(|e| Error::Parse {
            offset: byte_offset(text, e.line(), e.column()),
            message: e.to_string(),
        })?;
        file.config.validate()?;
        let layout = layout_of(&file.config);
        if file.tensors.len() != layout.len() {
            return Err(Error::Config(format!(
                "checkpoint has {} tensors, architecture needs {}",
                file.tensors.len(),
                layout.len()
            )));
        }
        let mut params = Vec::new();
        for (spec, t) in layout.iter().zip(&file.tensors) {
            if spec.name != t.name || spec.shape != t.shape || t.values.len() != spec.len() {
                return Err(Error::Config(format!(
                    "checkpoint tensor {:?} {:?} does not match expected {:?} {:?}",
                    t.name, t.shape, spec.name, spec.shape
                )));
            }
            if let Some(i) = t.values.iter().position(|v| !v.is_finite()) {
                return Err(Error::NonFinite(spec.offset + i));
            }
            params.extend_from_slice(&t.values);
        }
        Ok(Self {
            config: file.config,
            layout,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_checkpoint_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}

#[derive(Serialize, Deserialize)]
struct CheckpointTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    config: NetConfig,
    tensors: Vec<CheckpointTensor>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &[f64], labels: &[usize], classes: usize) -> (f64, Vec<f64>) {
    let n = labels.len();
    let mut grad = vec![0.0; logits.len()];
    let mut loss = 0.0;
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y];
        for j in 0..classes {
            let p = (row[j] - log_z).exp();
            grad[b * classes + j] = (p - if j == y { 1.0 } else { 0.0 }) / n as f64;
        }
    }
    (loss / n as f64, grad)
}

/// Index of the largest logit per row; ties go to the lower class.
pub fn argmax_rows(logits: &[f64], classes: usize) -> Vec<usize> {
    logits
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for j in 1..classes {
                if row[j] > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::derive_rng;

    fn tiny_config() -> NetConfig {
        NetConfig {
            in_channels: 1,
            height: 6,
            width: 6,
            blocks: vec![
                BlockConfig {
                    out_channels: 2,
                    stride: 1,
                    pool: true,
                },
                BlockConfig {
                    out_channels: 3,
                    stride: 1,
                    pool: false,
                },
            ],
            classes: 3,
        }
    }

    #[test]
    fn config_validation() {
        let mut cfg = tiny_config();
        assert!(cfg.validate().is_ok());
        cfg.blocks.truncate(1);
        assert!(cfg.validate().is_err());
        assert_eq!(hook_index("block2", &tiny_config()).unwrap(), 1);
        assert!(hook_index("block3", &tiny_config()).is_err());
        assert!(hook_index("layer1", &tiny_config()).is_err());
    }

    #[test]
    fn zero_weights_give_bias_logits() {
        let mut net = MicroNet::new(tiny_config(), 0).unwrap();
        net.params_mut().fill(0.0);
        let spec = net.spec("head.bias").clone();
        net.params_mut()[spec.range()].copy_from_slice(&[0.5, -1.0, 2.0]);
        let input = FeatureBatch::new(2, 1, 6, 6, (0..72).map(f64::from).collect()).unwrap();
        let mut rng = derive_rng(0, 0);
        let fwd = net
            .forward(&input, &HookPlan::identity(2), &mut rng)
            .unwrap();
        assert_eq!(fwd.logits, vec![0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);
    }

    #[test]
    fn single_pixel_network_by_hand() {
        let cfg = NetConfig {
            in_channels: 1,
            height: 1,
            width: 1,
            blocks: vec![
                BlockConfig {
                    out_channels: 1,
                    stride: 1,
                    pool: false,
                },
                BlockConfig {
                    out_channels: 1,
                    stride: 1,
                    pool: false,
                },
            ],
            classes: 2,
        };
        let mut net = MicroNet::new(cfg, 0).unwrap();
        // block1: centre tap 2, bias -1; block2: centre tap 3, bias 0.5
        // head: [[1], [-1]], bias [0, 0.25]
        let mut p = vec![0.0; net.params().len()];
        p[4] = 2.0;
        p[9] = -1.0;
        p[14] = 3.0;
        p[19] = 0.5;
        p[20] = 1.0;
        p[21] = -1.0;
        p[22] = 0.0;
        p[23] = 0.25;
        net.params_mut().copy_from_slice(&p);
        let x = FeatureBatch::new(2, 1, 1, 1, vec![1.5, 0.2]).unwrap();
        let mut rng = derive_rng(0, 0);
        let fwd = net.forward(&x, &HookPlan::identity(2), &mut rng).unwrap();
        // x=1.5: relu(2*1.5-1)=2, relu(3*2+0.5)=6.5 -> [6.5, -6.25]
        // x=0.2: relu(-0.6)=0, relu(0.5)=0.5 -> [0.5, -0.25]
        assert_eq!(fwd.logits, vec![6.5, -6.25, 0.5, -0.25]);
    }

    #[test]
    fn zero_upstream_gradient_gives_zero_gradients() {
        let net = MicroNet::new(tiny_config(), 3).unwrap();
        let input =
            FeatureBatch::new(2, 1, 6, 6, (0..72).map(|i| (i as f64).sin()).collect()).unwrap();
        let mut rng = derive_rng(0, 0);
        let fwd = net
            .forward(&input, &HookPlan::identity(2), &mut rng)
            .unwrap();
        let g = net.backward(&fwd.tape, &[0.0; 6]).unwrap();
        assert!(g.params.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn checkpoint_round_trip_is_byte_identical() {
        let net = MicroNet::new(tiny_config(), 11).unwrap();
        let text = net.to_checkpoint_json();
        let back = MicroNet::from_checkpoint_json(&text).unwrap();
        assert_eq!(back, net);
        assert_eq!(back.to_checkpoint_json(), text);
        assert!(matches!(
            MicroNet::from_checkpoint_json(&text[..text.len() / 2]),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_sums_to_zero() {
        let (loss, g) = softmax_cross_entropy(&[1.0, 2.0, 0.5, 0.0, 0.0, 0.0], &[1, 2], 3);
        assert!(loss > 0.0);
        for row in g.chunks(3) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        assert_eq!(argmax_rows(&[1.0, 1.0, 0.0], 3), vec![0]);
    }
}

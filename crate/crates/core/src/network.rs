//! Hyper Vision Net: CoordConv input, residual U-Net encoder/decoder, two
//! hyper-vision heads and optional CBAM fusion.
//!
//! Parameter names are stable and form the checkpoint contract:
//! `enc{s}.conv.weight`, `enc{s}.bn.gamma`, `enc{s}.res{r}.conv1.weight`,
//! `mid.*`, `dec{d}.*`, `hv1.weight`, `attn.channel.fc1.weight`,
//! `attn.spatial.weight`, `out.weight`, ... Convolutions feeding a batch
//! norm carry no bias.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autograd::{BatchNormConfig, Mode, Padding, PoolKind, RunningStats, Tape, Var};
use crate::data::NUM_CLASSES;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Number of encoder (and decoder) stages.
pub const DEPTH: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub dropout_rate: f64,
    pub use_attention: bool,
    /// Channel-attention reduction; hidden width is `ceil(C / r)`.
    pub attention_reduction: usize,
    pub spatial_attention_kernel: usize,
    pub elu_alpha: f64,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            in_channels: 1,
            num_classes: NUM_CLASSES,
            base_channels: 16,
            depth: DEPTH,
            dropout_rate: 0.1,
            use_attention: true,
            attention_reduction: 8,
            spatial_attention_kernel: 7,
            elu_alpha: 1.0,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(Error::Config(detail));
        if self.in_channels == 0 {
            return bad("in_channels must be >= 1".into());
        }
        if self.num_classes != NUM_CLASSES {
            return bad(format!("num_classes is fixed at {NUM_CLASSES}, got {}", self.num_classes));
        }
        if self.depth != DEPTH {
            return bad(format!("depth is fixed at {DEPTH}, got {}", self.depth));
        }
        if self.base_channels < self.num_classes {
            return bad(format!("base_channels {} must be >= num_classes {}", self.base_channels, self.num_classes));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate must lie in [0, 1), got {}", self.dropout_rate));
        }
        if self.attention_reduction == 0 {
            return bad("attention_reduction must be >= 1".into());
        }
        if self.spatial_attention_kernel.is_multiple_of(2) {
            return bad(format!("spatial_attention_kernel must be odd, got {}", self.spatial_attention_kernel));
        }
        if !(self.elu_alpha > 0.0 && self.elu_alpha.is_finite()) {
            return bad(format!("elu_alpha must be positive and finite, got {}", self.elu_alpha));
        }
        Ok(())
    }

    /// Spatial extents must be divisible by this.
    pub fn divisor(&self) -> usize {
        1 << self.depth
    }

    /// Channels of the fused map: two hyper-vision logit maps plus the last decoder stage.
    pub fn fused_channels(&self) -> usize {
        2 * self.num_classes + self.base_channels
    }

    pub fn attention_hidden(&self) -> usize {
        self.fused_channels().div_ceil(self.attention_reduction)
    }

    fn stage_channels(&self, s: usize) -> usize {
        self.base_channels << s
    }
}

/// A named trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ModelConfig,
    params: Vec<Param>,
    index: BTreeMap<String, usize>,
    /// Running statistics per batch-norm layer, keyed by layer prefix (e.g. `enc0.bn`).
    stats: Vec<(String, RunningStats)>,
    stats_index: BTreeMap<String, usize>,
    pub bn: BatchNormConfig,
}

/// Tape handles of every parameter, in [`Model::parameters`] order.
#[derive(Debug, Clone)]
pub struct ParamVars(pub Vec<Var>);

/// The three supervised outputs, each `[B,3,H,W]` class probabilities.
#[derive(Debug, Clone, Copy)]
pub struct Heads {
    pub hv1: Var,
    pub hv2: Var,
    pub out: Var,
}

impl Heads {
    pub fn all(&self) -> [Var; 3] {
        [self.hv1, self.hv2, self.out]
    }
}

struct Builder<'a> {
    config: &'a ModelConfig,
    params: Vec<Param>,
    stats: Vec<(String, RunningStats)>,
}

impl Builder<'_> {
    fn he(&mut self, name: String, shape: [usize; 4]) {
        let fan_in = shape[1] * shape[2] * shape[3];
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_named(self.config.init_seed, &name));
        let value = Tensor::rand_normal(&shape, (2.0 / fan_in as f64).sqrt(), &mut rng);
        self.params.push(Param { name, value });
    }

    fn zeros(&mut self, name: String, len: usize) {
        self.params.push(Param { name, value: Tensor::zeros(&[len]) });
    }

    fn conv(&mut self, prefix: &str, cin: usize, cout: usize, k: usize, bias: bool) {
        self.he(format!("{prefix}.weight"), [cout, cin, k, k]);
        if bias {
            self.zeros(format!("{prefix}.bias"), cout);
        }
    }

    fn bn(&mut self, prefix: &str, c: usize) {
        self.params.push(Param { name: format!("{prefix}.gamma"), value: Tensor::ones(&[c]) });
        self.zeros(format!("{prefix}.beta"), c);
        self.stats.push((prefix.to_string(), RunningStats::new(c)));
    }

    fn conv_bn(&mut self, prefix: &str, cin: usize, cout: usize) {
        self.conv(&format!("{prefix}.conv"), cin, cout, 3, false);
        self.bn(&format!("{prefix}.bn"), cout);
    }

    fn residual(&mut self, prefix: &str, c: usize) {
        for i in 1..=2 {
            self.conv(&format!("{prefix}.conv{i}"), c, c, 3, false);
            self.bn(&format!("{prefix}.bn{i}"), c);
        }
    }
}

impl Model {
    /// Builds and initialises a model; a pure function of `config`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let cfg = &config;
        let mut b = Builder { config: cfg, params: Vec::new(), stats: Vec::new() };
        let mut cin = cfg.in_channels + 2;
        for s in 0..cfg.depth {
            let c = cfg.stage_channels(s);
            b.conv_bn(&format!("enc{s}"), cin, c);
            b.residual(&format!("enc{s}.res0"), c);
            b.residual(&format!("enc{s}.res1"), c);
            cin = c;
        }
        let cmid = cfg.stage_channels(cfg.depth);
        b.conv_bn("mid", cin, cmid);
        b.residual("mid.res0", cmid);
        cin = cmid;
        for d in 0..cfg.depth {
            let c = cfg.stage_channels(cfg.depth - 1 - d);
            b.conv_bn(&format!("dec{d}"), cin + c, c);
            b.residual(&format!("dec{d}.res0"), c);
            b.residual(&format!("dec{d}.res1"), c);
            cin = c;
        }
        b.conv("hv1", cfg.stage_channels(2), cfg.num_classes, 1, true);
        b.conv("hv2", cfg.stage_channels(1), cfg.num_classes, 1, true);
        let cf = cfg.fused_channels();
        if cfg.use_attention {
            let hidden = cfg.attention_hidden();
            b.conv("attn.channel.fc1", cf, hidden, 1, true);
            b.conv("attn.channel.fc2", hidden, cf, 1, true);
            b.conv("attn.spatial", 2, 1, cfg.spatial_attention_kernel, true);
        }
        b.conv("out", cf, cfg.num_classes, 1, true);

        let (params, stats) = (b.params, b.stats);
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        let stats_index = stats.iter().enumerate().map(|(i, (n, _))| (n.clone(), i)).collect();
        Ok(Self { config, params, index, stats, stats_index, bn: BatchNormConfig::default() })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn parameters(&self) -> &[Param] {
        &self.params
    }

    pub fn parameters_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.params[i].value)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index.get(name).map(|&i| &mut self.params[i].value)
    }

    /// Total number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn running_stats(&self) -> &[(String, RunningStats)] {
        &self.stats
    }

    /// Parameters followed by running statistics (`<layer>.running_mean`,
    /// `<layer>.running_var`), the full persistent state.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out: Vec<(String, Tensor)> = self.params.iter().map(|p| (p.name.clone(), p.value.clone())).collect();
        for (name, s) in &self.stats {
            let c = s.mean.len();
            out.push((format!("{name}.running_mean"), Tensor::from_parts(vec![c], s.mean.clone())));
            out.push((format!("{name}.running_var"), Tensor::from_parts(vec![c], s.var.clone())));
        }
        out
    }

    /// Restores every tensor of [`state_tensors`](Self::state_tensors); names and shapes must match exactly.
    pub fn load_state_tensors(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let expected = self.params.len() + 2 * self.stats.len();
        if tensors.len() != expected {
            return Err(Error::invalid(
                "load_state",
                format!("expected {expected} tensors for this configuration, found {}", tensors.len()),
            ));
        }
        for (name, t) in tensors {
            let target: &mut [f64] = if let Some(&i) = self.index.get(name) {
                let p = &mut self.params[i].value;
                if p.shape() != t.shape() {
                    return Err(Error::shape("load_state", format!("{name}: expected {:?}, found {:?}", p.shape(), t.shape())));
                }
                p.data_mut()
            } else {
                let (layer, field) = name
                    .rsplit_once('.')
                    .ok_or_else(|| Error::invalid("load_state", format!("unknown tensor {name:?}")))?;
                let &i = self
                    .stats_index
                    .get(layer)
                    .ok_or_else(|| Error::invalid("load_state", format!("unknown tensor {name:?}")))?;
                let s = &mut self.stats[i].1;
                let v = match field {
                    "running_mean" => &mut s.mean,
                    "running_var" => &mut s.var,
                    _ => return Err(Error::invalid("load_state", format!("unknown tensor {name:?}"))),
                };
                if t.shape() != [v.len()] {
                    return Err(Error::shape("load_state", format!("{name}: expected [{}], found {:?}", v.len(), t.shape())));
                }
                v
            };
            target.copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Records every parameter on `tape`, tracked iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> ParamVars {
        ParamVars(
            self.params
                .iter()
                .map(|p| if trainable { tape.param(p.value.clone()) } else { tape.constant(p.value.clone()) })
                .collect(),
        )
    }

    /// Forward pass with freshly bound parameters (tracked in train mode).
    pub fn forward(&mut self, tape: &mut Tape, input: &Tensor, mode: Mode, dropout_seed: u64) -> Result<(Heads, ParamVars)> {
        let vars = self.bind(tape, mode == Mode::Train);
        let x = tape.constant(input.clone());
        let heads = self.forward_with(tape, &vars, x, mode, dropout_seed)?;
        Ok((heads, vars))
    }

    /// Forward pass over externally bound parameters. Train mode updates the running statistics.
    pub fn forward_with(&mut self, tape: &mut Tape, vars: &ParamVars, input: Var, mode: Mode, dropout_seed: u64) -> Result<Heads> {
        let mut stats = std::mem::take(&mut self.stats);
        let result = Forward { model: self, stats: &mut stats, tape, vars, mode, seed: dropout_seed }.run(input);
        self.stats = stats;
        result
    }

    /// Eval-mode probabilities of all three heads `[hv1, hv2, out]`; leaves the model untouched.
    pub fn infer_heads(&self, input: &Tensor) -> Result<[Tensor; 3]> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let mut stats = self.stats.clone();
        let heads = Forward { model: self, stats: &mut stats, tape: &mut tape, vars: &vars, mode: Mode::Eval, seed: 0 }.run(x)?;
        Ok(heads.all().map(|h| tape.value(h).clone()))
    }

    /// Eval-mode class probabilities of the final head.
    pub fn infer(&self, input: &Tensor) -> Result<Tensor> {
        let [_, _, out] = self.infer_heads(input)?;
        Ok(out)
    }

    /// Scoped access to individual blocks on an existing tape.
    pub fn blocks<'a>(&'a self, tape: &'a mut Tape, vars: &'a ParamVars, stats: &'a mut Vec<(String, RunningStats)>, mode: Mode, seed: u64) -> Forward<'a> {
        Forward { model: self, stats, tape, vars, mode, seed }
    }
}

/// One forward evaluation: model, tape, bound parameters and mode.
pub struct Forward<'a> {
    model: &'a Model,
    stats: &'a mut Vec<(String, RunningStats)>,
    pub tape: &'a mut Tape,
    vars: &'a ParamVars,
    mode: Mode,
    seed: u64,
}

/// Appends normalised row (`i`) and column (`j`) coordinate channels in `[-1, 1]`.
pub fn coordconv_augment(tape: &mut Tape, input: Var) -> Result<Var> {
    let (b, _, h, w) = tape.value(input).dims4("coordconv_augment")?;
    let norm = |r: usize, n: usize| if n == 1 { 0.0 } else { 2.0 * r as f64 / (n - 1) as f64 - 1.0 };
    let mut coords = Vec::with_capacity(b * 2 * h * w);
    for _ in 0..b {
        coords.extend((0..h).flat_map(|r| std::iter::repeat_n(norm(r, h), w)));
        coords.extend((0..h).flat_map(|_| (0..w).map(|c| norm(c, w))));
    }
    let coords = tape.constant(Tensor::from_parts(vec![b, 2, h, w], coords));
    tape.concat_channels(&[input, coords])
}

impl Forward<'_> {
    fn p(&self, name: &str) -> Result<Var> {
        self.model
            .index
            .get(name)
            .map(|&i| self.vars.0[i])
            .ok_or_else(|| Error::invalid("forward", format!("missing parameter {name:?}")))
    }

    fn conv(&mut self, prefix: &str, x: Var, padding: Padding) -> Result<Var> {
        let k = self.p(&format!("{prefix}.weight"))?;
        let bias = match self.p(&format!("{prefix}.bias")) {
            Ok(b) => b,
            Err(_) => {
                let cout = self.tape.value(k).shape()[0];
                self.tape.constant(Tensor::zeros(&[cout]))
            }
        };
        self.tape.conv2d(x, k, bias, padding)
    }

    fn bn(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let gamma = self.p(&format!("{prefix}.gamma"))?;
        let beta = self.p(&format!("{prefix}.beta"))?;
        let &i = self
            .model
            .stats_index
            .get(prefix)
            .ok_or_else(|| Error::invalid("forward", format!("missing batch-norm layer {prefix:?}")))?;
        self.tape.batch_norm(x, gamma, beta, &mut self.stats[i].1, self.model.bn, self.mode)
    }

    fn elu(&mut self, x: Var) -> Result<Var> {
        self.tape.elu(x, self.model.config.elu_alpha)
    }

    fn dropout(&mut self, name: &str, x: Var) -> Result<Var> {
        let seed = seed::derive_named(self.seed, name);
        self.tape.dropout(x, self.model.config.dropout_rate, self.mode, seed)
    }

    /// conv3×3 → BN → ELU.
    fn conv_bn_elu(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let y = self.conv(&format!("{prefix}.conv"), x, Padding::Same)?;
        let y = self.bn(&format!("{prefix}.bn"), y)?;
        self.elu(y)
    }

    /// conv → BN → ELU → conv → BN → (+ input) → ELU.
    pub fn residual_block(&mut self, prefix: &str, x: Var) -> Result<Var> {
        let c = self.tape.value(x).shape().get(1).copied().unwrap_or(0);
        let k = self.p(&format!("{prefix}.conv1.weight"))?;
        let expect = self.tape.value(k).shape()[1];
        if c != expect {
            return Err(Error::shape("residual_block", format!("{prefix}: input channels (dim 1) {c}, block expects {expect}")));
        }
        let y = self.conv(&format!("{prefix}.conv1"), x, Padding::Same)?;
        let y = self.bn(&format!("{prefix}.bn1"), y)?;
        let y = self.elu(y)?;
        let y = self.conv(&format!("{prefix}.conv2"), y, Padding::Same)?;
        let y = self.bn(&format!("{prefix}.bn2"), y)?;
        let y = self.tape.add(y, x)?;
        self.elu(y)
    }

    /// Stage `s`: returns `(features, pooled)`.
    pub fn encoder_block(&mut self, s: usize, x: Var) -> Result<(Var, Var)> {
        let (_, _, h, w) = self.tape.value(x).dims4("encoder_block")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("encoder_block", format!("stage {s}: extents {h}x{w} must be even")));
        }
        let prefix = format!("enc{s}");
        let y = self.conv_bn_elu(&prefix, x)?;
        let y = self.residual_block(&format!("{prefix}.res0"), y)?;
        let y = self.residual_block(&format!("{prefix}.res1"), y)?;
        let features = self.dropout(&prefix, y)?;
        let pooled = self.tape.maxpool2d(features, 2)?;
        Ok((features, pooled))
    }

    pub fn bottleneck(&mut self, x: Var) -> Result<Var> {
        let y = self.conv_bn_elu("mid", x)?;
        self.residual_block("mid.res0", y)
    }

    /// Stage `d`: upsample, concatenate the skip, halve channels.
    pub fn decoder_block(&mut self, d: usize, x: Var, skip: Var) -> Result<Var> {
        let up = self.tape.upsample_nearest2d(x, 2)?;
        let (us, ss) = (self.tape.value(up).shape(), self.tape.value(skip).shape());
        if us[0] != ss[0] || us[2..] != ss[2..] {
            return Err(Error::shape("decoder_block", format!("stage {d}: upsampled input {us:?} vs skip {ss:?}")));
        }
        let prefix = format!("dec{d}");
        let y = self.tape.concat_channels(&[up, skip])?;
        let y = self.conv_bn_elu(&prefix, y)?;
        let y = self.residual_block(&format!("{prefix}.res0"), y)?;
        let y = self.residual_block(&format!("{prefix}.res1"), y)?;
        self.dropout(&prefix, y)
    }

    /// `sigmoid(MLP(avg) + MLP(max))`, `[B,C,1,1]`.
    pub fn channel_attention(&mut self, f: Var) -> Result<Var> {
        let avg = self.tape.global_pool(f, PoolKind::Avg)?;
        let max = self.tape.global_pool(f, PoolKind::Max)?;
        let branch = |this: &mut Self, v: Var| -> Result<Var> {
            let h = this.conv("attn.channel.fc1", v, Padding::Valid)?;
            let h = this.elu(h)?;
            this.conv("attn.channel.fc2", h, Padding::Valid)
        };
        let a = branch(self, avg)?;
        let m = branch(self, max)?;
        let s = self.tape.add(a, m)?;
        self.tape.sigmoid(s)
    }

    /// `sigmoid(conv(concat(mean_c, max_c)))`, `[B,1,H,W]`.
    pub fn spatial_attention(&mut self, f: Var) -> Result<Var> {
        let avg = self.tape.channel_pool(f, PoolKind::Avg)?;
        let max = self.tape.channel_pool(f, PoolKind::Max)?;
        let both = self.tape.concat_channels(&[avg, max])?;
        let s = self.conv("attn.spatial", both, Padding::Same)?;
        self.tape.sigmoid(s)
    }

    /// Channel then spatial gating.
    pub fn cbam(&mut self, f: Var) -> Result<Var> {
        let mc = self.channel_attention(f)?;
        let f1 = self.tape.mul(f, mc)?;
        let ms = self.spatial_attention(f1)?;
        self.tape.mul(f1, ms)
    }

    pub fn run(&mut self, input: Var) -> Result<Heads> {
        let cfg = self.model.config.clone();
        let (b, c, h, w) = self.tape.value(input).dims4("forward")?;
        if c != cfg.in_channels {
            return Err(Error::shape("forward", format!("input channels (dim 1) {c}, model expects {}", cfg.in_channels)));
        }
        let div = cfg.divisor();
        if h % div != 0 || w % div != 0 {
            return Err(Error::shape("forward", format!("extents {h}x{w} must be divisible by {div}")));
        }
        let _ = b;
        let mut x = coordconv_augment(self.tape, input)?;
        let mut skips = Vec::with_capacity(cfg.depth);
        for s in 0..cfg.depth {
            let (features, pooled) = self.encoder_block(s, x)?;
            skips.push(features);
            x = pooled;
        }
        x = self.bottleneck(x)?;
        let mut taps = Vec::new();
        for d in 0..cfg.depth {
            x = self.decoder_block(d, x, skips[cfg.depth - 1 - d])?;
            if d == 1 || d == 2 {
                taps.push(x);
            }
        }
        let hv1_logits = self.conv("hv1", taps[0], Padding::Valid)?;
        let hv1_logits = self.tape.upsample_nearest2d(hv1_logits, 4)?;
        let hv2_logits = self.conv("hv2", taps[1], Padding::Valid)?;
        let hv2_logits = self.tape.upsample_nearest2d(hv2_logits, 2)?;
        let mut fused = self.tape.concat_channels(&[hv1_logits, hv2_logits, x])?;
        if cfg.use_attention {
            let att = self.cbam(fused)?;
            fused = self.tape.add(fused, att)?;
        }
        let logits = self.conv("out", fused, Padding::Valid)?;
        Ok(Heads {
            hv1: self.tape.softmax_channels(hv1_logits)?,
            hv2: self.tape.softmax_channels(hv2_logits)?,
            out: self.tape.softmax_channels(logits)?,
        })
    }
}

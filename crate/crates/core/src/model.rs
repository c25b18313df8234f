//! Staged FCViT backbones: configuration, presets, parameter registry,
//! analytic parameter/FLOP counts, and the end-to-end forward pass.
//!
//! A model is a sequence of stages. Each stage starts with an overlapped
//! patch embedding that reduces the spatial extent by its stride, followed
//! by a run of FCViT blocks at constant resolution. A classifier head
//! (global average pool, LayerNorm, linear) produces the logits.
//! Isotropic variants are the single-stage special case with a
//! non-overlapping patchify stem.
//!
//! Every parameter has a stable dotted name (`stages.1.blocks.0.channel.
//! expand.weight`, ...). [`Model::visit`] and [`Model::visit_mut`]
//! enumerate them in a fixed order, which the weight file format, the
//! optimizer, and the tape binder all share.

use crate::autograd::{Graph, Var};
use crate::block::{
    forward_block, BlockParams, BoundBlock, ConvParams, LinearParams, MixerOptions, NormParams,
    LN_EPS,
};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{Element, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Geometry of one overlapped patch embedding.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EmbedConfig {
    pub kernel: usize,
    pub stride: usize,
}

/// One stage: feature width, block count, and channel-mixer expansion.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub dim: usize,
    pub depth: usize,
    pub mlp_ratio: usize,
}

/// Complete architectural description of one model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub name: String,
    pub in_channels: usize,
    pub num_classes: usize,
    pub stages: Vec<StageConfig>,
    pub embeds: Vec<EmbedConfig>,
    pub mixer_kernel: usize,
    pub mixer_reps: usize,
    pub groups: usize,
    pub reduction: usize,
}

/// Names of the built-in configurations, in presentation order.
pub const PRESET_NAMES: [&str; 7] =
    ["tiny", "b12", "b24", "b48", "iso-256-12", "iso-384-16", "micro"];

impl ModelConfig {
    fn hierarchical(name: &str, dims: [usize; 4], depths: [usize; 4]) -> Self {
        ModelConfig {
            name: name.to_string(),
            in_channels: 3,
            num_classes: 1000,
            stages: dims
                .iter()
                .zip(depths)
                .zip([8, 8, 4, 4])
                .map(|((&dim, depth), mlp_ratio)| StageConfig { dim, depth, mlp_ratio })
                .collect(),
            embeds: vec![
                EmbedConfig { kernel: 7, stride: 4 },
                EmbedConfig { kernel: 3, stride: 2 },
                EmbedConfig { kernel: 3, stride: 2 },
                EmbedConfig { kernel: 3, stride: 2 },
            ],
            mixer_kernel: 11,
            mixer_reps: 2,
            groups: 8,
            reduction: 8,
        }
    }

    fn isotropic(name: &str, dim: usize, depth: usize) -> Self {
        ModelConfig {
            name: name.to_string(),
            in_channels: 3,
            num_classes: 1000,
            stages: vec![StageConfig { dim, depth, mlp_ratio: 4 }],
            embeds: vec![EmbedConfig { kernel: 16, stride: 16 }],
            mixer_kernel: 11,
            mixer_reps: 2,
            groups: 8,
            reduction: 8,
        }
    }

    /// A built-in configuration by name, or `None` for unknown names.
    pub fn preset(name: &str) -> Option<Self> {
        let config = match name {
            "tiny" => Self::hierarchical("tiny", [32, 64, 160, 320], [3, 3, 5, 2]),
            "b12" => Self::hierarchical("b12", [64, 128, 320, 512], [2, 2, 6, 2]),
            "b24" => Self::hierarchical("b24", [64, 128, 320, 512], [4, 4, 12, 4]),
            "b48" => Self::hierarchical("b48", [64, 128, 320, 512], [8, 8, 24, 8]),
            "iso-256-12" => Self::isotropic("iso-256-12", 256, 12),
            "iso-384-16" => Self::isotropic("iso-384-16", 384, 16),
            "micro" => ModelConfig {
                name: "micro".to_string(),
                in_channels: 3,
                num_classes: 4,
                stages: [8, 16, 32, 64]
                    .iter()
                    .zip([1, 1, 2, 1])
                    .map(|(&dim, depth)| StageConfig { dim, depth, mlp_ratio: 4 })
                    .collect(),
                embeds: vec![
                    EmbedConfig { kernel: 7, stride: 4 },
                    EmbedConfig { kernel: 3, stride: 2 },
                    EmbedConfig { kernel: 3, stride: 2 },
                    EmbedConfig { kernel: 3, stride: 2 },
                ],
                mixer_kernel: 3,
                mixer_reps: 2,
                groups: 4,
                reduction: 4,
            },
            _ => return None,
        };
        Some(config)
    }

    /// Rejects structurally impossible configurations with a description
    /// of the first problem found.
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.stages.is_empty() {
            return fail("at least one stage is required".into());
        }
        if self.embeds.len() != self.stages.len() {
            return fail(format!(
                "{} embeddings for {} stages; each stage needs exactly one",
                self.embeds.len(),
                self.stages.len()
            ));
        }
        if self.in_channels == 0 || self.num_classes == 0 {
            return fail("in_channels and num_classes must be positive".into());
        }
        if self.mixer_kernel % 2 == 0 || self.mixer_kernel == 0 {
            return fail(format!("mixer kernel must be odd, got {}", self.mixer_kernel));
        }
        if self.mixer_reps == 0 {
            return fail("mixer_reps must be at least 1".into());
        }
        for (i, e) in self.embeds.iter().enumerate() {
            if e.stride == 0 || e.kernel < e.stride {
                return fail(format!(
                    "embedding {i}: kernel {} must be at least stride {} (stride positive)",
                    e.kernel, e.stride
                ));
            }
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.depth == 0 || s.mlp_ratio == 0 {
                return fail(format!("stage {i}: depth and mlp_ratio must be positive"));
            }
            if s.dim == 0 || self.groups == 0 || s.dim % self.groups != 0 {
                return fail(format!(
                    "stage {i}: dim {} must divide into {} similarity groups",
                    s.dim, self.groups
                ));
            }
            if self.reduction == 0 || s.dim % self.reduction != 0 {
                return fail(format!(
                    "stage {i}: dim {} is not reducible by {}",
                    s.dim, self.reduction
                ));
            }
        }
        Ok(())
    }

    /// Spatial extents after each stage for an `h x w` input. Fails if any
    /// stride does not divide its incoming extent.
    pub fn spatial_trace(&self, h: usize, w: usize) -> Result<Vec<(usize, usize)>> {
        let (mut h, mut w) = (h, w);
        let mut trace = Vec::with_capacity(self.stages.len());
        for (i, e) in self.embeds.iter().enumerate() {
            if h == 0 || w == 0 || h % e.stride != 0 || w % e.stride != 0 {
                return Err(Error::invalid(
                    "spatial_trace",
                    format!("stage {i}: extent {h}x{w} is not divisible by stride {}", e.stride),
                ));
            }
            h /= e.stride;
            w /= e.stride;
            trace.push((h, w));
        }
        Ok(trace)
    }

    fn token_rep_params(&self, dim: usize) -> u64 {
        let (d, r, g, k) = (dim as u64, self.reduction as u64, self.groups as u64, self.mixer_kernel as u64);
        let norm = 2 * d;
        let squeeze = 2 * (d * (d / r) + d / r);
        let recover = (d / r) * d + d;
        let affine = 2 * g;
        let dw = d * k * k + d;
        norm + squeeze + recover + affine + dw
    }

    fn channel_mixer_params(&self, dim: usize, mlp_ratio: usize) -> u64 {
        let (d, m) = (dim as u64, mlp_ratio as u64);
        let norm = 2 * d;
        let expand = d * m * d + m * d;
        let dw = 9 * m * d + m * d;
        let project = m * d * d + d;
        norm + expand + dw + project
    }

    /// Total learnable parameters, computed from the architecture alone.
    /// [`Model::param_count`] must agree exactly; a test pins the two
    /// together.
    pub fn count_params(&self) -> u64 {
        let mut total = 0u64;
        let mut prev = self.in_channels as u64;
        for (stage, embed) in self.stages.iter().zip(&self.embeds) {
            let (d, k) = (stage.dim as u64, embed.kernel as u64);
            total += prev * d * k * k + d + 2 * d;
            total += stage.depth as u64
                * (self.mixer_reps as u64 * self.token_rep_params(stage.dim)
                    + self.channel_mixer_params(stage.dim, stage.mlp_ratio));
            prev = d;
        }
        total += 2 * prev + prev * self.num_classes as u64 + self.num_classes as u64;
        total
    }

    /// Multiply-accumulate count for one sample at `h x w`. Convolutions
    /// cost `out_extent^2 * out_channels * kernel^2 * in_channels /
    /// groups`, dense maps cost `in * out`, and each mixer repetition adds
    /// `n * dim` for the similarity and again for the modulation.
    /// Normalizations, pooling, biases, activations, and residuals are not
    /// counted.
    pub fn count_flops(&self, h: usize, w: usize) -> Result<FlopsReport> {
        self.validate()?;
        let trace = self.spatial_trace(h, w)?;
        let mut report = FlopsReport { embeds: 0, stages: Vec::new(), head: 0, total: 0 };
        let mut prev = self.in_channels as u64;
        for ((stage, embed), &(sh, sw)) in self.stages.iter().zip(&self.embeds).zip(&trace) {
            let n = (sh * sw) as u64;
            let (d, m) = (stage.dim as u64, stage.mlp_ratio as u64);
            report.embeds += n * d * (embed.kernel as u64).pow(2) * prev;
            let (k, r) = (self.mixer_kernel as u64, self.reduction as u64);
            let rep = 3 * d * d / r + n * d + n * d + n * d * k * k;
            let channel = n * d * m * d + n * 9 * m * d + n * m * d * d;
            report
                .stages
                .push(stage.depth as u64 * (self.mixer_reps as u64 * rep + channel));
            prev = d;
        }
        report.head = prev * self.num_classes as u64;
        report.total =
            report.embeds + report.stages.iter().sum::<u64>() + report.head;
        Ok(report)
    }
}

/// Per-section multiply-accumulate counts from [`ModelConfig::count_flops`].
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsReport {
    pub embeds: u64,
    pub stages: Vec<u64>,
    pub head: u64,
    pub total: u64,
}

/// Overlapped patch embedding: asymmetric zero-pad, strided conv, channel
/// LayerNorm. The padding totals `kernel - stride` per axis, split
/// `min(kernel/2, total)` before and the remainder after, so the output
/// extent is exactly `input / stride`.
#[derive(Clone, Debug)]
pub struct PatchEmbed<E: Element> {
    pub conv: ConvParams<E>,
    pub norm: NormParams<E>,
}

impl<E: Element> PatchEmbed<E> {
    fn spec(in_channels: usize, dim: usize, e: &EmbedConfig) -> ConvSpec {
        ConvSpec {
            in_channels,
            out_channels: dim,
            kernel: e.kernel,
            stride: e.stride,
            padding: 0,
            groups: 1,
        }
    }

    pub fn init(in_channels: usize, dim: usize, e: &EmbedConfig, rng: &mut ChaCha8Rng) -> Self {
        PatchEmbed {
            conv: ConvParams::init(Self::spec(in_channels, dim, e), rng),
            norm: NormParams::init(dim),
        }
    }

    pub fn zeros(in_channels: usize, dim: usize, e: &EmbedConfig) -> Self {
        PatchEmbed {
            conv: ConvParams::zeros(Self::spec(in_channels, dim, e)),
            norm: NormParams::init(dim),
        }
    }

    /// (before, after) padding for one spatial axis.
    pub fn padding(&self) -> (usize, usize) {
        let total = self.conv.spec.kernel - self.conv.spec.stride;
        let before = (self.conv.spec.kernel / 2).min(total);
        (before, total - before)
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.conv.visit(&format!("{prefix}.conv"), f);
        self.norm.visit(&format!("{prefix}.norm"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.conv.visit_mut(&format!("{prefix}.conv"), f);
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
    }
}

/// A fully materialized model: configuration plus every weight tensor.
#[derive(Clone, Debug)]
pub struct Model<E: Element> {
    pub config: ModelConfig,
    pub embeds: Vec<PatchEmbed<E>>,
    pub stages: Vec<Vec<BlockParams<E>>>,
    pub head_norm: NormParams<E>,
    pub head: LinearParams<E>,
}

impl<E: Element> Model<E> {
    /// Builds a model with seeded truncated-normal weights. The same seed
    /// always produces bit-identical parameters.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut embeds = Vec::new();
        let mut stages = Vec::new();
        let mut prev = config.in_channels;
        for (stage, embed) in config.stages.iter().zip(&config.embeds) {
            embeds.push(PatchEmbed::init(prev, stage.dim, embed, &mut rng));
            let blocks = (0..stage.depth)
                .map(|_| {
                    BlockParams::init(
                        stage.dim,
                        stage.mlp_ratio,
                        config.mixer_kernel,
                        config.groups,
                        config.reduction,
                        config.mixer_reps,
                        &mut rng,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            prev = stage.dim;
        }
        let head_norm = NormParams::init(prev);
        let head = LinearParams::init(config.num_classes, prev, &mut rng);
        Ok(Model { config, embeds, stages, head_norm, head })
    }

    /// Builds the model with all-zero weights (norm scales still one), the
    /// shape template that weight loading fills in.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut embeds = Vec::new();
        let mut stages = Vec::new();
        let mut prev = config.in_channels;
        for (stage, embed) in config.stages.iter().zip(&config.embeds) {
            embeds.push(PatchEmbed::zeros(prev, stage.dim, embed));
            let blocks = (0..stage.depth)
                .map(|_| {
                    BlockParams::zeros(
                        stage.dim,
                        stage.mlp_ratio,
                        config.mixer_kernel,
                        config.groups,
                        config.reduction,
                        config.mixer_reps,
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
            prev = stage.dim;
        }
        let head_norm = NormParams::init(prev);
        let head = LinearParams::zeros(config.num_classes, prev);
        Ok(Model { config, embeds, stages, head_norm, head })
    }

    /// Enumerates every parameter as `(name, tensor)` in the fixed
    /// registry order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, embed) in self.embeds.iter().enumerate() {
            embed.visit(&format!("embeds.{i}"), f);
        }
        for (s, blocks) in self.stages.iter().enumerate() {
            for (b, block) in blocks.iter().enumerate() {
                block.visit(&format!("stages.{s}.blocks.{b}"), f);
            }
        }
        self.head_norm.visit("head.norm", f);
        self.head.visit("head.fc", f);
    }

    /// Mutable twin of [`Model::visit`], same names and order.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, embed) in self.embeds.iter_mut().enumerate() {
            embed.visit_mut(&format!("embeds.{i}"), f);
        }
        for (s, blocks) in self.stages.iter_mut().enumerate() {
            for (b, block) in blocks.iter_mut().enumerate() {
                block.visit_mut(&format!("stages.{s}.blocks.{b}"), f);
            }
        }
        self.head_norm.visit_mut("head.norm", f);
        self.head.visit_mut("head.fc", f);
    }

    /// Total elements across all registered tensors.
    pub fn param_count(&self) -> u64 {
        let mut total = 0u64;
        self.visit(&mut |_, t| total += t.numel() as u64);
        total
    }

    /// Registry names in visitation order.
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit(&mut |name, _| names.push(name.to_string()));
        names
    }

    /// Inserts all parameters as tape leaves.
    pub fn bind(&self, g: &mut Graph<E>) -> BoundModel {
        let mut params = Vec::new();
        let mut embeds = Vec::new();
        for (i, embed) in self.embeds.iter().enumerate() {
            let prefix = format!("embeds.{i}");
            let weight = g.leaf(embed.conv.weight.clone());
            let bias = g.leaf(embed.conv.bias.clone());
            params.push((format!("{prefix}.conv.weight"), weight));
            params.push((format!("{prefix}.conv.bias"), bias));
            let gamma = g.leaf(embed.norm.gamma.clone());
            let beta = g.leaf(embed.norm.beta.clone());
            params.push((format!("{prefix}.norm.gamma"), gamma));
            params.push((format!("{prefix}.norm.beta"), beta));
            embeds.push(BoundEmbed {
                conv: (weight, bias),
                spec: embed.conv.spec,
                pad: embed.padding(),
                norm: (gamma, beta),
            });
        }
        let mut stages = Vec::new();
        for (s, blocks) in self.stages.iter().enumerate() {
            let mut bound_blocks = Vec::new();
            for (b, block) in blocks.iter().enumerate() {
                bound_blocks.push(block.bind(g, &format!("stages.{s}.blocks.{b}"), &mut params));
            }
            stages.push(bound_blocks);
        }
        let hg = g.leaf(self.head_norm.gamma.clone());
        let hb = g.leaf(self.head_norm.beta.clone());
        params.push(("head.norm.gamma".to_string(), hg));
        params.push(("head.norm.beta".to_string(), hb));
        let fw = g.leaf(self.head.weight.clone());
        let fb = g.leaf(self.head.bias.clone());
        params.push(("head.fc.weight".to_string(), fw));
        params.push(("head.fc.bias".to_string(), fb));
        BoundModel { embeds, stages, head_norm: (hg, hb), head: (fw, fb), params }
    }
}

impl<E: Element> Model<E> {
    /// Saves every registered parameter to one weight file.
    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        let mut tensors = Vec::new();
        self.visit(&mut |name, t| tensors.push((name.to_string(), t.clone())));
        crate::io::save_weights(path, &tensors)
    }

    /// Loads a weight file into a fresh model of the given configuration.
    /// The file must contain exactly the registry names, each with the
    /// expected shape and dtype.
    pub fn load(config: ModelConfig, path: &std::path::Path) -> Result<Self> {
        let mut loaded = crate::io::load_weights(path)?;
        let mut model = Model::zeros(config)?;
        let mut problem: Option<String> = None;
        model.visit_mut(&mut |name, t| {
            if problem.is_some() {
                return;
            }
            let Some(dyn_t) = loaded.remove(name) else {
                problem = Some(format!("weight file is missing tensor {name:?}"));
                return;
            };
            if dyn_t.shape() != t.shape() {
                problem = Some(format!(
                    "tensor {name:?} has shape {:?}, expected {:?}",
                    dyn_t.shape(),
                    t.shape()
                ));
                return;
            }
            match dyn_t.into_typed::<E>() {
                Some(value) => *t = value,
                None => problem = Some(format!("tensor {name:?} has the wrong dtype")),
            }
        });
        if let Some(detail) = problem {
            return Err(Error::format(&path.display().to_string(), detail));
        }
        if let Some(extra) = loaded.keys().next() {
            return Err(Error::format(
                &path.display().to_string(),
                format!("weight file contains unknown tensor {extra:?}"),
            ));
        }
        Ok(model)
    }
}

/// Tape handles for one bound patch embedding.
pub struct BoundEmbed {
    pub conv: (Var, Var),
    pub spec: ConvSpec,
    pub pad: (usize, usize),
    pub norm: (Var, Var),
}

/// Tape handles for a fully bound model, plus the `(name, var)` registry
/// the optimizer uses to route gradients back to parameters.
pub struct BoundModel {
    pub embeds: Vec<BoundEmbed>,
    pub stages: Vec<Vec<BoundBlock>>,
    pub head_norm: (Var, Var),
    pub head: (Var, Var),
    pub params: Vec<(String, Var)>,
}

/// Location and tape handles of one repetition's similarity trace.
pub struct SimVar {
    pub stage: usize,
    pub block: usize,
    pub rep: usize,
    pub sim: Var,
    pub context: Var,
}

/// Tape handles produced by one forward pass.
pub struct ForwardVars {
    pub logits: Var,
    pub stage_maps: Vec<Var>,
    pub sims: Vec<SimVar>,
}

fn forward_embed<E: Element>(g: &mut Graph<E>, x: Var, e: &BoundEmbed) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let (h, w) = (shape[2], shape[3]);
    if h % e.spec.stride != 0 || w % e.spec.stride != 0 {
        return Err(Error::shape(
            "patch_embed",
            format!("extent {h}x{w} is not divisible by stride {}", e.spec.stride),
        ));
    }
    let (before, after) = e.pad;
    let padded = if before + after > 0 { g.pad(x, before, after, before, after)? } else { x };
    let conv = g.conv2d(padded, e.conv.0, Some(e.conv.1), &e.spec)?;
    g.layer_norm(conv, e.norm.0, e.norm.1, LN_EPS, 1)
}

/// Runs the whole model on the tape: embeddings and blocks stage by
/// stage, then pool, norm, and classify.
pub fn forward<E: Element>(
    g: &mut Graph<E>,
    bound: &BoundModel,
    x: Var,
    opts: &MixerOptions,
) -> Result<ForwardVars> {
    if g.value(x).rank() != 4 {
        return Err(Error::shape(
            "forward",
            format!("input must be [N, C, H, W], got {:?}", g.value(x).shape()),
        ));
    }
    let mut cur = x;
    let mut stage_maps = Vec::new();
    let mut sims = Vec::new();
    for (s, (embed, blocks)) in bound.embeds.iter().zip(&bound.stages).enumerate() {
        cur = forward_embed(g, cur, embed)?;
        for (b, block) in blocks.iter().enumerate() {
            let (next, traces) = forward_block(g, cur, block, opts)?;
            cur = next;
            for (r, t) in traces.into_iter().enumerate() {
                sims.push(SimVar { stage: s, block: b, rep: r, sim: t.sim, context: t.context });
            }
        }
        stage_maps.push(cur);
    }
    let pooled = g.global_avg_pool(cur)?;
    let normed = g.layer_norm(pooled, bound.head_norm.0, bound.head_norm.1, LN_EPS, 1)?;
    let logits = g.linear(normed, bound.head.0, Some(bound.head.1))?;
    Ok(ForwardVars { logits, stage_maps, sims })
}

/// One repetition's extracted similarity data, as plain tensors.
pub struct SimMap<E: Element> {
    pub stage: usize,
    pub block: usize,
    pub rep: usize,
    pub sim: Tensor<E>,
    pub context: Tensor<E>,
}

/// Forward-pass outputs as plain tensors.
pub struct ModelRecord<E: Element> {
    pub logits: Tensor<E>,
    pub stage_maps: Vec<Tensor<E>>,
    pub sims: Vec<SimMap<E>>,
}

impl<E: Element> Model<E> {
    /// Classification logits for a `[N, C, H, W]` batch.
    pub fn forward_logits(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let bound = self.bind(&mut g);
        let out = forward(&mut g, &bound, xv, &MixerOptions::default())?;
        Ok(g.value(out.logits).clone())
    }

    /// Full forward pass keeping per-stage feature maps and every
    /// repetition's similarity map and context vector.
    pub fn forward_record(&self, x: &Tensor<E>, opts: &MixerOptions) -> Result<ModelRecord<E>> {
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let bound = self.bind(&mut g);
        let out = forward(&mut g, &bound, xv, opts)?;
        Ok(ModelRecord {
            logits: g.value(out.logits).clone(),
            stage_maps: out.stage_maps.iter().map(|&v| g.value(v).clone()).collect(),
            sims: out
                .sims
                .iter()
                .map(|s| SimMap {
                    stage: s.stage,
                    block: s.block,
                    rep: s.rep,
                    sim: g.value(s.sim).clone(),
                    context: g.value(s.context).clone(),
                })
                .collect(),
        })
    }
}

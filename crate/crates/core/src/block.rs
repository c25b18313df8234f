//! The FCViT block: a token mixer driven by dynamic global context,
//! followed by a convolutional channel mixer.
//!
//! The token mixer runs the same operation twice with independent weights.
//! One repetition normalizes the features, pools them into a global
//! descriptor, squeezes that descriptor through a competitive bottleneck
//! (two projections racing through a maxout), recovers a per-channel
//! context vector, and redistributes the context across space weighted by
//! each token's normalized similarity to the descriptor. A depthwise
//! convolution then fuses the enriched tokens locally:
//!
//! ```text
//! ln  = LayerNorm_channel(x)
//! xb  = GlobalAvgPool(ln)
//! gc  = recover(maxout(squeeze0(xb), squeeze1(xb)))
//! S   = group_dot(ln, xb)                  per-group token similarity
//! S'  = alpha * (S - mean) / max(std, eps) + beta
//! x   = x + GELU(dwconv(ln + S' * gc))
//! ```
//!
//! The channel mixer is a pre-norm inverted bottleneck with a 3x3
//! depthwise conv between the two pointwise convs:
//!
//! ```text
//! x = x + project(GELU(dwconv3(GELU(expand(LayerNorm_channel(x))))))
//! ```

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{trunc_normal, Element, Tensor};
use rand_chacha::ChaCha8Rng;

/// Epsilon under the square root in every LayerNorm.
pub const LN_EPS: f64 = 1e-5;
/// Clamp floor for the similarity plane's standard deviation.
pub const SIM_EPS: f64 = 1e-5;
/// Initialization scale for conv and linear weights.
pub const INIT_STD: f64 = 0.02;

/// Switches that expose intermediate structure for verification. The
/// default (all off) is the published architecture.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct MixerOptions {
    /// Replace the GELU after the depthwise conv with the identity, making
    /// the mixer's conv path linear in its input.
    pub identity_activation: bool,
    /// Freeze the similarity map to 1 everywhere, so the context is fused
    /// statically (every token receives the same share).
    pub frozen_similarity: bool,
    /// Drop the context path entirely; the repetition reduces to
    /// `x + act(dwconv(LayerNorm(x)))`.
    pub disable_context: bool,
}

/// Affine LayerNorm parameters for one normalized width.
#[derive(Clone, Debug)]
pub struct NormParams<E: Element> {
    pub gamma: Tensor<E>,
    pub beta: Tensor<E>,
}

impl<E: Element> NormParams<E> {
    pub fn init(dim: usize) -> Self {
        NormParams { gamma: Tensor::full(&[dim], E::ONE), beta: Tensor::zeros(&[dim]) }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.gamma"), &self.gamma);
        f(&format!("{prefix}.beta"), &self.beta);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.gamma"), &mut self.gamma);
        f(&format!("{prefix}.beta"), &mut self.beta);
    }
}

/// Dense affine map; `weight` is `[out, in]`.
#[derive(Clone, Debug)]
pub struct LinearParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
}

impl<E: Element> LinearParams<E> {
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        LinearParams {
            weight: trunc_normal(&[out_dim, in_dim], INIT_STD, rng),
            bias: Tensor::zeros(&[out_dim]),
        }
    }

    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        LinearParams { weight: Tensor::zeros(&[out_dim, in_dim]), bias: Tensor::zeros(&[out_dim]) }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// Convolution weights tied to their geometry.
#[derive(Clone, Debug)]
pub struct ConvParams<E: Element> {
    pub weight: Tensor<E>,
    pub bias: Tensor<E>,
    pub spec: ConvSpec,
}

impl<E: Element> ConvParams<E> {
    pub fn init(spec: ConvSpec, rng: &mut ChaCha8Rng) -> Self {
        let cig = spec.in_channels / spec.groups;
        ConvParams {
            weight: trunc_normal(&[spec.out_channels, cig, spec.kernel, spec.kernel], INIT_STD, rng),
            bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        }
    }

    pub fn zeros(spec: ConvSpec) -> Self {
        let cig = spec.in_channels / spec.groups;
        ConvParams {
            weight: Tensor::zeros(&[spec.out_channels, cig, spec.kernel, spec.kernel]),
            bias: Tensor::zeros(&[spec.out_channels]),
            spec,
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        f(&format!("{prefix}.weight"), &self.weight);
        f(&format!("{prefix}.bias"), &self.bias);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        f(&format!("{prefix}.weight"), &mut self.weight);
        f(&format!("{prefix}.bias"), &mut self.bias);
    }
}

/// One token-mixer repetition: norm, bottleneck, similarity scalars, and
/// the depthwise conv.
#[derive(Clone, Debug)]
pub struct MixerRep<E: Element> {
    pub norm: NormParams<E>,
    pub squeeze0: LinearParams<E>,
    pub squeeze1: LinearParams<E>,
    pub recover: LinearParams<E>,
    pub sim_alpha: Tensor<E>,
    pub sim_beta: Tensor<E>,
    pub dw: ConvParams<E>,
}

impl<E: Element> MixerRep<E> {
    pub fn init(dim: usize, kernel: usize, groups: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim / reduction;
        MixerRep {
            norm: NormParams::init(dim),
            squeeze0: LinearParams::init(hidden, dim, rng),
            squeeze1: LinearParams::init(hidden, dim, rng),
            recover: LinearParams::init(dim, hidden, rng),
            sim_alpha: Tensor::full(&[groups], E::ONE),
            sim_beta: Tensor::zeros(&[groups]),
            dw: ConvParams::init(ConvSpec::depthwise(dim, kernel), rng),
        }
    }

    pub fn zeros(dim: usize, kernel: usize, groups: usize, reduction: usize) -> Self {
        let hidden = dim / reduction;
        MixerRep {
            norm: NormParams::init(dim),
            squeeze0: LinearParams::zeros(hidden, dim),
            squeeze1: LinearParams::zeros(hidden, dim),
            recover: LinearParams::zeros(dim, hidden),
            sim_alpha: Tensor::full(&[groups], E::ONE),
            sim_beta: Tensor::zeros(&[groups]),
            dw: ConvParams::zeros(ConvSpec::depthwise(dim, kernel)),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.squeeze0.visit(&format!("{prefix}.squeeze0"), f);
        self.squeeze1.visit(&format!("{prefix}.squeeze1"), f);
        self.recover.visit(&format!("{prefix}.recover"), f);
        f(&format!("{prefix}.sim.alpha"), &self.sim_alpha);
        f(&format!("{prefix}.sim.beta"), &self.sim_beta);
        self.dw.visit(&format!("{prefix}.dw"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.squeeze0.visit_mut(&format!("{prefix}.squeeze0"), f);
        self.squeeze1.visit_mut(&format!("{prefix}.squeeze1"), f);
        self.recover.visit_mut(&format!("{prefix}.recover"), f);
        f(&format!("{prefix}.sim.alpha"), &mut self.sim_alpha);
        f(&format!("{prefix}.sim.beta"), &mut self.sim_beta);
        self.dw.visit_mut(&format!("{prefix}.dw"), f);
    }
}

/// The full token mixer: a fixed number of repetitions with independent
/// weights plus the group count shared by similarity and modulation.
#[derive(Clone, Debug)]
pub struct TokenMixerParams<E: Element> {
    pub reps: Vec<MixerRep<E>>,
    pub groups: usize,
}

/// The channel mixer (inverted bottleneck with inner depthwise conv).
#[derive(Clone, Debug)]
pub struct ChannelMixerParams<E: Element> {
    pub norm: NormParams<E>,
    pub expand: ConvParams<E>,
    pub dw: ConvParams<E>,
    pub project: ConvParams<E>,
}

impl<E: Element> ChannelMixerParams<E> {
    pub fn init(dim: usize, mlp_ratio: usize, rng: &mut ChaCha8Rng) -> Self {
        let hidden = dim * mlp_ratio;
        ChannelMixerParams {
            norm: NormParams::init(dim),
            expand: ConvParams::init(ConvSpec::pointwise(dim, hidden), rng),
            dw: ConvParams::init(ConvSpec::depthwise(hidden, 3), rng),
            project: ConvParams::init(ConvSpec::pointwise(hidden, dim), rng),
        }
    }

    pub fn zeros(dim: usize, mlp_ratio: usize) -> Self {
        let hidden = dim * mlp_ratio;
        ChannelMixerParams {
            norm: NormParams::init(dim),
            expand: ConvParams::zeros(ConvSpec::pointwise(dim, hidden)),
            dw: ConvParams::zeros(ConvSpec::depthwise(hidden, 3)),
            project: ConvParams::zeros(ConvSpec::pointwise(hidden, dim)),
        }
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        self.norm.visit(&format!("{prefix}.norm"), f);
        self.expand.visit(&format!("{prefix}.expand"), f);
        self.dw.visit(&format!("{prefix}.dw"), f);
        self.project.visit(&format!("{prefix}.project"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        self.norm.visit_mut(&format!("{prefix}.norm"), f);
        self.expand.visit_mut(&format!("{prefix}.expand"), f);
        self.dw.visit_mut(&format!("{prefix}.dw"), f);
        self.project.visit_mut(&format!("{prefix}.project"), f);
    }
}

/// One FCViT block.
#[derive(Clone, Debug)]
pub struct BlockParams<E: Element> {
    pub token: TokenMixerParams<E>,
    pub channel: ChannelMixerParams<E>,
}

impl<E: Element> BlockParams<E> {
    pub fn init(
        dim: usize,
        mlp_ratio: usize,
        kernel: usize,
        groups: usize,
        reduction: usize,
        reps: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        Self::check_dims(dim, kernel, groups, reduction, reps)?;
        Ok(BlockParams {
            token: TokenMixerParams {
                reps: (0..reps).map(|_| MixerRep::init(dim, kernel, groups, reduction, rng)).collect(),
                groups,
            },
            channel: ChannelMixerParams::init(dim, mlp_ratio, rng),
        })
    }

    pub fn zeros(
        dim: usize,
        mlp_ratio: usize,
        kernel: usize,
        groups: usize,
        reduction: usize,
        reps: usize,
    ) -> Result<Self> {
        Self::check_dims(dim, kernel, groups, reduction, reps)?;
        Ok(BlockParams {
            token: TokenMixerParams {
                reps: (0..reps).map(|_| MixerRep::zeros(dim, kernel, groups, reduction)).collect(),
                groups,
            },
            channel: ChannelMixerParams::zeros(dim, mlp_ratio),
        })
    }

    fn check_dims(dim: usize, kernel: usize, groups: usize, reduction: usize, reps: usize) -> Result<()> {
        if kernel % 2 == 0 {
            return Err(Error::InvalidConfig(format!(
                "token mixer kernel must be odd for same-extent padding, got {kernel}"
            )));
        }
        if reps == 0 {
            return Err(Error::InvalidConfig("token mixer needs at least one repetition".into()));
        }
        if groups == 0 || dim % groups != 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {dim} must divide into {groups} similarity groups"
            )));
        }
        if reduction == 0 || dim % reduction != 0 || dim / reduction == 0 {
            return Err(Error::InvalidConfig(format!(
                "dim {dim} is not reducible by {reduction} in the bottleneck"
            )));
        }
        Ok(())
    }

    pub(crate) fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor<E>)) {
        for (i, rep) in self.token.reps.iter().enumerate() {
            rep.visit(&format!("{prefix}.token.reps.{i}"), f);
        }
        self.channel.visit(&format!("{prefix}.channel"), f);
    }

    pub(crate) fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor<E>)) {
        for (i, rep) in self.token.reps.iter_mut().enumerate() {
            rep.visit_mut(&format!("{prefix}.token.reps.{i}"), f);
        }
        self.channel.visit_mut(&format!("{prefix}.channel"), f);
    }
}

/// Tape handles for one bound repetition.
pub struct BoundRep {
    pub norm: (Var, Var),
    pub squeeze0: (Var, Var),
    pub squeeze1: (Var, Var),
    pub recover: (Var, Var),
    pub sim_alpha: Var,
    pub sim_beta: Var,
    pub dw: (Var, Var),
    pub dw_spec: ConvSpec,
}

/// Tape handles for one bound block.
pub struct BoundBlock {
    pub reps: Vec<BoundRep>,
    pub groups: usize,
    pub channel_norm: (Var, Var),
    pub expand: (Var, Var, ConvSpec),
    pub dw: (Var, Var, ConvSpec),
    pub project: (Var, Var, ConvSpec),
}

fn bind_norm<E: Element>(
    g: &mut Graph<E>,
    p: &NormParams<E>,
    prefix: &str,
    names: &mut Vec<(String, Var)>,
) -> (Var, Var) {
    let gamma = g.leaf(p.gamma.clone());
    let beta = g.leaf(p.beta.clone());
    names.push((format!("{prefix}.gamma"), gamma));
    names.push((format!("{prefix}.beta"), beta));
    (gamma, beta)
}

fn bind_linear<E: Element>(
    g: &mut Graph<E>,
    p: &LinearParams<E>,
    prefix: &str,
    names: &mut Vec<(String, Var)>,
) -> (Var, Var) {
    let weight = g.leaf(p.weight.clone());
    let bias = g.leaf(p.bias.clone());
    names.push((format!("{prefix}.weight"), weight));
    names.push((format!("{prefix}.bias"), bias));
    (weight, bias)
}

fn bind_conv<E: Element>(
    g: &mut Graph<E>,
    p: &ConvParams<E>,
    prefix: &str,
    names: &mut Vec<(String, Var)>,
) -> (Var, Var) {
    let weight = g.leaf(p.weight.clone());
    let bias = g.leaf(p.bias.clone());
    names.push((format!("{prefix}.weight"), weight));
    names.push((format!("{prefix}.bias"), bias));
    (weight, bias)
}

impl<E: Element> BlockParams<E> {
    /// Inserts every parameter as a tape leaf, recording `(name, var)`
    /// pairs in `names` under `prefix` using the same naming scheme as
    /// [`BlockParams::visit`].
    pub fn bind(&self, g: &mut Graph<E>, prefix: &str, names: &mut Vec<(String, Var)>) -> BoundBlock {
        let reps = self
            .token
            .reps
            .iter()
            .enumerate()
            .map(|(i, rep)| {
                let p = format!("{prefix}.token.reps.{i}");
                let norm = bind_norm(g, &rep.norm, &format!("{p}.norm"), names);
                let squeeze0 = bind_linear(g, &rep.squeeze0, &format!("{p}.squeeze0"), names);
                let squeeze1 = bind_linear(g, &rep.squeeze1, &format!("{p}.squeeze1"), names);
                let recover = bind_linear(g, &rep.recover, &format!("{p}.recover"), names);
                let sim_alpha = g.leaf(rep.sim_alpha.clone());
                let sim_beta = g.leaf(rep.sim_beta.clone());
                names.push((format!("{p}.sim.alpha"), sim_alpha));
                names.push((format!("{p}.sim.beta"), sim_beta));
                let dw = bind_conv(g, &rep.dw, &format!("{p}.dw"), names);
                BoundRep {
                    norm,
                    squeeze0,
                    squeeze1,
                    recover,
                    sim_alpha,
                    sim_beta,
                    dw,
                    dw_spec: rep.dw.spec,
                }
            })
            .collect();
        let cp = format!("{prefix}.channel");
        let channel_norm = bind_norm(g, &self.channel.norm, &format!("{cp}.norm"), names);
        let expand = bind_conv(g, &self.channel.expand, &format!("{cp}.expand"), names);
        let dw = bind_conv(g, &self.channel.dw, &format!("{cp}.dw"), names);
        let project = bind_conv(g, &self.channel.project, &format!("{cp}.project"), names);
        BoundBlock {
            reps,
            groups: self.token.groups,
            channel_norm,
            expand: (expand.0, expand.1, self.channel.expand.spec),
            dw: (dw.0, dw.1, self.channel.dw.spec),
            project: (project.0, project.1, self.channel.project.spec),
        }
    }
}

/// Intermediates of one repetition that verification and export read:
/// the normalized per-group similarity map `[N, g, H, W]` and the
/// recovered context vector `[N, d]`.
pub struct RepTrace {
    pub sim: Var,
    pub context: Var,
}

/// Runs one token-mixer repetition on the tape. Returns the updated
/// features and, when the context path is active, its trace.
pub fn forward_rep<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    rep: &BoundRep,
    groups: usize,
    opts: &MixerOptions,
) -> Result<(Var, Option<RepTrace>)> {
    let ln = g.layer_norm(x, rep.norm.0, rep.norm.1, LN_EPS, 1)?;
    let (h, trace) = if opts.disable_context {
        (ln, None)
    } else {
        let xb = g.global_avg_pool(ln)?;
        let s0 = g.linear(xb, rep.squeeze0.0, Some(rep.squeeze0.1))?;
        let s1 = g.linear(xb, rep.squeeze1.0, Some(rep.squeeze1.1))?;
        let z = g.maxout(s0, s1)?;
        let gc = g.linear(z, rep.recover.0, Some(rep.recover.1))?;
        let sim = if opts.frozen_similarity {
            let shape = g.value(ln).shape().to_vec();
            g.leaf(Tensor::full(&[shape[0], groups, shape[2], shape[3]], E::ONE))
        } else {
            let raw = g.group_dot(ln, xb, groups)?;
            g.spatial_group_norm(raw, rep.sim_alpha, rep.sim_beta, SIM_EPS)?
        };
        let ctx = g.modulate(gc, sim)?;
        let h = g.add(ln, ctx)?;
        (h, Some(RepTrace { sim, context: gc }))
    };
    let conv = g.conv2d(h, rep.dw.0, Some(rep.dw.1), &rep.dw_spec)?;
    let act = if opts.identity_activation { conv } else { g.gelu(conv) };
    let out = g.add(x, act)?;
    Ok((out, trace))
}

/// Runs the channel mixer on the tape.
pub fn forward_channel_mixer<E: Element>(g: &mut Graph<E>, x: Var, block: &BoundBlock) -> Result<Var> {
    let ln = g.layer_norm(x, block.channel_norm.0, block.channel_norm.1, LN_EPS, 1)?;
    let a = g.conv2d(ln, block.expand.0, Some(block.expand.1), &block.expand.2)?;
    let a = g.gelu(a);
    let b = g.conv2d(a, block.dw.0, Some(block.dw.1), &block.dw.2)?;
    let b = g.gelu(b);
    let c = g.conv2d(b, block.project.0, Some(block.project.1), &block.project.2)?;
    g.add(x, c)
}

/// Runs one full block (all token-mixer repetitions, then the channel
/// mixer), collecting the trace of every context-active repetition.
pub fn forward_block<E: Element>(
    g: &mut Graph<E>,
    x: Var,
    block: &BoundBlock,
    opts: &MixerOptions,
) -> Result<(Var, Vec<RepTrace>)> {
    let mut cur = x;
    let mut traces = Vec::new();
    for rep in &block.reps {
        let (next, trace) = forward_rep(g, cur, rep, block.groups, opts)?;
        cur = next;
        if let Some(t) = trace {
            traces.push(t);
        }
    }
    let out = forward_channel_mixer(g, cur, block)?;
    Ok((out, traces))
}

/// Convenience forward for a lone block outside any training tape.
pub fn block_forward<E: Element>(
    x: &Tensor<E>,
    block: &BlockParams<E>,
    opts: &MixerOptions,
) -> Result<Tensor<E>> {
    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let mut names = Vec::new();
    let bound = block.bind(&mut g, "block", &mut names);
    let (out, _) = forward_block(&mut g, xv, &bound, opts)?;
    Ok(g.value(out).clone())
}

/// The competitive bottleneck on its own: `recover(maxout(squeeze0(xb),
/// squeeze1(xb)))` for a pooled descriptor `[N, d]`.
pub fn global_context<E: Element>(xb: &Tensor<E>, rep: &MixerRep<E>) -> Result<Tensor<E>> {
    let s0 = crate::ops::linear(xb, &rep.squeeze0.weight, Some(&rep.squeeze0.bias))?;
    let s1 = crate::ops::linear(xb, &rep.squeeze1.weight, Some(&rep.squeeze1.bias))?;
    let z = crate::ops::maxout(&s0, &s1)?;
    crate::ops::linear(&z, &rep.recover.weight, Some(&rep.recover.bias))
}

/// Raw (pre-normalization) token-global similarity for features `[N, d,
/// H, W]`: each token's per-group inner product with the pooled
/// descriptor of the same features.
pub fn token_global_similarity<E: Element>(x: &Tensor<E>, groups: usize) -> Result<Tensor<E>> {
    let xb = crate::ops::global_avg_pool(x)?;
    crate::ops::group_dot(x, &xb, groups)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ops;
    use rand::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn param_count<E: Element>(block: &BlockParams<E>) -> usize {
        let mut total = 0;
        block.visit("b", &mut |_, t| total += t.numel());
        total
    }

    #[test]
    fn channel_mixer_pointwise_params_match_hand_count() {
        let cm = ChannelMixerParams::<f64>::zeros(8, 4);
        let pointwise = cm.expand.weight.numel()
            + cm.expand.bias.numel()
            + cm.project.weight.numel()
            + cm.project.bias.numel();
        assert_eq!(pointwise, 552, "8->32 expand plus 32->8 project with biases");
    }

    #[test]
    fn bottleneck_hand_chain_with_integer_weights() {
        let mut rep = MixerRep::<f64>::zeros(4, 3, 2, 2);
        rep.squeeze0.weight =
            Tensor::new(&[2, 4], vec![1.0, 2.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0]).unwrap();
        rep.squeeze1.weight =
            Tensor::new(&[2, 4], vec![0.0, 1.0, 2.0, 0.0, 1.0, 0.0, 0.0, 1.0]).unwrap();
        rep.recover.weight =
            Tensor::new(&[4, 2], vec![1.0, 0.0, 0.0, 1.0, 2.0, 1.0, 1.0, -1.0]).unwrap();
        let xb = Tensor::new(&[1, 4], vec![1.0, 0.0, -1.0, 2.0]).unwrap();
        let gc = global_context(&xb, &rep).expect("context should succeed");
        assert_eq!(
            gc.data(),
            &[3.0, 3.0, 9.0, 0.0],
            "squeeze to [3,-1] and [-2,3], maxout to [3,3], recover"
        );
    }

    #[test]
    fn zeroed_block_is_the_identity() {
        let block = BlockParams::<f64>::zeros(8, 4, 3, 4, 4, 2).expect("valid dims");
        let x: Tensor<f64> = trunc_normal(&[2, 8, 5, 5], 1.0, &mut rng(2));
        let y = block_forward(&x, &block, &MixerOptions::default()).expect("forward should succeed");
        assert!(y.bit_eq(&x), "all-zero weights must pass features through untouched");
    }

    #[test]
    fn block_preserves_shape_and_is_deterministic() {
        let block = BlockParams::<f64>::init(8, 4, 3, 4, 4, 2, &mut rng(5)).expect("valid dims");
        let x: Tensor<f64> = trunc_normal(&[2, 8, 6, 6], 1.0, &mut rng(6));
        let y1 = block_forward(&x, &block, &MixerOptions::default()).expect("forward");
        let y2 = block_forward(&x, &block, &MixerOptions::default()).expect("forward");
        assert_eq!(y1.shape(), x.shape(), "block must preserve [N, C, H, W]");
        assert!(y1.bit_eq(&y2), "same weights and input must give identical bits");
    }

    #[test]
    fn disable_context_changes_the_output() {
        let block = BlockParams::<f64>::init(8, 4, 3, 4, 4, 2, &mut rng(7)).expect("valid dims");
        let x: Tensor<f64> = trunc_normal(&[1, 8, 6, 6], 1.0, &mut rng(8));
        let full = block_forward(&x, &block, &MixerOptions::default()).expect("forward");
        let plain = block_forward(
            &x,
            &block,
            &MixerOptions { disable_context: true, ..Default::default() },
        )
        .expect("forward");
        assert!(!full.bit_eq(&plain), "the context path must contribute to the output");
    }

    #[test]
    fn frozen_similarity_broadcasts_the_context_evenly() {
        // with S' = 1, each channel receives exactly gc[c] at every pixel,
        // so the pre-conv features are ln + broadcast(gc)
        let block = BlockParams::<f64>::init(8, 4, 3, 4, 4, 1, &mut rng(9)).expect("valid dims");
        let rep = &block.token.reps[0];
        let x: Tensor<f64> = trunc_normal(&[1, 8, 4, 4], 1.0, &mut rng(10));
        let ln = ops::layer_norm(&x, &rep.norm.gamma, &rep.norm.beta, LN_EPS, 1).unwrap();
        let xb = ops::global_avg_pool(&ln).unwrap();
        let gc = global_context(&xb, rep).unwrap();
        let direct = ops::add(&ln, &ops::broadcast_spatial(&gc, 4, 4).unwrap()).unwrap();
        let via_modulate =
            ops::add(&ln, &ops::modulate(&gc, &Tensor::full(&[1, 4, 4, 4], 1.0)).unwrap()).unwrap();
        assert!(via_modulate.bit_eq(&direct), "unit similarity must reduce to a broadcast");
    }

    #[test]
    fn rejects_even_mixer_kernel() {
        let err = BlockParams::<f64>::zeros(8, 4, 4, 4, 4, 2).expect_err("even kernel");
        assert!(matches!(err, Error::InvalidConfig(_)));
    }

    #[test]
    fn similarity_matches_grouped_inner_products() {
        let x: Tensor<f64> = trunc_normal(&[1, 8, 3, 3], 1.0, &mut rng(11));
        let sim = token_global_similarity(&x, 4).expect("similarity");
        assert_eq!(sim.shape(), &[1, 4, 3, 3]);
        let xb = ops::global_avg_pool(&x).unwrap();
        let full = ops::group_dot(&x, &xb, 4).unwrap();
        assert!(sim.bit_eq(&full), "wrapper must agree with the grouped kernel");
    }

    #[test]
    fn visit_and_bind_agree_on_names_and_order() {
        let block = BlockParams::<f64>::init(8, 4, 3, 4, 4, 2, &mut rng(12)).expect("valid dims");
        let mut visit_names = Vec::new();
        block.visit("block", &mut |name, _| visit_names.push(name.to_string()));
        let mut g = Graph::new();
        let mut bind_names = Vec::new();
        block.bind(&mut g, "block", &mut bind_names);
        let bound: Vec<String> = bind_names.iter().map(|(n, _)| n.clone()).collect();
        assert_eq!(visit_names, bound, "visit and bind must enumerate identically");
    }

    #[test]
    fn init_param_count_matches_architecture_formula() {
        let (d, m, k, g, r) = (8usize, 4usize, 3usize, 4usize, 4usize);
        let block = BlockParams::<f64>::init(d, m, k, g, r, 2, &mut rng(13)).expect("valid dims");
        let token_rep = 2 * d + 2 * (d * (d / r) + d / r) + (d / r) * d + d + 2 * g + d * k * k + d;
        let channel = 2 * d + d * m * d + m * d + 9 * m * d + m * d + m * d * d + d;
        assert_eq!(param_count(&block), 2 * token_rep + channel);
    }
}

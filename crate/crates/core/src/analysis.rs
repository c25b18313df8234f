//! Attention diagnostics: reference self-attention, log-scale weight
//! histograms, query/head consistency scores, and similarity-map export.
//!
//! The reference attention here is the plain dot-product formulation
//! with per-head softmax, deliberately without positional encodings or
//! the 1/sqrt(d) temperature, so its degenerate cases line up exactly
//! with the global-context view: zeroing the query projection makes
//! every attention row uniform, and the output collapses to the same
//! averaged context vector for every token.
//!
//! Histograms and consistency scores accept any tensor whose last axis
//! holds one attention row: the last two axes are read as `[rows, n]`
//! and all leading axes are flattened into independent heads.

use serde::{Deserialize, Serialize};

use crate::block::MixerOptions;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::ops;
use crate::tensor::{Element, Tensor};

pub const HIST_BINS: usize = 60;
pub const HIST_LO: f64 = -6.0;
pub const HIST_HI: f64 = 0.0;

/// Projection weights for the reference attention. Each matrix maps the
/// full feature vector of one token; heads split the projected features
/// into contiguous slices.
#[derive(Clone, Debug)]
pub struct AttentionParams<E: Element> {
    pub w_q: Tensor<E>,
    pub w_k: Tensor<E>,
    pub w_v: Tensor<E>,
    pub heads: usize,
}

impl<E: Element> AttentionParams<E> {
    /// Seeded projections with a 1/sqrt(d) scale.
    pub fn init(dim: usize, heads: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let std = 1.0 / (dim as f64).sqrt();
        AttentionParams {
            w_q: crate::tensor::trunc_normal(&[dim, dim], std, rng),
            w_k: crate::tensor::trunc_normal(&[dim, dim], std, rng),
            w_v: crate::tensor::trunc_normal(&[dim, dim], std, rng),
            heads,
        }
    }

    fn validate(&self, dim: usize) -> Result<()> {
        for (name, w) in [("w_q", &self.w_q), ("w_k", &self.w_k), ("w_v", &self.w_v)] {
            if w.shape() != [dim, dim] {
                return Err(Error::shape(
                    "reference_self_attention",
                    format!("{name} has shape {:?}, expected [{dim}, {dim}]", w.shape()),
                ));
            }
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::invalid(
                "reference_self_attention",
                format!("feature dim {dim} does not split into {} heads", self.heads),
            ));
        }
        Ok(())
    }
}

/// Attention output: features stay `[N, d, n]`, weights are
/// `[N, heads, n, n]` with row-stochastic rows.
#[derive(Clone, Debug)]
pub struct AttentionOutput<E: Element> {
    pub y: Tensor<E>,
    pub attn: Tensor<E>,
}

/// Plain multi-head dot-product attention over `x: [N, d, n]` (features
/// by tokens), without temperature scaling or positional encoding.
pub fn reference_self_attention<E: Element>(
    x: &Tensor<E>,
    params: &AttentionParams<E>,
) -> Result<AttentionOutput<E>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "reference_self_attention",
            format!("expected [N, d, n], got {:?}", x.shape()),
        ));
    }
    let (batch, dim, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    params.validate(dim)?;
    let heads = params.heads;
    let head_dim = dim / heads;
    let project = |w: &Tensor<E>, xs: &[E]| -> Vec<E> {
        let mut out = vec![E::ZERO; dim * n];
        for a in 0..dim {
            for i in 0..n {
                let mut acc = E::ZERO;
                for b in 0..dim {
                    acc = acc + w.data()[a * dim + b] * xs[b * n + i];
                }
                out[a * n + i] = acc;
            }
        }
        out
    };
    let mut y = vec![E::ZERO; batch * dim * n];
    let mut attn = vec![E::ZERO; batch * heads * n * n];
    for s in 0..batch {
        let xs = &x.data()[s * dim * n..(s + 1) * dim * n];
        let q = project(&params.w_q, xs);
        let k = project(&params.w_k, xs);
        let v = project(&params.w_v, xs);
        for h in 0..heads {
            let lo = h * head_dim;
            let mut scores = vec![E::ZERO; n * n];
            for i in 0..n {
                for j in 0..n {
                    let mut acc = E::ZERO;
                    for c in lo..lo + head_dim {
                        acc = acc + q[c * n + i] * k[c * n + j];
                    }
                    scores[i * n + j] = acc;
                }
            }
            let weights = ops::softmax(&Tensor::new(&[n, n], scores)?, 1)?;
            let w = weights.data();
            attn[(s * heads + h) * n * n..(s * heads + h + 1) * n * n].copy_from_slice(w);
            for c in lo..lo + head_dim {
                for i in 0..n {
                    let mut acc = E::ZERO;
                    for j in 0..n {
                        acc = acc + w[i * n + j] * v[c * n + j];
                    }
                    y[s * dim * n + c * n + i] = acc;
                }
            }
        }
    }
    Ok(AttentionOutput {
        y: Tensor::new(&[batch, dim, n], y)?,
        attn: Tensor::new(&[batch, heads, n, n], attn)?,
    })
}

/// The context every token receives under collapsed (uniform) attention:
/// `w_v` applied to the token mean, one vector of length `d` per sample.
pub fn collapsed_attention_context<E: Element>(
    x: &Tensor<E>,
    w_v: &Tensor<E>,
) -> Result<Tensor<E>> {
    if x.rank() != 3 {
        return Err(Error::shape(
            "collapsed_attention_context",
            format!("expected [N, d, n], got {:?}", x.shape()),
        ));
    }
    let (batch, dim, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    if w_v.shape() != [dim, dim] {
        return Err(Error::shape(
            "collapsed_attention_context",
            format!("w_v has shape {:?}, expected [{dim}, {dim}]", w_v.shape()),
        ));
    }
    let mut out = vec![E::ZERO; batch * dim];
    let inv_n = E::from_f64(1.0 / n as f64);
    for s in 0..batch {
        let xs = &x.data()[s * dim * n..(s + 1) * dim * n];
        for a in 0..dim {
            let mut acc = E::ZERO;
            for b in 0..dim {
                let mut mean = E::ZERO;
                for i in 0..n {
                    mean = mean + xs[b * n + i];
                }
                acc = acc + w_v.data()[a * dim + b] * mean * inv_n;
            }
            out[s * dim + a] = acc;
        }
    }
    Tensor::new(&[batch, dim], out)
}

fn rows_view<E: Element>(attn: &Tensor<E>, op: &'static str) -> Result<(usize, usize, usize)> {
    if attn.rank() < 2 {
        return Err(Error::shape(
            op,
            format!("need at least [rows, n], got {:?}", attn.shape()),
        ));
    }
    let n = attn.shape()[attn.rank() - 1];
    let rows = attn.shape()[attn.rank() - 2];
    let heads = attn.numel() / (rows * n);
    if !attn.all_finite() {
        return Err(Error::NonFinite(op));
    }
    Ok((heads, rows, n))
}

fn validate_row_stochastic<E: Element>(attn: &Tensor<E>, op: &'static str) -> Result<()> {
    let (heads, rows, n) = rows_view(attn, op)?;
    for r in 0..heads * rows {
        let row = &attn.data()[r * n..(r + 1) * n];
        let mut sum = 0.0f64;
        for &w in row {
            let w = w.to_f64();
            if w < 0.0 {
                return Err(Error::invalid(op, format!("negative attention weight {w}")));
            }
            sum += w;
        }
        if (sum - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(
                op,
                format!("row {r} sums to {sum}, attention rows must sum to 1"),
            ));
        }
    }
    Ok(())
}

/// Pools every weight and bins `log10(w)` into 60 uniform bins over
/// `[-6, 0]`; values outside the range clamp into the end bins. Returns
/// raw counts and the density normalized to sum to 1.
pub fn attention_log_histogram<E: Element>(attn: &Tensor<E>) -> Result<(Vec<u64>, Vec<f64>)> {
    validate_row_stochastic(attn, "attention_log_histogram")?;
    let mut counts = vec![0u64; HIST_BINS];
    let width = (HIST_HI - HIST_LO) / HIST_BINS as f64;
    for &w in attn.data() {
        let log = w.to_f64().log10();
        let bin = if log.is_nan() || log < HIST_LO {
            0
        } else {
            (((log - HIST_LO) / width) as usize).min(HIST_BINS - 1)
        };
        counts[bin] += 1;
    }
    let total = attn.numel() as f64;
    let density = counts.iter().map(|&c| c as f64 / total).collect();
    Ok((counts, density))
}

fn cosine_pairs(maps: &[Vec<f64>], op: &'static str) -> Result<f64> {
    if maps.len() < 2 {
        return Ok(1.0);
    }
    let norms: Vec<f64> = maps
        .iter()
        .map(|m| m.iter().map(|v| v * v).sum::<f64>().sqrt())
        .collect();
    for (i, &norm) in norms.iter().enumerate() {
        if norm == 0.0 {
            return Err(Error::invalid(op, format!("row {i} has zero norm")));
        }
    }
    let mut sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..maps.len() {
        for j in (i + 1)..maps.len() {
            let cos = if maps[i] == maps[j] {
                1.0
            } else {
                let dot: f64 = maps[i].iter().zip(&maps[j]).map(|(a, b)| a * b).sum();
                dot / (norms[i] * norms[j])
            };
            sum += cos;
            pairs += 1;
        }
    }
    Ok(sum / pairs as f64)
}

/// Mean pairwise cosine similarity between attention rows within each
/// head, averaged over heads. Identical rows score exactly 1; a head
/// with a single row scores 1 by convention.
pub fn query_consistency<E: Element>(attn: &Tensor<E>) -> Result<f64> {
    let (heads, rows, n) = rows_view(attn, "query_consistency")?;
    let mut total = 0.0;
    for h in 0..heads {
        let maps: Vec<Vec<f64>> = (0..rows)
            .map(|r| {
                attn.data()[(h * rows + r) * n..(h * rows + r + 1) * n]
                    .iter()
                    .map(|v| v.to_f64())
                    .collect()
            })
            .collect();
        total += cosine_pairs(&maps, "query_consistency")?;
    }
    Ok(total / heads as f64)
}

/// Mean pairwise cosine similarity between whole flattened heads; a
/// single head scores 1 by convention.
pub fn head_consistency<E: Element>(attn: &Tensor<E>) -> Result<f64> {
    let (heads, rows, n) = rows_view(attn, "head_consistency")?;
    let maps: Vec<Vec<f64>> = (0..heads)
        .map(|h| {
            attn.data()[h * rows * n..(h + 1) * rows * n]
                .iter()
                .map(|v| v.to_f64())
                .collect()
        })
        .collect();
    cosine_pairs(&maps, "head_consistency")
}

/// The full diagnostic bundle over one attention tensor.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttentionStats {
    pub bins: usize,
    pub log10_lo: f64,
    pub log10_hi: f64,
    pub counts: Vec<u64>,
    pub density: Vec<f64>,
    pub query_consistency: f64,
    pub head_consistency: f64,
}

pub fn attention_stats<E: Element>(attn: &Tensor<E>) -> Result<AttentionStats> {
    let (counts, density) = attention_log_histogram(attn)?;
    Ok(AttentionStats {
        bins: HIST_BINS,
        log10_lo: HIST_LO,
        log10_hi: HIST_HI,
        counts,
        density,
        query_consistency: query_consistency(attn)?,
        head_consistency: head_consistency(attn)?,
    })
}

/// Normalized similarity maps extracted from one block of a model.
pub struct SimilarityExport<E: Element> {
    pub maps: Tensor<E>,
    pub stage: usize,
    pub block_in_stage: usize,
    pub rep: usize,
    /// Mean pairwise cosine of the flattened group maps; `None` when a
    /// map is all zeros (a constant-plane input clamps to the shift
    /// term, which initializes to zero).
    pub group_consistency: Option<f64>,
}

/// Runs the model on one image and extracts the `[groups, H, W]`
/// similarity maps of the chosen block and mixer repetition. Blocks are
/// numbered consecutively across stages; `rep` defaults to the final
/// repetition.
pub fn export_similarity_maps<E: Element>(
    model: &Model<E>,
    image: &Tensor<E>,
    block_index: usize,
    rep: Option<usize>,
) -> Result<SimilarityExport<E>> {
    let batched = match image.rank() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(image.shape());
            image.reshape(&shape)?
        }
        4 => image.clone(),
        _ => {
            return Err(Error::shape(
                "export_similarity_maps",
                format!("expected [C, H, W] or [N, C, H, W], got {:?}", image.shape()),
            ))
        }
    };
    let depths: Vec<usize> = model.config.stages.iter().map(|s| s.depth).collect();
    let total: usize = depths.iter().sum();
    if block_index >= total {
        return Err(Error::invalid(
            "export_similarity_maps",
            format!("block index {block_index} out of range, model has {total} blocks"),
        ));
    }
    let (mut stage, mut remaining) = (0usize, block_index);
    while remaining >= depths[stage] {
        remaining -= depths[stage];
        stage += 1;
    }
    let rep = rep.unwrap_or(model.config.mixer_reps - 1);
    if rep >= model.config.mixer_reps {
        return Err(Error::invalid(
            "export_similarity_maps",
            format!("rep {rep} out of range, mixer has {} repetitions", model.config.mixer_reps),
        ));
    }
    let record = model.forward_record(&batched, &MixerOptions::default())?;
    let sim = record
        .sims
        .iter()
        .find(|s| s.stage == stage && s.block == remaining && s.rep == rep)
        .expect("every block repetition records a similarity map");
    let shape = sim.sim.shape();
    let (groups, h, w) = (shape[1], shape[2], shape[3]);
    let first = sim.sim.data()[..groups * h * w].to_vec();
    let maps = Tensor::new(&[groups, h, w], first)?;
    let flat: Vec<Vec<f64>> = (0..groups)
        .map(|g| maps.data()[g * h * w..(g + 1) * h * w].iter().map(|v| v.to_f64()).collect())
        .collect();
    let group_consistency = cosine_pairs(&flat, "export_similarity_maps").ok();
    Ok(SimilarityExport { maps, stage, block_in_stage: remaining, rep, group_consistency })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn seeded_x(batch: usize, dim: usize, n: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        crate::tensor::trunc_normal(&[batch, dim, n], 1.0, &mut rng)
    }

    #[test]
    fn single_token_attention_is_the_value_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = AttentionParams::<f64>::init(4, 2, &mut rng);
        let x = seeded_x(1, 4, 1, 1);
        let out = reference_self_attention(&x, &params).unwrap();
        assert_eq!(out.attn.shape(), &[1, 2, 1, 1]);
        for &w in out.attn.data() {
            assert_eq!(w, 1.0, "a single token must attend to itself fully");
        }
        for a in 0..4 {
            let mut v = 0.0;
            for b in 0..4 {
                v += params.w_v.data()[a * 4 + b] * x.data()[b];
            }
            assert!((out.y.data()[a] - v).abs() < 1e-12, "output must equal the projected value");
        }
    }

    #[test]
    fn two_token_attention_matches_a_hand_unrolled_computation() {
        let (d, n) = (2, 2);
        let params = AttentionParams {
            w_q: Tensor::new(&[2, 2], vec![0.5f64, -0.25, 0.75, 0.125]).unwrap(),
            w_k: Tensor::new(&[2, 2], vec![-0.5, 0.3, 0.2, 0.9]).unwrap(),
            w_v: Tensor::new(&[2, 2], vec![1.0, 2.0, -1.0, 0.5]).unwrap(),
            heads: 1,
        };
        let x = Tensor::new(&[1, d, n], vec![0.4f64, -0.7, 1.1, 0.2]).unwrap();
        let out = reference_self_attention(&x, &params).unwrap();

        let col = |i: usize| [x.data()[i], x.data()[n + i]];
        let mat = |w: &Tensor<f64>, v: [f64; 2]| {
            [
                w.data()[0] * v[0] + w.data()[1] * v[1],
                w.data()[2] * v[0] + w.data()[3] * v[1],
            ]
        };
        let dot = |a: [f64; 2], b: [f64; 2]| a[0] * b[0] + a[1] * b[1];
        for i in 0..n {
            let q = mat(&params.w_q, col(i));
            let scores = [dot(q, mat(&params.w_k, col(0))), dot(q, mat(&params.w_k, col(1)))];
            let max = scores[0].max(scores[1]);
            let exp = [(scores[0] - max).exp(), (scores[1] - max).exp()];
            let z = exp[0] + exp[1];
            let weights = [exp[0] / z, exp[1] / z];
            for (j, &w) in weights.iter().enumerate() {
                let got = out.attn.data()[i * n + j];
                assert!((got - w).abs() < 1e-12, "attn[{i},{j}] = {got}, hand value {w}");
            }
            let v0 = mat(&params.w_v, col(0));
            let v1 = mat(&params.w_v, col(1));
            for c in 0..d {
                let y = weights[0] * v0[c] + weights[1] * v1[c];
                let got = out.y.data()[c * n + i];
                assert!((got - y).abs() < 1e-12, "y[{c},{i}] = {got}, hand value {y}");
            }
        }
    }

    #[test]
    fn attention_rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = AttentionParams::<f64>::init(8, 2, &mut rng);
        let x = seeded_x(2, 8, 9, 4);
        let out = reference_self_attention(&x, &params).unwrap();
        validate_row_stochastic(&out.attn, "test").expect("rows must sum to 1");
    }

    #[test]
    fn zero_query_collapses_to_uniform_rows_and_shared_context() {
        for n in [1usize, 4, 196] {
            let dim = 8;
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let mut params = AttentionParams::<f64>::init(dim, 2, &mut rng);
            params.w_q = Tensor::zeros(&[dim, dim]);
            let x = seeded_x(2, dim, n, 5);
            let out = reference_self_attention(&x, &params).unwrap();
            let uniform = 1.0 / n as f64;
            for &w in out.attn.data() {
                assert!(
                    (w - uniform).abs() < 1e-12,
                    "zero queries must give uniform attention, got {w} for n={n}"
                );
            }
            let context = collapsed_attention_context(&x, &params.w_v).unwrap();
            for s in 0..2 {
                for c in 0..dim {
                    let expected = context.data()[s * dim + c];
                    for i in 0..n {
                        let got = out.y.data()[s * dim * n + c * n + i];
                        assert!(
                            (got - expected).abs() < 1e-9,
                            "token {i} must carry the shared context, got {got} vs {expected}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn uniform_histogram_lands_in_one_bin() {
        let n = 196;
        let attn = Tensor::full(&[n, n], 1.0f64 / n as f64);
        let (counts, density) = attention_log_histogram(&attn).unwrap();
        let expected_bin = ((-(196f64.log10()) - HIST_LO) / 0.1) as usize;
        assert_eq!(expected_bin, 37, "log10(1/196) sits in bin 37");
        assert_eq!(counts[37], (n * n) as u64, "all mass must land in the uniform bin");
        assert!((density.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn one_hot_histogram_lands_in_the_top_bin() {
        let n = 5;
        let mut data = vec![0.0f64; n * n];
        for i in 0..n {
            data[i * n + i] = 1.0;
        }
        let attn = Tensor::new(&[n, n], data).unwrap();
        let (counts, _) = attention_log_histogram(&attn).unwrap();
        assert_eq!(counts[HIST_BINS - 1], n as u64, "weight 1 must land in the top bin");
        assert_eq!(counts[0], (n * n - n) as u64, "zero weights clamp into the lowest bin");
    }

    #[test]
    fn histogram_rejects_negative_and_non_stochastic_rows() {
        let bad = Tensor::new(&[1, 2], vec![1.5f64, -0.5]).unwrap();
        assert!(attention_log_histogram(&bad).is_err(), "negative weights must fail");
        let off = Tensor::new(&[1, 2], vec![0.7f64, 0.7]).unwrap();
        assert!(attention_log_histogram(&off).is_err(), "rows summing to 1.4 must fail");
    }

    #[test]
    fn random_softmax_rows_have_a_heavier_left_tail_than_uniform() {
        let (rows, n) = (1000, 196);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let normal = StandardNormal;
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows * n {
            let z: f64 = normal.sample(&mut rng);
            data.push(z);
        }
        let logits = Tensor::new(&[rows, n], data).unwrap();
        let soft = ops::softmax(&logits, 1).unwrap();
        let (_, density) = attention_log_histogram(&soft).unwrap();
        let below_minus_three: f64 = density[..30].iter().sum();
        let uniform = Tensor::full(&[rows, n], 1.0f64 / n as f64);
        let (_, uniform_density) = attention_log_histogram(&uniform).unwrap();
        let uniform_below: f64 = uniform_density[..30].iter().sum();
        assert_eq!(uniform_below, 0.0, "uniform attention has no mass below -3");
        assert!(
            below_minus_three > uniform_below,
            "random softmax rows must spread mass into the left tail, got {below_minus_three}"
        );
    }

    #[test]
    fn query_consistency_scores_the_canonical_cases() {
        let uniform = Tensor::full(&[4, 4], 0.25f64);
        assert_eq!(query_consistency(&uniform).unwrap(), 1.0, "identical rows score exactly 1");
        let mut eye = vec![0.0f64; 16];
        for i in 0..4 {
            eye[i * 4 + i] = 1.0;
        }
        let identity = Tensor::new(&[4, 4], eye).unwrap();
        assert_eq!(query_consistency(&identity).unwrap(), 0.0, "orthogonal rows score 0");
        let rows = Tensor::new(
            &[3, 3],
            vec![0.0f64, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
        )
        .unwrap();
        let score = query_consistency(&rows).unwrap();
        assert!(
            (score - 1.0 / 3.0).abs() < 1e-12,
            "pairs (1,1), (1,0), (1,0) must average to 1/3, got {score}"
        );
    }

    #[test]
    fn query_consistency_drops_when_a_row_becomes_one_hot() {
        let uniform = Tensor::full(&[4, 4], 0.25f64);
        let mut data = uniform.data().to_vec();
        data[0..4].copy_from_slice(&[1.0, 0.0, 0.0, 0.0]);
        let mixed = Tensor::new(&[4, 4], data).unwrap();
        assert!(
            query_consistency(&mixed).unwrap() < query_consistency(&uniform).unwrap(),
            "replacing a uniform row with a one-hot row must lower consistency"
        );
    }

    #[test]
    fn query_consistency_rejects_zero_rows() {
        let attn = Tensor::new(&[2, 2], vec![0.0f64, 0.0, 0.5, 0.5]).unwrap();
        let err = query_consistency(&attn).expect_err("zero-norm row must fail");
        assert!(err.to_string().contains("zero norm"), "unexpected error: {err}");
    }

    #[test]
    fn head_consistency_distinguishes_identical_from_disjoint_heads() {
        let same = Tensor::full(&[3, 2, 2], 0.5f64);
        assert_eq!(head_consistency(&same).unwrap(), 1.0);
        let disjoint = Tensor::new(
            &[2, 2, 2],
            vec![1.0f64, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        )
        .unwrap();
        assert_eq!(head_consistency(&disjoint).unwrap(), 0.0, "disjoint supports score 0");
        let single = Tensor::full(&[1, 2, 2], 0.5f64);
        assert_eq!(head_consistency(&single).unwrap(), 1.0, "a single head scores 1");
    }

    #[test]
    fn stats_bundle_round_trips_through_json() {
        let attn = Tensor::full(&[2, 4, 4], 0.25f64);
        let stats = attention_stats(&attn).unwrap();
        assert_eq!(stats.counts.iter().sum::<u64>(), 32, "every weight must be counted");
        let json = serde_json::to_string(&stats).unwrap();
        let back: AttentionStats = serde_json::from_str(&json).unwrap();
        assert_eq!(back.counts, stats.counts);
        assert_eq!(back.query_consistency, stats.query_consistency);
    }

    #[test]
    fn export_pulls_the_requested_block_and_rep() {
        let config = ModelConfig::preset("micro").unwrap();
        let model = Model::<f32>::init(config, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let image: Tensor<f32> = crate::tensor::trunc_normal(&[3, 32, 32], 1.0, &mut rng);
        let export = export_similarity_maps(&model, &image, 3, None).unwrap();
        assert_eq!(export.stage, 2, "blocks 2 and 3 live in the third stage");
        assert_eq!(export.block_in_stage, 1);
        assert_eq!(export.rep, 1, "rep defaults to the final repetition");
        assert_eq!(export.maps.shape(), &[4, 2, 2]);
        assert!(export_similarity_maps(&model, &image, 5, None).is_err(), "5 blocks total");
        assert!(export_similarity_maps(&model, &image, 0, Some(2)).is_err(), "2 reps only");
    }

    #[test]
    fn degenerate_spatial_variance_exports_the_shift_term() {
        let config = ModelConfig::preset("micro").unwrap();
        let model = Model::<f32>::init(config, 0).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let image: Tensor<f32> = crate::tensor::trunc_normal(&[3, 32, 32], 1.0, &mut rng);
        let export = export_similarity_maps(&model, &image, 4, None).unwrap();
        assert_eq!(export.maps.shape(), &[4, 1, 1], "last stage runs at 1x1");
        for &v in export.maps.data() {
            assert_eq!(v, 0.0, "a 1x1 plane has no spatial variance, so maps clamp to the shift");
        }
        assert_eq!(export.group_consistency, None, "zero maps have no defined cosine");
    }
}

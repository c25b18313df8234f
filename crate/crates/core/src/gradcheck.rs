//! Finite-difference validation of every analytic gradient.
//!
//! Each case builds a scalar loss on the tape, takes the analytic
//! gradient with one backward pass, and compares selected coordinates
//! against central differences with per-coordinate step
//! `h = 1e-5 * (1 + |theta|)`. Errors are relative with a floor of 1:
//! `|analytic - numeric| / max(1, |numeric|)`, and everything runs in
//! f64 so the difference quotient itself stays trustworthy.
//!
//! Losses for non-scalar outputs are probe-weighted sums: the output is
//! multiplied elementwise by a fixed seeded tensor before summation, so
//! the check exercises general output gradients rather than the all-ones
//! direction.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::block::{forward_block, BlockParams, MixerOptions};
use crate::error::Result;
use crate::model::{forward, Model, ModelConfig};
use crate::ops::ConvSpec;
use crate::tensor::{trunc_normal, Tensor};

/// Relative-error bound every gradient must meet.
pub const REL_TOL: f64 = 1e-4;

/// Outcome of one checked case.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct KernelCheck {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.max_rel_err < REL_TOL
    }
}

fn spread_indices(len: usize, want: usize) -> Vec<usize> {
    if len <= want {
        (0..len).collect()
    } else {
        (0..want).map(|k| k * len / want).collect()
    }
}

fn fd_max_rel(
    theta: &[f64],
    analytic: &[f64],
    indices: &[usize],
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<(usize, f64)> {
    assert_eq!(theta.len(), analytic.len(), "gradient must cover every coordinate");
    let mut buf = theta.to_vec();
    let mut max_rel = 0.0f64;
    for &i in indices {
        let h = 1e-5 * (1.0 + theta[i].abs());
        let plus = theta[i] + h;
        let minus = theta[i] - h;
        buf[i] = plus;
        let loss_plus = loss(&buf)?;
        buf[i] = minus;
        let loss_minus = loss(&buf)?;
        buf[i] = theta[i];
        let numeric = (loss_plus - loss_minus) / (plus - minus);
        let rel = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
        if rel > max_rel {
            max_rel = rel;
        }
    }
    Ok((indices.len(), max_rel))
}

fn probe_loss(g: &mut Graph<f64>, out: Var, seed: u64) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let probe = g.leaf(trunc_normal(&shape, 1.0, &mut rng));
    let weighted = g.mul(out, probe)?;
    Ok(g.sum_all(weighted))
}

fn check_graph(
    name: &str,
    inputs: Vec<Tensor<f64>>,
    coords: usize,
    build: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
) -> Result<KernelCheck> {
    let shapes: Vec<Vec<usize>> = inputs.iter().map(|t| t.shape().to_vec()).collect();
    let theta: Vec<f64> = inputs.iter().flat_map(|t| t.data().iter().copied()).collect();
    let run = |values: &[f64]| -> Result<(Graph<f64>, Vec<Var>, Var)> {
        let mut g = Graph::new();
        let mut vars = Vec::with_capacity(shapes.len());
        let mut cursor = 0usize;
        for shape in &shapes {
            let numel: usize = shape.iter().product();
            vars.push(g.leaf(Tensor::new(shape, values[cursor..cursor + numel].to_vec())?));
            cursor += numel;
        }
        let loss = build(&mut g, &vars)?;
        Ok((g, vars, loss))
    };
    let (g, vars, loss_var) = run(&theta)?;
    let grads = g.backward(loss_var)?;
    let analytic: Vec<f64> = vars
        .iter()
        .zip(&shapes)
        .flat_map(|(&v, shape)| grads.get_or_zeros(v, shape).into_data())
        .collect();
    let indices = spread_indices(theta.len(), coords);
    let (checked, max_rel_err) = fd_max_rel(&theta, &analytic, &indices, |values| {
        let (g, _, loss) = run(values)?;
        Ok(g.value(loss).data()[0])
    })?;
    Ok(KernelCheck { name: name.to_string(), checked, max_rel_err })
}

fn seeded(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trunc_normal(shape, 1.0, &mut rng)
}

/// Checks every primitive kernel's gradient, all coordinates up to 120
/// per case.
pub fn check_kernels() -> Result<Vec<KernelCheck>> {
    let coords = 120;
    let mut results = Vec::new();

    let spec = ConvSpec { in_channels: 3, out_channels: 4, kernel: 3, stride: 1, padding: 1, groups: 1 };
    results.push(check_graph(
        "conv2d",
        vec![seeded(&[2, 3, 5, 5], 1), seeded(&[4, 3, 3, 3], 2), seeded(&[4], 3)],
        coords,
        move |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), &spec)?;
            probe_loss(g, out, 100)
        },
    )?);

    let grouped = ConvSpec { in_channels: 4, out_channels: 4, kernel: 3, stride: 2, padding: 1, groups: 2 };
    results.push(check_graph(
        "conv2d_strided_grouped",
        vec![seeded(&[1, 4, 7, 7], 4), seeded(&[4, 2, 3, 3], 5), seeded(&[4], 6)],
        coords,
        move |g, v| {
            let out = g.conv2d(v[0], v[1], Some(v[2]), &grouped)?;
            probe_loss(g, out, 101)
        },
    )?);

    results.push(check_graph(
        "linear",
        vec![seeded(&[5, 6], 7), seeded(&[7, 6], 8), seeded(&[7], 9)],
        coords,
        |g, v| {
            let out = g.linear(v[0], v[1], Some(v[2]))?;
            probe_loss(g, out, 102)
        },
    )?);

    results.push(check_graph(
        "matmul",
        vec![seeded(&[5, 7], 10), seeded(&[7, 4], 11)],
        coords,
        |g, v| {
            let out = g.matmul(v[0], v[1])?;
            probe_loss(g, out, 103)
        },
    )?);

    results.push(check_graph(
        "layer_norm_channel",
        vec![seeded(&[2, 3, 4, 4], 12), seeded(&[3], 13), seeded(&[3], 14)],
        coords,
        |g, v| {
            let out = g.layer_norm(v[0], v[1], v[2], 1e-5, 1)?;
            probe_loss(g, out, 104)
        },
    )?);

    results.push(check_graph(
        "layer_norm_vector",
        vec![seeded(&[6, 10], 15), seeded(&[10], 16), seeded(&[10], 17)],
        coords,
        |g, v| {
            let out = g.layer_norm(v[0], v[1], v[2], 1e-5, 1)?;
            probe_loss(g, out, 105)
        },
    )?);

    results.push(check_graph("gelu", vec![seeded(&[8, 8], 18)], coords, |g, v| {
        let out = g.gelu(v[0]);
        probe_loss(g, out, 106)
    })?);

    results.push(check_graph("softmax", vec![seeded(&[8, 9], 19)], coords, |g, v| {
        let out = g.softmax(v[0], 1)?;
        probe_loss(g, out, 107)
    })?);

    let base = seeded(&[5, 6], 20);
    let offset = Tensor::from_fn(&[5, 6], |i| if i % 2 == 0 { 0.15 } else { -0.15 });
    let shifted = crate::ops::add(&base, &offset)?;
    results.push(check_graph("maxout", vec![base, shifted], coords, |g, v| {
        let out = g.maxout(v[0], v[1])?;
        probe_loss(g, out, 108)
    })?);

    results.push(check_graph("global_avg_pool", vec![seeded(&[2, 3, 4, 4], 21)], coords, |g, v| {
        let out = g.global_avg_pool(v[0])?;
        probe_loss(g, out, 109)
    })?);

    results.push(check_graph("broadcast_spatial", vec![seeded(&[5, 12], 22)], coords, |g, v| {
        let out = g.broadcast_spatial(v[0], 4, 5)?;
        probe_loss(g, out, 110)
    })?);

    results.push(check_graph(
        "group_dot",
        vec![seeded(&[2, 4, 3, 3], 23), seeded(&[2, 4], 24)],
        coords,
        |g, v| {
            let out = g.group_dot(v[0], v[1], 2)?;
            probe_loss(g, out, 111)
        },
    )?);

    results.push(check_graph(
        "spatial_group_norm",
        vec![seeded(&[2, 3, 4, 4], 25), seeded(&[3], 26), seeded(&[3], 27)],
        coords,
        |g, v| {
            let out = g.spatial_group_norm(v[0], v[1], v[2], 1e-5)?;
            probe_loss(g, out, 112)
        },
    )?);

    results.push(check_graph(
        "modulate",
        vec![seeded(&[2, 6], 28), seeded(&[2, 2, 4, 4], 29)],
        coords,
        |g, v| {
            let out = g.modulate(v[0], v[1])?;
            probe_loss(g, out, 113)
        },
    )?);

    results.push(check_graph("pad", vec![seeded(&[1, 3, 5, 5], 30)], coords, |g, v| {
        let out = g.pad(v[0], 1, 2, 0, 1)?;
        probe_loss(g, out, 114)
    })?);

    results.push(check_graph("cross_entropy", vec![seeded(&[8, 7], 31)], coords, |g, v| {
        g.cross_entropy(v[0], &[0, 3, 2, 1, 6, 5, 2, 0])
    })?);

    Ok(results)
}

/// Checks the composite block gradient (both mixers, two repetitions)
/// with respect to the input and every block parameter.
pub fn check_block(coords: usize) -> Result<KernelCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let params = BlockParams::<f64>::init(8, 2, 3, 4, 4, 2, &mut rng)?;
    let x = seeded(&[2, 8, 4, 4], 41);

    let mut tensors = vec![x];
    params.visit("block", &mut |_, t| tensors.push(t.clone()));
    let template = params;
    check_graph("fcvit_block", tensors, coords, move |g, v| {
        let mut names = Vec::new();
        let bound = template.bind(g, "block", &mut names);
        let mut remap = std::collections::BTreeMap::new();
        for (i, (_, var)) in names.iter().enumerate() {
            remap.insert(var.index(), v[i + 1]);
        }
        let bound = rebind_block(&bound, &remap);
        let (out, _) = forward_block(g, v[0], &bound, &MixerOptions::default())?;
        probe_loss(g, out, 115)
    })
}

fn rebind_block(
    bound: &crate::block::BoundBlock,
    remap: &std::collections::BTreeMap<usize, Var>,
) -> crate::block::BoundBlock {
    let m = |v: Var| *remap.get(&v.index()).expect("every bound var was remapped");
    crate::block::BoundBlock {
        reps: bound
            .reps
            .iter()
            .map(|r| crate::block::BoundRep {
                norm: (m(r.norm.0), m(r.norm.1)),
                squeeze0: (m(r.squeeze0.0), m(r.squeeze0.1)),
                squeeze1: (m(r.squeeze1.0), m(r.squeeze1.1)),
                recover: (m(r.recover.0), m(r.recover.1)),
                sim_alpha: m(r.sim_alpha),
                sim_beta: m(r.sim_beta),
                dw: (m(r.dw.0), m(r.dw.1)),
                dw_spec: r.dw_spec,
            })
            .collect(),
        groups: bound.groups,
        channel_norm: (m(bound.channel_norm.0), m(bound.channel_norm.1)),
        expand: (m(bound.expand.0), m(bound.expand.1), bound.expand.2),
        dw: (m(bound.dw.0), m(bound.dw.1), bound.dw.2),
        project: (m(bound.project.0), m(bound.project.1), bound.project.2),
    }
}

/// Checks the full micro model gradient through the cross-entropy loss,
/// sampling `coords` parameter coordinates spread across the registry.
pub fn check_micro_model(coords: usize) -> Result<KernelCheck> {
    let config = ModelConfig::preset("micro").expect("micro preset exists");
    let model = Model::<f64>::init(config, 3)?;
    let x = seeded(&[2, 3, 32, 32], 50);
    let labels = vec![0usize, 2];

    let mut theta = Vec::new();
    model.visit(&mut |_, t| theta.extend_from_slice(t.data()));

    let loss_at = |values: &[f64]| -> Result<f64> {
        let mut candidate = model.clone();
        let mut cursor = 0usize;
        candidate.visit_mut(&mut |_, t| {
            let numel = t.numel();
            t.data_mut().copy_from_slice(&values[cursor..cursor + numel]);
            cursor += numel;
        });
        let mut g = Graph::new();
        let xv = g.leaf(x.clone());
        let bound = candidate.bind(&mut g);
        let out = forward(&mut g, &bound, xv, &MixerOptions::default())?;
        let loss = g.cross_entropy(out.logits, &labels)?;
        Ok(g.value(loss).data()[0])
    };

    let mut g = Graph::new();
    let xv = g.leaf(x.clone());
    let bound = model.bind(&mut g);
    let out = forward(&mut g, &bound, xv, &MixerOptions::default())?;
    let loss = g.cross_entropy(out.logits, &labels)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<f64> = bound
        .params
        .iter()
        .flat_map(|&(_, var)| {
            let shape = g.value(var).shape().to_vec();
            grads.get_or_zeros(var, &shape).into_data()
        })
        .collect();

    let indices = spread_indices(theta.len(), coords);
    let (checked, max_rel_err) = fd_max_rel(&theta, &analytic, &indices, loss_at)?;
    Ok(KernelCheck { name: "micro_model".to_string(), checked, max_rel_err })
}

/// The full suite: every kernel, the composite block, and the micro
/// model end to end.
pub fn run_all(model_coords: usize) -> Result<Vec<KernelCheck>> {
    let mut results = check_kernels()?;
    results.push(check_block(120)?);
    results.push(check_micro_model(model_coords)?);
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_kernel_gradient_matches_finite_differences() {
        for check in check_kernels().expect("suite must run") {
            assert!(
                check.passed(),
                "{}: max relative error {} over {} coordinates exceeds {REL_TOL}",
                check.name,
                check.max_rel_err,
                check.checked
            );
            assert!(check.checked > 0, "{} checked nothing", check.name);
        }
    }

    #[test]
    fn block_gradient_matches_finite_differences() {
        let check = check_block(120).expect("block check must run");
        assert!(
            check.passed(),
            "block gradient off by {} over {} coordinates",
            check.max_rel_err,
            check.checked
        );
    }

    #[test]
    fn micro_model_gradient_matches_finite_differences() {
        let check = check_micro_model(60).expect("model check must run");
        assert!(check.checked >= 50, "must sample at least 50 coordinates");
        assert!(
            check.passed(),
            "model gradient off by {} over {} coordinates",
            check.max_rel_err,
            check.checked
        );
    }

    #[test]
    fn harness_catches_a_deliberately_wrong_gradient() {
        let theta = vec![0.3f64, -0.8, 1.2];
        let loss = |t: &[f64]| Ok(t.iter().map(|v| v * v).sum());
        let correct: Vec<f64> = theta.iter().map(|v| 2.0 * v).collect();
        let (_, ok_err) = fd_max_rel(&theta, &correct, &[0, 1, 2], loss).unwrap();
        assert!(ok_err < REL_TOL, "true gradient must pass, got {ok_err}");
        let wrong: Vec<f64> = theta.iter().map(|v| 2.2 * v).collect();
        let (_, bad_err) = fd_max_rel(&theta, &wrong, &[0, 1, 2], loss).unwrap();
        assert!(bad_err > REL_TOL, "scaled gradient must fail, got {bad_err}");
    }

    #[test]
    fn index_spread_covers_the_range_without_duplicates() {
        let idx = spread_indices(1000, 50);
        assert_eq!(idx.len(), 50);
        assert_eq!(idx[0], 0);
        assert!(*idx.last().unwrap() >= 900, "samples must reach the tail of the vector");
        let mut sorted = idx.clone();
        sorted.dedup();
        assert_eq!(sorted.len(), idx.len(), "indices must be distinct");
        assert_eq!(spread_indices(10, 50), (0..10).collect::<Vec<_>>());
    }
}

//! The full gradient-check suite: every differentiable op and every model
//! block, each on a batch of random small 64-bit instances.
//!
//! Non-scalar outputs are reduced with a fixed, non-uniform projection so
//! every output coordinate contributes a distinct weight to the checked
//! scalar.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{gradient_check, Graph, Var};
use crate::error::Result;
use crate::metrics::{combined_loss, LossConfig};
use crate::model::config::{Activation, EncoderConfig, ModelConfig};
use crate::model::decoder::{enhancer, image_branch, predict, PredictVars};
use crate::model::encoder::{adapter, layer_forward, LayerVars};
use crate::model::patch::{pseudo3d_embed, true3d_embed};
use crate::model::prompter::{channel_attention, prompt, spatial_attention, ChannelVars, PrompterVars, SpatialVars};
use crate::tensor::Tensor;

pub const SUITE_TOL: f64 = 1e-4;
pub const SUITE_INSTANCES: usize = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct CaseResult {
    pub name: &'static str,
    pub instances: usize,
    pub checked: usize,
    pub flagged: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuiteReport {
    pub tol: f64,
    pub cases: Vec<CaseResult>,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error <= self.tol && c.checked > 0)
    }

    pub fn failures(&self) -> Vec<&CaseResult> {
        self.cases
            .iter()
            .filter(|c| c.max_rel_error > self.tol || c.checked == 0)
            .collect()
    }
}

type Scalarize = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Instance {
    inputs: Vec<Tensor<f64>>,
    f: Scalarize,
}

/// `sum(y * r)` with `r` a fixed quasi-random field in `[-1, 1]`.
pub fn project(g: &mut Graph<f64>, y: Var) -> Result<Var> {
    let shape = g.shape(y).to_vec();
    let r = Tensor::from_fn(&shape, |i| ((i as f64 + 1.0) * 0.754_877_666_2).fract() * 2.0 - 1.0);
    let r = g.constant(r)?;
    let p = g.mul(y, r)?;
    g.reduce_sum(p, None)
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi))
}

fn normal(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    rand_t(rng, shape, -1.0, 1.0)
}

fn inst(inputs: Vec<Tensor<f64>>, f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static) -> Instance {
    Instance {
        inputs,
        f: Box::new(f),
    }
}

fn unary(rng: &mut ChaCha8Rng, lo: f64, hi: f64, op: fn(&mut Graph<f64>, Var) -> Result<Var>) -> Instance {
    let shape = [rng.random_range(1..4), rng.random_range(2..5)];
    inst(vec![rand_t(rng, &shape, lo, hi)], move |g, v| {
        let y = op(g, v[0])?;
        project(g, y)
    })
}

fn binary(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var, Var) -> Result<Var>) -> Instance {
    let shape = [rng.random_range(1..4), rng.random_range(2..5)];
    let a = normal(rng, &shape);
    // Denominator-safe second operand: magnitude in [0.5, 1.5].
    let b = Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5) * if rng.random_bool(0.5) { 1.0 } else { -1.0 });
    inst(vec![a, b], move |g, v| {
        let y = op(g, v[0], v[1])?;
        project(g, y)
    })
}

fn layer_cfg(mlp_residual: bool, act: Activation) -> EncoderConfig {
    EncoderConfig {
        layers: 1,
        heads: 2,
        adapter_dim: 2,
        scale: 0.7,
        taps: vec![1],
        mlp_ratio: 2,
        activation: act,
        mlp_residual,
    }
}

fn layer_instance(rng: &mut ChaCha8Rng, mlp_residual: bool) -> Instance {
    let (m, c) = (rng.random_range(2..5), 4);
    let r = 8;
    let act = if rng.random_bool(0.5) { Activation::Gelu } else { Activation::Relu };
    let cfg = layer_cfg(mlp_residual, act);
    let mut inputs = vec![normal(rng, &[m, c])];
    let gamma = |rng: &mut ChaCha8Rng| rand_t(rng, &[c], 0.5, 1.5);
    inputs.push(gamma(rng));
    inputs.push(normal(rng, &[c]));
    for _ in 0..4 {
        inputs.push(normal(rng, &[c, c]));
        inputs.push(normal(rng, &[c]));
    }
    inputs.push(gamma(rng));
    inputs.push(normal(rng, &[c]));
    inputs.push(normal(rng, &[c, r]));
    inputs.push(normal(rng, &[r]));
    inputs.push(normal(rng, &[r, c]));
    inputs.push(normal(rng, &[c]));
    inputs.push(normal(rng, &[c, 2]));
    inputs.push(normal(rng, &[2, c]));
    inst(inputs, move |g, v| {
        let lv = LayerVars {
            norm1: (v[1], v[2]),
            wq: v[3],
            bq: v[4],
            wk: v[5],
            bk: v[6],
            wv: v[7],
            bv: v[8],
            wo: v[9],
            bo: v[10],
            norm2: (v[11], v[12]),
            w1: v[13],
            b1: v[14],
            w2: v[15],
            b2: v[16],
            down: v[17],
            up: v[18],
        };
        let y = layer_forward(g, v[0], &lv, &cfg, 1)?;
        project(g, y)
    })
}

/// `z, wq, wk, wv, q_norm (γ, β), reduce_k, reduce_v`.
fn spatial_inputs(rng: &mut ChaCha8Rng, m: usize, c: usize, n: usize) -> Vec<Tensor<f64>> {
    vec![
        normal(rng, &[m, c]),
        normal(rng, &[c, c]),
        normal(rng, &[c, c]),
        normal(rng, &[c, c]),
        rand_t(rng, &[c], 0.5, 1.5),
        normal(rng, &[c]),
        normal(rng, &[n, m]),
        normal(rng, &[n, m]),
    ]
}

fn spatial_vars(v: &[Var]) -> SpatialVars {
    SpatialVars {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        q_norm: (v[3], v[4]),
        reduce_k: v[5],
        reduce_v: v[6],
    }
}

/// `wq, wk, wv, q_norm (γ, β), k_norm (γ, β)`.
fn channel_inputs(rng: &mut ChaCha8Rng, c: usize) -> Vec<Tensor<f64>> {
    vec![
        normal(rng, &[c, c]),
        normal(rng, &[c, c]),
        normal(rng, &[c, c]),
        rand_t(rng, &[c], 0.5, 1.5),
        normal(rng, &[c]),
        rand_t(rng, &[c], 0.5, 1.5),
        normal(rng, &[c]),
    ]
}

fn channel_vars(v: &[Var]) -> ChannelVars {
    ChannelVars {
        wq: v[0],
        wk: v[1],
        wv: v[2],
        q_norm: (v[3], v[4]),
        k_norm: (v[5], v[6]),
    }
}

fn dual_instance(rng: &mut ChaCha8Rng, share: bool) -> Instance {
    let (m, c) = (rng.random_range(3..6), 4);
    let n = rng.random_range(1..=m);
    let mut inputs = spatial_inputs(rng, m, c, n);
    let mut ch = channel_inputs(rng, c);
    if share {
        ch.drain(..2);
    }
    inputs.extend(ch);
    inputs.push(normal(rng, &[c, c / 2]));
    inputs.push(normal(rng, &[c, c / 2]));
    let scaling = rng.random_bool(0.5);
    inst(inputs, move |g, v| {
        let sa = spatial_vars(&v[1..8]);
        let ca = if share {
            let mut all = vec![sa.wq, sa.wk];
            all.extend_from_slice(&v[8..13]);
            channel_vars(&all)
        } else {
            channel_vars(&v[8..15])
        };
        let k = v.len();
        let vars = PrompterVars::Dual {
            sa,
            ca,
            down_sa: v[k - 2],
            down_ca: v[k - 1],
        };
        let y = prompt(g, v[0], &vars, scaling)?;
        project(g, y)
    })
}

type Builder = fn(&mut ChaCha8Rng) -> Instance;

fn cases() -> Vec<(&'static str, Builder)> {
    vec![
        ("matmul", |rng| {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            inst(vec![normal(rng, &[m, k]), normal(rng, &[k, n])], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y)
            })
        }),
        ("matmul_batched", |rng| {
            let (b, m, k, n) = (2, rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            inst(vec![normal(rng, &[b, m, k]), normal(rng, &[b, k, n])], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y)
            })
        }),
        ("matmul_broadcast", |rng| {
            let (m, k, n) = (rng.random_range(1..4), rng.random_range(1..4), rng.random_range(1..4));
            inst(vec![normal(rng, &[2, m, k]), normal(rng, &[k, n])], |g, v| {
                let y = g.matmul(v[0], v[1])?;
                project(g, y)
            })
        }),
        ("add", |rng| binary(rng, |g, a, b| g.add(a, b))),
        ("sub", |rng| binary(rng, |g, a, b| g.sub(a, b))),
        ("mul", |rng| binary(rng, |g, a, b| g.mul(a, b))),
        ("div", |rng| binary(rng, |g, a, b| g.div(a, b))),
        ("add_bias", |rng| {
            let c = rng.random_range(1..4);
            inst(vec![normal(rng, &[2, 3, c]), normal(rng, &[c])], |g, v| {
                let y = g.add_bias(v[0], v[1])?;
                project(g, y)
            })
        }),
        ("mul_channels", |rng| {
            let c = rng.random_range(1..4);
            inst(vec![normal(rng, &[2, 3, c]), normal(rng, &[c])], |g, v| {
                let y = g.mul_channels(v[0], v[1])?;
                project(g, y)
            })
        }),
        ("scale", |rng| {
            let s = rng.random_range(-2.0..2.0);
            let x = normal(rng, &[3, 2]);
            inst(vec![x], move |g, v| {
                let y = g.scale(v[0], s)?;
                project(g, y)
            })
        }),
        ("add_scalar", |rng| {
            let s = rng.random_range(-2.0..2.0);
            let x = normal(rng, &[3, 2]);
            inst(vec![x], move |g, v| {
                let y = g.add_scalar(v[0], s)?;
                let y = g.mul(y, y)?;
                project(g, y)
            })
        }),
        ("relu", |rng| unary(rng, -1.0, 1.0, |g, x| g.relu(x))),
        ("gelu", |rng| unary(rng, -3.0, 3.0, |g, x| g.gelu(x))),
        ("sigmoid", |rng| unary(rng, -4.0, 4.0, |g, x| g.sigmoid(x))),
        ("ln", |rng| unary(rng, 0.2, 3.0, |g, x| g.ln(x))),
        ("clamp", |rng| unary(rng, -1.0, 1.0, |g, x| g.clamp(x, -0.5, 0.5))),
        ("softmax", |rng| {
            let axis = rng.random_range(0..3);
            let x = rand_t(rng, &[2, 3, 4], -2.0, 2.0);
            inst(vec![x], move |g, v| {
                let y = g.softmax(v[0], axis)?;
                project(g, y)
            })
        }),
        ("layer_norm", |rng| {
            let axis = rng.random_range(0..3);
            let x = rand_t(rng, &[2, 3, 4], -2.0, 2.0);
            inst(vec![x], move |g, v| {
                let y = g.layer_norm(v[0], axis, 1e-6)?;
                project(g, y)
            })
        }),
        ("instance_norm", |rng| {
            let x = rand_t(rng, &[2, 3, 2, 2], -2.0, 2.0);
            inst(vec![x], |g, v| {
                let y = g.instance_norm(v[0], 1e-5)?;
                project(g, y)
            })
        }),
        ("reshape", |rng| {
            inst(vec![normal(rng, &[2, 6])], |g, v| {
                let y = g.reshape(v[0], &[3, 4])?;
                project(g, y)
            })
        }),
        ("permute", |rng| {
            inst(vec![normal(rng, &[2, 3, 4])], |g, v| {
                let y = g.permute(v[0], &[2, 0, 1])?;
                project(g, y)
            })
        }),
        ("concat", |rng| {
            let axis = rng.random_range(0..3);
            let mut s2 = [2, 3, 2];
            s2[axis] = 1;
            inst(vec![normal(rng, &[2, 3, 2]), normal(rng, &s2)], move |g, v| {
                let y = g.concat(&[v[0], v[1]], axis)?;
                project(g, y)
            })
        }),
        ("slice", |rng| {
            let axis = rng.random_range(0..2);
            let start = rng.random_range(0..2);
            inst(vec![normal(rng, &[4, 4])], move |g, v| {
                let y = g.slice(v[0], axis, start, 2)?;
                project(g, y)
            })
        }),
        ("reduce_sum", |rng| {
            let axis = [None, Some(0), Some(1), Some(2)][rng.random_range(0..4)];
            inst(vec![normal(rng, &[2, 3, 2])], move |g, v| {
                let y = g.reduce_sum(v[0], axis)?;
                project(g, y)
            })
        }),
        ("reduce_mean", |rng| {
            let axis = [None, Some(0), Some(1), Some(2)][rng.random_range(0..4)];
            inst(vec![normal(rng, &[2, 3, 2])], move |g, v| {
                let y = g.reduce_mean(v[0], axis)?;
                project(g, y)
            })
        }),
        ("conv3d", |rng| {
            let (ci, co) = (rng.random_range(1..3), rng.random_range(1..3));
            let (k, stride, pad) = [([3, 3, 3], 1, 1), ([3, 3, 3], 2, 1), ([2, 1, 2], 2, 0)][rng.random_range(0..3)];
            let x = normal(rng, &[4, 3, 4, ci]);
            let w = normal(rng, &[k[0], k[1], k[2], ci, co]);
            let b = normal(rng, &[co]);
            inst(vec![x, w, b], move |g, v| {
                let y = g.conv3d(v[0], v[1], Some(v[2]), [stride; 3], [pad; 3])?;
                project(g, y)
            })
        }),
        ("trilinear_upsample", |rng| {
            let out = [rng.random_range(2..6), rng.random_range(2..6), rng.random_range(1..5)];
            inst(vec![normal(rng, &[2, 3, 2, 2])], move |g, v| {
                let y = g.trilinear_upsample(v[0], out)?;
                project(g, y)
            })
        }),
        ("upsample_by", |rng| {
            inst(vec![normal(rng, &[2, 2, 1, 2])], |g, v| {
                let y = g.upsample_by(v[0], [2, 2, 2])?;
                project(g, y)
            })
        }),
        ("depth_conv", |rng| {
            let k = rng.random_range(1..4);
            inst(vec![normal(rng, &[2, 2, 2 * k, 3]), normal(rng, &[k, 3]), normal(rng, &[3])], |g, v| {
                let y = g.depth_conv(v[0], v[1], Some(v[2]))?;
                project(g, y)
            })
        }),
        ("pseudo3d_patch_embed", |rng| {
            let p = [2, rng.random_range(1..3), 2];
            inst(
                vec![
                    normal(rng, &[4, 2 * p[1], 4, 2]),
                    normal(rng, &[p[0], p[1], 1, 2, 3]),
                    normal(rng, &[3]),
                    normal(rng, &[p[2], 3]),
                    normal(rng, &[3]),
                ],
                |g, v| {
                    let y = pseudo3d_embed(g, v[0], v[1], Some(v[2]), v[3], Some(v[4]))?;
                    project(g, y)
                },
            )
        }),
        ("true3d_patch_embed", |rng| {
            inst(vec![normal(rng, &[4, 2, 4, 2]), normal(rng, &[2, 1, 2, 2, 3]), normal(rng, &[3])], |g, v| {
                let y = true3d_embed(g, v[0], v[1], Some(v[2]))?;
                project(g, y)
            })
        }),
        ("adapter", |rng| {
            let (m, c, l) = (rng.random_range(1..5), rng.random_range(2..5), rng.random_range(1..4));
            inst(vec![normal(rng, &[m, c]), normal(rng, &[c, l]), normal(rng, &[l, c])], |g, v| {
                let y = adapter(g, v[0], v[1], v[2])?;
                project(g, y)
            })
        }),
        ("encoder_layer", |rng| layer_instance(rng, false)),
        ("encoder_layer_residual", |rng| layer_instance(rng, true)),
        ("spatial_attention", |rng| {
            let (m, c) = (rng.random_range(2..6), rng.random_range(2..5));
            let n = rng.random_range(1..=m);
            let scaling = rng.random_bool(0.5);
            inst(spatial_inputs(rng, m, c, n), move |g, v| {
                let y = spatial_attention(g, v[0], &spatial_vars(&v[1..]), scaling)?;
                project(g, y)
            })
        }),
        ("channel_attention", |rng| {
            let (m, c) = (rng.random_range(2..6), rng.random_range(2..5));
            let scaling = rng.random_bool(0.5);
            let mut inputs = vec![normal(rng, &[m, c])];
            inputs.extend(channel_inputs(rng, c));
            inst(inputs, move |g, v| {
                let y = channel_attention(g, v[0], &channel_vars(&v[1..]), scaling)?;
                project(g, y)
            })
        }),
        ("dual_prompt_shared", |rng| dual_instance(rng, true)),
        ("dual_prompt_full", |rng| dual_instance(rng, false)),
        ("spatial_prompt", |rng| {
            let (m, c) = (rng.random_range(2..5), 4);
            let n = rng.random_range(1..=m);
            let mut inputs = spatial_inputs(rng, m, c, n);
            inputs.push(normal(rng, &[c, c]));
            inst(inputs, |g, v| {
                let vars = PrompterVars::Spatial {
                    sa: spatial_vars(&v[1..8]),
                    w_out: v[8],
                };
                let y = prompt(g, v[0], &vars, true)?;
                project(g, y)
            })
        }),
        ("enhancer", |rng| {
            // Tap [1,1,2,3], image [4,4,8,1] -> one stride-2 stage to [2,2,4].
            let (c, cp) = (3, 2);
            inst(
                vec![
                    normal(rng, &[1, 1, 2, c]),
                    normal(rng, &[4, 4, 8, 1]),
                    normal(rng, &[3, 3, 3, 1, cp]),
                    normal(rng, &[3, 3, 3, cp, cp]),
                    normal(rng, &[3, 3, 3, c + cp, cp]),
                    normal(rng, &[3, 3, 3, cp, cp]),
                ],
                |g, v| {
                    let bar = image_branch(g, v[1], &[v[2]], v[3])?;
                    let y = enhancer(g, v[0], bar, v[4], v[5])?;
                    project(g, y)
                },
            )
        }),
        ("predict", |rng| {
            let (k, cp) = (rng.random_range(1..4), 2);
            let mut inputs: Vec<Tensor<f64>> = (0..k).map(|_| normal(rng, &[2, 2, 2, cp])).collect();
            inputs.push(normal(rng, &[3, 3, 3, k * cp, cp]));
            inputs.push(normal(rng, &[3, 3, 3, cp, cp]));
            inputs.push(normal(rng, &[3, 3, 3, cp, cp]));
            inputs.push(normal(rng, &[cp]));
            inputs.push(normal(rng, &[1, 1, 1, cp, 1]));
            inputs.push(normal(rng, &[1]));
            inst(inputs, move |g, v| {
                let p = PredictVars {
                    head1: v[k],
                    head2: v[k + 1],
                    smooth_w: v[k + 2],
                    smooth_b: v[k + 3],
                    out_w: v[k + 4],
                    out_b: v[k + 5],
                };
                let y = predict(g, &v[..k], &p, [4, 4, 3])?;
                project(g, y)
            })
        }),
        ("combined_loss", |rng| {
            let gt = Tensor::from_fn(&[4, 4, 4, 1], |_| rng.random_range(0..2) as f64);
            let p = rand_t(rng, &[4, 4, 4, 1], 0.05, 0.95);
            inst(vec![p], move |g, v| combined_loss(g, v[0], &gt, &LossConfig::default()))
        }),
    ]
}

/// Runs every case on `instances` random instances.
pub fn run_gradcheck_suite(instances: usize, seed: u64, tol: f64) -> Result<SuiteReport> {
    run_filtered(instances, seed, tol, |_| true)
}

pub fn case_names() -> Vec<&'static str> {
    cases().into_iter().map(|(n, _)| n).collect()
}

/// Runs the cases whose name satisfies `keep`.
pub fn run_filtered(instances: usize, seed: u64, tol: f64, keep: impl Fn(&str) -> bool) -> Result<SuiteReport> {
    let mut out = Vec::new();
    for (idx, (name, build)) in cases().into_iter().enumerate() {
        if !keep(name) {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(idx as u64);
        let mut res = CaseResult {
            name,
            instances,
            checked: 0,
            flagged: 0,
            max_rel_error: 0.0,
        };
        for _ in 0..instances {
            let Instance { inputs, f } = build(&mut rng);
            let r = gradient_check(f, &inputs, tol)?;
            res.checked += r.checked;
            res.flagged += r.flagged;
            res.max_rel_error = res.max_rel_error.max(r.max_rel_error);
        }
        out.push(res);
    }
    Ok(SuiteReport { tol, cases: out })
}

/// Model config small enough for end-to-end checks in tests.
pub fn tiny_model_config() -> ModelConfig {
    let mut c = ModelConfig::default();
    c.volume = [8; 3];
    c.embed_dim = 8;
    c.encoder.layers = 3;
    c.encoder.heads = 2;
    c.encoder.adapter_dim = 4;
    c.encoder.taps = vec![1, 2, 3];
    c.prompter.layer = 3;
    c.prompter.reduced_tokens = 4;
    c.decoder.channels = 2;
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_on_a_few_instances() {
        let r = run_gradcheck_suite(3, 11, SUITE_TOL).unwrap();
        assert!(r.passed(), "{:#?}", r.failures());
        assert_eq!(r.cases.len(), case_names().len());
    }

    #[test]
    fn filter_selects_by_name() {
        let r = run_filtered(1, 0, SUITE_TOL, |n| n == "matmul").unwrap();
        assert_eq!(r.cases.len(), 1);
    }
}


//! Automatic prompter: linear-complexity spatial attention and channel
//! attention, fused back into one encoder tap with a residual.

use super::config::{ModelConfig, PrompterConfig, PrompterKind};
use super::encoder::affine_norm;
use super::init::{Initializer, TRAINABLE_SD};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Scalar;

pub const PREFIX: &str = "prompter.";

/// Spatial attention weights, bound into a graph.
#[derive(Debug, Clone, Copy)]
pub struct SpatialVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub q_norm: (Var, Var),
    /// `[n, M]` token reducers for keys and values.
    pub reduce_k: Var,
    pub reduce_v: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ChannelVars {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub q_norm: (Var, Var),
    pub k_norm: (Var, Var),
}

#[derive(Debug, Clone, Copy)]
pub enum PrompterVars {
    Spatial { sa: SpatialVars, w_out: Var },
    Dual { sa: SpatialVars, ca: ChannelVars, down_sa: Var, down_ca: Var },
}

pub fn init(init: &mut Initializer, cfg: &ModelConfig) -> Result<()> {
    let p = &cfg.prompter;
    let (c, m, n) = (cfg.embed_dim, cfg.tokens(), p.reduced_tokens);
    let mut w = |name: &str, shape: &[usize]| init.trunc_normal(name, shape, TRAINABLE_SD, false);
    match p.kind {
        PrompterKind::None => return Ok(()),
        PrompterKind::Spatial => w("prompter.sa.wout", &[c, c])?,
        PrompterKind::Dual => {
            if !p.share_qk {
                w("prompter.ca.wq", &[c, c])?;
                w("prompter.ca.wk", &[c, c])?;
            }
            w("prompter.ca.wv", &[c, c])?;
            w("prompter.sa.down", &[c, c / 2])?;
            w("prompter.ca.down", &[c, c / 2])?;
        }
    }
    w("prompter.wq", &[c, c])?;
    w("prompter.wk", &[c, c])?;
    w("prompter.sa.wv", &[c, c])?;
    w("prompter.sa.reduce_k", &[n, m])?;
    w("prompter.sa.reduce_v", &[n, m])?;
    let mut norms = vec!["prompter.sa.q_norm"];
    if p.kind == PrompterKind::Dual {
        norms.extend(["prompter.ca.q_norm", "prompter.ca.k_norm"]);
    }
    for norm in norms {
        init.ones(&format!("{norm}.gamma"), &[c], false)?;
        init.zeros(&format!("{norm}.beta"), &[c], false)?;
    }
    Ok(())
}

impl PrompterVars {
    pub fn bind<T: Scalar>(
        g: &mut Graph<T>,
        store: &ParameterStore<T>,
        cfg: &PrompterConfig,
    ) -> Result<Option<Self>> {
        let mut get = |name: &str| g.param(store, name);
        let norm = |get: &mut dyn FnMut(&str) -> Result<Var>, p: &str| -> Result<(Var, Var)> {
            Ok((get(&format!("{p}.gamma"))?, get(&format!("{p}.beta"))?))
        };
        if cfg.kind == PrompterKind::None {
            return Ok(None);
        }
        let sa = SpatialVars {
            wq: get("prompter.wq")?,
            wk: get("prompter.wk")?,
            wv: get("prompter.sa.wv")?,
            q_norm: norm(&mut get, "prompter.sa.q_norm")?,
            reduce_k: get("prompter.sa.reduce_k")?,
            reduce_v: get("prompter.sa.reduce_v")?,
        };
        Ok(Some(match cfg.kind {
            PrompterKind::Spatial => PrompterVars::Spatial {
                sa,
                w_out: get("prompter.sa.wout")?,
            },
            _ => {
                let (wq, wk) = if cfg.share_qk {
                    (sa.wq, sa.wk)
                } else {
                    (get("prompter.ca.wq")?, get("prompter.ca.wk")?)
                };
                let ca = ChannelVars {
                    wq,
                    wk,
                    wv: get("prompter.ca.wv")?,
                    q_norm: norm(&mut get, "prompter.ca.q_norm")?,
                    k_norm: norm(&mut get, "prompter.ca.k_norm")?,
                };
                PrompterVars::Dual {
                    sa,
                    ca,
                    down_sa: get("prompter.sa.down")?,
                    down_ca: get("prompter.ca.down")?,
                }
            }
        }))
    }
}

fn tokens<T: Scalar>(g: &mut Graph<T>, z: Var) -> Result<(Var, usize, usize)> {
    let s = g.shape(z).to_vec();
    if s.len() < 2 {
        return Err(Error::shape("prompter", format!("feature map {s:?}")));
    }
    let c = s[s.len() - 1];
    let m = s[..s.len() - 1].iter().product();
    Ok((g.reshape(z, &[m, c])?, m, c))
}

/// Spatial attention from projected token matrices `q`, `k`, `v` (each `[M, C]`):
/// `Q = Norm(q)`, `K̂ = R_k k`, `V̂ = R_v v`, `out = softmax_n(Q K̂ᵀ / τ) V̂`.
pub fn spatial_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    sa: &SpatialVars,
    scaling: bool,
) -> Result<Var> {
    let (m, c) = (g.shape(q)[0], g.shape(q)[1]);
    let rk = g.shape(sa.reduce_k).to_vec();
    if rk.len() != 2 || rk[1] != m || g.shape(sa.reduce_v) != rk.as_slice() {
        return Err(Error::shape(
            "spatial_attention",
            format!("reducers {rk:?} for {m} tokens"),
        ));
    }
    let q = affine_norm(g, q, sa.q_norm.0, sa.q_norm.1)?;
    let k_red = g.matmul(sa.reduce_k, k)?;
    let v_red = g.matmul(sa.reduce_v, v)?;
    let k_t = g.permute(k_red, &[1, 0])?;
    let mut scores = g.matmul(q, k_t)?;
    if scaling {
        scores = g.scale(scores, T::of(1.0 / (c as f64).sqrt()))?;
    }
    let weights = g.softmax(scores, 1)?;
    g.matmul(weights, v_red)
}

/// Spatial attention over `z: [.., C]`, result reshaped like `z`.
pub fn spatial_attention<T: Scalar>(g: &mut Graph<T>, z: Var, sa: &SpatialVars, scaling: bool) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let (t, m, _) = tokens(g, z)?;
    let n = g.shape(sa.reduce_k).first().copied().unwrap_or(0);
    if n > m {
        return Err(Error::InvalidArgument(format!("reduced tokens n = {n} exceed M = {m}")));
    }
    let q = g.matmul(t, sa.wq)?;
    let k = g.matmul(t, sa.wk)?;
    let v = g.matmul(t, sa.wv)?;
    let out = spatial_core(g, q, k, v, sa, scaling)?;
    g.reshape(out, &shape)
}

/// Channel attention from projected token matrices (each `[M, C]`):
/// `A = softmax_in(Kᵀ Q / τ)` is `[C_out, C_in]`, `out = V Aᵀ`.
pub fn channel_core<T: Scalar>(
    g: &mut Graph<T>,
    q: Var,
    k: Var,
    v: Var,
    ca: &ChannelVars,
    scaling: bool,
) -> Result<Var> {
    let m = g.shape(q)[0];
    let q = affine_norm(g, q, ca.q_norm.0, ca.q_norm.1)?;
    let k = affine_norm(g, k, ca.k_norm.0, ca.k_norm.1)?;
    let k_t = g.permute(k, &[1, 0])?;
    let mut affinity = g.matmul(k_t, q)?;
    if scaling {
        // Inner products run over all M tokens.
        affinity = g.scale(affinity, T::of(1.0 / (m as f64).sqrt()))?;
    }
    let a = g.softmax(affinity, 1)?;
    let a_t = g.permute(a, &[1, 0])?;
    g.matmul(v, a_t)
}

pub fn channel_attention<T: Scalar>(g: &mut Graph<T>, z: Var, ca: &ChannelVars, scaling: bool) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let (t, _, c) = tokens(g, z)?;
    if g.shape(ca.wq).first() != Some(&c) {
        return Err(Error::shape(
            "channel_attention",
            format!("{c} channels vs W_q {:?}", g.shape(ca.wq)),
        ));
    }
    let q = g.matmul(t, ca.wq)?;
    let k = g.matmul(t, ca.wk)?;
    let v = g.matmul(t, ca.wv)?;
    let out = channel_core(g, q, k, v, ca, scaling)?;
    g.reshape(out, &shape)
}

/// `Z + SA(Z) W_out` or `Z + concat(SA(Z) W_down_SA, CA(Z) W_down_CA)`.
/// With shared weights the `Z W_q` and `Z W_k` products are computed once.
pub fn prompt<T: Scalar>(g: &mut Graph<T>, z: Var, vars: &PrompterVars, scaling: bool) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    let (t, m, c) = tokens(g, z)?;
    let (sa, n) = match vars {
        PrompterVars::Spatial { sa, .. } | PrompterVars::Dual { sa, .. } => (sa, g.shape(sa.reduce_k)[0]),
    };
    if n > m {
        return Err(Error::InvalidArgument(format!("reduced tokens n = {n} exceed M = {m}")));
    }
    let q = g.matmul(t, sa.wq)?;
    let k = g.matmul(t, sa.wk)?;
    let v = g.matmul(t, sa.wv)?;
    let s_out = spatial_core(g, q, k, v, sa, scaling)?;
    let delta = match vars {
        PrompterVars::Spatial { w_out, .. } => g.matmul(s_out, *w_out)?,
        PrompterVars::Dual { ca, down_sa, down_ca, .. } => {
            if c % 2 != 0 {
                return Err(Error::Config(format!("dual prompter needs even C, got {c}")));
            }
            let cq = if ca.wq == sa.wq { q } else { g.matmul(t, ca.wq)? };
            let ck = if ca.wk == sa.wk { k } else { g.matmul(t, ca.wk)? };
            let cv = g.matmul(t, ca.wv)?;
            let c_out = channel_core(g, cq, ck, cv, ca, scaling)?;
            let a = g.matmul(s_out, *down_sa)?;
            let b = g.matmul(c_out, *down_ca)?;
            g.concat(&[a, b], 1)?
        }
    };
    let delta = g.reshape(delta, &shape)?;
    g.add(z, delta)
}

/// Replaces the tap produced by layer `cfg.layer` with its prompted version.
pub fn attach<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &PrompterConfig,
    tap_layers: &[usize],
    taps: &mut [Var],
) -> Result<()> {
    let Some(vars) = PrompterVars::bind(g, store, cfg)? else {
        return Ok(());
    };
    let i = tap_layers.iter().position(|&l| l == cfg.layer).ok_or_else(|| {
        Error::Config(format!("prompter.layer = {} is not a tap {tap_layers:?}", cfg.layer))
    })?;
    taps[i] = prompt(g, taps[i], &vars, cfg.scaling)?;
    Ok(())
}

//! Patch embedding: pseudo-3D (in-plane conv, then per-channel depth
//! aggregation) or a single true 3D convolution.

use super::config::{ModelConfig, PatchMode};
use super::init::{Initializer, TRAINABLE_SD};
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Scalar;

pub const PREFIX: &str = "patch.";

fn check_divisible(shape: &[usize], patch: [usize; 3]) -> Result<()> {
    if shape.len() != 4 || (0..3).any(|i| patch[i] == 0 || shape[i] % patch[i] != 0) {
        return Err(Error::shape(
            "patch_embed",
            format!("volume {shape:?} is not divisible by patch {patch:?}"),
        ));
    }
    Ok(())
}

/// In-plane `p_h x p_w` convolution on every depth slice, then a depthwise
/// depth-axis convolution with kernel and stride `p_d`.
///
/// `w2d: [p_h, p_w, 1, N, C]`, `wd: [p_d, C]`.
pub fn pseudo3d_embed<T: Scalar>(
    g: &mut Graph<T>,
    x: Var,
    w2d: Var,
    b2d: Option<Var>,
    wd: Var,
    bd: Option<Var>,
) -> Result<Var> {
    let (ws, dws) = (g.shape(w2d).to_vec(), g.shape(wd).to_vec());
    if ws.len() != 5 || ws[2] != 1 || dws.len() != 2 {
        return Err(Error::shape("pseudo3d_embed", format!("weights {ws:?}, {dws:?}")));
    }
    check_divisible(g.shape(x), [ws[0], ws[1], dws[0]])?;
    let slices = g.conv3d(x, w2d, b2d, [ws[0], ws[1], 1], [0; 3])?;
    g.depth_conv(slices, wd, bd)
}

/// One convolution with kernel = stride = patch. `w: [p_h, p_w, p_d, N, C]`.
pub fn true3d_embed<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
    let ws = g.shape(w).to_vec();
    if ws.len() != 5 {
        return Err(Error::shape("true3d_embed", format!("weight {ws:?}")));
    }
    check_divisible(g.shape(x), [ws[0], ws[1], ws[2]])?;
    g.conv3d(x, w, b, [ws[0], ws[1], ws[2]], [0; 3])
}

pub fn init(init: &mut Initializer, cfg: &ModelConfig) -> Result<()> {
    let [ph, pw, pd] = cfg.patch.patch;
    let (n, c) = (cfg.in_channels, cfg.embed_dim);
    match cfg.patch.mode {
        PatchMode::Pseudo3d => {
            init.trunc_normal("patch.conv2d.w", &[ph, pw, 1, n, c], TRAINABLE_SD, false)?;
            init.zeros("patch.conv2d.b", &[c], false)?;
            // Depth kernel starts as a mean over the patch depth.
            init.constant("patch.depth.w", &[pd, c], 1.0 / pd as f32, false)?;
            init.zeros("patch.depth.b", &[c], false)?;
        }
        PatchMode::True3d => {
            init.trunc_normal("patch.conv3d.w", &[ph, pw, pd, n, c], TRAINABLE_SD, false)?;
            init.zeros("patch.conv3d.b", &[c], false)?;
        }
    }
    let [h, w, d] = cfg.grid();
    init.trunc_normal("patch.pos", &[h, w, d, c], TRAINABLE_SD, false)
}

/// Embeds `[H̄, W̄, D̄, N]` into the token grid `[H, W, D, C]`, positional
/// embedding included.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    x: Var,
) -> Result<Var> {
    let tokens = match cfg.patch.mode {
        PatchMode::Pseudo3d => {
            let w2d = g.param(store, "patch.conv2d.w")?;
            let b2d = g.param(store, "patch.conv2d.b")?;
            let wd = g.param(store, "patch.depth.w")?;
            let bd = g.param(store, "patch.depth.b")?;
            pseudo3d_embed(g, x, w2d, Some(b2d), wd, Some(bd))?
        }
        PatchMode::True3d => {
            let w = g.param(store, "patch.conv3d.w")?;
            let b = g.param(store, "patch.conv3d.b")?;
            true3d_embed(g, x, w, Some(b))?
        }
    };
    let pos = g.param(store, "patch.pos")?;
    g.add(tokens, pos)
}

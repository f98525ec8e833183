//! Analytic FLOP and parameter counts. Nothing here runs a tensor op.
//!
//! FLOPs come from multiply-accumulates, each worth [`CostOptions::flops_per_mac`]
//! FLOPs. [`Scope::Weighted`] counts products with a learned operand
//! (projections, reducers, convolutions). [`Scope::AllProducts`] adds the
//! activation-by-activation products inside attention.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{ModelConfig, PatchMode, PrompterKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scope {
    Weighted,
    AllProducts,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CostOptions {
    pub flops_per_mac: u64,
    pub scope: Scope,
}

impl Default for CostOptions {
    fn default() -> Self {
        Self {
            flops_per_mac: 2,
            scope: Scope::Weighted,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrompterVariant {
    SpatialOnly,
    DualShared,
    DualFull,
}

impl PrompterVariant {
    pub const ALL: [PrompterVariant; 3] = [Self::SpatialOnly, Self::DualShared, Self::DualFull];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::SpatialOnly => "spatial",
            Self::DualShared => "dual-shared",
            Self::DualFull => "dual-full",
        }
    }

    fn of(cfg: &ModelConfig) -> Option<Self> {
        match cfg.prompter.kind {
            PrompterKind::None => None,
            PrompterKind::Spatial => Some(Self::SpatialOnly),
            PrompterKind::Dual if cfg.prompter.share_qk => Some(Self::DualShared),
            PrompterKind::Dual => Some(Self::DualFull),
        }
    }
}

impl fmt::Display for PrompterVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PrompterVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown prompter variant {s:?}; expected spatial, dual-shared or dual-full")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModuleCost {
    pub name: String,
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CostReport {
    pub modules: Vec<ModuleCost>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl CostReport {
    fn from_modules(modules: Vec<ModuleCost>) -> Self {
        Self {
            total_flops: modules.iter().map(|m| m.flops).sum(),
            total_params: modules.iter().map(|m| m.params).sum(),
            modules,
        }
    }

    pub fn module(&self, name: &str) -> Option<&ModuleCost> {
        self.modules.iter().find(|m| m.name == name)
    }
}

/// Running tally in MACs.
#[derive(Default)]
struct Tally {
    weighted: u64,
    products: u64,
    params: u64,
}

impl Tally {
    fn finish(self, name: &str, o: CostOptions) -> ModuleCost {
        let macs = match o.scope {
            Scope::Weighted => self.weighted,
            Scope::AllProducts => self.weighted + self.products,
        };
        ModuleCost {
            name: name.into(),
            flops: macs * o.flops_per_mac,
            params: self.params,
        }
    }
}

/// Prompter on a `[H, W, D, C]` feature map with `n` reduced tokens.
pub fn prompter_cost(feature: [usize; 4], n: usize, variant: PrompterVariant, o: CostOptions) -> ModuleCost {
    let [h, w, d, c] = feature.map(|v| v as u64);
    let (m, n) = (h * w * d, n as u64);
    let mut t = Tally::default();
    // Q, K and the spatial V projections.
    t.weighted += 3 * m * c * c;
    t.params += 3 * c * c;
    // Token reducers on K and V.
    t.weighted += 2 * n * m * c;
    t.params += 2 * n * m;
    // Q K̂ᵀ and softmax(.) V̂.
    t.products += 2 * m * n * c;
    // Query norm affine.
    t.params += 2 * c;
    match variant {
        PrompterVariant::SpatialOnly => {
            t.weighted += m * c * c;
            t.params += c * c;
        }
        PrompterVariant::DualShared | PrompterVariant::DualFull => {
            // Channel V projection and both half-width down projections.
            t.weighted += m * c * c + 2 * m * c * (c / 2);
            t.params += c * c + 2 * c * (c / 2);
            // Kᵀ Q and V Aᵀ.
            t.products += 2 * m * c * c;
            // Channel query and key norm affines.
            t.params += 4 * c;
            if variant == PrompterVariant::DualFull {
                t.weighted += 2 * m * c * c;
                t.params += 2 * c * c;
            }
        }
    }
    t.finish("prompter", o)
}

/// `(full - shared) / full` FLOPs of the dual prompter.
pub fn sharing_reduction(feature: [usize; 4], n: usize, o: CostOptions) -> f64 {
    let full = prompter_cost(feature, n, PrompterVariant::DualFull, o).flops as f64;
    let shared = prompter_cost(feature, n, PrompterVariant::DualShared, o).flops as f64;
    (full - shared) / full
}

fn conv(t: &mut Tally, out_positions: u64, taps: u64, ci: u64, co: u64, bias: bool) {
    t.weighted += out_positions * taps * ci * co;
    t.params += taps * ci * co + if bias { co } else { 0 };
}

/// Per-module costs of the whole model on its configured input volume.
pub fn count_cost(cfg: &ModelConfig, o: CostOptions) -> Result<CostReport> {
    cfg.validate()?;
    let [vh, vw, vd] = cfg.volume.map(|v| v as u64);
    let [gh, gw, gd] = cfg.grid().map(|v| v as u64);
    let [ph, pw, pd] = cfg.patch.patch.map(|v| v as u64);
    let (n_in, c) = (cfg.in_channels as u64, cfg.embed_dim as u64);
    let m = gh * gw * gd;
    let mut modules = Vec::new();

    let mut t = Tally::default();
    match cfg.patch.mode {
        PatchMode::Pseudo3d => {
            conv(&mut t, gh * gw * vd, ph * pw, n_in, c, true);
            t.weighted += m * pd * c;
            t.params += pd * c + c;
        }
        PatchMode::True3d => conv(&mut t, m, ph * pw * pd, n_in, c, true),
    }
    t.params += m * c;
    modules.push(t.finish("patch_embed", o));

    let e = &cfg.encoder;
    let (r, l) = (e.mlp_ratio as u64 * c, e.adapter_dim as u64);
    let mut t = Tally::default();
    for _ in 0..e.layers {
        t.weighted += 4 * m * c * c + 2 * m * c * r + 2 * m * c * l;
        t.products += 2 * m * m * c;
        t.params += 4 * (c * c + c) + (c * r + r) + (r * c + c) + 4 * c + 2 * c * l;
    }
    modules.push(t.finish("encoder", o));

    if let Some(v) = PrompterVariant::of(cfg) {
        let feature = [gh, gw, gd, c].map(|x| x as usize);
        modules.push(prompter_cost(feature, cfg.prompter.reduced_tokens, v, o));
    }

    let cp = cfg.decoder.channels as u64;
    let taps = e.taps.len() as u64;
    let enh = 8 * m;
    let mut t = Tally::default();
    if !cfg.decoder.no_image_branch {
        let branches = if cfg.decoder.share_image_branch { 1 } else { taps };
        for _ in 0..branches {
            let (mut ci, mut pos) = (n_in, vh * vw * vd);
            for _ in 0..cfg.image_stages() {
                pos /= 8;
                conv(&mut t, pos, 27, ci, cp, false);
                ci = cp;
            }
            conv(&mut t, pos, 27, ci, cp, false);
        }
    }
    for _ in 0..taps {
        conv(&mut t, enh, 27, c + cp, cp, false);
        conv(&mut t, enh, 27, cp, cp, false);
    }
    conv(&mut t, enh, 27, taps * cp, cp, false);
    conv(&mut t, enh, 27, cp, cp, false);
    conv(&mut t, vh * vw * vd, 27, cp, cp, true);
    conv(&mut t, vh * vw * vd, 1, cp, 1, true);
    modules.push(t.finish("decoder", o));

    Ok(CostReport::from_modules(modules))
}

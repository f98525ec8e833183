use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;
pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PatchMode {
    Pseudo3d,
    True3d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrompterKind {
    None,
    /// Spatial attention only, projected back with a `C x C` output map.
    Spatial,
    /// Spatial and channel attention with half-width down-projections.
    Dual,
}

macro_rules! string_enum {
    ($ty:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        impl $ty {
            pub fn as_str(self) -> &'static str {
                match self { $($ty::$variant => $text),+ }
            }
        }
        impl fmt::Display for $ty {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($text => Ok($ty::$variant),)+
                    _ => Err(Error::Config(format!(
                        "unknown {} {s:?}; expected one of: {}",
                        stringify!($ty),
                        [$($text),+].join(", ")
                    ))),
                }
            }
        }
    };
}

string_enum!(PatchMode { Pseudo3d => "pseudo3d", True3d => "true3d" });
string_enum!(Activation { Gelu => "gelu", Relu => "relu" });
string_enum!(PrompterKind { None => "none", Spatial => "spatial", Dual => "dual" });

#[derive(Debug, Clone, PartialEq)]
pub struct PatchConfig {
    pub patch: [usize; 3],
    pub mode: PatchMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub adapter_dim: usize,
    pub scale: f64,
    pub taps: Vec<usize>,
    pub mlp_ratio: usize,
    pub activation: Activation,
    /// Adds `Z_hat` to the layer output. Off reproduces the layer recurrence
    /// as written, where the MLP and adapter branches replace the stream.
    pub mlp_residual: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrompterConfig {
    pub kind: PrompterKind,
    pub reduced_tokens: usize,
    pub share_qk: bool,
    pub layer: usize,
    pub scaling: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    /// Per-enhancer width `C'`.
    pub channels: usize,
    pub no_image_branch: bool,
    pub share_image_branch: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub volume: [usize; 3],
    pub in_channels: usize,
    pub embed_dim: usize,
    pub patch: PatchConfig,
    pub encoder: EncoderConfig,
    pub prompter: PrompterConfig,
    pub decoder: DecoderConfig,
}

impl Default for ModelConfig {
    /// Desk configuration: 32^3 input, 4^3 patches, C = 64.
    fn default() -> Self {
        Self {
            volume: [32; 3],
            in_channels: 1,
            embed_dim: 64,
            patch: PatchConfig {
                patch: [4; 3],
                mode: PatchMode::Pseudo3d,
            },
            encoder: EncoderConfig {
                layers: 12,
                heads: 4,
                adapter_dim: 16,
                scale: 1.0,
                taps: vec![3, 6, 9, 12],
                mlp_ratio: 4,
                activation: Activation::Gelu,
                mlp_residual: false,
            },
            prompter: PrompterConfig {
                kind: PrompterKind::Dual,
                reduced_tokens: 64,
                share_qk: true,
                layer: 12,
                scaling: true,
            },
            decoder: DecoderConfig {
                channels: 16,
                no_image_branch: false,
                share_image_branch: false,
            },
        }
    }
}

impl ModelConfig {
    /// Token grid `(H, W, D)` after patching.
    pub fn grid(&self) -> [usize; 3] {
        [0, 1, 2].map(|i| self.volume[i] / self.patch.patch[i].max(1))
    }

    pub fn tokens(&self) -> usize {
        self.grid().iter().product()
    }

    /// Enhancer resolution `(2H, 2W, 2D)`.
    pub fn enhancer_grid(&self) -> [usize; 3] {
        self.grid().map(|v| 2 * v)
    }

    /// Stride-2 stages that take the input volume down to the enhancer grid.
    pub fn image_stages(&self) -> usize {
        (self.patch.patch[0] / 2).trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        let c = self.embed_dim;
        if self.in_channels == 0 {
            return err("model.in_channels must be >= 1".into());
        }
        if c < 8 {
            return err(format!("model.embed_dim = {c} must be >= 8"));
        }
        let p = self.patch.patch;
        if p.contains(&0) {
            return err(format!("patch sizes {p:?} must be positive"));
        }
        for i in 0..3 {
            if self.volume[i] == 0 || self.volume[i] % p[i] != 0 {
                return err(format!(
                    "volume dims {:?} are not divisible by patch {p:?}",
                    self.volume
                ));
            }
        }
        if p[0] != p[1] || p[1] != p[2] || p[0] < 2 || !(p[0] / 2).is_power_of_two() || p[0] % 2 != 0 {
            return err(format!(
                "patch {p:?} must be an isotropic 2 * 2^k so the image branch can reach (2H, 2W, 2D)"
            ));
        }
        let e = &self.encoder;
        if e.layers == 0 {
            return err("encoder.layers must be >= 1".into());
        }
        if e.heads == 0 || c % e.heads != 0 {
            return err(format!("encoder.heads = {} must divide embed_dim {c}", e.heads));
        }
        if e.adapter_dim == 0 {
            return err("encoder.adapter_dim must be >= 1".into());
        }
        if !e.scale.is_finite() {
            return err(format!("encoder.scale = {} must be finite", e.scale));
        }
        if e.mlp_ratio == 0 {
            return err("encoder.mlp_ratio must be >= 1".into());
        }
        if e.taps.is_empty() || e.taps.iter().any(|&t| t == 0 || t > e.layers) {
            return err(format!("encoder.taps {:?} must lie in 1..={}", e.taps, e.layers));
        }
        if e.taps.windows(2).any(|w| w[0] >= w[1]) {
            return err(format!("encoder.taps {:?} must be strictly increasing", e.taps));
        }
        let pr = &self.prompter;
        if pr.kind != PrompterKind::None {
            if !e.taps.contains(&pr.layer) {
                return err(format!(
                    "prompter.layer = {} must be one of the taps {:?}",
                    pr.layer, e.taps
                ));
            }
            if pr.reduced_tokens == 0 || pr.reduced_tokens > self.tokens() {
                return err(format!(
                    "prompter.n = {} must lie in 1..={} tokens",
                    pr.reduced_tokens,
                    self.tokens()
                ));
            }
            if pr.kind == PrompterKind::Dual && c % 2 != 0 {
                return err(format!("dual prompter needs an even embed_dim, got {c}"));
            }
        }
        if self.decoder.channels == 0 {
            return err("decoder.channels must be >= 1".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_default_is_valid() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        assert_eq!(c.grid(), [8; 3]);
        assert_eq!(c.enhancer_grid(), [16; 3]);
        assert_eq!(c.image_stages(), 1);
    }

    #[test]
    fn rejections() {
        let mut c = ModelConfig::default();
        c.volume = [30, 32, 32];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.patch.patch = [6; 3];
        c.volume = [36; 3];
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.embed_dim = 66;
        c.encoder.heads = 4;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.prompter.layer = 5;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::default();
        c.prompter.reduced_tokens = 513;
        assert!(c.validate().is_err());
    }

    #[test]
    fn enum_round_trip() {
        for m in [PatchMode::Pseudo3d, PatchMode::True3d] {
            assert_eq!(m.as_str().parse::<PatchMode>().unwrap(), m);
        }
        assert!("dual-ish".parse::<PrompterKind>().is_err());
    }
}

//! Feature enhanced decoder: one enhancer per tap fusing the upsampled tap
//! with conv features of the original image, then the prediction head.

use super::config::{ModelConfig, INSTANCE_NORM_EPS};
use super::init::Initializer;
use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::{Scalar, Tensor};

pub const PREFIX: &str = "decoder.";

/// conv 3^3 (no bias) -> instance norm -> relu.
pub fn conv_in_relu<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, stride: usize) -> Result<Var> {
    let y = g.conv3d(x, w, None, [stride; 3], [1; 3])?;
    let y = g.instance_norm(y, T::of(INSTANCE_NORM_EPS))?;
    g.relu(y)
}

/// Two conv-norm-relu units at stride 1.
pub fn conv_block<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let y = conv_in_relu(g, x, w1, 1)?;
    conv_in_relu(g, y, w2, 1)
}

fn image_prefix(cfg: &ModelConfig, j: usize) -> String {
    if cfg.decoder.share_image_branch {
        "decoder.img.".into()
    } else {
        format!("decoder.enh{j}.img.")
    }
}

fn conv_weight(init: &mut Initializer, name: &str, ci: usize, co: usize) -> Result<()> {
    init.kaiming(name, &[3, 3, 3, ci, co], 27 * ci)
}

pub fn init(init: &mut Initializer, cfg: &ModelConfig) -> Result<()> {
    let (c, cp, n) = (cfg.embed_dim, cfg.decoder.channels, cfg.in_channels);
    let taps = cfg.encoder.taps.len();
    if !cfg.decoder.no_image_branch {
        let branches = if cfg.decoder.share_image_branch { 1 } else { taps };
        for j in 1..=branches {
            let p = image_prefix(cfg, j);
            let mut ci = n;
            for s in 1..=cfg.image_stages() {
                conv_weight(init, &format!("{p}s{s}.w"), ci, cp)?;
                ci = cp;
            }
            conv_weight(init, &format!("{p}final.w"), ci, cp)?;
        }
    }
    for j in 1..=taps {
        conv_weight(init, &format!("decoder.enh{j}.fuse1.w"), c + cp, cp)?;
        conv_weight(init, &format!("decoder.enh{j}.fuse2.w"), cp, cp)?;
    }
    conv_weight(init, "decoder.head1.w", taps * cp, cp)?;
    conv_weight(init, "decoder.head2.w", cp, cp)?;
    conv_weight(init, "decoder.smooth.w", cp, cp)?;
    init.zeros("decoder.smooth.b", &[cp], false)?;
    init.kaiming("decoder.out.w", &[1, 1, 1, cp, 1], cp)?;
    init.zeros("decoder.out.b", &[1], false)
}

/// Stride-2 pyramid from the input volume down to `(2H, 2W, 2D, C')`.
pub fn image_branch<T: Scalar>(g: &mut Graph<T>, image: Var, stages: &[Var], last: Var) -> Result<Var> {
    let mut x = image;
    for &w in stages {
        x = conv_in_relu(g, x, w, 2)?;
    }
    conv_in_relu(g, x, last, 1)
}

/// `E = ConvBlock(concat(Upsample(Z), Ē))`.
pub fn enhancer<T: Scalar>(g: &mut Graph<T>, z: Var, e_bar: Var, w1: Var, w2: Var) -> Result<Var> {
    let (zs, es) = (g.shape(z).to_vec(), g.shape(e_bar).to_vec());
    if zs.len() != 4 || es.len() != 4 || (0..3).any(|i| es[i] != 2 * zs[i]) {
        return Err(Error::shape(
            "enhancer",
            format!("tap {zs:?} does not upsample onto image features {es:?}"),
        ));
    }
    let e_hat = g.upsample_by(z, [2; 3])?;
    let x = g.concat(&[e_hat, e_bar], 3)?;
    conv_block(g, x, w1, w2)
}

#[derive(Debug, Clone, Copy)]
pub struct PredictVars {
    pub head1: Var,
    pub head2: Var,
    pub smooth_w: Var,
    pub smooth_b: Var,
    pub out_w: Var,
    pub out_b: Var,
}

impl PredictVars {
    pub fn bind<T: Scalar>(g: &mut Graph<T>, store: &ParameterStore<T>) -> Result<Self> {
        Ok(Self {
            head1: g.param(store, "decoder.head1.w")?,
            head2: g.param(store, "decoder.head2.w")?,
            smooth_w: g.param(store, "decoder.smooth.w")?,
            smooth_b: g.param(store, "decoder.smooth.b")?,
            out_w: g.param(store, "decoder.out.w")?,
            out_b: g.param(store, "decoder.out.b")?,
        })
    }
}

/// `Y = sigmoid(proj(relu(smooth(Upsample(ConvBlock(concat(E_1..E_k)))))))`.
pub fn predict<T: Scalar>(g: &mut Graph<T>, es: &[Var], p: &PredictVars, out: [usize; 3]) -> Result<Var> {
    let first = g.shape(es[0]).to_vec();
    if let Some(&bad) = es.iter().find(|&&e| g.shape(e) != first.as_slice()) {
        return Err(Error::shape(
            "predict",
            format!("enhancer outputs {first:?} vs {:?}", g.shape(bad)),
        ));
    }
    let x = g.concat(es, 3)?;
    let x = conv_block(g, x, p.head1, p.head2)?;
    let x = g.trilinear_upsample(x, out)?;
    let x = g.conv3d(x, p.smooth_w, Some(p.smooth_b), [1; 3], [1; 3])?;
    let x = g.relu(x)?;
    let x = g.conv3d(x, p.out_w, Some(p.out_b), [1; 3], [0; 3])?;
    g.sigmoid(x)
}

/// Runs every enhancer on its tap and the prediction head.
pub fn decode<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    taps: &[Var],
    image: Var,
) -> Result<Var> {
    let cp = cfg.decoder.channels;
    let [h2, w2, d2] = cfg.enhancer_grid();
    let mut shared_bar = None;
    let mut es = Vec::with_capacity(taps.len());
    for (idx, &z) in taps.iter().enumerate() {
        let j = idx + 1;
        let e_bar = if cfg.decoder.no_image_branch {
            g.constant(Tensor::zeros(&[h2, w2, d2, cp]))?
        } else if let Some(b) = shared_bar {
            b
        } else {
            let p = image_prefix(cfg, j);
            let stages = (1..=cfg.image_stages())
                .map(|s| g.param(store, &format!("{p}s{s}.w")))
                .collect::<Result<Vec<_>>>()?;
            let last = g.param(store, &format!("{p}final.w"))?;
            let b = image_branch(g, image, &stages, last)?;
            if cfg.decoder.share_image_branch {
                shared_bar = Some(b);
            }
            b
        };
        let w1 = g.param(store, &format!("decoder.enh{j}.fuse1.w"))?;
        let w2 = g.param(store, &format!("decoder.enh{j}.fuse2.w"))?;
        es.push(enhancer(g, z, e_bar, w1, w2)?);
    }
    let pv = PredictVars::bind(g, store)?;
    predict(g, &es, &pv, cfg.volume)
}

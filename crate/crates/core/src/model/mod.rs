//! The segmentation network: patch embedding, adapter-tuned encoder,
//! prompter on one tap, and the feature enhanced decoder.

pub mod config;
pub mod decoder;
pub mod encoder;
pub mod init;
pub mod patch;
pub mod prompter;

pub use config::{
    Activation, DecoderConfig, EncoderConfig, ModelConfig, PatchConfig, PatchMode, PrompterConfig,
    PrompterKind,
};
pub use init::Initializer;

use crate::autodiff::{Graph, Var};
use crate::error::{Error, Result};
use crate::params::ParameterStore;
use crate::tensor::Scalar;

/// Builds a freshly initialized parameter store with the freeze policy applied.
pub fn build(cfg: &ModelConfig, seed: u64) -> Result<ParameterStore<f32>> {
    cfg.validate()?;
    let mut store = ParameterStore::new();
    let mut init = Initializer::new(&mut store, seed);
    patch::init(&mut init, cfg)?;
    encoder::init(&mut init, cfg)?;
    prompter::init(&mut init, cfg)?;
    decoder::init(&mut init, cfg)?;
    apply_freeze_policy(&mut store)?;
    Ok(store)
}

/// Whether a parameter belongs to the pretrained core that stays fixed.
pub fn is_frozen_name(name: &str) -> Result<bool> {
    if let Some(rest) = name.strip_prefix(encoder::PREFIX) {
        let part = rest.split_once('.').map(|(_, p)| p).unwrap_or("");
        if encoder::FROZEN_PARTS.iter().any(|p| part.starts_with(p)) {
            return Ok(true);
        }
        if part.starts_with("adapter.") {
            return Ok(false);
        }
        return Err(Error::UnknownParameter(name.into()));
    }
    if [patch::PREFIX, prompter::PREFIX, decoder::PREFIX]
        .iter()
        .any(|p| name.starts_with(p))
    {
        return Ok(false);
    }
    Err(Error::UnknownParameter(name.into()))
}

/// Freezes attention, MLP and norm affines of the encoder; everything else
/// is trainable.
pub fn apply_freeze_policy<T: Scalar>(store: &mut ParameterStore<T>) -> Result<()> {
    let names: Vec<String> = store.iter().map(|e| e.name.clone()).collect();
    let flags = names
        .iter()
        .map(|n| is_frozen_name(n))
        .collect::<Result<Vec<_>>>()?;
    for (n, f) in names.iter().zip(flags) {
        store.set_frozen(n, f)?;
    }
    Ok(())
}

/// Full forward pass from a `[H̄, W̄, D̄, N]` volume to a `[H̄, W̄, D̄, 1]`
/// probability map.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    store: &ParameterStore<T>,
    cfg: &ModelConfig,
    image: Var,
) -> Result<Var> {
    let shape = g.shape(image).to_vec();
    let want = [cfg.volume[0], cfg.volume[1], cfg.volume[2], cfg.in_channels];
    if shape != want {
        return Err(Error::shape(
            "model_forward",
            format!("input {shape:?}, configured for {want:?}"),
        ));
    }
    let tokens = patch::forward(g, store, cfg, image)?;
    let mut taps = encoder::encode(g, store, &cfg.encoder, tokens)?;
    prompter::attach(g, store, &cfg.prompter, &cfg.encoder.taps, &mut taps)?;
    decoder::decode(g, store, cfg, &taps, image)
}

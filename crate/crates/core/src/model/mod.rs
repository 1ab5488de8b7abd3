//! Mixture encoder, autoregressive order-0 decoder and non-autoregressive
//! higher-order model.

mod ar;
pub mod layers;
mod nar;
pub mod probes;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec::RvqCodec;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::sot::Vocab;

pub use ar::{ArMemory, ArModel, ArState};
pub use layers::{Block, Ctx, KvCache};
pub use nar::NarModel;

use layers::{sinusoidal_positions, LayerNorm, Linear};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub codebook_size: usize,
    pub num_orders: usize,
    /// Width of the per-frame mixture features (the codec latent size).
    pub input_dim: usize,
    pub d_model: usize,
    pub heads: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub ff_mult: usize,
    pub max_len: usize,
    pub dropout: f64,
    pub nar_cross_attention: bool,
    pub nar_task_embeddings: bool,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            codebook_size: 64,
            num_orders: 8,
            input_dim: 32,
            d_model: 128,
            heads: 4,
            enc_layers: 4,
            dec_layers: 4,
            ff_mult: 4,
            max_len: 256,
            dropout: 0.1,
            nar_cross_attention: true,
            nar_task_embeddings: true,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn vocab(&self) -> Vocab {
        Vocab::new(self.codebook_size)
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return Err(Error::input(format!(
                "d_model {} must be a positive multiple of heads {}",
                self.d_model, self.heads
            )));
        }
        if !self.d_model.is_multiple_of(2) {
            return Err(Error::input("d_model must be even for sinusoidal positions"));
        }
        if self.num_orders == 0 || self.codebook_size < 2 || self.max_len < 2 || self.input_dim == 0 {
            return Err(Error::input("num_orders, codebook_size, max_len and input_dim must be positive"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::input("dropout must be in [0, 1)"));
        }
        Ok(())
    }

    /// Check that a codec can feed and decode this model.
    pub fn check_codec(&self, codec: &RvqCodec) -> Result<()> {
        if codec.codebook_size() != self.codebook_size
            || codec.num_orders() < self.num_orders
            || codec.config.latent_dim != self.input_dim
        {
            return Err(Error::input(format!(
                "codec (|C|={}, m={}, latent={}) does not match model (|C|={}, m={}, input={})",
                codec.codebook_size(),
                codec.num_orders(),
                codec.config.latent_dim,
                self.codebook_size,
                self.num_orders,
                self.input_dim
            )));
        }
        Ok(())
    }
}

/// Per-frame mixture features fed to the encoder.
pub fn mixture_features(codec: &RvqCodec, mixture: &[f64]) -> Result<Tensor> {
    codec.latents(mixture)
}

/// Frame projection, sinusoidal positions, transformer layers and a
/// softmax-weighted fusion of every layer output.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub input: Linear,
    pub layers: Vec<Block>,
    /// One logit per layer output, embedding layer included.
    pub fusion: ParamId,
    pub ln_out: LayerNorm,
    pub d_model: usize,
}

impl Encoder {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.d_model;
        Self {
            input: Linear::new(store, &format!("{name}.input"), cfg.input_dim, d, true, rng),
            layers: (0..cfg.enc_layers)
                .map(|l| Block::new(store, &format!("{name}.layer{l}"), d, cfg.heads, cfg.ff_mult, false, rng))
                .collect(),
            fusion: store.insert(format!("{name}.fusion"), Tensor::zeros(vec![cfg.enc_layers + 1])),
            ln_out: LayerNorm::new(store, &format!("{name}.ln_out"), d),
            d_model: d,
        }
    }

    /// `H = LayerNorm(Σ_l softmax(w)_l · out_l)`, `[T, d_model]`.
    pub fn forward(&self, g: &mut Graph<'_>, features: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        if features.rank() != 2 || features.rows() == 0 {
            return Err(Error::input("encoder needs a non-empty [T, input_dim] feature matrix"));
        }
        let t = features.rows();
        let f = g.constant(features.clone());
        let x = self.input.forward(g, f)?;
        let pos = g.constant(sinusoidal_positions(t, self.d_model));
        let mut x = g.add(x, pos)?;
        x = ctx.drop(g, x);
        let mut outs = vec![x];
        for layer in &self.layers {
            x = layer.forward(g, x, None, None, ctx)?;
            outs.push(x);
        }
        let w = g.param(self.fusion);
        let w = g.softmax(w, 0)?;
        let mut fused = None;
        for (l, &o) in outs.iter().enumerate() {
            let wl = g.select(w, l)?;
            let term = g.mul(o, wl)?;
            fused = Some(match fused {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
        }
        self.ln_out.forward(g, fused.expect("at least the embedding output"))
    }
}

pub(crate) fn container_for(kind: &str, cfg: &ModelConfig, store: &ParamStore) -> Container {
    let mut c = Container::new(json!({"kind": kind, "config": cfg}));
    c.extend_from_store("", store);
    c
}

pub(crate) fn config_from(c: &Container, kind: &str, origin: &Path) -> Result<ModelConfig> {
    if c.header.get("kind").and_then(|k| k.as_str()) != Some(kind) {
        return Err(Error::Format {
            path: origin.to_path_buf(),
            msg: format!("expected a {kind} checkpoint"),
        });
    }
    let cfg: ModelConfig = serde_json::from_value(c.header["config"].clone())?;
    cfg.validate()?;
    Ok(cfg)
}

pub(crate) fn load_params(store: &mut ParamStore, c: &Container, origin: &Path) -> Result<()> {
    store
        .load_from(&c.store_with_prefix(""))
        .map_err(|msg| Error::Format {
            path: origin.to_path_buf(),
            msg,
        })
}

pub(crate) fn save_model(kind: &str, cfg: &ModelConfig, store: &ParamStore, path: &Path) -> Result<()> {
    container_for(kind, cfg, store).save(path)
}

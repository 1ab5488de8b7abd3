//! Residual vector quantization codec: waveform ↔ `m`-order token grids.
//!
//! A [`FrameCoder`] maps windowed frames to latents and back; `m` independent
//! codebooks quantize the latent residual order by order. Entry 0 of every
//! codebook is the zero vector and never moves, so a silent frame encodes to
//! all-zero tokens and each order can only shrink the residual.

mod frame;
mod grid;
mod train;

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::container::Container;
use crate::error::{Error, Result};
use crate::numcore::Tensor;

pub use frame::FrameCoder;
pub use grid::{GridRecord, TokenGrid};
pub use train::{train_codec, CodecTrainConfig, CodecTrainReport};

pub const MAX_ORDERS: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub sample_rate: u32,
    pub frame_len: usize,
    pub hop: usize,
    pub latent_dim: usize,
    pub num_orders: usize,
    pub codebook_size: usize,
}

impl Default for CodecConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            frame_len: 64,
            hop: 64,
            latent_dim: 32,
            num_orders: 8,
            codebook_size: 64,
        }
    }
}

impl CodecConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_orders == 0 || self.num_orders > MAX_ORDERS {
            return Err(Error::input(format!(
                "num_orders {} must be in 1..={MAX_ORDERS}",
                self.num_orders
            )));
        }
        if self.codebook_size < 2 {
            return Err(Error::input("codebook_size must be at least 2"));
        }
        if self.latent_dim == 0 || self.frame_len == 0 {
            return Err(Error::input("latent_dim and frame_len must be positive"));
        }
        if self.hop == 0 || self.hop > self.frame_len {
            return Err(Error::input(format!(
                "hop {} must be in 1..={}",
                self.hop, self.frame_len
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::input("sample_rate must be positive"));
        }
        Ok(())
    }
}

/// One quantizer order.
#[derive(Clone, Debug, PartialEq)]
pub struct Codebook {
    pub order: usize,
    /// `[|C|, latent_dim]`; row 0 is always zero.
    pub entries: Tensor,
    pub ema_counts: Vec<f64>,
}

impl Codebook {
    pub fn size(&self) -> usize {
        self.entries.shape()[0]
    }

    pub fn entry(&self, id: usize) -> &[f64] {
        self.entries.row(id)
    }

    /// Nearest entry by squared distance; ties go to the lowest id.
    pub fn nearest(&self, v: &[f64]) -> (usize, f64) {
        let mut best = (0, f64::INFINITY);
        for id in 0..self.size() {
            let d = sq_dist(v, self.entry(id));
            if d < best.1 {
                best = (id, d);
            }
        }
        best
    }
}

pub(crate) fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RvqCodec {
    pub config: CodecConfig,
    pub coder: FrameCoder,
    pub codebooks: Vec<Codebook>,
}

impl RvqCodec {
    pub fn new(config: CodecConfig, coder: FrameCoder, codebooks: Vec<Codebook>) -> Result<Self> {
        config.validate()?;
        if coder.frame_len() != config.frame_len
            || coder.hop() != config.hop
            || coder.latent_dim() != config.latent_dim
        {
            return Err(Error::input("frame coder does not match codec config"));
        }
        if codebooks.len() != config.num_orders {
            return Err(Error::input(format!(
                "{} codebooks for {} orders",
                codebooks.len(),
                config.num_orders
            )));
        }
        for (i, cb) in codebooks.iter().enumerate() {
            let want = [config.codebook_size, config.latent_dim];
            if cb.entries.shape() != want || cb.ema_counts.len() != config.codebook_size {
                return Err(Error::shape("codebook", cb.entries.shape(), &want));
            }
            if !cb.entries.is_finite() {
                return Err(Error::Numeric(format!("codebook {i} has non-finite entries")));
            }
        }
        Ok(Self {
            config,
            coder,
            codebooks,
        })
    }

    pub fn num_orders(&self) -> usize {
        self.config.num_orders
    }

    pub fn codebook_size(&self) -> usize {
        self.config.codebook_size
    }

    pub fn latents(&self, wave: &[f64]) -> Result<Tensor> {
        if wave.is_empty() {
            return Err(Error::input("empty waveform"));
        }
        if let Some(i) = wave.iter().position(|s| !s.is_finite()) {
            return Err(Error::input(format!("non-finite sample at {i}")));
        }
        Ok(self.coder.analyze(wave))
    }

    /// Tokens per order for each latent row, plus residual norms
    /// (`norms[t][i]` is the residual norm before order `i`; `norms[t][m]` is the final one).
    pub fn quantize(&self, latents: &Tensor) -> (Vec<Vec<usize>>, Vec<Vec<f64>>) {
        let m = self.num_orders();
        let t = latents.rows();
        let mut orders = vec![vec![0; t]; m];
        let mut norms = Vec::with_capacity(t);
        for f in 0..t {
            let mut r = latents.row(f).to_vec();
            let mut fn_ = Vec::with_capacity(m + 1);
            fn_.push(r.iter().map(|x| x * x).sum::<f64>().sqrt());
            for (i, cb) in self.codebooks.iter().enumerate() {
                let (id, d) = cb.nearest(&r);
                orders[i][f] = id;
                for (x, e) in r.iter_mut().zip(cb.entry(id)) {
                    *x -= e;
                }
                fn_.push(d.sqrt());
            }
            norms.push(fn_);
        }
        (orders, norms)
    }

    pub fn encode(&self, wave: &[f64]) -> Result<TokenGrid> {
        let lat = self.latents(wave)?;
        let (orders, _) = self.quantize(&lat);
        TokenGrid::new(orders, self.config.hop, self.config.sample_rate)
    }

    /// Encode a decoded waveform again; used when scoring reconstructed audio.
    pub fn reencode(&self, wave: &[f64]) -> Result<TokenGrid> {
        self.encode(wave)
    }

    /// Sum of the first `k` codebook entries per frame, `[T, latent_dim]`.
    pub fn dequantize(&self, grid: &TokenGrid, k: usize) -> Result<Tensor> {
        if k == 0 || k > self.num_orders() {
            return Err(Error::input(format!(
                "use_orders {k} must be in 1..={}",
                self.num_orders()
            )));
        }
        if grid.num_orders() < k {
            return Err(Error::input(format!(
                "grid has {} orders, {k} requested",
                grid.num_orders()
            )));
        }
        grid.validate(self.codebook_size())?;
        let t = grid.len();
        let d = self.config.latent_dim;
        let mut lat = vec![0.0; t * d];
        for (cb, tokens) in self.codebooks.iter().zip(&grid.orders).take(k) {
            for (f, &id) in tokens.iter().enumerate() {
                for (x, e) in lat[f * d..(f + 1) * d].iter_mut().zip(cb.entry(id)) {
                    *x += e;
                }
            }
        }
        Tensor::new(vec![t, d], lat)
    }

    /// Waveform of length `T·hop` from the first `k` orders.
    pub fn decode(&self, grid: &TokenGrid, k: usize) -> Result<Vec<f64>> {
        let lat = self.dequantize(grid, k)?;
        self.coder.synthesize(&lat)
    }

    /// Fraction of entries hit at least once per order over `signals`.
    pub fn utilization(&self, signals: &[Vec<f64>]) -> Result<Vec<f64>> {
        let c = self.codebook_size();
        let mut used = vec![vec![false; c]; self.num_orders()];
        for s in signals {
            let g = self.encode(s)?;
            for (u, o) in used.iter_mut().zip(&g.orders) {
                for &id in o {
                    u[id] = true;
                }
            }
        }
        Ok(used
            .iter()
            .map(|u| u.iter().filter(|&&b| b).count() as f64 / c as f64)
            .collect())
    }

    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({"kind": "rvq_codec", "config": self.config}));
        c.push("coder.analysis", self.coder.analysis.clone());
        c.push("coder.synthesis", self.coder.synthesis.clone());
        for cb in &self.codebooks {
            c.push(format!("codebook.{}.entries", cb.order), cb.entries.clone());
            c.push(
                format!("codebook.{}.ema_counts", cb.order),
                Tensor::from_vec(cb.ema_counts.clone()),
            );
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let fmt = |msg: String| Error::Format {
            path: origin.to_path_buf(),
            msg,
        };
        if c.header.get("kind").and_then(|k| k.as_str()) != Some("rvq_codec") {
            return Err(fmt("not a codec checkpoint".into()));
        }
        let config: CodecConfig = serde_json::from_value(c.header["config"].clone())?;
        config.validate()?;
        let get = |name: String| {
            c.get(&name)
                .cloned()
                .ok_or_else(|| fmt(format!("missing tensor {name}")))
        };
        let coder = FrameCoder::new(
            config.frame_len,
            config.hop,
            get("coder.analysis".into())?,
            get("coder.synthesis".into())?,
        )?;
        let codebooks = (0..config.num_orders)
            .map(|i| {
                Ok(Codebook {
                    order: i,
                    entries: get(format!("codebook.{i}.entries"))?,
                    ema_counts: get(format!("codebook.{i}.ema_counts"))?.into_data(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(config, coder, codebooks)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Relative L2 error `‖x − y‖ / ‖x‖` over the overlapping prefix; `y` may be longer.
pub fn relative_error(x: &[f64], y: &[f64]) -> f64 {
    let num: f64 = x
        .iter()
        .zip(y.iter().chain(std::iter::repeat(&0.0)))
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    let den: f64 = x.iter().map(|a| a * a).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{Block, Ctx, LayerNorm, INIT_STD};
use super::{config_from, load_params, save_model, Encoder, ModelConfig};
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

const KIND: &str = "nar_model";

/// Bidirectional model predicting order `i` from orders `0..i`.
///
/// Input: `E_i = Σ_{j<i} θ_j[c_j] + P + T_i`; output logits `H_i θ_iᵀ`, so each
/// order's embedding table doubles as its output projection.
#[derive(Debug)]
pub struct NarModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    /// One `[|V|, d]` table per order.
    pub theta: Vec<ParamId>,
    /// Shared positional table `[max_len, d]`.
    pub pos: ParamId,
    /// `[m − 1, d]`; row `i − 1` marks task `i`. Absent when ablated.
    pub task: Option<ParamId>,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    forward_calls: AtomicUsize,
}

impl Clone for NarModel {
    fn clone(&self) -> Self {
        Self {
            config: self.config.clone(),
            store: self.store.clone(),
            encoder: self.encoder.clone(),
            theta: self.theta.clone(),
            pos: self.pos,
            task: self.task,
            blocks: self.blocks.clone(),
            ln_out: self.ln_out.clone(),
            forward_calls: AtomicUsize::new(self.forward_calls()),
        }
    }
}

impl NarModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        if config.num_orders < 2 {
            return Err(Error::input("the NAR model needs at least two orders"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed ^ 0x4e41_5200);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let v = config.vocab().size();
        let encoder = Encoder::new(&mut store, "enc", &config, &mut rng);
        let theta = (0..config.num_orders)
            .map(|j| store.insert(format!("nar.theta{j}"), Tensor::randn(vec![v, d], INIT_STD, &mut rng)))
            .collect();
        let pos = store.insert("nar.pos", Tensor::randn(vec![config.max_len, d], INIT_STD, &mut rng));
        let task = config.nar_task_embeddings.then(|| {
            store.insert(
                "nar.task",
                Tensor::randn(vec![config.num_orders - 1, d], INIT_STD, &mut rng),
            )
        });
        let blocks = (0..config.dec_layers)
            .map(|l| {
                Block::new(
                    &mut store,
                    &format!("nar.layer{l}"),
                    d,
                    config.heads,
                    config.ff_mult,
                    config.nar_cross_attention,
                    &mut rng,
                )
            })
            .collect();
        let ln_out = LayerNorm::new(&mut store, "nar.ln_out", d);
        Ok(Self {
            config,
            store,
            encoder,
            theta,
            pos,
            task,
            blocks,
            ln_out,
            forward_calls: AtomicUsize::new(0),
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    /// Number of [`NarModel::logits`] calls so far.
    pub fn forward_calls(&self) -> usize {
        self.forward_calls.load(Ordering::Relaxed)
    }

    pub fn encode(&self, g: &mut Graph<'_>, features: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        self.encoder.forward(g, features, ctx)
    }

    /// `E_i` for `lower = [c_0, …, c_{i−1}]`, `[T, d]`.
    pub fn input_embedding(&self, g: &mut Graph<'_>, lower: &[&[usize]], order: usize) -> Result<Var> {
        let m = self.config.num_orders;
        if order == 0 || order >= m {
            return Err(Error::input(format!("order {order} must be in 1..{m}")));
        }
        if lower.len() != order {
            return Err(Error::input(format!(
                "order {order} needs {order} lower orders, got {}",
                lower.len()
            )));
        }
        let t = lower[0].len();
        if let Some((j, s)) = lower.iter().enumerate().find(|(_, s)| s.len() != t) {
            return Err(Error::input(format!(
                "lower order {j} has length {}, order 0 has {t}",
                s.len()
            )));
        }
        if t == 0 || t > self.config.max_len {
            return Err(Error::input(format!(
                "sequence length {t} must be in 1..={}",
                self.config.max_len
            )));
        }
        let mut e = None;
        for (j, c) in lower.iter().enumerate() {
            let table = g.param(self.theta[j]);
            let x = g.embedding(table, c)?;
            e = Some(match e {
                None => x,
                Some(acc) => g.add(acc, x)?,
            });
        }
        let pos = g.param(self.pos);
        let positions: Vec<usize> = (0..t).collect();
        let p = g.embedding(pos, &positions)?;
        let mut e = g.add(e.expect("order ≥ 1"), p)?;
        if let Some(task) = self.task {
            let table = g.param(task);
            let ti = g.embedding(table, &[order - 1])?;
            e = g.add(e, ti)?;
        }
        Ok(e)
    }

    /// Logits `[T, |V|]` for order `order` from an already built input embedding.
    pub fn logits_from_embedding(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        e: Var,
        order: usize,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        self.forward_calls.fetch_add(1, Ordering::Relaxed);
        let mut x = ctx.drop(g, e);
        for b in &self.blocks {
            let mem = b.memory_kv(g, h)?;
            x = b.forward(g, x, mem, None, ctx)?;
        }
        let x = self.ln_out.forward(g, x)?;
        let w = g.param(self.theta[order]);
        g.matmul_t(x, w)
    }

    /// One non-autoregressive pass predicting every position of order `order`.
    pub fn logits(
        &self,
        g: &mut Graph<'_>,
        h: Var,
        lower: &[&[usize]],
        order: usize,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let e = self.input_embedding(g, lower, order)?;
        self.logits_from_embedding(g, h, e, order, ctx)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_model(KIND, &self.config, &self.store, path)
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let cfg = config_from(c, KIND, origin)?;
        let mut m = Self::new(cfg)?;
        load_params(&mut m.store, c, origin)?;
        Ok(m)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

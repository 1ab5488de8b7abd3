use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{causal_mask, Block, Ctx, KvCache, LayerNorm, Linear, INIT_STD};
use super::{config_from, load_params, mixture_features, save_model, Encoder, ModelConfig};
use crate::codec::RvqCodec;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

const KIND: &str = "ar_model";

/// Encoder plus causal decoder over order-0 tokens.
#[derive(Clone, Debug)]
pub struct ArModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub encoder: Encoder,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<Block>,
    pub ln_out: LayerNorm,
    pub out_proj: Linear,
}

/// Encoder output projected to every block's cross-attention keys/values.
#[derive(Clone, Debug)]
pub struct ArMemory {
    pub kv: Vec<(Tensor, Tensor)>,
}

/// Incremental decoding state of one hypothesis.
#[derive(Clone, Debug, Default)]
pub struct ArState {
    pub caches: Vec<Option<KvCache>>,
    pub pos: usize,
}

impl ArModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let mut store = ParamStore::new();
        let d = config.d_model;
        let v = config.vocab().size();
        let encoder = Encoder::new(&mut store, "enc", &config, &mut rng);
        let tok_emb = store.insert("dec.tok_emb", Tensor::randn(vec![v, d], INIT_STD, &mut rng));
        let pos_emb = store.insert("dec.pos_emb", Tensor::randn(vec![config.max_len, d], INIT_STD, &mut rng));
        let blocks = (0..config.dec_layers)
            .map(|l| Block::new(&mut store, &format!("dec.layer{l}"), d, config.heads, config.ff_mult, true, &mut rng))
            .collect();
        let ln_out = LayerNorm::new(&mut store, "dec.ln_out", d);
        let out_proj = Linear::new(&mut store, "dec.out_proj", d, v, true, &mut rng);
        Ok(Self {
            config,
            store,
            encoder,
            tok_emb,
            pos_emb,
            blocks,
            ln_out,
            out_proj,
        })
    }

    pub fn count_params(&self) -> usize {
        self.store.count()
    }

    pub fn encode(&self, g: &mut Graph<'_>, features: &Tensor, ctx: &mut Ctx<'_>) -> Result<Var> {
        self.encoder.forward(g, features, ctx)
    }

    fn check_tokens(&self, tokens: &[usize]) -> Result<()> {
        let v = self.config.vocab().size();
        if let Some(&bad) = tokens.iter().find(|&&t| t >= v) {
            return Err(Error::Index {
                what: "token",
                index: bad,
                limit: v,
            });
        }
        if tokens.len() > self.config.max_len {
            return Err(Error::input(format!(
                "history length {} exceeds max_len {}",
                tokens.len(),
                self.config.max_len
            )));
        }
        Ok(())
    }

    /// Token plus positional embedding of `tokens` placed from position `start`.
    pub fn embed(&self, g: &mut Graph<'_>, tokens: &[usize], start: usize) -> Result<Var> {
        self.check_tokens(tokens)?;
        if start + tokens.len() > self.config.max_len {
            return Err(Error::input("position beyond max_len"));
        }
        let te = g.param(self.tok_emb);
        let x = g.embedding(te, tokens)?;
        let pe = g.param(self.pos_emb);
        let positions: Vec<usize> = (start..start + tokens.len()).collect();
        let p = g.embedding(pe, &positions)?;
        g.add(x, p)
    }

    /// Teacher-forced logits `[T, |V|]` from already embedded inputs.
    pub fn decode_embedded(&self, g: &mut Graph<'_>, x: Var, h: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let t = g.shape(x)[0];
        let mask = g.constant(causal_mask(t));
        let mut x = ctx.drop(g, x);
        for b in &self.blocks {
            let mem = b.memory_kv(g, h)?;
            x = b.forward(g, x, mem, Some(mask), ctx)?;
        }
        let x = self.ln_out.forward(g, x)?;
        self.out_proj.forward(g, x)
    }

    /// Teacher-forced logits `[T, |V|]`; row `n` predicts the token after `tokens[..=n]`.
    pub fn logits(&self, g: &mut Graph<'_>, h: Var, tokens: &[usize], ctx: &mut Ctx<'_>) -> Result<Var> {
        if tokens.is_empty() {
            return Err(Error::input("empty decoder history"));
        }
        let x = self.embed(g, tokens, 0)?;
        self.decode_embedded(g, x, h, ctx)
    }

    /// Next-token distribution after `history` (which starts with SOS).
    pub fn next_probs(&self, codec: &RvqCodec, mixture: &[f64], history: &[usize]) -> Result<Vec<f64>> {
        let feats = mixture_features(codec, mixture)?;
        let mut g = Graph::inference(&self.store);
        let mut ctx = Ctx::inference();
        let h = self.encode(&mut g, &feats, &mut ctx)?;
        let l = self.logits(&mut g, h, history, &mut ctx)?;
        let p = g.softmax(l, 1)?;
        Ok(g.value(p).row(history.len() - 1).to_vec())
    }

    /// Encode features and precompute cross-attention keys/values.
    pub fn memory(&self, features: &Tensor) -> Result<ArMemory> {
        let mut g = Graph::inference(&self.store);
        let h = self.encode(&mut g, features, &mut Ctx::inference())?;
        let mut kv = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (k, v) = b.memory_kv(&mut g, h)?.expect("decoder blocks attend to memory");
            kv.push((g.value(k).clone(), g.value(v).clone()));
        }
        Ok(ArMemory { kv })
    }

    pub fn start_state(&self) -> ArState {
        ArState {
            caches: vec![None; self.blocks.len()],
            pos: 0,
        }
    }

    /// Logits for the next position after feeding `token` at `state.pos`.
    pub fn step(&self, memory: &ArMemory, state: &mut ArState, token: usize) -> Result<Vec<f64>> {
        let mut g = Graph::inference(&self.store);
        let mut x = self.embed(&mut g, &[token], state.pos)?;
        for ((b, cache), (mk, mv)) in self.blocks.iter().zip(state.caches.iter_mut()).zip(&memory.kv) {
            let k = g.constant(mk.clone());
            let v = g.constant(mv.clone());
            x = b.forward_cached(&mut g, x, Some((k, v)), cache)?;
        }
        let x = self.ln_out.forward(&mut g, x)?;
        let l = self.out_proj.forward(&mut g, x)?;
        state.pos += 1;
        Ok(g.value(l).data().to_vec())
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

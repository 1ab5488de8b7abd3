//! Transformer building blocks over the autodiff tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numcore::{Graph, ParamId, ParamStore, Tensor, Var};

pub(crate) const INIT_STD: f64 = 0.02;
const LN_EPS: f64 = 1e-5;

/// Dropout source for one forward pass; inference passes carry no RNG.
pub struct Ctx<'r> {
    pub dropout: f64,
    pub rng: Option<&'r mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn inference() -> Ctx<'static> {
        Ctx {
            dropout: 0.0,
            rng: None,
        }
    }

    pub(crate) fn drop(&mut self, g: &mut Graph<'_>, x: Var) -> Var {
        match self.rng.as_deref_mut() {
            Some(r) if self.dropout > 0.0 => g.dropout(x, self.dropout, r),
            _ => x,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: Option<ParamId>,
}

impl Linear {
    /// `w` is `[d_in, d_out]`.
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize, bias: bool, rng: &mut R) -> Self {
        let w = store.insert(format!("{name}.w"), Tensor::randn(vec![d_in, d_out], INIT_STD, rng));
        let b = bias.then(|| store.insert(format!("{name}.b"), Tensor::zeros(vec![d_out])));
        Self { w, b }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.w);
        let y = g.matmul(x, w)?;
        match self.b {
            Some(b) => {
                let b = g.param(b);
                g.add(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gain: store.insert(format!("{name}.gain"), Tensor::ones(vec![d])),
            bias: store.insert(format!("{name}.bias"), Tensor::zeros(vec![d])),
        }
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gain = g.param(self.gain);
        let bias = g.param(self.bias);
        g.layer_norm(x, gain, bias, LN_EPS)
    }
}

/// Cached keys and values of one attention layer, `[heads, t, d_head]` each.
#[derive(Clone, Debug)]
pub struct KvCache {
    pub k: Tensor,
    pub v: Tensor,
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl Attention {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut R) -> Self {
        Self {
            q: Linear::new(store, &format!("{name}.q"), d, d, true, rng),
            k: Linear::new(store, &format!("{name}.k"), d, d, false, rng),
            v: Linear::new(store, &format!("{name}.v"), d, d, true, rng),
            o: Linear::new(store, &format!("{name}.o"), d, d, true, rng),
            heads,
        }
    }

    /// `[t, d]` → `[heads, t, d_head]`.
    fn split_heads(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        let r = g.reshape(x, vec![t, self.heads, d / self.heads])?;
        g.permute(r, &[1, 0, 2])
    }

    /// Keys and values of `src`, split into heads.
    pub fn project_kv(&self, g: &mut Graph<'_>, src: Var) -> Result<(Var, Var)> {
        let k = self.k.forward(g, src)?;
        let k = self.split_heads(g, k)?;
        let v = self.v.forward(g, src)?;
        let v = self.split_heads(g, v)?;
        Ok((k, v))
    }

    /// Attention of `x` over already split keys/values; `mask` is added to the scores.
    pub fn attend(&self, g: &mut Graph<'_>, x: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let (t, d) = (g.shape(x)[0], g.shape(x)[1]);
        let q = self.q.forward(g, x)?;
        let q = self.split_heads(g, q)?;
        let scores = g.matmul_t(q, k)?;
        let mut scores = g.scale(scores, 1.0 / ((d / self.heads) as f64).sqrt());
        if let Some(m) = mask {
            scores = g.add(scores, m)?;
        }
        let att = g.softmax(scores, 2)?;
        let ctx = g.matmul(att, v)?;
        let ctx = g.permute(ctx, &[1, 0, 2])?;
        let ctx = g.reshape(ctx, vec![t, d])?;
        self.o.forward(g, ctx)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var, src: Var, mask: Option<Var>) -> Result<Var> {
        let (k, v) = self.project_kv(g, src)?;
        self.attend(g, x, k, v, mask)
    }

    /// One new position: append its key/value to `cache` and attend over the whole cache.
    pub fn forward_cached(&self, g: &mut Graph<'_>, x: Var, cache: &mut Option<KvCache>) -> Result<Var> {
        let (k, v) = self.project_kv(g, x)?;
        let (k_new, v_new) = (g.value(k).clone(), g.value(v).clone());
        let merged = match cache.take() {
            None => KvCache { k: k_new, v: v_new },
            Some(c) => KvCache {
                k: concat_time(&c.k, &k_new),
                v: concat_time(&c.v, &v_new),
            },
        };
        let kc = g.constant(merged.k.clone());
        let vc = g.constant(merged.v.clone());
        *cache = Some(merged);
        self.attend(g, x, kc, vc, None)
    }
}

/// Concatenate `[h, t1, e]` and `[h, t2, e]` along time.
fn concat_time(a: &Tensor, b: &Tensor) -> Tensor {
    let (h, t1, e) = (a.shape()[0], a.shape()[1], a.shape()[2]);
    let t2 = b.shape()[1];
    let mut out = Vec::with_capacity(h * (t1 + t2) * e);
    for i in 0..h {
        out.extend_from_slice(&a.data()[i * t1 * e..(i + 1) * t1 * e]);
        out.extend_from_slice(&b.data()[i * t2 * e..(i + 1) * t2 * e]);
    }
    Tensor::new(vec![h, t1 + t2, e], out).expect("concat shape")
}

/// `[t, t]` additive mask: 0 on and below the diagonal, −∞ above.
pub fn causal_mask(t: usize) -> Tensor {
    let mut m = vec![0.0; t * t];
    for i in 0..t {
        for j in i + 1..t {
            m[i * t + j] = f64::NEG_INFINITY;
        }
    }
    Tensor::new(vec![t, t], m).expect("square mask")
}

/// Fixed sinusoidal positions, `[t, d]`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Tensor {
    let mut out = vec![0.0; t * d];
    for p in 0..t {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            out[p * d + 2 * i] = (p as f64 * freq).sin();
            out[p * d + 2 * i + 1] = (p as f64 * freq).cos();
        }
    }
    Tensor::new(vec![t, d], out).expect("positions shape")
}

/// Pre-norm transformer block with optional cross-attention.
#[derive(Clone, Debug)]
pub struct Block {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub cross: Option<(LayerNorm, Attention)>,
    pub ln_ff: LayerNorm,
    pub ff_in: Linear,
    pub ff_out: Linear,
}

impl Block {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        d: usize,
        heads: usize,
        ff_mult: usize,
        cross: bool,
        rng: &mut R,
    ) -> Self {
        Self {
            ln_self: LayerNorm::new(store, &format!("{name}.ln_self"), d),
            self_attn: Attention::new(store, &format!("{name}.self_attn"), d, heads, rng),
            cross: cross.then(|| {
                (
                    LayerNorm::new(store, &format!("{name}.ln_cross"), d),
                    Attention::new(store, &format!("{name}.cross_attn"), d, heads, rng),
                )
            }),
            ln_ff: LayerNorm::new(store, &format!("{name}.ln_ff"), d),
            ff_in: Linear::new(store, &format!("{name}.ff_in"), d, ff_mult * d, true, rng),
            ff_out: Linear::new(store, &format!("{name}.ff_out"), ff_mult * d, d, true, rng),
        }
    }

    fn feed_forward(&self, g: &mut Graph<'_>, x: Var, ctx: &mut Ctx<'_>) -> Result<Var> {
        let h = self.ln_ff.forward(g, x)?;
        let h = self.ff_in.forward(g, h)?;
        let h = g.gelu(h);
        let h = self.ff_out.forward(g, h)?;
        let h = ctx.drop(g, h);
        g.add(x, h)
    }

    fn cross_step(&self, g: &mut Graph<'_>, x: Var, memory: Option<(Var, Var)>, ctx: &mut Ctx<'_>) -> Result<Var> {
        match (&self.cross, memory) {
            (Some((ln, attn)), Some((k, v))) => {
                let h = ln.forward(g, x)?;
                let h = attn.attend(g, h, k, v, None)?;
                let h = ctx.drop(g, h);
                g.add(x, h)
            }
            _ => Ok(x),
        }
    }

    /// Cross-attention keys/values of the encoder output, if this block attends to it.
    pub fn memory_kv(&self, g: &mut Graph<'_>, memory: Var) -> Result<Option<(Var, Var)>> {
        match &self.cross {
            Some((_, attn)) => attn.project_kv(g, memory).map(Some),
            None => Ok(None),
        }
    }

    /// Full-sequence pass; `mask` is an additive `[t, t]` score mask.
    pub fn forward(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Option<(Var, Var)>,
        mask: Option<Var>,
        ctx: &mut Ctx<'_>,
    ) -> Result<Var> {
        let h = self.ln_self.forward(g, x)?;
        let h = self.self_attn.forward(g, h, h, mask)?;
        let h = ctx.drop(g, h);
        let x = g.add(x, h)?;
        let x = self.cross_step(g, x, memory, ctx)?;
        self.feed_forward(g, x, ctx)
    }

    /// Single-position pass against a self-attention cache (inference only).
    pub fn forward_cached(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        memory: Option<(Var, Var)>,
        cache: &mut Option<KvCache>,
    ) -> Result<Var> {
        let mut ctx = Ctx::inference();
        let h = self.ln_self.forward(g, x)?;
        let h = self.self_attn.forward_cached(g, h, cache)?;
        let x = g.add(x, h)?;
        let x = self.cross_step(g, x, memory, &mut ctx)?;
        self.feed_forward(g, x, &mut ctx)
    }
}

//! Order-0 beam search / sampling, NAR completion of higher orders and the
//! full separation pipeline.

use log::{info, warn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{RvqCodec, TokenGrid};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_sample, CorpusMetrics, SampleReport};
use crate::model::{mixture_features, ArMemory, ArModel, ArState, Ctx, NarModel};
use crate::numcore::{log_softmax_row, Graph, Tensor};
use crate::sot::{split_sot, RepairReport, SotSequence, Vocab};
use crate::synth::{MixtureSample, OracleConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecodeMode {
    Beam,
    Sample,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub mode: DecodeMode,
    pub beam_size: usize,
    pub temperature: f64,
    /// 0 disables blocking.
    pub ngram_block_n: usize,
    /// Content tokens required in a segment before SC or EOS is allowed.
    pub min_len: usize,
    /// Longest output, SOS and EOS included.
    pub max_len: usize,
    pub seed: u64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        Self {
            mode: DecodeMode::Beam,
            beam_size: 4,
            temperature: 1.0,
            ngram_block_n: 3,
            min_len: 4,
            max_len: 256,
            seed: 0,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_size == 0 {
            return Err(Error::input("beam_size must be at least 1"));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(Error::input("temperature must be positive"));
        }
        if self.max_len < 2 {
            return Err(Error::input("max_len must leave room for SOS and EOS"));
        }
        Ok(())
    }
}

/// Source of next-token logits for incremental decoding.
pub trait TokenScorer {
    type State: Clone;
    fn start(&self) -> Self::State;
    /// Feed `token` at the next position and return logits for the position after it.
    fn step(&self, state: &mut Self::State, token: usize) -> Result<Vec<f64>>;
    /// Largest number of tokens that may be fed.
    fn max_positions(&self) -> usize;
}

/// Cached-state scorer backed by an [`ArModel`].
pub struct ArScorer<'m> {
    pub model: &'m ArModel,
    pub memory: ArMemory,
}

impl TokenScorer for ArScorer<'_> {
    type State = ArState;

    fn start(&self) -> ArState {
        self.model.start_state()
    }

    fn step(&self, state: &mut ArState, token: usize) -> Result<Vec<f64>> {
        self.model.step(&self.memory, state, token)
    }

    fn max_positions(&self) -> usize {
        self.model.config.max_len
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeOutput {
    /// Starts with SOS and ends with EOS.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// `log_prob` divided by the number of generated tokens.
    pub score: f64,
    pub forced_eos: bool,
    pub fallbacks: usize,
}

/// Tokens forbidden as the next token of `tokens`.
pub fn constraint_mask(tokens: &[usize], vocab: &Vocab, cfg: &DecodeConfig) -> Vec<bool> {
    let mut masked = vec![false; vocab.size()];
    masked[vocab.sos()] = true;
    let seg = tokens
        .iter()
        .rev()
        .take_while(|&&t| t != vocab.sc() && t != vocab.sos())
        .filter(|&&t| !vocab.is_special(t))
        .count();
    if seg < cfg.min_len {
        masked[vocab.sc()] = true;
        masked[vocab.eos()] = true;
    }
    let n = cfg.ngram_block_n;
    if n > 0 {
        let content: Vec<usize> = tokens.iter().copied().filter(|&t| !vocab.is_special(t)).collect();
        if content.len() + 1 >= n {
            let prefix = &content[content.len() + 1 - n..];
            for w in content.windows(n) {
                if &w[..n - 1] == prefix {
                    masked[w[n - 1]] = true;
                }
            }
        }
    }
    masked
}

fn log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    let mut row: Vec<f64> = logits.iter().map(|l| l / temperature).collect();
    log_softmax_row(&mut row);
    row
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Unconstrained argmax, except that SOS is never valid after position 0.
fn fallback_token(lp: &[f64], vocab: &Vocab) -> usize {
    let mut row = lp.to_vec();
    row[vocab.sos()] = f64::NEG_INFINITY;
    argmax(&row)
}

#[derive(Clone)]
struct Hyp<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    next: Vec<f64>,
}

fn normalized(log_prob: f64, tokens: &[usize]) -> f64 {
    log_prob / (tokens.len() - 1).max(1) as f64
}

/// Constrained order-0 decoding; `stream` selects the sampling RNG stream.
pub fn ar_decode<S: TokenScorer>(scorer: &S, vocab: &Vocab, cfg: &DecodeConfig, stream: u64) -> Result<DecodeOutput> {
    cfg.validate()?;
    let limit = cfg.max_len.min(scorer.max_positions() + 1);
    let mut state = scorer.start();
    let first = scorer.step(&mut state, vocab.sos())?;
    let root = Hyp {
        tokens: vec![vocab.sos()],
        log_prob: 0.0,
        state,
        next: first,
    };
    match cfg.mode {
        DecodeMode::Beam => {
            // widths 1..=b, keeping the best: a wider beam never returns a worse score
            let mut best: Option<DecodeOutput> = None;
            for width in 1..=cfg.beam_size {
                let out = beam(scorer, vocab, cfg, width, limit, root.clone())?;
                if best.as_ref().is_none_or(|b| out.score > b.score) {
                    best = Some(out);
                }
            }
            Ok(best.expect("beam_size ≥ 1"))
        }
        DecodeMode::Sample => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(stream);
            sample(scorer, vocab, cfg, limit, root, &mut rng)
        }
    }
}

fn finish_forced(tokens: &mut Vec<usize>, vocab: &Vocab) {
    warn!("max_len reached after {} tokens; EOS forced", tokens.len());
    tokens.push(vocab.eos());
}

fn beam<S: TokenScorer>(
    scorer: &S,
    vocab: &Vocab,
    cfg: &DecodeConfig,
    width: usize,
    limit: usize,
    root: Hyp<S::State>,
) -> Result<DecodeOutput> {
    let mut alive = vec![root];
    let mut finished: Vec<(Vec<usize>, f64, bool)> = Vec::new();
    let mut fallbacks = 0;
    while !alive.is_empty() && finished.len() < width {
        let mut cands: Vec<(usize, usize, f64)> = Vec::new();
        for (h, hyp) in alive.iter().enumerate() {
            if hyp.tokens.len() + 1 >= limit {
                let mut t = hyp.tokens.clone();
                finish_forced(&mut t, vocab);
                let lp = hyp.log_prob + log_probs(&hyp.next, cfg.temperature)[vocab.eos()];
                finished.push((t, lp, true));
                continue;
            }
            let lp = log_probs(&hyp.next, cfg.temperature);
            let mask = constraint_mask(&hyp.tokens, vocab, cfg);
            let before = cands.len();
            for (tok, &l) in lp.iter().enumerate() {
                if !mask[tok] && l > f64::NEG_INFINITY {
                    cands.push((h, tok, hyp.log_prob + l));
                }
            }
            if cands.len() == before {
                fallbacks += 1;
                info!("all candidates masked at length {}; unconstrained argmax", hyp.tokens.len());
                let tok = fallback_token(&lp, vocab);
                cands.push((h, tok, hyp.log_prob + lp[tok]));
            }
        }
        // stable sort keeps hypothesis/token order among equal scores
        cands.sort_by(|a, b| b.2.total_cmp(&a.2));
        let mut next_alive = Vec::new();
        for (h, tok, lp) in cands {
            if next_alive.len() >= width {
                break;
            }
            let parent = &alive[h];
            let mut tokens = parent.tokens.clone();
            tokens.push(tok);
            if tok == vocab.eos() {
                finished.push((tokens, lp, false));
                if finished.len() >= width {
                    break;
                }
                continue;
            }
            let mut state = parent.state.clone();
            let next = scorer.step(&mut state, tok)?;
            next_alive.push(Hyp {
                tokens,
                log_prob: lp,
                state,
                next,
            });
        }
        alive = next_alive;
    }
    let best = finished
        .into_iter()
        .enumerate()
        .max_by(|(ia, a), (ib, b)| {
            normalized(a.1, &a.0)
                .total_cmp(&normalized(b.1, &b.0))
                .then(ib.cmp(ia))
        })
        .map(|(_, f)| f)
        .ok_or_else(|| Error::Numeric("beam search produced no hypothesis".into()))?;
    Ok(DecodeOutput {
        score: normalized(best.1, &best.0),
        tokens: best.0,
        log_prob: best.1,
        forced_eos: best.2,
        fallbacks,
    })
}

fn sample<S: TokenScorer>(
    scorer: &S,
    vocab: &Vocab,
    cfg: &DecodeConfig,
    limit: usize,
    mut hyp: Hyp<S::State>,
    rng: &mut ChaCha8Rng,
) -> Result<DecodeOutput> {
    let mut fallbacks = 0;
    loop {
        let lp = log_probs(&hyp.next, cfg.temperature);
        if hyp.tokens.len() + 1 >= limit {
            hyp.log_prob += lp[vocab.eos()];
            finish_forced(&mut hyp.tokens, vocab);
            return Ok(DecodeOutput {
                score: normalized(hyp.log_prob, &hyp.tokens),
                tokens: hyp.tokens,
                log_prob: hyp.log_prob,
                forced_eos: true,
                fallbacks,
            });
        }
        let mask = constraint_mask(&hyp.tokens, vocab, cfg);
        let weights: Vec<f64> = lp
            .iter()
            .zip(&mask)
            .map(|(&l, &m)| if m { 0.0 } else { l.exp() })
            .collect();
        let total: f64 = weights.iter().sum();
        let tok = if total > 0.0 {
            let mut u = rng.gen::<f64>() * total;
            let mut pick = None;
            for (i, &w) in weights.iter().enumerate() {
                if w > 0.0 {
                    pick = Some(i);
                    if u < w {
                        break;
                    }
                    u -= w;
                }
            }
            pick.expect("positive total weight")
        } else {
            fallbacks += 1;
            info!("all candidates masked at length {}; unconstrained argmax", hyp.tokens.len());
            fallback_token(&lp, vocab)
        };
        hyp.log_prob += lp[tok];
        hyp.tokens.push(tok);
        if tok == vocab.eos() {
            return Ok(DecodeOutput {
                score: normalized(hyp.log_prob, &hyp.tokens),
                tokens: hyp.tokens,
                log_prob: hyp.log_prob,
                forced_eos: false,
                fallbacks,
            });
        }
        hyp.next = scorer.step(&mut hyp.state, tok)?;
    }
}

/// Fill orders `1..m` with `m − 1` NAR passes; specials are copied from order 0.
pub fn nar_decode(nar: &NarModel, features: &Tensor, order0: &[usize]) -> Result<SotSequence> {
    let cfg = &nar.config;
    let vocab = cfg.vocab();
    let m = cfg.num_orders;
    let mut g = Graph::inference(&nar.store);
    let mut ctx = Ctx::inference();
    let h = nar.encode(&mut g, features, &mut ctx)?;
    let mut orders: Vec<Vec<usize>> = vec![order0.to_vec()];
    for i in 1..m {
        let lower: Vec<&[usize]> = orders.iter().map(Vec::as_slice).collect();
        let logits = nar.logits(&mut g, h, &lower, i, &mut ctx)?;
        let lv = g.value(logits);
        let ci = order0
            .iter()
            .enumerate()
            .map(|(t, &c0)| {
                if vocab.is_special(c0) {
                    c0
                } else {
                    argmax(&lv.row(t)[..vocab.codebook_size])
                }
            })
            .collect();
        orders.push(ci);
    }
    Ok(SotSequence::from_orders(orders, &vocab))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SeparationResult {
    pub waveforms: Vec<Vec<f64>>,
    pub grids: Vec<TokenGrid>,
    /// Raw order-0 output of the AR decoder.
    pub order0: Vec<usize>,
    pub sot: SotSequence,
    pub repair: RepairReport,
    pub log_prob: f64,
    pub forced_eos: bool,
}

/// Rebuild a well-formed order-0 sequence from repaired segments.
fn clean_order0(segments: &[TokenGrid], vocab: &Vocab) -> Vec<usize> {
    let mut out = vec![vocab.sos()];
    for (j, g) in segments.iter().enumerate() {
        if j > 0 {
            out.push(vocab.sc());
        }
        out.extend_from_slice(&g.orders[0]);
    }
    out.push(vocab.eos());
    out
}

/// Per-speaker output of [`complete_order0`].
#[derive(Clone, Debug, PartialEq)]
pub struct Completion {
    pub grids: Vec<TokenGrid>,
    pub waveforms: Vec<Vec<f64>>,
    pub sot: SotSequence,
    pub repair: RepairReport,
}

/// Repair a raw order-0 sequence, fill the higher orders and synthesize each speaker.
///
/// `nar` may be absent only for single-order stacks.
pub fn complete_order0(
    codec: &RvqCodec,
    nar: Option<&NarModel>,
    num_orders: usize,
    features: &Tensor,
    raw_order0: &[usize],
) -> Result<Completion> {
    let vocab = Vocab::new(codec.codebook_size());
    let hop = codec.config.hop;
    let sr = codec.config.sample_rate;
    let raw0 = SotSequence::from_orders(vec![raw_order0.to_vec()], &vocab);
    let (segments, mut repair) = split_sot(&raw0, &vocab, hop, sr)?;
    if !repair.is_clean() {
        warn!("order-0 output repaired: {:?}", repair.notes);
    }
    let order0 = clean_order0(&segments, &vocab);
    if order0.len() == 2 {
        warn!("no speakers detected");
        return Ok(Completion {
            grids: Vec::new(),
            waveforms: Vec::new(),
            sot: SotSequence::from_orders(vec![order0; num_orders], &vocab),
            repair,
        });
    }
    let sot = match nar {
        Some(nar) => nar_decode(nar, features, &order0)?,
        None if num_orders == 1 => SotSequence::from_orders(vec![order0], &vocab),
        None => return Err(Error::Missing(format!("a NAR model is needed for {num_orders} orders"))),
    };
    let (grids, rep2) = split_sot(&sot, &vocab, hop, sr)?;
    repair.merge(&rep2);
    let waveforms = grids
        .iter()
        .map(|g| {
            if g.is_empty() {
                Ok(Vec::new())
            } else {
                codec.decode(g, num_orders)
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Completion {
        grids,
        waveforms,
        sot,
        repair,
    })
}

/// Mixture → order 0 → higher orders → per-speaker grids → waveforms.
pub fn separate(
    codec: &RvqCodec,
    ar: &ArModel,
    nar: Option<&NarModel>,
    mixture: &[f64],
    cfg: &DecodeConfig,
    stream: u64,
) -> Result<SeparationResult> {
    ar.config.check_codec(codec)?;
    let mut dcfg = cfg.clone();
    if let Some(nar) = nar {
        nar.config.check_codec(codec)?;
        if ar.config.num_orders != nar.config.num_orders || ar.config.codebook_size != nar.config.codebook_size {
            return Err(Error::input("AR and NAR models disagree on orders or codebook size"));
        }
        dcfg.max_len = dcfg.max_len.min(nar.config.max_len);
    }
    let vocab = ar.config.vocab();
    let feats = mixture_features(codec, mixture)?;
    let scorer = ArScorer {
        model: ar,
        memory: ar.memory(&feats)?,
    };
    let out = ar_decode(&scorer, &vocab, &dcfg, stream)?;
    let c = complete_order0(codec, nar, ar.config.num_orders, &feats, &out.tokens)?;
    Ok(SeparationResult {
        waveforms: c.waveforms,
        grids: c.grids,
        order0: out.tokens,
        sot: c.sot,
        repair: c.repair,
        log_prob: out.log_prob,
        forced_eos: out.forced_eos,
    })
}

/// Separate and score every sample on `workers` threads; stream `i` drives sample `i`,
/// so the result does not depend on the worker count.
pub fn evaluate_models(
    codec: &RvqCodec,
    ar: &ArModel,
    nar: Option<&NarModel>,
    samples: &[MixtureSample],
    cfg: &DecodeConfig,
    oracle: &OracleConfig,
    workers: usize,
) -> Result<Vec<SampleReport>> {
    let run = |i: usize| -> Result<SampleReport> {
        let s = &samples[i];
        let r = separate(codec, ar, nar, &s.mixture, cfg, i as u64)?;
        evaluate_sample(codec, oracle, s, &r.waveforms, Some(&r.repair))
    };
    let workers = workers.clamp(1, samples.len().max(1));
    if workers == 1 {
        return (0..samples.len()).map(run).collect();
    }
    let mut slots: Vec<Option<Result<SampleReport>>> = (0..samples.len()).map(|_| None).collect();
    std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let run = &run;
                scope.spawn(move || {
                    (w..samples.len())
                        .step_by(workers)
                        .map(|i| (i, run(i)))
                        .collect::<Vec<_>>()
                })
            })
            .collect();
        for h in handles {
            for (i, r) in h.join().expect("evaluation worker panicked") {
                slots[i] = Some(r);
            }
        }
    });
    slots.into_iter().map(|r| r.expect("every sample evaluated")).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TemperatureRow {
    pub temperature: f64,
    pub metrics: CorpusMetrics,
    pub best: bool,
}

/// Sample-mode evaluation at each temperature; the lowest-SER row is marked best.
pub fn sweep_temperature(
    codec: &RvqCodec,
    ar: &ArModel,
    nar: Option<&NarModel>,
    samples: &[MixtureSample],
    temps: &[f64],
    base: &DecodeConfig,
    oracle: &OracleConfig,
    workers: usize,
) -> Result<Vec<TemperatureRow>> {
    let mut rows = Vec::with_capacity(temps.len());
    for &t in temps {
        let cfg = DecodeConfig {
            mode: DecodeMode::Sample,
            temperature: t,
            ..base.clone()
        };
        let reports = evaluate_models(codec, ar, nar, samples, &cfg, oracle, workers)?;
        let metrics = CorpusMetrics::from_samples(&reports);
        info!("temperature {t}: SER {:.2}", metrics.ser);
        rows.push(TemperatureRow {
            temperature: t,
            metrics,
            best: false,
        });
    }
    if let Some(best) = (0..rows.len()).min_by(|&a, &b| rows[a].metrics.ser.total_cmp(&rows[b].metrics.ser)) {
        rows[best].best = true;
    }
    Ok(rows)
}

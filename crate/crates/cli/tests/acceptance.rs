//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs as a plain binary (`harness = false`) so the lines are printed even
//! when every criterion passes. `ACCEPTANCE_ONLY=1,3,10` restricts the run.
//! The process exits non-zero if any selected criterion fails.

use std::collections::{BTreeSet, VecDeque};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sotsep::codec::{relative_error, train_codec, CodecConfig, CodecTrainConfig, RvqCodec, TokenGrid};
use sotsep::decoding::{
    ar_decode, constraint_mask, evaluate_models, nar_decode, sweep_temperature, ArScorer, DecodeConfig, DecodeMode,
    DecodeOutput, TokenScorer,
};
use sotsep::metrics::{edit_distance, mixture_reports, CorpusMetrics};
use sotsep::model::probes::{ar_future_gradient, nar_additivity_gap, nar_cross_position_influence, nar_tying_check};
use sotsep::model::{ArModel, ModelConfig, NarModel};
use sotsep::numcore::gradcheck::run_random_checks;
use sotsep::numcore::Tensor;
use sotsep::sot::{build_sot, split_sot, Vocab};
use sotsep::synth::{gen_split, MixtureSample, OracleConfig, Split, SynthConfig};
use sotsep::trainer::{ar_accuracy_counts, nar_accuracy_counts, prepare_pairs, train_ar, train_nar, TrainConfig, TrainPair};
use sotsep::Result;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self {
            pass,
            detail: detail.into(),
        }
    }
}

type Check = fn() -> Result<Outcome>;

const CRITERIA: &[(u32, &str, Check)] = &[
    (1, "numeric core gradient checks", c1_gradients),
    (2, "RVQ residual and reconstruction monotonicity", c2_rvq),
    (3, "SOT build/split roundtrip", c3_sot),
    (4, "AR causality", c4_causality),
    (5, "NAR contracts", c5_nar),
    (6, "overfit oracle", c6_overfit),
    (7, "generalization smoke", c7_generalization),
    (8, "decoding constraints", c8_constraints),
    (9, "temperature trend", c9_temperature),
    (10, "edit-distance oracle equivalence", c10_edit_distance),
    (11, "CLI determinism", c11_determinism),
];

fn main() -> ExitCode {
    let only: Option<BTreeSet<u32>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let mut failed = 0;
    for &(id, name, check) in CRITERIA {
        if only.as_ref().is_some_and(|o| !o.contains(&id)) {
            continue;
        }
        let t = Instant::now();
        let out = check().unwrap_or_else(|e| Outcome::new(false, format!("error: {e}")));
        let status = if out.pass { "PASS" } else { "FAIL" };
        println!("{status} {id:>2} {name}: {} [{:.1} s]", out.detail, t.elapsed().as_secs_f64());
        failed += usize::from(!out.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------- 1

fn c1_gradients() -> Result<Outcome> {
    let t = Instant::now();
    let results = run_random_checks(100, 2024)?;
    let secs = t.elapsed().as_secs_f64();
    let ok = results.iter().filter(|(_, e)| *e < 1e-4).count();
    let (worst_case, worst) = results
        .iter()
        .fold(("", 0.0f64), |(n, w), &(name, e)| if e > w { (name, e) } else { (n, w) });
    Ok(Outcome::new(
        ok == 100 && results.len() == 100 && secs < 60.0,
        format!("{ok}/100 within 1e-4 relative (worst {worst:.2e} in {worst_case}), {secs:.1} s < 60 s"),
    ))
}

// ---------------------------------------------------------------- 2

fn c2_rvq() -> Result<Outcome> {
    let t = Instant::now();
    let synth = SynthConfig::default();
    let refs = |split, n| -> Result<Vec<Vec<f64>>> {
        Ok(gen_split(&synth, 21, split, n)?.into_iter().flat_map(|s| s.refs).collect())
    };
    let train = refs(Split::Train, 250)?;
    let held = refs(Split::Eval, 100)?;
    let (codec, _) = train_codec(&CodecConfig::default(), &CodecTrainConfig::default(), &train)?;

    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let lat = Tensor::randn([1000, codec.config.latent_dim], 0.3, &mut rng);
    let (_, norms) = codec.quantize(&lat);
    let residual_violations = norms
        .iter()
        .map(|n| n.windows(2).filter(|w| w[1] > w[0]).count())
        .sum::<usize>();

    let m = codec.num_orders();
    let mut strictly = 0;
    for s in &held {
        let g = codec.encode(s)?;
        let errs = (1..=m)
            .map(|k| Ok(relative_error(s, &codec.decode(&g, k)?[..s.len()])))
            .collect::<Result<Vec<f64>>>()?;
        strictly += usize::from(errs.windows(2).all(|w| w[1] < w[0]));
    }
    let secs = t.elapsed().as_secs_f64();
    let frac = strictly as f64 / held.len() as f64;
    Ok(Outcome::new(
        residual_violations == 0 && frac >= 0.95 && held.len() == 200 && train.len() == 500 && secs < 300.0,
        format!(
            "{residual_violations} residual increases on 1000 frames; strictly decreasing on {strictly}/{} held-out signals ({:.1}% >= 95%), {secs:.0} s < 300 s",
            held.len(),
            100.0 * frac
        ),
    ))
}

// ---------------------------------------------------------------- 3

fn c3_sot() -> Result<Outcome> {
    const HOP: usize = 64;
    let t = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let c = rng.gen_range(2..40);
        let m = rng.gen_range(1..6);
        let n = rng.gen_range(1..=4);
        let speakers: Vec<(TokenGrid, f64)> = (0..n)
            .map(|_| {
                let len = rng.gen_range(0..=50);
                let orders = (0..m).map(|_| (0..len).map(|_| rng.gen_range(0..c)).collect()).collect();
                (TokenGrid::new(orders, HOP, 8000).unwrap(), rng.gen_range(0..8) as f64 * 0.125)
            })
            .collect();
        let vocab = Vocab::new(c);
        let seq = build_sot(&speakers, &vocab)?;
        let (back, _) = split_sot(&seq, &vocab, HOP, 8000)?;
        // stable sort by onset, written without the library
        let mut idx: Vec<usize> = (0..n).collect();
        idx.sort_by(|&a, &b| speakers[a].1.total_cmp(&speakers[b].1));
        let want: Vec<TokenGrid> = idx.into_iter().map(|j| speakers[j].0.clone()).collect();
        mismatches += usize::from(back != want);
    }
    let secs = t.elapsed().as_secs_f64();
    Ok(Outcome::new(
        mismatches == 0 && secs < 10.0,
        format!("{mismatches} mismatches in 1000 cases, {secs:.2} s < 10 s"),
    ))
}

// ---------------------------------------------------------------- 4, 5

fn random_model_config(rng: &mut ChaCha8Rng, min_orders: usize) -> ModelConfig {
    let heads = rng.gen_range(1..=4);
    ModelConfig {
        codebook_size: rng.gen_range(2..12),
        num_orders: rng.gen_range(min_orders..=5),
        input_dim: rng.gen_range(2..10),
        d_model: heads * 2 * rng.gen_range(1..=4),
        heads,
        enc_layers: rng.gen_range(1..=3),
        dec_layers: rng.gen_range(1..=3),
        ff_mult: rng.gen_range(1..=4),
        max_len: 24,
        dropout: rng.gen_range(0.0..0.3),
        init_seed: rng.gen(),
        ..Default::default()
    }
}

fn c4_causality() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst = 0.0f64;
    let mut nonzero = 0;
    for _ in 0..20 {
        let cfg = random_model_config(&mut rng, 1);
        let model = ArModel::new(cfg.clone())?;
        let frames = rng.gen_range(1..12);
        let feats = Tensor::randn([frames, cfg.input_dim], 1.0, &mut rng);
        let v = cfg.vocab().size();
        let tokens: Vec<usize> = (0..rng.gen_range(2..20)).map(|_| rng.gen_range(0..v)).collect();
        let g = ar_future_gradient(&model, &feats, &tokens)?;
        worst = worst.max(g);
        nonzero += usize::from(g != 0.0);
    }
    Ok(Outcome::new(
        nonzero == 0,
        format!("{nonzero}/20 configurations with a future-to-past gradient (largest {worst:e})"),
    ))
}

fn c5_nar() -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(55);
    let mut notes = Vec::new();
    let mut pass = true;
    for trial in 0..5 {
        let cfg = random_model_config(&mut rng, 3);
        let nar = NarModel::new(cfg.clone())?;
        let feats = Tensor::randn([rng.gen_range(2..10), cfg.input_dim], 1.0, &mut rng);
        let t_len = rng.gen_range(3..16);
        let lower: Vec<Vec<usize>> = (0..cfg.num_orders - 1)
            .map(|_| (0..t_len).map(|_| rng.gen_range(0..cfg.codebook_size)).collect())
            .collect();
        let order = cfg.num_orders - 1;
        let from_later = nar_cross_position_influence(&nar, &feats, &lower[..order], order, 0)?;
        let from_earlier = nar_cross_position_influence(&nar, &feats, &lower[..order], order, t_len - 1)?;
        let tying = nar_tying_check(&nar, &feats, &lower, 1)?;
        let gap = nar_additivity_gap(&nar, &feats, &lower[..order], order)?;

        let v = cfg.vocab();
        let mut order0 = vec![v.sos()];
        order0.extend((0..t_len - 3).map(|_| rng.gen_range(0..cfg.codebook_size)));
        order0.insert(order0.len().min(2), v.sc());
        order0.push(v.eos());
        order0.truncate(t_len);
        *order0.last_mut().unwrap() = v.eos();
        let before = nar.forward_calls();
        nar_decode(&nar, &feats, &order0)?;
        let passes = nar.forward_calls() - before;

        let ok = from_later > 0.0 && from_earlier > 0.0 && tying == (true, true) && gap <= 1e-12 && passes == cfg.num_orders - 1;
        pass &= ok;
        if !ok || trial == 0 {
            notes.push(format!(
                "m={} influence later {from_later:.1e} earlier {from_earlier:.1e}, tying {tying:?}, additivity gap {gap:.1e}, {passes} passes",
                cfg.num_orders
            ));
        }
    }
    Ok(Outcome::new(pass, format!("5 configurations; {}", notes.join("; "))))
}

// ---------------------------------------------------------------- 6, 7, 9 shared setup

/// One-second mixtures keep the serialized target near 250 tokens.
fn desk_synth() -> SynthConfig {
    SynthConfig {
        duration: 1.0,
        ..Default::default()
    }
}

/// Default codec trained on the references of 250 mixtures (seed 1).
fn desk_codec() -> &'static RvqCodec {
    static CODEC: OnceLock<RvqCodec> = OnceLock::new();
    CODEC.get_or_init(|| {
        let sig: Vec<Vec<f64>> = gen_split(&desk_synth(), 1, Split::Train, 250)
            .expect("synthesis")
            .into_iter()
            .flat_map(|s| s.refs)
            .collect();
        train_codec(&CodecConfig::default(), &CodecTrainConfig::default(), &sig)
            .expect("codec training")
            .0
    })
}

fn desk_model(codec: &RvqCodec) -> ModelConfig {
    ModelConfig {
        codebook_size: codec.codebook_size(),
        num_orders: codec.num_orders(),
        input_dim: codec.config.latent_dim,
        d_model: 64,
        enc_layers: 2,
        dec_layers: 2,
        max_len: 320,
        dropout: 0.0,
        ..Default::default()
    }
}

fn desk_train(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        base_lr: 1e-3,
        batch_size: 8,
        warmup_frac: 0.05,
        eval_every: 0,
        ..Default::default()
    }
}

/// Greedy decoding with no repetition blocking.
fn greedy() -> DecodeConfig {
    DecodeConfig {
        beam_size: 1,
        ngram_block_n: 0,
        max_len: 320,
        ..Default::default()
    }
}

fn oracle() -> OracleConfig {
    let s = desk_synth();
    OracleConfig::new(s.slot_len(), s.sample_rate)
}

// ---------------------------------------------------------------- 6

fn c6_overfit() -> Result<Outcome> {
    let t = Instant::now();
    let codec = desk_codec();
    let samples = gen_split(&desk_synth(), 7, Split::Train, 8)?;
    let pairs = prepare_pairs(codec, &samples, codec.num_orders())?;
    let cfg = desk_model(codec);
    let mut ar = ArModel::new(cfg.clone())?;
    train_ar(&mut ar, &pairs, &[], &desk_train(300), None)?;
    let mut nar = NarModel::new(cfg.clone())?;
    // The NAR sees no token history, so memorizing needs a longer schedule.
    let nar_cfg = TrainConfig {
        base_lr: 2e-3,
        ..desk_train(1500)
    };
    train_nar(&mut nar, &pairs, &[], &nar_cfg, None)?;

    let (ar_hit, ar_total) = ar_accuracy_counts(&ar, &pairs)?;
    let nar_counts = nar_accuracy_counts(&nar, &pairs)?;
    let (nar_hit, nar_total) = nar_counts.iter().fold((0, 0), |(a, b), (h, n)| (a + h, b + n));
    let vocab = cfg.vocab();
    let mut rollouts = 0;
    for p in &pairs {
        let scorer = ArScorer {
            model: &ar,
            memory: ar.memory(&p.features)?,
        };
        let out = ar_decode(&scorer, &vocab, &greedy(), 0)?;
        rollouts += usize::from(out.tokens == p.sot.orders[0]);
    }
    let reports = evaluate_models(codec, &ar, Some(&nar), &samples, &greedy(), &oracle(), 1)?;
    let zero_ser = reports.iter().filter(|r| r.ser_counts.ops.total() == 0).count();
    let mins = t.elapsed().as_secs_f64() / 60.0;
    Ok(Outcome::new(
        ar_hit == ar_total && rollouts == 8 && nar_hit == nar_total && zero_ser == 8 && mins < 30.0,
        format!(
            "AR teacher-forced {ar_hit}/{ar_total}, greedy rollouts exact {rollouts}/8, NAR non-special {nar_hit}/{nar_total}, SER 0% on {zero_ser}/8, {mins:.1} min < 30 min"
        ),
    ))
}

// ---------------------------------------------------------------- 7, 9

struct Generalization {
    ar: ArModel,
    nar: NarModel,
    eval: Vec<MixtureSample>,
    minutes: f64,
}

const GEN_SEED: u64 = 7;
const GEN_EPOCHS: usize = 16;
const GEN_LR: f64 = 3e-3;

/// Stack trained on 2000 mixtures (seed 7) and the 200 unseen eval mixtures of the same seed.
fn generalization() -> &'static Result<Generalization> {
    static G: OnceLock<Result<Generalization>> = OnceLock::new();
    G.get_or_init(|| {
        let t = Instant::now();
        let codec = desk_codec();
        let train_s = gen_split(&desk_synth(), GEN_SEED, Split::Train, 2000)?;
        let eval = gen_split(&desk_synth(), GEN_SEED, Split::Eval, 200)?;
        let train: Vec<TrainPair> = prepare_pairs(codec, &train_s, codec.num_orders())?;
        drop(train_s);
        let cfg = desk_model(codec);
        let tc = TrainConfig {
            base_lr: GEN_LR,
            ..desk_train(GEN_EPOCHS)
        };
        let mut ar = ArModel::new(cfg.clone())?;
        train_ar(&mut ar, &train, &[], &tc, None)?;
        let mut nar = NarModel::new(cfg)?;
        train_nar(&mut nar, &train, &[], &tc, None)?;
        Ok(Generalization {
            ar,
            nar,
            eval,
            minutes: t.elapsed().as_secs_f64() / 60.0,
        })
    })
}

fn shared() -> Result<&'static Generalization> {
    generalization()
        .as_ref()
        .map_err(|e| sotsep::Error::Input(format!("training failed: {e}")))
}

fn c7_generalization() -> Result<Outcome> {
    let t = Instant::now();
    let g = shared()?;
    let codec = desk_codec();
    let oc = oracle();
    let trained = CorpusMetrics::from_samples(&evaluate_models(codec, &g.ar, Some(&g.nar), &g.eval, &greedy(), &oc, 1)?);
    let cfg = desk_model(codec);
    let (ar0, nar0) = (ArModel::new(cfg.clone())?, NarModel::new(cfg)?);
    let untrained = CorpusMetrics::from_samples(&evaluate_models(codec, &ar0, Some(&nar0), &g.eval, &greedy(), &oc, 1)?);
    let mixture = CorpusMetrics::from_samples(&mixture_reports(codec, &oc, &g.eval)?);
    let hours = (g.minutes + t.elapsed().as_secs_f64() / 60.0) / 60.0;
    Ok(Outcome::new(
        trained.ser + 30.0 <= untrained.ser && trained.ser + 30.0 <= mixture.ser && hours < 4.0,
        format!(
            "SER trained {:.2}% vs untrained {:.2}% and raw mixture {:.2}% (needs >= 30 points below both); data seed {GEN_SEED}, codec seed 1, {GEN_EPOCHS} epochs at lr {GEN_LR}; {hours:.2} h < 4 h",
            trained.ser, untrained.ser, mixture.ser
        ),
    ))
}

fn c9_temperature() -> Result<Outcome> {
    let g = shared()?;
    let temps = [0.5, 0.9, 1.0, 1.1, 1.5];
    let base = DecodeConfig {
        mode: DecodeMode::Sample,
        ..greedy()
    };
    let rows = sweep_temperature(desk_codec(), &g.ar, Some(&g.nar), &g.eval, &temps, &base, &oracle(), 1)?;
    let at_one = rows.iter().find(|r| r.temperature == 1.0).map(|r| r.metrics.ser).unwrap_or(f64::NAN);
    let pass = rows.iter().all(|r| at_one <= r.metrics.ser);
    let cells: Vec<String> = rows.iter().map(|r| format!("{}: {:.2}%", r.temperature, r.metrics.ser)).collect();
    Ok(Outcome::new(pass, format!("SER {} (1.0 must be <= every other)", cells.join(", "))))
}

// ---------------------------------------------------------------- 8

/// Rigged scorer: strongly prefers `pattern[i]` at generated position `i`,
/// then EOS; other tokens keep a fixed descending preference.
struct Rigged<'p> {
    pattern: &'p [usize],
    vocab: Vocab,
}

impl TokenScorer for Rigged<'_> {
    type State = usize;
    fn start(&self) -> usize {
        0
    }
    fn step(&self, fed: &mut usize, _token: usize) -> Result<Vec<f64>> {
        *fed += 1;
        let pos = *fed - 1;
        let mut l: Vec<f64> = (0..self.vocab.size()).map(|k| -0.1 * k as f64).collect();
        let want = self.pattern.get(pos).copied().unwrap_or(self.vocab.eos());
        l[want] = 10.0;
        Ok(l)
    }
    fn max_positions(&self) -> usize {
        64
    }
}

fn all_sequences(alphabet: &[usize], max_len: usize) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new()];
    let mut frontier = vec![Vec::new()];
    for _ in 0..max_len {
        frontier = frontier
            .iter()
            .flat_map(|s: &Vec<usize>| {
                alphabet.iter().map(move |&a| {
                    let mut t = s.clone();
                    t.push(a);
                    t
                })
            })
            .collect();
        out.extend(frontier.iter().cloned());
    }
    out
}

fn repeated_ngram(content: &[usize], n: usize) -> bool {
    if n == 0 || content.len() < n {
        return false;
    }
    let grams: Vec<&[usize]> = content.windows(n).collect();
    (0..grams.len()).any(|i| grams[i + 1..].contains(&grams[i]))
}

/// Forbidden next tokens, derived from the definitions alone.
fn mask_oracle(tokens: &[usize], v: &Vocab, n: usize, min_len: usize) -> Vec<bool> {
    let seg_start = tokens.iter().rposition(|&t| t == v.sc() || t == v.sos()).map_or(0, |p| p + 1);
    let seg = tokens[seg_start..].iter().filter(|&&t| !v.is_special(t)).count();
    let content: Vec<usize> = tokens.iter().copied().filter(|&t| !v.is_special(t)).collect();
    (0..v.size())
        .map(|x| {
            if x == v.sos() {
                true
            } else if x == v.sc() || x == v.eos() {
                seg < min_len
            } else {
                let mut c = content.clone();
                c.push(x);
                n > 0 && c.len() >= n && c.windows(n).take(c.len() - n).any(|w| w == &c[c.len() - n..])
            }
        })
        .collect()
}

fn segments(out: &DecodeOutput, v: &Vocab) -> Vec<usize> {
    out.tokens[1..out.tokens.len() - 1]
        .split(|&t| t == v.sc())
        .map(<[usize]>::len)
        .collect()
}

fn c8_constraints() -> Result<Outcome> {
    let v = Vocab::new(3);
    let mut failures: Vec<String> = Vec::new();

    // mask equals the oracle on every history of up to 7 tokens
    let histories = all_sequences(&[0, 1, 2, v.sc()], 7);
    let mut mask_cases = 0;
    for h in &histories {
        let mut tokens = vec![v.sos()];
        tokens.extend(h);
        for n in [0, 2, 3, 4] {
            for min_len in 0..=3 {
                let cfg = DecodeConfig {
                    ngram_block_n: n,
                    min_len,
                    ..Default::default()
                };
                mask_cases += 1;
                if constraint_mask(&tokens, &v, &cfg) != mask_oracle(&tokens, &v, n, min_len) && failures.len() < 5 {
                    failures.push(format!("mask {tokens:?} n={n} min_len={min_len}"));
                }
            }
        }
    }

    // n-gram blocking: a scorer that wants every pattern never yields a repeated trigram
    let patterns = all_sequences(&[0, 1, 2, v.sc()], 7);
    let mut block_cases = 0;
    for p in &patterns {
        for beam in [1, 3] {
            let cfg = DecodeConfig {
                beam_size: beam,
                ngram_block_n: 3,
                min_len: 0,
                max_len: 24,
                ..Default::default()
            };
            let out = ar_decode(&Rigged { pattern: p, vocab: v }, &v, &cfg, 0)?;
            block_cases += 1;
            let content: Vec<usize> = out.tokens.iter().copied().filter(|&t| !v.is_special(t)).collect();
            let p_content: Vec<usize> = p.iter().copied().filter(|&t| !v.is_special(t)).collect();
            let bad = out.fallbacks > 0
                || repeated_ngram(&content, 3)
                || (beam == 1 && !repeated_ngram(&p_content, 3) && out.tokens[1..out.tokens.len() - 1] != p[..]);
            if bad && failures.len() < 5 {
                failures.push(format!("blocking pattern {p:?} beam {beam}: {:?}", out.tokens));
            }
        }
    }

    // blank suppression: scorers that want early SC/EOS never produce a short segment
    let patterns = all_sequences(&[0, 1, v.sc(), v.eos()], 6);
    let mut blank_cases = 0;
    for p in &patterns {
        for min_len in 1..=3 {
            for beam in [1, 3] {
                let cfg = DecodeConfig {
                    beam_size: beam,
                    ngram_block_n: 0,
                    min_len,
                    max_len: 30,
                    ..Default::default()
                };
                let out = ar_decode(&Rigged { pattern: p, vocab: v }, &v, &cfg, 0)?;
                blank_cases += 1;
                let bad = out.fallbacks > 0 || out.forced_eos || segments(&out, &v).iter().any(|&s| s < min_len);
                if bad && failures.len() < 5 {
                    failures.push(format!("blank pattern {p:?} min_len {min_len}: {:?}", out.tokens));
                }
            }
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        format!(
            "{mask_cases} mask cases, {block_cases} blocking decodes, {blank_cases} blank-suppression decodes; failures: {}",
            if failures.is_empty() { "none".to_string() } else { failures.join("; ") }
        ),
    ))
}

// ---------------------------------------------------------------- 10

fn c10_edit_distance() -> Result<Outcome> {
    const L: usize = 8;
    // every string over {0,1,2} of length <= L, shortest first
    let mut strings: Vec<Vec<u8>> = vec![Vec::new()];
    let mut offset = [0usize; L + 2];
    offset[1] = 1;
    for len in 1..=L {
        let start = offset[len - 1];
        let prev: Vec<Vec<u8>> = strings[start..].to_vec();
        for s in prev {
            for a in 0..3u8 {
                let mut t = s.clone();
                t.push(a);
                strings.push(t);
            }
        }
        offset[len + 1] = strings.len();
    }
    let index = |s: &[u8]| offset[s.len()] + s.iter().fold(0usize, |acc, &d| acc * 3 + d as usize);
    // single-edit neighbours: the edit graph whose shortest paths are edit distances
    let adj: Vec<Vec<u32>> = strings
        .iter()
        .map(|s| {
            let mut nb = Vec::new();
            for i in 0..s.len() {
                let mut d = s.clone();
                d.remove(i);
                nb.push(index(&d) as u32);
                for a in 0..3u8 {
                    if a != s[i] {
                        let mut r = s.clone();
                        r[i] = a;
                        nb.push(index(&r) as u32);
                    }
                }
            }
            if s.len() < L {
                for i in 0..=s.len() {
                    for a in 0..3u8 {
                        let mut r = s.clone();
                        r.insert(i, a);
                        nb.push(index(&r) as u32);
                    }
                }
            }
            nb
        })
        .collect();

    let n = strings.len();
    let mut dist = vec![u8::MAX; n];
    let mut queue = VecDeque::with_capacity(n);
    let mut mismatches = 0usize;
    let mut first = None;
    for (si, src) in strings.iter().enumerate() {
        dist.fill(u8::MAX);
        dist[si] = 0;
        queue.push_back(si as u32);
        while let Some(u) = queue.pop_front() {
            let du = dist[u as usize];
            for &w in &adj[u as usize] {
                if dist[w as usize] == u8::MAX {
                    dist[w as usize] = du + 1;
                    queue.push_back(w);
                }
            }
        }
        for (ti, dst) in strings.iter().enumerate() {
            let (d, ops) = edit_distance(src, dst);
            let consistent = ops.total() == d && ops.deletions + dst.len() == ops.insertions + src.len();
            if d != dist[ti] as usize || !consistent {
                mismatches += 1;
                first.get_or_insert((src.clone(), dst.clone(), d, dist[ti]));
            }
        }
    }
    Ok(Outcome::new(
        mismatches == 0,
        format!(
            "{} ordered pairs of {n} lists (length <= {L}, 3 symbols) against shortest paths in the single-edit graph: {mismatches} mismatches{}",
            n * n,
            first.map_or(String::new(), |f| format!(", first {f:?}"))
        ),
    ))
}

// ---------------------------------------------------------------- 11

const TINY: &str = "\
data.n_train=60
data.n_eval=3
synth.duration=0.5
synth.max_onset=0.25
codec.m=3
codec.latent_dim=8
codec.codebook_size=16
codec_train.epochs=2
codec_train.kmeans_iters=3
model.d_model=16
model.heads=2
model.enc_layers=1
model.dec_layers=1
model.ff_mult=2
ar_train.epochs=1
ar_train.base_lr=1e-3
nar_train.epochs=1
nar_train.base_lr=1e-3
";

fn io_error(path: &Path, source: std::io::Error) -> sotsep::Error {
    sotsep::Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Checksum lines printed by one CLI run.
fn run_cli(args: &[&str]) -> std::result::Result<Vec<String>, String> {
    let out = Command::new(env!("CARGO_BIN_EXE_sotsep"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("{args:?} exited with {}: {}", out.status, String::from_utf8_lossy(&out.stderr).trim()));
    }
    let lines: Vec<String> = String::from_utf8_lossy(&out.stdout)
        .lines()
        .filter(|l| l.starts_with("checksum ") || l.starts_with("sha256 "))
        .map(str::to_string)
        .collect();
    if lines.is_empty() {
        return Err(format!("{args:?} printed no checksum"));
    }
    Ok(lines)
}

fn c11_determinism() -> Result<Outcome> {
    let dir = tempfile::tempdir().map_err(|e| io_error(Path::new("tempdir"), e))?;
    let w = dir.path();
    let cfg = w.join("tiny.cfg");
    std::fs::write(&cfg, TINY).map_err(|e| io_error(&cfg, e))?;
    let p = |rel: &str| w.join(rel).to_string_lossy().into_owned();
    let (cfg, ds, codec) = (p("tiny.cfg"), p("ds"), p("ds/codec.slms"));
    let (ar, nar) = (p("ar/ar.slms"), p("nar/nar.slms"));
    let mix = p("ds/wav/eval/eval-00000_mix.wav");
    let commands: Vec<(&str, Vec<String>)> = vec![
        ("gen-data", vec!["gen-data", "--out", &ds, "--force"].into_iter().map(String::from).collect()),
        ("train-codec", vec!["train-codec", "--data", &ds].into_iter().map(String::from).collect()),
        ("train-ar", vec!["train-ar", "--data", &ds, "--out", &p("ar"), "--force"].into_iter().map(String::from).collect()),
        ("train-nar", vec!["train-nar", "--data", &ds, "--out", &p("nar"), "--force"].into_iter().map(String::from).collect()),
        (
            "separate (beam)",
            ["separate", "--mixture", &mix, "--codec", &codec, "--ar", &ar, "--nar", &nar, "--out", &p("sep_beam")]
                .map(String::from)
                .to_vec(),
        ),
        (
            "separate (sample)",
            ["separate", "--mixture", &mix, "--codec", &codec, "--ar", &ar, "--nar", &nar, "--out", &p("sep_sample"), "--mode", "sample", "--seed", "5"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "evaluate",
            ["evaluate", "--data-eval", &ds, "--codec", &codec, "--ar", &ar, "--nar", &nar, "--out", &p("report.json"), "--with-untrained"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "ablate codebooks",
            ["ablate", "--what", "codebooks", "--data-eval", &ds, "--codec", &codec, "--ar", &ar, "--nar", &nar, "--out", &p("codebooks.csv"), "--retrain"]
                .map(String::from)
                .to_vec(),
        ),
        (
            "ablate temperature",
            ["ablate", "--what", "temperature", "--data-eval", &ds, "--codec", &codec, "--ar", &ar, "--nar", &nar, "--out", &p("temperature.csv")]
                .map(String::from)
                .to_vec(),
        ),
    ];
    let mut failures = Vec::new();
    let mut files = 0;
    for (name, args) in &commands {
        let mut full: Vec<&str> = args.iter().map(String::as_str).collect();
        full.extend(["--config", &cfg]);
        let runs = (run_cli(&full), run_cli(&full));
        match runs {
            (Ok(a), Ok(b)) if a == b => files += a.iter().filter(|l| l.starts_with("sha256 ")).count(),
            (Ok(_), Ok(_)) => failures.push(format!("{name}: checksums differ")),
            (Err(e), _) | (_, Err(e)) => failures.push(format!("{name}: {e}")),
        }
    }
    Ok(Outcome::new(
        failures.is_empty(),
        format!(
            "{} commands run twice, {files} output digests plus combined checksums compared; {}",
            commands.len(),
            if failures.is_empty() { "all identical".to_string() } else { failures.join("; ") }
        ),
    ))
}

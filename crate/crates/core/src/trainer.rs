//! Teacher-forced training of the AR and NAR models with warm-up plus cosine
//! decay, global-norm clipping and resumable checkpoints.
//!
//! Every random choice is a pure function of `(seed, epoch)` or
//! `(seed, step)`, so a resumed run replays the uninterrupted one exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::codec::RvqCodec;
use crate::container::Container;
use crate::error::{Error, Result};
use crate::model::{mixture_features, ArModel, Ctx, ModelConfig, NarModel};
use crate::numcore::{adam_step, AdamConfig, Graph, LrSchedule, OptimizerState, ParamGrads, ParamStore, Tensor, Var};
use crate::sot::SotSequence;
use crate::synth::{make_training_pair, MixtureSample};

pub const STATE_VERSION: u32 = 1;
pub const STATE_FILE: &str = "state.slms";
pub const BEST_FILE: &str = "best.slms";
pub const LOSS_FILE: &str = "loss.csv";

const TASK_STREAM: u64 = 2 << 40;
const STEP_STREAM: u64 = 1 << 40;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_frac: f64,
    pub min_lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub grad_clip: f64,
    /// Epochs between evaluations; 0 disables evaluation.
    pub eval_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Stop after this global step (the schedule still spans every epoch).
    pub stop_after: Option<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            base_lr: 5e-5,
            warmup_frac: 0.1,
            min_lr: 0.0,
            batch_size: 8,
            seed: 0,
            grad_clip: 1.0,
            eval_every: 1,
            checkpoint_dir: None,
            stop_after: None,
        }
    }
}

impl TrainConfig {
    pub fn steps_per_epoch(&self, n: usize) -> u64 {
        n.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn schedule(&self, n: usize) -> Result<LrSchedule> {
        if self.epochs == 0 || self.batch_size == 0 || n == 0 {
            return Err(Error::input("training needs epochs, batch_size and data"));
        }
        if !(0.0..1.0).contains(&self.warmup_frac) {
            return Err(Error::input("warmup_frac must be in [0, 1)"));
        }
        let total = self.steps_per_epoch(n) * self.epochs as u64;
        let warmup = ((self.warmup_frac * total as f64).round() as u64).min(total - 1);
        LrSchedule::new(self.base_lr, warmup, total, self.min_lr)
    }
}

/// Precomputed encoder features and SOT target of one mixture.
#[derive(Clone, Debug)]
pub struct TrainPair {
    pub id: String,
    pub features: Tensor,
    pub sot: SotSequence,
}

pub fn prepare_pairs(codec: &RvqCodec, samples: &[MixtureSample], num_orders: usize) -> Result<Vec<TrainPair>> {
    samples
        .iter()
        .map(|s| {
            let (mix, sot) = make_training_pair(codec, s, num_orders)?;
            Ok(TrainPair {
                id: s.id.clone(),
                features: mixture_features(codec, &mix)?,
                sot,
            })
        })
        .collect()
}

/// Order of training pairs within `epoch`.
pub fn epoch_permutation(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// NAR order trained at `step`, uniform over `1..m`.
pub fn task_for_step(seed: u64, step: u64, m: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(TASK_STREAM + step);
    rng.gen_range(1..m)
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(STEP_STREAM + step);
    rng
}

/// A model the generic loop can train.
pub trait TrainTarget {
    const KIND: &'static str;
    fn config(&self) -> &ModelConfig;
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    /// Order trained at `step`.
    fn order_for_step(&self, seed: u64, step: u64) -> usize;
    /// Mean cross-entropy of one pair and the number of scored tokens.
    fn pair_loss(&self, g: &mut Graph<'_>, pair: &TrainPair, order: usize, ctx: &mut Ctx<'_>) -> Result<(Var, usize)>;
    /// Teacher-forced token error in percent.
    fn eval_error(&self, pairs: &[TrainPair]) -> Result<f64>;
    fn save(&self, path: &Path) -> Result<()>;
}

impl TrainTarget for ArModel {
    const KIND: &'static str = "ar";

    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn order_for_step(&self, _: u64, _: u64) -> usize {
        0
    }

    fn pair_loss(&self, g: &mut Graph<'_>, pair: &TrainPair, _: usize, ctx: &mut Ctx<'_>) -> Result<(Var, usize)> {
        let seq = &pair.sot.orders[0];
        let h = self.encode(g, &pair.features, ctx)?;
        let logits = self.logits(g, h, &seq[..seq.len() - 1], ctx)?;
        let loss = g.cross_entropy(logits, &seq[1..], None)?;
        Ok((loss, seq.len() - 1))
    }

    fn eval_error(&self, pairs: &[TrainPair]) -> Result<f64> {
        let (right, total) = ar_accuracy_counts(self, pairs)?;
        Ok(error_percent(right, total))
    }

    fn save(&self, path: &Path) -> Result<()> {
        ArModel::save(self, path)
    }
}

/// NAR targets with every position that is special in order 0 replaced by SOS (ignored).
fn nar_targets(pair: &TrainPair, order: usize, vocab: &crate::sot::Vocab) -> Vec<usize> {
    pair.sot.orders[0]
        .iter()
        .zip(&pair.sot.orders[order])
        .map(|(&c0, &ci)| if vocab.is_special(c0) { vocab.sos() } else { ci })
        .collect()
}

impl TrainTarget for NarModel {
    const KIND: &'static str = "nar";

    fn config(&self) -> &ModelConfig {
        &self.config
    }
    fn store(&self) -> &ParamStore {
        &self.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn order_for_step(&self, seed: u64, step: u64) -> usize {
        task_for_step(seed, step, self.config.num_orders)
    }

    fn pair_loss(&self, g: &mut Graph<'_>, pair: &TrainPair, order: usize, ctx: &mut Ctx<'_>) -> Result<(Var, usize)> {
        let vocab = self.config.vocab();
        let h = self.encode(g, &pair.features, ctx)?;
        let lower: Vec<&[usize]> = pair.sot.orders[..order].iter().map(Vec::as_slice).collect();
        let logits = self.logits(g, h, &lower, order, ctx)?;
        let targets = nar_targets(pair, order, &vocab);
        let n = targets.iter().filter(|&&t| t != vocab.sos()).count();
        let loss = g.cross_entropy(logits, &targets, Some(vocab.sos()))?;
        Ok((loss, n))
    }

    fn eval_error(&self, pairs: &[TrainPair]) -> Result<f64> {
        let per = nar_accuracy_counts(self, pairs)?;
        let (right, total) = per.iter().fold((0, 0), |(r, t), &(a, b)| (r + a, t + b));
        Ok(error_percent(right, total))
    }

    fn save(&self, path: &Path) -> Result<()> {
        NarModel::save(self, path)
    }
}

fn error_percent(right: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * (total - right) as f64 / total as f64
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Teacher-forced argmax hits and scored positions of the AR model.
pub fn ar_accuracy_counts(model: &ArModel, pairs: &[TrainPair]) -> Result<(usize, usize)> {
    let mut right = 0;
    let mut total = 0;
    for p in pairs {
        let seq = &p.sot.orders[0];
        let mut g = Graph::inference(&model.store);
        let mut ctx = Ctx::inference();
        let h = model.encode(&mut g, &p.features, &mut ctx)?;
        let l = model.logits(&mut g, h, &seq[..seq.len() - 1], &mut ctx)?;
        let lv = g.value(l);
        for (t, &target) in seq[1..].iter().enumerate() {
            right += usize::from(argmax(lv.row(t)) == target);
            total += 1;
        }
    }
    Ok((right, total))
}

/// Per order `1..m`: argmax hits and scored non-special positions, with
/// ground-truth lower orders and codec-only argmax.
pub fn nar_accuracy_counts(model: &NarModel, pairs: &[TrainPair]) -> Result<Vec<(usize, usize)>> {
    let m = model.config.num_orders;
    let vocab = model.config.vocab();
    let mut out = vec![(0, 0); m - 1];
    for p in pairs {
        let mut g = Graph::inference(&model.store);
        let mut ctx = Ctx::inference();
        let h = model.encode(&mut g, &p.features, &mut ctx)?;
        for i in 1..m {
            let lower: Vec<&[usize]> = p.sot.orders[..i].iter().map(Vec::as_slice).collect();
            let l = model.logits(&mut g, h, &lower, i, &mut ctx)?;
            let lv = g.value(l);
            for (t, &c0) in p.sot.orders[0].iter().enumerate() {
                if vocab.is_special(c0) {
                    continue;
                }
                let pred = argmax(&lv.row(t)[..vocab.codebook_size]);
                out[i - 1].0 += usize::from(pred == p.sot.orders[i][t]);
                out[i - 1].1 += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRow {
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub eval_metric: Option<f64>,
}

/// Everything needed to continue a run bit-for-bit.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub kind: String,
    pub seed: u64,
    pub epoch: u64,
    pub global_step: u64,
    pub params: ParamStore,
    pub optimizer: OptimizerState,
    pub best_metric: Option<f64>,
    pub log: Vec<LogRow>,
}

impl TrainState {
    pub fn to_container(&self) -> Container {
        let mut c = Container::new(json!({
            "kind": "train_state",
            "version": STATE_VERSION,
            "model_kind": self.kind,
            "seed": self.seed,
            "epoch": self.epoch,
            "global_step": self.global_step,
            "adam_step": self.optimizer.step,
            "best_metric": self.best_metric,
            "log": self.log,
        }));
        c.extend_from_store("param.", &self.params);
        for (((name, _), m), v) in self.params.iter().zip(&self.optimizer.m).zip(&self.optimizer.v) {
            c.push(format!("adam_m.{name}"), m.clone());
            c.push(format!("adam_v.{name}"), v.clone());
        }
        c
    }

    pub fn from_container(c: &Container, origin: &Path) -> Result<Self> {
        let fmt = |msg: &str| Error::Format {
            path: origin.to_path_buf(),
            msg: msg.to_string(),
        };
        let h = &c.header;
        if h["kind"] != "train_state" {
            return Err(fmt("not a training state"));
        }
        let version = h["version"].as_u64().ok_or_else(|| fmt("missing version"))? as u32;
        if version != STATE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: STATE_VERSION,
            });
        }
        let params = c.store_with_prefix("param.");
        let m_store = c.store_with_prefix("adam_m.");
        let v_store = c.store_with_prefix("adam_v.");
        let mut optimizer = OptimizerState::new(&params);
        optimizer.step = h["adam_step"].as_u64().ok_or_else(|| fmt("missing adam_step"))?;
        for (i, (name, _)) in params.iter().enumerate() {
            optimizer.m[i] = m_store.by_name(name).ok_or_else(|| fmt("missing moment"))?.clone();
            optimizer.v[i] = v_store.by_name(name).ok_or_else(|| fmt("missing moment"))?.clone();
        }
        if !optimizer.matches(&params) {
            return Err(fmt("optimizer moments do not match parameters"));
        }
        let num = |k: &str| h[k].as_u64().ok_or_else(|| fmt(&format!("missing {k}")));
        Ok(Self {
            kind: h["model_kind"].as_str().ok_or_else(|| fmt("missing model_kind"))?.to_string(),
            seed: num("seed")?,
            epoch: num("epoch")?,
            global_step: num("global_step")?,
            params,
            optimizer,
            best_metric: h["best_metric"].as_f64(),
            log: serde_json::from_value(h["log"].clone())?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().save(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::load(path)?, path)
    }
}

/// Load the latest training state written into `checkpoint_dir`.
pub fn resume(checkpoint_dir: &Path) -> Result<TrainState> {
    if !checkpoint_dir.is_dir() {
        return Err(Error::Missing(format!(
            "checkpoint directory {} does not exist",
            checkpoint_dir.display()
        )));
    }
    TrainState::load(&checkpoint_dir.join(STATE_FILE))
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub best_metric: Option<f64>,
    /// Summed gradient norm of every parameter over the first epoch, by name.
    pub first_epoch_grad_norms: Vec<(String, f64)>,
    pub state: TrainState,
}

impl TrainReport {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|r| r.train_loss).collect()
    }
}

pub fn write_loss_csv(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut s = String::from("step,lr,train_loss,eval_metric\n");
    for r in log {
        let eval = r.eval_metric.map(|e| e.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.step, r.lr, r.train_loss, eval).expect("string write");
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn train_ar(
    model: &mut ArModel,
    train: &[TrainPair],
    eval: &[TrainPair],
    cfg: &TrainConfig,
    from: Option<TrainState>,
) -> Result<TrainReport> {
    train_model(model, train, eval, cfg, from)
}

pub fn train_nar(
    model: &mut NarModel,
    train: &[TrainPair],
    eval: &[TrainPair],
    cfg: &TrainConfig,
    from: Option<TrainState>,
) -> Result<TrainReport> {
    train_model(model, train, eval, cfg, from)
}

pub fn train_model<M: TrainTarget>(
    model: &mut M,
    train: &[TrainPair],
    eval: &[TrainPair],
    cfg: &TrainConfig,
    from: Option<TrainState>,
) -> Result<TrainReport> {
    let schedule = cfg.schedule(train.len())?;
    let spe = cfg.steps_per_epoch(train.len());
    let m = model.config().num_orders;
    if let Some(p) = train.iter().find(|p| p.sot.orders.len() < m) {
        return Err(Error::input(format!("pair {} has fewer than {m} orders", p.id)));
    }
    let mut state = match from {
        Some(s) => {
            if s.kind != M::KIND {
                return Err(Error::input(format!("cannot resume a {} state into a {} model", s.kind, M::KIND)));
            }
            if s.seed != cfg.seed {
                return Err(Error::input(format!("state seed {} differs from config seed {}", s.seed, cfg.seed)));
            }
            model.store_mut().load_from(&s.params).map_err(Error::Input)?;
            s
        }
        None => TrainState {
            kind: M::KIND.to_string(),
            seed: cfg.seed,
            epoch: 0,
            global_step: 0,
            params: ParamStore::new(),
            optimizer: OptimizerState::new(model.store()),
            best_metric: None,
            log: Vec::new(),
        },
    };
    let adam = AdamConfig::default();
    let dropout = model.config().dropout;
    let end = cfg.stop_after.map_or(schedule.total_steps, |s| s.min(schedule.total_steps));
    let mut grad_norms: Vec<f64> = vec![0.0; model.store().len()];
    let mut perm = Vec::new();
    let mut perm_epoch = u64::MAX;

    while state.global_step < end {
        let step = state.global_step;
        let epoch = step / spe;
        if epoch != perm_epoch {
            perm = epoch_permutation(cfg.seed, epoch, train.len());
            perm_epoch = epoch;
        }
        let k = (step % spe) as usize;
        let batch = &perm[k * cfg.batch_size..((k + 1) * cfg.batch_size).min(train.len())];
        let order = model.order_for_step(cfg.seed, step);
        let lr = schedule.lr_at(step);

        let mut rng = step_rng(cfg.seed, step);
        let mut grads = ParamGrads::zeros_like(model.store());
        let mut parts = Vec::with_capacity(batch.len());
        for &i in batch {
            let mut g = Graph::with_params(model.store(), true);
            let mut ctx = Ctx {
                dropout,
                rng: Some(&mut rng),
            };
            let (loss, n) = model.pair_loss(&mut g, &train[i], order, &mut ctx)?;
            let grads_i = g.backward(loss)?;
            let mut pg = ParamGrads::zeros_like(model.store());
            grads_i.accumulate_params(&mut pg);
            parts.push((g.value(loss).item(), n, pg));
        }
        let tokens: usize = parts.iter().map(|p| p.1).sum::<usize>().max(1);
        let mut loss = 0.0;
        for (l, n, mut pg) in parts {
            let w = n as f64 / tokens as f64;
            loss += w * l;
            pg.scale(w);
            for id in model.store().ids() {
                grads.add(id, pg.get(id).data());
            }
        }
        let norm = grads.clip_global_norm(cfg.grad_clip);
        if !loss.is_finite() || !norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite training loss {loss} at step {step} (lr {lr:e}, grad norm {norm})"
            )));
        }
        if epoch == 0 {
            for (acc, g) in grad_norms.iter_mut().zip(grads.iter()) {
                *acc += g.norm();
            }
        }
        adam_step(model.store_mut(), &grads, &mut state.optimizer, lr, &adam)?;
        state.global_step += 1;
        state.log.push(LogRow {
            step,
            lr,
            train_loss: loss,
            eval_metric: None,
        });

        let epoch_done = state.global_step % spe == 0;
        if epoch_done {
            state.epoch = state.global_step / spe;
            let ep = state.epoch as usize;
            if cfg.eval_every > 0 && !eval.is_empty() && ep.is_multiple_of(cfg.eval_every) {
                let metric = model.eval_error(eval)?;
                state.log.last_mut().expect("row just pushed").eval_metric = Some(metric);
                info!("{} epoch {ep}: loss {loss:.4}, eval token error {metric:.2}%", M::KIND);
                if state.best_metric.is_none_or(|b| metric < b) {
                    state.best_metric = Some(metric);
                    if let Some(dir) = &cfg.checkpoint_dir {
                        model.save(&dir.join(BEST_FILE))?;
                    }
                }
            } else {
                info!("{} epoch {ep}: loss {loss:.4}", M::KIND);
            }
        }
        if epoch_done || state.global_step == end {
            state.params = model.store().clone();
            if let Some(dir) = &cfg.checkpoint_dir {
                state.save(&dir.join(STATE_FILE))?;
                write_loss_csv(&dir.join(LOSS_FILE), &state.log)?;
            }
        }
    }
    state.params = model.store().clone();
    if let Some(dir) = &cfg.checkpoint_dir {
        if state.best_metric.is_none() {
            model.save(&dir.join(BEST_FILE))?;
        }
    }
    let names = model.store().iter().map(|(n, _)| n.to_string());
    Ok(TrainReport {
        log: state.log.clone(),
        best_metric: state.best_metric,
        first_epoch_grad_norms: names.zip(grad_norms).collect(),
        state,
    })
}

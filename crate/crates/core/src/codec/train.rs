use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{sq_dist, CodecConfig, Codebook, FrameCoder, RvqCodec};
use crate::error::{Error, Result};
use crate::numcore::{adam_step, AdamConfig, Graph, LrSchedule, OptimizerState, ParamGrads, ParamStore, Tensor};

pub const MIN_TRAIN_SIGNALS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_frames: usize,
    pub kmeans_iters: usize,
    pub ema_decay: f64,
    /// Entries used fewer times than this in one epoch are re-seeded.
    pub dead_threshold: f64,
    pub ema_batch: usize,
    pub seed: u64,
}

impl Default for CodecTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            lr: 3e-3,
            batch_frames: 256,
            kmeans_iters: 10,
            ema_decay: 0.99,
            dead_threshold: 2.0,
            ema_batch: 1024,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CodecTrainReport {
    pub frames: usize,
    pub final_ae_loss: f64,
    /// Frame-domain `‖synth(analysis(x)) − x‖ / ‖x‖` before quantization.
    pub ae_relative_error: f64,
    /// `‖latent − Σ entries‖ / ‖latent‖` with all orders.
    pub quant_relative_error: f64,
    pub utilization: Vec<f64>,
    pub reseeded: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Train the frame coder by reconstruction loss, then fit codebooks order by order.
pub fn train_codec(
    config: &CodecConfig,
    tc: &CodecTrainConfig,
    signals: &[Vec<f64>],
) -> Result<(RvqCodec, CodecTrainReport)> {
    config.validate()?;
    if signals.len() < MIN_TRAIN_SIGNALS {
        return Err(Error::input(format!(
            "codec training needs at least {MIN_TRAIN_SIGNALS} signals, got {}",
            signals.len()
        )));
    }
    if tc.batch_frames == 0 || tc.ema_batch == 0 || !(0.0..1.0).contains(&tc.ema_decay) {
        return Err(Error::input("invalid codec training config"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(tc.seed);
    let mut report = CodecTrainReport::default();

    let probe = FrameCoder::new(
        config.frame_len,
        config.hop,
        Tensor::zeros(vec![config.frame_len, config.latent_dim]),
        Tensor::zeros(vec![config.latent_dim, config.frame_len]),
    )?;
    let mut frames = Vec::new();
    for s in signals.iter().filter(|s| !s.is_empty()) {
        if s.iter().any(|x| !x.is_finite()) {
            return Err(Error::input("training signal contains non-finite samples"));
        }
        frames.extend_from_slice(probe.frames(s).data());
    }
    let n = frames.len() / config.frame_len;
    report.frames = n;
    let x = Tensor::new(vec![n, config.frame_len], frames)?;
    let degenerate = x.data().iter().all(|&v| v == 0.0);

    let init_std = 1.0 / (config.frame_len as f64).sqrt();
    let analysis = Tensor::randn(vec![config.frame_len, config.latent_dim], init_std, &mut rng);
    let synthesis = analysis.transpose()?;
    let mut store = ParamStore::new();
    let a_id = store.insert("analysis", analysis);
    let s_id = store.insert("synthesis", synthesis);

    if degenerate {
        let msg = "all training signals are zero; codebooks seeded randomly".to_string();
        warn!("{msg}");
        report.warnings.push(msg);
    } else {
        report.final_ae_loss = train_frame_coder(&mut store, &x, tc, &mut rng)?;
    }
    let coder = FrameCoder::new(
        config.frame_len,
        config.hop,
        store.get(a_id).clone(),
        store.get(s_id).clone(),
    )?;
    let latents = x.matmul(&coder.analysis)?;
    let recon = latents.matmul(&coder.synthesis)?;
    report.ae_relative_error = frame_relative_error(&x, &recon);

    let d = config.latent_dim;
    let mut residual = latents.clone().into_data();
    let mut codebooks = Vec::with_capacity(config.num_orders);
    for order in 0..config.num_orders {
        let cb = if degenerate {
            let mut e = Tensor::randn(vec![config.codebook_size, d], 1e-3, &mut rng);
            e.data_mut()[..d].fill(0.0);
            report.reseeded.push(0);
            Codebook {
                order,
                entries: e,
                ema_counts: vec![0.0; config.codebook_size],
            }
        } else {
            let (cb, reseeded) = fit_codebook(order, &residual, d, config.codebook_size, tc, &mut rng);
            report.reseeded.push(reseeded);
            cb
        };
        let mut used = vec![false; config.codebook_size];
        for r in residual.chunks_exact_mut(d) {
            let (id, _) = cb.nearest(r);
            used[id] = true;
            for (x, e) in r.iter_mut().zip(cb.entry(id)) {
                *x -= e;
            }
        }
        let util = used.iter().filter(|&&u| u).count() as f64 / config.codebook_size as f64;
        info!("codebook {order}: utilization {util:.3}");
        report.utilization.push(util);
        codebooks.push(cb);
    }
    let lat_norm = latents.norm();
    let res_norm = residual.iter().map(|v| v * v).sum::<f64>().sqrt();
    report.quant_relative_error = if lat_norm > 0.0 { res_norm / lat_norm } else { 0.0 };

    let codec = RvqCodec::new(config.clone(), coder, codebooks)?;
    Ok((codec, report))
}

fn frame_relative_error(x: &Tensor, y: &Tensor) -> f64 {
    let num: f64 = x.data().iter().zip(y.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    let den: f64 = x.data().iter().map(|a| a * a).sum();
    if den > 0.0 {
        (num / den).sqrt()
    } else {
        0.0
    }
}

/// Minibatch Adam on the linear autoencoder; returns the last epoch's mean loss.
fn train_frame_coder(
    store: &mut ParamStore,
    x: &Tensor,
    tc: &CodecTrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let n = x.rows();
    let f = x.last_dim();
    let batches = n.div_ceil(tc.batch_frames);
    let total = (tc.epochs.max(1) * batches) as u64;
    let sched = LrSchedule::new(tc.lr, (total / 20).max(1), total, tc.lr * 0.05)?;
    let adam = AdamConfig::default();
    let mut opt = OptimizerState::new(store);
    // loss is reported relative to the mean frame energy
    let scale = x.data().iter().map(|v| v * v).sum::<f64>() / x.len() as f64;
    let ids: Vec<_> = store.ids().collect();
    let mut order: Vec<usize> = (0..n).collect();
    let mut last = 0.0;
    for epoch in 0..tc.epochs.max(1) {
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tc.batch_frames) {
            let mut data = Vec::with_capacity(chunk.len() * f);
            for &i in chunk {
                data.extend_from_slice(x.row(i));
            }
            let xb = Tensor::new(vec![chunk.len(), f], data)?;
            let mut grads = ParamGrads::zeros_like(store);
            let loss = {
                let mut g = Graph::with_params(store, true);
                let xv = g.constant(xb);
                let a = g.param(ids[0]);
                let s = g.param(ids[1]);
                let lat = g.matmul(xv, a)?;
                let rec = g.matmul(lat, s)?;
                let diff = g.sub(rec, xv)?;
                let sq = g.mul(diff, diff)?;
                let loss = g.mean(sq);
                let loss = g.scale(loss, 1.0 / scale);
                g.backward(loss)?.accumulate_params(&mut grads);
                g.value(loss).item()
            };
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("codec loss is {loss} in epoch {epoch}")));
            }
            epoch_loss += loss;
            let lr = sched.lr_at(opt.step);
            adam_step(store, &grads, &mut opt, lr, &adam)?;
        }
        last = epoch_loss / batches as f64;
        info!("codec epoch {epoch}: relative mse {last:.5}");
    }
    Ok(last)
}

fn assign(data: &[f64], d: usize, entries: &Tensor) -> Vec<usize> {
    let c = entries.shape()[0];
    data.chunks_exact(d)
        .map(|r| {
            let mut best = (0, f64::INFINITY);
            for id in 0..c {
                let dist = sq_dist(r, entries.row(id));
                if dist < best.1 {
                    best = (id, dist);
                }
            }
            best.0
        })
        .collect()
}

fn random_row<'r>(data: &'r [f64], d: usize, rng: &mut ChaCha8Rng) -> &'r [f64] {
    let i = rng.gen_range(0..data.len() / d);
    &data[i * d..(i + 1) * d]
}

/// k-means initialisation followed by EMA refinement; entry 0 stays zero.
fn fit_codebook(
    order: usize,
    residual: &[f64],
    d: usize,
    c: usize,
    tc: &CodecTrainConfig,
    rng: &mut ChaCha8Rng,
) -> (Codebook, usize) {
    let n = residual.len() / d;
    let mut entries = Tensor::zeros(vec![c, d]);
    let picks = index::sample(rng, n, (c - 1).min(n));
    for (slot, i) in picks.iter().enumerate() {
        entries.data_mut()[(slot + 1) * d..(slot + 2) * d].copy_from_slice(&residual[i * d..(i + 1) * d]);
    }

    let mut sizes = vec![0usize; c];
    for _ in 0..tc.kmeans_iters {
        let ids = assign(residual, d, &entries);
        let mut sums = vec![0.0; c * d];
        sizes.fill(0);
        for (r, &id) in residual.chunks_exact(d).zip(&ids) {
            sizes[id] += 1;
            for (s, v) in sums[id * d..(id + 1) * d].iter_mut().zip(r) {
                *s += v;
            }
        }
        for id in 1..c {
            let row = &mut entries.data_mut()[id * d..(id + 1) * d];
            if sizes[id] == 0 {
                row.copy_from_slice(random_row(residual, d, rng));
            } else {
                for (e, s) in row.iter_mut().zip(&sums[id * d..(id + 1) * d]) {
                    *e = s / sizes[id] as f64;
                }
            }
        }
    }

    let frac = tc.ema_batch as f64 / n as f64;
    let mut counts: Vec<f64> = sizes.iter().map(|&s| (s as f64 * frac).max(1e-3)).collect();
    let mut sums: Vec<f64> = (0..c * d).map(|j| entries.data()[j] * counts[j / d]).collect();
    let mut order_idx: Vec<usize> = (0..n).collect();
    let decay = tc.ema_decay;
    let mut reseeded = 0;
    for _ in 0..tc.epochs {
        order_idx.shuffle(rng);
        let mut usage = vec![0usize; c];
        for chunk in order_idx.chunks(tc.ema_batch) {
            let mut batch = Vec::with_capacity(chunk.len() * d);
            for &i in chunk {
                batch.extend_from_slice(&residual[i * d..(i + 1) * d]);
            }
            let ids = assign(&batch, d, &entries);
            let mut bc = vec![0.0; c];
            let mut bs = vec![0.0; c * d];
            for (r, &id) in batch.chunks_exact(d).zip(&ids) {
                bc[id] += 1.0;
                usage[id] += 1;
                for (s, v) in bs[id * d..(id + 1) * d].iter_mut().zip(r) {
                    *s += v;
                }
            }
            for id in 0..c {
                counts[id] = decay * counts[id] + (1.0 - decay) * bc[id];
            }
            for id in 1..c {
                for j in id * d..(id + 1) * d {
                    sums[j] = decay * sums[j] + (1.0 - decay) * bs[j];
                    entries.data_mut()[j] = sums[j] / counts[id].max(1e-12);
                }
            }
        }
        for id in 1..c {
            if (usage[id] as f64) < tc.dead_threshold {
                let r = random_row(residual, d, rng).to_vec();
                entries.data_mut()[id * d..(id + 1) * d].copy_from_slice(&r);
                counts[id] = 1.0;
                sums[id * d..(id + 1) * d].copy_from_slice(&r);
                reseeded += 1;
            }
        }
    }
    (
        Codebook {
            order,
            entries,
            ema_counts: counts,
        },
        reseeded,
    )
}

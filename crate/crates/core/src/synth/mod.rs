//! Deterministic multi-speaker mixtures of symbol-modulated harmonic tones.
//!
//! Each speaker emits one symbol per slot (`sample_rate / symbols_per_second`
//! samples). A symbol shifts the speaker's fundamental by a per-speaker
//! offset and scales the amplitude; phase runs continuously across slots.
//! References are stored unshifted and already scaled, on the 16-bit grid,
//! so the mixture is exactly the sum of the onset-shifted references.

mod oracle;
mod wav;

use std::f64::consts::TAU;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::RvqCodec;
use crate::error::{Error, Result};
use crate::jsonl::{read_jsonl, write_jsonl};
use crate::sot::{build_sot, SotSequence, Vocab};

pub use oracle::{decode_slot, decode_slots, decode_symbols, OracleConfig, SlotDecode, UNKNOWN_SYMBOL};
pub use wav::{read_wav, write_wav};

pub const NUM_SYMBOLS: usize = 16;
pub const NUM_HARMONICS: usize = 4;
pub const MIN_F0_GAP: f64 = 10.0;
/// Spacing of the per-symbol frequency offsets, in Hz.
pub const OFFSET_STEP: f64 = 8.0;
const F0_RANGE: (f64, f64) = (80.0, 300.0);
const PEAK: f64 = 0.9;
const PCM_SCALE: f64 = 32768.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub sample_rate: u32,
    pub duration: f64,
    pub speakers_per_mix: usize,
    pub symbols_per_second: usize,
    pub max_onset: f64,
    /// Onsets are multiples of this many samples.
    pub onset_grid: usize,
    /// Draw profiles from a fixed pool of this many speakers; 0 draws fresh ones.
    pub speaker_pool: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            sample_rate: 8000,
            duration: 2.0,
            speakers_per_mix: 2,
            symbols_per_second: 8,
            max_onset: 0.5,
            onset_grid: 64,
            speaker_pool: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.speakers_per_mix) {
            return Err(Error::input("speakers_per_mix must be 1, 2 or 3"));
        }
        if self.sample_rate == 0 || self.symbols_per_second == 0 || self.onset_grid == 0 {
            return Err(Error::input("sample_rate, symbols_per_second and onset_grid must be positive"));
        }
        if !(self.sample_rate as usize).is_multiple_of(self.symbols_per_second) {
            return Err(Error::input("symbols_per_second must divide sample_rate"));
        }
        if !(self.duration > 0.0) || !(self.max_onset >= 0.0) {
            return Err(Error::input("duration must be positive and max_onset non-negative"));
        }
        if self.num_slots() == 0 {
            return Err(Error::input("duration shorter than one symbol slot"));
        }
        Ok(())
    }

    pub fn slot_len(&self) -> usize {
        self.sample_rate as usize / self.symbols_per_second
    }

    pub fn num_slots(&self) -> usize {
        (self.duration * self.symbols_per_second as f64).round() as usize
    }

    /// Reference length in samples.
    pub fn ref_len(&self) -> usize {
        self.num_slots() * self.slot_len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpeakerProfile {
    pub speaker_id: usize,
    pub fundamental: f64,
    pub harmonic_weights: [f64; NUM_HARMONICS],
    /// `(amplitude, frequency offset in Hz)` per symbol.
    pub symbol_map: Vec<(f64, f64)>,
}

impl SpeakerProfile {
    pub fn random<R: Rng + ?Sized>(speaker_id: usize, rng: &mut R) -> Self {
        let fundamental = rng.gen_range(F0_RANGE.0..F0_RANGE.1);
        let mut w = [0.0; NUM_HARMONICS];
        for x in &mut w {
            *x = rng.gen_range(0.2..1.0);
        }
        let total: f64 = w.iter().sum();
        w.iter_mut().for_each(|x| *x /= total);
        let mut offsets: Vec<f64> = (0..NUM_SYMBOLS)
            .map(|k| (k as f64 - (NUM_SYMBOLS as f64 - 1.0) / 2.0) * OFFSET_STEP)
            .collect();
        offsets.shuffle(rng);
        let symbol_map = offsets
            .into_iter()
            .map(|off| (rng.gen_range(0.5..1.0), off))
            .collect();
        Self {
            speaker_id,
            fundamental,
            harmonic_weights: w,
            symbol_map,
        }
    }

    pub fn symbol_frequency(&self, symbol: usize) -> f64 {
        self.fundamental + self.symbol_map[symbol].1
    }

    /// Unscaled waveform for a symbol stream.
    pub fn render(&self, symbols: &[usize], slot_len: usize, sample_rate: u32) -> Vec<f64> {
        let mut out = Vec::with_capacity(symbols.len() * slot_len);
        let mut phase = [0.0f64; NUM_HARMONICS];
        for &s in symbols {
            let (amp, _) = self.symbol_map[s];
            let f = self.symbol_frequency(s);
            for _ in 0..slot_len {
                let mut v = 0.0;
                for (h, ph) in phase.iter_mut().enumerate() {
                    v += self.harmonic_weights[h] * ph.sin();
                    *ph = (*ph + TAU * (h + 1) as f64 * f / sample_rate as f64) % TAU;
                }
                out.push(amp * v);
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureSample {
    pub id: String,
    pub mixture: Vec<f64>,
    /// Unshifted, scaled references.
    pub refs: Vec<Vec<f64>>,
    pub symbols: Vec<Vec<usize>>,
    pub onsets: Vec<f64>,
    pub profiles: Vec<SpeakerProfile>,
    pub sample_rate: u32,
    pub duration: f64,
}

impl MixtureSample {
    pub fn num_speakers(&self) -> usize {
        self.refs.len()
    }

    pub fn onset_samples(&self, j: usize) -> usize {
        (self.onsets[j] * self.sample_rate as f64).round() as usize
    }

    /// Sum of the onset-shifted references.
    pub fn sum_of_refs(&self) -> Vec<f64> {
        shifted_sum(&self.refs, &(0..self.refs.len()).map(|j| self.onset_samples(j)).collect::<Vec<_>>())
    }
}

fn shifted_sum(refs: &[Vec<f64>], shifts: &[usize]) -> Vec<f64> {
    let len = refs.iter().zip(shifts).map(|(r, &s)| r.len() + s).max().unwrap_or(0);
    let mut out = vec![0.0; len];
    for (r, &s) in refs.iter().zip(shifts) {
        for (o, v) in out[s..].iter_mut().zip(r) {
            *o += v;
        }
    }
    out
}

fn quantize_pcm(x: f64) -> f64 {
    (x * PCM_SCALE).round().clamp(-PCM_SCALE, PCM_SCALE - 1.0) / PCM_SCALE
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }

    fn stream(self, index: usize) -> u64 {
        let tag = match self {
            Split::Train => 1u64,
            Split::Eval => 2u64,
        };
        (tag << 40) | index as u64
    }
}

fn pool_profiles(seed: u64, n: usize) -> Vec<SpeakerProfile> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..n).map(|i| SpeakerProfile::random(i, &mut rng)).collect()
}

fn draw_profiles(cfg: &SynthConfig, pool: &[SpeakerProfile], rng: &mut ChaCha8Rng) -> Vec<SpeakerProfile> {
    let mut chosen: Vec<SpeakerProfile> = Vec::with_capacity(cfg.speakers_per_mix);
    let mut attempts = 0usize;
    while chosen.len() < cfg.speakers_per_mix {
        attempts += 1;
        // a pool too small to ever satisfy the gap falls back to fresh draws
        let cand = if pool.is_empty() || attempts > 10_000 {
            SpeakerProfile::random(chosen.len(), rng)
        } else {
            pool[rng.gen_range(0..pool.len())].clone()
        };
        let clear = chosen
            .iter()
            .all(|p| (p.fundamental - cand.fundamental).abs() >= MIN_F0_GAP);
        if clear {
            chosen.push(cand);
        }
    }
    chosen
}

/// Generate one sample; the RNG stream depends only on `(seed, split, index)`.
pub fn gen_sample(cfg: &SynthConfig, seed: u64, split: Split, index: usize) -> Result<MixtureSample> {
    cfg.validate()?;
    let pool = if cfg.speaker_pool > 0 {
        pool_profiles(seed, cfg.speaker_pool)
    } else {
        Vec::new()
    };
    Ok(gen_with_pool(cfg, seed, split, index, &pool))
}

fn gen_with_pool(
    cfg: &SynthConfig,
    seed: u64,
    split: Split,
    index: usize,
    pool: &[SpeakerProfile],
) -> MixtureSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream(index));
    let profiles = draw_profiles(cfg, pool, &mut rng);
    let slots = cfg.num_slots();
    let symbols: Vec<Vec<usize>> = profiles
        .iter()
        .map(|_| (0..slots).map(|_| rng.gen_range(0..NUM_SYMBOLS)).collect())
        .collect();
    let max_steps = (cfg.max_onset * cfg.sample_rate as f64 / cfg.onset_grid as f64).floor() as usize;
    let mut shifts: Vec<usize> = profiles
        .iter()
        .map(|_| rng.gen_range(0..=max_steps) * cfg.onset_grid)
        .collect();
    let min = shifts.iter().copied().min().unwrap_or(0);
    shifts.iter_mut().for_each(|s| *s -= min);

    let raw: Vec<Vec<f64>> = profiles
        .iter()
        .zip(&symbols)
        .map(|(p, s)| p.render(s, cfg.slot_len(), cfg.sample_rate))
        .collect();
    let peak = shifted_sum(&raw, &shifts)
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = if peak > 0.0 { PEAK / peak } else { 1.0 };
    let refs: Vec<Vec<f64>> = raw
        .iter()
        .map(|r| r.iter().map(|&v| quantize_pcm(v * gain)).collect())
        .collect();
    let mixture = shifted_sum(&refs, &shifts);
    MixtureSample {
        id: format!("{}-{index:05}", split.name()),
        mixture,
        refs,
        symbols,
        onsets: shifts.iter().map(|&s| s as f64 / cfg.sample_rate as f64).collect(),
        profiles,
        sample_rate: cfg.sample_rate,
        duration: cfg.duration,
    }
}

pub fn gen_split(cfg: &SynthConfig, seed: u64, split: Split, n: usize) -> Result<Vec<MixtureSample>> {
    cfg.validate()?;
    let pool = if cfg.speaker_pool > 0 {
        pool_profiles(seed, cfg.speaker_pool)
    } else {
        Vec::new()
    };
    Ok((0..n).map(|i| gen_with_pool(cfg, seed, split, i, &pool)).collect())
}

/// One manifest line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub mixture_path: String,
    pub refs: Vec<String>,
    pub symbols: Vec<Vec<usize>>,
    pub onsets: Vec<f64>,
    pub sample_rate: u32,
    pub duration: f64,
    pub profiles: Vec<SpeakerProfile>,
}

pub fn manifest_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.jsonl", split.name()))
}

/// Write manifests and WAVs for both splits under `dir`.
pub fn gen_dataset(dir: &Path, cfg: &SynthConfig, seed: u64, n_train: usize, n_eval: usize) -> Result<()> {
    if n_train == 0 {
        return Err(Error::input("n_train must be at least 1"));
    }
    for (split, n) in [(Split::Train, n_train), (Split::Eval, n_eval)] {
        let samples = gen_split(cfg, seed, split, n)?;
        write_split(dir, split, &samples)?;
    }
    Ok(())
}

pub fn write_split(dir: &Path, split: Split, samples: &[MixtureSample]) -> Result<()> {
    let mut recs = Vec::with_capacity(samples.len());
    for s in samples {
        let mix_rel = format!("wav/{}/{}_mix.wav", split.name(), s.id);
        write_wav(&dir.join(&mix_rel), &s.mixture, s.sample_rate)?;
        let mut refs = Vec::new();
        for (j, r) in s.refs.iter().enumerate() {
            let rel = format!("wav/{}/{}_s{j}.wav", split.name(), s.id);
            write_wav(&dir.join(&rel), r, s.sample_rate)?;
            refs.push(rel);
        }
        recs.push(ManifestRecord {
            id: s.id.clone(),
            mixture_path: mix_rel,
            refs,
            symbols: s.symbols.clone(),
            onsets: s.onsets.clone(),
            sample_rate: s.sample_rate,
            duration: s.duration,
            profiles: s.profiles.clone(),
        });
    }
    write_jsonl(&manifest_path(dir, split), &recs)
}

pub fn load_split(dir: &Path, split: Split) -> Result<Vec<MixtureSample>> {
    let path = manifest_path(dir, split);
    if !path.exists() {
        return Err(Error::Missing(format!("manifest {}", path.display())));
    }
    let recs: Vec<ManifestRecord> = read_jsonl(&path)?;
    recs.into_iter()
        .map(|r| {
            let (mixture, _) = read_wav(&dir.join(&r.mixture_path))?;
            let refs = r
                .refs
                .iter()
                .map(|p| read_wav(&dir.join(p)).map(|(w, _)| w))
                .collect::<Result<Vec<_>>>()?;
            if refs.len() != r.symbols.len() || refs.len() != r.onsets.len() || refs.len() != r.profiles.len() {
                return Err(Error::Format {
                    path: path.clone(),
                    msg: format!("{}: per-speaker field lengths disagree", r.id),
                });
            }
            Ok(MixtureSample {
                id: r.id,
                mixture,
                refs,
                symbols: r.symbols,
                onsets: r.onsets,
                profiles: r.profiles,
                sample_rate: r.sample_rate,
                duration: r.duration,
            })
        })
        .collect()
}

/// Mixture waveform and SOT target built from per-speaker codec tokens.
pub fn make_training_pair(codec: &RvqCodec, sample: &MixtureSample, num_orders: usize) -> Result<(Vec<f64>, SotSequence)> {
    if num_orders == 0 || num_orders > codec.num_orders() {
        return Err(Error::input(format!(
            "model uses {num_orders} orders but the codec has {}",
            codec.num_orders()
        )));
    }
    if sample.sample_rate != codec.config.sample_rate {
        return Err(Error::input(format!(
            "sample rate {} differs from codec rate {}",
            sample.sample_rate, codec.config.sample_rate
        )));
    }
    let vocab = Vocab::new(codec.codebook_size());
    let mut grids = Vec::with_capacity(sample.num_speakers());
    for (r, &onset) in sample.refs.iter().zip(&sample.onsets) {
        let mut g = codec.encode(r)?;
        g.orders.truncate(num_orders);
        grids.push((g, onset));
    }
    let seq = build_sot(&grids, &vocab)?;
    Ok((sample.mixture.clone(), seq))
}

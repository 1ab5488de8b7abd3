//! Speaker-aware matched-filter symbol decoder.
//!
//! Per slot, each candidate symbol is scored by the weighted magnitude of the
//! slot's spectrum at the speaker's harmonics for that symbol, which makes the
//! score independent of phase. A slot is decodable only if the winning
//! template explains at least `min_fit` of the slot energy; interference from
//! another source therefore makes a slot undecodable rather than silently
//! attributing it to the target speaker.

use std::f64::consts::TAU;

use serde::{Deserialize, Serialize};

use super::{SpeakerProfile, NUM_HARMONICS, NUM_SYMBOLS};

/// Emitted for a non-silent slot that no template explains.
pub const UNKNOWN_SYMBOL: usize = usize::MAX;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OracleConfig {
    pub slot_len: usize,
    pub sample_rate: u32,
    /// Slots with RMS below this are silent and emit nothing.
    pub silence_rms: f64,
    /// Minimum fraction of slot energy the winning template must explain.
    pub min_fit: f64,
}

impl OracleConfig {
    pub fn new(slot_len: usize, sample_rate: u32) -> Self {
        Self {
            slot_len,
            sample_rate,
            silence_rms: 0.01,
            min_fit: 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SlotDecode {
    Silent,
    Unknown { fit: f64 },
    Symbol { symbol: usize, fit: f64 },
}

/// `|Σ x[n] e^{-iωn}|²` via a rotating phasor.
fn dft_power(x: &[f64], freq: f64, sample_rate: u32) -> f64 {
    let w = TAU * freq / sample_rate as f64;
    let (s, c) = w.sin_cos();
    let (mut pr, mut pi) = (1.0, 0.0);
    let (mut re, mut im) = (0.0, 0.0);
    for &v in x {
        re += v * pr;
        im -= v * pi;
        let nr = pr * c - pi * s;
        pi = pr * s + pi * c;
        pr = nr;
    }
    re * re + im * im
}

pub fn decode_slot(slot: &[f64], profile: &SpeakerProfile, cfg: &OracleConfig) -> SlotDecode {
    let energy: f64 = slot.iter().map(|v| v * v).sum();
    let n = slot.len() as f64;
    if (energy / n).sqrt() < cfg.silence_rms {
        return SlotDecode::Silent;
    }
    let mut best = (0, f64::NEG_INFINITY, 0.0);
    for sym in 0..NUM_SYMBOLS {
        let f = profile.symbol_frequency(sym);
        let mut score = 0.0;
        let mut explained = 0.0;
        for h in 0..NUM_HARMONICS {
            let p = dft_power(slot, (h + 1) as f64 * f, cfg.sample_rate);
            score += profile.harmonic_weights[h] * p.sqrt();
            explained += 2.0 * p / n;
        }
        if score > best.1 {
            best = (sym, score, explained);
        }
    }
    let fit = (best.2 / energy).min(1.0);
    if fit < cfg.min_fit {
        SlotDecode::Unknown { fit }
    } else {
        SlotDecode::Symbol { symbol: best.0, fit }
    }
}

/// Per-slot decisions from `t = 0`; a trailing partial slot is ignored.
pub fn decode_slots(wave: &[f64], profile: &SpeakerProfile, cfg: &OracleConfig) -> Vec<SlotDecode> {
    wave.chunks_exact(cfg.slot_len)
        .map(|s| decode_slot(s, profile, cfg))
        .collect()
}

/// Symbol stream: silent slots are dropped, undecodable ones become [`UNKNOWN_SYMBOL`].
pub fn decode_symbols(wave: &[f64], profile: &SpeakerProfile, cfg: &OracleConfig) -> Vec<usize> {
    decode_slots(wave, profile, cfg)
        .into_iter()
        .filter_map(|d| match d {
            SlotDecode::Silent => None,
            SlotDecode::Unknown { .. } => Some(UNKNOWN_SYMBOL),
            SlotDecode::Symbol { symbol, .. } => Some(symbol),
        })
        .collect()
}

//! Serialized-output sequences over multi-order token grids.
//!
//! Each order `i` of a sequence reads `SOS, r¹_i, SC, r²_i, …, EOS`, speakers
//! in first-in-first-out onset order. Because every order of one grid has
//! the same length, the special tokens sit at identical positions in all
//! orders.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::codec::TokenGrid;
use crate::error::{Error, Result};

/// Codec ids `0..|C|` followed by SOS, SC and EOS.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub codebook_size: usize,
}

impl Vocab {
    pub fn new(codebook_size: usize) -> Self {
        Self { codebook_size }
    }

    pub fn sos(&self) -> usize {
        self.codebook_size
    }

    pub fn sc(&self) -> usize {
        self.codebook_size + 1
    }

    pub fn eos(&self) -> usize {
        self.codebook_size + 2
    }

    pub fn size(&self) -> usize {
        self.codebook_size + 3
    }

    pub fn is_special(&self, t: usize) -> bool {
        t >= self.codebook_size
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotSequence {
    pub orders: Vec<Vec<usize>>,
    pub speaker_count: usize,
}

impl SotSequence {
    pub fn num_orders(&self) -> usize {
        self.orders.len()
    }

    pub fn len(&self) -> usize {
        self.orders.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Wrap raw model output; the speaker count is read off order 0.
    pub fn from_orders(orders: Vec<Vec<usize>>, vocab: &Vocab) -> Self {
        let sc = orders
            .first()
            .map_or(0, |o| o.iter().filter(|&&t| t == vocab.sc()).count());
        Self {
            orders,
            speaker_count: sc + 1,
        }
    }
}

/// Concatenate grids in ascending onset order; equal onsets keep input index order.
pub fn build_sot(grids: &[(TokenGrid, f64)], vocab: &Vocab) -> Result<SotSequence> {
    let Some((first, _)) = grids.first() else {
        return Err(Error::input("build_sot needs at least one speaker"));
    };
    let m = first.num_orders();
    for (j, (g, onset)) in grids.iter().enumerate() {
        if g.num_orders() != m {
            return Err(Error::input(format!(
                "speaker {j} has {} orders, speaker 0 has {m}",
                g.num_orders()
            )));
        }
        if g.frame_hop != first.frame_hop {
            return Err(Error::input(format!(
                "speaker {j} frame hop {} differs from {}",
                g.frame_hop, first.frame_hop
            )));
        }
        if !onset.is_finite() {
            return Err(Error::input(format!("speaker {j} onset is not finite")));
        }
        g.validate(vocab.codebook_size)?;
    }
    let mut idx: Vec<usize> = (0..grids.len()).collect();
    idx.sort_by(|&a, &b| grids[a].1.total_cmp(&grids[b].1).then(a.cmp(&b)));

    let total: usize = grids.iter().map(|(g, _)| g.len()).sum::<usize>() + grids.len() + 1;
    let mut orders = vec![Vec::with_capacity(total); m];
    for (i, out) in orders.iter_mut().enumerate() {
        out.push(vocab.sos());
        for (k, &j) in idx.iter().enumerate() {
            if k > 0 {
                out.push(vocab.sc());
            }
            out.extend_from_slice(&grids[j].0.orders[i]);
        }
        out.push(vocab.eos());
    }
    Ok(SotSequence {
        orders,
        speaker_count: grids.len(),
    })
}

/// Everything `split_sot` had to fix in a malformed sequence.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RepairReport {
    /// Orders that did not start with SOS.
    pub inserted_sos: usize,
    /// Orders without an EOS.
    pub inserted_eos: usize,
    /// Tokens after the first EOS, discarded.
    pub dropped_after_eos: usize,
    /// Positions filled with token 0 to match order 0's segment lengths.
    pub padded: usize,
    /// Positions cut to match order 0's segment lengths.
    pub truncated: usize,
    /// Stray special tokens inside a segment, replaced by token 0.
    pub replaced_specials: usize,
    pub empty_segments: usize,
    pub notes: Vec<String>,
}

impl RepairReport {
    pub fn is_clean(&self) -> bool {
        self.inserted_sos == 0
            && self.inserted_eos == 0
            && self.dropped_after_eos == 0
            && self.padded == 0
            && self.truncated == 0
            && self.replaced_specials == 0
            && self.empty_segments == 0
    }

    pub fn merge(&mut self, other: &RepairReport) {
        self.inserted_sos += other.inserted_sos;
        self.inserted_eos += other.inserted_eos;
        self.dropped_after_eos += other.dropped_after_eos;
        self.padded += other.padded;
        self.truncated += other.truncated;
        self.replaced_specials += other.replaced_specials;
        self.empty_segments += other.empty_segments;
        self.notes.extend(other.notes.iter().cloned());
    }
}

/// Body of one order: leading SOS stripped, cut at the first EOS.
fn body<'s>(order: &'s [usize], vocab: &Vocab, i: usize, rep: &mut RepairReport) -> &'s [usize] {
    let start = if order.first() == Some(&vocab.sos()) {
        1
    } else {
        rep.inserted_sos += 1;
        rep.notes.push(format!("order {i}: missing SOS, inserted"));
        0
    };
    let rest = &order[start..];
    match rest.iter().position(|&t| t == vocab.eos()) {
        Some(p) => {
            let dropped = rest.len() - p - 1;
            if dropped > 0 {
                rep.dropped_after_eos += dropped;
                rep.notes.push(format!("order {i}: {dropped} tokens after EOS dropped"));
            }
            &rest[..p]
        }
        None => {
            rep.inserted_eos += 1;
            rep.notes.push(format!("order {i}: missing EOS, inserted"));
            rest
        }
    }
}

fn segments(body: &[usize], vocab: &Vocab, i: usize, rep: &mut RepairReport) -> Vec<Vec<usize>> {
    body.split(|&t| t == vocab.sc())
        .map(|seg| {
            seg.iter()
                .map(|&t| {
                    if vocab.is_special(t) {
                        rep.replaced_specials += 1;
                        rep.notes.push(format!("order {i}: stray special {t} replaced by 0"));
                        0
                    } else {
                        t
                    }
                })
                .collect()
        })
        .collect()
}

/// Slice a sequence into per-speaker grids, repairing malformed predictions.
///
/// Order 0 decides the segment structure; other orders are split on their own
/// SC tokens and then padded with 0 or truncated to order 0's segment lengths.
pub fn split_sot(
    seq: &SotSequence,
    vocab: &Vocab,
    frame_hop: usize,
    sample_rate: u32,
) -> Result<(Vec<TokenGrid>, RepairReport)> {
    if seq.orders.is_empty() {
        return Err(Error::input("sequence has no orders"));
    }
    let mut rep = RepairReport::default();
    let b0 = body(&seq.orders[0], vocab, 0, &mut rep);
    let ref_segs = segments(b0, vocab, 0, &mut rep);
    let mut per_speaker: Vec<Vec<Vec<usize>>> = ref_segs.iter().map(|s| vec![s.clone()]).collect();

    for i in 1..seq.orders.len() {
        let bi = body(&seq.orders[i], vocab, i, &mut rep);
        let segs = segments(bi, vocab, i, &mut rep);
        if segs.len() != ref_segs.len() {
            rep.notes.push(format!(
                "order {i}: {} segments, order 0 has {}; aligned on order 0",
                segs.len(),
                ref_segs.len()
            ));
        }
        for (j, want) in ref_segs.iter().enumerate() {
            let mut s = segs.get(j).cloned().unwrap_or_default();
            if s.len() > want.len() {
                rep.truncated += s.len() - want.len();
                s.truncate(want.len());
            } else if s.len() < want.len() {
                rep.padded += want.len() - s.len();
                s.resize(want.len(), 0);
            }
            per_speaker[j].push(s);
        }
        for extra in segs.iter().skip(ref_segs.len()) {
            rep.truncated += extra.len();
        }
    }

    let mut grids = Vec::with_capacity(per_speaker.len());
    for (j, orders) in per_speaker.into_iter().enumerate() {
        if orders[0].is_empty() {
            rep.empty_segments += 1;
            let msg = format!("speaker {j}: empty segment");
            warn!("{msg}");
            rep.notes.push(msg);
        }
        grids.push(TokenGrid::new(orders, frame_hop, sample_rate)?);
    }
    Ok((grids, rep))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ViolationKind {
    NoOrders,
    MissingSos,
    MissingEos,
    TrailingAfterEos,
    EmptySegment,
    OrderLengthMismatch,
    SpecialMisaligned,
    StraySpecial,
    TokenOutOfRange,
    SpeakerCountMismatch,
}

impl fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ViolationKind::NoOrders => "no orders",
            ViolationKind::MissingSos => "missing SOS",
            ViolationKind::MissingEos => "missing EOS",
            ViolationKind::TrailingAfterEos => "tokens after EOS",
            ViolationKind::EmptySegment => "empty speaker segment",
            ViolationKind::OrderLengthMismatch => "order length mismatch",
            ViolationKind::SpecialMisaligned => "special token misaligned with order 0",
            ViolationKind::StraySpecial => "special token inside a segment",
            ViolationKind::TokenOutOfRange => "token out of vocabulary",
            ViolationKind::SpeakerCountMismatch => "speaker count mismatch",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub order: usize,
    pub position: usize,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "order {} position {}: {}", self.order, self.position, self.kind)
    }
}

/// Every invariant violation; an empty list means the sequence is valid.
pub fn validate_sot(seq: &SotSequence, vocab: &Vocab) -> Vec<Violation> {
    let mut out = Vec::new();
    let v = |order, position, kind| Violation { order, position, kind };
    let Some(o0) = seq.orders.first() else {
        out.push(v(0, 0, ViolationKind::NoOrders));
        return out;
    };
    for (i, o) in seq.orders.iter().enumerate() {
        if o.len() != o0.len() {
            out.push(v(i, o.len().min(o0.len()), ViolationKind::OrderLengthMismatch));
        }
        if o.first() != Some(&vocab.sos()) {
            out.push(v(i, 0, ViolationKind::MissingSos));
        }
        let eos = o.iter().position(|&t| t == vocab.eos());
        match eos {
            None => out.push(v(i, o.len(), ViolationKind::MissingEos)),
            Some(p) if p + 1 != o.len() => out.push(v(i, p + 1, ViolationKind::TrailingAfterEos)),
            _ => {}
        }
        let mut prev_boundary = true;
        for (p, &t) in o.iter().enumerate() {
            if t >= vocab.size() {
                out.push(v(i, p, ViolationKind::TokenOutOfRange));
            } else if t == vocab.sos() && p != 0 {
                out.push(v(i, p, ViolationKind::StraySpecial));
            }
            let boundary = t == vocab.sos() || t == vocab.sc() || t == vocab.eos();
            if (t == vocab.sc() || t == vocab.eos()) && prev_boundary && p > 0 {
                out.push(v(i, p, ViolationKind::EmptySegment));
            }
            prev_boundary = boundary;
            if i > 0 && p < o0.len() {
                let s0 = o0[p] == vocab.sc() || o0[p] == vocab.sos() || o0[p] == vocab.eos();
                if boundary != s0 || (boundary && t != o0[p]) {
                    out.push(v(i, p, ViolationKind::SpecialMisaligned));
                }
            }
        }
    }
    let sc = o0.iter().filter(|&&t| t == vocab.sc()).count();
    if sc + 1 != seq.speaker_count {
        out.push(v(0, 0, ViolationKind::SpeakerCountMismatch));
    }
    out
}

/// One line of a SOT JSONL file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SotRecord {
    pub id: String,
    pub orders: Vec<Vec<usize>>,
}

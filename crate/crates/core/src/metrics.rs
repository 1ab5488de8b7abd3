//! Edit-distance metrics, speaker assignment and evaluation reports.
//!
//! Corpus rates are pooled: total edit operations over total reference length.

use std::fmt;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::codec::{relative_error, RvqCodec, TokenGrid};
use crate::error::Result;
use crate::sot::RepairReport;
use crate::synth::{decode_symbols, MixtureSample, OracleConfig, SpeakerProfile};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl EditOps {
    pub fn total(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    pub fn add(&mut self, o: &EditOps) {
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }
}

/// Unit-cost Levenshtein distance from `reference` to `hypothesis`.
///
/// Insertions are hypothesis tokens with no reference counterpart, deletions
/// the reverse. The breakdown follows one optimal alignment, preferring
/// match/substitution, then deletion, then insertion while tracing back.
pub fn edit_distance<T: PartialEq>(reference: &[T], hypothesis: &[T]) -> (usize, EditOps) {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = EditOps::default();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let diff = usize::from(reference[i - 1] != hypothesis[j - 1]);
            if cur == d[(i - 1) * w + j - 1] + diff {
                ops.substitutions += diff;
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && cur == d[(i - 1) * w + j] + 1 {
            ops.deletions += 1;
            i -= 1;
        } else {
            ops.insertions += 1;
            j -= 1;
        }
    }
    (d[n * w + m], ops)
}

/// `1 − d / max(len)`; two empty streams are identical.
pub fn lps<T: PartialEq>(a: &[T], b: &[T]) -> f64 {
    let max = a.len().max(b.len());
    if max == 0 {
        return 1.0;
    }
    1.0 - edit_distance(a, b).0 as f64 / max as f64
}

/// Pooled error counts.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateCounts {
    pub ops: EditOps,
    pub reference_len: usize,
}

impl RateCounts {
    pub fn add(&mut self, other: &RateCounts) {
        self.ops.add(&other.ops);
        self.reference_len += other.reference_len;
    }

    pub fn push<T: PartialEq>(&mut self, reference: &[T], hypothesis: &[T]) {
        let (_, ops) = edit_distance(reference, hypothesis);
        self.ops.add(&ops);
        self.reference_len += reference.len();
    }

    /// Percent; zero reference length gives 0 when there are no errors, else infinity.
    pub fn percent(&self) -> f64 {
        if self.reference_len == 0 {
            if self.ops.total() == 0 {
                0.0
            } else {
                f64::INFINITY
            }
        } else {
            100.0 * self.ops.total() as f64 / self.reference_len as f64
        }
    }
}

/// Pooled order-0 token error of re-encoded outputs against reference grids,
/// paired by index. Empty references are skipped with a warning.
pub fn ter(codec: &RvqCodec, separated: &[Vec<f64>], references: &[TokenGrid]) -> Result<RateCounts> {
    let mut c = RateCounts::default();
    for (k, (wav, r)) in separated.iter().zip(references).enumerate() {
        if r.is_empty() {
            warn!("reference {k} has no tokens; excluded from TER");
            continue;
        }
        let hyp = if wav.is_empty() {
            Vec::new()
        } else {
            codec.reencode(wav)?.orders[0].clone()
        };
        c.push(&r.orders[0], &hyp);
    }
    Ok(c)
}

/// Pooled symbol error of `separated[k]` decoded with the profile paired to reference `k`.
pub fn ser(
    oracle: &OracleConfig,
    separated: &[Vec<f64>],
    references: &[(Vec<usize>, SpeakerProfile)],
) -> RateCounts {
    let mut c = RateCounts::default();
    for (wav, (syms, profile)) in separated.iter().zip(references) {
        c.push(syms, &decode_symbols(wav, profile, oracle));
    }
    c
}

/// `assignment[j]` is the output matched to reference `j`, if any.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Assignment {
    pub assignment: Vec<Option<usize>>,
    pub unmatched_outputs: Vec<usize>,
    pub cost: usize,
}

impl Assignment {
    pub fn is_identity(&self) -> bool {
        self.unmatched_outputs.is_empty()
            && self.assignment.iter().enumerate().all(|(j, a)| *a == Some(j))
    }
}

fn permutations(k: usize) -> Vec<Vec<usize>> {
    fn rec(cur: &mut Vec<usize>, used: &mut [bool], out: &mut Vec<Vec<usize>>) {
        if cur.len() == used.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..used.len() {
            if !used[i] {
                used[i] = true;
                cur.push(i);
                rec(cur, used, out);
                cur.pop();
                used[i] = false;
            }
        }
    }
    let mut out = Vec::new();
    rec(&mut Vec::new(), &mut vec![false; k], &mut out);
    out
}

/// Exhaustive minimum-cost matching; the lexicographically first optimum wins.
///
/// `pair(o, r)` is the cost of scoring output `o` against reference `r`,
/// `unmatched_output(o)` against an empty reference, `unmatched_ref(r)` the
/// cost of a reference with no output.
pub fn speaker_assignment(
    n_outputs: usize,
    n_refs: usize,
    pair: impl Fn(usize, usize) -> usize,
    unmatched_output: impl Fn(usize) -> usize,
    unmatched_ref: impl Fn(usize) -> usize,
) -> Assignment {
    let k = n_outputs.max(n_refs);
    let mut best: Option<(usize, Vec<usize>)> = None;
    for p in permutations(k) {
        // p[j] = output slot for reference slot j
        let cost: usize = p
            .iter()
            .enumerate()
            .map(|(j, &o)| match (o < n_outputs, j < n_refs) {
                (true, true) => pair(o, j),
                (true, false) => unmatched_output(o),
                (false, true) => unmatched_ref(j),
                (false, false) => 0,
            })
            .sum();
        if best.as_ref().is_none_or(|(c, _)| cost < *c) {
            best = Some((cost, p));
        }
    }
    let (cost, p) = best.unwrap_or((0, Vec::new()));
    let assignment = (0..n_refs)
        .map(|j| Some(p[j]).filter(|&o| o < n_outputs))
        .collect();
    let unmatched_outputs = (n_refs..k).map(|j| p[j]).filter(|&o| o < n_outputs).collect();
    Assignment {
        assignment,
        unmatched_outputs,
        cost,
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleReport {
    pub id: String,
    pub ter: f64,
    pub ser: f64,
    pub lps: f64,
    pub recon_l2: f64,
    pub ter_counts: RateCounts,
    pub ser_counts: RateCounts,
    pub ref_speakers: usize,
    pub out_speakers: usize,
    pub assignment: Vec<Option<usize>>,
    pub repairs: usize,
}

/// Score one sample's separated outputs against its references.
pub fn evaluate_sample(
    codec: &RvqCodec,
    oracle: &OracleConfig,
    sample: &MixtureSample,
    outputs: &[Vec<f64>],
    repair: Option<&RepairReport>,
) -> Result<SampleReport> {
    let nr = sample.num_speakers();
    let no = outputs.len();
    let decoded: Vec<Vec<Vec<usize>>> = outputs
        .iter()
        .map(|w| {
            sample
                .profiles
                .iter()
                .map(|p| decode_symbols(w, p, oracle))
                .collect()
        })
        .collect();
    let asg = speaker_assignment(
        no,
        nr,
        |o, r| edit_distance(&sample.symbols[r], &decoded[o][r]).0,
        // an output with no reference is scored through the closest profile
        |o| (0..nr).map(|r| decoded[o][r].len()).min().unwrap_or(0),
        |r| sample.symbols[r].len(),
    );
    if !asg.is_identity() {
        log::info!("{}: speaker assignment {:?}", sample.id, asg.assignment);
    }

    let mut ser_c = RateCounts::default();
    let mut ter_c = RateCounts::default();
    let mut lps_sum = 0.0;
    let mut recon_sum = 0.0;
    let empty: Vec<f64> = Vec::new();
    for r in 0..nr {
        let refs_grid = codec.encode(&sample.refs[r])?;
        let (wav, syms) = match asg.assignment[r] {
            Some(o) => (&outputs[o], decoded[o][r].clone()),
            None => (&empty, Vec::new()),
        };
        ser_c.push(&sample.symbols[r], &syms);
        lps_sum += lps(&sample.symbols[r], &syms);
        recon_sum += relative_error(&sample.refs[r], wav).min(1e6);
        let t = ter(codec, std::slice::from_ref(wav), std::slice::from_ref(&refs_grid))?;
        ter_c.add(&t);
    }
    for &o in &asg.unmatched_outputs {
        let closest = (0..nr).min_by_key(|&r| decoded[o][r].len()).unwrap_or(0);
        ser_c.ops.insertions += decoded[o].get(closest).map_or(0, Vec::len);
        if !outputs[o].is_empty() {
            ter_c.ops.insertions += codec.reencode(&outputs[o])?.len();
        }
    }
    Ok(SampleReport {
        id: sample.id.clone(),
        ter: ter_c.percent(),
        ser: ser_c.percent(),
        lps: if nr > 0 { lps_sum / nr as f64 } else { 1.0 },
        recon_l2: if nr > 0 { recon_sum / nr as f64 } else { 0.0 },
        ter_counts: ter_c,
        ser_counts: ser_c,
        ref_speakers: nr,
        out_speakers: no,
        assignment: asg.assignment,
        repairs: repair.map_or(0, |r| {
            r.inserted_sos
                + r.inserted_eos
                + r.padded
                + r.truncated
                + r.replaced_specials
                + r.empty_segments
                + r.dropped_after_eos
        }),
    })
}

/// Upper bound: each reference encoded and decoded with its first `k` orders.
pub fn roundtrip_reports(
    codec: &RvqCodec,
    oracle: &OracleConfig,
    samples: &[MixtureSample],
    k: usize,
) -> Result<Vec<SampleReport>> {
    samples
        .iter()
        .map(|s| {
            let outs = s
                .refs
                .iter()
                .map(|r| codec.decode(&codec.encode(r)?, k))
                .collect::<Result<Vec<_>>>()?;
            evaluate_sample(codec, oracle, s, &outs, None)
        })
        .collect()
}

/// Baseline: the unprocessed mixture offered once per reference speaker.
pub fn mixture_reports(codec: &RvqCodec, oracle: &OracleConfig, samples: &[MixtureSample]) -> Result<Vec<SampleReport>> {
    samples
        .iter()
        .map(|s| {
            let outs = vec![s.mixture.clone(); s.num_speakers()];
            evaluate_sample(codec, oracle, s, &outs, None)
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusMetrics {
    pub ter: f64,
    pub ser: f64,
    pub lps: f64,
    pub recon_l2: f64,
    pub speaker_count_accuracy: f64,
    pub samples: usize,
    pub repairs: usize,
}

impl CorpusMetrics {
    pub fn from_samples(samples: &[SampleReport]) -> Self {
        let mut ter = RateCounts::default();
        let mut ser = RateCounts::default();
        let (mut lps, mut recon, mut correct, mut repairs) = (0.0, 0.0, 0usize, 0usize);
        for s in samples {
            ter.add(&s.ter_counts);
            ser.add(&s.ser_counts);
            lps += s.lps;
            recon += s.recon_l2;
            correct += usize::from(s.ref_speakers == s.out_speakers);
            repairs += s.repairs;
        }
        let n = samples.len().max(1) as f64;
        Self {
            ter: ter.percent(),
            ser: ser.percent(),
            lps: lps / n,
            recon_l2: recon / n,
            speaker_count_accuracy: correct as f64 / n,
            samples: samples.len(),
            repairs,
        }
    }
}

/// Named corpus rows plus per-sample detail for the main system.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<(String, CorpusMetrics)>,
    pub per_sample: Vec<SampleReport>,
}

impl EvalReport {
    pub fn row(&self, name: &str) -> Option<&CorpusMetrics> {
        self.rows.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<20} {:>8} {:>8} {:>7} {:>9} {:>8}",
            "system", "SER%", "TER%", "LPS", "recon_l2", "spk_acc"
        )?;
        for (name, m) in &self.rows {
            writeln!(
                f,
                "{:<20} {:>8.2} {:>8.2} {:>7.4} {:>9.4} {:>8.3}",
                name, m.ser, m.ter, m.lps, m.recon_l2, m.speaker_count_accuracy
            )?;
        }
        Ok(())
    }
}

mod common;

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sotsep::sot::Vocab;
use sotsep::synth::{decode_symbols, gen_dataset, gen_sample, gen_split, load_split, make_training_pair, OracleConfig, Split, SynthConfig, MIN_F0_GAP};

fn small() -> SynthConfig {
    SynthConfig {
        duration: 0.5,
        max_onset: 0.25,
        ..Default::default()
    }
}

fn tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn same_seed_writes_byte_identical_datasets() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    gen_dataset(a.path(), &small(), 11, 6, 3).unwrap();
    gen_dataset(b.path(), &small(), 11, 6, 3).unwrap();
    gen_dataset(c.path(), &small(), 12, 6, 3).unwrap();
    let (ta, tb, tc) = (tree(a.path()), tree(b.path()), tree(c.path()));
    assert_eq!(ta.len(), 2 + 9 * 3);
    assert_eq!(ta, tb);
    assert_ne!(ta, tc);
}

#[test]
fn samples_do_not_depend_on_split_size() {
    let many = gen_split(&small(), 4, Split::Eval, 7).unwrap();
    assert_eq!(gen_sample(&small(), 4, Split::Eval, 5).unwrap(), many[5]);
    assert_ne!(gen_sample(&small(), 4, Split::Train, 5).unwrap(), many[5]);
}

#[test]
fn loaded_mixture_equals_sum_of_loaded_refs() {
    let d = tempfile::tempdir().unwrap();
    gen_dataset(d.path(), &small(), 2, 20, 1).unwrap();
    for s in load_split(d.path(), Split::Train).unwrap() {
        let sum = s.sum_of_refs();
        assert_eq!(s.mixture.len(), sum.len());
        let worst = s.mixture.iter().zip(&sum).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1e-6, "{}: {worst}", s.id);
        assert!(s.mixture.iter().all(|v| v.abs() <= 0.99), "{}", s.id);
    }
}

#[test]
fn speakers_keep_fundamentals_apart() {
    for (speakers, pool) in [(2, 0), (3, 0), (3, 4), (2, 2)] {
        let cfg = SynthConfig {
            speakers_per_mix: speakers,
            speaker_pool: pool,
            ..small()
        };
        for s in gen_split(&cfg, 8, Split::Train, 150).unwrap() {
            assert_eq!(s.num_speakers(), speakers);
            for i in 0..speakers {
                for j in i + 1..speakers {
                    let gap = (s.profiles[i].fundamental - s.profiles[j].fundamental).abs();
                    assert!(gap >= MIN_F0_GAP, "{} speakers {i},{j}: {gap}", s.id);
                }
            }
        }
    }
}

#[test]
fn symbol_count_tracks_duration_and_onsets_stay_on_grid() {
    for duration in [0.25, 0.5, 1.0, 2.0] {
        let cfg = SynthConfig {
            duration,
            max_onset: 0.5,
            ..Default::default()
        };
        for s in gen_split(&cfg, 1, Split::Eval, 10).unwrap() {
            for (sym, r) in s.symbols.iter().zip(&s.refs) {
                assert_eq!(sym.len(), (duration * 8.0) as usize);
                assert_eq!(r.len(), sym.len() * 1000);
            }
            assert!(s.onsets.contains(&0.0));
            for j in 0..s.num_speakers() {
                assert!(s.onsets[j] <= 0.5);
                assert_eq!(s.onset_samples(j) % 64, 0);
            }
        }
    }
}

#[test]
fn speaker_count_outside_one_to_three_rejected() {
    for n in [0, 4] {
        let cfg = SynthConfig {
            speakers_per_mix: n,
            ..small()
        };
        assert!(gen_split(&cfg, 0, Split::Train, 1).is_err());
    }
    let one = SynthConfig {
        speakers_per_mix: 1,
        ..small()
    };
    let s = gen_sample(&one, 0, Split::Train, 0).unwrap();
    assert_eq!(s.mixture, s.refs[0]);
    assert_eq!(s.onsets, vec![0.0]);
}

#[test]
fn oracle_recovers_clean_references_exactly() {
    for speakers in 1..=3 {
        let cfg = SynthConfig {
            speakers_per_mix: speakers,
            ..small()
        };
        let oc = OracleConfig::new(cfg.slot_len(), cfg.sample_rate);
        for s in gen_split(&cfg, 6, Split::Eval, 40).unwrap() {
            for j in 0..speakers {
                assert_eq!(decode_symbols(&s.refs[j], &s.profiles[j], &oc), s.symbols[j], "{} speaker {j}", s.id);
            }
        }
    }
}

#[test]
fn training_pairs_serialize_speakers_first_in_first_out() {
    let codec = common::tiny_codec();
    let vocab = Vocab::new(codec.codebook_size());
    for speakers in 1..=3 {
        let cfg = SynthConfig {
            speakers_per_mix: speakers,
            ..common::short_synth()
        };
        for s in gen_split(&cfg, 9, Split::Train, 20).unwrap() {
            let (mix, seq) = make_training_pair(&codec, &s, codec.num_orders()).unwrap();
            assert_eq!(mix, s.mixture);
            let grids: Vec<_> = s.refs.iter().map(|r| codec.encode(r).unwrap()).collect();
            let total: usize = grids.iter().map(|g| g.len()).sum();
            assert_eq!(seq.speaker_count, speakers);
            for o in &seq.orders {
                assert_eq!(o.len(), total + speakers + 1);
                assert_eq!(o.iter().filter(|&&t| t == vocab.sc()).count(), speakers - 1);
            }
            let mut order: Vec<usize> = (0..speakers).collect();
            order.sort_by(|&a, &b| s.onsets[a].partial_cmp(&s.onsets[b]).unwrap());
            let mut want = vec![vocab.sos()];
            for (n, &j) in order.iter().enumerate() {
                if n > 0 {
                    want.push(vocab.sc());
                }
                want.extend(&grids[j].orders[0]);
            }
            want.push(vocab.eos());
            assert_eq!(seq.orders[0], want, "{}", s.id);
        }
    }
}

#[test]
fn training_pair_checks_codec_compatibility() {
    let codec = common::tiny_codec();
    let s = gen_sample(&common::short_synth(), 0, Split::Train, 0).unwrap();
    assert!(make_training_pair(&codec, &s, 0).is_err());
    assert!(make_training_pair(&codec, &s, codec.num_orders() + 1).is_err());
    let (_, seq) = make_training_pair(&codec, &s, 1).unwrap();
    assert_eq!(seq.orders.len(), 1);
    let mut other = s.clone();
    other.sample_rate = 16000;
    assert!(make_training_pair(&codec, &other, 1).is_err());
}

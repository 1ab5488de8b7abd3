use proptest::prelude::*;
use sotsep::codec::TokenGrid;
use sotsep::jsonl::{read_jsonl, write_jsonl};
use sotsep::sot::{build_sot, split_sot, validate_sot, SotRecord, SotSequence, Vocab};

const HOP: usize = 64;
const SR: u32 = 8000;

/// (|C|, m, speakers as (per-order token lists, onset)).
fn speakers() -> impl Strategy<Value = (usize, usize, Vec<(Vec<Vec<usize>>, f64)>)> {
    (2usize..40, 1usize..6).prop_flat_map(|(c, m)| {
        let speaker = (0usize..=50).prop_flat_map(move |t| {
            (
                prop::collection::vec(prop::collection::vec(0..c, t), m),
                (0u32..8).prop_map(|k| k as f64 * 0.125),
            )
        });
        (Just(c), Just(m), prop::collection::vec(speaker, 1..=4))
    })
}

fn grids(spk: &[(Vec<Vec<usize>>, f64)]) -> Vec<(TokenGrid, f64)> {
    spk.iter()
        .map(|(o, t)| (TokenGrid::new(o.clone(), HOP, SR).unwrap(), *t))
        .collect()
}

/// Reference FIFO order computed without the library: stable sort on onset.
fn fifo(spk: &[(TokenGrid, f64)]) -> Vec<TokenGrid> {
    let mut idx: Vec<usize> = (0..spk.len()).collect();
    idx.sort_by(|&a, &b| spk[a].1.partial_cmp(&spk[b].1).unwrap());
    idx.into_iter().map(|j| spk[j].0.clone()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn split_inverts_build((c, m, spk) in speakers()) {
        let vocab = Vocab::new(c);
        let g = grids(&spk);
        let seq = build_sot(&g, &vocab).unwrap();
        let (back, rep) = split_sot(&seq, &vocab, HOP, SR).unwrap();
        let want = fifo(&g);
        prop_assert_eq!(&back, &want);
        prop_assert_eq!(back.len(), spk.len());
        prop_assert!(back.iter().all(|b| b.num_orders() == m));
        let empty = want.iter().filter(|w| w.is_empty()).count();
        prop_assert_eq!(rep.empty_segments, empty);
        prop_assert_eq!(rep.padded + rep.truncated + rep.inserted_sos + rep.inserted_eos + rep.replaced_specials, 0);
    }

    #[test]
    fn built_sequences_satisfy_invariants((c, m, spk) in speakers()) {
        let vocab = Vocab::new(c);
        let seq = build_sot(&grids(&spk), &vocab).unwrap();
        let n: usize = spk.iter().map(|(o, _)| o[0].len()).sum();
        prop_assert_eq!(seq.orders.len(), m);
        prop_assert_eq!(seq.speaker_count, spk.len());
        for o in &seq.orders {
            prop_assert_eq!(o.len(), n + spk.len() + 1);
            prop_assert_eq!(o[0], vocab.sos());
            prop_assert_eq!(*o.last().unwrap(), vocab.eos());
            prop_assert_eq!(o.iter().filter(|&&t| t == vocab.sc()).count(), spk.len() - 1);
            for (p, &t) in o.iter().enumerate() {
                prop_assert_eq!(vocab.is_special(t), vocab.is_special(seq.orders[0][p]));
            }
        }
        if spk.iter().all(|(o, _)| !o[0].is_empty()) {
            prop_assert!(validate_sot(&seq, &vocab).is_empty());
        }
    }

    #[test]
    fn input_order_irrelevant_for_distinct_onsets((c, _m, spk) in speakers(), rot in 0usize..4) {
        let vocab = Vocab::new(c);
        let mut distinct = spk.clone();
        for (j, s) in distinct.iter_mut().enumerate() {
            s.1 = j as f64 * 0.3 + (7 * j % 5) as f64;
        }
        let a = build_sot(&grids(&distinct), &vocab).unwrap();
        let k = rot % distinct.len();
        distinct.rotate_left(k);
        let b = build_sot(&grids(&distinct), &vocab).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn arbitrary_predictions_split_without_panicking(
        c in 2usize..20,
        raw in prop::collection::vec(prop::collection::vec(0usize..23, 0..40), 1..4),
    ) {
        let vocab = Vocab::new(c);
        let orders: Vec<Vec<usize>> = raw.iter().map(|o| o.iter().map(|&t| t % vocab.size()).collect()).collect();
        let seq = SotSequence::from_orders(orders, &vocab);
        let (out, _) = split_sot(&seq, &vocab, HOP, SR).unwrap();
        prop_assert!(!out.is_empty());
        for g in &out {
            prop_assert_eq!(g.num_orders(), seq.orders.len());
            prop_assert!(g.orders.iter().flatten().all(|&t| t < c));
        }
        let sc0 = {
            let o = &seq.orders[0];
            let start = usize::from(o.first() == Some(&vocab.sos()));
            let end = o.iter().position(|&t| t == vocab.eos()).unwrap_or(o.len()).max(start);
            o[start..end].iter().filter(|&&t| t == vocab.sc()).count()
        };
        prop_assert_eq!(out.len(), sc0 + 1);
    }
}

#[test]
fn speaker_count_comes_from_separators() {
    let vocab = Vocab::new(10);
    let (sos, sc, eos) = (vocab.sos(), vocab.sc(), vocab.eos());
    for n in 1..=5 {
        let mut o = vec![sos];
        for j in 0..n {
            if j > 0 {
                o.push(sc);
            }
            o.extend([j, j]);
        }
        o.push(eos);
        let seq = SotSequence::from_orders(vec![o.clone(), o], &vocab);
        let (g, rep) = split_sot(&seq, &vocab, HOP, SR).unwrap();
        assert_eq!(g.len(), n);
        assert!(rep.is_clean());
    }
}

#[test]
fn validation_flags_empty_first_segment_and_length_mismatch() {
    let vocab = Vocab::new(10);
    let (sos, sc, eos) = (vocab.sos(), vocab.sc(), vocab.eos());
    let seq = SotSequence::from_orders(vec![vec![sos, sc, 2, eos], vec![sos, sc, 2, eos]], &vocab);
    let v = validate_sot(&seq, &vocab);
    assert!(v.iter().any(|x| x.position == 1 && x.to_string().contains("empty speaker segment")));
    let seq = SotSequence::from_orders(vec![vec![sos, 1, eos], vec![sos, 1, 1, eos]], &vocab);
    assert!(validate_sot(&seq, &vocab).iter().any(|x| x.to_string().contains("order length mismatch")));
}

#[test]
fn sot_records_roundtrip_through_jsonl() {
    let vocab = Vocab::new(6);
    let g = |o: Vec<Vec<usize>>| TokenGrid::new(o, HOP, SR).unwrap();
    let seq = build_sot(&[(g(vec![vec![1, 2], vec![3, 4]]), 0.2), (g(vec![vec![5], vec![0]]), 0.0)], &vocab).unwrap();
    let rec = SotRecord {
        id: "m0".into(),
        orders: seq.orders.clone(),
    };
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("sot.jsonl");
    write_jsonl(&p, std::slice::from_ref(&rec)).unwrap();
    let text = std::fs::read_to_string(&p).unwrap();
    assert_eq!(text.trim(), r#"{"id":"m0","orders":[[6,5,7,1,2,8],[6,0,7,3,4,8]]}"#);
    assert_eq!(read_jsonl::<SotRecord>(&p).unwrap(), vec![rec]);
}

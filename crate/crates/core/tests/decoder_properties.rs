mod common;

use common::max_abs_diff;
use pds::decoder::{Decoder, DecoderConfig, TokenBatch, BOS, EOS, FIRST_TOKEN};
use pds::numerics::param::uniform;
use pds::numerics::{Backend, Eval, ParamStore};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const VOCAB: usize = 12;

fn setup(seed: u64, memory_dim: usize, layers: usize) -> (ParamStore, Decoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let mut cfg = DecoderConfig::new(8, 2, 16, VOCAB);
    cfg.num_layers = layers;
    let dec = Decoder::new(cfg, memory_dim, &mut store, &mut rng).unwrap();
    (store, dec)
}

fn random_tokens(lengths: &[usize], rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    lengths
        .iter()
        .map(|&n| {
            (0..n)
                .map(|_| rng.random_range(FIRST_TOKEN..VOCAB))
                .collect()
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn cross_attention_rows_are_distributions_over_valid_memory(
        seed in 0u64..500,
        mem_lengths in proptest::collection::vec(1usize..20, 1..4),
        layers in 1usize..3,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, dec) = setup(seed, 10, layers);
        let b = mem_lengths.len();
        let tm = *mem_lengths.iter().max().unwrap();
        let memory = uniform(&[b, tm, 10], 1.0, &mut rng);
        let tgt_lengths: Vec<usize> = (0..b).map(|_| rng.random_range(1..7)).collect();
        let inputs = TokenBatch::from_sequences(&random_tokens(&tgt_lengths, &mut rng)).unwrap();
        let mut e = Eval::new(&store);
        let m = e.constant(memory);
        let out = dec.forward(&mut e, &m, &mem_lengths, &inputs, true).unwrap();
        let w = out.cross_attention.unwrap();
        let &[l, wb, h, tt, wm] = w.shape() else { panic!("rank") };
        prop_assert_eq!((l, wb, h, tt, wm), (layers, b, 2, inputs.time, tm));
        for li in 0..l {
            for bi in 0..b {
                let mut mass = 0.0;
                for hi in 0..h {
                    for t in 0..tgt_lengths[bi] {
                        let row = &w.data()[(((li * b + bi) * h + hi) * tt + t) * tm..][..tm];
                        let s: f64 = row.iter().sum();
                        prop_assert!((s - 1.0).abs() < 1e-12);
                        prop_assert!(row[mem_lengths[bi]..].iter().all(|&v| v == 0.0));
                        mass += s;
                    }
                }
                // head-averaged mass over every encoder position equals the target count
                prop_assert!((mass / h as f64 - tgt_lengths[bi] as f64).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn logits_ignore_future_tokens(seed in 0u64..500, len in 2usize..9, cut in 0usize..8) {
        let cut = cut % (len - 1);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, dec) = setup(seed, 8, 2);
        let memory = uniform(&[1, 7, 8], 1.0, &mut rng);
        let seq = random_tokens(&[len], &mut rng).remove(0);
        let mut permuted = seq.clone();
        permuted[cut + 1..].reverse();
        permuted[cut + 1..].iter_mut().for_each(|t| *t = FIRST_TOKEN + (*t + 1 - FIRST_TOKEN) % (VOCAB - FIRST_TOKEN));
        let logits = |s: &Vec<usize>| {
            let mut e = Eval::new(&store);
            let m = e.constant(memory.clone());
            let inputs = TokenBatch::from_sequences(std::slice::from_ref(s)).unwrap();
            dec.forward(&mut e, &m, &[7], &inputs, false).unwrap().logits.into_owned()
        };
        let (a, b) = (logits(&seq), logits(&permuted));
        let n = (cut + 1) * VOCAB;
        prop_assert!(max_abs_diff(&a.data()[..n], &b.data()[..n]) == 0.0);
    }
}

#[test]
fn greedy_decoding_terminates_and_repeats() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (store, dec) = setup(4, 8, 2);
    let memory = uniform(&[3, 5, 8], 1.0, &mut rng);
    let a = dec.greedy_decode(&store, &memory, &[5, 3, 1], 6).unwrap();
    let b = dec.greedy_decode(&store, &memory, &[5, 3, 1], 6).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), 3);
    for s in &a {
        assert!(s.len() <= 6);
        assert!(!s.contains(&EOS) && !s.contains(&BOS));
    }
}

#[test]
fn empty_targets_are_rejected() {
    assert!(matches!(
        TokenBatch::from_sequences(&[vec![]]),
        Err(pds::PdsError::Config(_))
    ));
    assert!(TokenBatch::from_sequences(&[]).is_err());
}

#[test]
fn teacher_forcing_shifts_by_one() {
    let (inp, tgt) = TokenBatch::teacher_forcing(&[vec![5, 6], vec![7]]).unwrap();
    assert_eq!(inp.ids, vec![BOS, 5, 6, BOS, 7, 0]);
    assert_eq!(tgt.ids, vec![5, 6, EOS, 7, EOS, 0]);
    assert_eq!(inp.lengths, vec![3, 2]);
}

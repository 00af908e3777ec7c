use proptest::prelude::*;
use qmoe::bitwise::{binarize, bitwise_affine, hamming, popcount_linear, popcount_words, BitVector};
use qmoe::tensor::Rng;

fn bits_of(mask: u64, d: usize) -> Vec<bool> {
    (0..d).map(|i| mask >> i & 1 == 1).collect()
}

fn pm_dot(a: &[bool], b: &[bool]) -> i64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| if x == y { 1 } else { -1 })
        .sum()
}

fn random_bits(rng: &mut Rng, d: usize) -> Vec<bool> {
    (0..d).map(|_| rng.below(2) == 1).collect()
}

#[test]
fn popcount_identity_exhaustive_up_to_12_bits() {
    for d in 1..=12usize {
        let all: Vec<(Vec<bool>, BitVector)> = (0..1u64 << d)
            .map(|m| {
                let b = bits_of(m, d);
                let v = BitVector::from_bits(&b);
                (b, v)
            })
            .collect();
        for (xb, xv) in &all {
            for (wb, wv) in &all {
                let got = popcount_linear(xv, wv).unwrap();
                let want = -(pm_dot(xb, wb) as f32) / 2.0;
                assert_eq!(got, want, "d={d}");
            }
        }
    }
}

#[test]
fn popcount_identity_on_word_boundaries() {
    let mut rng = Rng::new(21);
    for d in [63usize, 64, 65, 1024] {
        for _ in 0..1000 {
            let (xb, wb) = (random_bits(&mut rng, d), random_bits(&mut rng, d));
            let got = popcount_linear(&BitVector::from_bits(&xb), &BitVector::from_bits(&wb)).unwrap();
            assert_eq!(got, -(pm_dot(&xb, &wb) as f32) / 2.0, "d={d}");
        }
    }
}

#[test]
fn complement_flips_the_sign() {
    let mut rng = Rng::new(22);
    for d in [1usize, 7, 64, 65, 200] {
        for _ in 0..50 {
            let x = BitVector::from_bits(&random_bits(&mut rng, d));
            let w = BitVector::from_bits(&random_bits(&mut rng, d));
            assert_eq!(popcount_linear(&x.complement(), &w).unwrap(), -popcount_linear(&x, &w).unwrap());
            assert_eq!(hamming(&x, &x).unwrap(), 0);
            assert_eq!(hamming(&x, &x.complement()).unwrap(), d as u32);
        }
    }
}

#[test]
fn length_mismatch_is_rejected() {
    let a = BitVector::zeros(10);
    let b = BitVector::zeros(11);
    assert!(popcount_linear(&a, &b).is_err());
    assert!(bitwise_affine(&a, &[a.clone()], &[]).is_err());
}

#[test]
fn affine_adds_bias_per_row() {
    let x = binarize(&[0.9, -0.2, 0.3, 0.0], 0.05);
    let rows = vec![x.clone(), x.complement()];
    let y = bitwise_affine(&x, &rows, &[1.0, -1.0]).unwrap();
    assert_eq!(y, vec![1.0 - 2.0, -1.0 + 2.0]);
}

#[test]
fn popcount_word_counts_by_hand() {
    assert_eq!(popcount_words(64, 1), 1);
    assert_eq!(popcount_words(65, 1), 2);
    assert_eq!(popcount_words(1024, 640), 16 * 640);
    assert_eq!(popcount_words(640, 320), 10 * 320);
    assert_eq!(popcount_words(1, 3), 3);
}

proptest! {
    #[test]
    fn prop_bytes_round_trip(bits in prop::collection::vec(any::<bool>(), 0..300)) {
        let v = BitVector::from_bits(&bits);
        let back = BitVector::from_bytes(bits.len(), &v.to_bytes()).unwrap();
        prop_assert_eq!(&back, &v);
        prop_assert_eq!(v.count_ones() as usize, bits.iter().filter(|b| **b).count());
    }

    #[test]
    fn prop_identity_random_lengths(x in prop::collection::vec(any::<bool>(), 1..400), seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let w = random_bits(&mut rng, x.len());
        let got = popcount_linear(&BitVector::from_bits(&x), &BitVector::from_bits(&w)).unwrap();
        prop_assert_eq!(got, -(pm_dot(&x, &w) as f32) / 2.0);
    }

    #[test]
    fn prop_binarize_is_strict(x in prop::collection::vec(-1.0f32..1.0, 1..100), t in -0.5f32..0.5) {
        let v = binarize(&x, t);
        for (i, &xi) in x.iter().enumerate() {
            prop_assert_eq!(v.get(i), xi > t);
        }
    }
}

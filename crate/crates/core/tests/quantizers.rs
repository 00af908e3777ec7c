use proptest::prelude::*;
use qmoe::quant::{
    model_size_report, packed_len, quantize_bitlinear, quantize_sign, quantize_ternary, Bits, PackedWeights, QuantScheme,
    QuantizedLayer,
};
use qmoe::tensor::{Matrix, Rng};

fn random_matrix(rng: &mut Rng, rows: usize, cols: usize, amp: f32) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.uniform_range(-amp, amp)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

// Reference quantizer in f64, written from the formula only.
fn reference_codes(w: &[f32], k: u8) -> (Vec<i64>, f64, f64) {
    let mu = w.iter().map(|&v| v as f64).sum::<f64>() / w.len() as f64;
    let qmax = (1i64 << (k - 1)) - 1;
    let spread = w.iter().map(|&v| (v as f64 - mu).abs()).fold(0.0, f64::max);
    let s = spread / qmax as f64;
    let codes = w
        .iter()
        .map(|&v| {
            let x = (v as f64 - mu) / s;
            let r = x.signum() * (x.abs() + 0.5).floor();
            (r as i64).clamp(-qmax - 1, qmax)
        })
        .collect();
    (codes, s, mu)
}

#[test]
fn round_trip_error_is_within_half_a_step() {
    let mut rng = Rng::new(11);
    for k in [2u8, 4, 8, 16] {
        let bits = Bits::new(k).unwrap();
        for _ in 0..250 {
            let (r, c) = (1 + rng.below(12), 1 + rng.below(12));
            let amp = 0.1 + rng.uniform_f32() * 3.0;
            let w = random_matrix(&mut rng, r, c, amp);
            let q = quantize_bitlinear(&w, bits).unwrap();
            let s = q.scale as f64;
            for (&v, &code) in w.as_slice().iter().zip(&q.codes) {
                let back = code as f64 * s + q.mean as f64;
                assert!((v as f64 - back).abs() <= s / 2.0 + 1e-6, "k={k} v={v} back={back} s={s}");
            }
        }
    }
}

#[test]
fn codes_match_reference_quantizer() {
    let mut rng = Rng::new(12);
    for k in [2u8, 4, 8] {
        for _ in 0..50 {
            let w = random_matrix(&mut rng, 4, 9, 1.5);
            let q = quantize_bitlinear(&w, Bits::new(k).unwrap()).unwrap();
            let (codes, s, mu) = reference_codes(w.as_slice(), k);
            assert!((q.scale as f64 - s).abs() <= s * 1e-6);
            assert!((q.mean as f64 - mu).abs() <= 1e-6);
            let mismatches = q.codes.iter().zip(&codes).filter(|(a, b)| **a as i64 != **b).count();
            // f32 storage of s can move values sitting exactly on a half step.
            assert!(mismatches <= 1, "k={k}: {mismatches} codes differ");
        }
    }
}

#[test]
fn stored_layer_dequantizes_like_the_codes() {
    let mut rng = Rng::new(13);
    let w = random_matrix(&mut rng, 6, 10, 0.8);
    for k in [2u8, 4, 8, 16] {
        let layer = QuantizedLayer::bitlinear(&w, Bits::new(k).unwrap(), vec![0.0; 6]).unwrap();
        let q = quantize_bitlinear(&w, Bits::new(k).unwrap()).unwrap();
        let back = layer.dequantize().unwrap();
        for (d, &c) in back.as_slice().iter().zip(&q.codes) {
            assert!((*d as f64 - (c as f64 * q.scale as f64 + q.mean as f64)).abs() < 1e-5);
        }
    }
}

#[test]
fn pack_unpack_is_exact_for_every_width_and_length() {
    let mut rng = Rng::new(14);
    for bits in [1u8, 2, 4, 8, 16] {
        for n in 1..=257 {
            let codes: Vec<i32> = if bits == 1 {
                (0..n).map(|_| if rng.below(2) == 0 { -1 } else { 1 }).collect()
            } else {
                let span = 1usize << bits;
                let lo = -(1i32 << (bits - 1));
                (0..n).map(|_| lo + rng.below(span) as i32).collect()
            };
            let p = PackedWeights::pack(&codes, bits).unwrap();
            assert_eq!(p.payload().len(), packed_len(n, bits));
            assert_eq!(p.unpack().unwrap(), codes, "bits={bits} n={n}");
        }
    }
}

#[test]
fn packing_boundary_codes() {
    for bits in [2u8, 4, 8, 16] {
        let lo = -(1i32 << (bits - 1));
        let hi = (1i32 << (bits - 1)) - 1;
        let codes = vec![lo, hi, 0, -1, 1, lo, hi];
        assert_eq!(PackedWeights::pack(&codes, bits).unwrap().unpack().unwrap(), codes);
        assert!(PackedWeights::pack(&[hi + 1], bits).is_err());
        assert!(PackedWeights::pack(&[lo - 1], bits).is_err());
    }
    assert!(PackedWeights::pack(&[0], 1).is_err());
    assert!(PackedWeights::pack(&[0], 3).is_err());
}

#[test]
fn sign_and_ternary_follow_their_definitions() {
    let w = Matrix::from_vec(1, 6, vec![-0.4, 0.0, 0.2, -0.05, 0.05, 0.9]).unwrap();
    let (codes, s) = quantize_sign(&w).unwrap();
    assert_eq!(codes, vec![-1, 1, 1, -1, 1, 1]);
    assert!((s - 1.6 / 6.0).abs() < 1e-6);
    assert_eq!(quantize_ternary(&w, 0.05).unwrap(), vec![-1, 0, 1, 0, 0, 1]);
    assert_eq!(quantize_ternary(&w, 0.0).unwrap(), vec![-1, 0, 1, -1, 1, 1]);
    assert!(quantize_ternary(&w, -1.0).is_err());
}

fn layout(scheme: QuantScheme, head: QuantScheme, dims: &[usize], seed: u64) -> Vec<QuantizedLayer> {
    let mut rng = Rng::new(seed);
    dims.windows(2)
        .enumerate()
        .map(|(i, d)| {
            let w = random_matrix(&mut rng, d[1], d[0], 0.1);
            let s = if i + 2 == dims.len() { head } else { scheme };
            match s {
                QuantScheme::Float32 => QuantizedLayer::float32(&w, vec![0.0; d[1]]),
                QuantScheme::BitLinear(k) => QuantizedLayer::bitlinear(&w, k, vec![0.0; d[1]]),
                QuantScheme::Ternary => QuantizedLayer::ternary(&w, 0.05, vec![0.1; d[1]], vec![0.0; d[1]]),
                QuantScheme::BitwiseBinary => unreachable!(),
            }
            .unwrap()
        })
        .collect()
}

#[test]
fn size_shrinks_monotonically_with_bit_width() {
    let dims = [64, 48, 10];
    let mut last = usize::MAX;
    for k in [16u8, 8, 4, 2] {
        let s = QuantScheme::bitlinear(k).unwrap();
        let bytes = model_size_report(&layout(s, s, &dims, 3)).total_bytes;
        assert!(bytes < last, "{k}-bit: {bytes} >= {last}");
        last = bytes;
    }
    let fp32 = model_size_report(&layout(QuantScheme::Float32, QuantScheme::Float32, &dims, 3));
    assert!(fp32.total_bytes > model_size_report(&layout(QuantScheme::bitlinear(16).unwrap(), QuantScheme::bitlinear(16).unwrap(), &dims, 3)).total_bytes);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn prop_codes_stay_in_range(values in prop::collection::vec(-100.0f32..100.0, 1..200), k in prop::sample::select(vec![2u8, 4, 8, 16])) {
        let w = Matrix::from_vec(1, values.len(), values).unwrap();
        let bits = Bits::new(k).unwrap();
        let q = quantize_bitlinear(&w, bits).unwrap();
        prop_assert!(q.codes.iter().all(|&c| c >= bits.qmin() && c <= bits.qmax()));
        prop_assert!(q.scale > 0.0);
    }

    #[test]
    fn prop_pack_round_trip(raw in prop::collection::vec(any::<u16>(), 1..300), k in prop::sample::select(vec![2u8, 4, 8, 16])) {
        let span = 1u32 << k;
        let codes: Vec<i32> = raw.iter().map(|&r| (r as u32 % span) as i32 - (1 << (k - 1))).collect();
        let p = PackedWeights::pack(&codes, k).unwrap();
        prop_assert_eq!(p.unpack().unwrap(), codes);
    }

    #[test]
    fn prop_shift_invariance(values in prop::collection::vec(-4.0f32..4.0, 2..64), shift in -2.0f32..2.0) {
        // Centring makes the codes independent of a constant offset, up to
        // ties moved by float rounding.
        let a = Matrix::from_vec(1, values.len(), values.clone()).unwrap();
        let b = Matrix::from_vec(1, values.len(), values.iter().map(|v| v + shift).collect()).unwrap();
        let k = Bits::new(4).unwrap();
        let (qa, qb) = (quantize_bitlinear(&a, k).unwrap(), quantize_bitlinear(&b, k).unwrap());
        let differ = qa.codes.iter().zip(&qb.codes).filter(|(x, y)| (**x - **y).abs() > 0).count();
        prop_assert!(qa.codes.iter().zip(&qb.codes).all(|(x, y)| (x - y).abs() <= 1));
        prop_assert!(differ <= values.len() / 4 + 1);
    }
}

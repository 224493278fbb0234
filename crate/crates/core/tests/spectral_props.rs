use nfm_core::spectral::{half_len, rfft, irfft, naive_dft, Complex, Spectrum};
use nfm_core::NfmError;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn full_energy(spec: &Spectrum) -> f64 {
    // Interior bins appear twice in the full spectrum.
    let n = spec.n_time();
    (0..spec.n_bins())
        .map(|k| {
            let w = if k == 0 || (n % 2 == 0 && k == n / 2) { 1.0 } else { 2.0 };
            w * spec.get(k, 0).norm_sqr()
        })
        .sum()
}

#[test]
fn matches_direct_dft_for_every_length() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for n in 1..=128 {
        for _ in 0..20 {
            let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
            let fast = rfft(&x).unwrap();
            let slow = naive_dft(&x).unwrap();
            let scale = slow.iter().map(|c| c.norm()).fold(1.0, f64::max);
            for k in 0..half_len(n) {
                let err = (fast.get(k, 0) - slow[k]).norm() / scale;
                assert!(err < 1e-10, "N={n} k={k} err={err:e}");
            }
            let back = irfft(&fast).unwrap();
            let err = back.iter().zip(&x).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-10, "roundtrip N={n} err={err:e}");
        }
    }
}

#[test]
fn spec_examples() {
    let s = rfft(&[0.0, 1.0, 0.0, 1.0]).unwrap();
    assert_eq!(s.data(), &[Complex::new(2.0, 0.0), Complex::new(0.0, 0.0), Complex::new(-2.0, 0.0)]);
    let d = naive_dft(&[1.0, 2.0]).unwrap();
    assert!((d[0] - Complex::new(3.0, 0.0)).norm() < 1e-15);
    assert!((d[1] - Complex::new(-1.0, 0.0)).norm() < 1e-15);
    let back = irfft(&Spectrum::new(
        vec![Complex::new(2.0, 0.0), Complex::new(0.0, 0.0), Complex::new(-2.0, 0.0)],
        1,
        4,
    )
    .unwrap())
    .unwrap();
    assert!(back.iter().zip([0.0, 1.0, 0.0, 1.0]).all(|(a, b)| (a - b).abs() < 1e-15));
}

#[test]
fn rejects_empty_and_imaginary_dc() {
    assert!(matches!(rfft(&[]), Err(NfmError::EmptySequence)));
    let bad = Spectrum::new(vec![Complex::new(1.0, 0.5), Complex::new(0.0, 0.0)], 1, 2).unwrap();
    let msg = irfft(&bad).unwrap_err().to_string();
    assert!(msg.contains("non-realizable spectrum"), "{msg}");
}

fn signal() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-10.0f64..10.0, 1..200)
}

proptest! {
    #[test]
    fn parseval(x in signal()) {
        let s = rfft(&x).unwrap();
        let time: f64 = x.iter().map(|v| v * v).sum();
        let freq = full_energy(&s) / x.len() as f64;
        prop_assert!((time - freq).abs() <= 1e-9 * time.max(1e-300));
    }

    #[test]
    fn linearity(pair in (1usize..150).prop_flat_map(|n| (
        prop::collection::vec(-5.0f64..5.0, n),
        prop::collection::vec(-5.0f64..5.0, n),
        -3.0f64..3.0,
        -3.0f64..3.0,
    ))) {
        let (x, y, a, b) = pair;
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let (sx, sy, sm) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&mix).unwrap());
        for k in 0..sm.n_bins() {
            let expect = sx.get(k, 0) * a + sy.get(k, 0) * b;
            prop_assert!((sm.get(k, 0) - expect).norm() < 1e-10 * (1.0 + expect.norm()));
        }
    }

    #[test]
    fn roundtrip_and_real_edges(x in signal()) {
        let s = rfft(&x).unwrap();
        prop_assert_eq!(s.get(0, 0).im, 0.0);
        if x.len() % 2 == 0 {
            prop_assert_eq!(s.get(x.len() / 2, 0).im, 0.0);
        }
        let back = irfft(&s).unwrap();
        for (a, b) in back.iter().zip(&x) {
            prop_assert!((a - b).abs() < 1e-10 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn bit_stable(x in signal()) {
        prop_assert_eq!(rfft(&x).unwrap(), rfft(&x).unwrap());
    }
}

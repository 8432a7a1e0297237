//! Randomized invariants of the tensor engine, layers and STFT.

use cospa_core::clayers::{bounded_mask_value, conv_geom, CFc};
use cospa_core::ctensor::{finite_diff_check, CTensor, ParamKind, ParamStore, Tape};
use cospa_core::stft::{FrameSpec, Stft};
use cospa_core::C64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn cvec(n: usize) -> impl Strategy<Value = Vec<C64>> {
    prop::collection::vec((-2.0f64..2.0, -2.0f64..2.0).prop_map(|(a, b)| C64::new(a, b)), n)
}

fn two_params(rows: usize, cols: usize, a: Vec<C64>, b: Vec<C64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.insert("a", ParamKind::Trainable, CTensor::new(vec![rows, cols], a).unwrap()).unwrap();
    s.insert("b", ParamKind::Trainable, CTensor::new(vec![rows, cols], b).unwrap()).unwrap();
    s
}

fn shape_and_data() -> impl Strategy<Value = (usize, usize, Vec<C64>, Vec<C64>, Vec<C64>)> {
    (1usize..=8, 1usize..=8).prop_flat_map(|(r, c)| (Just(r), Just(c), cvec(r * c), cvec(r * c), cvec(r * c)))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn primitive_ops_pass_finite_differences((r, c, a, b, w) in shape_and_data()) {
        let mut s = two_params(r, c, a, b);
        // weights for a real readout that touches every element
        let err = finite_diff_check(&mut s, 1e-6, |t| {
            let a = t.param_by_name("a")?;
            let b = t.param_by_name("b")?;
            let wv = t.constant_from(vec![r, c], w.clone())?;
            let sum = t.add(a, b)?;
            let prod = t.mul(sum, wv)?;
            let had = t.mul(prod, b)?;
            let cj = t.conj(had);
            let both = t.concat(&[cj, a])?;
            let part = t.slice_cols(both, 1, c)?;
            let mag = t.abs(part);
            let mixed = t.mul(mag, a)?;
            Ok(t.sum_abs_sq(mixed))
        }).unwrap();
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn matmul_passes_finite_differences(n_in in 1usize..=8, n_out in 1usize..=8, batch in 1usize..=4, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut s = ParamStore::new();
        let fc = CFc::new(&mut s, &mut rng, "fc", n_in, n_out).unwrap();
        let x: Vec<C64> = (0..batch * n_in).map(|i| C64::new((i as f64).sin(), (i as f64 * 0.7).cos())).collect();
        let err = finite_diff_check(&mut s, 1e-6, |t| {
            let xv = t.constant_from(vec![batch, n_in], x.clone())?;
            let y = fc.forward(t, xv)?;
            let re = t.scale(y, C64::new(0.3, -1.1));
            let sq = t.sum_abs_sq(re);
            let lin = t.sum(y);
            let lin_re = t.scale_shift(lin, C64::new(1.0, 0.0), C64::new(0.0, 0.0));
            let cj = t.conj(lin_re);
            let l = t.add(lin_re, cj)?;
            t.add(sq, l)
        }).unwrap();
        prop_assert!(err < 1e-5, "relative error {}", err);
    }

    #[test]
    fn backward_is_linear_in_the_loss((r, c, a, b, _w) in shape_and_data()) {
        let s = two_params(r, c, a, b);
        let grads = |which: u8| {
            let mut t = Tape::new(&s);
            let a = t.param_by_name("a").unwrap();
            let b = t.param_by_name("b").unwrap();
            let p = t.mul(a, b).unwrap();
            let l1 = t.sum_abs_sq(p);
            let m = t.abs(a);
            let l2 = t.sum_abs_sq(m);
            let loss = match which {
                1 => l1,
                2 => l2,
                _ => t.add(l1, l2).unwrap(),
            };
            let g = t.backward(loss).unwrap();
            let ga = g.get(s.id("a").unwrap()).unwrap().to_vec();
            let gb = g.get(s.id("b").unwrap()).map(|v| v.to_vec()).unwrap_or_else(|| vec![C64::new(0.0, 0.0); ga.len()]);
            (ga, gb)
        };
        let (a1, b1) = grads(1);
        let (a2, b2) = grads(2);
        let (a3, b3) = grads(3);
        for i in 0..a1.len() {
            prop_assert!((a1[i] + a2[i] - a3[i]).norm() < 1e-12);
            prop_assert!((b1[i] + b2[i] - b3[i]).norm() < 1e-12);
        }
    }

    #[test]
    fn forward_is_deterministic((r, c, a, b, _w) in shape_and_data()) {
        let s = two_params(r, c, a, b);
        let run = || {
            let mut t = Tape::new(&s);
            let a = t.param_by_name("a").unwrap();
            let b = t.param_by_name("b").unwrap();
            let x = t.mul(a, b).unwrap();
            let y = t.split_tanh(x);
            let z = t.bounded_mask(y);
            t.value(z).iter().flat_map(|v| [v.re.to_bits(), v.im.to_bits()]).collect::<Vec<u64>>()
        };
        prop_assert_eq!(run(), run());
    }

    #[test]
    fn bounded_mask_is_bounded_and_keeps_phase(re in -1e6f64..1e6, im in -1e6f64..1e6, tiny in any::<bool>()) {
        let o = if tiny { C64::new(re * 1e-7, im * 1e-7) } else { C64::new(re, im) };
        let m = bounded_mask_value(o);
        prop_assert!(m.norm() <= 1.0);
        if o.norm() >= 1e-12 && m.norm() > 0.0 {
            prop_assert!((m.arg() - o.arg()).abs() < 1e-9);
        }
    }

    #[test]
    fn conv_output_length(n in 5usize..200, k in 1usize..6, s in 1usize..4, p in 0usize..3) {
        let g = conv_geom(1, 1, k, s, p);
        prop_assert_eq!(g.conv_out_len(n), Some((n + 2 * p - k) / s + 1));
    }

    #[test]
    fn stft_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in any::<u64>()) {
        use rand::Rng;
        let stft = Stft::new(FrameSpec::new(64, 32, 16_000).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..64).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mix: Vec<f64> = x.iter().zip(&y).map(|(u, v)| a * u + b * v).collect();
        let fx = stft.stft_frame(&x).unwrap();
        let fy = stft.stft_frame(&y).unwrap();
        let fm = stft.stft_frame(&mix).unwrap();
        for k in 0..fm.len() {
            prop_assert!((fm[k] - (fx[k] * a + fy[k] * b)).norm() < 1e-12);
        }
    }

    #[test]
    fn full_spectrum_is_conjugate_symmetric(seed in any::<u64>()) {
        use cospa_core::fft::Fft;
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut buf: Vec<C64> = (0..64).map(|_| C64::new(rng.gen_range(-1.0..1.0), 0.0)).collect();
        Fft::new(64).unwrap().forward(&mut buf);
        for k in 1..64 {
            prop_assert!((buf[k] - buf[64 - k].conj()).norm() < 1e-12);
        }
    }
}

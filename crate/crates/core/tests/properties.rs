use mmtsvit::data::{decode_container, encode_container, CoRegisteredSet, Flip, LabelMap, SitsSample};
use mmtsvit::model::{patchify, unpatchify, FusionMode, Model, TokenizerConfig};
use mmtsvit::tensor::{Tape, Tensor};
use mmtsvit::verify::{random_inputs, tiny_config};
use proptest::prelude::*;

fn tensor(shape: &[usize], seed: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |i| ((i as f64 + 1.0) * seed).sin())
}

proptest! {
    #[test]
    fn patchify_round_trip_is_exact(
        t in 1usize..4, h in 1usize..4, w in 1usize..4,
        nt in 1usize..4, nh in 1usize..4, nw in 1usize..4,
        c in 1usize..5, seed in 0.1f64..3.0,
    ) {
        let cfg = TokenizerConfig { t, h, w, d: 8, channels: c };
        let x = tensor(&[t * nt, h * nh, w * nw, c], seed);
        let p = patchify(&x, &cfg).unwrap();
        prop_assert_eq!(p.shape(), &[nh * nw, nt, t * h * w * c]);
        prop_assert_eq!(unpatchify(&p, &cfg, (t * nt, h * nh, w * nw)).unwrap(), x);
    }

    #[test]
    fn indivisible_extent_is_rejected(h in 2usize..5, extra in 1usize..2) {
        let cfg = TokenizerConfig { t: 1, h, w: 1, d: 8, channels: 1 };
        let x = Tensor::<f64>::zeros(&[1, h + extra, 1, 1]);
        prop_assert!(patchify(&x, &cfg).is_err());
    }

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, n in 1usize..9, scale in 0.01f64..80.0, seed in 0.1f64..3.0) {
        let tape = Tape::new();
        let x = tape.constant(tensor(&[rows, n], seed).map(|v| v * scale));
        let y = x.softmax_lastdim().unwrap().value();
        for r in y.data().chunks(n) {
            prop_assert!(r.iter().all(|&v| (0.0..=1.0).contains(&v)));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        }
    }

    #[test]
    fn matmul_matches_triple_loop(b in 1usize..3, m in 1usize..5, k in 1usize..5, n in 1usize..5, seed in 0.1f64..3.0) {
        let (a, c) = (tensor(&[b, m, k], seed), tensor(&[b, k, n], seed + 0.5));
        let tape = Tape::new();
        let y = tape.constant(a.clone()).matmul(&tape.constant(c.clone())).unwrap().value();
        for bi in 0..b {
            for i in 0..m {
                for j in 0..n {
                    let want: f64 = (0..k).map(|e| a.at(&[bi, i, e]) * c.at(&[bi, e, j])).sum();
                    prop_assert!((y.at(&[bi, i, j]) - want).abs() <= 1e-12);
                }
            }
        }
    }

    #[test]
    fn flips_are_involutions(h in 1usize..5, w in 1usize..5, horizontal: bool, vertical: bool) {
        let x = tensor(&[2, h, w, 3], 0.7);
        let s = SitsSample::new("a", x, vec![10, 20]).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % 3) as u16).collect()).unwrap();
        let set = CoRegisteredSet::new(vec![s], labels, 3).unwrap();
        let flip = Flip { horizontal, vertical };
        prop_assert_eq!(flip.apply(&flip.apply(&set).unwrap()).unwrap(), set);
    }

    #[test]
    fn container_round_trip(t in 1usize..4, h in 1usize..5, w in 1usize..5, c in 1usize..4, k in 2usize..6) {
        let dates: Vec<u16> = (0..t as u16).map(|i| 1 + 90 * i).collect();
        // f32-representable values survive the f32 storage exactly
        let x = tensor(&[t, h, w, c], 0.3).map(|v| v as f32 as f64);
        let s = SitsSample::new("opt", x, dates).unwrap();
        let labels = LabelMap::new(h, w, (0..h * w).map(|i| (i % k) as u16).collect()).unwrap();
        let set = CoRegisteredSet::new(vec![s], labels, k).unwrap();
        let bytes = encode_container(&set).unwrap();
        let back: CoRegisteredSet<f64> = decode_container(&bytes).unwrap();
        prop_assert_eq!(&back, &set);
        prop_assert_eq!(encode_container(&back).unwrap(), bytes);
    }
}

#[test]
fn outputs_are_per_pixel_distributions_in_both_precisions() {
    for mode in FusionMode::ALL {
        let m = Model::<f64>::new(tiny_config(mode), 3).unwrap();
        let (inputs, _) = random_inputs(&m.config, 4).unwrap();
        let y = m.predict(&inputs).unwrap();
        assert_eq!(y.shape(), &[4, 4, 3]);
        for p in y.data().chunks(3) {
            assert!(p.iter().all(|&v| v >= 0.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12, "{mode}");
        }

        let m32 = Model::<f32>::new(tiny_config(mode), 3).unwrap();
        let inputs32: Vec<_> = inputs.iter().map(|s| s.cast::<f32>()).collect();
        let y32 = m32.predict(&inputs32).unwrap();
        for p in y32.data().chunks(3) {
            assert!((p.iter().sum::<f32>() - 1.0).abs() <= 1e-5, "{mode}");
        }
        let drift = y.cast::<f32>().max_abs_diff(&y32);
        assert!(drift < 1e-4, "{mode}: single precision drifts by {drift}");
    }
}

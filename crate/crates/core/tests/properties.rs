use num_complex::Complex64;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use freqformer::analysis::{ks_test, permutation_entropy, restricted_projection_errors, svd_entropy};
use freqformer::autograd::{Graph, ParamStore};
use freqformer::blocks::{Activation, FeaF, FeaW, FebF, FebW, Identity, LadderMaps, MoeDecomp, Zero};
use freqformer::contract::Contraction;
use freqformer::model::{Model, ModelConfig};
use freqformer::pipeline::{make_windows, EarlyStopping, Normalizer, DEFAULT_SPLIT};
use freqformer::spectral::{
    fft_in_place, half_len, irfft, rfft, scatter_pad, select_modes, ComplexSpectrum, ModePolicy,
};
use freqformer::wavelet::{legendre_filters, mw_decompose, mw_reconstruct};
use freqformer::Tensor;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn randn(shape: &[usize], seed: u64) -> Tensor {
    Tensor::randn(shape, 1.0, &mut rng(seed))
}

fn pow2_len() -> impl Strategy<Value = usize> {
    prop::sample::select(vec![8usize, 16, 64])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn parseval(seed in any::<u64>(), n in pow2_len()) {
        let x = randn(&[n, 1], seed);
        let mut buf: Vec<Complex64> = x.data().iter().map(|&v| Complex64::new(v, 0.0)).collect();
        fft_in_place(&mut buf, false);
        let et: f64 = x.data().iter().map(|v| v * v).sum();
        let ef: f64 = buf.iter().map(|c| c.norm_sqr()).sum::<f64>() / n as f64;
        prop_assert!((et - ef).abs() <= 1e-9 * et);
    }

    #[test]
    fn rfft_is_linear(seed in any::<u64>(), n in 2usize..70, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let x = randn(&[n, 2], seed);
        let y = randn(&[n, 2], seed.wrapping_add(1));
        let mix = x.zip_map(&y, |p, q| a * p + b * q).unwrap();
        let (fx, fy, fm) = (rfft(&x).unwrap(), rfft(&y).unwrap(), rfft(&mix).unwrap());
        for i in 0..fm.data().len() {
            let want = fx.data()[i] * a + fy.data()[i] * b;
            prop_assert!((fm.data()[i] - want).norm() < 1e-11);
        }
    }

    #[test]
    fn all_modes_round_trip(seed in any::<u64>(), n in 2usize..70) {
        let x = randn(&[n, 3], seed);
        let full = rfft(&x).unwrap();
        let modes: Vec<usize> = (0..half_len(n)).collect();
        let spec = ComplexSpectrum::select(&full, &modes, n).unwrap();
        let back = irfft(&scatter_pad(&spec), n).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn mode_selection_is_deterministic(seed in any::<u64>(), m in 1usize..40, n in 2usize..200) {
        let p = ModePolicy::random(m, seed);
        let a = select_modes(&p, n);
        prop_assert_eq!(&a, &select_modes(&p, n));
        prop_assert_eq!(a.len(), m.min(half_len(n)));
        prop_assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn contraction_is_bilinear(seed in any::<u64>(), al in -2.0f64..2.0, be in -2.0f64..2.0) {
        let c = Contraction::parse("md,mde->me").unwrap();
        let (a, a2, b) = (randn(&[3, 4], seed), randn(&[3, 4], seed ^ 1), randn(&[3, 4, 5], seed ^ 2));
        let lhs = c.apply(&a.zip_map(&a2, |p, q| al * p + be * q).unwrap(), &b).unwrap();
        let (ca, ca2) = (c.apply(&a, &b).unwrap(), c.apply(&a2, &b).unwrap());
        let rhs = ca.zip_map(&ca2, |p, q| al * p + be * q).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-12);
    }

    #[test]
    fn multiwavelet_perfect_reconstruction(seed in any::<u64>(), k in 1usize..=8, half in 1usize..6, d in 1usize..4) {
        let bank = legendre_filters(k).unwrap();
        let fine = randn(&[2 * half, k, d], seed);
        let (s, dt) = mw_decompose(&fine, &bank).unwrap();
        prop_assert!(mw_reconstruct(&s, &dt, &bank).unwrap().max_abs_diff(&fine) < 1e-10);
    }

    #[test]
    fn constant_function_has_no_detail(k in 1usize..=8, c in -5.0f64..5.0, half in 1usize..5) {
        let bank = legendre_filters(k).unwrap();
        // only the degree-0 coefficient is set in every block
        let mut fine = Tensor::zeros(&[2 * half, k, 1]);
        for t in 0..2 * half {
            fine.set(&[t, 0, 0], c);
        }
        let (_, detail) = mw_decompose(&fine, &bank).unwrap();
        prop_assert!(detail.data().iter().all(|v| v.abs() < 1e-10));
    }

    #[test]
    fn moe_seasonal_is_exact_difference(seed in any::<u64>(), l in 4usize..40) {
        let mut st = ParamStore::new();
        let moe = MoeDecomp::new(&mut st, "m", 3, &[2, 5, 9], &mut rng(seed)).unwrap();
        let x = randn(&[l, 3], seed ^ 7);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let (s, t) = moe.forward(&mut g, &st, xv).unwrap();
        let (s, t) = (g.value(s), g.value(t));
        for i in 0..x.numel() {
            prop_assert_eq!(s.data()[i], x.data()[i] - t.data()[i]);
        }
        let w = moe.weights(&mut g, &st, xv).unwrap();
        for r in 0..l {
            let sum: f64 = (0..3).map(|e| g.value(w).get(&[r, e])).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn fourier_blocks_are_real_on_their_modes(seed in any::<u64>(), l in 6usize..40, m in 1usize..8) {
        let mut st = ParamStore::new();
        let p = ModePolicy::random(m, seed);
        let feb = FebF::new(&mut st, "b", 3, p, &mut rng(seed)).unwrap();
        let fea = FeaF::new(&mut st, "a", 3, p, Activation::Tanh, &mut rng(seed ^ 3)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(randn(&[l, 3], seed ^ 5));
        let kv = g.constant(randn(&[l + 4, 3], seed ^ 6));
        let yb = feb.forward(&mut g, &st, x).unwrap();
        let ya = fea.forward(&mut g, &st, x, kv).unwrap();
        let mb = select_modes(&p, l);
        let ma = fea.modes(l, l + 4).unwrap().0;
        for (y, modes) in [(g.value(yb), mb), (g.value(ya), ma)] {
            // the conjugate-completed mode spectrum inverts to a real signal equal to y
            for c in 0..3 {
                let mut buf: Vec<Complex64> = (0..l).map(|t| Complex64::new(y.get(&[t, c]), 0.0)).collect();
                fft_in_place(&mut buf, false);
                let mut full = vec![Complex64::new(0.0, 0.0); l];
                for &k in &modes {
                    full[k] = buf[k];
                    if k != 0 {
                        full[l - k] = buf[k].conj();
                    }
                }
                fft_in_place(&mut full, true);
                for (t, v) in full.iter().enumerate() {
                    prop_assert!((v.im / l as f64).abs() < 1e-10);
                    prop_assert!((v.re / l as f64 - y.get(&[t, c])).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn wavelet_ladder_pass_through(seed in any::<u64>(), k in 1usize..=4, l in 8usize..60, depth in 0usize..3) {
        let mut st = ParamStore::new();
        let fw = FebW::new(&mut st, "w", 2, k, depth, ModePolicy::fixed(4), &mut rng(seed)).unwrap();
        let x = randn(&[l, 2], seed ^ 9);
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let maps = LadderMaps { a: &Identity, b: &Zero, c: &Zero, f_bar: &Identity };
        match fw.forward_with(&mut g, &st, xv, &maps) {
            Ok(y) => prop_assert!(g.value(y).max_abs_diff(&x) < 1e-9),
            Err(_) => prop_assert!(depth > freqformer::wavelet::max_depth(l, k)),
        }
    }

    #[test]
    fn blocks_preserve_length(seed in any::<u64>(), l in 8usize..=128) {
        let mut st = ParamStore::new();
        let p = ModePolicy::random(4, seed);
        let r = &mut rng(seed);
        let feb = FebF::new(&mut st, "b", 2, p, r).unwrap();
        let fea = FeaF::new(&mut st, "a", 2, p, Activation::Softmax, r).unwrap();
        let fbw = FebW::new(&mut st, "bw", 2, 1, 1, p, r).unwrap();
        let faw = FeaW::new(&mut st, "aw", 2, 1, 1, p, Activation::Softmax, r).unwrap();
        let moe = MoeDecomp::new(&mut st, "m", 2, &[3, 7], r).unwrap();
        let mut g = Graph::new();
        let x = g.constant(randn(&[l, 2], seed ^ 1));
        let kv = g.constant(randn(&[2 * l, 2], seed ^ 2));
        let outs = [
            feb.forward(&mut g, &st, x).unwrap(),
            fea.forward(&mut g, &st, x, kv).unwrap(),
            fbw.forward(&mut g, &st, x).unwrap(),
            faw.forward(&mut g, &st, x, kv).unwrap(),
            moe.forward(&mut g, &st, x).unwrap().0,
        ];
        for o in outs {
            prop_assert_eq!(g.shape(o), &[l, 2][..]);
        }
    }

    #[test]
    fn ks_symmetric_and_order_free(seed in any::<u64>(), n in 1usize..50, m in 1usize..50) {
        let a = randn(&[n], seed).into_data();
        let b: Vec<f64> = randn(&[m], seed ^ 4).data().iter().map(|v| v + 0.3).collect();
        let ab = ks_test(&a, &b).unwrap();
        let ba = ks_test(&b, &a).unwrap();
        prop_assert_eq!(ab.statistic, ba.statistic);
        prop_assert_eq!(ab.p_value, ba.p_value);
        let mut ra = a.clone();
        ra.reverse();
        ra.rotate_left(n / 3);
        prop_assert_eq!(ks_test(&ra, &b).unwrap().statistic, ab.statistic);
    }

    #[test]
    fn entropies_ignore_positive_affine_maps(seed in any::<u64>(), scale in 0.01f64..100.0, shift in -50.0f64..50.0) {
        let x = randn(&[300], seed).into_data();
        let y: Vec<f64> = x.iter().map(|v| scale * v + shift).collect();
        let (pa, pb) = (permutation_entropy(&x, 3, 1).unwrap(), permutation_entropy(&y, 3, 1).unwrap());
        prop_assert!((pa - pb).abs() < 1e-9);
        let (sa, sb) = (svd_entropy(&x, 6, 2).unwrap(), svd_entropy(&y, 6, 2).unwrap());
        prop_assert!((sa - sb).abs() < 1e-9);
        prop_assert!((0.0..=1.0).contains(&pa) && (0.0..=1.0 + 1e-12).contains(&sa));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn projection_ratio_never_below_one(seed in any::<u64>(), k in 1usize..4, extra in 0usize..6) {
        let (m, d) = (20, 16);
        let a = randn(&[m, d], seed);
        let s = (k + extra).min(d);
        let mut cols: Vec<usize> = (0..d).collect();
        use rand::seq::SliceRandom;
        cols.shuffle(&mut rng(seed ^ 8));
        cols.truncate(s);
        let (err, best) = restricted_projection_errors(&a, &cols, k).unwrap();
        prop_assert!(err / best >= 1.0 - 1e-9);
    }

    #[test]
    fn decoder_trend_contributions_add_up(seed in 0u64..1000) {
        let cfg = ModelConfig {
            input_len: 16, pred_len: 8, raw_dim: 2, model_dim: 4, modes: 4,
            encoder_layers: 1, decoder_layers: 2, moe_kernels: vec![3, 5], seed,
            ..ModelConfig::default()
        };
        let base = Model::new(cfg).unwrap();
        let x = randn(&[16, 2], seed ^ 11);
        let without = |layers: &[usize]| {
            let mut m = base.clone();
            for &l in layers {
                for j in 1..=3 {
                    let id = m.store.id(&format!("dec{l}.trend{j}.weight")).unwrap();
                    m.store.value_mut(id).fill(0.0);
                }
            }
            m.predict(&x).unwrap()
        };
        let (full, no0, no1, none) = (without(&[]), without(&[0]), without(&[1]), without(&[0, 1]));
        // each layer adds its own term: full - no0 - no1 + none = 0
        for i in 0..full.numel() {
            let r = full.data()[i] - no0.data()[i] - no1.data()[i] + none.data()[i];
            prop_assert!(r.abs() < 1e-12, "residual {}", r);
        }
    }

    #[test]
    fn only_train_rows_set_normalization(seed in any::<u64>(), t in 60usize..200) {
        let mut x = randn(&[t, 2], seed);
        // a drift makes train and test statistics differ
        for (i, v) in x.data_mut().iter_mut().enumerate() {
            *v += (i / 2) as f64 * 0.05;
        }
        let ds = make_windows(&x, 8, 4, DEFAULT_SPLIT).unwrap();
        let train_end = ds.bounds[0].1;
        prop_assert_eq!(&ds.norm, &Normalizer::fit(&x.slice_first(0, train_end).unwrap()).unwrap());
        let test_stats = Normalizer::fit(&x.slice_first(ds.bounds[2].0, t).unwrap()).unwrap();
        prop_assert!(test_stats.mean != ds.norm.mean);
    }

    #[test]
    fn early_stopping_keeps_the_minimum(vals in prop::collection::vec(0.0f64..10.0, 1..30), patience in 1usize..5) {
        let mut es = EarlyStopping::new(patience);
        let mut seen = Vec::new();
        for v in vals {
            seen.push(v);
            if es.observe(v) == freqformer::pipeline::StopDecision::Stop {
                break;
            }
        }
        let min = seen.iter().copied().fold(f64::INFINITY, f64::min);
        prop_assert_eq!(es.best, min);
        prop_assert_eq!(seen[es.best_epoch - 1], min);
    }
}

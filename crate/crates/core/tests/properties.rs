use freezetst::analysis::{compute_kappa, effective_receptive_field};
use freezetst::data::{denormalize, format_f64, make_windows, normalize, SeriesDataset, Split, SplitFractions};
use freezetst::encoder::FreezeScheme;
use freezetst::model::{FreezeTst, ModelConfig};
use freezetst::patching::{embed_patches, extract_patches, PatchConfig};
use freezetst::reservoir::{build_reservoir, reservoir_step, ReservoirConfig};
use freezetst::tensor::{Rng, Tensor};
use proptest::prelude::*;

fn randn(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = Rng::new(seed);
    Tensor::from_fn(shape, |_| rng.normal())
}

fn dataset(len: usize, d: usize, seed: u64, splits: SplitFractions) -> SeriesDataset {
    let mut ds = SeriesDataset::new(randn(&[len, d], seed), (0..d).map(|k| format!("c{k}")).collect()).unwrap();
    ds.splits = splits;
    ds
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn patches_follow_the_count_formula(p in 1usize..12, s in 1usize..12, extra in 0usize..40, d in 1usize..4, seed in 0u64..1000) {
        let t = p + extra;
        let cfg = PatchConfig { patch_len: p, stride: s, lookback: t, d_model: 4 };
        let x = randn(&[t, d], seed);
        let patches = extract_patches(&x, &cfg).unwrap();
        let n = (t - p) / s + 1;
        prop_assert_eq!(patches.shape(), &[d, n, p]);
        for k in 0..d {
            for i in 0..n {
                for j in 0..p {
                    prop_assert_eq!(patches.data()[(k * n + i) * p + j], x.data()[(i * s + j) * d + k]);
                }
            }
        }
    }

    #[test]
    fn patching_commutes_with_channel_permutation(d in 2usize..5, seed in 0u64..1000) {
        let cfg = PatchConfig { patch_len: 4, stride: 3, lookback: 13, d_model: 4 };
        let x = randn(&[13, d], seed);
        let perm: Vec<usize> = (0..d).rev().collect();
        let xp = Tensor::from_fn(&[13, d], |i| x.data()[(i / d) * d + perm[i % d]]);
        let a = extract_patches(&x, &cfg).unwrap();
        let b = extract_patches(&xp, &cfg).unwrap();
        for (k, &src) in perm.iter().enumerate() {
            prop_assert_eq!(b.slab(k), a.slab(src));
        }
    }

    #[test]
    fn embedding_is_affine(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000) {
        let w = randn(&[6, 4], seed);
        let bias = randn(&[6], seed + 1);
        let p1 = randn(&[2, 3, 4], seed + 2);
        let p2 = randn(&[2, 3, 4], seed + 3);
        let mix = p1.scale(a).add(&p2.scale(b)).unwrap();
        let lhs = embed_patches(&mix, &w, &bias).unwrap();
        let e1 = embed_patches(&p1, &w, &bias).unwrap();
        let e2 = embed_patches(&p2, &w, &bias).unwrap();
        let bias_part = embed_patches(&Tensor::zeros(&[2, 3, 4]), &w, &bias).unwrap();
        let rhs = e1.scale(a).add(&e2.scale(b)).unwrap().add(&bias_part.scale(1.0 - a - b)).unwrap();
        prop_assert!(lhs.max_abs_diff(&rhs) < 1e-10);
    }

    #[test]
    fn kappa_is_monotone(alpha in 0.01f64..0.98, lambda in 0.01f64..0.98, l_phi in 0.1f64..1.0) {
        prop_assert!(compute_kappa(alpha + 0.01, lambda, l_phi) > compute_kappa(alpha, lambda, l_phi));
        prop_assert!(compute_kappa(alpha, lambda + 0.01, l_phi) < compute_kappa(alpha, lambda, l_phi));
        let k = compute_kappa(alpha, lambda, l_phi);
        prop_assert!(k > 0.0 && k < 1.0);
    }

    #[test]
    fn receptive_field_is_the_first_lag_below_eps(eps in 1e-6f64..0.5, c in 0.5f64..5.0, kappa in 0.05f64..0.995) {
        let l = effective_receptive_field(eps, c, kappa).unwrap();
        prop_assert!(c * kappa.powi(l as i32) <= eps * (1.0 + 1e-9));
        if l > 0 {
            prop_assert!(c * kappa.powi(l as i32 - 1) > eps * (1.0 - 1e-9));
        }
        prop_assert!(effective_receptive_field(eps / 2.0, c, kappa).unwrap() >= l);
    }

    #[test]
    fn window_counts_match_closed_form(len in 20usize..200, t in 1usize..12, h in 1usize..8, seed in 0u64..100) {
        let ds = dataset(len, 2, seed, SplitFractions { train: 0.6, val: 0.2 });
        for split in [Split::Train, Split::Val, Split::Test] {
            let (s, e) = ds.split_range(split);
            let w = make_windows(&ds, t, h, split);
            let expected = (e - s + 1).saturating_sub(t + h);
            prop_assert_eq!(w.len(), expected);
            for pair in &w {
                prop_assert!(pair.origin >= s && pair.origin + t + h <= e);
                let d = ds.channels();
                prop_assert_eq!(pair.target.data()[..d].to_vec(), ds.values.data()[(pair.origin + t) * d..(pair.origin + t + 1) * d].to_vec());
            }
        }
    }

    #[test]
    fn normalisation_round_trips(len in 10usize..100, d in 1usize..4, seed in 0u64..100, shift in -50.0f64..50.0) {
        let mut ds = dataset(len, d, seed, SplitFractions::default());
        ds.values = ds.values.map(|v| 3.0 * v + shift);
        let back = denormalize(&normalize(&ds).unwrap()).unwrap();
        prop_assert!(back.values.max_abs_diff(&ds.values) < 1e-10);
    }

    #[test]
    fn decimal_serialisation_is_exact(v in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
        let parsed: f64 = format_f64(v).parse().unwrap();
        prop_assert_eq!(parsed.to_bits(), v.to_bits());
    }

    #[test]
    fn reservoir_step_contracts_by_kappa(alpha in 0.1f64..0.95, leak in 0.05f64..1.0, seed in 0u64..50) {
        let cfg = ReservoirConfig { size: 24, alpha, leak, seed, ..ReservoirConfig::fast() };
        let mut a = build_reservoir(&cfg, 3, 1).unwrap();
        let mut b = a.clone();
        a.h = randn(&[24], seed + 1).into_data();
        b.h = randn(&[24], seed + 2).into_data();
        let before: f64 = a.h.iter().zip(&b.h).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let z = randn(&[3], seed + 3);
        let ha = reservoir_step(&mut a, &z).unwrap().to_vec();
        let hb = reservoir_step(&mut b, &z).unwrap();
        let after: f64 = ha.iter().zip(hb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        prop_assert!(after <= compute_kappa(alpha, leak, 1.0) * before * (1.0 + 1e-9));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    /// Channels are processed independently, so permuting the input
    /// channels permutes the forecast columns.
    #[test]
    fn model_is_channel_equivariant(seed in 0u64..1000, scheme in prop_oneof![Just(FreezeScheme::F0), Just(FreezeScheme::Fa), Just(FreezeScheme::Fall)]) {
        let cfg = ModelConfig {
            patch: PatchConfig { patch_len: 4, stride: 2, lookback: 12, d_model: 8 },
            horizon: 3,
            n_layers: 2,
            n_heads: 2,
            scheme,
            ..ModelConfig::default()
        };
        let model = FreezeTst::new(cfg, seed).unwrap();
        let x = randn(&[12, 3], seed);
        let perm = [2usize, 0, 1];
        let xp = Tensor::from_fn(&[12, 3], |i| x.data()[(i / 3) * 3 + perm[i % 3]]);
        let y = &model.predict(&[&x]).unwrap()[0];
        let yp = &model.predict(&[&xp]).unwrap()[0];
        for h in 0..3 {
            for (k, &src) in perm.iter().enumerate() {
                prop_assert!((yp.at(&[h, k]) - y.at(&[h, src])).abs() < 1e-12);
            }
        }
    }
}

use camera_moe::calibration::{gen_synthetic, LayerSamples};
use camera_moe::mcam::Container;
use camera_moe::model::{expert_forward, inverse_permutation, permute_micro_experts, ModelConfig};
use camera_moe::oracles::{lemma_bound, p_lossless, singular_values};
use camera_moe::prune::{prune_layer, retain_count, select_retain_set};
use camera_moe::quant::quantize_matrix_affine;
use camera_moe::rank::{rank_micro_experts, Ranking};
use camera_moe::synth::{gaussian_matrix_f64, random_model, LayerGen};
use camera_moe::tensor::Matrix;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn small_config() -> impl Strategy<Value = ModelConfig> {
    (1usize..5, 0usize..3, 2usize..12, 1usize..8).prop_flat_map(|(n_experts, n_shared, d_model, d_ff)| {
        (1..=n_experts).prop_map(move |top_k| ModelConfig {
            n_layers: 1,
            n_experts,
            n_shared,
            d_model,
            d_ff,
            top_k,
        })
    })
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn ranking_is_a_descending_permutation(energy in prop::collection::vec(0.0f64..10.0, 1..40)) {
        let r = Ranking::from_energy(&energy);
        prop_assert!(r.is_permutation());
        for w in r.order.windows(2) {
            prop_assert!(energy[w[0]] > energy[w[1]] || (energy[w[0]] == energy[w[1]] && w[0] < w[1]));
        }
    }

    #[test]
    fn retain_count_bounds(lambda in 0.0f64..1.0, n in 1usize..10_000) {
        let m = retain_count(lambda, n);
        prop_assert!(m >= 1 && m <= n);
        prop_assert!((m as f64 - (1.0 - lambda) * n as f64).abs() <= 1.0);
    }

    #[test]
    fn quantizer_error_is_bounded(
        values in prop::collection::vec(-100.0f32..100.0, 1..64),
        bits in 1u8..=8,
        group in 1usize..20,
    ) {
        let m = Matrix::from_vec(1, values.len(), values.clone()).unwrap();
        let q = quantize_matrix_affine(&m, bits, group).unwrap();
        let d = q.dequantize();
        for (i, (&orig, &deq)) in values.iter().zip(d.as_slice()).enumerate() {
            let g = q.group_of(0, i);
            let chunk = &values[(i / group) * group..((i / group + 1) * group).min(values.len())];
            let lo = chunk.iter().copied().fold(f32::INFINITY, f32::min);
            let hi = chunk.iter().copied().fold(f32::NEG_INFINITY, f32::max);
            let range = f64::from(hi) - f64::from(lo);
            let bound = range / (2.0 * f64::from((1u32 << bits) - 1)) + 1e-5 * (1.0 + range);
            prop_assert!((f64::from(deq) - f64::from(orig)).abs() <= bound);
            prop_assert!(f64::from(deq) >= f64::from(lo) - 1e-5 && f64::from(deq) <= f64::from(hi) + 1e-4 * (1.0 + range));
            prop_assert!(u32::from(q.codes[i]) < (1u32 << bits));
            prop_assert_eq!(q.zero_points[g], lo);
        }
    }

    #[test]
    fn permutation_preserves_expert_output(config in small_config(), seed in any::<u64>()) {
        let model = random_model(&config, seed, &LayerGen::default()).unwrap();
        let e = &model.layers[0].experts[0];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut perm: Vec<usize> = (0..e.width()).collect();
        rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut rng);
        let p = permute_micro_experts(e, &perm).unwrap();
        prop_assert_eq!(&permute_micro_experts(&p, &inverse_permutation(&perm)).unwrap(), e);
        let x = gen_synthetic(1, config.d_model, seed, 1.0).unwrap();
        let a = expert_forward(e, x.x.row(0)).unwrap();
        let b = expert_forward(&p, x.x.row(0)).unwrap();
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - v).abs() <= 1e-9 * (1.0 + u.abs()));
        }
    }

    #[test]
    fn pruning_keeps_requested_count(config in small_config(), seed in any::<u64>(), lambda in 0.0f64..0.95) {
        let model = random_model(&config, seed, &LayerGen::default()).unwrap();
        let layer = &model.layers[0];
        let batch = gen_synthetic(8, config.d_model, seed, 1.0).unwrap();
        let samples = LayerSamples { x: batch.x.clone(), y: layer.forward_batch(&batch.x).unwrap() };
        let (ranking, _) = rank_micro_experts(layer, &samples, 1.0).unwrap();
        let retain = select_retain_set(&ranking, lambda, &layer.widths()).unwrap();
        let m = retain_count(lambda, layer.n_micro_experts());
        prop_assert_eq!(retain.kept.len(), m);
        let pruned = prune_layer(layer, &retain).unwrap();
        prop_assert_eq!(pruned.n_micro_experts(), m);
        prop_assert!(pruned.forward_batch(&batch.x).unwrap().all_finite());
    }

    #[test]
    fn triangle_bound_always_holds(seed in any::<u64>(), n in 1usize..10, n_e in 1usize..8, d in 1usize..8, mask in any::<u8>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let phi = gaussian_matrix_f64(&mut rng, n, n_e);
        let w = gaussian_matrix_f64(&mut rng, n_e, d);
        let removed: Vec<usize> = (0..n_e).filter(|i| mask & (1 << i) != 0).collect();
        let r = lemma_bound(&phi, &w, &removed).unwrap();
        prop_assert!(r.epsilon <= r.triangle_bound * (1.0 + 1e-9) + 1e-12);
        if removed.len() <= 1 {
            prop_assert!((r.epsilon - r.epsilon_sup).abs() <= 1e-9 * (1.0 + r.epsilon_sup));
        }
    }

    #[test]
    fn spectrum_conserves_energy(seed in any::<u64>(), n in 1usize..12, d in 1usize..12) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = gaussian_matrix_f64(&mut rng, n, d);
        let sv = singular_values(&y).unwrap();
        let total = y.frobenius_sq();
        let spectrum: f64 = sv.iter().map(|s| s * s).sum();
        prop_assert!((spectrum - total).abs() <= 1e-8 * total.max(1e-300));
        for w in sv.windows(2) {
            prop_assert!(w[0] >= w[1]);
        }
    }

    #[test]
    fn lossless_probability_is_monotone(n in 2usize..200, k_frac in 0.0f64..1.0, f in 0.0f64..0.9) {
        let k = 1 + ((n - 1) as f64 * k_frac) as usize;
        let p0 = p_lossless(n, k, 0.0).unwrap();
        prop_assert_eq!(p0.probability, 1.0);
        let a = p_lossless(n, k, f).unwrap();
        let b = p_lossless(n, k, (f + 0.05).min(0.95)).unwrap();
        prop_assert!((0.0..=1.0).contains(&a.probability));
        prop_assert!(b.probability <= a.probability);
    }

    #[test]
    fn container_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let m = gaussian_matrix_f64(&mut rng, rows, cols).map(|v| v as f32);
        let mut c = Container::default();
        c.push("t", m.clone());
        let back = Container::from_bytes(&c.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.get("t").unwrap(), &m);
    }
}

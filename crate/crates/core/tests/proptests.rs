//! Property tests over randomized inputs.

mod common;

use dyco::augment::{draw, freq_offset, iq_flip, rotate, time_shift, AugmentPolicy, FlipMode};
use dyco::backbone::{init_attention, window_attention};
use dyco::fewshot::make_split;
use dyco::fusion::ensemble_combine;
use dyco::nn::ParamStore;
use dyco::priors::{cycle_spectrum_p4, gaf};
use dyco::signal::{synth_dataset, DatasetSpec, IqFrame, Modulation};
use dyco::tensor::{jvp, traced};
use dyco::{rng, Tensor};
use num_complex::Complex64;
use proptest::prelude::*;

fn complex_vec(len: usize) -> impl Strategy<Value = Vec<Complex64>> {
    prop::collection::vec((-2.0..2.0f64, -2.0..2.0f64).prop_map(|(a, b)| Complex64::new(a, b)), len)
}

fn frame_strategy() -> impl Strategy<Value = IqFrame> {
    prop::collection::vec((-3.0..3.0f32, -3.0..3.0f32), 64)
        .prop_map(|v| IqFrame { i: v.iter().map(|p| p.0).collect(), q: v.iter().map(|p| p.1).collect(), label: 0, snr_db: 0 })
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig { cases, failure_persistence: None, ..ProptestConfig::default() }
}

fn energy(f: &IqFrame) -> f64 {
    f.i.iter().zip(&f.q).map(|(&a, &b)| (a as f64).powi(2) + (b as f64).powi(2)).sum()
}

fn sorted_amplitudes(f: &IqFrame) -> Vec<u64> {
    let mut v: Vec<u64> = f.i.iter().zip(&f.q).map(|(&a, &b)| ((a as f64).powi(2) + (b as f64).powi(2)).to_bits()).collect();
    v.sort_unstable();
    v
}

fn entropy(p: &[f64]) -> f64 {
    -p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum::<f64>()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

proptest! {
    #![proptest_config(config(200))]

    #[test]
    fn p4_ignores_global_phase(x in complex_vec(64), theta in -10.0..10.0f64) {
        let w = Complex64::from_polar(1.0, theta);
        let y: Vec<Complex64> = x.iter().map(|c| c * w).collect();
        let (a, b) = (cycle_spectrum_p4(&x), cycle_spectrum_p4(&y));
        prop_assert!(common::max_abs_diff(&a, &b) < 1e-9);
    }

    #[test]
    fn p4_ignores_amplitude(x in complex_vec(64), alpha in 0.1..10.0f64) {
        let y: Vec<Complex64> = x.iter().map(|c| c * alpha).collect();
        prop_assert!(common::max_abs_diff(&cycle_spectrum_p4(&x), &cycle_spectrum_p4(&y)) < 1e-6);
    }

    #[test]
    fn p4_is_bounded(x in complex_vec(32)) {
        prop_assert!(cycle_spectrum_p4(&x).iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn gaf_planes_are_symmetric_and_bounded(series in prop::collection::vec(-50.0..50.0f64, 1..40)) {
        let n = series.len();
        let (s, d) = gaf(&series);
        for i in 0..n {
            for j in 0..n {
                prop_assert!(s[i * n + j].abs() <= 1.0 + 1e-12 && d[i * n + j].abs() <= 1.0 + 1e-12);
                prop_assert!((s[i * n + j] - s[j * n + i]).abs() < 1e-12);
                prop_assert!((d[i * n + j] + d[j * n + i]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ensemble_output_is_a_distribution(
        logits in prop::collection::vec(prop::collection::vec(-30.0..30.0f64, 5), 1..6)
    ) {
        let heads: Vec<Vec<f64>> = logits.iter().map(|l| softmax(l)).collect();
        let y = ensemble_combine(&heads);
        prop_assert!(y.iter().all(|&v| v >= 0.0));
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn cosine_and_half_squared_distance_agree(seed in any::<u64>(), d in 1usize..300) {
        let mut r = rng::stream(seed, 0);
        let u = dyco::pretrain::random_directions(&[2, d], &mut r);
        let (a, b) = u.data().split_at(d);
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let half: f64 = 0.5 * a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        prop_assert!(((1.0 - dot) - half).abs() < 1e-12);
    }

    #[test]
    fn norm_preserving_augmentations(f in frame_strategy(), theta in -4.0..4.0f64, shift in 0usize..64, df in -1.0..1.0f64) {
        let e = energy(&f);
        let tol = 8.0 * f32::EPSILON as f64 * e.max(1.0);
        prop_assert!((energy(&rotate(&f, theta)) - e).abs() < tol);
        prop_assert!((energy(&freq_offset(&f, df)) - e).abs() < tol);
        let amps = sorted_amplitudes(&f);
        for mode in [FlipMode::I, FlipMode::Q, FlipMode::Both] {
            prop_assert_eq!(sorted_amplitudes(&iq_flip(&f, mode)), amps.clone());
        }
        prop_assert_eq!(sorted_amplitudes(&time_shift(&f, shift)), amps);
    }

    #[test]
    fn augmentation_draws_stay_in_range(seed in any::<u64>(), len in 16usize..512) {
        let policy = AugmentPolicy::with_probability(1.0);
        let d = draw(&policy, len, &mut rng::stream(seed, 0));
        let theta = d.rotate.unwrap();
        prop_assert!((0.0..=std::f64::consts::PI).contains(&theta));
        prop_assert!((0.01..=0.04).contains(&d.awgn.unwrap()));
        prop_assert!((-1.0..=1.0).contains(&d.cfo.unwrap()));
        prop_assert!((0.8..=1.2).contains(&d.scale.unwrap()));
        prop_assert!((1..=(len / 16).max(1)).contains(&d.shift.unwrap()));
        prop_assert_eq!(d, draw(&policy, len, &mut rng::stream(seed, 0)));
    }
}

proptest! {
    #![proptest_config(config(1000))]

    /// Squaring sharpens the average of heads that share an argmax.
    #[test]
    fn agreeing_heads_are_sharpened(
        raw in prop::collection::vec((prop::collection::vec(-6.0..6.0f64, 4), 0.01..4.0f64), 3),
        top in 0usize..4,
    ) {
        let heads: Vec<Vec<f64>> = raw
            .iter()
            .map(|(l, margin)| {
                let mut l = l.clone();
                let rest = l.iter().enumerate().filter(|&(c, _)| c != top).map(|(_, v)| *v).fold(f64::NEG_INFINITY, f64::max);
                l[top] = rest + margin;
                softmax(&l)
            })
            .collect();
        prop_assert!(heads.iter().all(|h| dyco::fewshot::argmax(h) == top));
        let mean: Vec<f64> = (0..4).map(|c| heads.iter().map(|h| h[c]).sum::<f64>() / 3.0).collect();
        prop_assert!(entropy(&ensemble_combine(&heads)) <= entropy(&mean) + 1e-12);
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn splits_are_disjoint_and_deterministic(seed in any::<u64>(), n in 1usize..4, data_seed in 0u64..4) {
        let spec = DatasetSpec {
            classes: vec![Modulation::Bpsk, Modulation::Fsk4, Modulation::AmDsb],
            snrs_db: vec![-4, 6],
            per_cell: 4,
            ..DatasetSpec::default()
        };
        let frames = synth_dataset(&spec, data_seed).unwrap();
        let s = make_split(&frames, n, seed).unwrap();
        prop_assert_eq!(s.support.len(), 3 * 2 * n);
        prop_assert!(s.support.iter().all(|i| s.query.binary_search(i).is_err()));
        prop_assert_eq!(s.support.len() + s.query.len(), frames.len());
        prop_assert_eq!(s, make_split(&frames, n, seed).unwrap());
    }

    /// A probe supported on one window only moves that window's outputs.
    #[test]
    fn window_attention_jacobian_is_block_diagonal(seed in any::<u64>(), w in 0usize..4) {
        let (t, d, heads, m) = (16, 8, 2, 4);
        let mut r = rng::stream(seed, 0);
        let mut p = ParamStore::new();
        init_attention(&mut p, "attn", d, heads, m, &mut r);
        p.insert("attn.rel_bias", Tensor::uniform(&[heads, 2 * m - 1], 1.0, &mut r));
        let x = Tensor::randn(&[1, t, d], &mut r);
        let mut probe = vec![0.0; t * d];
        for v in &mut probe[w * m * d..(w + 1) * m * d] {
            *v = rand::Rng::gen_range(&mut r, -1.0..1.0);
        }
        let f = traced(|tape, x| window_attention(&p.bind(tape, false), "attn", x, heads, m));
        let out = jvp(&f, &x, &Tensor::new(&[1, t, d], probe).unwrap()).unwrap();
        for (k, v) in out.data().iter().enumerate() {
            if k / (m * d) != w {
                prop_assert!(*v == 0.0, "output {} outside window {} moved by {}", k, w, v);
            }
        }
    }

    #[test]
    fn encoder_outputs_lie_on_the_sphere(seed in any::<u64>()) {
        let enc = dyco::backbone::Encoder::new(dyco::theory::small_backbone(), seed).unwrap();
        let x = Tensor::randn(&[3, 2, 32], &mut rng::stream(seed, 1)).scale(3.0);
        for row in enc.encode(&x).unwrap().rows() {
            prop_assert!((row.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

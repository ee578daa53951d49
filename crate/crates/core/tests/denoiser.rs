mod support;

use musicdiff::autodiff::{wkv_forward, Graph, ParamStore, Segments, Tensor};
use musicdiff::config::Config;
use musicdiff::denoiser::{
    channel_mix_forward, denoise_loss, gumbel_decode, semantic_activation, time_mix_forward, ChannelMixIds, CondRow, DenoiseInput,
    Denoiser, Parameterization, TimeMixIds,
};
use musicdiff::diffusion::standard_normal;
use musicdiff::embedding::SemanticEncoders;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn vec_mat(x: &[f64], m: &Tensor) -> Vec<f64> {
    (0..m.cols).map(|j| (0..m.rows).map(|i| x[i] * m.get(i, j)).sum()).collect()
}

/// Position-by-position time-mix reference.
fn time_mix_reference(store: &ParamStore, ids: &TimeMixIds, x: &Tensor, segments: &[usize]) -> Tensor {
    let d = x.cols;
    let p = |id| store.get(id);
    let decay: Vec<f64> = p(ids.decay).data.iter().map(|w| -w.exp()).collect();
    let mut out = Tensor::zeros(x.rows, d);
    let mut start = 0;
    for &len in segments {
        let rows: Vec<Vec<f64>> = (start..start + len).map(|r| x.row(r).to_vec()).collect();
        let mix = |mu: &Tensor, t: usize| -> Vec<f64> {
            let prev = if t == 0 { vec![0.0; d] } else { rows[t - 1].clone() };
            (0..d).map(|c| prev[c] + (rows[t][c] - prev[c]) * mu.data[c]).collect()
        };
        let keys: Vec<Vec<f64>> = (0..len).map(|t| vec_mat(&mix(p(ids.mu_k), t), p(ids.w_k))).collect();
        let vals: Vec<Vec<f64>> = (0..len).map(|t| vec_mat(&mix(p(ids.mu_v), t), p(ids.w_v))).collect();
        for t in 0..len {
            let r = vec_mat(&mix(p(ids.mu_r), t), p(ids.w_r));
            let att: Vec<f64> = (0..d)
                .map(|c| {
                    let ws: Vec<f64> = (0..=t).map(|i| (decay[c] * (t - i) as f64 + keys[i][c]).exp()).collect();
                    (0..=t).map(|i| ws[i] * vals[i][c]).sum::<f64>() / ws.iter().sum::<f64>()
                })
                .collect();
            let gated: Vec<f64> = (0..d).map(|c| sigmoid(r[c]) * att[c]).collect();
            let o = vec_mat(&gated, p(ids.w_o));
            for c in 0..d {
                out.set(start + t, c, rows[t][c] + o[c]);
            }
        }
        start += len;
    }
    out
}

/// Row-by-row channel-mix reference.
fn channel_mix_reference(store: &ParamStore, ids: &ChannelMixIds, streams: &[Tensor]) -> Tensor {
    let d = streams[0].cols;
    let mut out = Tensor::zeros(streams[0].rows, d);
    for row in 0..streams[0].rows {
        let mut total = vec![0.0; d];
        for (s, &wv) in streams.iter().zip(&ids.w_v) {
            let k = vec_mat(s.row(row), store.get(ids.w_k));
            let u = vec_mat(s.row(row), store.get(ids.w_u));
            let h: Vec<f64> = k.iter().zip(&u).map(|(a, b)| gelu(*a) * b).collect();
            vec_mat(&h, store.get(wv)).iter().enumerate().for_each(|(c, v)| total[c] += v);
        }
        let r = vec_mat(streams[0].row(row), store.get(ids.w_r));
        for c in 0..d {
            out.set(row, c, streams[0].get(row, c) + sigmoid(r[c]) * total[c]);
        }
    }
    out
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn time_mix_matches_reference(seed in any::<u64>(), d in 1usize..6, segs in prop::collection::vec(1usize..7, 1..4)) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = TimeMixIds::register(&mut store, "tm", d, &mut r);
        let x = support::random_tensor(&mut r, segs.iter().sum(), d, 1.5);
        let mut g = Graph::new();
        let xv = g.input(x.clone());
        let y = time_mix_forward(&mut g, &store, &ids, xv, &Segments(segs.clone())).unwrap();
        prop_assert_eq!(g.value(y).shape(), x.shape());
        prop_assert!(max_abs_diff(g.value(y), &time_mix_reference(&store, &ids, &x, &segs)) < 1e-9);
    }

    #[test]
    fn channel_mix_matches_reference(seed in any::<u64>(), d in 1usize..6, rows in 1usize..6, streams in 1usize..4) {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let ids = ChannelMixIds::register(&mut store, "cm", d, streams, &mut r);
        let xs: Vec<Tensor> = (0..streams).map(|_| support::random_tensor(&mut r, rows, d, 1.5)).collect();
        let mut g = Graph::new();
        let vars: Vec<_> = xs.iter().map(|x| g.input(x.clone())).collect();
        let y = channel_mix_forward(&mut g, &store, &ids, &vars).unwrap();
        prop_assert!(max_abs_diff(g.value(y), &channel_mix_reference(&store, &ids, &xs)) < 1e-9);
    }

    #[test]
    fn wkv_single_precision_matches_reference(seed in any::<u64>()) {
        let mut r = support::rng(seed);
        let (len, d) = (32, 3);
        let w = support::uniform_vec(&mut r, d, -2.0, 0.0);
        let k = support::uniform_vec(&mut r, len * d, -2.0, 2.0);
        let v = support::uniform_vec(&mut r, len * d, -1.0, 1.0);
        let f = |xs: &[f64]| xs.iter().map(|&x| x as f32).collect::<Vec<f32>>();
        let (out, _, _) = wkv_forward(&f(&w), &f(&k), &f(&v), len);
        let expect = support::wkv_oracle(&w, &k, &v, len);
        prop_assert!(out.iter().zip(&expect).all(|(a, b)| (*a as f64 - b).abs() < 1e-6));
    }

    #[test]
    fn fused_activation_is_finite(seed in any::<u64>()) {
        let mut r = support::rng(seed);
        let mut g = Graph::new();
        let [n, c, s] = [0, 1, 2].map(|_| g.input(support::random_tensor(&mut r, 3, 4, 30.0)));
        let y = semantic_activation(&mut g, n, c, s, None).unwrap();
        prop_assert!(g.value(y).data.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn soft_gumbel_rows_are_distributions(seed in any::<u64>(), log_temp in -3.0f64..2.0) {
        let mut r = support::rng(seed);
        let logits = support::random_tensor(&mut r, 4, 7, 3.0);
        let (picks, soft) = gumbel_decode(&logits, log_temp, &mut r, false);
        prop_assert_eq!(picks.len(), 4);
        for row in 0..4 {
            prop_assert!((soft.row(row).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }
}

#[test]
fn wkv_special_cases() {
    let (out, _, _) = wkv_forward(&[-0.3, -1.0], &[0.4, 2.0], &[1.5, -2.5], 1);
    assert_eq!(out, vec![1.5, -2.5]);
    let v = [1.0, 4.0, -2.0, 3.0];
    let (out, _, _) = wkv_forward(&[0.0], &[0.7; 4], &v, 4);
    for t in 0..4 {
        let mean = v[..=t].iter().sum::<f64>() / (t + 1) as f64;
        assert!((out[t] - mean).abs() < 1e-12);
    }
}

#[test]
fn saturated_receptance_leaves_the_residual() {
    let mut r = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let ids = TimeMixIds::register(&mut store, "tm", 3, &mut r);
    // a large negative receptance closes the gate on every position
    *store.get_mut(ids.mu_r) = Tensor::filled(1, 3, 1.0);
    *store.get_mut(ids.w_r) = Tensor::filled(3, 3, -1e4);
    let x = Tensor::filled(4, 3, 1.0);
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = time_mix_forward(&mut g, &store, &ids, xv, &Segments(vec![4])).unwrap();
    assert!(max_abs_diff(g.value(y), &x) < 1e-12);
}

#[test]
fn zero_keys_leave_the_channel_mix_residual() {
    let mut r = ChaCha8Rng::seed_from_u64(5);
    let mut store = ParamStore::new();
    let ids = ChannelMixIds::register(&mut store, "cm", 4, 2, &mut r);
    *store.get_mut(ids.w_k) = Tensor::zeros(4, 4);
    let x = support::random_tensor(&mut r, 3, 4, 1.0);
    let mut g = Graph::new();
    let a = g.input(x.clone());
    let b = g.input(support::random_tensor(&mut r, 3, 4, 1.0));
    let y = channel_mix_forward(&mut g, &store, &ids, &[a, b]).unwrap();
    assert_eq!(g.value(y), &x);
}

#[test]
fn gate_limits() {
    let mut r = support::rng(6);
    let on = support::random_tensor(&mut r, 2, 3, 1.0);
    let os = support::random_tensor(&mut r, 2, 3, 1.0);
    let mut g = Graph::new();
    let (n, zc, zs) = (g.input(on.clone()), g.input(Tensor::zeros(2, 3)), g.input(Tensor::zeros(2, 3)));
    let y = semantic_activation(&mut g, n, zc, zs, None).unwrap();
    assert!(max_abs_diff(g.value(y), &on.map(|v| v / 4.0)) < 1e-15);
    let (big, s) = (g.input(Tensor::filled(2, 3, 1e3)), g.input(os.clone()));
    let y = semantic_activation(&mut g, n, big, s, None).unwrap();
    assert!(max_abs_diff(g.value(y), &on.zip_map(&os, |a, b| a * sigmoid(b))) < 1e-15);
}

#[test]
fn gumbel_frequencies_follow_softmax() {
    let logits = Tensor::row_vector(vec![1.0, 0.0, -0.5, 2.0]);
    let mut r = support::rng(7);
    let mut counts = [0usize; 4];
    let draws = 100_000;
    for _ in 0..draws {
        counts[gumbel_decode(&logits, 0.0, &mut r, true).0[0]] += 1;
    }
    let z: f64 = logits.data.iter().map(|l| l.exp()).sum();
    for (c, l) in counts.iter().zip(&logits.data) {
        let p = l.exp() / z;
        assert!((*c as f64 / draws as f64 - p).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn cold_gumbel_is_one_hot_at_the_perturbed_argmax() {
    let logits = Tensor::row_vector(vec![0.3, 1.2, -0.4]);
    let (picks, soft) = gumbel_decode(&logits, -30.0, &mut support::rng(9), false);
    let (hard_picks, hard) = gumbel_decode(&logits, -30.0, &mut support::rng(9), true);
    assert_eq!(picks, hard_picks);
    assert!(max_abs_diff(&soft, &hard) < 1e-12);
}

#[test]
fn regression_loss_reference_values() {
    let eps = support::random_tensor(&mut support::rng(2), 3, 6, 1.0);
    assert_eq!(denoise_loss(&eps, &eps).unwrap(), 0.0);
    assert!((denoise_loss(&eps.map(|v| v + 1.0), &eps).unwrap() - 1.0).abs() < 1e-12);
    assert!(denoise_loss(&eps, &Tensor::zeros(2, 6)).is_err());
}

fn small_model(parameterization: Parameterization) -> (Config, SemanticEncoders, Denoiser) {
    let mut config = Config::default();
    config.model.dim = 6;
    config.model.layers = 2;
    config.schedule.steps = 10;
    let jsp = SemanticEncoders::new(config.jsp_config());
    let den_config = musicdiff::denoiser::DenoiserConfig { parameterization, ..config.denoiser() };
    let den = if parameterization == Parameterization::Epsilon {
        Denoiser::zeroed(den_config, config.noise_schedule().unwrap())
    } else {
        Denoiser::new(den_config, config.noise_schedule().unwrap())
    };
    (config, jsp, den)
}

fn input(n: usize, t: usize) -> DenoiseInput {
    let cond = (0..n).map(|i| CondRow { chord: (i % 49) as u8, section: (i % 10) as u8, onset: (i % 16) as u8, bar_offset: 0 }).collect();
    DenoiseInput::new(Segments(vec![n]), cond, vec![t]).unwrap()
}

#[test]
fn zero_network_loss_is_the_noise_second_moment() {
    let (_, jsp, den) = small_model(Parameterization::Epsilon);
    let frozen = jsp.frozen();
    let mut r = support::rng(10);
    let (n, d) = (32, den.dim());
    let mut total = 0.0;
    let trials = 200;
    for _ in 0..trials {
        let z = standard_normal(n, 3 * d, &mut r);
        let eps = standard_normal(n, 3 * d, &mut r);
        let pred = den.predict_noise(&frozen, &z, &input(n, 5)).unwrap();
        assert!(pred.data.iter().all(|&v| v == 0.0));
        // per-position squared norm over all three blocks
        total += denoise_loss(&pred, &eps).unwrap() * 3.0 * d as f64;
    }
    let mean = total / trials as f64;
    assert!((mean / (3 * d) as f64 - 1.0).abs() < 0.02, "E|eps|^2 per position {mean}");
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let (_, jsp, den) = small_model(Parameterization::Categorical);
    let frozen = jsp.frozen();
    let z = standard_normal(7, 18, &mut support::rng(11));
    let a = den.predict_noise(&frozen, &z, &input(7, 3)).unwrap();
    assert_eq!(a.shape(), z.shape());
    assert_eq!(a, den.predict_noise(&frozen, &z, &input(7, 3)).unwrap());
    assert!(den.predict_noise(&frozen, &z, &input(7, 11)).is_err());
}

use hsics_core::encoder::{
    as_measurement_matrix, encode, encode_int8, fake_quantize, init_weights, qat_forward, quantize_pq, shape_for_rate,
    EncoderConfig,
};
use hsics_core::substream;
use hsics_tensor::{Shape4, Tape, Tensor};
use nalgebra::DVector;
use proptest::prelude::*;
use rand::Rng;

fn random_tensor(shape: Shape4, seed: u64, lo: f32, hi: f32) -> Tensor<f32> {
    let mut rng = substream(seed, 3);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(lo..hi))
}

fn geometry() -> impl Strategy<Value = EncoderConfig> {
    (1usize..6, 1usize..10, 1usize..5, 1usize..4, 1usize..3, 1usize..3, 1usize..3, 0usize..2, 1usize..5)
        .prop_filter_map("kernel must fit", |(bands, sh, sw, kh, kw, s_h, s_w, pad, b)| {
            let kh = kh.min(sh + 2 * pad);
            EncoderConfig::explicit(bands, (sh, sw), (kh, kw.min(sw)), (s_h, s_w), (pad, 0), b).ok()
        })
}

fn max_rel(a: &[f32], b: &[f64]) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-6);
    a.iter().zip(b).fold(0.0f64, |m, (&x, &y)| m.max((x as f64 - y).abs())) / scale
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn encode_is_linear(cfg in geometry(), seed in any::<u64>(), alpha in -2.0f32..2.0, beta in -2.0f32..2.0) {
        let w = init_weights(&cfg, &mut substream(seed, 0));
        let x = random_tensor(cfg.stripe_shape(1), seed, 0.0, 1.0);
        let y = random_tensor(cfg.stripe_shape(1), seed ^ 1, 0.0, 1.0);
        let mix = Tensor::from_vec(
            x.shape(),
            x.data().iter().zip(y.data()).map(|(a, b)| alpha * a + beta * b).collect(),
        ).unwrap();
        let lhs = encode(&mix, &w, &cfg).unwrap();
        let (zx, zy) = (encode(&x, &w, &cfg).unwrap(), encode(&y, &w, &cfg).unwrap());
        let rhs: Vec<f64> = zx.data().iter().zip(zy.data())
            .map(|(a, b)| alpha as f64 * *a as f64 + beta as f64 * *b as f64)
            .collect();
        prop_assert!(max_rel(lhs.data(), &rhs) < 1e-5);
    }

    #[test]
    fn encode_equals_measurement_matrix_product(cfg in geometry(), seed in any::<u64>()) {
        let w = init_weights(&cfg, &mut substream(seed, 0));
        let x = random_tensor(cfg.stripe_shape(1), seed, 0.0, 1.0);
        let psi = as_measurement_matrix(&w, &cfg).unwrap();
        prop_assert_eq!(psi.shape(), (cfg.b * cfg.h * cfg.w, cfg.bands * cfg.stripe_h * cfg.stripe_w));
        let v = DVector::from_iterator(x.len(), x.data().iter().map(|&v| v as f64));
        let z = encode(&x, &w, &cfg).unwrap();
        prop_assert!(max_rel(z.data(), (&psi * v).as_slice()) < 1e-5);
    }

    #[test]
    fn zero_stripe_measures_zero(cfg in geometry(), seed in any::<u64>()) {
        let w = init_weights(&cfg, &mut substream(seed, 0));
        let zero = Tensor::zeros(cfg.stripe_shape(1));
        prop_assert!(encode(&zero, &w, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
        let q = quantize_pq(&w).unwrap();
        prop_assert!(encode_int8(&zero, &q, &cfg).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pq_rounding_bound(seed in any::<u64>(), n in 1usize..200, spread in 1e-3f32..10.0) {
        let w = random_tensor(Shape4::new(1, 1, 1, n), seed, -spread, spread);
        let q = quantize_pq(&w).unwrap();
        prop_assert!(q.codes.iter().all(|&c| c != i8::MIN));
        let back = q.dequantize();
        for (a, b) in w.data().iter().zip(back.data()) {
            prop_assert!((a - b).abs() <= q.scale / 2.0 * (1.0 + 1e-5));
        }
        let again = quantize_pq(&back).unwrap();
        prop_assert_eq!(again.codes, q.codes);
    }

    #[test]
    fn int8_error_within_first_order_budget(cfg in geometry(), seed in any::<u64>()) {
        let w = init_weights(&cfg, &mut substream(seed, 0));
        let x = random_tensor(cfg.stripe_shape(1), seed, 0.0, 1.0);
        let q = quantize_pq(&w).unwrap();
        let exact = encode(&x, &w, &cfg).unwrap();
        let approx = encode_int8(&x, &q, &cfg).unwrap();
        let (sw, sx) = (q.scale as f64, 1.0 / 255.0);
        let sum_x: f64 = x.data().iter().map(|&v| v as f64).sum();
        let sum_w: f64 = w.data().iter().map(|&v| (v as f64).abs()).sum();
        let taps = (cfg.bands * cfg.k_h * cfg.k_w) as f64;
        let budget = sw * sum_x + sx * sum_w + taps * sw * sx;
        for (a, b) in exact.data().iter().zip(approx.data()) {
            prop_assert!(((a - b) as f64).abs() <= budget, "{} vs {} budget {}", a, b, budget);
        }
    }
}

#[test]
fn one_by_one_kernel_has_one_tap_per_row() {
    let cfg = EncoderConfig::explicit(3, (4, 2), (1, 1), (1, 1), (0, 0), 3).unwrap();
    let w = Tensor::from_fn(cfg.weight_shape(), |o, c, _, _| if o == c { 2.5 } else { 0.0 });
    let psi = as_measurement_matrix(&w, &cfg).unwrap();
    assert_eq!(psi.shape(), (24, 24));
    for r in 0..24 {
        let nz: Vec<usize> = (0..24).filter(|&c| psi[(r, c)] != 0.0).collect();
        assert_eq!(nz, vec![r]);
        assert_eq!(psi[(r, r)], 2.5);
    }
}

#[test]
fn fifty_random_inputs_through_one_matrix() {
    let cfg = shape_for_rate(32, 64, 4, 0.01).unwrap();
    let w = init_weights(&cfg, &mut substream(11, 0));
    let psi = as_measurement_matrix(&w, &cfg).unwrap();
    for i in 0..50 {
        let x = random_tensor(cfg.stripe_shape(1), 100 + i, 0.0, 1.0);
        let v = DVector::from_iterator(x.len(), x.data().iter().map(|&v| v as f64));
        let z = encode(&x, &w, &cfg).unwrap();
        assert!(max_rel(z.data(), (&psi * v).as_slice()) < 1e-5);
    }
}

/// The floor in `b = floor(B s_r r)` can only cost `1 / (B s_r r)` of the
/// target; the 15% band therefore holds whenever `B s_r r >= 1 / 0.15`.
#[test]
fn achieved_rate_tracks_target() {
    for bands in 16..=256 {
        for rate in [0.005, 0.01, 0.05] {
            let Ok(cfg) = shape_for_rate(bands, 64, 4, rate) else {
                assert!(bands as f64 * rate * 16.0 < 1.0);
                continue;
            };
            let reduction = if rate <= 0.01 { 16.0 } else { 4.0 };
            let ideal = bands as f64 * rate * reduction;
            assert_eq!(cfg.b, ideal.floor() as usize);
            let rel = (cfg.achieved_rate() - rate).abs() / rate;
            if ideal >= 1.0 / 0.15 {
                assert!(rel <= 0.15, "B={bands} s_r={rate}: {rel}");
            } else {
                assert!(rel <= 1.0 / ideal + 1e-12, "B={bands} s_r={rate}: {rel}");
            }
        }
    }
}

#[test]
fn qat_forward_matches_pq_encode_and_passes_gradient_straight_through() {
    let cfg = shape_for_rate(32, 16, 4, 0.01).unwrap();
    let w = init_weights(&cfg, &mut substream(2, 0));
    let x = random_tensor(cfg.stripe_shape(2), 5, 0.0, 1.0);
    let mut store = hsics_tensor::ParamStore::new();
    let id = store.add("w", w.clone());

    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let z = qat_forward(&mut tape, xv, &store, id, &cfg).unwrap();
    let expected = encode(&x, &fake_quantize(&w).unwrap(), &cfg).unwrap();
    assert_eq!(tape.value(z).data(), expected.data());
    let loss = tape.sum(z).unwrap();
    let qat_grad = tape.backward(loss).unwrap().get(id).unwrap().clone();

    let mut tape = Tape::new();
    let xv = tape.constant(x);
    let wv = tape.param(&store, id);
    let z = hsics_core::encoder::encode_on_tape(&mut tape, xv, wv, &cfg).unwrap();
    let loss = tape.sum(z).unwrap();
    let float_grad = tape.backward(loss).unwrap().get(id).unwrap().clone();
    assert_eq!(qat_grad.data(), float_grad.data());
}

//! Reverse-mode gradients against central finite differences at 64-bit.

use hsics_tensor::{grad_check, Conv2dParams, ParamStore, Shape4, Tape, Tensor, TensorError};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const STEP: f64 = 1e-5;

fn random(shape: Shape4, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Random values bounded away from zero, so a kink never sits inside the
/// finite-difference stencil.
fn away_from_zero(shape: Shape4, seed: u64) -> Tensor<f64> {
    random(shape, seed).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

#[test]
fn linear_map_is_exact() {
    let x = random(Shape4::new(1, 2, 4, 4), 1);
    let w = random(Shape4::new(3, 2, 3, 3), 2);
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dParams::same(3))?;
            let c = t.constant(random(Shape4::new(1, 3, 4, 4), 3));
            let y = t.mul(y, c)?;
            t.sum(y)
        },
        &[x, w],
        STEP,
    )
    .unwrap();
    // bilinear in (x, w): central differences are exact up to rounding
    assert!(err < 1e-8, "{err}");

    let x = random(Shape4::new(1, 1, 3, 3), 4);
    let err = grad_check(|t, v| { let y = t.scale(v[0], 3.5)?; t.sum(y) }, &[x], STEP).unwrap();
    assert!(err < 1e-10, "{err}");
}

#[test]
fn conv_leaky_mean_composite() {
    let x = random(Shape4::new(2, 3, 5, 4), 5);
    let w = random(Shape4::new(4, 3, 3, 3), 6);
    let b = random(Shape4::new(1, 4, 1, 1), 7);
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), Conv2dParams::new((2, 1), (1, 1), 1))?;
            let y = t.leaky_relu(y, 0.2)?;
            t.mean(y)
        },
        &[x, w, b],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn grouped_strided_conv() {
    let x = random(Shape4::new(1, 8, 9, 3), 8);
    let w = random(Shape4::new(4, 2, 9, 1), 9);
    let c = random(Shape4::new(1, 4, 3, 1), 10);
    let err = grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, Conv2dParams::new((4, 4), (4, 0), 4))?;
            let c = t.constant(c.clone());
            let y = t.mul(y, c)?;
            t.sum(y)
        },
        &[x, w],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn upsample_then_sum() {
    let x = random(Shape4::new(1, 2, 3, 1), 11);
    let c = random(Shape4::new(1, 2, 6, 2), 12);
    let err = grad_check(
        |t, v| {
            let y = t.bilinear_upsample2x(v[0])?;
            let c = t.constant(c.clone());
            let y = t.mul(y, c)?;
            t.sum(y)
        },
        &[x.clone()],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-6, "{err}");
    let err = grad_check(|t, v| { let y = t.bilinear_upsample2x(v[0])?; t.sum(y) }, &[x], STEP).unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn leaky_relu_negative_side_slope() {
    let x = Tensor::from_vec(Shape4::SCALAR, vec![-3.0]).unwrap();
    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    let mut tape = Tape::new();
    let v = tape.param(&store, id);
    let y = tape.leaky_relu(v, 0.2).unwrap();
    let g = tape.backward(y).unwrap();
    assert_eq!(g.get(id).unwrap().data()[0], 0.2);
    let err = grad_check(|t, v| t.leaky_relu(v[0], 0.2), &[x], STEP).unwrap();
    assert!(err < 1e-8);

    let x = away_from_zero(Shape4::new(1, 2, 3, 3), 13);
    let err = grad_check(|t, v| { let y = t.leaky_relu(v[0], 0.2)?; let y = t.mul(y, y)?; t.sum(y) }, &[x], STEP).unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn concat_and_elementwise() {
    let a = random(Shape4::new(2, 2, 2, 3), 14);
    let b = random(Shape4::new(2, 3, 2, 3), 15);
    let c = random(Shape4::new(2, 5, 2, 3), 16);
    let err = grad_check(
        |t, v| {
            let y = t.concat_channels(v[0], v[1])?;
            let c = t.constant(c.clone());
            let y = t.mul(y, c)?;
            let y = t.mul(y, y)?;
            t.sum(y)
        },
        &[a.clone(), b],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");

    let d = random(a.shape(), 17);
    let err = grad_check(
        |t, v| {
            let s = t.sub(v[0], v[1])?;
            let p = t.mul(s, v[0])?;
            let q = t.add(p, v[1])?;
            t.mean(q)
        },
        &[a, d],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-4, "{err}");
}

#[test]
fn backward_contracts() {
    let mut store = ParamStore::new();
    let p = store.add("p", random(Shape4::new(1, 2, 2, 2), 18));
    let mut tape = Tape::new();
    let v = tape.param(&store, p);
    let s = tape.sum(v).unwrap();
    tape.backward_into(s, &mut store).unwrap();
    assert!(store.get(p).grad.data().iter().all(|&g| g == 1.0));
    assert_eq!(tape.backward(s).unwrap_err(), TensorError::TapeConsumed);

    // mean of a 2x2 plane: each gradient is 1/4
    let mut store = ParamStore::new();
    let p = store.add("p", Tensor::from_vec(Shape4::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let mut tape = Tape::new();
    let v = tape.param(&store, p);
    let m = tape.mean(v).unwrap();
    assert_eq!(tape.value(m).item().unwrap(), 2.5);
    let g = tape.backward(m).unwrap();
    assert!(g.get(p).unwrap().data().iter().all(|&x| x == 0.25));

    // non-scalar loss and foreign variables
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::zeros(Shape4::new(1, 1, 1, 2)));
    assert!(matches!(tape.backward(c), Err(TensorError::NotScalar { .. })));
    let mut other = Tape::<f64>::new();
    assert!(matches!(other.backward(c), Err(TensorError::ForeignVar(_))));

    // constants receive nothing
    let mut tape = Tape::<f64>::new();
    let c = tape.constant(Tensor::ones(Shape4::new(1, 1, 1, 2)));
    let s = tape.sum(c).unwrap();
    assert!(tape.backward(s).unwrap().is_empty());
}

#[test]
fn sum_of_conv_weight_grad_is_correlation_with_ones() {
    let x = random(Shape4::new(1, 2, 5, 4), 19);
    let mut store = ParamStore::new();
    let p = store.add("w", random(Shape4::new(3, 2, 3, 2), 20));
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let wv = tape.param(&store, p);
    let y = tape.conv2d(xv, wv, None, Conv2dParams::default()).unwrap();
    let s = tape.sum(y).unwrap();
    let g = tape.backward(s).unwrap();
    let g = g.get(p).unwrap();
    // d/dw[o,c,ky,kx] = sum over output positions of x[c, oy+ky, ox+kx]
    for o in 0..3 {
        for c in 0..2 {
            for ky in 0..3 {
                for kx in 0..2 {
                    let mut acc = 0.0;
                    for oy in 0..3 {
                        for ox in 0..3 {
                            acc += x.at(0, c, oy + ky, ox + kx);
                        }
                    }
                    assert!((g.at(o, c, ky, kx) - acc).abs() < 1e-12);
                }
            }
        }
    }
    let err = grad_check(
        |t, v| {
            let xv = t.constant(x.clone());
            let y = t.conv2d(xv, v[0], None, Conv2dParams::default())?;
            t.sum(y)
        },
        &[store.get(p).value.clone()],
        STEP,
    )
    .unwrap();
    assert!(err < 1e-8);
}

#[test]
fn adamw_is_bit_deterministic() {
    use hsics_tensor::{adamw_step, AdamWConfig};
    let run = || {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", random(Shape4::new(2, 3, 3, 3), 21).cast());
        let cfg = AdamWConfig::default();
        for step in 0..5u64 {
            let g: Tensor<f32> = random(Shape4::new(2, 3, 3, 3), 100 + step).cast();
            store.zero_grad();
            store.get_mut(id).grad = g;
            adamw_step(&mut store, &cfg, cfg.lr_at(step));
        }
        store.get(id).value.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    };
    assert_eq!(run(), run());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn conv_gradients_match_finite_differences(
        seed in 0u64..1000,
        k in 1usize..=3,
        stride in 1usize..=2,
        pad in 0usize..=1,
        groups in prop::sample::select(vec![1usize, 2]),
    ) {
        let x = random(Shape4::new(1, 2, 5, 4), seed);
        let w = random(Shape4::new(2, 2 / groups, k, k), seed + 1);
        let c = random(Shape4::new(1, 2, 5, 4), seed + 2);
        let p = Conv2dParams::new((stride, stride), (pad, pad), groups);
        let err = grad_check(
            |t, v| {
                let y = t.conv2d(v[0], v[1], None, p)?;
                let s = t.shape(y);
                let cc = t.constant(c.channel_slice(0, 2).unwrap()
                    .batch_slice(0, 1).unwrap());
                // weight output by a fixed pattern cropped to the output size
                let crop = Tensor::from_fn(s, |n, ch, h, w| cc_at(t.value(cc), n, ch, h, w));
                let cv = t.constant(crop);
                let y = t.mul(y, cv)?;
                t.sum(y)
            },
            &[x, w],
            STEP,
        ).unwrap();
        prop_assert!(err < 1e-4, "err {}", err);
    }

    #[test]
    fn upsample_preserves_constants(v in -5.0f64..5.0, h in 1usize..6, w in 1usize..6) {
        let x = Tensor::full(Shape4::new(1, 2, h, w), v);
        let y = hsics_tensor::ops::bilinear_upsample2x(&x).unwrap();
        prop_assert!(y.data().iter().all(|&u| (u - v).abs() < 1e-12));
    }
}

fn cc_at(t: &Tensor<f64>, n: usize, c: usize, h: usize, w: usize) -> f64 {
    t.at(n, c, h % t.shape().h, w % t.shape().w)
}

#[test]
fn upsample_preserves_mean_of_linear_ramp() {
    // a ramp along rows: the doubled grid averages to the same mean
    let x = Tensor::from_fn(Shape4::new(1, 1, 6, 3), |_, _, h, _| h as f64);
    let y = hsics_tensor::ops::bilinear_upsample2x(&x).unwrap();
    let mx = x.sum() / x.len() as f64;
    let my = y.sum() / y.len() as f64;
    assert!((mx - my).abs() < 1e-12);
}

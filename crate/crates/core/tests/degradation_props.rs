use hsics_core::degradation::{
    add_awgn, apply_mask, draw_training_mask, gen_mask, Mask, MaskKind, MaskSpec, MaskStats, NoiseSpec, PM_ROW_DENSITY,
};
use hsics_core::substream;
use hsics_tensor::{Shape4, Tensor};
use proptest::prelude::*;

fn kind() -> impl Strategy<Value = MaskKind> {
    prop_oneof![Just(MaskKind::Pm), Just(MaskKind::Bm), Just(MaskKind::Cm)]
}

fn spec_and_dims() -> impl Strategy<Value = (MaskSpec, usize, usize, usize)> {
    (kind(), 3usize..12, 1usize..9, 1usize..6, any::<u64>()).prop_flat_map(|(k, b, h, w, seed)| {
        (0..b).prop_flat_map(move |lo| {
            (lo..b).prop_map(move |hi| (MaskSpec::new(k, lo, hi, seed).unwrap(), b, h, w))
        })
    })
}

fn data(shape: Shape4, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = substream(seed, 9);
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(0.0..1.0))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn masks_are_binary_and_confined_to_their_bands((spec, b, h, w) in spec_and_dims()) {
        let m = gen_mask(&spec, b, h, w).unwrap();
        prop_assert_eq!(&m, &gen_mask(&spec, b, h, w).unwrap());
        for c in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let v = m.bits().at(0, c, y, x);
                    prop_assert!(v == 0.0 || v == 1.0);
                    if c < spec.band_lo || c > spec.band_hi {
                        prop_assert_eq!(v, 1.0);
                    }
                }
            }
        }
        let per_band = match spec.kind {
            MaskKind::Cm => Some(h * w),
            MaskKind::Bm => Some((h / 2) * w),
            MaskKind::Pm => None,
        };
        if let Some(p) = per_band {
            prop_assert_eq!(m.zero_count(), p * spec.band_count());
        }
    }

    #[test]
    fn masking_is_idempotent_and_commutes_with_band_slicing((spec, b, h, w) in spec_and_dims(), seed in any::<u64>()) {
        let m = gen_mask(&spec, b, h, w).unwrap();
        let x = data(Shape4::new(2, b, h, w), seed);
        let once = apply_mask(&x, &m).unwrap();
        prop_assert_eq!(&apply_mask(&once, &m).unwrap(), &once);

        let lo = spec.band_lo;
        let count = b - lo;
        let sliced_mask = Mask::from_bits(m.bits().channel_slice(lo, count).unwrap()).unwrap();
        let slice_then_mask = apply_mask(&x.channel_slice(lo, count).unwrap(), &sliced_mask).unwrap();
        prop_assert_eq!(slice_then_mask, once.channel_slice(lo, count).unwrap());
    }

    #[test]
    fn noise_keeps_shape_and_mean(seed in any::<u64>(), snr in 5.0f64..40.0) {
        let z = data(Shape4::new(1, 4, 32, 32), seed);
        let noisy = add_awgn(&z, &NoiseSpec::new(snr, seed).unwrap());
        prop_assert_eq!(noisy.shape(), z.shape());
        let n = z.len() as f64;
        let power = z.data().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / n;
        let sigma = (power / 10f64.powf(snr / 10.0)).sqrt();
        let shift = noisy.data().iter().zip(z.data()).map(|(a, b)| (a - b) as f64).sum::<f64>() / n;
        prop_assert!(shift.abs() <= 4.0 * sigma / n.sqrt(), "shift {} sigma {}", shift, sigma);
    }
}

#[test]
fn training_mask_statistics_over_ten_thousand_draws() {
    let stats = MaskStats::default();
    let bands = 32;
    let mut rng = substream(77, 0);
    let mut emitted = 0usize;
    let mut kinds = [0usize; 3];
    for _ in 0..10_000 {
        if let Some(spec) = draw_training_mask(bands, &stats, &mut rng) {
            emitted += 1;
            assert!(spec.band_count() >= 1 && spec.band_count() <= 6, "{spec:?}");
            assert!(spec.band_hi < bands);
            kinds[match spec.kind {
                MaskKind::Pm => 0,
                MaskKind::Bm => 1,
                MaskKind::Cm => 2,
            }] += 1;
        }
    }
    let frac = emitted as f64 / 10_000.0;
    assert!((frac - 0.2).abs() <= 0.015, "{frac}");
    assert_eq!(kinds[1], 0);
    assert!(kinds[0] > 0 && kinds[2] > 0);
}

#[test]
fn zero_span_statistics_leave_every_sample_clean() {
    let stats = MaskStats { p_affect: 1.0, max_band_frac: 0.0 };
    let mut rng = substream(1, 0);
    assert!((0..100).all(|_| draw_training_mask(32, &stats, &mut rng).is_none()));
}

#[test]
fn pm_coverage_matches_expectation() {
    let (b, h, w, span) = (16, 64, 4, 5);
    let trials = 400;
    let total: usize = (0..trials)
        .map(|seed| gen_mask(&MaskSpec::new(MaskKind::Pm, 3, 3 + span - 1, seed).unwrap(), b, h, w).unwrap().zero_count())
        .sum();
    let per_row = (span * w) as f64;
    let mean = total as f64 / trials as f64;
    let expected = PM_ROW_DENSITY * h as f64 * per_row;
    let sigma = (h as f64 * PM_ROW_DENSITY * (1.0 - PM_ROW_DENSITY)).sqrt() * per_row / (trials as f64).sqrt();
    assert!((mean - expected).abs() <= 3.0 * sigma, "{mean} vs {expected} +- {sigma}");
}

#[test]
fn cm_over_fifty_to_eighty_of_172_bands() {
    let m = gen_mask(&MaskSpec::new(MaskKind::Cm, 50, 80, 0).unwrap(), 172, 8, 4).unwrap();
    assert!((m.missing_fraction() - 31.0 / 172.0).abs() < 1e-12);
    for c in 50..=80 {
        assert!((0..8).all(|y| (0..4).all(|x| m.bits().at(0, c, y, x) == 0.0)));
    }
}

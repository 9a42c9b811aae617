use hsics_core::bitstream::{Bitstream, CompressedStripe, FILE_HEADER_BYTES};
use hsics_core::config::{parse_overrides, Profile, RunConfig};
use hsics_core::decoder::DecoderConfig;
use hsics_core::degradation::{Mask, MaskKind};
use hsics_core::encoder::shape_for_rate;
use hsics_core::evaluate::{encode_cube, evaluate, evaluate_cubes, round_trip, Degrade, Scenario};
use hsics_core::hsi_data::{pushbroom_stripes, reassemble, synth_scene, Dataset, DatasetManifest, HsiCube, Split};
use hsics_core::model::Model;
use hsics_core::substream;
use hsics_core::train::train;
use hsics_tensor::{Shape4, Tensor};
use proptest::prelude::*;
use rand::seq::SliceRandom;

fn tiny_config() -> RunConfig {
    let text = "\
data.bands = 12
data.height = 16
data.width = 8
data.endmembers = 3
data.train = 3
data.val = 1
data.test = 2
dec.n_f = 1
dec.n_base = 4
dec.c_s = 4
dec.frdb_width = 8
train.batch = 3
train.stripes_per_cube = 2
train.epochs = 2
train.val_every = 1
";
    RunConfig::resolve(Some(text), &[]).unwrap()
}

fn tiny_dataset(cfg: &RunConfig) -> Dataset {
    let m = DatasetManifest::plan(cfg.data.seed, cfg.scene_params(), cfg.data.train, cfg.data.val, cfg.data.test);
    Dataset::in_memory(m).unwrap()
}

fn trained(cfg: &RunConfig, data: &Dataset) -> Model {
    train(cfg, data, Model::init(cfg).unwrap(), None).unwrap().0
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn stripes_partition_the_cube(b in 3usize..6, h in 1usize..6, stripe_w in 1usize..4, count in 1usize..5, seed in any::<u64>()) {
        let shape = Shape4::new(1, b, h, stripe_w * count);
        let mut i = seed;
        let data = Tensor::from_fn(shape, |_, _, _, _| {
            i = i.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            (i >> 40) as f32 / (1u64 << 24) as f32
        });
        let cube = HsiCube::new(data, 2.0).unwrap();
        let mut set = pushbroom_stripes(&cube, stripe_w, "c").unwrap();
        prop_assert_eq!(set.stripes.len(), count);
        prop_assert_eq!(&reassemble(&set).unwrap(), &cube);
        set.stripes.shuffle(&mut substream(seed, 0));
        prop_assert_eq!(&reassemble(&set).unwrap(), &cube);
    }

    #[test]
    fn synthetic_cubes_stay_in_range_and_on_the_simplex(k in 2usize..5, seed in any::<u64>()) {
        let scene = synth_scene(k, 8, 12, 10, seed).unwrap();
        prop_assert!(scene.cube.tensor().data().iter().all(|v| (0.0..=1.0).contains(v)));
        for p in 0..12 * 10 {
            let s: f64 = scene.abundances.iter().map(|a| a[p] as f64).sum();
            prop_assert!((s - 1.0).abs() <= 1e-6);
            prop_assert!(scene.abundances.iter().all(|a| a[p] >= 0.0));
        }
    }

    #[test]
    fn config_text_round_trips(
        alpha in 0.0f64..2.0,
        lr in 1e-6f64..1e-2,
        epochs in 1u64..10_000,
        aug in any::<bool>(),
        rate in prop_oneof![Just(0.005), Just(0.01), Just(0.05)],
        full in any::<bool>(),
    ) {
        let profile = if full { "full" } else { "desk" };
        let overrides = parse_overrides(&[
            format!("profile={profile}"),
            format!("loss.alpha={alpha}"),
            format!("opt.lr={lr}"),
            format!("train.epochs={epochs}"),
            format!("train.aug={aug}"),
            format!("enc.rate={rate}"),
        ]).unwrap();
        let cfg = RunConfig::resolve(None, &overrides).unwrap();
        let text = cfg.to_text();
        let again = RunConfig::resolve(Some(&text), &[]).unwrap();
        prop_assert_eq!(again.to_text(), text);
        prop_assert_eq!(again.model_hash(), cfg.model_hash());
        prop_assert_eq!(again.profile, if full { Profile::Full } else { Profile::Desk });
    }
}

#[test]
fn training_and_evaluation_are_bit_reproducible() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let (a, b) = (trained(&cfg, &data), trained(&cfg, &data));
    assert_eq!(a.to_checkpoint().to_bytes().unwrap(), b.to_checkpoint().to_bytes().unwrap());

    let test = data.split(Split::Test);
    for scenario in ["clean", "mask:PM:2-4", "noise:30", "int8:pq"] {
        let s: Scenario = scenario.parse().unwrap();
        let ra = evaluate(&a, &test, &s, 5).unwrap();
        let rb = evaluate(&b, &test, &s, 5).unwrap();
        assert_eq!(ra.csv(), rb.csv(), "{scenario}");
    }
    for int8 in [false, true] {
        assert_eq!(
            encode_cube(&a, test[0].1, int8).unwrap().to_bytes(),
            encode_cube(&b, test[0].1, int8).unwrap().to_bytes()
        );
    }
}

#[test]
fn evaluation_rows_are_consistent() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let model = trained(&cfg, &data);
    let test = data.split(Split::Test);

    let clean = evaluate(&model, &test, &Scenario::Clean, 1).unwrap();
    let empty = evaluate_cubes(&model, &test, &|i| {
        let c = test[i].1;
        Ok(Degrade { mask: Some(Mask::ones(c.bands(), c.height(), c.width())), ..Degrade::default() })
    })
    .unwrap();
    assert_eq!(clean.rows, empty);

    for scenario in ["clean", "mask:CM:3-5", "mask:BM:0-11", "noise:25", "int8:pq"] {
        let r = evaluate(&model, &test, &scenario.parse().unwrap(), 1).unwrap();
        let n = r.rows.len() as f64;
        let psnr = r.rows.iter().map(|x| x.1.psnr).sum::<f64>() / n;
        let rmse = r.rows.iter().map(|x| x.1.rmse).sum::<f64>() / n;
        let sam = r.rows.iter().map(|x| x.1.sam).sum::<f64>() / n;
        assert!((r.mean.psnr - psnr).abs() < 1e-9 && (r.mean.rmse - rmse).abs() < 1e-9 && (r.mean.sam - sam).abs() < 1e-9);
        let csv = r.csv();
        assert!(csv.starts_with("scenario,cube,psnr,rmse,sam\n"));
        assert_eq!(csv.lines().count(), 1 + test.len() + 1);
        assert!(csv.lines().skip(1).all(|l| l.split(',').count() == 5));
    }
}

#[test]
fn bitstream_payload_tracks_the_sampling_rate() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let model = Model::init(&cfg).unwrap();
    let cube = data.split(Split::Test)[0].1;
    let raw = cube.tensor().len() * 4;
    let f32_stream = encode_cube(&model, cube, false).unwrap();
    let i8_stream = encode_cube(&model, cube, true).unwrap();
    let expected = (raw as f64 * model.enc.achieved_rate()).round() as usize;
    assert_eq!(f32_stream.payload_bytes(), expected);
    assert_eq!(i8_stream.payload_bytes() * 4, expected);
    assert!(i8_stream.to_bytes().len() < f32_stream.to_bytes().len());

    let decoded = hsics_core::evaluate::decode_bitstream(&model, &Bitstream::from_bytes(&f32_stream.to_bytes()).unwrap(), 1.0)
        .unwrap();
    assert_eq!(decoded.tensor().shape(), cube.tensor().shape());
}

/// At the 172 x 128 x 256 reference geometry the per-stripe headers add
/// under 1% to the f32 payload.
#[test]
fn header_overhead_at_reference_geometry() {
    let enc = shape_for_rate(172, 128, 4, 0.01).unwrap();
    let stripes: Vec<_> = (0..64)
        .map(|i| CompressedStripe::from_f32(i, &Tensor::zeros(enc.measurement_shape(1))))
        .collect();
    let bs = Bitstream { stripes };
    let raw = 172 * 128 * 256 * 4;
    let payload = bs.payload_bytes();
    assert_eq!(payload as f64, raw as f64 * enc.achieved_rate());
    let overhead = (bs.to_bytes().len() - payload) as f64 / payload as f64;
    assert!(overhead < 0.01, "{overhead}");
    assert!(bs.to_bytes().len() > payload + FILE_HEADER_BYTES);
}

#[test]
fn cm_fifty_to_eighty_reports_its_band_fraction() {
    let enc = shape_for_rate(172, 16, 4, 0.01).unwrap();
    let dec = DecoderConfig { n_f: 0, n_base: 4, c_s: 4, frdb_width: 4, frdb_growth: 2, c_g: 2, b_out: 172 };
    let model = Model::init_parts(enc, dec, 3, [0; 32]).unwrap();
    let cube = synth_scene(3, 172, 16, 8, 4).unwrap().cube;
    let report = evaluate(&model, &[("c", &cube)], &"mask:CM:50-80".parse().unwrap(), 0).unwrap();
    assert!((report.masked_fraction.unwrap() - 31.0 / 172.0).abs() < 1e-12);
    assert!(matches!(report.scenario, Scenario::Mask { kind: MaskKind::Cm, band_lo: 50, band_hi: 80 }));
}

#[test]
fn noise_levels_share_one_realization() {
    let cfg = tiny_config();
    let data = tiny_dataset(&cfg);
    let model = Model::init(&cfg).unwrap();
    let cube = data.split(Split::Test)[0].1;
    let clean = round_trip(&model, cube, &Degrade::default()).unwrap();
    let loud = round_trip(&model, cube, &Degrade { noise: Some((10.0, 9)), ..Degrade::default() }).unwrap();
    let quiet = round_trip(&model, cube, &Degrade { noise: Some((60.0, 9)), ..Degrade::default() }).unwrap();
    let dist = |a: &HsiCube| {
        a.tensor().data().iter().zip(clean.tensor().data()).map(|(x, y)| ((x - y) as f64).powi(2)).sum::<f64>()
    };
    assert!(dist(&quiet) < dist(&loud));
}

use autograd::{Graph, ParamStore, Tensor};
use changecap::captioner::{Decoder, DecoderConfig};
use changecap::datagen::Mask;
use changecap::detector::{detection_loss, predict_mask, reduce_channels, upsample_to_image, Detector, DetectorConfig};
use changecap::encoder::MultiLevelFeatureMap;
use changecap::nn::{normal, Ctx};
use changecap::perceiver::{warp, Perceiver, PerceiverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn maps(rng: &mut ChaCha8Rng, batch: usize, side: usize, c: usize) -> MultiLevelFeatureMap<f64> {
    MultiLevelFeatureMap::new(normal(&[batch, side * side, c], 1.0, rng)).unwrap()
}

#[test]
fn zero_initialised_perceiver_gives_zero_key_change() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let p = Perceiver::new(&mut store, &PerceiverConfig::default(), 16, &mut rng).unwrap();
    let a = maps(&mut rng, 100, 4, 16);
    let b = maps(&mut rng, 100, 4, 16);
    let kc = p.key_change_features(&store, &a, &b).unwrap();
    assert!(kc.values.data().iter().all(|&v| v == 0.0));
    for pair in p.estimate_flows(&store, &a, &b).unwrap() {
        assert!(pair.flow_pre.data().iter().chain(pair.flow_post.data()).all(|&v| v == 0.0));
    }
}

#[test]
fn key_change_is_nonnegative() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for per_level in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let cfg = PerceiverConfig { hidden: 8, per_level_perceiver: per_level, ..PerceiverConfig::default() };
        let p = Perceiver::new(&mut store, &cfg, 16, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, normal(&shape, 0.5, &mut rng));
        }
        let kc = p.key_change_features(&store, &maps(&mut rng, 8, 4, 16), &maps(&mut rng, 8, 4, 16)).unwrap();
        assert!(kc.values.data().iter().all(|&v| v >= 0.0));
        assert!(kc.values.data().iter().any(|&v| v > 0.0));
    }
}

#[test]
fn unit_flow_shifts_columns() {
    let side = 4;
    let n = side * side;
    // feature = 10 * column + row
    let f = Tensor::from_fn(&[1, n, 1], |i| (10 * (i % side) + i / side) as f64);
    let flow = Tensor::from_fn(&[1, 2, side, side], |i| if i < n { 1.0 } else { 0.0 });
    let out = warp(&f, &flow).unwrap();
    for y in 0..side {
        for x in 0..side {
            let src = (x + 1).min(side - 1);
            assert_eq!(out.data()[y * side + x], (10 * src + y) as f64);
        }
    }
    let half = Tensor::from_fn(&[1, 2, side, side], |i| if i >= n { 0.5 } else { 0.0 });
    let out = warp(&f, &half).unwrap();
    assert_eq!(out.data()[side], 1.5);
}

#[test]
fn constant_field_survives_upsampling() {
    let c = Tensor::<f64>::full(&[2, 3, 4, 4], 0.7);
    let up = upsample_to_image(&c, 16, 16).unwrap();
    assert!(up.data().iter().all(|&v| v == 0.7));
}

#[test]
fn per_pixel_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(&mut store, &DetectorConfig::default(), 16, &mut rng).unwrap();
    let feats: Tensor<f64> = normal(&[2, 16, 16], 3.0, &mut rng);
    let reduced = reduce_channels(&store, &det, &feats).unwrap();
    let chw = reduced.permute(&[0, 2, 1]).reshape(&[2, 32, 4, 4]);
    let pred = predict_mask(&store, &det, &upsample_to_image(&chw, 16, 16).unwrap()).unwrap();
    let p = pred.probabilities;
    for b in 0..2 {
        for i in 0..256 {
            let s = p.data()[b * 512 + i] + p.data()[b * 512 + 256 + i];
            assert!((s - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn half_probability_costs_ln2() {
    let mut m = Mask::zeros(4, 4);
    m.data[3] = 1;
    m.data[7] = 1;
    let l = detection_loss(&Tensor::<f64>::full(&[4, 4], 0.5), &m, 1e-7).unwrap();
    assert!((l - std::f64::consts::LN_2).abs() < 1e-9);
}

#[test]
fn decoder_is_causal() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let cfg = DecoderConfig { d_model: 16, layers: 2, heads: 2, max_len: 10, max_context: 20, ..DecoderConfig::default() };
    let mut store = ParamStore::<f64>::new();
    let dec = Decoder::new(&mut store, &cfg, 12, &mut rng).unwrap();
    let prefix: Tensor<f64> = normal(&[4, 16], 1.0, &mut rng);
    let run = |ids: &[usize]| {
        let g = Graph::new();
        let cx = Ctx::new(&g, &store);
        dec.forward(&cx, Some(cx.constant(prefix.clone())), ids).unwrap().value().as_ref().clone()
    };
    let a = run(&[1, 4, 5, 6, 7]);
    let b = run(&[1, 4, 5, 9, 3]);
    let v = 12;
    assert_eq!(&a.data()[..3 * v], &b.data()[..3 * v]);
    assert_ne!(&a.data()[3 * v..4 * v], &b.data()[3 * v..4 * v]);
}

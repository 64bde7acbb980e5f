use autograd::gradcheck::{max_relative_error, numeric_param_grads};
use autograd::{Graph, ParamId, ParamStore, Tensor};
use changecap::captioner::{caption_loss, Decoder, DecoderConfig};
use changecap::datagen::Mask;
use changecap::detector::{Detector, DetectorConfig};
use changecap::encoder::{Encoder, EncoderConfig};
use changecap::nn::{normal, Ctx};
use changecap::perceiver::{Perceiver, PerceiverConfig};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const TOL: f64 = 1e-4;

fn ids_with_prefix(store: &ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect()
}

fn check(store: &ParamStore<f64>, ids: &[ParamId], coords: Option<usize>, f: impl Fn(&ParamStore<f64>, bool) -> (f64, Option<autograd::Grads<f64>>)) -> f64 {
    let analytic = f(store, true).1.unwrap();
    let numeric = numeric_param_grads(store, ids, 1e-6, coords, |s| f(s, false).0);
    max_relative_error(&analytic, &numeric)
}

#[test]
fn encoder_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cfg = EncoderConfig { patch_size: 4, channels: 8, depth: 4, tap_interval: 1, heads: 2, mlp_ratio: 2, trainable: true };
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut store, &cfg, 16, 16, &mut rng).unwrap();
    let image: Tensor<f64> = normal(&[16, 16, 3], 1.0, &mut rng);
    let weights: Tensor<f64> = normal(&[16, 32], 1.0, &mut rng);
    let ids = ids_with_prefix(&store, "encoder.");
    let err = check(&store, &ids, Some(6), |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let f = enc.encode_image(&cx, &image).unwrap();
        let loss = f.mul(cx.constant(weights.clone())).sum();
        let v = loss.item();
        (v, grad.then(|| g.backward(loss).into_params()))
    });
    assert!(err < TOL, "encoder rel err {err}");
}

#[test]
fn perceiver_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut store = ParamStore::new();
    let cfg = PerceiverConfig { hidden: 6, ..PerceiverConfig::default() };
    let p = Perceiver::new(&mut store, &cfg, 8, &mut rng).unwrap();
    // nonzero flows keep sampling points off the integer grid where bilinear
    // interpolation has kinks
    let w2 = store.find("perceiver.flow.conv2.w").unwrap();
    let shape = store.value(w2).shape().to_vec();
    store.set_value(w2, normal(&shape, 0.3, &mut rng));
    let f_pre: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let f_post: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let ids = ids_with_prefix(&store, "perceiver.");
    let err = check(&store, &ids, Some(40), |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let out = p.forward(&cx, cx.constant(f_pre.clone()), cx.constant(f_post.clone()), 4);
        let loss = out.key_change.sum();
        (loss.item(), grad.then(|| g.backward(loss).into_params()))
    });
    assert!(err < TOL, "perceiver rel err {err}");
}

#[test]
fn decoder_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = DecoderConfig { d_model: 8, layers: 2, heads: 2, mlp_ratio: 2, max_len: 8, max_context: 20, ..DecoderConfig::default() };
    let mut store = ParamStore::new();
    let dec = Decoder::new(&mut store, &cfg, 11, &mut rng).unwrap();
    let prefix: Tensor<f64> = normal(&[3, 8], 1.0, &mut rng);
    let input = [1, 5, 7, 4, 9];
    let target = [5, 7, 4, 9, 2];
    let ids = ids_with_prefix(&store, "decoder.");
    let err = check(&store, &ids, Some(8), |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let logits = dec.forward(&cx, Some(cx.constant(prefix.clone())), &input).unwrap();
        let loss = caption_loss(logits, &target, 0);
        (loss.item(), grad.then(|| g.backward(loss).into_params()))
    });
    assert!(err < TOL, "decoder rel err {err}");
}

#[test]
fn detection_branch_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &DetectorConfig { c_mid: 6, ..DetectorConfig::default() }, 8, &mut rng).unwrap();
    let features: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let mask = Mask::from_rects(8, 8, &[changecap::datagen::Rect { x: 2, y: 1, w: 4, h: 3 }]);
    let ids = ids_with_prefix(&store, "detector.");
    let err = check(&store, &ids, None, |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let probs = det.forward(&cx, cx.constant(features.clone()), 4, 8, 8);
        let loss = det.loss(probs, &mask);
        (loss.item(), grad.then(|| g.backward(loss).into_params()))
    });
    assert!(err < TOL, "detector rel err {err}");
}

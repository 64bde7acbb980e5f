//! Acceptance suite. Prints one PASS/FAIL line per criterion. Failures make
//! the process exit non-zero only when `ACCEPTANCE_STRICT` is set.

#[path = "../../core/tests/support/metric_oracle.rs"]
mod oracle;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use autograd::gradcheck::{max_relative_error, numeric_param_grads};
use autograd::{Graph, ParamId, ParamStore, Tensor};
use changecap::captioner::{splice_image_tokens, ImageTokenMode, InstructionTemplate, Piece};
use changecap::config::RunConfig;
use changecap::datagen::{build_vocab, generate_dataset, Mask, Rect};
use changecap::detector::{detection_loss, predict_mask, reduce_channels, upsample_to_image, Detector, DetectorConfig};
use changecap::encoder::MultiLevelFeatureMap;
use changecap::metrics::{bleu, cider_d, meteor_stem, rouge_l, s_star_m};
use changecap::model::ChangeCaptioner;
use changecap::nn::{normal, Ctx};
use changecap::perceiver::{Perceiver, PerceiverConfig};
use changecap::trainer::{corpus_vocab, default_templates, dwa_weights, fit, pretrain_lm, FitOptions, TaskWeightState};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("S*_m arithmetic on the published comparison table", published_s_star_m),
        ("metric oracle equivalence", metric_oracles),
        ("DWA unit law", dwa_law),
        ("perceiver invariants", perceiver_invariants),
        ("detection head", detection_head),
        ("splice law", splice_law),
        ("frozen-decoder and encoder-toggle laws", frozen_laws),
        ("end-to-end overfit", overfit),
        ("ablation harness", ablation),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()));
            Err(format!("panicked: {}", msg.unwrap_or_default()))
        });
        let secs = start.elapsed().as_secs_f64();
        let (mark, detail) = match outcome {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("criterion {:>2} {mark} {name}: {detail} [{secs:.1}s]", i + 1);
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed > 0 && std::env::var_os("ACCEPTANCE_STRICT").is_some() {
        std::process::exit(1);
    }
}

// BLEU-4, METEOR, ROUGE-L, CIDEr and the printed S*_m of each table row.
const TABLE: [[f64; 5]; 7] = [
    [60.44, 38.76, 72.63, 130.00, 75.45],
    [63.54, 38.82, 73.72, 136.44, 78.13],
    [64.09, 39.59, 74.57, 136.02, 78.57],
    [62.87, 39.93, 74.69, 137.05, 78.63],
    [64.39, 40.03, 75.12, 136.61, 79.03],
    [65.24, 39.91, 75.24, 136.56, 79.24],
    [65.30, 39.42, 75.47, 138.25, 79.61],
];

fn published_s_star_m() -> Outcome {
    let mut worst: f64 = 0.0;
    for (i, r) in TABLE.iter().enumerate() {
        let lib = s_star_m(r[0], r[1], r[2], r[3]);
        let by_hand = (r[0] + r[1] + r[2] + r[3]) / 4.0;
        ensure!((lib - by_hand).abs() < 1e-12, "row {}: library {lib} vs {by_hand}", i + 1);
        let err = (lib - r[4]).abs();
        ensure!(err <= 0.015, "row {}: {lib:.4} vs printed {}", i + 1, r[4]);
        worst = worst.max(err);
    }
    Ok(format!("7 rows, max deviation {worst:.4}"))
}

fn metric_oracles() -> Outcome {
    let (c, r) = oracle::corpus();
    let mut worst: f64 = 0.0;
    let mut compare = |name: String, lib: f64, ora: f64| -> Result<(), String> {
        let err = (lib - ora).abs();
        worst = worst.max(err);
        ensure!(err < 1e-6, "{name}: {lib} vs oracle {ora}");
        Ok(())
    };
    for n in 1..=4 {
        compare(format!("BLEU-{n}"), bleu(&c, &r, n).unwrap() / 100.0, oracle::oracle_bleu(&c, &r, n))?;
    }
    compare("ROUGE-L".into(), rouge_l(&c, &r).unwrap() / 100.0, oracle::oracle_rouge(&c, &r))?;
    compare("CIDEr-D".into(), cider_d(&c, &r).unwrap() / 100.0, oracle::oracle_cider(&c, &r))?;
    compare("METEOR".into(), meteor_stem(&c, &r).unwrap() / 100.0, oracle::oracle_meteor(&c, &r))?;
    Ok(format!("{} sentences, 7 metrics, max deviation {worst:.1e}", c.len()))
}

fn dwa_state(l1: [f64; 2], l2: [f64; 2], t: f64) -> TaskWeightState {
    let mut s = TaskWeightState::new(t);
    s.record([l1[0], l2[0]]);
    s.record([l1[1], l2[1]]);
    s
}

fn dwa_oracle(l1: [f64; 2], l2: [f64; 2], t: f64) -> (f64, f64) {
    let e1 = (l1[1] / l1[0] / t).exp();
    let e2 = (l2[1] / l2[0] / t).exp();
    (2.0 * e1 / (e1 + e2), 2.0 * e2 / (e1 + e2))
}

fn dwa_law() -> Outcome {
    let (a, b) = dwa_weights(&dwa_state([2.0, 1.0], [1.0, 1.0], 0.2));
    let (oa, ob) = dwa_oracle([2.0, 1.0], [1.0, 1.0], 0.2);
    ensure!((a - oa).abs() < 1e-3 && (b - ob).abs() < 1e-3, "({a}, {b}) vs oracle ({oa}, {ob})");
    ensure!((a - 0.1517).abs() < 1e-3 && (b - 1.8483).abs() < 1e-3, "worked example gave ({a}, {b})");
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let h: [f64; 4] = std::array::from_fn(|_| rng.random_range(0.01..10.0));
        let c = 10f64.powf(rng.random_range(-3.0..3.0));
        let (x, y) = dwa_weights(&dwa_state([h[0], h[1]], [h[2], h[3]], 0.2));
        ensure!((x + y - 2.0).abs() < 1e-9, "sum {} for history {h:?}", x + y);
        let (sx, sy) = dwa_weights(&dwa_state([c * h[0], c * h[1]], [h[2], h[3]], 0.2));
        ensure!((x - sx).abs() < 1e-9 && (y - sy).abs() < 1e-9, "scaling by {c} moved λ for {h:?}");
    }
    Ok(format!("λ = ({a:.4}, {b:.4}); 1000 random histories sum to 2 and are scale invariant"))
}

fn feature_maps(rng: &mut ChaCha8Rng, batch: usize, side: usize, c: usize) -> MultiLevelFeatureMap<f64> {
    MultiLevelFeatureMap::new(normal(&[batch, side * side, c], 1.0, rng)).unwrap()
}

fn prefixed(store: &ParamStore<f64>, prefix: &str) -> Vec<ParamId> {
    store.ids().filter(|&id| store.get(id).name.starts_with(prefix)).collect()
}

fn gradient_error(
    store: &ParamStore<f64>,
    ids: &[ParamId],
    f: impl Fn(&ParamStore<f64>, bool) -> (f64, Option<autograd::Grads<f64>>),
) -> f64 {
    let analytic = f(store, true).1.unwrap();
    let numeric = numeric_param_grads(store, ids, 1e-6, None, |s| f(s, false).0);
    max_relative_error(&analytic, &numeric)
}

fn perceiver_invariants() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mut store = ParamStore::<f64>::new();
    let p = Perceiver::new(&mut store, &PerceiverConfig::default(), 16, &mut rng).unwrap();
    let kc = p.key_change_features(&store, &feature_maps(&mut rng, 100, 4, 16), &feature_maps(&mut rng, 100, 4, 16)).unwrap();
    ensure!(kc.values.data().iter().all(|&v| v == 0.0), "zero-initialised flow net gave nonzero F_kc");

    for per_level in [false, true] {
        let mut store = ParamStore::<f64>::new();
        let cfg = PerceiverConfig { hidden: 8, per_level_perceiver: per_level, ..PerceiverConfig::default() };
        let p = Perceiver::new(&mut store, &cfg, 16, &mut rng).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            let shape = store.value(id).shape().to_vec();
            store.set_value(id, normal(&shape, 0.5, &mut rng));
        }
        let kc = p.key_change_features(&store, &feature_maps(&mut rng, 8, 4, 16), &feature_maps(&mut rng, 8, 4, 16)).unwrap();
        ensure!(kc.values.data().iter().all(|&v| v >= 0.0), "negative F_kc (per-level {per_level})");
    }

    let mut store = ParamStore::new();
    let p = Perceiver::new(&mut store, &PerceiverConfig { hidden: 6, ..PerceiverConfig::default() }, 8, &mut rng).unwrap();
    let w2 = store.find("perceiver.flow.conv2.w").unwrap();
    let shape = store.value(w2).shape().to_vec();
    store.set_value(w2, normal(&shape, 0.3, &mut rng));
    let f_pre: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let f_post: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let ids = prefixed(&store, "perceiver.flow.");
    let err = gradient_error(&store, &ids, |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let loss = p.forward(&cx, cx.constant(f_pre.clone()), cx.constant(f_post.clone()), 4).key_change.sum();
        (loss.item(), grad.then(|| g.backward(loss).into_params()))
    });
    ensure!(err < 1e-4, "flow-net gradient rel err {err:.2e}");
    Ok(format!("F_kc ≡ 0 on 100 pairs, F_kc ≥ 0, flow-net gradient rel err {err:.1e}"))
}

fn detection_head() -> Outcome {
    let c = Tensor::<f64>::full(&[2, 3, 4, 4], 0.7);
    let up = upsample_to_image(&c, 16, 16).unwrap();
    ensure!(up.data().iter().all(|&v| v == 0.7), "constant field not preserved");

    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut store = ParamStore::<f64>::new();
    let det = Detector::new(&mut store, &DetectorConfig::default(), 16, &mut rng).unwrap();
    let feats: Tensor<f64> = normal(&[2, 16, 16], 3.0, &mut rng);
    let reduced = reduce_channels(&store, &det, &feats).unwrap();
    let chw = reduced.permute(&[0, 2, 1]).reshape(&[2, 32, 4, 4]);
    let p = predict_mask(&store, &det, &upsample_to_image(&chw, 16, 16).unwrap()).unwrap().probabilities;
    let mut worst: f64 = 0.0;
    for b in 0..2 {
        for i in 0..256 {
            worst = worst.max((p.data()[b * 512 + i] + p.data()[b * 512 + 256 + i] - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "softmax off by {worst:.2e}");

    let mut m = Mask::zeros(4, 4);
    m.data[5] = 1;
    let l = detection_loss(&Tensor::<f64>::full(&[4, 4], 0.5), &m, 1e-7).unwrap();
    ensure!((l - std::f64::consts::LN_2).abs() < 1e-9, "L_det(0.5) = {l}");

    let mut store = ParamStore::new();
    let det = Detector::new(&mut store, &DetectorConfig { c_mid: 6, ..DetectorConfig::default() }, 8, &mut rng).unwrap();
    let features: Tensor<f64> = normal(&[16, 8], 1.0, &mut rng);
    let mask = Mask::from_rects(8, 8, &[Rect { x: 2, y: 1, w: 4, h: 3 }]);
    let ids = prefixed(&store, "detector.");
    let err = gradient_error(&store, &ids, |s, grad| {
        let g = Graph::new();
        let cx = Ctx::new(&g, s);
        let loss = det.loss(det.forward(&cx, cx.constant(features.clone()), 4, 8, 8), &mask);
        (loss.item(), grad.then(|| g.backward(loss).into_params()))
    });
    ensure!(err < 1e-4, "branch gradient rel err {err:.2e}");
    Ok(format!("bilinear exact, softmax dev {worst:.1e}, L_det(0.5) = ln 2, gradient rel err {err:.1e}"))
}

const WORDS: [&str; 8] = ["describe", "the", "change", "between", "two", "images", "what", "happened"];

fn splice_law() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let vocab = build_vocab(&WORDS);
    for case in 0..200 {
        let mode = ImageTokenMode::ALL[case % 3];
        let mut words: Vec<&str> = (0..rng.random_range(0..12)).map(|_| WORDS[rng.random_range(0..WORDS.len())]).collect();
        words.insert(rng.random_range(0..=words.len()), "<image>");
        let (n, d) = (rng.random_range(1..20), rng.random_range(1..6));
        let tpl = InstructionTemplate::expand(&words.join(" "), mode).unwrap();
        let pieces = tpl.pieces(&vocab);
        let m = tpl.len();
        let text_rows = pieces.iter().filter(|p| matches!(p, Piece::Text(_))).count();
        let text = Tensor::from_fn(&[text_rows, d], |i| i as f64 + 0.25);
        let visual: Vec<Tensor<f64>> = (0..mode.slots()).map(|s| Tensor::from_fn(&[n, d], |i| -1.0 - (s * 1000 + i) as f64)).collect();
        let out = splice_image_tokens(&pieces, &text, &visual).unwrap();
        let rows = out.vectors.rows();
        ensure!(rows == m - mode.slots() + mode.slots() * n, "case {case}: {rows} rows");
        let mut visual_row = vec![false; rows];
        for span in &out.visual_spans {
            span.clone().for_each(|r| visual_row[r] = true);
        }
        let kept: Vec<f64> = (0..rows).filter(|&r| !visual_row[r]).flat_map(|r| out.vectors.data()[r * d..(r + 1) * d].to_vec()).collect();
        ensure!(kept == text.data(), "case {case}: text rows altered");
    }
    Ok("200 random templates over change, bitemporal and both".into())
}

fn named_values(store: &ParamStore<f64>, prefix: &str) -> Vec<(String, Vec<f64>)> {
    store.iter().filter(|(_, p)| p.name.starts_with(prefix)).map(|(_, p)| (p.name.clone(), p.value.data().to_vec())).collect()
}

fn frozen_laws() -> Outcome {
    let mut cfg = RunConfig::default();
    cfg.data.image_size = 24;
    cfg.data.num_train = 8;
    cfg.data.num_val = 0;
    cfg.data.num_test = 0;
    cfg.model.encoder.channels = 8;
    cfg.model.encoder.heads = 2;
    cfg.model.perceiver.hidden = 8;
    cfg.model.decoder.d_model = 16;
    cfg.model.decoder.layers = 1;
    cfg.model.decoder.heads = 2;
    cfg.model.detector.c_mid = 8;
    cfg.lm.epochs = 2;
    cfg.lm.batch_size = 8;
    cfg.train.epochs = 2;
    cfg.train.batch_size = 4;
    let samples = generate_dataset(&cfg.data).unwrap();
    let groups: Vec<Vec<String>> = samples.iter().map(|s| s.captions.clone()).collect();
    let templates = default_templates();
    let vocab = corpus_vocab(&groups.concat(), &templates);
    let lm = pretrain_lm::<f64>(&groups, vocab, &templates, &cfg.model.decoder, &cfg.lm).unwrap().checkpoint(&cfg, templates);

    let decoder = named_values(&lm.store, "decoder.");
    let out = fit(&samples, &cfg, Some(&lm), None, FitOptions::default()).unwrap();
    ensure!(named_values(&out.trained.store, "decoder.") == decoder, "frozen decoder changed");

    cfg.set_finetune_vision(false);
    let mut init = ParamStore::<f64>::new();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    ChangeCaptioner::new(&mut init, &cfg.model, cfg.variant(), lm.manifest.vocab.clone(), None, (24, 24), &mut rng).unwrap();
    let out = fit(&samples, &cfg, Some(&lm), None, FitOptions::default()).unwrap();
    ensure!(named_values(&out.trained.store, "encoder.") == named_values(&init, "encoder."), "frozen encoder changed");
    ensure!(
        named_values(&out.trained.store, "projection.") != named_values(&init, "projection."),
        "projection did not train"
    );
    Ok(format!("{} decoder and {} encoder tensors bit-identical after 2 epochs", decoder.len(), named_values(&init, "encoder.").len()))
}

fn changecap(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_changecap")).arg("--quiet").args(args).output().map_err(|e| e.to_string())?;
    ensure!(out.status.success(), "`changecap {}` failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim());
    Ok(())
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// gen-data, pretrain-lm, train and eval on the training split; returns the
/// exact-match rate and the evaluation report.
fn overfit_pipeline() -> Result<(f64, Value), String> {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    let seed = ["--seed", "7"];
    changecap(&[&seed[..], &["gen-data", "--out", &p("data"), "--num-train", "32", "--num-val", "0", "--num-test", "0", "--image-size", "64"]].concat())?;
    changecap(&[&seed[..], &["pretrain-lm", "--data", &p("data"), "--out", &p("lm"), "--epochs", "20"]].concat())?;
    changecap(&[&seed[..], &["train", "--data", &p("data"), "--lm", &p("lm"), "--out", &p("model")]].concat())?;
    changecap(&["eval", "--checkpoint", &p("model"), "--data", &p("data"), "--split", "train", "--out", &p("report.json")])?;
    let manifest = read_json(&dir.path().join("model/manifest.json"));
    let em = manifest["metrics"]["exact_match"].as_f64().ok_or("manifest lacks exact_match")?;
    Ok((em, read_json(&dir.path().join("report.json"))))
}

static FIRST_RUN: OnceLock<Result<(f64, Value), String>> = OnceLock::new();

fn overfit() -> Outcome {
    let (em, report) = FIRST_RUN.get_or_init(overfit_pipeline).clone()?;
    let iou = report["iou"].as_f64().ok_or("report lacks iou")?;
    let summary = format!("exact match {em:.3}, IoU {iou:.3}, BLEU-4 {:.1}", report["bleu4"].as_f64().unwrap_or(f64::NAN));
    ensure!(em >= 0.9 && iou >= 0.8, "{summary} (need ≥ 0.9 and ≥ 0.8)");
    Ok(summary)
}

fn ablation_medians(json: &Value) -> Vec<(String, f64)> {
    json.as_array()
        .unwrap()
        .iter()
        .map(|r| (r["name"].as_str().unwrap().to_string(), r["median_s_star_m"].as_f64().unwrap()))
        .collect()
}

fn ablation() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name).to_str().unwrap().to_string();
    changecap(&["--seed", "9", "gen-data", "--out", &p("data"), "--num-train", "128", "--num-val", "0", "--num-test", "32"])?;
    changecap(&["--seed", "9", "pretrain-lm", "--data", &p("data"), "--out", &p("lm"), "--epochs", "5"])?;
    let run = |out: &str, seeds: &str| changecap(&["ablate", "--data", &p("data"), "--lm", &p("lm"), "--seeds", seeds, "--epochs", "4", "--out", &p(out)]);
    run("a", "0,1,2")?;
    run("b", "0,1,2")?;
    let a = std::fs::read(dir.path().join("a/ablation.json")).unwrap();
    let b = std::fs::read(dir.path().join("b/ablation.json")).unwrap();
    ensure!(a == b, "two runs of the harness differ");
    let rows = ablation_medians(&serde_json::from_slice(&a).unwrap());
    ensure!(rows.len() == 4, "{} rows", rows.len());
    let table = rows.iter().map(|(n, m)| format!("{n} {m:.2}")).collect::<Vec<_>>().join(", ");
    let (base, full) = (rows[0].1, rows[3].1);
    ensure!(full >= base - 1.0, "full model below baseline by more than 1: {table}");
    Ok(format!("deterministic; median S*_m {table}"))
}

fn determinism() -> Outcome {
    let first = FIRST_RUN.get_or_init(overfit_pipeline).clone()?;
    let second = overfit_pipeline()?;
    ensure!(first == second, "reports differ: {} vs {}", first.1, second.1);
    Ok("repeated overfit run reproduced the report exactly".into())
}

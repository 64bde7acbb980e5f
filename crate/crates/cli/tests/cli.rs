use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use changecap::datagen::{generate_dataset, load_levircc, EventKind, GenConfig, Split};

fn changecap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_changecap")).arg("--quiet").args(args).output().unwrap()
}

fn ok(args: &[&str]) {
    let out = changecap(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut files = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    files
}

fn small_dataset(dir: &Path, extra: &[&str]) -> PathBuf {
    let out = dir.join("data");
    let args = [&["--seed", "5", "gen-data", "--out", s(&out)], &["--num-train", "4", "--num-val", "1", "--num-test", "2", "--image-size", "32"][..], extra].concat();
    ok(&args);
    out
}

#[test]
fn gen_data_is_reproducible() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ta = tree(&small_dataset(a.path(), &[]));
    let tb = tree(&small_dataset(b.path(), &[]));
    assert!(ta.len() > 3 * 7);
    assert_eq!(ta, tb);
    let c = tempfile::tempdir().unwrap();
    ok(&["--seed", "6", "gen-data", "--out", s(&c.path().join("data")), "--num-train", "4", "--num-val", "1", "--num-test", "2", "--image-size", "32"]);
    assert_ne!(tree(&c.path().join("data")), ta);
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(changecap(&["gen-data"]).status.code(), Some(2));
    assert_eq!(changecap(&["no-such-command"]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = changecap(&["gen-data", "--out", s(dir.path()), "--distractor-rate", "1.5"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn full_distractor_rate_puts_a_tree_in_every_scene() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), &["--distractor-rate", "1.0"]);
    let cfg: GenConfig = serde_json::from_str(&fs::read_to_string(data.join("gen_config.json")).unwrap()).unwrap();
    assert_eq!(cfg.distractor_rate, 1.0);
    let generated = generate_dataset(&cfg).unwrap();
    let loaded = load_levircc(&data).unwrap().load_all().unwrap();
    assert_eq!(generated.len(), loaded.len());
    for (g, l) in generated.iter().zip(&loaded) {
        assert!(g.change_events.iter().any(|e| e.kind == EventKind::Tree));
        assert_eq!(g.captions, l.captions);
        assert_eq!(g.change_mask, l.change_mask);
    }
}

#[test]
fn scoring_references_against_themselves_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), &[]);
    let index = load_levircc(&data).unwrap();
    let cands: BTreeMap<String, String> = index
        .indices(Split::Test)
        .into_iter()
        .map(|i| (index.samples[i].filename.clone(), index.load(i).unwrap().captions[0].clone()))
        .collect();
    let cand_path = dir.path().join("cands.json");
    fs::write(&cand_path, serde_json::to_string(&cands).unwrap()).unwrap();
    let report_path = dir.path().join("report.json");
    ok(&["score", "--candidates", s(&cand_path), "--data", s(&data), "--out", s(&report_path)]);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!((report["bleu4"].as_f64().unwrap() - 100.0).abs() < 1e-9);
    assert_eq!(report["numSamples"], 2);
}

#[test]
fn pipeline_and_version_check() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path(), &[]);
    let config = dir.path().join("config.json");
    fs::write(
        &config,
        r#"{"model": {"encoder": {"channels": 8, "heads": 2}, "perceiver": {"hidden": 8},
            "decoder": {"d_model": 16, "layers": 1, "heads": 2}, "detector": {"c_mid": 8}},
            "lm": {"epochs": 1, "batch_size": 4}, "train": {"epochs": 1, "batch_size": 2}}"#,
    )
    .unwrap();
    let (lm, model) = (dir.path().join("lm"), dir.path().join("model"));
    ok(&["--config", s(&config), "pretrain-lm", "--data", s(&data), "--out", s(&lm)]);
    ok(&["--config", s(&config), "train", "--data", s(&data), "--lm", s(&lm), "--out", s(&model)]);
    let pre = data.join("A/test_000000.png");
    let post = data.join("B/test_000000.png");
    let mask = dir.path().join("mask.png");
    let out = changecap(&["caption", "--checkpoint", s(&model), "--pre", s(&pre), "--post", s(&post), "--mask-out", s(&mask)]);
    assert!(out.status.success());
    assert!(!String::from_utf8_lossy(&out.stdout).trim().is_empty());
    assert!(mask.exists());

    let manifest = model.join("manifest.json");
    let text = fs::read_to_string(&manifest).unwrap().replacen("\"format_version\": 1", "\"format_version\": 7", 1);
    fs::write(&manifest, text).unwrap();
    let out = changecap(&["eval", "--checkpoint", s(&model), "--data", s(&data)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("found 7, expected 1"));
}

#[test]
fn shipped_configs_load() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let cfg = changecap::config::RunConfig::load(&path).unwrap();
        cfg.validate().unwrap();
    }
}

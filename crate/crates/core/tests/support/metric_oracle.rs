//! Straight-line reference implementations of the caption metrics and the
//! fixed 20-sample corpus they are checked on.

#![allow(dead_code)]

use std::collections::HashMap;

use changecap::metrics::stem;
use serde::Deserialize;

#[derive(Deserialize)]
struct Entry {
    candidate: String,
    references: Vec<String>,
}

pub fn corpus() -> (Vec<String>, Vec<Vec<String>>) {
    let text = include_str!("../fixtures/metric_corpus.json");
    let entries: Vec<Entry> = serde_json::from_str(text).unwrap();
    assert_eq!(entries.len(), 20);
    entries.into_iter().map(|e| (e.candidate, e.references)).unzip()
}

pub fn words(s: &str) -> Vec<String> {
    let cleaned: String = s.to_lowercase().chars().map(|c| if c.is_alphanumeric() { c } else if c.is_whitespace() { ' ' } else { '\u{0}' }).filter(|&c| c != '\u{0}').collect();
    cleaned.split(' ').filter(|w| !w.is_empty()).map(String::from).collect()
}

pub fn grams(ws: &[String], n: usize) -> HashMap<String, f64> {
    let mut m = HashMap::new();
    if ws.len() >= n {
        for i in 0..=ws.len() - n {
            *m.entry(ws[i..i + n].join(" ")).or_insert(0.0) += 1.0;
        }
    }
    m
}

pub fn oracle_bleu(c: &[String], r: &[Vec<String>], n: usize) -> f64 {
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut hit, mut total) = (0.0, 0.0);
        for (cand, refs) in c.iter().zip(r) {
            let cg = grams(&words(cand), k);
            for (g, cnt) in &cg {
                let best = refs.iter().map(|rf| *grams(&words(rf), k).get(g).unwrap_or(&0.0)).fold(0.0, f64::max);
                hit += cnt.min(best);
                total += cnt;
            }
        }
        if hit == 0.0 {
            return 0.0;
        }
        log_sum += (hit / total).ln();
    }
    let mut cand_len = 0.0;
    let mut ref_len = 0.0;
    for (cand, refs) in c.iter().zip(r) {
        let cl = words(cand).len() as f64;
        cand_len += cl;
        let mut best = f64::INFINITY;
        let mut best_diff = f64::INFINITY;
        for rf in refs {
            let rl = words(rf).len() as f64;
            let d = (rl - cl).abs();
            if d < best_diff || (d == best_diff && rl < best) {
                best_diff = d;
                best = rl;
            }
        }
        ref_len += best;
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len / cand_len).exp() };
    bp * (log_sum / n as f64).exp()
}

pub fn lcs(a: &[String], b: &[String]) -> usize {
    // suffix formulation
    let mut t = vec![vec![0usize; b.len() + 1]; a.len() + 1];
    for i in (0..a.len()).rev() {
        for j in (0..b.len()).rev() {
            t[i][j] = if a[i] == b[j] { t[i + 1][j + 1] + 1 } else { t[i + 1][j].max(t[i][j + 1]) };
        }
    }
    t[0][0]
}

pub fn oracle_rouge(c: &[String], r: &[Vec<String>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (cand, refs) in c.iter().zip(r) {
        let cw = words(cand);
        let mut best: f64 = 0.0;
        for rf in refs {
            let rw = words(rf);
            let l = lcs(&cw, &rw) as f64;
            if l == 0.0 {
                continue;
            }
            let p = l / cw.len() as f64;
            let rc = l / rw.len() as f64;
            best = best.max((1.0 + beta2) * p * rc / (rc + beta2 * p));
        }
        total += best;
    }
    total / c.len() as f64
}

pub fn oracle_meteor_pair(cw: &[String], rw: &[String]) -> f64 {
    // align[i] = Some(j) when candidate word i is matched to reference word j
    let mut align: Vec<Option<usize>> = vec![None; cw.len()];
    let mut taken = vec![false; rw.len()];
    for stage in 0..2 {
        for i in 0..cw.len() {
            if align[i].is_some() {
                continue;
            }
            for j in 0..rw.len() {
                let eq = if stage == 0 { cw[i] == rw[j] } else { stem(&cw[i]) == stem(&rw[j]) };
                if !taken[j] && eq {
                    align[i] = Some(j);
                    taken[j] = true;
                    break;
                }
            }
        }
    }
    let m = align.iter().filter(|a| a.is_some()).count() as f64;
    if m == 0.0 {
        return 0.0;
    }
    let mut chunks = 0.0;
    let mut prev: Option<usize> = None;
    for a in &align {
        match (a, prev) {
            (Some(j), Some(p)) if *j == p + 1 => {}
            (Some(_), _) => chunks += 1.0,
            _ => {}
        }
        prev = *a;
    }
    let p = m / cw.len() as f64;
    let rc = m / rw.len() as f64;
    let fmean = 10.0 * p * rc / (rc + 9.0 * p);
    fmean * (1.0 - 0.5 * (chunks / m).powi(3))
}

pub fn oracle_meteor(c: &[String], r: &[Vec<String>]) -> f64 {
    let mut total = 0.0;
    for (cand, refs) in c.iter().zip(r) {
        total += refs.iter().map(|rf| oracle_meteor_pair(&words(cand), &words(rf))).fold(0.0, f64::max);
    }
    total / c.len() as f64
}

pub fn oracle_cider(c: &[String], r: &[Vec<String>]) -> f64 {
    let n_docs = c.len() as f64;
    // global n-gram index for dense vectors
    let mut index: HashMap<String, usize> = HashMap::new();
    let mut df: HashMap<String, f64> = HashMap::new();
    for (cand, refs) in c.iter().zip(r) {
        let mut seen = std::collections::HashSet::new();
        for n in 1..=4 {
            for rf in refs {
                for g in grams(&words(rf), n).keys() {
                    let key = format!("{n}|{g}");
                    seen.insert(key.clone());
                    let len = index.len();
                    index.entry(key).or_insert(len);
                }
            }
            for g in grams(&words(cand), n).keys() {
                let key = format!("{n}|{g}");
                let len = index.len();
                index.entry(key).or_insert(len);
            }
        }
        for k in seen {
            *df.entry(k).or_insert(0.0) += 1.0;
        }
    }
    let dense = |s: &str, n: usize| -> Vec<f64> {
        let mut v = vec![0.0; index.len()];
        for (g, tf) in grams(&words(s), n) {
            let key = format!("{n}|{g}");
            let d = df.get(&key).copied().unwrap_or(0.0).max(1.0);
            v[index[&key]] = tf * (n_docs.ln() - d.ln());
        }
        v
    };
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let mut total = 0.0;
    for (cand, refs) in c.iter().zip(r) {
        let cl = words(cand).len() as f64;
        let mut sample = 0.0;
        for rf in refs {
            let rl = words(rf).len() as f64;
            let mut per_n = 0.0;
            for n in 1..=4 {
                let vc = dense(cand, n);
                let vr = dense(rf, n);
                let mut dot = 0.0;
                for i in 0..vc.len() {
                    if vc[i] != 0.0 {
                        dot += vc[i].min(vr[i]) * vr[i];
                    }
                }
                let (nc, nr) = (norm(&vc), norm(&vr));
                let mut val = if nc != 0.0 && nr != 0.0 { dot / (nc * nr) } else { 0.0 };
                val *= (-(cl - rl).powi(2) / (2.0 * 36.0)).exp();
                per_n += val;
            }
            sample += per_n / 4.0;
        }
        total += sample / refs.len() as f64 * 10.0;
    }
    total / c.len() as f64
}

use std::collections::BTreeMap;

pub(super) type Counts<'a> = BTreeMap<&'a [String], f64>;

pub(super) fn ngrams(words: &[String], n: usize) -> Counts<'_> {
    let mut m = BTreeMap::new();
    if n > 0 && words.len() >= n {
        for w in words.windows(n) {
            *m.entry(w).or_insert(0.0) += 1.0;
        }
    }
    m
}

/// Corpus-level BLEU-`n` in `[0, 1]`.
pub(super) fn bleu_raw(cands: &[Vec<String>], refs: &[Vec<Vec<String>>], n: usize) -> f64 {
    let mut log_p = 0.0;
    for k in 1..=n {
        let mut clipped = 0.0;
        let mut total = 0.0;
        for (c, rs) in cands.iter().zip(refs) {
            let mut max_ref: Counts = BTreeMap::new();
            for r in rs {
                for (g, cnt) in ngrams(r, k) {
                    let e = max_ref.entry(g).or_insert(0.0);
                    *e = f64::max(*e, cnt);
                }
            }
            for (g, cnt) in ngrams(c, k) {
                clipped += f64::min(cnt, max_ref.get(g).copied().unwrap_or(0.0));
                total += cnt;
            }
        }
        if clipped == 0.0 {
            return 0.0;
        }
        log_p += (clipped / total).ln();
    }
    let cand_len: usize = cands.iter().map(Vec::len).sum();
    let ref_len: usize = cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            rs.iter()
                .map(Vec::len)
                .min_by_key(|&l| (l.abs_diff(c.len()), l))
                .unwrap_or(0)
        })
        .sum();
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    bp * (log_p / n as f64).exp()
}

const CIDER_N: usize = 4;
const CIDER_SIGMA: f64 = 6.0;

struct TfIdf<'a> {
    vecs: Vec<Counts<'a>>,
    norms: Vec<f64>,
    len: usize,
}

fn tfidf<'a>(words: &'a [String], df: &BTreeMap<&[String], f64>, log_docs: f64) -> TfIdf<'a> {
    let mut vecs = Vec::with_capacity(CIDER_N);
    let mut norms = Vec::with_capacity(CIDER_N);
    for n in 1..=CIDER_N {
        let mut v = ngrams(words, n);
        let mut sq = 0.0;
        for (g, x) in v.iter_mut() {
            let d = df.get(g).copied().unwrap_or(0.0).max(1.0);
            *x *= log_docs - d.ln();
            sq += *x * *x;
        }
        vecs.push(v);
        norms.push(sq.sqrt());
    }
    TfIdf { vecs, norms, len: words.len() }
}

/// Per-sample CIDEr-D on the conventional scale (identical captions score 10
/// at most).
pub(super) fn cider_raw(cands: &[Vec<String>], refs: &[Vec<Vec<String>>]) -> Vec<f64> {
    let mut df: BTreeMap<&[String], f64> = BTreeMap::new();
    for rs in refs {
        let mut seen: BTreeMap<&[String], ()> = BTreeMap::new();
        for r in rs {
            for n in 1..=CIDER_N {
                for g in ngrams(r, n).into_keys() {
                    seen.insert(g, ());
                }
            }
        }
        for g in seen.into_keys() {
            *df.entry(g).or_insert(0.0) += 1.0;
        }
    }
    let log_docs = (cands.len() as f64).ln();
    cands
        .iter()
        .zip(refs)
        .map(|(c, rs)| {
            let vc = tfidf(c, &df, log_docs);
            let mut sum = 0.0;
            for r in rs {
                let vr = tfidf(r, &df, log_docs);
                let delta = vc.len as f64 - vr.len as f64;
                let gauss = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
                let mut per_n = 0.0;
                for n in 0..CIDER_N {
                    let mut dot = 0.0;
                    for (g, &x) in &vc.vecs[n] {
                        if let Some(&y) = vr.vecs[n].get(g) {
                            dot += x.min(y) * y;
                        }
                    }
                    if vc.norms[n] != 0.0 && vr.norms[n] != 0.0 {
                        per_n += dot / (vc.norms[n] * vr.norms[n]) * gauss;
                    }
                }
                sum += per_n / CIDER_N as f64;
            }
            sum / rs.len() as f64 * 10.0
        })
        .collect()
}

use super::stem::stem;

/// Longest common subsequence length.
pub(super) fn lcs(a: &[String], b: &[String]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub(super) const ROUGE_BETA: f64 = 1.2;

pub(super) fn rouge_pair(c: &[String], r: &[String]) -> f64 {
    let l = lcs(c, r) as f64;
    if l == 0.0 {
        return 0.0;
    }
    let p = l / c.len() as f64;
    let rc = l / r.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * rc / (rc + b2 * p)
}

const RECALL_WEIGHT: f64 = 9.0;
const PENALTY_GAMMA: f64 = 0.5;
const PENALTY_BETA: i32 = 3;

/// METEOR with exact then stemmed unigram matching. Each stage walks the
/// candidate left to right and takes the first free reference word.
pub(super) fn meteor_pair(c: &[String], r: &[String]) -> f64 {
    let mut target: Vec<Option<usize>> = vec![None; c.len()];
    let mut used = vec![false; r.len()];
    let c_stems: Vec<String> = c.iter().map(|w| stem(w)).collect();
    let r_stems: Vec<String> = r.iter().map(|w| stem(w)).collect();
    for (cw, rw) in [(c, r), (&c_stems[..], &r_stems[..])] {
        for (i, slot) in target.iter_mut().enumerate() {
            if slot.is_some() {
                continue;
            }
            if let Some(j) = (0..r.len()).find(|&j| !used[j] && rw[j] == cw[i]) {
                used[j] = true;
                *slot = Some(j);
            }
        }
    }
    let matches = target.iter().flatten().count();
    if matches == 0 {
        return 0.0;
    }
    let mut chunks = 0;
    let mut last: Option<usize> = None;
    for t in &target {
        if let Some(j) = *t {
            if last.is_none_or(|l| l + 1 != j) {
                chunks += 1;
            }
        }
        last = *t;
    }
    let m = matches as f64;
    let p = m / c.len() as f64;
    let rc = m / r.len() as f64;
    let fmean = (1.0 + RECALL_WEIGHT) * p * rc / (rc + RECALL_WEIGHT * p);
    fmean * (1.0 - PENALTY_GAMMA * (chunks as f64 / m).powi(PENALTY_BETA))
}

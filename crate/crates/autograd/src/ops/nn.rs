use crate::{Scalar, Tensor, Var};

impl<'g, T: Scalar> Var<'g, T> {
    /// Softmax over the last axis. With `causal`, the input is read as a stack
    /// of square `[T, T]` score matrices and entry `(i, j)` with `j > i` is
    /// masked out (probability exactly 0).
    pub fn softmax(self, causal: bool) -> Var<'g, T> {
        let x = self.value();
        let n = x.last_dim();
        let rows_per_mat = if causal {
            assert!(x.ndim() >= 2 && x.shape()[x.ndim() - 2] == n, "causal softmax needs square trailing dims");
            n
        } else {
            usize::MAX
        };
        let mut out = vec![T::zero(); x.numel()];
        for (r, (src, dst)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let valid = if causal { r % rows_per_mat + 1 } else { n };
            let max = src[..valid].iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut total = T::zero();
            for (d, &s) in dst[..valid].iter_mut().zip(&src[..valid]) {
                *d = (s - max).exp();
                total += *d;
            }
            for d in &mut dst[..valid] {
                *d /= total;
            }
        }
        let y = Tensor::new(x.shape(), out);
        let saved = y.clone();
        self.graph.record(
            y,
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); saved.numel()];
                for ((yr, gr), dr) in saved.data().chunks(n).zip(g.data().chunks(n)).zip(d.chunks_mut(n)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *o = yi * (gi - dot);
                    }
                }
                vec![Some(Tensor::new(saved.shape(), d))]
            }),
        )
    }

    /// Root-mean-square normalisation over the last axis with a learned gain.
    pub fn rms_norm(self, gain: Var<'g, T>, eps: T) -> Var<'g, T> {
        self.same_graph(&gain);
        let x = self.value();
        let w = gain.value();
        let n = x.last_dim();
        assert_eq!(w.numel(), n, "rms_norm gain size");
        let nf = T::from_usize(n).unwrap();
        let inv: Vec<T> = x
            .data()
            .chunks(n)
            .map(|r| T::one() / (r.iter().map(|&v| v * v).sum::<T>() / nf + eps).sqrt())
            .collect();
        let mut out = vec![T::zero(); x.numel()];
        for ((xr, o), &r) in x.data().chunks(n).zip(out.chunks_mut(n)).zip(&inv) {
            for ((oi, &xi), &wi) in o.iter_mut().zip(xr).zip(w.data()) {
                *oi = xi * r * wi;
            }
        }
        self.graph.record(
            Tensor::new(x.shape(), out),
            &[self, gain],
            Box::new(move |g, needs| {
                let mut dx = vec![T::zero(); x.numel()];
                let mut dw = vec![T::zero(); n];
                for (((xr, gr), dr), &r) in
                    x.data().chunks(n).zip(g.data().chunks(n)).zip(dx.chunks_mut(n)).zip(&inv)
                {
                    // dxhat = g * w ; dx = r * (dxhat - xhat * mean(dxhat * xhat))
                    let mut dot = T::zero();
                    for i in 0..n {
                        dot += gr[i] * w.data()[i] * xr[i] * r;
                        dw[i] += gr[i] * xr[i] * r;
                    }
                    let m = dot / nf;
                    for i in 0..n {
                        dr[i] = r * (gr[i] * w.data()[i] - xr[i] * r * m);
                    }
                }
                vec![
                    needs[0].then(|| Tensor::new(x.shape(), dx)),
                    needs[1].then(|| Tensor::new(w.shape(), dw)),
                ]
            }),
        )
    }

    /// Mean token-level cross-entropy of `[L, V]` logits. `None` targets are
    /// ignored; if every target is `None` the loss is 0.
    pub fn cross_entropy(self, targets: &[Option<usize>]) -> Var<'g, T> {
        let x = self.value();
        let v = x.last_dim();
        assert_eq!(x.rows(), targets.len(), "cross_entropy: {} rows vs {} targets", x.rows(), targets.len());
        let count = targets.iter().filter(|t| t.is_some()).count();
        let mut probs = vec![T::zero(); x.numel()];
        let mut loss = T::zero();
        for ((row, p), t) in x.data().chunks(v).zip(probs.chunks_mut(v)).zip(targets) {
            let Some(t) = *t else { continue };
            assert!(t < v, "target {t} outside vocabulary {v}");
            let max = row.iter().fold(T::neg_infinity(), |m, &z| m.max(z));
            let mut total = T::zero();
            for (pi, &z) in p.iter_mut().zip(row) {
                *pi = (z - max).exp();
                total += *pi;
            }
            for pi in p.iter_mut() {
                *pi /= total;
            }
            loss += total.ln() + max - row[t];
        }
        let norm = if count == 0 { T::zero() } else { T::one() / T::from_usize(count).unwrap() };
        let targets = targets.to_vec();
        let shape = x.shape().to_vec();
        self.graph.record(
            Tensor::scalar(loss * norm),
            &[self],
            Box::new(move |g, _| {
                let s = g.data()[0] * norm;
                let mut d = probs.clone();
                for (row, t) in d.chunks_mut(v).zip(&targets) {
                    match t {
                        Some(t) => {
                            row[*t] -= T::one();
                            for r in row.iter_mut() {
                                *r *= s;
                            }
                        }
                        None => row.iter_mut().for_each(|r| *r = T::zero()),
                    }
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    /// Mean binary cross-entropy of probabilities against `targets`, with
    /// probabilities clamped into `[eps, 1 - eps]` inside the logarithms.
    pub fn binary_cross_entropy(self, targets: &[T], eps: T) -> Var<'g, T> {
        let p = self.value();
        assert_eq!(p.numel(), targets.len(), "bce size mismatch");
        let lo = eps;
        let hi = T::one() - eps;
        let n = T::from_usize(targets.len().max(1)).unwrap();
        let loss = p
            .data()
            .iter()
            .zip(targets)
            .map(|(&pi, &y)| {
                let q = pi.max(lo).min(hi);
                -(y * q.ln() + (T::one() - y) * (T::one() - q).ln())
            })
            .sum::<T>()
            / n;
        let targets = targets.to_vec();
        self.graph.record(
            Tensor::scalar(loss),
            &[self],
            Box::new(move |g, _| {
                let s = g.data()[0] / n;
                let d = p
                    .data()
                    .iter()
                    .zip(&targets)
                    .map(|(&pi, &y)| {
                        if pi <= lo || pi >= hi {
                            T::zero()
                        } else {
                            s * (-y / pi + (T::one() - y) / (T::one() - pi))
                        }
                    })
                    .collect();
                vec![Some(Tensor::new(p.shape(), d))]
            }),
        )
    }

    /// Rotary position embedding on `[H, L, D]` (D even): channel pairs
    /// `(i, i + D/2)` of position `t` are rotated by `t · base^(-2i/D)`.
    pub fn rope(self, base: f64) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.ndim(), 3, "rope expects [heads, len, dim]");
        let (h, l, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        assert!(d % 2 == 0, "rope needs an even head dim");
        let half = d / 2;
        let mut cos = vec![T::zero(); l * half];
        let mut sin = vec![T::zero(); l * half];
        for t in 0..l {
            for i in 0..half {
                let theta = t as f64 * base.powf(-2.0 * i as f64 / d as f64);
                cos[t * half + i] = T::from_f64c(theta.cos());
                sin[t * half + i] = T::from_f64c(theta.sin());
            }
        }
        let rotate = move |src: &[T], sign: T| {
            let mut out = vec![T::zero(); src.len()];
            for hh in 0..h {
                for t in 0..l {
                    let base_off = (hh * l + t) * d;
                    for i in 0..half {
                        let (c, s) = (cos[t * half + i], sign * sin[t * half + i]);
                        let a = src[base_off + i];
                        let b = src[base_off + half + i];
                        out[base_off + i] = a * c - b * s;
                        out[base_off + half + i] = a * s + b * c;
                    }
                }
            }
            out
        };
        let out = rotate(x.data(), T::one());
        let shape = x.shape().to_vec();
        self.graph.record(
            Tensor::new(&shape, out),
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::new(&shape, rotate(g.data(), -T::one())))]),
        )
    }
}

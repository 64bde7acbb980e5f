use crate::{Graph, Scalar, Tensor, Var};

/// Splits `shape` around `axis` into (outer, axis len, inner) block sizes.
fn blocks(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let out = (*x).clone().reshape(shape);
        self.graph.record(out, &[self], Box::new(move |g, _| vec![Some(g.clone().reshape(&old))]))
    }

    pub fn permute(self, perm: &[usize]) -> Var<'g, T> {
        let out = self.value().permute(perm);
        let mut inverse = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inverse[p] = i;
        }
        self.graph.record(out, &[self], Box::new(move |g, _| vec![Some(g.permute(&inverse))]))
    }

    /// Contiguous sub-range `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        assert!(start + len <= shape[axis], "narrow {start}+{len} past axis {axis} of {shape:?}");
        let (outer, dim, inner) = blocks(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * dim * inner + start * inner;
            out.extend_from_slice(&x.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        self.graph.record(
            Tensor::new(&out_shape, out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); outer * dim * inner];
                for o in 0..outer {
                    let base = o * dim * inner + start * inner;
                    d[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                vec![Some(Tensor::new(&shape, d))]
            }),
        )
    }

    /// Gathers rows of a 2-D table: `[V, D]` → `[ids.len(), D]`.
    pub fn gather_rows(self, ids: &[usize]) -> Var<'g, T> {
        let table = self.value();
        assert_eq!(table.ndim(), 2, "gather_rows needs a matrix");
        let (v, d) = (table.shape()[0], table.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            assert!(i < v, "row {i} out of range {v}");
            out.extend_from_slice(&table.data()[i * d..(i + 1) * d]);
        }
        let ids = ids.to_vec();
        self.graph.record(
            Tensor::new(&[ids.len(), d], out),
            &[self],
            Box::new(move |g, _| {
                let mut acc = vec![T::zero(); v * d];
                for (r, &i) in ids.iter().enumerate() {
                    for (a, &x) in acc[i * d..(i + 1) * d].iter_mut().zip(&g.data()[r * d..(r + 1) * d]) {
                        *a += x;
                    }
                }
                vec![Some(Tensor::new(&[v, d], acc))]
            }),
        )
    }
}

impl<T: Scalar> Graph<T> {
    /// Concatenates along `axis`; all other axes must agree.
    pub fn concat<'g>(&'g self, parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of nothing");
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let first = values[0].shape().to_vec();
        for v in &values {
            assert_eq!(v.ndim(), first.len(), "concat rank mismatch");
            for (ax, (&a, &b)) in v.shape().iter().zip(&first).enumerate() {
                assert!(ax == axis || a == b, "concat shape mismatch {:?} vs {first:?}", v.shape());
            }
        }
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let (outer, _, inner) = blocks(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &l) in values.iter().zip(&lens) {
                out.extend_from_slice(&v.data()[o * l * inner..(o + 1) * l * inner]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        self.record(
            Tensor::new(&shape, out),
            parts,
            Box::new(move |g, needs| {
                let mut grads: Vec<Vec<T>> =
                    lens.iter().map(|&l| Vec::with_capacity(outer * l * inner)).collect();
                let mut pos = 0;
                for _ in 0..outer {
                    for (gv, &l) in grads.iter_mut().zip(&lens) {
                        gv.extend_from_slice(&g.data()[pos..pos + l * inner]);
                        pos += l * inner;
                    }
                }
                grads
                    .into_iter()
                    .zip(&part_shapes)
                    .zip(needs)
                    .map(|((d, s), &need)| need.then(|| Tensor::new(s, d)))
                    .collect()
            }),
        )
    }
}

use crate::{Scalar, Tensor, Var};

impl<'g, T: Scalar> Var<'g, T> {
    /// `self[.., K] · w[K, N]`, leading axes of `self` flattened into rows.
    pub fn matmul(self, w: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&w);
        let a = self.value();
        let b = w.value();
        let out = a.matmul(&b);
        let (m, k, n) = (a.rows(), a.last_dim(), b.shape()[1]);
        self.graph.record(
            out,
            &[self, w],
            Box::new(move |g, needs| {
                let ga = needs[0].then(|| {
                    // g[m,n] · bᵀ[n,k]
                    let mut d = vec![T::zero(); m * k];
                    T::gemm(m, n, k, g.data(), (n, 1), b.data(), (1, n), T::zero(), &mut d);
                    Tensor::new(a.shape(), d)
                });
                let gb = needs[1].then(|| {
                    // aᵀ[k,m] · g[m,n]
                    let mut d = vec![T::zero(); k * n];
                    T::gemm(k, m, n, a.data(), (1, k), g.data(), (n, 1), T::zero(), &mut d);
                    Tensor::new(b.shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }

    /// Affine map over the last axis: `self · w + b`.
    pub fn linear(self, w: Var<'g, T>, b: Option<Var<'g, T>>) -> Var<'g, T> {
        let y = self.matmul(w);
        match b {
            Some(b) => y.add_row(b),
            None => y,
        }
    }

    /// Batched product of `[B, M, K]` with `[B, K, N]`, or with `[B, N, K]`
    /// read transposed when `transpose_rhs` is set.
    pub fn bmm(self, rhs: Var<'g, T>, transpose_rhs: bool) -> Var<'g, T> {
        self.same_graph(&rhs);
        let a = self.value();
        let b = rhs.value();
        assert_eq!(a.ndim(), 3, "bmm lhs must be 3-D, got {:?}", a.shape());
        assert_eq!(b.ndim(), 3, "bmm rhs must be 3-D, got {:?}", b.shape());
        let (bs, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        assert_eq!(b.shape()[0], bs, "bmm batch mismatch");
        let n = if transpose_rhs {
            assert_eq!(b.shape()[2], k, "bmm inner dims {:?} x {:?}ᵀ", a.shape(), b.shape());
            b.shape()[1]
        } else {
            assert_eq!(b.shape()[1], k, "bmm inner dims {:?} x {:?}", a.shape(), b.shape());
            b.shape()[2]
        };
        let b_strides = if transpose_rhs { (1, k) } else { (n, 1) };
        let mut out = vec![T::zero(); bs * m * n];
        for i in 0..bs {
            T::gemm(
                m,
                k,
                n,
                &a.data()[i * m * k..(i + 1) * m * k],
                (k, 1),
                &b.data()[i * k * n..(i + 1) * k * n],
                b_strides,
                T::zero(),
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        self.graph.record(
            Tensor::new(&[bs, m, n], out),
            &[self, rhs],
            Box::new(move |g, needs| {
                let gd = g.data();
                let ga = needs[0].then(|| {
                    let mut d = vec![T::zero(); bs * m * k];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let bi = &b.data()[i * k * n..(i + 1) * k * n];
                        // non-transposed: g · bᵀ with b [k,n]; transposed: g · b with b [n,k]
                        let bs_ = if transpose_rhs { (k, 1) } else { (1, n) };
                        T::gemm(m, n, k, gi, (n, 1), bi, bs_, T::zero(), &mut d[i * m * k..(i + 1) * m * k]);
                    }
                    Tensor::new(a.shape(), d)
                });
                let gb = needs[1].then(|| {
                    let mut d = vec![T::zero(); bs * k * n];
                    for i in 0..bs {
                        let gi = &gd[i * m * n..(i + 1) * m * n];
                        let ai = &a.data()[i * m * k..(i + 1) * m * k];
                        let di = &mut d[i * k * n..(i + 1) * k * n];
                        if transpose_rhs {
                            // gᵀ[n,m] · a[m,k]
                            T::gemm(n, m, k, gi, (1, n), ai, (k, 1), T::zero(), di);
                        } else {
                            // aᵀ[k,m] · g[m,n]
                            T::gemm(k, m, n, ai, (1, k), gi, (n, 1), T::zero(), di);
                        }
                    }
                    Tensor::new(b.shape(), d)
                });
                vec![ga, gb]
            }),
        )
    }
}

use crate::{Scalar, Tensor, Var};

fn c<T: Scalar>(v: f64) -> T {
    T::from_f64c(v)
}

impl<'g, T: Scalar> Var<'g, T> {
    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a + b);
        self.graph.record(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.clone())]),
        )
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let out = self.value().zip_map(&other.value(), |a, b| a - b);
        self.graph.record(
            out,
            &[self, other],
            Box::new(|g, _| vec![Some(g.clone()), Some(g.map(|x| -x))]),
        )
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&other);
        let (a, b) = (self.value(), other.value());
        let out = a.zip_map(&b, |x, y| x * y);
        self.graph.record(
            out,
            &[self, other],
            Box::new(move |g, needs| {
                vec![
                    needs[0].then(|| g.zip_map(&b, |x, y| x * y)),
                    needs[1].then(|| g.zip_map(&a, |x, y| x * y)),
                ]
            }),
        )
    }

    pub fn scale(self, s: T) -> Var<'g, T> {
        let out = self.value().map(|x| x * s);
        self.graph.record(out, &[self], Box::new(move |g, _| vec![Some(g.map(|x| x * s))]))
    }

    pub fn neg(self) -> Var<'g, T> {
        self.scale(-T::one())
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let out = self.value().map(|x| x + s);
        self.graph.record(out, &[self], Box::new(|g, _| vec![Some(g.clone())]))
    }

    /// Element-wise absolute value; the subgradient at 0 is 0.
    /// The derivative at 0 is taken as 1, so a zero input still passes gradient.
    pub fn abs(self) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| v.abs());
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gi, xi| {
                    if xi < T::zero() {
                        -gi
                    } else {
                        gi
                    }
                }))]
            }),
        )
    }

    pub fn relu(self) -> Var<'g, T> {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(self, slope: T) -> Var<'g, T> {
        let x = self.value();
        let out = x.map(|v| if v > T::zero() { v } else { v * slope });
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gi, xi| if xi > T::zero() { gi } else { gi * slope }))]
            }),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(self) -> Var<'g, T> {
        let x = self.value();
        let k: T = c(0.797_884_560_802_865_4); // sqrt(2/pi)
        let a: T = c(0.044715);
        let half: T = c(0.5);
        let three: T = c(3.0);
        let out = x.map(|v| half * v * (T::one() + (k * (v + a * v * v * v)).tanh()));
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| {
                vec![Some(g.zip_map(&x, |gi, v| {
                    let u = k * (v + a * v * v * v);
                    let t = u.tanh();
                    let du = k * (T::one() + three * a * v * v);
                    gi * (half * (T::one() + t) + half * v * (T::one() - t * t) * du)
                }))]
            }),
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        let y = self.value().map(|v| T::one() / (T::one() + (-v).exp()));
        let saved = y.clone();
        self.graph.record(
            y,
            &[self],
            Box::new(move |g, _| vec![Some(g.zip_map(&saved, |gi, yi| gi * yi * (T::one() - yi)))]),
        )
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_row(self, bias: Var<'g, T>) -> Var<'g, T> {
        self.same_graph(&bias);
        let x = self.value();
        let b = bias.value();
        let n = x.last_dim();
        assert_eq!(b.numel(), n, "add_row: bias {:?} vs input {:?}", b.shape(), x.shape());
        let mut out = (*x).clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bi) in row.iter_mut().zip(b.data()) {
                *o += bi;
            }
        }
        let bshape = b.shape().to_vec();
        self.graph.record(
            out,
            &[self, bias],
            Box::new(move |g, needs| {
                let gb = needs[1].then(|| {
                    let mut acc = vec![T::zero(); n];
                    for row in g.data().chunks(n) {
                        for (a, &gi) in acc.iter_mut().zip(row) {
                            *a += gi;
                        }
                    }
                    Tensor::new(&bshape, acc)
                });
                vec![needs[0].then(|| g.clone()), gb]
            }),
        )
    }

    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.shape().to_vec();
        let out = Tensor::scalar(x.sum());
        self.graph.record(
            out,
            &[self],
            Box::new(move |g, _| vec![Some(Tensor::full(&shape, g.data()[0]))]),
        )
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().numel();
        self.sum().scale(T::one() / T::from_usize(n).unwrap())
    }
}

//! Grid operations on channel-last feature maps stored as `[h * w, C]`
//! (row-major over `y`, then `x`).

use crate::{Scalar, Tensor, Var};

/// Bilinear sample position: two corner indices and the weight of the far one.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Tap<T> {
    pub lo: usize,
    pub hi: usize,
    pub frac: T,
    /// False when the coordinate was clamped to the border.
    pub inside: bool,
}

/// Clamps a continuous coordinate into `[0, size - 1]` and splits it into
/// two neighbouring integer positions.
pub fn border_tap<T: Scalar>(coord: T, size: usize) -> Tap<T> {
    let max = T::from_usize(size - 1).unwrap();
    // right-hand derivative: a coordinate sitting on the lower border can
    // still move inward, one on the upper border cannot
    let inside = coord >= T::zero() && coord < max;
    let c = coord.max(T::zero()).min(max);
    let lo = c.floor().to_usize().unwrap().min(size - 1);
    let hi = (lo + 1).min(size - 1);
    Tap { lo, hi, frac: c - T::from_usize(lo).unwrap(), inside }
}

/// Bilinear blend of four `c`-wide rows (`[lo-lo, lo-hi, hi-lo, hi-hi]` in
/// y-x order) written as nested lerps, so equal corners reproduce exactly.
fn lerp2<T: Scalar>(dst: &mut [T], src: &[T], c: usize, corners: [usize; 4], fx: T, fy: T) {
    let row = |i: usize| &src[corners[i] * c..(corners[i] + 1) * c];
    let (v00, v01, v10, v11) = (row(0), row(1), row(2), row(3));
    for k in 0..c {
        let top = v00[k] + fx * (v01[k] - v00[k]);
        let bottom = v10[k] + fx * (v11[k] - v10[k]);
        dst[k] = top + fy * (bottom - top);
    }
}

/// Source coordinate for half-pixel-centre resizing from `src` to `dst` cells.
pub fn half_pixel_tap<T: Scalar>(dst_index: usize, src: usize, dst: usize) -> Tap<T> {
    let scale = src as f64 / dst as f64;
    let s = ((dst_index as f64 + 0.5) * scale - 0.5).max(0.0);
    border_tap(T::from_f64c(s), src)
}

impl<'g, T: Scalar> Var<'g, T> {
    /// 3×3 patch extraction with zero padding: `[h*w, C]` → `[h*w, 9C]`,
    /// column `(ky * 3 + kx) * C + c`.
    pub fn im2col3x3(self, h: usize, w: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.rows(), h * w, "im2col: {:?} is not a {h}x{w} grid", x.shape());
        let c = x.last_dim();
        let mut out = vec![T::zero(); h * w * 9 * c];
        let offsets = move |y: usize, xx: usize| {
            (0..9).filter_map(move |k| {
                let sy = y as isize + (k / 3) as isize - 1;
                let sx = xx as isize + (k % 3) as isize - 1;
                (sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w)
                    .then(|| (k, sy as usize * w + sx as usize))
            })
        };
        for y in 0..h {
            for xx in 0..w {
                let row = (y * w + xx) * 9 * c;
                for (k, src) in offsets(y, xx) {
                    out[row + k * c..row + (k + 1) * c].copy_from_slice(&x.data()[src * c..(src + 1) * c]);
                }
            }
        }
        let in_shape = x.shape().to_vec();
        self.graph.record(
            Tensor::new(&[h * w, 9 * c], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); h * w * c];
                for y in 0..h {
                    for xx in 0..w {
                        let row = (y * w + xx) * 9 * c;
                        for (k, src) in offsets(y, xx) {
                            for (a, &b) in d[src * c..(src + 1) * c].iter_mut().zip(&g.data()[row + k * c..row + (k + 1) * c]) {
                                *a += b;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, d))]
            }),
        )
    }

    /// Bilinear warp of a `[h*w, C]` map by a `[h*w, 2]` flow measured in
    /// grid cells: output cell `(y, x)` samples the input at
    /// `(x + flow_x, y + flow_y)`, with coordinates clamped to the border.
    pub fn warp(self, flow: Var<'g, T>, h: usize, w: usize) -> Var<'g, T> {
        self.same_graph(&flow);
        let f = self.value();
        let fl = flow.value();
        assert_eq!(f.rows(), h * w, "warp: features {:?} vs grid {h}x{w}", f.shape());
        assert_eq!(fl.numel(), h * w * 2, "warp: flow {:?} vs grid {h}x{w}", fl.shape());
        let c = f.last_dim();
        let taps: Vec<(Tap<T>, Tap<T>)> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                let sx = T::from_usize(x).unwrap() + fl.data()[2 * i];
                let sy = T::from_usize(y).unwrap() + fl.data()[2 * i + 1];
                (border_tap(sx, w), border_tap(sy, h))
            })
            .collect();
        let one = T::one();
        let mut out = vec![T::zero(); h * w * c];
        for (i, (tx, ty)) in taps.iter().enumerate() {
            lerp2(&mut out[i * c..(i + 1) * c], f.data(), c, [ty.lo * w + tx.lo, ty.lo * w + tx.hi, ty.hi * w + tx.lo, ty.hi * w + tx.hi], tx.frac, ty.frac);
        }
        let f_shape = f.shape().to_vec();
        let fl_shape = fl.shape().to_vec();
        self.graph.record(
            Tensor::new(&f_shape, out),
            &[self, flow],
            Box::new(move |g, needs| {
                let gd = g.data();
                let gf = needs[0].then(|| {
                    let mut d = vec![T::zero(); h * w * c];
                    for (i, (tx, ty)) in taps.iter().enumerate() {
                        let corners = [
                            (ty.lo * w + tx.lo, (one - ty.frac) * (one - tx.frac)),
                            (ty.lo * w + tx.hi, (one - ty.frac) * tx.frac),
                            (ty.hi * w + tx.lo, ty.frac * (one - tx.frac)),
                            (ty.hi * w + tx.hi, ty.frac * tx.frac),
                        ];
                        for (src, wt) in corners {
                            for (a, &b) in d[src * c..(src + 1) * c].iter_mut().zip(&gd[i * c..(i + 1) * c]) {
                                *a += wt * b;
                            }
                        }
                    }
                    Tensor::new(&f_shape, d)
                });
                let gflow = needs[1].then(|| {
                    let mut d = vec![T::zero(); h * w * 2];
                    let fd = f.data();
                    for (i, (tx, ty)) in taps.iter().enumerate() {
                        let gi = &gd[i * c..(i + 1) * c];
                        let v00 = &fd[(ty.lo * w + tx.lo) * c..][..c];
                        let v01 = &fd[(ty.lo * w + tx.hi) * c..][..c];
                        let v10 = &fd[(ty.hi * w + tx.lo) * c..][..c];
                        let v11 = &fd[(ty.hi * w + tx.hi) * c..][..c];
                        let (mut dx, mut dy) = (T::zero(), T::zero());
                        for k in 0..c {
                            let ddx = (one - ty.frac) * (v01[k] - v00[k]) + ty.frac * (v11[k] - v10[k]);
                            let ddy = (one - tx.frac) * (v10[k] - v00[k]) + tx.frac * (v11[k] - v01[k]);
                            dx += gi[k] * ddx;
                            dy += gi[k] * ddy;
                        }
                        if tx.inside {
                            d[2 * i] = dx;
                        }
                        if ty.inside {
                            d[2 * i + 1] = dy;
                        }
                    }
                    Tensor::new(&fl_shape, d)
                });
                vec![gf, gflow]
            }),
        )
    }

    /// Bilinear resize of a `[h*w, C]` map to `[out_h*out_w, C]` with
    /// half-pixel-centre alignment.
    pub fn upsample_bilinear(self, h: usize, w: usize, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        assert_eq!(x.rows(), h * w, "upsample: {:?} is not a {h}x{w} grid", x.shape());
        let c = x.last_dim();
        let ys: Vec<Tap<T>> = (0..out_h).map(|i| half_pixel_tap(i, h, out_h)).collect();
        let xs: Vec<Tap<T>> = (0..out_w).map(|i| half_pixel_tap(i, w, out_w)).collect();
        let ys_frac: Vec<T> = ys.iter().map(|t| t.frac).collect();
        let xs_frac: Vec<T> = xs.iter().map(|t| t.frac).collect();
        let one = T::one();
        let weights = move |oy: usize, ox: usize| {
            let (ty, tx) = (ys[oy], xs[ox]);
            [
                (ty.lo * w + tx.lo, (one - ty.frac) * (one - tx.frac)),
                (ty.lo * w + tx.hi, (one - ty.frac) * tx.frac),
                (ty.hi * w + tx.lo, ty.frac * (one - tx.frac)),
                (ty.hi * w + tx.hi, ty.frac * tx.frac),
            ]
        };
        let mut out = vec![T::zero(); out_h * out_w * c];
        for oy in 0..out_h {
            for ox in 0..out_w {
                let corners = weights(oy, ox).map(|(src, _)| src);
                lerp2(&mut out[(oy * out_w + ox) * c..][..c], x.data(), c, corners, xs_frac[ox], ys_frac[oy]);
            }
        }
        let in_shape = x.shape().to_vec();
        self.graph.record(
            Tensor::new(&[out_h * out_w, c], out),
            &[self],
            Box::new(move |g, _| {
                let mut d = vec![T::zero(); h * w * c];
                for oy in 0..out_h {
                    for ox in 0..out_w {
                        let gi = &g.data()[(oy * out_w + ox) * c..][..c];
                        for (src, wt) in weights(oy, ox) {
                            for (a, &b) in d[src * c..(src + 1) * c].iter_mut().zip(gi) {
                                *a += wt * b;
                            }
                        }
                    }
                }
                vec![Some(Tensor::new(&in_shape, d))]
            }),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn half_pixel_taps_two_to_four() {
        let fr: Vec<f64> = (0..4).map(|i| {
            let t = half_pixel_tap::<f64>(i, 2, 4);
            t.lo as f64 + t.frac
        }).collect();
        assert_eq!(fr, vec![0.0, 0.25, 0.75, 1.0]);
    }

    #[test]
    fn border_tap_clamps() {
        let t = border_tap(5.5f64, 4);
        assert_eq!((t.lo, t.hi, t.frac, t.inside), (3, 3, 0.0, false));
        let t = border_tap(-0.5f64, 4);
        assert_eq!((t.lo, t.hi, t.frac, t.inside), (0, 1, 0.0, false));
    }
}

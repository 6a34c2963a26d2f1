//! Cross-correlation kernels shared by `conv1d` and `conv_transpose1d`.
//!
//! All three kernels describe the same linear map
//! `y[b, o, t] = sum_{i, k} w[o, i, k] * x[b, i, t * stride + k - left]`
//! (out-of-range `x` reads are zero): `forward` applies it, `adjoint` applies
//! its transpose with respect to `x`, and `weight_grad` its transpose with
//! respect to `w`.

#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub batch: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub stride: usize,
    pub left: usize,
}

impl Geometry {
    /// "Same" zero padding: output length `ceil(n_in / stride)`, padding split
    /// evenly with the extra zero on the right.
    pub fn same(batch: usize, c_in: usize, c_out: usize, kernel: usize, n_in: usize, stride: usize) -> Self {
        let n_out = n_in.div_ceil(stride);
        let total = ((n_out.saturating_sub(1)) * stride + kernel).saturating_sub(n_in);
        Self { batch, c_in, c_out, kernel, n_in, n_out, stride, left: total / 2 }
    }

    /// Output positions `t` for tap `k` that read inside the input.
    #[inline]
    fn range(&self, k: usize) -> (usize, usize, isize) {
        let off = k as isize - self.left as isize;
        let s = self.stride as isize;
        let lo = if off >= 0 { 0 } else { ((-off) + s - 1) / s };
        let last = self.n_in as isize - 1 - off;
        let hi = if last < 0 { 0 } else { (last / s + 1).min(self.n_out as isize) };
        (lo as usize, (hi.max(lo)) as usize, off)
    }
}

pub(crate) fn forward(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
    let mut y = vec![0.0; g.batch * g.c_out * g.n_out];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let yrow = &mut y[(b * g.c_out + o) * g.n_out..][..g.n_out];
            for i in 0..g.c_in {
                let xrow = &x[(b * g.c_in + i) * g.n_in..][..g.n_in];
                let wrow = &w[(o * g.c_in + i) * g.kernel..][..g.kernel];
                for (k, &wv) in wrow.iter().enumerate() {
                    let (lo, hi, off) = g.range(k);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (yv, xv) in yrow[lo..hi].iter_mut().zip(xs) {
                            *yv += wv * xv;
                        }
                    } else {
                        for t in lo..hi {
                            yrow[t] += wv * xrow[(t as isize * g.stride as isize + off) as usize];
                        }
                    }
                }
            }
        }
    }
    y
}

pub(crate) fn adjoint(g: &Geometry, dy: &[f64], w: &[f64]) -> Vec<f64> {
    let mut dx = vec![0.0; g.batch * g.c_in * g.n_in];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &dy[(b * g.c_out + o) * g.n_out..][..g.n_out];
            for i in 0..g.c_in {
                let xrow = &mut dx[(b * g.c_in + i) * g.n_in..][..g.n_in];
                let wrow = &w[(o * g.c_in + i) * g.kernel..][..g.kernel];
                for (k, &wv) in wrow.iter().enumerate() {
                    let (lo, hi, off) = g.range(k);
                    if lo >= hi {
                        continue;
                    }
                    if g.stride == 1 {
                        let xs = &mut xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (xv, gv) in xs.iter_mut().zip(&grow[lo..hi]) {
                            *xv += wv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            xrow[(t as isize * g.stride as isize + off) as usize] += wv * grow[t];
                        }
                    }
                }
            }
        }
    }
    dx
}

pub(crate) fn weight_grad(g: &Geometry, dy: &[f64], x: &[f64]) -> Vec<f64> {
    let mut dw = vec![0.0; g.c_out * g.c_in * g.kernel];
    for b in 0..g.batch {
        for o in 0..g.c_out {
            let grow = &dy[(b * g.c_out + o) * g.n_out..][..g.n_out];
            for i in 0..g.c_in {
                let xrow = &x[(b * g.c_in + i) * g.n_in..][..g.n_in];
                let wrow = &mut dw[(o * g.c_in + i) * g.kernel..][..g.kernel];
                for (k, wv) in wrow.iter_mut().enumerate() {
                    let (lo, hi, off) = g.range(k);
                    if lo >= hi {
                        continue;
                    }
                    let mut acc = 0.0;
                    if g.stride == 1 {
                        let xs = &xrow[(lo as isize + off) as usize..(hi as isize + off) as usize];
                        for (xv, gv) in xs.iter().zip(&grow[lo..hi]) {
                            acc += xv * gv;
                        }
                    } else {
                        for t in lo..hi {
                            acc += xrow[(t as isize * g.stride as isize + off) as usize] * grow[t];
                        }
                    }
                    *wv += acc;
                }
            }
        }
    }
    dw
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Zero-padded convolution straight from the definition.
    fn naive(g: &Geometry, x: &[f64], w: &[f64]) -> Vec<f64> {
        let mut y = vec![0.0; g.batch * g.c_out * g.n_out];
        for b in 0..g.batch {
            for o in 0..g.c_out {
                for t in 0..g.n_out {
                    let mut acc = 0.0;
                    for i in 0..g.c_in {
                        for k in 0..g.kernel {
                            let p = (t * g.stride + k) as isize - g.left as isize;
                            if p >= 0 && (p as usize) < g.n_in {
                                acc += w[(o * g.c_in + i) * g.kernel + k] * x[(b * g.c_in + i) * g.n_in + p as usize];
                            }
                        }
                    }
                    y[(b * g.c_out + o) * g.n_out + t] = acc;
                }
            }
        }
        y
    }

    #[test]
    fn inputs_shorter_than_the_kernel() {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
        for (kernel, stride) in [(7, 1), (7, 2), (16, 2), (3, 3)] {
            for n in 1..kernel + 2 {
                let g = Geometry::same(2, 2, 3, kernel, n, stride);
                let x: Vec<f64> = (0..2 * 2 * n).map(|i| (i as f64 * 0.37).sin()).collect();
                let w: Vec<f64> = (0..3 * 2 * kernel).map(|i| (i as f64 * 0.61).cos()).collect();
                let dy: Vec<f64> = (0..2 * 3 * g.n_out).map(|i| (i as f64 * 0.23).sin()).collect();
                let y = forward(&g, &x, &w);
                for (a, b) in y.iter().zip(naive(&g, &x, &w)) {
                    assert!((a - b).abs() < 1e-12, "k {kernel} s {stride} n {n}");
                }
                // <dy, conv(x)> is bilinear in x and w, so both adjoints must agree with it.
                let lhs = dot(&dy, &y);
                assert!((lhs - dot(&adjoint(&g, &dy, &w), &x)).abs() < 1e-9);
                assert!((lhs - dot(&weight_grad(&g, &dy, &x), &w)).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn same_padding_puts_extra_zero_right() {
        let g = Geometry::same(1, 1, 1, 2, 3, 1);
        assert_eq!((g.n_out, g.left), (3, 0));
        let g = Geometry::same(1, 1, 1, 16, 1024, 2);
        assert_eq!(g.n_out, 512);
        assert_eq!(g.left, 7); // total padding 15
        let g = Geometry::same(1, 1, 1, 3, 8, 1);
        assert_eq!(g.left, 1);
    }

    #[test]
    fn ranges_stay_in_bounds() {
        for k in 1..10 {
            for stride in 1..4 {
                for n in 1..20 {
                    let g = Geometry::same(1, 1, 1, k, n, stride);
                    for tap in 0..k {
                        let (lo, hi, off) = g.range(tap);
                        for t in lo..hi {
                            let idx = t as isize * stride as isize + off;
                            assert!(idx >= 0 && (idx as usize) < n);
                        }
                        // Everything outside [lo, hi) must be out of bounds.
                        for t in (0..g.n_out).filter(|t| *t < lo || *t >= hi) {
                            let idx = t as isize * stride as isize + off;
                            assert!(idx < 0 || idx as usize >= n);
                        }
                    }
                }
            }
        }
    }
}

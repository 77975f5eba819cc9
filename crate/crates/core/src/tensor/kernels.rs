//! Numeric kernels behind the differentiable ops. All loops run in a fixed
//! order so results are bit-reproducible for a given input.

/// `c = op(a) * op(b)` (or `c += ...` when `accumulate`), with `op(a)` of
/// logical shape `[m, k]` and `op(b)` of logical shape `[k, n]`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let (rsa, csa) = if trans_a { (1, m) } else { (k, 1) };
    let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: slice lengths are checked above against the logical extents
    // and the strides address only elements inside those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 same-padded 2-D convolution over NHWC data.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kh: usize,
    pub kw: usize,
}

impl ConvGeom {
    /// Leading (top, left) zero padding. Even kernels put the extra cell on
    /// the trailing side.
    pub fn pad(&self) -> (usize, usize) {
        ((self.kh - 1) / 2, (self.kw - 1) / 2)
    }

    fn positions(&self) -> usize {
        self.batch * self.height * self.width
    }

    /// Iterate over `(out_pixel, tap, in_pixel)` for all in-bounds taps.
    /// Pixels are flat NHW indices and taps are `u * kw + v`.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (pt, pl) = self.pad();
        let (h, w) = (self.height as isize, self.width as isize);
        for b in 0..self.batch {
            for i in 0..self.height {
                for j in 0..self.width {
                    let out = (b * self.height + i) * self.width + j;
                    for u in 0..self.kh {
                        let ii = i as isize + u as isize - pt as isize;
                        if ii < 0 || ii >= h {
                            continue;
                        }
                        for v in 0..self.kw {
                            let jj = j as isize + v as isize - pl as isize;
                            if jj < 0 || jj >= w {
                                continue;
                            }
                            let src = (b * self.height + ii as usize) * self.width + jj as usize;
                            f(out, u * self.kw + v, src);
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn depthwise_forward(g: &ConvGeom, x: &[f64], k: &[f64]) -> Vec<f64> {
    let c = g.channels;
    let mut y = vec![0.0; g.positions() * c];
    g.for_each_tap(|out, tap, src| {
        let yo = &mut y[out * c..(out + 1) * c];
        let xs = &x[src * c..(src + 1) * c];
        let ks = &k[tap * c..(tap + 1) * c];
        for ch in 0..c {
            yo[ch] += xs[ch] * ks[ch];
        }
    });
    y
}

/// Returns `(dx, dk)`.
pub(crate) fn depthwise_backward(
    g: &ConvGeom,
    x: &[f64],
    k: &[f64],
    dy: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let c = g.channels;
    let mut dx = vec![0.0; x.len()];
    let mut dk = vec![0.0; k.len()];
    g.for_each_tap(|out, tap, src| {
        let dyo = &dy[out * c..(out + 1) * c];
        for ch in 0..c {
            dx[src * c + ch] += dyo[ch] * k[tap * c + ch];
            dk[tap * c + ch] += dyo[ch] * x[src * c + ch];
        }
    });
    (dx, dk)
}

/// Patch matrix of shape `[positions, kh * kw * channels]`.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64]) -> Vec<f64> {
    let c = g.channels;
    let row = g.kh * g.kw * c;
    let mut cols = vec![0.0; g.positions() * row];
    g.for_each_tap(|out, tap, src| {
        cols[out * row + tap * c..out * row + (tap + 1) * c]
            .copy_from_slice(&x[src * c..(src + 1) * c]);
    });
    cols
}

pub(crate) fn col2im(g: &ConvGeom, cols: &[f64]) -> Vec<f64> {
    let c = g.channels;
    let row = g.kh * g.kw * c;
    let mut x = vec![0.0; g.positions() * c];
    g.for_each_tap(|out, tap, src| {
        let from = &cols[out * row + tap * c..out * row + (tap + 1) * c];
        for (d, s) in x[src * c..(src + 1) * c].iter_mut().zip(from) {
            *d += s;
        }
    });
    x
}

//! Raw slice kernels behind the convolution and pooling ops.

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub frames: usize,
    pub in_w: usize,
    pub in_h: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad_w: usize,
    pub pad_h: usize,
    pub out_w: usize,
    pub out_h: usize,
}

impl ConvGeometry {
    #[inline]
    fn input_index(&self, ox: usize, d: usize, pad: usize, extent: usize) -> Option<usize> {
        let pos = ox * self.stride + d;
        if pos < pad || pos - pad >= extent {
            None
        } else {
            Some(pos - pad)
        }
    }
}

impl ConvGeometry {
    fn rows(&self) -> usize {
        self.frames * self.out_w * self.out_h
    }

    /// Patch length, ordered `(dx, dy, ci)` like the kernel's leading axes.
    fn patch(&self) -> usize {
        self.kh * self.kw * self.cin
    }
}

/// Unfolds `x` into a `rows×patch` matrix of receptive fields (zeros where
/// the window hangs over the padding).
fn im2col(g: &ConvGeometry, x: &[f64]) -> Vec<f64> {
    let mut cols = Vec::with_capacity(g.rows() * g.patch());
    for fr in 0..g.frames {
        for ox in 0..g.out_w {
            for oy in 0..g.out_h {
                for dx in 0..g.kh {
                    let ix = g.input_index(ox, dx, g.pad_w, g.in_w);
                    for dy in 0..g.kw {
                        match (ix, g.input_index(oy, dy, g.pad_h, g.in_h)) {
                            (Some(ix), Some(iy)) => {
                                let i = ((fr * g.in_w + ix) * g.in_h + iy) * g.cin;
                                cols.extend_from_slice(&x[i..i + g.cin]);
                            }
                            _ => cols.resize(cols.len() + g.cin, 0.0),
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adds a `rows×patch` matrix back onto the input positions it came from.
fn col2im(g: &ConvGeometry, cols: &[f64], gx: &mut [f64]) {
    let q = g.patch();
    for_each_tap(g, |row, tap, i_base| {
        let src = row * q + tap * g.cin;
        for (d, s) in gx[i_base..i_base + g.cin]
            .iter_mut()
            .zip(&cols[src..src + g.cin])
        {
            *d += s;
        }
    });
}

/// Calls `f(output row, kernel tap, input offset)` for every in-bounds tap.
fn for_each_tap(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize)) {
    for fr in 0..g.frames {
        for ox in 0..g.out_w {
            for oy in 0..g.out_h {
                let row = (fr * g.out_w + ox) * g.out_h + oy;
                for dx in 0..g.kh {
                    let Some(ix) = g.input_index(ox, dx, g.pad_w, g.in_w) else {
                        continue;
                    };
                    for dy in 0..g.kw {
                        let Some(iy) = g.input_index(oy, dy, g.pad_h, g.in_h) else {
                            continue;
                        };
                        f(
                            row,
                            dx * g.kw + dy,
                            ((fr * g.in_w + ix) * g.in_h + iy) * g.cin,
                        );
                    }
                }
            }
        }
    }
}

/// `c ← beta·c + a·b` for row-major `a` (`m×k`, or `k×m` when `ta`) and
/// `b` (`k×n`, or `n×k` when `tb`).
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    beta: f64,
    c: &mut [f64],
) {
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above address exactly the `m×k`, `k×n` and `m×n`
    // row-major buffers, whose lengths the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn conv2d_forward(g: &ConvGeometry, x: &[f64], k: &[f64], out: &mut [f64]) {
    let cols = im2col(g, x);
    gemm(
        g.rows(),
        g.patch(),
        g.cout,
        &cols,
        false,
        k,
        false,
        0.0,
        out,
    );
}

/// Accumulates kernel gradients, and input gradients when `gx` is given.
pub(crate) fn conv2d_backward(
    g: &ConvGeometry,
    x: &[f64],
    k: &[f64],
    gout: &[f64],
    gx: Option<&mut [f64]>,
    gk: Option<&mut [f64]>,
) {
    let (rows, q) = (g.rows(), g.patch());
    if let Some(gk) = gk {
        let cols = im2col(g, x);
        gemm(q, rows, g.cout, &cols, true, gout, false, 1.0, gk);
    }
    if let Some(gx) = gx {
        let mut gcols = vec![0.0; rows * q];
        gemm(rows, g.cout, q, gout, false, k, true, 0.0, &mut gcols);
        col2im(g, &gcols, gx);
    }
}

/// Half-open window `[floor(m*src/dst), ceil((m+1)*src/dst))`.
#[inline]
pub(crate) fn adaptive_window(m: usize, src: usize, dst: usize) -> (usize, usize) {
    let start = m * src / dst;
    let end = ((m + 1) * src).div_ceil(dst);
    (start, end)
}

/// Max-pools `K×W×H×C` to `K×W'×H'×C`, returning flat argmax input indices
/// (first in row-major order on ties).
pub(crate) fn adaptive_max_pool_forward(
    x: &[f64],
    dims: [usize; 4],
    target: (usize, usize),
    out: &mut [f64],
) -> Vec<usize> {
    let [k, w, h, c] = dims;
    let (tw, th) = target;
    let mut argmax = vec![0usize; k * tw * th * c];
    for f in 0..k {
        for m in 0..tw {
            let (w0, w1) = adaptive_window(m, w, tw);
            for n in 0..th {
                let (h0, h1) = adaptive_window(n, h, th);
                let o_base = ((f * tw + m) * th + n) * c;
                for ch in 0..c {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for r in w0..w1 {
                        for s in h0..h1 {
                            let i = ((f * w + r) * h + s) * c + ch;
                            if x[i] > best || best_i == usize::MAX {
                                best = x[i];
                                best_i = i;
                            }
                        }
                    }
                    out[o_base + ch] = best;
                    argmax[o_base + ch] = best_i;
                }
            }
        }
    }
    argmax
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geometry(pad: usize, stride: usize) -> ConvGeometry {
        let (in_w, in_h, kh, kw) = (4, 3, 3, 2);
        ConvGeometry {
            frames: 2,
            in_w,
            in_h,
            cin: 2,
            kh,
            kw,
            cout: 3,
            stride,
            pad_w: pad,
            pad_h: pad,
            out_w: (in_w + 2 * pad - kh) / stride + 1,
            out_h: (in_h + 2 * pad - kw) / stride + 1,
        }
    }

    #[test]
    fn col2im_is_the_adjoint_of_im2col() {
        for (pad, stride) in [(0, 1), (1, 1), (1, 2)] {
            let g = geometry(pad, stride);
            let n = g.frames * g.in_w * g.in_h * g.cin;
            let x: Vec<f64> = (0..n).map(|i| (i as f64 * 0.37).sin()).collect();
            let y: Vec<f64> = (0..g.rows() * g.patch())
                .map(|i| (i as f64 * 0.11).cos())
                .collect();
            let lhs: f64 = im2col(&g, &x).iter().zip(&y).map(|(a, b)| a * b).sum();
            let mut back = vec![0.0; n];
            col2im(&g, &y, &mut back);
            let rhs: f64 = back.iter().zip(&x).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-12, "{lhs} vs {rhs}");
        }
    }

    #[test]
    fn gemm_transpose_flags() {
        // a = [[1, 2], [3, 4]], b = [[5, 6], [7, 8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 1.0, &mut c);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn adaptive_windows_cover_the_source() {
        for src in 1..12 {
            for dst in 1..=src {
                let w: Vec<_> = (0..dst).map(|m| adaptive_window(m, src, dst)).collect();
                assert_eq!(w[0].0, 0);
                assert_eq!(w[dst - 1].1, src);
                assert!(w.windows(2).all(|p| p[1].0 <= p[0].1 && p[0].0 < p[1].0));
            }
        }
        assert_eq!(adaptive_window(1, 5, 2), (2, 5));
    }

    #[test]
    fn pool_ties_pick_the_first_index() {
        let x = [1.0, 1.0, 1.0, 1.0];
        let mut out = [0.0];
        let arg = adaptive_max_pool_forward(&x, [1, 2, 2, 1], (1, 1), &mut out);
        assert_eq!((out[0], arg[0]), (1.0, 0));
    }
}

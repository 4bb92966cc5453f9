//! Stride-1 convolution kernels via im2col.

#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    fn taps(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.ho * self.wo
    }

    fn in_plane(&self) -> usize {
        self.c * self.h * self.w
    }

    fn out_plane(&self) -> usize {
        self.o * self.pixels()
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn cols(&self, kx: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(kx);
        let hi = (self.w + self.pad).saturating_sub(kx).min(self.wo);
        (lo, hi.max(lo))
    }

    fn row(&self, oy: usize, ky: usize) -> Option<usize> {
        (oy + ky).checked_sub(self.pad).filter(|&r| r < self.h)
    }
}

/// `c ← beta·c + a·b` for row-major `a` (m×k) with the given strides.
#[allow(clippy::too_many_arguments)]
fn gemm(m: usize, k: usize, n: usize, a: &[f64], (rsa, csa): (usize, usize), b: &[f64], (rsb, csb): (usize, usize), beta: f64, c: &mut [f64]) {
    assert!(a.len() >= (m - 1) * rsa + (k - 1) * csa + 1);
    assert!(b.len() >= (k - 1) * rsb + (n - 1) * csb + 1);
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index touched for the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
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

/// Unfold one sample (C, H, W) into a (C·kh·kw, ho·wo) matrix.
fn im2col(x: &[f64], d: &ConvDims, col: &mut [f64]) {
    let p = d.pixels();
    for ci in 0..d.c {
        let plane = &x[ci * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &mut col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                let (lo, hi) = d.cols(kx);
                for oy in 0..d.ho {
                    let out = &mut row[oy * d.wo..][..d.wo];
                    match d.row(oy, ky) {
                        Some(iy) if lo < hi => {
                            out[..lo].fill(0.0);
                            out[hi..].fill(0.0);
                            out[lo..hi].copy_from_slice(&plane[iy * d.w + lo + kx - d.pad..][..hi - lo]);
                        }
                        _ => out.fill(0.0),
                    }
                }
            }
        }
    }
}

/// Fold a (C·kh·kw, ho·wo) matrix back onto (C, H, W), accumulating.
fn col2im_add(col: &[f64], d: &ConvDims, gx: &mut [f64]) {
    let p = d.pixels();
    for ci in 0..d.c {
        let plane = &mut gx[ci * d.h * d.w..][..d.h * d.w];
        for ky in 0..d.kh {
            for kx in 0..d.kw {
                let row = &col[((ci * d.kh + ky) * d.kw + kx) * p..][..p];
                let (lo, hi) = d.cols(kx);
                if lo >= hi {
                    continue;
                }
                for oy in 0..d.ho {
                    let Some(iy) = d.row(oy, ky) else { continue };
                    let dst = &mut plane[iy * d.w + lo + kx - d.pad..][..hi - lo];
                    for (a, &b) in dst.iter_mut().zip(&row[oy * d.wo + lo..oy * d.wo + hi]) {
                        *a += b;
                    }
                }
            }
        }
    }
}

pub(crate) fn forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, n: usize, d: &ConvDims) -> Vec<f64> {
    let (k, p) = (d.taps(), d.pixels());
    let mut y = vec![0.0; n * d.out_plane()];
    let mut col = vec![0.0; k * p];
    for ni in 0..n {
        im2col(&x[ni * d.in_plane()..][..d.in_plane()], d, &mut col);
        let out = &mut y[ni * d.out_plane()..][..d.out_plane()];
        if let Some(b) = bias {
            for (orow, &bv) in out.chunks_exact_mut(p).zip(b) {
                orow.fill(bv);
            }
        }
        gemm(d.o, k, p, wt, (k, 1), &col, (p, 1), 1.0, out);
    }
    y
}

/// Accumulate weight and input gradients for upstream gradient `g` (N, O, ho, wo).
pub(crate) fn backward(
    x: &[f64],
    wt: &[f64],
    g: &[f64],
    n: usize,
    d: &ConvDims,
    mut gw: Option<&mut [f64]>,
    mut gx: Option<&mut [f64]>,
) {
    let (k, p) = (d.taps(), d.pixels());
    let mut col = vec![0.0; k * p];
    let mut dcol = vec![0.0; if gx.is_some() { k * p } else { 0 }];
    for ni in 0..n {
        let gout = &g[ni * d.out_plane()..][..d.out_plane()];
        if let Some(gw) = gw.as_deref_mut() {
            im2col(&x[ni * d.in_plane()..][..d.in_plane()], d, &mut col);
            gemm(d.o, p, k, gout, (p, 1), &col, (1, p), 1.0, gw);
        }
        if let Some(gx) = gx.as_deref_mut() {
            gemm(k, d.o, p, wt, (1, k), gout, (p, 1), 0.0, &mut dcol);
            col2im_add(&dcol, d, &mut gx[ni * d.in_plane()..][..d.in_plane()]);
        }
    }
}

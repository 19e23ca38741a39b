//! Slice-level numeric kernels shared by the autodiff ops.

/// `c = op(a) * op(b) + beta * c`, all row-major.
///
/// `op(a)` is `m x k`: stored as `m x k` when `a_t` is false, as `k x m`
/// otherwise. `op(b)` is `k x n`, likewise.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe dense row-major storage.
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

/// Geometry of a 2-D convolution over one sample.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    /// Rows of the unfolded column matrix.
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// True when the column matrix coincides with the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output columns `ox` whose input column `ox * stride + kx - pad` is in
/// bounds, as a half-open range.
fn valid_cols(g: &ConvGeom, kx: usize, ow: usize) -> (usize, usize) {
    let lo = g.pad.saturating_sub(kx).div_ceil(g.stride).min(ow);
    let hi = if g.w + g.pad > kx {
        ((g.w + g.pad - kx - 1) / g.stride + 1).min(ow)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Unfold one `cin x h x w` sample into a `(cin*kh*kw) x (oh*ow)` matrix.
pub fn im2col(x: &[f64], g: &ConvGeom, col: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    debug_assert_eq!(col.len(), g.patch_len() * p);
    for ci in 0..g.cin {
        let plane = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx, ow);
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let start = lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[start..start + hi - lo]);
                        } else {
                            for (j, d) in line[lo..hi].iter_mut().enumerate() {
                                *d = src[start + j * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add a column matrix back onto `dx`.
pub fn col2im(col: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    for ci in 0..g.cin {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src = &col[row * p..(row + 1) * p];
                let (lo, hi) = valid_cols(g, kx, ow);
                if lo >= hi {
                    continue;
                }
                let start = lo * g.stride + kx - g.pad;
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    let s = &src[oy * ow + lo..oy * ow + hi];
                    if g.stride == 1 {
                        for (d, v) in dst[start..start + hi - lo].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (j, v) in s.iter().enumerate() {
                            dst[start + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Bilinear source taps for one output coordinate (half-pixel centres,
/// edge-clamped), as `(i0, i1, weight_of_i1)`.
pub fn bilinear_taps(out: usize, factor: usize, len: usize) -> (usize, usize, f64) {
    let src = ((out as f64 + 0.5) / factor as f64 - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(len - 1);
    let i1 = (i0 + 1).min(len - 1);
    (i0, i1, src - i0 as f64)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// Tanh approximation of GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

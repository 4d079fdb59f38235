//! Raw buffer kernels shared by the forward and adjoint passes.

/// `c = op(a) · op(b) + beta · c` for row-major buffers, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. `ta`/`tb` select the transposed storage.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    ta: bool,
    b: &[f64],
    tb: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k, "gemm: lhs buffer");
    assert_eq!(b.len(), k * n, "gemm: rhs buffer");
    assert_eq!(c.len(), m * n, "gemm: output buffer");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: buffer lengths are asserted above and the strides address
    // exactly `m*k`, `k*n` and `m*n` elements respectively.
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

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: (usize, usize),
    pub stride: (usize, usize),
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.oh * self.ow
    }
}

/// Unfolds `x[cin, h, w]` into `[cin*kh*kw, oh*ow]` columns.
pub(crate) fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let mut cols = vec![0.0; g.patch_len() * g.out_len()];
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let (sh, sw) = (g.stride.0 as isize, g.stride.1 as isize);
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * g.out_len()..(row + 1) * g.out_len()];
                for oy in 0..g.oh {
                    let iy = oy as isize * sh + ki as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src = &x[(c * g.h + iy as usize) * g.w..(c * g.h + iy as usize + 1) * g.w];
                    for ox in 0..g.ow {
                        let ix = ox as isize * sw + kj as isize - pw;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.ow + ox] = src[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto the input grid.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeometry, dx: &mut [f64]) {
    let (ph, pw) = (g.pad.0 as isize, g.pad.1 as isize);
    let (sh, sw) = (g.stride.0 as isize, g.stride.1 as isize);
    for c in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * g.out_len()..(row + 1) * g.out_len()];
                for oy in 0..g.oh {
                    let iy = oy as isize * sh + ki as isize - ph;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let base = (c * g.h + iy as usize) * g.w;
                    for ox in 0..g.ow {
                        let ix = ox as isize * sw + kj as isize - pw;
                        if ix >= 0 && ix < g.w as isize {
                            dx[base + ix as usize] += src[oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn gelu(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    0.5 * x * (1.0 + (C * (x + 0.044715 * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    const C: f64 = 0.797_884_560_802_865_4;
    let inner = C * (x + 0.044715 * x * x * x);
    let t = inner.tanh();
    let dinner = C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Dense numeric kernels shared by the tape's forward and backward passes.

/// `c = alpha * a(m×k) · b(k×n) + beta * c`, with arbitrary element strides.
#[allow(clippy::too_many_arguments)]
#[inline]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if beta == 0.0 {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        } else {
            c[..m * n].iter_mut().for_each(|v| *v *= beta);
        }
        return;
    }
    // SAFETY: callers pass buffers covering the strided extents; every call site
    // below derives strides from the same shapes it sized the buffers with.
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

#[cfg(test)]
/// Row-major `a(m×k) · b(k×n)` into a fresh buffer.
pub(crate) fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, k as isize, 1, b, n as isize, 1, &mut c, 0.0);
    c
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv1dGeom {
    pub cin: usize,
    pub len: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_len: usize,
}

/// Unfold one `[cin, len]` sample into `[cin*k, out_len]` columns.
pub(crate) fn im2col_1d(x: &[f64], g: &Conv1dGeom, cols: &mut [f64]) {
    for c in 0..g.cin {
        let xrow = &x[c * g.len..(c + 1) * g.len];
        for kk in 0..g.k {
            let row = &mut cols[(c * g.k + kk) * g.out_len..(c * g.k + kk + 1) * g.out_len];
            for (o, slot) in row.iter_mut().enumerate() {
                let pos = (o * g.stride + kk) as isize - g.pad as isize;
                *slot = if pos >= 0 && (pos as usize) < g.len { xrow[pos as usize] } else { 0.0 };
            }
        }
    }
}

pub(crate) fn col2im_1d(cols: &[f64], g: &Conv1dGeom, gx: &mut [f64]) {
    for c in 0..g.cin {
        for kk in 0..g.k {
            let row = &cols[(c * g.k + kk) * g.out_len..(c * g.k + kk + 1) * g.out_len];
            for (o, &v) in row.iter().enumerate() {
                let pos = (o * g.stride + kk) as isize - g.pad as isize;
                if pos >= 0 && (pos as usize) < g.len {
                    gx[c * g.len + pos as usize] += v;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Conv2dGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

pub(crate) fn im2col_2d(x: &[f64], g: &Conv2dGeom, cols: &mut [f64]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * ohw..(r + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        row[oy * g.out_w + ox] = if iy >= 0
                            && (iy as usize) < g.h
                            && ix >= 0
                            && (ix as usize) < g.w
                        {
                            plane[iy as usize * g.w + ix as usize]
                        } else {
                            0.0
                        };
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_2d(cols: &[f64], g: &Conv2dGeom, gx: &mut [f64]) {
    let ohw = g.out_h * g.out_w;
    for c in 0..g.cin {
        let plane = &mut gx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &cols[r * ohw..(r + 1) * ohw];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy as usize >= g.h {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && (ix as usize) < g.w {
                            plane[iy as usize * g.w + ix as usize] += row[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through a single `exp`; within a few ulp of `f64::tanh` and several times faster.
#[inline]
pub(crate) fn fast_tanh(u: f64) -> f64 {
    if u.abs() < 0.05 {
        return u.tanh();
    }
    let e = (-2.0 * u.abs()).exp();
    ((1.0 - e) / (1.0 + e)).copysign(u)
}

/// Tanh-approximated GELU.
#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + fast_tanh(GELU_C * (x + GELU_A * x * x * x)))
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = fast_tanh(u);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive() {
        let a: Vec<f64> = (0..6).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5 - 1.0).collect();
        let c = matmul(&a, &b, 2, 3, 4);
        for i in 0..2 {
            for j in 0..4 {
                let want: f64 = (0..3).map(|p| a[i * 3 + p] * b[p * 4 + j]).sum();
                assert_eq!(c[i * 4 + j], want);
            }
        }
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = Conv1dGeom { cin: 2, len: 9, k: 3, stride: 2, pad: 1, out_len: 5 };
        let x: Vec<f64> = (0..18).map(|v| (v as f64).sin()).collect();
        let c: Vec<f64> = (0..30).map(|v| (v as f64 * 0.7).cos()).collect();
        let mut cols = vec![0.0; 30];
        im2col_1d(&x, &g, &mut cols);
        let mut gx = vec![0.0; 18];
        col2im_1d(&c, &g, &mut gx);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gx).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn fast_tanh_close_to_libm() {
        for i in -4000..4000 {
            let u = i as f64 * 0.0037;
            assert!((fast_tanh(u) - u.tanh()).abs() < 4e-16, "{u}");
        }
    }

    #[test]
    fn gelu_grad_matches_difference() {
        for &x in &[-3.0, -0.5, 0.0, 0.3, 2.0] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}

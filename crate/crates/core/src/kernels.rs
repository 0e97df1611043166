//! Raw slice kernels behind the differentiable ops. Feature maps are `H x W x C`
//! row-major, convolution kernels are `KH x KW x Cin x Cout`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub cout: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    /// Output spatial size of a forward convolution, `None` if it would be empty.
    pub fn conv_out(&self) -> Option<(usize, usize)> {
        let hp = self.h + 2 * self.pad;
        let wp = self.w + 2 * self.pad;
        if hp < self.kh || wp < self.kw || self.stride == 0 {
            return None;
        }
        Some(((hp - self.kh) / self.stride + 1, (wp - self.kw) / self.stride + 1))
    }

    /// Output spatial size of a transposed convolution.
    pub fn deconv_out(&self) -> Option<(usize, usize)> {
        let oh = ((self.h - 1) * self.stride + self.kh).checked_sub(2 * self.pad)?;
        let ow = ((self.w - 1) * self.stride + self.kw).checked_sub(2 * self.pad)?;
        (oh > 0 && ow > 0).then_some((oh, ow))
    }
}

#[inline]
fn axpy(acc: &mut [f32], a: f32, row: &[f32]) {
    for (o, &r) in acc.iter_mut().zip(row) {
        *o += a * r;
    }
}


/// `KH x KW x Cin x Cout` to `KH x KW x Cout x Cin`.
fn transpose_taps(k: &[f32], taps: usize, cin: usize, cout: usize) -> Vec<f32> {
    let mut t = vec![0.0f32; k.len()];
    for tap in 0..taps {
        let (src, dst) = (&k[tap * cin * cout..][..cin * cout], &mut t[tap * cin * cout..][..cin * cout]);
        for ci in 0..cin {
            for co in 0..cout {
                dst[co * cin + ci] = src[ci * cout + co];
            }
        }
    }
    t
}

/// Offsets of the input pixel feeding output `o` through tap `k`, or `None` in padding.
#[inline]
fn src(o: usize, k: usize, stride: usize, pad: usize, limit: usize) -> Option<usize> {
    (o * stride + k).checked_sub(pad).filter(|&i| i < limit)
}

/// Unrolled input patches, one `KH * KW * Cin` row per output pixel, zero in
/// the padding.
fn im2col(x: &[f32], g: &ConvGeom, oh: usize, ow: usize) -> Vec<f32> {
    let row = g.kh * g.kw * g.cin;
    let mut p = vec![0.0f32; oh * ow * row];
    for oy in 0..oh {
        for ox in 0..ow {
            let dst = &mut p[(oy * ow + ox) * row..][..row];
            for ky in 0..g.kh {
                let Some(iy) = src(oy, ky, g.stride, g.pad, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = src(ox, kx, g.stride, g.pad, g.w) else { continue };
                    dst[(ky * g.kw + kx) * g.cin..][..g.cin].copy_from_slice(&x[(iy * g.w + ix) * g.cin..][..g.cin]);
                }
            }
        }
    }
    p
}

/// Scatter-add patch gradients back onto the input grid.
fn col2im(dp: &[f32], g: &ConvGeom, oh: usize, ow: usize) -> Vec<f32> {
    let row = g.kh * g.kw * g.cin;
    let mut dx = vec![0.0f32; g.h * g.w * g.cin];
    for oy in 0..oh {
        for ox in 0..ow {
            let srow = &dp[(oy * ow + ox) * row..][..row];
            for ky in 0..g.kh {
                let Some(iy) = src(oy, ky, g.stride, g.pad, g.h) else { continue };
                for kx in 0..g.kw {
                    let Some(ix) = src(ox, kx, g.stride, g.pad, g.w) else { continue };
                    axpy(&mut dx[(iy * g.w + ix) * g.cin..][..g.cin], 1.0, &srow[(ky * g.kw + kx) * g.cin..][..g.cin]);
                }
            }
        }
    }
    dx
}

pub fn conv2d_forward(x: &[f32], k: &[f32], g: &ConvGeom, oh: usize, ow: usize) -> Vec<f32> {
    let p = im2col(x, g, oh, ow);
    matmul(&p, k, oh * ow, g.kh * g.kw * g.cin, g.cout)
}

/// Gradients of a forward convolution w.r.t. its input and kernel.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward(
    x: &[f32],
    k: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let row = g.kh * g.kw * g.cin;
    let dx = want_dx.then(|| col2im(&matmul_bt(dout, k, oh * ow, g.cout, row), g, oh, ow));
    let dk = want_dk.then(|| matmul_at(&im2col(x, g, oh, ow), dout, oh * ow, row, g.cout));
    (dx, dk)
}

pub fn deconv2d_forward(x: &[f32], k: &[f32], g: &ConvGeom, oh: usize, ow: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; oh * ow * g.cout];
    for iy in 0..g.h {
        for ix in 0..g.w {
            let xv = &x[(iy * g.w + ix) * g.cin..][..g.cin];
            for ky in 0..g.kh {
                let Some(oy) = (iy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < oh) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ox) = (ix * g.stride + kx).checked_sub(g.pad).filter(|&v| v < ow)
                    else {
                        continue;
                    };
                    let o = &mut out[(oy * ow + ox) * g.cout..][..g.cout];
                    let kb = &k[(ky * g.kw + kx) * g.cin * g.cout..][..g.cin * g.cout];
                    for (ci, &a) in xv.iter().enumerate() {
                        if a != 0.0 {
                            axpy(o, a, &kb[ci * g.cout..][..g.cout]);
                        }
                    }
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub fn deconv2d_backward(
    x: &[f32],
    k: &[f32],
    dout: &[f32],
    g: &ConvGeom,
    oh: usize,
    ow: usize,
    want_dx: bool,
    want_dk: bool,
) -> (Option<Vec<f32>>, Option<Vec<f32>>) {
    let mut dx = want_dx.then(|| vec![0.0f32; x.len()]);
    let mut dk = want_dk.then(|| vec![0.0f32; k.len()]);
    let kt = want_dx.then(|| transpose_taps(k, g.kh * g.kw, g.cin, g.cout));
    for iy in 0..g.h {
        for ix in 0..g.w {
            let xo = (iy * g.w + ix) * g.cin;
            for ky in 0..g.kh {
                let Some(oy) = (iy * g.stride + ky).checked_sub(g.pad).filter(|&v| v < oh) else {
                    continue;
                };
                for kx in 0..g.kw {
                    let Some(ox) = (ix * g.stride + kx).checked_sub(g.pad).filter(|&v| v < ow)
                    else {
                        continue;
                    };
                    let d = &dout[(oy * ow + ox) * g.cout..][..g.cout];
                    let ko = (ky * g.kw + kx) * g.cin * g.cout;
                    if let (Some(dx), Some(kt)) = (dx.as_mut(), kt.as_ref()) {
                        let row = &mut dx[xo..xo + g.cin];
                        for (co, &dv) in d.iter().enumerate() {
                            if dv != 0.0 {
                                axpy(row, dv, &kt[ko + co * g.cin..][..g.cin]);
                            }
                        }
                    }
                    if let Some(dk) = dk.as_mut() {
                        for (ci, &a) in x[xo..xo + g.cin].iter().enumerate() {
                            if a != 0.0 {
                                let krow = ko + ci * g.cout;
                                axpy(&mut dk[krow..krow + g.cout], a, d);
                            }
                        }
                    }
                }
            }
        }
    }
    (dx, dk)
}

/// `c = a @ b` for strided `m x k` and `k x n` views, `c` row-major `m x n`.
fn gemm(m: usize, k: usize, n: usize, a: &[f32], (rsa, csa): (isize, isize), b: &[f32], (rsb, csb): (isize, isize)) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    assert!(a.len() >= m * k && b.len() >= k * n, "gemm operand too short");
    // SAFETY: both operands hold at least `m * k` and `k * n` elements and the
    // strides describe dense row- or column-major views of them; `c` is a
    // dense `m x n` buffer.
    unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, c.as_mut_ptr(), n as isize, 1);
    }
    c
}

/// `a[m,k] @ b[k,n]`.
pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(m, k, n, a, (k as isize, 1), b, (n as isize, 1))
}

/// `a[m,k] @ b[n,k]^T`.
pub fn matmul_bt(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    gemm(m, k, n, a, (k as isize, 1), b, (1, k as isize))
}

/// `a[k,m]^T @ b[k,n]`.
pub fn matmul_at(a: &[f32], b: &[f32], k: usize, m: usize, n: usize) -> Vec<f32> {
    gemm(m, k, n, a, (1, m as isize), b, (n as isize, 1))
}

/// Decompose `shape` around `axis` into `(outer, len, inner)`.
pub fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conv_output_size() {
        let g = ConvGeom { h: 5, w: 7, cin: 1, kh: 3, kw: 3, cout: 1, stride: 2, pad: 1 };
        assert_eq!(g.conv_out(), Some((3, 4)));
        let g = ConvGeom { h: 1, w: 1, cin: 1, kh: 3, kw: 3, cout: 1, stride: 1, pad: 0 };
        assert_eq!(g.conv_out(), None);
    }

    #[test]
    fn matmul_variants_agree() {
        let a: Vec<f32> = (0..6).map(|v| v as f32).collect(); // 2x3
        let b: Vec<f32> = (0..12).map(|v| v as f32 * 0.5).collect(); // 3x4
        let ab = matmul(&a, &b, 2, 3, 4);
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(matmul_bt(&a, &bt, 2, 3, 4), ab);
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(matmul_at(&at, &b, 3, 2, 4), ab);
    }
}

#[cfg(test)]
mod gemm_oracle {
    use super::*;

    fn naive(x: &[f32], k: &[f32], g: &ConvGeom, oh: usize, ow: usize) -> Vec<f32> {
        let mut out = vec![0.0f32; oh * ow * g.cout];
        for oy in 0..oh {
            for ox in 0..ow {
                for ky in 0..g.kh {
                    let Some(iy) = src(oy, ky, g.stride, g.pad, g.h) else { continue };
                    for kx in 0..g.kw {
                        let Some(ix) = src(ox, kx, g.stride, g.pad, g.w) else { continue };
                        for ci in 0..g.cin {
                            for co in 0..g.cout {
                                out[(oy * ow + ox) * g.cout + co] += x[(iy * g.w + ix) * g.cin + ci]
                                    * k[((ky * g.kw + kx) * g.cin + ci) * g.cout + co];
                            }
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn large_conv_matches_naive() {
        let g = ConvGeom { h: 32, w: 32, cin: 3, kh: 3, kw: 3, cout: 8, stride: 2, pad: 1 };
        let (oh, ow) = g.conv_out().unwrap();
        let x: Vec<f32> = (0..32 * 32 * 3).map(|i| ((i * 37 % 101) as f32 / 50.0) - 1.0).collect();
        let k: Vec<f32> = (0..9 * 3 * 8).map(|i| ((i * 53 % 97) as f32 / 48.0) - 1.0).collect();
        let a = conv2d_forward(&x, &k, &g, oh, ow);
        let b = naive(&x, &k, &g, oh, ow);
        let d = a.iter().zip(&b).map(|(p, q)| (p - q).abs()).fold(0.0f32, f32::max);
        assert!(d < 1e-4, "{d}");
    }
}

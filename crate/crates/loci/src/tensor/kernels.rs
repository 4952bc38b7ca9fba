//! Raw numeric kernels shared by forward and backward rules.

/// Row-major single-precision GEMM: c = a[m,k] @ b[k,n] + beta * c.
pub(crate) fn gemm(m: usize, k: usize, n: usize, a: &[f32], b: &[f32], beta: f32, c: &mut [f32]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output spatial size of a strided convolution with zero padding.
pub(crate) fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds `src` (C x H x W) into columns (C*KH*KW x OH*OW) for GEMM-based
/// convolution. Out-of-bounds taps read zero.
pub(crate) fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    let mut row = 0;
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let dst = &mut cols[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        dst[idx..idx + ow].fill(0.0);
                        idx += ow;
                        continue;
                    }
                    let srow = &plane[si as usize * w..(si as usize + 1) * w];
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        dst[idx] = if sj < 0 || sj >= w as isize { 0.0 } else { srow[sj as usize] };
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds columns back to the image: the adjoint of [`im2col`].
pub(crate) fn col2im(
    cols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    dst: &mut [f32],
) {
    let oh = conv_out_dim(h, kh, stride, pad);
    let ow = conv_out_dim(w, kw, stride, pad);
    debug_assert_eq!(cols.len(), c * kh * kw * oh * ow);
    debug_assert_eq!(dst.len(), c * h * w);
    let mut row = 0;
    for ch in 0..c {
        let plane = &mut dst[ch * h * w..(ch + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let src = &cols[row * oh * ow..(row + 1) * oh * ow];
                let mut idx = 0;
                for oi in 0..oh {
                    let si = (oi * stride + ki) as isize - pad as isize;
                    if si < 0 || si >= h as isize {
                        idx += ow;
                        continue;
                    }
                    let drow = &mut plane[si as usize * w..(si as usize + 1) * w];
                    for oj in 0..ow {
                        let sj = (oj * stride + kj) as isize - pad as isize;
                        if sj >= 0 && (sj as usize) < w {
                            drow[sj as usize] += src[idx];
                        }
                        idx += 1;
                    }
                }
                row += 1;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_manual() {
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]; // 3x2
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, &a, &b, 0.0, &mut c);
        assert_eq!(c, vec![58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn im2col_col2im_adjoint() {
        // <im2col(x), y> == <x, col2im(y)> for random x, y.
        let (c, h, w, k, s, p) = (2, 5, 4, 3, 2, 1);
        let oh = conv_out_dim(h, k, s, p);
        let ow = conv_out_dim(w, k, s, p);
        let x: Vec<f32> = (0..c * h * w).map(|i| (i as f32 * 0.7).sin()).collect();
        let y: Vec<f32> = (0..c * k * k * oh * ow).map(|i| (i as f32 * 0.3).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, c, h, w, k, k, s, p, &mut cols);
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, c, h, w, k, k, s, p, &mut back);
        let rhs: f64 = back.iter().zip(&x).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
        assert!((lhs - rhs).abs() < 1e-3, "{lhs} vs {rhs}");
    }
}

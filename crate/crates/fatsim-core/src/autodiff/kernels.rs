//! Raw compute kernels behind the graph ops.
//!
//! GEMM is delegated to `matrixmultiply` (runtime SIMD dispatch); the im2col
//! packing, col2im scatter and pooling loops live here.

/// C[m,n] = alpha * A[m,k] @ B[k,n] + beta * C, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn sgemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
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

/// Pack one sample's [cin, h, w] plane into columns [cin*kh*kw, oh*ow]
/// for a stride-1 convolution with symmetric zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    input: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    cols: &mut [f32],
) {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    debug_assert_eq!(input.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    cols.fill(0.0);
    for c in 0..cin {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    // valid ox range so that ix = ox + kj - pad is in [0, w)
                    let ox_lo = pad.saturating_sub(kj);
                    let ox_hi = (w + pad - kj).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo + kj - pad;
                    let src = &plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                    let dst = &mut cols[row + oy * ow + ox_lo..row + oy * ow + ox_hi];
                    dst.copy_from_slice(src);
                }
            }
        }
    }
}

/// Scatter-add columns [cin*kh*kw, oh*ow] back onto the input plane.
#[allow(clippy::too_many_arguments)]
pub fn col2im_add(
    cols: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out: &mut [f32],
) {
    let oh = h + 2 * pad - kh + 1;
    let ow = w + 2 * pad - kw + 1;
    debug_assert_eq!(out.len(), cin * h * w);
    debug_assert_eq!(cols.len(), cin * kh * kw * oh * ow);
    for c in 0..cin {
        let plane = &mut out[c * h * w..(c + 1) * h * w];
        for ki in 0..kh {
            for kj in 0..kw {
                let row = ((c * kh + ki) * kw + kj) * oh * ow;
                for oy in 0..oh {
                    let iy = (oy + ki) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    let ox_lo = pad.saturating_sub(kj);
                    let ox_hi = (w + pad - kj).min(ow);
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    let ix0 = ox_lo + kj - pad;
                    let src = &cols[row + oy * ow + ox_lo..row + oy * ow + ox_hi];
                    let dst = &mut plane[iy * w + ix0..iy * w + ix0 + (ox_hi - ox_lo)];
                    for (d, s) in dst.iter_mut().zip(src) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// 2x2 max pooling with stride 2 over [n, c, h, w]; h and w must be even.
/// Returns pooled values and, per output cell, the linear index of the
/// winning element within its (h, w) plane.
pub fn maxpool2x2(input: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0f32; n * c * oh * ow];
    let mut arg = vec![0u32; n * c * oh * ow];
    for img in 0..n * c {
        let plane = &input[img * h * w..(img + 1) * h * w];
        let base = img * oh * ow;
        for oy in 0..oh {
            for ox in 0..ow {
                let i0 = (2 * oy) * w + 2 * ox;
                let idxs = [i0, i0 + 1, i0 + w, i0 + w + 1];
                let mut best = idxs[0];
                let mut best_v = plane[idxs[0]];
                for &i in &idxs[1..] {
                    if plane[i] > best_v {
                        best_v = plane[i];
                        best = i;
                    }
                }
                out[base + oy * ow + ox] = best_v;
                arg[base + oy * ow + ox] = best as u32;
            }
        }
    }
    (out, arg)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgemm_identity() {
        // I3 @ A == A
        let eye = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let a = vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0];
        let mut c = vec![0.0; 9];
        sgemm(3, 3, 3, 1.0, &eye, &a, 0.0, &mut c);
        assert_eq!(c, a);
    }

    #[test]
    fn im2col_col2im_roundtrip_counts() {
        // col2im(im2col(x)) multiplies each pixel by the number of windows
        // covering it; for a 3x3 kernel, pad 1, interior pixels see 9 windows.
        let (h, w) = (5, 5);
        let input = vec![1.0f32; h * w];
        let mut cols = vec![0.0; 9 * h * w];
        im2col(&input, 1, h, w, 3, 3, 1, &mut cols);
        let mut back = vec![0.0f32; h * w];
        col2im_add(&cols, 1, h, w, 3, 3, 1, &mut back);
        assert_eq!(back[2 * w + 2], 9.0);
        assert_eq!(back[0], 4.0); // corner
    }

    #[test]
    fn maxpool_picks_max_and_argmax() {
        let input = vec![1.0, 2.0, 3.0, 4.0]; // 2x2 single plane
        let (out, arg) = maxpool2x2(&input, 1, 1, 2, 2);
        assert_eq!(out, vec![4.0]);
        assert_eq!(arg, vec![3]);
    }
}

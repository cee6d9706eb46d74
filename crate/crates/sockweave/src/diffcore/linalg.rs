//! Row-major matmul and convolution lowering kernels.
//!
//! Convolutions are lowered to matmul via im2col/col2im so the forward op,
//! its input gradient, and its weight gradient all share the same three
//! matmul variants below. Loop orders keep the innermost loop contiguous.

use super::Real;

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn mm<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize) -> Vec<R> {
    let mut c = vec![R::zero(); m * n];
    mm_acc(a, b, m, k, n, &mut c);
    c
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn mm_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 1 {
        // matrix-vector: independent accumulators break the add latency chain
        for i in 0..m {
            let arow = &a[i * k..(i + 1) * k];
            let mut s0 = R::zero();
            let mut s1 = R::zero();
            let mut s2 = R::zero();
            let mut s3 = R::zero();
            let chunks = k / 4;
            for q in 0..chunks {
                let base = q * 4;
                s0 = s0 + arow[base] * b[base];
                s1 = s1 + arow[base + 1] * b[base + 1];
                s2 = s2 + arow[base + 2] * b[base + 2];
                s3 = s3 + arow[base + 3] * b[base + 3];
            }
            for p in chunks * 4..k {
                s0 = s0 + arow[p] * b[p];
            }
            c[i] = c[i] + ((s0 + s1) + (s2 + s3));
        }
        return;
    }
    // tile the j axis so the output row chunk stays cache-resident while
    // the k loop streams over it
    const TILE: usize = 1024;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + TILE).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let aip = a[i * k + p];
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + aip * *bv;
                }
            }
        }
        j0 = j1;
    }
}

/// `c[m,n] += a[m,k] * b[n,k]^T` (row-by-row dot products)
pub fn mm_a_bt_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    // k-tiled so row blocks stay cache-resident; unrolled accumulators
    // break the floating-point add latency chain in each dot product
    const KTILE: usize = 512;
    let mut k0 = 0;
    while k0 < k {
        let k1 = (k0 + KTILE).min(k);
        for i in 0..m {
            let arow = &a[i * k + k0..i * k + k1];
            for j in 0..n {
                let brow = &b[j * k + k0..j * k + k1];
                let len = arow.len();
                let chunks = len / 8;
                let mut s0 = R::zero();
                let mut s1 = R::zero();
                let mut s2 = R::zero();
                let mut s3 = R::zero();
                let mut s4 = R::zero();
                let mut s5 = R::zero();
                let mut s6 = R::zero();
                let mut s7 = R::zero();
                for q in 0..chunks {
                    let base = q * 8;
                    s0 = s0 + arow[base] * brow[base];
                    s1 = s1 + arow[base + 1] * brow[base + 1];
                    s2 = s2 + arow[base + 2] * brow[base + 2];
                    s3 = s3 + arow[base + 3] * brow[base + 3];
                    s4 = s4 + arow[base + 4] * brow[base + 4];
                    s5 = s5 + arow[base + 5] * brow[base + 5];
                    s6 = s6 + arow[base + 6] * brow[base + 6];
                    s7 = s7 + arow[base + 7] * brow[base + 7];
                }
                let mut tail = R::zero();
                for p in chunks * 8..len {
                    tail = tail + arow[p] * brow[p];
                }
                let s = ((s0 + s1) + (s2 + s3)) + ((s4 + s5) + (s6 + s7)) + tail;
                c[i * n + j] = c[i * n + j] + s;
            }
        }
        k0 = k1;
    }
}

/// `c[m,n] += a[k,m]^T * b[k,n]`
pub fn mm_at_b_acc<R: Real>(a: &[R], b: &[R], m: usize, k: usize, n: usize, c: &mut [R]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if n == 1 {
        // c[i] += sum_p a[p, i] * b[p]; the i loop is contiguous in a and c
        for p in 0..k {
            let bp = b[p];
            let arow = &a[p * m..(p + 1) * m];
            for i in 0..m {
                c[i] = c[i] + arow[i] * bp;
            }
        }
        return;
    }
    const TILE: usize = 1024;
    let mut j0 = 0;
    while j0 < n {
        let j1 = (j0 + TILE).min(n);
        for i in 0..m {
            let crow = &mut c[i * n + j0..i * n + j1];
            for p in 0..k {
                let api = a[p * m + i];
                let brow = &b[p * n + j0..p * n + j1];
                for (cv, bv) in crow.iter_mut().zip(brow) {
                    *cv = *cv + api * *bv;
                }
            }
        }
        j0 = j1;
    }
}

/// Output spatial extent of a same-padded, strided convolution.
pub fn conv_out_extent(input: usize, stride: usize) -> usize {
    (input + stride - 1) / stride
}

/// Lowers `input[ch, h, w]` into a `[ch*k*k, out_h*out_w]` patch matrix.
/// Zero padding of `k/2` on each side ("same" padding).
#[allow(clippy::too_many_arguments)]
pub fn im2col<R: Real>(
    input: &[R],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
) -> Vec<R> {
    let mut out = Vec::new();
    im2col_into(input, ch, h, w, k, stride, out_h, out_w, &mut out);
    out
}

/// [`im2col`] into a reusable buffer (cleared and resized).
#[allow(clippy::too_many_arguments)]
pub fn im2col_into<R: Real>(
    input: &[R],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    out: &mut Vec<R>,
) {
    let pad = (k / 2) as isize;
    let cols = out_h * out_w;
    out.clear();
    out.resize(ch * k * k * cols, R::zero());
    for c in 0..ch {
        let plane = &input[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cols;
                let off = kj as isize - pad;
                // valid ox range: 0 <= ox*stride + off < w
                let ox_lo = if off < 0 {
                    ((-off) as usize).div_ceil(stride)
                } else {
                    0
                };
                let ox_hi = (((w as isize - 1 - off) / stride as isize) + 1)
                    .clamp(0, out_w as isize) as usize;
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = iy as usize * w;
                    let dst = row + oy * out_w;
                    if ox_lo >= ox_hi {
                        continue;
                    }
                    if stride == 1 {
                        let s0 = (src as isize + ox_lo as isize + off) as usize;
                        let len = ox_hi - ox_lo;
                        out[dst + ox_lo..dst + ox_hi]
                            .copy_from_slice(&plane[s0..s0 + len]);
                    } else {
                        let mut ix = (ox_lo * stride) as isize + off;
                        for ox in ox_lo..ox_hi {
                            out[dst + ox] = plane[src + ix as usize];
                            ix += stride as isize;
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back into `image[ch, h, w]`,
/// accumulating where patches overlap.
#[allow(clippy::too_many_arguments)]
pub fn col2im_acc<R: Real>(
    cols_mat: &[R],
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    image: &mut [R],
) {
    let pad = (k / 2) as isize;
    let cols = out_h * out_w;
    debug_assert_eq!(cols_mat.len(), ch * k * k * cols);
    debug_assert_eq!(image.len(), ch * h * w);
    for c in 0..ch {
        let plane = &mut image[c * h * w..(c + 1) * h * w];
        for ki in 0..k {
            for kj in 0..k {
                let row = (c * k * k + ki * k + kj) * cols;
                let off = kj as isize - pad;
                let ox_lo = if off < 0 {
                    ((-off) as usize).div_ceil(stride)
                } else {
                    0
                };
                let ox_hi = (((w as isize - 1 - off) / stride as isize) + 1)
                    .clamp(0, out_w as isize) as usize;
                for oy in 0..out_h {
                    let iy = (oy * stride) as isize + ki as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = iy as usize * w;
                    let src = row + oy * out_w;
                    let mut ix = (ox_lo as isize * stride as isize + off) as usize;
                    for ox in ox_lo..ox_hi {
                        plane[dst + ix] = plane[dst + ix] + cols_mat[src + ox];
                        ix += stride;
                    }
                }
            }
        }
    }
}

/// 1-D im2col for same-padded stride-1 convolution over `input[ch, n]`.
pub fn im2col_1d<R: Real>(input: &[R], ch: usize, n: usize, k: usize) -> Vec<R> {
    let pad = (k / 2) as isize;
    let mut out = vec![R::zero(); ch * k * n];
    for c in 0..ch {
        let sig = &input[c * n..(c + 1) * n];
        for ki in 0..k {
            let row = (c * k + ki) * n;
            for x in 0..n {
                let ix = x as isize + ki as isize - pad;
                if ix >= 0 && ix < n as isize {
                    out[row + x] = sig[ix as usize];
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col_1d`].
pub fn col2im_1d_acc<R: Real>(cols_mat: &[R], ch: usize, n: usize, k: usize, signal: &mut [R]) {
    let pad = (k / 2) as isize;
    for c in 0..ch {
        let sig = &mut signal[c * n..(c + 1) * n];
        for ki in 0..k {
            let row = (c * k + ki) * n;
            for x in 0..n {
                let ix = x as isize + ki as isize - pad;
                if ix >= 0 && ix < n as isize {
                    sig[ix as usize] = sig[ix as usize] + cols_mat[row + x];
                }
            }
        }
    }
}


/// Batched [`im2col_into`] over images stored channel-major as
/// `[ch, batch, h, w]`: produces `[ch*k*k, batch*out_h*out_w]` with frame
/// `b` occupying the column block `b*out_h*out_w ..`.
#[allow(clippy::too_many_arguments)]
pub fn im2col_batch_into<R: Real>(
    input: &[R],
    ch: usize,
    batch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    out: &mut Vec<R>,
) {
    let pad = (k / 2) as isize;
    let p = out_h * out_w;
    let cols = batch * p;
    out.clear();
    out.resize(ch * k * k * cols, R::zero());
    for c in 0..ch {
        for b in 0..batch {
            let plane = &input[(c * batch + b) * h * w..(c * batch + b + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k * k + ki * k + kj) * cols + b * p;
                    let off = kj as isize - pad;
                    let ox_lo = if off < 0 {
                        ((-off) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = (((w as isize - 1 - off) / stride as isize) + 1)
                        .clamp(0, out_w as isize) as usize;
                    for oy in 0..out_h {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let src = iy as usize * w;
                        let dst = row + oy * out_w;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        if stride == 1 {
                            let s0 = (src as isize + ox_lo as isize + off) as usize;
                            let len = ox_hi - ox_lo;
                            out[dst + ox_lo..dst + ox_hi]
                                .copy_from_slice(&plane[s0..s0 + len]);
                        } else {
                            let mut ix = (ox_lo * stride) as isize + off;
                            for ox in ox_lo..ox_hi {
                                out[dst + ox] = plane[src + ix as usize];
                                ix += stride as isize;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col_batch_into`].
#[allow(clippy::too_many_arguments)]
pub fn col2im_batch_acc<R: Real>(
    cols_mat: &[R],
    ch: usize,
    batch: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    out_h: usize,
    out_w: usize,
    image: &mut [R],
) {
    let pad = (k / 2) as isize;
    let p = out_h * out_w;
    let cols = batch * p;
    debug_assert_eq!(cols_mat.len(), ch * k * k * cols);
    debug_assert_eq!(image.len(), ch * batch * h * w);
    for c in 0..ch {
        for b in 0..batch {
            let plane =
                &mut image[(c * batch + b) * h * w..(c * batch + b + 1) * h * w];
            for ki in 0..k {
                for kj in 0..k {
                    let row = (c * k * k + ki * k + kj) * cols + b * p;
                    let off = kj as isize - pad;
                    let ox_lo = if off < 0 {
                        ((-off) as usize).div_ceil(stride)
                    } else {
                        0
                    };
                    let ox_hi = (((w as isize - 1 - off) / stride as isize) + 1)
                        .clamp(0, out_w as isize) as usize;
                    for oy in 0..out_h {
                        let iy = (oy * stride) as isize + ki as isize - pad;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let dst = iy as usize * w;
                        let src = row + oy * out_w;
                        let mut ix = (ox_lo as isize * stride as isize + off) as usize;
                        for ox in ox_lo..ox_hi {
                            plane[dst + ix] = plane[dst + ix] + cols_mat[src + ox];
                            ix += stride;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod batch_tests {
    use super::*;

    #[test]
    fn batched_im2col_matches_per_frame() {
        let (ch, b, h, w, k, s) = (2usize, 3usize, 5usize, 4usize, 3usize, 2usize);
        let (oh, ow) = (conv_out_extent(h, s), conv_out_extent(w, s));
        let total = ch * b * h * w;
        let input: Vec<f64> = (0..total).map(|i| (i as f64 * 0.13).sin()).collect();
        let mut batched = Vec::new();
        im2col_batch_into(&input, ch, b, h, w, k, s, oh, ow, &mut batched);
        let p = oh * ow;
        for frame in 0..b {
            // extract frame `frame` as [ch, h, w]
            let mut single = vec![0.0; ch * h * w];
            for c in 0..ch {
                let src = (c * b + frame) * h * w;
                single[c * h * w..(c + 1) * h * w]
                    .copy_from_slice(&input[src..src + h * w]);
            }
            let cols_single = im2col(&single, ch, h, w, k, s, oh, ow);
            for row in 0..ch * k * k {
                for q in 0..p {
                    assert_eq!(
                        batched[row * (b * p) + frame * p + q],
                        cols_single[row * p + q]
                    );
                }
            }
        }
    }

    #[test]
    fn batched_col2im_is_adjoint() {
        let (ch, b, h, w, k, s) = (2usize, 3usize, 4usize, 4usize, 3usize, 2usize);
        let (oh, ow) = (conv_out_extent(h, s), conv_out_extent(w, s));
        let x: Vec<f64> = (0..ch * b * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..ch * k * k * b * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cx = Vec::new();
        im2col_batch_into(&x, ch, b, h, w, k, s, oh, ow, &mut cx);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; ch * b * h * w];
        col2im_batch_acc(&y, ch, b, h, w, k, s, oh, ow, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mm_small_known() {
        // [1 2; 3 4] * [5 6; 7 8] = [19 22; 43 50]
        let c = mm::<f64>(&[1., 2., 3., 4.], &[5., 6., 7., 8.], 2, 2, 2);
        assert_eq!(c, vec![19., 22., 43., 50.]);
    }

    #[test]
    fn transposed_variants_agree_with_explicit_transpose() {
        let a = [1., 2., 3., 4., 5., 6.]; // 2x3
        let b = [7., 8., 9., 10., 11., 12.]; // 3x2
        let direct = mm::<f64>(&a, &b, 2, 3, 2);

        // a_bt: a[2,3] x (b^T)[2,3]^T
        let bt = [7., 9., 11., 8., 10., 12.]; // b^T as 2x3
        let mut c1 = vec![0.0; 4];
        mm_a_bt_acc::<f64>(&a, &bt, 2, 3, 2, &mut c1);
        assert_eq!(c1, direct);

        // at_b: (a^T)[3,2]^T x b
        let at = [1., 4., 2., 5., 3., 6.]; // a^T as 3x2
        let mut c2 = vec![0.0; 4];
        mm_at_b_acc::<f64>(&at, &b, 2, 3, 2, &mut c2);
        assert_eq!(c2, direct);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for random-ish x, y
        let (ch, h, w, k, s) = (2, 5, 4, 3, 2);
        let (oh, ow) = (conv_out_extent(h, s), conv_out_extent(w, s));
        let x: Vec<f64> = (0..ch * h * w).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..ch * k * k * oh * ow)
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let cx = im2col(&x, ch, h, w, k, s, oh, ow);
        let lhs: f64 = cx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; ch * h * w];
        col2im_acc(&y, ch, h, w, k, s, oh, ow, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-9);
    }
}

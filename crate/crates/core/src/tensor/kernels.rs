//! Raw loops behind the tape operations. No shape validation happens here.

use super::Real;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_cols(&self) -> usize {
        self.batch * self.ho * self.wo
    }
}

/// Output columns `[lo, hi)` whose input index `o·stride + k - pad` lies in
/// `[0, n)`.
#[inline]
fn valid_range(out: usize, n: usize, k: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n + pad > k { ((n - 1 + pad - k) / stride + 1).min(out) } else { 0 };
    (lo.min(hi), hi)
}

/// Unfolds `x` into a `[Cin·k·k, B·Ho·Wo]` patch matrix.
pub(crate) fn im2col<T: Real>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let ncols = g.out_cols();
    let plane = g.ho * g.wo;
    let mut cols = vec![T::zero(); g.patch_len() * ncols];
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst_row = &mut cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let src = &x[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[b * plane..(b + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..][..g.w];
                        let dst_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        if g.stride == 1 {
                            dst_row[ox_lo..ox_hi].copy_from_slice(&src_row[ix0..ix0 + ox_hi - ox_lo]);
                        } else {
                            for (d, s) in dst_row[ox_lo..ox_hi].iter_mut().zip(src_row[ix0..].iter().step_by(g.stride)) {
                                *d = *s;
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters patch gradients back onto the input.
pub(crate) fn col2im<T: Real>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let ncols = g.out_cols();
    let plane = g.ho * g.wo;
    for ci in 0..g.cin {
        for ky in 0..g.k {
            let (oy_lo, oy_hi) = valid_range(g.ho, g.h, ky, g.stride, g.pad);
            for kx in 0..g.k {
                let (ox_lo, ox_hi) = valid_range(g.wo, g.w, kx, g.stride, g.pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let row = (ci * g.k + ky) * g.k + kx;
                let src_row = &cols[row * ncols..(row + 1) * ncols];
                for b in 0..g.batch {
                    let dst = &mut dx[(b * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[b * plane..(b + 1) * plane];
                    for oy in oy_lo..oy_hi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst_row = &mut dst[iy * g.w..][..g.w];
                        let ix0 = ox_lo * g.stride + kx - g.pad;
                        let s = &src[oy * g.wo + ox_lo..oy * g.wo + ox_hi];
                        if g.stride == 1 {
                            for (d, &v) in dst_row[ix0..ix0 + s.len()].iter_mut().zip(s) {
                                *d += v;
                            }
                        } else {
                            for (d, &v) in dst_row[ix0..].iter_mut().step_by(g.stride).zip(s) {
                                *d += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `[C, B·P]` → `[B, C, P]`.
pub(crate) fn channel_major_to_batch_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for bi in 0..b {
            out[(bi * c + ci) * p..][..p].copy_from_slice(&x[ci * b * p + bi * p..][..p]);
        }
    }
    out
}

/// `[B, C, P]` → `[C, B·P]`.
pub(crate) fn batch_major_to_channel_major<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for ci in 0..c {
        for bi in 0..b {
            out[ci * b * p + bi * p..][..p].copy_from_slice(&x[(bi * c + ci) * p..][..p]);
        }
    }
    out
}

pub(crate) fn conv_forward<T: Real>(g: &ConvGeom, weight: &[T], bias: Option<&[T]>, cols: &[T]) -> Vec<T> {
    let ncols = g.out_cols();
    let mut out = vec![T::zero(); g.cout * ncols];
    T::gemm(g.cout, g.patch_len(), ncols, weight, false, cols, false, &mut out, false);
    if let Some(bias) = bias {
        for (row, &bv) in out.chunks_exact_mut(ncols).zip(bias) {
            row.iter_mut().for_each(|v| *v += bv);
        }
    }
    channel_major_to_batch_major(&out, g.batch, g.cout, g.ho * g.wo)
}

/// Returns `(d_input, d_weight, d_bias)` given the output gradient.
pub(crate) fn conv_backward<T: Real>(
    g: &ConvGeom,
    weight: &[T],
    cols: &[T],
    dout: &[T],
    need_input: bool,
) -> (Option<Vec<T>>, Vec<T>, Vec<T>) {
    let ncols = g.out_cols();
    let dmat = batch_major_to_channel_major(dout, g.batch, g.cout, g.ho * g.wo);
    let dbias = dmat
        .chunks_exact(ncols)
        .map(|row| row.iter().copied().sum())
        .collect();
    let mut dweight = vec![T::zero(); g.cout * g.patch_len()];
    T::gemm(g.cout, ncols, g.patch_len(), &dmat, false, cols, true, &mut dweight, false);
    let dinput = need_input.then(|| {
        let mut dcols = vec![T::zero(); g.patch_len() * ncols];
        T::gemm(g.patch_len(), g.cout, ncols, weight, true, &dmat, false, &mut dcols, false);
        let mut dx = vec![T::zero(); g.batch * g.cin * g.h * g.w];
        col2im(g, &dcols, &mut dx);
        dx
    });
    (dinput, dweight, dbias)
}

/// 2×2 max pool with stride 2 over `planes` planes of `h×w`. Ties keep the
/// first element in scan order.
pub(crate) fn max_pool2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i] > x[best] {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub(crate) fn upsample2<T: Real>(x: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); planes * ho * wo];
    for p in 0..planes {
        let src = &x[p * h * w..][..h * w];
        let dst = &mut out[p * ho * wo..][..ho * wo];
        for oy in 0..ho {
            let row = &src[(oy / 2) * w..][..w];
            for (ox, d) in dst[oy * wo..(oy + 1) * wo].iter_mut().enumerate() {
                *d = row[ox / 2];
            }
        }
    }
    out
}

pub(crate) fn upsample2_backward<T: Real>(dout: &[T], planes: usize, h: usize, w: usize) -> Vec<T> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut dx = vec![T::zero(); planes * h * w];
    for p in 0..planes {
        let src = &dout[p * ho * wo..][..ho * wo];
        let dst = &mut dx[p * h * w..][..h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                dst[(oy / 2) * w + ox / 2] += src[oy * wo + ox];
            }
        }
    }
    dx
}

/// Softmax over the channel axis of a `[B, C, P]` buffer.
pub(crate) fn softmax_channels<T: Real>(x: &[T], b: usize, c: usize, p: usize) -> Vec<T> {
    let mut out = vec![T::zero(); x.len()];
    for bi in 0..b {
        let base = bi * c * p;
        for pi in 0..p {
            let mut max = T::neg_infinity();
            for ci in 0..c {
                max = max.max(x[base + ci * p + pi]);
            }
            let mut sum = T::zero();
            for ci in 0..c {
                let e = (x[base + ci * p + pi] - max).exp();
                out[base + ci * p + pi] = e;
                sum += e;
            }
            for ci in 0..c {
                out[base + ci * p + pi] = out[base + ci * p + pi] / sum;
            }
        }
    }
    out
}

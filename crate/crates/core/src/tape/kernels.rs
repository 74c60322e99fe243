//! Slice-level kernels behind the tape primitives.

use alloc::vec;
use alloc::vec::Vec;

use crate::scalar::{gemm, MatRef, Scalar};

/// Upper bound on the number of elements in one im2col buffer.
const COLS_BUDGET: usize = 1 << 22;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn hw_out(&self) -> usize {
        self.ho * self.wo
    }

    fn group(&self) -> usize {
        (COLS_BUDGET / (self.k() * self.hw_out()).max(1)).clamp(1, self.n.max(1))
    }
}

/// Fills `cols` (`K x (g * Ho*Wo)`) with the receptive fields of samples
/// `first..first + g`.
fn im2col<S: Scalar>(input: &[S], geo: &ConvGeom, first: usize, g: usize, cols: &mut [S]) {
    let hw_in = geo.h * geo.w;
    let hw_out = geo.hw_out();
    let width = g * hw_out;
    for c in 0..geo.cin {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let dst_row = &mut cols[row * width..(row + 1) * width];
                for s in 0..g {
                    let plane = &input[((first + s) * geo.cin + c) * hw_in..][..hw_in];
                    let dst = &mut dst_row[s * hw_out..(s + 1) * hw_out];
                    for oh in 0..geo.ho {
                        let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                        let out_row = &mut dst[oh * geo.wo..(oh + 1) * geo.wo];
                        if ih < 0 || ih >= geo.h as isize {
                            out_row.fill(S::zero());
                            continue;
                        }
                        let src = &plane[ih as usize * geo.w..(ih as usize + 1) * geo.w];
                        for (ow, o) in out_row.iter_mut().enumerate() {
                            let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                            *o = if iw < 0 || iw >= geo.w as isize { S::zero() } else { src[iw as usize] };
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds `cols` back onto the input gradient.
fn col2im<S: Scalar>(cols: &[S], geo: &ConvGeom, first: usize, g: usize, dinput: &mut [S]) {
    let hw_in = geo.h * geo.w;
    let hw_out = geo.hw_out();
    let width = g * hw_out;
    for c in 0..geo.cin {
        for ki in 0..geo.kh {
            for kj in 0..geo.kw {
                let row = (c * geo.kh + ki) * geo.kw + kj;
                let src_row = &cols[row * width..(row + 1) * width];
                for s in 0..g {
                    let plane = &mut dinput[((first + s) * geo.cin + c) * hw_in..][..hw_in];
                    let src = &src_row[s * hw_out..(s + 1) * hw_out];
                    for oh in 0..geo.ho {
                        let ih = (oh * geo.stride + ki) as isize - geo.pad as isize;
                        if ih < 0 || ih >= geo.h as isize {
                            continue;
                        }
                        let dst = &mut plane[ih as usize * geo.w..(ih as usize + 1) * geo.w];
                        for ow in 0..geo.wo {
                            let iw = (ow * geo.stride + kj) as isize - geo.pad as isize;
                            if iw >= 0 && iw < geo.w as isize {
                                dst[iw as usize] += src[oh * geo.wo + ow];
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv2d_forward<S: Scalar>(input: &[S], weight: &[S], bias: &[S], geo: &ConvGeom) -> Vec<S> {
    let hw_out = geo.hw_out();
    let k = geo.k();
    let mut out = vec![S::zero(); geo.n * geo.cout * hw_out];
    let group = geo.group();
    let mut cols = vec![S::zero(); k * group * hw_out];
    let mut tmp = vec![S::zero(); geo.cout * group * hw_out];
    let mut first = 0;
    while first < geo.n {
        let g = group.min(geo.n - first);
        let width = g * hw_out;
        im2col(input, geo, first, g, &mut cols[..k * width]);
        gemm(
            S::one(),
            MatRef::row_major(weight, geo.cout, k),
            MatRef::row_major(&cols[..k * width], k, width),
            S::zero(),
            &mut tmp[..geo.cout * width],
        );
        for s in 0..g {
            for co in 0..geo.cout {
                let src = &tmp[co * width + s * hw_out..][..hw_out];
                let dst = &mut out[((first + s) * geo.cout + co) * hw_out..][..hw_out];
                let b = bias[co];
                for (d, &v) in dst.iter_mut().zip(src) {
                    *d = v + b;
                }
            }
        }
        first += g;
    }
    out
}

/// Accumulates the gradients of a convolution into the optional buffers.
pub(crate) fn conv2d_backward<S: Scalar>(
    input: &[S],
    weight: &[S],
    dout: &[S],
    geo: &ConvGeom,
    dinput: Option<&mut [S]>,
    dweight: Option<&mut [S]>,
    dbias: Option<&mut [S]>,
) {
    let hw_out = geo.hw_out();
    let k = geo.k();
    if let Some(db) = dbias {
        for s in 0..geo.n {
            for (co, b) in db.iter_mut().enumerate() {
                let plane = &dout[(s * geo.cout + co) * hw_out..][..hw_out];
                *b += plane.iter().copied().sum::<S>();
            }
        }
    }
    if dinput.is_none() && dweight.is_none() {
        return;
    }
    let group = geo.group();
    let mut cols = vec![S::zero(); k * group * hw_out];
    let mut dcols = vec![S::zero(); k * group * hw_out];
    let mut dmat = vec![S::zero(); geo.cout * group * hw_out];
    let mut dinput = dinput;
    let mut dweight = dweight;
    let mut first = 0;
    while first < geo.n {
        let g = group.min(geo.n - first);
        let width = g * hw_out;
        for s in 0..g {
            for co in 0..geo.cout {
                let src = &dout[((first + s) * geo.cout + co) * hw_out..][..hw_out];
                dmat[co * width + s * hw_out..][..hw_out].copy_from_slice(src);
            }
        }
        let dm = MatRef::row_major(&dmat[..geo.cout * width], geo.cout, width);
        if let Some(dw) = dweight.as_deref_mut() {
            im2col(input, geo, first, g, &mut cols[..k * width]);
            gemm(S::one(), dm, MatRef::transposed(&cols[..k * width], width, k), S::one(), dw);
        }
        if let Some(dx) = dinput.as_deref_mut() {
            gemm(S::one(), MatRef::transposed(weight, k, geo.cout), dm, S::zero(), &mut dcols[..k * width]);
            col2im(&dcols[..k * width], geo, first, g, dx);
        }
        first += g;
    }
}

/// Output extent of a pooling window sweep.
pub(crate) fn pool_extent(size: usize, k: usize, stride: usize, ceil_mode: bool) -> usize {
    if k > size {
        return 1;
    }
    let span = size - k;
    let mut out = if ceil_mode { span.div_ceil(stride) + 1 } else { span / stride + 1 };
    // The last window has to start inside the input.
    if ceil_mode && (out - 1) * stride >= size {
        out -= 1;
    }
    out
}

/// Max pooling over `[planes, h, w]`; returns values and flat argmax indices.
#[allow(clippy::too_many_arguments)]
pub(crate) fn maxpool_forward<S: Scalar>(
    input: &[S],
    planes: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    ho: usize,
    wo: usize,
) -> (Vec<S>, Vec<u32>) {
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oh in 0..ho {
            let r0 = oh * stride;
            let r1 = (r0 + k).min(h);
            for ow in 0..wo {
                let c0 = ow * stride;
                let c1 = (c0 + k).min(w);
                let mut best_idx = base + r0 * w + c0;
                let mut best = input[best_idx];
                for r in r0..r1 {
                    for c in c0..c1 {
                        let idx = base + r * w + c;
                        if input[idx] > best {
                            best = input[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx as u32);
            }
        }
    }
    (out, arg)
}

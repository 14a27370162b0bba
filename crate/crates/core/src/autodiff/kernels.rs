//! Array kernels behind the tape primitives. Shapes are validated by the
//! caller; these functions assume conforming inputs.

use crate::autodiff::tensor::numel;
use crate::autodiff::Real;

/// Right-aligned broadcast of two shapes, numpy style.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank {
            a[i + a.len() - rank]
        } else {
            1
        };
        let db = if i + b.len() >= rank {
            b[i + b.len() - rank]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` viewed inside `out`, with 0 on broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let offset = rank - shape.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        if shape[i] != 1 || out[i + offset] == 1 {
            strides[i + offset] = acc;
        }
        acc *= shape[i];
    }
    strides
}

/// Walks every element of `out` in row-major order, handing the kernel the
/// matching offsets of the two broadcast operands.
fn walk2(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize)) {
    let rank = out.len();
    let last = out[rank - 1];
    let outer = numel(out) / last;
    let (la, lb) = (sa[rank - 1], sb[rank - 1]);
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for _ in 0..outer {
        for t in 0..last {
            f(oa + t * la, ob + t * lb);
        }
        for d in (0..rank - 1).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn broadcast_zip<R: Real>(
    out: &[usize],
    a: &[R],
    a_shape: &[usize],
    b: &[R],
    b_shape: &[usize],
    f: impl Fn(R, R) -> R,
) -> Vec<R> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if b.len() == 1 {
        let y = b[0];
        if a_shape == out {
            return a.iter().map(|&x| f(x, y)).collect();
        }
    }
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let mut res = Vec::with_capacity(numel(out));
    walk2(out, &sa, &sb, |ia, ib| res.push(f(a[ia], b[ib])));
    res
}

/// Sums a gradient of shape `out` down to a broadcast operand of shape `target`.
pub(crate) fn reduce_to<R: Real>(grad: &[R], out: &[usize], target: &[usize]) -> Vec<R> {
    if out == target {
        return grad.to_vec();
    }
    let st = broadcast_strides(target, out);
    let zeros = vec![0; out.len()];
    let mut res = vec![R::zero(); numel(target)];
    let mut o = 0;
    walk2(out, &st, &zeros, |it, _| {
        res[it] += grad[o];
        o += 1;
    });
    res
}

/// `[m,k] x [k,n]` with optional logical transposes of either operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn matmul<R: Real>(
    a: &[R],
    a_rows: usize,
    a_cols: usize,
    trans_a: bool,
    b: &[R],
    b_rows: usize,
    b_cols: usize,
    trans_b: bool,
) -> (usize, usize, Vec<R>) {
    let (m, k, sa) = if trans_a {
        (a_cols, a_rows, (1, a_cols))
    } else {
        (a_rows, a_cols, (a_cols, 1))
    };
    let (k2, n, sb) = if trans_b {
        (b_cols, b_rows, (1, b_cols))
    } else {
        (b_rows, b_cols, (b_cols, 1))
    };
    debug_assert_eq!(k, k2);
    let mut c = vec![R::zero(); m * n];
    R::gemm(m, k, n, a, sa, b, sb, R::zero(), &mut c);
    (m, n, c)
}

pub(crate) struct ConvDims {
    pub batch: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub kernel: usize,
}

impl ConvDims {
    fn pad(&self) -> usize {
        (self.kernel - 1) / 2
    }
}

/// Lays a `[B, Cin, T]` input out as `[B*T, Cin*K]` patches with zero padding.
fn im2col<R: Real>(x: &[R], d: &ConvDims) -> Vec<R> {
    let ck = d.c_in * d.kernel;
    let pad = d.pad() as isize;
    let mut cols = vec![R::zero(); d.batch * d.len * ck];
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let src = &x[(b * d.c_in + c) * d.len..(b * d.c_in + c + 1) * d.len];
            for t in 0..d.len {
                let row = (b * d.len + t) * ck + c * d.kernel;
                for k in 0..d.kernel {
                    let s = t as isize + k as isize - pad;
                    if s >= 0 && (s as usize) < d.len {
                        cols[row + k] = src[s as usize];
                    }
                }
            }
        }
    }
    cols
}

pub(crate) fn conv1d<R: Real>(x: &[R], w: &[R], bias: Option<&[R]>, d: &ConvDims) -> Vec<R> {
    let cols = im2col(x, d);
    let ck = d.c_in * d.kernel;
    let bt = d.batch * d.len;
    let mut tmp = vec![R::zero(); bt * d.c_out];
    R::gemm(
        bt,
        ck,
        d.c_out,
        &cols,
        (ck, 1),
        w,
        (1, ck),
        R::zero(),
        &mut tmp,
    );
    let mut out = vec![R::zero(); d.batch * d.c_out * d.len];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let bo = bias.map_or(R::zero(), |bs| bs[o]);
            let dst = &mut out[(b * d.c_out + o) * d.len..(b * d.c_out + o + 1) * d.len];
            for (t, v) in dst.iter_mut().enumerate() {
                *v = tmp[(b * d.len + t) * d.c_out + o] + bo;
            }
        }
    }
    out
}

/// Returns gradients for (input, kernel, bias).
pub(crate) fn conv1d_backward<R: Real>(
    x: &[R],
    w: &[R],
    grad: &[R],
    d: &ConvDims,
) -> (Vec<R>, Vec<R>, Vec<R>) {
    let ck = d.c_in * d.kernel;
    let bt = d.batch * d.len;
    let mut g_bt = vec![R::zero(); bt * d.c_out];
    let mut g_bias = vec![R::zero(); d.c_out];
    for b in 0..d.batch {
        for o in 0..d.c_out {
            let src = &grad[(b * d.c_out + o) * d.len..(b * d.c_out + o + 1) * d.len];
            for (t, &g) in src.iter().enumerate() {
                g_bt[(b * d.len + t) * d.c_out + o] = g;
                g_bias[o] += g;
            }
        }
    }
    let cols = im2col(x, d);
    let mut g_w = vec![R::zero(); d.c_out * ck];
    R::gemm(
        d.c_out,
        bt,
        ck,
        &g_bt,
        (1, d.c_out),
        &cols,
        (ck, 1),
        R::zero(),
        &mut g_w,
    );
    let mut g_cols = vec![R::zero(); bt * ck];
    R::gemm(
        bt,
        d.c_out,
        ck,
        &g_bt,
        (d.c_out, 1),
        w,
        (ck, 1),
        R::zero(),
        &mut g_cols,
    );
    let pad = d.pad() as isize;
    let mut g_x = vec![R::zero(); x.len()];
    for b in 0..d.batch {
        for c in 0..d.c_in {
            let base = (b * d.c_in + c) * d.len;
            for t in 0..d.len {
                let row = (b * d.len + t) * ck + c * d.kernel;
                for k in 0..d.kernel {
                    let s = t as isize + k as isize - pad;
                    if s >= 0 && (s as usize) < d.len {
                        g_x[base + s as usize] += g_cols[row + k];
                    }
                }
            }
        }
    }
    (g_x, g_w, g_bias)
}

/// (outer, axis length, inner) decomposition of a shape around `axis`.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn concat<R: Real>(parts: &[(&[R], &[usize])], axis: usize) -> Vec<R> {
    let (outer, _, inner) = split_axis(parts[0].1, axis);
    let total: usize = parts.iter().map(|(d, _)| d.len()).sum();
    let mut out = Vec::with_capacity(total);
    for o in 0..outer {
        for (data, shape) in parts {
            let chunk = shape[axis] * inner;
            out.extend_from_slice(&data[o * chunk..(o + 1) * chunk]);
        }
    }
    out
}

pub(crate) fn slice<R: Real>(
    x: &[R],
    shape: &[usize],
    axis: usize,
    start: usize,
    end: usize,
) -> Vec<R> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * (end - start) * inner);
    for o in 0..outer {
        let base = o * len * inner;
        out.extend_from_slice(&x[base + start * inner..base + end * inner]);
    }
    out
}

/// Adds `g` (shaped like the slice) back into a zero tensor shaped like the source.
pub(crate) fn unslice<R: Real>(
    g: &[R],
    shape: &[usize],
    axis: usize,
    start: usize,
    end: usize,
) -> Vec<R> {
    let (outer, len, inner) = split_axis(shape, axis);
    let width = (end - start) * inner;
    let mut out = vec![R::zero(); numel(shape)];
    for o in 0..outer {
        let base = o * len * inner + start * inner;
        out[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
    }
    out
}

pub(crate) fn permute<R: Real>(x: &[R], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<R>) {
    let rank = shape.len();
    let mut in_strides = vec![1; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let zeros = vec![0; rank];
    let mut out = Vec::with_capacity(x.len());
    walk2(&out_shape, &strides, &zeros, |i, _| out.push(x[i]));
    (out_shape, out)
}

pub(crate) fn sum_axis<R: Real>(x: &[R], shape: &[usize], axis: usize) -> Vec<R> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = vec![R::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for l in 0..len {
            let src = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
    }
    out
}

/// Spreads a reduced gradient back along `axis`, scaled by `scale`.
pub(crate) fn expand_axis<R: Real>(g: &[R], shape: &[usize], axis: usize, scale: R) -> Vec<R> {
    let (outer, len, inner) = split_axis(shape, axis);
    let mut out = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let src = &g[o * inner..(o + 1) * inner];
        for _ in 0..len {
            out.extend(src.iter().map(|&v| v * scale));
        }
    }
    out
}

pub(crate) fn softmax_rows<R: Real>(x: &[R], cols: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks(cols) {
        let max = row.iter().copied().fold(R::neg_infinity(), R::max);
        let start = out.len();
        let mut total = R::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= total;
        }
    }
    out
}

pub(crate) fn softmax_rows_backward<R: Real>(y: &[R], g: &[R], cols: usize) -> Vec<R> {
    let mut out = Vec::with_capacity(y.len());
    for (yr, gr) in y.chunks(cols).zip(g.chunks(cols)) {
        let dot: R = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
        out.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

pub(crate) fn gather_rows<R: Real>(x: &[R], width: usize, idx: &[usize]) -> Vec<R> {
    let mut out = Vec::with_capacity(idx.len() * width);
    for &i in idx {
        out.extend_from_slice(&x[i * width..(i + 1) * width]);
    }
    out
}

pub(crate) fn scatter_add_rows<R: Real>(
    x: &[R],
    width: usize,
    idx: &[usize],
    rows: usize,
) -> Vec<R> {
    let mut out = vec![R::zero(); rows * width];
    for (e, &i) in idx.iter().enumerate() {
        let dst = &mut out[i * width..(i + 1) * width];
        for (d, &s) in dst.iter_mut().zip(&x[e * width..(e + 1) * width]) {
            *d += s;
        }
    }
    out
}

#[inline]
pub(crate) fn sigmoid<R: Real>(v: R) -> R {
    if v >= R::zero() {
        R::one() / (R::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (R::one() + e)
    }
}

#[inline]
pub(crate) fn softplus<R: Real>(v: R) -> R {
    v.max(R::zero()) + (-v.abs()).exp().ln_1p()
}

//! Raw numeric kernels shared by the graph ops: strided GEMM, numpy-style
//! broadcasting, and the reductions that undo broadcasting in backward.

/// A strided matrix view: `(data, row_stride, col_stride)`.
pub(crate) type View<'a> = (&'a [f64], isize, isize);

/// `c = a·b (+ c if accumulate)` with `a: m×k`, `b: k×n`, `c: m×n` row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: View<'_>,
    b: View<'_>,
    c: &mut [f64],
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    let beta = if accumulate { 1.0 } else { 0.0 };
    if k == 0 {
        if !accumulate {
            c[..m * n].fill(0.0);
        }
        return;
    }
    // SAFETY: the strides describe in-bounds views of the given slices; every
    // caller derives them from tensor shapes checked before the call.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.0.as_ptr(),
            a.1,
            a.2,
            b.0.as_ptr(),
            b.1,
            b.2,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Row-major view of an `r×c` matrix.
pub(crate) fn rm(data: &[f64], cols: usize) -> View<'_> {
    (data, cols as isize, 1)
}

/// Transposed view of a row-major `r×c` matrix (reads as `c×r`).
pub(crate) fn tr(data: &[f64], cols: usize) -> View<'_> {
    (data, 1, cols as isize)
}

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let nd = a.len().max(b.len());
    let mut out = vec![0; nd];
    for i in 0..nd {
        let da = if i + a.len() >= nd { a[i + a.len() - nd] } else { 1 };
        let db = if i + b.len() >= nd { b[i + b.len() - nd] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` expressed over `out` (zero along broadcast axes).
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let nd = out.len();
    let mut strides = vec![0; nd];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + nd - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// Visit every output element with the matching flat indices of `a` and `b`.
fn for_each_pair(
    out: &[usize],
    a_shape: &[usize],
    b_shape: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let sa = broadcast_strides(a_shape, out);
    let sb = broadcast_strides(b_shape, out);
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for d in (0..nd).rev() {
            idx[d] += 1;
            ia += sa[d];
            ib += sb[d];
            if idx[d] < out[d] {
                break;
            }
            ia -= sa[d] * out[d];
            ib -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(
    a: &[f64],
    a_shape: &[usize],
    b: &[f64],
    b_shape: &[usize],
    out_shape: &[usize],
    f: impl Fn(f64, f64) -> f64,
) -> Vec<f64> {
    if a_shape == b_shape {
        return a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect();
    }
    if a_shape == out_shape && is_suffix(b_shape, a_shape) && !b.is_empty() {
        let mut out = Vec::with_capacity(a.len());
        for chunk in a.chunks(b.len()) {
            out.extend(chunk.iter().zip(b).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    if b_shape == out_shape && is_suffix(a_shape, b_shape) && !a.is_empty() {
        let mut out = Vec::with_capacity(b.len());
        for chunk in b.chunks(a.len()) {
            out.extend(a.iter().zip(chunk).map(|(&x, &y)| f(x, y)));
        }
        return out;
    }
    let mut out = vec![0.0; out_shape.iter().product()];
    for_each_pair(out_shape, a_shape, b_shape, |o, ia, ib| {
        out[o] = f(a[ia], b[ib]);
    });
    out
}

/// Sum `g` (shaped `from`) down to `to`, where `from` is a broadcast of `to`.
pub(crate) fn sum_to_shape(g: &[f64], from: &[usize], to: &[usize]) -> Vec<f64> {
    if from == to {
        return g.to_vec();
    }
    let n: usize = to.iter().product();
    let mut out = vec![0.0; n];
    if is_suffix(to, from) && n > 0 {
        for chunk in g.chunks(n) {
            for (o, v) in out.iter_mut().zip(chunk) {
                *o += v;
            }
        }
        return out;
    }
    for_each_pair(from, to, from, |o, it, _| {
        out[it] += g[o];
    });
    out
}

/// Apply `f` to each contiguous row of length `cols`.
pub(crate) fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, orow) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for (o, &v) in orow.iter_mut().zip(row) {
            *o = (v - max).exp();
            sum += *o;
        }
        let inv = 1.0 / sum;
        for o in orow.iter_mut() {
            *o *= inv;
        }
    }
    out
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

// 0.5·x·(1 + tanh(u)) = x·σ(2u), which needs one exp instead of a tanh.
fn sigmoid_2u(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    1.0 / (1.0 + (-2.0 * u).exp())
}

pub(crate) fn gelu(x: f64) -> f64 {
    x * sigmoid_2u(x)
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let s = sigmoid_2u(x);
    s + 2.0 * x * s * (1.0 - s) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_shapes() {
        assert_eq!(broadcast_shape(&[2, 3, 4], &[4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3, 1], &[1, 4]), Some(vec![2, 3, 4]));
        assert_eq!(broadcast_shape(&[2, 3], &[4]), None);
    }

    #[test]
    fn general_broadcast_matches_manual() {
        let a: Vec<f64> = (0..6).map(f64::from).collect(); // [2,3,1]
        let b = vec![10.0, 20.0]; // [1,2]
        let out = binary(&a, &[2, 3, 1], &b, &[1, 2], &[2, 3, 2], |x, y| x + y);
        assert_eq!(
            out,
            vec![10., 20., 11., 21., 12., 22., 13., 23., 14., 24., 15., 25.]
        );
        let back = sum_to_shape(&out, &[2, 3, 2], &[2, 3, 1]);
        assert_eq!(back, vec![30., 32., 34., 36., 38., 40.]);
        let back_b = sum_to_shape(&[1.0; 12], &[2, 3, 2], &[1, 2]);
        assert_eq!(back_b, vec![6.0, 6.0]);
    }

    #[test]
    fn gemm_transposed_views() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, tr(&a, 2), rm(&b, 2), &mut c, false);
        // aᵀ·b = [[1,3],[2,4]]·b
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
    }

    #[test]
    fn gelu_matches_tanh_form() {
        for i in -400..=400 {
            let x = f64::from(i) / 50.0;
            let tanh_form = 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh());
            assert!((gelu(x) - tanh_form).abs() <= 1e-15 * x.abs().max(1.0), "{x}");
        }
        assert_eq!(gelu(-1e6), 0.0);
        assert_eq!(gelu(1e6), 1e6);
    }
}

//! Dense kernels shared by forward and backward rules.

/// `c = a·b` (or `c += a·b` when `accumulate`), all matrices given by
/// (pointer slice, row stride, column stride).
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    (rsc, csc): (usize, usize),
    accumulate: bool,
) {
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            for i in 0..m {
                for j in 0..n {
                    c[i * rsc + j * csc] = 0.0;
                }
            }
        }
        return;
    }
    let last = |rs: usize, cs: usize, rows: usize, cols: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(last(rsa, csa, m, k) < a.len(), "gemm: lhs out of bounds");
    assert!(last(rsb, csb, k, n) < b.len(), "gemm: rhs out of bounds");
    assert!(last(rsc, csc, m, n) < c.len(), "gemm: output out of bounds");
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: every index touched by the kernel lies inside the slices, checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold a `[channels, batch, time]` input into `[channels*k, batch*time]`
/// columns for a causal convolution with lag-indexed taps: row `c*k + j`
/// holds the input delayed by `j*dilation` steps, zero before the segment
/// start.
pub(crate) fn causal_im2col(
    x: &[f64],
    channels: usize,
    batch: usize,
    time: usize,
    k: usize,
    dilation: usize,
) -> Vec<f64> {
    let n = batch * time;
    let mut cols = vec![0.0; channels * k * n];
    for c in 0..channels {
        for j in 0..k {
            let lag = j * dilation;
            if lag >= time {
                continue;
            }
            let row = &mut cols[(c * k + j) * n..(c * k + j + 1) * n];
            for b in 0..batch {
                let src = &x[(c * batch + b) * time..(c * batch + b + 1) * time];
                row[b * time + lag..(b + 1) * time].copy_from_slice(&src[..time - lag]);
            }
        }
    }
    cols
}

/// Adjoint of [`causal_im2col`]: scatter-add column gradients back onto the input.
pub(crate) fn causal_col2im(
    cols: &[f64],
    dx: &mut [f64],
    channels: usize,
    batch: usize,
    time: usize,
    k: usize,
    dilation: usize,
) {
    let n = batch * time;
    for c in 0..channels {
        for j in 0..k {
            let lag = j * dilation;
            if lag >= time {
                continue;
            }
            let row = &cols[(c * k + j) * n..(c * k + j + 1) * n];
            for b in 0..batch {
                let dst = &mut dx[(c * batch + b) * time..(c * batch + b + 1) * time];
                for (d, s) in dst[..time - lag].iter_mut().zip(&row[b * time + lag..(b + 1) * time]) {
                    *d += s;
                }
            }
        }
    }
}

/// Row-major strides for `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gather `src` (shape `in_shape`) into the layout given by `perm`, where
/// output axis `i` is input axis `perm[i]`.
pub(crate) fn permute(src: &[f64], in_shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let rank = in_shape.len();
    if rank == 0 || src.is_empty() {
        return src.to_vec();
    }
    let in_strides = strides(in_shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let (run, step) = (out_shape[rank - 1], src_strides[rank - 1]);
    let mut out = Vec::with_capacity(src.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..src.len() / run {
        out.extend((0..run).map(|j| src[offset + j * step]));
        for ax in (0..rank - 1).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    out
}

//! Raw numeric kernels over flat row-major buffers. No shape validation
//! happens here; callers in `tape` check shapes first.

use std::cmp::Ordering;

/// `c (+)= op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a_t` / `b_t` mean the operand is stored transposed (row-major `k×m`,
/// `n×k`). With `accumulate == false` the previous contents of `c` are ignored.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the debug assertion above documents the buffer extents; every
    // caller passes buffers sized for the given m, k, n and strides.
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

/// Geometry of a "same"-padded, dilated, strided 1-D convolution over a
/// batch of `[time, channel]` sequences.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub dilation: usize,
    pub stride: usize,
}

impl ConvGeom {
    pub fn new(
        batch: usize,
        t_in: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
        dilation: usize,
        stride: usize,
    ) -> Self {
        Self {
            batch,
            t_in,
            t_out: (t_in - 1) / stride + 1,
            c_in,
            c_out,
            kernel,
            dilation,
            stride,
        }
    }

    fn col_width(&self) -> usize {
        self.kernel * self.c_in
    }

    /// Input time index read by output step `o` at tap `j`, if inside the sequence.
    #[inline]
    fn source(&self, o: usize, j: usize) -> Option<usize> {
        let half = (self.kernel - 1) / 2;
        let pos = (o * self.stride + j * self.dilation) as isize - (half * self.dilation) as isize;
        (pos >= 0 && (pos as usize) < self.t_in).then_some(pos as usize)
    }
}

/// Unfolds the input into a `[batch·t_out, kernel·c_in]` patch matrix.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let mut cols = vec![0.0; g.batch * g.t_out * width];
    for b in 0..g.batch {
        let xb = &x[b * g.t_in * g.c_in..(b + 1) * g.t_in * g.c_in];
        for o in 0..g.t_out {
            let row = &mut cols[(b * g.t_out + o) * width..(b * g.t_out + o + 1) * width];
            for j in 0..g.kernel {
                if let Some(src) = g.source(o, j) {
                    row[j * g.c_in..(j + 1) * g.c_in]
                        .copy_from_slice(&xb[src * g.c_in..(src + 1) * g.c_in]);
                }
            }
        }
    }
    cols
}

/// Scatter-adds patch gradients back onto the input layout.
pub(crate) fn col2im(dcols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let width = g.col_width();
    for b in 0..g.batch {
        for o in 0..g.t_out {
            let row = &dcols[(b * g.t_out + o) * width..(b * g.t_out + o + 1) * width];
            for j in 0..g.kernel {
                if let Some(src) = g.source(o, j) {
                    let base = (b * g.t_in + src) * g.c_in;
                    for c in 0..g.c_in {
                        dx[base + c] += row[j * g.c_in + c];
                    }
                }
            }
        }
    }
}

/// Forward convolution. Each batch element gets its own GEMM so that a row's
/// result never depends on what else shares the batch.
pub(crate) fn conv1d_forward(cols: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let width = g.col_width();
    let mut out = vec![0.0; g.batch * g.t_out * g.c_out];
    for b in 0..g.batch {
        gemm(
            g.t_out,
            width,
            g.c_out,
            &cols[b * g.t_out * width..],
            false,
            kernel,
            false,
            &mut out[b * g.t_out * g.c_out..],
            false,
        );
    }
    out
}

/// Sparsemax of one row, written into `out`.
pub(crate) fn sparsemax_row(z: &[f64], out: &mut [f64]) {
    let mut sorted: Vec<f64> = z.to_vec();
    sorted.sort_unstable_by(|a, b| b.partial_cmp(a).unwrap_or(Ordering::Equal));
    let mut cumsum = 0.0;
    let mut support = 0;
    let mut support_sum = 0.0;
    for (i, &v) in sorted.iter().enumerate() {
        cumsum += v;
        if 1.0 + (i + 1) as f64 * v > cumsum {
            support = i + 1;
            support_sum = cumsum;
        }
    }
    let threshold = (support_sum - 1.0) / support as f64;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - threshold).max(0.0);
    }
}

/// Temperature softmax of one row, max-subtracted.
pub(crate) fn softmax_row(z: &[f64], temperature: f64, out: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = ((v - max) / temperature).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

pub(crate) fn logsumexp_row(z: &[f64]) -> f64 {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln()
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` read through a broadcast to `out` (zero on broadcast axes).
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..shape.len()).rev() {
        let oi = i + rank - shape.len();
        strides[oi] = if shape[i] == 1 && out[oi] != 1 { 0 } else { acc };
        acc *= shape[i];
    }
    strides
}

/// Visits every output position with the matching flat offsets into both inputs.
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: &[usize],
    sb: &[usize],
    mut f: impl FnMut(usize, usize, usize),
) {
    let total: usize = out.iter().product();
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut ia, mut ib) = (0usize, 0usize);
    for o in 0..total {
        f(o, ia, ib);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            ia += sa[ax];
            ib += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            ia -= sa[ax] * out[ax];
            ib -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, false);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, false);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, true);
        assert_eq!(c, [26.0 + 17.0, 30.0 + 23.0, 38.0 + 39.0, 44.0 + 53.0]);
    }

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape(&[2, 3], &[3]), Some(vec![2, 3]));
        assert_eq!(broadcast_shape(&[4, 1, 3], &[4, 5, 1]), Some(vec![4, 5, 3]));
        assert_eq!(broadcast_shape(&[2, 3], &[2]), None);
        assert_eq!(broadcast_strides(&[3], &[2, 3]), vec![0, 1]);
        assert_eq!(broadcast_strides(&[4, 1, 3], &[4, 5, 3]), vec![3, 0, 1]);
    }

    #[test]
    fn strided_geometry() {
        let g = ConvGeom::new(1, 7, 1, 1, 3, 1, 2);
        assert_eq!(g.t_out, 4);
        assert_eq!(g.source(0, 0), None);
        assert_eq!(g.source(3, 1), Some(6));
        assert_eq!(g.source(3, 2), None);
    }
}

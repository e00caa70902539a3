//! Slice-level numeric kernels shared by the value API and the graph.

use crate::error::{Error, Result};
use crate::layout::AttentionMask;

use super::RMS_EPS;

/// A strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    data: &'a [f64],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<'a> MatRef<'a> {
    pub fn row_major(data: &'a [f64], rows: usize, cols: usize) -> Self {
        debug_assert!(data.len() >= rows * cols);
        MatRef {
            data,
            rows,
            cols,
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transposed view of the same storage.
    pub fn t(self) -> Self {
        MatRef {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }
}

/// `out = a·b + beta·out`, with `out` row-major `a.rows × b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, out: &mut [f64], beta: f64) {
    let (m, k, n) = (a.rows, a.cols, b.cols);
    assert_eq!(k, b.rows, "gemm inner dimension");
    assert!(out.len() >= m * n, "gemm output too small");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in &mut out[..m * n] {
            *v *= beta;
        }
        return;
    }
    // Every index touched below is in bounds: the views were built from
    // slices of at least rows*cols elements with the matching strides.
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub(crate) fn masked_softmax(
    logits: &[f64],
    mask: &AttentionMask,
    q: usize,
    k: usize,
    out: &mut [f64],
) -> Result<()> {
    for (row_idx, (src, dst)) in logits.chunks(k).zip(out.chunks_mut(k)).enumerate() {
        let qi = row_idx % q;
        let allowed = mask.row(qi);
        let mut max = f64::NEG_INFINITY;
        for (v, &ok) in src.iter().zip(allowed) {
            if ok && *v > max {
                max = *v;
            }
        }
        if max == f64::NEG_INFINITY {
            return Err(Error::FullyMaskedRow { row: qi });
        }
        let mut sum = 0.0;
        for ((d, v), &ok) in dst.iter_mut().zip(src).zip(allowed) {
            *d = if ok {
                let e = (v - max).exp();
                sum += e;
                e
            } else {
                0.0
            };
        }
        let inv = 1.0 / sum;
        for (d, &ok) in dst.iter_mut().zip(allowed) {
            if ok {
                *d *= inv;
            }
        }
    }
    Ok(())
}

/// Writes the normalized output and returns the per-row inverse RMS.
pub(crate) fn rms_norm(x: &[f64], gain: &[f64], d: usize, out: &mut [f64]) -> Vec<f64> {
    let mut inv = Vec::with_capacity(x.len() / d.max(1));
    if d == 0 {
        return inv;
    }
    for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
        let ms = src.iter().map(|v| v * v).sum::<f64>() / d as f64;
        let r = 1.0 / (ms + RMS_EPS).sqrt();
        for ((o, v), g) in dst.iter_mut().zip(src).zip(gain) {
            *o = v * r * g;
        }
        inv.push(r);
    }
    inv
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

//! Raw loops behind the tape ops. Everything here works on flat slices in
//! channels-last (N, T, H, W, C) order.

use std::ops::Range;

const CHUNK_ELEMS: usize = 1 << 16;

/// `c = a * b + beta * c` for row-major `c` of shape `m x n`. `a` and `b` are
/// addressed through explicit row/column strides so transposes are free.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (usize, usize),
    b: &[f64],
    b_strides: (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    let max_index = |rows: usize, cols: usize, (rs, cs): (usize, usize)| {
        (rows - 1) * rs + (cols.max(1) - 1) * cs
    };
    assert!(k == 0 || max_index(m, k, a_strides) < a.len());
    assert!(k == 0 || max_index(k, n, b_strides) < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: every index the kernel touches was bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0 as isize,
            a_strides.1 as isize,
            b.as_ptr(),
            b_strides.0 as isize,
            b_strides.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Resolved geometry of one 3D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub in_channels: usize,
    pub kernel: [usize; 3],
    pub out_channels: usize,
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeometry {
    pub fn rows(&self) -> usize {
        self.batch * self.output.iter().product::<usize>()
    }

    pub fn patch(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_channels
    }

    pub fn input_len(&self) -> usize {
        self.batch * self.input.iter().product::<usize>() * self.in_channels
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.out_channels,
        ]
    }

    /// Rows per im2col chunk; keeps scratch buffers small enough to be reused
    /// by the allocator instead of freshly mapped.
    pub fn chunk_rows(&self) -> usize {
        (CHUNK_ELEMS / self.patch()).max(1)
    }

    /// Calls `f(col_offset, input_offset, len)` for each contiguous run of
    /// in-bounds taps of output rows `rows`; column offsets are relative to the
    /// first row of the range. Taps that fall into the padding are skipped.
    fn for_each_run(&self, rows: Range<usize>, mut f: impl FnMut(usize, usize, usize)) {
        let [t, h, w] = self.input;
        let [kt, kh, kw] = self.kernel;
        let [ot, oh, ow] = self.output;
        let cin = self.in_channels;
        let patch = self.patch();
        let contiguous = self.stride[2] == 1;
        for (local, row) in rows.enumerate() {
            let zw = row % ow;
            let zh = (row / ow) % oh;
            let zt = (row / (ow * oh)) % ot;
            let n = row / (ow * oh * ot);
            let base = local * patch;
            // valid kernel columns c satisfy 0 <= zw*s + c - p < w
            let w0 = (zw * self.stride[2]) as isize - self.padding[2] as isize;
            let c_lo = (-w0).max(0) as usize;
            let c_hi = ((w as isize - w0).min(kw as isize)).max(0) as usize;
            if c_lo >= c_hi {
                continue;
            }
            for a in 0..kt {
                let it = (zt * self.stride[0] + a) as isize - self.padding[0] as isize;
                if it < 0 || it >= t as isize {
                    continue;
                }
                for b in 0..kh {
                    let ih = (zh * self.stride[1] + b) as isize - self.padding[1] as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src_row = ((n * t + it as usize) * h + ih as usize) * w;
                    let col_row = base + (a * kh + b) * kw * cin;
                    let src = |c: usize| (src_row + (w0 + c as isize) as usize) * cin;
                    if contiguous {
                        f(col_row + c_lo * cin, src(c_lo), (c_hi - c_lo) * cin);
                    } else {
                        for c in c_lo..c_hi {
                            f(col_row + c * cin, src(c), cin);
                        }
                    }
                }
            }
        }
    }

    /// Unfolds output rows `rows` into `cols` (`rows.len() x patch`).
    pub fn im2col(&self, input: &[f64], rows: Range<usize>, cols: &mut [f64]) {
        debug_assert_eq!(input.len(), self.input_len());
        cols[..rows.len() * self.patch()].fill(0.0);
        self.for_each_run(rows, |col, src, len| {
            cols[col..col + len].copy_from_slice(&input[src..src + len]);
        });
    }

    /// Adjoint of [`im2col`](Self::im2col): scatter-adds patch gradients into `out`.
    pub fn col2im(&self, cols: &[f64], rows: Range<usize>, out: &mut [f64]) {
        self.for_each_run(rows, |col, src, len| {
            for (o, c) in out[src..src + len].iter_mut().zip(&cols[col..col + len]) {
                *o += c;
            }
        });
    }
}

/// Non-overlapping pooling window geometry over (T, H, W).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeometry {
    pub batch: usize,
    pub input: [usize; 3],
    pub channels: usize,
    pub window: [usize; 3],
    pub output: [usize; 3],
}

impl PoolGeometry {
    pub fn output_shape(&self) -> Vec<usize> {
        vec![
            self.batch,
            self.output[0],
            self.output[1],
            self.output[2],
            self.channels,
        ]
    }

    /// Calls `f(out_index, in_index)` for every (output, contributing input) pair.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let [t, h, w] = self.input;
        let [ot, oh, ow] = self.output;
        let [wt, wh, ww] = self.window;
        let c = self.channels;
        for n in 0..self.batch {
            for zt in 0..ot {
                for zh in 0..oh {
                    for zw in 0..ow {
                        let out_base = (((n * ot + zt) * oh + zh) * ow + zw) * c;
                        for a in 0..wt {
                            for b in 0..wh {
                                for d in 0..ww {
                                    let it = zt * wt + a;
                                    let ih = zh * wh + b;
                                    let iw = zw * ww + d;
                                    let in_base = (((n * t + it) * h + ih) * w + iw) * c;
                                    for ch in 0..c {
                                        f(out_base + ch, in_base + ch);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Numerically stable log-softmax of one row.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    log_softmax(row).into_iter().map(f64::exp).collect()
}

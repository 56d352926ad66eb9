//! Forward and adjoint numerical kernels over raw slices.
//!
//! These are the pure building blocks behind the differentiable ops in
//! [`crate::autodiff`]. Shapes are validated by the callers.

/// `c = op(a) · op(b) + beta · c`, row-major, with `op(a)` of size `m × k`
/// and `op(b)` of size `k × n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: strides describe in-bounds views of the asserted buffers.
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

/// Geometry of a 2D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
    pub pad_mode: PadMode,
}

/// How out-of-range taps are filled.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Zeros,
    /// Clamp to the nearest edge cell.
    Replicate,
}

#[inline]
fn source_index(pos: isize, n: usize, mode: PadMode) -> Option<usize> {
    if pos >= 0 && pos < n as isize {
        Some(pos as usize)
    } else {
        match mode {
            PadMode::Zeros => None,
            PadMode::Replicate => Some(pos.clamp(0, n as isize - 1) as usize),
        }
    }
}

impl ConvGeom {
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Unfolds `x` (`[c_in, h, w]`) into a `[c_in·k·k, h_out·w_out]` patch matrix.
pub fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.col_rows() * cols];
    for c in 0..g.c_in {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let dst = &mut out[row * cols..(row + 1) * cols];
                for oi in 0..g.h_out {
                    let Some(ii) = source_index((oi * g.stride + ki) as isize - g.pad as isize, g.h, g.pad_mode) else {
                        continue;
                    };
                    let src_row = &plane[ii * g.w..(ii + 1) * g.w];
                    let dst_row = &mut dst[oi * g.w_out..(oi + 1) * g.w_out];
                    for (oj, d) in dst_row.iter_mut().enumerate() {
                        if let Some(jj) = source_index((oj * g.stride + kj) as isize - g.pad as isize, g.w, g.pad_mode) {
                            *d = src_row[jj];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto `[c_in, h, w]`.
pub fn col2im(col: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; g.c_in * g.h * g.w];
    for c in 0..g.c_in {
        let plane = &mut out[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.k {
            for kj in 0..g.k {
                let row = (c * g.k + ki) * g.k + kj;
                let src = &col[row * cols..(row + 1) * cols];
                for oi in 0..g.h_out {
                    let Some(ii) = source_index((oi * g.stride + ki) as isize - g.pad as isize, g.h, g.pad_mode) else {
                        continue;
                    };
                    let dst_row = &mut plane[ii * g.w..(ii + 1) * g.w];
                    let src_row = &src[oi * g.w_out..(oi + 1) * g.w_out];
                    for (oj, s) in src_row.iter().enumerate() {
                        if let Some(jj) = source_index((oj * g.stride + kj) as isize - g.pad as isize, g.w, g.pad_mode) {
                            dst_row[jj] += s;
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    b: Option<&[f64]>,
    c_out: usize,
    g: &ConvGeom,
) -> Vec<f64> {
    let cols = g.col_cols();
    let mut out = vec![0.0; c_out * cols];
    if let Some(b) = b {
        for (co, row) in out.chunks_mut(cols).enumerate() {
            row.fill(b[co]);
        }
    }
    if g.is_pointwise() {
        gemm(c_out, g.c_in, cols, w, false, x, false, &mut out, 1.0);
    } else {
        let col = im2col(x, g);
        gemm(c_out, g.col_rows(), cols, w, false, &col, false, &mut out, 1.0);
    }
    out
}

/// Returns `(dx, dw, db)` for the upstream gradient `dy` (`[c_out, h_out·w_out]`).
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    c_out: usize,
    g: &ConvGeom,
    need_dx: bool,
) -> (Option<Vec<f64>>, Vec<f64>, Vec<f64>) {
    let cols = g.col_cols();
    let rows = g.col_rows();
    let db: Vec<f64> = dy.chunks(cols).map(|r| r.iter().sum()).collect();
    let mut dw = vec![0.0; c_out * rows];
    let dx = if g.is_pointwise() {
        gemm(c_out, cols, rows, dy, false, x, true, &mut dw, 0.0);
        need_dx.then(|| {
            let mut dx = vec![0.0; rows * cols];
            gemm(rows, c_out, cols, w, true, dy, false, &mut dx, 0.0);
            dx
        })
    } else {
        let col = im2col(x, g);
        gemm(c_out, cols, rows, dy, false, &col, true, &mut dw, 0.0);
        need_dx.then(|| {
            let mut dcol = vec![0.0; rows * cols];
            gemm(rows, c_out, cols, w, true, dy, false, &mut dcol, 0.0);
            col2im(&dcol, g)
        })
    };
    (dx, dw, db)
}

/// Source taps for one axis of align-corners-false bilinear resampling.
#[derive(Clone, Copy, Debug)]
pub struct Tap {
    pub i0: usize,
    pub i1: usize,
    pub frac: f64,
}

pub fn bilinear_taps(n_in: usize, n_out: usize) -> Vec<Tap> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(n_in - 1);
            let i1 = (i0 + 1).min(n_in - 1);
            Tap {
                i0,
                i1,
                frac: src - i0 as f64,
            }
        })
        .collect()
}

pub fn upsample_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        let dst = &mut out[ch * oh * ow..(ch + 1) * oh * ow];
        for (oi, r) in rt.iter().enumerate() {
            let top = &src[r.i0 * w..(r.i0 + 1) * w];
            let bot = &src[r.i1 * w..(r.i1 + 1) * w];
            for (oj, t) in ct.iter().enumerate() {
                let a = top[t.i0] + t.frac * (top[t.i1] - top[t.i0]);
                let b = bot[t.i0] + t.frac * (bot[t.i1] - bot[t.i0]);
                dst[oi * ow + oj] = a + r.frac * (b - a);
            }
        }
    }
    out
}

pub fn upsample_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rt = bilinear_taps(h, oh);
    let ct = bilinear_taps(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let g = &dy[ch * oh * ow..(ch + 1) * oh * ow];
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, r) in rt.iter().enumerate() {
            for (oj, t) in ct.iter().enumerate() {
                let v = g[oi * ow + oj];
                let top = v * (1.0 - r.frac);
                let bot = v * r.frac;
                d[r.i0 * w + t.i0] += top * (1.0 - t.frac);
                d[r.i0 * w + t.i1] += top * t.frac;
                d[r.i1 * w + t.i0] += bot * (1.0 - t.frac);
                d[r.i1 * w + t.i1] += bot * t.frac;
            }
        }
    }
    dx
}

/// Bin `[start, end)` of adaptive average pooling along one axis.
pub fn adaptive_bins(n_in: usize, n_out: usize) -> Vec<(usize, usize)> {
    (0..n_out)
        .map(|o| {
            let start = (o * n_in) / n_out;
            let end = ((o + 1) * n_in).div_ceil(n_out);
            (start, end)
        })
        .collect()
}

pub fn adaptive_pool_forward(x: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rb = adaptive_bins(h, oh);
    let cb = adaptive_bins(w, ow);
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1)) in rb.iter().enumerate() {
            for (oj, &(c0, c1)) in cb.iter().enumerate() {
                let mut s = 0.0;
                for i in r0..r1 {
                    s += src[i * w + c0..i * w + c1].iter().sum::<f64>();
                }
                out[(ch * oh + oi) * ow + oj] = s / ((r1 - r0) * (c1 - c0)) as f64;
            }
        }
    }
    out
}

pub fn adaptive_pool_backward(dy: &[f64], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    let rb = adaptive_bins(h, oh);
    let cb = adaptive_bins(w, ow);
    let mut dx = vec![0.0; c * h * w];
    for ch in 0..c {
        let d = &mut dx[ch * h * w..(ch + 1) * h * w];
        for (oi, &(r0, r1)) in rb.iter().enumerate() {
            for (oj, &(c0, c1)) in cb.iter().enumerate() {
                let v = dy[(ch * oh + oi) * ow + oj] / ((r1 - r0) * (c1 - c0)) as f64;
                for i in r0..r1 {
                    for x in &mut d[i * w + c0..i * w + c1] {
                        *x += v;
                    }
                }
            }
        }
    }
    dx
}

/// Standard normal CDF.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

pub fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

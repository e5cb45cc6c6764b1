//! Raw compute kernels over NCHW slices.
//!
//! Batch-parallel loops use a fixed chunking of the batch axis and reduce the
//! per-chunk partial weight gradients in chunk order, so results do not depend
//! on the number of worker threads.

use rayon::prelude::*;

/// Images per parallel work item when reducing weight gradients.
const BATCH_CHUNK: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl ConvGeom {
    pub fn h_out(&self) -> usize {
        (self.h + 2 * self.pad - self.k) / self.stride + 1
    }

    pub fn w_out(&self) -> usize {
        (self.w + 2 * self.pad - self.k) / self.stride + 1
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.c_in && self.groups == self.c_out && self.groups > 1
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * (self.c_in / self.groups) * self.k * self.k
    }
}

/// `c[m,n] = a[m,k] * b[k,n] (+ c if accumulate)`, all row-major.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    accumulate: bool,
) {
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n
    // row-major buffers whose lengths are checked below.
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    unsafe {
        matrixmultiply::sgemm(
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

/// Public row-major matrix product `a[m,k] · b[k,n]`, with optional transposes.
pub fn matmul(m: usize, k: usize, n: usize, a: &[f32], a_t: bool, b: &[f32], b_t: bool) -> Vec<f32> {
    let mut c = vec![0.0; m * n];
    gemm(m, k, n, a, a_t, b, b_t, &mut c, false);
    c
}

#[allow(clippy::too_many_arguments)]
pub fn matmul_acc(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_t: bool,
    b: &[f32],
    b_t: bool,
    c: &mut [f32],
) {
    gemm(m, k, n, a, a_t, b, b_t, c, true);
}

/// Unfolds one image into rows `(ci, ky, kx)` of `cols`, writing the
/// `h_out * w_out` values of each row at `cols[row * ld + off..]`.
#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, cols: &mut [f32], ld: usize, off: usize) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let k = g.k;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        if k == 1 && g.stride == 1 && g.pad == 0 {
            cols[ci * ld + off..ci * ld + off + h * w].copy_from_slice(plane);
            continue;
        }
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ld + off;
                let dst = &mut cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let d = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        d.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, v) in d.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            0.0
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates `cols` back into one image.
#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f32], c: usize, h: usize, w: usize, g: &ConvGeom, x: &mut [f32], ld: usize, off: usize) {
    let (ho, wo) = (g.h_out(), g.w_out());
    let k = g.k;
    for ci in 0..c {
        let plane = &mut x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * ld + off;
                let src = &cols[row..row + ho * wo];
                for oy in 0..ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `y += a * x`, eight lanes at a time.
#[inline]
fn axpy(a: f32, x: &[f32], y: &mut [f32]) {
    let n = y.len().min(x.len());
    let (x, y) = (&x[..n], &mut y[..n]);
    let mut yc = y.chunks_exact_mut(8);
    let mut xc = x.chunks_exact(8);
    for (yv, xv) in (&mut yc).zip(&mut xc) {
        let yv: &mut [f32; 8] = yv.try_into().expect("chunk of 8");
        let xv: &[f32; 8] = xv.try_into().expect("chunk of 8");
        for i in 0..8 {
            yv[i] += a * xv[i];
        }
    }
    for (yv, xv) in yc.into_remainder().iter_mut().zip(xc.remainder()) {
        *yv += a * xv;
    }
}

/// Zero-padded copy of one plane split into `stride × stride` phases, each
/// `rows × width` (row-major), so that every kernel tap of a strided
/// convolution reads one contiguous run: input `(oy * s + ky, ox * s + kx)`
/// lives in phase `(ky % s, kx % s)` at row `oy + ky / s`, column
/// `ox + kx / s`. Outputs are computed on a `h_out × width` grid whose
/// columns past `w_out` are scratch.
struct Phases {
    rows: usize,
    width: usize,
    stride: usize,
    data: Vec<f32>,
}

impl Phases {
    fn new(g: &ConvGeom) -> Self {
        let s = g.stride;
        let rows = (g.h + 2 * g.pad).div_ceil(s) + 1;
        let width = (g.w + 2 * g.pad).div_ceil(s);
        Self {
            rows,
            width,
            stride: s,
            data: vec![0.0; s * s * rows * width + g.k],
        }
    }

    #[inline]
    fn index(&self, py: usize, px: usize) -> usize {
        let s = self.stride;
        ((py % s) * s + px % s) * self.rows * self.width + (py / s) * self.width + px / s
    }

    fn load(&mut self, plane: &[f32], g: &ConvGeom) {
        self.data.fill(0.0);
        let s = self.stride;
        for (iy, row) in plane.chunks_exact(g.w).enumerate() {
            let py = iy + g.pad;
            for p in 0..s {
                // first input column whose padded index falls in phase p
                let ix0 = (p + s - g.pad % s) % s;
                if ix0 >= g.w {
                    continue;
                }
                let base = self.index(py, ix0 + g.pad);
                for (d, &v) in self.data[base..].iter_mut().zip(row[ix0..].iter().step_by(s)) {
                    *d = v;
                }
            }
        }
    }

    /// Adds the interior of the padded buffer into `plane`.
    fn store_add(&self, plane: &mut [f32], g: &ConvGeom) {
        let s = self.stride;
        for (iy, row) in plane.chunks_exact_mut(g.w).enumerate() {
            let py = iy + g.pad;
            for p in 0..s {
                let ix0 = (p + s - g.pad % s) % s;
                if ix0 >= g.w {
                    continue;
                }
                let base = self.index(py, ix0 + g.pad);
                for (v, &d) in row[ix0..].iter_mut().step_by(s).zip(&self.data[base..]) {
                    *v += d;
                }
            }
        }
    }

    /// Start of the contiguous run read by each tap `ky * k + kx`.
    fn taps(&self, k: usize) -> Vec<usize> {
        (0..k * k).map(|t| self.index(t / k, t % k)).collect()
    }
}

/// Dot product with eight independent partial sums (vectorizes).
fn dot(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: f32 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        let x: &[f32; 8] = x.try_into().expect("chunk of 8");
        let y: &[f32; 8] = y.try_into().expect("chunk of 8");
        for i in 0..8 {
            lanes[i] += x[i] * y[i];
        }
    }
    lanes.iter().sum::<f32>() + tail
}

fn depthwise_forward_image(x: &[f32], wt: &[f32], g: &ConvGeom, y: &mut [f32]) {
    let (h, w, k) = (g.h, g.w, g.k);
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut ph = Phases::new(g);
    let len = ho * ph.width;
    let mut grid = vec![0.0f32; len];
    let taps = ph.taps(k);
    for c in 0..g.c_in {
        ph.load(&x[c * h * w..(c + 1) * h * w], g);
        let kw = &wt[c * k * k..(c + 1) * k * k];
        grid.fill(0.0);
        for (&wv, &o) in kw.iter().zip(&taps) {
            axpy(wv, &ph.data[o..o + len], &mut grid);
        }
        let yp = &mut y[c * ho * wo..(c + 1) * ho * wo];
        for (out, row) in yp.chunks_exact_mut(wo).zip(grid.chunks_exact(ph.width)) {
            out.copy_from_slice(&row[..wo]);
        }
    }
}

fn depthwise_backward_image(
    x: &[f32],
    wt: &[f32],
    dy: &[f32],
    g: &ConvGeom,
    dx: &mut [f32],
    dw: &mut [f32],
) {
    let (h, w, k) = (g.h, g.w, g.k);
    let (ho, wo) = (g.h_out(), g.w_out());
    let mut xp = Phases::new(g);
    let mut dxp = Phases::new(g);
    let len = ho * xp.width;
    let mut grid = vec![0.0f32; len];
    let taps = xp.taps(k);
    for c in 0..g.c_in {
        xp.load(&x[c * h * w..(c + 1) * h * w], g);
        dxp.data.fill(0.0);
        let dyp = &dy[c * ho * wo..(c + 1) * ho * wo];
        for (row, src) in grid.chunks_exact_mut(xp.width).zip(dyp.chunks_exact(wo)) {
            row[..wo].copy_from_slice(src);
        }
        let kw = &wt[c * k * k..(c + 1) * k * k];
        let dkw = &mut dw[c * k * k..(c + 1) * k * k];
        for ((&wv, dwv), &o) in kw.iter().zip(dkw.iter_mut()).zip(&taps) {
            *dwv += dot(&grid, &xp.data[o..o + len]);
            axpy(wv, &grid, &mut dxp.data[o..o + len]);
        }
        dxp.store_add(&mut dx[c * h * w..(c + 1) * h * w], g);
    }
}

/// Channel-major unfolding of the whole batch for group `grp`:
/// `[c_in/groups * k * k, n * h_out * w_out]`.
fn unfold_batch(x: &[f32], g: &ConvGeom, grp: usize) -> Vec<f32> {
    let cig = g.c_in / g.groups;
    let p = g.h_out() * g.w_out();
    let ld = g.n * p;
    let mut cols = vec![0.0f32; cig * g.k * g.k * ld];
    let in_sz = g.c_in * g.h * g.w;
    for b in 0..g.n {
        let xg = &x[b * in_sz + grp * cig * g.h * g.w..b * in_sz + (grp + 1) * cig * g.h * g.w];
        im2col(xg, cig, g.h, g.w, g, &mut cols, ld, b * p);
    }
    cols
}

/// Offsets `(nchw, matrix)` of every `hw`-long row of group `grp` when an
/// NCHW tensor is viewed as a channel-major `[c/groups, n * hw]` matrix.
fn group_rows(n: usize, c: usize, hw: usize, groups: usize, grp: usize) -> impl Iterator<Item = (usize, usize)> {
    let cg = c / groups;
    (0..n).flat_map(move |b| (0..cg).map(move |ci| ((b * c + grp * cg + ci) * hw, ci * n * hw + b * hw)))
}

fn dense_forward(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    let p = g.h_out() * g.w_out();
    let np = g.n * p;
    let cog = g.c_out / g.groups;
    let kk = g.c_in / g.groups * g.k * g.k;
    let mut y = vec![0.0f32; g.n * g.c_out * p];
    let mut yc = vec![0.0f32; cog * np];
    for grp in 0..g.groups {
        let cols = unfold_batch(x, g, grp);
        let wg = &wt[grp * cog * kk..(grp + 1) * cog * kk];
        gemm(cog, kk, np, wg, false, &cols, false, &mut yc, false);
        for (t, m) in group_rows(g.n, g.c_out, p, g.groups, grp) {
            y[t..t + p].copy_from_slice(&yc[m..m + p]);
        }
    }
    y
}

fn dense_backward(x: &[f32], wt: &[f32], dy: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let p = g.h_out() * g.w_out();
    let np = g.n * p;
    let cig = g.c_in / g.groups;
    let cog = g.c_out / g.groups;
    let kk = cig * g.k * g.k;
    let mut dx = vec![0.0f32; x.len()];
    let mut dw = vec![0.0f32; wt.len()];
    let mut dyc = vec![0.0f32; cog * np];
    for grp in 0..g.groups {
        let cols = unfold_batch(x, g, grp);
        for (t, m) in group_rows(g.n, g.c_out, p, g.groups, grp) {
            dyc[m..m + p].copy_from_slice(&dy[t..t + p]);
        }
        let wg = &wt[grp * cog * kk..(grp + 1) * cog * kk];
        // dW = dY · colsᵀ ; dcols = Wᵀ · dY
        gemm(cog, np, kk, &dyc, false, &cols, true, &mut dw[grp * cog * kk..(grp + 1) * cog * kk], false);
        let mut dcols = vec![0.0f32; kk * np];
        gemm(kk, cog, np, wg, true, &dyc, false, &mut dcols, false);
        let in_sz = g.c_in * g.h * g.w;
        for b in 0..g.n {
            let s = b * in_sz + grp * cig * g.h * g.w;
            col2im(&dcols, cig, g.h, g.w, g, &mut dx[s..s + cig * g.h * g.w], np, b * p);
        }
    }
    (dx, dw)
}

pub fn conv2d_forward(x: &[f32], wt: &[f32], g: &ConvGeom) -> Vec<f32> {
    if !g.is_depthwise() {
        return dense_forward(x, wt, g);
    }
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.h_out() * g.w_out();
    let mut y = vec![0.0f32; g.n * out_sz];
    y.par_chunks_mut(out_sz)
        .zip(x.par_chunks(in_sz))
        .for_each(|(yb, xb)| depthwise_forward_image(xb, wt, g, yb));
    y
}

/// Returns `(dx, dw)` for the convolution `y = conv(x, w)`.
pub fn conv2d_backward(x: &[f32], wt: &[f32], dy: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    if !g.is_depthwise() {
        return dense_backward(x, wt, dy, g);
    }
    let in_sz = g.c_in * g.h * g.w;
    let out_sz = g.c_out * g.h_out() * g.w_out();
    let mut dx = vec![0.0f32; g.n * in_sz];
    let wlen = wt.len();
    let partials: Vec<Vec<f32>> = dx
        .par_chunks_mut(in_sz * BATCH_CHUNK)
        .zip(x.par_chunks(in_sz * BATCH_CHUNK))
        .zip(dy.par_chunks(out_sz * BATCH_CHUNK))
        .map(|((dxc, xc), dyc)| {
            let mut dw = vec![0.0f32; wlen];
            for ((dxb, xb), dyb) in dxc
                .chunks_mut(in_sz)
                .zip(xc.chunks(in_sz))
                .zip(dyc.chunks(out_sz))
            {
                depthwise_backward_image(xb, wt, dyb, g, dxb, &mut dw);
            }
            dw
        })
        .collect();
    let mut dw = vec![0.0f32; wlen];
    for p in &partials {
        dw.iter_mut().zip(p).for_each(|(a, b)| *a += b);
    }
    (dx, dw)
}

/// 2×2 / stride-2 max pooling in ceil mode (border windows are clipped);
/// returns outputs and argmax flat indices.
pub fn maxpool2_forward(x: &[f32], n: usize, c: usize, h: usize, w: usize) -> (Vec<f32>, Vec<u32>) {
    let (ho, wo) = (h.div_ceil(2), w.div_ceil(2));
    let mut y = vec![0.0; n * c * ho * wo];
    let mut arg = vec![0u32; n * c * ho * wo];
    for p in 0..n * c {
        let xp = &x[p * h * w..(p + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = f32::NEG_INFINITY;
                let mut bi = 0;
                for iy in 2 * oy..(2 * oy + 2).min(h) {
                    for ix in 2 * ox..(2 * ox + 2).min(w) {
                        let i = iy * w + ix;
                        if xp[i] > best {
                            best = xp[i];
                            bi = i;
                        }
                    }
                }
                let o = p * ho * wo + oy * wo + ox;
                y[o] = best;
                arg[o] = (p * h * w + bi) as u32;
            }
        }
    }
    (y, arg)
}

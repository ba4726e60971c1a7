//! Raw numeric kernels on flat row-major buffers.
//!
//! Every reduction accumulates in a fixed index order, so results are
//! bit-identical regardless of thread count: parallel work is split per batch
//! sample and partial sums are combined sequentially in sample order.

use rayon::prelude::*;

/// `out[m×n] = a[m×k] · b[k×n]`, accumulating over `k` in ascending order.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_into(a, b, m, k, n, &mut out);
    out
}

const TILE_N: usize = 128;
const TILE_K: usize = 128;

/// Blocked `out += a · b`. Row chunks run in parallel; within a chunk the
/// loops are tiled over columns and the shared dimension, and every output
/// element still accumulates over `k` in ascending order.
fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    if m == 0 || n == 0 {
        return;
    }
    let rows_per = m.div_ceil(rayon::current_num_threads()).max(1);
    out.par_chunks_mut(rows_per * n)
        .enumerate()
        .for_each(|(ci, chunk)| {
            let r0 = ci * rows_per;
            let rows = chunk.len() / n;
            for j0 in (0..n).step_by(TILE_N) {
                let j1 = (j0 + TILE_N).min(n);
                for p0 in (0..k).step_by(TILE_K) {
                    let p1 = (p0 + TILE_K).min(k);
                    for r in 0..rows {
                        let arow = &a[(r0 + r) * k..(r0 + r + 1) * k];
                        let orow = &mut chunk[r * n + j0..r * n + j1];
                        for p in p0..p1 {
                            let av = arow[p];
                            let brow = &b[p * n + j0..p * n + j1];
                            for (o, &bv) in orow.iter_mut().zip(brow) {
                                *o += av * bv;
                            }
                        }
                    }
                }
            }
        });
}

/// Row-major transpose of an `[rows×cols]` buffer.
pub fn transpose(x: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

/// `out[m×n] = a[m×k] · b[n×k]ᵀ`.
pub fn matmul_bt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in arow.iter().zip(brow) {
                acc += x * y;
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `out[k×n] = a[m×k]ᵀ · b[m×n]`.
pub fn matmul_at(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Geometry of a 2-D convolution over an `[N,C,H,W]` input and `[F,C,k,k]` kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    /// Returns `None` when the kernel does not fit the padded input.
    pub fn new(
        input: [usize; 4],
        filters: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let [n, c, h, w] = input;
        if stride == 0 || k == 0 || k > h + 2 * pad || k > w + 2 * pad {
            return None;
        }
        Some(ConvGeom {
            n,
            c,
            h,
            w,
            f: filters,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (w + 2 * pad - k) / stride + 1,
        })
    }

    fn patch_len(&self) -> usize {
        self.c * self.k * self.k
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfold the whole batch into `[C·k·k, N·OH·OW]`; padded taps are zero.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let width = self.n * plane;
        let mut cols = vec![0.0; self.patch_len() * width];
        if width == 0 {
            return cols;
        }
        let kk = self.k * self.k;
        cols.par_chunks_mut(width).enumerate().for_each(|(row, dst)| {
            let (c, ki, kj) = (row / kk, (row / self.k) % self.k, row % self.k);
            for s in 0..self.n {
                let xc = &x[(s * self.c + c) * self.h * self.w..][..self.h * self.w];
                let ds = &mut dst[s * plane..(s + 1) * plane];
                for oy in 0..self.oh {
                    let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                    if iy < 0 || iy >= self.h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for ox in 0..self.ow {
                        let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                        if ix >= 0 && (ix as usize) < self.w {
                            ds[oy * self.ow + ox] = xc[iy * self.w + ix as usize];
                        }
                    }
                }
            }
        });
        cols
    }

    /// Fold batch columns back into `dx`, summing overlapping taps.
    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let plane = self.out_plane();
        let width = self.n * plane;
        let in_len = self.c * self.h * self.w;
        if in_len == 0 {
            return;
        }
        dx.par_chunks_mut(in_len).enumerate().for_each(|(s, dxs)| {
            for c in 0..self.c {
                let dxc = &mut dxs[c * self.h * self.w..(c + 1) * self.h * self.w];
                for ki in 0..self.k {
                    for kj in 0..self.k {
                        let row = (c * self.k + ki) * self.k + kj;
                        let src = &cols[row * width + s * plane..][..plane];
                        for oy in 0..self.oh {
                            let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                            if iy < 0 || iy >= self.h as isize {
                                continue;
                            }
                            let iy = iy as usize;
                            for ox in 0..self.ow {
                                let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                                if ix >= 0 && (ix as usize) < self.w {
                                    dxc[iy * self.w + ix as usize] += src[oy * self.ow + ox];
                                }
                            }
                        }
                    }
                }
            }
        });
    }

    /// `[N,F,plane]` to `[F, N·plane]`.
    fn filter_major(&self, y: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let mut out = vec![0.0; y.len()];
        for s in 0..self.n {
            for f in 0..self.f {
                let src = &y[(s * self.f + f) * plane..][..plane];
                out[f * self.n * plane + s * plane..][..plane].copy_from_slice(src);
            }
        }
        out
    }

    /// `[F, N·plane]` to `[N,F,plane]`.
    fn sample_major(&self, y: &[f64]) -> Vec<f64> {
        let plane = self.out_plane();
        let mut out = vec![0.0; y.len()];
        for s in 0..self.n {
            for f in 0..self.f {
                let src = &y[f * self.n * plane + s * plane..][..plane];
                out[(s * self.f + f) * plane..][..plane].copy_from_slice(src);
            }
        }
        out
    }
}

/// Batched im2col convolution: one `[F, C·k·k] · [C·k·k, N·OH·OW]` product.
/// Each output accumulates over `(c, ki, kj)` in ascending order.
pub fn conv2d_forward(x: &[f64], kernel: &[f64], g: &ConvGeom) -> Vec<f64> {
    let cols = g.im2col(x);
    let width = g.n * g.out_plane();
    let mut y = vec![0.0; g.f * width];
    matmul_into(kernel, &cols, g.f, g.patch_len(), width, &mut y);
    g.sample_major(&y)
}

/// Gradients of a convolution given the upstream gradient `gout`.
pub fn conv2d_backward(
    x: &[f64],
    kernel: &[f64],
    gout: &[f64],
    g: &ConvGeom,
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>) {
    let width = g.n * g.out_plane();
    let patch = g.patch_len();
    let gmat = g.filter_major(gout);

    let dk = need_kernel.then(|| {
        let cols_t = transpose(&g.im2col(x), patch, width);
        let mut dk = vec![0.0; g.f * patch];
        matmul_into(&gmat, &cols_t, g.f, width, patch, &mut dk);
        dk
    });
    let dx = need_input.then(|| {
        let kernel_t = transpose(kernel, g.f, patch);
        let mut dcols = vec![0.0; patch * width];
        matmul_into(&kernel_t, &gmat, patch, g.f, width, &mut dcols);
        let mut dx = vec![0.0; g.n * g.c * g.h * g.w];
        g.col2im(&dcols, &mut dx);
        dx
    });
    (dx, dk)
}

/// Geometry of an unpadded pooling window.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(planes: usize, h: usize, w: usize, k: usize, stride: usize) -> Option<Self> {
        if k == 0 || stride == 0 || k > h || k > w {
            return None;
        }
        Some(PoolGeom {
            planes,
            h,
            w,
            k,
            stride,
            oh: (h - k) / stride + 1,
            ow: (w - k) / stride + 1,
        })
    }
}

/// Max pooling; returns values and the flat input index of each maximum.
/// Ties go to the lowest flat index.
pub fn max_pool_forward(x: &[f64], g: &PoolGeom) -> (Vec<f64>, Vec<usize>) {
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_idx = usize::MAX;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        let idx = base + (oy * g.stride + ki) * g.w + ox * g.stride + kj;
                        if best_idx == usize::MAX || x[idx] > best {
                            best = x[idx];
                            best_idx = idx;
                        }
                    }
                }
                out.push(best);
                arg.push(best_idx);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward(x: &[f64], g: &PoolGeom) -> Vec<f64> {
    let area = (g.k * g.k) as f64;
    let mut out = Vec::with_capacity(g.planes * g.oh * g.ow);
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut acc = 0.0;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        acc += x[base + (oy * g.stride + ki) * g.w + ox * g.stride + kj];
                    }
                }
                out.push(acc / area);
            }
        }
    }
    out
}

pub fn avg_pool_backward(gout: &[f64], g: &PoolGeom) -> Vec<f64> {
    let area = (g.k * g.k) as f64;
    let mut dx = vec![0.0; g.planes * g.h * g.w];
    for p in 0..g.planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = gout[(p * g.oh + oy) * g.ow + ox] / area;
                for ki in 0..g.k {
                    for kj in 0..g.k {
                        dx[base + (oy * g.stride + ki) * g.w + ox * g.stride + kj] += gv;
                    }
                }
            }
        }
    }
    dx
}

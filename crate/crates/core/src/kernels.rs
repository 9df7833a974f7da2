//! Convolution kernels (im2col + GEMM) shared by the forward and backward passes.

use crate::tensor::{matmul, MatLayout, Scalar};

/// Upper bound on the number of elements in one im2col buffer.
const COL_BUDGET: usize = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    fn out_plane(&self) -> usize {
        self.out_height() * self.out_width()
    }

    fn chunk(&self) -> usize {
        (COL_BUDGET / (self.patch_len() * self.out_plane()).max(1)).clamp(1, self.batch.max(1))
    }
}

fn im2col<F: Scalar>(g: &ConvGeometry, x: &[F], first: usize, count: usize, cols: &mut [F]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let n = count * plane;
    let k = g.kernel;
    let in_plane = g.height * g.width;
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst_row = &mut cols[row * n..(row + 1) * n];
                for img in 0..count {
                    let src = &x[((first + img) * g.in_channels + ci) * in_plane..][..in_plane];
                    for oy in 0..ho {
                        let dst = &mut dst_row[img * plane + oy * wo..][..wo];
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            dst.fill(F::zero());
                            continue;
                        }
                        let src_row = &src[iy as usize * g.width..][..g.width];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            *d = if ix < 0 || ix >= g.width as isize {
                                F::zero()
                            } else {
                                src_row[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Scalar>(g: &ConvGeometry, cols: &[F], first: usize, count: usize, dx: &mut [F]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    let n = count * plane;
    let k = g.kernel;
    let in_plane = g.height * g.width;
    for ci in 0..g.in_channels {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src_row = &cols[row * n..(row + 1) * n];
                for img in 0..count {
                    let dst = &mut dx[((first + img) * g.in_channels + ci) * in_plane..][..in_plane];
                    for oy in 0..ho {
                        let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                        if iy < 0 || iy >= g.height as isize {
                            continue;
                        }
                        let src = &src_row[img * plane + oy * wo..][..wo];
                        let dst_row = &mut dst[iy as usize * g.width..][..g.width];
                        for (ox, &v) in src.iter().enumerate() {
                            let ix = (ox * g.stride + kx) as isize - g.padding as isize;
                            if ix >= 0 && ix < g.width as isize {
                                dst_row[ix as usize] += v;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `y = conv(x, w) + b` with `x: (B, Cin, H, W)`, `w: (Cout, Cin, k, k)`.
pub fn conv2d_forward<F: Scalar>(g: &ConvGeometry, x: &[F], w: &[F], bias: Option<&[F]>) -> Vec<F> {
    let plane = g.out_plane();
    let k = g.patch_len();
    let mut out = vec![F::zero(); g.batch * g.out_channels * plane];
    let chunk = g.chunk();
    let mut cols = vec![F::zero(); k * chunk * plane];
    let mut tmp = vec![F::zero(); g.out_channels * chunk * plane];
    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let n = count * plane;
        im2col(g, x, first, count, &mut cols[..k * n]);
        matmul(
            F::one(),
            w,
            MatLayout::row_major(g.out_channels, k),
            &cols[..k * n],
            MatLayout::row_major(k, n),
            F::zero(),
            &mut tmp[..g.out_channels * n],
            MatLayout::row_major(g.out_channels, n),
        );
        for img in 0..count {
            for co in 0..g.out_channels {
                let b = bias.map_or(F::zero(), |b| b[co]);
                let src = &tmp[co * n + img * plane..][..plane];
                let dst = &mut out[((first + img) * g.out_channels + co) * plane..][..plane];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + b;
                }
            }
        }
        first += count;
    }
    out
}

/// Gradients requested from [`conv2d_backward`]; `None` entries are skipped.
pub struct ConvGrads<'a, F> {
    pub input: Option<&'a mut [F]>,
    pub weight: Option<&'a mut [F]>,
    pub bias: Option<&'a mut [F]>,
}

/// Accumulates (`+=`) the requested gradients of a convolution given `dy`.
pub fn conv2d_backward<F: Scalar>(g: &ConvGeometry, x: &[F], w: &[F], dy: &[F], grads: ConvGrads<'_, F>) {
    let ConvGrads {
        mut input,
        mut weight,
        mut bias,
    } = grads;
    let plane = g.out_plane();
    let k = g.patch_len();
    let chunk = g.chunk();
    let mut cols = vec![F::zero(); k * chunk * plane];
    let mut dtmp = vec![F::zero(); g.out_channels * chunk * plane];
    let mut first = 0;
    while first < g.batch {
        let count = chunk.min(g.batch - first);
        let n = count * plane;
        for img in 0..count {
            for co in 0..g.out_channels {
                let src = &dy[((first + img) * g.out_channels + co) * plane..][..plane];
                dtmp[co * n + img * plane..][..plane].copy_from_slice(src);
            }
        }
        let dtmp = &dtmp[..g.out_channels * n];
        if let Some(db) = bias.as_deref_mut() {
            for (co, d) in db.iter_mut().enumerate() {
                *d += dtmp[co * n..(co + 1) * n].iter().fold(F::zero(), |a, &v| a + v);
            }
        }
        if let Some(dw) = weight.as_deref_mut() {
            im2col(g, x, first, count, &mut cols[..k * n]);
            matmul(
                F::one(),
                dtmp,
                MatLayout::row_major(g.out_channels, n),
                &cols[..k * n],
                MatLayout::transposed(k, n),
                F::one(),
                dw,
                MatLayout::row_major(g.out_channels, k),
            );
        }
        if let Some(dx) = input.as_deref_mut() {
            matmul(
                F::one(),
                w,
                MatLayout::transposed(g.out_channels, k),
                dtmp,
                MatLayout::row_major(g.out_channels, n),
                F::zero(),
                &mut cols[..k * n],
                MatLayout::row_major(k, n),
            );
            col2im_add(g, &cols[..k * n], first, count, dx);
        }
        first += count;
    }
}

/// Writes `softmax(src / tau)` into `dst` using max subtraction.
pub fn softmax_row<F: Scalar>(src: &[F], tau: F, dst: &mut [F]) {
    let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let mut total = F::zero();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = ((v - max) / tau).exp();
        total += *d;
    }
    for d in dst.iter_mut() {
        *d /= total;
    }
}

/// Writes `log_softmax(src / tau)` into `dst`.
pub fn log_softmax_row<F: Scalar>(src: &[F], tau: F, dst: &mut [F]) {
    let max = src.iter().fold(F::neg_infinity(), |m, &v| m.max(v));
    let total = src
        .iter()
        .fold(F::zero(), |acc, &v| acc + ((v - max) / tau).exp());
    let log_z = total.ln();
    for (d, &v) in dst.iter_mut().zip(src) {
        *d = (v - max) / tau - log_z;
    }
}

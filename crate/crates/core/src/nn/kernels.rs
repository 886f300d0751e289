//! Raw NHWC kernels used by the tape. Shapes are validated by the caller.

use super::Scalar;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    /// Rows of the im2col matrix: one per output pixel.
    pub fn rows(&self) -> usize {
        self.batch * self.out_height() * self.out_width()
    }

    /// Columns of the im2col matrix: one per kernel tap and input channel.
    pub fn patch(&self) -> usize {
        self.kernel * self.kernel * self.in_channels
    }
}

pub fn im2col<T: Scalar>(g: &ConvGeom, x: &[T]) -> Vec<T> {
    let (ho, wo, k, cin) = (g.out_height(), g.out_width(), g.patch(), g.in_channels);
    let mut cols = vec![T::zero(); g.rows() * k];
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * k;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let src = ((b * g.height + iy as usize) * g.width + ix as usize) * cin;
                        let dst = row + (ky * g.kernel + kx) * cin;
                        cols[dst..dst + cin].copy_from_slice(&x[src..src + cin]);
                    }
                }
            }
        }
    }
    cols
}

pub fn col2im<T: Scalar>(g: &ConvGeom, cols: &[T], dx: &mut [T]) {
    let (ho, wo, k, cin) = (g.out_height(), g.out_width(), g.patch(), g.in_channels);
    for b in 0..g.batch {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * k;
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    for kx in 0..g.kernel {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.width as isize {
                            continue;
                        }
                        let dst = ((b * g.height + iy as usize) * g.width + ix as usize) * cin;
                        let src = row + (ky * g.kernel + kx) * cin;
                        for c in 0..cin {
                            dx[dst + c] += cols[src + c];
                        }
                    }
                }
            }
        }
    }
}

/// `out[rows x cout] = cols[rows x k] * w[k x cout] (+ bias)`.
pub fn conv_forward<T: Scalar>(g: &ConvGeom, cols: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let (m, k, n) = (g.rows(), g.patch(), g.out_channels);
    let mut out = vec![T::zero(); m * n];
    if let Some(bias) = bias {
        for row in out.chunks_exact_mut(n) {
            row.copy_from_slice(bias);
        }
    }
    let beta = if bias.is_some() { T::one() } else { T::zero() };
    T::gemm(m, k, n, T::one(), cols, (k as isize, 1), w, (n as isize, 1), beta, &mut out, (n as isize, 1));
    out
}

/// Accumulates the weight gradient `dw += cols^T * dy`.
pub fn conv_backward_weight<T: Scalar>(g: &ConvGeom, cols: &[T], dy: &[T], dw: &mut [T]) {
    let (m, k, n) = (g.rows(), g.patch(), g.out_channels);
    T::gemm(k, m, n, T::one(), cols, (1, k as isize), dy, (n as isize, 1), T::one(), dw, (n as isize, 1));
}

/// Gradient with respect to the im2col matrix: `dcols = dy * w^T`.
pub fn conv_backward_cols<T: Scalar>(g: &ConvGeom, dy: &[T], w: &[T]) -> Vec<T> {
    let (m, k, n) = (g.rows(), g.patch(), g.out_channels);
    let mut dcols = vec![T::zero(); m * k];
    T::gemm(m, n, k, T::one(), dy, (n as isize, 1), w, (1, n as isize), T::zero(), &mut dcols, (k as isize, 1));
    dcols
}

/// Column sums of a `rows x cols` row-major matrix, accumulated into `out`.
pub fn column_sums_into<T: Scalar>(m: &[T], cols: usize, out: &mut [T]) {
    for row in m.chunks_exact(cols) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
}

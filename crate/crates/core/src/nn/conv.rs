//! im2col-based convolution kernels shared by the forward and backward passes.

use super::scalar::Scalar;

/// Geometry of a convolution from a `channels x height x width` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_height: usize,
    pub out_width: usize,
}

impl ConvGeom {
    /// `None` when the kernel does not fit the padded image.
    pub fn new(channels: usize, height: usize, width: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        if stride == 0 || kernel == 0 || height + 2 * pad < kernel || width + 2 * pad < kernel {
            return None;
        }
        Some(Self {
            channels,
            height,
            width,
            kernel,
            stride,
            pad,
            out_height: (height + 2 * pad - kernel) / stride + 1,
            out_width: (width + 2 * pad - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_height * self.out_width
    }

    /// True for 1x1, stride 1, unpadded kernels whose column matrix is the
    /// image itself.
    pub fn is_pointwise(&self) -> bool {
        self.kernel == 1 && self.stride == 1 && self.pad == 0
    }

    #[inline]
    fn source(&self, out: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (out * self.stride + k) as isize - self.pad as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

pub(crate) fn im2col<T: Scalar>(image: &[T], g: &ConvGeom) -> Vec<T> {
    let n = g.col_cols();
    let mut cols = vec![T::zero(); g.col_rows() * n];
    for c in 0..g.channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let src_row = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_width..(oy + 1) * g.out_width];
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.width) {
                            *d = src_row[ix];
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters columns back, accumulating into `image`.
pub(crate) fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, image: &mut [T]) {
    let n = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kernel {
            for kj in 0..g.kernel {
                let row = (c * g.kernel + ki) * g.kernel + kj;
                let src = &cols[row * n..(row + 1) * n];
                for oy in 0..g.out_height {
                    let Some(iy) = g.source(oy, ki, g.height) else {
                        continue;
                    };
                    let src_row = &src[oy * g.out_width..(oy + 1) * g.out_width];
                    let dst_row = &mut plane[iy * g.width..(iy + 1) * g.width];
                    for (ox, &s) in src_row.iter().enumerate() {
                        if let Some(ix) = g.source(ox, kj, g.width) {
                            dst_row[ix] = dst_row[ix] + s;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn output_sizes() {
        let g = ConvGeom::new(1, 5, 5, 3, 1, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (5, 5));
        let g = ConvGeom::new(1, 64, 64, 3, 2, 1).unwrap();
        assert_eq!((g.out_height, g.out_width), (32, 32));
        assert!(ConvGeom::new(1, 1, 1, 5, 1, 0).is_none());
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)> for arbitrary x, y.
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 5 * 4).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&y).map(|(a, b)| a * b).sum();
        let mut back = vec![0.0; x.len()];
        col2im(&y, &g, &mut back);
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}

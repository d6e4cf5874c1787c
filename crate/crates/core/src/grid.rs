//! Row-major 2D grids with interleaved channels, validity masks and the
//! validity-aware bilinear sampler used by the warping layer.
//!
//! Pixel centers sit at integer coordinates; the sampling domain of a grid
//! is `[0, width - 1] x [0, height - 1]`.

use std::ops::{Add, Mul};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum GridError {
    #[error("grid dimensions must be non-zero, got {width}x{height}x{channels}")]
    ZeroDimension {
        width: usize,
        height: usize,
        channels: usize,
    },
    #[error("data length {actual} does not match {width}x{height}x{channels}")]
    DataLength {
        width: usize,
        height: usize,
        channels: usize,
        actual: usize,
    },
    #[error("shape mismatch: {left:?} vs {right:?}")]
    ShapeMismatch {
        left: (usize, usize, usize),
        right: (usize, usize, usize),
    },
    #[error("expected a single-channel grid, got {0} channels")]
    NotSingleChannel(usize),
}

/// Dense `width x height x channels` array stored row-major with channels
/// interleaved per pixel.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid2D<T = f64> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Copy> Grid2D<T> {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self, GridError> {
        if width == 0 || height == 0 || channels == 0 {
            return Err(GridError::ZeroDimension {
                width,
                height,
                channels,
            });
        }
        if data.len() != width * height * channels {
            return Err(GridError::DataLength {
                width,
                height,
                channels,
                actual: data.len(),
            });
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// # Panics
    /// If any dimension is zero.
    pub fn filled(width: usize, height: usize, channels: usize, value: T) -> Self {
        assert!(
            width > 0 && height > 0 && channels > 0,
            "grid dimensions must be non-zero"
        );
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    /// Builds a grid by evaluating `f(x, y, c)` in storage order.
    pub fn from_fn(width: usize, height: usize, channels: usize, mut f: impl FnMut(usize, usize, usize) -> T) -> Self {
        assert!(
            width > 0 && height > 0 && channels > 0,
            "grid dimensions must be non-zero"
        );
        let mut data = Vec::with_capacity(width * height * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(x, y, c));
                }
            }
        }
        Self {
            width,
            height,
            channels,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.width, self.height, self.channels)
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, c: usize) -> usize {
        debug_assert!(x < self.width && y < self.height && c < self.channels);
        (y * self.width + x) * self.channels + c
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[self.index(x, y, c)]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: T) {
        let i = self.index(x, y, c);
        self.data[i] = value;
    }

    /// All channel values of pixel `(x, y)`.
    pub fn pixel(&self, x: usize, y: usize) -> &[T] {
        let start = self.index(x, y, 0);
        &self.data[start..start + self.channels]
    }

    pub fn same_shape<U>(&self, other: &Grid2D<U>) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    fn check_shape<U>(&self, other: &Grid2D<U>) -> Result<(), GridError> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(GridError::ShapeMismatch {
                left: self.shape(),
                right: (other.width, other.height, other.channels),
            })
        }
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid2D<U> {
        Grid2D {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().copied().map(f).collect(),
        }
    }

    pub fn zip_with<U: Copy, V: Copy>(
        &self,
        other: &Grid2D<U>,
        mut f: impl FnMut(T, U) -> V,
    ) -> Result<Grid2D<V>, GridError> {
        self.check_shape(other)?;
        Ok(Grid2D {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn reduce<A>(&self, init: A, f: impl FnMut(A, T) -> A) -> A {
        self.data.iter().copied().fold(init, f)
    }

    /// Mirrors the grid left to right.
    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, self.channels, |x, y, c| {
            self.get(self.width - 1 - x, y, c)
        })
    }

    /// Copies the `width x height` window whose top-left corner is `(x0, y0)`.
    ///
    /// # Panics
    /// If the window leaves the grid.
    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        Self::from_fn(width, height, self.channels, |x, y, c| self.get(x0 + x, y0 + y, c))
    }
}

impl<T: Copy + Add<Output = T>> Grid2D<T> {
    pub fn add(&self, other: &Self) -> Result<Self, GridError> {
        self.zip_with(other, |a, b| a + b)
    }
}

impl<T: Copy + Mul<Output = T>> Grid2D<T> {
    pub fn scale(&self, factor: T) -> Self {
        self.map(|a| a * factor)
    }
}

impl Grid2D<f64> {
    pub fn reduce_sum(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// One boolean per pixel marking measured values.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl ValidityMask {
    pub fn new(width: usize, height: usize, bits: Vec<bool>) -> Result<Self, GridError> {
        if width == 0 || height == 0 {
            return Err(GridError::ZeroDimension {
                width,
                height,
                channels: 1,
            });
        }
        if bits.len() != width * height {
            return Err(GridError::DataLength {
                width,
                height,
                channels: 1,
                actual: bits.len(),
            });
        }
        Ok(Self { width, height, bits })
    }

    pub fn all_valid(width: usize, height: usize) -> Self {
        Self::filled(width, height, true)
    }

    pub fn all_invalid(width: usize, height: usize) -> Self {
        Self::filled(width, height, false)
    }

    fn filled(width: usize, height: usize, value: bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be non-zero");
        Self {
            width,
            height,
            bits: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        assert!(width > 0 && height > 0, "mask dimensions must be non-zero");
        let mut bits = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                bits.push(f(x, y));
            }
        }
        Self { width, height, bits }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.bits[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, valid: bool) {
        self.bits[y * self.width + x] = valid;
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn matches<T>(&self, grid: &Grid2D<T>) -> bool {
        self.width == grid.width && self.height == grid.height
    }

    pub fn and(&self, other: &Self) -> Self {
        assert_eq!((self.width, self.height), (other.width, other.height));
        Self {
            width: self.width,
            height: self.height,
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, |x, y| self.get(self.width - 1 - x, y))
    }

    pub fn window(&self, x0: usize, y0: usize, width: usize, height: usize) -> Self {
        assert!(x0 + width <= self.width && y0 + height <= self.height);
        Self::from_fn(width, height, |x, y| self.get(x0 + x, y0 + y))
    }
}

/// Validity-weighted bilinear interpolation of a single-channel grid.
///
/// Only lattice neighbors with a positive bilinear weight take part. Weights
/// of invalid neighbors are dropped and the rest renormalized; the result is
/// `None` when `(u, v)` leaves the sampling domain or every participating
/// neighbor is invalid.
pub fn bilinear_sample(grid: &Grid2D<f64>, mask: &ValidityMask, u: f64, v: f64) -> Result<Option<f64>, GridError> {
    if grid.channels != 1 {
        return Err(GridError::NotSingleChannel(grid.channels));
    }
    if !mask.matches(grid) {
        return Err(GridError::ShapeMismatch {
            left: grid.shape(),
            right: (mask.width, mask.height, 1),
        });
    }
    Ok(sample_unchecked(grid, mask, u, v))
}

/// [`bilinear_sample`] without the shape checks; callers guarantee a
/// single-channel grid matching `mask`.
pub(crate) fn sample_unchecked(grid: &Grid2D<f64>, mask: &ValidityMask, u: f64, v: f64) -> Option<f64> {
    let max_u = (grid.width - 1) as f64;
    let max_v = (grid.height - 1) as f64;
    // Negated comparisons also reject NaN.
    if !(u >= 0.0 && u <= max_u && v >= 0.0 && v <= max_v) {
        return None;
    }
    let x0 = u.floor() as usize;
    let y0 = v.floor() as usize;
    let fx = u - x0 as f64;
    let fy = v - y0 as f64;
    let taps = [
        (x0, y0, (1.0 - fx) * (1.0 - fy)),
        (x0 + 1, y0, fx * (1.0 - fy)),
        (x0, y0 + 1, (1.0 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ];

    // Accumulating offsets from the first valid tap keeps constant regions
    // and single-tap samples exact.
    let mut reference = None;
    let mut offset = 0.0;
    let mut weight_sum = 0.0;
    for &(x, y, w) in &taps {
        if w <= 0.0 || !mask.get(x, y) {
            continue;
        }
        let value = grid.data[y * grid.width + x];
        let r = *reference.get_or_insert(value);
        offset += w * (value - r);
        weight_sum += w;
    }
    reference.map(|r| r + offset / weight_sum)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn all_valid_grid(width: usize, height: usize, data: Vec<f64>) -> (Grid2D<f64>, ValidityMask) {
        (
            Grid2D::new(width, height, 1, data).unwrap(),
            ValidityMask::all_valid(width, height),
        )
    }

    #[test]
    fn constant_grid_samples_constant() {
        let g = Grid2D::filled(10, 10, 1, 5.0);
        let m = ValidityMask::all_valid(10, 10);
        assert_eq!(bilinear_sample(&g, &m, 3.4, 7.8).unwrap(), Some(5.0));
    }

    #[test]
    fn out_of_domain_is_invalid() {
        let g = Grid2D::filled(4, 4, 1, 1.0);
        let m = ValidityMask::all_valid(4, 4);
        assert_eq!(bilinear_sample(&g, &m, -0.5, 2.0).unwrap(), None);
        assert_eq!(bilinear_sample(&g, &m, 3.0001, 2.0).unwrap(), None);
        assert_eq!(bilinear_sample(&g, &m, 1.0, f64::NAN).unwrap(), None);
        assert_eq!(bilinear_sample(&g, &m, 3.0, 3.0).unwrap(), Some(1.0));
    }

    #[test]
    fn two_pixel_hand_case() {
        let (g, m) = all_valid_grid(2, 1, vec![2.0, 4.0]);
        assert_eq!(bilinear_sample(&g, &m, 0.25, 0.0).unwrap(), Some(2.5));
    }

    #[test]
    fn single_valid_neighbor_wins_regardless_of_position() {
        let g = Grid2D::new(2, 2, 1, vec![1.0, 7.25, 3.0, 4.0]).unwrap();
        let mut m = ValidityMask::all_invalid(2, 2);
        m.set(1, 0, true);
        for &(u, v) in &[(0.1, 0.1), (0.5, 0.5), (0.93, 0.77), (1.0, 0.0)] {
            assert_eq!(bilinear_sample(&g, &m, u, v).unwrap(), Some(7.25));
        }
        // (0, 0) only touches the invalid top-left pixel.
        assert_eq!(bilinear_sample(&g, &m, 0.0, 0.0).unwrap(), None);
    }

    #[test]
    fn integer_sample_ignores_zero_weight_neighbors() {
        let g = Grid2D::new(3, 1, 1, vec![1.0, 2.0, 3.0]).unwrap();
        let mut m = ValidityMask::all_valid(3, 1);
        m.set(1, 0, false);
        assert_eq!(bilinear_sample(&g, &m, 1.0, 0.0).unwrap(), None);
        assert_eq!(bilinear_sample(&g, &m, 2.0, 0.0).unwrap(), Some(3.0));
    }

    #[test]
    fn mismatched_mask_is_an_error() {
        let g = Grid2D::filled(3, 3, 1, 0.0);
        let m = ValidityMask::all_valid(2, 3);
        assert!(matches!(
            bilinear_sample(&g, &m, 0.0, 0.0),
            Err(GridError::ShapeMismatch { .. })
        ));
        let g2 = Grid2D::filled(2, 3, 2, 0.0);
        assert_eq!(
            bilinear_sample(&g2, &m, 0.0, 0.0),
            Err(GridError::NotSingleChannel(2))
        );
    }

    #[test]
    fn elementwise_helpers() {
        let g = Grid2D::new(2, 2, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let zeros = Grid2D::filled(2, 2, 1, 0.0);
        assert_eq!(zeros.add(&g).unwrap(), g);
        assert_eq!(g.scale(1.0), g);
        assert_eq!(g.reduce_sum(), 10.0);
        let other = Grid2D::filled(3, 2, 1, 0.0);
        assert!(g.add(&other).is_err());
    }

    #[test]
    fn construction_checks() {
        assert!(Grid2D::<f64>::new(0, 2, 1, vec![]).is_err());
        assert!(Grid2D::new(2, 2, 2, vec![0.0; 7]).is_err());
        assert!(ValidityMask::new(2, 2, vec![true; 3]).is_err());
    }

    #[test]
    fn flip_and_window() {
        let g = Grid2D::from_fn(3, 2, 1, |x, y, _| (y * 3 + x) as f64);
        assert_eq!(g.flip_horizontal().data(), &[2.0, 1.0, 0.0, 5.0, 4.0, 3.0]);
        assert_eq!(g.window(1, 1, 2, 1).data(), &[4.0, 5.0]);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn grid_and_mask() -> impl Strategy<Value = (Grid2D<f64>, ValidityMask)> {
            (2usize..6, 2usize..6).prop_flat_map(|(w, h)| {
                (
                    proptest::collection::vec(-50.0f64..50.0, w * h),
                    proptest::collection::vec(any::<bool>(), w * h),
                )
                    .prop_map(move |(d, b)| {
                        (
                            Grid2D::new(w, h, 1, d).unwrap(),
                            ValidityMask::new(w, h, b).unwrap(),
                        )
                    })
            })
        }

        proptest! {
            #[test]
            fn exact_at_valid_lattice_points((g, m) in grid_and_mask(), xs in 0usize..6, ys in 0usize..6) {
                let x = xs % g.width();
                let y = ys % g.height();
                let s = bilinear_sample(&g, &m, x as f64, y as f64).unwrap();
                if m.get(x, y) {
                    prop_assert_eq!(s, Some(g.get(x, y, 0)));
                } else {
                    prop_assert_eq!(s, None);
                }
            }

            #[test]
            fn sample_is_convex((g, m) in grid_and_mask(), fu in 0.0f64..1.0, fv in 0.0f64..1.0) {
                let u = fu * (g.width() - 1) as f64;
                let v = fv * (g.height() - 1) as f64;
                if let Some(s) = bilinear_sample(&g, &m, u, v).unwrap() {
                    let x0 = u.floor() as usize;
                    let y0 = v.floor() as usize;
                    let mut lo = f64::INFINITY;
                    let mut hi = f64::NEG_INFINITY;
                    for (x, y) in [(x0, y0), (x0 + 1, y0), (x0, y0 + 1), (x0 + 1, y0 + 1)] {
                        if x < g.width() && y < g.height() && m.get(x, y) {
                            lo = lo.min(g.get(x, y, 0));
                            hi = hi.max(g.get(x, y, 0));
                        }
                    }
                    prop_assert!(s >= lo - 1e-12 && s <= hi + 1e-12);
                }
            }
        }
    }
}

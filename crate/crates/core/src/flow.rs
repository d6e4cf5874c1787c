//! Dense optical flow fields, intermediate-time flow algebra and the
//! Middlebury `.flo` codec.

use thiserror::Error;

use crate::grid::{Grid2D, GridError, ValidityMask};

/// `.flo` magic number, stored as a little-endian float (`"PIEH"`).
pub const FLO_MAGIC: f32 = 202021.25;

/// Components beyond this magnitude mark unknown flow in `.flo` files.
pub const UNKNOWN_FLOW_THRESHOLD: f64 = 1e9;

/// Value written for invalid pixels when encoding.
pub const UNKNOWN_FLOW: f32 = 1e10;

#[derive(Debug, Error)]
pub enum FlowError {
    #[error("bad .flo magic {0}")]
    BadMagic(f32),
    #[error("truncated .flo payload: expected {expected} bytes, got {actual}")]
    Truncated { expected: usize, actual: usize },
    #[error("invalid .flo dimensions {width}x{height}")]
    BadDimensions { width: i32, height: i32 },
    #[error("non-finite flow at valid pixel ({x}, {y})")]
    NonFinite { x: usize, y: usize },
    #[error(transparent)]
    Grid(#[from] GridError),
}

/// Per-pixel displacement `(du, dv)` in pixels.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    grid: Grid2D<f64>,
    mask: ValidityMask,
}

impl FlowField {
    pub fn new(grid: Grid2D<f64>, mask: ValidityMask) -> Result<Self, FlowError> {
        if grid.channels() != 2 || !mask.matches(&grid) {
            return Err(GridError::ShapeMismatch {
                left: grid.shape(),
                right: (mask.width(), mask.height(), 2),
            }
            .into());
        }
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                if mask.get(x, y) && !grid.pixel(x, y).iter().all(|c| c.is_finite()) {
                    return Err(FlowError::NonFinite { x, y });
                }
            }
        }
        Ok(Self { grid, mask })
    }

    /// The same displacement everywhere, all pixels valid.
    pub fn constant(width: usize, height: usize, du: f64, dv: f64) -> Self {
        Self {
            grid: Grid2D::from_fn(width, height, 2, |_, _, c| if c == 0 { du } else { dv }),
            mask: ValidityMask::all_valid(width, height),
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self::constant(width, height, 0.0, 0.0)
    }

    /// Builds a field from `f(x, y)`; `None` marks an invalid pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> Option<(f64, f64)>,
    ) -> Result<Self, FlowError> {
        let mut grid = Grid2D::filled(width, height, 2, 0.0);
        let mut mask = ValidityMask::all_invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some((du, dv)) = f(x, y) {
                    if !(du.is_finite() && dv.is_finite()) {
                        return Err(FlowError::NonFinite { x, y });
                    }
                    grid.set(x, y, 0, du);
                    grid.set(x, y, 1, dv);
                    mask.set(x, y, true);
                }
            }
        }
        Ok(Self { grid, mask })
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn grid(&self) -> &Grid2D<f64> {
        &self.grid
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<(f64, f64)> {
        if self.mask.get(x, y) {
            Some((self.grid.get(x, y, 0), self.grid.get(x, y, 1)))
        } else {
            None
        }
    }

    pub fn same_dims(&self, other: &Self) -> bool {
        self.width() == other.width() && self.height() == other.height()
    }

    fn check_dims(&self, other: &Self) -> Result<(), FlowError> {
        if self.same_dims(other) {
            Ok(())
        } else {
            Err(GridError::ShapeMismatch {
                left: self.grid.shape(),
                right: other.grid.shape(),
            }
            .into())
        }
    }

    pub fn scale(&self, factor: f64) -> Self {
        Self {
            grid: self.grid.scale(factor),
            mask: self.mask.clone(),
        }
    }

    /// Mirror image of the field: pixels flip left to right and `du` changes sign.
    pub fn flip_horizontal(&self) -> Self {
        let flipped = self.grid.flip_horizontal();
        Self {
            grid: Grid2D::from_fn(self.width(), self.height(), 2, |x, y, c| {
                let v = flipped.get(x, y, c);
                if c == 0 {
                    -v
                } else {
                    v
                }
            }),
            mask: self.mask.flip_horizontal(),
        }
    }
}

/// Flows from the missing middle frame to its neighbors given the two
/// cross-frame flows, under linear motion:
///
/// ```text
/// to_prev = -0.25 * forward + 0.25 * backward
/// to_next =  0.25 * forward - 0.25 * backward
/// ```
///
/// `forward` maps frame t-1 to t+1 and `backward` maps t+1 to t-1. A pixel is
/// valid when both inputs are. Returns `(to_prev, to_next)`.
pub fn midpoint_flows(forward: &FlowField, backward: &FlowField) -> Result<(FlowField, FlowField), FlowError> {
    forward.check_dims(backward)?;
    let mask = forward.mask.and(&backward.mask);
    let to_prev = forward
        .grid
        .zip_with(&backward.grid, |f, b| -0.25 * f + 0.25 * b)?;
    let to_next = forward
        .grid
        .zip_with(&backward.grid, |f, b| 0.25 * f - 0.25 * b)?;
    Ok((
        FlowField {
            grid: to_prev,
            mask: mask.clone(),
        },
        FlowField { grid: to_next, mask },
    ))
}

/// `sign * 0.5 * flow`, the single-direction halving of smooth motion.
pub fn halve_flow(flow: &FlowField, sign: f64) -> FlowField {
    debug_assert!(sign == 1.0 || sign == -1.0);
    flow.scale(sign * 0.5)
}

/// Per-pixel `|forward + backward|`, zero for perfectly consistent
/// cross-frame flows. `None` where either input is invalid.
pub fn inconsistency(forward: &FlowField, backward: &FlowField) -> Result<Grid2D<Option<f64>>, FlowError> {
    forward.check_dims(backward)?;
    Ok(Grid2D::from_fn(forward.width(), forward.height(), 1, |x, y, _| {
        let (fu, fv) = forward.get(x, y)?;
        let (bu, bv) = backward.get(x, y)?;
        Some((fu + bu).hypot(fv + bv))
    }))
}

/// Summary of [`inconsistency`] over jointly valid pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InconsistencyStats {
    pub mean: f64,
    pub max: f64,
    pub count: usize,
}

pub fn inconsistency_stats(forward: &FlowField, backward: &FlowField) -> Result<InconsistencyStats, FlowError> {
    let per_pixel = inconsistency(forward, backward)?;
    let values: Vec<f64> = per_pixel.data().iter().flatten().copied().collect();
    let count = values.len();
    Ok(InconsistencyStats {
        mean: if count == 0 {
            0.0
        } else {
            values.iter().sum::<f64>() / count as f64
        },
        max: values.iter().copied().fold(0.0, f64::max),
        count,
    })
}

pub fn decode_flo(bytes: &[u8]) -> Result<FlowField, FlowError> {
    if bytes.len() < 12 {
        return Err(FlowError::Truncated {
            expected: 12,
            actual: bytes.len(),
        });
    }
    let word = |i: usize| [bytes[i], bytes[i + 1], bytes[i + 2], bytes[i + 3]];
    let magic = f32::from_le_bytes(word(0));
    if magic != FLO_MAGIC {
        return Err(FlowError::BadMagic(magic));
    }
    let width = i32::from_le_bytes(word(4));
    let height = i32::from_le_bytes(word(8));
    if width <= 0 || height <= 0 {
        return Err(FlowError::BadDimensions { width, height });
    }
    let (w, h) = (width as usize, height as usize);
    let expected = 12 + w * h * 8;
    if bytes.len() < expected {
        return Err(FlowError::Truncated {
            expected,
            actual: bytes.len(),
        });
    }
    let mut grid = Grid2D::filled(w, h, 2, 0.0);
    let mut mask = ValidityMask::all_valid(w, h);
    for (i, value) in grid.data_mut().iter_mut().enumerate() {
        *value = f64::from(f32::from_le_bytes(word(12 + 4 * i)));
    }
    for y in 0..h {
        for x in 0..w {
            let known = grid
                .pixel(x, y)
                .iter()
                .all(|c| c.is_finite() && c.abs() <= UNKNOWN_FLOW_THRESHOLD);
            mask.set(x, y, known);
            if !known {
                grid.set(x, y, 0, 0.0);
                grid.set(x, y, 1, 0.0);
            }
        }
    }
    Ok(FlowField { grid, mask })
}

/// Writes a `.flo` file. Invalid pixels are written as [`UNKNOWN_FLOW`];
/// valid components are narrowed to `f32`.
pub fn encode_flo(flow: &FlowField) -> Vec<u8> {
    let (w, h) = (flow.width(), flow.height());
    let mut out = Vec::with_capacity(12 + w * h * 8);
    out.extend_from_slice(&FLO_MAGIC.to_le_bytes());
    out.extend_from_slice(&(w as i32).to_le_bytes());
    out.extend_from_slice(&(h as i32).to_le_bytes());
    for y in 0..h {
        for x in 0..w {
            let (du, dv) = flow
                .get(x, y)
                .map_or((UNKNOWN_FLOW, UNKNOWN_FLOW), |(u, v)| (u as f32, v as f32));
            out.extend_from_slice(&du.to_le_bytes());
            out.extend_from_slice(&dv.to_le_bytes());
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_constant(f: &FlowField, du: f64, dv: f64) {
        for y in 0..f.height() {
            for x in 0..f.width() {
                assert_eq!(f.get(x, y), Some((du, dv)));
            }
        }
    }

    #[test]
    fn antisymmetric_constant_flow() {
        let (p, n) = midpoint_flows(&FlowField::constant(3, 2, 4.0, 0.0), &FlowField::constant(3, 2, -4.0, 0.0)).unwrap();
        assert_constant(&p, -2.0, 0.0);
        assert_constant(&n, 2.0, 0.0);
    }

    #[test]
    fn static_scene() {
        let (p, n) = midpoint_flows(&FlowField::zeros(2, 2), &FlowField::zeros(2, 2)).unwrap();
        assert_constant(&p, 0.0, 0.0);
        assert_constant(&n, 0.0, 0.0);
    }

    #[test]
    fn inconsistent_hand_case() {
        let (p, n) = midpoint_flows(&FlowField::constant(2, 2, 4.0, 2.0), &FlowField::constant(2, 2, -2.0, 0.0)).unwrap();
        assert_constant(&p, -1.5, -0.5);
        assert_constant(&n, 1.5, 0.5);
        let stats = inconsistency_stats(&FlowField::constant(2, 2, 4.0, 2.0), &FlowField::constant(2, 2, -2.0, 0.0)).unwrap();
        assert!((stats.max - 8.0f64.sqrt()).abs() < 1e-12);
        assert_eq!(stats.count, 4);
    }

    #[test]
    fn halving() {
        assert_constant(&halve_flow(&FlowField::constant(1, 1, 4.0, 0.0), 1.0), 2.0, 0.0);
        assert_constant(&halve_flow(&FlowField::constant(1, 1, 4.0, 0.0), -1.0), -2.0, -0.0);
        assert_constant(&halve_flow(&FlowField::constant(1, 1, 3.0, -1.0), 1.0), 1.5, -0.5);
    }

    #[test]
    fn validity_is_joint() {
        let mut fwd = FlowField::constant(2, 1, 1.0, 1.0);
        fwd.mask.set(0, 0, false);
        let mut bwd = FlowField::constant(2, 1, 1.0, 1.0);
        bwd.mask.set(1, 0, false);
        let (p, _) = midpoint_flows(&fwd, &bwd).unwrap();
        assert_eq!(p.mask().count(), 0);
        assert!(midpoint_flows(&fwd, &FlowField::zeros(3, 1)).is_err());
    }

    #[test]
    fn flo_layout() {
        let f = FlowField::constant(1, 1, 1.5, -2.0);
        let bytes = encode_flo(&f);
        assert_eq!(bytes.len(), 20);
        assert_eq!(&bytes[0..4], b"PIEH");
        assert_eq!(i32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(f32::from_le_bytes(bytes[12..16].try_into().unwrap()), 1.5);
        assert_eq!(f32::from_le_bytes(bytes[16..20].try_into().unwrap()), -2.0);
        assert_eq!(decode_flo(&bytes).unwrap(), f);
    }

    #[test]
    fn flo_errors() {
        let mut bytes = encode_flo(&FlowField::zeros(2, 2));
        assert!(matches!(decode_flo(&bytes[..20]), Err(FlowError::Truncated { .. })));
        bytes[0] ^= 1;
        assert!(matches!(decode_flo(&bytes), Err(FlowError::BadMagic(_))));
        assert!(decode_flo(&[]).is_err());
    }

    #[test]
    fn unknown_flow_marks_invalid() {
        let f = FlowField::from_fn(2, 1, |x, _| (x == 1).then_some((0.5, 0.25))).unwrap();
        let back = decode_flo(&encode_flo(&f)).unwrap();
        assert_eq!(back.mask(), f.mask());
        assert_eq!(back.get(1, 0), Some((0.5, 0.25)));
    }

    #[test]
    fn flip_negates_horizontal_component() {
        let f = FlowField::from_fn(2, 1, |x, _| Some((x as f64 + 1.0, 3.0))).unwrap();
        let g = f.flip_horizontal();
        assert_eq!(g.get(0, 0), Some((-2.0, 3.0)));
        assert_eq!(g.get(1, 0), Some((-1.0, 3.0)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn field(w: usize, h: usize) -> impl Strategy<Value = FlowField> {
            proptest::collection::vec(-100.0f64..100.0, w * h * 2)
                .prop_map(move |d| FlowField::new(Grid2D::new(w, h, 2, d).unwrap(), ValidityMask::all_valid(w, h)).unwrap())
        }

        proptest! {
            #[test]
            fn midpoint_is_antisymmetric(f in field(4, 3), g in field(4, 3)) {
                let (p, n) = midpoint_flows(&f, &g).unwrap();
                for (a, b) in p.grid().data().iter().zip(n.grid().data()) {
                    prop_assert_eq!(a + b, 0.0);
                }
            }

            #[test]
            fn consistent_flows_agree_with_halving(f in field(3, 3)) {
                let b = f.scale(-1.0);
                let (p, n) = midpoint_flows(&f, &b).unwrap();
                prop_assert_eq!(p.grid(), &halve_flow(&b, 1.0).grid().clone());
                prop_assert_eq!(n.grid(), &halve_flow(&f, 1.0).grid().clone());
                prop_assert_eq!(p.grid(), &halve_flow(&f, -1.0).grid().clone());
                prop_assert_eq!(n.grid(), &halve_flow(&b, -1.0).grid().clone());
            }

            #[test]
            fn midpoint_is_linear(f in field(3, 2), g in field(3, 2), alpha in -4.0f64..4.0) {
                let (p, n) = midpoint_flows(&f.scale(alpha), &g.scale(alpha)).unwrap();
                let (p0, n0) = midpoint_flows(&f, &g).unwrap();
                for (a, b) in p.grid().data().iter().zip(p0.scale(alpha).grid().data()) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
                for (a, b) in n.grid().data().iter().zip(n0.scale(alpha).grid().data()) {
                    prop_assert!((a - b).abs() <= 1e-12 * (1.0 + b.abs()));
                }
            }

            #[test]
            fn flo_roundtrip_is_bit_exact(w in 1usize..6, h in 1usize..6, raw in proptest::collection::vec(-1e4f32..1e4, 72)) {
                let f = FlowField::from_fn(w, h, |x, y| {
                    let i = 2 * (y * w + x);
                    Some((f64::from(raw[i]), f64::from(raw[i + 1])))
                }).unwrap();
                let bytes = encode_flo(&f);
                let back = decode_flo(&bytes).unwrap();
                prop_assert_eq!(&back, &f);
                prop_assert_eq!(encode_flo(&back), bytes);
            }
        }
    }
}

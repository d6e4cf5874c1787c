//! Depth maps, color images and their PNG codecs.
//!
//! Depth follows the KITTI depth-completion convention: a single-channel
//! 16-bit PNG whose stored value is `round(meters * 256)`, with 0 reserved
//! for "no measurement". Color is plain 8-bit RGB scaled to `[0, 1]`.

use std::io::Cursor;

use thiserror::Error;

use crate::grid::{Grid2D, GridError, ValidityMask};

/// Stored units per meter in a depth PNG.
pub const DEPTH_SCALE: f64 = 256.0;

/// Largest depth a 16-bit depth PNG can hold.
pub const MAX_DEPTH: f64 = u16::MAX as f64 / DEPTH_SCALE;

#[derive(Debug, Error)]
pub enum DepthIoError {
    #[error("png decode failed: {0}")]
    Decode(#[from] png::DecodingError),
    #[error("png encode failed: {0}")]
    Encode(#[from] png::EncodingError),
    #[error("expected {expected}, found {found}")]
    Format { expected: &'static str, found: String },
    #[error("depth {depth} m at ({x}, {y}) is outside the codec range (0, {MAX_DEPTH}]")]
    OutOfRange { x: usize, y: usize, depth: f64 },
    #[error("invalid depth {depth} at ({x}, {y}); valid depths must be finite, positive and at most {MAX_DEPTH} m")]
    InvalidDepth { x: usize, y: usize, depth: f64 },
    #[error("color value {value} outside [0, 1]")]
    ColorRange { value: f64 },
    #[error("crop target {target_w}x{target_h} exceeds source {width}x{height}")]
    CropTooLarge {
        width: usize,
        height: usize,
        target_w: usize,
        target_h: usize,
    },
    #[error(transparent)]
    Grid(#[from] GridError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DepthKind {
    Sparse,
    Dense,
}

/// Per-pixel depth in meters with an explicit validity mask.
///
/// Every valid pixel holds a finite depth in `(0, MAX_DEPTH]`. Values under
/// invalid pixels are unspecified and never read by the algorithms.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    grid: Grid2D<f64>,
    mask: ValidityMask,
    kind: DepthKind,
}

impl DepthMap {
    pub fn new(grid: Grid2D<f64>, mask: ValidityMask, kind: DepthKind) -> Result<Self, DepthIoError> {
        if grid.channels() != 1 {
            return Err(GridError::NotSingleChannel(grid.channels()).into());
        }
        if !mask.matches(&grid) {
            return Err(GridError::ShapeMismatch {
                left: grid.shape(),
                right: (mask.width(), mask.height(), 1),
            }
            .into());
        }
        for y in 0..grid.height() {
            for x in 0..grid.width() {
                if mask.get(x, y) {
                    let depth = grid.get(x, y, 0);
                    if !is_valid_depth(depth) {
                        return Err(DepthIoError::InvalidDepth { x, y, depth });
                    }
                }
            }
        }
        Ok(Self { grid, mask, kind })
    }

    /// A map with no valid pixels.
    pub fn empty(width: usize, height: usize, kind: DepthKind) -> Self {
        Self {
            grid: Grid2D::filled(width, height, 1, 0.0),
            mask: ValidityMask::all_invalid(width, height),
            kind,
        }
    }

    /// Builds a map from `f(x, y)`; `None` marks an invalid pixel.
    pub fn from_fn(
        width: usize,
        height: usize,
        kind: DepthKind,
        mut f: impl FnMut(usize, usize) -> Option<f64>,
    ) -> Result<Self, DepthIoError> {
        let mut grid = Grid2D::filled(width, height, 1, 0.0);
        let mut mask = ValidityMask::all_invalid(width, height);
        for y in 0..height {
            for x in 0..width {
                if let Some(depth) = f(x, y) {
                    if !is_valid_depth(depth) {
                        return Err(DepthIoError::InvalidDepth { x, y, depth });
                    }
                    grid.set(x, y, 0, depth);
                    mask.set(x, y, true);
                }
            }
        }
        Ok(Self { grid, mask, kind })
    }

    /// Wraps a raw network prediction. Pixels that are not a usable depth
    /// (non-finite, non-positive or beyond [`MAX_DEPTH`]) become invalid.
    pub fn from_prediction(prediction: &Grid2D<f64>) -> Self {
        assert_eq!(prediction.channels(), 1);
        let mask = ValidityMask::from_fn(prediction.width(), prediction.height(), |x, y| {
            is_valid_depth(prediction.get(x, y, 0))
        });
        let grid = Grid2D::from_fn(prediction.width(), prediction.height(), 1, |x, y, _| {
            if mask.get(x, y) {
                prediction.get(x, y, 0)
            } else {
                0.0
            }
        });
        Self {
            grid,
            mask,
            kind: DepthKind::Dense,
        }
    }

    pub fn width(&self) -> usize {
        self.grid.width()
    }

    pub fn height(&self) -> usize {
        self.grid.height()
    }

    pub fn kind(&self) -> DepthKind {
        self.kind
    }

    pub fn grid(&self) -> &Grid2D<f64> {
        &self.grid
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> Option<f64> {
        if self.mask.get(x, y) {
            Some(self.grid.get(x, y, 0))
        } else {
            None
        }
    }

    pub fn valid_count(&self) -> usize {
        self.mask.count()
    }

    pub fn with_kind(mut self, kind: DepthKind) -> Self {
        self.kind = kind;
        self
    }

    /// Depths with invalid pixels written as 0, the network-input encoding.
    pub fn zero_filled(&self) -> Grid2D<f64> {
        Grid2D::from_fn(self.width(), self.height(), 1, |x, y, _| self.get(x, y).unwrap_or(0.0))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self {
            grid: self.grid.flip_horizontal(),
            mask: self.mask.flip_horizontal(),
            kind: self.kind,
        }
    }
}

fn is_valid_depth(depth: f64) -> bool {
    depth.is_finite() && depth > 0.0 && depth <= MAX_DEPTH
}

/// RGB image with channel values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorImage {
    grid: Grid2D<f64>,
}

impl ColorImage {
    pub fn new(grid: Grid2D<f64>) -> Result<Self, DepthIoError> {
        if grid.channels() != 3 {
            return Err(DepthIoError::Format {
                expected: "3 color channels",
                found: format!("{} channels", grid.channels()),
            });
        }
        if let Some(&value) = grid.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(DepthIoError::ColorRange { value });
        }
        Ok(Self { grid })
    }

    pub fn black(width: usize, height: usize) -> Self {
        Self {
            grid: Grid2D::filled(width, height, 3, 0.0),
        }
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

    pub fn flip_horizontal(&self) -> Self {
        Self {
            grid: self.grid.flip_horizontal(),
        }
    }
}

pub fn decode_depth_png(bytes: &[u8]) -> Result<DepthMap, DepthIoError> {
    let (width, height, samples) = decode_png(bytes, png::ColorType::Grayscale, png::BitDepth::Sixteen)?;
    let mut grid = Grid2D::filled(width, height, 1, 0.0);
    let mut mask = ValidityMask::all_invalid(width, height);
    for (i, pair) in samples.chunks_exact(2).enumerate() {
        let stored = u16::from_be_bytes([pair[0], pair[1]]);
        if stored != 0 {
            let (x, y) = (i % width, i / width);
            grid.set(x, y, 0, f64::from(stored) / DEPTH_SCALE);
            mask.set(x, y, true);
        }
    }
    let kind = if mask.count() == width * height {
        DepthKind::Dense
    } else {
        DepthKind::Sparse
    };
    Ok(DepthMap { grid, mask, kind })
}

/// Stored 16-bit value for a depth in meters.
pub fn depth_to_stored(depth: f64) -> Option<u16> {
    let stored = (depth * DEPTH_SCALE).round();
    if stored >= 1.0 && stored <= f64::from(u16::MAX) {
        Some(stored as u16)
    } else {
        None
    }
}

/// Encodes a depth map; depths that would round to 0 or above `u16::MAX`
/// are rejected so the validity mask survives the round trip.
pub fn encode_depth_png(depth: &DepthMap) -> Result<Vec<u8>, DepthIoError> {
    let (width, height) = (depth.width(), depth.height());
    let mut samples = Vec::with_capacity(width * height * 2);
    for y in 0..height {
        for x in 0..width {
            let stored = match depth.get(x, y) {
                Some(d) => depth_to_stored(d).ok_or(DepthIoError::OutOfRange { x, y, depth: d })?,
                None => 0,
            };
            samples.extend_from_slice(&stored.to_be_bytes());
        }
    }
    encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &samples)
}

pub fn decode_color_png(bytes: &[u8]) -> Result<ColorImage, DepthIoError> {
    let (width, height, samples) = decode_png(bytes, png::ColorType::Rgb, png::BitDepth::Eight)?;
    let data = samples.iter().map(|&s| f64::from(s) / 255.0).collect();
    Ok(ColorImage {
        grid: Grid2D::new(width, height, 3, data)?,
    })
}

pub fn encode_color_png(image: &ColorImage) -> Result<Vec<u8>, DepthIoError> {
    let samples: Vec<u8> = image
        .grid
        .data()
        .iter()
        .map(|&v| (v * 255.0).round() as u8)
        .collect();
    encode_png(image.width(), image.height(), png::ColorType::Rgb, png::BitDepth::Eight, &samples)
}

fn decode_png(
    bytes: &[u8],
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<(usize, usize, Vec<u8>), DepthIoError> {
    let mut decoder = png::Decoder::new(Cursor::new(bytes));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder.read_info()?;
    let info = reader.info();
    if info.color_type != color || info.bit_depth != depth {
        return Err(DepthIoError::Format {
            expected: if color == png::ColorType::Grayscale {
                "16-bit grayscale png"
            } else {
                "8-bit rgb png"
            },
            found: format!("{:?} {:?}", info.color_type, info.bit_depth),
        });
    }
    let (width, height) = (info.width as usize, info.height as usize);
    let mut buf = vec![0; reader.output_buffer_size().unwrap_or(0)];
    let frame = reader.next_frame(&mut buf)?;
    buf.truncate(frame.buffer_size());
    // Rows are tightly packed for these formats.
    Ok((width, height, buf))
}

fn encode_png(
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    samples: &[u8],
) -> Result<Vec<u8>, DepthIoError> {
    let mut out = Vec::new();
    {
        let mut encoder = png::Encoder::new(&mut out, width as u32, height as u32);
        encoder.set_color(color);
        encoder.set_depth(depth);
        let mut writer = encoder.write_header()?;
        writer.write_image_data(samples)?;
        writer.finish()?;
    }
    Ok(out)
}

/// Horizontal placement of a crop window.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CropAnchor {
    /// Centered, rounding the left margin down (KITTI convention).
    #[default]
    Center,
    Left,
    Right,
}

/// Top-left corner of a bottom crop: the last `target_h` rows and, per
/// `anchor`, `target_w` columns.
pub fn bottom_crop_origin(
    width: usize,
    height: usize,
    target_w: usize,
    target_h: usize,
    anchor: CropAnchor,
) -> Result<(usize, usize), DepthIoError> {
    if target_w > width || target_h > height || target_w == 0 || target_h == 0 {
        return Err(DepthIoError::CropTooLarge {
            width,
            height,
            target_w,
            target_h,
        });
    }
    let x0 = match anchor {
        CropAnchor::Center => (width - target_w) / 2,
        CropAnchor::Left => 0,
        CropAnchor::Right => width - target_w,
    };
    Ok((x0, height - target_h))
}

/// Images that can be bottom-cropped to the network input size.
pub trait BottomCrop: Sized {
    fn bottom_crop_anchored(&self, target_w: usize, target_h: usize, anchor: CropAnchor) -> Result<Self, DepthIoError>;

    fn bottom_crop(&self, target_w: usize, target_h: usize) -> Result<Self, DepthIoError> {
        self.bottom_crop_anchored(target_w, target_h, CropAnchor::Center)
    }
}

impl BottomCrop for DepthMap {
    fn bottom_crop_anchored(&self, target_w: usize, target_h: usize, anchor: CropAnchor) -> Result<Self, DepthIoError> {
        let (x0, y0) = bottom_crop_origin(self.width(), self.height(), target_w, target_h, anchor)?;
        Ok(Self {
            grid: self.grid.window(x0, y0, target_w, target_h),
            mask: self.mask.window(x0, y0, target_w, target_h),
            kind: self.kind,
        })
    }
}

impl BottomCrop for ColorImage {
    fn bottom_crop_anchored(&self, target_w: usize, target_h: usize, anchor: CropAnchor) -> Result<Self, DepthIoError> {
        let (x0, y0) = bottom_crop_origin(self.width(), self.height(), target_w, target_h, anchor)?;
        Ok(Self {
            grid: self.grid.window(x0, y0, target_w, target_h),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stored_png(width: usize, height: usize, stored: &[u16]) -> Vec<u8> {
        let samples: Vec<u8> = stored.iter().flat_map(|s| s.to_be_bytes()).collect();
        encode_png(width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &samples).unwrap()
    }

    #[test]
    fn kitti_values_decode() {
        let d = decode_depth_png(&stored_png(3, 1, &[256, 0, 5000])).unwrap();
        assert_eq!(d.get(0, 0), Some(1.0));
        assert_eq!(d.get(1, 0), None);
        assert_eq!(d.get(2, 0), Some(19.53125));
        assert_eq!(d.kind(), DepthKind::Sparse);
    }

    #[test]
    fn kitti_values_encode() {
        assert_eq!(depth_to_stored(1.0), Some(256));
        assert_eq!(depth_to_stored(19.53125), Some(5000));
        let d = DepthMap::from_fn(2, 1, DepthKind::Sparse, |x, _| (x == 0).then_some(19.53125)).unwrap();
        let bytes = encode_depth_png(&d).unwrap();
        let (_, _, samples) = decode_png(&bytes, png::ColorType::Grayscale, png::BitDepth::Sixteen).unwrap();
        assert_eq!(samples, vec![0x13, 0x88, 0, 0]);
    }

    #[test]
    fn codec_range_is_enforced() {
        let tiny = DepthMap::from_fn(1, 1, DepthKind::Dense, |_, _| Some(0.001)).unwrap();
        assert!(matches!(encode_depth_png(&tiny), Err(DepthIoError::OutOfRange { .. })));
        assert!(DepthMap::from_fn(1, 1, DepthKind::Dense, |_, _| Some(300.0)).is_err());
        let top = DepthMap::from_fn(1, 1, DepthKind::Dense, |_, _| Some(MAX_DEPTH)).unwrap();
        let back = decode_depth_png(&encode_depth_png(&top).unwrap()).unwrap();
        assert_eq!(back.get(0, 0), Some(MAX_DEPTH));
    }

    #[test]
    fn rejects_wrong_png_layout() {
        let rgb = encode_color_png(&ColorImage::black(2, 2)).unwrap();
        assert!(matches!(decode_depth_png(&rgb), Err(DepthIoError::Format { .. })));
        assert!(decode_depth_png(b"not a png").is_err());
        let gray16 = stored_png(1, 1, &[1]);
        assert!(matches!(decode_color_png(&gray16), Err(DepthIoError::Format { .. })));
    }

    #[test]
    fn color_scaling() {
        let samples = vec![0u8, 128, 255];
        let bytes = encode_png(1, 1, png::ColorType::Rgb, png::BitDepth::Eight, &samples).unwrap();
        let img = decode_color_png(&bytes).unwrap();
        assert_eq!(img.grid().data(), &[0.0, 128.0 / 255.0, 1.0]);
        assert_eq!(encode_color_png(&img).unwrap(), bytes);
        let black = decode_color_png(&encode_color_png(&ColorImage::black(3, 2)).unwrap()).unwrap();
        assert!(black.grid().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn kitti_crops() {
        assert_eq!(bottom_crop_origin(1242, 375, 1216, 256, CropAnchor::Center).unwrap(), (13, 119));
        assert_eq!(bottom_crop_origin(1226, 370, 1216, 256, CropAnchor::Center).unwrap(), (5, 114));
        assert!(bottom_crop_origin(100, 100, 101, 10, CropAnchor::Center).is_err());
        assert_eq!(bottom_crop_origin(10, 8, 4, 2, CropAnchor::Right).unwrap(), (6, 6));
    }

    #[test]
    fn crop_selects_bottom_center_window() {
        let d = DepthMap::from_fn(6, 4, DepthKind::Dense, |x, y| Some((1 + y * 6 + x) as f64)).unwrap();
        let c = d.bottom_crop(2, 2).unwrap();
        assert_eq!(c.get(0, 0), Some(15.0));
        assert_eq!(c.get(1, 1), Some(22.0));
        assert_eq!(d.bottom_crop(6, 4).unwrap(), d);
        let img = ColorImage::black(6, 4);
        assert_eq!(img.bottom_crop(6, 4).unwrap(), img);
    }

    #[test]
    fn prediction_masks_unusable_depths() {
        let g = Grid2D::new(4, 1, 1, vec![-1.0, 0.0, 2.5, f64::NAN]).unwrap();
        let d = DepthMap::from_prediction(&g);
        assert_eq!(d.mask().bits(), &[false, false, true, false]);
        assert_eq!(d.get(2, 0), Some(2.5));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn depth_roundtrip_within_half_step(w in 1usize..8, h in 1usize..8, seed in proptest::collection::vec((any::<bool>(), 0.01f64..255.0), 64)) {
                let d = DepthMap::from_fn(w, h, DepthKind::Sparse, |x, y| {
                    let (keep, depth) = seed[(y * 8 + x) % 64];
                    keep.then_some(depth)
                }).unwrap();
                let back = decode_depth_png(&encode_depth_png(&d).unwrap()).unwrap();
                prop_assert_eq!(back.mask(), d.mask());
                for y in 0..h {
                    for x in 0..w {
                        if let (Some(a), Some(b)) = (d.get(x, y), back.get(x, y)) {
                            prop_assert!((a - b).abs() <= 0.5 / DEPTH_SCALE);
                        }
                    }
                }
            }

            #[test]
            fn stored_payload_survives(w in 1usize..8, h in 1usize..8, stored in proptest::collection::vec(any::<u16>(), 64)) {
                let payload: Vec<u16> = (0..w * h).map(|i| stored[i % 64]).collect();
                let bytes = stored_png(w, h, &payload);
                let again = encode_depth_png(&decode_depth_png(&bytes).unwrap()).unwrap();
                let (_, _, a) = decode_png(&bytes, png::ColorType::Grayscale, png::BitDepth::Sixteen).unwrap();
                let (_, _, b) = decode_png(&again, png::ColorType::Grayscale, png::BitDepth::Sixteen).unwrap();
                prop_assert_eq!(a, b);
            }
        }
    }
}

//! Pinhole back-projection of depth maps into pseudo-LiDAR point clouds,
//! the inverse projection, PLY export and the intrinsics file format.

use std::fmt::Write as _;

use thiserror::Error;

use crate::depth_io::{DepthKind, DepthMap};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PseudoLidarError {
    #[error("focal lengths must be positive and finite (fu={fu}, fv={fv})")]
    BadFocal { fu: f64, fv: f64 },
    #[error("principal point must be finite")]
    BadPrincipalPoint,
    #[error("intrinsics line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("intrinsics missing key `{0}`")]
    MissingKey(&'static str),
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    fu: f64,
    fv: f64,
    cu: f64,
    cv: f64,
}

impl CameraIntrinsics {
    pub fn new(fu: f64, fv: f64, cu: f64, cv: f64) -> Result<Self, PseudoLidarError> {
        if !(fu.is_finite() && fv.is_finite() && fu > 0.0 && fv > 0.0) {
            return Err(PseudoLidarError::BadFocal { fu, fv });
        }
        if !(cu.is_finite() && cv.is_finite()) {
            return Err(PseudoLidarError::BadPrincipalPoint);
        }
        Ok(Self { fu, fv, cu, cv })
    }

    pub fn fu(&self) -> f64 {
        self.fu
    }

    pub fn fv(&self) -> f64 {
        self.fv
    }

    pub fn cu(&self) -> f64 {
        self.cu
    }

    pub fn cv(&self) -> f64 {
        self.cv
    }

    /// Camera-frame point seen at pixel `(u, v)` with depth `z`.
    #[inline]
    pub fn unproject(&self, u: f64, v: f64, z: f64) -> [f64; 3] {
        [(u - self.cu) * z / self.fu, (v - self.cv) * z / self.fv, z]
    }

    /// Continuous pixel position of a camera-frame point.
    #[inline]
    pub fn project_point(&self, p: [f64; 3]) -> (f64, f64) {
        (p[0] * self.fu / p[2] + self.cu, p[1] * self.fv / p[2] + self.cv)
    }

    /// Same intrinsics after mirroring a `width`-pixel image left to right.
    pub fn flipped_horizontal(&self, width: usize) -> Self {
        Self {
            cu: (width - 1) as f64 - self.cu,
            ..*self
        }
    }
}

/// Points in camera coordinates, in the row-major order of the pixels they
/// came from.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// One point per valid pixel: `z = d(u, v)`, `x = (u - cu) z / fu`,
/// `y = (v - cv) z / fv`.
pub fn back_project(depth: &DepthMap, k: &CameraIntrinsics) -> PointCloud {
    let mut points = Vec::with_capacity(depth.valid_count());
    for v in 0..depth.height() {
        for u in 0..depth.width() {
            if let Some(z) = depth.get(u, v) {
                points.push(k.unproject(u as f64, v as f64, z));
            }
        }
    }
    PointCloud { points }
}

/// Rasterizes a cloud into a `width x height` depth map, rounding to the
/// nearest pixel and keeping the nearest point when several land on one
/// pixel. Points behind the camera or outside the image are dropped.
pub fn project(cloud: &PointCloud, k: &CameraIntrinsics, width: usize, height: usize) -> DepthMap {
    let mut nearest: Vec<Option<f64>> = vec![None; width * height];
    for &p in &cloud.points {
        let z = p[2];
        if !(z > 0.0 && z.is_finite()) {
            continue;
        }
        let (u, v) = k.project_point(p);
        let (u, v) = (u.round(), v.round());
        if !(u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64) {
            continue;
        }
        let slot = &mut nearest[v as usize * width + u as usize];
        if slot.is_none_or(|held| z < held) {
            *slot = Some(z);
        }
    }
    DepthMap::from_fn(width, height, DepthKind::Sparse, |x, y| nearest[y * width + x])
        .expect("projected depths come from valid points")
}

/// Formats like C's `%g`: six significant digits, trailing zeros removed.
fn format_g(value: f32) -> String {
    let v = f64::from(value);
    if v == 0.0 {
        return "0".to_owned();
    }
    if !v.is_finite() {
        return if v.is_nan() { "nan".into() } else if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let sci = format!("{:.5e}", v);
    let (mantissa, exp) = sci.split_once('e').expect("scientific format");
    let exp: i32 = exp.parse().expect("exponent");
    if !(-4..6).contains(&exp) {
        let mantissa = trim_fraction(mantissa);
        let sign = if exp < 0 { '-' } else { '+' };
        return format!("{mantissa}e{sign}{:02}", exp.abs());
    }
    let decimals = (5 - exp) as usize;
    trim_fraction(&format!("{:.*}", decimals, v)).to_owned()
}

fn trim_fraction(s: &str) -> &str {
    if s.contains('.') {
        s.trim_end_matches('0').trim_end_matches('.')
    } else {
        s
    }
}

/// ASCII PLY with `float` x/y/z properties, one vertex per line.
pub fn write_ply(cloud: &PointCloud) -> Vec<u8> {
    let mut out = String::with_capacity(128 + cloud.len() * 24);
    out.push_str("ply\nformat ascii 1.0\n");
    let _ = writeln!(out, "element vertex {}", cloud.len());
    out.push_str("property float x\nproperty float y\nproperty float z\nend_header\n");
    for p in &cloud.points {
        let _ = writeln!(
            out,
            "{} {} {}",
            format_g(p[0] as f32),
            format_g(p[1] as f32),
            format_g(p[2] as f32)
        );
    }
    out.into_bytes()
}

/// Parses `key=value` lines with keys `fu`, `fv`, `cu`, `cv`. Blank lines
/// and `#` comments are skipped; a repeated key keeps its last value.
pub fn read_intrinsics(text: &str) -> Result<CameraIntrinsics, PseudoLidarError> {
    let mut values: [Option<f64>; 4] = [None; 4];
    const KEYS: [&str; 4] = ["fu", "fv", "cu", "cv"];
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parse_err = |message: String| PseudoLidarError::Parse { line: i + 1, message };
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| parse_err(format!("expected key=value, got `{line}`")))?;
        let key = key.trim();
        let slot = KEYS
            .iter()
            .position(|k| *k == key)
            .ok_or_else(|| parse_err(format!("unknown key `{key}`")))?;
        let value: f64 = value
            .trim()
            .parse()
            .map_err(|_| parse_err(format!("bad number `{}`", value.trim())))?;
        values[slot] = Some(value);
    }
    let get = |i: usize| values[i].ok_or(PseudoLidarError::MissingKey(KEYS[i]));
    CameraIntrinsics::new(get(0)?, get(1)?, get(2)?, get(3)?)
}

/// Inverse of [`read_intrinsics`]; values use Rust's shortest round-trip
/// formatting.
pub fn write_intrinsics(k: &CameraIntrinsics) -> String {
    format!("fu={}\nfv={}\ncu={}\ncv={}\n", k.fu, k.fv, k.cu, k.cv)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn k100() -> CameraIntrinsics {
        CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0).unwrap()
    }

    #[test]
    fn principal_point_maps_to_axis() {
        let d = DepthMap::from_fn(101, 101, DepthKind::Sparse, |x, y| (x == 50 && y == 50).then_some(2.0)).unwrap();
        assert_eq!(back_project(&d, &k100()).points, vec![[0.0, 0.0, 2.0]]);
    }

    #[test]
    fn off_axis_hand_case() {
        let d = DepthMap::from_fn(101, 101, DepthKind::Sparse, |x, y| (x == 60 && y == 50).then_some(2.0)).unwrap();
        let p = back_project(&d, &k100()).points[0];
        assert!((p[0] - 0.2).abs() < 1e-15);
        assert_eq!(p[1], 0.0);
        assert_eq!(p[2], 2.0);
    }

    #[test]
    fn empty_cases() {
        let d = DepthMap::empty(4, 4, DepthKind::Sparse);
        assert!(back_project(&d, &k100()).is_empty());
        assert_eq!(project(&PointCloud::default(), &k100(), 4, 4).valid_count(), 0);
    }

    #[test]
    fn z_buffer_keeps_nearest() {
        let k = k100();
        let cloud = PointCloud {
            points: vec![k.unproject(3.0, 2.0, 5.0), k.unproject(3.0, 2.0, 3.0), [0.0, 0.0, -1.0]],
        };
        let d = project(&cloud, &k, 8, 8);
        assert_eq!(d.get(3, 2), Some(3.0));
        assert_eq!(d.valid_count(), 1);
    }

    #[test]
    fn ply_layout() {
        let empty = String::from_utf8(write_ply(&PointCloud::default())).unwrap();
        assert!(empty.contains("element vertex 0\n"));
        assert!(empty.ends_with("end_header\n"));
        let one = String::from_utf8(write_ply(&PointCloud { points: vec![[0.0, 0.0, 2.0]] })).unwrap();
        assert!(one.ends_with("end_header\n0 0 2\n"));
    }

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_g(0.2), "0.2");
        assert_eq!(format_g(-1.5), "-1.5");
        assert_eq!(format_g(123456.7), "123457");
        assert_eq!(format_g(1234567.0), "1.23457e+06");
        assert_eq!(format_g(0.0001234567), "0.000123457");
        assert_eq!(format_g(0.00001), "1e-05");
        assert_eq!(format_g(-0.0), "0");
        assert_eq!(format_g(99999.95), "100000");
    }

    #[test]
    fn intrinsics_parsing() {
        let k = read_intrinsics("fu=721.5377\nfv=721.5377\ncu=609.5593\ncv=172.854\n").unwrap();
        assert_eq!(k.fu(), 721.5377);
        assert_eq!(k.cv(), 172.854);
        assert_eq!(read_intrinsics(&write_intrinsics(&k)).unwrap(), k);
        assert_eq!(read_intrinsics(""), Err(PseudoLidarError::MissingKey("fu")));
        let dup = read_intrinsics("fu=1\nfu=2\nfv=3\ncu=0\n# c\n\ncv=0").unwrap();
        assert_eq!(dup.fu(), 2.0);
        assert_eq!(read_intrinsics("fu=1\nfv=1\ncu=0"), Err(PseudoLidarError::MissingKey("cv")));
        assert!(matches!(read_intrinsics("fu 1"), Err(PseudoLidarError::Parse { line: 1, .. })));
        assert!(matches!(read_intrinsics("fu=1\nfx=2"), Err(PseudoLidarError::Parse { line: 2, .. })));
        assert!(read_intrinsics("fu=0\nfv=1\ncu=0\ncv=0").is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn setup() -> impl Strategy<Value = (DepthMap, CameraIntrinsics)> {
            (
                proptest::collection::vec(proptest::option::of(0.1f64..200.0), 9 * 7),
                50.0f64..1000.0,
                50.0f64..1000.0,
                -5.0f64..15.0,
                -5.0f64..12.0,
            )
                .prop_map(|(v, fu, fv, cu, cv)| {
                    (
                        DepthMap::from_fn(9, 7, DepthKind::Sparse, |x, y| v[y * 9 + x]).unwrap(),
                        CameraIntrinsics::new(fu, fv, cu, cv).unwrap(),
                    )
                })
        }

        proptest! {
            #[test]
            fn project_inverts_back_project((d, k) in setup()) {
                let cloud = back_project(&d, &k);
                prop_assert_eq!(cloud.len(), d.valid_count());
                let again = project(&cloud, &k, d.width(), d.height());
                prop_assert_eq!(again.mask(), d.mask());
                for y in 0..d.height() {
                    for x in 0..d.width() {
                        if let (Some(a), Some(b)) = (d.get(x, y), again.get(x, y)) {
                            prop_assert!((a - b).abs() <= 1e-12);
                        }
                    }
                }
            }

            #[test]
            fn depth_scaling_scales_points((d, k) in setup(), alpha in 0.1f64..1.2) {
                let scaled = DepthMap::from_fn(d.width(), d.height(), DepthKind::Sparse, |x, y| d.get(x, y).map(|z| z * alpha)).unwrap();
                let a = back_project(&d, &k);
                let b = back_project(&scaled, &k);
                for (p, q) in a.points.iter().zip(&b.points) {
                    for i in 0..3 {
                        prop_assert!((p[i] * alpha - q[i]).abs() <= 1e-9 * (1.0 + q[i].abs()));
                    }
                }
            }
        }
    }
}

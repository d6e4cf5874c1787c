//! On-disk interpolation samples and their manifest.
//!
//! A dataset directory holds `intrinsics.txt`, `manifest.txt` and one
//! subdirectory per sample. Each manifest line lists six paths relative to
//! the manifest, separated by whitespace:
//!
//! ```text
//! d_prev.png d_next.png flow_fwd.flo flow_bwd.flo color_t.png gt_dense.png
//! ```
//!
//! Blank lines and lines starting with `#` are ignored.

use std::fs;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::depth_io::{decode_color_png, decode_depth_png, encode_color_png, encode_depth_png, ColorImage, DepthIoError, DepthKind, DepthMap};
use crate::flow::{decode_flo, encode_flo, midpoint_flows, FlowError, FlowField};
use crate::nn::{Tensor, TrainingSample};
use crate::pseudo_lidar::{write_intrinsics, CameraIntrinsics};
use crate::synth::SynthSample;
use crate::warp::{assemble_motion_input, WarpError, WarpedPair};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const INTRINSICS_FILE: &str = "intrinsics.txt";

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{path}: {source}")]
    Depth { path: PathBuf, source: DepthIoError },
    #[error("{path}: {source}")]
    Flow { path: PathBuf, source: FlowError },
    #[error("manifest line {line}: expected 6 paths, found {found}")]
    Manifest { line: usize, found: usize },
    #[error("sample shapes disagree: {0}")]
    Shape(String),
    #[error(transparent)]
    Warp(#[from] WarpError),
}

fn read(path: &Path) -> Result<Vec<u8>, DatasetError> {
    fs::read(path).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), DatasetError> {
    fs::write(path, bytes).map_err(|source| DatasetError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_depth(path: &Path) -> Result<DepthMap, DatasetError> {
    decode_depth_png(&read(path)?).map_err(|source| DatasetError::Depth {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_color(path: &Path) -> Result<ColorImage, DatasetError> {
    decode_color_png(&read(path)?).map_err(|source| DatasetError::Depth {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_flow(path: &Path) -> Result<FlowField, DatasetError> {
    decode_flo(&read(path)?).map_err(|source| DatasetError::Flow {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_depth(path: &Path, depth: &DepthMap) -> Result<(), DatasetError> {
    let bytes = encode_depth_png(depth).map_err(|source| DatasetError::Depth {
        path: path.to_path_buf(),
        source,
    })?;
    write(path, &bytes)
}

pub fn save_color(path: &Path, color: &ColorImage) -> Result<(), DatasetError> {
    let bytes = encode_color_png(color).map_err(|source| DatasetError::Depth {
        path: path.to_path_buf(),
        source,
    })?;
    write(path, &bytes)
}

pub fn save_flow(path: &Path, flow: &FlowField) -> Result<(), DatasetError> {
    write(path, &encode_flo(flow))
}

/// Paths of one sample's files.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleFiles {
    pub d_prev: PathBuf,
    pub d_next: PathBuf,
    pub flow_fwd: PathBuf,
    pub flow_bwd: PathBuf,
    pub color: PathBuf,
    pub gt: PathBuf,
}

impl SampleFiles {
    const NAMES: [&'static str; 6] = ["d_prev.png", "d_next.png", "flow_fwd.flo", "flow_bwd.flo", "color_t.png", "gt_dense.png"];

    fn in_dir(dir: &Path) -> Self {
        let p = |i: usize| dir.join(Self::NAMES[i]);
        Self {
            d_prev: p(0),
            d_next: p(1),
            flow_fwd: p(2),
            flow_bwd: p(3),
            color: p(4),
            gt: p(5),
        }
    }

    pub fn load(&self) -> Result<SynthSample, DatasetError> {
        let sample = SynthSample {
            d_prev: load_depth(&self.d_prev)?.with_kind(DepthKind::Sparse),
            d_next: load_depth(&self.d_next)?.with_kind(DepthKind::Sparse),
            flow_fwd: load_flow(&self.flow_fwd)?,
            flow_bwd: load_flow(&self.flow_bwd)?,
            color: load_color(&self.color)?,
            gt: load_depth(&self.gt)?.with_kind(DepthKind::Dense),
        };
        check_sample(&sample)?;
        Ok(sample)
    }
}

fn check_sample(s: &SynthSample) -> Result<(), DatasetError> {
    let dims = (s.d_prev.width(), s.d_prev.height());
    let all = [
        ("d_next", (s.d_next.width(), s.d_next.height())),
        ("flow_fwd", (s.flow_fwd.width(), s.flow_fwd.height())),
        ("flow_bwd", (s.flow_bwd.width(), s.flow_bwd.height())),
        ("color", (s.color.width(), s.color.height())),
        ("gt", (s.gt.width(), s.gt.height())),
    ];
    for (name, d) in all {
        if d != dims {
            return Err(DatasetError::Shape(format!("d_prev is {dims:?}, {name} is {d:?}")));
        }
    }
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Vec<SampleFiles>, DatasetError> {
    let text = String::from_utf8_lossy(&read(path)?).into_owned();
    let base = path.parent().unwrap_or(Path::new("."));
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        if parts.len() != 6 {
            return Err(DatasetError::Manifest {
                line: i + 1,
                found: parts.len(),
            });
        }
        let p = |j: usize| base.join(parts[j]);
        out.push(SampleFiles {
            d_prev: p(0),
            d_next: p(1),
            flow_fwd: p(2),
            flow_bwd: p(3),
            color: p(4),
            gt: p(5),
        });
    }
    Ok(out)
}

/// Writes samples, the manifest and the intrinsics into `dir`. Returns the
/// manifest path.
pub fn write_dataset(dir: &Path, samples: &[SynthSample], k: &CameraIntrinsics) -> Result<PathBuf, DatasetError> {
    let mkdir = |p: &Path| {
        fs::create_dir_all(p).map_err(|source| DatasetError::Io {
            path: p.to_path_buf(),
            source,
        })
    };
    mkdir(dir)?;
    write(&dir.join(INTRINSICS_FILE), write_intrinsics(k).as_bytes())?;
    let mut manifest = String::new();
    for (i, s) in samples.iter().enumerate() {
        let name = format!("{i:05}");
        let sub = dir.join(&name);
        mkdir(&sub)?;
        let files = SampleFiles::in_dir(&sub);
        save_depth(&files.d_prev, &s.d_prev)?;
        save_depth(&files.d_next, &s.d_next)?;
        save_flow(&files.flow_fwd, &s.flow_fwd)?;
        save_flow(&files.flow_bwd, &s.flow_bwd)?;
        save_color(&files.color, &s.color)?;
        save_depth(&files.gt, &s.gt)?;
        let line: Vec<String> = SampleFiles::NAMES.iter().map(|n| format!("{name}/{n}")).collect();
        manifest.push_str(&line.join(" "));
        manifest.push('\n');
    }
    let path = dir.join(MANIFEST_FILE);
    write(&path, manifest.as_bytes())?;
    Ok(path)
}

/// Midpoint flows, warped neighbors and the eight-channel network input.
#[derive(Debug, Clone)]
pub struct MotionInput {
    pub to_prev: FlowField,
    pub to_next: FlowField,
    pub warped: WarpedPair,
    pub stack: Tensor<f32>,
}

impl SynthSample {
    pub fn motion_input(&self, gamma: f64) -> Result<MotionInput, DatasetError> {
        check_sample(self)?;
        let (to_prev, to_next) = midpoint_flows(&self.flow_fwd, &self.flow_bwd).map_err(|e| DatasetError::Shape(e.to_string()))?;
        let warped = WarpedPair::compute(&self.d_prev, &self.d_next, &to_prev, &to_next, gamma)?;
        let stack = assemble_motion_input(&self.d_prev, &self.d_next, &to_prev, &to_next, &warped)?;
        Ok(MotionInput {
            to_prev,
            to_next,
            warped,
            stack,
        })
    }

    pub fn training_sample(&self, gamma: f64) -> Result<TrainingSample, DatasetError> {
        let input = self.motion_input(gamma)?;
        TrainingSample::new(input.stack, crate::nn::model::color_tensor(&self.color), &self.gt).map_err(DatasetError::Shape)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_sample, RandomSceneConfig};

    #[test]
    fn dataset_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let config = RandomSceneConfig {
            max_depth_speed: 0.3,
            dropout: 0.1,
            ..RandomSceneConfig::default()
        };
        let specs: Vec<_> = (0..3).map(|s| config.sample(s).unwrap()).collect();
        let samples: Vec<_> = specs.iter().map(|s| make_sample(s).unwrap().0).collect();
        let k = specs[0].camera.intrinsics().unwrap();
        let manifest = write_dataset(dir.path(), &samples, &k).unwrap();
        let files = read_manifest(&manifest).unwrap();
        assert_eq!(files.len(), 3);
        for (f, s) in files.iter().zip(&samples) {
            let r = f.load().unwrap();
            assert_eq!(r.d_prev, s.d_prev);
            assert_eq!(r.d_next, s.d_next);
            assert_eq!(r.flow_fwd, s.flow_fwd);
            assert_eq!(r.flow_bwd, s.flow_bwd);
            assert_eq!(r.color, s.color);
            assert_eq!(r.gt, s.gt);
        }
    }

    #[test]
    fn empty_dataset_has_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let k = CameraIntrinsics::new(1.0, 1.0, 0.0, 0.0).unwrap();
        let manifest = write_dataset(dir.path(), &[], &k).unwrap();
        assert!(read_manifest(&manifest).unwrap().is_empty());
        assert_eq!(fs::read_to_string(manifest).unwrap(), "");
    }

    #[test]
    fn malformed_manifest_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.txt");
        fs::write(&path, "# header\n\na b c\n").unwrap();
        assert!(matches!(read_manifest(&path), Err(DatasetError::Manifest { line: 3, found: 3 })));
    }

    #[test]
    fn training_sample_shapes() {
        let spec = RandomSceneConfig::default().sample(4).unwrap();
        let (s, _, _) = make_sample(&spec).unwrap();
        let t = s.training_sample(0.5).unwrap();
        assert_eq!(t.stack.shape(), [8, 64, 64]);
        assert_eq!(t.color.shape(), [3, 64, 64]);
        assert_eq!(t.gt_mask.iter().filter(|&&m| m).count(), s.gt.valid_count());
    }
}

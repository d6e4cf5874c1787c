//! Synthetic scenes of moving fronto-parallel rectangles with exact depth,
//! flow and color for three consecutive frames.
//!
//! Each object is a camera-facing rectangle described by its image extent
//! and depth at the intermediate frame and a constant 3D velocity. Frame
//! offsets are -1 (previous), 0 (intermediate) and +1 (next). Pixel centers
//! sit at integer coordinates and a pixel belongs to an object when its
//! center lies in the half-open projected extent.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::depth_io::{ColorImage, DepthKind, DepthMap, DEPTH_SCALE, MAX_DEPTH};
use crate::flow::FlowField;
use crate::grid::Grid2D;
use crate::pseudo_lidar::CameraIntrinsics;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SynthError {
    #[error("object {index}: {message}")]
    Object { index: usize, message: String },
    #[error("invalid scene: {0}")]
    Scene(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraSpec {
    pub fu: f64,
    pub fv: f64,
    pub cu: f64,
    pub cv: f64,
}

impl CameraSpec {
    pub fn intrinsics(&self) -> Result<CameraIntrinsics, SynthError> {
        CameraIntrinsics::new(self.fu, self.fv, self.cu, self.cv).map_err(|e| SynthError::Scene(e.to_string()))
    }

    /// Focal length equal to the image width, principal point at the center.
    pub fn centered(width: usize, height: usize) -> Self {
        Self {
            fu: width as f64,
            fv: width as f64,
            cu: width as f64 / 2.0,
            cv: height as f64 / 2.0,
        }
    }
}

/// A camera-facing rectangle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneObject {
    /// Depth at the intermediate frame, meters.
    pub depth: f64,
    /// `[u0, v0, u1, v1]` at the intermediate frame, pixels. Half-integer
    /// edges avoid ties with pixel centers.
    pub extent: [f64; 4],
    /// Displacement per frame in camera coordinates, meters.
    #[serde(default)]
    pub velocity: [f64; 3],
    /// Linear RGB in [0, 1].
    #[serde(default = "default_albedo")]
    pub albedo: [f64; 3],
    /// Checkerboard cell size in pixels at the intermediate frame; 0 for a
    /// flat color.
    #[serde(default)]
    pub texture: f64,
}

fn default_albedo() -> [f64; 3] {
    [0.8, 0.8, 0.8]
}

fn default_scanline_step() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub camera: CameraSpec,
    /// Later objects are drawn behind earlier ones at equal depth.
    pub objects: Vec<SceneObject>,
    /// Rows `y` with `y % scanline_step == 0` carry LiDAR returns.
    #[serde(default = "default_scanline_step")]
    pub scanline_step: usize,
    /// Probability of dropping a return on a scanline row.
    #[serde(default)]
    pub dropout: f64,
    #[serde(default)]
    pub seed: u64,
}

/// Frame offset relative to the intermediate frame.
pub const FRAMES: [i32; 3] = [-1, 0, 1];

impl SceneSpec {
    pub fn validate(&self) -> Result<CameraIntrinsics, SynthError> {
        if self.width == 0 || self.height == 0 {
            return Err(SynthError::Scene("image size must be positive".into()));
        }
        if self.scanline_step == 0 {
            return Err(SynthError::Scene("scanline_step must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(SynthError::Scene("dropout must lie in [0, 1)".into()));
        }
        let k = self.camera.intrinsics()?;
        for (index, o) in self.objects.iter().enumerate() {
            let bad = |message: String| Err(SynthError::Object { index, message });
            let [u0, v0, u1, v1] = o.extent;
            if !(u0 < u1 && v0 < v1) || o.extent.iter().any(|v| !v.is_finite()) {
                return bad(format!("empty extent {:?}", o.extent));
            }
            for t in FRAMES {
                let z = o.depth_at(t);
                if !(z > 0.0 && z <= MAX_DEPTH) {
                    return bad(format!("depth {z} at frame {t:+} outside (0, {MAX_DEPTH}]"));
                }
            }
            if o.albedo.iter().any(|c| !(0.0..=1.0).contains(c)) {
                return bad("albedo outside [0, 1]".into());
            }
            if !(o.texture >= 0.0) {
                return bad("texture must be non-negative".into());
            }
        }
        Ok(k)
    }
}

impl SceneObject {
    pub fn depth_at(&self, t: i32) -> f64 {
        self.depth + f64::from(t) * self.velocity[2]
    }

    /// Projected `[u0, v0, u1, v1]` at frame `t`.
    fn extent_at(&self, k: &CameraIntrinsics, t: i32) -> [f64; 4] {
        if t == 0 {
            return self.extent;
        }
        let [u0, v0, u1, v1] = self.extent;
        let z = self.depth_at(t);
        let shift = |p: [f64; 3]| {
            let q = [
                p[0] + f64::from(t) * self.velocity[0],
                p[1] + f64::from(t) * self.velocity[1],
                z,
            ];
            k.project_point(q)
        };
        let (a0, b0) = shift(k.unproject(u0, v0, self.depth));
        let (a1, b1) = shift(k.unproject(u1, v1, self.depth));
        [a0, b0, a1, b1]
    }
}

/// Everything rendered for one scene.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedScene {
    /// Dense depth at frames -1, 0, +1.
    pub dense: [DepthMap; 3],
    /// Scanline-sampled depth at frames -1, 0, +1.
    pub sparse: [DepthMap; 3],
    pub color: [ColorImage; 3],
    /// Front-most object per pixel at frames -1, 0, +1.
    pub ids: [Vec<Option<usize>>; 3],
}

/// Flow fields between the three frames. Pixels whose surface is hidden
/// or gone in the target frame are invalid.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneFlows {
    /// Previous to next frame.
    pub forward: FlowField,
    /// Next to previous frame.
    pub backward: FlowField,
    /// Intermediate to previous frame.
    pub to_prev: FlowField,
    /// Intermediate to next frame.
    pub to_next: FlowField,
}

fn quantize_depth(z: f64) -> f64 {
    (z * DEPTH_SCALE).round() / DEPTH_SCALE
}

fn quantize_color(c: f64) -> f64 {
    (c.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

fn frame_index(t: i32) -> usize {
    (t + 1) as usize
}

/// Front-most object at each pixel of frame `t`.
fn object_ids(spec: &SceneSpec, k: &CameraIntrinsics, t: i32) -> Vec<Option<usize>> {
    let (w, h) = (spec.width, spec.height);
    let mut ids = vec![None; w * h];
    let mut best = vec![f64::INFINITY; w * h];
    for (i, o) in spec.objects.iter().enumerate() {
        let [u0, v0, u1, v1] = o.extent_at(k, t);
        let z = o.depth_at(t);
        let x0 = u0.ceil().max(0.0) as usize;
        let y0 = v0.ceil().max(0.0) as usize;
        for y in y0..h {
            let yf = y as f64;
            if yf >= v1 {
                break;
            }
            if yf < v0 {
                continue;
            }
            for x in x0..w {
                let xf = x as f64;
                if xf >= u1 {
                    break;
                }
                if xf < u0 {
                    continue;
                }
                if z < best[y * w + x] {
                    best[y * w + x] = z;
                    ids[y * w + x] = Some(i);
                }
            }
        }
    }
    ids
}

/// Renders all three frames.
pub fn render(spec: &SceneSpec) -> Result<RenderedScene, SynthError> {
    let k = spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let ids = FRAMES.map(|t| object_ids(spec, &k, t));
    let dense = FRAMES.map(|t| {
        let ids = &ids[frame_index(t)];
        DepthMap::from_fn(w, h, DepthKind::Dense, |x, y| {
            ids[y * w + x].map(|i| quantize_depth(spec.objects[i].depth_at(t)))
        })
        .expect("validated depths")
    });
    let sparse = FRAMES.map(|t| {
        let d = &dense[frame_index(t)];
        DepthMap::from_fn(w, h, DepthKind::Sparse, |x, y| {
            let keep = y % spec.scanline_step == 0 && (spec.dropout == 0.0 || !rng.gen_bool(spec.dropout));
            if keep {
                d.get(x, y)
            } else {
                None
            }
        })
        .expect("subset of valid depths")
    });
    let color = FRAMES.map(|t| {
        let ids = &ids[frame_index(t)];
        let grid = Grid2D::from_fn(w, h, 3, |x, y, c| match ids[y * w + x] {
            None => 0.0,
            Some(i) => {
                let o = &spec.objects[i];
                quantize_color(o.albedo[c] * texture(o, &k, t, x, y))
            }
        });
        ColorImage::new(grid).expect("quantized colors lie in [0, 1]")
    });
    Ok(RenderedScene {
        dense,
        sparse,
        color,
        ids,
    })
}

/// Checkerboard attached to the object surface.
fn texture(o: &SceneObject, k: &CameraIntrinsics, t: i32, x: usize, y: usize) -> f64 {
    if o.texture <= 0.0 {
        return 1.0;
    }
    let [u0, v0, _, _] = o.extent_at(k, t);
    // Image distances shrink with depth; rescale to intermediate-frame pixels.
    let s = o.depth_at(t) / o.depth;
    let cu = ((x as f64 - u0) * s / o.texture).floor() as i64;
    let cv = ((y as f64 - v0) * s / o.texture).floor() as i64;
    if (cu + cv).rem_euclid(2) == 0 {
        1.0
    } else {
        0.6
    }
}

/// Flow from frame `from` to frame `to`, anchored at pixels of `from`.
fn flow_between(spec: &SceneSpec, k: &CameraIntrinsics, scene: &RenderedScene, from: i32, to: i32) -> FlowField {
    let (w, h) = (spec.width, spec.height);
    let ids_from = &scene.ids[frame_index(from)];
    let ids_to = &scene.ids[frame_index(to)];
    let dt = f64::from(to - from);
    FlowField::from_fn(w, h, |x, y| {
        let i = ids_from[y * w + x]?;
        let o = &spec.objects[i];
        let p = k.unproject(x as f64, y as f64, o.depth_at(from));
        let z = o.depth_at(to);
        let (u, v) = k.project_point([p[0] + dt * o.velocity[0], p[1] + dt * o.velocity[1], z]);
        let (xr, yr) = (u.round(), v.round());
        if xr >= 0.0 && yr >= 0.0 && (xr as usize) < w && (yr as usize) < h && ids_to[yr as usize * w + xr as usize] != Some(i) {
            return None;
        }
        // Stored as f32 in .flo files.
        Some((f64::from((u - x as f64) as f32), f64::from((v - y as f64) as f32)))
    })
    .expect("finite flows")
}

pub fn exact_flows(spec: &SceneSpec, scene: &RenderedScene) -> Result<SceneFlows, SynthError> {
    let k = spec.validate()?;
    Ok(SceneFlows {
        forward: flow_between(spec, &k, scene, -1, 1),
        backward: flow_between(spec, &k, scene, 1, -1),
        to_prev: flow_between(spec, &k, scene, 0, -1),
        to_next: flow_between(spec, &k, scene, 0, 1),
    })
}

/// Parameters for randomly drawn scenes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RandomSceneConfig {
    pub width: usize,
    pub height: usize,
    pub camera: Option<CameraSpec>,
    /// Inclusive range of foreground object counts.
    pub objects: [usize; 2],
    /// Foreground depth range at the intermediate frame, meters.
    pub depth: [f64; 2],
    /// Foreground size range, pixels.
    pub size: [f64; 2],
    /// Maximum image-plane speed, pixels per frame.
    pub max_shift: f64,
    /// Maximum speed along the optical axis, meters per frame.
    pub max_depth_speed: f64,
    /// Static plane covering the whole image, if any.
    pub background_depth: Option<f64>,
    /// Integer pixel shifts and integer depths, so that warping with the
    /// exact flows reproduces depth without interpolation error.
    pub exact_shifts: bool,
    pub scanline_step: usize,
    pub dropout: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            camera: None,
            objects: [1, 3],
            depth: [5.0, 30.0],
            size: [10.0, 28.0],
            max_shift: 4.0,
            max_depth_speed: 0.0,
            background_depth: Some(60.0),
            exact_shifts: false,
            scanline_step: 4,
            dropout: 0.0,
        }
    }
}

impl RandomSceneConfig {
    pub fn camera(&self) -> CameraSpec {
        self.camera.unwrap_or_else(|| CameraSpec::centered(self.width, self.height))
    }

    /// Draws one scene. The same `seed` always gives the same scene.
    pub fn sample(&self, seed: u64) -> Result<SceneSpec, SynthError> {
        if self.objects[0] > self.objects[1] || !(self.depth[0] > 0.0 && self.depth[0] <= self.depth[1]) || !(self.size[0] >= 1.0 && self.size[0] <= self.size[1]) {
            return Err(SynthError::Scene("random scene ranges must be ordered and positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let camera = self.camera();
        let mut objects = Vec::new();
        let n = rng.gen_range(self.objects[0]..=self.objects[1]);
        let (w, h) = (self.width as f64, self.height as f64);
        for _ in 0..n {
            let (depth, velocity) = if self.exact_shifts {
                let z = rng.gen_range(self.depth[0].ceil() as i64..=self.depth[1].floor().max(self.depth[0].ceil()) as i64) as f64;
                let max = self.max_shift.floor() as i64;
                let su = rng.gen_range(-max..=max) as f64;
                let sv = rng.gen_range(-max / 2..=max / 2) as f64;
                (z, [su * z / camera.fu, sv * z / camera.fv, 0.0])
            } else {
                let z = quantize_depth(rng.gen_range(self.depth[0]..=self.depth[1]));
                let su = rng.gen_range(-self.max_shift..=self.max_shift);
                let sv = rng.gen_range(-self.max_shift..=self.max_shift) / 2.0;
                let vz = if self.max_depth_speed > 0.0 {
                    quantize_depth(rng.gen_range(-self.max_depth_speed..=self.max_depth_speed))
                } else {
                    0.0
                };
                (z, [su * z / camera.fu, sv * z / camera.fv, vz])
            };
            let bw = rng.gen_range(self.size[0]..=self.size[1]).round();
            let bh = rng.gen_range(self.size[0]..=self.size[1]).round();
            let u0 = rng.gen_range(0.0..(w - bw).max(1.0)).floor() - 0.5;
            let v0 = rng.gen_range(0.0..(h - bh).max(1.0)).floor() - 0.5;
            objects.push(SceneObject {
                depth,
                extent: [u0, v0, u0 + bw, v0 + bh],
                velocity,
                albedo: [rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0), rng.gen_range(0.2..1.0)],
                texture: if rng.gen_bool(0.5) { rng.gen_range(2..6) as f64 } else { 0.0 },
            });
        }
        if let Some(depth) = self.background_depth {
            objects.push(SceneObject {
                depth,
                extent: [-0.5, -0.5, w - 0.5, h - 0.5],
                velocity: [0.0; 3],
                albedo: [0.3, 0.35, 0.4],
                texture: 8.0,
            });
        }
        let spec = SceneSpec {
            width: self.width,
            height: self.height,
            camera,
            objects,
            scanline_step: self.scanline_step,
            dropout: self.dropout,
            seed,
        };
        spec.validate()?;
        Ok(spec)
    }
}

/// Description of a synthetic dataset: explicit scenes followed by
/// `count` random ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct SynthConfig {
    pub seed: u64,
    pub count: usize,
    pub random: RandomSceneConfig,
    #[serde(rename = "scene")]
    pub scenes: Vec<SceneSpec>,
}

impl SynthConfig {
    pub fn from_toml(text: &str) -> Result<Self, SynthError> {
        toml::from_str(text).map_err(|e| SynthError::Scene(e.to_string()))
    }

    /// All scenes, explicit ones first. Random scene `i` uses seed
    /// `seed + i`.
    pub fn scenes(&self) -> Result<Vec<SceneSpec>, SynthError> {
        let mut out = self.scenes.clone();
        for i in 0..self.count {
            out.push(self.random.sample(self.seed.wrapping_add(i as u64))?);
        }
        for s in &out {
            s.validate()?;
        }
        Ok(out)
    }
}

/// One interpolation problem with its exact answer.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSample {
    pub d_prev: DepthMap,
    pub d_next: DepthMap,
    pub flow_fwd: FlowField,
    pub flow_bwd: FlowField,
    pub color: ColorImage,
    pub gt: DepthMap,
}

pub fn make_sample(spec: &SceneSpec) -> Result<(SynthSample, RenderedScene, SceneFlows), SynthError> {
    let scene = render(spec)?;
    let flows = exact_flows(spec, &scene)?;
    let sample = SynthSample {
        d_prev: scene.sparse[0].clone(),
        d_next: scene.sparse[2].clone(),
        flow_fwd: flows.forward.clone(),
        flow_bwd: flows.backward.clone(),
        color: scene.color[1].clone(),
        gt: scene.dense[1].clone(),
    };
    Ok((sample, scene, flows))
}

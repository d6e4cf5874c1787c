//! The coarse (motion-guided) and refine (scene-guided) networks.
//!
//! The coarse network stems each half of the eight-channel motion stack
//! with eight 3x3 kernels, concatenates, encodes with a ResNet-34-style
//! residual stack and decodes with one stride-2 transposed convolution per
//! encoder halving, concatenating the encoder feature of matching
//! resolution after each. A linear 1x1 convolution produces depth.
//!
//! The refine network stems the coarse depth and the color image with
//! eight kernels each, then runs a small U-Net: `n` convolutions (the
//! first at full resolution, the rest stride 2) and `n - 1` transposed
//! convolutions, the last of which is linear and emits depth.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::params::{ParamRole, ParamStore};
use super::scalar::Scalar;
use super::tape::{BnParams, Mode, ShapeError, Tape, Var};
use super::tensor::Tensor;
use super::ParamId;
use crate::depth_io::{ColorImage, DepthMap};
use crate::grid::Grid2D;
use crate::warp::{channel, MOTION_STACK_CHANNELS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("input {height}x{width} is not divisible by {multiple}")]
    Indivisible {
        width: usize,
        height: usize,
        multiple: usize,
    },
    #[error("expected {expected} input channels, got {actual}")]
    Channels { expected: usize, actual: usize },
    #[error(transparent)]
    Shape(#[from] ShapeError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CoarseNetConfig {
    /// Channels of the motion stack; split evenly between the two stems.
    pub input_channels: usize,
    /// Kernels per input stem.
    pub stem_channels: usize,
    /// Residual stage widths (ResNet-34 uses 64/128/256/512).
    pub stage_widths: Vec<usize>,
    /// Basic blocks per stage (ResNet-34 uses 3/4/6/3).
    pub blocks_per_stage: Vec<usize>,
    /// Depths enter the network divided by this and leave multiplied by it (m).
    pub depth_scale: f64,
    /// Multiplier applied to flow channels at the input.
    pub flow_scale: f64,
}

impl Default for CoarseNetConfig {
    fn default() -> Self {
        Self {
            input_channels: MOTION_STACK_CHANNELS,
            stem_channels: 8,
            stage_widths: vec![16, 32, 64, 128],
            blocks_per_stage: vec![2, 2, 2, 2],
            depth_scale: 10.0,
            flow_scale: 0.1,
        }
    }
}

impl CoarseNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(format!("coarse: {m}")));
        if self.input_channels != MOTION_STACK_CHANNELS {
            return bad("input_channels must be 8");
        }
        if self.stage_widths.is_empty() || self.stage_widths.len() != self.blocks_per_stage.len() {
            return bad("stage_widths and blocks_per_stage must be non-empty and equally long");
        }
        if self.stem_channels == 0 || self.stage_widths.contains(&0) || self.blocks_per_stage.contains(&0) {
            return bad("widths and block counts must be positive");
        }
        if !(self.depth_scale > 0.0 && self.flow_scale.is_finite()) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    /// Number of stride-2 halvings (and of decoder stages).
    pub fn depth(&self) -> usize {
        1 + self.stage_widths.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RefineNetConfig {
    /// Kernels in each of the depth and color stems.
    pub stem_channels: usize,
    /// Widths of the encoder convolutions; the decoder has one fewer layer.
    pub encoder_widths: Vec<usize>,
    /// Predict a correction added to the coarse depth instead of depth itself.
    pub residual: bool,
    pub depth_scale: f64,
}

impl Default for RefineNetConfig {
    fn default() -> Self {
        Self {
            stem_channels: 8,
            encoder_widths: vec![16, 32, 32, 64, 64],
            residual: false,
            depth_scale: 10.0,
        }
    }
}

impl RefineNetConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::Config(format!("refine: {m}")));
        if self.encoder_widths.len() < 2 {
            return bad("need at least two encoder layers");
        }
        if self.stem_channels == 0 || self.encoder_widths.contains(&0) {
            return bad("widths must be positive");
        }
        if !(self.depth_scale > 0.0) {
            return bad("depth_scale must be positive");
        }
        Ok(())
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len() - 1
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct CascadeConfig {
    pub coarse: CoarseNetConfig,
    pub refine: RefineNetConfig,
}

impl CascadeConfig {
    /// A configuration small enough for finite-difference checks.
    pub fn tiny() -> Self {
        Self {
            coarse: CoarseNetConfig {
                stem_channels: 8,
                stage_widths: vec![6],
                blocks_per_stage: vec![2],
                ..CoarseNetConfig::default()
            },
            refine: RefineNetConfig {
                stem_channels: 8,
                encoder_widths: vec![4, 6, 6],
                ..RefineNetConfig::default()
            },
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.coarse.validate()?;
        self.refine.validate()
    }

    /// Spatial sizes must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        1 << self.coarse.depth().max(self.refine.depth())
    }
}

/// How freshly registered parameters are filled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Fan-in scaled Gaussian weights from a seeded generator, zero biases,
    /// unit norm scales.
    Seeded(u64),
    /// Everything zero except norm scales and running variances, which are 1.
    /// Used as a placeholder before loading stored values.
    Placeholder,
}

struct Builder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    rng: Option<ChaCha8Rng>,
}

impl<'a, T: Scalar> Builder<'a, T> {
    fn new(store: &'a mut ParamStore<T>, init: Init) -> Self {
        let rng = match init {
            Init::Seeded(seed) => Some(ChaCha8Rng::seed_from_u64(seed)),
            Init::Placeholder => None,
        };
        Self { store, rng }
    }

    fn gaussian(&mut self, n: usize, std: f64) -> Vec<T> {
        match &mut self.rng {
            Some(rng) => {
                let normal = Normal::new(0.0, std).expect("positive std");
                (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect()
            }
            None => vec![T::zero(); n],
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, pad: usize, bias: bool, gain: f64) -> ConvLayer {
        let fan_in = (cin * k * k) as f64;
        let data = self.gaussian(cout * cin * k * k, (gain / fan_in).sqrt());
        let weight = self
            .store
            .register(format!("{name}.weight"), vec![cout, cin, k, k], data, ParamRole::Trainable);
        let bias = bias.then(|| {
            self.store
                .register(format!("{name}.bias"), vec![cout], vec![T::zero(); cout], ParamRole::Trainable)
        });
        ConvLayer {
            weight,
            bias,
            stride,
            pad,
            transposed: false,
        }
    }

    fn deconv(&mut self, name: &str, cin: usize, cout: usize, bias: bool, gain: f64) -> ConvLayer {
        let (k, stride) = (4, 2);
        // Each output pixel sees cin * (k / stride)^2 inputs.
        let fan_in = (cin * k * k / (stride * stride)) as f64;
        let data = self.gaussian(cin * cout * k * k, (gain / fan_in).sqrt());
        let weight = self
            .store
            .register(format!("{name}.weight"), vec![cin, cout, k, k], data, ParamRole::Trainable);
        let bias = bias.then(|| {
            self.store
                .register(format!("{name}.bias"), vec![cout], vec![T::zero(); cout], ParamRole::Trainable)
        });
        ConvLayer {
            weight,
            bias,
            stride,
            pad: 1,
            transposed: true,
        }
    }

    fn bn(&mut self, name: &str, c: usize) -> BnParams {
        let ones = vec![T::one(); c];
        let zeros = vec![T::zero(); c];
        BnParams {
            gamma: self
                .store
                .register(format!("{name}.gamma"), vec![c], ones.clone(), ParamRole::Trainable),
            beta: self
                .store
                .register(format!("{name}.beta"), vec![c], zeros.clone(), ParamRole::Trainable),
            running_mean: self
                .store
                .register(format!("{name}.running_mean"), vec![c], zeros, ParamRole::RunningStat),
            running_var: self
                .store
                .register(format!("{name}.running_var"), vec![c], ones, ParamRole::RunningStat),
        }
    }

    fn conv_bn(&mut self, name: &str, cin: usize, cout: usize, k: usize, stride: usize, relu: bool) -> ConvBn {
        ConvBn {
            conv: self.conv(&format!("{name}.conv"), cin, cout, k, stride, k / 2, false, if relu { 2.0 } else { 1.0 }),
            bn: self.bn(&format!("{name}.bn"), cout),
            relu,
        }
    }

    fn deconv_bn(&mut self, name: &str, cin: usize, cout: usize) -> ConvBn {
        ConvBn {
            conv: self.deconv(&format!("{name}.deconv"), cin, cout, false, 2.0),
            bn: self.bn(&format!("{name}.bn"), cout),
            relu: true,
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct ConvLayer {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub stride: usize,
    pub pad: usize,
    pub transposed: bool,
}

impl ConvLayer {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        if self.transposed {
            tape.deconv2d(x, self.weight, self.bias, self.stride, self.pad)
        } else {
            tape.conv2d(x, self.weight, self.bias, self.stride, self.pad)
        }
    }
}

/// Convolution, batch norm and an optional ReLU.
#[derive(Debug, Clone, Copy)]
pub struct ConvBn {
    pub conv: ConvLayer,
    pub bn: BnParams,
    pub relu: bool,
}

impl ConvBn {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        let y = self.conv.forward(tape, x)?;
        let y = tape.batch_norm(y, self.bn);
        Ok(if self.relu { tape.relu(y) } else { y })
    }
}

/// Two 3x3 convolutions with an identity or projected shortcut.
#[derive(Debug, Clone, Copy)]
pub struct BasicBlock {
    first: ConvBn,
    second: ConvBn,
    shortcut: Option<ConvBn>,
}

impl BasicBlock {
    fn new<T: Scalar>(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, stride: usize) -> Self {
        Self {
            first: b.conv_bn(&format!("{name}.a"), cin, cout, 3, stride, true),
            second: b.conv_bn(&format!("{name}.b"), cout, cout, 3, 1, false),
            shortcut: (stride != 1 || cin != cout).then(|| b.conv_bn(&format!("{name}.shortcut"), cin, cout, 1, stride, false)),
        }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, x: Var) -> Result<Var, ShapeError> {
        let y = self.first.forward(tape, x)?;
        let y = self.second.forward(tape, y)?;
        let skip = match &self.shortcut {
            Some(s) => s.forward(tape, x)?,
            None => x,
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }
}

/// Handles into a [`ParamStore`] for the motion-guided coarse network.
#[derive(Debug, Clone)]
pub struct CoarseNet {
    config: CoarseNetConfig,
    stem_prev: ConvBn,
    stem_next: ConvBn,
    conv1: ConvBn,
    stages: Vec<Vec<BasicBlock>>,
    decoder: Vec<ConvBn>,
    head: ConvLayer,
}

impl CoarseNet {
    fn build<T: Scalar>(config: &CoarseNetConfig, b: &mut Builder<'_, T>) -> Self {
        let half = config.input_channels / 2;
        let stem = config.stem_channels;
        let stem_prev = b.conv_bn("coarse.stem_prev", half, stem, 3, 1, true);
        let stem_next = b.conv_bn("coarse.stem_next", config.input_channels - half, stem, 3, 1, true);
        let w0 = config.stage_widths[0];
        let conv1 = b.conv_bn("coarse.conv1", 2 * stem, w0, 3, 2, true);

        // Channel count of each skip feature, from full resolution down.
        let mut skip_channels = vec![2 * stem, w0];
        let mut stages = Vec::new();
        let mut cin = w0;
        for (s, (&width, &blocks)) in config
            .stage_widths
            .iter()
            .zip(&config.blocks_per_stage)
            .enumerate()
        {
            let stage = (0..blocks)
                .map(|i| {
                    let (inp, stride) = if i == 0 { (cin, 2) } else { (width, 1) };
                    BasicBlock::new(b, &format!("coarse.layer{}.{}", s + 1, i), inp, width, stride)
                })
                .collect();
            stages.push(stage);
            skip_channels.push(width);
            cin = width;
        }

        // The deepest feature is the decoder input, not a skip.
        skip_channels.pop();
        let mut decoder = Vec::new();
        for (j, &skip) in skip_channels.iter().rev().enumerate() {
            decoder.push(b.deconv_bn(&format!("coarse.up{}", j + 1), cin, skip));
            cin = 2 * skip;
        }
        let head = b.conv("coarse.head", cin, 1, 1, 1, 0, true, 1.0);
        Self {
            config: config.clone(),
            stem_prev,
            stem_next,
            conv1,
            stages,
            decoder,
            head,
        }
    }

    pub fn config(&self) -> &CoarseNetConfig {
        &self.config
    }

    /// Input normalization factors for the motion stack channels.
    fn input_scales<T: Scalar>(&self) -> Vec<T> {
        let depth = 1.0 / self.config.depth_scale;
        let flow = self.config.flow_scale;
        (0..self.config.input_channels)
            .map(|c| T::from_f64_lossy(if is_depth_channel(c) { depth } else { flow }))
            .collect()
    }

    /// Predicted depth in meters from a raw motion stack.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, stack: Var) -> Result<Var, ModelError> {
        let [c, h, w] = tape.value(stack).shape();
        if c != self.config.input_channels {
            return Err(ModelError::Channels {
                expected: self.config.input_channels,
                actual: c,
            });
        }
        check_divisible(w, h, 1 << self.config.depth())?;
        let x = tape.scale_channels(stack, &self.input_scales());
        let half = c / 2;
        let a = tape.slice_channels(x, 0, half);
        let b = tape.slice_channels(x, half, c);
        let a = self.stem_prev.forward(tape, a)?;
        let b = self.stem_next.forward(tape, b)?;
        let s0 = tape.concat(&[a, b])?;
        let mut e = self.conv1.forward(tape, s0)?;
        let mut skips = vec![s0, e];
        for stage in &self.stages {
            for block in stage {
                e = block.forward(tape, e)?;
            }
            skips.push(e);
        }
        let mut x = skips.pop().expect("bottleneck feature");
        for up in &self.decoder {
            let u = up.forward(tape, x)?;
            let skip = skips.pop().expect("one skip per decoder stage");
            x = tape.concat(&[u, skip])?;
        }
        let out = self.head.forward(tape, x)?;
        Ok(tape.scale(out, T::from_f64_lossy(self.config.depth_scale)))
    }
}

/// Handles for the scene-guided refine network.
#[derive(Debug, Clone)]
pub struct RefineNet {
    config: RefineNetConfig,
    stem_depth: ConvBn,
    stem_color: ConvBn,
    encoder: Vec<ConvBn>,
    decoder: Vec<ConvBn>,
    output: ConvLayer,
}

impl RefineNet {
    fn build<T: Scalar>(config: &RefineNetConfig, b: &mut Builder<'_, T>) -> Self {
        let stem = config.stem_channels;
        let stem_depth = b.conv_bn("refine.stem_depth", 1, stem, 3, 1, true);
        let stem_color = b.conv_bn("refine.stem_color", 3, stem, 3, 1, true);
        let mut encoder = Vec::new();
        let mut cin = 2 * stem;
        for (i, &width) in config.encoder_widths.iter().enumerate() {
            let stride = if i == 0 { 1 } else { 2 };
            encoder.push(b.conv_bn(&format!("refine.enc{}", i + 1), cin, width, 3, stride, true));
            cin = width;
        }
        let n = config.encoder_widths.len();
        let mut decoder = Vec::new();
        // Skips pair decoder outputs with encoder features n-2 .. 1.
        for j in 1..n - 1 {
            let skip = config.encoder_widths[n - 1 - j];
            decoder.push(b.deconv_bn(&format!("refine.dec{j}"), cin, skip));
            cin = 2 * skip;
        }
        let output = b.deconv(&format!("refine.dec{}", n - 1), cin, 1, true, 1.0);
        Self {
            config: config.clone(),
            stem_depth,
            stem_color,
            encoder,
            decoder,
            output,
        }
    }

    pub fn config(&self) -> &RefineNetConfig {
        &self.config
    }

    /// Refined depth in meters from coarse depth (meters) and a color image.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, coarse: Var, color: Var) -> Result<Var, ModelError> {
        let [cd, h, w] = tape.value(coarse).shape();
        let [cc, hc, wc] = tape.value(color).shape();
        if cd != 1 || cc != 3 {
            return Err(ModelError::Channels {
                expected: if cd != 1 { 1 } else { 3 },
                actual: if cd != 1 { cd } else { cc },
            });
        }
        if (h, w) != (hc, wc) {
            return Err(ShapeError::Mismatch {
                op: "refine",
                expected: format!("color {h}x{w}"),
                actual: [cc, hc, wc],
            }
            .into());
        }
        check_divisible(w, h, 1 << self.config.depth())?;
        let scale = T::from_f64_lossy(self.config.depth_scale);
        let d = tape.scale(coarse, T::one() / scale);
        let d = self.stem_depth.forward(tape, d)?;
        let c = self.stem_color.forward(tape, color)?;
        let mut x = tape.concat(&[d, c])?;
        let mut features = Vec::new();
        for layer in &self.encoder {
            x = layer.forward(tape, x)?;
            features.push(x);
        }
        let n = features.len();
        for (j, up) in self.decoder.iter().enumerate() {
            let u = up.forward(tape, x)?;
            x = tape.concat(&[u, features[n - 2 - j]])?;
        }
        let out = self.output.forward(tape, x)?;
        let out = tape.scale(out, scale);
        if self.config.residual {
            Ok(tape.add(coarse, out)?)
        } else {
            Ok(out)
        }
    }
}

fn check_divisible(width: usize, height: usize, multiple: usize) -> Result<(), ModelError> {
    if width.is_multiple_of(multiple) && height.is_multiple_of(multiple) && width > 0 && height > 0 {
        Ok(())
    } else {
        Err(ModelError::Indivisible {
            width,
            height,
            multiple,
        })
    }
}

/// Both networks, wired end to end.
#[derive(Debug, Clone)]
pub struct Cascade {
    config: CascadeConfig,
    pub coarse: CoarseNet,
    pub refine: RefineNet,
}

/// Tape outputs of one cascade pass.
#[derive(Debug, Clone, Copy)]
pub struct CascadeVars {
    pub stack: Var,
    pub color: Var,
    pub coarse: Var,
    pub refined: Var,
}

impl Cascade {
    /// Registers all parameters of `config` in `store`.
    pub fn build<T: Scalar>(config: &CascadeConfig, store: &mut ParamStore<T>, init: Init) -> Result<Self, ModelError> {
        config.validate()?;
        let mut b = Builder::new(store, init);
        let coarse = CoarseNet::build(&config.coarse, &mut b);
        let refine = RefineNet::build(&config.refine, &mut b);
        Ok(Self {
            config: config.clone(),
            coarse,
            refine,
        })
    }

    pub fn config(&self) -> &CascadeConfig {
        &self.config
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<'_, T>, stack: &Tensor<T>, color: &Tensor<T>) -> Result<CascadeVars, ModelError> {
        let stack = tape.input(stack.clone());
        let color = tape.input(color.clone());
        let coarse = self.coarse.forward(tape, stack)?;
        let refined = self.refine.forward(tape, coarse, color)?;
        Ok(CascadeVars {
            stack,
            color,
            coarse,
            refined,
        })
    }

    /// Inference-mode coarse and refined predictions in meters.
    pub fn predict<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        stack: &Tensor<T>,
        color: &Tensor<T>,
    ) -> Result<(Grid2D<f64>, Grid2D<f64>), ModelError> {
        let mut tape = Tape::new(params, Mode::Eval);
        let vars = self.forward(&mut tape, stack, color)?;
        Ok((
            tensor_to_grid(tape.value(vars.coarse)),
            tensor_to_grid(tape.value(vars.refined)),
        ))
    }

    /// Inference-mode coarse depth; non-positive predictions are invalid.
    pub fn coarse_forward<T: Scalar>(&self, params: &ParamStore<T>, stack: &Tensor<T>) -> Result<DepthMap, ModelError> {
        let mut tape = Tape::new(params, Mode::Eval);
        let x = tape.input(stack.clone());
        let out = self.coarse.forward(&mut tape, x)?;
        Ok(DepthMap::from_prediction(&tensor_to_grid(tape.value(out))))
    }

    /// Inference-mode refinement of a coarse depth map with the color image.
    pub fn refine_forward<T: Scalar>(&self, params: &ParamStore<T>, coarse: &DepthMap, color: &ColorImage) -> Result<DepthMap, ModelError> {
        let mut tape = Tape::new(params, Mode::Eval);
        let d = tape.input(depth_tensor(coarse));
        let c = tape.input(color_tensor(color));
        let out = self.refine.forward(&mut tape, d, c)?;
        Ok(DepthMap::from_prediction(&tensor_to_grid(tape.value(out))))
    }
}

/// Single-channel tensor to a grid in `f64`.
pub fn tensor_to_grid<T: Scalar>(t: &Tensor<T>) -> Grid2D<f64> {
    assert_eq!(t.channels(), 1);
    Grid2D::new(
        t.width(),
        t.height(),
        1,
        t.data().iter().map(|v| v.to_f64_lossy()).collect(),
    )
    .expect("tensor has positive size")
}

/// Depth map as a one-channel tensor with invalid pixels set to 0.
pub fn depth_tensor<T: Scalar>(d: &DepthMap) -> Tensor<T> {
    Tensor::from_fn(1, d.height(), d.width(), |_, y, x| T::from_f64_lossy(d.get(x, y).unwrap_or(0.0)))
}

pub fn color_tensor<T: Scalar>(c: &ColorImage) -> Tensor<T> {
    let g = c.grid();
    Tensor::from_fn(3, c.height(), c.width(), |ch, y, x| T::from_f64_lossy(g.get(x, y, ch)))
}

/// Which motion stack channels carry depth (as opposed to flow).
pub fn is_depth_channel(c: usize) -> bool {
    matches!(
        c,
        channel::DEPTH_PREV | channel::WARPED_PREV | channel::DEPTH_NEXT | channel::WARPED_NEXT
    )
}

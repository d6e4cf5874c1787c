//! The warping layer: backward-warp the neighboring depth maps to the
//! intermediate time, fuse them, and stack the motion-guidance network input.

use thiserror::Error;

use crate::depth_io::{DepthKind, DepthMap};
use crate::flow::FlowField;
use crate::grid::{sample_unchecked, ValidityMask};
use crate::nn::{Scalar, Tensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WarpError {
    #[error("shape mismatch: {0}x{1} vs {2}x{3}")]
    ShapeMismatch(usize, usize, usize, usize),
    #[error("gamma {0} outside [0, 1]")]
    GammaRange(f64),
}

/// Default temporal weight of the previous frame.
pub const DEFAULT_GAMMA: f64 = 0.5;

/// Number of channels in the motion-guidance input stack.
pub const MOTION_STACK_CHANNELS: usize = 8;

/// Channel layout of [`assemble_motion_input`].
pub mod channel {
    pub const DEPTH_PREV: usize = 0;
    pub const FLOW_PREV_U: usize = 1;
    pub const FLOW_PREV_V: usize = 2;
    pub const WARPED_PREV: usize = 3;
    pub const DEPTH_NEXT: usize = 4;
    pub const FLOW_NEXT_U: usize = 5;
    pub const FLOW_NEXT_V: usize = 6;
    pub const WARPED_NEXT: usize = 7;
}

fn check_dims(a: (usize, usize), b: (usize, usize)) -> Result<(), WarpError> {
    if a == b {
        Ok(())
    } else {
        Err(WarpError::ShapeMismatch(a.0, a.1, b.0, b.1))
    }
}

fn depth_dims(d: &DepthMap) -> (usize, usize) {
    (d.width(), d.height())
}

fn flow_dims(f: &FlowField) -> (usize, usize) {
    (f.width(), f.height())
}

/// Samples `depth` at `p + flow(p)` for every target pixel `p`.
///
/// The result is invalid where the flow is invalid, where the displaced
/// position leaves `[0, W-1] x [0, H-1]`, or where every bilinear neighbor
/// of it is invalid.
pub fn backward_warp(depth: &DepthMap, flow: &FlowField) -> Result<DepthMap, WarpError> {
    check_dims(depth_dims(depth), flow_dims(flow))?;
    let grid = depth.grid();
    let mask = depth.mask();
    let warped = DepthMap::from_fn(depth.width(), depth.height(), depth.kind(), |x, y| {
        let (du, dv) = flow.get(x, y)?;
        sample_unchecked(grid, mask, x as f64 + du, y as f64 + dv)
    })
    .expect("bilinear samples of valid depths are valid depths");
    Ok(warped)
}

/// `gamma * from_prev + (1 - gamma) * from_next` where both are valid; where
/// only one is valid its value is taken unchanged.
pub fn fuse(from_prev: &DepthMap, from_next: &DepthMap, gamma: f64) -> Result<DepthMap, WarpError> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(WarpError::GammaRange(gamma));
    }
    check_dims(depth_dims(from_prev), depth_dims(from_next))?;
    let kind = if from_prev.kind() == DepthKind::Dense && from_next.kind() == DepthKind::Dense {
        DepthKind::Dense
    } else {
        DepthKind::Sparse
    };
    let fused = DepthMap::from_fn(from_prev.width(), from_prev.height(), kind, |x, y| {
        match (from_prev.get(x, y), from_next.get(x, y)) {
            (Some(a), Some(b)) => Some((gamma * a + (1.0 - gamma) * b).clamp(a.min(b), a.max(b))),
            (Some(a), None) => Some(a),
            (None, Some(b)) => Some(b),
            (None, None) => None,
        }
    });
    Ok(fused.expect("convex combination of valid depths"))
}

/// Both warped neighbors and their fusion at the intermediate time.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpedPair {
    pub from_prev: DepthMap,
    pub from_next: DepthMap,
    pub fused: DepthMap,
    pub gamma: f64,
}

impl WarpedPair {
    /// `flow_to_prev` and `flow_to_next` are anchored at the intermediate frame.
    pub fn compute(
        d_prev: &DepthMap,
        d_next: &DepthMap,
        flow_to_prev: &FlowField,
        flow_to_next: &FlowField,
        gamma: f64,
    ) -> Result<Self, WarpError> {
        let from_prev = backward_warp(d_prev, flow_to_prev)?;
        let from_next = backward_warp(d_next, flow_to_next)?;
        let fused = fuse(&from_prev, &from_next, gamma)?;
        Ok(Self {
            from_prev,
            from_next,
            fused,
            gamma,
        })
    }

    /// Pixels where both warps produced a value.
    pub fn joint_mask(&self) -> ValidityMask {
        self.from_prev.mask().and(self.from_next.mask())
    }
}

/// Stacks the eight motion-guidance channels in the order given by
/// [`channel`]. Invalid depth and flow pixels are written as 0.
pub fn assemble_motion_input<T: Scalar>(
    d_prev: &DepthMap,
    d_next: &DepthMap,
    flow_to_prev: &FlowField,
    flow_to_next: &FlowField,
    warped: &WarpedPair,
) -> Result<Tensor<T>, WarpError> {
    let dims = depth_dims(d_prev);
    check_dims(dims, depth_dims(d_next))?;
    check_dims(dims, flow_dims(flow_to_prev))?;
    check_dims(dims, flow_dims(flow_to_next))?;
    check_dims(dims, depth_dims(&warped.from_prev))?;
    check_dims(dims, depth_dims(&warped.from_next))?;

    let (w, h) = dims;
    let depth = |d: &DepthMap, x: usize, y: usize| d.get(x, y).unwrap_or(0.0);
    let flow = |f: &FlowField, x: usize, y: usize, c: usize| {
        f.get(x, y).map_or(0.0, |(u, v)| if c == 0 { u } else { v })
    };
    Ok(Tensor::from_fn(MOTION_STACK_CHANNELS, h, w, |c, y, x| {
        let v = match c {
            channel::DEPTH_PREV => depth(d_prev, x, y),
            channel::FLOW_PREV_U => flow(flow_to_prev, x, y, 0),
            channel::FLOW_PREV_V => flow(flow_to_prev, x, y, 1),
            channel::WARPED_PREV => depth(&warped.from_prev, x, y),
            channel::DEPTH_NEXT => depth(d_next, x, y),
            channel::FLOW_NEXT_U => flow(flow_to_next, x, y, 0),
            channel::FLOW_NEXT_V => flow(flow_to_next, x, y, 1),
            _ => depth(&warped.from_next, x, y),
        };
        T::from_f64_lossy(v)
    }))
}

//! Dense optical flow: a coarse-to-fine Horn–Schunck estimator with warping,
//! 8-bit quantization of flow fields, and color-wheel visualization.

mod color;
mod quantize;
mod solver;

pub use color::flow_to_color;
pub use quantize::{dequantize_flow, quantize_flow, QuantizedFlow, MFFQ_MAGIC, MFFQ_VERSION};
pub use solver::{
    build_pyramid, estimate_flow, estimate_flow_traced, hs_energy, image_gradients, pyramid_dims,
    warp, PassTrace,
};

use serde::{Deserialize, Serialize};

use crate::error::{MffError, Result};
use crate::plane::Plane;
use crate::scalar::Scalar;

/// Per-pixel displacement `(u, v)` in pixels, from one frame to the next.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField<T> {
    pub u: Plane<T>,
    pub v: Plane<T>,
}

impl<T: Scalar> FlowField<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            u: Plane::filled(width, height, T::zero()),
            v: Plane::filled(width, height, T::zero()),
        }
    }

    pub fn from_planes(u: Plane<T>, v: Plane<T>) -> Result<Self> {
        if u.dims() != v.dims() {
            return Err(MffError::Shape(format!(
                "flow components differ in size: {:?} vs {:?}",
                u.dims(),
                v.dims()
            )));
        }
        Ok(FlowField { u, v })
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    /// `max(|u|∞, |v|∞)`.
    pub fn max_abs(&self) -> T {
        self.u
            .data()
            .iter()
            .chain(self.v.data())
            .fold(T::zero(), |m, &x| m.max(x.abs()))
    }

    pub fn is_finite(&self) -> bool {
        self.u.data().iter().chain(self.v.data()).all(|x| x.is_finite())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowParams {
    pub smoothness_lambda: f64,
    pub pyramid_scale: f64,
    pub min_level_dim: usize,
    /// Jacobi iterations per warping pass.
    pub iters_per_level: usize,
    pub warps_per_level: usize,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            smoothness_lambda: 0.05,
            pyramid_scale: 0.5,
            min_level_dim: 16,
            iters_per_level: 100,
            warps_per_level: 3,
        }
    }
}

impl FlowParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.smoothness_lambda > 0.0 && self.smoothness_lambda.is_finite()) {
            return Err(MffError::config("flow", "smoothness_lambda", "must be > 0"));
        }
        if !(self.pyramid_scale > 0.0 && self.pyramid_scale < 1.0) {
            return Err(MffError::config("flow", "pyramid_scale", "must be in (0, 1)"));
        }
        if self.min_level_dim == 0 {
            return Err(MffError::config("flow", "min_level_dim", "must be >= 1"));
        }
        if self.warps_per_level == 0 {
            return Err(MffError::config("flow", "warps_per_level", "must be >= 1"));
        }
        Ok(())
    }
}

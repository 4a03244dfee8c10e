//! Per-timestep inputs.

use crate::error::{Error, Result};
use crate::geometry::{CameraModel, Pose};
use crate::image::{check_dims, DepthImage, FlowImage, MaskImage, RgbImage};

/// Flow components at or beyond this magnitude mark an unknown vector.
pub const UNKNOWN_FLOW: f64 = 1e9;

#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    pub rgb: RgbImage,
    /// Meters, `0.0` marks an invalid pixel.
    pub depth: DepthImage,
    pub pose: Pose,
    pub timestamp: i64,
    /// Maps frame-t pixels toward their location in the previous consumed frame.
    pub flow_back: Option<FlowImage>,
    pub motion_mask: Option<MaskImage>,
}

impl FrameBundle {
    pub fn validate(&self, cam: &CameraModel) -> Result<()> {
        if self.rgb.dims() != (cam.width, cam.height) {
            return Err(Error::Shape(format!(
                "frame {} rgb is {}x{}, camera is {}x{}",
                self.timestamp,
                self.rgb.width(),
                self.rgb.height(),
                cam.width,
                cam.height
            )));
        }
        check_dims(&self.rgb, &self.depth, "depth vs rgb")?;
        if let Some(f) = &self.flow_back {
            check_dims(&self.rgb, f, "flow vs rgb")?;
        }
        if let Some(m) = &self.motion_mask {
            check_dims(&self.rgb, m, "mask vs rgb")?;
        }
        if self.depth.data().iter().any(|d| !(*d >= 0.0) || !d.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "frame {} has negative or non-finite depth",
                self.timestamp
            )));
        }
        if !self.pose.is_finite() {
            return Err(Error::InvalidParameter(format!("frame {} pose is not finite", self.timestamp)));
        }
        Ok(())
    }
}

/// True when a flow vector carries a usable value.
#[inline]
pub fn flow_is_known(f: &[f64; 2]) -> bool {
    f[0].is_finite() && f[1].is_finite() && f[0].abs() < UNKNOWN_FLOW && f[1].abs() < UNKNOWN_FLOW
}

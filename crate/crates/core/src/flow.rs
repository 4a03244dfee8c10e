//! Scene flow for dynamic points: depth backprojection, ego-motion flow,
//! residual-flow motion segmentation and lifting of 2D backward flow to
//! world-frame 3D displacements.

use nalgebra::Vector3;

use crate::config::FlowMode;
use crate::error::{Error, Result};
use crate::frame::{flow_is_known, FrameBundle};
use crate::geometry::{CameraModel, Pose};
use crate::image::{check_dims, DepthImage, FlowImage, Image, MaskImage};

/// Minimum connected-component size kept by the segmenter, pixels.
pub const MIN_COMPONENT_AREA: usize = 16;

/// Neighbors whose inverse depths differ by more than this fraction are
/// treated as straddling a depth edge and not interpolated.
const EDGE_REL_TOL: f64 = 0.05;

/// Depth lookup at a sub-pixel location.
pub trait DepthSampler {
    /// Z-depth at `(u, v)` in meters, or `None` where no valid surface exists.
    fn sample_depth(&self, u: f64, v: f64) -> Option<f64>;
}

impl DepthSampler for DepthImage {
    /// Bilinear interpolation of inverse depth, which is exact on planes.
    /// Samples touching an invalid pixel or a depth edge are rejected.
    fn sample_depth(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = (self.width(), self.height());
        if !(u >= 0.0 && v >= 0.0 && u <= (w - 1) as f64 && v <= (h - 1) as f64) {
            return None;
        }
        let x0 = (u.floor() as usize).min(w - 1);
        let y0 = (v.floor() as usize).min(h - 1);
        let ax = u - x0 as f64;
        let ay = v - y0 as f64;
        let x1 = if ax > 0.0 { x0 + 1 } else { x0 };
        let y1 = if ay > 0.0 { y0 + 1 } else { y0 };
        let taps = [
            (x0, y0, (1.0 - ax) * (1.0 - ay)),
            (x1, y0, ax * (1.0 - ay)),
            (x0, y1, (1.0 - ax) * ay),
            (x1, y1, ax * ay),
        ];
        let mut inv = 0.0;
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for (x, y, wgt) in taps {
            if wgt == 0.0 {
                continue;
            }
            let d = self[(x, y)];
            if !(d > 0.0) {
                return None;
            }
            let i = 1.0 / d;
            lo = lo.min(i);
            hi = hi.max(i);
            inv += wgt * i;
        }
        if hi - lo > EDGE_REL_TOL * hi {
            return None;
        }
        Some(1.0 / inv)
    }
}

/// Masked current-frame points and their displacement back to the previous
/// consumed frame, all in world coordinates.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GsFlowField {
    pub points_world: Vec<Vector3<f64>>,
    /// Adding `displacements[i]` to `points_world[i]` gives its earlier position.
    pub displacements: Vec<Vector3<f64>>,
    pub pixels: Vec<[usize; 2]>,
    pub frame_index: i64,
}

impl GsFlowField {
    pub fn len(&self) -> usize {
        self.points_world.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points_world.is_empty()
    }
}

/// World points for every (masked) pixel with positive depth, row-major.
pub fn backproject_points(
    depth: &DepthImage,
    cam: &CameraModel,
    pose: &Pose,
    mask: Option<&MaskImage>,
) -> Result<Vec<([usize; 2], Vector3<f64>)>> {
    if depth.dims() != (cam.width, cam.height) {
        return Err(Error::Shape("depth does not match camera".into()));
    }
    if let Some(m) = mask {
        check_dims(depth, m, "mask vs depth")?;
    }
    let r = pose.rotation_matrix();
    let mut out = Vec::new();
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            if mask.is_some_and(|m| !m[(x, y)]) {
                continue;
            }
            let d = depth[(x, y)];
            if d > 0.0 {
                let p = r * cam.backproject(x as f64, y as f64, d) + pose.translation;
                out.push(([x, y], p));
            }
        }
    }
    Ok(out)
}

/// Image motion each pixel would have from camera motion alone, pointing
/// from frame t toward frame t-1. `None` where depth is invalid or the point
/// falls behind the earlier camera.
pub fn compute_ego_flow(
    depth_t: &DepthImage,
    cam: &CameraModel,
    pose_t: &Pose,
    pose_prev: &Pose,
) -> Result<Image<Option<[f64; 2]>>> {
    if depth_t.dims() != (cam.width, cam.height) {
        return Err(Error::Shape("depth does not match camera".into()));
    }
    let rel = pose_prev.inverse().compose(pose_t);
    let r = rel.rotation_matrix();
    let still = pose_t == pose_prev;
    Ok(Image::from_fn(cam.width, cam.height, |x, y| {
        let d = depth_t[(x, y)];
        if !(d > 0.0) {
            return None;
        }
        if still {
            return Some([0.0, 0.0]);
        }
        let p = r * cam.backproject(x as f64, y as f64, d) + rel.translation;
        let [u, v] = cam.project(&p)?;
        Some([u - x as f64, v - y as f64])
    }))
}

/// 3x3 erosion; out-of-image neighbors are ignored.
fn erode(m: &MaskImage) -> MaskImage {
    neighborhood(m, true)
}

/// 3x3 dilation; out-of-image neighbors are ignored.
fn dilate(m: &MaskImage) -> MaskImage {
    neighborhood(m, false)
}

fn neighborhood(m: &MaskImage, all: bool) -> MaskImage {
    let (w, h) = m.dims();
    Image::from_fn(w, h, |x, y| {
        let mut acc = all;
        for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
            for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                if all {
                    acc &= m[(nx, ny)];
                } else {
                    acc |= m[(nx, ny)];
                }
            }
        }
        acc
    })
}

/// Drops 8-connected components smaller than `min_area`.
pub fn remove_small_components(m: &MaskImage, min_area: usize) -> MaskImage {
    let (w, h) = m.dims();
    let mut out = Image::new(w, h, false);
    let mut seen = Image::new(w, h, false);
    let mut stack = Vec::new();
    let mut comp = Vec::new();
    for sy in 0..h {
        for sx in 0..w {
            if !m[(sx, sy)] || seen[(sx, sy)] {
                continue;
            }
            comp.clear();
            stack.push((sx, sy));
            seen[(sx, sy)] = true;
            while let Some((x, y)) = stack.pop() {
                comp.push((x, y));
                for ny in y.saturating_sub(1)..=(y + 1).min(h - 1) {
                    for nx in x.saturating_sub(1)..=(x + 1).min(w - 1) {
                        if m[(nx, ny)] && !seen[(nx, ny)] {
                            seen[(nx, ny)] = true;
                            stack.push((nx, ny));
                        }
                    }
                }
            }
            if comp.len() >= min_area {
                for &p in &comp {
                    out[p] = true;
                }
            }
        }
    }
    out
}

/// Flags pixels whose observed flow departs from the ego flow by more than
/// `threshold_px`, then cleans the mask morphologically.
pub fn segment_motion(
    flow_back: &FlowImage,
    depth_t: &DepthImage,
    cam: &CameraModel,
    pose_t: &Pose,
    pose_prev: &Pose,
    threshold_px: f64,
) -> Result<MaskImage> {
    check_dims(flow_back, depth_t, "flow vs depth")?;
    let ego = compute_ego_flow(depth_t, cam, pose_t, pose_prev)?;
    let raw = Image::from_fn(cam.width, cam.height, |x, y| {
        let f = flow_back[(x, y)];
        match ego[(x, y)] {
            Some(e) if flow_is_known(&f) => {
                let (rx, ry) = (f[0] - e[0], f[1] - e[1]);
                (rx * rx + ry * ry).sqrt() > threshold_px
            }
            _ => false,
        }
    });
    let opened = dilate(&erode(&raw));
    let closed = erode(&dilate(&opened));
    Ok(remove_small_components(&closed, MIN_COMPONENT_AREA))
}

/// Lifts the masked backward flow of `frame_t` to world-frame displacements.
pub fn lift_gs_flow(
    frame_t: &FrameBundle,
    frame_prev: &FrameBundle,
    cam: &CameraModel,
    mask: &MaskImage,
    mode: FlowMode,
) -> Result<GsFlowField> {
    lift_gs_flow_with(frame_t, &frame_prev.depth, &frame_prev.pose, cam, mask, mode)
}

/// As [`lift_gs_flow`] with an arbitrary depth source for the earlier frame.
pub fn lift_gs_flow_with(
    frame_t: &FrameBundle,
    prev_depth: &dyn DepthSampler,
    prev_pose: &Pose,
    cam: &CameraModel,
    mask: &MaskImage,
    mode: FlowMode,
) -> Result<GsFlowField> {
    let flow = frame_t
        .flow_back
        .as_ref()
        .ok_or_else(|| Error::InvalidParameter(format!("frame {} has no flow", frame_t.timestamp)))?;
    check_dims(flow, mask, "flow vs mask")?;
    check_dims(&frame_t.depth, mask, "depth vs mask")?;

    let r_t = frame_t.pose.rotation_matrix();
    let r_prev = prev_pose.rotation_matrix();
    let rel = prev_pose.inverse().compose(&frame_t.pose);
    let r_rel = rel.rotation_matrix();
    let (wmax, hmax) = ((cam.width - 1) as f64, (cam.height - 1) as f64);

    let mut field = GsFlowField {
        frame_index: frame_t.timestamp,
        ..Default::default()
    };
    for y in 0..cam.height {
        for x in 0..cam.width {
            if !mask[(x, y)] {
                continue;
            }
            let d = frame_t.depth[(x, y)];
            let f = flow[(x, y)];
            if !(d > 0.0) || !flow_is_known(&f) {
                continue;
            }
            let (u, v) = (x as f64, y as f64);
            let x_cam = cam.backproject(u, v, d);
            let x_world = r_t * x_cam + frame_t.pose.translation;
            let disp = match mode {
                FlowMode::ExactCorrespondence => {
                    let (u2, v2) = (u + f[0], v + f[1]);
                    if !(u2 >= 0.0 && v2 >= 0.0 && u2 <= wmax && v2 <= hmax) {
                        continue;
                    }
                    let Some(d2) = prev_depth.sample_depth(u2, v2) else {
                        continue;
                    };
                    let prev_world = r_prev * cam.backproject(u2, v2, d2) + prev_pose.translation;
                    prev_world - x_world
                }
                FlowMode::Linearized => {
                    let lifted = Vector3::new(d * f[0] / cam.fx, d * f[1] / cam.fy, 0.0);
                    let ego = (r_rel * x_cam + rel.translation) - x_cam;
                    r_t * (lifted - ego)
                }
            };
            if !disp.iter().all(|c| c.is_finite()) {
                continue;
            }
            field.points_world.push(x_world);
            field.displacements.push(disp);
            field.pixels.push([x, y]);
        }
    }
    if field.is_empty() {
        return Err(Error::EmptyFlow);
    }
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use nalgebra::UnitQuaternion;

    fn cam() -> CameraModel {
        CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap()
    }

    #[test]
    fn backprojection_cases() {
        let c = cam();
        let mut depth = Image::new(100, 100, 0.0);
        depth[(50, 50)] = 2.0;
        depth[(99, 50)] = 2.0;
        let pts = backproject_points(&depth, &c, &Pose::identity(), None).unwrap();
        assert_eq!(pts[0], ([50, 50], Vector3::new(0.0, 0.0, 2.0)));
        assert_relative_eq!(pts[1].1, Vector3::new(0.98, 0.0, 2.0), epsilon = 1e-15);

        let t = Vector3::new(1.0, -2.0, 0.5);
        let moved = backproject_points(&depth, &c, &Pose::from_translation(t), None).unwrap();
        assert_eq!(moved[0].1, Vector3::new(0.0, 0.0, 2.0) + t);
    }

    #[test]
    fn unit_tangent_backprojection() {
        let c = CameraModel::new(100.0, 100.0, 50.0, 50.0, 200, 100).unwrap();
        let mut depth = Image::new(200, 100, 0.0);
        depth[(150, 50)] = 2.0;
        let pts = backproject_points(&depth, &c, &Pose::identity(), None).unwrap();
        assert_eq!(pts[0].1, Vector3::new(2.0, 0.0, 2.0));
    }

    #[test]
    fn ego_flow_identity_and_translation() {
        let c = cam();
        let depth = Image::new(100, 100, 4.0);
        let zero = compute_ego_flow(&depth, &c, &Pose::identity(), &Pose::identity()).unwrap();
        assert!(zero.data().iter().all(|f| f.unwrap() == [0.0, 0.0]));

        // previous camera sits 0.1 m to the right: points appear shifted left there
        let prev = Pose::from_translation(Vector3::new(0.1, 0.0, 0.0));
        let ego = compute_ego_flow(&depth, &c, &Pose::identity(), &prev).unwrap();
        for f in ego.data() {
            let f = f.unwrap();
            assert_relative_eq!(f[0], -100.0 * 0.1 / 4.0, epsilon = 1e-9);
            assert_relative_eq!(f[1], 0.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn rotation_only_ego_flow_ignores_depth() {
        let c = cam();
        let near = Image::new(100, 100, 1.0);
        let far = Image::new(100, 100, 7.0);
        let prev = Pose::new(UnitQuaternion::from_euler_angles(0.02, -0.03, 0.01), Vector3::zeros());
        let a = compute_ego_flow(&near, &c, &Pose::identity(), &prev).unwrap();
        let b = compute_ego_flow(&far, &c, &Pose::identity(), &prev).unwrap();
        for (p, q) in a.data().iter().zip(b.data()) {
            let (p, q) = (p.unwrap(), q.unwrap());
            assert_relative_eq!(p[0], q[0], epsilon = 1e-9);
            assert_relative_eq!(p[1], q[1], epsilon = 1e-9);
        }
    }

    #[test]
    fn block_residual_becomes_mask() {
        let c = cam();
        let depth = Image::new(100, 100, 3.0);
        let mut flow = Image::new(100, 100, [0.0, 0.0]);
        for y in 20..30 {
            for x in 40..52 {
                flow[(x, y)] = [3.0, -4.0];
            }
        }
        let m = segment_motion(&flow, &depth, &c, &Pose::identity(), &Pose::identity(), 1.0).unwrap();
        let expect = Image::from_fn(100, 100, |x, y| (40..52).contains(&x) && (20..30).contains(&y));
        assert_eq!(m, expect);
    }

    #[test]
    fn specks_and_small_blobs_are_removed() {
        let c = cam();
        let depth = Image::new(100, 100, 3.0);
        let mut flow = Image::new(100, 100, [0.0, 0.0]);
        flow[(10, 10)] = [9.0, 0.0];
        for y in 60..63 {
            for x in 60..63 {
                flow[(x, y)] = [9.0, 0.0];
            }
        }
        let m = segment_motion(&flow, &depth, &c, &Pose::identity(), &Pose::identity(), 1.0).unwrap();
        assert_eq!(m.count(), 0);
    }

    #[test]
    fn inverse_depth_bilinear_is_exact_on_planes() {
        let c = cam();
        // plane z = 2 + 0.01 x_cam... expressed through its inverse depth
        let inv = |u: f64, v: f64| 0.4 + 0.001 * (u - 50.0) - 0.0005 * (v - 50.0);
        let depth = Image::from_fn(100, 100, |x, y| 1.0 / inv(x as f64, y as f64));
        let d = depth.sample_depth(33.25, 71.5).unwrap();
        assert_relative_eq!(d, 1.0 / inv(33.25, 71.5), max_relative = 1e-12);
        let _ = c;
    }

    #[test]
    fn sampling_rejects_invalid_and_edges() {
        let mut depth = Image::new(10, 10, 2.0);
        depth[(5, 5)] = 0.0;
        assert!(depth.sample_depth(4.5, 4.5).is_none());
        assert!(depth.sample_depth(4.0, 4.0).is_some());
        depth[(5, 5)] = 5.0;
        assert!(depth.sample_depth(4.5, 4.5).is_none());
        assert!(depth.sample_depth(9.0, 9.0).is_some());
        assert!(depth.sample_depth(9.01, 2.0).is_none());
        assert!(depth.sample_depth(-0.01, 2.0).is_none());
    }

    fn frame(depth: DepthImage, flow: FlowImage, pose: Pose, t: i64) -> FrameBundle {
        let (w, h) = depth.dims();
        FrameBundle {
            rgb: Image::new(w, h, [0.0; 3]),
            depth,
            pose,
            timestamp: t,
            flow_back: Some(flow),
            motion_mask: None,
        }
    }

    #[test]
    fn zero_flow_static_identity() {
        let c = cam();
        let depth = Image::new(100, 100, 2.0);
        let ft = frame(depth.clone(), Image::new(100, 100, [0.0, 0.0]), Pose::identity(), 1);
        let fp = frame(depth, Image::new(100, 100, [0.0, 0.0]), Pose::identity(), 0);
        let mask = Image::from_fn(100, 100, |x, _| x < 30);
        for mode in [FlowMode::ExactCorrespondence, FlowMode::Linearized] {
            let field = lift_gs_flow(&ft, &fp, &c, &mask, mode).unwrap();
            assert_eq!(field.len(), 3000);
            assert!(field.displacements.iter().all(|d| d.norm() == 0.0));
        }
    }

    #[test]
    fn plane_translation_is_recovered() {
        // fronto-parallel plane at z = 2 moved by (-0.1, 0, 0): frame-t pixels
        // look back +5 px to find their frame t-1 position
        let c = cam();
        let depth = Image::new(100, 100, 2.0);
        let ft = frame(depth.clone(), Image::new(100, 100, [5.0, 0.0]), Pose::identity(), 1);
        let fp = frame(depth, Image::new(100, 100, [0.0, 0.0]), Pose::identity(), 0);
        let mask = Image::from_fn(100, 100, |x, y| (20..40).contains(&x) && (20..40).contains(&y));
        for mode in [FlowMode::ExactCorrespondence, FlowMode::Linearized] {
            let field = lift_gs_flow(&ft, &fp, &c, &mask, mode).unwrap();
            for d in &field.displacements {
                assert_relative_eq!(*d, Vector3::new(0.1, 0.0, 0.0), epsilon = 1e-12);
            }
        }
    }

    #[test]
    fn empty_flow_error() {
        let c = cam();
        let depth = Image::new(100, 100, 2.0);
        let ft = frame(depth.clone(), Image::new(100, 100, [500.0, 0.0]), Pose::identity(), 1);
        let fp = frame(depth, Image::new(100, 100, [0.0, 0.0]), Pose::identity(), 0);
        let mask = Image::new(100, 100, true);
        let err = lift_gs_flow(&ft, &fp, &c, &mask, FlowMode::ExactCorrespondence).unwrap_err();
        assert!(matches!(err, Error::EmptyFlow));
    }
}

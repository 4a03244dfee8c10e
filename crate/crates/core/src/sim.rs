//! Analytic ray-cast generator of dynamic RGB-D sequences with exact
//! ground-truth depth, backward flow, motion masks and object trajectories.
//!
//! World convention: +y points down, matching the camera frame, so a camera
//! at `(0, 0, -3)` looking at the origin has the identity rotation.

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::DepthSampler;
use crate::frame::FrameBundle;
use crate::geometry::{CameraModel, Pose};
use crate::image::{FlowImage, Image, MaskImage};

/// Flow value written for pixels without a valid correspondence.
pub const FLOW_UNKNOWN: f64 = 1e10;

const AMBIENT: f64 = 0.2;
const HIT_EPS: f64 = 1e-9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Texture {
    Solid { color: [f64; 3] },
    Checker { period: f64, color_a: [f64; 3], color_b: [f64; 3] },
    /// Linear ramp along one local axis, centered on the object.
    Gradient { axis: usize, length: f64, from: [f64; 3], to: [f64; 3] },
}

impl Texture {
    /// Albedo at local point `p`; `skip_axis` drops the coordinate normal to
    /// a planar face so its floating-point noise cannot flip checker cells.
    fn albedo(&self, p: &Vector3<f64>, skip_axis: Option<usize>) -> [f64; 3] {
        match self {
            Texture::Solid { color } => *color,
            Texture::Checker { period, color_a, color_b } => {
                let mut parity = 0i64;
                for k in 0..3 {
                    if Some(k) != skip_axis {
                        parity += (p[k] / period).floor() as i64;
                    }
                }
                if parity.rem_euclid(2) == 0 {
                    *color_a
                } else {
                    *color_b
                }
            }
            Texture::Gradient { axis, length, from, to } => {
                let s = (p[*axis] / length + 0.5).clamp(0.0, 1.0);
                [0, 1, 2].map(|c| from[c] + (to[c] - from[c]) * s)
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Shape {
    Sphere { radius: f64 },
    Box { half_extents: [f64; 3] },
}

impl Shape {
    fn bounding_radius(&self) -> f64 {
        match self {
            Shape::Sphere { radius } => *radius,
            Shape::Box { half_extents: h } => (h[0] * h[0] + h[1] * h[1] + h[2] * h[2]).sqrt(),
        }
    }
}

/// Object center as a function of (continuous) frame time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Trajectory {
    Fixed { position: [f64; 3] },
    /// `start + velocity * t`, velocity in m/frame.
    ConstantVelocity { start: [f64; 3], velocity: [f64; 3] },
    /// Horizontal circle (x-z plane), `rate` in rad/frame.
    Circular { center: [f64; 3], radius: f64, rate: f64, phase: f64 },
    /// `c0 + c1 t + c2 t^2 + c3 t^3`.
    Cubic { coeffs: [[f64; 3]; 4] },
}

impl Trajectory {
    pub fn position(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Fixed { position } => Vector3::from(*position),
            Trajectory::ConstantVelocity { start, velocity } => Vector3::from(*start) + Vector3::from(*velocity) * t,
            Trajectory::Circular { center, radius, rate, phase } => {
                let a = phase + rate * t;
                Vector3::from(*center) + Vector3::new(radius * a.cos(), 0.0, radius * a.sin())
            }
            Trajectory::Cubic { coeffs: c } => {
                Vector3::from(c[0]) + (Vector3::from(c[1]) + (Vector3::from(c[2]) + Vector3::from(c[3]) * t) * t) * t
            }
        }
    }

    pub fn velocity(&self, t: f64) -> Vector3<f64> {
        match self {
            Trajectory::Fixed { .. } => Vector3::zeros(),
            Trajectory::ConstantVelocity { velocity, .. } => Vector3::from(*velocity),
            Trajectory::Circular { radius, rate, phase, .. } => {
                let a = phase + rate * t;
                Vector3::new(-radius * rate * a.sin(), 0.0, radius * rate * a.cos())
            }
            Trajectory::Cubic { coeffs: c } => {
                Vector3::from(c[1]) + (Vector3::from(c[2]) * 2.0 + Vector3::from(c[3]) * (3.0 * t)) * t
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    pub texture: Texture,
    pub trajectory: Trajectory,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub texture: Texture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CameraPath {
    Static { eye: [f64; 3], target: [f64; 3] },
    /// Fixed orientation, eye moving at `velocity` m/frame.
    Linear { eye: [f64; 3], target: [f64; 3], velocity: [f64; 3] },
    /// Circles `center` at `radius` and height offset `height`, looking at it.
    Orbit { center: [f64; 3], radius: f64, height: f64, rate: f64, phase: f64 },
    Explicit { poses: Vec<Pose> },
}

const WORLD_UP: Vector3<f64> = Vector3::new(0.0, -1.0, 0.0);

impl CameraPath {
    pub fn pose(&self, t: usize) -> Result<Pose> {
        match self {
            CameraPath::Static { eye, target } => Pose::look_at(Vector3::from(*eye), Vector3::from(*target), WORLD_UP),
            CameraPath::Linear { eye, target, velocity } => {
                let base = Pose::look_at(Vector3::from(*eye), Vector3::from(*target), WORLD_UP)?;
                Ok(Pose::new(base.rotation, base.translation + Vector3::from(*velocity) * t as f64))
            }
            CameraPath::Orbit { center, radius, height, rate, phase } => {
                let a = phase + rate * t as f64;
                let c = Vector3::from(*center);
                let eye = c + Vector3::new(radius * a.sin(), *height, -radius * a.cos());
                Pose::look_at(eye, c, WORLD_UP)
            }
            CameraPath::Explicit { poses } => poses
                .get(t)
                .copied()
                .ok_or_else(|| Error::SpecValidation(format!("no explicit pose for frame {t}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub room: RoomSpec,
    pub objects: Vec<ObjectSpec>,
    pub camera_path: CameraPath,
    pub frames: usize,
    pub cam: CameraModel,
    #[serde(default)]
    pub seed: u64,
    /// Standard deviation of additive depth noise, meters.
    #[serde(default)]
    pub depth_noise_std: f64,
    /// Direction the light travels (toward the scene).
    #[serde(default = "default_light")]
    pub light_dir: [f64; 3],
}

fn default_light() -> [f64; 3] {
    [0.3, 0.8, 0.5]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Surface {
    Room,
    Object(usize),
}

#[derive(Clone, Copy, Debug)]
pub struct Hit {
    /// Ray parameter; equals camera z for camera rays built with unit z.
    pub s: f64,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    pub surface: Surface,
    /// Axis of a planar face, used for texture lookup.
    face_axis: Option<usize>,
}

fn checker_room() -> Texture {
    Texture::Checker {
        period: 0.25,
        color_a: [0.85, 0.8, 0.7],
        color_b: [0.25, 0.3, 0.4],
    }
}

impl SceneSpec {
    /// Standard dynamic test scene: a checkered sphere circling in front of
    /// a slowly translating camera, plus a static box.
    pub fn moving_sphere(width: usize, height: usize, frames: usize) -> Self {
        let f = 0.85 * width as f64;
        Self {
            room: RoomSpec {
                min: [-2.5, -1.5, -4.0],
                max: [2.5, 1.5, 3.0],
                texture: checker_room(),
            },
            objects: vec![
                ObjectSpec {
                    shape: Shape::Sphere { radius: 0.35 },
                    texture: Texture::Checker {
                        period: 0.15,
                        color_a: [0.9, 0.25, 0.2],
                        color_b: [0.95, 0.85, 0.2],
                    },
                    trajectory: Trajectory::Circular {
                        center: [0.0, 0.2, 0.6],
                        radius: 0.7,
                        rate: std::f64::consts::TAU / 60.0,
                        phase: 0.0,
                    },
                },
                ObjectSpec {
                    shape: Shape::Box { half_extents: [0.3, 0.4, 0.3] },
                    texture: Texture::Gradient {
                        axis: 1,
                        length: 0.8,
                        from: [0.2, 0.6, 0.3],
                        to: [0.7, 0.9, 0.6],
                    },
                    trajectory: Trajectory::Fixed { position: [-1.3, 0.9, 1.8] },
                },
            ],
            camera_path: CameraPath::Linear {
                eye: [-0.2, -0.1, -2.2],
                target: [0.0, 0.2, 1.0],
                velocity: [0.006, 0.0, 0.0],
            },
            frames,
            cam: CameraModel::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height)
                .expect("valid intrinsics"),
            seed: 0,
            depth_noise_std: 0.0,
            light_dir: default_light(),
        }
    }

    /// Same room with a single sphere moving at constant velocity and a
    /// static camera.
    pub fn linear_sphere(width: usize, height: usize, frames: usize, velocity: [f64; 3]) -> Self {
        let mut s = Self::moving_sphere(width, height, frames);
        s.objects.truncate(1);
        s.objects[0].trajectory = Trajectory::ConstantVelocity {
            start: [-0.3, 0.1, 0.6],
            velocity,
        };
        s.camera_path = CameraPath::Static {
            eye: [0.0, 0.0, -2.0],
            target: [0.0, 0.0, 1.0],
        };
        s
    }

    /// Room with static objects only, seen through a narrower lens from a
    /// camera sweeping a shallow arc.
    pub fn static_room(width: usize, height: usize, frames: usize) -> Self {
        let mut s = Self::moving_sphere(width, height, frames);
        s.objects[0].trajectory = Trajectory::Fixed { position: [0.4, 0.3, 1.6] };
        s.objects[1].trajectory = Trajectory::Fixed { position: [-0.9, 0.9, 2.2] };
        let f = 1.3 * width as f64;
        s.cam = CameraModel::new(f, f, width as f64 / 2.0, height as f64 / 2.0, width, height).expect("valid intrinsics");
        s.camera_path = CameraPath::Orbit {
            center: [0.0, 0.3, 1.6],
            radius: 1.6,
            height: -0.3,
            rate: 0.004,
            phase: -0.04,
        };
        s
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::SpecValidation(m));
        self.cam.validate().map_err(|e| Error::SpecValidation(e.to_string()))?;
        if self.frames == 0 {
            return bad("scene needs at least one frame".into());
        }
        let (lo, hi) = (Vector3::from(self.room.min), Vector3::from(self.room.max));
        if (0..3).any(|k| !(hi[k] > lo[k])) {
            return bad("room max must exceed min on every axis".into());
        }
        if !(self.depth_noise_std >= 0.0) {
            return bad("depth noise must be >= 0".into());
        }
        let light = Vector3::from(self.light_dir);
        if !(light.norm() > 0.0) {
            return bad("light direction must be nonzero".into());
        }
        let inside = |p: &Vector3<f64>, margin: f64| (0..3).all(|k| p[k] - margin > lo[k] && p[k] + margin < hi[k]);
        for t in 0..self.frames {
            let pose = self.camera_path.pose(t).map_err(|e| Error::SpecValidation(e.to_string()))?;
            if !inside(&pose.translation, 0.0) {
                return bad(format!("camera leaves the room at frame {t}"));
            }
            for (i, o) in self.objects.iter().enumerate() {
                let c = o.trajectory.position(t as f64);
                if !c.iter().all(|v| v.is_finite()) {
                    return bad(format!("object {i} trajectory is not finite at frame {t}"));
                }
                if !inside(&c, o.shape.bounding_radius()) {
                    return bad(format!("object {i} escapes the room at frame {t}"));
                }
                if (pose.translation - c).norm() <= o.shape.bounding_radius() {
                    return bad(format!("camera is inside object {i} at frame {t}"));
                }
            }
        }
        Ok(())
    }

    /// Nearest surface along `origin + s * dir`, `s > 0`. The room encloses
    /// the camera so every ray hits something.
    pub fn cast(&self, time: f64, origin: &Vector3<f64>, dir: &Vector3<f64>) -> Hit {
        let (lo, hi) = (Vector3::from(self.room.min), Vector3::from(self.room.max));
        // exit through the room walls
        let mut best = Hit {
            s: f64::INFINITY,
            point: Vector3::zeros(),
            normal: Vector3::zeros(),
            surface: Surface::Room,
            face_axis: None,
        };
        for k in 0..3 {
            if dir[k] == 0.0 {
                continue;
            }
            let (bound, n) = if dir[k] > 0.0 { (hi[k], -1.0) } else { (lo[k], 1.0) };
            let s = (bound - origin[k]) / dir[k];
            if s < best.s {
                let mut normal = Vector3::zeros();
                normal[k] = n;
                best = Hit {
                    s,
                    point: Vector3::zeros(),
                    normal,
                    surface: Surface::Room,
                    face_axis: Some(k),
                };
            }
        }
        for (i, o) in self.objects.iter().enumerate() {
            let c = o.trajectory.position(time);
            let oc = origin - c;
            match &o.shape {
                Shape::Sphere { radius } => {
                    let a = dir.dot(dir);
                    let b = oc.dot(dir);
                    let cc = oc.dot(&oc) - radius * radius;
                    let disc = b * b - a * cc;
                    if disc < 0.0 {
                        continue;
                    }
                    let s = (-b - disc.sqrt()) / a;
                    if s > HIT_EPS && s < best.s {
                        let p = origin + dir * s;
                        best = Hit {
                            s,
                            point: p,
                            normal: (p - c) / *radius,
                            surface: Surface::Object(i),
                            face_axis: None,
                        };
                    }
                }
                Shape::Box { half_extents: h } => {
                    let (mut s0, mut s1) = (f64::NEG_INFINITY, f64::INFINITY);
                    let mut axis = 0;
                    let mut sign = 0.0;
                    let mut miss = false;
                    for k in 0..3 {
                        if dir[k] == 0.0 {
                            if oc[k].abs() > h[k] {
                                miss = true;
                            }
                            continue;
                        }
                        let ta = (-h[k] - oc[k]) / dir[k];
                        let tb = (h[k] - oc[k]) / dir[k];
                        let (tn, tf) = if ta < tb { (ta, tb) } else { (tb, ta) };
                        if tn > s0 {
                            s0 = tn;
                            axis = k;
                            sign = if dir[k] > 0.0 { -1.0 } else { 1.0 };
                        }
                        s1 = s1.min(tf);
                    }
                    if miss || s0 > s1 || s0 <= HIT_EPS || s0 >= best.s {
                        continue;
                    }
                    let mut normal = Vector3::zeros();
                    normal[axis] = sign;
                    best = Hit {
                        s: s0,
                        point: Vector3::zeros(),
                        normal,
                        surface: Surface::Object(i),
                        face_axis: Some(axis),
                    };
                }
            }
        }
        best.point = origin + dir * best.s;
        best
    }

    fn shade(&self, time: f64, hit: &Hit) -> [f64; 3] {
        let albedo = match hit.surface {
            Surface::Room => self.room.texture.albedo(&hit.point, hit.face_axis),
            Surface::Object(i) => {
                let o = &self.objects[i];
                let local = hit.point - o.trajectory.position(time);
                o.texture.albedo(&local, hit.face_axis)
            }
        };
        let l = Vector3::from(self.light_dir).normalize();
        let lambert = (-hit.normal.dot(&l)).max(0.0);
        let k = AMBIENT + (1.0 - AMBIENT) * lambert;
        albedo.map(|a| (a * k).clamp(0.0, 1.0))
    }

    fn surface_velocity(&self, time: f64, surface: Surface) -> Vector3<f64> {
        match surface {
            Surface::Room => Vector3::zeros(),
            Surface::Object(i) => self.objects[i].trajectory.velocity(time),
        }
    }

    /// Where the surface point `p` (on `surface` at time `t`) was at `t_prev`.
    fn carry_back(&self, p: &Vector3<f64>, surface: Surface, t: f64, t_prev: f64) -> Vector3<f64> {
        match surface {
            Surface::Room => *p,
            Surface::Object(i) => {
                let tr = &self.objects[i].trajectory;
                let (now, then) = (tr.position(t), tr.position(t_prev));
                if now == then {
                    *p
                } else {
                    p - now + then
                }
            }
        }
    }

    fn camera_ray(&self, pose: &Pose, u: f64, v: f64) -> Vector3<f64> {
        pose.rotation_matrix() * self.cam.pixel_ray(u, v)
    }
}

/// Ground-truth correspondence from frame `t` back to `t_prev`.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowTruth {
    /// Geometric backward flow for every pixel; unknown only where the
    /// earlier position is behind the camera.
    pub flow: FlowImage,
    /// Pixels whose earlier position is hidden behind another surface.
    pub occluded: MaskImage,
    /// Pixels whose surface moves at time `t`.
    pub mask: MaskImage,
}

impl FlowTruth {
    /// Flow with occluded pixels marked unknown, as written to frames.
    pub fn visible_flow(&self) -> FlowImage {
        Image::from_fn(self.flow.width(), self.flow.height(), |x, y| {
            if self.occluded[(x, y)] {
                [FLOW_UNKNOWN, FLOW_UNKNOWN]
            } else {
                self.flow[(x, y)]
            }
        })
    }
}

/// Flow and motion mask of frame `t` relative to frame `t_prev`.
pub fn analytic_flow_between(spec: &SceneSpec, t: usize, t_prev: usize) -> Result<FlowTruth> {
    let cam = &spec.cam;
    let pose = spec.camera_path.pose(t)?;
    let pose_prev = spec.camera_path.pose(t_prev)?;
    let (tf, tp) = (t as f64, t_prev as f64);
    let rows: Vec<Vec<([f64; 2], bool, bool)>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            (0..cam.width)
                .map(|x| {
                    let dir = spec.camera_ray(&pose, x as f64, y as f64);
                    let hit = spec.cast(tf, &pose.translation, &dir);
                    let moving = spec.surface_velocity(tf, hit.surface) != Vector3::zeros();
                    let still = pose == pose_prev
                        && spec.carry_back(&hit.point, hit.surface, tf, tp) == hit.point;
                    if t == t_prev || still {
                        return ([0.0, 0.0], false, moving);
                    }
                    let back = spec.carry_back(&hit.point, hit.surface, tf, tp);
                    let pc = pose_prev.to_camera(&back);
                    let Some([u, v]) = cam.project(&pc) else {
                        return ([FLOW_UNKNOWN, FLOW_UNKNOWN], false, moving);
                    };
                    // is the carried point the first thing seen along its ray then?
                    let ray = spec.camera_ray(&pose_prev, u, v);
                    let first = spec.cast(tp, &pose_prev.translation, &ray);
                    let occluded = first.s < pc.z * (1.0 - 1e-9) - 1e-9;
                    ([u - x as f64, v - y as f64], occluded, moving)
                })
                .collect()
        })
        .collect();
    let px = |x: usize, y: usize| rows[y][x];
    Ok(FlowTruth {
        flow: Image::from_fn(cam.width, cam.height, |x, y| px(x, y).0),
        occluded: Image::from_fn(cam.width, cam.height, |x, y| px(x, y).1),
        mask: Image::from_fn(cam.width, cam.height, |x, y| px(x, y).2),
    })
}

/// Flow to the previous frame and the motion mask of frame `t`. Frame 0
/// gets zero flow by convention.
pub fn analytic_flow_and_mask(spec: &SceneSpec, t: usize) -> Result<(FlowImage, MaskImage)> {
    let truth = analytic_flow_between(spec, t, t.saturating_sub(1))?;
    Ok((truth.visible_flow(), truth.mask))
}

/// Depth of the scene as seen from `pose` at frame time `time`, sampled by
/// casting a ray through any sub-pixel location.
pub struct SceneDepth<'a> {
    pub spec: &'a SceneSpec,
    pub time: f64,
    pub pose: Pose,
}

impl DepthSampler for SceneDepth<'_> {
    fn sample_depth(&self, u: f64, v: f64) -> Option<f64> {
        let cam = &self.spec.cam;
        if !(u >= 0.0 && v >= 0.0 && u <= (cam.width - 1) as f64 && v <= (cam.height - 1) as f64) {
            return None;
        }
        let dir = self.spec.camera_ray(&self.pose, u, v);
        Some(self.spec.cast(self.time, &self.pose.translation, &dir).s)
    }
}

/// A materialized sequence with its ground truth.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub cam: CameraModel,
    pub frames: Vec<FrameBundle>,
    /// Object centers per frame, `trajectories[object][frame]`.
    pub trajectories: Vec<Vec<Vector3<f64>>>,
}

/// Renders one frame; `prev` selects the frame the backward flow points to.
pub fn render_frame(spec: &SceneSpec, t: usize, prev: usize) -> Result<FrameBundle> {
    let cam = &spec.cam;
    let pose = spec.camera_path.pose(t)?;
    let tf = t as f64;
    let rows: Vec<Vec<([f64; 3], f64)>> = (0..cam.height)
        .into_par_iter()
        .map(|y| {
            (0..cam.width)
                .map(|x| {
                    let dir = spec.camera_ray(&pose, x as f64, y as f64);
                    let hit = spec.cast(tf, &pose.translation, &dir);
                    (spec.shade(tf, &hit), hit.s)
                })
                .collect()
        })
        .collect();
    let rgb = Image::from_fn(cam.width, cam.height, |x, y| rows[y][x].0);
    let mut depth = Image::from_fn(cam.width, cam.height, |x, y| rows[y][x].1);
    if spec.depth_noise_std > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed ^ (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, spec.depth_noise_std).map_err(|e| Error::SpecValidation(e.to_string()))?;
        for d in depth.data_mut() {
            *d = (*d + normal.sample(&mut rng)).max(0.0);
        }
    }
    let truth = analytic_flow_between(spec, t, prev)?;
    Ok(FrameBundle {
        rgb,
        depth,
        pose,
        timestamp: t as i64,
        flow_back: Some(truth.visible_flow()),
        motion_mask: Some(truth.mask),
    })
}

/// Materializes every frame of `spec` with flow to the preceding frame.
pub fn generate_scene(spec: &SceneSpec) -> Result<Sequence> {
    spec.validate()?;
    let frames = (0..spec.frames)
        .map(|t| render_frame(spec, t, t.saturating_sub(1)))
        .collect::<Result<Vec<_>>>()?;
    let trajectories = spec
        .objects
        .iter()
        .map(|o| (0..spec.frames).map(|t| o.trajectory.position(t as f64)).collect())
        .collect();
    Ok(Sequence {
        cam: spec.cam,
        frames,
        trajectories,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn sphere_scene(traj: Trajectory, path: CameraPath) -> SceneSpec {
        SceneSpec {
            room: RoomSpec {
                min: [-3.0, -3.0, -3.0],
                max: [3.0, 3.0, 6.0],
                texture: checker_room(),
            },
            objects: vec![ObjectSpec {
                shape: Shape::Sphere { radius: 0.2 },
                texture: Texture::Solid { color: [1.0, 0.0, 0.0] },
                trajectory: traj,
            }],
            camera_path: path,
            frames: 3,
            cam: CameraModel::new(100.0, 100.0, 50.0, 50.0, 100, 100).unwrap(),
            seed: 0,
            depth_noise_std: 0.0,
            light_dir: default_light(),
        }
    }

    fn origin_cam() -> CameraPath {
        CameraPath::Static {
            eye: [0.0, 0.0, 0.0],
            target: [0.0, 0.0, 1.0],
        }
    }

    #[test]
    fn frozen_world_is_frozen() {
        let spec = sphere_scene(Trajectory::Fixed { position: [0.0, 0.0, 2.0] }, origin_cam());
        let seq = generate_scene(&spec).unwrap();
        for f in &seq.frames {
            assert!(f.flow_back.as_ref().unwrap().data().iter().all(|v| *v == [0.0, 0.0]));
            assert_eq!(f.motion_mask.as_ref().unwrap().count(), 0);
        }
        assert_eq!(seq.frames[0].rgb, seq.frames[1].rgb);
        assert_eq!(seq.frames[0].depth, seq.frames[2].depth);
    }

    #[test]
    fn sphere_mask_is_projected_disc() {
        let spec = sphere_scene(
            Trajectory::ConstantVelocity {
                start: [0.0, 0.0, 2.0],
                velocity: [-0.1, 0.0, 0.0],
            },
            origin_cam(),
        );
        let (_, mask) = analytic_flow_and_mask(&spec, 0).unwrap();
        // silhouette radius of a sphere: f * r / sqrt(z^2 - r^2)
        let r_px = 100.0 * 0.2 / (4.0f64 - 0.04).sqrt();
        let mut inner = 0;
        let mut outer = 0;
        for y in 0..100 {
            for x in 0..100 {
                let d = ((x as f64 - 50.0).powi(2) + (y as f64 - 50.0).powi(2)).sqrt();
                if d < r_px - 2.0 {
                    inner += 1;
                    assert!(mask[(x, y)]);
                }
                if d > r_px + 2.0 {
                    outer += 1;
                    assert!(!mask[(x, y)]);
                }
            }
        }
        assert!(inner > 100 && outer > 100);
        assert_relative_eq!(r_px, 10.0, epsilon = 0.1);
    }

    #[test]
    fn depth_is_camera_z() {
        let spec = sphere_scene(Trajectory::Fixed { position: [0.0, 0.0, 2.0] }, origin_cam());
        let f = render_frame(&spec, 0, 0).unwrap();
        assert_relative_eq!(f.depth[(50, 50)], 1.8, epsilon = 1e-12);
        // back wall at z = 6
        assert_relative_eq!(f.depth[(3, 3)], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn escaping_object_is_rejected() {
        let mut spec = sphere_scene(
            Trajectory::ConstantVelocity {
                start: [0.0, 0.0, 2.0],
                velocity: [2.0, 0.0, 0.0],
            },
            origin_cam(),
        );
        assert!(matches!(spec.validate(), Err(Error::SpecValidation(_))));
        spec.frames = 1;
        spec.validate().unwrap();
    }

    #[test]
    fn circular_velocity_matches_position_derivative() {
        let tr = Trajectory::Circular {
            center: [0.0, 0.0, 1.0],
            radius: 0.5,
            rate: 0.3,
            phase: 0.2,
        };
        let h = 1e-6;
        let fd = (tr.position(2.0 + h) - tr.position(2.0 - h)) / (2.0 * h);
        assert_relative_eq!(fd, tr.velocity(2.0), epsilon = 1e-8);
        let cubic = Trajectory::Cubic {
            coeffs: [[0.0, 1.0, 2.0], [0.1, 0.0, 0.0], [0.0, 0.02, 0.0], [0.001, 0.0, -0.003]],
        };
        let fd = (cubic.position(3.0 + h) - cubic.position(3.0 - h)) / (2.0 * h);
        assert_relative_eq!(fd, cubic.velocity(3.0), epsilon = 1e-8);
    }

    #[test]
    fn standard_scenes_validate() {
        SceneSpec::moving_sphere(120, 90, 60).validate().unwrap();
        SceneSpec::static_room(64, 64, 20).validate().unwrap();
        SceneSpec::linear_sphere(96, 96, 30, [0.02, 0.0, 0.0]).validate().unwrap();
    }
}

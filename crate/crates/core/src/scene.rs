//! Synthetic worlds: an ego trajectory plus constant-velocity 3D boxes, and
//! ground-truth labels synchronized to a camera timestamp.

use std::collections::BTreeSet;
use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, FormatError};
use crate::geometry::{yaw_matrix, CameraModel, EgoTrajectory, SE3Pose, Timestamp, Vec3};
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ObjectClass {
    Car,
    Ped,
    Cyc,
}

impl ObjectClass {
    pub const ALL: [ObjectClass; 3] = [ObjectClass::Car, ObjectClass::Ped, ObjectClass::Cyc];

    pub fn index(self) -> usize {
        match self {
            ObjectClass::Car => 0,
            ObjectClass::Ped => 1,
            ObjectClass::Cyc => 2,
        }
    }

    /// Length × width × height in meters.
    pub fn typical_extents(self) -> Vec3 {
        match self {
            ObjectClass::Car => Vec3::new(4.5, 2.0, 1.6),
            ObjectClass::Ped => Vec3::new(0.6, 0.6, 1.7),
            ObjectClass::Cyc => Vec3::new(1.8, 0.6, 1.6),
        }
    }

    pub fn max_speed(self) -> f64 {
        match self {
            ObjectClass::Car => 15.0,
            ObjectClass::Ped => 2.0,
            ObjectClass::Cyc => 8.0,
        }
    }

    fn reflectivity_range(self) -> (f64, f64) {
        match self {
            ObjectClass::Car => (0.35, 0.9),
            ObjectClass::Ped => (0.25, 0.7),
            ObjectClass::Cyc => (0.3, 0.8),
        }
    }

    fn rcs_range(self) -> (f64, f64) {
        match self {
            ObjectClass::Car => (5.0, 15.0),
            ObjectClass::Ped => (-12.0, -4.0),
            ObjectClass::Cyc => (-5.0, 3.0),
        }
    }
}

impl fmt::Display for ObjectClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ObjectClass::Car => "Car",
            ObjectClass::Ped => "Ped",
            ObjectClass::Cyc => "Cyc",
        })
    }
}

/// A labeled box moving with constant velocity in the world frame. The box
/// rests on its center; `center` is given at `reference_time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxObject {
    pub id: u32,
    pub class: ObjectClass,
    pub reference_time: Timestamp,
    pub center: Vec3,
    pub extents: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub reflectivity: f64,
    /// Radar cross section in dBsm.
    pub rcs: f64,
}

/// Kinematic state of a box at one instant.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BoxState {
    pub center: Vec3,
    pub yaw: f64,
    pub velocity: Vec3,
    pub extents: Vec3,
}

impl BoxObject {
    pub fn state_at(&self, t: Timestamp) -> BoxState {
        let (center, yaw, velocity) = object_state_at(self, t);
        BoxState { center, yaw, velocity, extents: self.extents }
    }
}

/// Constant-velocity state: center advances by `velocity·(t - t_ref)`; yaw
/// and velocity are unchanged.
pub fn object_state_at(obj: &BoxObject, t: Timestamp) -> (Vec3, f64, Vec3) {
    let dt = t - obj.reference_time;
    (obj.center + obj.velocity * dt, obj.yaw, obj.velocity)
}

/// Ray entry distance for an axis-aligned box centred at the origin, given
/// the ray in box coordinates. `None` when missed or starting inside.
pub(crate) fn slab_hit(o: &Vec3, d: &Vec3, h: &Vec3) -> Option<f64> {
    let mut t_near = f64::NEG_INFINITY;
    let mut t_far = f64::INFINITY;
    for axis in 0..3 {
        if d[axis].abs() < 1e-15 {
            if o[axis].abs() > h[axis] {
                return None;
            }
            continue;
        }
        let a = (-h[axis] - o[axis]) / d[axis];
        let b = (h[axis] - o[axis]) / d[axis];
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        t_near = t_near.max(lo);
        t_far = t_far.min(hi);
        if t_near > t_far {
            return None;
        }
    }
    (t_near > 0.0).then_some(t_near)
}

impl BoxState {
    /// World-from-box transform.
    pub fn pose(&self) -> SE3Pose {
        SE3Pose::from_yaw(self.yaw, self.center)
    }

    pub fn half_extents(&self) -> Vec3 {
        self.extents * 0.5
    }

    pub fn corners(&self) -> [Vec3; 8] {
        let h = self.half_extents();
        let pose = self.pose();
        let mut out = [Vec3::zeros(); 8];
        for (i, c) in out.iter_mut().enumerate() {
            let sx = if i & 1 == 0 { -1.0 } else { 1.0 };
            let sy = if i & 2 == 0 { -1.0 } else { 1.0 };
            let sz = if i & 4 == 0 { -1.0 } else { 1.0 };
            *c = pose.transform_point(&Vec3::new(sx * h.x, sy * h.y, sz * h.z));
        }
        out
    }

    /// Distance along a world-frame ray to the first box surface hit, if
    /// any (slab method). Rays starting inside the box report no hit.
    pub fn ray_hit(&self, origin: &Vec3, dir: &Vec3) -> Option<f64> {
        let inv = self.pose().inverse();
        slab_hit(&inv.transform_point(origin), &inv.transform_vector(dir), &self.half_extents())
    }

    /// Point on (or in) the box closest to `p`, world frame.
    pub fn closest_point(&self, p: &Vec3) -> Vec3 {
        let pose = self.pose();
        let local = pose.inverse().transform_point(p);
        let h = self.half_extents();
        let clamped = Vec3::new(local.x.clamp(-h.x, h.x), local.y.clamp(-h.y, h.y), local.z.clamp(-h.z, h.z));
        pose.transform_point(&clamped)
    }
}

/// Edges of the box as index pairs into [`BoxState::corners`].
const BOX_EDGES: [(usize, usize); 12] = [(0, 1), (2, 3), (4, 5), (6, 7), (0, 2), (1, 3), (4, 6), (5, 7), (0, 4), (1, 5), (2, 6), (3, 7)];

const NEAR_PLANE: f64 = 0.05;

/// Projected convex hull (counter-clockwise in pixel coordinates) of a box
/// whose corners are given in the camera frame. Edges crossing the near
/// plane are clipped. `None` when the box lies entirely behind the camera.
pub(crate) fn projected_hull(cam: &CameraModel, corners_cam: &[Vec3; 8]) -> Option<Vec<(f64, f64)>> {
    if corners_cam.iter().all(|c| c.z <= NEAR_PLANE) {
        return None;
    }
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(20);
    let proj = |x: &Vec3| (cam.fx * x.x / x.z + cam.cx, cam.fy * x.y / x.z + cam.cy);
    for c in corners_cam {
        if c.z > NEAR_PLANE {
            pts.push(proj(c));
        }
    }
    for &(a, b) in &BOX_EDGES {
        let (pa, pb) = (&corners_cam[a], &corners_cam[b]);
        if (pa.z > NEAR_PLANE) != (pb.z > NEAR_PLANE) {
            let s = (NEAR_PLANE - pa.z) / (pb.z - pa.z);
            let mut x = pa + (pb - pa) * s;
            x.z = NEAR_PLANE;
            pts.push(proj(&x));
        }
    }
    Some(convex_hull(pts))
}

/// Andrew's monotone chain.
pub(crate) fn convex_hull(mut pts: Vec<(f64, f64)>) -> Vec<(f64, f64)> {
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: (f64, f64), a: (f64, f64), b: (f64, f64)| (a.0 - o.0) * (b.1 - o.1) - (a.1 - o.1) * (b.0 - o.0);
    let mut hull: Vec<(f64, f64)> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    hull
}

/// World with a moving ego and constant-velocity objects over
/// `[0, duration]`. The ground plane is z = 0.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub ego: EgoTrajectory,
    pub objects: Vec<BoxObject>,
    pub duration: f64,
}

impl Scene {
    pub fn validate(&self) -> Result<(), Error> {
        if !(self.duration > 0.0) {
            return Err(Error::Data(format!("scene duration {} must be positive", self.duration)));
        }
        let mut ids = BTreeSet::new();
        for obj in &self.objects {
            if !ids.insert(obj.id) {
                return Err(Error::Data(format!("duplicate object id {}", obj.id)));
            }
            if obj.extents.iter().any(|e| !(*e > 0.0)) {
                return Err(Error::Data(format!("object {} has non-positive extents", obj.id)));
            }
        }
        self.ego.reference_pose.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> Result<String, FormatError> {
        Ok(serde_json::to_string_pretty(&SceneDocument { schema_version: SCENE_SCHEMA_VERSION, scene: self.clone() })?)
    }

    pub fn from_json(text: &str) -> Result<Self, Error> {
        let doc: SceneDocument = serde_json::from_str(text).map_err(FormatError::from)?;
        if doc.schema_version != SCENE_SCHEMA_VERSION {
            return Err(FormatError::UnsupportedSchema(doc.schema_version).into());
        }
        doc.scene.validate()?;
        Ok(doc.scene)
    }
}

pub const SCENE_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct SceneDocument {
    schema_version: u32,
    scene: Scene,
}

/// Ground-truth box synchronized to a camera timestamp, in that camera's
/// frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Label {
    pub object_id: u32,
    pub class: ObjectClass,
    pub center: Vec3,
    pub extents: Vec3,
    /// Heading relative to the camera's facing direction about the vertical.
    pub yaw: f64,
    pub velocity: Vec3,
    /// `(u_min, v_min, u_max, v_max)`, clipped to the image.
    pub box_2d: [f64; 4],
}

impl Label {
    pub fn box_center(&self) -> (f64, f64) {
        (0.5 * (self.box_2d[0] + self.box_2d[2]), 0.5 * (self.box_2d[1] + self.box_2d[3]))
    }
}

/// Labels for every object visible to `cam` with the world frozen at `t_c`.
pub fn labels_at(scene: &Scene, cam: &CameraModel, ego: &EgoTrajectory, t_c: Timestamp) -> Vec<Label> {
    let cam_from_world = cam.camera_from_world(&ego.pose_at(t_c));
    let ego_yaw = ego.pose_at(t_c).yaw();
    let (w, h) = (cam.width as f64, cam.height as f64);
    let mut labels = Vec::new();
    for obj in &scene.objects {
        let state = obj.state_at(t_c);
        let corners = state.corners().map(|c| cam_from_world.transform_point(&c));
        let Some(hull) = projected_hull(cam, &corners) else {
            continue;
        };
        let (mut u0, mut v0, mut u1, mut v1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in &hull {
            u0 = u0.min(*u);
            v0 = v0.min(*v);
            u1 = u1.max(*u);
            v1 = v1.max(*v);
        }
        let clipped = [u0.clamp(0.0, w), v0.clamp(0.0, h), u1.clamp(0.0, w), v1.clamp(0.0, h)];
        if clipped[2] - clipped[0] <= 0.0 || clipped[3] - clipped[1] <= 0.0 {
            continue;
        }
        let yaw =
            (state.yaw - ego_yaw - cam.facing_azimuth + std::f64::consts::PI).rem_euclid(std::f64::consts::TAU) - std::f64::consts::PI;
        labels.push(Label {
            object_id: obj.id,
            class: obj.class,
            center: cam_from_world.transform_point(&state.center),
            extents: state.extents,
            yaw,
            velocity: cam_from_world.transform_vector(&state.velocity),
            box_2d: clipped,
        });
    }
    labels
}

/// Parameters for [`generate_scene`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SceneGenConfig {
    pub object_count: usize,
    pub duration: f64,
    /// Ego forward speed, m/s.
    pub ego_speed: f64,
    pub ego_yaw_rate: f64,
    /// Longitudinal placement range in the initial ego frame, meters.
    pub longitudinal_range: [f64; 2],
    /// Range of |lateral offset| from the ego path, meters.
    pub lateral_range: [f64; 2],
    /// Relative weights for Car, Ped, Cyc.
    pub class_weights: [f64; 3],
    /// Fraction of objects that move.
    pub moving_fraction: f64,
    /// Minimum center spacing between objects, meters.
    pub min_spacing: f64,
}

impl Default for SceneGenConfig {
    fn default() -> Self {
        Self {
            object_count: 24,
            duration: 5.0,
            ego_speed: 13.41,
            ego_yaw_rate: 0.0,
            longitudinal_range: [-20.0, 90.0],
            lateral_range: [4.0, 28.0],
            class_weights: [0.4, 0.3, 0.3],
            moving_fraction: 0.5,
            min_spacing: 2.5,
        }
    }
}

impl SceneGenConfig {
    pub fn validate(&self) -> Result<(), Error> {
        let bad = |msg: &str| Err(Error::Config(format!("scene generation: {msg}")));
        if !(self.duration > 0.0) {
            return bad("duration must be positive");
        }
        if !(self.longitudinal_range[1] > self.longitudinal_range[0]) {
            return bad("longitudinal_range must be nonempty");
        }
        if !(self.lateral_range[1] > self.lateral_range[0]) || !(self.lateral_range[0] >= 0.0) {
            return bad("lateral_range must be a nonempty range of nonnegative offsets");
        }
        if self.class_weights.iter().any(|w| !(*w >= 0.0)) || self.class_weights.iter().sum::<f64>() <= 0.0 {
            return bad("class_weights must be nonnegative with positive sum");
        }
        if !(0.0..=1.0).contains(&self.moving_fraction) {
            return bad("moving_fraction must lie in [0, 1]");
        }
        if !(self.min_spacing >= 0.0) || !self.ego_speed.is_finite() || !self.ego_yaw_rate.is_finite() {
            return bad("min_spacing, ego_speed and ego_yaw_rate must be finite and spacing nonnegative");
        }
        Ok(())
    }
}

/// Ego footprint used for the initial-overlap check (length, width).
const EGO_FOOTPRINT: (f64, f64) = (4.8, 2.0);

/// Deterministic scene for `(config, seed)`.
pub fn generate_scene(config: &SceneGenConfig, seed: u64) -> Result<Scene, Error> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::tag::SCENE, 0);
    let ego = EgoTrajectory {
        reference_time: Timestamp(0.0),
        reference_pose: SE3Pose::identity(),
        linear_velocity: Vec3::new(config.ego_speed, 0.0, 0.0),
        yaw_rate: config.ego_yaw_rate,
    };
    let total_weight: f64 = config.class_weights.iter().sum();
    let mut objects: Vec<BoxObject> = Vec::with_capacity(config.object_count);
    let mut id = 0u32;
    let max_attempts = config.object_count * 50 + 50;
    let mut attempts = 0;
    while objects.len() < config.object_count && attempts < max_attempts {
        attempts += 1;
        let pick = rng.random::<f64>() * total_weight;
        let class = if pick < config.class_weights[0] {
            ObjectClass::Car
        } else if pick < config.class_weights[0] + config.class_weights[1] {
            ObjectClass::Ped
        } else {
            ObjectClass::Cyc
        };
        let extents = class.typical_extents();
        let x = rng.random_range(config.longitudinal_range[0]..config.longitudinal_range[1]);
        let side = if rng.random::<bool>() { 1.0 } else { -1.0 };
        let y = side * rng.random_range(config.lateral_range[0]..config.lateral_range[1]);
        let moving = rng.random::<f64>() < config.moving_fraction;
        let along = if rng.random::<bool>() { 0.0 } else { std::f64::consts::PI };
        let heading = along + rng.random_range(-0.25..0.25);
        let speed = if moving { rng.random_range(0.3..=1.0) * class.max_speed() } else { 0.0 };
        let yaw = if moving { heading } else { rng.random_range(-std::f64::consts::PI..std::f64::consts::PI) };
        let (rl, rh) = class.reflectivity_range();
        let (cl, ch) = class.rcs_range();
        let reflectivity = rng.random_range(rl..rh);
        let rcs = rng.random_range(cl..ch);
        let center = Vec3::new(x, y, extents.z / 2.0);

        let radius = 0.5 * extents.x.hypot(extents.y);
        let ego_clear = x.abs() > EGO_FOOTPRINT.0 / 2.0 + radius || y.abs() > EGO_FOOTPRINT.1 / 2.0 + radius;
        let spaced = objects.iter().all(|o| {
            let r = 0.5 * o.extents.x.hypot(o.extents.y);
            (o.center.xy() - center.xy()).norm() >= radius + r + config.min_spacing
        });
        if !ego_clear || !spaced {
            continue;
        }
        objects.push(BoxObject {
            id,
            class,
            reference_time: Timestamp(0.0),
            center,
            extents,
            yaw,
            velocity: yaw_matrix(heading) * Vec3::new(speed, 0.0, 0.0),
            reflectivity,
            rcs,
        });
        id += 1;
    }
    Ok(Scene { ego, objects, duration: config.duration })
}

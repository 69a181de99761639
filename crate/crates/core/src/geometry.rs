//! Rigid-body poses, constant-velocity ego trajectories, per-point motion
//! compensation and pinhole projection.
//!
//! Frame conventions used throughout the crate:
//!
//! * world / ego: x forward, y left, z up; yaw is measured counter-clockwise
//!   about +z from +x.
//! * camera: z along the optical axis, x to the right of the image, y down.

use std::cmp::Ordering;
use std::fmt;
use std::ops::{Add, Mul, Sub};

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::GeometryError;

pub type Vec3 = Vector3<f64>;

/// Absolute simulation time in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub f64);

impl Timestamp {
    pub const fn from_secs(seconds: f64) -> Self {
        Self(seconds)
    }

    pub const fn secs(self) -> f64 {
        self.0
    }

    pub fn is_finite(self) -> bool {
        self.0.is_finite()
    }
}

impl Eq for Timestamp {}

impl PartialOrd for Timestamp {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Timestamp {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

impl Sub for Timestamp {
    type Output = f64;

    fn sub(self, rhs: Self) -> f64 {
        self.0 - rhs.0
    }
}

impl Add<f64> for Timestamp {
    type Output = Timestamp;

    fn add(self, rhs: f64) -> Timestamp {
        Timestamp(self.0 + rhs)
    }
}

impl Sub<f64> for Timestamp {
    type Output = Timestamp;

    fn sub(self, rhs: f64) -> Timestamp {
        Timestamp(self.0 - rhs)
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.6}s", self.0)
    }
}

/// Tolerance used when validating rotation matrices.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

/// A rigid transform in SE(3): `x -> rotation * x + translation`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SE3Pose {
    rotation: Matrix3<f64>,
    translation: Vec3,
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self { rotation: Matrix3::identity(), translation: Vec3::zeros() }
    }

    /// Builds a pose, rejecting rotations that are not proper orthonormal
    /// matrices within [`ROTATION_TOLERANCE`].
    pub fn new(rotation: Matrix3<f64>, translation: Vec3) -> Result<Self, GeometryError> {
        let pose = Self { rotation, translation };
        pose.validate()?;
        Ok(pose)
    }

    pub fn from_translation(translation: Vec3) -> Self {
        Self { rotation: Matrix3::identity(), translation }
    }

    /// Rotation about +z by `yaw` followed by `translation`.
    pub fn from_yaw(yaw: f64, translation: Vec3) -> Self {
        Self { rotation: yaw_matrix(yaw), translation }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    /// Heading of the rotated x axis projected on the xy plane.
    pub fn yaw(&self) -> f64 {
        self.rotation[(1, 0)].atan2(self.rotation[(0, 0)])
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let gram = self.rotation.transpose() * self.rotation;
        let deviation = (gram - Matrix3::identity()).abs().max();
        let det = self.rotation.determinant();
        if !deviation.is_finite()
            || deviation > ROTATION_TOLERANCE
            || (det - 1.0).abs() > ROTATION_TOLERANCE
            || !self.translation.iter().all(|v| v.is_finite())
        {
            return Err(GeometryError::InvalidRotation { deviation, det });
        }
        Ok(())
    }

    pub fn inverse(&self) -> Self {
        let rotation = self.rotation.transpose();
        Self { translation: -(rotation * self.translation), rotation }
    }

    /// `self ∘ rhs`: applies `rhs` first, then `self`.
    pub fn compose(&self, rhs: &SE3Pose) -> Self {
        Self { rotation: self.rotation * rhs.rotation, translation: self.rotation * rhs.translation + self.translation }
    }

    pub fn transform_point(&self, point: &Vec3) -> Vec3 {
        transform_point(self, point)
    }

    pub fn transform_vector(&self, vector: &Vec3) -> Vec3 {
        self.rotation * vector
    }
}

impl Mul for SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: SE3Pose) -> SE3Pose {
        self.compose(&rhs)
    }
}

impl Mul<&SE3Pose> for &SE3Pose {
    type Output = SE3Pose;

    fn mul(self, rhs: &SE3Pose) -> SE3Pose {
        self.compose(rhs)
    }
}

pub fn yaw_matrix(yaw: f64) -> Matrix3<f64> {
    let (s, c) = yaw.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

/// Applies `pose` to a point: `R·x + t`.
pub fn transform_point(pose: &SE3Pose, point: &Vec3) -> Vec3 {
    pose.rotation * point + pose.translation
}

/// Planar ego motion with constant body-frame velocity and constant yaw rate.
///
/// The linear velocity is expressed in the body frame, so a nonzero yaw
/// rate traces a circular arc. `pose_at` maps ego-frame coordinates at time
/// `t` into the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EgoTrajectory {
    pub reference_time: Timestamp,
    pub reference_pose: SE3Pose,
    pub linear_velocity: Vec3,
    pub yaw_rate: f64,
}

impl EgoTrajectory {
    pub fn stationary(pose: SE3Pose) -> Self {
        Self { reference_time: Timestamp(0.0), reference_pose: pose, linear_velocity: Vec3::zeros(), yaw_rate: 0.0 }
    }

    /// Straight-line motion from the world origin with heading +x.
    pub fn straight(speed: f64) -> Self {
        Self {
            reference_time: Timestamp(0.0),
            reference_pose: SE3Pose::identity(),
            linear_velocity: Vec3::new(speed, 0.0, 0.0),
            yaw_rate: 0.0,
        }
    }

    pub fn pose_at(&self, t: Timestamp) -> SE3Pose {
        pose_at(self, t)
    }

    /// World-frame velocity of a point rigidly attached to the ego body at
    /// `body_point`, at time `t`.
    pub fn point_velocity(&self, t: Timestamp, body_point: &Vec3) -> Vec3 {
        let pose = self.pose_at(t);
        let spin = Vec3::new(0.0, 0.0, self.yaw_rate);
        pose.rotation() * (self.linear_velocity + spin.cross(body_point))
    }
}

/// Closed-form pose of the ego at time `t`.
pub fn pose_at(traj: &EgoTrajectory, t: Timestamp) -> SE3Pose {
    let dt = t - traj.reference_time;
    if dt == 0.0 {
        return traj.reference_pose;
    }
    let omega = traj.yaw_rate;
    let theta = omega * dt;
    // ∫₀^dt Rz(ω s) ds, restricted to the xy block.
    let (a, b) = if (theta).abs() < 1e-6 {
        // Series expansion of sin(θ)/ω and (1 - cos θ)/ω.
        let t2 = theta * theta;
        (dt * (1.0 - t2 / 6.0), dt * theta * (0.5 - t2 / 24.0))
    } else {
        (theta.sin() / omega, (1.0 - theta.cos()) / omega)
    };
    let v = traj.linear_velocity;
    let body_displacement = Vec3::new(a * v.x - b * v.y, b * v.x + a * v.y, v.z * dt);
    let reference = &traj.reference_pose;
    SE3Pose {
        rotation: reference.rotation * yaw_matrix(theta),
        translation: reference.translation + reference.rotation * body_displacement,
    }
}

/// `H_{t_to ← t_from}`: maps ego-frame coordinates at `t_from` into the ego
/// frame at `t_to`.
pub fn relative_transform(traj: &EgoTrajectory, t_to: Timestamp, t_from: Timestamp) -> SE3Pose {
    if t_to == t_from {
        return SE3Pose::identity();
    }
    pose_at(traj, t_to).inverse().compose(&pose_at(traj, t_from))
}

/// Re-expresses every `(point, capture time)` pair in the ego frame at
/// `target`. Output order follows input order.
pub fn motion_compensate(points: &[(Vec3, Timestamp)], traj: &EgoTrajectory, target: Timestamp) -> Vec<Vec3> {
    let target_inv = pose_at(traj, target).inverse();
    // Points usually arrive grouped by capture time.
    let mut cached: Option<(Timestamp, SE3Pose)> = None;
    points
        .iter()
        .map(|(x, t_i)| {
            if *t_i == target {
                return *x;
            }
            match &cached {
                Some((t, h)) if t == t_i => h.transform_point(x),
                _ => {
                    let h = target_inv.compose(&pose_at(traj, *t_i));
                    let out = h.transform_point(x);
                    cached = Some((*t_i, h));
                    out
                }
            }
        })
        .collect()
}

/// Pinhole camera with rolling-shutter timing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub id: u32,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
    /// Camera-from-ego transform.
    pub mount: SE3Pose,
    /// Azimuth of the optical axis in the ego frame.
    pub facing_azimuth: f64,
    pub exposure: f64,
    pub row_time: f64,
}

pub const DEFAULT_ROW_TIME: f64 = 25e-6;
pub const DEFAULT_EXPOSURE: f64 = 0.010;

impl CameraModel {
    /// Camera at `position` (ego frame) looking horizontally along `azimuth`
    /// with the given horizontal field of view; square pixels.
    pub fn looking_at_azimuth(id: u32, azimuth: f64, position: Vec3, width: u32, height: u32, horizontal_fov: f64) -> Self {
        let fx = width as f64 / 2.0 / (horizontal_fov / 2.0).tan();
        let (s, c) = azimuth.sin_cos();
        let forward = Vec3::new(c, s, 0.0);
        let right = Vec3::new(s, -c, 0.0);
        let down = Vec3::new(0.0, 0.0, -1.0);
        let ego_from_camera_rot = Matrix3::from_columns(&[right, down, forward]);
        let ego_from_camera = SE3Pose { rotation: ego_from_camera_rot, translation: position };
        Self {
            id,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
            mount: ego_from_camera.inverse(),
            facing_azimuth: azimuth.rem_euclid(std::f64::consts::TAU),
            exposure: DEFAULT_EXPOSURE,
            row_time: DEFAULT_ROW_TIME,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let ok = self.width > 0
            && self.height > 0
            && self.fx > 0.0
            && self.fy > 0.0
            && self.row_time >= 0.0
            && self.row_time < 1e-3
            && self.exposure > 0.0;
        if !ok {
            return Err(GeometryError::InvalidCamera(format!(
                "{}x{} fx={} fy={} row_time={} exposure={}",
                self.width, self.height, self.fx, self.fy, self.row_time, self.exposure
            )));
        }
        self.mount.validate()
    }

    /// Camera-from-world transform given the ego pose.
    pub fn camera_from_world(&self, ego_pose: &SE3Pose) -> SE3Pose {
        self.mount.compose(&ego_pose.inverse())
    }

    pub fn project(&self, x_cam: &Vec3) -> Result<(f64, f64), GeometryError> {
        project(self, x_cam)
    }

    pub fn contains_pixel(&self, u: f64, v: f64) -> bool {
        u >= 0.0 && v >= 0.0 && u < self.width as f64 && v < self.height as f64
    }
}

/// Pinhole projection of a camera-frame point.
pub fn project(cam: &CameraModel, x_cam: &Vec3) -> Result<(f64, f64), GeometryError> {
    if !(x_cam.z > 0.0) {
        return Err(GeometryError::NonPositiveDepth(x_cam.z));
    }
    Ok((cam.fx * x_cam.x / x_cam.z + cam.cx, cam.fy * x_cam.y / x_cam.z + cam.cy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn approx_vec(a: &Vec3, b: &Vec3, tol: f64) -> bool {
        (a - b).abs().max() <= tol
    }

    fn approx_pose(a: &SE3Pose, b: &SE3Pose, tol: f64) -> bool {
        (a.rotation - b.rotation).abs().max() <= tol && approx_vec(&a.translation, &b.translation, tol)
    }

    fn moving(v: Vec3, yaw_rate: f64, yaw0: f64, t0: f64) -> EgoTrajectory {
        EgoTrajectory {
            reference_time: Timestamp(t0),
            reference_pose: SE3Pose::from_yaw(yaw0, Vec3::new(3.0, -2.0, 0.5)),
            linear_velocity: v,
            yaw_rate,
        }
    }

    #[test]
    fn pose_at_reference_time_is_reference_pose() {
        let traj = moving(Vec3::new(4.0, 1.0, 0.0), 0.3, 0.7, 2.5);
        assert_eq!(traj.pose_at(Timestamp(2.5)), traj.reference_pose);
    }

    #[test]
    fn static_ego_never_moves() {
        let traj = EgoTrajectory::stationary(SE3Pose::from_yaw(1.2, Vec3::new(1.0, 2.0, 3.0)));
        for t in [-4.0, 0.0, 0.3, 100.0] {
            assert!(approx_pose(&traj.pose_at(Timestamp(t)), &traj.reference_pose, 0.0));
        }
    }

    #[test]
    fn thirty_mph_for_two_tenths() {
        let traj = EgoTrajectory::straight(13.41);
        let pose = traj.pose_at(Timestamp(0.2));
        assert!((pose.translation().x - 2.682).abs() < 1e-12);
        assert_eq!(pose.translation().y, 0.0);
    }

    #[test]
    fn arc_matches_numeric_integration() {
        // Oracle: midpoint integration of the unicycle model.
        let traj = moving(Vec3::new(5.0, 0.5, 0.1), 0.4, 0.3, 0.0);
        let steps = 200_000;
        let horizon = 2.0;
        let h = horizon / steps as f64;
        let mut pos = *traj.reference_pose.translation();
        for i in 0..steps {
            let yaw = 0.3 + 0.4 * (i as f64 + 0.5) * h;
            pos += yaw_matrix(yaw) * traj.linear_velocity * h;
        }
        let pose = traj.pose_at(Timestamp(horizon));
        assert!(approx_vec(pose.translation(), &pos, 1e-8));
        assert!((pose.yaw() - (0.3 + 0.8)).abs() < 1e-12);
    }

    #[test]
    fn small_yaw_rate_is_continuous() {
        let a = moving(Vec3::new(5.0, 0.0, 0.0), 1e-9, 0.0, 0.0).pose_at(Timestamp(1.0));
        let b = moving(Vec3::new(5.0, 0.0, 0.0), 0.0, 0.0, 0.0).pose_at(Timestamp(1.0));
        assert!(approx_pose(&a, &b, 1e-8));
    }

    #[test]
    fn relative_transform_identities() {
        let traj = moving(Vec3::new(7.0, 0.0, 0.0), 0.2, 0.0, 0.0);
        let h = relative_transform(&traj, Timestamp(1.3), Timestamp(1.3));
        assert!(approx_pose(&h, &SE3Pose::identity(), 1e-12));
        let still = EgoTrajectory::stationary(SE3Pose::from_yaw(0.5, Vec3::new(1.0, 1.0, 0.0)));
        let h = relative_transform(&still, Timestamp(4.0), Timestamp(-1.0));
        assert!(approx_pose(&h, &SE3Pose::identity(), 1e-12));
    }

    #[test]
    fn relative_transform_world_round_trip() {
        // A world-fixed point seen from an ego moving +x at v: its ego-frame x
        // decreases by v·δ.
        let v = 9.0;
        let delta = 0.25;
        let traj = EgoTrajectory::straight(v);
        let world = Vec3::new(20.0, 3.0, 1.0);
        let t_from = Timestamp(1.0);
        let t_to = Timestamp(1.0 + delta);
        let in_from = traj.pose_at(t_from).inverse().transform_point(&world);
        let in_to = traj.pose_at(t_to).inverse().transform_point(&world);
        let mapped = relative_transform(&traj, t_to, t_from).transform_point(&in_from);
        assert!(approx_vec(&mapped, &in_to, 1e-12));
        assert!((in_from.x - mapped.x - v * delta).abs() < 1e-12);
    }

    #[test]
    fn transform_point_basics() {
        let x = Vec3::new(0.3, -1.0, 2.0);
        assert_eq!(transform_point(&SE3Pose::identity(), &x), x);
        let shift = SE3Pose::from_translation(Vec3::new(1.0, 2.0, 3.0));
        assert_eq!(transform_point(&shift, &Vec3::zeros()), Vec3::new(1.0, 2.0, 3.0));
    }

    #[test]
    fn motion_compensation_examples() {
        let traj = EgoTrajectory::straight(10.0);
        let t_c = Timestamp(2.0);
        let same = motion_compensate(&[(Vec3::new(1.0, 2.0, 3.0), t_c)], &traj, t_c);
        assert_eq!(same[0], Vec3::new(1.0, 2.0, 3.0));

        let still = EgoTrajectory::stationary(SE3Pose::identity());
        let p = Vec3::new(-4.0, 1.0, 0.5);
        let out = motion_compensate(&[(p, Timestamp(0.3))], &still, t_c);
        assert!(approx_vec(&out[0], &p, 1e-12));

        // Oracle: world round trip.
        let p = Vec3::new(5.0, 2.0, 0.0);
        let t_i = Timestamp(1.9);
        let world = traj.pose_at(t_i).transform_point(&p);
        let expected = traj.pose_at(t_c).inverse().transform_point(&world);
        let out = motion_compensate(&[(p, t_i)], &traj, t_c);
        assert!(approx_vec(&out[0], &expected, 1e-12));
        assert!((out[0].x - (p.x - 1.0)).abs() < 1e-12);
    }

    #[test]
    fn projection_examples() {
        let mut cam = CameraModel::looking_at_azimuth(0, 0.0, Vec3::zeros(), 640, 480, 1.2);
        cam.fx = 500.0;
        cam.fy = 500.0;
        cam.cx = 320.0;
        assert_eq!(project(&cam, &Vec3::new(0.0, 0.0, 7.0)).unwrap(), (320.0, 240.0));
        assert!(matches!(project(&cam, &Vec3::new(1.0, 0.0, 0.0)), Err(GeometryError::NonPositiveDepth(_))));
        let (u, _) = project(&cam, &Vec3::new(1.0, 0.0, 10.0)).unwrap();
        assert_eq!(u, 370.0);
    }

    #[test]
    fn camera_axes_follow_azimuth() {
        let cam = CameraModel::looking_at_azimuth(0, std::f64::consts::FRAC_PI_2, Vec3::zeros(), 320, 192, 1.5);
        cam.validate().unwrap();
        // Point straight left of the ego lies on the optical axis.
        let x = cam.mount.transform_point(&Vec3::new(0.0, 10.0, 0.0));
        assert!(approx_vec(&x, &Vec3::new(0.0, 0.0, 10.0), 1e-12));
        // Forward (+x) is on the right side of a left-facing image.
        let x = cam.mount.transform_point(&Vec3::new(1.0, 10.0, 0.0));
        assert!(x.x > 0.0);
        // Up is image-up.
        let x = cam.mount.transform_point(&Vec3::new(0.0, 10.0, 1.0));
        assert!(x.y < 0.0);
    }

    #[test]
    fn invalid_rotation_is_rejected() {
        let mut m = Matrix3::identity();
        m[(0, 0)] = 1.0 + 1e-6;
        assert!(SE3Pose::new(m, Vec3::zeros()).is_err());
        let reflection = Matrix3::new(-1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0);
        assert!(SE3Pose::new(reflection, Vec3::zeros()).is_err());
    }

    fn arb_traj() -> impl Strategy<Value = EgoTrajectory> {
        (-20.0..20.0f64, -3.0..3.0f64, -1.0..1.0f64, -0.8..0.8f64, -3.2..3.2f64, -5.0..5.0f64).prop_map(|(vx, vy, vz, w, yaw0, t0)| {
            EgoTrajectory {
                reference_time: Timestamp(t0),
                reference_pose: SE3Pose::from_yaw(yaw0, Vec3::new(t0, -t0, 0.1)),
                linear_velocity: Vec3::new(vx, vy, vz),
                yaw_rate: w,
            }
        })
    }

    fn arb_vec() -> impl Strategy<Value = Vec3> {
        (-50.0..50.0f64, -50.0..50.0f64, -5.0..5.0f64).prop_map(|(x, y, z)| Vec3::new(x, y, z))
    }

    proptest! {
        #[test]
        fn prop_self_relative_is_identity(traj in arb_traj(), t in -10.0..10.0f64) {
            let h = relative_transform(&traj, Timestamp(t), Timestamp(t));
            prop_assert!(approx_pose(&h, &SE3Pose::identity(), 1e-12));
        }

        #[test]
        fn prop_round_trip(traj in arb_traj(), a in -3.0..3.0f64, b in -3.0..3.0f64, x in arb_vec()) {
            let (ta, tb) = (Timestamp(a), Timestamp(b));
            let back = relative_transform(&traj, ta, tb)
                .transform_point(&relative_transform(&traj, tb, ta).transform_point(&x));
            prop_assert!(approx_vec(&back, &x, 1e-9));
        }

        #[test]
        fn prop_poses_stay_orthonormal(traj in arb_traj(), t in -10.0..10.0f64) {
            prop_assert!(traj.pose_at(Timestamp(t)).validate().is_ok());
        }

        #[test]
        fn prop_composition_matches_sequential(traj in arb_traj(), a in -2.0..2.0f64, b in -2.0..2.0f64, x in arb_vec()) {
            let h1 = traj.pose_at(Timestamp(a));
            let h2 = traj.pose_at(Timestamp(b)).inverse();
            let once = h2.compose(&h1).transform_point(&x);
            let twice = h2.transform_point(&h1.transform_point(&x));
            prop_assert!(approx_vec(&once, &twice, 1e-12 * (1.0 + x.norm() + h1.translation.norm())));
        }

        #[test]
        fn prop_compensation_exact_for_static_points(traj in arb_traj(), ti in -2.0..2.0f64, tc in -2.0..2.0f64, world in arb_vec()) {
            let local = traj.pose_at(Timestamp(ti)).inverse().transform_point(&world);
            let comp = motion_compensate(&[(local, Timestamp(ti))], &traj, Timestamp(tc));
            let back = traj.pose_at(Timestamp(tc)).transform_point(&comp[0]);
            prop_assert!(approx_vec(&back, &world, 1e-9));
        }
    }
}

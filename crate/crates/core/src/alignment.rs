//! Per-point timestamp-offset features, image-plane projection with bounds
//! filtering, and a scalar measure of LiDAR/camera misalignment under
//! staleness.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::AlignmentError;
use crate::geometry::{project, CameraModel, EgoTrajectory, Timestamp, Vec3};
use crate::scene::{BoxObject, ObjectClass, Scene};
use crate::sensors::{camera_trigger_time, simulate_lidar_sweep, LidarConfig, LidarSweep, LIDAR_PERIOD};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Modality {
    Lidar,
    Radar,
}

/// `T_C - T_i` for every point, in input order.
pub fn offset_features(timestamps: &[Timestamp], t_c: Timestamp) -> Vec<f64> {
    timestamps.iter().map(|t| t_c - *t).collect()
}

/// A point already expressed in the camera frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraPoint {
    pub position: Vec3,
    pub offset: f64,
    pub modality: Modality,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProjectedPoint {
    pub u: f64,
    pub v: f64,
    /// Euclidean distance from the camera centre.
    pub range: f64,
    pub offset: f64,
    pub modality: Modality,
}

/// Moves ego-frame points into the camera frame.
pub fn to_camera_points(
    cam: &CameraModel,
    positions: impl IntoIterator<Item = Vec3>,
    offsets: &[f64],
    modality: Modality,
) -> Vec<CameraPoint> {
    positions
        .into_iter()
        .zip(offsets)
        .map(|(p, &offset)| CameraPoint { position: cam.mount.transform_point(&p), offset, modality })
        .collect()
}

/// Projects camera-frame points, dropping those behind the camera or
/// outside `[0, W) × [0, H)`.
pub fn project_and_filter(points: &[CameraPoint], cam: &CameraModel) -> Vec<ProjectedPoint> {
    points
        .iter()
        .filter_map(|p| {
            let (u, v) = project(cam, &p.position).ok()?;
            cam.contains_pixel(u, v).then(|| ProjectedPoint { u, v, range: p.position.norm(), offset: p.offset, modality: p.modality })
        })
        .collect()
}

/// Debug dump, one `u,v,range,offset` row per point.
pub fn projected_points_csv(points: &[ProjectedPoint]) -> String {
    let mut out = String::from("u,v,range,offset\n");
    for p in points {
        let _ = writeln!(out, "{},{},{},{}", p.u, p.v, p.range, p.offset);
    }
    out
}

/// Pixel position of a LiDAR return as seen by `cam` with the world frozen
/// at `target`. Object returns ride along with their object; ground returns
/// are world-fixed.
fn pixel_at(
    scene: &Scene,
    ego: &EgoTrajectory,
    cam: &CameraModel,
    point: &crate::sensors::LidarPoint,
    target: Timestamp,
) -> Option<(f64, f64)> {
    let mut world = ego.pose_at(point.timestamp).transform_point(&point.position);
    if let Some(id) = point.object_id {
        if let Some(obj) = scene.objects.iter().find(|o| o.id == id) {
            world += obj.velocity * (target - point.timestamp);
        }
    }
    let x_cam = cam.camera_from_world(&ego.pose_at(target)).transform_point(&world);
    let (u, v) = project(cam, &x_cam).ok()?;
    cam.contains_pixel(u, v).then_some((u, v))
}

/// Mean pixel distance between each LiDAR return projected into the
/// synchronized camera geometry and the same return projected into the
/// geometry at the stale image's capture time. Only returns that land
/// inside the image in both cases contribute.
pub fn misalignment_score(
    scene: &Scene,
    ego: &EgoTrajectory,
    cam: &CameraModel,
    t_c_synced: Timestamp,
    image_stale_t_c: Timestamp,
    lidar: &LidarSweep,
) -> Result<f64, AlignmentError> {
    let mut sum = 0.0;
    let mut count = 0usize;
    for p in &lidar.points {
        let (Some(a), Some(b)) = (pixel_at(scene, ego, cam, p, t_c_synced), pixel_at(scene, ego, cam, p, image_stale_t_c)) else {
            continue;
        };
        sum += (a.0 - b.0).hypot(a.1 - b.1);
        count += 1;
    }
    if count == 0 {
        return Err(AlignmentError::NoCommonPoints);
    }
    Ok(sum / count as f64)
}

/// Synchronized camera time of the misalignment scenario.
const SCENARIO_T_C: f64 = 2.0;

/// Ego driving straight along +x past a static car abeam on its left, with
/// a camera facing the car. Projection shift under staleness follows the
/// pinhole law `fx·v·t/Z`.
#[derive(Clone, Debug)]
pub struct MisalignmentScenario {
    pub scene: Scene,
    pub camera: CameraModel,
    pub t_c: Timestamp,
    pub sweep: LidarSweep,
    pub ego_speed: f64,
    /// Camera depth of the car's near face.
    pub object_depth: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MisalignmentPoint {
    pub staleness: f64,
    pub score: f64,
    pub predicted: f64,
}

impl MisalignmentScenario {
    pub fn new(ego_speed: f64, object_depth: f64, focal_length: f64) -> Self {
        let scene = Scene {
            ego: EgoTrajectory::straight(ego_speed),
            objects: vec![BoxObject {
                id: 0,
                class: ObjectClass::Car,
                reference_time: Timestamp(0.0),
                center: Vec3::new(SCENARIO_T_C * ego_speed, object_depth + 1.0, 0.8),
                extents: Vec3::new(4.5, 2.0, 3.6),
                yaw: 0.0,
                velocity: Vec3::zeros(),
                reflectivity: 0.6,
                rcs: 10.0,
            }],
            duration: 2.0 * SCENARIO_T_C + 1.0,
        };
        Self::with_scene(scene, ego_speed, object_depth, focal_length)
    }

    /// Same rig and timing around an arbitrary scene.
    pub fn with_scene(scene: Scene, ego_speed: f64, object_depth: f64, focal_length: f64) -> Self {
        let mut camera = CameraModel::looking_at_azimuth(0, std::f64::consts::FRAC_PI_2, Vec3::new(0.0, 0.0, 1.8), 640, 480, 1.2);
        camera.fx = focal_length;
        camera.fy = focal_length;
        // Shallow beams so no return comes from the ground.
        let lidar =
            LidarConfig { columns: 1800, rows: 9, elevation_min_deg: -2.0, elevation_max_deg: 2.0, max_range: 40.0, ..Default::default() };
        let t_c = Timestamp(SCENARIO_T_C);
        // Start the sweep so that its phase-locked trigger lands on t_c.
        let lead = t_c - camera_trigger_time(Timestamp(LIDAR_PERIOD), lidar.sweep_end_azimuth(), camera.facing_azimuth);
        let sweep = simulate_lidar_sweep(&scene, &scene.ego, Timestamp(lead), &lidar);
        Self { scene, camera, t_c, sweep, ego_speed, object_depth }
    }

    pub fn score(&self, staleness: f64) -> Result<f64, AlignmentError> {
        misalignment_score(&self.scene, &self.scene.ego, &self.camera, self.t_c, self.t_c - staleness, &self.sweep)
    }

    pub fn predicted(&self, staleness: f64) -> f64 {
        self.camera.fx * self.ego_speed * staleness / self.object_depth
    }

    pub fn curve(&self, staleness: &[f64]) -> Result<Vec<MisalignmentPoint>, AlignmentError> {
        staleness.iter().map(|&t| Ok(MisalignmentPoint { staleness: t, score: self.score(t)?, predicted: self.predicted(t) })).collect()
    }
}

pub fn misalignment_csv(points: &[MisalignmentPoint]) -> String {
    let mut out = String::from("staleness,score,predicted\n");
    for p in points {
        let _ = writeln!(out, "{},{},{}", p.staleness, p.score, p.predicted);
    }
    out
}

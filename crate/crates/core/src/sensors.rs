//! Time-accurate sensor simulation: a rotating LiDAR, a rolling-shutter
//! camera phase-locked to the LiDAR, and free-running radars whose returns
//! are buffered over one second.

use std::f64::consts::TAU;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::SensorError;
use crate::geometry::{CameraModel, EgoTrajectory, SE3Pose, Timestamp, Vec3};
use crate::rng;
use crate::scene::{projected_hull, slab_hit, Scene};

/// LiDAR rotation period (10 Hz).
pub const LIDAR_PERIOD: f64 = 0.1;
/// Radar history merged into one cloud.
pub const RADAR_BUFFER_SPAN: f64 = 1.0;
/// LiDAR intensity reported for ground returns.
pub const GROUND_INTENSITY: f64 = 0.1;

/// Phase-locked camera trigger: `T_C = T_L - 0.1·(θ_L - θ_C)/(2π)`, with the
/// azimuth difference normalized into `(0, 2π]`.
pub fn camera_trigger_time(t_l: Timestamp, theta_l: f64, theta_c: f64) -> Timestamp {
    let mut diff = (theta_l - theta_c).rem_euclid(TAU);
    if diff == 0.0 {
        diff = TAU;
    }
    Timestamp(t_l.secs() - LIDAR_PERIOD * diff / TAU)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LidarConfig {
    /// Azimuth columns per revolution.
    pub columns: usize,
    /// Elevation rows.
    pub rows: usize,
    pub elevation_min_deg: f64,
    pub elevation_max_deg: f64,
    pub mount_height: f64,
    pub max_range: f64,
    /// Azimuth of the first column's leading edge.
    pub start_azimuth: f64,
}

impl Default for LidarConfig {
    fn default() -> Self {
        Self {
            columns: 1800,
            rows: 32,
            elevation_min_deg: -25.0,
            elevation_max_deg: 10.0,
            mount_height: 1.8,
            max_range: 80.0,
            start_azimuth: 0.0,
        }
    }
}

impl LidarConfig {
    pub fn validate(&self) -> Result<(), SensorError> {
        if self.columns == 0 || self.rows == 0 {
            return Err(SensorError::InvalidConfig("lidar needs at least one column and row".into()));
        }
        if !(self.max_range > 0.0) || !(self.elevation_max_deg >= self.elevation_min_deg) {
            return Err(SensorError::InvalidConfig("lidar range/elevation limits invalid".into()));
        }
        Ok(())
    }

    pub fn origin(&self) -> Vec3 {
        Vec3::new(0.0, 0.0, self.mount_height)
    }

    /// Azimuth at the centre of column `k`.
    pub fn column_azimuth(&self, k: usize) -> f64 {
        (self.start_azimuth + TAU * (k as f64 + 0.5) / self.columns as f64).rem_euclid(TAU)
    }

    /// Timestamp stamped on column `k`: the end of its firing slot.
    pub fn column_time(&self, sweep_start: Timestamp, k: usize) -> Timestamp {
        Timestamp(sweep_start.secs() + LIDAR_PERIOD * (k as f64 + 1.0) / self.columns as f64)
    }

    /// Beam azimuth at time `t` for a sweep starting at `sweep_start`.
    pub fn beam_azimuth(&self, sweep_start: Timestamp, t: Timestamp) -> f64 {
        (self.start_azimuth + TAU * (t - sweep_start) / LIDAR_PERIOD).rem_euclid(TAU)
    }

    /// Azimuth reached at the end of a full sweep (`θ_L`).
    pub fn sweep_end_azimuth(&self) -> f64 {
        self.start_azimuth + TAU
    }

    pub fn elevation(&self, m: usize) -> f64 {
        if self.rows == 1 {
            return self.elevation_min_deg.to_radians();
        }
        let f = m as f64 / (self.rows - 1) as f64;
        (self.elevation_min_deg + f * (self.elevation_max_deg - self.elevation_min_deg)).to_radians()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarPoint {
    /// Ego frame at the capture instant.
    pub position: Vec3,
    pub intensity: f64,
    pub timestamp: Timestamp,
    pub azimuth: f64,
    /// Object that produced the return; `None` for ground.
    pub object_id: Option<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LidarSweep {
    pub points: Vec<LidarPoint>,
    pub sweep_start: Timestamp,
    pub t_l: Timestamp,
}

impl LidarSweep {
    /// Builds a sweep, setting `T_L` to the latest point timestamp (or the
    /// nominal sweep end when empty).
    pub fn new(points: Vec<LidarPoint>, sweep_start: Timestamp) -> Self {
        let t_l = points.iter().map(|p| p.timestamp).max().unwrap_or(sweep_start + LIDAR_PERIOD);
        Self { points, sweep_start, t_l }
    }
}

/// Box in its own frame, ready for repeated ray tests.
struct RayTarget {
    id: u32,
    reflectivity: f64,
    box_from_world: SE3Pose,
    half: Vec3,
}

fn nearest_hit(targets: &[RayTarget], origin: &Vec3, dir: &Vec3, max_range: f64) -> Option<(f64, Option<u32>, f64)> {
    let mut best: Option<(f64, Option<u32>, f64)> = None;
    if dir.z < 0.0 {
        let t = -origin.z / dir.z;
        if t > 0.0 && t <= max_range {
            best = Some((t, None, GROUND_INTENSITY));
        }
    }
    for target in targets {
        let o = target.box_from_world.transform_point(origin);
        let d = target.box_from_world.transform_vector(dir);
        if let Some(t) = slab_hit(&o, &d, &target.half) {
            if t <= max_range && best.is_none_or(|(b, _, _)| t < b) {
                best = Some((t, Some(target.id), target.reflectivity));
            }
        }
    }
    best
}

/// One full revolution. Column `k` fires at `sweep_start + 0.1·(k+1)/N`
/// using the ego pose and object states at that instant.
pub fn simulate_lidar_sweep(scene: &Scene, ego: &EgoTrajectory, sweep_start: Timestamp, config: &LidarConfig) -> LidarSweep {
    let origin_ego = config.origin();
    let elevations: Vec<(f64, f64)> = (0..config.rows).map(|m| config.elevation(m).sin_cos()).collect();
    let mut points = Vec::new();
    let mut targets = Vec::with_capacity(scene.objects.len());
    for k in 0..config.columns {
        let t_k = config.column_time(sweep_start, k);
        let azimuth = config.column_azimuth(k);
        let pose = ego.pose_at(t_k);
        let origin = pose.transform_point(&origin_ego);
        let (sa, ca) = azimuth.sin_cos();
        let heading = pose.transform_vector(&Vec3::new(ca, sa, 0.0));
        // Every beam of a column shares one vertical plane; skip boxes whose
        // bounding circle misses it or lies behind the sensor.
        targets.clear();
        for o in &scene.objects {
            let state = o.state_at(t_k);
            let rel = state.center - origin;
            let along = rel.x * heading.x + rel.y * heading.y;
            let across = rel.x * heading.y - rel.y * heading.x;
            let radius = 0.5 * state.extents.x.hypot(state.extents.y);
            if across.abs() > radius || along < -radius || along - radius > config.max_range {
                continue;
            }
            targets.push(RayTarget {
                id: o.id,
                reflectivity: o.reflectivity,
                box_from_world: state.pose().inverse(),
                half: state.half_extents(),
            });
        }
        for &(se, ce) in &elevations {
            let dir_ego = Vec3::new(ce * ca, ce * sa, se);
            let dir = pose.transform_vector(&dir_ego);
            if let Some((range, object_id, intensity)) = nearest_hit(&targets, &origin, &dir, config.max_range) {
                points.push(LidarPoint { position: origin_ego + dir_ego * range, intensity, timestamp: t_k, azimuth, object_id });
            }
        }
    }
    LidarSweep::new(points, sweep_start)
}

/// Grayscale rolling-shutter frame. Row `r` is captured at `t_c + r·row_time`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraImage {
    pub camera_id: u32,
    pub t_c: Timestamp,
    pub row_time: f64,
    pub exposure: f64,
    pub width: u32,
    pub height: u32,
    /// Row-major intensities in [0, 1].
    pub pixels: Vec<f32>,
}

impl CameraImage {
    pub fn pixel(&self, u: usize, v: usize) -> f32 {
        self.pixels[v * self.width as usize + u]
    }

    pub fn row_capture_time(&self, row: usize) -> Timestamp {
        self.t_c + row as f64 * self.row_time
    }
}

/// Projected silhouettes of every visible object at one instant, sorted far
/// to near so later entries paint over earlier ones.
fn silhouettes(scene: &Scene, ego: &EgoTrajectory, cam: &CameraModel, t: Timestamp) -> Vec<(f64, f32, Vec<(f64, f64)>)> {
    let cam_from_world = cam.camera_from_world(&ego.pose_at(t));
    let mut out: Vec<(f64, f32, Vec<(f64, f64)>)> = scene
        .objects
        .iter()
        .filter_map(|o| {
            let state = o.state_at(t);
            let corners = state.corners().map(|c| cam_from_world.transform_point(&c));
            let hull = projected_hull(cam, &corners)?;
            let depth = cam_from_world.transform_point(&state.center).z;
            (hull.len() >= 3).then_some((depth, o.reflectivity as f32, hull))
        })
        .collect();
    out.sort_by(|a, b| b.0.total_cmp(&a.0));
    out
}

/// Horizontal extent of a convex polygon at height `y`.
fn span_at(hull: &[(f64, f64)], y: f64) -> Option<(f64, f64)> {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for i in 0..hull.len() {
        let a = hull[i];
        let b = hull[(i + 1) % hull.len()];
        if (a.1 <= y && y <= b.1) || (b.1 <= y && y <= a.1) {
            if a.1 == b.1 {
                lo = lo.min(a.0.min(b.0));
                hi = hi.max(a.0.max(b.0));
            } else {
                let x = a.0 + (y - a.1) * (b.0 - a.0) / (b.1 - a.1);
                lo = lo.min(x);
                hi = hi.max(x);
            }
        }
    }
    (lo <= hi).then_some((lo, hi))
}

/// Renders the camera frame whose first row stops exposing at `t_c`.
pub fn simulate_camera_image(scene: &Scene, ego: &EgoTrajectory, cam: &CameraModel, t_c: Timestamp) -> CameraImage {
    let (w, h) = (cam.width as usize, cam.height as usize);
    let mut pixels = vec![0.0f32; w * h];
    let mut cached: Option<(Timestamp, Vec<(f64, f32, Vec<(f64, f64)>)>)> = None;
    for row in 0..h {
        let t_row = t_c + row as f64 * cam.row_time;
        if cached.as_ref().is_none_or(|(t, _)| *t != t_row) {
            cached = Some((t_row, silhouettes(scene, ego, cam, t_row)));
        }
        let (_, shapes) = cached.as_ref().expect("silhouettes cached above");
        let y = row as f64 + 0.5;
        let line = &mut pixels[row * w..(row + 1) * w];
        for (_, intensity, hull) in shapes {
            let Some((lo, hi)) = span_at(hull, y) else {
                continue;
            };
            // Pixel u is covered when its centre u + 0.5 lies in [lo, hi].
            let first = (lo - 0.5).ceil().max(0.0);
            let last = (hi - 0.5).floor().min(w as f64 - 1.0);
            if first > last {
                continue;
            }
            for px in &mut line[first as usize..=last as usize] {
                *px = *intensity;
            }
        }
    }
    CameraImage { camera_id: cam.id, t_c, row_time: cam.row_time, exposure: cam.exposure, width: cam.width, height: cam.height, pixels }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RadarConfig {
    pub id: u32,
    /// Firing period in seconds.
    pub period: f64,
    /// Time of firing number 0.
    pub phase_offset: f64,
    /// Sensor origin in the ego frame.
    pub mount_position: Vec3,
    pub boresight_azimuth: f64,
    pub fov_half_angle: f64,
    pub max_range: f64,
    /// Unambiguous radial velocity half-interval: Doppler folds into
    /// `[-doppler_max, doppler_max)`.
    pub doppler_max: f64,
    pub range_noise_sigma: f64,
    /// SNR at 1 m; `snr = snr_reference_db - 20·log10(range)`.
    pub snr_reference_db: f64,
    pub noise_seed: u64,
}

impl Default for RadarConfig {
    fn default() -> Self {
        Self {
            id: 0,
            period: 0.055,
            phase_offset: 0.013,
            mount_position: Vec3::new(0.0, 0.9, 0.5),
            boresight_azimuth: std::f64::consts::FRAC_PI_2,
            fov_half_angle: 60f64.to_radians(),
            max_range: 100.0,
            doppler_max: 20.0,
            range_noise_sigma: 0.15,
            snr_reference_db: 60.0,
            noise_seed: 0,
        }
    }
}

impl RadarConfig {
    /// The default pair: distinct periods and phase offsets, not locked to
    /// the LiDAR.
    pub fn default_pair() -> Vec<RadarConfig> {
        vec![
            RadarConfig::default(),
            RadarConfig {
                id: 1,
                period: 0.072,
                phase_offset: 0.031,
                mount_position: Vec3::new(1.8, 0.8, 0.5),
                boresight_azimuth: std::f64::consts::FRAC_PI_4,
                ..RadarConfig::default()
            },
        ]
    }

    pub fn validate(&self) -> Result<(), SensorError> {
        if !(self.period > 0.0) || !(self.max_range > 0.0) || !(self.doppler_max > 0.0) || !(self.range_noise_sigma >= 0.0) {
            return Err(SensorError::InvalidConfig(format!("radar {} has invalid period/range/doppler/noise", self.id)));
        }
        Ok(())
    }

    /// Firing index nearest to `t`.
    pub fn fire_index(&self, t: Timestamp) -> i64 {
        ((t.secs() - self.phase_offset) / self.period).round() as i64
    }

    /// Firing instants in `[from, to]`.
    pub fn fire_times(&self, from: Timestamp, to: Timestamp) -> Vec<Timestamp> {
        let first = ((from.secs() - self.phase_offset) / self.period).ceil() as i64;
        let last = ((to.secs() - self.phase_offset) / self.period).floor() as i64;
        (first..=last).map(|n| Timestamp(self.phase_offset + n as f64 * self.period)).filter(|t| *t >= from && *t <= to).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarPoint {
    /// Ego frame at capture.
    pub position: Vec3,
    pub rcs: f64,
    pub snr: f64,
    /// Radial velocity, positive toward the sensor, folded into the
    /// unambiguous interval.
    pub doppler: f64,
    pub timestamp: Timestamp,
    pub radar_id: u32,
}

/// Folds `v` into `[-max, max)`.
pub fn fold_doppler(v: f64, max: f64) -> f64 {
    (v + max).rem_euclid(2.0 * max) - max
}

/// One radar firing: one return per object inside the field of view.
pub fn simulate_radar(scene: &Scene, ego: &EgoTrajectory, t_fire: Timestamp, config: &RadarConfig) -> Vec<RadarPoint> {
    let index = config.fire_index(t_fire) as u64;
    let mut rng = rng::stream(config.noise_seed, rng::tag::RADAR_NOISE, ((config.id as u64) << 40) ^ index);
    let noise = Normal::new(0.0, config.range_noise_sigma.max(0.0)).expect("sigma validated nonnegative");
    let pose = ego.pose_at(t_fire);
    let ego_from_world = pose.inverse();
    let origin = pose.transform_point(&config.mount_position);
    let sensor_velocity = ego.point_velocity(t_fire, &config.mount_position);
    let mut out = Vec::new();
    for obj in &scene.objects {
        let state = obj.state_at(t_fire);
        let surface = state.closest_point(&origin);
        let offset = surface - origin;
        let range = offset.norm();
        if range <= 1e-9 || range > config.max_range {
            continue;
        }
        let local = ego_from_world.transform_vector(&offset);
        let bearing = local.y.atan2(local.x) - config.boresight_azimuth;
        let bearing = (bearing + std::f64::consts::PI).rem_euclid(TAU) - std::f64::consts::PI;
        if bearing.abs() > config.fov_half_angle {
            continue;
        }
        let dir = offset / range;
        let noisy_range = (range + noise.sample(&mut rng)).max(1e-3);
        let snr = config.snr_reference_db - 20.0 * noisy_range.log10();
        if snr <= 0.0 {
            continue;
        }
        let radial = -(state.velocity - sensor_velocity).dot(&dir);
        out.push(RadarPoint {
            position: ego_from_world.transform_point(&(origin + dir * noisy_range)),
            rcs: obj.rcs,
            snr,
            doppler: fold_doppler(radial, config.doppler_max),
            timestamp: t_fire,
            radar_id: config.id,
        });
    }
    out
}

/// Merged radar returns from the last second.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RadarBuffer {
    pub points: Vec<RadarPoint>,
    pub t_r: Timestamp,
}

impl RadarBuffer {
    pub fn check_invariants(&self) -> bool {
        let Some(first) = self.points.first() else {
            return false;
        };
        let last = self.points.last().expect("nonempty");
        let max = self.points.iter().map(|p| p.timestamp).max().expect("nonempty");
        self.points.windows(2).all(|w| w[0].timestamp <= w[1].timestamp)
            && last.timestamp - first.timestamp <= RADAR_BUFFER_SPAN
            && max == self.t_r
    }
}

/// Returns with timestamps in `(t_query - 1 s, t_query]`. `points` must be
/// sorted by timestamp.
pub fn radar_buffer_at(points: &[RadarPoint], t_query: Timestamp) -> Result<RadarBuffer, SensorError> {
    let lo = points.partition_point(|p| p.timestamp.secs() <= t_query.secs() - RADAR_BUFFER_SPAN);
    let hi = points.partition_point(|p| p.timestamp <= t_query);
    if lo >= hi {
        return Err(SensorError::EmptyBuffer(t_query.secs()));
    }
    let slice = &points[lo..hi];
    let buffer = RadarBuffer { t_r: slice[slice.len() - 1].timestamp, points: slice.to_vec() };
    debug_assert!(buffer.check_invariants());
    Ok(buffer)
}

/// Every sensor on the vehicle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensorRig {
    pub lidar: LidarConfig,
    pub camera: CameraRigConfig,
    pub radars: Vec<RadarConfig>,
}

impl Default for SensorRig {
    fn default() -> Self {
        Self { lidar: LidarConfig::default(), camera: CameraRigConfig::default(), radars: RadarConfig::default_pair() }
    }
}

impl SensorRig {
    pub fn validate(&self) -> Result<(), crate::error::Error> {
        self.lidar.validate()?;
        for r in &self.radars {
            r.validate()?;
        }
        self.camera.model().validate()?;
        Ok(())
    }

    /// Radar configs with noise seeds bound to a global seed.
    pub fn seeded_radars(&self, seed: u64) -> Vec<RadarConfig> {
        self.radars.iter().map(|r| RadarConfig { noise_seed: seed ^ r.noise_seed, ..r.clone() }).collect()
    }
}

/// Serializable camera description from which a [`CameraModel`] is built.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CameraRigConfig {
    pub id: u32,
    pub width: u32,
    pub height: u32,
    pub horizontal_fov_deg: f64,
    /// Facing direction in the ego frame, degrees counter-clockwise from +x.
    pub azimuth_deg: f64,
    pub position: Vec3,
    pub exposure: f64,
    pub row_time: f64,
}

impl Default for CameraRigConfig {
    fn default() -> Self {
        Self {
            id: 0,
            width: 320,
            height: 192,
            horizontal_fov_deg: 90.0,
            azimuth_deg: 90.0,
            position: Vec3::new(0.0, 0.0, 1.6),
            exposure: crate::geometry::DEFAULT_EXPOSURE,
            row_time: crate::geometry::DEFAULT_ROW_TIME,
        }
    }
}

impl CameraRigConfig {
    pub fn model(&self) -> CameraModel {
        let mut cam = CameraModel::looking_at_azimuth(
            self.id,
            self.azimuth_deg.to_radians(),
            self.position,
            self.width,
            self.height,
            self.horizontal_fov_deg.to_radians(),
        );
        cam.exposure = self.exposure;
        cam.row_time = self.row_time;
        cam
    }
}

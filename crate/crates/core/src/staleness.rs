//! Staleness measurement, jittered stale-frame augmentation, dataset mixing,
//! timestamp-delta profiles and the consume/dropout policy.
//!
//! A [`FrameStore`] holds everything one simulated drive produced. A
//! [`FrameBundle`] is one detector input assembled from the store: LiDAR and
//! radar are motion-compensated to the synchronized camera time `T_C`, and
//! labels live at `T_C`. Augmentation swaps in the camera image closest to a
//! jittered time and re-queries the radar buffer at a jittered `T_R`, while
//! the compensation target and labels stay at the synchronized `T_C`. The
//! gap between the image's own capture time and `T_C` is exactly the
//! misalignment a model has to learn to tolerate.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::offset_features;
use crate::error::{SensorError, StalenessError};
use crate::geometry::{motion_compensate, CameraModel, Timestamp};
use crate::rng::{self, SimRng};
use crate::scene::{labels_at, Label, Scene};
use crate::sensors::{
    camera_trigger_time, radar_buffer_at, simulate_camera_image, simulate_lidar_sweep, simulate_radar, CameraImage, LidarConfig,
    LidarSweep, RadarBuffer, RadarPoint, SensorRig, LIDAR_PERIOD,
};

/// Camera frame period; cameras run at the LiDAR rate.
pub const CAMERA_PERIOD: f64 = LIDAR_PERIOD;

/// `t^s = T_on-time - T_current`. Positive means the data is older than it
/// should be.
pub fn staleness(t_on_time: Timestamp, t_current: Timestamp) -> f64 {
    t_on_time - t_current
}

/// Draws `δt ~ U(-t_j_max, t_j_max)` (open interval). Returns exactly 0 when
/// `t_j_max` is 0.
pub fn sample_jitter<R: Rng + ?Sized>(rng: &mut R, t_j_max: f64) -> f64 {
    if t_j_max <= 0.0 {
        return 0.0;
    }
    loop {
        let x = rng.random_range(-t_j_max..t_j_max);
        if x != -t_j_max {
            return x;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PolicyDecision {
    Consume,
    Dropout,
}

/// Consume stale data while `|t_s| <= threshold`, drop the modality beyond.
pub fn staleness_policy(t_s: f64, threshold: f64) -> PolicyDecision {
    if t_s.abs() <= threshold {
        PolicyDecision::Consume
    } else {
        PolicyDecision::Dropout
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StalenessConfig {
    /// Half-width of the jitter distribution, seconds.
    pub t_j_max: f64,
    /// Stale-over-original ratio.
    pub p_s: f64,
    pub policy_threshold: f64,
    /// Taken from the run seed, not from configuration files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for StalenessConfig {
    fn default() -> Self {
        Self { t_j_max: 0.1, p_s: 0.0125, policy_threshold: 0.150, seed: 0 }
    }
}

impl StalenessConfig {
    pub fn validate(&self) -> Result<(), StalenessError> {
        if !(self.t_j_max >= 0.0) || !self.t_j_max.is_finite() {
            return Err(StalenessError::InvalidConfig("t_j_max must be finite and nonnegative".into()));
        }
        if !(0.0..=1.0).contains(&self.p_s) {
            return Err(StalenessError::InvalidConfig(format!("p_s = {} outside [0, 1]", self.p_s)));
        }
        if !(self.policy_threshold >= 0.0) {
            return Err(StalenessError::InvalidConfig("policy_threshold must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Everything captured over one drive, indexed by capture time per modality.
#[derive(Clone, Debug)]
pub struct FrameStore {
    pub scene: Arc<Scene>,
    pub camera_model: CameraModel,
    pub lidar_config: LidarConfig,
    /// Keyed by `T_C`, strictly increasing.
    pub cameras: Vec<Arc<CameraImage>>,
    /// Keyed by `T_L`, strictly increasing.
    pub sweeps: Vec<Arc<LidarSweep>>,
    /// Every radar return, time-sorted.
    pub radar_points: Vec<RadarPoint>,
}

impl FrameStore {
    /// Simulates every full LiDAR sweep inside the scene, the phase-locked
    /// camera frame for each, and all radar firings.
    pub fn simulate(scene: Arc<Scene>, rig: &SensorRig, seed: u64) -> Self {
        let camera_model = rig.camera.model();
        let lidar = rig.lidar.clone();
        let sweep_count = ((scene.duration / LIDAR_PERIOD) + 1e-9).floor() as usize;
        let frames: Vec<(Arc<LidarSweep>, Arc<CameraImage>)> = (0..sweep_count)
            .into_par_iter()
            .map(|j| {
                let start = Timestamp(j as f64 * LIDAR_PERIOD);
                let sweep = simulate_lidar_sweep(&scene, &scene.ego, start, &lidar);
                let t_c = camera_trigger_time(sweep.t_l, lidar.sweep_end_azimuth(), camera_model.facing_azimuth);
                let image = simulate_camera_image(&scene, &scene.ego, &camera_model, t_c);
                (Arc::new(sweep), Arc::new(image))
            })
            .collect();
        let (sweeps, cameras) = frames.into_iter().unzip();
        let mut radar_points: Vec<RadarPoint> = rig
            .seeded_radars(seed)
            .iter()
            .flat_map(|cfg| {
                cfg.fire_times(Timestamp(0.0), Timestamp(scene.duration))
                    .into_iter()
                    .flat_map(|t| simulate_radar(&scene, &scene.ego, t, cfg))
                    .collect::<Vec<_>>()
            })
            .collect();
        radar_points.sort_by(|a, b| a.timestamp.cmp(&b.timestamp).then(a.radar_id.cmp(&b.radar_id)));
        Self { scene, camera_model, lidar_config: lidar, cameras, sweeps, radar_points }
    }

    /// Camera frame whose `T_C` is closest to `t`; exact ties go to the
    /// earlier frame.
    pub fn closest_camera(&self, t: Timestamp) -> Option<usize> {
        let idx = self.cameras.partition_point(|c| c.t_c < t);
        let after = (idx < self.cameras.len()).then_some(idx);
        let before = idx.checked_sub(1);
        match (before, after) {
            (Some(b), Some(a)) => {
                let db = t - self.cameras[b].t_c;
                let da = self.cameras[a].t_c - t;
                Some(if da < db { a } else { b })
            }
            (Some(b), None) => Some(b),
            (None, Some(a)) => Some(a),
            (None, None) => None,
        }
    }

    pub fn radar_buffer(&self, t: Timestamp) -> Result<RadarBuffer, SensorError> {
        radar_buffer_at(&self.radar_points, t)
    }

    /// Synchronized camera time for sweep `j`.
    pub fn synced_camera_time(&self, sweep: &LidarSweep) -> Timestamp {
        camera_trigger_time(sweep.t_l, self.lidar_config.sweep_end_azimuth(), self.camera_model.facing_azimuth)
    }

    /// On-time radar state for a sweep: the buffer as of the latest firing
    /// at or before `T_L`.
    pub fn synced_radar(&self, sweep: &LidarSweep) -> Result<RadarBuffer, SensorError> {
        let latest = self.radar_buffer(sweep.t_l)?;
        self.radar_buffer(latest.t_r)
    }

    /// Sweep indices whose bundles can be built and augmented: the radar
    /// buffer has a full second of history and a camera frame exists one
    /// period on either side.
    pub fn usable_frames(&self) -> Vec<usize> {
        (0..self.sweeps.len())
            .filter(|&j| {
                let t_l = self.sweeps[j].t_l;
                j >= 1 && j + 1 < self.sweeps.len() && t_l.secs() >= 1.0 + 2.0 * LIDAR_PERIOD && self.synced_radar(&self.sweeps[j]).is_ok()
            })
            .collect()
    }

    /// The original (synchronized) bundle for sweep `j`.
    pub fn bundle(&self, j: usize) -> Result<FrameBundle, StalenessError> {
        let sweep = &self.sweeps[j];
        let t_c = self.synced_camera_time(sweep);
        let camera = self
            .closest_camera(t_c)
            .filter(|&i| self.cameras[i].t_c == t_c)
            .ok_or(StalenessError::InsufficientHistory { modality: "camera", time: t_c.secs() })?;
        let radar = self.synced_radar(sweep)?;
        let lidar = Arc::new(compensate_sweep(self, sweep, t_c));
        let labels = Arc::new(labels_at(&self.scene, &self.camera_model, &self.scene.ego, t_c));
        Ok(self.assemble(j, t_c, lidar, labels, camera, radar, Provenance::Original))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        &self,
        j: usize,
        t_c: Timestamp,
        lidar: Arc<LidarSweep>,
        labels: Arc<Vec<Label>>,
        camera_idx: usize,
        radar: RadarBuffer,
        provenance: Provenance,
    ) -> FrameBundle {
        let camera = Arc::clone(&self.cameras[camera_idx]);
        let on_time_radar = self.synced_radar(&self.sweeps[j]).map(|b| b.t_r).unwrap_or(radar.t_r);
        let lidar_stamps: Vec<Timestamp> = lidar.points.iter().map(|p| p.timestamp).collect();
        let radar_stamps: Vec<Timestamp> = radar.points.iter().map(|p| p.timestamp).collect();
        let compensated_radar = compensate_radar(self, &radar, t_c);
        FrameBundle {
            frame_index: j,
            t_c,
            lidar_offsets: offset_features(&lidar_stamps, camera.t_c),
            radar_offsets: offset_features(&radar_stamps, camera.t_c),
            staleness: StalenessAnnotations { camera: staleness(t_c, camera.t_c), lidar: 0.0, radar: staleness(on_time_radar, radar.t_r) },
            camera,
            lidar,
            radar: compensated_radar,
            labels,
            provenance,
        }
    }
}

fn compensate_sweep(store: &FrameStore, sweep: &LidarSweep, t_c: Timestamp) -> LidarSweep {
    let pairs: Vec<_> = sweep.points.iter().map(|p| (p.position, p.timestamp)).collect();
    let moved = motion_compensate(&pairs, &store.scene.ego, t_c);
    let points = sweep.points.iter().zip(moved).map(|(p, position)| crate::sensors::LidarPoint { position, ..p.clone() }).collect();
    LidarSweep { points, sweep_start: sweep.sweep_start, t_l: sweep.t_l }
}

fn compensate_radar(store: &FrameStore, buffer: &RadarBuffer, t_c: Timestamp) -> RadarBuffer {
    let pairs: Vec<_> = buffer.points.iter().map(|p| (p.position, p.timestamp)).collect();
    let moved = motion_compensate(&pairs, &store.scene.ego, t_c);
    RadarBuffer {
        points: buffer.points.iter().zip(moved).map(|(p, position)| RadarPoint { position, ..p.clone() }).collect(),
        t_r: buffer.t_r,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Provenance {
    Original,
    Augmented,
}

/// Per-modality `t^s`, seconds.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StalenessAnnotations {
    pub camera: f64,
    pub lidar: f64,
    pub radar: f64,
}

/// One detector input.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameBundle {
    /// Sweep index in the originating store.
    pub frame_index: usize,
    /// Synchronized camera time; compensation target and label time.
    pub t_c: Timestamp,
    /// Possibly stale image; carries its own capture time.
    pub camera: Arc<CameraImage>,
    /// Sweep compensated to `t_c`.
    pub lidar: Arc<LidarSweep>,
    /// `image T_C - T_i` per LiDAR point.
    pub lidar_offsets: Vec<f64>,
    /// Buffer compensated to `t_c`.
    pub radar: RadarBuffer,
    pub radar_offsets: Vec<f64>,
    pub labels: Arc<Vec<Label>>,
    pub staleness: StalenessAnnotations,
    pub provenance: Provenance,
}

/// Timestamp triple used by delta profiles.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleTiming {
    pub t_c: Timestamp,
    pub t_l: Timestamp,
    pub t_r: Timestamp,
}

impl FrameBundle {
    pub fn timing(&self) -> BundleTiming {
        BundleTiming { t_c: self.camera.t_c, t_l: self.lidar.t_l, t_r: self.radar.t_r }
    }

    /// A copy whose camera is the store frame `camera_idx` (e.g. a fixed
    /// stale frame), with offsets and annotations recomputed.
    pub fn with_camera(&self, store: &FrameStore, camera_idx: usize) -> FrameBundle {
        let radar = store.radar_buffer(self.radar.t_r).expect("radar buffer was valid when the bundle was built");
        store.assemble(self.frame_index, self.t_c, Arc::clone(&self.lidar), Arc::clone(&self.labels), camera_idx, radar, self.provenance)
    }
}

/// Independent random streams for the camera and radar jitters.
#[derive(Clone, Debug)]
pub struct JitterStreams {
    pub camera: SimRng,
    pub radar: SimRng,
}

impl JitterStreams {
    pub fn new(seed: u64, index: u64) -> Self {
        Self { camera: rng::stream(seed, rng::tag::CAMERA_JITTER, index), radar: rng::stream(seed, rng::tag::RADAR_JITTER, index) }
    }
}

/// Stale counterpart of `base`: LiDAR and labels untouched, camera frame
/// fetched closest to `T_C + δt`, radar buffer re-queried at `T_R + δt'`.
pub fn augment_bundle(
    store: &FrameStore,
    base: &FrameBundle,
    cfg: &StalenessConfig,
    streams: &mut JitterStreams,
) -> Result<FrameBundle, StalenessError> {
    let dt_camera = sample_jitter(&mut streams.camera, cfg.t_j_max);
    let dt_radar = sample_jitter(&mut streams.radar, cfg.t_j_max);
    augment_with_jitter(store, base, dt_camera, dt_radar)
}

/// [`augment_bundle`] with explicit jitters.
pub fn augment_with_jitter(store: &FrameStore, base: &FrameBundle, dt_camera: f64, dt_radar: f64) -> Result<FrameBundle, StalenessError> {
    let t_c = camera_trigger_time(base.lidar.t_l, store.lidar_config.sweep_end_azimuth(), store.camera_model.facing_azimuth);
    let t_query = t_c + dt_camera;
    let camera_idx = store
        .closest_camera(t_query)
        .filter(|&i| (store.cameras[i].t_c - t_query).abs() <= CAMERA_PERIOD)
        .ok_or(StalenessError::InsufficientHistory { modality: "camera", time: t_query.secs() })?;
    let radar_query = base.radar.t_r + dt_radar;
    let radar =
        store.radar_buffer(radar_query).map_err(|_| StalenessError::InsufficientHistory { modality: "radar", time: radar_query.secs() })?;
    Ok(store.assemble(base.frame_index, t_c, Arc::clone(&base.lidar), Arc::clone(&base.labels), camera_idx, radar, Provenance::Augmented))
}

/// Per-element replacement mask: `true` with probability `p_s`. Masks drawn
/// from the same stream are nested across `p_s` values.
pub fn mix_mask<R: Rng + ?Sized>(len: usize, p_s: f64, rng: &mut R) -> Vec<bool> {
    (0..len).map(|_| rng.random::<f64>() < p_s).collect()
}

/// Replaces each original element by its stale counterpart at the same
/// index with probability `p_s`.
pub fn mix_datasets<T: Clone, R: Rng + ?Sized>(original: &[T], stale: &[T], p_s: f64, rng: &mut R) -> Result<Vec<T>, StalenessError> {
    if !(0.0..=1.0).contains(&p_s) {
        return Err(StalenessError::InvalidConfig(format!("p_s = {p_s} outside [0, 1]")));
    }
    if original.len() != stale.len() {
        return Err(StalenessError::InvalidConfig(format!("original has {} bundles, stale has {}", original.len(), stale.len())));
    }
    let mask = mix_mask(original.len(), p_s, rng);
    Ok(mask.iter().zip(original.iter().zip(stale)).map(|(&s, (o, st))| if s { st.clone() } else { o.clone() }).collect())
}

/// Timestamps of every frame of a drive of length `duration`, without
/// simulating any sensor content. Each camera frame is delivered one period
/// late with probability `camera_stale_probability`; `T_R` is the latest
/// firing of any radar at or before `T_L`.
pub fn timing_log(rig: &SensorRig, duration: f64, camera_stale_probability: f64, seed: u64) -> Vec<BundleTiming> {
    let sweeps = ((duration / LIDAR_PERIOD) + 1e-9).floor() as usize;
    let last_column = rig.lidar.columns - 1;
    let theta_c = rig.camera.model().facing_azimuth;
    let radars = rig.seeded_radars(seed);
    let mut delivery = rng::stream(seed, rng::tag::LOG_DELIVERY, 0);
    (0..sweeps)
        .map(|j| {
            let t_l = rig.lidar.column_time(Timestamp(j as f64 * LIDAR_PERIOD), last_column);
            let mut t_c = camera_trigger_time(t_l, rig.lidar.sweep_end_azimuth(), theta_c);
            if delivery.random::<f64>() < camera_stale_probability {
                t_c = t_c - CAMERA_PERIOD;
            }
            let t_r = radars
                .iter()
                .filter_map(|r| {
                    let n = ((t_l.secs() - r.phase_offset) / r.period).floor();
                    (n >= 0.0).then(|| Timestamp(r.phase_offset + n * r.period))
                })
                .max()
                .unwrap_or(Timestamp(0.0));
            BundleTiming { t_c, t_l, t_r }
        })
        .collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProfileDelta {
    CameraMinusLidar,
    RadarMinusLidar,
}

impl ProfileDelta {
    pub fn of(self, t: &BundleTiming) -> f64 {
        match self {
            ProfileDelta::CameraMinusLidar => t.t_c - t.t_l,
            ProfileDelta::RadarMinusLidar => t.t_r - t.t_l,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramBin {
    pub left: f64,
    pub right: f64,
    pub density: f64,
}

/// Normalized-density histogram on bins `[k·w, (k+1)·w)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub bin_width: f64,
    pub samples: usize,
    pub bins: Vec<HistogramBin>,
}

impl Histogram {
    pub fn integral(&self) -> f64 {
        self.bins.iter().map(|b| b.density * (b.right - b.left)).sum()
    }

    /// Probability mass in bins lying entirely inside `[lo, hi]`.
    pub fn mass_within(&self, lo: f64, hi: f64) -> f64 {
        self.bins.iter().filter(|b| b.left >= lo && b.right <= hi).map(|b| b.density * (b.right - b.left)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("bin_left,bin_right,density\n");
        for b in &self.bins {
            let _ = writeln!(out, "{},{},{}", b.left, b.right, b.density);
        }
        out
    }
}

pub fn profile_histogram(
    timings: impl IntoIterator<Item = BundleTiming>,
    which: ProfileDelta,
    bin_width: f64,
) -> Result<Histogram, StalenessError> {
    if !(bin_width > 0.0) || !bin_width.is_finite() {
        return Err(StalenessError::InvalidConfig("bin width must be positive".into()));
    }
    let mut counts: BTreeMap<i64, usize> = BTreeMap::new();
    let mut n = 0usize;
    for t in timings {
        let d = which.of(&t);
        // Round away representation noise so values on a bin edge stay put.
        let k = ((d / bin_width) + 1e-9).floor() as i64;
        *counts.entry(k).or_default() += 1;
        n += 1;
    }
    let bins = counts
        .into_iter()
        .map(|(k, c)| HistogramBin {
            left: k as f64 * bin_width,
            right: (k + 1) as f64 * bin_width,
            density: c as f64 / (n as f64 * bin_width),
        })
        .collect();
    Ok(Histogram { bin_width, samples: n, bins })
}

//! Toy mid-fusion detector.
//!
//! LiDAR and radar points are binned into a camera-aligned grid together
//! with their timestamp offsets; the camera contributes block intensity and
//! gradient. A one-hidden-layer network scores every cell for every class
//! and is trained with a per-cell logistic loss. A cell is positive for a
//! class when a label's 2D box centre falls in it.

use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::alignment::{project_and_filter, to_camera_points, Modality};
use crate::error::DetectorError;
use crate::geometry::CameraModel;
use crate::rng::{self, SimRng};
use crate::scene::{Label, ObjectClass};
use crate::sensors::CameraImage;
use crate::staleness::{mix_mask, FrameBundle};

pub const CLASSES: usize = 3;
pub const LIDAR_CHANNELS: usize = 8;
pub const RADAR_CHANNELS: usize = 5;
pub const CAMERA_CHANNELS: usize = 2;
pub const CHANNELS: usize = LIDAR_CHANNELS + RADAR_CHANNELS + CAMERA_CHANNELS;
const FRAME_CONTEXT_FEATURES: usize = 5;
/// Ego-frame height separating ground returns from object returns.
const ABOVE_GROUND: f64 = 0.3;

/// The three feature branches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SensorModality {
    Lidar,
    Radar,
    Camera,
}

impl SensorModality {
    pub const ALL: [SensorModality; 3] = [SensorModality::Lidar, SensorModality::Radar, SensorModality::Camera];

    /// Channel range within a cell.
    pub fn channels(self) -> std::ops::Range<usize> {
        match self {
            SensorModality::Lidar => 0..LIDAR_CHANNELS,
            SensorModality::Radar => LIDAR_CHANNELS..LIDAR_CHANNELS + RADAR_CHANNELS,
            SensorModality::Camera => LIDAR_CHANNELS + RADAR_CHANNELS..CHANNELS,
        }
    }
}

/// Grid geometry and model-input layout.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FeatureConfig {
    pub grid_cols: usize,
    pub grid_rows: usize,
    /// Fill the offset channels; when false they stay 0.
    pub use_offsets: bool,
    /// Neighbouring rows above and below included in a cell's input.
    pub context_rows: usize,
    /// Neighbouring columns on each side whose LiDAR and radar channels
    /// are included in a cell's input.
    pub context_cols: usize,
    /// Neighbouring columns on each side whose camera channels are included.
    pub camera_context_cols: usize,
    /// Append the normalized cell row and column.
    pub cell_position: bool,
    /// Append frame-wide summaries (occupancy fractions, mean offsets,
    /// mean image intensity).
    pub frame_context: bool,
}

impl Default for FeatureConfig {
    fn default() -> Self {
        Self {
            grid_cols: 40,
            grid_rows: 24,
            use_offsets: true,
            context_rows: 1,
            context_cols: 2,
            camera_context_cols: 0,
            cell_position: true,
            frame_context: true,
        }
    }
}

impl FeatureConfig {
    pub fn cells(&self) -> usize {
        self.grid_cols * self.grid_rows
    }

    pub fn input_dim(&self) -> usize {
        let rows = 2 * self.context_rows + 1;
        rows * (2 * self.context_cols + 1) * (LIDAR_CHANNELS + RADAR_CHANNELS)
            + rows * (2 * self.camera_context_cols + 1) * CAMERA_CHANNELS
            + if self.cell_position { 2 } else { 0 }
            + if self.frame_context { FRAME_CONTEXT_FEATURES } else { 0 }
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.grid_cols == 0 || self.grid_rows == 0 {
            return Err("grid must have at least one row and column".into());
        }
        Ok(())
    }

    fn cell_of(&self, u: f64, v: f64, width: u32, height: u32) -> usize {
        let c = ((u * self.grid_cols as f64 / width as f64) as usize).min(self.grid_cols - 1);
        let r = ((v * self.grid_rows as f64 / height as f64) as usize).min(self.grid_rows - 1);
        r * self.grid_cols + c
    }
}

/// Per-cell channels, row-major over cells.
///
/// LiDAR: count, mean range, mean intensity, mean/min/max offset, fraction
/// of returns above the ground, max height.
/// Radar: count, mean doppler, mean rcs, mean snr, mean offset.
/// Camera: mean intensity, mean gradient magnitude.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureGrid {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f32>,
}

impl FeatureGrid {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols * CHANNELS] }
    }

    pub fn cell(&self, row: usize, col: usize) -> &[f32] {
        let i = (row * self.cols + col) * CHANNELS;
        &self.data[i..i + CHANNELS]
    }

    pub fn channel(&self, row: usize, col: usize, channel: usize) -> f32 {
        self.cell(row, col)[channel]
    }

    pub fn zero_modality(&mut self, modality: SensorModality) {
        let range = modality.channels();
        for cell in self.data.chunks_exact_mut(CHANNELS) {
            cell[range.clone()].fill(0.0);
        }
    }

    pub fn without(&self, modality: SensorModality) -> Self {
        let mut out = self.clone();
        out.zero_modality(modality);
        out
    }

    fn frame_context(&self) -> [f64; FRAME_CONTEXT_FEATURES] {
        let n = (self.rows * self.cols) as f64;
        let mut lidar_cells = 0.0;
        let mut radar_cells = 0.0;
        let mut lidar_offset = 0.0;
        let mut radar_offset = 0.0;
        let mut intensity = 0.0;
        for cell in self.data.chunks_exact(CHANNELS) {
            if cell[0] > 0.0 {
                lidar_cells += 1.0;
                lidar_offset += cell[3] as f64;
            }
            if cell[LIDAR_CHANNELS] > 0.0 {
                radar_cells += 1.0;
                radar_offset += cell[LIDAR_CHANNELS + 4] as f64;
            }
            intensity += cell[LIDAR_CHANNELS + RADAR_CHANNELS] as f64;
        }
        [
            lidar_cells / n,
            radar_cells / n,
            intensity / n,
            if lidar_cells > 0.0 { lidar_offset / lidar_cells } else { 0.0 },
            if radar_cells > 0.0 { radar_offset / radar_cells } else { 0.0 },
        ]
    }

    /// Model input rows, one per cell, `cfg.input_dim()` wide.
    pub fn cell_inputs(&self, cfg: &FeatureConfig) -> Vec<f64> {
        let all: Vec<usize> = (0..self.rows * self.cols).collect();
        self.selected_inputs(cfg, &all)
    }

    /// Model inputs of the listed cells only, in the given order.
    pub fn selected_inputs(&self, cfg: &FeatureConfig, cells: &[usize]) -> Vec<f64> {
        let dim = cfg.input_dim();
        let (rr_max, cc_max) = (cfg.context_rows as isize, cfg.context_cols as isize);
        let cam_max = cfg.camera_context_cols as isize;
        let col_max = cc_max.max(cam_max);
        let ranged = SensorModality::Lidar.channels().start..SensorModality::Radar.channels().end;
        let cam = SensorModality::Camera.channels();
        let context = self.frame_context();
        let mut out = vec![0.0; cells.len() * dim];
        for (x, &cell) in out.chunks_exact_mut(dim).zip(cells) {
            let (row, col) = (cell / self.cols, cell % self.cols);
            let mut k = 0;
            for dr in -rr_max..=rr_max {
                for dc in -col_max..=col_max {
                    let (rr, cc) = (row as isize + dr, col as isize + dc);
                    let inside = rr >= 0 && cc >= 0 && (rr as usize) < self.rows && (cc as usize) < self.cols;
                    for (channels, reach) in [(ranged.clone(), cc_max), (cam.clone(), cam_max)] {
                        if dc.abs() > reach {
                            continue;
                        }
                        let width = channels.len();
                        if inside {
                            let src = &self.cell(rr as usize, cc as usize)[channels];
                            for (dst, v) in x[k..k + width].iter_mut().zip(src) {
                                *dst = *v as f64;
                            }
                        }
                        k += width;
                    }
                }
            }
            if cfg.cell_position {
                x[k] = (row as f64 + 0.5) / self.rows as f64;
                x[k + 1] = (col as f64 + 0.5) / self.cols as f64;
                k += 2;
            }
            if cfg.frame_context {
                x[k..k + FRAME_CONTEXT_FEATURES].copy_from_slice(&context);
            }
        }
        out
    }
}

/// Sums each cell's values in sorted order so the result does not depend
/// on input point order.
fn accumulate<const K: usize>(mut entries: Vec<(usize, [f64; K])>) -> Vec<(usize, usize, [f64; K], [f64; K], [f64; K])> {
    entries.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then_with(|| a.1.iter().zip(&b.1).map(|(x, y)| x.total_cmp(y)).find(|o| o.is_ne()).unwrap_or(std::cmp::Ordering::Equal))
    });
    let mut out = Vec::new();
    let mut i = 0;
    while i < entries.len() {
        let cell = entries[i].0;
        let mut j = i;
        let mut sum = [0.0; K];
        let mut min = [f64::INFINITY; K];
        let mut max = [f64::NEG_INFINITY; K];
        while j < entries.len() && entries[j].0 == cell {
            for k in 0..K {
                sum[k] += entries[j].1[k];
                min[k] = min[k].min(entries[j].1[k]);
                max[k] = max[k].max(entries[j].1[k]);
            }
            j += 1;
        }
        out.push((cell, j - i, sum, min, max));
        i = j;
    }
    out
}

fn camera_channels(image: &CameraImage, grid: &mut FeatureGrid, cfg: &FeatureConfig) {
    let (w, h) = (image.width as usize, image.height as usize);
    let mut sum = vec![0.0f64; cfg.cells()];
    let mut grad = vec![0.0f64; cfg.cells()];
    let mut count = vec![0usize; cfg.cells()];
    for v in 0..h {
        for u in 0..w {
            let i = image.pixel(u, v) as f64;
            let gx = if u + 1 < w { image.pixel(u + 1, v) as f64 - i } else { 0.0 };
            let gy = if v + 1 < h { image.pixel(u, v + 1) as f64 - i } else { 0.0 };
            let cell = cfg.cell_of(u as f64 + 0.5, v as f64 + 0.5, image.width, image.height);
            sum[cell] += i;
            grad[cell] += gx.hypot(gy);
            count[cell] += 1;
        }
    }
    let base = LIDAR_CHANNELS + RADAR_CHANNELS;
    for cell in 0..cfg.cells() {
        if count[cell] > 0 {
            grid.data[cell * CHANNELS + base] = (sum[cell] / count[cell] as f64) as f32;
            grid.data[cell * CHANNELS + base + 1] = (grad[cell] / count[cell] as f64) as f32;
        }
    }
}

/// Bins a bundle's (already compensated) points into the camera grid.
/// Points project with the camera's mount, i.e. in the geometry of the
/// bundle's target time.
pub fn rasterize(bundle: &FrameBundle, cam: &CameraModel, cfg: &FeatureConfig) -> FeatureGrid {
    let mut grid = FeatureGrid::zeros(cfg.grid_rows, cfg.grid_cols);
    let offset_scale = if cfg.use_offsets { 1.0 } else { 0.0 };

    let lidar_cam = to_camera_points(cam, bundle.lidar.points.iter().map(|p| p.position), &bundle.lidar_offsets, Modality::Lidar);
    let mut entries = Vec::new();
    for (p, src) in lidar_cam.iter().zip(&bundle.lidar.points) {
        if let Some(q) = project_and_filter(std::slice::from_ref(p), cam).first() {
            let cell = cfg.cell_of(q.u, q.v, cam.width, cam.height);
            let z = src.position.z;
            entries.push((cell, [q.range, src.intensity, q.offset * offset_scale, f64::from(u8::from(z > ABOVE_GROUND)), z]));
        }
    }
    for (cell, n, sum, min, max) in accumulate(entries) {
        let nf = n as f64;
        let out = &mut grid.data[cell * CHANNELS..][..LIDAR_CHANNELS];
        out.copy_from_slice(&[nf, sum[0] / nf, sum[1] / nf, sum[2] / nf, min[2], max[2], sum[3] / nf, max[4]].map(|x| x as f32));
    }

    let radar_cam = to_camera_points(cam, bundle.radar.points.iter().map(|p| p.position), &bundle.radar_offsets, Modality::Radar);
    let mut entries = Vec::new();
    for (p, src) in radar_cam.iter().zip(&bundle.radar.points) {
        if let Some(q) = project_and_filter(std::slice::from_ref(p), cam).first() {
            let cell = cfg.cell_of(q.u, q.v, cam.width, cam.height);
            entries.push((cell, [src.doppler, src.rcs, src.snr, q.offset * offset_scale]));
        }
    }
    for (cell, n, sum, _, _) in accumulate(entries) {
        let nf = n as f64;
        let out = &mut grid.data[cell * CHANNELS + LIDAR_CHANNELS..][..RADAR_CHANNELS];
        out.copy_from_slice(&[nf, sum[0] / nf, sum[1] / nf, sum[2] / nf, sum[3] / nf].map(|x| x as f32));
    }

    camera_channels(&bundle.camera, &mut grid, cfg);
    grid
}

/// With probability `p`, zeroes one branch chosen uniformly.
pub fn modality_dropout<R: Rng + ?Sized>(grid: &FeatureGrid, rng: &mut R, p: f64) -> (FeatureGrid, Option<SensorModality>) {
    match dropout_choice(rng, p) {
        Some(m) => (grid.without(m), Some(m)),
        None => (grid.clone(), None),
    }
}

fn dropout_choice<R: Rng + ?Sized>(rng: &mut R, p: f64) -> Option<SensorModality> {
    if rng.random::<f64>() < p {
        Some(SensorModality::ALL[rng.random_range(0..3)])
    } else {
        None
    }
}

/// Per-cell class bitmask: bit `c` set when a class-`c` label's box centre
/// lies in the cell.
pub fn cell_targets(labels: &[Label], width: u32, height: u32, cfg: &FeatureConfig) -> Vec<u8> {
    let mut out = vec![0u8; cfg.cells()];
    for l in labels {
        let (u, v) = l.box_center();
        if u >= 0.0 && v >= 0.0 && u < width as f64 && v < height as f64 {
            out[cfg.cell_of(u, v, width, height)] |= 1 << l.class.index();
        }
    }
    out
}

/// A rasterized frame with its targets.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub grid: FeatureGrid,
    pub targets: Vec<u8>,
}

impl Sample {
    pub fn from_bundle(bundle: &FrameBundle, cam: &CameraModel, cfg: &FeatureConfig) -> Self {
        Self { grid: rasterize(bundle, cam, cfg), targets: cell_targets(&bundle.labels, cam.width, cam.height, cfg) }
    }
}

/// Dot product with four independent accumulators; fixed summation order.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ra.iter().zip(rb).map(|(x, y)| x * y).sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

/// One hidden tanh layer, independent sigmoid output per class. Inputs are
/// standardized with statistics stored in the model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyModel {
    pub input_dim: usize,
    pub hidden: usize,
    /// `hidden × input_dim`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `CLASSES × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub input_mean: Vec<f64>,
    pub input_scale: Vec<f64>,
}

/// Same shape as the trainable parameters of [`ToyModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl Gradients {
    fn zeros_like(m: &ToyModel) -> Self {
        Self { w1: vec![0.0; m.w1.len()], b1: vec![0.0; m.b1.len()], w2: vec![0.0; m.w2.len()], b2: vec![0.0; m.b2.len()] }
    }

    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }
}

impl ToyModel {
    /// Glorot-uniform weights, zero biases, identity normalization.
    pub fn new(input_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = rng::stream(seed, rng::tag::MODEL_INIT, 0);
        let a1 = (6.0 / (input_dim + hidden) as f64).sqrt();
        let a2 = (6.0 / (hidden + CLASSES) as f64).sqrt();
        Self {
            input_dim,
            hidden,
            w1: (0..hidden * input_dim).map(|_| rng.random_range(-a1..a1)).collect(),
            b1: vec![0.0; hidden],
            w2: (0..CLASSES * hidden).map(|_| rng.random_range(-a2..a2)).collect(),
            b2: vec![0.0; CLASSES],
            input_mean: vec![0.0; input_dim],
            input_scale: vec![1.0; input_dim],
        }
    }

    /// Sets the input standardization from raw inputs, given as blocks of
    /// whole rows.
    pub fn fit_normalizer<B: AsRef<[f64]>>(&mut self, blocks: impl IntoIterator<Item = B>) {
        let d = self.input_dim;
        let mut n = 0.0;
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        for block in blocks {
            for row in block.as_ref().chunks_exact(d) {
                n += 1.0;
                for j in 0..d {
                    sum[j] += row[j];
                    sq[j] += row[j] * row[j];
                }
            }
        }
        if n == 0.0 {
            return;
        }
        for j in 0..d {
            let mean = sum[j] / n;
            let var = (sq[j] / n - mean * mean).max(0.0);
            self.input_mean[j] = mean;
            self.input_scale[j] = if var > 1e-12 { 1.0 / var.sqrt() } else { 1.0 };
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    pub fn is_finite(&self) -> bool {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    fn normalize_into(&self, x: &[f64], out: &mut [f64]) {
        for j in 0..self.input_dim {
            out[j] = (x[j] - self.input_mean[j]) * self.input_scale[j];
        }
    }

    fn hidden_into(&self, xn: &[f64], h: &mut [f64]) {
        for (k, hk) in h.iter_mut().enumerate() {
            let w = &self.w1[k * self.input_dim..][..self.input_dim];
            *hk = (self.b1[k] + dot(w, xn)).tanh();
        }
    }

    fn output(&self, h: &[f64]) -> [f64; CLASSES] {
        let mut z = [0.0; CLASSES];
        for (c, zc) in z.iter_mut().enumerate() {
            let w = &self.w2[c * self.hidden..][..self.hidden];
            *zc = self.b2[c] + w.iter().zip(h).map(|(a, b)| a * b).sum::<f64>();
        }
        z
    }

    /// Class logits for one raw input row.
    pub fn logits(&self, x: &[f64]) -> [f64; CLASSES] {
        let mut xn = vec![0.0; self.input_dim];
        let mut h = vec![0.0; self.hidden];
        self.normalize_into(x, &mut xn);
        self.hidden_into(&xn, &mut h);
        self.output(&h)
    }

    /// Class probabilities for every row of `inputs`.
    pub fn predict(&self, inputs: &[f64]) -> Vec<[f64; CLASSES]> {
        let mut xn = vec![0.0; self.input_dim];
        let mut h = vec![0.0; self.hidden];
        inputs
            .chunks_exact(self.input_dim)
            .map(|x| {
                self.normalize_into(x, &mut xn);
                self.hidden_into(&xn, &mut h);
                self.output(&h).map(sigmoid)
            })
            .collect()
    }

    /// Mean over cells of `Σ_c w·(softplus(z_c) − y_c·z_c)`, where `w` is
    /// `pos_weight` for positive targets, and its exact gradient.
    pub fn loss_and_gradient(&self, batch: &[(&[f64], &[u8])], pos_weight: f64) -> (f64, Gradients) {
        let frames: Vec<CellBatch> = batch.iter().map(|&(inputs, targets)| CellBatch { inputs, targets, weights: None }).collect();
        self.weighted_loss_and_gradient(&frames, pos_weight)
    }

    /// As [`ToyModel::loss_and_gradient`] with optional per-cell weights;
    /// the mean is taken over the total cell weight.
    pub fn weighted_loss_and_gradient(&self, batch: &[CellBatch], pos_weight: f64) -> (f64, Gradients) {
        let mut grad = Gradients::zeros_like(self);
        let mut xn = vec![0.0; self.input_dim];
        let mut h = vec![0.0; self.hidden];
        let mut dh = vec![0.0; self.hidden];
        let mut loss = 0.0;
        let total: f64 = batch.iter().map(|f| f.weights.map_or(f.targets.len() as f64, |w| w.iter().sum())).sum();
        if total <= 0.0 {
            return (0.0, grad);
        }
        let inv_n = 1.0 / total;
        for frame in batch {
            for (i, (x, &t)) in frame.inputs.chunks_exact(self.input_dim).zip(frame.targets).enumerate() {
                let cell_weight = frame.weights.map_or(1.0, |w| w[i]);
                self.normalize_into(x, &mut xn);
                self.hidden_into(&xn, &mut h);
                let z = self.output(&h);
                dh.fill(0.0);
                for c in 0..CLASSES {
                    let y = f64::from((t >> c) & 1);
                    let w = cell_weight * if y > 0.0 { pos_weight } else { 1.0 };
                    loss += w * (softplus(z[c]) - y * z[c]);
                    let dz = w * (sigmoid(z[c]) - y) * inv_n;
                    grad.b2[c] += dz;
                    let row = &mut grad.w2[c * self.hidden..][..self.hidden];
                    let w2 = &self.w2[c * self.hidden..][..self.hidden];
                    for k in 0..self.hidden {
                        row[k] += dz * h[k];
                        dh[k] += dz * w2[k];
                    }
                }
                for k in 0..self.hidden {
                    let da = dh[k] * (1.0 - h[k] * h[k]);
                    if da == 0.0 {
                        continue;
                    }
                    grad.b1[k] += da;
                    let row = &mut grad.w1[k * self.input_dim..][..self.input_dim];
                    for (g, xj) in row.iter_mut().zip(&xn) {
                        *g += da * xj;
                    }
                }
            }
        }
        (loss * inv_n, grad)
    }

    fn params_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }
}

/// Inputs and targets of some cells of one frame.
#[derive(Clone, Copy, Debug)]
pub struct CellBatch<'a> {
    pub inputs: &'a [f64],
    pub targets: &'a [u8],
    pub weights: Option<&'a [f64]>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Frames per gradient step.
    pub batch_frames: usize,
    pub learning_rate: f64,
    /// The rate follows a cosine from `learning_rate` down to this
    /// fraction of it at the last step.
    pub final_lr_fraction: f64,
    pub optimizer: Optimizer,
    /// SGD momentum; ignored by Adam.
    pub momentum: f64,
    pub hidden: usize,
    /// Loss weight of positive cell/class targets.
    pub pos_weight: f64,
    pub modality_dropout: f64,
    /// Fraction of target-free cells kept per training frame; kept ones
    /// are up-weighted by its inverse.
    pub negative_keep: f64,
    /// Score threshold used at evaluation.
    pub threshold: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 8,
            batch_frames: 2,
            learning_rate: 0.003,
            final_lr_fraction: 0.05,
            optimizer: Optimizer::Adam,
            momentum: 0.9,
            hidden: 32,
            pos_weight: 4.0,
            modality_dropout: 0.2,
            negative_keep: 0.25,
            threshold: 0.5,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.batch_frames == 0 || self.hidden == 0 {
            return Err("batch_frames and hidden must be positive".into());
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err("learning_rate must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.modality_dropout) {
            return Err("modality_dropout must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err("final_lr_fraction must lie in [0, 1]".into());
        }
        if !(self.negative_keep > 0.0 && self.negative_keep <= 1.0) {
            return Err("negative_keep must lie in (0, 1]".into());
        }
        if !(self.pos_weight > 0.0) {
            return Err("pos_weight must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err("momentum must lie in [0, 1)".into());
        }
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Stale samples presented per epoch.
    pub stale_presented: Vec<usize>,
}

struct OptimizerState {
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
    step: i32,
}

impl OptimizerState {
    fn new(m: &ToyModel) -> Self {
        let zeros = |v: &Vec<f64>| vec![0.0; v.len()];
        let shapes = [&m.w1, &m.b1, &m.w2, &m.b2];
        Self { first: shapes.iter().map(|v| zeros(v)).collect(), second: shapes.iter().map(|v| zeros(v)).collect(), step: 0 }
    }

    fn apply(&mut self, model: &mut ToyModel, grad: &Gradients, cfg: &TrainConfig, lr: f64) {
        self.step += 1;
        let grads = [&grad.w1, &grad.b1, &grad.w2, &grad.b2];
        let (b1, b2, eps) = (0.9, 0.999, 1e-8);
        let c1 = 1.0 - f64::powi(b1, self.step);
        let c2 = 1.0 - f64::powi(b2, self.step);
        for (i, params) in model.params_mut().into_iter().enumerate() {
            let g = grads[i];
            let m = &mut self.first[i];
            let v = &mut self.second[i];
            for j in 0..params.len() {
                match cfg.optimizer {
                    Optimizer::Sgd => {
                        m[j] = cfg.momentum * m[j] + g[j];
                        params[j] -= lr * m[j];
                    }
                    Optimizer::Adam => {
                        m[j] = b1 * m[j] + (1.0 - b1) * g[j];
                        v[j] = b2 * v[j] + (1.0 - b2) * g[j] * g[j];
                        params[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Mini-batch training. Each epoch draws a fresh stale/original mask with
/// probability `p_s`, shuffles, and applies modality dropout per sample.
/// `stale[i]` is the augmented counterpart of `original[i]`.
pub fn train(
    mut model: ToyModel,
    original: &[Sample],
    stale: &[Sample],
    p_s: f64,
    features: &FeatureConfig,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<(ToyModel, TrainLog), DetectorError> {
    if model.input_dim != features.input_dim() {
        return Err(DetectorError::DimensionMismatch { expected: model.input_dim, actual: features.input_dim() });
    }
    if p_s > 0.0 && stale.len() != original.len() {
        return Err(DetectorError::DimensionMismatch { expected: original.len(), actual: stale.len() });
    }
    let mut state = OptimizerState::new(&model);
    let mut log = TrainLog::default();
    let n = original.len();
    let total_steps = cfg.epochs * n.div_ceil(cfg.batch_frames);
    let mut step = 0usize;
    for epoch in 0..cfg.epochs {
        let mask = mix_mask(n, p_s, &mut rng::stream(seed, rng::tag::MIX, epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng::stream(seed, rng::tag::SHUFFLE, epoch as u64));
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_frames).enumerate() {
            let prepared: Vec<(Vec<f64>, Vec<u8>, Vec<f64>)> = chunk
                .iter()
                .enumerate()
                .map(|(pos, &i)| {
                    let sample = if mask[i] { &stale[i] } else { &original[i] };
                    let mut rng: SimRng = rng::stream(seed, rng::tag::DROPOUT, (epoch * n + b * cfg.batch_frames + pos) as u64);
                    let dropped = dropout_choice(&mut rng, cfg.modality_dropout);
                    let mut cells = Vec::new();
                    let mut weights = Vec::new();
                    for (cell, &t) in sample.targets.iter().enumerate() {
                        if t != 0 || cfg.negative_keep >= 1.0 {
                            cells.push(cell);
                            weights.push(1.0);
                        } else if rng.random::<f64>() < cfg.negative_keep {
                            cells.push(cell);
                            weights.push(1.0 / cfg.negative_keep);
                        }
                    }
                    let inputs = match dropped {
                        Some(m) => sample.grid.without(m).selected_inputs(features, &cells),
                        None => sample.grid.selected_inputs(features, &cells),
                    };
                    let targets = cells.iter().map(|&c| sample.targets[c]).collect();
                    (inputs, targets, weights)
                })
                .collect();
            let batch: Vec<CellBatch> = prepared.iter().map(|(x, t, w)| CellBatch { inputs: x, targets: t, weights: Some(w) }).collect();
            let (loss, grad) = model.weighted_loss_and_gradient(&batch, cfg.pos_weight);
            if !loss.is_finite() || !grad.flat().iter().all(|g| g.is_finite()) {
                return Err(DetectorError::DivergenceDetected { epoch, batch: b });
            }
            let progress = if total_steps > 1 { step as f64 / (total_steps - 1) as f64 } else { 0.0 };
            let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
            let lr = cfg.learning_rate * (cfg.final_lr_fraction + (1.0 - cfg.final_lr_fraction) * cosine);
            state.apply(&mut model, &grad, cfg, lr);
            step += 1;
            if !model.is_finite() {
                return Err(DetectorError::DivergenceDetected { epoch, batch: b });
            }
            epoch_loss += loss;
            batches += 1;
        }
        log.epoch_loss.push(if batches > 0 { epoch_loss / batches as f64 } else { 0.0 });
        log.stale_presented.push(mask.iter().filter(|m| **m).count());
    }
    Ok((model, log))
}

/// Mean loss of `model` over `samples`, no dropout.
pub fn dataset_loss(model: &ToyModel, samples: &[Sample], features: &FeatureConfig, pos_weight: f64) -> f64 {
    let inputs: Vec<Vec<f64>> = samples.iter().map(|s| s.grid.cell_inputs(features)).collect();
    let batch: Vec<(&[f64], &[u8])> = inputs.iter().zip(samples).map(|(x, s)| (x.as_slice(), s.targets.as_slice())).collect();
    model.loss_and_gradient(&batch, pos_weight).0
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::Add for Counts {
    type Output = Counts;
    fn add(self, o: Counts) -> Counts {
        Counts { tp: self.tp + o.tp, fp: self.fp + o.fp, fn_: self.fn_ + o.fn_ }
    }
}

/// Per-class TP/FP/FN of predicted against target bitmasks.
pub fn count_matches(predicted: &[u8], targets: &[u8]) -> [Counts; CLASSES] {
    let mut out = [Counts::default(); CLASSES];
    for (&p, &t) in predicted.iter().zip(targets) {
        for (c, counts) in out.iter_mut().enumerate() {
            match ((p >> c) & 1, (t >> c) & 1) {
                (1, 1) => counts.tp += 1,
                (1, 0) => counts.fp += 1,
                (0, 1) => counts.fn_ += 1,
                _ => {}
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: ObjectClass,
    pub counts: Counts,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl ClassMetrics {
    pub fn from_counts(class: ObjectClass, counts: Counts) -> Self {
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.fn_);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Self { class, counts, precision, recall, f1 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub frames: usize,
    pub classes: Vec<ClassMetrics>,
}

impl EvalReport {
    pub fn from_counts(dataset: impl Into<String>, frames: usize, counts: [Counts; CLASSES]) -> Self {
        Self {
            dataset: dataset.into(),
            frames,
            classes: ObjectClass::ALL.iter().map(|&c| ClassMetrics::from_counts(c, counts[c.index()])).collect(),
        }
    }

    pub fn class(&self, class: ObjectClass) -> &ClassMetrics {
        &self.classes[class.index()]
    }

    pub fn f1(&self) -> [f64; CLASSES] {
        ObjectClass::ALL.map(|c| self.class(c).f1)
    }

    pub const CSV_HEADER: &'static str = "dataset,class,tp,fp,fn,precision,recall,f1";

    /// One CSV row per class, no header.
    pub fn csv_rows(&self) -> String {
        let mut out = String::new();
        for m in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                self.dataset, m.class, m.counts.tp, m.counts.fp, m.counts.fn_, m.precision, m.recall, m.f1
            ));
        }
        out
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.dataset)?;
        for m in &self.classes {
            write!(f, " {} P={:.3} R={:.3} F1={:.3}", m.class, m.precision, m.recall, m.f1)?;
        }
        Ok(())
    }
}

/// Thresholded cell predictions as class bitmasks.
pub fn predict_cells(model: &ToyModel, grid: &FeatureGrid, features: &FeatureConfig, threshold: f64) -> Vec<u8> {
    model
        .predict(&grid.cell_inputs(features))
        .into_iter()
        .map(|p| (0..CLASSES).filter(|&c| p[c] >= threshold).fold(0u8, |m, c| m | (1 << c)))
        .collect()
}

pub fn evaluate(model: &ToyModel, samples: &[Sample], features: &FeatureConfig, threshold: f64, dataset: &str) -> EvalReport {
    let zero = [Counts::default(); CLASSES];
    let counts = samples
        .par_iter()
        .map(|s| count_matches(&predict_cells(model, &s.grid, features, threshold), &s.targets))
        .reduce(|| zero, |a, b| [a[0] + b[0], a[1] + b[1], a[2] + b[2]]);
    EvalReport::from_counts(dataset, samples.len(), counts)
}

/// Per-class `F1 / F1_baseline`.
pub fn normalized_f1(report: &EvalReport, baseline: &EvalReport) -> Result<[f64; CLASSES], DetectorError> {
    let mut out = [0.0; CLASSES];
    for c in ObjectClass::ALL {
        let base = baseline.class(c).f1;
        if base == 0.0 {
            return Err(DetectorError::BaselineZero(c));
        }
        out[c.index()] = report.class(c).f1 / base;
    }
    Ok(out)
}

pub const CHECKPOINT_SCHEMA: u32 = 1;

/// Versioned model checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub seed: u64,
    pub p_s: f64,
    pub features: FeatureConfig,
    pub training: TrainConfig,
    pub model: ToyModel,
}

impl Checkpoint {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("checkpoint serializes")
    }

    pub fn from_json(s: &str) -> Result<Self, crate::error::FormatError> {
        let c: Checkpoint = serde_json::from_str(s)?;
        if c.schema_version != CHECKPOINT_SCHEMA {
            return Err(crate::error::FormatError::UnsupportedSchema(c.schema_version));
        }
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Timestamp, Vec3};
    use crate::sensors::{LidarPoint, LidarSweep, RadarBuffer, RadarPoint};
    use crate::staleness::{Provenance, StalenessAnnotations};
    use rand::SeedableRng;
    use std::f64::consts::FRAC_PI_2;
    use std::sync::Arc;

    fn cam() -> CameraModel {
        CameraModel::looking_at_azimuth(0, FRAC_PI_2, Vec3::new(0.0, 0.0, 1.6), 320, 192, FRAC_PI_2)
    }

    fn bundle(lidar: Vec<LidarPoint>, lidar_offsets: Vec<f64>, radar: Vec<RadarPoint>, radar_offsets: Vec<f64>) -> FrameBundle {
        FrameBundle {
            frame_index: 0,
            t_c: Timestamp(1.0),
            camera: Arc::new(CameraImage {
                camera_id: 0,
                t_c: Timestamp(1.0),
                row_time: 0.0,
                exposure: 0.01,
                width: 320,
                height: 192,
                pixels: vec![0.0; 320 * 192],
            }),
            lidar: Arc::new(LidarSweep { points: lidar, sweep_start: Timestamp(0.95), t_l: Timestamp(1.05) }),
            lidar_offsets,
            radar: RadarBuffer { points: radar, t_r: Timestamp(1.0) },
            radar_offsets,
            labels: Arc::new(vec![]),
            staleness: StalenessAnnotations { camera: 0.0, lidar: 0.0, radar: 0.0 },
            provenance: Provenance::Original,
        }
    }

    fn lidar_point(position: Vec3, intensity: f64) -> LidarPoint {
        LidarPoint { position, intensity, timestamp: Timestamp(1.0), azimuth: 0.0, object_id: None }
    }

    #[test]
    fn empty_bundle_rasterizes_to_zero() {
        let g = rasterize(&bundle(vec![], vec![], vec![], vec![]), &cam(), &FeatureConfig::default());
        assert_eq!((g.rows, g.cols), (24, 40));
        assert!(g.data.iter().all(|x| *x == 0.0));
    }

    #[test]
    fn single_point_cell() {
        let c = cam();
        // 10 m to the left at camera height projects to the principal point.
        let p = Vec3::new(0.0, 10.0, 1.6);
        let g = rasterize(&bundle(vec![lidar_point(p, 0.4)], vec![0.02], vec![], vec![]), &c, &FeatureConfig::default());
        let (row, col) = (12, 20);
        assert_eq!(g.channel(row, col, 0), 1.0);
        assert_eq!(g.channel(row, col, 1), 10.0f32);
        assert_eq!(g.channel(row, col, 2), 0.4f32);
        assert_eq!(g.channel(row, col, 3), 0.02f32);
        let occupied = g.data.chunks_exact(CHANNELS).filter(|c| c[0] > 0.0).count();
        assert_eq!(occupied, 1);

        let no_offsets = FeatureConfig { use_offsets: false, ..Default::default() };
        let g = rasterize(&bundle(vec![lidar_point(p, 0.4)], vec![0.02], vec![], vec![]), &c, &no_offsets);
        assert_eq!(g.channel(row, col, 3), 0.0);
    }

    #[test]
    fn rasterize_is_order_invariant_and_offsets_shift() {
        let c = cam();
        let mut rng = SimRng::seed_from_u64(5);
        let pts: Vec<LidarPoint> = (0..400)
            .map(|_| {
                lidar_point(
                    Vec3::new(rng.random_range(-8.0..8.0), rng.random_range(3.0..20.0), rng.random_range(0.0..3.0)),
                    rng.random_range(0.1..0.9),
                )
            })
            .collect();
        let offs: Vec<f64> = (0..400).map(|_| rng.random_range(-0.01..0.01)).collect();
        let g1 = rasterize(&bundle(pts.clone(), offs.clone(), vec![], vec![]), &c, &FeatureConfig::default());
        let mut idx: Vec<usize> = (0..400).collect();
        idx.shuffle(&mut rng);
        let g2 = rasterize(
            &bundle(idx.iter().map(|&i| pts[i].clone()).collect(), idx.iter().map(|&i| offs[i]).collect(), vec![], vec![]),
            &c,
            &FeatureConfig::default(),
        );
        assert_eq!(g1, g2);

        let stale: Vec<f64> = offs.iter().map(|o| o - 0.1).collect();
        let g3 = rasterize(&bundle(pts, stale, vec![], vec![]), &c, &FeatureConfig::default());
        let mut occupied = 0;
        for r in 0..24 {
            for col in 0..40 {
                if g1.channel(r, col, 0) > 0.0 {
                    occupied += 1;
                    assert!((g3.channel(r, col, 3) as f64 - g1.channel(r, col, 3) as f64 + 0.1).abs() < 1e-6);
                }
            }
        }
        assert!(occupied > 10);
    }

    #[test]
    fn dropout_examples() {
        let mut rng = SimRng::seed_from_u64(0);
        let mut g = FeatureGrid::zeros(2, 2);
        for (i, x) in g.data.iter_mut().enumerate() {
            *x = i as f32 + 1.0;
        }
        for _ in 0..100 {
            assert_eq!(modality_dropout(&g, &mut rng, 0.0), (g.clone(), None));
        }
        let mut counts = [0usize; 3];
        let trials = 30_000;
        for _ in 0..trials {
            let (out, m) = modality_dropout(&g, &mut rng, 1.0);
            let m = m.unwrap();
            counts[SensorModality::ALL.iter().position(|x| *x == m).unwrap()] += 1;
            for (a, b) in out.data.chunks_exact(CHANNELS).zip(g.data.chunks_exact(CHANNELS)) {
                for ch in 0..CHANNELS {
                    if m.channels().contains(&ch) {
                        assert_eq!(a[ch], 0.0);
                    } else {
                        assert_eq!(a[ch].to_bits(), b[ch].to_bits());
                    }
                }
            }
        }
        for c in counts {
            assert!((c as f64 / trials as f64 - 1.0 / 3.0).abs() < 0.01);
        }
        let drops = (0..10_000).filter(|_| modality_dropout(&g, &mut rng, 0.2).1.is_some()).count();
        assert!((drops as f64 / 1e4 - 0.2).abs() < 0.01);
    }

    fn random_batch(rng: &mut SimRng, d: usize, cells: usize) -> (Vec<f64>, Vec<u8>) {
        let x = (0..d * cells).map(|_| rng.random_range(-2.0..2.0)).collect();
        let t = (0..cells).map(|_| rng.random_range(0..8u8)).collect();
        (x, t)
    }

    fn flat_params(m: &ToyModel) -> Vec<f64> {
        [&m.w1[..], &m.b1, &m.w2, &m.b2].concat()
    }

    fn set_flat(m: &mut ToyModel, p: &[f64]) {
        let mut it = p.iter().copied();
        for v in m.params_mut() {
            for x in v.iter_mut() {
                *x = it.next().unwrap();
            }
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = SimRng::seed_from_u64(9);
        let mut worst: f64 = 0.0;
        for trial in 0..100 {
            let d = 4 + trial % 5;
            let mut m = ToyModel::new(d, 6, trial as u64);
            m.input_mean = (0..d).map(|_| rng.random_range(-0.5..0.5)).collect();
            m.input_scale = (0..d).map(|_| rng.random_range(0.5..2.0)).collect();
            m.b1.iter_mut().for_each(|b| *b = rng.random_range(-0.5..0.5));
            let (x, t) = random_batch(&mut rng, d, 5);
            let batch = [(x.as_slice(), t.as_slice())];
            let (_, g) = m.loss_and_gradient(&batch, 3.0);
            let analytic = g.flat();
            let p0 = flat_params(&m);
            let h = 1e-5;
            let numeric: Vec<f64> = (0..p0.len())
                .map(|i| {
                    let mut p = p0.clone();
                    p[i] += h;
                    set_flat(&mut m, &p);
                    let up = m.loss_and_gradient(&batch, 3.0).0;
                    p[i] -= 2.0 * h;
                    set_flat(&mut m, &p);
                    let down = m.loss_and_gradient(&batch, 3.0).0;
                    (up - down) / (2.0 * h)
                })
                .collect();
            set_flat(&mut m, &p0);
            let diff = analytic.iter().zip(&numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
            let scale = analytic.iter().map(|a| a * a).sum::<f64>().sqrt().max(numeric.iter().map(|a| a * a).sum::<f64>().sqrt());
            worst = worst.max(diff / scale);
        }
        assert!(worst < 1e-5, "{worst}");
    }

    fn separable_fixture() -> Vec<Sample> {
        // One channel decides the class: LiDAR count above 5 means Car.
        let mut rng = SimRng::seed_from_u64(2);
        (0..6)
            .map(|_| {
                let mut grid = FeatureGrid::zeros(4, 4);
                let mut targets = vec![0u8; 16];
                for cell in 0..16 {
                    let positive = rng.random_bool(0.4);
                    grid.data[cell * CHANNELS] = if positive { rng.random_range(6.0..10.0) } else { rng.random_range(0.0..4.0) };
                    targets[cell] = u8::from(positive);
                }
                Sample { grid, targets }
            })
            .collect()
    }

    fn linear_features() -> FeatureConfig {
        FeatureConfig {
            grid_cols: 4,
            grid_rows: 4,
            context_rows: 0,
            context_cols: 0,
            camera_context_cols: 0,
            cell_position: false,
            frame_context: false,
            use_offsets: true,
        }
    }

    #[test]
    fn zero_epochs_is_identity() {
        let f = linear_features();
        let m = ToyModel::new(f.input_dim(), 4, 1);
        let cfg = TrainConfig { epochs: 0, ..Default::default() };
        let (out, log) = train(m.clone(), &separable_fixture(), &[], 0.0, &f, &cfg, 0).unwrap();
        assert_eq!(out, m);
        assert!(log.epoch_loss.is_empty());
    }

    #[test]
    fn separable_loss_decreases_monotonically() {
        let f = linear_features();
        let data = separable_fixture();
        let mut m = ToyModel::new(f.input_dim(), 4, 3);
        let rows: Vec<Vec<f64>> = data.iter().map(|s| s.grid.cell_inputs(&f)).collect();
        m.fit_normalizer(&rows);
        let cfg = TrainConfig {
            epochs: 1,
            batch_frames: data.len(),
            learning_rate: 0.3,
            optimizer: Optimizer::Sgd,
            momentum: 0.0,
            modality_dropout: 0.0,
            pos_weight: 1.0,
            ..Default::default()
        };
        let mut losses = vec![dataset_loss(&m, &data, &f, 1.0)];
        for _ in 0..60 {
            m = train(m, &data, &[], 0.0, &f, &cfg, 0).unwrap().0;
            losses.push(dataset_loss(&m, &data, &f, 1.0));
        }
        assert!(losses.windows(2).all(|w| w[1] < w[0]), "{losses:?}");
        assert!(losses.last().unwrap() < &(0.5 * losses[0]));
    }

    #[test]
    fn divergence_is_reported() {
        let f = linear_features();
        let mut data = separable_fixture();
        data[3].grid.data[5 * CHANNELS] = f32::NAN;
        let m = ToyModel::new(f.input_dim(), 4, 3);
        let cfg = TrainConfig { modality_dropout: 0.0, ..Default::default() };
        assert!(matches!(train(m, &data, &[], 0.0, &f, &cfg, 0), Err(DetectorError::DivergenceDetected { .. })));
    }

    #[test]
    fn training_is_deterministic() {
        let f = linear_features();
        let data = separable_fixture();
        let m = ToyModel::new(f.input_dim(), 4, 3);
        let cfg = TrainConfig { epochs: 3, batch_frames: 2, ..Default::default() };
        let a = train(m.clone(), &data, &data, 0.5, &f, &cfg, 0).unwrap();
        let b = train(m, &data, &data, 0.5, &f, &cfg, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn counting_examples() {
        let t = [1u8, 1, 0, 0];
        assert_eq!(count_matches(&t, &t)[0], Counts { tp: 2, fp: 0, fn_: 0 });
        let perfect = EvalReport::from_counts("x", 1, count_matches(&[1, 2, 4, 0], &[1, 2, 4, 0]));
        for m in &perfect.classes {
            assert_eq!((m.precision, m.recall, m.f1), (1.0, 1.0, 1.0));
        }
        let none = EvalReport::from_counts("x", 1, count_matches(&[0, 0, 0, 0], &[1, 2, 4, 0]));
        assert!(none.classes.iter().all(|m| m.recall == 0.0 && m.f1 == 0.0));
        // Cells: TP, FP, FN, TN.
        let r = EvalReport::from_counts("x", 1, count_matches(&[1, 1, 0, 0], &[1, 0, 1, 0]));
        let car = r.class(ObjectClass::Car);
        assert_eq!((car.precision, car.recall, car.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn normalized_f1_examples() {
        let report = |f1: f64| EvalReport {
            dataset: "x".into(),
            frames: 1,
            classes: ObjectClass::ALL
                .iter()
                .map(|&class| ClassMetrics { class, counts: Counts::default(), precision: f1, recall: f1, f1 })
                .collect(),
        };
        assert_eq!(normalized_f1(&report(0.4), &report(0.4)).unwrap(), [1.0; 3]);
        assert_eq!(normalized_f1(&report(0.2), &report(0.4)).unwrap(), [0.5; 3]);
        let r = normalized_f1(&report(0.3), &report(0.4)).unwrap();
        assert!((r[0] - 0.75).abs() < 1e-12);
        assert_eq!(normalized_f1(&report(0.3), &report(0.0)), Err(DetectorError::BaselineZero(ObjectClass::Car)));
    }

    #[test]
    fn checkpoint_round_trip() {
        let f = FeatureConfig::default();
        let c = Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            seed: 4,
            p_s: 0.01,
            features: f.clone(),
            training: TrainConfig::default(),
            model: ToyModel::new(f.input_dim(), 8, 4),
        };
        assert_eq!(Checkpoint::from_json(&c.to_json()).unwrap(), c);
        let bad = c.to_json().replace("\"schema_version\": 1", "\"schema_version\": 7");
        assert!(Checkpoint::from_json(&bad).is_err());
    }
}

//! Dataset construction and the baseline-versus-augmented experiments.
//!
//! Training frames come with a synchronized sample and one jittered stale
//! counterpart. Evaluation frames come in three variants: synchronized,
//! camera fixed one staleness step in the past, and camera removed.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::detector::{
    evaluate, normalized_f1, train, Checkpoint, EvalReport, Sample, SensorModality, ToyModel, TrainLog, CHECKPOINT_SCHEMA,
};
use crate::error::{Error, StalenessError};
use crate::rng;
use crate::scene::{generate_scene, ObjectClass};
use crate::staleness::{augment_bundle, FrameBundle, FrameStore, JitterStreams};

/// Offset separating evaluation scene indices from training ones.
const EVAL_SCENE_BASE: u64 = 1 << 32;

/// Seed of scene `index` for a run seed.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    use rand::Rng;
    rng::stream(seed, rng::tag::SCENE, index).random()
}

pub fn simulate_store(cfg: &ExperimentConfig, scene_index: u64) -> Result<FrameStore, Error> {
    let s = scene_seed(cfg.seed, scene_index);
    let scene = generate_scene(&cfg.scene, s)?;
    Ok(FrameStore::simulate(Arc::new(scene), &cfg.sensors, s))
}

#[derive(Clone, Debug, Default)]
pub struct Datasets {
    pub train_original: Vec<Sample>,
    /// `train_stale[i]` is the augmented counterpart of `train_original[i]`.
    pub train_stale: Vec<Sample>,
    pub eval_synchronized: Vec<Sample>,
    pub eval_camera_stale: Vec<Sample>,
    pub eval_camera_dropout: Vec<Sample>,
}

/// Original bundle of sweep `j` of scene `scene_index` and its jittered
/// stale counterpart.
pub fn bundle_pair(cfg: &ExperimentConfig, store: &FrameStore, scene_index: u64, j: usize) -> Result<(FrameBundle, FrameBundle), Error> {
    let staleness = cfg.staleness_config();
    let base = store.bundle(j)?;
    let mut streams = JitterStreams::new(staleness.seed, (scene_index << 20) | j as u64);
    let aug = augment_bundle(store, &base, &staleness, &mut streams)?;
    Ok((base, aug))
}

fn train_scene(cfg: &ExperimentConfig, index: usize) -> Result<(Vec<Sample>, Vec<Sample>), Error> {
    let store = simulate_store(cfg, index as u64)?;
    let cam = &store.camera_model;
    let mut original = Vec::new();
    let mut stale = Vec::new();
    for j in store.usable_frames() {
        let (base, aug) = bundle_pair(cfg, &store, index as u64, j)?;
        original.push(Sample::from_bundle(&base, cam, &cfg.features));
        stale.push(Sample::from_bundle(&aug, cam, &cfg.features));
    }
    Ok((original, stale))
}

type EvalTriple = (Vec<Sample>, Vec<Sample>, Vec<Sample>);

fn eval_scene(cfg: &ExperimentConfig, index: usize) -> Result<EvalTriple, Error> {
    let store = simulate_store(cfg, EVAL_SCENE_BASE + index as u64)?;
    let cam = &store.camera_model;
    let mut sync = Vec::new();
    let mut stale = Vec::new();
    let mut dropout = Vec::new();
    for j in store.usable_frames() {
        let base = store.bundle(j)?;
        let target = base.t_c - cfg.experiment.eval_camera_staleness;
        let k = store.closest_camera(target).ok_or(StalenessError::InsufficientHistory { modality: "camera", time: target.secs() })?;
        let sample = Sample::from_bundle(&base, cam, &cfg.features);
        stale.push(Sample::from_bundle(&base.with_camera(&store, k), cam, &cfg.features));
        dropout.push(Sample { grid: sample.grid.without(SensorModality::Camera), targets: sample.targets.clone() });
        sync.push(sample);
    }
    Ok((sync, stale, dropout))
}

/// Simulates every training and evaluation scene of the plan.
pub fn build_datasets(cfg: &ExperimentConfig) -> Result<Datasets, Error> {
    let train: Vec<_> = (0..cfg.experiment.train_scenes).into_par_iter().map(|i| train_scene(cfg, i)).collect::<Result<_, _>>()?;
    let eval: Vec<_> = (0..cfg.experiment.eval_scenes).into_par_iter().map(|i| eval_scene(cfg, i)).collect::<Result<_, _>>()?;
    let mut d = Datasets::default();
    for (o, s) in train {
        d.train_original.extend(o);
        d.train_stale.extend(s);
    }
    for (a, b, c) in eval {
        d.eval_synchronized.extend(a);
        d.eval_camera_stale.extend(b);
        d.eval_camera_dropout.extend(c);
    }
    Ok(d)
}

/// Initial model shared by every `P_S`. Input statistics cover both the
/// synchronized and the stale training samples.
pub fn initial_model(cfg: &ExperimentConfig, data: &Datasets) -> ToyModel {
    let dim = cfg.features.input_dim();
    let mut model = ToyModel::new(dim, cfg.training.hidden, cfg.seed);
    model.fit_normalizer(data.train_original.iter().chain(&data.train_stale).map(|s| s.grid.cell_inputs(&cfg.features)));
    model
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainedModel {
    pub p_s: f64,
    pub model: ToyModel,
    pub log: TrainLog,
}

impl TrainedModel {
    pub fn checkpoint(&self, cfg: &ExperimentConfig) -> Checkpoint {
        Checkpoint {
            schema_version: CHECKPOINT_SCHEMA,
            seed: cfg.seed,
            p_s: self.p_s,
            features: cfg.features.clone(),
            training: cfg.training.clone(),
            model: self.model.clone(),
        }
    }
}

/// Trains one model per distinct `P_S`, all from the same initialization
/// and random streams so they differ only in how much stale data they see.
pub fn train_models(cfg: &ExperimentConfig, data: &Datasets, ps: &[f64]) -> Result<BTreeMap<u64, TrainedModel>, Error> {
    let init = initial_model(cfg, data);
    let mut distinct: Vec<f64> = ps.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let trained: Vec<TrainedModel> = distinct
        .par_iter()
        .map(|&p_s| {
            let (model, log) = train(init.clone(), &data.train_original, &data.train_stale, p_s, &cfg.features, &cfg.training, cfg.seed)?;
            Ok::<_, Error>(TrainedModel { p_s, model, log })
        })
        .collect::<Result<_, _>>()?;
    Ok(trained.into_iter().map(|m| (m.p_s.to_bits(), m)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalSet {
    Synchronized,
    CameraStale,
    CameraDropout,
}

impl EvalSet {
    pub fn name(self) -> &'static str {
        match self {
            EvalSet::Synchronized => "synchronized",
            EvalSet::CameraStale => "camera_stale",
            EvalSet::CameraDropout => "camera_dropout",
        }
    }

    pub fn samples(self, data: &Datasets) -> &[Sample] {
        match self {
            EvalSet::Synchronized => &data.eval_synchronized,
            EvalSet::CameraStale => &data.eval_camera_stale,
            EvalSet::CameraDropout => &data.eval_camera_dropout,
        }
    }
}

pub fn evaluate_on(cfg: &ExperimentConfig, trained: &TrainedModel, data: &Datasets, set: EvalSet) -> EvalReport {
    evaluate(&trained.model, set.samples(data), &cfg.features, cfg.training.threshold, set.name())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub exp_id: String,
    pub eval_set: EvalSet,
    pub model: String,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTable {
    pub baseline_ps: f64,
    pub augmented_ps: f64,
    pub rows: Vec<RobustnessRow>,
}

/// Directional comparisons between robustness table rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustnessTrends {
    /// Per class, `1 - F1(2a) / F1(1a)`.
    pub baseline_relative_drop: [f64; 3],
    /// Per class, `1 - F1(2b) / F1(1b)`.
    pub augmented_relative_drop: [f64; 3],
    /// The same drop on the class-averaged F1.
    pub augmented_macro_relative_drop: f64,
    /// Per class, `|F1(1b) / F1(1a) - 1|`.
    pub synchronized_relative_gap: [f64; 3],
}

fn relative_drop(from: f64, to: f64) -> f64 {
    if from > 0.0 {
        1.0 - to / from
    } else {
        f64::NAN
    }
}

impl RobustnessTable {
    pub fn row(&self, exp_id: &str) -> Option<&RobustnessRow> {
        self.rows.iter().find(|r| r.exp_id == exp_id)
    }

    pub fn trends(&self) -> RobustnessTrends {
        let f1 = |id: &str| self.row(id).map(|r| r.report.f1()).unwrap_or([f64::NAN; 3]);
        let (a1, b1, a2, b2) = (f1("1a"), f1("1b"), f1("2a"), f1("2b"));
        RobustnessTrends {
            baseline_relative_drop: [0, 1, 2].map(|c| relative_drop(a1[c], a2[c])),
            augmented_relative_drop: [0, 1, 2].map(|c| relative_drop(b1[c], b2[c])),
            augmented_macro_relative_drop: relative_drop(b1.iter().sum::<f64>() / 3.0, b2.iter().sum::<f64>() / 3.0),
            synchronized_relative_gap: [0, 1, 2].map(|c| if a1[c] > 0.0 { (b1[c] / a1[c] - 1.0).abs() } else { f64::NAN }),
        }
    }

    /// Long format: one line per row, class and metric.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("exp_id,eval_set,model,class,metric,value\n");
        for r in &self.rows {
            for m in &r.report.classes {
                for (metric, v) in [("precision", m.precision), ("recall", m.recall), ("f1", m.f1)] {
                    let _ = writeln!(out, "{},{},{},{},{},{}", r.exp_id, r.eval_set.name(), r.model, m.class, metric, v);
                }
            }
        }
        out
    }
}

/// Rows 1a/1b (synchronized), 2a/2b (camera stale), 3 (camera dropout,
/// baseline model).
pub fn robustness_table(cfg: &ExperimentConfig, data: &Datasets, models: &BTreeMap<u64, TrainedModel>) -> RobustnessTable {
    let baseline_ps = 0.0f64;
    let augmented_ps = cfg.staleness.p_s;
    let baseline = &models[&baseline_ps.to_bits()];
    let augmented = &models[&augmented_ps.to_bits()];
    let grid = [
        ("1a", EvalSet::Synchronized, "baseline", baseline),
        ("1b", EvalSet::Synchronized, "augmented", augmented),
        ("2a", EvalSet::CameraStale, "baseline", baseline),
        ("2b", EvalSet::CameraStale, "augmented", augmented),
        ("3", EvalSet::CameraDropout, "baseline", baseline),
    ];
    RobustnessTable {
        baseline_ps,
        augmented_ps,
        rows: grid
            .iter()
            .map(|(id, set, name, model)| RobustnessRow {
                exp_id: id.to_string(),
                eval_set: *set,
                model: name.to_string(),
                report: evaluate_on(cfg, model, data, *set),
            })
            .collect(),
    }
}

pub fn run_robustness_table(cfg: &ExperimentConfig, data: &Datasets) -> Result<(RobustnessTable, BTreeMap<u64, TrainedModel>), Error> {
    let models = train_models(cfg, data, &[0.0, cfg.staleness.p_s])?;
    Ok((robustness_table(cfg, data, &models), models))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub p_s: f64,
    pub synchronized: EvalReport,
    pub camera_stale: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub points: Vec<SweepPoint>,
}

impl Sweep {
    fn anchor(&self) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.p_s == 0.0)
    }

    pub fn point(&self, p_s: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.p_s == p_s)
    }

    /// Normalized F1 of one evaluation set at one `P_S`.
    pub fn normalized(&self, p_s: f64, set: EvalSet) -> Result<[f64; 3], Error> {
        let anchor = self.anchor().ok_or_else(|| Error::Config("P_S sweep must include 0".into()))?;
        let point = self.point(p_s).ok_or_else(|| Error::Config(format!("P_S = {p_s} not in sweep")))?;
        let pick = |p: &SweepPoint| match set {
            EvalSet::CameraStale => p.camera_stale.clone(),
            _ => p.synchronized.clone(),
        };
        Ok(normalized_f1(&pick(point), &pick(anchor))?)
    }

    /// `ps,class,eval_set,f1,f1_norm`; a zero anchor F1 writes
    /// `baseline_zero` in place of the ratio.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ps,class,eval_set,f1,f1_norm\n");
        let anchor = self.anchor();
        for p in &self.points {
            for (set, report) in [(EvalSet::Synchronized, &p.synchronized), (EvalSet::CameraStale, &p.camera_stale)] {
                let base = anchor.map(|a| if set == EvalSet::Synchronized { &a.synchronized } else { &a.camera_stale });
                for c in ObjectClass::ALL {
                    let f1 = report.class(c).f1;
                    let norm = match base.map(|b| b.class(c).f1) {
                        Some(b) if b > 0.0 => format!("{}", f1 / b),
                        _ => "baseline_zero".to_string(),
                    };
                    let _ = writeln!(out, "{},{},{},{},{}", p.p_s, c, set.name(), f1, norm);
                }
            }
        }
        out
    }
}

/// Directional flags of the sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTrends {
    /// Per class, stale-eval normalized F1 at the small `P_S` above its
    /// value at 0.
    pub stale_gain_at_small_ps: Option<[bool; 3]>,
    /// Per class, synchronized-eval normalized F1 at the large `P_S` below
    /// its value at the small one.
    pub synchronized_loss_at_large_ps: Option<[bool; 3]>,
}

impl Sweep {
    pub fn trends(&self, small: f64, large: f64) -> SweepTrends {
        let stale = self.normalized(small, EvalSet::CameraStale).ok();
        let sync_small = self.normalized(small, EvalSet::Synchronized).ok();
        let sync_large = self.normalized(large, EvalSet::Synchronized).ok();
        SweepTrends {
            stale_gain_at_small_ps: stale.map(|s| s.map(|x| x > 1.0)),
            synchronized_loss_at_large_ps: sync_small.zip(sync_large).map(|(s, l)| [0, 1, 2].map(|c| l[c] < s[c])),
        }
    }
}

pub fn sweep(cfg: &ExperimentConfig, data: &Datasets, models: &BTreeMap<u64, TrainedModel>, ps: &[f64]) -> Sweep {
    Sweep {
        points: ps
            .iter()
            .map(|&p_s| {
                let m = &models[&p_s.to_bits()];
                SweepPoint {
                    p_s,
                    synchronized: evaluate_on(cfg, m, data, EvalSet::Synchronized),
                    camera_stale: evaluate_on(cfg, m, data, EvalSet::CameraStale),
                }
            })
            .collect(),
    }
}

pub fn run_sweep(cfg: &ExperimentConfig, data: &Datasets, ps: &[f64]) -> Result<(Sweep, BTreeMap<u64, TrainedModel>), Error> {
    if !ps.contains(&0.0) {
        return Err(Error::Config("P_S sweep must include 0".into()));
    }
    let models = train_models(cfg, data, ps)?;
    Ok((sweep(cfg, data, &models, ps), models))
}

use std::fs;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stalesim_core::alignment::{misalignment_csv, MisalignmentScenario};
use stalesim_core::config::ExperimentConfig;
use stalesim_core::experiment::{
    build_datasets, bundle_pair, robustness_table, run_sweep, scene_seed, simulate_store, train_models, Datasets, TrainedModel,
};
use stalesim_core::format::{encode_bundle, encode_camera, encode_radar, encode_sweep, parse_timing_log, timing_log_csv, write_container};
use stalesim_core::rng;
use stalesim_core::scene::ObjectClass;
use stalesim_core::sensors::RadarBuffer;
use stalesim_core::staleness::{mix_mask, profile_histogram, timing_log, FrameBundle, ProfileDelta};
use stalesim_core::Error;

/// Mix-stream indices of the augment command, clear of training indices.
const AUGMENT_MIX_BASE: u64 = 1 << 40;
/// Open interval holding every synchronized `T_C - T_L`.
const SYNC_BOUND: (f64, f64) = (-0.1, 0.0);
/// Small and large `P_S` compared by the sweep trend flags.
const SWEEP_SMALL_PS: f64 = 0.01;
const SWEEP_LARGE_PS: f64 = 0.2;

pub struct Context {
    pub cfg: ExperimentConfig,
    pub out: PathBuf,
}

impl Context {
    /// Creates the output directory and records the resolved configuration.
    pub fn new(cfg: ExperimentConfig, out: PathBuf) -> Result<Self, Error> {
        let ctx = Self { cfg, out };
        ctx.write("config.toml", ctx.cfg.to_toml())?;
        Ok(ctx)
    }

    fn write(&self, rel: impl AsRef<Path>, bytes: impl AsRef<[u8]>) -> Result<(), Error> {
        let path = self.out.join(rel);
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(&path, bytes).map_err(|e| Error::io(&path, e))
    }

    fn write_json(&self, rel: impl AsRef<Path>, value: &impl serde::Serialize) -> Result<(), Error> {
        let mut text = serde_json::to_string_pretty(value).map_err(stalesim_core::error::FormatError::from)?;
        text.push('\n');
        self.write(rel, text)
    }
}

/// Radar returns grouped into one buffer per firing.
fn radar_firings(points: &[stalesim_core::sensors::RadarPoint]) -> Vec<RadarBuffer> {
    points
        .chunk_by(|a, b| a.timestamp == b.timestamp && a.radar_id == b.radar_id)
        .map(|g| RadarBuffer { points: g.to_vec(), t_r: g[0].timestamp })
        .collect()
}

pub fn generate(ctx: &Context) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let mut scenes = Vec::new();
    let (mut sweeps, mut cameras, mut radar) = (0usize, 0usize, 0usize);
    for i in 0..cfg.generate.scenes {
        let store = simulate_store(cfg, i as u64)?;
        let name = format!("scene_{i:04}");
        let frames = PathBuf::from("frames").join(&name);
        ctx.write(format!("scenes/{name}.json"), store.scene.to_json()?)?;
        ctx.write(frames.join("lidar.bin"), write_container(store.sweeps.iter().map(|s| encode_sweep(s))))?;
        ctx.write(frames.join("camera.bin"), write_container(store.cameras.iter().map(|c| encode_camera(c))))?;
        let firings = radar_firings(&store.radar_points);
        ctx.write(frames.join("radar.bin"), write_container(firings.iter().map(encode_radar)))?;
        sweeps += store.sweeps.len();
        cameras += store.cameras.len();
        radar += firings.len();
        scenes.push(json!({
            "index": i,
            "seed": scene_seed(cfg.seed, i as u64),
            "duration": store.scene.duration,
            "objects": store.scene.objects.len(),
            "scene": format!("scenes/{name}.json"),
            "lidar": format!("frames/{name}/lidar.bin"),
            "camera": format!("frames/{name}/camera.bin"),
            "radar": format!("frames/{name}/radar.bin"),
            "counts": {
                "lidar_sweeps": store.sweeps.len(),
                "camera_frames": store.cameras.len(),
                "radar_frames": firings.len(),
                "radar_points": store.radar_points.len(),
            },
        }));
    }
    println!("scenes: {}", scenes.len());
    println!("lidar sweeps: {sweeps}");
    println!("camera frames: {cameras}");
    println!("radar frames: {radar}");

    let g = &cfg.generate;
    let log = if g.log_duration > 0.0 {
        let log = timing_log(&cfg.sensors, g.log_duration, g.log_camera_stale_probability, cfg.seed);
        ctx.write("timing_log.csv", timing_log_csv(&log)?)?;
        let camera_id = cfg.sensors.camera.model().id;
        println!("timing log: {} s, {} frames per modality", g.log_duration, log.len());
        json!({
            "path": "timing_log.csv",
            "duration": g.log_duration,
            "camera_stale_probability": g.log_camera_stale_probability,
            "lidar_sweeps": log.len(),
            "camera_frames": { format!("camera_{camera_id}"): log.len() },
            "radar_frames": log.len(),
        })
    } else {
        Value::Null
    };

    ctx.write_json(
        "manifest.json",
        &json!({
            "command": "generate",
            "seed": cfg.seed,
            "scenes": scenes,
            "totals": {
                "lidar_sweeps": sweeps,
                "camera_frames": cameras,
                "radar_frames": radar,
            },
            "timing_log": log,
        }),
    )
}

fn bundle_summary(b: &FrameBundle) -> Value {
    json!({
        "camera_t_c": b.camera.t_c.secs(),
        "radar_t_r": b.radar.t_r.secs(),
        "staleness": b.staleness,
    })
}

pub fn augment(ctx: &Context) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let p_s = cfg.staleness.p_s;
    let mut scenes = Vec::new();
    let (mut total, mut selected) = (0usize, 0usize);
    for i in 0..cfg.augment.scenes {
        let store = simulate_store(cfg, i as u64)?;
        let frames: Vec<usize> = store.usable_frames().into_iter().step_by(cfg.augment.frame_stride).collect();
        let pairs = frames.iter().map(|&j| bundle_pair(cfg, &store, i as u64, j)).collect::<Result<Vec<_>, _>>()?;
        let mask = mix_mask(pairs.len(), p_s, &mut rng::stream(cfg.seed, rng::tag::MIX, AUGMENT_MIX_BASE + i as u64));
        let dir = format!("bundles/scene_{i:04}");
        ctx.write(format!("{dir}/original.bin"), write_container(pairs.iter().map(|(o, _)| encode_bundle(o))))?;
        ctx.write(format!("{dir}/augmented.bin"), write_container(pairs.iter().map(|(_, a)| encode_bundle(a))))?;
        ctx.write(
            format!("{dir}/mixed.bin"),
            write_container(pairs.iter().zip(&mask).map(|((o, a), &s)| encode_bundle(if s { a } else { o }))),
        )?;
        let rows: Vec<Value> = pairs
            .iter()
            .zip(&mask)
            .map(|((o, a), &s)| {
                json!({
                    "frame_index": o.frame_index,
                    "t_c": o.t_c.secs(),
                    "selected": if s { "augmented" } else { "original" },
                    "original": bundle_summary(o),
                    "augmented": bundle_summary(a),
                })
            })
            .collect();
        total += pairs.len();
        selected += mask.iter().filter(|&&s| s).count();
        scenes.push(json!({
            "index": i,
            "seed": scene_seed(cfg.seed, i as u64),
            "original": format!("{dir}/original.bin"),
            "augmented": format!("{dir}/augmented.bin"),
            "mixed": format!("{dir}/mixed.bin"),
            "frames": rows,
        }));
    }
    println!("bundles: {total} original, {total} augmented");
    println!("mixed: {selected} stale of {total} (P_S = {p_s})");
    ctx.write_json(
        "manifest.json",
        &json!({
            "command": "augment",
            "seed": cfg.seed,
            "p_s": p_s,
            "t_j_max": cfg.staleness.t_j_max,
            "frame_stride": cfg.augment.frame_stride,
            "bundles": total,
            "stale_selected": selected,
            "scenes": scenes,
        }),
    )
}

fn report_datasets(data: &Datasets) {
    println!("frames: {} train (+{} stale), {} eval", data.train_original.len(), data.train_stale.len(), data.eval_synchronized.len());
}

fn checkpoint_name(p_s: f64) -> String {
    format!("checkpoints/model_ps_{p_s}.json")
}

fn write_checkpoints<'a>(ctx: &Context, models: impl IntoIterator<Item = &'a TrainedModel>) -> Result<(), Error> {
    for m in models {
        let mut text = m.checkpoint(&ctx.cfg).to_json();
        text.push('\n');
        ctx.write(checkpoint_name(m.p_s), text)?;
    }
    Ok(())
}

pub fn experiment(ctx: &Context) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let data = build_datasets(cfg)?;
    report_datasets(&data);
    let models = train_models(cfg, &data, &[0.0, cfg.staleness.p_s])?;
    let t = robustness_table(cfg, &data, &models);
    ctx.write("robustness.csv", t.to_csv())?;
    ctx.write_json("robustness.json", &t)?;
    ctx.write_json("robustness_trends.json", &t.trends())?;
    write_checkpoints(ctx, models.values())?;
    println!("exp  eval_set        model      {:>6} {:>6} {:>6}", "Car", "Ped", "Cyc");
    for r in &t.rows {
        let f1 = r.report.f1();
        println!("{:<4} {:<15} {:<10} {:>6.3} {:>6.3} {:>6.3}", r.exp_id, r.eval_set.name(), r.model, f1[0], f1[1], f1[2]);
    }
    Ok(())
}

pub fn sweep_ps(ctx: &Context) -> Result<(), Error> {
    let cfg = &ctx.cfg;
    let ps = cfg.experiment.ps_sweep.clone();
    if !ps.contains(&0.0) {
        return Err(Error::Config("P_S sweep must include 0".into()));
    }
    let data = build_datasets(cfg)?;
    report_datasets(&data);
    let (sweep, models) = run_sweep(cfg, &data, &ps)?;
    ctx.write("sweep.csv", sweep.to_csv())?;
    ctx.write_json("sweep.json", &sweep)?;
    ctx.write_json("sweep_trends.json", &sweep.trends(SWEEP_SMALL_PS, SWEEP_LARGE_PS))?;
    write_checkpoints(ctx, models.values())?;
    for p in &sweep.points {
        let (s, c) = (p.synchronized.f1(), p.camera_stale.f1());
        print!("P_S {:<8}", p.p_s);
        for (k, class) in ObjectClass::ALL.iter().enumerate() {
            print!("  {class} {:.3}/{:.3}", s[k], c[k]);
        }
        println!();
    }
    Ok(())
}

pub fn profile(ctx: &Context, log: Option<&Path>) -> Result<(), Error> {
    let path = log.map(Path::to_path_buf).unwrap_or_else(|| ctx.out.join("timing_log.csv"));
    let bytes = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let timings = parse_timing_log(&bytes)?;
    if timings.is_empty() {
        return Err(Error::Data(format!("{}: timing log has no frames", path.display())));
    }
    let bin_width = ctx.cfg.profile.bin_width;
    let mut summary = serde_json::Map::new();
    for (which, name) in [(ProfileDelta::CameraMinusLidar, "camera_minus_lidar"), (ProfileDelta::RadarMinusLidar, "radar_minus_lidar")] {
        let h = profile_histogram(timings.iter().copied(), which, bin_width)?;
        ctx.write(format!("profile_{name}.csv"), h.to_csv())?;
        let deltas = timings.iter().map(|t| which.of(t));
        let inside = deltas.clone().filter(|d| *d > SYNC_BOUND.0 && *d < SYNC_BOUND.1).count() as f64 / timings.len() as f64;
        let min = deltas.clone().fold(f64::INFINITY, f64::min);
        let max = deltas.fold(f64::NEG_INFINITY, f64::max);
        println!("{name}: {} bins, {:.4} of mass in (-0.1, 0), range [{min}, {max}]", h.bins.len(), inside);
        summary.insert(name.to_string(), json!({ "bins": h.bins.len(), "fraction_in_sync_bound": inside, "min": min, "max": max }));
    }
    summary.insert("frames".into(), json!(timings.len()));
    summary.insert("bin_width".into(), json!(bin_width));
    ctx.write_json("profile_summary.json", &summary)
}

pub fn misalign(ctx: &Context) -> Result<(), Error> {
    let m = &ctx.cfg.misalign;
    let scenario = MisalignmentScenario::new(m.ego_speed, m.object_depth, m.focal_length);
    let curve = scenario.curve(&m.staleness)?;
    ctx.write("misalignment.csv", misalignment_csv(&curve))?;
    for p in &curve {
        println!("staleness {:<6} score {:>8.3} px  predicted {:>8.3} px", p.staleness, p.score, p.predicted);
    }
    Ok(())
}

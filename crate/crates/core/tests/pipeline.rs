use stalesim_core::config::ExperimentConfig;
use stalesim_core::experiment::{bundle_pair, simulate_store};
use stalesim_core::format::{decode_bundle, encode_bundle, parse_timing_log, read_container, timing_log_csv, write_container};
use stalesim_core::staleness::timing_log;

fn short_config() -> ExperimentConfig {
    ExperimentConfig::from_toml("schema_version = 1\nseed = 11\n[scene]\nduration = 2.0\n").unwrap()
}

#[test]
fn bundles_survive_a_container_file() {
    let cfg = short_config();
    let store = simulate_store(&cfg, 0).unwrap();
    let frames = store.usable_frames();
    assert!(!frames.is_empty());
    let pairs: Vec<_> = frames.iter().map(|&j| bundle_pair(&cfg, &store, 0, j).unwrap()).collect();
    let records: Vec<Vec<u8>> = pairs.iter().flat_map(|(o, a)| [encode_bundle(o), encode_bundle(a)]).collect();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bundles.bin");
    std::fs::write(&path, write_container(&records)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    let decoded: Vec<_> = read_container(&bytes).unwrap().into_iter().map(|r| decode_bundle(r).unwrap()).collect();

    assert_eq!(decoded.len(), 2 * pairs.len());
    for ((o, a), got) in pairs.iter().zip(decoded.chunks(2)) {
        assert_eq!(&got[0], o);
        assert_eq!(&got[1], a);
        assert_eq!(got[0].staleness.camera, 0.0);
        assert!(got[1].staleness.camera.abs() <= cfg.staleness.t_j_max + 0.1);
    }
}

#[test]
fn simulation_is_deterministic_per_seed() {
    let cfg = short_config();
    let a = simulate_store(&cfg, 1).unwrap();
    let b = simulate_store(&cfg, 1).unwrap();
    let j = a.usable_frames()[0];
    assert_eq!(bundle_pair(&cfg, &a, 1, j).unwrap(), bundle_pair(&cfg, &b, 1, j).unwrap());
    let other = simulate_store(&cfg, 2).unwrap();
    assert_ne!(a.scene.objects, other.scene.objects);
}

#[test]
fn timing_log_file_round_trip() {
    let cfg = short_config();
    let log = timing_log(&cfg.sensors, 30.0, 0.2, cfg.seed);
    assert_eq!(log.len(), 300);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("timing_log.csv");
    std::fs::write(&path, timing_log_csv(&log).unwrap()).unwrap();
    assert_eq!(parse_timing_log(&std::fs::read(&path).unwrap()).unwrap(), log);
}

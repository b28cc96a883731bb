//! Every shipped preset parses and validates.

use std::path::Path;

use aoi_core::harness::ExperimentConfig;
use aoi_core::model::SystemConfig;

#[test]
fn presets_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let mut count = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_some_and(|e| e == "toml") {
            let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
            let name = path.file_name().unwrap().to_string_lossy();
            let expected = if name.starts_with("full") {
                SystemConfig::full_scale_default()
            } else {
                SystemConfig::desk_default()
            };
            assert_eq!(cfg.system, expected, "{name}");
            count += 1;
        }
    }
    assert!(count >= 10);
}

#[test]
fn full_train_preset_uses_the_full_scale_defaults() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../presets");
    let cfg = ExperimentConfig::load(&dir.join("full_train.toml")).unwrap();
    let t = cfg.train.unwrap();
    assert_eq!((t.layers, t.batch_size, t.lr0), (15, 64, 1e-3));
    assert_eq!((cfg.system.n_alarm, cfg.system.n_monitor, cfg.system.age_max), (64, 128, 100));
    assert_eq!(cfg.system.detect_tol, 0.1);
}

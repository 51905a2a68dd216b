use std::path::Path;

use hybrid_serve::experiment::ExperimentConfig;

#[test]
fn test_shipped_config_matches_builtin_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/default.toml");
    let cfg = ExperimentConfig::load(&path).expect("config parses");
    assert_eq!(cfg, ExperimentConfig::default());
}

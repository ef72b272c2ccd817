use exitsteal::config::ExperimentConfig;

/// A pipeline small enough to run end to end in a debug build.
pub fn tiny_config() -> ExperimentConfig {
    let mut cfg = ExperimentConfig {
        name: "tiny".into(),
        ..ExperimentConfig::default()
    };
    let d = &mut cfg.dataset;
    d.blobs_per_class = 2;
    d.train_size = 400;
    d.test_size = 200;
    d.iid_pool = 200;
    d.unrelated_pool = 200;
    cfg.victim.arch.widths = vec![8; 4];
    cfg.victim.epochs = 5;
    let a = &mut cfg.attacker;
    a.arch.widths = vec![8; 4];
    a.n_iid = 150;
    a.n_unrelated = 150;
    a.calibration = 150;
    a.search_points = 60;
    a.train.epochs = 3;
    cfg
}

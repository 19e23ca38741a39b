use std::path::Path;

use c2fvl::config::RunConfig;
use c2fvl::Error;

fn shipped(name: &str) -> RunConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name);
    RunConfig::load(Some(&path), &[]).unwrap()
}

#[test]
fn shipped_configs_round_trip_through_dump() {
    for name in ["default.cfg", "tiny.cfg"] {
        let cfg = shipped(name);
        let back = RunConfig::parse_text(&cfg.dump()).unwrap();
        assert_eq!(back, cfg, "{name}");
        assert_eq!(back.fingerprint(), cfg.fingerprint(), "{name}");
    }
}

#[test]
fn default_config_is_the_desk_scale_recipe() {
    let cfg = shipped("default.cfg");
    assert_eq!(cfg.train.learning_rate, 1e-3);
    assert_eq!(cfg.train.batch_size, 4);
    assert_eq!(cfg.train.max_rounds, 2000);
    assert_eq!(cfg.model.image_size, 64);
    assert_eq!((cfg.data.n_train, cfg.data.n_val, cfg.data.seed), (800, 200, 0));
    assert_eq!((cfg.train.loss.alpha, cfg.train.loss.beta, cfg.train.loss.gamma), (0.5, 0.5, 0.5));
}

#[test]
fn fingerprint_ignores_paths_only() {
    let base = RunConfig::default();
    let moved = RunConfig::load(None, &[("output.dir".into(), "elsewhere".into()), ("data.dir".into(), "x".into())]).unwrap();
    assert_eq!(base.fingerprint(), moved.fingerprint());
    let changed = RunConfig::load(None, &[("train.learning_rate".into(), "2e-3".into())]).unwrap();
    assert_ne!(base.fingerprint(), changed.fingerprint());
}

#[test]
fn bad_values_are_config_errors() {
    for (k, v) in [("train.batch_size", "0"), ("loss.alpha", "-1"), ("model.channels", "8,16"), ("train.threshold", "1"), ("nope", "1")] {
        let r = RunConfig::load(None, &[(k.into(), v.into())]);
        assert!(matches!(r, Err(Error::Config(_))), "{k}={v}");
    }
    let r = RunConfig::load(Some(Path::new("/no/such/file.cfg")), &[]);
    match r {
        Err(Error::Config(m)) => assert!(m.contains("/no/such/file.cfg"), "{m}"),
        other => panic!("{other:?}"),
    }
}

mod common;

use plotfuse::archive::{read_container, write_container, Checkpoint, Component, WeightArchive, PROBE_TOLERANCE};
use plotfuse::runner::{build_model, load_data};
use plotfuse_core::experiment::EVAL_CHUNK;
use plotfuse_core::train::RunLog;
use plotfuse_core::Tensor;

fn models() -> (plotfuse::config::ExperimentConfig, plotfuse_core::model::Model, plotfuse_core::model::Model) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), common::TINY_CLS, &[]);
    let splits = load_data(&cfg).unwrap();
    let a = build_model(&cfg, &splits, 0).unwrap();
    let b = build_model(&cfg, &splits, 1).unwrap();
    (cfg, a, b)
}

#[test]
fn archives_transfer_and_pass_probe() {
    let (_, a, mut b) = models();
    let dir = tempfile::tempdir().unwrap();
    for (c, name) in [(Component::VisionEncoder, "vision"), (Component::Backbone, "backbone")] {
        let p = dir.path().join(format!("{name}.safetensors"));
        WeightArchive::export(&a, c).unwrap().save(&p).unwrap();
        let ar = WeightArchive::load(&p).unwrap();
        let dev = ar.install(&mut b, &p).unwrap();
        assert!(dev <= PROBE_TOLERANCE, "{dev}");
        for (k, t) in &ar.weights {
            let p = b.store.iter().find(|(_, p)| &p.name == k).unwrap().1;
            assert_eq!(&p.value, t, "{k}");
        }
    }
}

#[test]
fn tampered_probe_is_rejected() {
    let (_, a, mut b) = models();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bb.safetensors");
    let mut ar = WeightArchive::export(&a, Component::Backbone).unwrap();
    let mut out = ar.probe_output.data().to_vec();
    out[0] += 1e-3;
    ar.probe_output = Tensor::new(ar.probe_output.shape(), out).unwrap();
    ar.save(&p).unwrap();
    let e = WeightArchive::load(&p).unwrap().install(&mut b, &p).unwrap_err();
    assert!(e.to_string().contains("deviates"), "{e}");
    assert_eq!(e.exit_code(), 3);
}

#[test]
fn manifest_must_match_arrays() {
    let (_, a, _) = models();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.safetensors");
    WeightArchive::export(&a, Component::VisionEncoder).unwrap().save(&p).unwrap();
    let (header, mut arrays) = read_container(&p).unwrap();
    let first = arrays.keys().find(|k| !k.starts_with("__")).unwrap().clone();
    arrays.remove(&first);
    write_container(&p, &header, &arrays).unwrap();
    assert!(WeightArchive::load(&p).is_err());

    let (mut header, arrays) = read_container(&dir.path().join("v.safetensors")).unwrap();
    header["schema_version"] = 99.into();
    write_container(&p, &header, &arrays).unwrap();
    assert!(WeightArchive::load(&p).is_err());
}

#[test]
fn wrong_component_shape_is_rejected() {
    let (_, a, _) = models();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bb.safetensors");
    WeightArchive::export(&a, Component::Backbone).unwrap().save(&p).unwrap();
    let other = common::config(dir.path(), common::TINY_CLS, &["model.backbone.depth=2"]);
    let mut c = build_model(&other, &load_data(&other).unwrap(), 0).unwrap();
    assert!(WeightArchive::load(&p).unwrap().install(&mut c, &p).is_err());
}

#[test]
fn archive_bytes_are_deterministic() {
    let (_, a, _) = models();
    let dir = tempfile::tempdir().unwrap();
    let (p, q) = (dir.path().join("1.safetensors"), dir.path().join("2.safetensors"));
    WeightArchive::export(&a, Component::Backbone).unwrap().save(&p).unwrap();
    WeightArchive::export(&a, Component::Backbone).unwrap().save(&q).unwrap();
    assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap());
}

#[test]
fn checkpoint_restores_predictions() {
    let (cfg, a, _) = models();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("ck.safetensors");
    let log = RunLog::default();
    Checkpoint::of(&a, &cfg.train, &log).save(&p).unwrap();
    let ck = Checkpoint::load(&p).unwrap();
    assert_eq!(ck.train_config, cfg.train);
    assert_eq!(ck.run_log, log);
    let b = ck.model().unwrap();
    let x = Tensor::from_fn(&[2, 16, 3], |i| (i as f64 * 0.37).sin());
    assert_eq!(a.predict(&x, None, EVAL_CHUNK).unwrap(), b.predict(&x, None, EVAL_CHUNK).unwrap());
}

#[test]
fn missing_checkpoint_is_a_missing_input() {
    let e = Checkpoint::load(std::path::Path::new("/nonexistent/ck.safetensors")).unwrap_err();
    assert_eq!(e.exit_code(), 2);
}

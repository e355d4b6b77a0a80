mod common;

use std::path::Path;
use std::process::Command;

use plotfuse::config::{load, resolve_text, Overrides};
use plotfuse::Error;

fn err(text: &str, ov: &Overrides) -> Error {
    resolve_text(text, Some(Path::new("exp.toml")), Path::new("."), ov).unwrap_err()
}

fn located(e: &Error) -> (Option<usize>, Option<String>) {
    match e {
        Error::Config { line, field, .. } => (*line, field.clone()),
        other => panic!("not a config error: {other}"),
    }
}

fn line_containing(text: &str, needle: &str) -> usize {
    text.lines().position(|l| l.contains(needle)).unwrap() + 1
}

#[test]
fn env_then_override_then_flags() {
    let base = Overrides::default();
    let (cfg, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &base).unwrap();
    assert_eq!((cfg.name.as_str(), cfg.jobs), ("tiny_cls", 1));

    let env = vec![("PLOTFUSE_NAME".to_string(), "from_env".to_string()), ("PLOTFUSE_JOBS".into(), "3".into())];
    let ov = Overrides { env: env.clone(), ..Overrides::default() };
    let (cfg, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &ov).unwrap();
    assert_eq!((cfg.name.as_str(), cfg.jobs), ("from_env", 3));

    let ov = Overrides {
        env: env.clone(),
        pairs: vec!["jobs=2".into(), "train.max_epochs=5".into()],
        ..Overrides::default()
    };
    let (cfg, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &ov).unwrap();
    assert_eq!((cfg.jobs, cfg.train.max_epochs), (2, 5));

    let ov = Overrides { env, pairs: vec!["jobs=2".into()], jobs: Some(4), seed: Some(9), ..Overrides::default() };
    let (cfg, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &ov).unwrap();
    assert_eq!((cfg.jobs, cfg.train.seeds.as_slice()), (4, &[9][..]));
}

#[test]
fn unrelated_env_is_ignored() {
    let env = vec![("PLOTFUSE_TRAIN".to_string(), "x".to_string()), ("HOME".into(), "/".into())];
    let ov = Overrides { env, ..Overrides::default() };
    assert!(resolve_text(common::TINY_CLS, None, Path::new("."), &ov).is_ok());
}

#[test]
fn hash_ignores_output_location_and_jobs() {
    let (a, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &Overrides::default()).unwrap();
    let ov = Overrides { jobs: Some(3), out: Some("/tmp/elsewhere".into()), ..Overrides::default() };
    let (b, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &ov).unwrap();
    assert_eq!(a.hash(), b.hash());
    let ov = Overrides { seed: Some(5), ..Overrides::default() };
    let (c, _) = resolve_text(common::TINY_CLS, None, Path::new("."), &ov).unwrap();
    assert_ne!(a.hash(), c.hash());
}

#[test]
fn errors_name_line_and_field() {
    let text = common::TINY_CLS.replace("r = 8", "r = 0");
    let (line, field) = located(&err(&text, &Overrides::default()));
    assert_eq!(line, Some(line_containing(&text, "r = 0")));
    assert_eq!(field.as_deref(), Some("model.tokenizer.r"));

    let text = common::TINY_CLS.replace("depth = 1\nheads = 2\nmax", "depth = 1\nheads = 2\nsize = 4\nmax");
    let (line, field) = located(&err(&text, &Overrides::default()));
    assert_eq!(line, Some(line_containing(&text, "size = 4")));
    assert!(field.unwrap().starts_with("model.backbone"));

    let text = common::TINY_CLS.replace("batch_size = 8", "batch_size = \"eight\"");
    let (line, field) = located(&err(&text, &Overrides::default()));
    assert_eq!(line, Some(line_containing(&text, "\"eight\"")));
    assert_eq!(field.as_deref(), Some("train.batch_size"));

    let text = common::TINY_CLS.replace("[model.vision]", "[model.vision");
    let (line, _) = located(&err(&text, &Overrides::default()));
    assert_eq!(line, Some(line_containing(&text, "[model.vision")));

    let e = err(common::TINY_CLS, &Overrides { pairs: vec!["no_equals".into()], ..Overrides::default() });
    assert_eq!(e.exit_code(), 2);
}

#[test]
fn structural_checks() {
    let mut text = common::TINY_CLS.to_string();
    let start = text.find("[data.synthetic]").unwrap();
    let end = text.find("[model]").unwrap();
    text.replace_range(start..end, "");
    assert_eq!(err(&text, &Overrides::default()).exit_code(), 2);

    let ov =
        Overrides { pairs: vec!["model.vision.weights_source=\"external_archive\"".into()], ..Overrides::default() };
    let e = err(common::TINY_CLS, &ov);
    assert_eq!(located(&e).1.as_deref(), Some("model.vision.weights_source"));
    assert!(e.to_string().contains("vision_archive"), "{e}");

    let ov = Overrides { pairs: vec!["sweep.fusion=[]".into()], ..Overrides::default() };
    assert!(matches!(err(common::TINY_CLS, &ov), Error::Config { .. }));

    let ov = Overrides { pairs: vec!["train.task=\"forecasting\"".into()], ..Overrides::default() };
    let (_, field) = located(&err(common::TINY_CLS, &ov));
    assert_eq!(field.as_deref(), Some("train.task"));
}

#[test]
fn config_round_trips_through_toml() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), common::TINY_FC, &[]);
    let p = common::write_config(dir.path(), "again.toml", &cfg.to_toml());
    let (back, _) = load(&p, &Overrides::default()).unwrap();
    assert_eq!(back, cfg);
    assert_eq!(back.hash(), cfg.hash());
}

fn run(args: &[&str], envs: &[(&str, &str)]) -> (i32, String) {
    let mut c = Command::new(common::bin());
    c.args(args);
    for (k, v) in envs {
        c.env(k, v);
    }
    let out = c.output().unwrap();
    (out.status.code().unwrap(), String::from_utf8_lossy(&out.stderr).into_owned())
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let out = out.to_str().unwrap();
    let good = common::write_config(dir.path(), "good.toml", common::TINY_CLS);
    let good = good.to_str().unwrap();

    assert_eq!(run(&["render", "--config", good, "--out", out], &[]).0, 0);
    assert!(Path::new(out).join("render/window_0_horizontal.png").exists());

    let (code, msg) = run(&["render", "--config", good, "--out", out], &[("PLOTFUSE_JOBS", "0")]);
    assert_eq!(code, 2, "{msg}");

    let bad = common::write_config(dir.path(), "bad.toml", &common::TINY_CLS.replace("r = 8", "r = 0"));
    let (code, msg) = run(&["train", "--config", bad.to_str().unwrap()], &[]);
    assert_eq!(code, 2);
    assert!(msg.contains("bad.toml") && msg.contains("line") && msg.contains("model.tokenizer.r"), "{msg}");

    assert_eq!(run(&["train", "--config", good, "--override", "oops"], &[]).0, 2);
    assert_eq!(run(&["train"], &[]).0, 2);
    assert_eq!(run(&["frobnicate"], &[]).0, 2);
    assert_eq!(run(&["--help"], &[]).0, 0);
    assert_eq!(run(&["train", "--config", "/nonexistent.toml"], &[]).0, 2);

    let (code, msg) = run(&["eval", "--config", good, "--out", out], &[]);
    assert_eq!(code, 2, "{msg}");
    assert!(msg.contains("checkpoint"), "{msg}");

    std::fs::write(dir.path().join("series.csv"), "a,b,label\n1,2,0\n3,x,0\n").unwrap();
    std::fs::write(dir.path().join("data.toml"), "task = \"anomaly_detection\"\nseries = \"series.csv\"\n").unwrap();
    let text = common::TINY_FC
        .replace("task = \"forecasting\"\nhorizon = 8", "task = \"anomaly_detection\"")
        .replace("[data]\nname = \"wave_a\"", "[data]\nmanifest = \"data.toml\"");
    let text = text[..text.find("[data.synthetic]").unwrap()].to_string() + &text[text.find("[target]").unwrap()..];
    let text = text[..text.find("[target]").unwrap()].to_string() + &text[text.find("[model]").unwrap()..];
    let text = text.replace("forecast_stride = 8\nar_horizons = [8, 16]", "");
    let corrupt = common::write_config(dir.path(), "corrupt.toml", &text);
    let (code, msg) = run(&["train", "--config", corrupt.to_str().unwrap(), "--out", out], &[]);
    assert_eq!(code, 3, "{msg}");
    assert!(msg.contains("series.csv:3"), "{msg}");
}

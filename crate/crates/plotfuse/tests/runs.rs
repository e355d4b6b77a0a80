mod common;

use std::path::Path;
use std::process::Command;

use plotfuse::config::DataSection;
use plotfuse::dataset::load_splits;
use plotfuse::formats::{load_npy, save_series, SeriesFormat};
use plotfuse::image::decode_png;
use plotfuse::report::{load_reports, RunManifest};
use plotfuse::runner;
use plotfuse_core::data::{make_synthetic, SyntheticKind, SyntheticSpec};
use plotfuse_core::heads::Task;
use plotfuse_core::raster::{rasterize, Layout};

fn cli(args: &[&str]) {
    let out = Command::new(common::bin()).args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

#[test]
fn train_is_reproducible_and_replayable() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::write_config(dir.path(), "cls.toml", common::TINY_CLS);
    let cfg = cfg.to_str().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    cli(&["train", "--config", cfg, "--out", a.to_str().unwrap()]);
    cli(&["train", "--config", cfg, "--out", b.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(read(a.join("report.json")), read(b.join("report.json")));
    assert_eq!(read(a.join("report.csv")), read(b.join("report.csv")));

    let manifest = a.join("manifest.json");
    let m = RunManifest::load(&manifest).unwrap();
    assert_eq!(m.command, "train");
    assert_eq!(m.seeds, [0, 1]);
    assert!(m.stages.iter().any(|s| s.stage == "train_eval"));
    for s in [0, 1] {
        for f in ["checkpoint", "backbone", "vision"] {
            assert!(a.join(format!("seed_{s}/{f}.safetensors")).exists());
        }
    }
    cli(&["train", "--config", manifest.to_str().unwrap(), "--out", c.to_str().unwrap()]);
    assert_eq!(read(a.join("report.json")), read(c.join("report.json")));

    let r = load_reports(&a.join("report.json")).unwrap();
    let acc = &r.reports.iter().find(|r| r.metric == "accuracy").unwrap();
    assert_eq!(acc.values.len(), 2);
    assert!(acc.std.is_some());

    cli(&["eval", "--config", cfg, "--out", a.to_str().unwrap()]);
    let e = load_reports(&a.join("eval/report.json")).unwrap();
    let acc_eval = e.reports.iter().find(|r| r.metric == "accuracy").unwrap();
    assert_eq!(acc_eval.mean, acc.mean);

    cli(&["attn", "--config", cfg, "--out", a.to_str().unwrap()]);
    let maps = load_npy(&a.join("attn/attention.npy")).unwrap();
    let (layers, n) = (maps.dim(0), maps.dim(1));
    assert_eq!(maps.shape(), &[layers, n, n]);
    for row in maps.data().chunks(n) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    for l in 0..layers {
        let png = decode_png(&read(a.join(format!("attn/attention_layer{l}.png")))).unwrap();
        assert_eq!(png.dim(0), 3);
    }

    let t = dir.path().join("table");
    cli(&["report", a.to_str().unwrap(), "--out", t.to_str().unwrap()]);
    let table = String::from_utf8(read(t.join("table.csv"))).unwrap();
    assert!(table.lines().count() >= 3, "{table}");
}

#[test]
fn tampered_manifest_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), common::TINY_CLS, &[]);
    let p = dir.path().join("m.json");
    let mut m = RunManifest::new("train", &cfg);
    m.config.train.max_epochs += 1;
    m.save(&p).unwrap();
    assert_eq!(RunManifest::load(&p).unwrap_err().exit_code(), 2);
}

#[test]
fn sweep_rows_cover_the_product() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(
        dir.path(),
        common::TINY_CLS,
        &[
            "train.max_epochs=1",
            r#"sweep.fusion=["early","late"]"#,
            r#"sweep.layout=["horizontal","grid"]"#,
            "sweep.color_coding=[true]",
        ],
    );
    let m = runner::sweep(&cfg).unwrap();
    assert_eq!(m.params["cells"], "4");
    assert_eq!(m.params["rows"], "8");
    let sweep = dir.path().join("out/sweep");
    let rows = String::from_utf8(read(sweep.join("rows.csv"))).unwrap();
    let mut lines = rows.lines();
    let header = lines.next().unwrap();
    assert!(header.starts_with("cell,layout,fusion,color_coding,seed,"), "{header}");
    assert_eq!(lines.count(), 4 * 2);
    assert_eq!(std::fs::read_dir(sweep.join("cells")).unwrap().count(), 4);
    let agg = load_reports(&sweep.join("aggregate.json")).unwrap();
    assert!(!agg.reports.is_empty());
    for r in &agg.reports {
        assert_eq!(r.std.is_some(), r.values.len() > 1);
    }
    assert!(agg.reports.iter().any(|r| r.values.len() == 2));
}

#[test]
fn zeroshot_and_fewshot_label_their_reports() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), common::TINY_FC, &[]);
    runner::zeroshot(&cfg).unwrap();
    let r = load_reports(&dir.path().join("out/zeroshot/report.json")).unwrap();
    assert!(r.reports.iter().all(|r| r.axes["transfer"] == "wave_a→wave_b"));
    let metrics: Vec<&str> = r.reports.iter().map(|r| r.metric.as_str()).collect();
    for m in ["mse", "mae", "ar_mse_h8", "ar_mse_h16"] {
        assert!(metrics.contains(&m), "{metrics:?}");
    }

    let cfg = common::config(dir.path(), common::TINY_CLS, &["train.max_epochs=1"]);
    let m = runner::fewshot(&cfg, 0.5).unwrap();
    assert_eq!(m.params["fraction"], "0.5");
    let r = load_reports(&dir.path().join("out/fewshot/report.json")).unwrap();
    assert!(r.reports.iter().all(|r| r.axes["fraction"] == "0.5"));
    assert_eq!(runner::fewshot(&cfg, 0.0).unwrap_err().exit_code(), 2);
    assert_eq!(runner::fewshot(&cfg, 1.5).unwrap_err().exit_code(), 2);

    let cfg = common::config(dir.path(), common::TINY_CLS, &[]);
    assert_eq!(runner::zeroshot(&cfg).unwrap_err().exit_code(), 2);
}

#[test]
fn render_is_deterministic_per_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = common::config(dir.path(), common::TINY_CLS, &[]);
    runner::render(&cfg, 2).unwrap();
    let r = dir.path().join("out/render");
    let first: Vec<Vec<u8>> = ["0_horizontal", "0_grid", "1_horizontal", "1_grid"]
        .iter()
        .map(|n| read(r.join(format!("window_{n}.png"))))
        .collect();
    assert_ne!(first[0], first[1]);
    runner::render(&cfg, 2).unwrap();
    for (n, bytes) in ["0_horizontal", "0_grid", "1_horizontal", "1_grid"].iter().zip(&first) {
        assert_eq!(&read(r.join(format!("window_{n}.png"))), bytes);
    }

    let splits = runner::load_data(&cfg).unwrap();
    let window = splits.test[0].values().clone();
    for (layout, bytes) in [(Layout::Horizontal, &first[0]), (Layout::Grid, &first[1])] {
        let rc = plotfuse_core::raster::RenderConfig { layout, ..cfg.model.render.clone() };
        let want = rasterize(&window, &rc).unwrap().pixels;
        let got = decode_png(bytes).unwrap();
        assert_eq!(got.shape(), &[3, 16, 32]);
        let worst = got.data().iter().zip(want.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.5 / 255.0 + 1e-12, "{worst}");
    }
}

#[test]
fn dataset_manifests_load_both_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let spec = SyntheticSpec {
        kind: SyntheticKind::SeasonalTrend {
            length: 200,
            channels: 2,
            periods: vec![8.0],
            amplitudes: vec![1.0],
            trend_slope: 0.0,
            snr_db: 30.0,
        },
        seed: 1,
        assert_separable: false,
    };
    let series = make_synthetic(&spec).unwrap().instances;
    save_series(&d.join("load.csv"), SeriesFormat::CsvWide, &series).unwrap();
    std::fs::write(
        d.join("fc.toml"),
        "name = \"load\"\ntask = \"forecasting\"\nseries = \"load.csv\"\nborders = [120, 150, 200]\n",
    )
    .unwrap();
    let section = DataSection { manifest: Some(d.join("fc.toml")), ..common::config(d, common::TINY_FC, &[]).data };
    let s = load_splits(&DataSection { synthetic: None, ..section.clone() }, Task::Forecasting, 32).unwrap();
    assert_eq!((s.train[0].len(), s.val[0].len(), s.test[0].len()), (120, 30 + 32, 50 + 32));
    assert_eq!(s.train[0].values().data(), series[0].values().slice_axis(0, 0, 120).data());

    std::fs::write(d.join("bad.toml"), "task = \"forecasting\"\nseries = \"load.csv\"\nborders = [120, 150, 999]\n")
        .unwrap();
    let bad = DataSection { manifest: Some(d.join("bad.toml")), synthetic: None, ..section.clone() };
    let e = load_splits(&bad, Task::Forecasting, 32).unwrap_err();
    assert!(e.to_string().contains("line 3"), "{e}");

    let cls = common::config(d, common::TINY_CLS, &[]);
    let cls_spec = cls.data.synthetic.clone().unwrap();
    let train = make_synthetic(&cls_spec).unwrap().instances;
    let test = make_synthetic(&SyntheticSpec { seed: 99, ..cls_spec }).unwrap().instances;
    save_series(&d.join("m_train.ts"), SeriesFormat::TsUeaLike, &train).unwrap();
    save_series(&d.join("m_test.npz"), SeriesFormat::NpzLike, &test).unwrap();
    std::fs::write(
        d.join("cls.toml"),
        "task = \"classification\"\ntrain = [\"m_train.ts\"]\ntest = [\"m_test.npz\"]\n",
    )
    .unwrap();
    let section =
        DataSection { manifest: Some(d.join("cls.toml")), synthetic: None, val_fraction: 0.25, ..cls.data.clone() };
    let s = load_splits(&section, Task::Classification, 0).unwrap();
    assert_eq!((s.train.len(), s.val.len(), s.test.len()), (9, 3, 12));
    assert_eq!(s.test[5].class_label, test[5].class_label);

    let wrong = load_splits(&section, Task::Forecasting, 0).unwrap_err();
    assert_eq!(wrong.exit_code(), 2);

    let text = common::TINY_CLS.replace("[data.synthetic]", "[data]\nmanifest = \"cls.toml\"\n\n[unused]");
    let text = text.replace("[unused]\nkind = \"class_motifs\"\nn_instances = 12\nn_classes = 2\nlength = 16\nchannels = 3\nbase_freqs = [1.0, 3.0]\nsnr_db = 20.0\nseed = 3\n", "");
    let cfg = common::config(d, &text, &["train.max_epochs=1", "train.seeds=[0]"]);
    runner::train(&cfg).unwrap();
    assert!(d.join("out/report.json").exists());
}

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

const TINY: &str = r#"{"epochs": 1, "batch_size": 8, "model": {"raster": {"global_px": 12, "local_px": 8},
 "capsnet": {"conv_channels": [3, 4], "lower": {"caps": 3, "dim": 4}, "local_higher": {"caps": 2, "dim": 3},
 "local_final": {"caps": 1, "dim": 4}, "global_higher": {"caps": 2, "dim": 3}, "state_embed": 3,
 "lstm_hidden": 5, "routing_iters": 0},
 "cvae": {"past_embed": 4, "future_embed": 4, "recog_hidden": 5, "latent": 3, "gen_hidden": [6, 6, 5]}}}"#;

fn mmst(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmst"))
        .args(args)
        .env_remove("MMST_DATA_DIR")
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = mmst(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// One dataset and trained run shared by the read-only tests.
struct Fixture {
    _dir: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
    data: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let config = root.join("tiny.json");
        fs::write(&config, TINY).unwrap();
        let data = root.join("data");
        let run = root.join("run");
        ok(&["gen-data", "--seed", "3", "--scenes", "6", "--config", p(&config), "--out", p(&data)]);
        ok(&["train", "--config", p(&config), "--data", p(&data), "--out", p(&run), "--mon-n", "4"]);
        Fixture {
            _dir: dir,
            root,
            config,
            data,
            run,
        }
    })
}

fn best(f: &Fixture) -> PathBuf {
    f.run.join("checkpoints").join("best.ckpt")
}

fn first_example(f: &Fixture) -> String {
    let index = fs::read_to_string(f.data.join("cache").join("test").join("index.csv")).unwrap();
    index.lines().nth(1).unwrap().split(',').next().unwrap().to_string()
}

#[test]
fn gen_data_is_seeded() {
    let f = fixture();
    let again = f.root.join("data_again");
    ok(&["gen-data", "--seed", "3", "--scenes", "6", "--config", p(&f.config), "--out", p(&again)]);
    let read = |d: &Path| -> serde_json::Value { serde_json::from_str(&fs::read_to_string(d.join("dataset.json")).unwrap()).unwrap() };
    let (a, b) = (read(&f.data), read(&again));
    assert_eq!(a["digests"], b["digests"]);
    assert_eq!(a["split"], b["split"]);
    assert_eq!(fs::read_dir(f.data.join("scenes")).unwrap().count(), 6);
    for i in 0..6 {
        let name = format!("scenes/scene_{i:04}.json");
        assert_eq!(fs::read(f.data.join(&name)).unwrap(), fs::read(again.join(&name)).unwrap());
    }
}

#[test]
fn train_writes_the_run_layout() {
    let f = fixture();
    for file in ["manifest.json", "config.json", "history.csv", "checkpoints/best.ckpt", "checkpoints/best.json", "metrics/val.csv"] {
        assert!(f.run.join(file).exists(), "{file}");
    }
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(f.run.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["loss"]["n_train"], 4);
    assert!(manifest["finished_unix"].is_u64());
    assert_eq!(manifest["input_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn eval_reports_each_k() {
    let f = fixture();
    let out = f.root.join("eval").join("m.csv");
    ok(&["eval", "--checkpoint", p(&best(f)), "--data", p(&f.data), "--k", "5,1,20,5", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("k,min_ade,min_fde,n_examples,distance_kind"));
    let rows: Vec<Vec<f64>> = lines
        .map(|l| {
            assert!(l.ends_with(",L2"));
            l.split(',').take(4).map(|v| v.parse().unwrap()).collect()
        })
        .collect();
    assert_eq!(rows.iter().map(|r| r[0] as usize).collect::<Vec<_>>(), [1, 5, 20]);
    for w in rows.windows(2) {
        assert!(w[1][1] <= w[0][1] && w[1][2] <= w[0][2]);
    }
    assert!(fs::read_to_string(out.with_extension("md")).unwrap().contains("non-comparable"));
}

#[test]
fn sample_writes_k_trajectories() {
    let f = fixture();
    let id = first_example(f);
    let runs: Vec<(String, String)> = ["a", "b"]
        .iter()
        .map(|tag| {
            let out = f.root.join(format!("sample_{tag}"));
            ok(&["sample", "--checkpoint", p(&best(f)), "--data", p(&f.data), "--example", &id, "--k", "4", "--out", p(&out)]);
            (
                fs::read_to_string(out.join("predictions.csv")).unwrap(),
                fs::read_to_string(out.join("overlay.svg")).unwrap(),
            )
        })
        .collect();
    let (csv, svg) = &runs[0];
    assert_eq!(csv.lines().next(), Some("example_id,sample_id,step,x,y"));
    assert_eq!(csv.lines().count(), 1 + 4 * 12);
    assert_eq!(svg.matches("<polyline").count(), 5);
    assert_eq!(&runs[0], &runs[1]);

    let out = mmst(&["sample", "--checkpoint", p(&best(f)), "--data", p(&f.data), "--example", "nope"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn rasterize_dumps_every_layer() {
    let f = fixture();
    let id = first_example(f);
    let out = f.root.join("rasters");
    ok(&["rasterize", "--data", p(&f.data), "--example", &id, "--out", p(&out)]);
    let global = fs::read(out.join("global.pgm")).unwrap();
    assert!(global.starts_with(b"P5\n12 12\n255\n"));
    assert_eq!(global.len(), "P5\n12 12\n255\n".len() + 144);
    for layer in ["road_segment", "drivable_area", "lane", "walkway"] {
        let local = fs::read(out.join(format!("local_{layer}.pgm"))).unwrap();
        assert!(local.starts_with(b"P5\n8 8\n255\n"), "{layer}");
    }
    assert_eq!(fs::read_to_string(out.join("overlay.svg")).unwrap().matches("<polyline").count(), 2);
}

#[test]
fn bad_k_is_a_usage_error() {
    let f = fixture();
    let out = mmst(&["eval", "--checkpoint", p(&best(f)), "--data", p(&f.data), "--k", "0"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_config_names_the_field() {
    let f = fixture();
    let bad = f.root.join("bad.json");
    fs::write(&bad, r#"{"batch_size": 1}"#).unwrap();
    let out = mmst(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(&f.root.join("bad_run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("batch_size"));

    fs::write(&bad, r#"{"sps": {"gamma_bound": "x"}}"#).unwrap();
    let out = mmst(&["train", "--config", p(&bad), "--data", p(&f.data), "--out", p(&f.root.join("bad_run"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("sps.gamma_bound"));
}

#[test]
fn refuses_to_overwrite_a_run() {
    let f = fixture();
    let out = mmst(&["train", "--config", p(&f.config), "--data", p(&f.data), "--out", p(&f.run)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--force"));
}

#[test]
fn tampered_cache_is_a_data_error() {
    let f = fixture();
    let copy = f.root.join("tampered");
    ok(&["gen-data", "--seed", "3", "--scenes", "6", "--config", p(&f.config), "--out", p(&copy)]);
    let index = copy.join("cache").join("val").join("index.csv");
    let mut text = fs::read_to_string(&index).unwrap();
    text.push_str("extra\n");
    fs::write(&index, text).unwrap();
    let out = mmst(&["eval", "--checkpoint", p(&best(f)), "--data", p(&copy), "--split", "val"]);
    assert_eq!(out.status.code(), Some(3));

    let out = mmst(&["eval", "--checkpoint", p(&best(f)), "--data", p(&f.root.join("missing"))]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn gradcheck_passes_and_flags_the_control() {
    let stdout = ok(&["gradcheck", "--seeds", "2"]);
    assert!(stdout.contains("negative control"));
}

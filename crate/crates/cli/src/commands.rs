use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mmst::data::cache::write_split;
use mmst::data::split::{split_ids, SplitSpec};
use mmst::data::synth::{generate_scene, SceneSpec};
use mmst::data::{build_examples, save_scene, Example};
use mmst::experiments::{
    ablate_distance, ablate_mon_n, k_sweep_grid, nonincreasing, sweep_k, AblationRow, Reference, Splits,
    DISTANCE_REFERENCE, EVAL_K_GRID, EVAL_REFERENCE, K_SWEEP_EXPONENTS, MON_N_GRID, MON_N_REFERENCE,
};
use mmst::geometry::Pose;
use mmst::model::ModelConfig;
use mmst::objectives::{DistanceKind, LossConfig, MetricMode, MetricRow};
use mmst::raster::{svg_overlay, LayerType, Raster};
use mmst::report::{self, Series};
use mmst::tensor::gradcheck::{self, broken_fixture, op_suite};
use mmst::training::{evaluate, model_gradcheck, predict, FitOutput, TrainConfig, TrainHistory};

use crate::error::{CliError, CliResult};
use crate::layout::*;
use crate::{AblateArgs, AblationKind, Dims, EvalArgs, GenDataArgs, GradcheckArgs, ModeArg, RasterizeArgs, SampleArgs, TrainArgs};

fn load_config(path: Option<&Path>) -> CliResult<TrainConfig> {
    match path {
        None => Ok(TrainConfig::default()),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))?;
            TrainConfig::from_json(&text).map_err(|e| CliError::Usage(format!("config {}: {e}", p.display())))
        }
    }
}

fn check_ks(ks: &[usize]) -> CliResult<Vec<usize>> {
    if ks.is_empty() || ks.contains(&0) {
        return Err(CliError::Usage("--k values must be positive integers".into()));
    }
    let mut ks = ks.to_vec();
    ks.sort_unstable();
    ks.dedup();
    Ok(ks)
}

/// Run directory of a checkpoint stored as `<run>/checkpoints/<name>.ckpt`.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    checkpoint
        .parent()
        .and_then(Path::parent)
        .map(Path::to_path_buf)
        .unwrap_or_else(|| PathBuf::from("."))
}

fn file_safe(s: &str) -> String {
    s.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

pub fn gen_data(a: &GenDataArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    if a.scenes == 0 {
        return Err(CliError::Usage("--scenes must be at least 1".into()));
    }
    prepare_out_dir(&a.out, a.force)?;
    for stale in ["scenes", "cache"] {
        let p = a.out.join(stale);
        if p.exists() {
            fs::remove_dir_all(&p).map_err(|e| io_err(&p, e))?;
        }
    }
    let spec = SceneSpec {
        rate_hz: cfg.model.rate_hz,
        ..SceneSpec::default()
    };
    spec.validate()?;
    let scene_dir = a.out.join("scenes");
    fs::create_dir_all(&scene_dir).map_err(|e| io_err(&scene_dir, e))?;
    let mut scenes = Vec::with_capacity(a.scenes);
    for i in 0..a.scenes {
        let scene = generate_scene(a.seed, i as u64, &spec)?;
        save_scene(&scene, &scene_path(&a.out, i))?;
        scenes.push(scene);
    }
    let split_spec = SplitSpec::Fractions {
        train: 0.8,
        val: 0.1,
        test: 0.1,
        seed: a.seed,
    };
    let ids: Vec<usize> = (0..a.scenes).collect();
    let split = split_ids(&ids, &split_spec)?;
    let mut examples = BTreeMap::new();
    let mut skipped = BTreeMap::new();
    let mut digests = BTreeMap::new();
    for (name, part) in split.parts() {
        let refs: Vec<_> = part.iter().map(|&i| (i, &scenes[i])).collect();
        let (ex, skip) = build_examples(&refs, &cfg.model)?;
        let dir = cache_dir(&a.out, name);
        write_split(&dir, &ex)?;
        digests.insert(name.to_string(), mmst::data::cache::split_digest(&dir)?);
        examples.insert(name.to_string(), ex.len());
        for (reason, n) in skip {
            *skipped.entry(reason.to_string()).or_insert(0) += n;
        }
    }
    let manifest = DataManifest {
        seed: a.seed,
        scenes: a.scenes,
        scene_spec: spec,
        model: cfg.model,
        split_spec,
        split,
        examples,
        skipped_tracks: skipped,
        digests,
        created_unix: now_unix(),
    };
    write_json(&a.out.join(DATA_MANIFEST), &manifest)?;
    println!("scenes: {}", a.scenes);
    for (name, n) in &manifest.examples {
        println!("{name}: {n} examples");
    }
    for (reason, n) in &manifest.skipped_tracks {
        println!("skipped tracks ({reason}): {n}");
    }
    Ok(())
}

fn loss_plot(history: &TrainHistory) -> String {
    let pts = |f: fn(&mmst::training::EpochRecord) -> f64| -> Vec<(f64, f64)> {
        history.epochs.iter().map(|e| (e.epoch as f64, f(e))).collect()
    };
    report::line_plot(
        "Loss per epoch",
        "epoch",
        "loss per example",
        &[
            Series {
                label: "train",
                points: pts(|e| e.train_loss),
            },
            Series {
                label: "validation",
                points: pts(|e| e.val_loss),
            },
        ],
        false,
    )
}

fn ade_plot(history: &TrainHistory, k: usize) -> String {
    let label = format!("minADE{k}");
    report::line_plot(
        &format!("Validation {label} per epoch"),
        "epoch",
        &format!("{label} [m]"),
        &[Series {
            label: &label,
            points: history.epochs.iter().map(|e| (e.epoch as f64, e.val_min_ade)).collect(),
        }],
        false,
    )
}

pub fn train(a: &TrainArgs) -> CliResult<()> {
    let mut cfg = load_config(a.config.as_deref())?;
    if let Some(n) = a.mon_n {
        cfg.loss.n_train = n;
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = read_data_manifest(&a.data)?;
    check_compatible(&data.model, &cfg.model)?;
    prepare_out_dir(&a.out, a.force)?;
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let hash = input_hash(&config, &data);
    let mut manifest = RunManifest::new("train", config, cfg.seed, &a.data, hash);
    write_json(&a.out.join(RUN_MANIFEST), &manifest)?;
    write_json(&a.out.join("config.json"), &cfg)?;

    let train = load_split(&a.data, &data, "train")?;
    let val = load_split(&a.data, &data, "val")?;
    log::info!("training on {} examples, validating on {}", train.len(), val.len());
    let last = a.out.join("checkpoints").join("last.ckpt");
    let mut save_err = None;
    let out = mmst::training::fit(&cfg, &train, &val, |rec, model| {
        if rec.epoch * 10 <= cfg.epochs.max(10) && rec.train_kl < 1e-3 {
            log::warn!("KL term {:.2e} near zero at epoch {}: posterior collapse", rec.train_kl, rec.epoch);
        }
        if save_err.is_none() {
            save_err = save_checkpoint(&last, model, &cfg).err();
        }
    })?;
    if let Some(e) = save_err {
        return Err(e);
    }
    finish_training(&a.out, &cfg, &out, &val)?;
    manifest.finished_unix = Some(now_unix());
    write_json(&a.out.join(RUN_MANIFEST), &manifest)?;
    let best = out.history.epochs.iter().find(|e| e.epoch == out.history.best_epoch);
    println!(
        "initial validation minADE{}: {:.3}",
        cfg.eval_k, out.history.initial_val_min_ade
    );
    if let Some(b) = best {
        println!("best epoch {}: validation minADE{} {:.3}", b.epoch, cfg.eval_k, b.val_min_ade);
    }
    println!("checkpoint: {}", a.out.join("checkpoints").join("best.ckpt").display());
    Ok(())
}

fn finish_training(out: &Path, cfg: &TrainConfig, fit: &FitOutput, val: &[Example]) -> CliResult<()> {
    fit.history.write_csv(&out.join("history.csv"))?;
    save_checkpoint(&out.join("checkpoints").join("best.ckpt"), &fit.best, cfg)?;
    let refs: Vec<&Example> = val.iter().collect();
    let rows = evaluate(&fit.best, &refs, &EVAL_K_GRID, MetricMode::Standard, cfg.seed)?;
    report::write_metrics(&out.join("metrics").join("val.csv"), &rows, cfg.loss.distance)?;
    report::write_text(&out.join("plots").join("loss.svg"), &loss_plot(&fit.history))?;
    report::write_text(&out.join("plots").join("val_min_ade.svg"), &ade_plot(&fit.history, cfg.eval_k))?;
    Ok(())
}

fn print_rows(rows: &[MetricRow]) {
    println!("{:>6} {:>10} {:>10}", "k", "minADE", "minFDE");
    for r in rows {
        println!("{:>6} {:>10.4} {:>10.4}", r.k, r.min_ade, r.min_fde);
    }
}

pub fn eval(a: &EvalArgs) -> CliResult<()> {
    let ks = check_ks(&a.k)?;
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let data = read_data_manifest(&a.data)?;
    check_compatible(&data.model, &cfg.model)?;
    let examples = load_split(&a.data, &data, &a.split)?;
    let refs: Vec<&Example> = examples.iter().collect();
    let mode = match a.mode {
        ModeArg::Standard => MetricMode::Standard,
        ModeArg::Literal => MetricMode::Literal,
    };
    let rows = evaluate(&model, &refs, &ks, mode, a.seed.unwrap_or(cfg.seed))?;
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(&a.checkpoint).join("metrics").join(format!("eval_{}.csv", a.split)));
    report::write_metrics(&out, &rows, cfg.loss.distance)?;
    let md = report::metrics_markdown(
        &format!("Evaluation on the {} split", a.split),
        &rows,
        &EVAL_REFERENCE,
        model.count_parameters(),
    );
    report::write_text(&out.with_extension("md"), &md)?;
    print_rows(&rows);
    println!("metrics: {}", out.display());
    Ok(())
}

fn find_example(data: &Path, manifest: &DataManifest, id: &str) -> CliResult<Example> {
    for split in SPLITS {
        let index = mmst::data::cache::read_index(&cache_dir(data, split))?;
        if index.iter().any(|r| r.id == id) {
            let mut all = load_split(data, manifest, split)?;
            let pos = all.iter().position(|e| e.id == id).expect("listed in index");
            return Ok(all.swap_remove(pos));
        }
    }
    Err(CliError::Usage(format!("no example `{id}` in {}", data.display())))
}

pub fn sample(a: &SampleArgs) -> CliResult<()> {
    if a.k == 0 {
        return Err(CliError::Usage("--k must be at least 1".into()));
    }
    let (model, cfg) = load_checkpoint(&a.checkpoint)?;
    let data = read_data_manifest(&a.data)?;
    check_compatible(&data.model, &cfg.model)?;
    let ex = find_example(&a.data, &data, &a.example)?;
    let preds = predict(&model, &[&ex], a.k, a.seed.unwrap_or(cfg.seed))?;
    let set = &preds[0];
    let out = a
        .out
        .clone()
        .unwrap_or_else(|| run_dir_of(&a.checkpoint).join("samples").join(file_safe(&a.example)));
    fs::create_dir_all(&out).map_err(|e| io_err(&out, e))?;

    let mut csv = String::from("example_id,sample_id,step,x,y\n");
    for i in 0..set.k() {
        for (s, p) in set.trajectory(i).iter().enumerate() {
            let _ = writeln!(csv, "{},{i},{},{},{}", ex.id, s + 1, p[0], p[1]);
        }
    }
    let csv_path = out.join("predictions.csv");
    fs::write(&csv_path, csv).map_err(|e| io_err(&csv_path, e))?;

    let gp = cfg.model.raster.global_px;
    let raster = Raster {
        rows: gp,
        cols: gp,
        data: ex.global.data().to_vec(),
    };
    let window = cfg.model.raster.global_window(Pose::new(0.0, 0.0, 0.0))?;
    let with_origin = |pts: &[[f64; 2]]| -> Vec<[f64; 2]> { std::iter::once([0.0, 0.0]).chain(pts.iter().copied()).collect() };
    let samples: Vec<Vec<[f64; 2]>> = (0..set.k()).map(|i| with_origin(set.trajectory(i))).collect();
    let truth = with_origin(&ex.future);
    let mut lines: Vec<(&str, &[[f64; 2]])> = samples.iter().map(|s| ("#4aa3ff", s.as_slice())).collect();
    lines.push(("#39d353", truth.as_slice()));
    let svg_path = out.join("overlay.svg");
    report::write_text(&svg_path, &svg_overlay(&raster, &window, &lines))?;
    println!("{} samples of {} x {} steps", set.k(), ex.id, set.steps);
    println!("predictions: {}", csv_path.display());
    println!("overlay: {}", svg_path.display());
    Ok(())
}

/// Writes `global.pgm`, one `local_<layer>.pgm` per semantic layer at the
/// anchor step, and `overlay.svg` with the past and future tracks.
pub fn rasterize(a: &RasterizeArgs) -> CliResult<()> {
    let data = read_data_manifest(&a.data)?;
    let ex = find_example(&a.data, &data, &a.example)?;
    fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    let cfg = &data.model.raster;
    let global = Raster {
        rows: cfg.global_px,
        cols: cfg.global_px,
        data: ex.global.data().to_vec(),
    };
    global.write_pgm(&a.out.join("global.pgm"))?;
    let px = cfg.local_px * cfg.local_px;
    let steps = ex.local.shape()[0];
    let last = &ex.local.data()[(steps - 1) * LayerType::COUNT * px..];
    for layer in LayerType::ALL {
        let i = layer.index();
        let r = Raster {
            rows: cfg.local_px,
            cols: cfg.local_px,
            data: last[i * px..(i + 1) * px].to_vec(),
        };
        r.write_pgm(&a.out.join(format!("local_{}.pgm", layer.name())))?;
    }
    let window = cfg.global_window(Pose::new(0.0, 0.0, 0.0))?;
    let future: Vec<[f64; 2]> = std::iter::once([0.0, 0.0]).chain(ex.future.iter().copied()).collect();
    let lines: Vec<(&str, &[[f64; 2]])> = vec![("#ff9f1c", ex.past.as_slice()), ("#39d353", future.as_slice())];
    let svg = a.out.join("overlay.svg");
    report::write_text(&svg, &svg_overlay(&global, &window, &lines))?;
    println!("rasters of {} written to {}", ex.id, a.out.display());
    Ok(())
}

pub fn gradcheck(a: &GradcheckArgs) -> CliResult<()> {
    if a.seeds == 0 {
        return Err(CliError::Usage("--seeds must be at least 1".into()));
    }
    let mut worst: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for seed in 0..a.seeds {
        for r in op_suite(seed)? {
            let e = worst.entry(r.name.clone()).or_insert((0.0, 0));
            e.0 = e.0.max(r.max_rel_error);
            e.1 += r.checked;
        }
    }
    let mut failed = Vec::new();
    println!("{:<28} {:>12} {:>9} result", "check", "max rel err", "entries");
    for (name, (err, n)) in &worst {
        let ok = *err < gradcheck::OP_TOLERANCE;
        println!("{name:<28} {err:>12.3e} {n:>9} {}", if ok { "pass" } else { "FAIL" });
        if !ok {
            failed.push(name.clone());
        }
    }
    let model_cfg = match a.dims {
        Dims::Small => ModelConfig::tiny(),
        Dims::Full => ModelConfig::default(),
    };
    let loss = LossConfig {
        n_train: 2,
        ..LossConfig::default()
    };
    let mut model_err: f64 = 0.0;
    let mut entries = 0;
    for seed in 0..a.seeds {
        let r = model_gradcheck(&model_cfg, &loss, seed)?;
        model_err = model_err.max(r.max_rel_error);
        entries += r.checked;
    }
    let ok = model_err < gradcheck::MODEL_TOLERANCE;
    println!(
        "{:<28} {model_err:>12.3e} {entries:>9} {}",
        "composed model",
        if ok { "pass" } else { "FAIL" }
    );
    if !ok {
        failed.push("composed model".into());
    }
    let control = broken_fixture(0)?;
    let flagged = !control.passes(gradcheck::OP_TOLERANCE);
    println!(
        "{:<28} {:>12.3e} {:>9} {}",
        "negative control",
        control.max_rel_error,
        control.checked,
        if flagged { "flagged" } else { "NOT FLAGGED" }
    );
    if !flagged {
        failed.push("negative control".into());
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!("gradient check failed: {}", failed.join(", "))))
    }
}

fn setting_curves(rows: &[AblationRow]) -> Vec<(String, Vec<MetricRow>)> {
    let mut out: Vec<(String, Vec<MetricRow>)> = Vec::new();
    for r in rows {
        let m = MetricRow {
            k: r.k,
            min_ade: r.min_ade,
            min_fde: r.min_fde,
            n_examples: r.n_examples,
        };
        match out.iter_mut().find(|(s, _)| *s == r.setting) {
            Some((_, v)) => v.push(m),
            None => out.push((r.setting.clone(), vec![m])),
        }
    }
    out
}

fn write_curves(out: &Path, stem: &str, curves: &[(&str, &[MetricRow])], log2_x: bool) -> CliResult<()> {
    let (ade, fde) = report::k_curves(curves, log2_x);
    report::write_text(&out.join("plots").join(format!("{stem}_min_ade.svg")), &ade)?;
    report::write_text(&out.join("plots").join(format!("{stem}_min_fde.svg")), &fde)?;
    Ok(())
}

pub fn ablate(a: &AblateArgs) -> CliResult<()> {
    let cfg = load_config(a.config.as_deref())?;
    let data = read_data_manifest(&a.data)?;
    prepare_out_dir(&a.out, a.force)?;
    let config = serde_json::to_value(&cfg).map_err(|e| CliError::Usage(e.to_string()))?;
    let hash = input_hash(&config, &data);
    let mut manifest = RunManifest::new(&format!("ablate {:?}", a.kind), config, cfg.seed, &a.data, hash);
    write_json(&a.out.join(RUN_MANIFEST), &manifest)?;

    if a.kind == AblationKind::KSweep {
        let ckpt = a
            .checkpoint
            .as_ref()
            .ok_or_else(|| CliError::Usage("--checkpoint is required for --kind k-sweep".into()))?;
        let (lo, hi) = (K_SWEEP_EXPONENTS.0, a.max_exp);
        if !(lo..=K_SWEEP_EXPONENTS.1).contains(&hi) {
            return Err(CliError::Usage(format!("--max-exp must lie in {lo}..={}", K_SWEEP_EXPONENTS.1)));
        }
        let (model, mcfg) = load_checkpoint(ckpt)?;
        check_compatible(&data.model, &mcfg.model)?;
        let examples = load_split(&a.data, &data, &a.split)?;
        let ks = k_sweep_grid(lo, hi);
        let rows = sweep_k(&model, &examples, &ks, mcfg.seed)?;
        report::write_metrics(&a.out.join("metrics").join("k_sweep.csv"), &rows, mcfg.loss.distance)?;
        write_curves(&a.out, "k_sweep", &[("desk model", &rows)], true)?;
        let md = report::metrics_markdown("Displacement error over the number of samples", &rows, &[], model.count_parameters());
        report::write_text(&a.out.join("report.md"), &md)?;
        print_rows(&rows);
        println!("nonincreasing: {}", nonincreasing(&rows));
    } else {
        check_compatible(&data.model, &cfg.model)?;
        let ks = check_ks(&a.k)?;
        let train = load_split(&a.data, &data, "train")?;
        let val = load_split(&a.data, &data, "val")?;
        let test = load_split(&a.data, &data, &a.split)?;
        let splits = Splits {
            train: &train,
            val: &val,
            test: &test,
        };
        let mut save_err = None;
        let mut on_fit = |setting: &str, used: &TrainConfig, fit: &FitOutput| {
            let path = a.out.join("checkpoints").join(format!("{}.ckpt", file_safe(setting)));
            if save_err.is_none() {
                save_err = save_checkpoint(&path, &fit.best, used).err();
            }
        };
        let (stem, title, reference, rows): (&str, &str, &[Reference], _) = match a.kind {
            AblationKind::MonN => (
                "mon_n",
                "Number of training samples in the MoN term",
                &MON_N_REFERENCE,
                ablate_mon_n(&cfg, splits, &MON_N_GRID, &ks, &mut on_fit)?,
            ),
            _ => (
                "distance",
                "Distance function of the MoN term",
                &DISTANCE_REFERENCE,
                ablate_distance(&cfg, splits, &DistanceKind::ALL, &ks, &mut on_fit)?,
            ),
        };
        if let Some(e) = save_err {
            return Err(e);
        }
        report::write_csv(&a.out.join("metrics").join(format!("{stem}.csv")), &rows)?;
        let curves = setting_curves(&rows);
        let refs: Vec<(&str, &[MetricRow])> = curves.iter().map(|(s, r)| (s.as_str(), r.as_slice())).collect();
        write_curves(&a.out, stem, &refs, false)?;
        report::write_text(&a.out.join("report.md"), &report::ablation_markdown(title, &rows, reference))?;
        println!("{:<16} {:>6} {:>10} {:>10}", "setting", "k", "minADE", "minFDE");
        for r in &rows {
            println!("{:<16} {:>6} {:>10.4} {:>10.4}", r.setting, r.k, r.min_ade, r.min_fde);
        }
    }
    manifest.finished_unix = Some(now_unix());
    write_json(&a.out.join(RUN_MANIFEST), &manifest)?;
    println!("report: {}", a.out.join("report.md").display());
    Ok(())
}

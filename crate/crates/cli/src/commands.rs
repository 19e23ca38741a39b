use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use c2fvl::checkpoint::Checkpoint;
use c2fvl::config::{expand_grid, parse_grid, RunConfig};
use c2fvl::decoder::logits_to_mask;
use c2fvl::imageio;
use c2fvl::metrics::EvalReport;
use c2fvl::model::Model;
use c2fvl::report_codec::{compile_report, decode_vector, TextVector};
use c2fvl::saliency::{grad_cam_all, write_heatmap, write_overlay};
use c2fvl::synth_data::{load_dataset, load_split, write_dataset};
use c2fvl::training::{self, history_csv, TrainOutcome};
use c2fvl::{Error, Result, Tensor};

use crate::ConfigArgs;

pub const SEED_ENV: &str = "C2FVL_SEED";

fn io(path: &Path) -> impl FnOnce(std::io::Error) -> Error + '_ {
    move |e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    }
}

/// `--key value` / `--key=value` pairs.
pub fn parse_overrides(args: &[String]) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    let mut it = args.iter();
    while let Some(a) = it.next() {
        let key = a
            .strip_prefix("--")
            .ok_or_else(|| Error::Config(format!("expected --key value override, got {a:?}")))?;
        if let Some((k, v)) = key.split_once('=') {
            out.push((k.to_string(), v.to_string()));
        } else {
            let v = it
                .next()
                .ok_or_else(|| Error::Config(format!("override --{key} has no value")))?;
            out.push((key.to_string(), v.clone()));
        }
    }
    Ok(out)
}

pub fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut overrides = Vec::new();
    if let Ok(seed) = std::env::var(SEED_ENV) {
        overrides.push(("seed".to_string(), seed));
    }
    overrides.extend(parse_overrides(&args.overrides)?);
    RunConfig::load(args.config.as_deref(), &overrides)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(io(dir))?;
        }
    }
    fs::write(path, contents).map_err(io(path))
}

pub fn gen_data(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    let spec = cfg.synthetic_spec();
    let d = &cfg.data;
    write_dataset(&d.dir, d.n_train, d.n_val, d.n_test, &spec)?;
    println!(
        "{}",
        json!({
            "dir": d.dir.display().to_string(),
            "train": d.n_train,
            "val": d.n_val,
            "test": d.n_test,
            "ambiguous": d.ambiguous,
            "seed": d.seed,
        })
    );
    Ok(())
}

pub fn encode_text(report: Option<&str>, decode: Option<&str>) -> Result<()> {
    match (report, decode) {
        (Some(r), _) => println!("{}", compile_report(r)?),
        (None, Some(v)) => {
            let values: Vec<f64> = serde_json::from_str(v)
                .map_err(|e| Error::InvalidVector(format!("{v:?} is not a JSON number array: {e}")))?;
            println!("{}", decode_vector(&TextVector::from_reals(&values)?)?);
        }
        (None, None) => return Err(Error::Config("encode-text needs --report or --decode".into())),
    }
    Ok(())
}

/// Train one configuration, writing its artefacts under `output.dir`.
pub fn run_training(cfg: &RunConfig, quiet: bool) -> Result<TrainOutcome> {
    let ds = load_dataset(&cfg.data.dir)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (model, mut store) = Model::new(cfg.model.clone(), &mut rng)?;
    let out = &cfg.output_dir;
    fs::create_dir_all(out).map_err(io(out))?;
    write(&out.join("config.txt"), cfg.dump())?;
    let meta = cfg.model_text();
    let fp = cfg.fingerprint();
    let mut log = |row: &training::HistoryRow| {
        if let (false, Some((d, i))) = (quiet, row.val) {
            eprintln!(
                "round {:>5}  loss {:.5}  val dice {:.4}  val iou {:.4}",
                row.round, row.loss.total, d, i
            );
        }
    };
    let outcome = training::train(&model, &mut store, &ds.train, &ds.val, &cfg.train, &meta, &fp, &mut log)?;
    outcome.best.save(&out.join("checkpoint.c2fvl"))?;
    write(&out.join("history.csv"), history_csv(&outcome.history))?;
    let best_iou = outcome
        .history
        .iter()
        .find(|r| r.round as u64 == outcome.best.round)
        .and_then(|r| r.val)
        .map(|v| v.1);
    let summary = json!({
        "fingerprint": fp,
        "rounds_run": outcome.rounds_run,
        "stopped_early": outcome.stopped_early,
        "best_round": outcome.best.round,
        "best_val_dice": finite(outcome.best.best_val_dice),
        "best_val_iou": best_iou,
    });
    write(&out.join("summary.json"), serde_json::to_string_pretty(&summary).expect("json"))?;
    if !quiet {
        println!("{summary}");
    }
    Ok(outcome)
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

pub fn train(args: &ConfigArgs) -> Result<()> {
    let cfg = load_config(args)?;
    run_training(&cfg, false).map(|_| ())
}

pub struct EvalArgs {
    pub pred_dir: Option<PathBuf>,
    pub gt_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub threshold: f64,
    pub csv: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

fn png_stems(dir: &Path) -> Result<Vec<String>> {
    let mut ids = Vec::new();
    for entry in fs::read_dir(dir).map_err(io(dir))? {
        let p = entry.map_err(io(dir))?.path();
        if p.extension().is_some_and(|e| e == "png") {
            if let Some(s) = p.file_stem().and_then(|s| s.to_str()) {
                ids.push(s.to_string());
            }
        }
    }
    ids.sort();
    Ok(ids)
}

fn check_threshold(t: f64) -> Result<()> {
    if t > 0.0 && t < 1.0 {
        Ok(())
    } else {
        Err(Error::Config(format!("threshold {t} must lie in (0, 1)")))
    }
}

pub fn eval(a: EvalArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    let report = match (&a.pred_dir, &a.gt_dir, &a.checkpoint, &a.data) {
        (Some(pred), Some(gt), None, _) => {
            let ids = png_stems(gt)?;
            let mut masks = Vec::with_capacity(ids.len());
            for id in &ids {
                let g = imageio::read_mask(&gt.join(format!("{id}.png")))?;
                let p = imageio::read_mask(&pred.join(format!("{id}.png")))?;
                masks.push((id.as_str(), p, g));
            }
            EvalReport::from_masks(masks.iter().map(|(id, p, g)| (*id, p, g)))?
        }
        (None, _, Some(ckpt), Some(data)) => {
            let (model, store) = Checkpoint::load(ckpt)?.build_model()?;
            let samples = load_split(&data.join(&a.split))?;
            training::evaluate(&model, &store, &samples, a.threshold)?
        }
        _ => {
            return Err(Error::Config(
                "eval needs --pred-dir with --gt-dir, or --checkpoint with --data".into(),
            ))
        }
    };
    if let Some(p) = &a.csv {
        write(p, report.to_csv())?;
    }
    match &a.json {
        Some(p) => write(p, report.to_json())?,
        None => println!("{}", report.to_json()),
    }
    Ok(())
}

pub struct PredictArgs {
    pub checkpoint: PathBuf,
    pub image: Option<PathBuf>,
    pub report: Option<String>,
    pub out: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub split: String,
    pub out_dir: Option<PathBuf>,
    pub threshold: f64,
}

fn load_image(model: &Model, path: &Path) -> Result<Tensor> {
    let img = imageio::read_gray(path)?;
    let n = model.cfg.image_size;
    if img.shape() != [n, n] {
        return Err(Error::DataShape(format!(
            "{} is {:?}, model expects {n}x{n}",
            path.display(),
            img.shape()
        )));
    }
    Ok(img)
}

pub fn predict(a: PredictArgs) -> Result<()> {
    check_threshold(a.threshold)?;
    let (model, store) = Checkpoint::load(&a.checkpoint)?.build_model()?;
    match (&a.image, &a.data) {
        (Some(image), None) => {
            let (report, out) = (a.report.as_deref().expect("clap"), a.out.as_ref().expect("clap"));
            let img = load_image(&model, image)?;
            let n = model.cfg.image_size;
            let text = compile_report(report)?;
            let logits = model.predict_logits(&store, &img.reshape(&[1, 1, n, n]), &[text])?;
            let mask = logits_to_mask(&logits, a.threshold);
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir).map_err(io(dir))?;
            }
            imageio::write_mask(out, &mask)?;
            println!("{}", json!({"out": out.display().to_string(), "foreground_pixels": mask.count()}));
        }
        (None, Some(data)) => {
            let out_dir = a.out_dir.as_ref().expect("clap");
            fs::create_dir_all(out_dir).map_err(io(out_dir))?;
            let samples = load_split(&data.join(&a.split))?;
            let masks = training::predict(&model, &store, &samples, a.threshold)?;
            for (s, m) in samples.iter().zip(&masks) {
                imageio::write_mask(&out_dir.join(format!("{}.png", s.id)), m)?;
            }
            println!("{}", json!({"out_dir": out_dir.display().to_string(), "count": masks.len()}));
        }
        _ => return Err(Error::Config("predict needs --image (with --report, --out) or --data (with --out-dir)".into())),
    }
    Ok(())
}

pub fn saliency(ckpt: &Path, image: &Path, report: &str, out_dir: &Path, stage: Option<usize>, threshold: f64) -> Result<()> {
    check_threshold(threshold)?;
    let (model, store) = Checkpoint::load(ckpt)?.build_model()?;
    let stages = model.decoder.num_stages();
    let stage = stage.unwrap_or(stages);
    if stage == 0 || stage > stages {
        return Err(Error::InvalidStage { stage, stages });
    }
    let img = load_image(&model, image)?;
    let text = compile_report(report)?;
    let maps = grad_cam_all(&model, &store, &img, &text, threshold)?;
    fs::create_dir_all(out_dir).map_err(io(out_dir))?;
    let mut entries = Vec::new();
    for m in &maps {
        let p = out_dir.join(format!("stage{}_heatmap.png", m.stage));
        write_heatmap(&p, m)?;
        entries.push(json!({
            "stage": m.stage,
            "height": m.height,
            "width": m.width,
            "zero": m.zero,
            "heatmap": p.display().to_string(),
        }));
    }
    let overlay = out_dir.join("overlay.png");
    write_overlay(&overlay, &img, &maps[stage - 1])?;
    println!(
        "{}",
        json!({"stages": entries, "overlay": overlay.display().to_string(), "overlay_stage": stage})
    );
    Ok(())
}

pub fn sweep(grid: &[String], max_cells: usize, args: &ConfigArgs) -> Result<()> {
    let base = load_config(args)?;
    let axes = parse_grid(grid)?;
    if let Some((k, _)) = axes.iter().find(|(k, _)| k.starts_with("data.")) {
        return Err(Error::Config(format!("sweep cannot vary {k}; generate separate datasets instead")));
    }
    let cells = expand_grid(&axes, max_cells)?;
    let mut configs = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut cfg = base.clone();
        for (k, v) in cell {
            cfg.set(k, v)?;
        }
        cfg.output_dir = base.output_dir.join(format!("cell{i:03}"));
        cfg.validate()?;
        configs.push(cfg);
    }
    let keys: Vec<&str> = axes.iter().map(|(k, _)| k.as_str()).collect();
    let mut table = format!("cell,{},fingerprint,best_round,val_dice,val_iou\n", keys.join(","));
    for (i, (cell, cfg)) in cells.iter().zip(&configs).enumerate() {
        eprintln!("cell {}/{}: {:?}", i + 1, cells.len(), cell);
        let outcome = run_training(cfg, true)?;
        let best_iou = outcome
            .history
            .iter()
            .find(|r| r.round as u64 == outcome.best.round)
            .and_then(|r| r.val)
            .map_or(String::new(), |v| v.1.to_string());
        let dice = finite(outcome.best.best_val_dice).map_or(String::new(), |d| d.to_string());
        let values: Vec<&str> = cell.iter().map(|(_, v)| v.as_str()).collect();
        table.push_str(&format!(
            "{i},{},{},{},{dice},{best_iou}\n",
            values.join(","),
            cfg.fingerprint(),
            outcome.best.round
        ));
    }
    write(&base.output_dir.join("sweep.csv"), &table)?;
    print!("{table}");
    Ok(())
}

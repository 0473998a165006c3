use std::fmt;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use drax::checkpoint::{load_checkpoint, save_checkpoint};
use drax::config::{DraxConfig, Settings};
use drax::data::{generate_range, load_dataset, write_dataset};
use drax::pipeline::{DraxModel, FeatureBundle};
use drax::trace::{with_summaries, write_records, TraceRecord};
use drax::train::{evaluate, train as run_training, EpochMetrics};
use drax::{AnchorAssignment, Error};
use serde_json::json;

use crate::Common;

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(String),
    Checkpoint(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Checkpoint(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Checkpoint(m) => write!(f, "checkpoint error: {m}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn config_err(e: impl fmt::Display) -> CliError {
    CliError::Config(e.to_string())
}

fn data_err(e: impl fmt::Display) -> CliError {
    CliError::Data(e.to_string())
}

fn ckpt_err(e: impl fmt::Display) -> CliError {
    CliError::Checkpoint(e.to_string())
}

/// Config file, then `--set` overrides, then `--seed`.
fn settings(c: &Common, seed_is_data: bool) -> CliResult<Settings> {
    let mut s = match &c.config {
        Some(p) => Settings::load(p).map_err(config_err)?,
        None => Settings::default(),
    };
    for kv in &c.overrides {
        s.apply_override(kv).map_err(config_err)?;
    }
    if let Some(seed) = c.seed {
        if seed_is_data {
            s.data.data_seed = seed;
        } else {
            s.model.seed = seed;
        }
    }
    s.validate().map_err(config_err)?;
    Ok(s)
}

fn out_dir(c: &Common) -> CliResult<PathBuf> {
    let dir = c.out.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&dir).map_err(data_err)?;
    Ok(dir)
}

fn load(path: &Path) -> CliResult<Vec<FeatureBundle>> {
    Ok(load_dataset(path).map_err(data_err)?.1)
}

/// `--data` if given, otherwise the synthetic training split from the settings.
fn training_data(c: &Common, s: &Settings) -> CliResult<Vec<FeatureBundle>> {
    match &c.data {
        Some(p) => load(p),
        None => {
            let spec = s.synthetic_spec();
            generate_range(&spec, 0, spec.samples).map_err(data_err)
        }
    }
}

/// `--eval-data` if given; with synthetic training data, the next
/// `samples / 2` indices of the same stream.
fn held_out_data(c: &Common, s: &Settings) -> CliResult<Option<Vec<FeatureBundle>>> {
    match (&c.eval_data, &c.data) {
        (Some(p), _) => load(p).map(Some),
        (None, Some(_)) => Ok(None),
        (None, None) => {
            let spec = s.synthetic_spec();
            let n = (spec.samples / 2).max(1);
            generate_range(&spec, spec.samples as u64, n).map_err(data_err).map(Some)
        }
    }
}

fn check_widths(model: &DraxModel, data: &[FeatureBundle]) -> CliResult<()> {
    for b in data {
        b.validate(&model.config).map_err(data_err)?;
    }
    Ok(())
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    File::create(path).map(BufWriter::new).map_err(data_err)
}

fn write_line(w: &mut impl Write, v: &serde_json::Value) -> CliResult<()> {
    writeln!(w, "{v}").map_err(data_err)
}

fn fit(model: &mut DraxModel, data: &[FeatureBundle], s: &Settings, log: &mut impl Write) -> CliResult<Vec<EpochMetrics>> {
    run_training(model, data, &s.train, |m| {
        let line = serde_json::to_string(m).map_err(|e| Error::Config(e.to_string()))?;
        writeln!(log, "{line}")?;
        Ok(())
    })
    .map_err(|e| match e {
        Error::Config(_) | Error::UnknownKey(_) => config_err(e),
        _ => data_err(e),
    })
}

pub fn train(c: &Common) -> CliResult<()> {
    let s = settings(c, false)?;
    let dir = out_dir(c)?;
    let data = training_data(c, &s)?;
    let mut model = DraxModel::new(s.model.clone()).map_err(config_err)?;
    check_widths(&model, &data)?;
    let mut log = create(&dir.join("metrics.jsonl"))?;
    let metrics = fit(&mut model, &data, &s, &mut log)?;
    log.flush().map_err(data_err)?;
    let ckpt = dir.join("checkpoint.drxc");
    save_checkpoint(&model, &ckpt).map_err(ckpt_err)?;
    let last = metrics.last().expect("final record");
    println!(
        "{}",
        json!({
            "record": "train",
            "epochs": last.epoch,
            "accuracy": last.accuracy,
            "loss": last.loss,
            "checkpoint": ckpt.display().to_string(),
        })
    );
    Ok(())
}

fn checkpoint_model(c: &Common) -> CliResult<DraxModel> {
    let path = c
        .checkpoint
        .as_ref()
        .ok_or_else(|| CliError::Checkpoint("--checkpoint is required".into()))?;
    load_checkpoint(path).map_err(ckpt_err)
}

pub fn eval(c: &Common) -> CliResult<()> {
    let model = checkpoint_model(c)?;
    let path = c.data.as_ref().ok_or_else(|| CliError::Data("--data is required".into()))?;
    let data = load(path)?;
    check_widths(&model, &data)?;
    let report = evaluate(&model, &data).map_err(data_err)?;
    let mut lines = Vec::with_capacity(report.predictions.len() + 1);
    for p in &report.predictions {
        lines.push(json!({
            "record": "prediction",
            "index": p.index,
            "label": p.label,
            "predicted": p.predicted,
            "probs": p.probs,
        }));
    }
    let summary = json!({
        "record": "summary",
        "samples": report.samples,
        "accuracy": report.accuracy,
        "loss": report.loss,
        "mask_density": report.mask_density,
        "fusion_density": report.fusion_density,
    });
    lines.push(summary.clone());
    if let Some(dir) = &c.out {
        std::fs::create_dir_all(dir).map_err(data_err)?;
        let mut w = create(&dir.join("eval.jsonl"))?;
        for l in &lines {
            write_line(&mut w, l)?;
        }
        w.flush().map_err(data_err)?;
    }
    println!("{summary}");
    Ok(())
}

pub fn gen_data(c: &Common) -> CliResult<()> {
    let s = settings(c, true)?;
    let dir = out_dir(c)?;
    let spec = s.synthetic_spec();
    let data = generate_range(&spec, 0, spec.samples).map_err(config_err)?;
    let manifest = write_dataset(&dir, &data, Some(&spec)).map_err(data_err)?;
    println!(
        "{}",
        json!({"record": "gen_data", "samples": data.len(), "manifest": manifest.display().to_string()})
    );
    Ok(())
}

/// Structural keys must agree with the checkpoint; masking keys may change.
fn reconfigure(model: &mut DraxModel, c: &Common) -> CliResult<()> {
    let mut cfg = model.config.clone();
    for kv in &c.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| config_err(format!("override `{kv}` is not KEY=VALUE")))?;
        if !cfg.set(k.trim(), v.trim()).map_err(config_err)? {
            return Err(config_err(format!("`{}` is not a model key", k.trim())));
        }
    }
    cfg.validate().map_err(config_err)?;
    let structural = |x: &DraxConfig| {
        (
            x.d,
            x.heads,
            x.layers,
            x.ffn_multiple,
            x.max_positions,
            [x.dim_appearance, x.dim_motion, x.dim_question, x.dim_answer],
        )
    };
    if structural(&cfg) != structural(&model.config) {
        return Err(config_err("overrides change the model structure stored in the checkpoint"));
    }
    model.config = cfg;
    Ok(())
}

pub fn inspect(c: &Common, sample: usize) -> CliResult<()> {
    let (mut model, data) = match &c.checkpoint {
        Some(_) => {
            let mut m = checkpoint_model(c)?;
            reconfigure(&mut m, c)?;
            // data keys still come from the config file; the model is the checkpoint's
            let mut s = settings(c, false)?;
            s.model = m.config.clone();
            let d = training_data(c, &s)?;
            (m, d)
        }
        None => {
            let s = settings(c, false)?;
            let d = training_data(c, &s)?;
            (DraxModel::new(s.model).map_err(config_err)?, d)
        }
    };
    model.config.masking = true;
    let bundle = data
        .get(sample)
        .ok_or_else(|| CliError::Data(format!("sample {sample} is out of range ({} samples)", data.len())))?;
    bundle.validate(&model.config).map_err(data_err)?;
    let mut ctx = model.default_ctx().tracing();
    let scores = model.score(&mut ctx, bundle).map_err(data_err)?;
    let records = with_summaries(ctx.take_trace());
    let dir = out_dir(c)?;
    let mut w = create(&dir.join("trace.jsonl"))?;
    write_records(&mut w, &records).map_err(data_err)?;
    w.flush().map_err(data_err)?;
    let summaries: Vec<_> = records
        .iter()
        .filter_map(|r| match r {
            TraceRecord::Summary(s) => Some(json!({
                "stage": s.stage, "layer": s.layer, "site": s.site.as_str(), "d_f": s.d_f, "density": s.density,
            })),
            _ => None,
        })
        .collect();
    println!(
        "{}",
        json!({"record": "inspect", "sample": sample, "label": bundle.label, "predicted": scores.predict(), "sites": summaries})
    );
    Ok(())
}

struct Variant {
    name: &'static str,
    anchors: AnchorAssignment,
    masking: bool,
    aligned: bool,
}

/// The four masking/fusion rows followed by the three anchor-direction rows.
fn variants() -> Vec<Variant> {
    let d = AnchorAssignment::DEFAULT;
    let mut v = vec![
        Variant { name: "full", anchors: d, masking: true, aligned: true },
        Variant { name: "no_aligned_fusion", anchors: d, masking: true, aligned: false },
        Variant { name: "no_distraction_masking", anchors: d, masking: false, aligned: true },
        Variant { name: "no_masking_no_aligned_fusion", anchors: d, masking: false, aligned: false },
    ];
    for (a, name) in AnchorAssignment::ablation_variants()
        .into_iter()
        .zip(["anchors_1", "anchors_2", "anchors_3"])
    {
        v.push(Variant { name, anchors: a, masking: true, aligned: true });
    }
    v
}

pub fn ablate(c: &Common) -> CliResult<()> {
    let s = settings(c, false)?;
    let dir = out_dir(c)?;
    let data = training_data(c, &s)?;
    let held = held_out_data(c, &s)?;
    let mut out = create(&dir.join("ablation.jsonl"))?;
    for v in variants() {
        let mut cfg = s.model.clone();
        cfg.anchors = v.anchors;
        cfg.aligned_fusion = v.aligned;
        if !v.masking {
            cfg = cfg.without_masking_factors();
        }
        let mut model = DraxModel::new(cfg).map_err(config_err)?;
        check_widths(&model, &data)?;
        let run = Settings {
            model: model.config.clone(),
            ..s.clone()
        };
        let metrics = fit(&mut model, &data, &run, &mut std::io::sink())?;
        let last = metrics.last().expect("final record");
        let eval_accuracy = match &held {
            Some(h) => Some(evaluate(&model, h).map_err(data_err)?.accuracy),
            None => None,
        };
        let rec = json!({
            "record": "ablation",
            "name": v.name,
            "anchors": v.anchors.to_string(),
            "distraction_masking": v.masking,
            "aligned_fusion": v.aligned,
            "epochs": last.epoch,
            "train_accuracy": last.accuracy,
            "eval_accuracy": eval_accuracy,
        });
        write_line(&mut out, &rec)?;
        println!("{rec}");
    }
    out.flush().map_err(data_err)?;
    Ok(())
}

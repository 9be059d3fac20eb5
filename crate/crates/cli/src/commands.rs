use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::json;
use testam_core::config::load_with_overrides;
use testam_core::data::window_blocks;
use testam_core::eval::{self, horizon_report, horizon_steps, predict_all, EXPERT_NAMES};
use testam_core::io::{generate_synthetic, load_bundle, load_csv, save_bundle};
use testam_core::training::{load_checkpoint, save_checkpoint, spec_hash, train_from, EpochRecord, TrainState};
use testam_core::{prepare_dataset, spec_for, Checkpoint, Error, GraphSignalSeries, ScenarioTags, SyntheticConfig, TrainConfig};

use crate::plots;
use crate::provenance::{config_document, Provenance};

pub const EXIT_CONFIG: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

pub struct ConfigSource {
    pub path: Option<PathBuf>,
    pub overrides: Vec<String>,
    pub seed: Option<u64>,
}

pub fn exit_code(err: &anyhow::Error) -> u8 {
    let numeric = err.chain().any(|c| {
        matches!(
            c.downcast_ref::<Error>(),
            Some(Error::Diverged { .. } | Error::EmptyQuantile)
        )
    });
    if numeric {
        EXIT_NUMERIC
    } else {
        EXIT_CONFIG
    }
}

/// Worker cap from `TESTAM_THREADS`; defaults to 1.
pub fn threads() -> Result<usize> {
    match std::env::var("TESTAM_THREADS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => bail!("TESTAM_THREADS must be a positive integer, got {v:?}"),
        },
        Err(_) => Ok(1),
    }
}

fn load_config<T>(src: &ConfigSource, base: Option<&T>) -> Result<T>
where
    T: DeserializeOwned + Serialize + Default,
{
    let text = match &src.path {
        Some(p) => {
            let raw = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            config_document(&raw).with_context(|| format!("parsing config {}", p.display()))?
        }
        None => serde_json::to_string(&base.map_or_else(|| serde_json::to_value(T::default()), serde_json::to_value)?)?,
    };
    let mut overrides = src.overrides.clone();
    if let Some(seed) = src.seed {
        overrides.push(format!("seed={seed}"));
    }
    let what = src.path.as_ref().map_or_else(|| "defaults".to_string(), |p| p.display().to_string());
    load_with_overrides(&text, &overrides).with_context(|| format!("config {what}"))
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating output directory {}", dir.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)?).with_context(|| format!("writing {}", path.display()))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("writing {}", path.display()))?,
    ))
}

/// Reads a `.csv` file or a binary bundle; only bundles carry tags.
fn load_data(path: &Path) -> Result<(GraphSignalSeries, Option<ScenarioTags>)> {
    let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
    let loaded = if is_csv {
        load_csv(path).map(|s| (s, None))
    } else {
        load_bundle(path)
    };
    loaded.with_context(|| format!("loading dataset {}", path.display()))
}

pub fn generate(src: &ConfigSource, out: &Path, threads: usize) -> Result<()> {
    let cfg: SyntheticConfig = load_config(src, None)?;
    let (series, network, tags) = generate_synthetic(&cfg)?;
    create_dir(out)?;
    save_bundle(&series, Some(&tags), out.join("data.tstm"))?;
    let edges: Vec<Vec<f64>> = (0..network.adjacency.rows())
        .map(|r| network.adjacency.row(r).to_vec())
        .collect();
    write_json(
        &out.join("network.json"),
        &json!({ "adjacency": edges, "positions": network.positions }),
    )?;
    let mut prov = Provenance::new("generate", threads);
    prov.config = Some(serde_json::to_value(&cfg)?);
    prov.seed = Some(cfg.seed);
    prov.outputs = vec!["data.tstm".into(), "network.json".into()];
    prov.write(out)?;
    log::info!(
        "generated {} steps x {} nodes into {}",
        series.len(),
        series.n_nodes(),
        out.display()
    );
    Ok(())
}

const HISTORY_COLUMNS: [&str; 14] = [
    "epoch",
    "step",
    "lr",
    "loss",
    "loss_reg",
    "loss_worst",
    "loss_best",
    "train_mae",
    "val_mae",
    "share_identity",
    "share_adaptive",
    "share_attention",
    "memory_grad_max",
    "seconds",
];

fn history_row(r: &EpochRecord) -> String {
    format!(
        "{},{},{:e},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.4},{:.4},{:.4},{:e},{:.3}",
        r.epoch,
        r.step,
        r.lr,
        r.loss.total,
        r.loss.reg,
        r.loss.worst,
        r.loss.best,
        r.train_mae,
        r.val_mae,
        r.selection_share[0],
        r.selection_share[1],
        r.selection_share[2],
        r.memory_grad_max,
        r.seconds
    )
}

pub fn train(src: &ConfigSource, data: &Path, out: &Path, resume: Option<&Path>, threads: usize) -> Result<()> {
    let ckpt = resume
        .map(|p| load_checkpoint(p).with_context(|| format!("loading checkpoint {}", p.display())))
        .transpose()?;
    let cfg: TrainConfig = load_config(src, ckpt.as_ref().and_then(|c| c.train.as_ref()))?;
    cfg.validate()?;
    let (series, _) = load_data(data)?;
    let prepared = prepare_dataset(&series, cfg.t_in, cfg.t_out, cfg.split, cfg.model.day_of_week)?;
    let (mut model, mut state) = match &ckpt {
        Some(c) => {
            let mut spec = spec_for(&cfg, &prepared, series.n_nodes());
            // the scaler belongs to the checkpoint, not to this fit
            spec.scaler = c.spec.scaler;
            c.check_compatible(&spec)?;
            let model = c.to_model()?;
            let state = TrainState::from_checkpoint(c, &model, &cfg);
            (model, state)
        }
        None => {
            let spec = spec_for(&cfg, &prepared, series.n_nodes());
            let model = testam_core::Testam::new(spec, cfg.seed)?;
            let state = TrainState::new(&model, &cfg);
            (model, state)
        }
    };
    let split = match &ckpt {
        Some(_) => window_blocks(&series, cfg.t_in, cfg.t_out, cfg.split, cfg.model.day_of_week, &model.spec.scaler)?,
        None => prepared.split,
    };
    create_dir(out)?;
    log::info!(
        "{} parameters, {} train / {} val windows, architecture {}",
        model.parameter_count(),
        split.train.len(),
        split.val.len(),
        &spec_hash(&model.spec)[..12]
    );

    let mut prov = Provenance::new("train", threads);
    prov.config = Some(serde_json::to_value(&cfg)?);
    prov.seed = Some(cfg.seed);
    prov.input("data", data)?;
    if let Some(p) = resume {
        prov.input("checkpoint", p)?;
    }
    write_json(
        &out.join("config.json"),
        &json!({
            "train": cfg,
            "spec": model.spec,
            "architecture_hash": spec_hash(&model.spec),
            "parameters": model.parameter_count(),
        }),
    )?;

    let mut history = create(&out.join("history.csv"))?;
    writeln!(history, "{}", HISTORY_COLUMNS.join(","))?;
    let mut records = Vec::new();
    let mut write_err = None;
    let result = train_from(&mut model, &split.train, &split.val, &cfg, &mut state, |r| {
        if let Err(e) = writeln!(history, "{}", history_row(r)).and_then(|_| history.flush()) {
            write_err.get_or_insert(e);
        }
        records.push(r.clone());
    });
    if let Some(e) = write_err {
        return Err(e).context("writing history.csv");
    }
    history.flush()?;
    plots::history(&out.join("history.svg"), &records)?;
    let hist = result?;

    let best = Checkpoint::from_model(&model, Some(&cfg), Some(&state.optimizer), state.step, state.epoch);
    save_checkpoint(out.join("best.ckpt"), &best)?;
    write_json(
        &out.join("summary.json"),
        &json!({
            "best_epoch": hist.best_epoch,
            "best_val_mae": hist.best_val_mae,
            "stopped_early": hist.stopped_early,
            "epochs_run": hist.epochs.len(),
            "step": state.step,
        }),
    )?;
    prov.outputs = ["best.ckpt", "history.csv", "history.svg", "config.json", "summary.json"]
        .map(String::from)
        .to_vec();
    prov.write(out)?;
    log::info!(
        "best validation MAE {:.4} at epoch {}",
        hist.best_val_mae.unwrap_or(f64::NAN),
        hist.best_epoch.unwrap_or(0)
    );
    Ok(())
}

struct Loaded {
    ckpt: Checkpoint,
    model: testam_core::Testam,
    cfg: TrainConfig,
    series: GraphSignalSeries,
    tags: Option<ScenarioTags>,
    test: Vec<testam_core::WindowedSample>,
}

fn load_for_eval(checkpoint: &Path, data: &Path) -> Result<Loaded> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading checkpoint {}", checkpoint.display()))?;
    let model = ckpt.to_model()?;
    let (series, tags) = load_data(data)?;
    if series.n_nodes() != model.spec.n_nodes {
        return Err(Error::NodeMismatch {
            model: model.spec.n_nodes,
            data: series.n_nodes(),
        }
        .into());
    }
    let cfg = ckpt.train.clone().unwrap_or_default();
    let spec = &model.spec;
    let test = window_blocks(&series, spec.t_in, spec.t_out, cfg.split, spec.model.day_of_week, &spec.scaler)?.test;
    Ok(Loaded {
        ckpt,
        model,
        cfg,
        series,
        tags,
        test,
    })
}

pub fn eval(checkpoint: &Path, data: &Path, out: &Path, threads: usize) -> Result<()> {
    let l = load_for_eval(checkpoint, data)?;
    let pred = predict_all(&l.model, &l.test, l.cfg.batch_size)?;
    let horizons = horizon_steps(l.series.interval_minutes(), l.model.spec.t_out);
    let report = horizon_report(&pred, &pred.y_hat, &horizons);
    create_dir(out)?;
    report.write_csv(create(&out.join("horizons.csv"))?)?;
    let mut outputs = vec!["horizons.csv".to_string()];
    let mut per_expert = serde_json::Map::new();
    for (name, y_hat) in EXPERT_NAMES.iter().zip(&pred.per_expert) {
        if let Some(y_hat) = y_hat {
            let r = horizon_report(&pred, y_hat, &horizons);
            let file = format!("horizons_{name}.csv");
            r.write_csv(create(&out.join(&file))?)?;
            outputs.push(file);
            per_expert.insert(name.to_string(), serde_json::to_value(r.average())?);
        }
    }
    write_json(
        &out.join("metrics.json"),
        &json!({
            "windows": l.test.len(),
            "horizons": report.rows,
            "average": report.average(),
            "per_expert_average": per_expert,
            "architecture_hash": spec_hash(&l.ckpt.spec),
        }),
    )?;
    outputs.push("metrics.json".into());
    let mut prov = Provenance::new("eval", threads);
    prov.input("checkpoint", checkpoint)?;
    prov.input("data", data)?;
    prov.outputs = outputs;
    prov.write(out)?;
    if let Some(m) = report.average() {
        log::info!("test MAE {:.4} RMSE {:.4} MAPE {:.2}%", m.mae, m.rmse, m.mape);
    }
    Ok(())
}

fn share_cells(s: Option<&[f64; 3]>) -> String {
    match s {
        Some(s) => s.map(|v| format!("{v:.4}")).join(","),
        None => ",,".into(),
    }
}

pub fn routes(checkpoint: &Path, data: &Path, out: &Path, threads: usize) -> Result<()> {
    let l = load_for_eval(checkpoint, data)?;
    if !l.model.gating_enabled() {
        log::warn!("checkpoint has no gate; every point is routed to the attention expert");
    }
    let pred = predict_all(&l.model, &l.test, l.cfg.batch_size)?;
    let report = eval::routing_report(&pred, &l.series, l.tags.as_ref())?;
    create_dir(out)?;
    write_json(&out.join("routes.json"), &report)?;
    let header = EXPERT_NAMES.join(",");

    let mut w = create(&out.join("routes_node.csv"))?;
    writeln!(w, "node,class,{header}")?;
    for n in &report.per_node {
        writeln!(w, "{},{},{}", n.node, n.class.as_deref().unwrap_or(""), share_cells(Some(&n.shares)))?;
    }
    w.flush()?;

    let mut w = create(&out.join("routes_hour.csv"))?;
    writeln!(w, "hour,{header}")?;
    for (h, s) in report.per_hour.iter().enumerate() {
        writeln!(w, "{h},{}", share_cells(s.as_ref()))?;
    }
    w.flush()?;

    let mut outputs = vec!["routes.json", "routes_node.csv", "routes_hour.csv"];
    if l.tags.is_some() {
        let mut w = create(&out.join("routes_class.csv"))?;
        writeln!(w, "group,{header}")?;
        for (class, s) in &report.per_class {
            writeln!(w, "{class},{}", share_cells(s.as_ref()))?;
        }
        writeln!(w, "event,{}", share_cells(report.event.as_ref()))?;
        writeln!(w, "non_event,{}", share_cells(report.non_event.as_ref()))?;
        w.flush()?;
        outputs.push("routes_class.csv");
    }
    plots::routes_by_hour(&out.join("routes_hour.svg"), &report)?;
    plots::routes_by_node(&out.join("routes_node.svg"), &report)?;
    outputs.extend(["routes_hour.svg", "routes_node.svg"]);

    let mut prov = Provenance::new("routes", threads);
    prov.input("checkpoint", checkpoint)?;
    prov.input("data", data)?;
    prov.outputs = outputs.into_iter().map(String::from).collect();
    prov.write(out)?;
    log::info!(
        "overall shares: {}",
        EXPERT_NAMES
            .iter()
            .zip(report.overall)
            .map(|(n, s)| format!("{n} {s:.3}"))
            .collect::<Vec<_>>()
            .join(", ")
    );
    Ok(())
}

//! Forecast metrics, per-horizon reports and routing statistics.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::data::{Batch, GraphSignalSeries, WindowedSample};
use crate::error::{Error, Result};
use crate::io::{NodeClass, ScenarioTags};
use crate::model::{Testam, N_EXPERTS};
use crate::tensor::Matrix;

pub const EXPERT_NAMES: [&str; N_EXPERTS] = ["identity", "adaptive", "attention"];

/// Masked error metrics. MAPE is a percentage.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
    /// Number of observed points.
    pub count: usize,
}

/// MAE, RMSE and MAPE over entries with `y != 0`; `None` if all are masked.
pub fn metrics(y: &[f64], y_hat: &[f64]) -> Option<Metrics> {
    assert_eq!(y.len(), y_hat.len(), "metrics length");
    let (mut abs, mut sq, mut pct, mut count) = (0.0, 0.0, 0.0, 0usize);
    for (&a, &b) in y.iter().zip(y_hat) {
        if a != 0.0 {
            let e = a - b;
            abs += e.abs();
            sq += e * e;
            pct += (e / a).abs();
            count += 1;
        }
    }
    (count > 0).then(|| {
        let n = count as f64;
        Metrics {
            mae: abs / n,
            rmse: (sq / n).sqrt(),
            mape: 100.0 * pct / n,
            count,
        }
    })
}

/// Model outputs for a list of samples, concatenated in sample order with
/// rows `(sample, t, n)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub t_out: usize,
    pub n_nodes: usize,
    /// Series index of the first target step of each sample.
    pub target_start: Vec<usize>,
    pub y: Vec<f64>,
    pub y_hat: Vec<f64>,
    pub per_expert: Vec<Option<Vec<f64>>>,
    pub selected: Vec<usize>,
    pub p: Option<Matrix>,
    pub gating_enabled: bool,
}

impl Predictions {
    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// `(sample, step, node)` of a flat row index.
    pub fn locate(&self, row: usize) -> (usize, usize, usize) {
        let per = self.t_out * self.n_nodes;
        (row / per, (row % per) / self.n_nodes, row % self.n_nodes)
    }
}

pub fn predict_all(model: &Testam, samples: &[WindowedSample], batch_size: usize) -> Result<Predictions> {
    let first = samples.first().ok_or_else(|| Error::EmptySplit("no samples to evaluate".into()))?;
    let mut out = Predictions {
        t_out: first.t_out,
        n_nodes: first.n_nodes,
        target_start: samples.iter().map(|s| s.start + s.t_in).collect(),
        y: Vec::new(),
        y_hat: Vec::new(),
        per_expert: vec![Some(Vec::new()); N_EXPERTS],
        selected: Vec::new(),
        p: None,
        gating_enabled: model.gating_enabled(),
    };
    let mut p_rows: Vec<f64> = Vec::new();
    for chunk in samples.chunks(batch_size.max(1)) {
        let refs: Vec<&WindowedSample> = chunk.iter().collect();
        let batch = Batch::from_samples(&refs)?;
        let b = model.predict(&batch)?;
        out.y.extend_from_slice(&batch.y);
        out.y_hat.extend_from_slice(&b.y_hat);
        out.selected.extend_from_slice(&b.selected);
        for (slot, pred) in out.per_expert.iter_mut().zip(&b.y_hat_per_expert) {
            match (slot.as_mut(), pred) {
                (Some(acc), Some(v)) => acc.extend_from_slice(v),
                _ => *slot = None,
            }
        }
        if let Some(p) = &b.p {
            p_rows.extend_from_slice(p.as_slice());
        }
    }
    if out.gating_enabled {
        let rows = out.y.len();
        out.p = Some(Matrix::from_vec(rows, N_EXPERTS, p_rows));
    }
    Ok(out)
}

/// Masked MAE of the final prediction over `samples`.
pub fn evaluate_mae(model: &Testam, samples: &[WindowedSample], batch_size: usize) -> Result<f64> {
    let p = predict_all(model, samples, batch_size)?;
    Ok(metrics(&p.y, &p.y_hat).map_or(0.0, |m| m.mae))
}

/// `(1-based step, lead time in minutes)` for the standard reporting
/// horizons: 10/30/60 minutes on 10-minute data, 15/30/60 otherwise. Lead
/// times that are not a whole number of steps or exceed `t_out` are skipped.
pub fn horizon_steps(interval_minutes: u32, t_out: usize) -> Vec<(usize, u32)> {
    let minutes: &[u32] = if interval_minutes == 10 { &[10, 30, 60] } else { &[15, 30, 60] };
    minutes
        .iter()
        .filter(|&&m| m % interval_minutes == 0)
        .map(|&m| ((m / interval_minutes) as usize, m))
        .filter(|&(s, _)| s >= 1 && s <= t_out)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonRow {
    /// `"15min"` style label, or `"average"` for all steps.
    pub horizon: String,
    pub step: Option<usize>,
    pub minutes: Option<u32>,
    pub metrics: Option<Metrics>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HorizonReport {
    pub rows: Vec<HorizonRow>,
}

/// Column header of [`HorizonReport::write_csv`].
pub const HORIZON_COLUMNS: [&str; 7] = ["horizon", "step", "minutes", "mae", "rmse", "mape", "count"];

impl HorizonReport {
    pub fn average(&self) -> Option<Metrics> {
        self.rows.iter().find(|r| r.step.is_none()).and_then(|r| r.metrics)
    }

    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "{}", HORIZON_COLUMNS.join(","))?;
        for r in &self.rows {
            let step = r.step.map(|s| s.to_string()).unwrap_or_default();
            let minutes = r.minutes.map(|m| m.to_string()).unwrap_or_default();
            match r.metrics {
                Some(m) => writeln!(
                    w,
                    "{},{},{},{:.4},{:.4},{:.2},{}",
                    r.horizon, step, minutes, m.mae, m.rmse, m.mape, m.count
                )?,
                None => writeln!(w, "{},{},{},,,,0", r.horizon, step, minutes)?,
            }
        }
        Ok(())
    }
}

/// Metrics at each `(step, minutes)` horizon plus the all-step average.
pub fn horizon_report(pred: &Predictions, y_hat: &[f64], horizons: &[(usize, u32)]) -> HorizonReport {
    let mut rows = Vec::new();
    for &(step, minutes) in horizons {
        let (ys, yh): (Vec<f64>, Vec<f64>) = (0..pred.len())
            .filter(|&r| pred.locate(r).1 + 1 == step)
            .map(|r| (pred.y[r], y_hat[r]))
            .unzip();
        rows.push(HorizonRow {
            horizon: format!("{minutes}min"),
            step: Some(step),
            minutes: Some(minutes),
            metrics: metrics(&ys, &yh),
        });
    }
    rows.push(HorizonRow {
        horizon: "average".into(),
        step: None,
        minutes: None,
        metrics: metrics(&pred.y, y_hat),
    });
    HorizonReport { rows }
}

pub type Shares = [f64; N_EXPERTS];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeShares {
    pub node: String,
    pub class: Option<String>,
    pub shares: Shares,
}

/// Expert selection shares. Every share vector sums to 1 over experts, or
/// is absent when its group is empty.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingReport {
    pub gating_enabled: bool,
    pub experts: Vec<String>,
    pub points: usize,
    pub overall: Shares,
    pub per_node: Vec<NodeShares>,
    /// Indexed by hour of day, 0..24.
    pub per_hour: Vec<Option<Shares>>,
    /// Keyed by node class; present only with scenario tags.
    pub per_class: BTreeMap<String, Option<Shares>>,
    pub event: Option<Shares>,
    pub non_event: Option<Shares>,
}

#[derive(Default, Clone, Copy)]
struct Tally([usize; N_EXPERTS]);

impl Tally {
    fn add(&mut self, e: usize) {
        self.0[e] += 1;
    }

    fn shares(&self) -> Option<Shares> {
        let n: usize = self.0.iter().sum();
        (n > 0).then(|| self.0.map(|c| c as f64 / n as f64))
    }
}

pub fn class_name(c: NodeClass) -> &'static str {
    match c {
        NodeClass::Connected => "connected",
        NodeClass::Isolated => "isolated",
    }
}

/// Aggregates the selected expert of every predicted point by node, hour
/// of day and, with tags, by node class and event state.
pub fn routing_report(pred: &Predictions, series: &GraphSignalSeries, tags: Option<&ScenarioTags>) -> Result<RoutingReport> {
    if series.n_nodes() != pred.n_nodes {
        return Err(Error::NodeMismatch {
            model: pred.n_nodes,
            data: series.n_nodes(),
        });
    }
    if let Some(t) = tags {
        if t.n_nodes() != pred.n_nodes {
            return Err(Error::NodeMismatch {
                model: pred.n_nodes,
                data: t.n_nodes(),
            });
        }
    }
    let mut overall = Tally::default();
    let mut node = vec![Tally::default(); pred.n_nodes];
    let mut hour = vec![Tally::default(); 24];
    let mut class: BTreeMap<&str, Tally> = BTreeMap::new();
    let (mut event, mut non_event) = (Tally::default(), Tally::default());
    for (r, &e) in pred.selected.iter().enumerate() {
        let (s, t, n) = pred.locate(r);
        let idx = pred.target_start[s] + t;
        overall.add(e);
        node[n].add(e);
        let h = (series.timestamps()[idx] % 86_400) / 3600;
        hour[h as usize].add(e);
        if let Some(tags) = tags {
            class.entry(class_name(tags.node_class[n])).or_default().add(e);
            if tags.is_event(idx, n) {
                event.add(e);
            } else {
                non_event.add(e);
            }
        }
    }
    Ok(RoutingReport {
        gating_enabled: pred.gating_enabled,
        experts: EXPERT_NAMES.iter().map(|s| s.to_string()).collect(),
        points: pred.selected.len(),
        overall: overall.shares().unwrap_or([0.0; N_EXPERTS]),
        per_node: node
            .iter()
            .enumerate()
            .map(|(n, t)| NodeShares {
                node: series.node_ids()[n].clone(),
                class: tags.map(|tg| class_name(tg.node_class[n]).to_string()),
                shares: t.shares().unwrap_or([0.0; N_EXPERTS]),
            })
            .collect(),
        per_hour: hour.iter().map(Tally::shares).collect(),
        per_class: if tags.is_some() {
            [NodeClass::Connected, NodeClass::Isolated]
                .iter()
                .map(|c| {
                    let name = class_name(*c);
                    (name.to_string(), class.get(name).and_then(Tally::shares))
                })
                .collect()
        } else {
            BTreeMap::new()
        },
        event: tags.and(event.shares()),
        non_event: tags.and(non_event.shares()),
    })
}

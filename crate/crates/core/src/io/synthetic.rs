//! Synthetic road networks with recurring rush-hour patterns, spatially
//! isolated roads and tagged sudden events.
//!
//! Every random draw comes from a ChaCha8 stream keyed by the seed and a
//! fixed stream id per purpose, so the output depends only on the config.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::data::GraphSignalSeries;
use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// 2024-01-01T00:00:00Z, a Monday.
pub const SYNTHETIC_EPOCH: u64 = 1_704_067_200;

const STREAM_TOPOLOGY: u64 = 1;
const STREAM_NODES: u64 = 2;
const STREAM_DISTURBANCE: u64 = 3;
const STREAM_EVENTS: u64 = 4;
const STREAM_NOISE: u64 = 5;

fn default_v_max() -> f64 {
    70.0
}
fn default_radius() -> f64 {
    0.45
}
fn default_diffusion() -> f64 {
    0.5
}
fn default_disturbance() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub n_nodes: usize,
    pub steps_per_day: usize,
    pub n_days: usize,
    pub n_isolated: usize,
    pub n_event_nodes: usize,
    /// Expected events per event node per day.
    pub event_rate: f64,
    pub seed: u64,
    /// Observation noise standard deviation.
    pub noise_std: f64,
    pub v_max: f64,
    /// Connection radius of the random geometric graph in the unit square.
    pub radius: f64,
    /// Weight of the neighbors' lagged speeds in a connected node's signal.
    pub diffusion: f64,
    /// Innovation standard deviation of the per-node AR(1) disturbance.
    pub disturbance_std: f64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            n_nodes: 8,
            steps_per_day: 288,
            n_days: 7,
            n_isolated: 2,
            n_event_nodes: 2,
            event_rate: 1.0,
            seed: 42,
            noise_std: 1.0,
            v_max: default_v_max(),
            radius: default_radius(),
            diffusion: default_diffusion(),
            disturbance_std: default_disturbance(),
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_nodes == 0 {
            return Err(Error::config("n_nodes", "must be at least 1"));
        }
        if self.steps_per_day == 0 || 1440 % self.steps_per_day != 0 {
            return Err(Error::config("steps_per_day", "must divide 1440 (whole-minute interval)"));
        }
        if self.n_days == 0 {
            return Err(Error::config("n_days", "must be at least 1"));
        }
        if self.n_isolated + self.n_event_nodes > self.n_nodes {
            return Err(Error::config(
                "n_isolated",
                format!(
                    "n_isolated + n_event_nodes = {} exceeds n_nodes = {}",
                    self.n_isolated + self.n_event_nodes,
                    self.n_nodes
                ),
            ));
        }
        if !(self.event_rate >= 0.0 && self.event_rate.is_finite()) {
            return Err(Error::config("event_rate", "must be finite and >= 0"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(Error::config("noise_std", "must be finite and >= 0"));
        }
        if !(self.v_max > 1.0 && self.v_max.is_finite()) {
            return Err(Error::config("v_max", "must be finite and > 1"));
        }
        if !(0.0..1.0).contains(&self.diffusion) {
            return Err(Error::config("diffusion", "must lie in [0, 1)"));
        }
        if !(self.radius > 0.0) {
            return Err(Error::config("radius", "must be positive"));
        }
        if !(self.disturbance_std >= 0.0 && self.disturbance_std.is_finite()) {
            return Err(Error::config("disturbance_std", "must be finite and >= 0"));
        }
        Ok(())
    }

    pub fn interval_minutes(&self) -> u32 {
        (1440 / self.steps_per_day) as u32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
#[repr(u8)]
pub enum NodeClass {
    Connected = 0,
    Isolated = 1,
}

/// Ground truth about a generated scenario.
#[derive(Clone, Debug, PartialEq)]
pub struct ScenarioTags {
    pub node_class: Vec<NodeClass>,
    /// Generated road network, `[N, N]` row-major, 1.0 marks an edge.
    pub adjacency: Vec<f32>,
    /// `[T, N]` row-major; true while a sudden event is active on the node.
    pub event_mask: Vec<bool>,
}

impl ScenarioTags {
    pub fn n_nodes(&self) -> usize {
        self.node_class.len()
    }

    pub fn is_event(&self, t: usize, n: usize) -> bool {
        self.event_mask[t * self.n_nodes() + n]
    }

    pub fn degree(&self, n: usize) -> usize {
        let nn = self.n_nodes();
        self.adjacency[n * nn..(n + 1) * nn].iter().filter(|&&a| a != 0.0).count()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoadNetwork {
    pub adjacency: Matrix,
    pub positions: Vec<(f64, f64)>,
}

fn rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// Raised-cosine bump of half-width `width` hours centred at `center`,
/// evaluated on the 24-hour circle.
fn bump(hour: f64, center: f64, width: f64) -> f64 {
    let mut d = (hour - center).abs();
    if d > 12.0 {
        d = 24.0 - d;
    }
    if d >= width {
        0.0
    } else {
        0.5 * (1.0 + (std::f64::consts::PI * d / width).cos())
    }
}

#[derive(Clone, Copy, Debug)]
enum Pattern {
    /// Morning and evening rush hours.
    Commute {
        free: f64,
        morning: (f64, f64),
        evening: (f64, f64),
    },
    /// A single congestion period at an unusual time.
    Offset { free: f64, peak: (f64, f64) },
}

impl Pattern {
    fn speed(&self, hour: f64) -> f64 {
        match *self {
            Pattern::Commute {
                free,
                morning,
                evening,
            } => free - morning.1 * bump(hour, morning.0, 2.0) - evening.1 * bump(hour, evening.0, 2.5),
            Pattern::Offset { free, peak } => free - peak.1 * bump(hour, peak.0, 3.0),
        }
    }
}

/// Generates a scenario. Deterministic for a given config.
pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<(GraphSignalSeries, RoadNetwork, ScenarioTags)> {
    cfg.validate()?;
    let n = cfg.n_nodes;
    let total = cfg.steps_per_day * cfg.n_days;

    // roles: first n_isolated of a shuffled order are isolated, the next
    // n_event_nodes carry events
    let mut topo = rng(cfg.seed, STREAM_TOPOLOGY);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut topo);
    let mut node_class = vec![NodeClass::Connected; n];
    for &i in &order[..cfg.n_isolated] {
        node_class[i] = NodeClass::Isolated;
    }
    let event_nodes: Vec<usize> = order[cfg.n_isolated..cfg.n_isolated + cfg.n_event_nodes].to_vec();

    let positions: Vec<(f64, f64)> = (0..n).map(|_| (topo.random::<f64>(), topo.random::<f64>())).collect();
    let connected: Vec<usize> = (0..n).filter(|&i| node_class[i] == NodeClass::Connected).collect();
    let dist = |a: usize, b: usize| {
        let (pa, pb) = (positions[a], positions[b]);
        ((pa.0 - pb.0).powi(2) + (pa.1 - pb.1).powi(2)).sqrt()
    };
    let mut adjacency = Matrix::zeros(n, n);
    for (k, &i) in connected.iter().enumerate() {
        for &j in &connected[k + 1..] {
            if dist(i, j) <= cfg.radius {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
    }
    // every connected node gets at least its nearest connected neighbor
    for &i in &connected {
        if adjacency.row(i).iter().all(|&a| a == 0.0) {
            if let Some(&j) = connected
                .iter()
                .filter(|&&j| j != i)
                .min_by(|&&a, &&b| dist(i, a).total_cmp(&dist(i, b)))
            {
                adjacency.set(i, j, 1.0);
                adjacency.set(j, i, 1.0);
            }
        }
    }

    let mut node_rng = rng(cfg.seed, STREAM_NODES);
    let vm = cfg.v_max;
    let patterns: Vec<Pattern> = (0..n)
        .map(|i| {
            let free = vm * node_rng.random_range(0.8..0.95);
            match node_class[i] {
                NodeClass::Connected => Pattern::Commute {
                    free,
                    morning: (node_rng.random_range(7.0..9.0), vm * node_rng.random_range(0.2..0.35)),
                    evening: (node_rng.random_range(16.5..18.5), vm * node_rng.random_range(0.15..0.3)),
                },
                NodeClass::Isolated => Pattern::Offset {
                    free,
                    peak: (node_rng.random_range(11.0..15.0), vm * node_rng.random_range(0.25..0.4)),
                },
            }
        })
        .collect();

    // events: Poisson count per event node, each a contiguous span of 1-3 hours
    let mut ev_rng = rng(cfg.seed, STREAM_EVENTS);
    let mut event_mask = vec![false; total * n];
    let mut drop_factor = vec![1.0f64; total * n];
    if cfg.event_rate > 0.0 {
        let poisson = Poisson::new(cfg.event_rate * cfg.n_days as f64).expect("positive rate");
        let min_len = (cfg.steps_per_day / 24).max(1);
        let max_len = (cfg.steps_per_day / 8).max(min_len + 1);
        for &node in &event_nodes {
            let count = poisson.sample(&mut ev_rng) as usize;
            for _ in 0..count {
                let len = ev_rng.random_range(min_len..max_len).min(total);
                let start = ev_rng.random_range(0..=total - len);
                let factor = 1.0 - ev_rng.random_range(0.4..0.7);
                for t in start..start + len {
                    event_mask[t * n + node] = true;
                    let f = &mut drop_factor[t * n + node];
                    *f = f.min(factor);
                }
            }
        }
    }

    // row-normalized neighbor weights for the diffusion term
    let weights: Vec<Vec<(usize, f64)>> = (0..n)
        .map(|i| {
            let nb: Vec<usize> = (0..n).filter(|&j| adjacency.get(i, j) != 0.0).collect();
            let w = 1.0 / nb.len().max(1) as f64;
            nb.into_iter().map(|j| (j, w)).collect()
        })
        .collect();

    let mut dist_rng = rng(cfg.seed, STREAM_DISTURBANCE);
    let mut noise_rng = rng(cfg.seed, STREAM_NOISE);
    let innov = Normal::new(0.0, cfg.disturbance_std.max(0.0)).expect("valid std");
    let noise = Normal::new(0.0, cfg.noise_std).expect("valid std");
    const AR: f64 = 0.95;
    let interval = cfg.interval_minutes();
    let mut disturbance = vec![0.0f64; n];
    let mut prev = vec![0.0f64; n];
    let mut values = vec![0.0f32; total * n];
    let mut timestamps = Vec::with_capacity(total);
    for t in 0..total {
        let ts = SYNTHETIC_EPOCH + t as u64 * u64::from(interval) * 60;
        timestamps.push(ts);
        let hour = (ts % 86_400) as f64 / 3600.0;
        let mut cur = vec![0.0f64; n];
        for i in 0..n {
            disturbance[i] = AR * disturbance[i] + innov.sample(&mut dist_rng);
            let own = (patterns[i].speed(hour) + disturbance[i]).clamp(0.0, vm);
            cur[i] = if node_class[i] == NodeClass::Connected && t > 0 && !weights[i].is_empty() {
                let nb: f64 = weights[i].iter().map(|&(j, w)| w * prev[j]).sum();
                (1.0 - cfg.diffusion) * own + cfg.diffusion * nb
            } else {
                own
            };
            cur[i] *= drop_factor[t * n + i];
        }
        for i in 0..n {
            let observed = cur[i] + if cfg.noise_std > 0.0 { noise.sample(&mut noise_rng) } else { 0.0 };
            // exact zero means "missing", keep generated readings positive
            values[t * n + i] = observed.clamp(1.0, vm) as f32;
        }
        prev = cur;
    }

    let node_ids = (0..n).map(|i| format!("road_{i:03}")).collect();
    let series = GraphSignalSeries::new(values, timestamps, node_ids, interval)?;
    let tags = ScenarioTags {
        node_class,
        adjacency: adjacency.as_slice().iter().map(|&a| a as f32).collect(),
        event_mask,
    };
    Ok((series, RoadNetwork { adjacency, positions }, tags))
}

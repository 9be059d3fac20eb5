//! Expert stacks, the memory-based gate and the assembled forecaster.

use serde::{Deserialize, Serialize};

use crate::attention::{Dims, ExpertLayer, LayerShape, SpatialKind};
use crate::config::{AblationConfig, GatingInput, ModelConfig};
use crate::data::{Batch, Scaler};
use crate::embedding::{InputProjection, TemporalEmbedding, Time2Vec, TimeTable};
use crate::error::{Error, Result};
use crate::graph::{broadcast_over_steps, GatingQuery, HyperNetwork, MetaNodeBank};
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamStore};
use crate::tape::Var;
use crate::tensor::Matrix;

/// Number of experts.
pub const N_EXPERTS: usize = 3;
/// Index of the attention expert; the sole expert when gating is ablated.
pub const ATTENTION_EXPERT: usize = 2;

/// Everything that fixes the parameter shapes of a model, including the
/// data-derived sizes and the normalization it was trained with.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub n_nodes: usize,
    pub channels: usize,
    pub steps_per_day: usize,
    pub t_in: usize,
    pub t_out: usize,
    pub model: ModelConfig,
    pub ablation: AblationConfig,
    pub scaler: Scaler,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.ablation.validate()?;
        if self.n_nodes == 0 {
            return Err(Error::config("n_nodes", "must be positive"));
        }
        if self.channels == 0 {
            return Err(Error::config("channels", "must be positive"));
        }
        if self.steps_per_day == 0 {
            return Err(Error::config("steps_per_day", "must be positive"));
        }
        if self.t_in == 0 || self.t_out == 0 {
            return Err(Error::config("t_in", "window lengths must be positive"));
        }
        if self.ablation.no_time_enhanced && self.t_in != self.t_out {
            return Err(Error::config("ablation.no_time_enhanced", "requires t_in == t_out"));
        }
        Ok(())
    }

    /// Spatial kind of each expert slot.
    pub fn kinds(&self) -> [SpatialKind; N_EXPERTS] {
        let first = if self.ablation.replaced_identity {
            SpatialKind::Adaptive
        } else {
            SpatialKind::Identity
        };
        [first, SpatialKind::Adaptive, SpatialKind::Attention]
    }
}

/// One full forecasting network with a fixed spatial modeling choice.
#[derive(Clone, Debug)]
pub struct ExpertStack {
    pub kind: SpatialKind,
    pub tim: TemporalEmbedding,
    /// Separate target-time embedding when it is not shared with the input.
    pub label_tim: Option<TemporalEmbedding>,
    pub projection: InputProjection,
    pub layers: Vec<ExpertLayer>,
    pub head: Linear,
    pub graph: Option<HyperNetwork>,
}

fn temporal_embedding(
    store: &mut ParamStore,
    init: &mut Init,
    name: &str,
    spec: &ModelSpec,
) -> Result<TemporalEmbedding> {
    let h = spec.model.tim_dim;
    Ok(if spec.ablation.no_tim {
        TemporalEmbedding::Table(TimeTable::new(store, init, name, h, spec.steps_per_day))
    } else {
        TemporalEmbedding::Time2Vec(Time2Vec::new(store, init, name, h, spec.steps_per_day)?)
    })
}

impl ExpertStack {
    fn new(store: &mut ParamStore, init: &mut Init, name: &str, kind: SpatialKind, spec: &ModelSpec) -> Result<Self> {
        let m = &spec.model;
        let tim = temporal_embedding(store, init, &format!("{name}.tim"), spec)?;
        let label_tim = if m.share_label_tim {
            None
        } else {
            Some(temporal_embedding(store, init, &format!("{name}.label_tim"), spec)?)
        };
        let projection = InputProjection::new(store, init, &format!("{name}.input"), spec.channels, m.tim_dim, m.d);
        let shape = LayerShape {
            d: m.d,
            heads: m.heads,
            h_ff: m.h_ff,
            tim_width: m.tim_dim,
            eps: m.layer_norm_eps,
            te_norm: m.te_norm,
            time_enhanced: !spec.ablation.no_time_enhanced,
        };
        let layers = (0..m.layers)
            .map(|l| ExpertLayer::new(store, init, &format!("{name}.layer{l}"), kind, shape))
            .collect();
        let head = Linear::new(store, init, &format!("{name}.head"), m.d, 1);
        let graph = (kind == SpatialKind::Adaptive)
            .then(|| HyperNetwork::new(store, init, &format!("{name}.graph"), spec.n_nodes, m.m, m.e));
        Ok(Self {
            kind,
            tim,
            label_tim,
            projection,
            layers,
            head,
            graph,
        })
    }

    /// Returns the de-normalized prediction `[B * t_out * N, 1]` and the last
    /// hidden state `[B * t_out * N, d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, batch: &Batch, bank: &MetaNodeBank, scaler: Scaler) -> Result<(Var, Var)> {
        let tim_in = self.tim.forward(ctx, &batch.tau_in);
        let tim_out = match &self.label_tim {
            Some(t) => t.forward(ctx, &batch.tau_out),
            None => self.tim.forward(ctx, &batch.tau_out),
        };
        let mut h = self.projection.forward(ctx, x, tim_in, batch.n_nodes)?;
        let adjacency = self.graph.as_ref().map(|g| g.adjacency(ctx, bank));
        let mut dims = Dims::new(batch.size, batch.t_in, batch.n_nodes);
        for layer in &self.layers {
            let (next, d) = layer.forward(ctx, h, dims, tim_out, batch.t_out, adjacency);
            h = next;
            dims = d;
        }
        let y = self.head.forward(ctx, h);
        let y = ctx.tape.affine(y, scaler.std, scaler.mean);
        Ok((y, h))
    }
}

/// Tape handles of one forward pass.
pub struct ForwardVars {
    /// `(expert index, prediction)` for every expert that was run.
    pub predictions: Vec<(usize, Var)>,
    pub hidden: Vec<(usize, Var)>,
    /// Routing probabilities `[B * t_out * N, E]`; absent without gating.
    pub p: Option<Var>,
    /// Probability-weighted prediction, only under the ensemble ablation.
    pub ensemble: Option<Var>,
    pub selected: Vec<usize>,
    /// Final prediction values, detached.
    pub y_hat: Vec<f64>,
    pub dims: Dims,
}

impl ForwardVars {
    pub fn prediction(&self, expert: usize) -> Option<Var> {
        self.predictions.iter().find(|(e, _)| *e == expert).map(|(_, v)| *v)
    }
}

/// Detached result of a forward pass. Rows are ordered `(b, t, n)` over the
/// output horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct ForecastBundle {
    pub y_hat_per_expert: Vec<Option<Vec<f64>>>,
    pub z_per_expert: Vec<Option<Matrix>>,
    pub p: Option<Matrix>,
    pub selected: Vec<usize>,
    pub y_hat: Vec<f64>,
    pub dims: Dims,
}

#[derive(Clone, Debug)]
pub struct Testam {
    pub spec: ModelSpec,
    pub store: ParamStore,
    pub bank: MetaNodeBank,
    pub gate: GatingQuery,
    pub experts: Vec<ExpertStack>,
}

impl Testam {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(seed);
        let m = &spec.model;
        let bank = MetaNodeBank::new(&mut store, &mut init, "memory", m.m, m.e);
        let gate = GatingQuery::new(&mut store, &mut init, "gate.query", spec.channels, m.e);
        let mut experts = Vec::with_capacity(N_EXPERTS);
        for (i, kind) in spec.kinds().into_iter().enumerate() {
            let name = format!("expert{i}");
            experts.push(ExpertStack::new(&mut store, &mut init, &name, kind, &spec)?);
        }
        Ok(Self {
            spec,
            store,
            bank,
            gate,
            experts,
        })
    }

    /// Rebuilds the model for `spec` and installs `params` by name.
    pub fn with_parameters(spec: ModelSpec, params: Vec<(String, Matrix)>) -> Result<Self> {
        let mut model = Self::new(spec, 0)?;
        if params.len() != model.store.len() {
            return Err(Error::Shape(format!(
                "parameter count differs: file has {}, model expects {}",
                params.len(),
                model.store.len()
            )));
        }
        for (name, value) in params {
            let id = model
                .store
                .id(&name)
                .ok_or_else(|| Error::Shape(format!("unknown parameter `{name}`")))?;
            let slot = model.store.get_mut(id);
            if slot.shape() != value.shape() {
                return Err(Error::Shape(format!(
                    "parameter `{name}` is {:?}, expected {:?}",
                    value.shape(),
                    slot.shape()
                )));
            }
            *slot = value;
        }
        Ok(model)
    }

    pub fn parameter_count(&self) -> usize {
        self.store.count()
    }

    pub fn gating_enabled(&self) -> bool {
        !self.spec.ablation.no_gating
    }

    fn check_batch(&self, batch: &Batch) -> Result<()> {
        let s = &self.spec;
        if batch.n_nodes != s.n_nodes {
            return Err(Error::NodeMismatch {
                model: s.n_nodes,
                data: batch.n_nodes,
            });
        }
        if batch.channels() != s.channels || batch.t_in != s.t_in || batch.t_out != s.t_out {
            return Err(Error::Shape(format!(
                "batch has C={}, t_in={}, t_out={}; model expects C={}, t_in={}, t_out={}",
                batch.channels(),
                batch.t_in,
                batch.t_out,
                s.channels,
                s.t_in,
                s.t_out
            )));
        }
        Ok(())
    }

    /// Gate read-out `[B * N, e]` for each node of each batch item.
    pub fn memory_readout(&self, ctx: &mut Ctx, batch: &Batch) -> Var {
        let feats = match self.spec.model.gating_input {
            GatingInput::Last => batch.last_step_features(),
            GatingInput::Mean => batch.mean_features(),
        };
        let feats = ctx.constant(feats);
        self.gate.query(ctx, feats, &self.bank).1
    }

    pub fn forward(&self, ctx: &mut Ctx, batch: &Batch) -> Result<ForwardVars> {
        self.check_batch(batch)?;
        let dims = Dims::new(batch.size, batch.t_out, batch.n_nodes);
        let x = ctx.constant(batch.x.clone());
        let scaler = self.spec.scaler;
        let run: Vec<usize> = if self.gating_enabled() {
            (0..N_EXPERTS).collect()
        } else {
            vec![ATTENTION_EXPERT]
        };
        let mut predictions = Vec::new();
        let mut hidden = Vec::new();
        for &e in &run {
            let (y, z) = self.experts[e].forward(ctx, x, batch, &self.bank, scaler)?;
            predictions.push((e, y));
            hidden.push((e, z));
        }
        if !self.gating_enabled() {
            let y_hat = ctx.value(predictions[0].1).as_slice().to_vec();
            return Ok(ForwardVars {
                predictions,
                hidden,
                p: None,
                ensemble: None,
                selected: vec![ATTENTION_EXPERT; dims.rows()],
                y_hat,
                dims,
            });
        }

        let o = self.memory_readout(ctx, batch);
        let o = broadcast_over_steps(ctx, o, batch.size, batch.t_out, batch.n_nodes);
        let scale = 1.0 / (self.spec.model.d as f64).sqrt();
        let scores: Vec<Var> = hidden
            .iter()
            .map(|&(_, z)| {
                let s = ctx.tape.row_dot(z, o);
                ctx.tape.scale(s, scale)
            })
            .collect();
        let logits = ctx.tape.concat_cols(&scores);
        let p = ctx.tape.row_softmax(logits);
        let selected = ctx.value(p).argmax_rows();

        let (ensemble, y_hat) = if self.spec.ablation.ensemble {
            let mut acc: Option<Var> = None;
            for &(e, y) in &predictions {
                let pe = ctx.tape.slice_cols(p, e, 1);
                let term = ctx.tape.mul(pe, y);
                acc = Some(match acc {
                    Some(a) => ctx.tape.add(a, term),
                    None => term,
                });
            }
            let ens = acc.expect("at least one expert");
            (Some(ens), ctx.value(ens).as_slice().to_vec())
        } else {
            let y_hat = selected
                .iter()
                .enumerate()
                .map(|(r, &e)| ctx.value(predictions[e].1).as_slice()[r])
                .collect();
            (None, y_hat)
        };
        Ok(ForwardVars {
            predictions,
            hidden,
            p: Some(p),
            ensemble,
            selected,
            y_hat,
            dims,
        })
    }

    /// Inference without dropout.
    pub fn predict(&self, batch: &Batch) -> Result<ForecastBundle> {
        let mut ctx = Ctx::eval(&self.store);
        let fv = self.forward(&mut ctx, batch)?;
        let mut y_hat_per_expert = vec![None; N_EXPERTS];
        let mut z_per_expert = vec![None; N_EXPERTS];
        for &(e, y) in &fv.predictions {
            y_hat_per_expert[e] = Some(ctx.value(y).as_slice().to_vec());
        }
        for &(e, z) in &fv.hidden {
            z_per_expert[e] = Some(ctx.value(z).clone());
        }
        Ok(ForecastBundle {
            y_hat_per_expert,
            z_per_expert,
            p: fv.p.map(|p| ctx.value(p).clone()),
            selected: fv.selected,
            y_hat: fv.y_hat,
            dims: fv.dims,
        })
    }
}

/// `softmax_e(<z_e, o> / sqrt(d))` for each row, evaluated directly.
pub fn routing_probabilities(z: &[&Matrix], o: &Matrix) -> Matrix {
    let rows = o.rows();
    let d = o.cols() as f64;
    let mut p = Matrix::zeros(rows, z.len());
    for r in 0..rows {
        let row = p.row_mut(r);
        for (e, ze) in z.iter().enumerate() {
            row[e] = ze.row(r).iter().zip(o.row(r)).map(|(a, b)| a * b).sum::<f64>() / d.sqrt();
        }
        crate::tape::softmax_in_place(row);
    }
    p
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::data::WindowedSample;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_spec(n_nodes: usize, t_in: usize, t_out: usize) -> ModelSpec {
        ModelSpec {
            n_nodes,
            channels: 2,
            steps_per_day: 96,
            t_in,
            t_out,
            model: ModelConfig {
                d: 8,
                e: 8,
                m: 4,
                layers: 2,
                heads: 2,
                h_ff: 16,
                tim_dim: 4,
                dropout: 0.0,
                ..ModelConfig::default()
            },
            ablation: AblationConfig::default(),
            scaler: Scaler { mean: 50.0, std: 10.0 },
        }
    }

    pub(crate) fn random_batch(spec: &ModelSpec, size: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = spec.n_nodes;
        let samples: Vec<WindowedSample> = (0..size)
            .map(|s| {
                let start = rng.random_range(0..spec.steps_per_day);
                WindowedSample {
                    start,
                    t_in: spec.t_in,
                    t_out: spec.t_out,
                    n_nodes: n,
                    channels: spec.channels,
                    x: (0..spec.t_in * n)
                        .flat_map(|i| {
                            let tau = (start + i / n) % spec.steps_per_day;
                            [rng.random_range(-2.0..2.0), tau as f64 / spec.steps_per_day as f64]
                        })
                        .collect(),
                    y: (0..spec.t_out * n)
                        .map(|i| if (i + s) % 7 == 3 { 0.0 } else { rng.random_range(20.0..70.0) })
                        .collect(),
                    tau_in: (0..spec.t_in).map(|t| (start + t) % spec.steps_per_day).collect(),
                    tau_out: (0..spec.t_out).map(|t| (start + spec.t_in + t) % spec.steps_per_day).collect(),
                }
            })
            .collect();
        let refs: Vec<&WindowedSample> = samples.iter().collect();
        Batch::from_samples(&refs).unwrap()
    }

    #[test]
    fn bundle_invariants() {
        let spec = tiny_spec(3, 4, 5);
        let model = Testam::new(spec.clone(), 1).unwrap();
        let batch = random_batch(&spec, 2, 2);
        let b = model.predict(&batch).unwrap();
        let p = b.p.as_ref().unwrap();
        assert_eq!(p.shape(), (2 * 5 * 3, 3));
        for r in 0..p.rows() {
            assert!((p.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            let e = b.selected[r];
            assert_eq!(b.y_hat[r].to_bits(), b.y_hat_per_expert[e].as_ref().unwrap()[r].to_bits());
        }
        assert_eq!(b.selected, p.argmax_rows());
    }

    #[test]
    fn tape_routing_matches_plain() {
        let spec = tiny_spec(2, 3, 3);
        let model = Testam::new(spec.clone(), 4).unwrap();
        let batch = random_batch(&spec, 2, 5);
        let mut ctx = Ctx::eval(&model.store);
        let fv = model.forward(&mut ctx, &batch).unwrap();
        let o = model.memory_readout(&mut ctx, &batch);
        let o = broadcast_over_steps(&mut ctx, o, 2, 3, 2);
        let z: Vec<&Matrix> = fv.hidden.iter().map(|(_, z)| ctx.value(*z)).collect();
        let want = routing_probabilities(&z, ctx.value(o));
        assert!(want.max_abs_diff(ctx.value(fv.p.unwrap())) < 1e-12);
    }

    #[test]
    fn identical_hidden_states_route_uniformly() {
        let z = Matrix::from_rows(&[&[0.3, 1.0], &[-2.0, 0.5]]);
        let o = Matrix::from_rows(&[&[1.0, 2.0], &[0.1, 0.1]]);
        let p = routing_probabilities(&[&z, &z, &z], &o);
        assert!(p.as_slice().iter().all(|v| (v - 1.0 / 3.0).abs() < 1e-12));
    }

    #[test]
    fn aligned_expert_dominates() {
        let o = Matrix::from_rows(&[&[0.6, 0.8]]);
        let z1 = o.map(|v| v * 20.0);
        let z2 = Matrix::from_rows(&[&[0.8, -0.6]]);
        let p = routing_probabilities(&[&z1, &z2, &z2], &o);
        assert!(p.get(0, 0) > 0.999);
    }

    #[test]
    fn no_gating_uses_attention_expert_only() {
        let mut spec = tiny_spec(3, 4, 4);
        spec.ablation.no_gating = true;
        let model = Testam::new(spec.clone(), 1).unwrap();
        let full_params = Testam::new(tiny_spec(3, 4, 4), 1).unwrap().parameter_count();
        assert_eq!(model.parameter_count(), full_params);
        let b = model.predict(&random_batch(&spec, 2, 3)).unwrap();
        assert!(b.p.is_none());
        assert_eq!(&b.y_hat, b.y_hat_per_expert[ATTENTION_EXPERT].as_ref().unwrap());
        assert!(b.y_hat_per_expert[0].is_none());
    }

    #[test]
    fn replaced_identity_has_two_adaptive_experts() {
        let mut spec = tiny_spec(3, 4, 4);
        spec.ablation.replaced_identity = true;
        let model = Testam::new(spec, 1).unwrap();
        assert_eq!(model.experts[0].kind, SpatialKind::Adaptive);
        assert_eq!(model.experts[1].kind, SpatialKind::Adaptive);
        assert!(model.experts[0].graph.is_some());
    }

    #[test]
    fn ensemble_weights_the_experts() {
        let mut spec = tiny_spec(2, 3, 3);
        spec.ablation.ensemble = true;
        let model = Testam::new(spec.clone(), 8).unwrap();
        let b = model.predict(&random_batch(&spec, 1, 3)).unwrap();
        let p = b.p.unwrap();
        for r in 0..b.y_hat.len() {
            let want: f64 = (0..3).map(|e| p.get(r, e) * b.y_hat_per_expert[e].as_ref().unwrap()[r]).sum();
            assert!((b.y_hat[r] - want).abs() < 1e-9);
        }
    }

    #[test]
    fn identity_expert_ignores_other_nodes() {
        let spec = tiny_spec(3, 3, 3);
        let model = Testam::new(spec.clone(), 2).unwrap();
        let batch = random_batch(&spec, 1, 1);
        let mut other = batch.clone();
        for t in 0..3 {
            other.x.set(t * 3 + 1, 0, 5.0);
            other.x.set(t * 3 + 2, 0, -5.0);
        }
        let a = model.predict(&batch).unwrap();
        let b = model.predict(&other).unwrap();
        let (ya, yb) = (a.y_hat_per_expert[0].as_ref().unwrap(), b.y_hat_per_expert[0].as_ref().unwrap());
        for t in 0..3 {
            assert_eq!(ya[t * 3], yb[t * 3]);
        }
        // the attention expert does mix nodes
        let (aa, ab) = (a.y_hat_per_expert[2].as_ref().unwrap(), b.y_hat_per_expert[2].as_ref().unwrap());
        assert!((0..3).any(|t| aa[t * 3] != ab[t * 3]));
    }

    #[test]
    fn node_mismatch_is_reported() {
        let model = Testam::new(tiny_spec(3, 3, 3), 2).unwrap();
        let batch = random_batch(&tiny_spec(4, 3, 3), 1, 1);
        let err = model.predict(&batch).unwrap_err().to_string();
        assert!(err.contains('3') && err.contains('4'), "{err}");
    }

    #[test]
    fn parameter_count_at_reference_size() {
        let spec = ModelSpec {
            n_nodes: 207,
            channels: 2,
            steps_per_day: 288,
            t_in: 12,
            t_out: 12,
            model: ModelConfig::default(),
            ablation: AblationConfig::default(),
            scaler: Scaler { mean: 0.0, std: 1.0 },
        };
        let count = Testam::new(spec, 0).unwrap().parameter_count();
        assert!(count < 300_000, "{count}");
    }
}

//! Multi-head attention sublayers and the composite expert layer.
//!
//! Hidden states of a batch are stored as `[B * T * N, d]` with row index
//! `(b * T + t) * N + n`. Every attention variant is a grouped call to
//! [`Tape::attention`](crate::tape::Tape::attention) whose [`AttnLayout`]
//! selects the rows that attend to each other.

use std::sync::Arc;

use crate::config::TimeEnhancedNorm;
use crate::nn::{ChannelAffine, FeedForward, LayerNorm, Linear};
use crate::params::{Ctx, Init, ParamStore};
use crate::tape::{AttnLayout, AttnNorm, Var};

/// Batch geometry of a hidden-state matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Dims {
    pub batch: usize,
    pub steps: usize,
    pub nodes: usize,
}

impl Dims {
    pub fn new(batch: usize, steps: usize, nodes: usize) -> Self {
        Self { batch, steps, nodes }
    }

    pub fn rows(&self) -> usize {
        self.batch * self.steps * self.nodes
    }

    pub fn row(&self, b: usize, t: usize, n: usize) -> usize {
        (b * self.steps + t) * self.nodes + n
    }

    pub fn with_steps(&self, steps: usize) -> Self {
        Self { steps, ..*self }
    }
}

/// One group: every query attends to every key.
pub fn dense_layout(q_len: usize, k_len: usize) -> AttnLayout {
    AttnLayout {
        groups: 1,
        q_len,
        k_len,
        q_rows: (0..q_len).collect(),
        k_rows: (0..k_len).collect(),
        out_rows: (0..q_len).collect(),
        out_count: q_len,
    }
}

/// Self-attention across time steps, independently for every node.
pub fn temporal_layout(dims: Dims) -> AttnLayout {
    let groups = (0..dims.batch)
        .flat_map(|b| (0..dims.nodes).map(move |n| (0..dims.steps).map(|t| dims.row(b, t, n)).collect()))
        .collect();
    AttnLayout::self_attention(groups, dims.rows())
}

/// Self-attention across all nodes, independently for every time step.
pub fn spatial_layout(dims: Dims) -> AttnLayout {
    let groups = (0..dims.batch)
        .flat_map(|b| (0..dims.steps).map(move |t| (0..dims.nodes).map(|n| dims.row(b, t, n)).collect()))
        .collect();
    AttnLayout::self_attention(groups, dims.rows())
}

/// Target-step queries against source-step keys for every node. Queries
/// index a `[B * t_out, .]` matrix shared by all nodes.
pub fn time_enhanced_layout(src: Dims, t_out: usize) -> AttnLayout {
    let out = src.with_steps(t_out);
    let mut q_rows = Vec::new();
    let mut k_rows = Vec::new();
    let mut out_rows = Vec::new();
    for b in 0..src.batch {
        for n in 0..src.nodes {
            for j in 0..t_out {
                q_rows.push(b * t_out + j);
                out_rows.push(out.row(b, j, n));
            }
            for i in 0..src.steps {
                k_rows.push(src.row(b, i, n));
            }
        }
    }
    AttnLayout {
        groups: src.batch * src.nodes,
        q_len: t_out,
        k_len: src.steps,
        q_rows,
        k_rows,
        out_rows,
        out_count: out.rows(),
    }
}

#[derive(Clone, Debug)]
pub struct MultiHead {
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
}

impl MultiHead {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, heads: usize) -> Self {
        Self::with_query_width(store, init, name, d, d, heads)
    }

    fn with_query_width(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        q_width: usize,
        d: usize,
        heads: usize,
    ) -> Self {
        assert_eq!(d % heads, 0, "d = {d} not divisible by {heads} heads");
        Self {
            query: Linear::new(store, init, &format!("{name}.query"), q_width, d),
            key: Linear::new(store, init, &format!("{name}.key"), d, d),
            value: Linear::new(store, init, &format!("{name}.value"), d, d),
            output: Linear::new(store, init, &format!("{name}.output"), d, d),
            heads,
        }
    }

    /// Projects queries from `q_src` and keys/values from `kv_src`, attends
    /// under `layout`, and applies the output projection.
    pub fn attend(&self, ctx: &mut Ctx, q_src: Var, kv_src: Var, layout: Arc<AttnLayout>, norm: AttnNorm) -> Var {
        let q = self.query.forward(ctx, q_src);
        let k = self.key.forward(ctx, kv_src);
        let v = self.value.forward(ctx, kv_src);
        let a = ctx.tape.attention(q, k, v, layout, self.heads, norm);
        self.output.forward(ctx, a)
    }

    pub fn self_attend(&self, ctx: &mut Ctx, x: Var, layout: Arc<AttnLayout>) -> Var {
        self.attend(ctx, x, x, layout, AttnNorm::OverKeys)
    }
}

/// Cross attention from the input horizon to the output horizon. Source
/// hidden states are scored against embeddings of the target times.
#[derive(Clone, Debug)]
pub struct TimeEnhanced {
    /// Source projection (`d -> d`).
    pub source: Linear,
    /// Target-time projection (`h -> d`).
    pub target: Linear,
    pub value: Linear,
    pub output: Linear,
    pub heads: usize,
    pub norm: TimeEnhancedNorm,
}

impl TimeEnhanced {
    pub fn new(
        store: &mut ParamStore,
        init: &mut Init,
        name: &str,
        d: usize,
        tim_width: usize,
        heads: usize,
        norm: TimeEnhancedNorm,
    ) -> Self {
        Self {
            source: Linear::new(store, init, &format!("{name}.source"), d, d),
            target: Linear::new(store, init, &format!("{name}.target"), tim_width, d),
            value: Linear::new(store, init, &format!("{name}.value"), d, d),
            output: Linear::new(store, init, &format!("{name}.output"), d, d),
            heads,
            norm,
        }
    }

    /// `h` is `[B * T_src * N, d]`, `tim_out` is `[B * t_out, h]`; returns
    /// `[B * t_out * N, d]`.
    pub fn forward(&self, ctx: &mut Ctx, h: Var, src: Dims, tim_out: Var, t_out: usize) -> Var {
        let layout = Arc::new(time_enhanced_layout(src, t_out));
        let targets = self.target.forward(ctx, tim_out);
        let sources = self.source.forward(ctx, h);
        let values = self.value.forward(ctx, h);
        let norm = match self.norm {
            TimeEnhancedNorm::Paper => AttnNorm::OverQueries,
            TimeEnhancedNorm::Cross => AttnNorm::OverKeys,
        };
        let a = ctx.tape.attention(targets, sources, values, layout, self.heads, norm);
        self.output.forward(ctx, a)
    }
}

/// Spatial modeling choice; the only difference between expert kinds.
#[derive(Clone, Debug)]
pub enum Spatial {
    /// Per-node channel affine; no information crosses nodes.
    Identity(ChannelAffine),
    /// One-hop propagation over a learned adjacency supplied per call.
    Adaptive(Linear),
    /// Unrestricted attention over all nodes.
    Attention(MultiHead),
}

impl Spatial {
    pub fn forward(&self, ctx: &mut Ctx, h: Var, dims: Dims, adjacency: Option<Var>) -> Var {
        match self {
            Spatial::Identity(aff) => aff.forward(ctx, h),
            Spatial::Adaptive(lin) => {
                let adj = adjacency.expect("adaptive spatial layer needs an adjacency");
                crate::graph::graph_convolution(ctx, h, adj, lin)
            }
            Spatial::Attention(mha) => mha.self_attend(ctx, h, Arc::new(spatial_layout(dims))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SpatialKind {
    Identity,
    Adaptive,
    Attention,
}

/// Replaces time-enhanced attention when that component is ablated.
#[derive(Clone, Debug)]
pub enum HorizonMap {
    TimeEnhanced(TimeEnhanced),
    Temporal(MultiHead),
}

/// Shape hyper-parameters of one expert layer.
#[derive(Clone, Copy, Debug)]
pub struct LayerShape {
    pub d: usize,
    pub heads: usize,
    pub h_ff: usize,
    pub tim_width: usize,
    pub eps: f64,
    pub te_norm: TimeEnhancedNorm,
    pub time_enhanced: bool,
}

/// Temporal attention, spatial modeling, horizon mapping and a feed-forward
/// network, each as `LayerNorm(x + dropout(sublayer(x)))`.
#[derive(Clone, Debug)]
pub struct ExpertLayer {
    pub temporal: MultiHead,
    pub norm1: LayerNorm,
    pub spatial: Spatial,
    pub norm2: LayerNorm,
    pub horizon: HorizonMap,
    pub norm3: LayerNorm,
    pub ffn: FeedForward,
    pub norm4: LayerNorm,
}

impl ExpertLayer {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, kind: SpatialKind, s: LayerShape) -> Self {
        let spatial = match kind {
            SpatialKind::Identity => Spatial::Identity(ChannelAffine::new(store, &format!("{name}.spatial"), s.d)),
            SpatialKind::Adaptive => Spatial::Adaptive(Linear::new(store, init, &format!("{name}.spatial"), s.d, s.d)),
            SpatialKind::Attention => Spatial::Attention(MultiHead::new(store, init, &format!("{name}.spatial"), s.d, s.heads)),
        };
        let horizon = if s.time_enhanced {
            HorizonMap::TimeEnhanced(TimeEnhanced::new(
                store,
                init,
                &format!("{name}.time_enhanced"),
                s.d,
                s.tim_width,
                s.heads,
                s.te_norm,
            ))
        } else {
            HorizonMap::Temporal(MultiHead::new(store, init, &format!("{name}.temporal2"), s.d, s.heads))
        };
        Self {
            temporal: MultiHead::new(store, init, &format!("{name}.temporal"), s.d, s.heads),
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), s.d, s.eps),
            spatial,
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), s.d, s.eps),
            horizon,
            norm3: LayerNorm::new(store, &format!("{name}.norm3"), s.d, s.eps),
            ffn: FeedForward::new(store, init, &format!("{name}.ffn"), s.d, s.h_ff),
            norm4: LayerNorm::new(store, &format!("{name}.norm4"), s.d, s.eps),
        }
    }

    /// Maps `[B * T_src * N, d]` to `[B * t_out * N, d]`.
    pub fn forward(
        &self,
        ctx: &mut Ctx,
        h: Var,
        dims: Dims,
        tim_out: Var,
        t_out: usize,
        adjacency: Option<Var>,
    ) -> (Var, Dims) {
        let a = self.temporal.self_attend(ctx, h, Arc::new(temporal_layout(dims)));
        let h = residual_norm(ctx, &self.norm1, Some(h), a);

        let s = self.spatial.forward(ctx, h, dims, adjacency);
        let h = residual_norm(ctx, &self.norm2, Some(h), s);

        let (m, out_dims) = match &self.horizon {
            HorizonMap::TimeEnhanced(te) => (te.forward(ctx, h, dims, tim_out, t_out), dims.with_steps(t_out)),
            HorizonMap::Temporal(mha) => {
                assert_eq!(dims.steps, t_out, "temporal attention cannot change the horizon length");
                (mha.self_attend(ctx, h, Arc::new(temporal_layout(dims))), dims)
            }
        };
        let skip = (dims.steps == t_out).then_some(h);
        let h = residual_norm(ctx, &self.norm3, skip, m);

        let f = self.ffn.forward(ctx, h);
        let h = residual_norm(ctx, &self.norm4, Some(h), f);
        (h, out_dims)
    }
}

fn residual_norm(ctx: &mut Ctx, norm: &LayerNorm, skip: Option<Var>, sub: Var) -> Var {
    let sub = ctx.dropout(sub);
    let x = match skip {
        Some(s) => ctx.tape.add(s, sub),
        None => sub,
    };
    norm.forward(ctx, x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Ctx;
    use crate::tensor::Matrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, seed: u64) -> Matrix {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Matrix::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    fn set_identity_projections(store: &mut ParamStore, mha: &MultiHead) {
        for lin in [&mha.query, &mha.key, &mha.value, &mha.output] {
            let w = store.get_mut(lin.weight);
            *w = Matrix::identity(w.rows());
        }
    }

    #[test]
    fn single_key_ignores_query() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let mha = MultiHead::new(&mut store, &mut init, "mha", 4, 2);
        let mut ctx = Ctx::eval(&store);
        let kv = ctx.constant(random(1, 4, 2));
        let q1 = ctx.constant(random(3, 4, 3));
        let q2 = ctx.constant(random(3, 4, 4));
        let layout = Arc::new(dense_layout(3, 1));
        let a = mha.attend(&mut ctx, q1, kv, layout.clone(), AttnNorm::OverKeys);
        let b = mha.attend(&mut ctx, q2, kv, layout, AttnNorm::OverKeys);
        assert!(ctx.value(a).max_abs_diff(ctx.value(b)) < 1e-12);
        let v = mha.value.forward(&mut ctx, kv);
        let o = mha.output.forward(&mut ctx, v);
        for r in 0..3 {
            for (x, y) in ctx.value(a).row(r).iter().zip(ctx.value(o).row(0)) {
                assert!((x - y).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn one_head_identity_matches_direct_formula() {
        let mut store = ParamStore::new();
        let mut init = Init::new(1);
        let mha = MultiHead::new(&mut store, &mut init, "mha", 2, 1);
        set_identity_projections(&mut store, &mha);
        let q = Matrix::from_rows(&[&[1.0, 0.0], &[0.5, -1.0]]);
        let k = Matrix::from_rows(&[&[0.0, 1.0], &[2.0, 1.0]]);
        let mut ctx = Ctx::eval(&store);
        let qv = ctx.constant(q.clone());
        let kv = ctx.constant(k.clone());
        let out = mha.attend(&mut ctx, qv, kv, Arc::new(dense_layout(2, 2)), AttnNorm::OverKeys);
        for i in 0..2 {
            let s: Vec<f64> = (0..2)
                .map(|j| (q.get(i, 0) * k.get(j, 0) + q.get(i, 1) * k.get(j, 1)) / 2f64.sqrt())
                .collect();
            let z: f64 = s.iter().map(|v| v.exp()).sum();
            for c in 0..2 {
                let want: f64 = (0..2).map(|j| s[j].exp() / z * k.get(j, c)).sum();
                assert!((ctx.value(out).get(i, c) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn temporal_attention_is_node_equivariant() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let mha = MultiHead::new(&mut store, &mut init, "mha", 4, 2);
        let dims = Dims::new(1, 3, 3);
        let x = random(9, 4, 7);
        let perm = [2usize, 0, 1];
        let row_perm: Vec<usize> = (0..3).flat_map(|t| perm.iter().map(move |&n| t * 3 + n)).collect();
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.constant(x.clone());
        let a = mha.self_attend(&mut ctx, xv, Arc::new(temporal_layout(dims)));
        let xp = ctx.constant(x.gather_rows(&row_perm));
        let b = mha.self_attend(&mut ctx, xp, Arc::new(temporal_layout(dims)));
        assert!(ctx.value(a).gather_rows(&row_perm).max_abs_diff(ctx.value(b)) < 1e-12);
    }

    #[test]
    fn identical_steps_get_identical_outputs() {
        let mut store = ParamStore::new();
        let mut init = Init::new(5);
        let mha = MultiHead::new(&mut store, &mut init, "mha", 4, 2);
        let dims = Dims::new(1, 3, 1);
        let mut x = random(3, 4, 8);
        let r0 = x.row(0).to_vec();
        x.row_mut(2).copy_from_slice(&r0);
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.constant(x);
        let a = mha.self_attend(&mut ctx, xv, Arc::new(temporal_layout(dims)));
        assert_eq!(ctx.value(a).row(0), ctx.value(a).row(2));
    }

    #[test]
    fn spatial_attention_is_time_equivariant() {
        let mut store = ParamStore::new();
        let mut init = Init::new(6);
        let mha = MultiHead::new(&mut store, &mut init, "mha", 4, 2);
        let dims = Dims::new(1, 3, 2);
        let x = random(6, 4, 9);
        let perm = [1usize, 2, 0];
        let row_perm: Vec<usize> = perm.iter().flat_map(|&t| (0..2).map(move |n| t * 2 + n)).collect();
        let mut ctx = Ctx::eval(&store);
        let xv = ctx.constant(x.clone());
        let a = mha.self_attend(&mut ctx, xv, Arc::new(spatial_layout(dims)));
        let xp = ctx.constant(x.gather_rows(&row_perm));
        let b = mha.self_attend(&mut ctx, xp, Arc::new(spatial_layout(dims)));
        assert!(ctx.value(a).gather_rows(&row_perm).max_abs_diff(ctx.value(b)) < 1e-12);
    }

    #[test]
    fn duplicated_node_gets_equal_weight() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let mut x = random(3, 4, 11);
        let r1 = x.row(1).to_vec();
        x.row_mut(2).copy_from_slice(&r1);
        let q = ctx.constant(x.clone());
        let out = ctx.tape.attention(q, q, q, Arc::new(spatial_layout(Dims::new(1, 1, 3))), 1, AttnNorm::OverKeys);
        let w = ctx.tape.attention_weights(out).unwrap();
        for i in 0..3 {
            assert!((w[i * 3 + 1] - w[i * 3 + 2]).abs() < 1e-12);
        }
    }

    fn te_module(d: usize, h: usize, norm: TimeEnhancedNorm) -> (ParamStore, TimeEnhanced) {
        let mut store = ParamStore::new();
        let mut init = Init::new(13);
        let te = TimeEnhanced::new(&mut store, &mut init, "te", d, h, 2, norm);
        (store, te)
    }

    #[test]
    fn single_target_sums_all_sources() {
        let (store, te) = te_module(4, 3, TimeEnhancedNorm::Paper);
        let mut ctx = Ctx::eval(&store);
        let src = Dims::new(1, 3, 2);
        let h = ctx.constant(random(6, 4, 1));
        let tim = ctx.constant(random(1, 3, 2));
        let out = te.forward(&mut ctx, h, src, tim, 1);
        let v = te.value.forward(&mut ctx, h);
        let vv = ctx.value(v).clone();
        // sum of value rows per node, then the output projection
        let mut summed = Matrix::zeros(2, 4);
        for t in 0..3 {
            for n in 0..2 {
                for c in 0..4 {
                    let cur = summed.get(n, c);
                    summed.set(n, c, cur + vv.get(t * 2 + n, c));
                }
            }
        }
        let s = ctx.constant(summed);
        let want = te.output.forward(&mut ctx, s);
        assert!(ctx.value(out).max_abs_diff(ctx.value(want)) < 1e-12);
    }

    #[test]
    fn cross_mode_single_source_broadcasts() {
        let (store, te) = te_module(4, 3, TimeEnhancedNorm::Cross);
        let mut ctx = Ctx::eval(&store);
        let h = ctx.constant(random(2, 4, 3));
        let tim = ctx.constant(random(4, 3, 4));
        let out = te.forward(&mut ctx, h, Dims::new(1, 1, 2), tim, 4);
        let v = te.value.forward(&mut ctx, h);
        let want = te.output.forward(&mut ctx, v);
        for j in 0..4 {
            for n in 0..2 {
                for (a, b) in ctx.value(out).row(j * 2 + n).iter().zip(ctx.value(want).row(n)) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn paper_mode_rows_over_targets_sum_to_one() {
        let store = ParamStore::new();
        let mut ctx = Ctx::eval(&store);
        let q = ctx.constant(random(5, 4, 1));
        let k = ctx.constant(random(6, 4, 2));
        let out = ctx.tape.attention(q, k, k, Arc::new(time_enhanced_layout(Dims::new(1, 3, 2), 5)), 2, AttnNorm::OverQueries);
        let w = ctx.tape.attention_weights(out).unwrap().to_vec();
        for block in w.chunks(15) {
            for j in 0..3 {
                let s: f64 = (0..5).map(|i| block[i * 3 + j]).sum();
                assert!((s - 1.0).abs() < 1e-9);
            }
        }
    }

    fn shape() -> LayerShape {
        LayerShape {
            d: 8,
            heads: 2,
            h_ff: 16,
            tim_width: 4,
            eps: 1e-5,
            te_norm: TimeEnhancedNorm::Paper,
            time_enhanced: true,
        }
    }

    #[test]
    fn parameter_counts_order_by_kind() {
        let count = |kind| {
            let mut store = ParamStore::new();
            let mut init = Init::new(0);
            ExpertLayer::new(&mut store, &mut init, "l", kind, shape());
            store.count()
        };
        let (i, a, t) = (count(SpatialKind::Identity), count(SpatialKind::Adaptive), count(SpatialKind::Attention));
        assert!(i < a && a < t, "{i} {a} {t}");
    }

    #[test]
    fn layer_maps_to_output_horizon() {
        for kind in [SpatialKind::Identity, SpatialKind::Adaptive, SpatialKind::Attention] {
            let mut store = ParamStore::new();
            let mut init = Init::new(0);
            let layer = ExpertLayer::new(&mut store, &mut init, "l", kind, shape());
            let mut ctx = Ctx::eval(&store);
            let dims = Dims::new(2, 3, 2);
            let h = ctx.constant(random(12, 8, 1));
            let tim = ctx.constant(random(2 * 5, 4, 2));
            let adj = ctx.constant(Matrix::filled(2, 2, 0.5));
            let (out, od) = layer.forward(&mut ctx, h, dims, tim, 5, Some(adj));
            assert_eq!(od, Dims::new(2, 5, 2));
            assert_eq!(ctx.value(out).shape(), (20, 8));
        }
    }

    #[test]
    fn identity_kind_does_not_mix_nodes() {
        let mut store = ParamStore::new();
        let mut init = Init::new(0);
        let layer = ExpertLayer::new(&mut store, &mut init, "l", SpatialKind::Identity, shape());
        let dims = Dims::new(1, 3, 2);
        let x = random(6, 8, 1);
        let mut y = x.clone();
        for t in 0..3 {
            y.row_mut(t * 2 + 1).iter_mut().for_each(|v| *v = -*v * 2.0);
        }
        let mut ctx = Ctx::eval(&store);
        let tim = ctx.constant(random(3, 4, 2));
        let xa = ctx.constant(x);
        let xb = ctx.constant(y);
        let (a, _) = layer.forward(&mut ctx, xa, dims, tim, 3, None);
        let (b, _) = layer.forward(&mut ctx, xb, dims, tim, 3, None);
        for t in 0..3 {
            assert_eq!(ctx.value(a).row(t * 2), ctx.value(b).row(t * 2));
        }
    }
}

//! Temporal information embedding and the input projection.
//!
//! Time of day `tau` (a step index within the day) is mapped to
//! `v = tau / steps_per_day` and expanded into one linear component and
//! `h - 1` sinusoidal components with learnable frequency and phase.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Matrix;

/// Evaluates the embedding for a single time index.
pub fn time2vec(tau: usize, steps_per_day: usize, w: &[f64], phi: &[f64]) -> Vec<f64> {
    time2vec_at(tau as f64 / steps_per_day as f64, w, phi)
}

/// Evaluates the embedding at a raw scalar `v`.
pub fn time2vec_at(v: f64, w: &[f64], phi: &[f64]) -> Vec<f64> {
    assert_eq!(w.len(), phi.len());
    w.iter()
        .zip(phi)
        .enumerate()
        .map(|(i, (w, p))| {
            let z = w * v + p;
            if i == 0 {
                z
            } else {
                z.sin()
            }
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Time2Vec {
    pub w: ParamId,
    pub phi: ParamId,
    pub h: usize,
    pub steps_per_day: usize,
}

impl Time2Vec {
    /// Frequencies start spread over up to four cycles per day so the
    /// periodic components see daily structure from the first step.
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, h: usize, steps_per_day: usize) -> Result<Self> {
        if h < 2 {
            return Err(Error::config("model.tim_dim", "must be at least 2"));
        }
        let mut w = init.uniform(1, h, -8.0 * PI, 8.0 * PI);
        w.set(0, 0, init.xavier(1, 1).item());
        let phi = init.uniform(1, h, -PI, PI);
        Ok(Self {
            w: store.add(format!("{name}.w"), w),
            phi: store.add(format!("{name}.phi"), phi),
            h,
            steps_per_day,
        })
    }

    /// `[taus.len(), h]`
    pub fn forward(&self, ctx: &mut Ctx, taus: &[usize]) -> Var {
        let v: Vec<f64> = taus.iter().map(|&t| t as f64 / self.steps_per_day as f64).collect();
        let v = ctx.constant(Matrix::from_vec(taus.len(), 1, v));
        let w = ctx.p(self.w);
        let phi = ctx.p(self.phi);
        let z = ctx.tape.matmul(v, w);
        let z = ctx.tape.add_row(z, phi);
        ctx.tape.periodic_from(z, 1)
    }
}

/// Learnable lookup table indexed by time of day; the replacement used when
/// the periodic embedding is ablated.
#[derive(Clone, Debug)]
pub struct TimeTable {
    pub table: ParamId,
    pub h: usize,
}

impl TimeTable {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, h: usize, steps_per_day: usize) -> Self {
        Self {
            table: store.add(format!("{name}.table"), init.xavier(steps_per_day, h)),
            h,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, taus: &[usize]) -> Var {
        let t = ctx.p(self.table);
        ctx.tape.gather_rows(t, Arc::new(taus.to_vec()))
    }
}

#[derive(Clone, Debug)]
pub enum TemporalEmbedding {
    Time2Vec(Time2Vec),
    Table(TimeTable),
}

impl TemporalEmbedding {
    pub fn width(&self) -> usize {
        match self {
            Self::Time2Vec(t) => t.h,
            Self::Table(t) => t.h,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, taus: &[usize]) -> Var {
        match self {
            Self::Time2Vec(t) => t.forward(ctx, taus),
            Self::Table(t) => t.forward(ctx, taus),
        }
    }
}

/// Concatenates node features with the per-step embedding and projects to
/// the hidden width.
#[derive(Clone, Debug)]
pub struct InputProjection {
    pub linear: Linear,
    pub channels: usize,
}

impl InputProjection {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, channels: usize, h: usize, d: usize) -> Self {
        Self {
            linear: Linear::new(store, init, name, channels + h, d),
            channels,
        }
    }

    /// `x` is `[steps * n_nodes, C]` in `(step, node)` order and `tim` is
    /// `[steps, h]`; returns `[steps * n_nodes, d]`.
    pub fn forward(&self, ctx: &mut Ctx, x: Var, tim: Var, n_nodes: usize) -> Result<Var> {
        let (rows, c) = ctx.value(x).shape();
        let steps = ctx.value(tim).rows();
        if c != self.channels || rows != steps * n_nodes {
            return Err(Error::Shape(format!(
                "embed_inputs: x is [{rows}, {c}], expected [{}, {}]",
                steps * n_nodes,
                self.channels
            )));
        }
        let idx: Vec<usize> = (0..rows).map(|r| r / n_nodes).collect();
        let tim = ctx.tape.gather_rows(tim, Arc::new(idx));
        let cat = ctx.tape.concat_cols(&[x, tim]);
        Ok(self.linear.forward(ctx, cat))
    }
}

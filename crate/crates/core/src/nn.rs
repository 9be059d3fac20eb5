//! Small parameterized building blocks shared by the model components.

use std::sync::Arc;

use crate::params::{Ctx, Init, ParamId, ParamStore};
use crate::tape::Var;
use crate::tensor::Matrix;

/// Affine map `x W + b` applied to every row.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl Linear {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(fan_in, fan_out));
        let bias = Some(store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out)));
        Self { weight, bias, fan_in, fan_out }
    }

    pub fn no_bias(store: &mut ParamStore, init: &mut Init, name: &str, fan_in: usize, fan_out: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), init.xavier(fan_in, fan_out));
        Self { weight, bias: None, fan_in, fan_out }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let w = ctx.p(self.weight);
        let y = ctx.tape.matmul(x, w);
        match self.bias {
            Some(b) => {
                let b = ctx.p(b);
                ctx.tape.add_row(y, b)
            }
            None => y,
        }
    }
}

/// Per-channel scale and shift, `x * g + b`, with no mixing across channels.
#[derive(Clone, Debug)]
pub struct ChannelAffine {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl ChannelAffine {
    pub fn new(store: &mut ParamStore, name: &str, width: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let rows = ctx.value(x).rows();
        let g = ctx.p(self.gain);
        let g = ctx.tape.gather_rows(g, Arc::new(vec![0; rows]));
        let y = ctx.tape.mul(x, g);
        let b = ctx.p(self.bias);
        ctx.tape.add_row(y, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
    pub eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, eps: f64) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Matrix::filled(1, width, 1.0)),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, width)),
            eps,
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let g = ctx.p(self.gain);
        let b = ctx.p(self.bias);
        ctx.tape.layer_norm(x, g, b, self.eps)
    }
}

/// Point-wise two-layer network with ReLU.
#[derive(Clone, Debug)]
pub struct FeedForward {
    pub inner: Linear,
    pub outer: Linear,
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, init: &mut Init, name: &str, d: usize, h_ff: usize) -> Self {
        Self {
            inner: Linear::new(store, init, &format!("{name}.inner"), d, h_ff),
            outer: Linear::new(store, init, &format!("{name}.outer"), h_ff, d),
        }
    }

    pub fn forward(&self, ctx: &mut Ctx, x: Var) -> Var {
        let h = self.inner.forward(ctx, x);
        let h = ctx.tape.relu(h);
        self.outer.forward(ctx, h)
    }
}

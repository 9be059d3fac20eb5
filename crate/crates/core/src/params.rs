//! Named parameter storage and the per-pass binding of parameters to a tape.

use std::collections::HashMap;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Matrix;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

/// Parameters in registration order, addressable by stable dotted names.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Matrix>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Matrix) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.values.len());
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Matrix {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Matrix {
        &mut self.values[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).map(|&i| ParamId(i))
    }

    pub fn by_name(&self, name: &str) -> Option<&Matrix> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Matrix)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.values.iter().map(Matrix::len).sum()
    }

    /// Number of scalars in parameters whose name starts with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(_, m)| m.len())
            .sum()
    }
}

/// Seeded initializers.
pub struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Uniform Xavier/Glorot: `U(-a, a)` with `a = sqrt(6 / (fan_in + fan_out))`.
    pub fn xavier(&mut self, rows: usize, cols: usize) -> Matrix {
        let a = (6.0 / (rows + cols) as f64).sqrt();
        let data = (0..rows * cols).map(|_| self.rng.random_range(-a..a)).collect();
        Matrix::from_vec(rows, cols, data)
    }

    pub fn uniform(&mut self, rows: usize, cols: usize, lo: f64, hi: f64) -> Matrix {
        let data = (0..rows * cols).map(|_| self.rng.random_range(lo..hi)).collect();
        Matrix::from_vec(rows, cols, data)
    }
}

/// One forward pass: a tape plus the lazily bound parameter leaves.
pub struct Ctx<'a> {
    pub tape: Tape,
    pub store: &'a ParamStore,
    bound: Vec<Option<Var>>,
    dropout: f64,
    rng: Option<ChaCha8Rng>,
}

impl<'a> Ctx<'a> {
    /// Inference pass: dropout disabled.
    pub fn eval(store: &'a ParamStore) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout: 0.0,
            rng: None,
        }
    }

    /// Training pass with dropout masks drawn from `seed`.
    pub fn train(store: &'a ParamStore, dropout: f64, seed: u64) -> Self {
        Self {
            tape: Tape::new(),
            store,
            bound: vec![None; store.len()],
            dropout,
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn is_training(&self) -> bool {
        self.rng.is_some()
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self.tape.param(self.store.get(id).clone());
        self.bound[id.0] = Some(v);
        v
    }

    pub fn constant(&mut self, m: Matrix) -> Var {
        self.tape.constant(m)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        self.tape.value(v)
    }

    pub fn dropout(&mut self, x: Var) -> Var {
        let rate = self.dropout;
        let Some(rng) = self.rng.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.tape.dropout(x, Arc::new(mask))
    }

    /// Gradients of `loss` for every parameter, zeros where none flowed.
    pub fn param_grads(&self, loss: Var) -> Vec<Matrix> {
        let mut grads: Gradients = self.tape.backward(loss);
        self.store
            .ids()
            .map(|id| {
                self.bound[id.0]
                    .and_then(|v| grads.take(v))
                    .unwrap_or_else(|| {
                        let m = self.store.get(id);
                        Matrix::zeros(m.rows(), m.cols())
                    })
            })
            .collect()
    }

    /// Like [`Ctx::param_grads`] but `None` where no gradient path exists.
    pub fn param_grads_sparse(&self, loss: Var) -> Vec<Option<Matrix>> {
        let mut grads = self.tape.backward(loss);
        self.store
            .ids()
            .map(|id| self.bound[id.0].and_then(|v| grads.take(v)))
            .collect()
    }
}

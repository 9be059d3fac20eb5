//! Adam with bias correction.

use crate::config::AdamConfig;
use crate::params::ParamStore;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    /// Number of updates applied so far.
    pub t: u64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        let zeros: Vec<Matrix> = store
            .iter()
            .map(|(_, p)| Matrix::zeros(p.rows(), p.cols()))
            .collect();
        Self {
            cfg,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Matrix], lr: f64) {
        assert_eq!(grads.len(), self.m.len(), "one gradient per parameter");
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let ids: Vec<_> = store.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let p = store.get_mut(id).as_mut_slice();
            let g = grads[i].as_slice();
            let m = self.m[i].as_mut_slice();
            let v = self.v[i].as_mut_slice();
            for k in 0..p.len() {
                m[k] = beta1 * m[k] + (1.0 - beta1) * g[k];
                v[k] = beta2 * v[k] + (1.0 - beta2) * g[k] * g[k];
                let mh = m[k] / c1;
                let vh = v[k] / c2;
                p[k] -= lr * mh / (vh.sqrt() + eps);
            }
        }
    }
}

/// Scales `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_global_norm(grads: &mut [Matrix], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.as_slice())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.scale_assign(s);
        }
    }
    norm
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Matrix::from_rows(&[&[1.0, -2.0]]));
        s.add("b", Matrix::from_rows(&[&[0.5]]));
        s
    }

    #[test]
    fn zero_gradients_leave_parameters() {
        let mut s = store();
        let before = s.clone();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let grads = vec![Matrix::zeros(1, 2), Matrix::zeros(1, 1)];
        for _ in 0..3 {
            adam.step(&mut s, &grads, 1e-2);
        }
        assert_eq!(s, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = store();
        let mut adam = Adam::new(AdamConfig::default(), &s);
        let grads = vec![Matrix::from_rows(&[&[3.0, -0.1]]), Matrix::from_rows(&[&[1e-3]])];
        adam.step(&mut s, &grads, 0.01);
        let a = s.by_name("a").unwrap();
        assert!((a.get(0, 0) - 0.99).abs() < 1e-9);
        assert!((a.get(0, 1) + 1.99).abs() < 1e-9);
    }

    #[test]
    fn clipping_bounds_the_norm() {
        let mut g = vec![Matrix::from_rows(&[&[3.0, 4.0]]), Matrix::from_rows(&[&[12.0]])];
        let n = clip_global_norm(&mut g, 5.0);
        assert_eq!(n, 13.0);
        let after: f64 = g.iter().flat_map(|m| m.as_slice()).map(|v| v * v).sum::<f64>().sqrt();
        assert!((after - 5.0).abs() < 1e-12);
    }
}

//! Regression loss, error quantiles, routing pseudo labels and the combined
//! objective.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ForwardVars, N_EXPERTS};
use crate::params::Ctx;
use crate::tape::{routing_ce_value, Var};
use crate::tensor::Matrix;

/// Lower clamp on probabilities inside the logarithm.
pub use crate::tape::CE_CLAMP;

/// Mean absolute error over entries with `y != 0`. The flag is set when
/// every entry is masked, in which case the value is 0.
pub fn masked_mae(y: &[f64], y_hat: &[f64]) -> (f64, bool) {
    assert_eq!(y.len(), y_hat.len(), "masked_mae length");
    let mut sum = 0.0;
    let mut count = 0usize;
    for (a, b) in y.iter().zip(y_hat) {
        if *a != 0.0 {
            sum += (a - b).abs();
            count += 1;
        }
    }
    if count == 0 {
        (0.0, true)
    } else {
        (sum / count as f64, false)
    }
}

/// Element-wise `|y - y_hat|` with masked entries set to 0, plus the mask
/// (`true` = observed).
pub fn pointwise_error(y: &[f64], y_hat: &[f64]) -> (Vec<f64>, Vec<bool>) {
    assert_eq!(y.len(), y_hat.len(), "pointwise_error length");
    y.iter()
        .zip(y_hat)
        .map(|(a, b)| if *a != 0.0 { ((a - b).abs(), true) } else { (0.0, false) })
        .unzip()
}

/// Linear-interpolation quantile: the sorted value at fractional position
/// `q * (n - 1)`.
pub fn quantile_threshold(errors: &[f64], q: f64) -> Result<f64> {
    if errors.is_empty() {
        return Err(Error::EmptyQuantile);
    }
    let mut v = errors.to_vec();
    v.sort_by(f64::total_cmp);
    let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    Ok(v[lo] + (v[hi] - v[lo]) * (pos - lo as f64))
}

/// Label vector for one point: all mass on `selected` when the routing was
/// good, otherwise spread evenly over the other experts.
pub fn label_vector(selected: usize, correct: bool, n_experts: usize) -> Vec<f64> {
    if correct {
        (0..n_experts).map(|e| if e == selected { 1.0 } else { 0.0 }).collect()
    } else {
        let share = 1.0 / (n_experts - 1) as f64;
        (0..n_experts).map(|e| if e == selected { 0.0 } else { share }).collect()
    }
}

/// Pseudo labels for a subset of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct RouteLabels {
    /// Row indices (points or nodes) the labels apply to.
    pub rows: Vec<usize>,
    /// `[rows.len(), E]`
    pub labels: Matrix,
    pub threshold: f64,
}

impl RouteLabels {
    pub fn incorrect_count(&self) -> usize {
        self.rows
            .iter()
            .enumerate()
            .filter(|(i, _)| self.labels.row(*i).iter().any(|&v| v > 0.0 && v < 1.0))
            .count()
    }
}

fn two_case_labels(
    errors: &[f64],
    valid: &[bool],
    selected: &[usize],
    n_experts: usize,
    threshold_q: f64,
) -> Result<RouteLabels> {
    assert!(n_experts >= 2, "routing needs at least two experts");
    let rows: Vec<usize> = (0..errors.len()).filter(|&i| valid[i]).collect();
    let observed: Vec<f64> = rows.iter().map(|&i| errors[i]).collect();
    let threshold = quantile_threshold(&observed, threshold_q)?;
    let mut labels = Matrix::zeros(rows.len(), n_experts);
    for (k, &i) in rows.iter().enumerate() {
        let v = label_vector(selected[i], errors[i] <= threshold, n_experts);
        labels.row_mut(k).copy_from_slice(&v);
    }
    Ok(RouteLabels {
        rows,
        labels,
        threshold,
    })
}

/// Point-wise labels: a point is routed badly when its error exceeds the
/// `q`-quantile of the observed errors, and well otherwise.
pub fn worst_route_labels(
    errors: &[f64],
    observed: &[bool],
    selected: &[usize],
    n_experts: usize,
    q: f64,
) -> Result<RouteLabels> {
    two_case_labels(errors, observed, selected, n_experts, q)
}

/// Node-wise labels: a node is routed best when its time-averaged error does
/// not exceed the `(1 - q)`-quantile of node errors.
pub fn best_route_labels(
    node_errors: &[f64],
    node_valid: &[bool],
    node_selected: &[usize],
    n_experts: usize,
    q: f64,
) -> Result<RouteLabels> {
    two_case_labels(node_errors, node_valid, node_selected, n_experts, 1.0 - q)
}

/// `mean_rows(-(1/E) sum_e l_e ln(clamp(p_e)))`.
pub fn routing_ce(p: &Matrix, labels: &Matrix) -> f64 {
    routing_ce_value(p, labels)
}

/// Mean over time of point errors per `(b, n)`; nodes with no observed
/// point are invalid.
pub fn node_errors(errors: &[f64], observed: &[bool], batch: usize, steps: usize, nodes: usize) -> (Vec<f64>, Vec<bool>) {
    let mut sum = vec![0.0; batch * nodes];
    let mut count = vec![0usize; batch * nodes];
    for b in 0..batch {
        for t in 0..steps {
            for n in 0..nodes {
                let r = (b * steps + t) * nodes + n;
                if observed[r] {
                    sum[b * nodes + n] += errors[r];
                    count[b * nodes + n] += 1;
                }
            }
        }
    }
    let valid = count.iter().map(|&c| c > 0).collect();
    let mean = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    (mean, valid)
}

/// Values of each loss term for one batch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub reg: f64,
    pub worst: f64,
    pub best: f64,
    pub total: f64,
}

/// Builds the training objective on the tape.
///
/// `L = w_reg * mean_e MAE(y_e) + w_worst * L_worst + w_best * L_best`. Under
/// the ensemble ablation the MAE of the mixture is added to the regression
/// term. Pseudo labels come from the detached final prediction.
pub fn total_loss(ctx: &mut Ctx, fv: &ForwardVars, y: &[f64], cfg: &TrainConfig) -> Result<(Var, LossComponents)> {
    let target = Arc::new(y.to_vec());
    let mut maes = Vec::with_capacity(fv.predictions.len());
    for &(_, pred) in &fv.predictions {
        maes.push(ctx.tape.masked_mae(pred, target.clone()));
    }
    let mut reg = mean_of(ctx, &maes);
    if let Some(ens) = fv.ensemble {
        let e = ctx.tape.masked_mae(ens, target.clone());
        reg = ctx.tape.add(reg, e);
    }
    let w = &cfg.loss_weights;
    let mut comps = LossComponents {
        reg: ctx.value(reg).item(),
        ..Default::default()
    };
    let mut total = ctx.tape.scale(reg, w.reg);

    let (errors, observed) = pointwise_error(y, &fv.y_hat);
    if let (Some(p), true) = (fv.p, observed.iter().any(|&o| o)) {
        let worst = worst_route_labels(&errors, &observed, &fv.selected, N_EXPERTS, cfg.q)?;
        let pw = ctx.tape.gather_rows(p, Arc::new(worst.rows.clone()));
        let lw = ctx.tape.routing_ce(pw, Arc::new(worst.labels));
        comps.worst = ctx.value(lw).item();
        let lw = ctx.tape.scale(lw, w.worst);
        total = ctx.tape.add(total, lw);

        let best_w = cfg.best_weight();
        if best_w > 0.0 {
            let d = fv.dims;
            let (nerr, nvalid) = node_errors(&errors, &observed, d.batch, d.steps, d.nodes);
            let seg: Vec<usize> = (0..d.rows()).map(|r| (r / (d.steps * d.nodes)) * d.nodes + r % d.nodes).collect();
            let node_p = ctx.tape.segment_mean(p, Arc::new(seg), d.batch * d.nodes);
            let node_selected = ctx.value(node_p).argmax_rows();
            let best = best_route_labels(&nerr, &nvalid, &node_selected, N_EXPERTS, cfg.q)?;
            let pb = ctx.tape.gather_rows(node_p, Arc::new(best.rows.clone()));
            let lb = ctx.tape.routing_ce(pb, Arc::new(best.labels));
            comps.best = ctx.value(lb).item();
            let lb = ctx.tape.scale(lb, best_w);
            total = ctx.tape.add(total, lb);
        }
    }
    comps.total = ctx.value(total).item();
    Ok((total, comps))
}

fn mean_of(ctx: &mut Ctx, vars: &[Var]) -> Var {
    let mut acc = vars[0];
    for &v in &vars[1..] {
        acc = ctx.tape.add(acc, v);
    }
    ctx.tape.scale(acc, 1.0 / vars.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{AblationConfig, LossWeights};
    use crate::model::tests::{random_batch, tiny_spec};
    use crate::model::Testam;
    use proptest::prelude::*;

    #[test]
    fn mae_examples() {
        assert_eq!(masked_mae(&[1.0, 2.0], &[1.0, 2.0]), (0.0, false));
        assert_eq!(masked_mae(&[2.0, 4.0], &[1.0, 6.0]), (1.5, false));
        assert_eq!(masked_mae(&[0.0, 4.0], &[9.0, 4.0]), (0.0, false));
        assert_eq!(masked_mae(&[0.0, 0.0], &[9.0, 4.0]), (0.0, true));
    }

    #[test]
    fn quantile_examples() {
        assert_eq!(quantile_threshold(&[5.0, 1.0, 3.0, 2.0, 4.0], 0.5).unwrap(), 3.0);
        assert_eq!(quantile_threshold(&[5.0, 1.0, 3.0], 1.0).unwrap(), 5.0);
        assert_eq!(quantile_threshold(&[2.5; 4], 0.13).unwrap(), 2.5);
        assert!(matches!(quantile_threshold(&[], 0.5), Err(Error::EmptyQuantile)));
    }

    #[test]
    fn label_cases() {
        assert_eq!(label_vector(0, false, 3), vec![0.0, 0.5, 0.5]);
        assert_eq!(label_vector(2, true, 3), vec![0.0, 0.0, 1.0]);
        assert_eq!(label_vector(1, true, 3), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn best_route_uses_complementary_quantile() {
        let errs: Vec<f64> = (1..=11).map(f64::from).collect();
        let valid = vec![true; 11];
        let sel = vec![1; 11];
        let l = best_route_labels(&errs, &valid, &sel, 3, 0.7).unwrap();
        assert!((l.threshold - quantile_threshold(&errs, 0.3).unwrap()).abs() < 1e-12);
        assert_eq!(l.labels.row(0), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_example() {
        let p = Matrix::from_rows(&[&[0.2, 0.3, 0.5]]);
        let l = Matrix::from_rows(&[&[0.0, 0.0, 1.0]]);
        assert!((routing_ce(&p, &l) - (-(0.5f64).ln() / 3.0)).abs() < 1e-12);
        let p1 = Matrix::from_rows(&[&[0.0, 1.0, 0.0]]);
        let l1 = Matrix::from_rows(&[&[0.0, 1.0, 0.0]]);
        assert_eq!(routing_ce(&p1, &l1), 0.0);
    }

    #[test]
    fn masked_points_are_excluded() {
        let errs = [1.0, 100.0, 2.0, 3.0];
        let obs = [true, false, true, true];
        let l = worst_route_labels(&errs, &obs, &[0, 0, 0, 0], 3, 0.5).unwrap();
        assert_eq!(l.rows, vec![0, 2, 3]);
        assert_eq!(l.threshold, 2.0);
    }

    proptest! {
        #[test]
        fn labels_are_distributions(
            errs in proptest::collection::vec(0.0f64..10.0, 1..40),
            q in 0.05f64..0.95,
            seed in 0usize..3,
        ) {
            let obs = vec![true; errs.len()];
            let sel: Vec<usize> = (0..errs.len()).map(|i| (i + seed) % 3).collect();
            let l = worst_route_labels(&errs, &obs, &sel, 3, q).unwrap();
            for r in 0..l.labels.rows() {
                let row = l.labels.row(r);
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                for &v in row {
                    prop_assert!(v == 0.0 || v == 0.5 || v == 1.0);
                }
            }
        }

        #[test]
        fn raising_q_never_adds_incorrect_points(
            errs in proptest::collection::vec(0.0f64..10.0, 1..40),
            q1 in 0.05f64..0.95,
            dq in 0.0f64..0.5,
        ) {
            let q2 = (q1 + dq).min(0.99);
            let obs = vec![true; errs.len()];
            let sel = vec![0; errs.len()];
            let a = worst_route_labels(&errs, &obs, &sel, 3, q1).unwrap().incorrect_count();
            let b = worst_route_labels(&errs, &obs, &sel, 3, q2).unwrap().incorrect_count();
            prop_assert!(b <= a);
        }

        #[test]
        fn cross_entropy_is_non_negative(
            raw in proptest::collection::vec(0.001f64..1.0, 3),
            sel in 0usize..3,
            correct in any::<bool>(),
        ) {
            let s: f64 = raw.iter().sum();
            let p = Matrix::from_vec(1, 3, raw.iter().map(|v| v / s).collect());
            let l = Matrix::from_vec(1, 3, label_vector(sel, correct, 3));
            prop_assert!(routing_ce(&p, &l) >= 0.0);
        }
    }

    fn cfg(weights: LossWeights, ablation: AblationConfig) -> TrainConfig {
        TrainConfig {
            loss_weights: weights,
            ablation,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_routing_weights_reduce_to_mean_mae() {
        let spec = tiny_spec(3, 3, 3);
        let model = Testam::new(spec.clone(), 3).unwrap();
        let batch = random_batch(&spec, 2, 4);
        let mut ctx = Ctx::eval(&model.store);
        let fv = model.forward(&mut ctx, &batch).unwrap();
        let c = cfg(
            LossWeights {
                reg: 1.0,
                worst: 0.0,
                best: 0.0,
            },
            AblationConfig::default(),
        );
        let (loss, comps) = total_loss(&mut ctx, &fv, &batch.y, &c).unwrap();
        let want: f64 = fv
            .predictions
            .iter()
            .map(|&(_, v)| masked_mae(&batch.y, ctx.value(v).as_slice()).0)
            .sum::<f64>()
            / 3.0;
        assert!((ctx.value(loss).item() - want).abs() < 1e-12);
        assert!((comps.reg - want).abs() < 1e-12);
    }

    #[test]
    fn worst_only_zeroes_best_term() {
        let spec = tiny_spec(3, 3, 3);
        let model = Testam::new(spec.clone(), 3).unwrap();
        let batch = random_batch(&spec, 2, 4);
        let mut ctx = Ctx::eval(&model.store);
        let fv = model.forward(&mut ctx, &batch).unwrap();
        let c = cfg(
            LossWeights::default(),
            AblationConfig {
                worst_only: true,
                ..Default::default()
            },
        );
        let (_, comps) = total_loss(&mut ctx, &fv, &batch.y, &c).unwrap();
        assert_eq!(comps.best, 0.0);
        assert!(comps.worst > 0.0);
    }

    #[test]
    fn perfect_predictions_are_all_correct() {
        let spec = tiny_spec(2, 3, 3);
        let model = Testam::new(spec.clone(), 3).unwrap();
        let batch = random_batch(&spec, 1, 4);
        let mut ctx = Ctx::eval(&model.store);
        let fv = model.forward(&mut ctx, &batch).unwrap();
        let y = fv.y_hat.clone();
        let (errors, obs) = pointwise_error(&y, &fv.y_hat);
        let l = worst_route_labels(&errors, &obs, &fv.selected, 3, 0.7).unwrap();
        assert_eq!(l.incorrect_count(), 0);
        let (_, comps) = total_loss(&mut ctx, &fv, &y, &TrainConfig::default()).unwrap();
        assert!(comps.worst > 0.0);
    }
}

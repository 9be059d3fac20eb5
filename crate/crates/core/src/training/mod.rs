//! Optimization loop with validation-based early stopping.

pub mod adam;
pub mod checkpoint;
pub mod schedule;

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::data::{Batch, WindowedSample};
use crate::error::{Error, Result};
use crate::eval;
use crate::losses::{total_loss, LossComponents};
use crate::model::{Testam, N_EXPERTS};
use crate::params::{Ctx, ParamStore};

pub use adam::{clip_global_norm, Adam};
pub use checkpoint::{load_checkpoint, save_checkpoint, spec_hash, Checkpoint};
pub use schedule::{cosine_phase_lr, lr_at_step, warmup_lr};

/// Summary of one training epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Optimizer steps taken after this epoch.
    pub step: u64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Batch-averaged loss terms.
    pub loss: LossComponents,
    /// Masked MAE of the final prediction on training batches, measured
    /// during the epoch.
    pub train_mae: f64,
    pub val_mae: f64,
    /// Fraction of training points routed to each expert.
    pub selection_share: [f64; N_EXPERTS],
    /// Largest absolute gradient seen on the memory bank this epoch.
    pub memory_grad_max: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_mae: Option<f64>,
    pub stopped_early: bool,
}

/// Resumable optimizer position.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub optimizer: Adam,
    pub step: u64,
    pub epoch: u64,
}

impl TrainState {
    pub fn new(model: &Testam, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: Adam::new(cfg.adam.clone(), &model.store),
            step: 0,
            epoch: 0,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint, model: &Testam, cfg: &TrainConfig) -> Self {
        Self {
            optimizer: ckpt
                .optimizer
                .clone()
                .unwrap_or_else(|| Adam::new(cfg.adam.clone(), &model.store)),
            step: ckpt.step,
            epoch: ckpt.epoch,
        }
    }
}

fn mix(seed: u64, a: u64) -> u64 {
    seed ^ a.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Trains from scratch; see [`train_from`].
pub fn train(model: &mut Testam, train: &[WindowedSample], val: &[WindowedSample], cfg: &TrainConfig) -> Result<TrainingHistory> {
    let mut state = TrainState::new(model, cfg);
    train_from(model, train, val, cfg, &mut state, |_| {})
}

/// Runs epochs `state.epoch .. cfg.epochs`, calling `on_epoch` after each.
/// On return the model holds the parameters with the best validation MAE.
pub fn train_from(
    model: &mut Testam,
    train: &[WindowedSample],
    val: &[WindowedSample],
    cfg: &TrainConfig,
    state: &mut TrainState,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainingHistory> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::EmptySplit("training split is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::EmptySplit("validation split is empty".into()));
    }
    let memory = model.bank.items;
    let mut history = TrainingHistory::default();
    let mut best: Option<(f64, ParamStore, usize)> = None;
    let mut since_best = 0usize;

    while (state.epoch as usize) < cfg.epochs {
        let epoch = state.epoch as usize;
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(mix(cfg.seed, epoch as u64)));

        let mut loss_sum = LossComponents::default();
        let mut batches = 0usize;
        let (mut abs_sum, mut abs_count) = (0.0, 0usize);
        let mut picks = [0usize; N_EXPERTS];
        let mut memory_grad_max = 0.0f64;
        let mut lr = 0.0;

        for chunk in order.chunks(cfg.batch_size) {
            let samples: Vec<&WindowedSample> = chunk.iter().map(|&i| &train[i]).collect();
            let batch = Batch::from_samples(&samples)?;
            lr = lr_at_step(state.step as usize, &cfg.schedule);
            let (mut grads, comps) = {
                let mut ctx = Ctx::train(&model.store, model.spec.model.dropout, mix(cfg.seed ^ 0x5EED, state.step));
                let fv = model.forward(&mut ctx, &batch)?;
                let (loss, comps) = total_loss(&mut ctx, &fv, &batch.y, cfg)?;
                if !comps.total.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        step: state.step as usize,
                        detail: format!("loss is {} (reg {}, worst {}, best {})", comps.total, comps.reg, comps.worst, comps.best),
                    });
                }
                for (r, (&y, &yh)) in batch.y.iter().zip(&fv.y_hat).enumerate() {
                    if y != 0.0 {
                        abs_sum += (y - yh).abs();
                        abs_count += 1;
                    }
                    picks[fv.selected[r]] += 1;
                }
                (ctx.param_grads(loss), comps)
            };
            if let Some(bad) = grads.iter().position(|g| !g.is_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    step: state.step as usize,
                    detail: format!("non-finite gradient for `{}`", model.store.name(model.store.ids().nth(bad).expect("index"))),
                });
            }
            memory_grad_max = memory_grad_max.max(grads[memory.0].as_slice().iter().fold(0.0, |m, v| m.max(v.abs())));
            clip_global_norm(&mut grads, cfg.clip_norm);
            state.optimizer.step(&mut model.store, &grads, lr);
            state.step += 1;
            loss_sum.reg += comps.reg;
            loss_sum.worst += comps.worst;
            loss_sum.best += comps.best;
            loss_sum.total += comps.total;
            batches += 1;
        }

        let val_mae = eval::evaluate_mae(model, val, cfg.batch_size)?;
        if !val_mae.is_finite() {
            return Err(Error::Diverged {
                epoch,
                step: state.step as usize,
                detail: format!("validation MAE is {val_mae}"),
            });
        }
        let total_picks = picks.iter().sum::<usize>().max(1) as f64;
        let nb = batches.max(1) as f64;
        let record = EpochRecord {
            epoch,
            step: state.step,
            lr,
            loss: LossComponents {
                reg: loss_sum.reg / nb,
                worst: loss_sum.worst / nb,
                best: loss_sum.best / nb,
                total: loss_sum.total / nb,
            },
            train_mae: if abs_count > 0 { abs_sum / abs_count as f64 } else { 0.0 },
            val_mae,
            selection_share: picks.map(|c| c as f64 / total_picks),
            memory_grad_max,
            seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "epoch {epoch}: loss {:.4} train MAE {:.4} val MAE {:.4}",
            record.loss.total,
            record.train_mae,
            record.val_mae
        );
        on_epoch(&record);
        history.epochs.push(record);
        state.epoch += 1;

        if best.as_ref().is_none_or(|(b, _, _)| val_mae < *b) {
            best = Some((val_mae, model.store.clone(), epoch));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                history.stopped_early = true;
                break;
            }
        }
    }

    if let Some((mae, store, epoch)) = best {
        model.store = store;
        history.best_epoch = Some(epoch);
        history.best_val_mae = Some(mae);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ScheduleConfig;
    use crate::data::prepare_dataset;
    use crate::io::{generate_synthetic, SyntheticConfig};
    use crate::model::ModelSpec;

    fn setup(epochs: usize) -> (Testam, crate::data::PreparedData, TrainConfig) {
        let (series, _, _) = generate_synthetic(&SyntheticConfig {
            n_nodes: 4,
            steps_per_day: 48,
            n_days: 3,
            n_isolated: 1,
            n_event_nodes: 1,
            ..SyntheticConfig::default()
        })
        .unwrap();
        let mut cfg = TrainConfig {
            t_in: 4,
            t_out: 4,
            epochs,
            batch_size: 16,
            ..TrainConfig::default()
        };
        cfg.model.d = 8;
        cfg.model.e = 8;
        cfg.model.m = 4;
        cfg.model.layers = 1;
        cfg.model.heads = 2;
        cfg.model.h_ff = 16;
        cfg.model.tim_dim = 4;
        cfg.schedule.t_warm = 10;
        cfg.schedule.t_freq = 50;
        let data = prepare_dataset(&series, 4, 4, cfg.split, false).unwrap();
        let spec = ModelSpec {
            n_nodes: 4,
            channels: 2,
            steps_per_day: data.steps_per_day,
            t_in: 4,
            t_out: 4,
            model: cfg.model.clone(),
            ablation: cfg.ablation.clone(),
            scaler: data.scaler,
        };
        (Testam::new(spec, 1).unwrap(), data, cfg)
    }

    #[test]
    fn zero_learning_rate_keeps_parameters() {
        let (mut model, data, mut cfg) = setup(1);
        cfg.schedule = ScheduleConfig {
            lr_min: 0.0,
            lr_max: 0.0,
            ..cfg.schedule
        };
        let before = model.store.clone();
        train(&mut model, &data.split.train, &data.split.val, &cfg).unwrap();
        assert_eq!(model.store, before);
    }

    #[test]
    fn fixed_seed_is_reproducible() {
        let run = || {
            let (mut model, data, cfg) = setup(2);
            let mut h = train(&mut model, &data.split.train, &data.split.val, &cfg).unwrap();
            h.epochs.iter_mut().for_each(|e| e.seconds = 0.0);
            (h, model.store)
        };
        let (a, sa) = run();
        let (b, sb) = run();
        assert_eq!(a, b);
        assert_eq!(sa, sb);
    }

    #[test]
    fn empty_validation_rejected() {
        let (mut model, data, cfg) = setup(1);
        assert!(matches!(
            train(&mut model, &data.split.train, &[], &cfg),
            Err(Error::EmptySplit(_))
        ));
    }

    #[test]
    fn resume_continues_step_counter() {
        let (mut model, data, mut cfg) = setup(1);
        let mut state = TrainState::new(&model, &cfg);
        train_from(&mut model, &data.split.train, &data.split.val, &cfg, &mut state, |_| {}).unwrap();
        let after_one = state.step;
        assert!(after_one > 0);
        let ckpt = Checkpoint::from_model(&model, Some(&cfg), Some(&state.optimizer), state.step, state.epoch);
        let mut restored = ckpt.to_model().unwrap();
        let mut resumed = TrainState::from_checkpoint(&ckpt, &restored, &cfg);
        cfg.epochs = 2;
        let h = train_from(&mut restored, &data.split.train, &data.split.val, &cfg, &mut resumed, |_| {}).unwrap();
        assert_eq!(h.epochs.len(), 1);
        assert_eq!(h.epochs[0].epoch, 1);
        assert_eq!(resumed.step, 2 * after_one);
    }
}

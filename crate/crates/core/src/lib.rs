//! Time-enhanced spatio-temporal mixture-of-experts traffic forecasting.
//!
//! Three forecasting experts share one architecture and differ only in how
//! they model space: not at all, over a learned static graph, or with
//! unrestricted attention. A gate backed by a learnable memory picks one
//! expert for every node and output step.

pub mod attention;
pub mod config;
pub mod data;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod graph;
pub mod io;
pub mod losses;
pub mod model;
pub mod nn;
pub mod params;
pub mod tape;
pub mod tensor;
pub mod training;

pub use config::{AblationConfig, ModelConfig, TrainConfig};
pub use data::{prepare_dataset, Batch, DatasetSplit, GraphSignalSeries, PreparedData, Scaler, WindowedSample};
pub use error::{Error, Result};
pub use eval::{HorizonReport, Metrics, RoutingReport};
pub use io::{NodeClass, ScenarioTags, SyntheticConfig};
pub use model::{ForecastBundle, ModelSpec, Testam};
pub use tensor::Matrix;
pub use training::{Checkpoint, TrainingHistory};

/// Builds the model spec for a prepared dataset under a training config.
pub fn spec_for(cfg: &TrainConfig, data: &PreparedData, n_nodes: usize) -> ModelSpec {
    ModelSpec {
        n_nodes,
        channels: if cfg.model.day_of_week { 3 } else { 2 },
        steps_per_day: data.steps_per_day,
        t_in: cfg.t_in,
        t_out: cfg.t_out,
        model: cfg.model.clone(),
        ablation: cfg.ablation.clone(),
        scaler: data.scaler,
    }
}

//! Dataset ingestion, the binary bundle format and the synthetic generator.

pub mod bundle;
pub mod csv;
pub mod synthetic;

pub use bundle::{load_bundle, save_bundle};
pub use csv::{load_csv, read_csv, write_csv};
pub use synthetic::{generate_synthetic, NodeClass, RoadNetwork, ScenarioTags, SyntheticConfig};

//! Graph generators for training and decode workloads, the reactive
//! baseline, and named presets.

pub mod decode;
pub mod presets;
pub mod random;
pub mod reactive;
pub mod toy;
pub mod train;

pub use decode::{gen_llm_decode, DecodeSpec, KvReload};
pub use presets::{preset, Preset, WorkloadSpec, PRESET_NAMES};
pub use random::{gen_random_dag, RandomDagSpec, RandomInstance};
pub use reactive::run_reactive_baseline;
pub use toy::toy_graph;
pub use train::{gen_transformer_train, TrainSpec};

//! A tiny one-stage video detector: a strided conv backbone with dense heads,
//! per-frame top-k proposal selection, and an affinity-weighted temporal
//! aggregation module that refines class scores only.

pub mod checkpoint;
pub mod model;
pub mod params;
pub mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use model::{
    affinity, backbone_forward, detect_sequence, nms, run_sequence, select_topk, select_topk_rows,
    temporal_aggregate, DenseGrid, Detection, Proposal, SequenceOutput,
};
pub use params::{ArchConfig, ModelParams, ParamTensor, Scope};
pub use train::{train_source_sequences, SourceTrainConfig, TrainRecord};

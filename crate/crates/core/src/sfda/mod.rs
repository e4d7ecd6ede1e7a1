//! Source-free adaptation: a mean teacher alternating a temporal stage
//! (frame masking, post-aggregation score matching) with a spatial stage
//! (single-frame student matched to aggregated teacher scores, plus a
//! certainty-weighted term), and checkpoint selection by self-entropy.

pub mod adapt;
pub mod augment;
pub mod config;
pub mod ema;
pub mod losses;
pub mod select;

pub use adapt::{
    adapt, adapt_sequences, baseline_basic_mt, baseline_pseudo_label, oracle_finetune,
    oracle_sequences, pseudo_label_sequences, pseudo_labels, AdaptOutcome, IterRecord, Schedule,
    Snapshot,
};
pub use augment::{augment_pair, mask_frames, AugmentConfig, AugmentedPair};
pub use config::{AdaptationConfig, Method, StageOrder};
pub use ema::{ema_update, EmaScope, TeacherStudent};
pub use losses::{
    certainty_weighted_cls_loss, certainty_weighted_cls_value, detected_rows,
    detected_self_entropy, mean_self_entropy, srs_loss, stage_of, student_pass, teacher_pass,
    trs_loss, LossParts, LossTerms, Stage, StudentPass, TeacherPass,
};
pub use select::{
    nearest_snapshot, select_checkpoint, select_checkpoint_with, EntropyTrace, SelectionRule,
};

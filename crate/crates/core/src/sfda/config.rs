use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::augment::AugmentConfig;
use super::losses::LossTerms;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageOrder {
    TrsFirst,
    SrsFirst,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptationConfig {
    pub alpha: f64,
    pub gamma: f64,
    /// Iterations per stage.
    pub tau: usize,
    pub total_iters: usize,
    pub k: usize,
    /// Frame masking rate range, percent.
    pub mask_range: (f64, f64),
    pub lr_start: f64,
    pub lr_end: f64,
    pub momentum: f64,
    /// Frames per training clip; 0 uses whole sequences.
    pub frames_per_sequence: usize,
    pub entropy_window: usize,
    /// Detection confidence (`objectness · max class score`) a teacher
    /// proposal needs to count towards the self-entropy.
    pub entropy_conf: f64,
    pub stage_order: StageOrder,
    pub seed: u64,
    /// Global gradient-norm cap for the student; 0 disables it.
    pub clip_norm: f64,
    pub terms: LossTerms,
    pub augment: AugmentConfig,
    /// TAM-only training used by the pseudo-label and oracle baselines.
    pub tam_iters: usize,
    pub tam_lr: f64,
    pub pl_threshold: f64,
}

impl Default for AdaptationConfig {
    fn default() -> Self {
        Self {
            alpha: 0.9995,
            gamma: 0.2,
            tau: 200,
            total_iters: 10_000,
            k: 30,
            mask_range: (0.0, 75.0),
            lr_start: 2e-4,
            lr_end: 1e-4,
            momentum: 0.9,
            frames_per_sequence: 0,
            entropy_window: 100,
            entropy_conf: 0.5,
            stage_order: StageOrder::TrsFirst,
            seed: 0,
            clip_norm: 0.0,
            terms: LossTerms::default(),
            augment: AugmentConfig::default(),
            tam_iters: 1000,
            tam_lr: 1e-3,
            pl_threshold: 0.5,
        }
    }
}

impl AdaptationConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, why: String| Err(Error::Config(format!("{key}: {why}")));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return bad("alpha", format!("{} not in (0, 1)", self.alpha));
        }
        if !(self.gamma >= 0.0) {
            return bad("gamma", format!("{} < 0", self.gamma));
        }
        if self.tau == 0 {
            return bad("tau", "must be ≥ 1".into());
        }
        if self.total_iters > 0 && 2 * self.tau > self.total_iters {
            return bad(
                "tau",
                format!(
                    "2·tau = {} exceeds total_iters = {}",
                    2 * self.tau,
                    self.total_iters
                ),
            );
        }
        if self.k == 0 {
            return bad("k", "must be ≥ 1".into());
        }
        let (lo, hi) = self.mask_range;
        if !(0.0..=75.0).contains(&lo) || !(0.0..=75.0).contains(&hi) || lo > hi {
            return bad("mask_range", format!("({lo}, {hi}) not within [0, 75]"));
        }
        if !(self.lr_start > 0.0 && self.lr_end >= 0.0) {
            return bad("lr_start", "learning rates must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum", format!("{} not in [0, 1)", self.momentum));
        }
        if self.entropy_window == 0 {
            return bad("entropy_window", "must be ≥ 1".into());
        }
        if !(0.0..=1.0).contains(&self.entropy_conf) {
            return bad(
                "entropy_conf",
                format!("{} not in [0, 1]", self.entropy_conf),
            );
        }
        if !(0.0..=1.0).contains(&self.pl_threshold) {
            return bad(
                "pl_threshold",
                format!("{} not in [0, 1]", self.pl_threshold),
            );
        }
        if !(self.tam_lr > 0.0) {
            return bad("tam_lr", "must be positive".into());
        }
        let a = &self.augment;
        if !(0.0..=1.0).contains(&a.flip_prob) || !(0.0..=1.0).contains(&a.erase_prob) {
            return bad("augment", "probabilities must lie in [0, 1]".into());
        }
        if !(0.0..0.5).contains(&a.perspective) {
            return bad(
                "augment.perspective",
                format!("{} not in [0, 0.5)", a.perspective),
            );
        }
        if !(0.0..1.0).contains(&a.weak_jitter) || !(0.0..1.0).contains(&a.strong_jitter) {
            return bad("augment", "jitter magnitudes must lie in [0, 1)".into());
        }
        let (e0, e1) = a.erase_area;
        if !(e0 > 0.0 && e0 <= e1 && e1 < 1.0) {
            return bad("augment.erase_area", format!("({e0}, {e1}) invalid"));
        }
        Ok(())
    }
}

/// Methods compared in the results table.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    SourceOnly,
    PseudoLabel,
    BasicMt,
    StarMt,
    Oracle,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::SourceOnly,
        Method::PseudoLabel,
        Method::BasicMt,
        Method::StarMt,
        Method::Oracle,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::SourceOnly => "source_only",
            Method::PseudoLabel => "pseudo_label",
            Method::BasicMt => "basic_mt",
            Method::StarMt => "star_mt",
            Method::Oracle => "oracle",
        }
    }

    /// Row label in the results table.
    pub fn label(&self) -> &'static str {
        match self {
            Method::SourceOnly => "Source-only",
            Method::PseudoLabel => "PL w. SE",
            Method::BasicMt => "Basic MT",
            Method::StarMt => "STAR-MT",
            Method::Oracle => "Oracle",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown method '{s}' (expected one of {})",
                    Method::ALL.map(|m| m.as_str()).join(", ")
                ))
            })
    }
}

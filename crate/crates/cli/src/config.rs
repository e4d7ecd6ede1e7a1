//! Experiment configuration: one TOML document with optional blocks.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use starmt::datagen::GenConfig;
use starmt::degrade::{DegradationKind, DegradationRanges};
use starmt::detector::{ArchConfig, SourceTrainConfig};
use starmt::eval::EvalConfig;
use starmt::sfda::{AdaptationConfig, Method};

use crate::error::CliError;
use crate::provenance::RunRecord;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataBlock {
    pub n_sequences: usize,
    /// train / val / test fractions
    pub split: [f64; 3],
    /// Use a dataset already in the on-disk layout instead of synthesizing one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub external: Option<PathBuf>,
    pub generator: GenConfig,
}

impl Default for DataBlock {
    fn default() -> Self {
        Self {
            n_sequences: 80,
            split: [0.75, 0.0, 0.25],
            external: None,
            generator: GenConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeBlock {
    pub kinds: Vec<DegradationKind>,
    pub ranges: DegradationRanges,
}

impl Default for DegradeBlock {
    fn default() -> Self {
        Self {
            kinds: vec![DegradationKind::Noise],
            ranges: DegradationRanges::default(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceBlock {
    pub arch: ArchConfig,
    pub train: SourceTrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptBlock {
    pub methods: Vec<Method>,
    /// Adaptation run indices; run `s` uses the stream seed
    /// `derive_stream(master, "adapt", s)`, which overrides `params.seed`.
    pub seeds: Vec<u64>,
    pub params: AdaptationConfig,
}

impl Default for AdaptBlock {
    fn default() -> Self {
        Self {
            methods: vec![
                Method::PseudoLabel,
                Method::BasicMt,
                Method::StarMt,
                Method::Oracle,
            ],
            seeds: vec![0, 1, 2],
            params: AdaptationConfig::default(),
        }
    }
}

/// The whole experiment. Absent blocks take their defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "default_out")]
    pub out_dir: PathBuf,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub data: DataBlock,
    #[serde(default)]
    pub degrade: DegradeBlock,
    #[serde(default)]
    pub source: SourceBlock,
    #[serde(default)]
    pub adapt: AdaptBlock,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_out() -> PathBuf {
    PathBuf::from("runs/default")
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            out_dir: default_out(),
            seed: 0,
            data: DataBlock::default(),
            degrade: DegradeBlock::default(),
            source: SourceBlock::default(),
            adapt: AdaptBlock::default(),
            eval: EvalConfig::default(),
        }
    }
}

fn invalid(key: &str, why: impl std::fmt::Display) -> CliError {
    CliError::Validation {
        key: key.to_string(),
        message: why.to_string(),
    }
}

/// Prefixes the key named by a core validation message (`key: why`).
fn scoped(prefix: &str, e: starmt::Error) -> CliError {
    let msg = match e {
        starmt::Error::Config(m) | starmt::Error::InvalidArgument(m) => m,
        other => other.to_string(),
    };
    match msg.split_once(": ") {
        Some((k, why)) if !k.contains(' ') => invalid(&format!("{prefix}.{k}"), why),
        _ => invalid(prefix, msg),
    }
}

impl ExperimentConfig {
    /// Parses TOML, naming the offending key on failure.
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let de = toml::Deserializer::new(text);
        serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            let inner = e.into_inner();
            let message = inner.message().trim().to_string();
            let key = match unknown_field(&message) {
                Some(f) if path == "." => f,
                Some(f) if path == f || path.ends_with(&format!(".{f}")) => path,
                Some(f) => format!("{path}.{f}"),
                None => path,
            };
            invalid(&key, message)
        })
    }

    /// Reads a TOML config, or the `config` field of a `run.json` record.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Missing {
            path: path.to_path_buf(),
            message: e.to_string(),
        })?;
        if path.extension().is_some_and(|e| e == "json") {
            let rec: RunRecord = serde_json::from_str(&text).map_err(|e| invalid("run.json", e))?;
            return Ok(rec.config);
        }
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let d = &self.data;
        if d.external.is_none() && d.n_sequences == 0 {
            return Err(invalid("data.n_sequences", "must be ≥ 1"));
        }
        if let Some(p) = &d.external {
            if !p.join(starmt::dataset::MANIFEST_FILE).exists() {
                return Err(invalid(
                    "data.external",
                    format!("{} has no dataset manifest", p.display()),
                ));
            }
        }
        starmt::dataset::split_sizes(d.n_sequences, d.split)
            .map_err(|e| invalid("data.split", e))?;
        d.generator
            .validate()
            .map_err(|e| scoped("data.generator", e))?;
        if self.degrade.kinds.is_empty() {
            return Err(invalid(
                "degrade.kinds",
                "at least one degradation is required",
            ));
        }
        validate_ranges(&self.degrade.ranges)?;
        self.source
            .arch
            .validate()
            .map_err(|e| scoped("source.arch", e))?;
        if self.source.arch.n_classes != d.generator.n_classes && d.external.is_none() {
            return Err(invalid(
                "source.arch.n_classes",
                format!(
                    "{} differs from data.generator.n_classes = {}",
                    self.source.arch.n_classes, d.generator.n_classes
                ),
            ));
        }
        if self.source.train.k == 0 {
            return Err(invalid("source.train.k", "must be ≥ 1"));
        }
        if self.adapt.methods.contains(&Method::SourceOnly) {
            return Err(invalid(
                "adapt.methods",
                "source_only is not an adaptation method",
            ));
        }
        if self.adapt.seeds.is_empty() {
            return Err(invalid("adapt.seeds", "at least one seed is required"));
        }
        self.adapt
            .params
            .validate()
            .map_err(|e| scoped("adapt.params", e))?;
        let e = &self.eval;
        if e.k == 0 {
            return Err(invalid("eval.k", "must be ≥ 1"));
        }
        if !(0.0..=1.0).contains(&e.nms_iou) {
            return Err(invalid(
                "eval.nms_iou",
                format!("{} not in [0, 1]", e.nms_iou),
            ));
        }
        if !(0.0..=1.0).contains(&e.conf_thresh) {
            return Err(invalid(
                "eval.conf_thresh",
                format!("{} not in [0, 1]", e.conf_thresh),
            ));
        }
        if !starmt::dataset::SPLITS.contains(&e.split.as_str()) {
            return Err(invalid(
                "eval.split",
                format!("unknown split '{}'", e.split),
            ));
        }
        Ok(())
    }

    /// Hash of the named blocks plus the master seed, as `sha256:<hex>`.
    pub fn blocks_hash(&self, blocks: &[&str]) -> String {
        let full = serde_json::to_value(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(format!("seed={};", self.seed));
        for b in blocks {
            h.update(format!("{b}={};", full[b]));
        }
        format!("sha256:{}", hex::encode(h.finalize()))
    }

    /// Hash of everything but the output directory.
    pub fn hash(&self) -> String {
        self.blocks_hash(&["data", "degrade", "source", "adapt", "eval"])
    }
}

fn unknown_field(message: &str) -> Option<String> {
    let rest = message.strip_prefix("unknown field `")?;
    Some(rest[..rest.find('`')?].to_string())
}

fn validate_ranges(r: &DegradationRanges) -> Result<(), CliError> {
    let pair = |key: &str, (lo, hi): (f64, f64)| {
        if !(lo >= 0.0 && lo <= hi && hi.is_finite()) {
            Err(invalid(
                &format!("degrade.ranges.{key}"),
                format!("({lo}, {hi}) invalid"),
            ))
        } else {
            Ok(())
        }
    };
    pair("noise_sigma", r.noise_sigma)?;
    pair("haze_beta", r.haze_beta)?;
    pair("turbulence_strength", r.turbulence_strength)?;
    pair("turbulence_spatial_sigma", r.turbulence_spatial_sigma)?;
    if !(0.0..=1.0).contains(&r.haze_a) {
        return Err(invalid(
            "degrade.ranges.haze_a",
            format!("{} not in [0, 1]", r.haze_a),
        ));
    }
    if !(0.0..1.0).contains(&r.turbulence_temporal_corr) {
        return Err(invalid(
            "degrade.ranges.turbulence_temporal_corr",
            format!("{} not in [0, 1)", r.turbulence_temporal_corr),
        ));
    }
    Ok(())
}

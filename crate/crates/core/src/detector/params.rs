use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Which part of the detector a tensor belongs to. `Backbone` covers the
/// single-frame network including its dense heads; `Tam` is the temporal
/// aggregation module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Backbone,
    Tam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArchConfig {
    /// Output channels of the four backbone stages. The first three stages
    /// downsample by 2; the last keeps resolution, so the grid stride is 8.
    pub channels: [usize; 4],
    pub n_classes: usize,
    /// Hidden width of the TAM projection; 0 makes it a single linear map.
    pub tam_hidden: usize,
    /// Project the mixed feature minus the proposal's own feature.
    pub tam_relative: bool,
    /// Softmax temperature applied to cosine affinities.
    pub attn_temperature: f64,
    pub leaky_slope: f64,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self {
            channels: [16, 32, 48, 64],
            n_classes: 4,
            tam_hidden: 0,
            tam_relative: false,
            attn_temperature: 0.1,
            leaky_slope: 0.1,
        }
    }
}

impl ArchConfig {
    pub const STRIDE: usize = 8;
    pub const STAGE_STRIDES: [usize; 4] = [2, 2, 2, 1];

    pub fn feat_dim(&self) -> usize {
        self.channels[3]
    }

    pub fn stride(&self) -> usize {
        Self::STRIDE
    }

    /// `(name, shape, scope)` for every tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>, Scope)> {
        let mut out = Vec::new();
        let mut cin = 3;
        for (i, &c) in self.channels.iter().enumerate() {
            out.push((
                format!("backbone.conv{i}.weight"),
                vec![c, cin, 3, 3],
                Scope::Backbone,
            ));
            out.push((format!("backbone.conv{i}.bias"), vec![c], Scope::Backbone));
            cin = c;
        }
        let d = self.feat_dim();
        for (name, n) in [("obj", 1), ("cls", self.n_classes), ("box", 4)] {
            out.push((format!("head.{name}.weight"), vec![d, n], Scope::Backbone));
            out.push((format!("head.{name}.bias"), vec![n], Scope::Backbone));
        }
        if self.tam_hidden == 0 {
            out.push((
                "tam.proj.weight".into(),
                vec![d, self.n_classes],
                Scope::Tam,
            ));
            out.push(("tam.proj.bias".into(), vec![self.n_classes], Scope::Tam));
        } else {
            out.push((
                "tam.fc1.weight".into(),
                vec![d, self.tam_hidden],
                Scope::Tam,
            ));
            out.push(("tam.fc1.bias".into(), vec![self.tam_hidden], Scope::Tam));
            out.push((
                "tam.fc2.weight".into(),
                vec![self.tam_hidden, self.n_classes],
                Scope::Tam,
            ));
            out.push(("tam.fc2.bias".into(), vec![self.n_classes], Scope::Tam));
        }
        out
    }

    /// Hash of the layer spec; two parameter sets are interchangeable iff equal.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for (name, shape, scope) in self.layout() {
            h.update(format!("{name}:{shape:?}:{scope:?};"));
        }
        h.update(format!(
            "strides={:?};temp={:e};slope={:e}",
            Self::STAGE_STRIDES,
            self.attn_temperature,
            self.leaky_slope
        ));
        if self.tam_relative {
            h.update("relative;");
        }
        hex::encode(&h.finalize()[..16])
    }

    pub fn validate(&self) -> Result<()> {
        if self.channels.iter().any(|&c| c == 0) || self.n_classes < 2 {
            return Err(Error::Config(format!("degenerate architecture {self:?}")));
        }
        if !(self.attn_temperature > 0.0) {
            return Err(Error::Config("attn_temperature must be > 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub name: String,
    pub scope: Scope,
    pub value: Tensor,
}

/// Named detector weights partitioned into backbone and TAM scopes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub arch: ArchConfig,
    pub tensors: Vec<ParamTensor>,
}

impl ModelParams {
    /// Fresh weights: He-normal convolutions, small heads, objectness prior of 1%.
    pub fn init(arch: &ArchConfig, seed_value: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = seed::rng(seed_value);
        let tensors = arch
            .layout()
            .into_iter()
            .map(|(name, shape, scope)| {
                let n: usize = shape.iter().product();
                let data: Vec<f64> = if name.ends_with(".bias") {
                    let fill = if name == "head.obj.bias" {
                        (0.01f64 / 0.99).ln()
                    } else if name == "head.cls.bias" {
                        -2.0
                    } else {
                        0.0
                    };
                    vec![fill; n]
                } else {
                    let fan_in: usize = if shape.len() == 4 {
                        shape[1] * shape[2] * shape[3]
                    } else {
                        shape[0]
                    };
                    let std = if name.starts_with("backbone") || name == "tam.fc1.weight" {
                        (2.0 / fan_in as f64).sqrt()
                    } else {
                        0.01
                    };
                    let dist = Normal::new(0.0, std).unwrap();
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                };
                ParamTensor {
                    name,
                    scope,
                    value: Tensor::from_vec(&shape, data).expect("layout shape"),
                }
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            tensors,
        })
    }

    pub fn fingerprint(&self) -> String {
        self.arch.fingerprint()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.name == name)
            .map(|t| &t.value)
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.value.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.value.is_finite())
    }

    /// Layout and shapes match the architecture.
    pub fn check_layout(&self) -> Result<()> {
        let layout = self.arch.layout();
        if layout.len() != self.tensors.len() {
            return Err(Error::Shape(
                "parameter count does not match architecture".into(),
            ));
        }
        for ((name, shape, scope), t) in layout.iter().zip(&self.tensors) {
            if *name != t.name || shape.as_slice() != t.value.shape() || *scope != t.scope {
                return Err(Error::Shape(format!(
                    "parameter {} does not match layout",
                    t.name
                )));
            }
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &ModelParams) -> Result<()> {
        let (a, b) = (self.fingerprint(), other.fingerprint());
        if a != b {
            return Err(Error::Fingerprint {
                expected: a,
                found: b,
            });
        }
        Ok(())
    }

    /// Rounds every weight to the nearest `f32`, the precision of checkpoints.
    pub fn quantize_f32(&mut self) {
        for t in &mut self.tensors {
            t.value
                .data_mut()
                .iter_mut()
                .for_each(|v| *v = *v as f32 as f64);
        }
    }

    /// Small random perturbation, used by tests that need distinct weights.
    pub fn perturb(&mut self, scale: f64, rng: &mut impl Rng) {
        for t in &mut self.tensors {
            for v in t.value.data_mut() {
                *v += scale * rng.gen_range(-1.0..1.0);
            }
        }
    }
}

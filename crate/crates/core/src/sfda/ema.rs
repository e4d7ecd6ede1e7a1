//! Teacher/student pair and the exponential moving average update.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::detector::{ModelParams, Scope};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EmaScope {
    All,
    BackboneOnly,
}

impl EmaScope {
    pub fn covers(&self, scope: Scope) -> bool {
        match self {
            EmaScope::All => true,
            EmaScope::BackboneOnly => scope == Scope::Backbone,
        }
    }
}

impl FromStr for EmaScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "all" => Ok(EmaScope::All),
            "backbone_only" => Ok(EmaScope::BackboneOnly),
            other => Err(Error::InvalidArgument(format!(
                "unknown EMA scope '{other}'"
            ))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct TeacherStudent {
    pub teacher: ModelParams,
    pub student: ModelParams,
    pub alpha: f64,
    /// Number of EMA updates applied so far.
    pub iteration: usize,
}

impl TeacherStudent {
    /// Both models start as copies of `source`.
    pub fn new(source: &ModelParams, alpha: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::Config(format!("alpha = {alpha} outside [0, 1]")));
        }
        Ok(Self {
            teacher: source.clone(),
            student: source.clone(),
            alpha,
            iteration: 0,
        })
    }
}

/// `θ_T ← α·θ_T + (1−α)·θ_S` for every tensor whose scope is covered.
pub fn ema_update(ts: &mut TeacherStudent, scope: EmaScope) -> Result<()> {
    ts.teacher.same_architecture(&ts.student)?;
    let a = ts.alpha;
    for (t, s) in ts.teacher.tensors.iter_mut().zip(&ts.student.tensors) {
        if !scope.covers(t.scope) {
            continue;
        }
        for (vt, vs) in t.value.data_mut().iter_mut().zip(s.value.data()) {
            *vt = a * *vt + (1.0 - a) * *vs;
        }
    }
    ts.iteration += 1;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::ArchConfig;

    fn pair(alpha: f64) -> TeacherStudent {
        let p = ModelParams::init(&ArchConfig::default(), 3).unwrap();
        let mut ts = TeacherStudent::new(&p, alpha).unwrap();
        ts.student.perturb(0.1, &mut crate::seed::rng(9));
        ts
    }

    #[test]
    fn fixed_points() {
        let mut ts = pair(1.0);
        let before = ts.teacher.clone();
        ema_update(&mut ts, EmaScope::All).unwrap();
        assert_eq!(ts.teacher, before);
        assert_eq!(ts.iteration, 1);

        let mut ts = pair(0.0);
        ema_update(&mut ts, EmaScope::All).unwrap();
        assert_eq!(ts.teacher, ts.student);
    }

    #[test]
    fn scalar_case() {
        let mut ts = pair(0.9);
        ts.teacher.tensors[0].value.data_mut()[0] = 1.0;
        ts.student.tensors[0].value.data_mut()[0] = 0.0;
        ema_update(&mut ts, EmaScope::All).unwrap();
        assert!((ts.teacher.tensors[0].value.data()[0] - 0.9).abs() < 1e-15);
    }

    #[test]
    fn backbone_scope_leaves_tam_untouched() {
        let mut ts = pair(0.5);
        let before = ts.teacher.clone();
        ema_update(&mut ts, EmaScope::BackboneOnly).unwrap();
        for (a, b) in before.tensors.iter().zip(&ts.teacher.tensors) {
            if a.scope == Scope::Tam {
                assert_eq!(a.value, b.value);
            } else {
                assert_ne!(a.value, b.value);
            }
        }
    }

    #[test]
    fn unknown_scope_tag() {
        assert!("tam_only".parse::<EmaScope>().is_err());
        assert_eq!(
            "backbone_only".parse::<EmaScope>().unwrap(),
            EmaScope::BackboneOnly
        );
    }
}

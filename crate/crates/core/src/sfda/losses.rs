//! Teacher/student passes, the two stage losses, self-entropy and the stage
//! schedule.

use log::warn;
use serde::{Deserialize, Serialize};

use crate::detector::model::{backbone_graph, tam_graph, BackboneNodes, Bound};
use crate::detector::{select_topk_rows, DenseGrid, ModelParams};
use crate::error::{Error, Result};
use crate::graph::{bce_value, Graph, NodeId};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Stage {
    Trs,
    Srs,
}

impl Stage {
    pub fn as_str(&self) -> &'static str {
        match self {
            Stage::Trs => "TRS",
            Stage::Srs => "SRS",
        }
    }
}

/// TRS iff `floor(iteration / tau)` is even.
pub fn stage_of(iteration: usize, tau: usize) -> Stage {
    assert!(tau >= 1, "tau must be ≥ 1");
    if (iteration / tau) % 2 == 0 {
        Stage::Trs
    } else {
        Stage::Srs
    }
}

/// `−(1/(N·n_c)) Σ_i Σ_c s ln s` with `0 ln 0 = 0`. `None` when there are no
/// proposals or no classes.
pub fn mean_self_entropy<S: AsRef<[f64]>>(scores: &[S]) -> Option<f64> {
    let mut sum = 0.0;
    let mut n = 0usize;
    for row in scores {
        for &s in row.as_ref() {
            if s > 0.0 {
                sum -= s * s.ln();
            }
            n += 1;
        }
    }
    (n > 0).then(|| sum / n as f64)
}

/// Indices of the rows whose `objectness · max_c s` reaches `conf`, i.e. the
/// proposals that would be reported as detections.
pub fn detected_rows<S: AsRef<[f64]>>(objectness: &[f64], scores: &[S], conf: f64) -> Vec<usize> {
    scores
        .iter()
        .zip(objectness)
        .enumerate()
        .filter(|(_, (s, &p))| p * s.as_ref().iter().cloned().fold(0.0, f64::max) >= conf)
        .map(|(i, _)| i)
        .collect()
}

/// [`mean_self_entropy`] over the detected proposals only; `None` when no
/// proposal reaches `conf`.
pub fn detected_self_entropy<S: AsRef<[f64]>>(
    objectness: &[f64],
    scores: &[S],
    conf: f64,
) -> Option<f64> {
    let kept: Vec<&[f64]> = detected_rows(objectness, scores, conf)
        .into_iter()
        .map(|i| scores[i].as_ref())
        .collect();
    mean_self_entropy(&kept)
}

/// Which loss terms take part; all on by default.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossTerms {
    pub mse: bool,
    pub bce: bool,
    pub cls: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self {
            mse: true,
            bce: true,
            cls: true,
        }
    }
}

/// Teacher outputs on the weak view, all frames, detached.
#[derive(Clone, Debug)]
pub struct TeacherPass {
    /// `[T, d_f, gh, gw]`
    pub features: Tensor,
    pub grid: DenseGrid,
    /// Top-k rows per frame, frame-major.
    pub rows: Vec<usize>,
    /// Post-aggregation class scores `[rows.len(), n_c]`.
    pub scores: Tensor,
}

pub fn teacher_pass(teacher: &ModelParams, input: Tensor, k: usize) -> Result<TeacherPass> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, teacher, |_| false);
    let x = g.constant(input);
    let nodes = backbone_graph(&mut g, teacher, &bound, x)?;
    let grid = DenseGrid::from_nodes(&g, &nodes, teacher.arch.stride());
    let rows = select_topk_rows(&grid, k)?;
    let refined = tam_graph(&mut g, teacher, &bound, &nodes, &rows)?;
    Ok(TeacherPass {
        features: g.value(nodes.features).clone(),
        scores: g.value(refined).clone(),
        grid,
        rows,
    })
}

impl TeacherPass {
    pub fn scores_as_rows(&self) -> Vec<Vec<f64>> {
        (0..self.scores.dim(0))
            .map(|i| self.scores.row(i).to_vec())
            .collect()
    }

    pub fn objectness(&self) -> Vec<f64> {
        self.rows.iter().map(|&r| self.grid.objectness(r)).collect()
    }

    /// Self-entropy over the teacher's detections at confidence `conf`.
    pub fn mean_self_entropy(&self, conf: f64) -> Option<f64> {
        detected_self_entropy(&self.objectness(), &self.scores_as_rows(), conf)
    }
}

/// Student nodes on a graph, aligned with a teacher pass.
#[derive(Clone, Debug)]
pub struct StudentPass {
    pub nodes: BackboneNodes,
    /// Teacher frame indices the student saw, ascending.
    pub retained: Vec<usize>,
    /// Indices into the teacher's selected rows that fall on retained frames.
    pub matched: Vec<usize>,
    /// Student class scores at the matched cells, `[matched.len(), n_c]`;
    /// post-aggregation when built with `aggregate`, head scores otherwise.
    pub scores: Option<NodeId>,
    /// Student sigmoid objectness at the matched cells, detached.
    pub objectness: Vec<f64>,
}

/// Runs the student on `input` (the retained frames of the strong view, in
/// order) and gathers its outputs at the teacher's selected cells.
pub fn student_pass(
    g: &mut Graph,
    student: &ModelParams,
    bound: &Bound,
    input: Tensor,
    retained: &[usize],
    teacher: &TeacherPass,
    aggregate: bool,
) -> Result<StudentPass> {
    if input.dim(0) != retained.len() {
        return Err(Error::Shape(format!(
            "student input has {} frames, {} retained",
            input.dim(0),
            retained.len()
        )));
    }
    let x = g.constant(input);
    let nodes = backbone_graph(g, student, bound, x)?;
    let cells = nodes.cells_per_frame();
    if cells != teacher.grid.cells_per_frame() {
        return Err(Error::Shape("teacher and student grids differ".into()));
    }
    let mut matched = Vec::new();
    let mut rows = Vec::new();
    for (i, &r) in teacher.rows.iter().enumerate() {
        if let Ok(pos) = retained.binary_search(&(r / cells)) {
            matched.push(i);
            rows.push(pos * cells + r % cells);
        }
    }
    let (scores, objectness) = if rows.is_empty() {
        (None, Vec::new())
    } else {
        let s = if aggregate {
            tam_graph(g, student, bound, &nodes, &rows)?
        } else {
            let logits = g.gather_rows(nodes.cls, &rows)?;
            g.sigmoid(logits)
        };
        let obj = g.value(nodes.obj);
        let p = rows
            .iter()
            .map(|&r| crate::graph::sigmoid_scalar(obj.data()[r]))
            .collect();
        (Some(s), p)
    };
    Ok(StudentPass {
        nodes,
        retained: retained.to_vec(),
        matched,
        scores,
        objectness,
    })
}

/// Loss node plus the detached value of each term (unweighted).
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub total: NodeId,
    pub mse: f64,
    pub bce: f64,
    pub cls: f64,
}

fn teacher_targets(teacher: &TeacherPass, matched: &[usize]) -> Tensor {
    teacher.scores.select_outer(matched)
}

fn feature_and_score_terms(
    g: &mut Graph,
    teacher: &TeacherPass,
    student: &StudentPass,
    terms: &LossTerms,
) -> Result<(Vec<NodeId>, f64, f64)> {
    let mut parts = Vec::new();
    let (mut mse_v, mut bce_v) = (0.0, 0.0);
    if terms.mse {
        let target = teacher.features.select_outer(&student.retained);
        let m = g.mse(student.nodes.features, target)?;
        mse_v = g.value(m).item();
        parts.push(m);
    }
    if terms.bce {
        match student.scores {
            Some(s) => {
                let b = g.bce(s, teacher_targets(teacher, &student.matched), None)?;
                bce_v = g.value(b).item();
                parts.push(b);
            }
            None => warn!("no teacher proposal on a retained frame; score term skipped"),
        }
    }
    Ok((parts, mse_v, bce_v))
}

fn sum_parts(g: &mut Graph, parts: &[NodeId]) -> Result<NodeId> {
    match parts.split_first() {
        None => Ok(g.constant(Tensor::scalar(0.0))),
        Some((&first, rest)) => rest.iter().try_fold(first, |acc, &p| g.add(acc, p)),
    }
}

/// Feature MSE over the retained frames plus BCE between the teacher's
/// post-aggregation scores and the student's scores at the same cells.
pub fn trs_loss(
    g: &mut Graph,
    teacher: &TeacherPass,
    student: &StudentPass,
    terms: &LossTerms,
) -> Result<LossParts> {
    let (parts, mse, bce) = feature_and_score_terms(g, teacher, student, terms)?;
    Ok(LossParts {
        total: sum_parts(g, &parts)?,
        mse,
        bce,
        cls: 0.0,
    })
}

/// Objectness-weighted BCE: `−(1/N) Σ_i p_i (1/n_c) Σ_c [t ln s + (1−t) ln(1−s)]`.
/// `p` is treated as a constant weight.
pub fn certainty_weighted_cls_loss(
    g: &mut Graph,
    student_scores: NodeId,
    teacher_scores: Tensor,
    objectness: &[f64],
) -> Result<NodeId> {
    g.bce(student_scores, teacher_scores, Some(objectness.to_vec()))
}

/// Plain-value form of [`certainty_weighted_cls_loss`]; 0 for `N = 0`.
pub fn certainty_weighted_cls_value(s_t: &Tensor, s_s: &Tensor, p_s: &[f64]) -> f64 {
    if s_t.len() == 0 {
        warn!("certainty-weighted loss over zero proposals");
        return 0.0;
    }
    bce_value(s_s, s_t, Some(p_s))
}

/// TRS terms on single-frame student scores plus `gamma` times the
/// certainty-weighted term.
pub fn srs_loss(
    g: &mut Graph,
    teacher: &TeacherPass,
    student: &StudentPass,
    gamma: f64,
    terms: &LossTerms,
) -> Result<LossParts> {
    let (mut parts, mse, bce) = feature_and_score_terms(g, teacher, student, terms)?;
    let mut cls = 0.0;
    if terms.cls && gamma != 0.0 {
        if let Some(s) = student.scores {
            let c = certainty_weighted_cls_loss(
                g,
                s,
                teacher_targets(teacher, &student.matched),
                &student.objectness,
            )?;
            cls = g.value(c).item();
            parts.push(g.scale(c, gamma));
        }
    }
    Ok(LossParts {
        total: sum_parts(g, &parts)?,
        mse,
        bce,
        cls,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stage_schedule() {
        assert_eq!(stage_of(0, 100), Stage::Trs);
        assert_eq!(stage_of(99, 100), Stage::Trs);
        assert_eq!(stage_of(100, 100), Stage::Srs);
        assert_eq!(stage_of(199, 100), Stage::Srs);
        assert_eq!(stage_of(200, 100), Stage::Trs);
        for t in 0..10 {
            assert_eq!(
                stage_of(t, 1),
                if t % 2 == 0 { Stage::Trs } else { Stage::Srs }
            );
        }
    }

    #[test]
    fn entropy_reference_values() {
        assert_eq!(
            mean_self_entropy(&[vec![0.0, 1.0], vec![1.0, 0.0]]),
            Some(0.0)
        );
        let h = mean_self_entropy(&vec![vec![0.5; 4]; 3]).unwrap();
        assert!((h - 0.3466).abs() < 1e-4);
        let e = (-1.0f64).exp();
        let h = mean_self_entropy(&[vec![e; 2]]).unwrap();
        assert!((h - 0.3679).abs() < 1e-4);
        assert_eq!(mean_self_entropy::<Vec<f64>>(&[]), None);
    }

    #[test]
    fn detection_filter() {
        let scores = vec![vec![0.9, 0.1], vec![0.5, 0.5], vec![0.2, 0.3]];
        let obj = [0.9, 1.0, 0.9];
        assert_eq!(detected_rows(&obj, &scores, 0.5), vec![0, 1]);
        assert_eq!(detected_rows(&obj, &scores, 0.0), vec![0, 1, 2]);
        assert_eq!(detected_self_entropy(&obj, &scores, 0.95), None);
        let h = detected_self_entropy(&obj, &scores, 0.5).unwrap();
        assert_eq!(h, mean_self_entropy(&scores[..2]).unwrap());
    }

    #[test]
    fn certainty_weighted_hand_case() {
        let s_t = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
        let s_s = Tensor::from_vec(&[1, 2], vec![0.8, 0.2]).unwrap();
        let v = certainty_weighted_cls_value(&s_t, &s_s, &[0.5]);
        let expected = -0.5 * 0.5 * (0.8f64.ln() + 0.8f64.ln());
        assert!((v - expected).abs() < 1e-12);
        assert!((v - 0.1116).abs() < 1e-4);
        let doubled = certainty_weighted_cls_value(&s_t, &s_s, &[1.0]);
        assert!((doubled - 2.0 * v).abs() < 1e-12);
        let empty = Tensor::zeros(&[0, 2]);
        assert_eq!(certainty_weighted_cls_value(&empty, &empty, &[]), 0.0);
    }
}

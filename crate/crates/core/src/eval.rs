//! AP50 and model evaluation over dataset splits.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use crate::bbox::iou;
use crate::bbox::BBox;
use crate::datagen::{BoxLabel, VideoSequence};
use crate::dataset::{read_sequence, DatasetManifest, LabelAccess};
use crate::detector::{run_sequence, Detection, ModelParams};
use crate::error::{Error, Result};
use crate::sfda::detected_self_entropy;
use crate::sfda::losses::detected_rows;

pub const IOU_THRESHOLD: f64 = 0.5;

/// A detection tagged with the sequence it came from.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoredDetection {
    pub sequence: usize,
    pub frame: usize,
    pub class_id: usize,
    pub confidence: f64,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub sequence: usize,
    pub frame: usize,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ApResult {
    /// Per class with at least one ground truth.
    pub per_class: BTreeMap<usize, f64>,
    pub mean: f64,
}

/// Area under the monotonised precision envelope (all-point interpolation).
pub fn average_precision(recall: &[f64], precision: &[f64]) -> f64 {
    let mut mrec = vec![0.0];
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    let mut mpre = vec![0.0];
    mpre.extend_from_slice(precision);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        mpre[i] = mpre[i].max(mpre[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mpre[i])
        .sum()
}

/// Greedy VOC-style matching for one class. Detections are visited by
/// descending confidence (ties by input order); each takes the unmatched
/// ground truth of the same sequence and frame with the highest IoU, provided
/// it is ≥ `IOU_THRESHOLD`. Returns the TP flag per visited detection.
fn match_class(dets: &[&ScoredDetection], gts: &[&GroundTruth]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut used = vec![false; gts.len()];
    order
        .iter()
        .map(|&i| {
            let d = dets[i];
            let mut best: Option<(f64, usize)> = None;
            for (j, g) in gts.iter().enumerate() {
                if used[j] || g.sequence != d.sequence || g.frame != d.frame {
                    continue;
                }
                let o = iou(&d.bbox, &g.bbox);
                if o >= IOU_THRESHOLD && best.map_or(true, |(bo, _)| o > bo) {
                    best = Some((o, j));
                }
            }
            match best {
                Some((_, j)) => {
                    used[j] = true;
                    true
                }
                None => false,
            }
        })
        .collect()
}

pub fn ap50(detections: &[ScoredDetection], ground_truth: &[GroundTruth]) -> ApResult {
    let mut per_class = BTreeMap::new();
    let classes: std::collections::BTreeSet<usize> =
        ground_truth.iter().map(|g| g.class_id).collect();
    for c in classes {
        let gts: Vec<&GroundTruth> = ground_truth.iter().filter(|g| g.class_id == c).collect();
        let dets: Vec<&ScoredDetection> = detections.iter().filter(|d| d.class_id == c).collect();
        let tp = match_class(&dets, &gts);
        let (mut ntp, mut nfp) = (0.0, 0.0);
        let mut recall = Vec::with_capacity(tp.len());
        let mut precision = Vec::with_capacity(tp.len());
        for hit in tp {
            if hit {
                ntp += 1.0;
            } else {
                nfp += 1.0;
            }
            recall.push(ntp / gts.len() as f64);
            precision.push(ntp / (ntp + nfp));
        }
        per_class.insert(c, average_precision(&recall, &precision));
    }
    let mean = if per_class.is_empty() {
        0.0
    } else {
        per_class.values().sum::<f64>() / per_class.len() as f64
    };
    ApResult { per_class, mean }
}

pub fn ground_truth_of(sequence: usize, labels: &[BoxLabel]) -> Vec<GroundTruth> {
    labels
        .iter()
        .map(|l| GroundTruth {
            sequence,
            frame: l.frame,
            class_id: l.class_id,
            bbox: l.bbox,
        })
        .collect()
}

pub fn tag_detections(sequence: usize, dets: &[Detection]) -> Vec<ScoredDetection> {
    dets.iter()
        .map(|d| ScoredDetection {
            sequence,
            frame: d.frame,
            class_id: d.class_id,
            confidence: d.confidence,
            bbox: d.bbox,
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: usize,
    pub nms_iou: f64,
    pub conf_thresh: f64,
    /// Detection confidence a proposal needs to count towards the
    /// self-entropy.
    pub entropy_conf: f64,
    pub split: String,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            k: 30,
            nms_iou: 0.5,
            conf_thresh: 0.05,
            entropy_conf: 0.5,
            split: "test".into(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub model_id: String,
    pub dataset_id: String,
    pub split: String,
    /// Set when the split is the one the model could have trained on.
    pub train_split_warning: bool,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub mean_ap50: f64,
    pub mean_self_entropy: f64,
    pub detections: usize,
    pub ground_truths: usize,
    pub wall_clock_s: f64,
}

/// Per-sequence outputs needed for AP and entropy.
pub struct SequenceEval {
    pub detections: Vec<ScoredDetection>,
    pub ground_truth: Vec<GroundTruth>,
    /// Sum of `−s·ln s` over the post-aggregation scores of detected
    /// proposals, and the number of terms.
    pub entropy_sum: f64,
    pub entropy_terms: usize,
}

pub fn evaluate_sequences(
    params: &ModelParams,
    seqs: &[VideoSequence],
    cfg: &EvalConfig,
) -> Result<Vec<SequenceEval>> {
    seqs.par_iter()
        .enumerate()
        .map(|(i, seq)| {
            let out = run_sequence(params, seq, cfg.k)?;
            let dets = out.detections(cfg.nms_iou, cfg.conf_thresh);
            let obj: Vec<f64> = out.rows.iter().map(|&r| out.grid.objectness(r)).collect();
            let kept = detected_rows(&obj, &out.refined, cfg.entropy_conf).len();
            let h = detected_self_entropy(&obj, &out.refined, cfg.entropy_conf).unwrap_or(0.0);
            let terms = kept * out.refined.first().map_or(0, |r| r.len());
            Ok(SequenceEval {
                detections: tag_detections(i, &dets),
                ground_truth: ground_truth_of(i, &seq.labels),
                entropy_sum: h * terms as f64,
                entropy_terms: terms,
            })
        })
        .collect()
}

/// AP50 and mean self-entropy of `params` over in-memory sequences.
pub fn evaluate_in_memory(
    params: &ModelParams,
    seqs: &[VideoSequence],
    cfg: &EvalConfig,
) -> Result<(ApResult, f64, usize, usize)> {
    if seqs.is_empty() {
        return Err(Error::Empty("evaluation split".into()));
    }
    let per = evaluate_sequences(params, seqs, cfg)?;
    let dets: Vec<ScoredDetection> = per
        .iter()
        .flat_map(|p| p.detections.iter().cloned())
        .collect();
    let gts: Vec<GroundTruth> = per
        .iter()
        .flat_map(|p| p.ground_truth.iter().cloned())
        .collect();
    let (hs, hn) = per.iter().fold((0.0, 0usize), |(s, n), p| {
        (s + p.entropy_sum, n + p.entropy_terms)
    });
    let ap = ap50(&dets, &gts);
    Ok((
        ap,
        if hn > 0 { hs / hn as f64 } else { 0.0 },
        dets.len(),
        gts.len(),
    ))
}

pub fn evaluate_model(
    params: &ModelParams,
    model_id: &str,
    manifest: &DatasetManifest,
    cfg: &EvalConfig,
) -> Result<MetricsRecord> {
    let start = Instant::now();
    let ids = manifest.nonempty_split(&cfg.split)?;
    let seqs = ids
        .iter()
        .map(|id| read_sequence(&manifest.sequence_dir(&cfg.split, id), LabelAccess::Allowed))
        .collect::<Result<Vec<_>>>()?;
    let (ap, h, ndet, ngt) = evaluate_in_memory(params, &seqs, cfg)?;
    Ok(MetricsRecord {
        model_id: model_id.to_string(),
        dataset_id: manifest.name.clone(),
        split: cfg.split.clone(),
        train_split_warning: cfg.split == "train",
        per_class_ap50: ap.per_class,
        mean_ap50: ap.mean,
        mean_self_entropy: h,
        detections: ndet,
        ground_truths: ngt,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det(frame: usize, conf: f64, b: BBox) -> ScoredDetection {
        ScoredDetection {
            sequence: 0,
            frame,
            class_id: 0,
            confidence: conf,
            bbox: b,
        }
    }

    fn gt(frame: usize, b: BBox) -> GroundTruth {
        GroundTruth {
            sequence: 0,
            frame,
            class_id: 0,
            bbox: b,
        }
    }

    #[test]
    fn hand_walked_pr_curve() {
        let g1 = BBox::new(0.0, 0.0, 10.0, 10.0);
        let g2 = BBox::new(20.0, 20.0, 30.0, 30.0);
        let dets = vec![
            det(0, 0.9, g1),
            det(0, 0.8, BBox::new(50.0, 50.0, 60.0, 60.0)),
            det(0, 0.7, g2),
        ];
        let r = ap50(&dets, &[gt(0, g1), gt(0, g2)]);
        assert!((r.mean - 0.8333).abs() < 1e-4, "{}", r.mean);
        assert!((r.mean - 5.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_and_empty() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let r = ap50(&[det(0, 1.0, g)], &[gt(0, g)]);
        assert_eq!(r.mean, 1.0);
        let r = ap50(&[], &[gt(0, g)]);
        assert_eq!(r.mean, 0.0);
        assert_eq!(r.per_class[&0], 0.0);
    }

    #[test]
    fn classes_without_ground_truth_are_excluded() {
        let g = BBox::new(0.0, 0.0, 10.0, 10.0);
        let mut stray = det(0, 0.9, g);
        stray.class_id = 3;
        let r = ap50(&[det(0, 1.0, g), stray], &[gt(0, g)]);
        assert_eq!(r.per_class.len(), 1);
        assert_eq!(r.mean, 1.0);
    }

    #[test]
    fn greedy_prefers_highest_iou() {
        let a = BBox::new(0.0, 0.0, 10.0, 10.0);
        let b = BBox::new(2.0, 0.0, 12.0, 10.0);
        // the detection overlaps b better; a stays free for the second detection
        let dets = vec![det(0, 0.9, BBox::new(2.0, 0.0, 12.0, 10.0)), det(0, 0.8, a)];
        let r = ap50(&dets, &[gt(0, a), gt(0, b)]);
        assert_eq!(r.mean, 1.0);
    }
}

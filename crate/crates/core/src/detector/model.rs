//! Forward passes: backbone and dense heads, top-k proposal selection, cosine
//! affinity, temporal aggregation, and per-frame NMS.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::params::{ArchConfig, ModelParams, Scope};
use crate::bbox::{iou, BBox};
use crate::datagen::VideoSequence;
use crate::error::{Error, Result};
use crate::graph::{sigmoid_scalar, Graph, NodeId};
use crate::tensor::Tensor;

/// Parameters placed on a graph; `ids[i]` corresponds to `params.tensors[i]`.
pub struct Bound {
    pub ids: Vec<NodeId>,
}

impl Bound {
    /// Binds every tensor; those whose scope passes `trainable` become
    /// differentiable leaves, the rest constants.
    pub fn new(g: &mut Graph, params: &ModelParams, trainable: impl Fn(Scope) -> bool) -> Self {
        let ids = params
            .tensors
            .iter()
            .map(|t| {
                if trainable(t.scope) {
                    g.param(t.value.clone())
                } else {
                    g.constant(t.value.clone())
                }
            })
            .collect();
        Self { ids }
    }

    fn by_name(&self, params: &ModelParams, name: &str) -> NodeId {
        let i = params
            .tensors
            .iter()
            .position(|t| t.name == name)
            .unwrap_or_else(|| panic!("missing parameter {name}"));
        self.ids[i]
    }
}

/// Graph nodes of one backbone pass over `n` frames.
#[derive(Clone, Copy, Debug)]
pub struct BackboneNodes {
    /// `[n, d_f, gh, gw]`, the last shared map feeding the heads.
    pub features: NodeId,
    /// `[n·gh·gw, d_f]`
    pub rows: NodeId,
    /// `[n·gh·gw, 1]` objectness logits.
    pub obj: NodeId,
    /// `[n·gh·gw, n_c]` class logits.
    pub cls: NodeId,
    /// `[n·gh·gw, 4]` box regressands: cell offsets then log sizes.
    pub boxes: NodeId,
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl BackboneNodes {
    pub fn cells_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }
}

pub fn backbone_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    input: NodeId,
) -> Result<BackboneNodes> {
    let s = g.value(input).shape().to_vec();
    let stride = params.arch.stride();
    if s.len() != 4 || s[1] != 3 || s[2] % stride != 0 || s[3] % stride != 0 {
        return Err(Error::Shape(format!(
            "backbone input {s:?} must be [n, 3, H, W] with H, W divisible by {stride}"
        )));
    }
    let slope = params.arch.leaky_slope;
    let mut x = input;
    for (i, st) in ArchConfig::STAGE_STRIDES.iter().enumerate() {
        let w = bound.by_name(params, &format!("backbone.conv{i}.weight"));
        let b = bound.by_name(params, &format!("backbone.conv{i}.bias"));
        x = g.conv2d(x, w, b, *st, 1)?;
        x = g.leaky_relu(x, slope);
    }
    let features = x;
    let rows = g.nchw_to_rows(features)?;
    let head = |g: &mut Graph, name: &str| -> Result<NodeId> {
        let w = bound.by_name(params, &format!("head.{name}.weight"));
        let b = bound.by_name(params, &format!("head.{name}.bias"));
        let z = g.matmul(rows, w)?;
        g.add_bias(z, b)
    };
    let obj = head(g, "obj")?;
    let cls = head(g, "cls")?;
    let boxes = head(g, "box")?;
    Ok(BackboneNodes {
        features,
        rows,
        obj,
        cls,
        boxes,
        frames: s[0],
        grid_h: s[2] / stride,
        grid_w: s[3] / stride,
    })
}

/// Cosine affinity of the gathered rows, with zero-norm rows similar only to
/// themselves.
pub fn affinity_graph(g: &mut Graph, feats: NodeId) -> Result<NodeId> {
    let normed = g.normalize_rows(feats)?;
    let aff = g.matmul_nt(normed, normed)?;
    let v = g.value(feats);
    let n = v.dim(0);
    let zero_rows: Vec<usize> = (0..n)
        .filter(|&i| v.row(i).iter().all(|x| *x == 0.0))
        .collect();
    if zero_rows.is_empty() {
        return Ok(aff);
    }
    let mut fix = Tensor::zeros(&[n, n]);
    for i in zero_rows {
        fix.data_mut()[i * n + i] = 1.0;
    }
    let fix = g.constant(fix);
    g.add(aff, fix)
}

/// Temporal aggregation given an affinity matrix.
///
/// For proposal `i`: `m_i = Σ_j softmax_j(A_ij / T_a)·f_j` (minus `f_i` when
/// the architecture is relative), then the refined class logits are
/// `own_logits_i + P(m_i)` with `P` linear or a one-hidden-layer MLP, and the
/// output is their sigmoid.
pub fn tam_from_affinity(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    feats: NodeId,
    own_logits: NodeId,
    affinity: NodeId,
) -> Result<NodeId> {
    let (nf, na) = (g.value(feats).dim(0), g.value(affinity).shape().to_vec());
    if na != [nf, nf] || g.value(own_logits).dim(0) != nf {
        return Err(Error::Shape(format!(
            "aggregation over {nf} proposals with affinity {na:?}"
        )));
    }
    let scaled = g.scale(affinity, 1.0 / params.arch.attn_temperature);
    let weights = g.softmax_rows(scaled)?;
    let mut mixed = g.matmul(weights, feats)?;
    if params.arch.tam_relative {
        let neg = g.scale(feats, -1.0);
        mixed = g.add(mixed, neg)?;
    }
    let z = if params.arch.tam_hidden == 0 {
        let w = bound.by_name(params, "tam.proj.weight");
        let b = bound.by_name(params, "tam.proj.bias");
        let z = g.matmul(mixed, w)?;
        g.add_bias(z, b)?
    } else {
        let w1 = bound.by_name(params, "tam.fc1.weight");
        let b1 = bound.by_name(params, "tam.fc1.bias");
        let w2 = bound.by_name(params, "tam.fc2.weight");
        let b2 = bound.by_name(params, "tam.fc2.bias");
        let h = g.matmul(mixed, w1)?;
        let h = g.add_bias(h, b1)?;
        let h = g.leaky_relu(h, params.arch.leaky_slope);
        let z = g.matmul(h, w2)?;
        g.add_bias(z, b2)?
    };
    let logits = g.add(own_logits, z)?;
    Ok(g.sigmoid(logits))
}

/// TAM over the rows `idx` of a backbone pass; returns refined class scores
/// `[idx.len(), n_c]`.
pub fn tam_graph(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    nodes: &BackboneNodes,
    idx: &[usize],
) -> Result<NodeId> {
    let feats = g.gather_rows(nodes.rows, idx)?;
    let own = g.gather_rows(nodes.cls, idx)?;
    let aff = affinity_graph(g, feats)?;
    tam_from_affinity(g, params, bound, feats, own, aff)
}

/// Dense per-cell predictions of a backbone pass, detached from any graph.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGrid {
    pub frames: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub stride: usize,
    pub n_classes: usize,
    /// `[frames·cells]`
    pub obj_logits: Vec<f64>,
    /// `[frames·cells, n_c]`
    pub cls_logits: Tensor,
    /// `[frames·cells, 4]`
    pub box_reg: Tensor,
    /// `[frames·cells, d_f]`
    pub features: Tensor,
}

impl DenseGrid {
    pub fn from_nodes(g: &Graph, nodes: &BackboneNodes, stride: usize) -> Self {
        let cls = g.value(nodes.cls).clone();
        Self {
            frames: nodes.frames,
            grid_h: nodes.grid_h,
            grid_w: nodes.grid_w,
            stride,
            n_classes: cls.dim(1),
            obj_logits: g.value(nodes.obj).data().to_vec(),
            cls_logits: cls,
            box_reg: g.value(nodes.boxes).clone(),
            features: g.value(nodes.rows).clone(),
        }
    }

    pub fn cells_per_frame(&self) -> usize {
        self.grid_h * self.grid_w
    }

    pub fn objectness(&self, row: usize) -> f64 {
        sigmoid_scalar(self.obj_logits[row])
    }

    pub fn class_scores(&self, row: usize) -> Vec<f64> {
        self.cls_logits
            .row(row)
            .iter()
            .map(|&z| sigmoid_scalar(z))
            .collect()
    }

    /// `p · max_c s` for a row.
    pub fn confidence(&self, row: usize) -> f64 {
        let best = self
            .cls_logits
            .row(row)
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        self.objectness(row) * sigmoid_scalar(best)
    }

    pub fn decode_box(&self, row: usize) -> BBox {
        let cell = row % self.cells_per_frame();
        let (r, c) = (cell / self.grid_w, cell % self.grid_w);
        let reg = self.box_reg.row(row);
        let s = self.stride as f64;
        let cx = (c as f64 + reg[0]) * s;
        let cy = (r as f64 + reg[1]) * s;
        let w = reg[2].clamp(-4.0, 4.0).exp() * s;
        let h = reg[3].clamp(-4.0, 4.0).exp() * s;
        BBox::from_center(cx, cy, w, h)
    }

    pub fn proposal(&self, row: usize) -> Proposal {
        let cells = self.cells_per_frame();
        Proposal {
            frame: row / cells,
            cell: row % cells,
            row,
            feature: self.features.row(row).to_vec(),
            class_logits: self.cls_logits.row(row).to_vec(),
            objectness: self.objectness(row),
            class_scores: self.class_scores(row),
            bbox: self.decode_box(row),
        }
    }
}

/// A selected detection candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub frame: usize,
    /// Raster index of the grid cell within its frame.
    pub cell: usize,
    /// Row in the dense grid (`frame·cells + cell`).
    pub row: usize,
    pub feature: Vec<f64>,
    pub class_logits: Vec<f64>,
    pub objectness: f64,
    pub class_scores: Vec<f64>,
    pub bbox: BBox,
}

impl Proposal {
    pub fn confidence(&self) -> f64 {
        self.objectness * self.class_scores.iter().cloned().fold(0.0, f64::max)
    }
}

/// Per frame, the `k` cells with the highest `p · max_c s`, ties broken by
/// raster order. Returns dense-grid row indices, frame-major.
pub fn select_topk_rows(grid: &DenseGrid, k: usize) -> Result<Vec<usize>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be > 0".into()));
    }
    let cells = grid.cells_per_frame();
    if k > cells {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds {cells} cells per frame"
        )));
    }
    let mut out = Vec::with_capacity(k * grid.frames);
    for f in 0..grid.frames {
        let mut scored: Vec<(f64, usize)> = (0..cells)
            .map(|c| (grid.confidence(f * cells + c), c))
            .collect();
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(Ordering::Equal)
                .then(a.1.cmp(&b.1))
        });
        let mut chosen: Vec<usize> = scored[..k].iter().map(|&(_, c)| f * cells + c).collect();
        chosen.sort_unstable();
        out.extend(chosen);
    }
    Ok(out)
}

pub fn select_topk(grid: &DenseGrid, k: usize) -> Result<Vec<Proposal>> {
    Ok(select_topk_rows(grid, k)?
        .into_iter()
        .map(|r| grid.proposal(r))
        .collect())
}

/// Cosine similarity matrix of proposal features.
pub fn affinity(proposals: &[Proposal]) -> Result<Tensor> {
    if proposals.is_empty() {
        return Err(Error::InvalidArgument(
            "affinity needs at least one proposal".into(),
        ));
    }
    let n = proposals.len();
    let d = proposals[0].feature.len();
    let mut rows = Vec::with_capacity(n * d);
    for p in proposals {
        if p.feature.len() != d {
            return Err(Error::Shape("proposal feature lengths differ".into()));
        }
        rows.extend_from_slice(&p.feature);
    }
    let mut g = Graph::new();
    let f = g.constant(Tensor::from_vec(&[n, d], rows)?);
    let a = affinity_graph(&mut g, f)?;
    Ok(g.value(a).clone())
}

/// Refined class scores for each proposal; objectness and boxes are not touched.
pub fn temporal_aggregate(
    proposals: &[Proposal],
    affinity: &Tensor,
    params: &ModelParams,
) -> Result<Vec<Vec<f64>>> {
    let n = proposals.len();
    if affinity.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "affinity {:?} for {n} proposals",
            affinity.shape()
        )));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let d = proposals[0].feature.len();
    let nc = proposals[0].class_logits.len();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let f = g.constant(Tensor::from_vec(
        &[n, d],
        proposals
            .iter()
            .flat_map(|p| p.feature.iter().cloned())
            .collect(),
    )?);
    let own = g.constant(Tensor::from_vec(
        &[n, nc],
        proposals
            .iter()
            .flat_map(|p| p.class_logits.iter().cloned())
            .collect(),
    )?);
    let a = g.constant(affinity.clone());
    let out = tam_from_affinity(&mut g, params, &bound, f, own, a)?;
    let v = g.value(out);
    Ok((0..n).map(|i| v.row(i).to_vec()).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub frame: usize,
    pub class_id: usize,
    pub confidence: f64,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Greedy NMS: highest confidence first (ties by input order), dropping any
/// box with IoU above `iou_thresh` against an already kept box. Returns kept
/// indices in keep order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep
            .iter()
            .all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh)
        {
            keep.push(i);
        }
    }
    keep
}

/// Outputs of the full video pipeline on one sequence.
#[derive(Clone, Debug)]
pub struct SequenceOutput {
    pub grid: DenseGrid,
    /// Selected rows, frame-major.
    pub rows: Vec<usize>,
    /// Post-aggregation class scores per selected row.
    pub refined: Vec<Vec<f64>>,
}

impl SequenceOutput {
    pub fn detections(&self, nms_iou: f64, conf_thresh: f64) -> Vec<Detection> {
        let mut out = Vec::new();
        for f in 0..self.grid.frames {
            let mut cands: Vec<Detection> = Vec::new();
            for (k, &row) in self.rows.iter().enumerate() {
                if row / self.grid.cells_per_frame() != f {
                    continue;
                }
                let scores = &self.refined[k];
                let (class_id, best) = scores.iter().cloned().enumerate().fold(
                    (0, f64::NEG_INFINITY),
                    |acc, (c, s)| if s > acc.1 { (c, s) } else { acc },
                );
                let confidence = self.grid.objectness(row) * best;
                if confidence >= conf_thresh {
                    cands.push(Detection {
                        frame: f,
                        class_id,
                        confidence,
                        bbox: self.grid.decode_box(row),
                    });
                }
            }
            let boxes: Vec<BBox> = cands.iter().map(|d| d.bbox).collect();
            let scores: Vec<f64> = cands.iter().map(|d| d.confidence).collect();
            for i in nms(&boxes, &scores, nms_iou) {
                out.push(cands[i].clone());
            }
        }
        out
    }
}

/// Inference on an `[n, 3, H, W]` batch: backbone, top-k, affinity, TAM.
pub fn run_frames(params: &ModelParams, input: Tensor, k: usize) -> Result<SequenceOutput> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let x = g.constant(input);
    let nodes = backbone_graph(&mut g, params, &bound, x)?;
    let grid = DenseGrid::from_nodes(&g, &nodes, params.arch.stride());
    let rows = select_topk_rows(&grid, k)?;
    let refined = tam_graph(&mut g, params, &bound, &nodes, &rows)?;
    let v = g.value(refined);
    let refined = (0..rows.len()).map(|i| v.row(i).to_vec()).collect();
    Ok(SequenceOutput {
        grid,
        rows,
        refined,
    })
}

pub fn run_sequence(params: &ModelParams, seq: &VideoSequence, k: usize) -> Result<SequenceOutput> {
    let frames: Vec<usize> = (0..seq.frames).collect();
    run_frames(params, seq.to_nchw(&frames), k)
}

pub fn detect_sequence(
    seq: &VideoSequence,
    params: &ModelParams,
    k: usize,
    nms_iou: f64,
    conf_thresh: f64,
) -> Result<Vec<Detection>> {
    Ok(run_sequence(params, seq, k)?.detections(nms_iou, conf_thresh))
}

/// Backbone only, for callers that need the dense grid.
pub fn backbone_forward(params: &ModelParams, input: Tensor) -> Result<(Tensor, DenseGrid)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let x = g.constant(input);
    let nodes = backbone_graph(&mut g, params, &bound, x)?;
    let grid = DenseGrid::from_nodes(&g, &nodes, params.arch.stride());
    Ok((g.value(nodes.features).clone(), grid))
}

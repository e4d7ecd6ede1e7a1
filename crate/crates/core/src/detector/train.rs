//! Supervised training: the single-frame detection loss, source-domain
//! training in two phases, and TAM-only training against box targets.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::model::{
    affinity_graph, backbone_graph, select_topk_rows, tam_from_affinity, BackboneNodes, Bound,
    DenseGrid,
};
use super::params::{ArchConfig, ModelParams, Scope};
use crate::bbox::{iou, BBox};
use crate::datagen::{BoxLabel, VideoSequence};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::optim::{Optimizer, OptimizerKind};
use crate::seed;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    /// Sequence-level steps for backbone and heads.
    pub backbone_iters: usize,
    /// Steps for the TAM with the backbone frozen.
    pub tam_iters: usize,
    pub lr: f64,
    pub tam_lr: f64,
    /// Proposals per frame fed to the TAM.
    pub k: usize,
    /// Random horizontal flips during backbone training.
    pub hflip: bool,
    /// Random vertical flips during backbone training.
    pub vflip: bool,
    /// Colour channel permutation plus brightness/contrast jitter of this
    /// relative magnitude; 0 disables it.
    pub colour_jitter: f64,
    /// Recompute TAM inputs from an augmented view at every TAM step.
    pub tam_augment: bool,
    /// Decoupled weight decay for the backbone phase.
    pub weight_decay: f64,
    pub clip_norm: f64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        Self {
            backbone_iters: 8000,
            tam_iters: 600,
            lr: 2e-3,
            tam_lr: 1e-3,
            k: 30,
            hflip: true,
            vflip: false,
            colour_jitter: 0.2,
            tam_augment: true,
            weight_decay: 1e-4,
            clip_norm: 10.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub phase: String,
    pub iter: usize,
    pub loss: f64,
    pub loss_obj: f64,
    pub loss_cls: f64,
    pub loss_box: f64,
}

/// Row of the grid cell containing each label's centre, with its regression
/// target `[cx/s − col, cy/s − row, ln(w/s), ln(h/s)]`.
pub fn assign_targets(
    labels: &[BoxLabel],
    frames: &[usize],
    grid_h: usize,
    grid_w: usize,
    stride: usize,
) -> Vec<(usize, usize, [f64; 4])> {
    let cells = grid_h * grid_w;
    let s = stride as f64;
    let mut out: Vec<(usize, usize, [f64; 4])> = Vec::new();
    for (i, &f) in frames.iter().enumerate() {
        for l in labels.iter().filter(|l| l.frame == f) {
            let (cx, cy) = l.bbox.center();
            let c = ((cx / s).floor().max(0.0) as usize).min(grid_w - 1);
            let r = ((cy / s).floor().max(0.0) as usize).min(grid_h - 1);
            let row = i * cells + r * grid_w + c;
            let reg = [
                cx / s - c as f64,
                cy / s - r as f64,
                (l.bbox.width() / s).ln(),
                (l.bbox.height() / s).ln(),
            ];
            // a later label landing in an occupied cell replaces the earlier one
            out.retain(|(rr, _, _)| *rr != row);
            out.push((row, l.class_id, reg));
        }
    }
    out.sort_by_key(|t| t.0);
    out
}

pub struct DetectionLoss {
    pub total: NodeId,
    pub obj: f64,
    pub cls: f64,
    pub boxes: f64,
}

/// `BCE(objectness) + BCE(class, one-hot) + L1(box)`, each summed and divided
/// by the number of positive cells.
pub fn detection_loss(
    g: &mut Graph,
    nodes: &BackboneNodes,
    labels: &[BoxLabel],
    frames: &[usize],
    stride: usize,
) -> Result<DetectionLoss> {
    let n_rows = nodes.frames * nodes.cells_per_frame();
    let nc = g.value(nodes.cls).dim(1);
    let targets = assign_targets(labels, frames, nodes.grid_h, nodes.grid_w, stride);
    let npos = targets.len().max(1) as f64;
    let mut obj_t = Tensor::zeros(&[n_rows, 1]);
    for (row, _, _) in &targets {
        obj_t.data_mut()[*row] = 1.0;
    }
    let obj = g.bce_logits(nodes.obj, obj_t, npos)?;
    let obj_v = g.value(obj).item();
    if targets.is_empty() {
        return Ok(DetectionLoss {
            total: obj,
            obj: obj_v,
            cls: 0.0,
            boxes: 0.0,
        });
    }
    let rows: Vec<usize> = targets.iter().map(|t| t.0).collect();
    let mut cls_t = Tensor::zeros(&[rows.len(), nc]);
    let mut box_t = Tensor::zeros(&[rows.len(), 4]);
    for (i, (_, c, reg)) in targets.iter().enumerate() {
        cls_t.data_mut()[i * nc + c] = 1.0;
        box_t.data_mut()[i * 4..i * 4 + 4].copy_from_slice(reg);
    }
    let cls_rows = g.gather_rows(nodes.cls, &rows)?;
    let cls = g.bce_logits(cls_rows, cls_t, npos)?;
    let box_rows = g.gather_rows(nodes.boxes, &rows)?;
    let boxes = g.l1(box_rows, box_t, npos)?;
    let (cls_v, box_v) = (g.value(cls).item(), g.value(boxes).item());
    let s = g.add(obj, cls)?;
    let total = g.add(s, boxes)?;
    Ok(DetectionLoss {
        total,
        obj: obj_v,
        cls: cls_v,
        boxes: box_v,
    })
}

/// Gradients for every tensor, `None` where the scope was frozen.
pub fn collect_grads(g: &Graph, loss: NodeId, bound: &Bound) -> Vec<Option<Tensor>> {
    let mut grads = g.backward(loss);
    bound
        .ids
        .iter()
        .map(|&id| {
            if g.requires_grad(id) {
                grads.take(id)
            } else {
                None
            }
        })
        .collect()
}

fn hflip(seq: &VideoSequence) -> VideoSequence {
    let mut out = seq.clone();
    let (h, w) = (seq.height, seq.width);
    for t in 0..seq.frames {
        for y in 0..h {
            for x in 0..w {
                let src = ((t * h + y) * w + (w - 1 - x)) * 3;
                let dst = ((t * h + y) * w + x) * 3;
                out.pixels[dst..dst + 3].copy_from_slice(&seq.pixels[src..src + 3]);
            }
        }
    }
    for l in &mut out.labels {
        let b = l.bbox;
        l.bbox = BBox::new(w as f64 - b.x2, b.y1, w as f64 - b.x1, b.y2);
    }
    out
}

fn vflip(seq: &VideoSequence) -> VideoSequence {
    let mut out = seq.clone();
    let (h, w) = (seq.height, seq.width);
    let row = w * 3;
    for t in 0..seq.frames {
        for y in 0..h {
            let src = (t * h + (h - 1 - y)) * row;
            let dst = (t * h + y) * row;
            out.pixels[dst..dst + row].copy_from_slice(&seq.pixels[src..src + row]);
        }
    }
    for l in &mut out.labels {
        let b = l.bbox;
        l.bbox = BBox::new(b.x1, h as f64 - b.y2, b.x2, h as f64 - b.y1);
    }
    out
}

fn colour_jitter(seq: &mut VideoSequence, mag: f64, rng: &mut impl Rng) {
    let mut perm = [0usize, 1, 2];
    perm.shuffle(rng);
    let b = rng.gen_range(1.0 - mag..=1.0 + mag) as f32;
    let c = rng.gen_range(1.0 - mag..=1.0 + mag) as f32;
    let mean = seq.pixels.iter().sum::<f32>() / seq.pixels.len() as f32;
    for px in seq.pixels.chunks_mut(3) {
        let v = [px[perm[0]], px[perm[1]], px[perm[2]]];
        for (o, x) in px.iter_mut().zip(v) {
            *o = (((x - mean) * c + mean) * b).clamp(0.0, 1.0);
        }
    }
}

fn augment_source(
    seq: &VideoSequence,
    cfg: &SourceTrainConfig,
    rng: &mut impl Rng,
) -> VideoSequence {
    let mut s = if cfg.hflip && rng.gen_bool(0.5) {
        hflip(seq)
    } else {
        seq.clone()
    };
    if cfg.vflip && rng.gen_bool(0.5) {
        s = vflip(&s);
    }
    if cfg.colour_jitter > 0.0 {
        colour_jitter(&mut s, cfg.colour_jitter, rng);
    }
    s
}

/// One optimisation step of the single-frame detector on a sequence.
pub fn detector_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    seq: &VideoSequence,
    lr: f64,
) -> Result<(f64, f64, f64, f64)> {
    let frames: Vec<usize> = (0..seq.frames).collect();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |s| s == Scope::Backbone);
    let x = g.constant(seq.to_nchw(&frames));
    let nodes = backbone_graph(&mut g, params, &bound, x)?;
    let loss = detection_loss(&mut g, &nodes, &seq.labels, &frames, params.arch.stride())?;
    let total = g.value(loss.total).item();
    let grads = collect_grads(&g, loss.total, &bound);
    opt.step(params, &grads, lr);
    Ok((total, loss.obj, loss.cls, loss.boxes))
}

/// Everything the TAM needs from one sequence when the backbone is frozen.
#[derive(Clone, Debug)]
pub struct TamExample {
    pub feats: Tensor,
    pub own_logits: Tensor,
    /// Sigmoid objectness of each selected proposal.
    pub objectness: Vec<f64>,
    pub targets: Tensor,
}

/// Class targets for selected proposals: one-hot of the best-overlapping box
/// in the same frame when IoU ≥ 0.5 or when the proposal sits in that box's
/// centre cell, zeros otherwise.
pub fn tam_targets(grid: &DenseGrid, rows: &[usize], boxes: &[(usize, usize, BBox)]) -> Tensor {
    let nc = grid.n_classes;
    let cells = grid.cells_per_frame();
    let s = grid.stride as f64;
    let mut t = Tensor::zeros(&[rows.len(), nc]);
    for (i, &row) in rows.iter().enumerate() {
        let frame = row / cells;
        let cell = row % cells;
        let pb = grid.decode_box(row);
        let mut best: Option<(f64, usize)> = None;
        for (f, class_id, b) in boxes {
            if *f != frame {
                continue;
            }
            let (cx, cy) = b.center();
            let c = ((cx / s).floor().max(0.0) as usize).min(grid.grid_w - 1);
            let r = ((cy / s).floor().max(0.0) as usize).min(grid.grid_h - 1);
            let centre_hit = r * grid.grid_w + c == cell;
            let o = iou(&pb, b);
            let score = if centre_hit { 1.0 + o } else { o };
            if (o >= 0.5 || centre_hit) && best.map_or(true, |(bs, _)| score > bs) {
                best = Some((score, *class_id));
            }
        }
        if let Some((_, c)) = best {
            t.data_mut()[i * nc + c] = 1.0;
        }
    }
    t
}

/// Frozen-backbone features of a sequence plus targets from `boxes`
/// (`(frame, class, box)` triples).
pub fn tam_example(
    params: &ModelParams,
    seq: &VideoSequence,
    boxes: &[(usize, usize, BBox)],
    k: usize,
) -> Result<TamExample> {
    let frames: Vec<usize> = (0..seq.frames).collect();
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |_| false);
    let x = g.constant(seq.to_nchw(&frames));
    let nodes = backbone_graph(&mut g, params, &bound, x)?;
    let grid = DenseGrid::from_nodes(&g, &nodes, params.arch.stride());
    let rows = select_topk_rows(&grid, k)?;
    Ok(TamExample {
        feats: grid.features.select_outer(&rows),
        own_logits: grid.cls_logits.select_outer(&rows),
        objectness: rows.iter().map(|&r| grid.objectness(r)).collect(),
        targets: tam_targets(&grid, &rows, boxes),
    })
}

/// TAM refined scores for an example, built on `g` with TAM parameters trainable.
pub fn tam_forward(
    g: &mut Graph,
    params: &ModelParams,
    bound: &Bound,
    ex: &TamExample,
) -> Result<NodeId> {
    let f = g.constant(ex.feats.clone());
    let own = g.constant(ex.own_logits.clone());
    let a = affinity_graph(g, f)?;
    tam_from_affinity(g, params, bound, f, own, a)
}

/// One TAM-only step; returns the loss and the refined scores.
pub fn tam_step(
    params: &mut ModelParams,
    opt: &mut Optimizer,
    ex: &TamExample,
    lr: f64,
) -> Result<(f64, Tensor)> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, |s| s == Scope::Tam);
    let out = tam_forward(&mut g, params, &bound, ex)?;
    let loss = g.bce(out, ex.targets.clone(), None)?;
    let v = g.value(loss).item();
    let scores = g.value(out).clone();
    let grads = collect_grads(&g, loss, &bound);
    opt.step(params, &grads, lr);
    Ok((v, scores))
}

pub fn label_boxes(seq: &VideoSequence) -> Vec<(usize, usize, BBox)> {
    seq.labels
        .iter()
        .map(|l| (l.frame, l.class_id, l.bbox))
        .collect()
}

/// Supervised source training: backbone and heads first, then the TAM with
/// the backbone frozen. Deterministic given `seed`.
pub fn train_source_sequences(
    seqs: &[VideoSequence],
    arch: &ArchConfig,
    cfg: &SourceTrainConfig,
    seed_value: u64,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<ModelParams> {
    if seqs.is_empty() {
        return Err(Error::Empty("source training set".into()));
    }
    let mut params = ModelParams::init(arch, seed::derive_stream(seed_value, "init", 0))?;
    let mut rng = seed::rng(seed::derive_stream(seed_value, "order", 0));
    let mut order: Vec<usize> = Vec::new();
    let mut opt = Optimizer::new(OptimizerKind::adam())
        .with_clip(cfg.clip_norm)
        .with_weight_decay(cfg.weight_decay);
    for it in 0..cfg.backbone_iters {
        if order.is_empty() {
            order = (0..seqs.len()).collect();
            order.shuffle(&mut rng);
        }
        let idx = order.pop().unwrap();
        let seq = augment_source(&seqs[idx], cfg, &mut rng);
        let lr = crate::optim::cosine_lr(cfg.lr, cfg.lr * 0.05, it, cfg.backbone_iters);
        let (loss, o, c, b) = detector_step(&mut params, &mut opt, &seq, lr)?;
        if !loss.is_finite() {
            return Err(Error::Aborted(format!("non-finite loss at iteration {it}")));
        }
        on_record(&TrainRecord {
            phase: "backbone".into(),
            iter: it,
            loss,
            loss_obj: o,
            loss_cls: c,
            loss_box: b,
        });
    }
    train_tam_phase(&mut params, seqs, cfg, seed_value, on_record)?;
    Ok(params)
}

/// TAM training with the backbone frozen, starting from `params`.
pub fn train_tam_phase(
    params: &mut ModelParams,
    seqs: &[VideoSequence],
    cfg: &SourceTrainConfig,
    seed_value: u64,
    mut on_record: impl FnMut(&TrainRecord),
) -> Result<()> {
    if cfg.tam_iters == 0 {
        return Ok(());
    }
    if seqs.is_empty() {
        return Err(Error::Empty("source training set".into()));
    }
    let mut rng = seed::rng(seed::derive_stream(seed_value, "tam", 0));
    let examples = if cfg.tam_augment {
        Vec::new()
    } else {
        seqs.iter()
            .map(|s| tam_example(params, s, &label_boxes(s), cfg.k))
            .collect::<Result<Vec<_>>>()?
    };
    let mut opt = Optimizer::new(OptimizerKind::adam()).with_clip(cfg.clip_norm);
    let mut order: Vec<usize> = Vec::new();
    for it in 0..cfg.tam_iters {
        if order.is_empty() {
            order = (0..seqs.len()).collect();
            order.shuffle(&mut rng);
        }
        let idx = order.pop().unwrap();
        let lr = crate::optim::cosine_lr(cfg.tam_lr, cfg.tam_lr * 0.05, it, cfg.tam_iters);
        let fresh;
        let ex = if cfg.tam_augment {
            let s = augment_source(&seqs[idx], cfg, &mut rng);
            fresh = tam_example(params, &s, &label_boxes(&s), cfg.k)?;
            &fresh
        } else {
            &examples[idx]
        };
        let (loss, _) = tam_step(params, &mut opt, ex, lr)?;
        if !loss.is_finite() {
            return Err(Error::Aborted(format!(
                "non-finite TAM loss at iteration {it}"
            )));
        }
        on_record(&TrainRecord {
            phase: "tam".into(),
            iter: it,
            loss,
            loss_obj: 0.0,
            loss_cls: loss,
            loss_box: 0.0,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centre_cell_assignment() {
        let labels = vec![BoxLabel {
            frame: 1,
            class_id: 2,
            bbox: BBox::new(10.0, 20.0, 30.0, 36.0),
            track_id: 0,
        }];
        let t = assign_targets(&labels, &[0, 1], 4, 4, 8);
        // centre (20, 28) → col 2, row 3 in the second image
        assert_eq!(t.len(), 1);
        assert_eq!(t[0].0, 16 + 3 * 4 + 2);
        assert_eq!(t[0].1, 2);
        assert!((t[0].2[0] - 0.5).abs() < 1e-12);
        assert!((t[0].2[1] - 0.5).abs() < 1e-12);
        assert!((t[0].2[2] - (20.0f64 / 8.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn hflip_mirrors_boxes() {
        let seq = VideoSequence {
            id: "x".into(),
            frames: 1,
            height: 8,
            width: 8,
            pixels: (0..192).map(|i| (i % 7) as f32 / 7.0).collect(),
            depth: None,
            labels: vec![BoxLabel {
                frame: 0,
                class_id: 0,
                bbox: BBox::new(1.0, 2.0, 3.0, 4.0),
                track_id: 0,
            }],
        };
        let f = hflip(&seq);
        assert_eq!(f.labels[0].bbox, BBox::new(5.0, 2.0, 7.0, 4.0));
        assert_eq!(hflip(&f), seq);
        let v = vflip(&seq);
        assert_eq!(v.labels[0].bbox, BBox::new(1.0, 4.0, 3.0, 6.0));
        assert_eq!(vflip(&v), seq);
    }
}

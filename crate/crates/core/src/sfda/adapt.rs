//! The adaptation loop and the baselines it is compared against.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::{augment_pair, mask_frames};
use super::config::{AdaptationConfig, StageOrder};
use super::ema::{ema_update, EmaScope, TeacherStudent};
use super::losses::{srs_loss, stage_of, student_pass, teacher_pass, trs_loss, Stage};
use super::select::{nearest_snapshot, select_checkpoint, EntropyTrace};
use crate::bbox::BBox;
use crate::datagen::VideoSequence;
use crate::dataset::{DatasetManifest, LabelAccess};
use crate::detector::model::Bound;
use crate::detector::train::{collect_grads, label_boxes, tam_example, tam_step, TamExample};
use crate::detector::{run_sequence, ModelParams, Scope};
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::optim::{cosine_lr, Optimizer, OptimizerKind};
use crate::seed;
use crate::sfda::losses::detected_self_entropy;
use crate::tensor::Tensor;

/// One line of the per-iteration metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub stage: String,
    pub loss_total: f64,
    pub loss_mse: f64,
    pub loss_bce: f64,
    pub loss_cls: f64,
    #[serde(rename = "H_raw")]
    pub h_raw: Option<f64>,
    #[serde(rename = "H_smoothed")]
    pub h_smoothed: Option<f64>,
    pub lr: f64,
    pub r_mask: f64,
}

#[derive(Clone, Debug)]
pub struct Snapshot {
    pub iteration: usize,
    pub params: ModelParams,
}

#[derive(Clone, Debug)]
pub struct AdaptOutcome {
    /// The selected teacher (or the unchanged source when nothing ran).
    pub params: ModelParams,
    pub selected_iter: Option<usize>,
    pub trace: EntropyTrace,
    pub log: Vec<IterRecord>,
    pub snapshots: Vec<Snapshot>,
}

impl AdaptOutcome {
    fn unchanged(source: &ModelParams, window: usize) -> Self {
        Self {
            params: source.clone(),
            selected_iter: None,
            trace: EntropyTrace::new(window),
            log: Vec::new(),
            snapshots: Vec::new(),
        }
    }

    /// Picks the snapshot nearest to the entropy-selected iteration.
    fn finish(mut self) -> Result<Self> {
        if self.snapshots.is_empty() {
            return Ok(self);
        }
        let chosen = if self.trace.is_empty() {
            self.snapshots.len() - 1
        } else {
            let it = select_checkpoint(&self.trace)?;
            let iters: Vec<usize> = self.snapshots.iter().map(|s| s.iteration).collect();
            nearest_snapshot(&iters, it).unwrap_or(iters.len() - 1)
        };
        self.selected_iter = Some(self.snapshots[chosen].iteration);
        self.params = self.snapshots[chosen].params.clone();
        Ok(self)
    }
}

/// Stage schedule of an adaptation run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Schedule {
    /// Alternate the two stages every `tau` iterations.
    Alternating,
    /// Temporal stage only (the basic mean teacher).
    TrsOnly,
}

fn frame_window(seq: &VideoSequence, start: usize, len: usize) -> VideoSequence {
    let n = seq.frame_len();
    VideoSequence {
        id: seq.id.clone(),
        frames: len,
        height: seq.height,
        width: seq.width,
        pixels: seq.pixels[start * n..(start + len) * n].to_vec(),
        depth: None,
        labels: Vec::new(),
    }
}

struct Clips<'a> {
    seqs: &'a [VideoSequence],
    order: Vec<usize>,
    frames: usize,
}

impl<'a> Clips<'a> {
    fn next(&mut self, rng: &mut ChaCha8Rng) -> VideoSequence {
        if self.order.is_empty() {
            self.order = (0..self.seqs.len()).collect();
            self.order.shuffle(rng);
        }
        let seq = &self.seqs[self.order.pop().unwrap()];
        if self.frames == 0 || self.frames >= seq.frames {
            return frame_window(seq, 0, seq.frames);
        }
        let start = rng.gen_range(0..=seq.frames - self.frames);
        frame_window(seq, start, self.frames)
    }
}

fn stage_at(t: usize, cfg: &AdaptationConfig, schedule: Schedule) -> Stage {
    if schedule == Schedule::TrsOnly {
        return Stage::Trs;
    }
    match (stage_of(t, cfg.tau), cfg.stage_order) {
        (s, StageOrder::TrsFirst) => s,
        (Stage::Trs, StageOrder::SrsFirst) => Stage::Srs,
        (Stage::Srs, StageOrder::SrsFirst) => Stage::Trs,
    }
}

/// Mean-teacher adaptation on label-free sequences. Any labels present on
/// `seqs` are ignored.
pub fn adapt_sequences(
    source: &ModelParams,
    seqs: &[VideoSequence],
    cfg: &AdaptationConfig,
    schedule: Schedule,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    source.check_layout()?;
    if cfg.total_iters == 0 {
        return Ok(AdaptOutcome::unchanged(source, cfg.entropy_window));
    }
    if seqs.is_empty() {
        return Err(Error::Empty("target train split".into()));
    }
    let mut rng = seed::rng(seed::derive_stream(cfg.seed, "adapt", 0));
    let mut clips = Clips {
        seqs,
        order: Vec::new(),
        frames: cfg.frames_per_sequence,
    };
    let mut ts = TeacherStudent::new(source, cfg.alpha)?;
    let mut opt = Optimizer::new(OptimizerKind::Sgd {
        momentum: cfg.momentum,
    });
    if cfg.clip_norm > 0.0 {
        opt = opt.with_clip(cfg.clip_norm);
    }
    let mut out = AdaptOutcome::unchanged(source, cfg.entropy_window);

    for t in 0..cfg.total_iters {
        let clip = clips.next(&mut rng);
        let pair = augment_pair(&clip, &mut rng, &cfg.augment);
        let stage = stage_at(t, cfg, schedule);
        let all: Vec<usize> = (0..clip.frames).collect();
        let tp = teacher_pass(&ts.teacher, pair.weak.to_nchw(&all), cfg.k)?;

        let mut g = Graph::new();
        let (parts, bound, r_mask, scope) = match stage {
            Stage::Trs => {
                let r = if cfg.mask_range.1 > cfg.mask_range.0 {
                    rng.gen_range(cfg.mask_range.0..=cfg.mask_range.1)
                } else {
                    cfg.mask_range.0
                };
                let retained = mask_frames(clip.frames, r, &mut rng);
                let bound = Bound::new(&mut g, &ts.student, |_| true);
                let input = pair.strong.to_nchw(&retained);
                let sp = student_pass(&mut g, &ts.student, &bound, input, &retained, &tp, true)?;
                (
                    trs_loss(&mut g, &tp, &sp, &cfg.terms)?,
                    bound,
                    r,
                    EmaScope::All,
                )
            }
            Stage::Srs => {
                let bound = Bound::new(&mut g, &ts.student, |s| s == Scope::Backbone);
                let input = pair.strong.to_nchw(&all);
                let sp = student_pass(&mut g, &ts.student, &bound, input, &all, &tp, false)?;
                let parts = srs_loss(&mut g, &tp, &sp, cfg.gamma, &cfg.terms)?;
                (parts, bound, 0.0, EmaScope::BackboneOnly)
            }
        };
        let total = g.value(parts.total).item();
        if !total.is_finite() {
            return Err(Error::Aborted(format!("non-finite loss at iteration {t}")));
        }
        let lr = cosine_lr(cfg.lr_start, cfg.lr_end, t, cfg.total_iters);
        if g.requires_grad(parts.total) {
            let grads = collect_grads(&g, parts.total, &bound);
            opt.step(&mut ts.student, &grads, lr);
        }
        ema_update(&mut ts, scope)?;

        let h = tp.mean_self_entropy(cfg.entropy_conf);
        if let Some(h) = h {
            out.trace.push(t, h)?;
        }
        let rec = IterRecord {
            iter: t,
            stage: stage.as_str().into(),
            loss_total: total,
            loss_mse: parts.mse,
            loss_bce: parts.bce,
            loss_cls: parts.cls,
            h_raw: h,
            h_smoothed: h.and(out.trace.last_smoothed()),
            lr,
            r_mask,
        };
        on_iter(&rec);
        out.log.push(rec);
        if (t + 1) % cfg.entropy_window == 0 || t + 1 == cfg.total_iters {
            out.snapshots.push(Snapshot {
                iteration: t,
                params: ts.teacher.clone(),
            });
        }
    }
    out.finish()
}

fn load_blind(manifest: &DatasetManifest) -> Result<Vec<VideoSequence>> {
    manifest.load_split("train", LabelAccess::Blind)
}

/// Full two-stage adaptation on the target train split, read label-blind.
pub fn adapt(
    source: &ModelParams,
    target: &DatasetManifest,
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    let seqs = load_blind(target)?;
    adapt_sequences(source, &seqs, cfg, Schedule::Alternating, on_iter)
}

/// The temporal stage alone, every iteration.
pub fn baseline_basic_mt(
    source: &ModelParams,
    target: &DatasetManifest,
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    let seqs = load_blind(target)?;
    adapt_sequences(source, &seqs, cfg, Schedule::TrsOnly, on_iter)
}

/// Source-model proposals whose `objectness · max refined score` reaches
/// `threshold`, as `(frame, class, box)` triples.
pub fn pseudo_labels(
    source: &ModelParams,
    seq: &VideoSequence,
    k: usize,
    threshold: f64,
) -> Result<Vec<(usize, usize, BBox)>> {
    let out = run_sequence(source, seq, k)?;
    let cells = out.grid.cells_per_frame();
    let mut labels = Vec::new();
    for (i, &row) in out.rows.iter().enumerate() {
        let (class_id, best) =
            out.refined[i]
                .iter()
                .cloned()
                .enumerate()
                .fold(
                    (0, f64::NEG_INFINITY),
                    |a, (c, s)| if s > a.1 { (c, s) } else { a },
                );
        if out.grid.objectness(row) * best >= threshold {
            labels.push((row / cells, class_id, out.grid.decode_box(row)));
        }
    }
    Ok(labels)
}

/// TAM-only training over precomputed examples with Adam and a cosine
/// schedule; records the entropy of each step's outputs and snapshots every
/// window.
fn train_tam(
    source: &ModelParams,
    examples: &[TamExample],
    cfg: &AdaptationConfig,
    stream: &str,
    mut on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    let mut params = source.clone();
    let mut out = AdaptOutcome::unchanged(source, cfg.entropy_window);
    if cfg.tam_iters == 0 {
        return Ok(out);
    }
    let mut rng = seed::rng(seed::derive_stream(cfg.seed, stream, 0));
    let mut opt = Optimizer::new(OptimizerKind::adam());
    let mut order: Vec<usize> = Vec::new();
    for t in 0..cfg.tam_iters {
        if order.is_empty() {
            order = (0..examples.len()).collect();
            order.shuffle(&mut rng);
        }
        let ex = &examples[order.pop().unwrap()];
        let lr = cosine_lr(cfg.tam_lr, cfg.tam_lr * 0.05, t, cfg.tam_iters);
        let (loss, scores): (f64, Tensor) = tam_step(&mut params, &mut opt, ex, lr)?;
        if !loss.is_finite() {
            return Err(Error::Aborted(format!("non-finite loss at iteration {t}")));
        }
        let rows: Vec<&[f64]> = (0..scores.dim(0)).map(|i| scores.row(i)).collect();
        let h = detected_self_entropy(&ex.objectness, &rows, cfg.entropy_conf);
        if let Some(h) = h {
            out.trace.push(t, h)?;
        }
        let rec = IterRecord {
            iter: t,
            stage: "TAM".into(),
            loss_total: loss,
            loss_mse: 0.0,
            loss_bce: loss,
            loss_cls: 0.0,
            h_raw: h,
            h_smoothed: h.and(out.trace.last_smoothed()),
            lr,
            r_mask: 0.0,
        };
        on_iter(&rec);
        out.log.push(rec);
        if (t + 1) % cfg.entropy_window == 0 || t + 1 == cfg.tam_iters {
            out.snapshots.push(Snapshot {
                iteration: t,
                params: params.clone(),
            });
        }
    }
    out.params = params;
    Ok(out)
}

/// Pseudo labels from the source model, then TAM-only training against
/// them, with the checkpoint chosen by mean self-entropy.
pub fn pseudo_label_sequences(
    source: &ModelParams,
    seqs: &[VideoSequence],
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if seqs.is_empty() {
        return Err(Error::Empty("target train split".into()));
    }
    let mut examples = Vec::with_capacity(seqs.len());
    let mut count = 0;
    for seq in seqs {
        let blind = seq.without_labels();
        let labels = pseudo_labels(source, &blind, cfg.k, cfg.pl_threshold)?;
        count += labels.len();
        examples.push(tam_example(source, &blind, &labels, cfg.k)?);
    }
    if count == 0 {
        return Err(Error::Aborted(format!(
            "no pseudo labels reach threshold {} on {} sequences",
            cfg.pl_threshold,
            seqs.len()
        )));
    }
    train_tam(source, &examples, cfg, "pseudo_label", on_iter)?.finish()
}

pub fn baseline_pseudo_label(
    source: &ModelParams,
    target: &DatasetManifest,
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    let seqs = load_blind(target)?;
    pseudo_label_sequences(source, &seqs, cfg, on_iter)
}

/// Supervised TAM-only fine-tuning on labelled target sequences; the final
/// parameters are returned.
pub fn oracle_sequences(
    source: &ModelParams,
    seqs: &[VideoSequence],
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    cfg.validate()?;
    if seqs.iter().all(|s| s.labels.is_empty()) {
        return Err(Error::Empty("target labels".into()));
    }
    let examples = seqs
        .iter()
        .map(|s| tam_example(source, s, &label_boxes(s), cfg.k))
        .collect::<Result<Vec<_>>>()?;
    let mut out = train_tam(source, &examples, cfg, "oracle", on_iter)?;
    out.selected_iter = out.snapshots.last().map(|s| s.iteration);
    Ok(out)
}

pub fn oracle_finetune(
    source: &ModelParams,
    target: &DatasetManifest,
    cfg: &AdaptationConfig,
    on_iter: impl FnMut(&IterRecord),
) -> Result<AdaptOutcome> {
    let seqs = target.load_split("train", LabelAccess::Allowed)?;
    oracle_sequences(source, &seqs, cfg, on_iter)
}

//! Checks shared by the integration tests and the acceptance runner. Each
//! returns a one-line summary on success and a description of the first
//! violation otherwise.

#![allow(dead_code)]

use std::cmp::Ordering;
use std::path::Path;

use rand::Rng;
use starmt::bbox::BBox;
use starmt::datagen::{generate_sequence, BoxLabel, GenConfig, VideoSequence};
use starmt::dataset::{build_dataset, label_reads_under};
use starmt::degrade::{
    add_gaussian_noise, apply_haze, apply_turbulence, degrade_dataset, haze_pixel,
    sample_degradation_spec, turbulence_fields, DegradationKind, DegradationRanges,
    TurbulenceParams,
};
use starmt::detector::model::{affinity, backbone_graph, nms, select_topk_rows, Bound, DenseGrid};
use starmt::detector::train::{collect_grads, detection_loss};
use starmt::detector::{ArchConfig, ModelParams, Proposal, Scope};
use starmt::eval::{ap50, GroundTruth, ScoredDetection};
use starmt::graph::{Graph, NodeId};
use starmt::optim::{Optimizer, OptimizerKind};
use starmt::seed::rng;
use starmt::sfda::{
    adapt, adapt_sequences, baseline_basic_mt, baseline_pseudo_label, certainty_weighted_cls_value,
    ema_update, mean_self_entropy, oracle_finetune, srs_loss, stage_of, student_pass, teacher_pass,
    trs_loss, AdaptationConfig, AugmentConfig, EmaScope, LossTerms, Schedule, Stage,
    TeacherStudent,
};
use starmt::Tensor;

pub type Check = Result<String, String>;

fn close(what: &str, got: f64, want: f64, tol: f64) -> Result<(), String> {
    if (got - want).abs() <= tol {
        Ok(())
    } else {
        Err(format!("{what}: got {got}, expected {want} ± {tol}"))
    }
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// --- reduced models and data ------------------------------------------------

pub fn tiny_arch(tam_hidden: usize, relative: bool) -> ArchConfig {
    ArchConfig {
        channels: [3, 4, 4, 6],
        n_classes: 3,
        tam_hidden,
        tam_relative: relative,
        attn_temperature: 0.5,
        leaky_slope: 0.1,
    }
}

pub fn tiny_params(arch: &ArchConfig, seed: u64) -> ModelParams {
    let mut p = ModelParams::init(arch, seed).expect("valid arch");
    p.perturb(0.05, &mut rng(seed ^ 0x5eed));
    p
}

pub fn tiny_gen() -> GenConfig {
    GenConfig {
        frames: 4,
        height: 32,
        width: 32,
        n_classes: 3,
        min_objects: 1,
        max_objects: 2,
        min_size: 8.0,
        max_size: 12.0,
        max_speed: 1.0,
        ..GenConfig::default()
    }
}

pub fn tiny_adapt_config() -> AdaptationConfig {
    AdaptationConfig {
        alpha: 0.9,
        tau: 2,
        total_iters: 8,
        k: 4,
        lr_start: 1e-2,
        lr_end: 5e-3,
        entropy_window: 1,
        tam_iters: 6,
        pl_threshold: 0.0,
        ..AdaptationConfig::default()
    }
}

fn random_input(frames: usize, h: usize, w: usize, seed: u64) -> Tensor {
    let mut r = rng(seed);
    let data = (0..frames * 3 * h * w)
        .map(|_| r.gen_range(0.0..1.0))
        .collect();
    Tensor::from_vec(&[frames, 3, h, w], data).unwrap()
}

// --- 1. algebra -------------------------------------------------------------

pub fn algebra() -> Check {
    let arch = tiny_arch(0, false);
    let source = tiny_params(&arch, 1);
    let target = tiny_params(&arch, 2);

    // alpha = 1 keeps the teacher, alpha = 0 copies the student
    for (alpha, expect_student) in [(1.0, false), (0.0, true)] {
        let mut ts = TeacherStudent::new(&source, alpha).map_err(err)?;
        ts.student = target.clone();
        for _ in 0..3 {
            ema_update(&mut ts, EmaScope::All).map_err(err)?;
        }
        let want = if expect_student { &target } else { &source };
        ensure(&ts.teacher == want, || {
            format!("EMA fixed point failed at alpha = {alpha}")
        })?;
    }

    // n updates with a constant student: a^n θ0 + (1 − a^n) θS
    let (alpha, n) = (0.97, 60);
    let mut ts = TeacherStudent::new(&source, alpha).map_err(err)?;
    ts.student = target.clone();
    for _ in 0..n {
        ema_update(&mut ts, EmaScope::All).map_err(err)?;
    }
    let an = alpha.powi(n);
    let mut worst: f64 = 0.0;
    for ((t, s0), st) in ts
        .teacher
        .tensors
        .iter()
        .zip(&source.tensors)
        .zip(&target.tensors)
    {
        for ((v, a), b) in t
            .value
            .data()
            .iter()
            .zip(s0.value.data())
            .zip(st.value.data())
        {
            worst = worst.max((v - (an * a + (1.0 - an) * b)).abs());
        }
    }
    ensure(worst <= 1e-5, || {
        format!("EMA closed form off by {worst:e}")
    })?;

    // certainty-weighted hand case
    let s_t = Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap();
    let s_s = Tensor::from_vec(&[1, 2], vec![0.8, 0.2]).unwrap();
    close(
        "certainty-weighted loss",
        certainty_weighted_cls_value(&s_t, &s_s, &[0.5]),
        0.1116,
        1e-4,
    )?;

    // self-entropy at extremes, 0.5 and 1/e
    let extremes = mean_self_entropy(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
    close("entropy at {0,1}", extremes, 0.0, 1e-4)?;
    let half = mean_self_entropy(&[vec![0.5; 3]]).unwrap();
    close("entropy at 0.5", half, 0.3466, 1e-4)?;
    let inv_e = mean_self_entropy(&[vec![(-1.0f64).exp(); 2]]).unwrap();
    close("entropy at 1/e", inv_e, 0.3679, 1e-4)?;

    close(
        "haze hand case",
        haze_pixel(0.2, (-1.0f64).exp(), 1.0),
        0.7057,
        1e-4,
    )?;

    let i = starmt::bbox::iou(
        &BBox::new(0.0, 0.0, 2.0, 2.0),
        &BBox::new(1.0, 1.0, 3.0, 3.0),
    );
    close("IoU hand case", i, 1.0 / 7.0, 1e-4)?;

    let gt = |x: f64| GroundTruth {
        sequence: 0,
        frame: 0,
        class_id: 0,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
    };
    let det = |x: f64, c: f64| ScoredDetection {
        sequence: 0,
        frame: 0,
        class_id: 0,
        confidence: c,
        bbox: BBox::new(x, 0.0, x + 10.0, 10.0),
    };
    let ap = ap50(
        &[det(0.0, 0.9), det(50.0, 0.8), det(20.0, 0.7)],
        &[gt(0.0), gt(20.0)],
    );
    close("AP hand case", ap.mean, 0.8333, 1e-4)?;

    Ok(format!(
        "EMA closed form max error {worst:.1e}; hand cases within 1e-4"
    ))
}

// --- 2. gradients -----------------------------------------------------------

pub struct GradReport {
    pub probes: usize,
    /// Probes whose derivative exceeds 1e-6 in magnitude.
    pub nonzero: usize,
    pub max_rel: f64,
}

const FD_STEP: f64 = 1e-5;

/// Central differences against reverse mode at `probes` random entries of
/// the tensors whose scope passes `trainable`.
pub fn grad_check(
    params: &ModelParams,
    trainable: impl Fn(Scope) -> bool + Copy,
    loss: impl Fn(&mut Graph, &ModelParams, &Bound) -> starmt::Result<NodeId>,
    probes: usize,
    seed: u64,
) -> Result<GradReport, String> {
    let mut g = Graph::new();
    let bound = Bound::new(&mut g, params, trainable);
    let l = loss(&mut g, params, &bound).map_err(err)?;
    let grads = collect_grads(&g, l, &bound);

    let value = |p: &ModelParams| -> Result<f64, String> {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, p, trainable);
        let l = loss(&mut g, p, &b).map_err(err)?;
        Ok(g.value(l).item())
    };
    let candidates: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .filter(|(_, t)| trainable(t.scope))
        .flat_map(|(i, t)| (0..t.value.len()).map(move |e| (i, e)))
        .collect();
    let mut r = rng(seed);
    let mut max_rel: f64 = 0.0;
    let mut nonzero = 0;
    for _ in 0..probes {
        let (ti, ei) = candidates[r.gen_range(0..candidates.len())];
        let analytic = grads[ti].as_ref().map_or(0.0, |t| t.data()[ei]);
        let mut plus = params.clone();
        plus.tensors[ti].value.data_mut()[ei] += FD_STEP;
        let mut minus = params.clone();
        minus.tensors[ti].value.data_mut()[ei] -= FD_STEP;
        let numeric = (value(&plus)? - value(&minus)?) / (2.0 * FD_STEP);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
        if rel > 1e-3 {
            return Err(format!(
                "{} [{ei}]: analytic {analytic:e}, numeric {numeric:e}, rel {rel:e}",
                params.tensors[ti].name
            ));
        }
        max_rel = max_rel.max(rel);
        if numeric.abs() > 1e-6 {
            nonzero += 1;
        }
    }
    Ok(GradReport {
        probes,
        nonzero,
        max_rel,
    })
}

pub const GRAD_PROBES: usize = 60;

pub fn trs_gradients(tam_hidden: usize, relative: bool) -> Result<GradReport, String> {
    let arch = tiny_arch(tam_hidden, relative);
    let teacher = tiny_params(&arch, 11);
    let mut student = teacher.clone();
    student.perturb(0.3, &mut rng(12));
    let weak = random_input(3, 16, 16, 13);
    let tp = teacher_pass(&teacher, weak.clone(), 3).map_err(err)?;
    let retained = vec![0, 2];
    let mut strong = weak.map(|v| (v * 0.8 + 0.1).clamp(0.0, 1.0));
    strong = strong.select_outer(&retained);
    grad_check(
        &student,
        |_| true,
        |g, p, b| {
            let sp = student_pass(g, p, b, strong.clone(), &retained, &tp, true)?;
            Ok(trs_loss(g, &tp, &sp, &LossTerms::default())?.total)
        },
        GRAD_PROBES,
        14,
    )
}

/// The objectness weight of the certainty term is a constant, so the
/// finite differences hold it at its value for the unperturbed student.
pub fn srs_gradients(gamma: f64, terms: LossTerms) -> Result<GradReport, String> {
    let arch = tiny_arch(0, true);
    let teacher = tiny_params(&arch, 21);
    let mut student = teacher.clone();
    student.perturb(0.3, &mut rng(22));
    let weak = random_input(3, 16, 16, 23);
    let tp = teacher_pass(&teacher, weak.clone(), 3).map_err(err)?;
    let all = vec![0, 1, 2];
    let strong = weak.map(|v| (1.0 - v) * 0.5 + v * 0.5 * v);
    let backbone = |s: Scope| s == Scope::Backbone;
    let weights = {
        let mut g = Graph::new();
        let b = Bound::new(&mut g, &student, backbone);
        student_pass(&mut g, &student, &b, strong.clone(), &all, &tp, false)
            .map_err(err)?
            .objectness
    };
    grad_check(
        &student,
        backbone,
        |g, p, b| {
            let mut sp = student_pass(g, p, b, strong.clone(), &all, &tp, false)?;
            sp.objectness = weights.clone();
            Ok(srs_loss(g, &tp, &sp, gamma, &terms)?.total)
        },
        GRAD_PROBES,
        24,
    )
}

pub fn detection_gradients() -> Result<GradReport, String> {
    let arch = tiny_arch(0, false);
    let params = tiny_params(&arch, 31);
    let input = random_input(2, 16, 16, 32);
    let labels = vec![
        BoxLabel {
            frame: 0,
            class_id: 1,
            bbox: BBox::new(1.0, 2.0, 9.5, 10.0),
            track_id: 0,
        },
        BoxLabel {
            frame: 1,
            class_id: 2,
            bbox: BBox::new(7.0, 6.0, 15.0, 15.5),
            track_id: 1,
        },
    ];
    grad_check(
        &params,
        |s| s == Scope::Backbone,
        |g, p, b| {
            let x = g.constant(input.clone());
            let nodes = backbone_graph(g, p, b, x)?;
            Ok(detection_loss(g, &nodes, &labels, &[0, 1], p.arch.stride())?.total)
        },
        GRAD_PROBES,
        33,
    )
}

pub fn gradients() -> Check {
    let cases: Vec<(&str, Result<GradReport, String>)> = vec![
        (
            "temporal stage, linear relative TAM",
            trs_gradients(0, true),
        ),
        ("temporal stage, MLP TAM", trs_gradients(5, false)),
        ("spatial stage", srs_gradients(0.2, LossTerms::default())),
        (
            "certainty term alone",
            srs_gradients(
                50.0,
                LossTerms {
                    mse: false,
                    bce: false,
                    cls: true,
                },
            ),
        ),
        ("detection loss", detection_gradients()),
    ];
    let mut total = 0;
    let mut nonzero = 0;
    let mut worst: f64 = 0.0;
    for (name, r) in cases {
        let r = r.map_err(|e| format!("{name}: {e}"))?;
        ensure(2 * r.nonzero >= r.probes, || {
            format!(
                "{name}: only {} of {} probes saw a gradient",
                r.nonzero, r.probes
            )
        })?;
        total += r.probes;
        nonzero += r.nonzero;
        worst = worst.max(r.max_rel);
    }
    Ok(format!(
        "{total} probes over 5 losses ({nonzero} with |grad| > 1e-6), max relative error {worst:.2e}"
    ))
}

// --- 3. degradations --------------------------------------------------------

fn constant_sequence(value: f32, frames: usize, h: usize, w: usize) -> VideoSequence {
    VideoSequence {
        id: "const".into(),
        frames,
        height: h,
        width: w,
        pixels: vec![value; frames * h * w * 3],
        depth: Some(vec![0.5; frames * h * w]),
        labels: Vec::new(),
    }
}

pub fn degradation() -> Check {
    let seq = generate_sequence(&GenConfig::default(), 7).map_err(err)?;
    ensure(
        add_gaussian_noise(&seq, 0.0, 1).map_err(err)? == seq,
        || "noise at sigma 0 changed the input".into(),
    )?;
    ensure(apply_haze(&seq, 0.0, 1.0).map_err(err)? == seq, || {
        "haze at beta 0 changed the input".into()
    })?;
    ensure(
        apply_turbulence(&seq, 0.0, 0.9, 1).map_err(err)? == seq,
        || "turbulence at strength 0 changed the input".into(),
    )?;

    // noise moments on a constant frame, far from the clip bounds
    let flat = constant_sequence(0.5, 8, 96, 96);
    let noisy = add_gaussian_noise(&flat, 0.1, 3).map_err(err)?;
    let n = noisy.pixels.len() as f64;
    let mean = noisy.pixels.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = noisy
        .pixels
        .iter()
        .map(|&v| (v as f64 - mean).powi(2))
        .sum::<f64>()
        / (n - 1.0);
    close("noise mean", mean, 0.5, 3.0 * 0.1 / n.sqrt())?;
    close("noise std", var.sqrt(), 0.1, 0.005)?;

    // severity draws
    let ranges = DegradationRanges::default();
    let mut r = rng(5);
    let sigmas: Vec<f64> = (0..10_000)
        .map(|_| sample_degradation_spec(DegradationKind::Noise, &mut r, &ranges).params["sigma"])
        .collect();
    let (lo, hi) = (10.0 / 255.0, 50.0 / 255.0);
    ensure(sigmas.iter().all(|&s| (lo..=hi).contains(&s)), || {
        "noise sigma outside [10, 50]/255".into()
    })?;
    let m = sigmas.iter().sum::<f64>() / sigmas.len() as f64;
    close("mean noise sigma", m, 0.1176, 0.01 * 0.1176)?;

    // turbulence AR(1) lag-1 autocorrelation and displacement magnitude
    let p = TurbulenceParams::new(2.0, 0.9);
    let (frames, h, w) = (40, 32, 32);
    let mut num = 0.0;
    let mut den = 0.0;
    let mut abs_sum = 0.0;
    let mut samples = 0usize;
    for s in 0..4u64 {
        let f = turbulence_fields(frames, h, w, &p, &mut rng(100 + s));
        for field in [&f.dx, &f.dy] {
            for t in 0..frames - 1 {
                for i in 0..h * w {
                    num += field[t][i] * field[t + 1][i];
                    den += field[t][i] * field[t][i];
                    samples += 1;
                }
            }
            abs_sum += field.iter().flatten().map(|v| v.abs()).sum::<f64>();
        }
    }
    let rho = num / den;
    close("turbulence lag-1 autocorrelation", rho, 0.9, 0.05)?;
    let mean_abs = abs_sum / (4 * 2 * frames * h * w) as f64;
    let half_normal = 2.0 * (2.0 / std::f64::consts::PI).sqrt();
    close(
        "mean |displacement|",
        mean_abs,
        half_normal,
        0.1 * half_normal,
    )?;

    // haze is non-decreasing in beta and in depth for I < A
    let mut r = rng(9);
    for _ in 0..10_000 {
        let i: f64 = r.gen_range(0.0..1.0);
        let (b1, b2) = (r.gen_range(0.0..2.0), r.gen_range(0.0..2.0));
        let (d1, d2) = (r.gen_range(0.0..1.0), r.gen_range(0.0..1.0));
        let (blo, bhi) = if b1 <= b2 { (b1, b2) } else { (b2, b1) };
        let (dlo, dhi) = if d1 <= d2 { (d1, d2) } else { (d2, d1) };
        let f = |b: f64, d: f64| haze_pixel(i, (-b * d).exp(), 1.0);
        ensure(f(blo, d1) <= f(bhi, d1), || {
            format!("haze decreases in beta at I={i}")
        })?;
        ensure(f(b1, dlo) <= f(b1, dhi), || {
            format!("haze decreases in depth at I={i}")
        })?;
    }
    let lighter = apply_haze(&seq, 1.5, 1.0).map_err(err)?;
    let light = apply_haze(&seq, 0.5, 1.0).map_err(err)?;
    ensure(
        light
            .pixels
            .iter()
            .zip(&lighter.pixels)
            .all(|(a, b)| a <= b),
        || "hazed sequence not monotone in beta".into(),
    )?;

    Ok(format!(
        "identities exact; noise mean {mean:.5} std {:.5}; lag-1 rho {rho:.3} over {samples} pairs; haze monotone",
        var.sqrt()
    ))
}

// --- 4. schedule and scope --------------------------------------------------

fn tiny_sequences(n: usize, seed: u64) -> Vec<VideoSequence> {
    (0..n)
        .map(|i| generate_sequence(&tiny_gen(), seed + i as u64).expect("valid config"))
        .collect()
}

pub fn schedule_scope() -> Check {
    for tau in [1usize, 50, 100, 200, 500] {
        for t in 0..10 * tau {
            let in_trs = (0..5).any(|m| 2 * m * tau <= t && t < (2 * m + 1) * tau);
            let want = if in_trs { Stage::Trs } else { Stage::Srs };
            ensure(stage_of(t, tau) == want, || {
                format!("stage_of({t}, {tau}) wrong")
            })?;
            ensure(stage_of(t + tau, tau) != stage_of(t, tau), || {
                format!("parity fails at t={t}, tau={tau}")
            })?;
        }
    }

    // teacher TAM scope during SRS, from per-iteration teacher snapshots
    let arch = tiny_arch(0, true);
    let source = tiny_params(&arch, 41);
    let seqs = tiny_sequences(3, 42);
    let cfg = tiny_adapt_config();
    let out = adapt_sequences(&source, &seqs, &cfg, Schedule::Alternating, |_| {}).map_err(err)?;
    ensure(out.snapshots.len() == cfg.total_iters, || {
        "expected one snapshot per iteration".into()
    })?;
    let bits = |p: &ModelParams, scope: Scope| -> Vec<u64> {
        p.tensors
            .iter()
            .filter(|t| t.scope == scope)
            .flat_map(|t| t.value.data().iter().map(|v| v.to_bits()))
            .collect()
    };
    let mut srs_iters = 0;
    let mut trs_moves = 0;
    for t in 0..cfg.total_iters {
        let before = if t == 0 {
            &source
        } else {
            &out.snapshots[t - 1].params
        };
        let after = &out.snapshots[t].params;
        match stage_of(t, cfg.tau) {
            Stage::Srs => {
                srs_iters += 1;
                ensure(bits(before, Scope::Tam) == bits(after, Scope::Tam), || {
                    format!("teacher TAM changed during SRS iteration {t}")
                })?;
                ensure(
                    bits(before, Scope::Backbone) != bits(after, Scope::Backbone),
                    || format!("teacher backbone frozen during SRS iteration {t}"),
                )?;
            }
            Stage::Trs => {
                if bits(before, Scope::Tam) != bits(after, Scope::Tam) {
                    trs_moves += 1;
                }
            }
        }
    }
    ensure(trs_moves > 0, || {
        "teacher TAM never moved during TRS".into()
    })?;

    // the teacher is bound as constants and an optimiser step leaves it alone
    let teacher = tiny_params(&arch, 43);
    let mut student = teacher.clone();
    student.perturb(0.05, &mut rng(45));
    let before = teacher.clone();
    let student_before = student.clone();
    let input = random_input(3, 16, 16, 44);
    let tp = teacher_pass(&teacher, input.clone(), 3).map_err(err)?;
    let mut g = Graph::new();
    let tb = Bound::new(&mut g, &teacher, |_| false);
    ensure(tb.ids.iter().all(|&id| !g.requires_grad(id)), || {
        "teacher tensor requires grad".into()
    })?;
    let sb = Bound::new(&mut g, &student, |_| true);
    let sp = student_pass(&mut g, &student, &sb, input, &[0, 1, 2], &tp, true).map_err(err)?;
    let parts = trs_loss(&mut g, &tp, &sp, &LossTerms::default()).map_err(err)?;
    let grads = g.backward(parts.total);
    ensure(tb.ids.iter().all(|&id| grads.get(id).is_none()), || {
        "gradient reached a teacher tensor".into()
    })?;
    let sg = collect_grads(&g, parts.total, &sb);
    ensure(sg.iter().any(|x| x.is_some()), || {
        "student received no gradient".into()
    })?;
    Optimizer::new(OptimizerKind::Sgd { momentum: 0.9 }).step(&mut student, &sg, 0.1);
    ensure(teacher == before, || {
        "teacher changed by a student step".into()
    })?;
    ensure(student != student_before, || {
        "student step had no effect".into()
    })?;

    Ok(format!(
        "stage_of matches the interval formula for 5 values of tau; teacher TAM fixed over {srs_iters} SRS iterations; no teacher gradients"
    ))
}

// --- 5. oracle equivalence --------------------------------------------------

pub const ORACLE_CASES: usize = 100;

fn random_grid(r: &mut impl Rng, frames: usize, gh: usize, gw: usize, nc: usize) -> DenseGrid {
    let rows = frames * gh * gw;
    // coarse values so that ties occur
    let coarse = |r: &mut dyn rand::RngCore| (r.gen_range(-4i32..=4) as f64) * 0.5;
    DenseGrid {
        frames,
        grid_h: gh,
        grid_w: gw,
        stride: 8,
        n_classes: nc,
        obj_logits: (0..rows).map(|_| coarse(r)).collect(),
        cls_logits: Tensor::from_vec(&[rows, nc], (0..rows * nc).map(|_| coarse(r)).collect())
            .unwrap(),
        box_reg: Tensor::zeros(&[rows, 4]),
        features: Tensor::zeros(&[rows, 2]),
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// A cell is selected iff fewer than `k` cells of its frame beat it, where
/// higher `p·max s` beats and equal values are broken by raster order.
fn topk_oracle(grid: &DenseGrid, k: usize) -> Vec<usize> {
    let cells = grid.grid_h * grid.grid_w;
    let conf = |row: usize| {
        let best = grid
            .cls_logits
            .row(row)
            .iter()
            .map(|&z| sigmoid(z))
            .fold(0.0, f64::max);
        sigmoid(grid.obj_logits[row]) * best
    };
    let mut out = Vec::new();
    for f in 0..grid.frames {
        for c in 0..cells {
            let me = conf(f * cells + c);
            let beaten_by = (0..cells)
                .filter(|&o| {
                    let other = conf(f * cells + o);
                    other > me || (other == me && o < c)
                })
                .count();
            if beaten_by < k {
                out.push(f * cells + c);
            }
        }
    }
    out
}

fn iou_oracle(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = (a.x2 - a.x1) * (a.y2 - a.y1) + (b.x2 - b.x1) * (b.y2 - b.y1) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Repeatedly take the best remaining box and strike every remaining box
/// overlapping it by more than the threshold.
fn nms_oracle(boxes: &[BBox], scores: &[f64], thr: f64) -> Vec<usize> {
    let mut alive: Vec<bool> = vec![true; boxes.len()];
    let mut keep = Vec::new();
    loop {
        let mut best: Option<usize> = None;
        for i in 0..boxes.len() {
            if alive[i] && best.map_or(true, |b| scores[i] > scores[b]) {
                best = Some(i);
            }
        }
        let Some(b) = best else { break };
        keep.push(b);
        alive[b] = false;
        for i in 0..boxes.len() {
            if alive[i] && iou_oracle(&boxes[b], &boxes[i]) > thr {
                alive[i] = false;
            }
        }
    }
    keep
}

fn random_box(r: &mut impl Rng, extent: f64) -> BBox {
    let x = r.gen_range(0.0..extent);
    let y = r.gen_range(0.0..extent);
    BBox::new(
        x,
        y,
        x + r.gen_range(1.0..extent / 2.0),
        y + r.gen_range(1.0..extent / 2.0),
    )
}

/// VOC AP by the definition: walk detections by descending confidence,
/// match each to the best free ground truth in its frame, then sum recall
/// increments times the best precision at any later rank.
fn ap_oracle(dets: &[ScoredDetection], gts: &[GroundTruth]) -> f64 {
    let mut classes: Vec<usize> = gts.iter().map(|g| g.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    if classes.is_empty() {
        return 0.0;
    }
    let mut total = 0.0;
    for &c in &classes {
        let g: Vec<&GroundTruth> = gts.iter().filter(|x| x.class_id == c).collect();
        let mut d: Vec<(usize, &ScoredDetection)> = dets
            .iter()
            .filter(|x| x.class_id == c)
            .enumerate()
            .collect();
        d.sort_by(|a, b| {
            b.1.confidence
                .partial_cmp(&a.1.confidence)
                .unwrap_or(Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        let mut taken = vec![false; g.len()];
        let mut hits = Vec::new();
        for (_, det) in &d {
            let mut best = None;
            let mut best_iou = 0.5;
            for (j, gt) in g.iter().enumerate() {
                if taken[j] || gt.sequence != det.sequence || gt.frame != det.frame {
                    continue;
                }
                let o = iou_oracle(&det.bbox, &gt.bbox);
                if o >= best_iou && (best.is_none() || o > best_iou) {
                    best = Some(j);
                    best_iou = o;
                }
            }
            if let Some(j) = best {
                taken[j] = true;
            }
            hits.push(best.is_some());
        }
        let n = hits.len();
        let mut prec = vec![0.0; n];
        let mut rec = vec![0.0; n];
        let mut tp = 0.0;
        for (i, &h) in hits.iter().enumerate() {
            if h {
                tp += 1.0;
            }
            prec[i] = tp / (i + 1) as f64;
            rec[i] = tp / g.len() as f64;
        }
        let mut ap = 0.0;
        let mut prev = 0.0;
        for i in 0..n {
            if rec[i] > prev {
                let best_after = prec[i..].iter().cloned().fold(0.0, f64::max);
                ap += (rec[i] - prev) * best_after;
                prev = rec[i];
            }
        }
        total += ap;
    }
    total / classes.len() as f64
}

pub fn oracle_equivalence() -> Check {
    let mut r = rng(77);
    for case in 0..ORACLE_CASES {
        let (frames, gh, gw) = (r.gen_range(1..4), r.gen_range(1..5), r.gen_range(1..5));
        let nc = r.gen_range(2..4);
        let grid = random_grid(&mut r, frames, gh, gw, nc);
        let k = r.gen_range(1..=gh * gw);
        let got = select_topk_rows(&grid, k).map_err(err)?;
        ensure(got == topk_oracle(&grid, k), || {
            format!("top-k case {case} differs")
        })?;
    }
    for case in 0..ORACLE_CASES {
        let n = r.gen_range(0..25);
        let boxes: Vec<BBox> = (0..n).map(|_| random_box(&mut r, 40.0)).collect();
        let scores: Vec<f64> = (0..n).map(|_| (r.gen_range(0..10) as f64) / 10.0).collect();
        let thr = r.gen_range(0.1..0.9);
        ensure(
            nms(&boxes, &scores, thr) == nms_oracle(&boxes, &scores, thr),
            || format!("NMS case {case} differs"),
        )?;
    }
    let mut worst: f64 = 0.0;
    for _ in 0..ORACLE_CASES {
        let n = r.gen_range(1..12);
        let d = r.gen_range(1..9);
        let props: Vec<Proposal> = (0..n)
            .map(|i| Proposal {
                frame: 0,
                cell: i,
                row: i,
                feature: (0..d).map(|_| r.gen_range(-2.0..2.0)).collect(),
                class_logits: vec![0.0; 2],
                objectness: 0.5,
                class_scores: vec![0.5; 2],
                bbox: BBox::new(0.0, 0.0, 1.0, 1.0),
            })
            .collect();
        let a = affinity(&props).map_err(err)?;
        for i in 0..n {
            for j in 0..n {
                let (fi, fj) = (&props[i].feature, &props[j].feature);
                let mut dot = 0.0;
                let mut ni = 0.0;
                let mut nj = 0.0;
                for t in 0..d {
                    dot += fi[t] * fj[t];
                    ni += fi[t] * fi[t];
                    nj += fj[t] * fj[t];
                }
                worst = worst.max((a.data()[i * n + j] - dot / (ni.sqrt() * nj.sqrt())).abs());
            }
        }
    }
    ensure(worst <= 1e-9, || format!("affinity off by {worst:e}"))?;
    let mut ap_worst: f64 = 0.0;
    for _ in 0..ORACLE_CASES {
        let n_gt = r.gen_range(0..8);
        let n_det = r.gen_range(0..12);
        let gts: Vec<GroundTruth> = (0..n_gt)
            .map(|_| GroundTruth {
                sequence: r.gen_range(0..2),
                frame: r.gen_range(0..2),
                class_id: r.gen_range(0..3),
                bbox: random_box(&mut r, 20.0),
            })
            .collect();
        let mut dets: Vec<ScoredDetection> = Vec::new();
        for _ in 0..n_det {
            // half of the detections jitter a ground truth, so matches happen
            let (sequence, frame, class_id, bbox) = if !gts.is_empty() && r.gen_bool(0.5) {
                let g = &gts[r.gen_range(0..gts.len())];
                let s = r.gen_range(-1.5..1.5);
                let b = BBox::new(g.bbox.x1 + s, g.bbox.y1, g.bbox.x2 + s, g.bbox.y2);
                (g.sequence, g.frame, g.class_id, b)
            } else {
                (
                    r.gen_range(0..2),
                    r.gen_range(0..2),
                    r.gen_range(0..3),
                    random_box(&mut r, 20.0),
                )
            };
            dets.push(ScoredDetection {
                sequence,
                frame,
                class_id,
                confidence: (r.gen_range(0..8) as f64) / 8.0,
                bbox,
            });
        }
        ap_worst = ap_worst.max((ap50(&dets, &gts).mean - ap_oracle(&dets, &gts)).abs());
    }
    ensure(ap_worst <= 1e-9, || format!("AP50 off by {ap_worst:e}"))?;
    Ok(format!(
        "{ORACLE_CASES} cases each: top-k and NMS exact, affinity max error {worst:.1e}, AP50 max error {ap_worst:.1e}"
    ))
}

// --- 6. label blindness -----------------------------------------------------

pub fn label_blindness(dir: &Path) -> Check {
    let clean =
        build_dataset(&dir.join("clean"), &tiny_gen(), 4, [0.5, 0.0, 0.5], 3, true).map_err(err)?;
    let target_root = dir.join("noise");
    let target = degrade_dataset(
        &clean,
        DegradationKind::Noise,
        &target_root,
        4,
        &DegradationRanges::default(),
        true,
    )
    .map_err(err)?;
    let arch = tiny_arch(0, true);
    let source = tiny_params(&arch, 51);
    let cfg = AdaptationConfig {
        augment: AugmentConfig::default(),
        ..tiny_adapt_config()
    };

    let base = label_reads_under(&target_root);
    adapt(&source, &target, &cfg, |_| {}).map_err(err)?;
    let after_star = label_reads_under(&target_root);
    baseline_basic_mt(&source, &target, &cfg, |_| {}).map_err(err)?;
    let after_basic = label_reads_under(&target_root);
    baseline_pseudo_label(&source, &target, &cfg, |_| {}).map_err(err)?;
    let after_pl = label_reads_under(&target_root);
    for (name, reads) in [
        ("adapt", after_star - base),
        ("baseline_basic_mt", after_basic - after_star),
        ("baseline_pseudo_label", after_pl - after_basic),
    ] {
        ensure(reads == 0, || format!("{name} opened {reads} label files"))?;
    }
    // the instrument itself sees the oracle's reads
    oracle_finetune(&source, &target, &cfg, |_| {}).map_err(err)?;
    let oracle_reads = label_reads_under(&target_root) - after_pl;
    ensure(oracle_reads > 0, || {
        "instrumented loader recorded no oracle reads".into()
    })?;
    Ok(format!(
        "adapt, basic MT and pseudo-label opened 0 label files; oracle opened {oracle_reads}"
    ))
}

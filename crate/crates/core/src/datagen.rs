//! Procedural video sequences: textured shapes drifting over smooth backgrounds,
//! with per-frame boxes, class labels and a relative depth map.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

/// Ground-truth box for one object in one frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoxLabel {
    pub frame: usize,
    pub class_id: usize,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub track_id: usize,
}

/// `T` frames of `H×W` RGB with intensities in `[0, 1]`, a per-pixel relative
/// depth in `(0, 1]`, and box labels.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoSequence {
    pub id: String,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    /// `[T, H, W, 3]`
    pub pixels: Vec<f32>,
    /// `[T, H, W]`
    pub depth: Option<Vec<f32>>,
    pub labels: Vec<BoxLabel>,
}

impl VideoSequence {
    pub fn frame_len(&self) -> usize {
        self.height * self.width * 3
    }

    pub fn frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.pixels[t * n..(t + 1) * n]
    }

    pub fn labels_in_frame(&self, t: usize) -> impl Iterator<Item = &BoxLabel> {
        self.labels.iter().filter(move |l| l.frame == t)
    }

    /// Selected frames as an `[n, 3, H, W]` network input.
    pub fn to_nchw(&self, frames: &[usize]) -> Tensor {
        let (h, w) = (self.height, self.width);
        let plane = h * w;
        let mut data = vec![0.0; frames.len() * 3 * plane];
        for (i, &t) in frames.iter().enumerate() {
            let src = self.frame(t);
            for p in 0..plane {
                for c in 0..3 {
                    data[(i * 3 + c) * plane + p] = src[p * 3 + c] as f64;
                }
            }
        }
        Tensor::from_vec(&[frames.len(), 3, h, w], data).expect("sized above")
    }

    /// Copy with the label list dropped, as handed to label-blind consumers.
    pub fn without_labels(&self) -> VideoSequence {
        VideoSequence {
            labels: Vec::new(),
            ..self.clone()
        }
    }

    pub fn validate(&self, stride: usize, n_classes: usize) -> Result<()> {
        if self.frames == 0 {
            return Err(Error::InvalidArgument(format!("{}: no frames", self.id)));
        }
        if !self.height.is_multiple_of(stride) || !self.width.is_multiple_of(stride) {
            return Err(Error::InvalidArgument(format!(
                "{}: {}x{} not divisible by stride {stride}",
                self.id, self.height, self.width
            )));
        }
        if self.pixels.len() != self.frames * self.frame_len() {
            return Err(Error::Shape(format!("{}: pixel buffer size", self.id)));
        }
        if self.pixels.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::InvalidArgument(format!(
                "{}: intensity outside [0,1]",
                self.id
            )));
        }
        if let Some(d) = &self.depth {
            if d.len() != self.frames * self.height * self.width {
                return Err(Error::Shape(format!("{}: depth buffer size", self.id)));
            }
            if d.iter().any(|v| !(*v > 0.0 && *v <= 1.0)) {
                return Err(Error::InvalidArgument(format!(
                    "{}: depth outside (0,1]",
                    self.id
                )));
            }
        }
        for l in &self.labels {
            let b = &l.bbox;
            if l.frame >= self.frames
                || l.class_id >= n_classes
                || !b.is_well_formed()
                || b.x1 < 0.0
                || b.y1 < 0.0
                || b.x2 > self.width as f64
                || b.y2 > self.height as f64
            {
                return Err(Error::InvalidArgument(format!(
                    "{}: bad label {l:?}",
                    self.id
                )));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenConfig {
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub n_classes: usize,
    pub stride: usize,
    pub min_objects: usize,
    pub max_objects: usize,
    /// Object side length range in pixels.
    pub min_size: f64,
    pub max_size: f64,
    /// Per-axis drift bound, pixels per frame.
    pub max_speed: f64,
    /// Per-frame positional jitter bound, pixels (uniform in `[-jitter, jitter]`).
    pub jitter: f64,
    /// Object fill colours.
    pub palette: Vec<[f32; 3]>,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            frames: 8,
            height: 96,
            width: 96,
            n_classes: 4,
            stride: 8,
            min_objects: 1,
            max_objects: 3,
            min_size: 18.0,
            max_size: 30.0,
            max_speed: 2.0,
            jitter: 0.5,
            palette: vec![
                [0.90, 0.15, 0.15],
                [0.15, 0.75, 0.20],
                [0.15, 0.30, 0.90],
                [0.95, 0.85, 0.10],
                [0.85, 0.20, 0.85],
                [0.10, 0.85, 0.85],
                [0.98, 0.55, 0.10],
                [0.95, 0.95, 0.95],
            ],
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.stride == 0
            || !self.height.is_multiple_of(self.stride)
            || !self.width.is_multiple_of(self.stride)
        {
            return Err(Error::Config(format!(
                "frame size {}x{} not divisible by grid stride {}",
                self.height, self.width, self.stride
            )));
        }
        if self.n_classes < 2 {
            return Err(Error::Config(format!(
                "n_classes = {} (need >= 2)",
                self.n_classes
            )));
        }
        if self.frames == 0 {
            return Err(Error::Config("frames must be >= 1".into()));
        }
        if self.min_objects > self.max_objects {
            return Err(Error::Config("min_objects > max_objects".into()));
        }
        if !(self.min_size > 0.0 && self.min_size <= self.max_size) {
            return Err(Error::Config("object size range".into()));
        }
        if self.palette.is_empty() {
            return Err(Error::Config("empty palette".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Rect,
    Ellipse,
    Triangle,
    Diamond,
}

impl Shape {
    pub fn for_class(class_id: usize) -> Shape {
        match class_id % 4 {
            0 => Shape::Rect,
            1 => Shape::Ellipse,
            2 => Shape::Triangle,
            _ => Shape::Diamond,
        }
    }

    /// Membership of a point given in box-relative coordinates `u, v ∈ [0, 1]`.
    fn contains(self, u: f64, v: f64) -> bool {
        match self {
            Shape::Rect => true,
            Shape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) <= 0.25,
            Shape::Triangle => (u - 0.5).abs() <= v / 2.0,
            Shape::Diamond => (u - 0.5).abs() + (v - 0.5).abs() <= 0.5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Texture {
    Flat,
    Stripes { period: f64, horizontal: bool },
    Checker { period: f64 },
}

/// Motion and appearance of one object for the whole sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct ObjectTrack {
    pub track_id: usize,
    pub class_id: usize,
    pub width: f64,
    pub height: f64,
    pub start: (f64, f64),
    pub velocity: (f64, f64),
    /// Per-frame offset added to the linear path.
    pub jitter: Vec<(f64, f64)>,
    pub depth: f32,
    colour: [f32; 3],
    texture: Texture,
    texture_amp: f32,
}

impl ObjectTrack {
    pub fn center(&self, t: usize) -> (f64, f64) {
        let (jx, jy) = self.jitter[t];
        (
            self.start.0 + self.velocity.0 * t as f64 + jx,
            self.start.1 + self.velocity.1 * t as f64 + jy,
        )
    }

    pub fn full_box(&self, t: usize) -> BBox {
        let (cx, cy) = self.center(t);
        BBox::from_center(cx, cy, self.width, self.height)
    }

    fn shade(&self, u: f64, v: f64) -> [f32; 3] {
        let m = match self.texture {
            Texture::Flat => 0.0,
            Texture::Stripes { period, horizontal } => {
                let x = if horizontal { v } else { u } * self.height.max(self.width);
                if (x / period).floor() as i64 % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
            Texture::Checker { period } => {
                let a = (u * self.width / period).floor() as i64;
                let b = (v * self.height / period).floor() as i64;
                if (a + b) % 2 == 0 {
                    1.0
                } else {
                    -1.0
                }
            }
        };
        let d = self.texture_amp * m;
        [
            (self.colour[0] + d).clamp(0.0, 1.0),
            (self.colour[1] + d).clamp(0.0, 1.0),
            (self.colour[2] + d).clamp(0.0, 1.0),
        ]
    }
}

#[derive(Clone, Debug)]
struct Wave {
    fx: f64,
    fy: f64,
    phase: f64,
    amp: f64,
}

/// Everything random about a sequence, drawn before rendering.
#[derive(Clone, Debug)]
pub struct Scene {
    pub tracks: Vec<ObjectTrack>,
    base: [f64; 3],
    waves: [Vec<Wave>; 3],
    depth_waves: Vec<Wave>,
    drift: (f64, f64),
}

fn sample_waves(rng: &mut impl Rng, n: usize, amp: f64) -> Vec<Wave> {
    (0..n)
        .map(|_| Wave {
            fx: rng.gen_range(-2.0..2.0),
            fy: rng.gen_range(-2.0..2.0),
            phase: rng.gen_range(0.0..std::f64::consts::TAU),
            amp: amp / n as f64,
        })
        .collect()
}

fn eval_waves(waves: &[Wave], x: f64, y: f64) -> f64 {
    waves
        .iter()
        .map(|w| w.amp * (std::f64::consts::TAU * (w.fx * x + w.fy * y) + w.phase).sin())
        .sum()
}

/// Draws the scene parameters; rendering is a pure function of the result.
pub fn sample_scene(cfg: &GenConfig, rng: &mut impl Rng) -> Scene {
    let base = [
        rng.gen_range(0.25..0.65),
        rng.gen_range(0.25..0.65),
        rng.gen_range(0.25..0.65),
    ];
    let waves = [
        sample_waves(rng, 3, 0.25),
        sample_waves(rng, 3, 0.25),
        sample_waves(rng, 3, 0.25),
    ];
    let depth_waves = sample_waves(rng, 3, 1.0);
    let drift = (rng.gen_range(-0.01..0.01), rng.gen_range(-0.01..0.01));
    let n_obj = rng.gen_range(cfg.min_objects..=cfg.max_objects);
    let (w, h) = (cfg.width as f64, cfg.height as f64);
    let tracks = (0..n_obj)
        .map(|track_id| {
            let class_id = rng.gen_range(0..cfg.n_classes);
            let side = rng.gen_range(cfg.min_size..=cfg.max_size);
            let aspect: f64 = rng.gen_range(0.8..1.25);
            let (ow, oh) = (side * aspect.sqrt(), side / aspect.sqrt());
            let start = (
                rng.gen_range(ow / 2.0..=(w - ow / 2.0).max(ow / 2.0)),
                rng.gen_range(oh / 2.0..=(h - oh / 2.0).max(oh / 2.0)),
            );
            let velocity = (
                rng.gen_range(-cfg.max_speed..=cfg.max_speed),
                rng.gen_range(-cfg.max_speed..=cfg.max_speed),
            );
            let jitter = (0..cfg.frames)
                .map(|_| {
                    if cfg.jitter > 0.0 {
                        (
                            rng.gen_range(-cfg.jitter..=cfg.jitter),
                            rng.gen_range(-cfg.jitter..=cfg.jitter),
                        )
                    } else {
                        (0.0, 0.0)
                    }
                })
                .collect();
            let depth = rng.gen_range(0.2f32..=0.8);
            let colour = cfg.palette[rng.gen_range(0..cfg.palette.len())];
            let texture = match rng.gen_range(0..3) {
                0 => Texture::Flat,
                1 => Texture::Stripes {
                    period: rng.gen_range(3.0..6.0),
                    horizontal: rng.gen_bool(0.5),
                },
                _ => Texture::Checker {
                    period: rng.gen_range(3.0..6.0),
                },
            };
            let texture_amp = rng.gen_range(0.05f32..0.15);
            ObjectTrack {
                track_id,
                class_id,
                width: ow,
                height: oh,
                start,
                velocity,
                jitter,
                depth,
                colour,
                texture,
                texture_amp,
            }
        })
        .collect();
    Scene {
        tracks,
        base,
        waves,
        depth_waves,
        drift,
    }
}

/// Renders a scene; with `draw_objects = false` only the background is drawn.
pub fn render_scene(cfg: &GenConfig, scene: &Scene, id: &str, draw_objects: bool) -> VideoSequence {
    let (tn, hn, wn) = (cfg.frames, cfg.height, cfg.width);
    let mut pixels = vec![0.0f32; tn * hn * wn * 3];
    let mut depth = vec![0.0f32; tn * hn * wn];
    let mut order: Vec<&ObjectTrack> = scene.tracks.iter().collect();
    // far to near, painter's order
    order.sort_by(|a, b| {
        b.depth
            .total_cmp(&a.depth)
            .then(a.track_id.cmp(&b.track_id))
    });

    for t in 0..tn {
        let shift = (scene.drift.0 * t as f64, scene.drift.1 * t as f64);
        for y in 0..hn {
            for x in 0..wn {
                let u = (x as f64 + 0.5) / wn as f64 + shift.0;
                let v = (y as f64 + 0.5) / hn as f64 + shift.1;
                let p = (t * hn + y) * wn + x;
                for c in 0..3 {
                    let val = scene.base[c] + eval_waves(&scene.waves[c], u, v);
                    pixels[p * 3 + c] = val.clamp(0.0, 1.0) as f32;
                }
                // sum of three unit-amplitude/3 waves lies in [-1, 1]
                let dz = eval_waves(&scene.depth_waves, u, v).clamp(-1.0, 1.0);
                depth[p] = (0.85 + 0.15 * (0.5 + 0.5 * dz)) as f32;
            }
        }
        if !draw_objects {
            continue;
        }
        for track in &order {
            let b = track.full_box(t);
            let x0 = b.x1.floor().max(0.0) as usize;
            let y0 = b.y1.floor().max(0.0) as usize;
            let x1 = (b.x2.ceil().max(0.0) as usize).min(wn);
            let y1 = (b.y2.ceil().max(0.0) as usize).min(hn);
            for y in y0..y1 {
                for x in x0..x1 {
                    let u = (x as f64 + 0.5 - b.x1) / track.width;
                    let v = (y as f64 + 0.5 - b.y1) / track.height;
                    if !(0.0..=1.0).contains(&u) || !(0.0..=1.0).contains(&v) {
                        continue;
                    }
                    if !Shape::for_class(track.class_id).contains(u, v) {
                        continue;
                    }
                    let p = (t * hn + y) * wn + x;
                    pixels[p * 3..p * 3 + 3].copy_from_slice(&track.shade(u, v));
                    depth[p] = track.depth;
                }
            }
        }
    }

    let mut labels = Vec::new();
    if draw_objects {
        for t in 0..tn {
            for track in &scene.tracks {
                let full = track.full_box(t);
                let clipped = full.clip(wn as f64, hn as f64);
                if clipped.is_well_formed() && clipped.area() >= 0.5 * full.area() {
                    labels.push(BoxLabel {
                        frame: t,
                        class_id: track.class_id,
                        bbox: clipped,
                        track_id: track.track_id,
                    });
                }
            }
        }
    }

    VideoSequence {
        id: id.to_string(),
        frames: tn,
        height: hn,
        width: wn,
        pixels,
        depth: Some(depth),
        labels,
    }
}

/// Deterministic sequence for `(cfg, seed)`.
pub fn generate_sequence(cfg: &GenConfig, seed: u64) -> Result<VideoSequence> {
    generate_sequence_with_id(cfg, seed, &format!("seq_{seed:016x}"))
}

pub fn generate_sequence_with_id(cfg: &GenConfig, seed: u64, id: &str) -> Result<VideoSequence> {
    cfg.validate()?;
    let mut rng = seed::rng(seed);
    let scene = sample_scene(cfg, &mut rng);
    Ok(render_scene(cfg, &scene, id, true))
}

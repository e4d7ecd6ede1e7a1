//! Weak/strong augmentation pairs and frame masking.
//!
//! Both views of a pair share one geometric transform (horizontal flip, then
//! a perspective warp), so grid cell `c` of the weak view and cell `c` of the
//! strong view look at the same scene content. They differ only in chromatic
//! jitter strength and in random erasing, which the strong view alone gets.

use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::bbox::BBox;
use crate::datagen::VideoSequence;
use crate::degrade::sample_bilinear;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Maximum corner displacement as a fraction of frame size.
    pub perspective: f64,
    /// Brightness/contrast/saturation multipliers drawn from `1 ± weak_jitter`.
    pub weak_jitter: f64,
    pub strong_jitter: f64,
    /// Probability of erasing a rectangle in the strong view.
    pub erase_prob: f64,
    /// Erased area fraction range.
    pub erase_area: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_prob: 0.5,
            perspective: 0.05,
            weak_jitter: 0.1,
            strong_jitter: 0.4,
            erase_prob: 1.0,
            erase_area: (0.02, 0.15),
        }
    }
}

impl AugmentConfig {
    /// No geometric change, no jitter, no erasing.
    pub fn identity() -> Self {
        Self {
            flip_prob: 0.0,
            perspective: 0.0,
            weak_jitter: 0.0,
            strong_jitter: 0.0,
            erase_prob: 0.0,
            erase_area: (0.02, 0.15),
        }
    }
}

/// 3×3 projective transform, row-major, acting on `(x, y, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub [f64; 9]);

impl Homography {
    pub const IDENTITY: Homography = Homography([1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);

    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.0;
        let w = m[6] * x + m[7] * y + m[8];
        (
            (m[0] * x + m[1] * y + m[2]) / w,
            (m[3] * x + m[4] * y + m[5]) / w,
        )
    }

    /// Maps `src[i]` to `dst[i]` for four point pairs.
    pub fn from_points(src: [(f64, f64); 4], dst: [(f64, f64); 4]) -> Option<Homography> {
        let mut a = [[0.0f64; 9]; 8];
        for i in 0..4 {
            let (x, y) = src[i];
            let (u, v) = dst[i];
            a[2 * i] = [x, y, 1.0, 0.0, 0.0, 0.0, -u * x, -u * y, u];
            a[2 * i + 1] = [0.0, 0.0, 0.0, x, y, 1.0, -v * x, -v * y, v];
        }
        // Gauss-Jordan with partial pivoting on the 8×8 system
        for col in 0..8 {
            let piv = (col..8).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
            if a[piv][col].abs() < 1e-12 {
                return None;
            }
            a.swap(col, piv);
            let d = a[col][col];
            for v in a[col].iter_mut() {
                *v /= d;
            }
            for r in 0..8 {
                if r != col {
                    let f = a[r][col];
                    if f != 0.0 {
                        for c in 0..9 {
                            a[r][c] -= f * a[col][c];
                        }
                    }
                }
            }
        }
        let mut h = [0.0; 9];
        for i in 0..8 {
            h[i] = a[i][8];
        }
        h[8] = 1.0;
        Some(Homography(h))
    }

    pub fn inverse(&self) -> Option<Homography> {
        let m = &self.0;
        let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
            + m[2] * (m[3] * m[7] - m[4] * m[6]);
        if det.abs() < 1e-15 {
            return None;
        }
        let inv = [
            (m[4] * m[8] - m[5] * m[7]) / det,
            (m[2] * m[7] - m[1] * m[8]) / det,
            (m[1] * m[5] - m[2] * m[4]) / det,
            (m[5] * m[6] - m[3] * m[8]) / det,
            (m[0] * m[8] - m[2] * m[6]) / det,
            (m[2] * m[3] - m[0] * m[5]) / det,
            (m[3] * m[7] - m[4] * m[6]) / det,
            (m[1] * m[6] - m[0] * m[7]) / det,
            (m[0] * m[4] - m[1] * m[3]) / det,
        ];
        Some(Homography(inv))
    }
}

/// Geometric part of an augmentation, shared by both views.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Geometry {
    /// Maps output pixel coordinates to input pixel coordinates (flip included).
    pub output_to_input: Homography,
    pub identity: bool,
}

impl Geometry {
    /// Transforms a box given in input coordinates to the bounding box of its
    /// image in output coordinates.
    pub fn map_box(&self, b: &BBox) -> Option<BBox> {
        let fwd = self.output_to_input.inverse()?;
        let pts =
            [(b.x1, b.y1), (b.x2, b.y1), (b.x1, b.y2), (b.x2, b.y2)].map(|(x, y)| fwd.apply(x, y));
        let xs = pts.iter().map(|p| p.0);
        let ys = pts.iter().map(|p| p.1);
        Some(BBox::new(
            xs.clone().fold(f64::INFINITY, f64::min),
            ys.clone().fold(f64::INFINITY, f64::min),
            xs.fold(f64::NEG_INFINITY, f64::max),
            ys.fold(f64::NEG_INFINITY, f64::max),
        ))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Chroma {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
}

impl Chroma {
    fn sample(rng: &mut impl Rng, mag: f64) -> Chroma {
        let mut m = || {
            if mag > 0.0 {
                rng.gen_range(1.0 - mag..=1.0 + mag)
            } else {
                1.0
            }
        };
        Chroma {
            brightness: m(),
            contrast: m(),
            saturation: m(),
        }
    }
}

/// Erased rectangle in output pixel coordinates, `[x0, x1) × [y0, y1)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EraseRect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl EraseRect {
    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }
}

pub struct AugmentedPair {
    pub weak: VideoSequence,
    pub strong: VideoSequence,
    pub geometry: Geometry,
    pub weak_chroma: Chroma,
    pub strong_chroma: Chroma,
    pub erase: Option<EraseRect>,
}

fn sample_geometry(rng: &mut impl Rng, cfg: &AugmentConfig, h: usize, w: usize) -> Geometry {
    let flip = cfg.flip_prob > 0.0 && rng.gen_bool(cfg.flip_prob.min(1.0));
    let (wf, hf) = (w as f64 - 1.0, h as f64 - 1.0);
    let corners = [(0.0, 0.0), (wf, 0.0), (wf, hf), (0.0, hf)];
    let mut jitter = [(0.0, 0.0); 4];
    if cfg.perspective > 0.0 {
        for j in jitter.iter_mut() {
            *j = (
                rng.gen_range(-cfg.perspective..=cfg.perspective) * w as f64,
                rng.gen_range(-cfg.perspective..=cfg.perspective) * h as f64,
            );
        }
    }
    let identity = !flip && jitter.iter().all(|j| *j == (0.0, 0.0));
    if identity {
        return Geometry {
            output_to_input: Homography::IDENTITY,
            identity,
        };
    }
    // output corner i samples the input at (possibly flipped) corner i + jitter
    let src = corners;
    let dst = corners.map(|c| c);
    let mut dst_pts = dst;
    for (i, p) in dst_pts.iter_mut().enumerate() {
        let (x, y) = corners[i];
        let x = if flip { wf - x } else { x };
        *p = (x + jitter[i].0, y + jitter[i].1);
    }
    let hmg = Homography::from_points(src, dst_pts).unwrap_or(Homography::IDENTITY);
    Geometry {
        output_to_input: hmg,
        identity: false,
    }
}

fn sample_erase(rng: &mut impl Rng, cfg: &AugmentConfig, h: usize, w: usize) -> Option<EraseRect> {
    if cfg.erase_prob <= 0.0 || !rng.gen_bool(cfg.erase_prob.min(1.0)) {
        return None;
    }
    let total = (h * w) as f64;
    for _ in 0..20 {
        let frac = rng.gen_range(cfg.erase_area.0..=cfg.erase_area.1);
        let aspect: f64 = rng.gen_range(0.5..2.0);
        let area = frac * total;
        let rw = (area * aspect).sqrt().round() as usize;
        let rh = (area / aspect).sqrt().round() as usize;
        if rw == 0 || rh == 0 || rw > w || rh > h {
            continue;
        }
        let actual = (rw * rh) as f64 / total;
        if actual < cfg.erase_area.0 || actual > cfg.erase_area.1 {
            continue;
        }
        let x0 = rng.gen_range(0..=w - rw);
        let y0 = rng.gen_range(0..=h - rh);
        return Some(EraseRect {
            x0,
            y0,
            x1: x0 + rw,
            y1: y0 + rh,
        });
    }
    None
}

/// Warps every frame: output pixel `(x, y)` samples the input at `H·(x, y)`.
pub fn warp_sequence(seq: &VideoSequence, hmg: &Homography) -> VideoSequence {
    let mut out = seq.clone();
    let (h, w) = (seq.height, seq.width);
    let n = seq.frame_len();
    for t in 0..seq.frames {
        let src = seq.frame(t);
        let dst = &mut out.pixels[t * n..(t + 1) * n];
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = hmg.apply(x as f64, y as f64);
                let i = (y * w + x) * 3;
                sample_bilinear(src, h, w, sx, sy, &mut dst[i..i + 3]);
            }
        }
    }
    out
}

fn apply_chroma(seq: &mut VideoSequence, c: &Chroma) {
    let n = seq.frame_len();
    for t in 0..seq.frames {
        let frame = &mut seq.pixels[t * n..(t + 1) * n];
        if c.brightness != 1.0 {
            let b = c.brightness as f32;
            frame.iter_mut().for_each(|v| *v = (*v * b).clamp(0.0, 1.0));
        }
        if c.contrast != 1.0 {
            let mean = frame.iter().map(|v| *v as f64).sum::<f64>() / frame.len() as f64;
            let (k, m) = (c.contrast as f32, mean as f32);
            frame
                .iter_mut()
                .for_each(|v| *v = ((*v - m) * k + m).clamp(0.0, 1.0));
        }
        if c.saturation != 1.0 {
            let s = c.saturation as f32;
            for px in frame.chunks_mut(3) {
                let g = (px[0] + px[1] + px[2]) / 3.0;
                for v in px.iter_mut() {
                    *v = (g + (*v - g) * s).clamp(0.0, 1.0);
                }
            }
        }
    }
}

/// Builds the teacher (weak) and student (strong) views of a sequence.
pub fn augment_pair(seq: &VideoSequence, rng: &mut impl Rng, cfg: &AugmentConfig) -> AugmentedPair {
    let (h, w) = (seq.height, seq.width);
    let geometry = sample_geometry(rng, cfg, h, w);
    let weak_chroma = Chroma::sample(rng, cfg.weak_jitter);
    let strong_chroma = Chroma::sample(rng, cfg.strong_jitter);
    let erase = sample_erase(rng, cfg, h, w);

    let base = if geometry.identity {
        seq.clone()
    } else {
        warp_sequence(seq, &geometry.output_to_input)
    };
    let mut weak = base.clone();
    apply_chroma(&mut weak, &weak_chroma);
    let mut strong = base;
    apply_chroma(&mut strong, &strong_chroma);
    if let Some(r) = erase {
        let n = strong.frame_len();
        for t in 0..strong.frames {
            for y in r.y0..r.y1 {
                for x in r.x0..r.x1 {
                    let i = t * n + (y * w + x) * 3;
                    for c in 0..3 {
                        strong.pixels[i + c] = rng.gen_range(0.0f32..=1.0);
                    }
                }
            }
        }
    }
    AugmentedPair {
        weak,
        strong,
        geometry,
        weak_chroma,
        strong_chroma,
        erase,
    }
}

/// Number of frames removed at masking rate `r_percent`: `floor(r·T/100)`,
/// capped so that one frame always remains.
pub fn masked_count(frames: usize, r_percent: f64) -> usize {
    let n = (r_percent * frames as f64 / 100.0).floor().max(0.0) as usize;
    n.min(frames.saturating_sub(1))
}

/// Frames kept for the student, ascending.
pub fn mask_frames(frames: usize, r_percent: f64, rng: &mut impl Rng) -> Vec<usize> {
    let drop = masked_count(frames, r_percent.clamp(0.0, 75.0));
    if drop == 0 {
        return (0..frames).collect();
    }
    let removed = sample(rng, frames, drop);
    let mut removed: Vec<usize> = removed.into_iter().collect();
    removed.sort_unstable();
    (0..frames)
        .filter(|f| removed.binary_search(f).is_err())
        .collect()
}

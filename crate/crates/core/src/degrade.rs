//! Target-domain synthesis: additive Gaussian noise, air turbulence, haze.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::datagen::VideoSequence;
use crate::dataset::{
    read_sequence, write_json, write_sequence_data, DatasetManifest, DerivedFrom, LabelAccess,
    LABELS_FILE, MANIFEST_FILE, SPLITS,
};
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng};

pub const DEGRADATION_FILE: &str = "degradation.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DegradationKind {
    Noise,
    Turbulence,
    Haze,
}

impl DegradationKind {
    pub const ALL: [DegradationKind; 3] = [
        DegradationKind::Noise,
        DegradationKind::Turbulence,
        DegradationKind::Haze,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            DegradationKind::Noise => "noise",
            DegradationKind::Turbulence => "turbulence",
            DegradationKind::Haze => "haze",
        }
    }
}

impl fmt::Display for DegradationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DegradationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "noise" => Ok(DegradationKind::Noise),
            "turbulence" => Ok(DegradationKind::Turbulence),
            "haze" => Ok(DegradationKind::Haze),
            other => Err(Error::InvalidArgument(format!(
                "unknown degradation kind '{other}'"
            ))),
        }
    }
}

/// One sequence's degradation draw, persisted as `degradation.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegradationSpec {
    pub kind: DegradationKind,
    pub params: BTreeMap<String, f64>,
    pub seed: u64,
}

impl DegradationSpec {
    pub fn param(&self, name: &str) -> Result<f64> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("{} spec lacks '{name}'", self.kind)))
    }

    pub fn validate(&self) -> Result<()> {
        let nonneg = |name: &str| -> Result<()> {
            let v = self.param(name)?;
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!("{name} = {v} must be >= 0")))
            }
        };
        match self.kind {
            DegradationKind::Noise => nonneg("sigma"),
            DegradationKind::Haze => {
                nonneg("beta")?;
                nonneg("A")
            }
            DegradationKind::Turbulence => {
                nonneg("strength")?;
                nonneg("spatial_sigma")?;
                let c = self.param("temporal_corr")?;
                if (0.0..1.0).contains(&c) {
                    Ok(())
                } else {
                    Err(Error::InvalidArgument(format!(
                        "temporal_corr = {c} outside [0,1)"
                    )))
                }
            }
        }
    }
}

/// Sampling ranges for per-sequence severities.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradationRanges {
    /// Noise standard deviation on the `[0, 1]` intensity scale.
    pub noise_sigma: (f64, f64),
    pub haze_beta: (f64, f64),
    /// Atmospheric light; 1.0 is full white on the `[0, 1]` scale.
    pub haze_a: f64,
    /// RMS displacement per axis, pixels.
    pub turbulence_strength: (f64, f64),
    pub turbulence_temporal_corr: f64,
    /// Spatial correlation length of the displacement field, pixels.
    pub turbulence_spatial_sigma: (f64, f64),
}

impl Default for DegradationRanges {
    fn default() -> Self {
        Self {
            noise_sigma: (10.0 / 255.0, 50.0 / 255.0),
            haze_beta: (0.5, 1.5),
            haze_a: 1.0,
            turbulence_strength: (1.0, 3.0),
            turbulence_temporal_corr: 0.9,
            turbulence_spatial_sigma: (3.0, 6.0),
        }
    }
}

fn uniform(rng: &mut impl Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.gen_range(lo..=hi)
    } else {
        lo
    }
}

pub fn sample_degradation_spec(
    kind: DegradationKind,
    rng: &mut impl Rng,
    ranges: &DegradationRanges,
) -> DegradationSpec {
    let mut params = BTreeMap::new();
    match kind {
        DegradationKind::Noise => {
            params.insert("sigma".into(), uniform(rng, ranges.noise_sigma));
        }
        DegradationKind::Haze => {
            params.insert("beta".into(), uniform(rng, ranges.haze_beta));
            params.insert("A".into(), ranges.haze_a);
        }
        DegradationKind::Turbulence => {
            params.insert("strength".into(), uniform(rng, ranges.turbulence_strength));
            params.insert("temporal_corr".into(), ranges.turbulence_temporal_corr);
            params.insert(
                "spatial_sigma".into(),
                uniform(rng, ranges.turbulence_spatial_sigma),
            );
        }
    }
    DegradationSpec {
        kind,
        params,
        seed: rng.gen(),
    }
}

/// `clip(I + n, 0, 1)` with `n ~ N(0, sigma²)` iid per pixel, channel and frame.
pub fn add_gaussian_noise(seq: &VideoSequence, sigma: f64, seed: u64) -> Result<VideoSequence> {
    if !(sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "sigma = {sigma} must be >= 0"
        )));
    }
    let mut out = seq.clone();
    if sigma == 0.0 {
        return Ok(out);
    }
    let mut r = rng(seed);
    for v in out.pixels.iter_mut() {
        let n: f64 = StandardNormal.sample(&mut r);
        *v = ((*v as f64) + sigma * n).clamp(0.0, 1.0) as f32;
    }
    Ok(out)
}

/// `I·e^{−βd} + A·(1 − e^{−βd})` per pixel, using the sequence's depth map.
pub fn apply_haze(seq: &VideoSequence, beta: f64, a: f64) -> Result<VideoSequence> {
    if !(beta >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "beta = {beta} must be >= 0"
        )));
    }
    let depth = seq
        .depth
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: haze needs a depth map", seq.id)))?;
    let mut out = seq.clone();
    for (p, d) in depth.iter().enumerate() {
        let tr = (-beta * *d as f64).exp();
        for v in &mut out.pixels[p * 3..p * 3 + 3] {
            *v = haze_pixel(*v as f64, tr, a).clamp(0.0, 1.0) as f32;
        }
    }
    Ok(out)
}

pub fn haze_pixel(intensity: f64, transmission: f64, a: f64) -> f64 {
    intensity * transmission + a * (1.0 - transmission)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TurbulenceParams {
    pub strength: f64,
    pub temporal_corr: f64,
    pub spatial_sigma: f64,
}

impl TurbulenceParams {
    pub fn new(strength: f64, temporal_corr: f64) -> Self {
        Self {
            strength,
            temporal_corr,
            spatial_sigma: 4.0,
        }
    }
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    if sigma <= 0.0 {
        return vec![1.0];
    }
    let r = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-r..=r)
        .map(|i| (-(i as f64).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Unit-variance, spatially smooth Gaussian field of size `h×w`.
fn smooth_noise(h: usize, w: usize, sigma: f64, rng: &mut impl Rng) -> Vec<f64> {
    let k = gaussian_kernel(sigma);
    let r = k.len() / 2;
    let (ph, pw) = (h + 2 * r, w + 2 * r);
    let white: Vec<f64> = (0..ph * pw).map(|_| StandardNormal.sample(rng)).collect();
    // valid convolution over a padded field keeps the variance uniform up to the border
    let mut rows = vec![0.0; ph * w];
    for y in 0..ph {
        for x in 0..w {
            rows[y * w + x] = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * white[y * pw + x + i])
                .sum();
        }
    }
    let norm = k.iter().map(|v| v * v).sum::<f64>();
    let scale = 1.0 / norm; // variance after 2-D filtering is norm²
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let s: f64 = k
                .iter()
                .enumerate()
                .map(|(i, kv)| kv * rows[(y + i) * w + x])
                .sum();
            out[y * w + x] = s * scale;
        }
    }
    out
}

/// Per-frame fields driving the turbulence model.
#[derive(Clone, Debug)]
pub struct TurbulenceFields {
    /// `[T][H·W]` horizontal displacement, pixels.
    pub dx: Vec<Vec<f64>>,
    /// `[T][H·W]` vertical displacement, pixels.
    pub dy: Vec<Vec<f64>>,
    /// `[T][H·W]` blur standard deviation, pixels, in `[0, strength/2]`.
    pub blur: Vec<Vec<f64>>,
}

/// Smoothed-noise displacement and blur fields evolving as an AR(1) process
/// in time: `z_t = ρ·z_{t−1} + √(1−ρ²)·ε_t`, so each component stays unit
/// variance with lag-1 autocorrelation `ρ`.
pub fn turbulence_fields(
    frames: usize,
    h: usize,
    w: usize,
    p: &TurbulenceParams,
    rng: &mut impl Rng,
) -> TurbulenceFields {
    let rho = p.temporal_corr;
    let innov = (1.0 - rho * rho).sqrt();
    let mut zx: Vec<f64> = Vec::new();
    let mut zy: Vec<f64> = Vec::new();
    let mut zb: Vec<f64> = Vec::new();
    let mut out = TurbulenceFields {
        dx: Vec::with_capacity(frames),
        dy: Vec::with_capacity(frames),
        blur: Vec::with_capacity(frames),
    };
    for t in 0..frames {
        let ex = smooth_noise(h, w, p.spatial_sigma, rng);
        let ey = smooth_noise(h, w, p.spatial_sigma, rng);
        let eb = smooth_noise(h, w, p.spatial_sigma, rng);
        if t == 0 {
            zx = ex;
            zy = ey;
            zb = eb;
        } else {
            for (z, e) in zx.iter_mut().zip(&ex) {
                *z = rho * *z + innov * e;
            }
            for (z, e) in zy.iter_mut().zip(&ey) {
                *z = rho * *z + innov * e;
            }
            for (z, e) in zb.iter_mut().zip(&eb) {
                *z = rho * *z + innov * e;
            }
        }
        out.dx.push(zx.iter().map(|z| z * p.strength).collect());
        out.dy.push(zy.iter().map(|z| z * p.strength).collect());
        // logistic approximation of the normal CDF maps z to (0, 1)
        out.blur.push(
            zb.iter()
                .map(|z| p.strength / 2.0 / (1.0 + (-1.702 * z).exp()))
                .collect(),
        );
    }
    out
}

pub(crate) fn sample_bilinear(img: &[f32], h: usize, w: usize, x: f64, y: f64, out: &mut [f32]) {
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let (fx, fy) = ((x - x0 as f64) as f32, (y - y0 as f64) as f32);
    for c in 0..3 {
        let p = |yy: usize, xx: usize| img[(yy * w + xx) * 3 + c];
        let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
        let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
        out[c] = top * (1.0 - fy) + bot * fy;
    }
}

/// Separable Gaussian blur of an interleaved RGB image, border replicated.
fn gaussian_blur(img: &[f32], h: usize, w: usize, sigma: f64) -> Vec<f32> {
    let k = gaussian_kernel(sigma);
    if k.len() == 1 {
        return img.to_vec();
    }
    let r = (k.len() / 2) as isize;
    let mut tmp = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                    s += kv * img[(y * w + xx) * 3 + c] as f64;
                }
                tmp[(y * w + x) * 3 + c] = s as f32;
            }
        }
    }
    let mut out = vec![0.0f32; img.len()];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let mut s = 0.0;
                for (i, kv) in k.iter().enumerate() {
                    let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                    s += kv * tmp[(yy * w + x) * 3 + c] as f64;
                }
                out[(y * w + x) * 3 + c] = s as f32;
            }
        }
    }
    out
}

const BLUR_LEVELS: usize = 5;

/// Displacement by bilinear warping followed by spatially varying blur.
pub fn apply_turbulence_with(
    seq: &VideoSequence,
    p: &TurbulenceParams,
    seed: u64,
) -> Result<VideoSequence> {
    if !(p.strength >= 0.0) {
        return Err(Error::InvalidArgument(format!(
            "strength = {} must be >= 0",
            p.strength
        )));
    }
    if !(0.0..1.0).contains(&p.temporal_corr) {
        return Err(Error::InvalidArgument(format!(
            "temporal_corr = {} outside [0,1)",
            p.temporal_corr
        )));
    }
    let mut out = seq.clone();
    if p.strength == 0.0 {
        return Ok(out);
    }
    let (h, w) = (seq.height, seq.width);
    let fields = turbulence_fields(seq.frames, h, w, p, &mut rng(seed));
    let max_blur = p.strength / 2.0;
    for t in 0..seq.frames {
        let src = seq.frame(t);
        let mut warped = vec![0.0f32; src.len()];
        for y in 0..h {
            for x in 0..w {
                let i = y * w + x;
                sample_bilinear(
                    src,
                    h,
                    w,
                    x as f64 + fields.dx[t][i],
                    y as f64 + fields.dy[t][i],
                    &mut warped[i * 3..i * 3 + 3],
                );
            }
        }
        let levels: Vec<Vec<f32>> = (0..BLUR_LEVELS)
            .map(|l| {
                let s = max_blur * l as f64 / (BLUR_LEVELS - 1) as f64;
                gaussian_blur(&warped, h, w, s)
            })
            .collect();
        let dst = &mut out.pixels[t * src.len()..(t + 1) * src.len()];
        for i in 0..h * w {
            let pos = fields.blur[t][i] / max_blur * (BLUR_LEVELS - 1) as f64;
            let lo = (pos.floor() as usize).min(BLUR_LEVELS - 1);
            let hi = (lo + 1).min(BLUR_LEVELS - 1);
            let f = (pos - lo as f64) as f32;
            for c in 0..3 {
                let v = levels[lo][i * 3 + c] * (1.0 - f) + levels[hi][i * 3 + c] * f;
                dst[i * 3 + c] = v.clamp(0.0, 1.0);
            }
        }
    }
    Ok(out)
}

pub fn apply_turbulence(
    seq: &VideoSequence,
    strength: f64,
    temporal_corr: f64,
    seed: u64,
) -> Result<VideoSequence> {
    apply_turbulence_with(seq, &TurbulenceParams::new(strength, temporal_corr), seed)
}

pub fn apply_spec(seq: &VideoSequence, spec: &DegradationSpec) -> Result<VideoSequence> {
    spec.validate()?;
    match spec.kind {
        DegradationKind::Noise => add_gaussian_noise(seq, spec.param("sigma")?, spec.seed),
        DegradationKind::Haze => apply_haze(seq, spec.param("beta")?, spec.param("A")?),
        DegradationKind::Turbulence => apply_turbulence_with(
            seq,
            &TurbulenceParams {
                strength: spec.param("strength")?,
                temporal_corr: spec.param("temporal_corr")?,
                spatial_sigma: spec.param("spatial_sigma")?,
            },
            spec.seed,
        ),
    }
}

/// Writes a degraded copy of every split under `out_root`.
///
/// Sequence `i` (manifest order: train, val, test) draws its spec from
/// `derive_seed(seed, i)`. Labels are copied byte for byte; `degradation.json`
/// records the draw.
pub fn degrade_dataset(
    manifest: &DatasetManifest,
    kind: DegradationKind,
    out_root: &Path,
    seed: u64,
    ranges: &DegradationRanges,
    force: bool,
) -> Result<DatasetManifest> {
    if out_root.exists() {
        if !force {
            return Err(Error::AlreadyExists {
                path: out_root.to_path_buf(),
            });
        }
        fs::remove_dir_all(out_root).map_err(|e| Error::io(out_root, e))?;
    }
    let mut jobs = Vec::new();
    let mut index = 0u64;
    for split in SPLITS {
        for id in manifest.splits.get(split).into_iter().flatten() {
            jobs.push((split, id.clone(), derive_seed(seed, index)));
            index += 1;
        }
    }
    jobs.par_iter()
        .map(|(split, id, s)| {
            let src_dir = manifest.sequence_dir(split, id);
            let dst_dir = out_root.join(split).join(id);
            let seq = read_sequence(&src_dir, LabelAccess::Blind)?;
            let spec = sample_degradation_spec(kind, &mut rng(*s), ranges);
            let degraded = apply_spec(&seq, &spec)?;
            write_sequence_data(&dst_dir, &degraded, false)?;
            let src_labels = src_dir.join(LABELS_FILE);
            if src_labels.exists() {
                fs::copy(&src_labels, dst_dir.join(LABELS_FILE))
                    .map_err(|e| Error::io(&src_labels, e))?;
            }
            write_json(&dst_dir.join(DEGRADATION_FILE), &spec)
        })
        .collect::<Result<Vec<()>>>()?;
    let mut out = manifest.clone();
    out.root = out_root.to_path_buf();
    out.name = format!("{}-{}", manifest.name, kind);
    out.derived_from = Some(DerivedFrom {
        source: manifest.root.clone(),
        degradation: kind.to_string(),
        seed,
    });
    write_json(&out_root.join(MANIFEST_FILE), &out)?;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{generate_sequence, GenConfig};

    fn small_seq() -> VideoSequence {
        let cfg = GenConfig {
            frames: 3,
            height: 32,
            width: 32,
            min_size: 8.0,
            max_size: 12.0,
            ..GenConfig::default()
        };
        generate_sequence(&cfg, 5).unwrap()
    }

    #[test]
    fn zero_severity_is_identity() {
        let s = small_seq();
        assert_eq!(add_gaussian_noise(&s, 0.0, 1).unwrap(), s);
        assert_eq!(apply_haze(&s, 0.0, 1.0).unwrap(), s);
        assert_eq!(apply_turbulence(&s, 0.0, 0.9, 1).unwrap(), s);
    }

    #[test]
    fn haze_hand_value() {
        let v = haze_pixel(0.2, (-1.0f64).exp(), 1.0);
        assert!((v - 0.7057).abs() < 1e-4, "{v}");
    }

    #[test]
    fn haze_requires_depth() {
        let mut s = small_seq();
        s.depth = None;
        assert!(apply_haze(&s, 1.0, 1.0).is_err());
    }

    #[test]
    fn preserves_shape_and_labels() {
        let s = small_seq();
        for kind in DegradationKind::ALL {
            let spec = sample_degradation_spec(kind, &mut rng(3), &DegradationRanges::default());
            let d = apply_spec(&s, &spec).unwrap();
            assert_eq!(d.pixels.len(), s.pixels.len());
            assert_eq!(d.labels, s.labels);
            assert_eq!(d.frames, s.frames);
            assert!(d.pixels.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn negative_severity_rejected() {
        let s = small_seq();
        assert!(add_gaussian_noise(&s, -0.1, 0).is_err());
        assert!(apply_haze(&s, -1.0, 1.0).is_err());
        assert!(apply_turbulence(&s, -1.0, 0.5, 0).is_err());
        assert!(apply_turbulence(&s, 1.0, 1.0, 0).is_err());
    }

    #[test]
    fn unknown_kind_rejected() {
        assert!("rain".parse::<DegradationKind>().is_err());
        assert_eq!(
            "haze".parse::<DegradationKind>().unwrap(),
            DegradationKind::Haze
        );
    }

    #[test]
    fn spec_sampling_is_deterministic() {
        let r = DegradationRanges::default();
        let a = sample_degradation_spec(DegradationKind::Noise, &mut rng(9), &r);
        let b = sample_degradation_spec(DegradationKind::Noise, &mut rng(9), &r);
        assert_eq!(a, b);
    }
}

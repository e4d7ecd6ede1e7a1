//! Result tables (method × degradation AP50) and entropy/AP curves.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sfda::{EntropyTrace, Method};

/// One evaluated (method, degradation) cell, possibly over several seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEntry {
    pub method: Method,
    pub degradation: String,
    /// AP50 in [0, 1], one per seed.
    pub ap50: Vec<f64>,
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    })
}

pub struct Table {
    pub methods: Vec<Method>,
    pub degradations: Vec<String>,
    /// Median AP50 ×100 per (method, degradation).
    pub cells: BTreeMap<(Method, String), f64>,
}

pub fn build_table(entries: &[TableEntry]) -> Table {
    let mut methods: Vec<Method> = entries.iter().map(|e| e.method).collect();
    methods.sort();
    methods.dedup();
    let mut degradations: Vec<String> = Vec::new();
    for e in entries {
        if !degradations.contains(&e.degradation) {
            degradations.push(e.degradation.clone());
        }
    }
    let mut pooled: BTreeMap<(Method, String), Vec<f64>> = BTreeMap::new();
    for e in entries {
        pooled
            .entry((e.method, e.degradation.clone()))
            .or_default()
            .extend(&e.ap50);
    }
    let cells = pooled
        .into_iter()
        .filter_map(|(k, v)| median(&v).map(|m| (k, 100.0 * m)))
        .collect();
    Table {
        methods,
        degradations,
        cells,
    }
}

impl Table {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("method");
        for d in &self.degradations {
            out.push(',');
            out.push_str(d);
        }
        out.push('\n');
        for m in &self.methods {
            out.push_str(m.label());
            for d in &self.degradations {
                out.push(',');
                if let Some(v) = self.cells.get(&(*m, d.clone())) {
                    let _ = write!(out, "{v:.1}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let first = self
            .methods
            .iter()
            .map(|m| m.label().len())
            .chain(["Method".len()])
            .max()
            .unwrap_or(6);
        let widths: Vec<usize> = self.degradations.iter().map(|d| d.len().max(6)).collect();
        let mut out = format!("{:<first$}", "Method");
        for (d, w) in self.degradations.iter().zip(&widths) {
            let _ = write!(out, "  {d:>w$}");
        }
        out.push('\n');
        let total = first + widths.iter().map(|w| w + 2).sum::<usize>();
        out.push_str(&"-".repeat(total));
        out.push('\n');
        for m in &self.methods {
            let _ = write!(out, "{:<first$}", m.label());
            for (d, w) in self.degradations.iter().zip(&widths) {
                match self.cells.get(&(*m, d.clone())) {
                    Some(v) => {
                        let _ = write!(out, "  {v:>w$.1}");
                    }
                    None => {
                        let _ = write!(out, "  {:>w$}", "-");
                    }
                }
            }
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub iteration: usize,
    pub h_smoothed: f64,
    pub ap50: Option<f64>,
}

/// One row per complete window of the trace, at the window's last point,
/// with the AP50 of the snapshot taken at that iteration when known.
pub fn curve_rows(trace: &EntropyTrace, snapshot_ap: &BTreeMap<usize, f64>) -> Vec<CurveRow> {
    let s = trace.smoothed();
    let w = trace.window;
    (1..=trace.len() / w)
        .map(|j| {
            let i = j * w - 1;
            let it = trace.points[i].0;
            CurveRow {
                iteration: it,
                h_smoothed: s[i],
                ap50: snapshot_ap.get(&it).copied(),
            }
        })
        .collect()
}

pub fn curve_csv(rows: &[CurveRow], selected: Option<usize>) -> String {
    let mut out = String::from("iteration,H_smoothed,ap50,selected\n");
    for r in rows {
        let ap = r.ap50.map(|v| format!("{v:.6}")).unwrap_or_default();
        let sel = u8::from(Some(r.iteration) == selected);
        let _ = writeln!(out, "{},{:.6},{ap},{sel}", r.iteration, r.h_smoothed);
    }
    out
}

const W: u32 = 640;
const H: u32 = 360;
const MARGIN: f32 = 30.0;

fn polyline(img: &mut RgbImage, pts: &[(f32, f32)], colour: Rgb<u8>) {
    for pair in pts.windows(2) {
        draw_line_segment_mut(img, pair[0], pair[1], colour);
        draw_line_segment_mut(
            img,
            (pair[0].0, pair[0].1 + 1.0),
            (pair[1].0, pair[1].1 + 1.0),
            colour,
        );
    }
}

/// Both series min-max scaled into one panel: H in blue, AP50 in orange, the
/// selected iteration as a red vertical bar.
pub fn render_curve_png(rows: &[CurveRow], selected: Option<usize>, path: &Path) -> Result<()> {
    let mut img = RgbImage::from_pixel(W, H, Rgb([255, 255, 255]));
    let (x0, x1) = (MARGIN, W as f32 - MARGIN);
    let (y0, y1) = (MARGIN, H as f32 - MARGIN);
    let axis = Rgb([90, 90, 90]);
    draw_line_segment_mut(&mut img, (x0, y1), (x1, y1), axis);
    draw_line_segment_mut(&mut img, (x0, y0), (x0, y1), axis);
    if !rows.is_empty() {
        let first = rows[0].iteration as f32;
        let last = rows[rows.len() - 1].iteration as f32;
        let xs = |it: usize| {
            if last > first {
                x0 + (it as f32 - first) / (last - first) * (x1 - x0)
            } else {
                0.5 * (x0 + x1)
            }
        };
        let scale = |vals: &[(usize, f64)]| -> Vec<(f32, f32)> {
            let lo = vals.iter().map(|v| v.1).fold(f64::INFINITY, f64::min);
            let hi = vals.iter().map(|v| v.1).fold(f64::NEG_INFINITY, f64::max);
            vals.iter()
                .map(|&(it, v)| {
                    let t = if hi > lo { (v - lo) / (hi - lo) } else { 0.5 };
                    (xs(it), y1 - t as f32 * (y1 - y0))
                })
                .collect()
        };
        if let Some(sel) = selected {
            let x = xs(sel).round() as i32;
            draw_filled_rect_mut(
                &mut img,
                Rect::at(x - 1, y0 as i32).of_size(3, (y1 - y0) as u32),
                Rgb([220, 40, 40]),
            );
        }
        let h: Vec<(usize, f64)> = rows.iter().map(|r| (r.iteration, r.h_smoothed)).collect();
        polyline(&mut img, &scale(&h), Rgb([40, 90, 200]));
        let ap: Vec<(usize, f64)> = rows
            .iter()
            .filter_map(|r| r.ap50.map(|a| (r.iteration, a)))
            .collect();
        if !ap.is_empty() {
            polyline(&mut img, &scale(&ap), Rgb([230, 140, 30]));
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        source: e,
    })
}

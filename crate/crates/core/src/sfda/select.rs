//! Entropy trace and checkpoint selection.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EntropyTrace {
    pub window: usize,
    pub points: Vec<(usize, f64)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SelectionRule {
    FirstLocalMin,
    GlobalMin,
}

impl EntropyTrace {
    pub fn new(window: usize) -> Self {
        Self {
            window: window.max(1),
            points: Vec::new(),
        }
    }

    pub fn push(&mut self, iteration: usize, h: f64) -> Result<()> {
        if let Some(&(last, _)) = self.points.last() {
            if iteration <= last {
                return Err(Error::InvalidArgument(format!(
                    "trace iteration {iteration} not after {last}"
                )));
            }
        }
        self.points.push((iteration, h));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Trailing mean over the last `window` points (fewer at the start).
    pub fn smoothed(&self) -> Vec<f64> {
        let w = self.window;
        let mut out = Vec::with_capacity(self.points.len());
        let mut acc = 0.0;
        for i in 0..self.points.len() {
            acc += self.points[i].1;
            if i >= w {
                acc -= self.points[i - w].1;
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }

    /// Smoothed value of the most recent point.
    pub fn last_smoothed(&self) -> Option<f64> {
        let n = self.points.len();
        if n == 0 {
            return None;
        }
        let from = n.saturating_sub(self.window);
        let s: f64 = self.points[from..].iter().map(|p| p.1).sum();
        Some(s / (n - from) as f64)
    }
}

fn argmin(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x < v[best] {
            best = i;
        }
    }
    best
}

/// Index into `trace.points` chosen by `rule`.
pub fn select_index(trace: &EntropyTrace, rule: SelectionRule) -> Result<usize> {
    if trace.is_empty() {
        return Err(Error::Empty("entropy trace".into()));
    }
    let w = trace.window;
    let n = trace.len();
    if n < w {
        let raw: Vec<f64> = trace.points.iter().map(|p| p.1).collect();
        return Ok(argmin(&raw));
    }
    let s = trace.smoothed();
    // only points whose trailing window is full
    let first = w - 1;
    if rule == SelectionRule::FirstLocalMin {
        for i in first + w..n.saturating_sub(w) {
            let left = &s[i - w..i];
            let right = &s[i + 1..=i + w];
            // a flat bottom counts once, at its first point
            if left.iter().all(|&v| s[i] < v)
                && right.iter().all(|&v| s[i] <= v)
                && right.iter().any(|&v| s[i] < v)
            {
                return Ok(i);
            }
        }
    }
    Ok(first + argmin(&s[first..]))
}

/// Iteration of the selected point.
pub fn select_checkpoint(trace: &EntropyTrace) -> Result<usize> {
    Ok(trace.points[select_index(trace, SelectionRule::FirstLocalMin)?].0)
}

pub fn select_checkpoint_with(trace: &EntropyTrace, rule: SelectionRule) -> Result<usize> {
    Ok(trace.points[select_index(trace, rule)?].0)
}

/// The stored snapshot closest to `iteration`, earlier on ties.
pub fn nearest_snapshot(snapshots: &[usize], iteration: usize) -> Option<usize> {
    snapshots
        .iter()
        .enumerate()
        .min_by_key(|(_, &s)| (s.abs_diff(iteration), s))
        .map(|(i, _)| i)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(window: usize, f: impl Fn(usize) -> f64, n: usize) -> EntropyTrace {
        let mut t = EntropyTrace::new(window);
        for i in 0..n {
            t.push(i, f(i)).unwrap();
        }
        t
    }

    #[test]
    fn decreasing_trace_selects_last() {
        let t = trace(10, |i| 0.3 - i as f64 * 1e-3, 200);
        assert_eq!(select_checkpoint(&t).unwrap(), 199);
    }

    #[test]
    fn v_shape_selects_valley() {
        let t = trace(10, |i| (i as f64 - 300.0).abs() * 1e-3 + 0.05, 600);
        let it = select_checkpoint(&t).unwrap();
        // trailing smoothing lags the raw valley by about half a window
        assert!((300..=310).contains(&it), "{it}");
    }

    #[test]
    fn short_trace_uses_raw_minimum() {
        let t = trace(100, |i| [0.3, 0.1, 0.2][i], 3);
        assert_eq!(select_checkpoint(&t).unwrap(), 1);
    }

    #[test]
    fn two_dips_first_versus_global() {
        let dip = |i: usize, c: f64, depth: f64| {
            let d = (i as f64 - c).abs();
            if d < 500.0 {
                depth * (1.0 - d / 500.0)
            } else {
                0.0
            }
        };
        let t = trace(
            100,
            |i| 0.34 - dip(i, 2000.0, 0.04) - dip(i, 8000.0, 0.06),
            10_000,
        );
        let first = select_checkpoint(&t).unwrap();
        assert!(first.abs_diff(2000) <= 100, "{first}");
        let global = select_checkpoint_with(&t, SelectionRule::GlobalMin).unwrap();
        assert!(global.abs_diff(8000) <= 100, "{global}");
    }

    #[test]
    fn iterations_must_increase() {
        let mut t = EntropyTrace::new(5);
        t.push(3, 0.1).unwrap();
        assert!(t.push(3, 0.1).is_err());
    }

    #[test]
    fn nearest_snapshot_ties_earlier() {
        assert_eq!(nearest_snapshot(&[99, 199, 299], 149), Some(0));
        assert_eq!(nearest_snapshot(&[99, 199, 299], 250), Some(2));
        assert_eq!(nearest_snapshot(&[], 5), None);
    }
}

//! Frame deletion and duplication from the flow variation sequence.

#[cfg(feature = "parallel")]
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{dense_flow, flow_stats, FlowParams};
use crate::video_io::{to_luma, Frame};

use super::{AlarmDetail, AlarmEvent, AlarmKind};

const MAD_TO_SIGMA: f64 = 1.4826;
const BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeryParams {
    /// Transitions in the sliding median/MAD window.
    pub window: usize,
    pub k: f64,
    /// Lower bound on the robust scale, relative to the window median.
    pub min_rel_scale: f64,
    /// Mean absolute gray-level difference below which two frames are equal.
    pub dup_epsilon: f64,
    pub min_dup: usize,
    pub autocorr_rho: f64,
    /// Transitions compared per autocorrelation test.
    pub autocorr_len: usize,
    /// Largest allowed difference between a window and its replay, relative
    /// to their mean level.
    pub autocorr_tolerance: f64,
    pub max_lag: usize,
    /// Pixels along each edge left out of the flow statistics; content
    /// there has no match once it leaves the frame.
    pub border_px: usize,
}

impl Default for ForgeryParams {
    fn default() -> Self {
        ForgeryParams {
            window: 50,
            k: 3.0,
            min_rel_scale: 0.5,
            dup_epsilon: 1.0,
            min_dup: 3,
            autocorr_rho: 0.98,
            autocorr_len: 8,
            autocorr_tolerance: 0.05,
            max_lag: 300,
            border_px: 16,
        }
    }
}

impl ForgeryParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("forgery.{m}")));
        if self.window < 4 {
            return bad("window must be at least 4");
        }
        if !(self.k > 0.0) {
            return bad("k must be positive");
        }
        if !(self.min_rel_scale >= 0.0) || !(self.dup_epsilon >= 0.0) || !(self.autocorr_tolerance >= 0.0) {
            return bad("min_rel_scale, dup_epsilon and autocorr_tolerance must be non-negative");
        }
        if self.min_dup == 0 || self.autocorr_len < 2 {
            return bad("min_dup must be at least 1 and autocorr_len at least 2");
        }
        if !(self.autocorr_rho > 0.0 && self.autocorr_rho <= 1.0) {
            return bad("autocorr_rho must be in (0, 1]");
        }
        Ok(())
    }
}

/// Per-transition series: entry `t` describes frames `t -> t+1`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct VariationSequence {
    /// Population variance of flow magnitudes.
    pub variance: Vec<f64>,
    /// Total flow magnitude.
    pub total: Vec<f64>,
    pub mean_abs_diff: Vec<f64>,
}

impl VariationSequence {
    pub fn len(&self) -> usize {
        self.variance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.variance.is_empty()
    }
}

pub fn mean_abs_diff(a: &Frame, b: &Frame) -> f64 {
    let n = a.pixels().len().max(1);
    a.pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as i32 - y as i32).unsigned_abs() as f64)
        .sum::<f64>()
        / n as f64
}

fn transition(a: &Frame, b: &Frame, flow: &FlowParams, border_px: usize) -> Result<(f64, f64, f64)> {
    let field = dense_flow(a, b, flow)?;
    let s = flow_stats(&field.interior(border_px));
    Ok((s.variance, s.total, mean_abs_diff(a, b)))
}

/// Flow statistics of every consecutive frame pair, computed in batches.
pub fn variation_sequence<I>(frames: I, flow: &FlowParams, border_px: usize) -> Result<VariationSequence>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    flow.validate()?;
    let mut seq = VariationSequence::default();
    let mut batch: Vec<Frame> = Vec::with_capacity(BATCH + 1);
    let flush = |batch: &mut Vec<Frame>, seq: &mut VariationSequence| -> Result<()> {
        let pairs: Vec<(usize, usize)> = (1..batch.len()).map(|i| (i - 1, i)).collect();
        let run = |&(i, j): &(usize, usize)| transition(&batch[i], &batch[j], flow, border_px);
        #[cfg(feature = "parallel")]
        let stats: Vec<Result<(f64, f64, f64)>> = pairs.par_iter().map(run).collect();
        #[cfg(not(feature = "parallel"))]
        let stats: Vec<Result<(f64, f64, f64)>> = pairs.iter().map(run).collect();
        for s in stats {
            let (v, f, d) = s?;
            seq.variance.push(v);
            seq.total.push(f);
            seq.mean_abs_diff.push(d);
        }
        let last = batch.pop();
        batch.clear();
        batch.extend(last);
        Ok(())
    };
    for frame in frames {
        let frame = frame?;
        let luma = if frame.channels() == 1 { frame } else { to_luma(&frame) };
        if let Some(first) = batch.first() {
            if !first.same_shape(&luma) {
                return Err(Error::DimensionMismatch {
                    index: luma.index(),
                    got_w: luma.width(),
                    got_h: luma.height(),
                    got_c: luma.channels(),
                    want_w: first.width(),
                    want_h: first.height(),
                    want_c: first.channels(),
                });
            }
        }
        batch.push(luma);
        if batch.len() > BATCH {
            flush(&mut batch, &mut seq)?;
        }
    }
    if batch.len() > 1 {
        flush(&mut batch, &mut seq)?;
    }
    Ok(seq)
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        0.5 * (sorted[n / 2 - 1] + sorted[n / 2])
    }
}

/// Indices whose robust z-score against a centered window of `window + 1`
/// samples exceeds `k`, with the z-score. Windows are shifted inward at the
/// ends so every window has full size.
pub fn robust_outliers(series: &[f64], window: usize, k: f64, min_rel_scale: f64) -> Vec<(usize, f64)> {
    let n = series.len();
    let half = window / 2;
    let size = (2 * half + 1).min(n);
    let mut out = Vec::new();
    let mut buf = Vec::with_capacity(size);
    for t in 0..n {
        let start = t.saturating_sub(half).min(n - size);
        buf.clear();
        buf.extend_from_slice(&series[start..start + size]);
        buf.sort_by(|a, b| a.total_cmp(b));
        let med = median(&buf);
        for v in &mut buf {
            *v = (*v - med).abs();
        }
        buf.sort_by(|a, b| a.total_cmp(b));
        let scale = (MAD_TO_SIGMA * median(&buf)).max(min_rel_scale * med.abs()).max(1e-9);
        let z = (series[t] - med).abs() / scale;
        if z > k {
            out.push((t, z));
        }
    }
    out
}

fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma) * (x - ma);
        sbb += (y - mb) * (y - mb);
    }
    let floor = 1e-12 * (ma.abs() + mb.abs() + 1.0).powi(2) * n;
    if saa <= floor || sbb <= floor {
        return None;
    }
    Some(sab / (saa * sbb).sqrt())
}

fn same_level(a: &[f64], b: &[f64], tolerance: f64) -> bool {
    let level = a.iter().chain(b).map(|x| x.abs()).sum::<f64>() / (2 * a.len()) as f64;
    a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tolerance * level)
}

fn runs(flags: impl Iterator<Item = bool>) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = None;
    let mut n = 0;
    for (i, f) in flags.enumerate() {
        match (f, start) {
            (true, None) => start = Some(i),
            (false, Some(s)) => {
                out.push((s, i - 1));
                start = None;
            }
            _ => {}
        }
        n = i + 1;
    }
    if let Some(s) = start {
        out.push((s, n - 1));
    }
    out
}

/// Alarms from a precomputed variation sequence.
pub fn scan_sequence(seq: &VariationSequence, params: &ForgeryParams) -> Vec<AlarmEvent> {
    let mut events = Vec::new();

    // Outliers, merged over consecutive transitions.
    let outliers = robust_outliers(&seq.variance, params.window, params.k, params.min_rel_scale);
    let mut i = 0;
    while i < outliers.len() {
        let mut j = i;
        while j + 1 < outliers.len() && outliers[j + 1].0 == outliers[j].0 + 1 {
            j += 1;
        }
        let z = outliers[i..=j].iter().map(|o| o.1).fold(0.0, f64::max);
        events.push(AlarmEvent {
            kind: AlarmKind::Forgery,
            start_frame: outliers[i].0 as u64,
            end_frame: outliers[j].0 as u64 + 1,
            score: z,
            detail: AlarmDetail::ZScore { series: "variance".into(), z },
        });
        i = j + 1;
    }

    // Frozen runs: consecutive near-identical frames.
    for (s, e) in runs(seq.mean_abs_diff.iter().map(|&d| d < params.dup_epsilon)) {
        let len = e - s + 1;
        if len >= params.min_dup {
            events.push(AlarmEvent {
                kind: AlarmKind::Forgery,
                start_frame: s as u64,
                end_frame: e as u64 + 1,
                score: len as f64,
                detail: AlarmDetail::Duplicate {
                    method: "frozen".into(),
                    source_start: s as u64,
                    copy_start: s as u64 + 1,
                    len: len as u64,
                },
            });
        }
    }

    // Replayed runs: a stretch of the sequence that reappears `lag` later.
    let v = &seq.variance;
    let m = params.autocorr_len;
    let mut replays: Vec<(usize, usize, usize, f64)> = Vec::new();
    for lag in m..=params.max_lag {
        if lag + m > v.len() {
            break;
        }
        let hits: Vec<Option<f64>> = (0..=v.len() - lag - m)
            .map(|t| {
                let (a, b) = (&v[t..t + m], &v[t + lag..t + lag + m]);
                pearson(a, b).filter(|&r| r > params.autocorr_rho && same_level(a, b, params.autocorr_tolerance))
            })
            .collect();
        for (s, e) in runs(hits.iter().map(Option::is_some)) {
            let r = hits[s..=e].iter().flatten().fold(0.0, |a: f64, &b| a.max(b));
            replays.push((s, lag, e - s + m + 1, r));
        }
    }
    // Keep the longest replay among overlapping copies.
    replays.sort_by(|a, b| b.2.cmp(&a.2).then(a.0.cmp(&b.0)).then(a.1.cmp(&b.1)));
    let mut kept: Vec<(usize, usize, usize, f64)> = Vec::new();
    for r in replays {
        let (cs, ce) = (r.0 + r.1, r.0 + r.1 + r.2 - 1);
        if kept.iter().all(|k| ce < k.0 + k.1 || cs > k.0 + k.1 + k.2 - 1) {
            kept.push(r);
        }
    }
    kept.sort_by_key(|k| k.0 + k.1);
    for (s, lag, len, r) in kept {
        events.push(AlarmEvent {
            kind: AlarmKind::Forgery,
            start_frame: (s + lag) as u64,
            end_frame: (s + lag + len - 1) as u64,
            score: r,
            detail: AlarmDetail::Duplicate {
                method: "autocorrelation".into(),
                source_start: s as u64,
                copy_start: (s + lag) as u64,
                len: len as u64,
            },
        });
    }

    events.sort_by_key(|e| (e.start_frame, e.end_frame));
    events
}

/// Scans a whole stream for deleted, frozen and replayed frame runs.
pub fn forgery_scan<I>(frames: I, flow: &FlowParams, params: &ForgeryParams) -> Result<(VariationSequence, Vec<AlarmEvent>)>
where
    I: IntoIterator<Item = Result<Frame>>,
{
    params.validate()?;
    let seq = variation_sequence(frames, flow, params.border_px)?;
    let need = params.window + 2;
    if seq.len() + 1 < need {
        return Err(Error::StreamTooShort { got: seq.len() + 1, need });
    }
    let events = scan_sequence(&seq, params);
    Ok((seq, events))
}

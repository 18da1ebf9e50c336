//! Pixel- and object-level scoring: IoU, greedy detection matching,
//! precision/recall curves and max F1.

use std::collections::HashMap;
use std::fmt::Write as _;

use crate::dataset::LabelMask;
use crate::error::{Error, Result};
use crate::objects::DetectedObject;
use crate::par;
use crate::stitch::ProbabilityMap;

/// IoU thresholds of the default sweep, 0.1 through 0.9.
pub const DEFAULT_SWEEP: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];

/// Number of evenly spaced thresholds (`k / 255`) used for pixel curves.
pub const PIXEL_LEVELS: usize = 256;

/// `|A ∩ B| / |A ∪ B|` of two pixel-index sets (duplicates ignored).
pub fn iou(a: &[usize], b: &[usize]) -> Result<f64> {
    let norm = |s: &[usize]| {
        let mut v = s.to_vec();
        v.sort_unstable();
        v.dedup();
        v
    };
    let (a, b) = (norm(a), norm(b));
    if a.is_empty() && b.is_empty() {
        return Err(Error::invalid("IoU of two empty sets is undefined"));
    }
    let (mut i, mut j, mut inter) = (0, 0, 0usize);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                inter += 1;
                i += 1;
                j += 1;
            }
        }
    }
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DetectionRecord {
    pub confidence: f64,
    pub correct: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    /// Per detection, in input order.
    pub correct: Vec<bool>,
    pub truth_matched: Vec<bool>,
    pub threshold: f64,
}

/// Greedy one-to-one matching. Detections are visited by descending
/// confidence; each takes the still-unmatched truth with the highest IoU
/// (lowest index on ties) if that IoU is at least `t`.
pub fn match_detections(objects: &[DetectedObject], truths: &[Vec<usize>], t: f64) -> Result<MatchResult> {
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid(format!("IoU threshold {t} outside (0, 1]")));
    }
    let mut owner: HashMap<usize, usize> = HashMap::new();
    let mut truth_size = Vec::with_capacity(truths.len());
    for (k, truth) in truths.iter().enumerate() {
        let mut n = 0;
        for &p in truth {
            if owner.insert(p, k).is_none() {
                n += 1;
            }
        }
        truth_size.push(n);
    }

    let mut order: Vec<usize> = (0..objects.len()).collect();
    order.sort_by(|&a, &b| objects[b].confidence.total_cmp(&objects[a].confidence).then(a.cmp(&b)));
    let mut correct = vec![false; objects.len()];
    let mut matched = vec![false; truths.len()];
    for d in order {
        let mut inter: Vec<(usize, usize)> = Vec::new();
        for p in &objects[d].pixels {
            if let Some(&k) = owner.get(p) {
                match inter.iter_mut().find(|(kk, _)| *kk == k) {
                    Some((_, n)) => *n += 1,
                    None => inter.push((k, 1)),
                }
            }
        }
        let area = objects[d].pixels.len();
        let best = inter
            .iter()
            .filter(|(k, _)| !matched[*k])
            .map(|&(k, n)| (k, n as f64 / (area + truth_size[k] - n) as f64))
            .filter(|&(_, v)| v >= t)
            .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)));
        if let Some((k, _)) = best {
            matched[k] = true;
            correct[d] = true;
        }
    }
    Ok(MatchResult {
        correct,
        truth_matched: matched,
        threshold: t,
    })
}

impl MatchResult {
    pub fn records(&self, objects: &[DetectedObject]) -> Vec<DetectionRecord> {
        objects
            .iter()
            .zip(&self.correct)
            .map(|(o, &correct)| DetectionRecord {
                confidence: o.confidence,
                correct,
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrPoint {
    pub tau: f64,
    pub precision: f64,
    pub recall: f64,
}

impl PrPoint {
    /// Harmonic mean of precision and recall; zero when both are zero.
    pub fn f1(&self) -> f64 {
        let s = self.precision + self.recall;
        if s == 0.0 {
            0.0
        } else {
            2.0 * self.precision * self.recall / s
        }
    }
}

/// Operating points ordered by strictly decreasing `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    pub n_truth: usize,
    pub n_detections: usize,
}

impl PrCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tau,precision,recall\n");
        for p in &self.points {
            writeln!(out, "{},{},{}", p.tau, p.precision, p.recall).unwrap();
        }
        out
    }
}

fn point(tau: f64, hits: usize, returned: usize, n_truth: usize) -> PrPoint {
    PrPoint {
        tau,
        // nothing returned: precision is taken as 1
        precision: if returned == 0 {
            1.0
        } else {
            hits as f64 / returned as f64
        },
        recall: hits as f64 / n_truth as f64,
    }
}

/// One operating point per distinct confidence τ, returning every detection
/// with confidence ≥ τ. With no detections the curve is the single point
/// `(τ = 1, P = 1, R = 0)`.
pub fn object_pr(records: &[DetectionRecord], n_truth: usize) -> Result<PrCurve> {
    if n_truth == 0 {
        return Err(Error::invalid(
            "precision/recall needs at least one ground-truth object",
        ));
    }
    if let Some(r) = records.iter().find(|r| !r.confidence.is_finite()) {
        return Err(Error::invalid(format!(
            "non-finite detection confidence {}",
            r.confidence
        )));
    }
    let mut sorted = records.to_vec();
    sorted.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let mut points = Vec::new();
    let (mut hits, mut i) = (0, 0);
    while i < sorted.len() {
        let tau = sorted[i].confidence;
        while i < sorted.len() && sorted[i].confidence == tau {
            hits += usize::from(sorted[i].correct);
            i += 1;
        }
        points.push(point(tau, hits, i, n_truth));
    }
    if points.is_empty() {
        points.push(point(1.0, 0, 0, n_truth));
    }
    Ok(PrCurve {
        points,
        n_truth,
        n_detections: records.len(),
    })
}

/// Largest `k` with `k / 255 ≤ c`.
fn level(c: f64) -> usize {
    let top = (PIXEL_LEVELS - 1) as f64;
    let mut k = (c * top).floor().clamp(0.0, top) as usize;
    while k + 1 < PIXEL_LEVELS && (k + 1) as f64 / top <= c {
        k += 1;
    }
    while k > 0 && k as f64 / top > c {
        k -= 1;
    }
    k
}

/// Per-pixel curve over one or more maps: every pixel is a detection with its
/// map confidence, correct when its truth pixel is set. Thresholds are the
/// 256 levels `k / 255`, highest first.
pub fn pixel_pr(pairs: &[(&ProbabilityMap, &LabelMask)]) -> Result<PrCurve> {
    let mut pos = [0usize; PIXEL_LEVELS];
    let mut neg = [0usize; PIXEL_LEVELS];
    for (map, truth) in pairs {
        if (map.width, map.height) != (truth.width, truth.height) {
            return Err(Error::shape(format!(
                "{}x{} map scored against a {}x{} mask",
                map.width, map.height, truth.width, truth.height
            )));
        }
        for (&c, &t) in map.values.iter().zip(&truth.data) {
            if t != 0 {
                pos[level(c)] += 1;
            } else {
                neg[level(c)] += 1;
            }
        }
    }
    let n_truth: usize = pos.iter().sum();
    if n_truth == 0 {
        return Err(Error::invalid("truth mask has no panel pixels"));
    }
    let (mut hits, mut returned) = (0, 0);
    let mut points = Vec::with_capacity(PIXEL_LEVELS);
    for k in (0..PIXEL_LEVELS).rev() {
        hits += pos[k];
        returned += pos[k] + neg[k];
        points.push(point(k as f64 / (PIXEL_LEVELS - 1) as f64, hits, returned, n_truth));
    }
    Ok(PrCurve {
        points,
        n_truth,
        n_detections: n_truth + neg.iter().sum::<usize>(),
    })
}

pub fn max_f1(curve: &PrCurve) -> f64 {
    curve.points.iter().map(PrPoint::f1).fold(0.0, f64::max)
}

/// Detections and ground-truth components of one scene.
#[derive(Debug, Clone, Default)]
pub struct SceneObjects {
    pub detections: Vec<DetectedObject>,
    pub truths: Vec<Vec<usize>>,
}

/// Pools matched records from every scene at IoU threshold `t`.
pub fn object_curve(scenes: &[SceneObjects], t: f64) -> Result<PrCurve> {
    let mut records = Vec::new();
    for s in scenes {
        let m = match_detections(&s.detections, &s.truths, t)?;
        records.extend(m.records(&s.detections));
    }
    object_pr(&records, scenes.iter().map(|s| s.truths.len()).sum())
}

/// `(t, max F1)` for each IoU threshold, thresholds evaluated in parallel.
pub fn iou_sweep(scenes: &[SceneObjects], thresholds: &[f64]) -> Result<Vec<(f64, f64)>> {
    if thresholds.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::invalid("sweep thresholds must be strictly increasing"));
    }
    par::map_slice(thresholds, |&t| object_curve(scenes, t).map(|c| (t, max_f1(&c))))
        .into_iter()
        .collect()
}

pub fn sweep_csv(rows: &[(f64, f64)]) -> String {
    let mut out = String::from("iou_threshold,max_f1\n");
    for (t, f) in rows {
        writeln!(out, "{t},{f}").unwrap();
    }
    out
}

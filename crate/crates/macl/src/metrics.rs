//! Segmentation evaluation: Dice, Jaccard, 95th-percentile Hausdorff
//! distance, and average surface distance, per class, with report
//! aggregation.
//!
//! Conventions (the papers that name these metrics rarely pin them):
//! boundaries use 4-connectivity with out-of-image neighbors counting as
//! background, distances are Euclidean and scaled by the per-axis spacing,
//! percentiles interpolate linearly over the pooled bidirectional distances.
//! When either mask is empty the distance metrics return the image diagonal
//! as an explicit sentinel; reports flag every slice where that happened.

use std::collections::BTreeMap;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};
use crate::model::SegModel;
use crate::synthdata::SliceSample;

pub type Mask = Array2<bool>;

fn check_shapes(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.dim() != gt.dim() {
        return shape_err(format!(
            "mask shapes differ: {:?} vs {:?}",
            pred.dim(),
            gt.dim()
        ));
    }
    Ok(())
}

/// Dice similarity coefficient. Both masks empty gives 1 by convention.
pub fn dsc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut p = 0usize;
    let mut g = 0usize;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / (p + g) as f64)
}

/// Jaccard coefficient. Both masks empty gives 1 by convention.
pub fn jc(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_shapes(pred, gt)?;
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&a, &b) in pred.iter().zip(gt.iter()) {
        inter += (a && b) as usize;
        union += (a || b) as usize;
    }
    if union == 0 {
        return Ok(1.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Foreground pixels with at least one background 4-neighbor; pixels on the
/// image border count their outside neighbors as background.
pub fn boundary_points(mask: &Mask) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut pts = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[(y, x)] {
                continue;
            }
            let edge = y == 0
                || x == 0
                || y == h - 1
                || x == w - 1
                || !mask[(y - 1, x)]
                || !mask[(y + 1, x)]
                || !mask[(y, x - 1)]
                || !mask[(y, x + 1)];
            if edge {
                pts.push((y, x));
            }
        }
    }
    pts
}

fn min_dist_to(set: &[(usize, usize)], p: (usize, usize), spacing: (f64, f64)) -> f64 {
    let (sy, sx) = spacing;
    let mut best = f64::INFINITY;
    for &(qy, qx) in set {
        let dy = (p.0 as f64 - qy as f64) * sy;
        let dx = (p.1 as f64 - qx as f64) * sx;
        let d2 = dy * dy + dx * dx;
        if d2 < best {
            best = d2;
        }
    }
    best.sqrt()
}

/// All directed boundary distances, both directions pooled.
fn pooled_surface_distances(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Option<Vec<f64>> {
    let bp = boundary_points(pred);
    let bg = boundary_points(gt);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let mut pool = Vec::with_capacity(bp.len() + bg.len());
    for &p in &bp {
        pool.push(min_dist_to(&bg, p, spacing));
    }
    for &g in &bg {
        pool.push(min_dist_to(&bp, g, spacing));
    }
    Some(pool)
}

/// Sentinel for empty-mask comparisons: the image diagonal.
pub fn diagonal_sentinel(shape: (usize, usize), spacing: (f64, f64)) -> f64 {
    let (h, w) = shape;
    let (sy, sx) = spacing;
    ((h as f64 * sy).powi(2) + (w as f64 * sx).powi(2)).sqrt()
}

/// Linearly interpolated percentile, q in [0, 1].
fn percentile(sorted: &[f64], q: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = q * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// 95th percentile of the pooled bidirectional boundary distances. Either
/// mask empty returns the diagonal sentinel.
pub fn hd95(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<f64> {
    check_shapes(pred, gt)?;
    match pooled_surface_distances(pred, gt, spacing) {
        Some(mut pool) => {
            pool.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
            Ok(percentile(&pool, 0.95))
        }
        None => Ok(diagonal_sentinel(pred.dim(), spacing)),
    }
}

/// Mean of the pooled bidirectional boundary distances. Either mask empty
/// returns the diagonal sentinel.
pub fn asd(pred: &Mask, gt: &Mask, spacing: (f64, f64)) -> Result<f64> {
    check_shapes(pred, gt)?;
    match pooled_surface_distances(pred, gt, spacing) {
        Some(pool) => Ok(pool.iter().sum::<f64>() / pool.len() as f64),
        None => Ok(diagonal_sentinel(pred.dim(), spacing)),
    }
}

// ---------------------------------------------------------------------------
// Report aggregation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct ClassMetrics {
    pub dsc: f64,
    pub jc: f64,
    pub hd95: f64,
    pub asd: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct RunMeta {
    pub config_hash: String,
    pub seed: u64,
    pub checkpoint_id: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Per foreground class (keys are class ids as strings for JSON).
    pub per_class: BTreeMap<String, ClassMetrics>,
    /// Mean over foreground classes; background (class 0) excluded.
    pub mean: ClassMetrics,
    pub n_samples: usize,
    /// How slice-level values were combined.
    pub aggregation: String,
    /// Human-readable notes, e.g. sentinel usage per class.
    pub flags: Vec<String>,
    pub meta: RunMeta,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// One CSV row per (class, metric) plus the mean rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,metric,value\n");
        for (class, m) in &self.per_class {
            for (name, v) in [("dsc", m.dsc), ("jc", m.jc), ("hd95", m.hd95), ("asd", m.asd)] {
                out.push_str(&crate::util::csv_row(&[class.as_str(), name, &format!("{v}")]));
            }
        }
        for (name, v) in [
            ("dsc", self.mean.dsc),
            ("jc", self.mean.jc),
            ("hd95", self.mean.hd95),
            ("asd", self.mean.asd),
        ] {
            out.push_str(&crate::util::csv_row(&["mean", name, &format!("{v}")]));
        }
        out
    }
}

/// Fixed-width comparison table across named reports.
pub fn comparison_table(reports: &[(String, &MetricsReport)]) -> String {
    let mut out = String::new();
    out.push_str(&format!(
        "{:<24} {:>8} {:>8} {:>8} {:>8}\n",
        "run", "DSC", "JC", "HD95", "ASD"
    ));
    for (name, r) in reports {
        out.push_str(&format!(
            "{:<24} {:>8.4} {:>8.4} {:>8.4} {:>8.4}\n",
            name, r.mean.dsc, r.mean.jc, r.mean.hd95, r.mean.asd
        ));
    }
    out
}

/// Argmax class map from one logits tensor (C, H, W view as slices).
pub fn argmax_classes(logits: &ndarray::Array3<f32>) -> Array2<u8> {
    let (k, h, w) = logits.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = logits[(0, y, x)];
        for ci in 1..k {
            let v = logits[(ci, y, x)];
            if v > best_v {
                best_v = v;
                best = ci;
            }
        }
        best as u8
    })
}

fn class_mask(map: &Array2<u8>, class: u8) -> Mask {
    map.mapv(|v| v == class)
}

/// Evaluate a segmentation model over labeled slices: argmax predictions,
/// one-vs-rest per-class metrics, per-slice means.
///
/// Distance metrics skip (slice, class) pairs absent from both masks (there
/// is no surface to measure); pairs where exactly one side is empty score
/// the diagonal sentinel and are flagged.
pub fn evaluate(
    model: &SegModel<f32>,
    slices: &[SliceSample],
    classes: usize,
    meta: RunMeta,
) -> Result<MetricsReport> {
    let mut acc: BTreeMap<u8, (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut sentinel_counts: BTreeMap<u8, usize> = BTreeMap::new();
    let mut absent_counts: BTreeMap<u8, usize> = BTreeMap::new();
    for s in slices {
        let (h, w) = s.image.dim();
        let x = s
            .image
            .to_owned()
            .into_shape_with_order((1, 1, h, w))
            .expect("slice to batch");
        let (logits, _) = model.forward(&x)?;
        let (_, k, _, _) = logits.dim();
        let l3 = logits
            .index_axis(ndarray::Axis(0), 0)
            .to_owned()
            .into_shape_with_order((k, h, w))
            .expect("logits");
        let pred_map = argmax_classes(&l3);
        let spacing = (1.0, 1.0);
        for class in 1..=classes as u8 {
            let pm = class_mask(&pred_map, class);
            let gm = s.mask.mapv(|v| v == class);
            let entry = acc.entry(class).or_default();
            entry.0.push(dsc(&pm, &gm)?);
            entry.1.push(jc(&pm, &gm)?);
            let p_empty = !pm.iter().any(|&v| v);
            let g_empty = !gm.iter().any(|&v| v);
            if p_empty && g_empty {
                *absent_counts.entry(class).or_default() += 1;
            } else {
                if p_empty || g_empty {
                    *sentinel_counts.entry(class).or_default() += 1;
                }
                entry.2.push(hd95(&pm, &gm, spacing)?);
                entry.3.push(asd(&pm, &gm, spacing)?);
            }
        }
    }
    let mut per_class = BTreeMap::new();
    let mut mean = ClassMetrics::default();
    let mut distance_classes = 0usize;
    for (class, (d, j, h9, a)) in &acc {
        let avg = |v: &Vec<f64>| {
            if v.is_empty() {
                0.0
            } else {
                v.iter().sum::<f64>() / v.len() as f64
            }
        };
        let cm = ClassMetrics {
            dsc: avg(d),
            jc: avg(j),
            hd95: avg(h9),
            asd: avg(a),
        };
        mean.dsc += cm.dsc;
        mean.jc += cm.jc;
        if !h9.is_empty() {
            mean.hd95 += cm.hd95;
            mean.asd += cm.asd;
            distance_classes += 1;
        }
        per_class.insert(class.to_string(), cm);
    }
    let k = per_class.len().max(1) as f64;
    mean.dsc /= k;
    mean.jc /= k;
    if distance_classes > 0 {
        mean.hd95 /= distance_classes as f64;
        mean.asd /= distance_classes as f64;
    }
    let mut flags = Vec::new();
    for (class, n) in &sentinel_counts {
        flags.push(format!(
            "class {class}: empty-mask sentinel used in {n}/{} slices",
            slices.len()
        ));
    }
    for (class, n) in &absent_counts {
        flags.push(format!(
            "class {class}: absent in both masks in {n}/{} slices (distances skipped)",
            slices.len()
        ));
    }
    Ok(MetricsReport {
        per_class,
        mean,
        n_samples: slices.len(),
        aggregation: "per_slice_mean".to_string(),
        flags,
        meta,
    })
}

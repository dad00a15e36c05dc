//! Independent brute-force references for the contrastive losses and a
//! central finite-difference gradient checker.
//!
//! Everything here is written as explicit scalar loops in f64 and must stay
//! independent of the vectorized loss implementations: this module never
//! references the losses module (a test enforces that), and keeps its own
//! scalar cosine.

use ndarray::{Array2, Array4, ArrayD};

use crate::error::{Error, Result};
use crate::synthdata::PairLabelMatrix;

const NORM_EPS: f64 = 1e-8;

/// Scalar cosine similarity with the epsilon-guarded norms.
fn cosine(u: &[f64], v: &[f64]) -> f64 {
    let mut dot = 0.0;
    let mut nu = 0.0;
    let mut nv = 0.0;
    for i in 0..u.len() {
        dot += u[i] * v[i];
        nu += u[i] * u[i];
        nv += v[i] * v[i];
    }
    dot / ((nu.sqrt() + NORM_EPS) * (nv.sqrt() + NORM_EPS))
}

fn row(z: &Array2<f64>, i: usize) -> Vec<f64> {
    z.row(i).to_vec()
}

/// Channel vector at spatial location (sy, sx) of sample i.
fn pixel_vec(z: &Array4<f64>, i: usize, sy: usize, sx: usize) -> Vec<f64> {
    let ch = z.shape()[1];
    (0..ch).map(|c| z[(i, c, sy, sx)]).collect()
}

/// Reference for the global contrastive loss: explicit loops over
/// (anchor i, positive j, candidate k != i), summed over anchors.
pub fn global_loss_bruteforce(
    zg: &Array2<f64>,
    zg_aux: &Array2<f64>,
    labels: &PairLabelMatrix,
    tau: f64,
) -> Result<f64> {
    let n2 = zg.nrows();
    if n2 != zg_aux.nrows() || n2 != labels.len() {
        return Err(Error::Shape("oracle: row count mismatch".into()));
    }
    let mut total = 0.0;
    for i in 0..n2 {
        let positives = labels.positives_of(i);
        if positives.is_empty() {
            return Err(Error::Contract(format!("anchor {i} has no positives")));
        }
        let anchor = row(zg, i);
        let mut denom = 0.0;
        for k in 0..n2 {
            if k != i {
                denom += (cosine(&anchor, &row(zg_aux, k)) / tau).exp();
            }
        }
        let mut anchor_loss = 0.0;
        for &j in &positives {
            let num = (cosine(&anchor, &row(zg_aux, j)) / tau).exp();
            anchor_loss += -(num / denom).ln();
        }
        total += anchor_loss / positives.len() as f64;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("oracle: non-finite global loss".into()));
    }
    Ok(total)
}

/// Reference for the dense contrastive loss: explicit loops over
/// (anchor i, positive j, location s, candidate k != i). Locations pair only
/// with the same spatial index on the other branch.
pub fn dense_loss_bruteforce(
    zl: &Array4<f64>,
    zl_aux: &Array4<f64>,
    labels: &PairLabelMatrix,
    tau: f64,
) -> Result<f64> {
    if zl.dim() != zl_aux.dim() {
        return Err(Error::Shape("oracle: dense shape mismatch".into()));
    }
    let (n2, _c, sh, sw) = zl.dim();
    if n2 != labels.len() {
        return Err(Error::Shape("oracle: row count mismatch".into()));
    }
    let s2 = (sh * sw) as f64;
    let mut total = 0.0;
    for i in 0..n2 {
        let positives = labels.positives_of(i);
        if positives.is_empty() {
            return Err(Error::Contract(format!("anchor {i} has no positives")));
        }
        let mut anchor_loss = 0.0;
        for &j in &positives {
            let mut loc_sum = 0.0;
            for sy in 0..sh {
                for sx in 0..sw {
                    let anchor = pixel_vec(zl, i, sy, sx);
                    let mut denom = 0.0;
                    for k in 0..n2 {
                        if k != i {
                            denom +=
                                (cosine(&anchor, &pixel_vec(zl_aux, k, sy, sx)) / tau).exp();
                        }
                    }
                    let num = (cosine(&anchor, &pixel_vec(zl_aux, j, sy, sx)) / tau).exp();
                    loc_sum += -(num / denom).ln();
                }
            }
            anchor_loss += loc_sum / s2;
        }
        total += anchor_loss / positives.len() as f64;
    }
    if !total.is_finite() {
        return Err(Error::Numeric("oracle: non-finite dense loss".into()));
    }
    Ok(total)
}

/// Central finite differences of a scalar function, coordinate by coordinate.
pub fn finite_diff_gradient<Fn: FnMut(&ArrayD<f64>) -> f64>(
    mut f: Fn,
    x: &ArrayD<f64>,
    eps: f64,
) -> Result<ArrayD<f64>> {
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().expect("standard layout")[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Numeric(format!(
                "finite differences hit a non-finite value at coordinate {idx}"
            )));
        }
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    Ok(grad)
}

/// Max relative deviation between an analytic gradient and its finite
/// difference estimate, with an absolute floor to avoid 0/0.
pub fn max_rel_err(analytic: &ArrayD<f64>, numeric: &ArrayD<f64>) -> f64 {
    let mut worst = 0.0f64;
    for (a, n) in analytic.iter().zip(numeric.iter()) {
        let denom = a.abs().max(n.abs()).max(1e-6);
        worst = worst.max((a - n).abs() / denom);
    }
    worst
}

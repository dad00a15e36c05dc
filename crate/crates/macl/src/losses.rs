//! The multi-level objective: global contrastive loss over image-level
//! projections, dense contrastive loss over pixel-level projections (the
//! global form applied per spatial location and averaged), and an L1
//! equivariant regularization between the dominant feature map and the
//! downsampled auxiliary feature map.
//!
//! Anchors come from the dominant branch, candidates from the auxiliary
//! branch; no symmetrized second term is added. Losses are sums over the 2N
//! anchors; [`mean_over_anchors`] is available for batch-size-independent
//! reporting.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::augment::{down_nchw, down_nchw_backward, pool_factor};
use crate::error::{config_err, shape_err, Error, Result};
use crate::model::{BranchGrads, BranchOutputs};
use crate::real::{c, Real};
use crate::synthdata::PairLabelMatrix;

const NORM_EPS: f64 = 1e-8;

/// Weighting factors of the combined loss and the softmax temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda1: f64,
    pub lambda2: f64,
    pub lambda3: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda1: 1.0,
            lambda2: 0.5,
            lambda3: 1.0,
            tau: 0.1,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.tau <= 0.0 {
            return config_err("temperature must be positive");
        }
        if self.lambda1 < 0.0 || self.lambda2 < 0.0 || self.lambda3 < 0.0 {
            return config_err("loss weights must be non-negative");
        }
        Ok(())
    }
}

/// The combined loss and its components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown<F> {
    pub total: F,
    pub lg: F,
    pub ld: F,
    pub ler: F,
}

/// Cosine similarity with epsilon-guarded norms, in [-1, 1].
pub fn sim<F: Real>(u: ndarray::ArrayView1<F>, v: ndarray::ArrayView1<F>) -> F {
    let eps = c::<F>(NORM_EPS);
    let mut dot = F::zero();
    let mut nu = F::zero();
    let mut nv = F::zero();
    for (&a, &b) in u.iter().zip(v.iter()) {
        dot = dot + a * b;
        nu = nu + a * a;
        nv = nv + b * b;
    }
    dot / ((nu.sqrt() + eps) * (nv.sqrt() + eps))
}

/// Divide a summed loss by the anchor count (reporting convenience).
pub fn mean_over_anchors<F: Real>(loss: F, anchors: usize) -> F {
    loss / c::<F>(anchors as f64)
}

fn check_finite<'a, F: Real>(name: &str, vals: impl IntoIterator<Item = &'a F>) -> Result<()>
where
    F: 'a,
{
    if vals.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(format!("non-finite values in {name}")));
    }
    Ok(())
}

/// Row-normalized copy plus the raw norms (needed to backpropagate through
/// the normalization).
fn normalize_rows<F: Real>(z: &Array2<F>) -> (Array2<F>, Vec<F>) {
    let eps = c::<F>(NORM_EPS);
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.nrows());
    for mut row in out.rows_mut() {
        let n = row.iter().fold(F::zero(), |a, &v| a + v * v).sqrt();
        let t = n + eps;
        row.mapv_inplace(|v| v / t);
        norms.push(n);
    }
    (out, norms)
}

/// Backpropagate through v_hat = v / (|v| + eps).
fn denormalize_grad<F: Real>(z: &Array2<F>, norms: &[F], d_hat: &Array2<F>) -> Array2<F> {
    let eps = c::<F>(NORM_EPS);
    let mut out = Array2::<F>::zeros(z.raw_dim());
    for i in 0..z.nrows() {
        let n = norms[i];
        let t = n + eps;
        let row = z.row(i);
        let dh = d_hat.row(i);
        let dot = row.iter().zip(dh.iter()).fold(F::zero(), |a, (&v, &g)| a + v * g);
        let mut orow = out.row_mut(i);
        if n > F::zero() {
            let coef = dot / (n * t * t);
            for k in 0..row.len() {
                orow[k] = dh[k] / t - row[k] * coef;
            }
        } else {
            for k in 0..row.len() {
                orow[k] = dh[k] / t;
            }
        }
    }
    out
}

/// Shared InfoNCE core over one set of anchor/candidate rows. Returns the
/// summed loss (times `scale`) and, when requested, gradients with respect
/// to the raw (unnormalized) anchor and candidate rows.
fn contrastive_core<F: Real>(
    anchors: &Array2<F>,
    candidates: &Array2<F>,
    labels: &PairLabelMatrix,
    tau: F,
    scale: F,
    want_grads: bool,
) -> Result<(F, Option<(Array2<F>, Array2<F>)>)> {
    let n2 = anchors.nrows();
    if n2 < 2 {
        return Err(Error::Contract(format!("need at least 2 samples, got {n2}")));
    }
    if candidates.dim() != anchors.dim() {
        return shape_err(format!(
            "anchor rows {:?} vs candidate rows {:?}",
            anchors.dim(),
            candidates.dim()
        ));
    }
    if labels.len() != n2 {
        return shape_err(format!(
            "labels cover {} rows, tensors have {n2}",
            labels.len()
        ));
    }
    let (a_hat, a_norms) = normalize_rows(anchors);
    let (b_hat, b_norms) = normalize_rows(candidates);
    let sims = a_hat.dot(&b_hat.t());
    let logits = sims.mapv(|s| s / tau);

    let mut total = F::zero();
    // d(total)/d(logits), filled only when gradients are requested.
    let mut d_logits = if want_grads {
        Some(Array2::<F>::zeros((n2, n2)))
    } else {
        None
    };
    for i in 0..n2 {
        let positives = labels.positives_of(i);
        if positives.is_empty() {
            return Err(Error::Contract(format!("anchor {i} has an empty positive set")));
        }
        // Log-sum-exp over candidates k != i with max subtraction.
        let mut m = F::neg_infinity();
        for k in 0..n2 {
            if k != i && logits[(i, k)] > m {
                m = logits[(i, k)];
            }
        }
        let mut denom = F::zero();
        for k in 0..n2 {
            if k != i {
                denom = denom + (logits[(i, k)] - m).exp();
            }
        }
        let lse = m + denom.ln();
        let inv_p = c::<F>(1.0 / positives.len() as f64);
        let mut anchor_loss = F::zero();
        for &j in &positives {
            anchor_loss = anchor_loss + (lse - logits[(i, j)]);
        }
        total = total + anchor_loss * inv_p;
        if let Some(dl) = d_logits.as_mut() {
            for k in 0..n2 {
                if k == i {
                    continue;
                }
                let p_ik = (logits[(i, k)] - lse).exp();
                let y_ik = if labels.is_positive(i, k) { inv_p } else { F::zero() };
                dl[(i, k)] = (p_ik - y_ik) * scale;
            }
        }
    }
    if !total.is_finite() {
        return Err(Error::Numeric("contrastive loss diverged".into()));
    }
    total = total * scale;

    let grads = match d_logits {
        None => None,
        Some(dl) => {
            let d_sims = dl.mapv(|g| g / tau);
            let d_a_hat = d_sims.dot(&b_hat);
            let d_b_hat = d_sims.t().dot(&a_hat);
            Some((
                denormalize_grad(anchors, &a_norms, &d_a_hat),
                denormalize_grad(candidates, &b_norms, &d_b_hat),
            ))
        }
    };
    Ok((total, grads))
}

/// Global contrastive loss over image-level projections, summed over the 2N
/// anchors. Anchors are the dominant rows, candidates the auxiliary rows.
pub fn global_contrastive_loss<F: Real>(
    zg: &Array2<F>,
    zg_aux: &Array2<F>,
    labels: &PairLabelMatrix,
    tau: F,
) -> Result<F> {
    if tau <= F::zero() {
        return config_err("temperature must be positive");
    }
    check_finite("zg", zg.iter())?;
    check_finite("zg_aux", zg_aux.iter())?;
    contrastive_core(zg, zg_aux, labels, tau, F::one(), false).map(|(l, _)| l)
}

/// Global contrastive loss plus gradients with respect to both inputs.
pub fn global_contrastive_loss_grad<F: Real>(
    zg: &Array2<F>,
    zg_aux: &Array2<F>,
    labels: &PairLabelMatrix,
    tau: F,
) -> Result<(F, Array2<F>, Array2<F>)> {
    if tau <= F::zero() {
        return config_err("temperature must be positive");
    }
    check_finite("zg", zg.iter())?;
    check_finite("zg_aux", zg_aux.iter())?;
    let (loss, grads) = contrastive_core(zg, zg_aux, labels, tau, F::one(), true)?;
    let (d_zg, d_zg_aux) = grads.expect("gradients requested");
    Ok((loss, d_zg, d_zg_aux))
}

/// Extract the channel vectors at one spatial location into a row matrix.
fn location_rows<F: Real>(z: &Array4<F>, sy: usize, sx: usize) -> Array2<F> {
    let (n2, ch, _, _) = z.dim();
    Array2::from_shape_fn((n2, ch), |(i, cc)| z[(i, cc, sy, sx)])
}

fn scatter_location_grad<F: Real>(dst: &mut Array4<F>, src: &Array2<F>, sy: usize, sx: usize) {
    let (n2, ch) = src.dim();
    for i in 0..n2 {
        for cc in 0..ch {
            dst[(i, cc, sy, sx)] = src[(i, cc)];
        }
    }
}

fn dense_impl<F: Real>(
    zl: &Array4<F>,
    zl_aux: &Array4<F>,
    labels: &PairLabelMatrix,
    tau: F,
    want_grads: bool,
) -> Result<(F, Option<(Array4<F>, Array4<F>)>)> {
    if tau <= F::zero() {
        return config_err("temperature must be positive");
    }
    if zl.dim() != zl_aux.dim() {
        return shape_err(format!(
            "pixel projections {:?} vs {:?}",
            zl.dim(),
            zl_aux.dim()
        ));
    }
    check_finite("zl", zl.iter())?;
    check_finite("zl_aux", zl_aux.iter())?;
    let (_, _, sh, sw) = zl.dim();
    let scale = c::<F>(1.0 / (sh * sw) as f64);
    let mut total = F::zero();
    let mut grads = if want_grads {
        Some((Array4::<F>::zeros(zl.raw_dim()), Array4::<F>::zeros(zl.raw_dim())))
    } else {
        None
    };
    // The dense loss is the per-location global loss averaged over the S^2
    // locations; locations pair only with the same index on the other branch.
    for sy in 0..sh {
        for sx in 0..sw {
            let a = location_rows(zl, sy, sx);
            let b = location_rows(zl_aux, sy, sx);
            let (loss, g) = contrastive_core(&a, &b, labels, tau, scale, want_grads)?;
            total = total + loss;
            if let (Some((da, db)), Some((ga, gb))) = (grads.as_mut(), g) {
                scatter_location_grad(da, &ga, sy, sx);
                scatter_location_grad(db, &gb, sy, sx);
            }
        }
    }
    Ok((total, grads))
}

/// Dense contrastive loss over pixel-level projections.
pub fn dense_contrastive_loss<F: Real>(
    zl: &Array4<F>,
    zl_aux: &Array4<F>,
    labels: &PairLabelMatrix,
    tau: F,
) -> Result<F> {
    dense_impl(zl, zl_aux, labels, tau, false).map(|(l, _)| l)
}

/// Dense contrastive loss plus gradients with respect to both inputs.
pub fn dense_contrastive_loss_grad<F: Real>(
    zl: &Array4<F>,
    zl_aux: &Array4<F>,
    labels: &PairLabelMatrix,
    tau: F,
) -> Result<(F, Array4<F>, Array4<F>)> {
    let (loss, grads) = dense_impl(zl, zl_aux, labels, tau, true)?;
    let (d_zl, d_zl_aux) = grads.expect("gradients requested");
    Ok((loss, d_zl, d_zl_aux))
}

/// Mean absolute difference between the dominant feature map and the
/// downsampled auxiliary feature map.
pub fn equivariant_regularization<F: Real>(
    y: &Array4<F>,
    y_aux: &Array4<F>,
    lambda: f64,
) -> Result<F> {
    equivariant_regularization_grad(y, y_aux, lambda, false).map(|(l, _, _)| l)
}

/// Equivariant regularization with optional gradients. With `want_grads`
/// false the gradient tensors are zero-sized placeholders.
pub fn equivariant_regularization_grad<F: Real>(
    y: &Array4<F>,
    y_aux: &Array4<F>,
    lambda: f64,
    want_grads: bool,
) -> Result<(F, Array4<F>, Array4<F>)> {
    pool_factor(lambda)?;
    let down_aux = down_nchw(y_aux, lambda)?;
    if down_aux.dim() != y.dim() {
        return shape_err(format!(
            "feature maps misaligned: {:?} vs downsampled {:?}",
            y.dim(),
            down_aux.dim()
        ));
    }
    check_finite("y", y.iter())?;
    check_finite("y_aux", y_aux.iter())?;
    let count = c::<F>(y.len() as f64);
    let mut total = F::zero();
    for (&a, &b) in y.iter().zip(down_aux.iter()) {
        total = total + (a - b).abs();
    }
    let loss = total / count;
    if !want_grads {
        return Ok((loss, Array4::zeros((0, 0, 0, 0)), Array4::zeros((0, 0, 0, 0))));
    }
    let inv = F::one() / count;
    let mut d_y = Array4::<F>::zeros(y.raw_dim());
    let mut d_down = Array4::<F>::zeros(down_aux.raw_dim());
    for ((dy, dd), (&a, &b)) in d_y
        .iter_mut()
        .zip(d_down.iter_mut())
        .zip(y.iter().zip(down_aux.iter()))
    {
        let s = if a > b {
            F::one()
        } else if a < b {
            -F::one()
        } else {
            F::zero()
        };
        *dy = s * inv;
        *dd = -s * inv;
    }
    let d_y_aux = down_nchw_backward(&d_down, lambda, (y_aux.dim().2, y_aux.dim().3))?;
    Ok((loss, d_y, d_y_aux))
}

/// Infer the downsample scale from the two feature maps' spatial sizes.
fn infer_lambda<F: Real>(y: &Array4<F>, y_aux: &Array4<F>) -> Result<f64> {
    let (_, _, h, _) = y.dim();
    let (_, _, ha, _) = y_aux.dim();
    if h == 0 || ha == 0 || ha % h != 0 {
        return shape_err(format!(
            "auxiliary feature height {ha} is not a multiple of dominant height {h}"
        ));
    }
    Ok(h as f64 / ha as f64)
}

/// Combined multi-level loss: total = l1*Lg + l2*Ld + l3*LER. All three
/// components are evaluated (they are logged) regardless of the weights.
pub fn multi_level_loss<F: Real>(
    outputs: &BranchOutputs<F>,
    labels: &PairLabelMatrix,
    w: &LossWeights,
) -> Result<LossBreakdown<F>> {
    w.validate()?;
    let tau = c::<F>(w.tau);
    let lg = global_contrastive_loss(&outputs.zg, &outputs.zg_aux, labels, tau)?;
    let ld = dense_contrastive_loss(&outputs.zl, &outputs.zl_aux, labels, tau)?;
    let lambda = infer_lambda(&outputs.y, &outputs.y_aux)?;
    let ler = equivariant_regularization(&outputs.y, &outputs.y_aux, lambda)?;
    let total = c::<F>(w.lambda1) * lg + c::<F>(w.lambda2) * ld + c::<F>(w.lambda3) * ler;
    if !total.is_finite() {
        return Err(Error::Numeric("multi-level loss diverged".into()));
    }
    Ok(LossBreakdown { total, lg, ld, ler })
}

/// Combined loss plus gradients with respect to all six branch outputs.
/// Zero-weighted components contribute zero gradients and are skipped in the
/// backward arithmetic.
pub fn multi_level_loss_grad<F: Real>(
    outputs: &BranchOutputs<F>,
    labels: &PairLabelMatrix,
    w: &LossWeights,
) -> Result<(LossBreakdown<F>, BranchGrads<F>)> {
    w.validate()?;
    let tau = c::<F>(w.tau);
    let (l1, l2, l3) = (c::<F>(w.lambda1), c::<F>(w.lambda2), c::<F>(w.lambda3));

    let (lg, d_zg, d_zg_aux) = if w.lambda1 > 0.0 {
        let (lg, mut d_zg, mut d_zg_aux) =
            global_contrastive_loss_grad(&outputs.zg, &outputs.zg_aux, labels, tau)?;
        d_zg.mapv_inplace(|g| g * l1);
        d_zg_aux.mapv_inplace(|g| g * l1);
        (lg, d_zg, d_zg_aux)
    } else {
        let lg = global_contrastive_loss(&outputs.zg, &outputs.zg_aux, labels, tau)?;
        (
            lg,
            Array2::zeros(outputs.zg.raw_dim()),
            Array2::zeros(outputs.zg_aux.raw_dim()),
        )
    };

    let (ld, d_zl, d_zl_aux) = if w.lambda2 > 0.0 {
        let (ld, mut d_zl, mut d_zl_aux) =
            dense_contrastive_loss_grad(&outputs.zl, &outputs.zl_aux, labels, tau)?;
        d_zl.mapv_inplace(|g| g * l2);
        d_zl_aux.mapv_inplace(|g| g * l2);
        (ld, d_zl, d_zl_aux)
    } else {
        let ld = dense_contrastive_loss(&outputs.zl, &outputs.zl_aux, labels, tau)?;
        (
            ld,
            Array4::zeros(outputs.zl.raw_dim()),
            Array4::zeros(outputs.zl_aux.raw_dim()),
        )
    };

    let lambda = infer_lambda(&outputs.y, &outputs.y_aux)?;
    let (ler, d_y, d_y_aux) = if w.lambda3 > 0.0 {
        let (ler, mut d_y, mut d_y_aux) =
            equivariant_regularization_grad(&outputs.y, &outputs.y_aux, lambda, true)?;
        d_y.mapv_inplace(|g| g * l3);
        d_y_aux.mapv_inplace(|g| g * l3);
        (ler, d_y, d_y_aux)
    } else {
        let ler = equivariant_regularization(&outputs.y, &outputs.y_aux, lambda)?;
        (
            ler,
            Array4::zeros(outputs.y.raw_dim()),
            Array4::zeros(outputs.y_aux.raw_dim()),
        )
    };

    let total = l1 * lg + l2 * ld + l3 * ler;
    if !total.is_finite() {
        return Err(Error::Numeric("multi-level loss diverged".into()));
    }
    Ok((
        LossBreakdown { total, lg, ld, ler },
        BranchGrads {
            d_y,
            d_y_aux,
            d_zg,
            d_zg_aux,
            d_zl,
            d_zl_aux,
        },
    ))
}

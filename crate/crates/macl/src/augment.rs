//! The two augmentation families and the alignment downsampling.
//!
//! The spatial-invariance family keeps pixel positions fixed (identity by
//! default, optional brightness/contrast jitter); the spatial-variance
//! family applies random affine transforms (translation, rotation, scale)
//! with bilinear interpolation and reflection padding. `down` is
//! non-overlapping average pooling, which is linear and mean-preserving.

use ndarray::{Array2, Array4};
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, shape_err, Result};
use crate::real::{c, Real};
use crate::synthdata::SliceSample;

/// Spatial-invariance augmentation parameters. Zeros mean identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FixAugmentCfg {
    /// Max absolute brightness shift, sampled uniformly.
    pub brightness: f64,
    /// Max relative contrast change around the image mean.
    pub contrast: f64,
}

impl Default for FixAugmentCfg {
    fn default() -> Self {
        Self {
            brightness: 0.0,
            contrast: 0.0,
        }
    }
}

/// Spatial-variance augmentation ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VarAugmentRanges {
    /// Max translation as a fraction of the image height.
    pub translate_frac: f64,
    /// Max rotation in degrees.
    pub rotate_deg: f64,
    /// Scale interval.
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for VarAugmentRanges {
    fn default() -> Self {
        Self {
            translate_frac: 0.125,
            rotate_deg: 30.0,
            scale_min: 0.8,
            scale_max: 1.2,
        }
    }
}

impl VarAugmentRanges {
    pub fn validate(&self) -> Result<()> {
        if self.scale_min <= 0.0 || self.scale_max < self.scale_min {
            return config_err("augment: scale range must satisfy 0 < min <= max");
        }
        if self.translate_frac < 0.0 || self.rotate_deg < 0.0 {
            return config_err("augment: ranges must be non-negative");
        }
        Ok(())
    }
}

/// One affine draw: rotation/scale about the image center, then translation.
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub rotate_deg: f64,
    pub scale: f64,
    pub translate_x: f64,
    pub translate_y: f64,
}

impl AffineParams {
    pub const IDENTITY: AffineParams = AffineParams {
        rotate_deg: 0.0,
        scale: 1.0,
        translate_x: 0.0,
        translate_y: 0.0,
    };
}

/// The four augmented views of one source slice: `i1`/`i2` keep pixel
/// positions, `v1`/`v2` are spatially transformed.
#[derive(Debug, Clone)]
pub struct AugmentedQuad {
    pub i1: Array2<f32>,
    pub i2: Array2<f32>,
    pub v1: Array2<f32>,
    pub v2: Array2<f32>,
    pub source_index: usize,
}

/// Apply the spatial-invariance family twice. Pixel positions never move.
pub fn t_fix<F: Real, R: Rng>(
    x: &Array2<F>,
    cfg: &FixAugmentCfg,
    rng: &mut R,
) -> (Array2<F>, Array2<F>) {
    let one = |rng: &mut R| -> Array2<F> {
        if cfg.brightness == 0.0 && cfg.contrast == 0.0 {
            return x.clone();
        }
        let b = if cfg.brightness > 0.0 {
            rng.random_range(-cfg.brightness..=cfg.brightness)
        } else {
            0.0
        };
        let k = if cfg.contrast > 0.0 {
            1.0 + rng.random_range(-cfg.contrast..=cfg.contrast)
        } else {
            1.0
        };
        let mean = x.iter().copied().fold(F::zero(), |a, v| a + v)
            / c::<F>(x.len() as f64);
        x.mapv(|v| {
            let out = (v - mean) * c::<F>(k) + mean + c::<F>(b);
            out.max(F::zero()).min(F::one())
        })
    };
    let a = one(rng);
    let b = one(rng);
    (a, b)
}

/// Apply the spatial-variance family twice: two independent affine draws.
pub fn t_var<F: Real, R: Rng>(
    x: &Array2<F>,
    ranges: &VarAugmentRanges,
    rng: &mut R,
) -> Result<(Array2<F>, Array2<F>)> {
    ranges.validate()?;
    let h = x.nrows() as f64;
    let draw = |rng: &mut R| AffineParams {
        rotate_deg: rng.random_range(-ranges.rotate_deg..=ranges.rotate_deg),
        scale: rng.random_range(ranges.scale_min..=ranges.scale_max),
        translate_x: rng.random_range(-ranges.translate_frac..=ranges.translate_frac) * h,
        translate_y: rng.random_range(-ranges.translate_frac..=ranges.translate_frac) * h,
    };
    let p1 = draw(rng);
    let p2 = draw(rng);
    Ok((affine_warp(x, &p1), affine_warp(x, &p2)))
}

/// Mirror an index into [0, n) with edge repeat (reflection padding).
fn reflect(mut i: i64, n: i64) -> i64 {
    loop {
        if i < 0 {
            i = -i - 1;
        } else if i >= n {
            i = 2 * n - 1 - i;
        } else {
            return i;
        }
    }
}

/// Warp an image by rotation/scale about its center plus translation, with
/// bilinear interpolation and reflection padding. Output values clamped to
/// [0, 1].
pub fn affine_warp<F: Real>(x: &Array2<F>, p: &AffineParams) -> Array2<F> {
    let (h, w) = x.dim();
    let (hf, wf) = (h as f64, w as f64);
    let cy = (hf - 1.0) * 0.5;
    let cx = (wf - 1.0) * 0.5;
    let theta = p.rotate_deg.to_radians();
    let (sin_t, cos_t) = theta.sin_cos();
    let inv_s = 1.0 / p.scale;
    let mut out = Array2::<F>::zeros((h, w));
    for oy in 0..h {
        for ox in 0..w {
            // Inverse map: undo translation, then rotation and scale.
            let dx = ox as f64 - cx - p.translate_x;
            let dy = oy as f64 - cy - p.translate_y;
            let sx = cx + inv_s * (cos_t * dx + sin_t * dy);
            let sy = cy + inv_s * (-sin_t * dx + cos_t * dy);
            let x0 = sx.floor();
            let y0 = sy.floor();
            let fx = sx - x0;
            let fy = sy - y0;
            let x0i = reflect(x0 as i64, w as i64) as usize;
            let x1i = reflect(x0 as i64 + 1, w as i64) as usize;
            let y0i = reflect(y0 as i64, h as i64) as usize;
            let y1i = reflect(y0 as i64 + 1, h as i64) as usize;
            let v00 = x[(y0i, x0i)];
            let v01 = x[(y0i, x1i)];
            let v10 = x[(y1i, x0i)];
            let v11 = x[(y1i, x1i)];
            let fx = c::<F>(fx);
            let fy = c::<F>(fy);
            let one = F::one();
            let top = v00 * (one - fx) + v01 * fx;
            let bot = v10 * (one - fx) + v11 * fx;
            let v = top * (one - fy) + bot * fy;
            out[(oy, ox)] = v.max(F::zero()).min(F::one());
        }
    }
    out
}

/// Validate a downsampling factor: 1/lambda must be a positive integer.
pub fn pool_factor(lambda: f64) -> Result<usize> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return config_err(format!("downsample scale {lambda} must be in (0, 1]"));
    }
    let f = 1.0 / lambda;
    let fi = f.round();
    if (f - fi).abs() > 1e-9 {
        return config_err(format!("1/{lambda} is not an integer"));
    }
    Ok(fi as usize)
}

/// The scale factor paired with `n` decoder blocks.
pub fn lambda_for_blocks(n: usize) -> f64 {
    0.5f64.powi(n as i32)
}

/// Non-overlapping average pooling on one image.
pub fn down<F: Real>(x: &Array2<F>, lambda: f64) -> Result<Array2<F>> {
    let f = pool_factor(lambda)?;
    let (h, w) = x.dim();
    if h % f != 0 || w % f != 0 {
        return shape_err(format!("image {h}x{w} not divisible by pool factor {f}"));
    }
    if f == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / f, w / f);
    let inv = c::<F>(1.0 / (f * f) as f64);
    let mut out = Array2::<F>::zeros((oh, ow));
    for oy in 0..oh {
        for ox in 0..ow {
            let mut acc = F::zero();
            for iy in 0..f {
                for ix in 0..f {
                    acc = acc + x[(oy * f + iy, ox * f + ix)];
                }
            }
            out[(oy, ox)] = acc * inv;
        }
    }
    Ok(out)
}

/// Average pooling over a (B, C, H, W) batch.
pub fn down_nchw<F: Real>(x: &Array4<F>, lambda: f64) -> Result<Array4<F>> {
    let f = pool_factor(lambda)?;
    let (b, ch, h, w) = x.dim();
    if h % f != 0 || w % f != 0 {
        return shape_err(format!("maps {h}x{w} not divisible by pool factor {f}"));
    }
    if f == 1 {
        return Ok(x.clone());
    }
    let (oh, ow) = (h / f, w / f);
    let inv = c::<F>(1.0 / (f * f) as f64);
    let mut out = Array4::<F>::zeros((b, ch, oh, ow));
    for bi in 0..b {
        for ci in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = F::zero();
                    for iy in 0..f {
                        for ix in 0..f {
                            acc = acc + x[(bi, ci, oy * f + iy, ox * f + ix)];
                        }
                    }
                    out[(bi, ci, oy, ox)] = acc * inv;
                }
            }
        }
    }
    Ok(out)
}

/// Backward of `down_nchw`: spread each output gradient evenly over its
/// f x f input block.
pub fn down_nchw_backward<F: Real>(
    grad_out: &Array4<F>,
    lambda: f64,
    input_hw: (usize, usize),
) -> Result<Array4<F>> {
    let f = pool_factor(lambda)?;
    let (b, ch, oh, ow) = grad_out.dim();
    let (h, w) = input_hw;
    if oh * f != h || ow * f != w {
        return shape_err(format!(
            "gradient {oh}x{ow} with factor {f} does not match input {h}x{w}"
        ));
    }
    if f == 1 {
        return Ok(grad_out.clone());
    }
    let inv = c::<F>(1.0 / (f * f) as f64);
    let mut out = Array4::<F>::zeros((b, ch, h, w));
    for bi in 0..b {
        for ci in 0..ch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = grad_out[(bi, ci, oy, ox)] * inv;
                    for iy in 0..f {
                        for ix in 0..f {
                            out[(bi, ci, oy * f + iy, ox * f + ix)] = g;
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Build the augmented quad of one source slice.
pub fn augment_slice<R: Rng>(
    sample: &SliceSample,
    source_index: usize,
    fix: &FixAugmentCfg,
    var: &VarAugmentRanges,
    rng: &mut R,
) -> Result<AugmentedQuad> {
    let (i1, i2) = t_fix(&sample.image, fix, rng);
    let (v1, v2) = t_var(&sample.image, var, rng)?;
    Ok(AugmentedQuad {
        i1,
        i2,
        v1,
        v2,
        source_index,
    })
}

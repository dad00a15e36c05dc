//! Spatial resampling layers: 2x2 max pooling, nearest-neighbor 2x upsampling,
//! and global average pooling. None of them own parameters.

use ndarray::{Array2, Array4};

use crate::error::{shape_err, Result};
use crate::real::{c, Real};

#[derive(Debug, Clone, Copy, Default)]
pub struct MaxPool2d;

#[derive(Debug)]
pub struct MaxPoolCache {
    /// Winning position (0..4) inside each 2x2 window.
    argmax: Array4<u8>,
    in_hw: (usize, usize),
}

impl MaxPool2d {
    pub fn forward<F: Real>(&self, x: &Array4<F>) -> Result<(Array4<F>, MaxPoolCache)> {
        let (bsz, ch, h, w) = x.dim();
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("max pool needs even spatial size, got {h}x{w}"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Array4::<F>::zeros((bsz, ch, oh, ow));
        let mut argmax = Array4::<u8>::zeros((bsz, ch, oh, ow));
        for b in 0..bsz {
            for ci in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut best = x[(b, ci, 2 * oy, 2 * ox)];
                        let mut arg = 0u8;
                        for (i, (dy, dx)) in
                            [(0usize, 1usize), (1, 0), (1, 1)].into_iter().enumerate()
                        {
                            let v = x[(b, ci, 2 * oy + dy, 2 * ox + dx)];
                            if v > best {
                                best = v;
                                arg = (i + 1) as u8;
                            }
                        }
                        out[(b, ci, oy, ox)] = best;
                        argmax[(b, ci, oy, ox)] = arg;
                    }
                }
            }
        }
        Ok((out, MaxPoolCache { argmax, in_hw: (h, w) }))
    }

    pub fn backward<F: Real>(&self, cache: &MaxPoolCache, grad_out: &Array4<F>) -> Array4<F> {
        let (bsz, ch, oh, ow) = grad_out.dim();
        let (h, w) = cache.in_hw;
        let mut dx = Array4::<F>::zeros((bsz, ch, h, w));
        for b in 0..bsz {
            for ci in 0..ch {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let arg = cache.argmax[(b, ci, oy, ox)] as usize;
                        let (dy, dx_off) = [(0usize, 0usize), (0, 1), (1, 0), (1, 1)][arg];
                        dx[(b, ci, 2 * oy + dy, 2 * ox + dx_off)] = grad_out[(b, ci, oy, ox)];
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Upsample2x;

impl Upsample2x {
    pub fn forward<F: Real>(&self, x: &Array4<F>) -> Array4<F> {
        let (bsz, ch, h, w) = x.dim();
        let mut out = Array4::<F>::zeros((bsz, ch, 2 * h, 2 * w));
        for b in 0..bsz {
            for ci in 0..ch {
                for y in 0..h {
                    for xx in 0..w {
                        let v = x[(b, ci, y, xx)];
                        out[(b, ci, 2 * y, 2 * xx)] = v;
                        out[(b, ci, 2 * y, 2 * xx + 1)] = v;
                        out[(b, ci, 2 * y + 1, 2 * xx)] = v;
                        out[(b, ci, 2 * y + 1, 2 * xx + 1)] = v;
                    }
                }
            }
        }
        out
    }

    pub fn backward<F: Real>(&self, grad_out: &Array4<F>) -> Array4<F> {
        let (bsz, ch, oh, ow) = grad_out.dim();
        assert!(oh % 2 == 0 && ow % 2 == 0, "upsample gradient shape");
        let (h, w) = (oh / 2, ow / 2);
        let mut dx = Array4::<F>::zeros((bsz, ch, h, w));
        for b in 0..bsz {
            for ci in 0..ch {
                for y in 0..h {
                    for xx in 0..w {
                        dx[(b, ci, y, xx)] = grad_out[(b, ci, 2 * y, 2 * xx)]
                            + grad_out[(b, ci, 2 * y, 2 * xx + 1)]
                            + grad_out[(b, ci, 2 * y + 1, 2 * xx)]
                            + grad_out[(b, ci, 2 * y + 1, 2 * xx + 1)];
                    }
                }
            }
        }
        dx
    }
}

#[derive(Debug, Clone, Copy, Default)]
pub struct GlobalAvgPool;

impl GlobalAvgPool {
    pub fn forward<F: Real>(&self, x: &Array4<F>) -> (Array2<F>, (usize, usize)) {
        let (bsz, ch, h, w) = x.dim();
        let inv = c::<F>(1.0 / (h * w) as f64);
        let mut out = Array2::<F>::zeros((bsz, ch));
        for b in 0..bsz {
            for ci in 0..ch {
                let mut acc = F::zero();
                for y in 0..h {
                    for xx in 0..w {
                        acc = acc + x[(b, ci, y, xx)];
                    }
                }
                out[(b, ci)] = acc * inv;
            }
        }
        (out, (h, w))
    }

    pub fn backward<F: Real>(&self, grad_out: &Array2<F>, hw: (usize, usize)) -> Array4<F> {
        let (bsz, ch) = grad_out.dim();
        let (h, w) = hw;
        let inv = c::<F>(1.0 / (h * w) as f64);
        let mut dx = Array4::<F>::zeros((bsz, ch, h, w));
        for b in 0..bsz {
            for ci in 0..ch {
                let g = grad_out[(b, ci)] * inv;
                for y in 0..h {
                    for xx in 0..w {
                        dx[(b, ci, y, xx)] = g;
                    }
                }
            }
        }
        dx
    }
}

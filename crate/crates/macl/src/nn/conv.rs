//! 2D convolution (stride 1) via im2col and a single GEMM per forward call.

use ndarray::{Array2, Array4, ArrayD, IxDyn};
use rand::Rng;

use super::{join, normal_init, Param, ParamModule};
use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Conv2d<F> {
    pub w: Param<F>,
    pub b: Param<F>,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub pad: usize,
}

/// Forward cache: the input is enough, columns are rebuilt in backward.
#[derive(Debug)]
pub struct Conv2dCache<F> {
    x: Array4<F>,
}

impl<F: Real> Conv2d<F> {
    /// He-normal initialized convolution. `pad = (k - 1) / 2` keeps spatial
    /// size for odd kernels.
    pub fn new<R: Rng>(in_c: usize, out_c: usize, k: usize, rng: &mut R) -> Self {
        let std = (2.0 / (in_c * k * k) as f64).sqrt();
        Self {
            w: Param::new(normal_init(&[out_c, in_c, k, k], std, rng)),
            b: Param::new(ArrayD::zeros(IxDyn(&[out_c]))),
            in_c,
            out_c,
            k,
            pad: (k - 1) / 2,
        }
    }

    fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (h + 2 * self.pad + 1 - self.k, w + 2 * self.pad + 1 - self.k)
    }

    /// Scatter the input into the [in_c*k*k, B*OH*OW] column matrix.
    fn im2col(&self, x: &Array4<F>) -> Array2<F> {
        let (bsz, cin, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let p = self.pad as i64;
        let cols_w = bsz * oh * ow;
        let mut cols = Array2::<F>::zeros((cin * k * k, cols_w));
        let xs = x.as_slice().expect("standard layout");
        let cs = cols.as_slice_mut().expect("standard layout");
        for b in 0..bsz {
            let xb = b * cin * h * w;
            let cb = b * oh * ow;
            for c in 0..cin {
                let xc = xb + c * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let rbase = row * cols_w + cb;
                        // Valid output x-range for this kernel offset.
                        let ox_lo = (p - kx as i64).max(0) as usize;
                        let ox_hi = ((w as i64 + p - kx as i64).min(ow as i64)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as i64 + ky as i64 - p;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let ix0 = (ox_lo as i64 + kx as i64 - p) as usize;
                            let src = xc + iy as usize * w + ix0;
                            let dst = rbase + oy * ow + ox_lo;
                            let len = ox_hi - ox_lo;
                            cs[dst..dst + len].copy_from_slice(&xs[src..src + len]);
                        }
                    }
                }
            }
        }
        cols
    }

    /// Accumulate column gradients back into input layout.
    fn col2im(&self, dcols: &Array2<F>, bsz: usize, h: usize, w: usize) -> Array4<F> {
        let (oh, ow) = self.out_hw(h, w);
        let k = self.k;
        let p = self.pad as i64;
        let cin = self.in_c;
        let cols_w = bsz * oh * ow;
        let mut dx = Array4::<F>::zeros((bsz, cin, h, w));
        let ds = dcols.as_slice().expect("standard layout");
        let xs = dx.as_slice_mut().expect("standard layout");
        for b in 0..bsz {
            let xb = b * cin * h * w;
            let cb = b * oh * ow;
            for c in 0..cin {
                let xc = xb + c * h * w;
                for ky in 0..k {
                    for kx in 0..k {
                        let row = (c * k + ky) * k + kx;
                        let rbase = row * cols_w + cb;
                        let ox_lo = (p - kx as i64).max(0) as usize;
                        let ox_hi = ((w as i64 + p - kx as i64).min(ow as i64)).max(0) as usize;
                        if ox_lo >= ox_hi {
                            continue;
                        }
                        for oy in 0..oh {
                            let iy = oy as i64 + ky as i64 - p;
                            if iy < 0 || iy >= h as i64 {
                                continue;
                            }
                            let ix0 = (ox_lo as i64 + kx as i64 - p) as usize;
                            let dst = xc + iy as usize * w + ix0;
                            let src = rbase + oy * ow + ox_lo;
                            for i in 0..(ox_hi - ox_lo) {
                                xs[dst + i] = xs[dst + i] + ds[src + i];
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Array4<F>) -> Result<(Array4<F>, Conv2dCache<F>)> {
        let (bsz, cin, h, w) = x.dim();
        if cin != self.in_c {
            return shape_err(format!(
                "conv expects {} input channels, got {cin}",
                self.in_c
            ));
        }
        let (oh, ow) = self.out_hw(h, w);
        if oh == 0 || ow == 0 {
            return shape_err(format!("conv output collapsed for input {h}x{w}"));
        }
        let cols = self.im2col(x);
        let w2 = self
            .w
            .data
            .view()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .expect("contiguous weights");
        let out2 = w2.dot(&cols); // [out_c, B*OH*OW]
        let mut out = Array4::<F>::zeros((bsz, self.out_c, oh, ow));
        let os = out.as_slice_mut().expect("standard layout");
        let o2 = out2.as_slice().expect("standard layout");
        let plane = oh * ow;
        let bs = self.b.data.as_slice().expect("bias slice");
        for b in 0..bsz {
            for c in 0..self.out_c {
                let dst = (b * self.out_c + c) * plane;
                let src = c * bsz * plane + b * plane;
                os[dst..dst + plane].copy_from_slice(&o2[src..src + plane]);
                let bias = bs[c];
                for v in &mut os[dst..dst + plane] {
                    *v = *v + bias;
                }
            }
        }
        Ok((out, Conv2dCache { x: x.clone() }))
    }

    /// Accumulates weight/bias gradients and returns the input gradient.
    pub fn backward(&mut self, cache: &Conv2dCache<F>, grad_out: &Array4<F>) -> Array4<F> {
        let (bsz, _, h, w) = cache.x.dim();
        let (go_b, go_c, oh, ow) = grad_out.dim();
        assert_eq!(go_b, bsz);
        assert_eq!(go_c, self.out_c);
        let plane = oh * ow;
        // Rearrange grad_out into the GEMM layout [out_c, B*OH*OW].
        let mut g2 = Array2::<F>::zeros((self.out_c, bsz * plane));
        {
            let gs = grad_out.as_slice().expect("standard layout");
            let g2s = g2.as_slice_mut().expect("standard layout");
            for b in 0..bsz {
                for c in 0..self.out_c {
                    let src = (b * self.out_c + c) * plane;
                    let dst = c * bsz * plane + b * plane;
                    g2s[dst..dst + plane].copy_from_slice(&gs[src..src + plane]);
                }
            }
        }
        let cols = self.im2col(&cache.x);
        let dw2 = g2.dot(&cols.t()); // [out_c, in_c*k*k]
        {
            let mut wg = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
                .expect("contiguous weight grad");
            wg += &dw2;
        }
        {
            let db = g2.sum_axis(ndarray::Axis(1));
            let mut bg = self
                .b
                .grad
                .view_mut()
                .into_shape_with_order(self.out_c)
                .expect("bias grad");
            bg += &db;
        }
        let w2 = self
            .w
            .data
            .view()
            .into_shape_with_order((self.out_c, self.in_c * self.k * self.k))
            .expect("contiguous weights");
        let dcols = w2.t().dot(&g2);
        self.col2im(&dcols, bsz, h, w)
    }
}

impl<F: Real> ParamModule<F> for Conv2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.w);
        f(&join(prefix, "bias"), &mut self.b);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.w);
        f(&join(prefix, "bias"), &self.b);
    }
}

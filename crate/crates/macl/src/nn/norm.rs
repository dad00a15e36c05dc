//! Instance normalization: per-sample, per-channel statistics over space.
//! Batch-size independent, which matters at desk-scale batch sizes.

use ndarray::{Array2, Array4, ArrayD, IxDyn};

use super::{join, Param, ParamModule};
use crate::real::{c, Real};

#[derive(Debug, Clone)]
pub struct InstanceNorm2d<F> {
    pub gamma: Param<F>,
    pub beta: Param<F>,
    pub eps: f64,
    pub channels: usize,
}

#[derive(Debug)]
pub struct InstanceNormCache<F> {
    xhat: Array4<F>,
    inv_std: Array2<F>,
}

impl<F: Real> InstanceNorm2d<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Param::new(ArrayD::from_elem(IxDyn(&[channels]), F::one())),
            beta: Param::new(ArrayD::zeros(IxDyn(&[channels]))),
            eps: 1e-5,
            channels,
        }
    }

    pub fn forward(&self, x: &Array4<F>) -> (Array4<F>, InstanceNormCache<F>) {
        let (bsz, ch, h, w) = x.dim();
        assert_eq!(ch, self.channels, "instance norm channel mismatch");
        let n = h * w;
        let inv_n = c::<F>(1.0 / n as f64);
        let eps = c::<F>(self.eps);
        let gamma = self.gamma.data.as_slice().expect("gamma slice");
        let beta = self.beta.data.as_slice().expect("beta slice");
        let mut y = Array4::<F>::zeros((bsz, ch, h, w));
        let mut xhat = Array4::<F>::zeros((bsz, ch, h, w));
        let mut inv_std = Array2::<F>::zeros((bsz, ch));
        let xs = x.as_slice().expect("standard layout");
        let ys = y.as_slice_mut().expect("standard layout");
        let hs = xhat.as_slice_mut().expect("standard layout");
        for b in 0..bsz {
            for ci in 0..ch {
                let base = (b * ch + ci) * n;
                let mut mean = F::zero();
                for &v in &xs[base..base + n] {
                    mean = mean + v;
                }
                mean = mean * inv_n;
                let mut var = F::zero();
                for &v in &xs[base..base + n] {
                    let d = v - mean;
                    var = var + d * d;
                }
                var = var * inv_n;
                let is = (var + eps).sqrt().recip();
                inv_std[(b, ci)] = is;
                let (g, be) = (gamma[ci], beta[ci]);
                for i in 0..n {
                    let xh = (xs[base + i] - mean) * is;
                    hs[base + i] = xh;
                    ys[base + i] = g * xh + be;
                }
            }
        }
        (y, InstanceNormCache { xhat, inv_std })
    }

    pub fn backward(&mut self, cache: &InstanceNormCache<F>, grad_out: &Array4<F>) -> Array4<F> {
        let (bsz, ch, h, w) = grad_out.dim();
        let n = h * w;
        let inv_n = c::<F>(1.0 / n as f64);
        let gamma = self.gamma.data.as_slice().expect("gamma slice").to_vec();
        let gg = self.gamma.grad.as_slice_mut().expect("gamma grad");
        let bg = self.beta.grad.as_slice_mut().expect("beta grad");
        let gs = grad_out.as_slice().expect("standard layout");
        let hs = cache.xhat.as_slice().expect("standard layout");
        let mut dx = Array4::<F>::zeros((bsz, ch, h, w));
        let dxs = dx.as_slice_mut().expect("standard layout");
        for b in 0..bsz {
            for ci in 0..ch {
                let base = (b * ch + ci) * n;
                let is = cache.inv_std[(b, ci)];
                let g = gamma[ci];
                // Accumulate parameter grads and the two reduction terms.
                let mut s1 = F::zero(); // sum of dxhat
                let mut s2 = F::zero(); // sum of dxhat * xhat
                for i in 0..n {
                    let go = gs[base + i];
                    let xh = hs[base + i];
                    gg[ci] = gg[ci] + go * xh;
                    bg[ci] = bg[ci] + go;
                    let dxh = go * g;
                    s1 = s1 + dxh;
                    s2 = s2 + dxh * xh;
                }
                s1 = s1 * inv_n;
                s2 = s2 * inv_n;
                for i in 0..n {
                    let dxh = gs[base + i] * g;
                    dxs[base + i] = is * (dxh - s1 - hs[base + i] * s2);
                }
            }
        }
        dx
    }
}

impl<F: Real> ParamModule<F> for InstanceNorm2d<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "gamma"), &mut self.gamma);
        f(&join(prefix, "beta"), &mut self.beta);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "gamma"), &self.gamma);
        f(&join(prefix, "beta"), &self.beta);
    }
}

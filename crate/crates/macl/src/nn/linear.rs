//! Fully connected layer for the image-level projector heads.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use super::{join, normal_init, Param, ParamModule};
use crate::error::{shape_err, Result};
use crate::real::Real;

#[derive(Debug, Clone)]
pub struct Linear<F> {
    pub w: Param<F>, // [out, in]
    pub b: Param<F>, // [out]
    pub in_f: usize,
    pub out_f: usize,
}

#[derive(Debug)]
pub struct LinearCache<F> {
    x: Array2<F>,
}

impl<F: Real> Linear<F> {
    pub fn new<R: Rng>(in_f: usize, out_f: usize, rng: &mut R) -> Self {
        let std = (2.0 / in_f as f64).sqrt();
        Self {
            w: Param::new(normal_init(&[out_f, in_f], std, rng)),
            b: Param::new(ArrayD::zeros(IxDyn(&[out_f]))),
            in_f,
            out_f,
        }
    }

    pub fn forward(&self, x: &Array2<F>) -> Result<(Array2<F>, LinearCache<F>)> {
        if x.ncols() != self.in_f {
            return shape_err(format!(
                "linear expects {} features, got {}",
                self.in_f,
                x.ncols()
            ));
        }
        let w2 = self
            .w
            .data
            .view()
            .into_shape_with_order((self.out_f, self.in_f))
            .expect("contiguous weights");
        let mut y = x.dot(&w2.t());
        let b = self.b.data.view().into_shape_with_order(self.out_f).expect("bias");
        y += &b;
        Ok((y, LinearCache { x: x.clone() }))
    }

    pub fn backward(&mut self, cache: &LinearCache<F>, grad_out: &Array2<F>) -> Array2<F> {
        {
            let mut wg = self
                .w
                .grad
                .view_mut()
                .into_shape_with_order((self.out_f, self.in_f))
                .expect("weight grad");
            wg += &grad_out.t().dot(&cache.x);
        }
        {
            let mut bg = self
                .b
                .grad
                .view_mut()
                .into_shape_with_order(self.out_f)
                .expect("bias grad");
            bg += &grad_out.sum_axis(ndarray::Axis(0));
        }
        let w2 = self
            .w
            .data
            .view()
            .into_shape_with_order((self.out_f, self.in_f))
            .expect("contiguous weights");
        grad_out.dot(&w2)
    }
}

impl<F: Real> ParamModule<F> for Linear<F> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>)) {
        f(&join(prefix, "weight"), &mut self.w);
        f(&join(prefix, "bias"), &mut self.b);
    }

    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>)) {
        f(&join(prefix, "weight"), &self.w);
        f(&join(prefix, "bias"), &self.b);
    }
}

//! Minimal layer zoo with explicit forward caches and hand-written backward
//! passes. Layers are generic over the scalar so the f64 instantiation can be
//! verified against central finite differences.

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{Conv2d, Conv2dCache};
pub use linear::{Linear, LinearCache};
pub use norm::{InstanceNorm2d, InstanceNormCache};
pub use pool::{GlobalAvgPool, MaxPool2d, MaxPoolCache, Upsample2x};

use ndarray::ArrayD;
use rand::{Rng, RngExt};
use serde::{Deserialize, Serialize};

use crate::real::{c, Real};

/// One learnable tensor with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct Param<F> {
    pub data: ArrayD<F>,
    pub grad: ArrayD<F>,
}

impl<F: Real> Param<F> {
    pub fn new(data: ArrayD<F>) -> Self {
        let grad = ArrayD::zeros(data.raw_dim());
        Self { data, grad }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(F::zero());
    }

    pub fn count(&self) -> usize {
        self.data.len()
    }
}

/// Uniform traversal over a module's parameters in a stable order. The
/// optimizer, checkpointing, and EMA blending all rely on it.
pub trait ParamModule<F: Real> {
    fn visit_params(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<F>));
    fn visit_params_ref(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<F>));
}

pub fn param_count<F: Real, M: ParamModule<F> + ?Sized>(m: &M) -> usize {
    let mut n = 0;
    m.visit_params_ref("", &mut |_, p| n += p.count());
    n
}

pub fn zero_grads<F: Real, M: ParamModule<F> + ?Sized>(m: &mut M) {
    m.visit_params("", &mut |_, p| p.zero_grad());
}

pub fn grads_all_finite<F: Real, M: ParamModule<F> + ?Sized>(m: &M) -> bool {
    let mut ok = true;
    m.visit_params_ref("", &mut |_, p| {
        if ok && p.grad.iter().any(|v| !v.is_finite()) {
            ok = false;
        }
    });
    ok
}

/// Clone all parameter tensors in traversal order.
pub fn snapshot<F: Real, M: ParamModule<F> + ?Sized>(m: &M) -> Vec<ArrayD<F>> {
    let mut out = Vec::new();
    m.visit_params_ref("", &mut |_, p| out.push(p.data.clone()));
    out
}

/// Restore parameter tensors from a snapshot taken on an identical module.
pub fn restore<F: Real, M: ParamModule<F> + ?Sized>(m: &mut M, snap: &[ArrayD<F>]) {
    let mut idx = 0;
    m.visit_params("", &mut |_, p| {
        p.data.assign(&snap[idx]);
        idx += 1;
    });
    assert_eq!(idx, snap.len(), "snapshot length mismatch");
}

/// dst = momentum * dst + (1 - momentum) * src, parameter by parameter.
pub fn ema_blend<F: Real, M: ParamModule<F> + ?Sized>(dst: &mut M, src: &[ArrayD<F>], momentum: F) {
    let mut idx = 0;
    let one_m = F::one() - momentum;
    dst.visit_params("", &mut |_, p| {
        p.data.zip_mut_with(&src[idx], |d, s| *d = momentum * *d + one_m * *s);
        idx += 1;
    });
    assert_eq!(idx, src.len(), "snapshot length mismatch");
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Elementwise activation. Stateless; the cache stores the local slope.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
}

impl Activation {
    fn slope<F: Real>(self) -> F {
        match self {
            Activation::Relu => F::zero(),
            Activation::LeakyRelu => c(0.01),
        }
    }

    pub fn forward<F: Real, D: ndarray::Dimension>(
        self,
        x: &ndarray::Array<F, D>,
    ) -> (ndarray::Array<F, D>, ndarray::Array<F, D>) {
        let slope = self.slope::<F>();
        let mask = x.mapv(|v| if v > F::zero() { F::one() } else { slope });
        let y = x * &mask;
        (y, mask)
    }

    pub fn backward<F: Real, D: ndarray::Dimension>(
        self,
        mask: &ndarray::Array<F, D>,
        grad_out: &ndarray::Array<F, D>,
    ) -> ndarray::Array<F, D> {
        grad_out * mask
    }
}

/// Draw from N(0, std). Sampling happens in f64 so the f32 and f64
/// instantiations of a model see the same stream.
pub fn normal_init<F: Real, R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> ArrayD<F> {
    let normal = rand_distr::Normal::new(0.0f64, std).expect("valid std");
    ArrayD::from_shape_fn(ndarray::IxDyn(shape), |_| c::<F>(rng.sample(normal)))
}

/// Concatenate two feature maps along the channel axis. Built by hand so the
/// result is guaranteed standard layout (the GEMM path relies on it).
pub fn concat_channels<F: Real>(
    a: &ndarray::Array4<F>,
    b: &ndarray::Array4<F>,
) -> ndarray::Array4<F> {
    let (ba, ca, h, w) = a.dim();
    let (bb, cb, hb, wb) = b.dim();
    assert_eq!((ba, h, w), (bb, hb, wb), "channel concat shape mismatch");
    let mut out = ndarray::Array4::<F>::zeros((ba, ca + cb, h, w));
    out.slice_mut(ndarray::s![.., ..ca, .., ..]).assign(a);
    out.slice_mut(ndarray::s![.., ca.., .., ..]).assign(b);
    out
}

/// Split a channel-concatenated gradient back into its two parts.
pub fn split_channels<F: Real>(
    g: &ndarray::Array4<F>,
    first_channels: usize,
) -> (ndarray::Array4<F>, ndarray::Array4<F>) {
    let a = g.slice(ndarray::s![.., ..first_channels, .., ..]).to_owned();
    let b = g.slice(ndarray::s![.., first_channels.., .., ..]).to_owned();
    (a, b)
}

//! Minimal f64 neural-network kernels with explicit forward caches and
//! hand-written backward passes.
//!
//! Layers own their parameters together with gradient buffers; `forward_*`
//! methods return a cache that the matching `backward` consumes, so a layer
//! can be applied several times per step (the recurrent cell relies on this).
//! Everything is deterministic given the seeds handed to the constructors.

pub mod conv;
pub mod convlstm;
pub mod layers;
pub mod loss;
pub mod optim;

use ndarray::{Array, Dimension};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// A parameter tensor paired with its gradient accumulator.
#[derive(Debug, Clone)]
pub struct PTensor<D: Dimension> {
    pub v: Array<f64, D>,
    pub g: Array<f64, D>,
}

impl<D: Dimension> PTensor<D> {
    pub fn new(v: Array<f64, D>) -> Self {
        let g = Array::zeros(v.raw_dim());
        Self { v, g }
    }

    pub fn zero_grad(&mut self) {
        self.g.fill(0.0);
    }
}

/// Flat view of one trainable parameter, handed to optimizers.
pub struct ParamSlot<'a> {
    pub value: &'a mut [f64],
    pub grad: &'a mut [f64],
}

/// Flat view of one persistent tensor (parameters plus e.g. running
/// statistics), handed to checkpoint save/load.
pub struct StateSlot<'a> {
    pub shape: Vec<usize>,
    pub data: &'a mut [f64],
}

/// Anything with named parameters and persistent state. Visit order is fixed
/// by construction and stable across runs, which checkpointing relies on.
pub trait Module {
    fn for_each_param(&mut self, prefix: &str, f: &mut dyn FnMut(String, ParamSlot<'_>));
    fn for_each_state(&mut self, prefix: &str, f: &mut dyn FnMut(String, StateSlot<'_>));

    fn zero_grads(&mut self) {
        self.for_each_param("", &mut |_, p| {
            for g in p.grad.iter_mut() {
                *g = 0.0;
            }
        });
    }

    /// Total number of trainable scalars.
    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.for_each_param("", &mut |_, p| n += p.value.len());
        n
    }
}

pub(crate) fn visit_ptensor<D: Dimension>(
    name: String,
    t: &mut PTensor<D>,
    f: &mut dyn FnMut(String, ParamSlot<'_>),
) {
    f(
        name,
        ParamSlot {
            value: t.v.as_slice_mut().expect("parameters are standard layout"),
            grad: t.g.as_slice_mut().expect("gradients are standard layout"),
        },
    );
}

pub(crate) fn visit_state<D: Dimension>(
    name: String,
    a: &mut Array<f64, D>,
    f: &mut dyn FnMut(String, StateSlot<'_>),
) {
    let shape = a.shape().to_vec();
    f(
        name,
        StateSlot {
            shape,
            data: a.as_slice_mut().expect("state is standard layout"),
        },
    );
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Gaussian initializer with a fixed standard deviation.
pub struct Init<'a> {
    pub rng: &'a mut ChaCha8Rng,
    pub std: f64,
}

impl<'a> Init<'a> {
    pub fn new(rng: &'a mut ChaCha8Rng, std: f64) -> Self {
        Self { rng, std }
    }

    pub fn normal<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(&mut self, shape: Sh) -> Array<f64, D> {
        let dist = Normal::new(0.0, self.std).expect("std validated by config");
        Array::from_shape_simple_fn(shape, || dist.sample(self.rng))
    }

    /// Gaussian with an explicit std, for layers that do not follow the
    /// global initialization scheme.
    pub fn normal_with_std<D: Dimension, Sh: ndarray::ShapeBuilder<Dim = D>>(
        &mut self,
        shape: Sh,
        std: f64,
    ) -> Array<f64, D> {
        let dist = Normal::new(0.0, std).expect("finite std");
        Array::from_shape_simple_fn(shape, || dist.sample(self.rng))
    }
}

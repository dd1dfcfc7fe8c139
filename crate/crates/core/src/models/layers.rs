//! Parameterised building blocks shared by the networks.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{Graph, Var};
use crate::error::Result;
use crate::optim::{Parameter, Role};
use crate::sparse3d::Rulebook;
use crate::tensor::{Real, Tensor};

/// Anything that owns parameters.
pub trait Module<T: Real> {
    fn parameters(&self) -> Vec<&Parameter<T>>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>>;

    fn num_parameters(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    fn set_trainable(&mut self, trainable: bool) {
        for p in self.parameters_mut() {
            p.trainable = trainable;
        }
    }
}

/// Deterministic stream for one named component.
pub fn component_rng(seed: u64, tag: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in tag.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

/// He (fan-in) normal initialisation.
pub fn he_init<T: Real>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let std = (2.0 / fan_in.max(1) as f64).sqrt();
    let normal = Normal::new(0.0, std).expect("finite std");
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64_lossy(normal.sample(rng))).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Dense 2D convolution with bias, zero padding `k / 2`.
#[derive(Clone, Debug)]
pub struct Conv2d<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    pub stride: usize,
}

impl<T: Real> Conv2d<T> {
    pub fn new(name: &str, role: Role, cin: usize, cout: usize, k: usize, stride: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), role, he_init(rng, &[cout, cin, k, k], cin * k * k)),
            bias: Parameter::new(format!("{name}.bias"), role, Tensor::zeros(&[cout])),
            stride,
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.conv2d(x, g.param(&self.weight), g.param(&self.bias), self.stride)
    }
}

/// Row-wise affine map `x w + b`.
#[derive(Clone, Debug)]
pub struct Dense<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> Dense<T> {
    pub fn new(name: &str, role: Role, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), role, he_init(rng, &[cin, cout], cin)),
            bias: Parameter::new(format!("{name}.bias"), role, Tensor::zeros(&[cout])),
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.value().shape()[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.value().shape()[1]
    }

    pub fn forward(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        g.linear(x, g.param(&self.weight), g.param(&self.bias))
    }
}

/// Occupied kernel taps assumed by [`SparseConv`] initialisation. LiDAR
/// voxels rarely have more than a few occupied neighbours, so a fan-in of
/// all 27 taps would shrink activations layer after layer.
pub const SPARSE_INIT_TAPS: usize = 8;

/// Sparse 3D convolution with bias along a prebuilt rulebook.
#[derive(Clone, Debug)]
pub struct SparseConv<T: Real> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Real> SparseConv<T> {
    pub fn new(name: &str, role: Role, cin: usize, cout: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), role, he_init(rng, &[27, cin, cout], SPARSE_INIT_TAPS * cin)),
            bias: Parameter::new(format!("{name}.bias"), role, Tensor::zeros(&[cout])),
        }
    }

    pub fn forward(&self, g: &Graph<T>, x: Var, rb: &Rc<Rulebook>) -> Result<Var> {
        let y = g.sparse_conv(x, g.param(&self.weight), rb)?;
        g.add_bias_rows(y, g.param(&self.bias))
    }
}

macro_rules! impl_module_pair {
    ($($ty:ident),*) => {$(
        impl<T: Real> Module<T> for $ty<T> {
            fn parameters(&self) -> Vec<&Parameter<T>> {
                vec![&self.weight, &self.bias]
            }
            fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
                vec![&mut self.weight, &mut self.bias]
            }
        }
    )*};
}
impl_module_pair!(Conv2d, Dense, SparseConv);

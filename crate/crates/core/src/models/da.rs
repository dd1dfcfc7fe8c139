use super::layers::{component_rng, Dense, Module, SparseConv};
use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::optim::{Parameter, Role};
use crate::sparse3d::VoxelPyramid;
use crate::tensor::Real;

/// Sparse 3D self-calibrated convolution.
///
/// Channels split into halves `X1 | X2`. The calibrated half is gated by
/// `sigmoid(X1 + up(K2(pool(X1))))`, with pooling factor 2 taken from the
/// pyramid's first coarse level; the other half goes through a plain conv.
#[derive(Clone, Debug)]
pub struct ScConv3d<T: Real> {
    pub k1: SparseConv<T>,
    pub k2: SparseConv<T>,
    pub k3: SparseConv<T>,
    pub k4: SparseConv<T>,
}

/// Kernel index of the zero offset in a 3x3x3 rulebook.
const CENTER_TAP: usize = 13;

/// Scale of the random part of a near-identity kernel.
const IDENTITY_NOISE: f64 = 0.1;

fn near_identity<T: Real>(conv: &mut SparseConv<T>) {
    let w = conv.weight.value_mut();
    let (cin, cout) = (w.shape()[1], w.shape()[2]);
    let noise = T::from_f64_lossy(IDENTITY_NOISE);
    for v in w.data_mut() {
        *v = *v * noise;
    }
    for i in 0..cin.min(cout) {
        w.data_mut()[(CENTER_TAP * cin + i) * cout + i] += T::one();
    }
}

impl<T: Real> ScConv3d<T> {
    /// He-initialised kernels; with `identity_init` the three
    /// channel-preserving kernels `K1, K3, K4` start near the identity, so
    /// the layer begins as `relu(concat(X1 ⊙ sigmoid(X1 + A), X2))`.
    pub fn new(name: &str, channels: usize, identity_init: bool, rng: &mut rand_chacha::ChaCha8Rng) -> Result<Self> {
        ensure!(channels % 2 == 0, Shape, "self-calibrated conv needs even channels, got {}", channels);
        let h = channels / 2;
        let r = Role::DomainAdapt;
        let mut layer = Self {
            k1: SparseConv::new(&format!("{name}.k1"), r, h, h, rng),
            k2: SparseConv::new(&format!("{name}.k2"), r, h, h, rng),
            k3: SparseConv::new(&format!("{name}.k3"), r, h, h, rng),
            k4: SparseConv::new(&format!("{name}.k4"), r, h, h, rng),
        };
        if identity_init {
            near_identity(&mut layer.k1);
            near_identity(&mut layer.k3);
            near_identity(&mut layer.k4);
        }
        Ok(layer)
    }

    pub fn channels(&self) -> usize {
        2 * self.k1.weight.value().shape()[1]
    }

    /// `x` holds rows on level 0 of `pyramid`.
    pub fn forward(&self, g: &Graph<T>, x: Var, pyramid: &VoxelPyramid) -> Result<Var> {
        let c = g.shape(x)[1];
        ensure!(c % 2 == 0, Shape, "self-calibrated conv needs even channels, got {}", c);
        ensure!(c == self.channels(), Shape, "layer has {} channels, input {}", self.channels(), c);
        ensure!(pyramid.levels.len() >= 2, Argument, "self-calibrated conv needs a coarse level");
        let h = c / 2;
        let (l0, l1) = (&pyramid.levels[0], &pyramid.levels[1]);
        let x1 = g.slice_cols(x, 0, h)?;
        let x2 = g.slice_cols(x, h, c)?;
        let parents: Vec<Option<usize>> = l0.parent.iter().map(|&p| Some(p)).collect();
        let t = g.segment_mean_rows(x1, &parents, l1.coords.len())?;
        let a = g.gather_rows(self.k2.forward(g, t, &l1.subm)?, &l0.parent)?;
        let gate = g.sigmoid(g.add(x1, a)?);
        let y1 = g.mul(self.k3.forward(g, x1, &l0.subm)?, gate)?;
        let y1 = self.k4.forward(g, y1, &l0.subm)?;
        let y2 = self.k1.forward(g, x2, &l0.subm)?;
        Ok(g.relu(g.concat_cols(y1, y2)?))
    }
}

impl<T: Real> Module<T> for ScConv3d<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        [&self.k1, &self.k2, &self.k3, &self.k4]
            .into_iter()
            .flat_map(|c| c.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        [&mut self.k1, &mut self.k2, &mut self.k3, &mut self.k4]
            .into_iter()
            .flat_map(|c| c.parameters_mut())
            .collect()
    }
}

/// Maps 3D features into the image feature space: a per-voxel linear lift
/// followed by `layers` self-calibrated convolutions.
#[derive(Clone, Debug)]
pub struct DaModule<T: Real> {
    pub lift: Dense<T>,
    pub layers: Vec<ScConv3d<T>>,
}

impl<T: Real> DaModule<T> {
    pub fn new(in_channels: usize, out_channels: usize, layers: usize, identity_init: bool, seed: u64) -> Result<Self> {
        let mut rng = component_rng(seed, "da");
        let lift = Dense::new("m.lift", Role::DomainAdapt, in_channels, out_channels, &mut rng);
        let layers = (0..layers)
            .map(|i| ScConv3d::new(&format!("m.sc{i}"), out_channels, identity_init, &mut rng))
            .collect::<Result<_>>()?;
        Ok(Self { lift, layers })
    }

    /// A lift-only module (no self-calibrated layers).
    pub fn linear(in_channels: usize, out_channels: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "da");
        Self {
            lift: Dense::new("m.lift", Role::DomainAdapt, in_channels, out_channels, &mut rng),
            layers: Vec::new(),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.lift.in_features()
    }

    pub fn out_channels(&self) -> usize {
        self.lift.out_features()
    }

    /// Per-voxel pseudo-2D features from per-voxel 3D features.
    pub fn forward_voxels(&self, g: &Graph<T>, x: Var, pyramid: &VoxelPyramid) -> Result<Var> {
        let c = g.shape(x)[1];
        ensure!(
            c == self.in_channels(),
            Shape,
            "adapter expects {} channels, got {}",
            self.in_channels(),
            c
        );
        let mut y = self.lift.forward(g, x)?;
        for layer in &self.layers {
            y = layer.forward(g, y, pyramid)?;
        }
        Ok(y)
    }
}

impl<T: Real> Module<T> for DaModule<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v = self.lift.parameters();
        for l in &self.layers {
            v.extend(l.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v = self.lift.parameters_mut();
        for l in &mut self.layers {
            v.extend(l.parameters_mut());
        }
        v
    }
}

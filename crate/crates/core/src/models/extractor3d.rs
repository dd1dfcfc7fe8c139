use super::layers::{component_rng, Dense, Module, SparseConv};
use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::optim::{Parameter, Role};
use crate::sparse3d::{voxelize, VoxelMap, VoxelPyramid};
use crate::tensor::{Real, Tensor};

/// Per-voxel input channels: scaled height and LiDAR intensity.
pub const POINT_INPUT_CHANNELS: usize = 2;

/// A voxelised cloud with its three-level site pyramid.
#[derive(Clone, Debug)]
pub struct VoxelInput<T: Real> {
    /// `n_voxels x POINT_INPUT_CHANNELS`.
    pub features: Tensor<T>,
    pub map: VoxelMap,
    pub pyramid: VoxelPyramid,
}

impl<T: Real> VoxelInput<T> {
    /// Voxelises an `n x 4` cloud (`x, y, z, intensity`).
    pub fn from_cloud(cloud: &Tensor<T>, voxel_size: f64, z_scale: f64) -> Result<Self> {
        let (n, d) = cloud.dims2()?;
        ensure!(n > 0, Argument, "cannot encode an empty cloud");
        ensure!(d == 4, Shape, "cloud must be n x 4, got n x {}", d);
        let zs = T::from_f64_lossy(z_scale);
        let mut aug = Vec::with_capacity(n * 5);
        for p in cloud.data().chunks(4) {
            aug.extend_from_slice(&[p[0], p[1], p[2], p[2] * zs, p[3]]);
        }
        let (st, map) = voxelize(&Tensor::new(vec![n, 5], aug)?, voxel_size)?;
        let pyramid = VoxelPyramid::build(&st.coords, 3)?;
        Ok(Self {
            features: st.features,
            map,
            pyramid,
        })
    }

    pub fn num_points(&self) -> usize {
        self.map.point_rows.len()
    }

    pub fn num_voxels(&self) -> usize {
        self.features.shape()[0]
    }
}

/// Three-level sparse U-Net (16/32/64 channels) producing per-voxel features.
#[derive(Clone, Debug)]
pub struct Extractor3D<T: Real> {
    e0a: SparseConv<T>,
    e0b: SparseConv<T>,
    down0: SparseConv<T>,
    e1: SparseConv<T>,
    down1: SparseConv<T>,
    e2: SparseConv<T>,
    u1: SparseConv<T>,
    u0: SparseConv<T>,
    out: Dense<T>,
}

impl<T: Real> Extractor3D<T> {
    pub fn new(out_channels: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "extractor3d");
        let r = Role::Extractor3d;
        Self {
            e0a: SparseConv::new("h.e0a", r, POINT_INPUT_CHANNELS, 16, &mut rng),
            e0b: SparseConv::new("h.e0b", r, 16, 16, &mut rng),
            down0: SparseConv::new("h.down0", r, 16, 32, &mut rng),
            e1: SparseConv::new("h.e1", r, 32, 32, &mut rng),
            down1: SparseConv::new("h.down1", r, 32, 64, &mut rng),
            e2: SparseConv::new("h.e2", r, 64, 64, &mut rng),
            u1: SparseConv::new("h.u1", r, 64 + 32, 32, &mut rng),
            u0: SparseConv::new("h.u0", r, 32 + 16, 32, &mut rng),
            out: Dense::new("h.out", r, 32, out_channels, &mut rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.out.out_features()
    }

    /// Per-voxel output rows on level 0 of `input.pyramid`.
    pub fn forward_voxels(&self, g: &Graph<T>, input: &VoxelInput<T>) -> Result<Var> {
        let lv = &input.pyramid.levels;
        let x = g.constant(input.features.clone());
        let a0 = g.relu(self.e0a.forward(g, x, &lv[0].subm)?);
        let a0 = g.relu(self.e0b.forward(g, a0, &lv[0].subm)?);
        let down0 = lv[0].down.as_ref().expect("three-level pyramid");
        let a1 = g.relu(self.down0.forward(g, a0, down0)?);
        let a1 = g.relu(self.e1.forward(g, a1, &lv[1].subm)?);
        let down1 = lv[1].down.as_ref().expect("three-level pyramid");
        let a2 = g.relu(self.down1.forward(g, a1, down1)?);
        let a2 = g.relu(self.e2.forward(g, a2, &lv[2].subm)?);
        let up2 = g.gather_rows(a2, &lv[1].parent)?;
        let b1 = g.relu(self.u1.forward(g, g.concat_cols(up2, a1)?, &lv[1].subm)?);
        let up1 = g.gather_rows(b1, &lv[0].parent)?;
        let b0 = g.relu(self.u0.forward(g, g.concat_cols(up1, a0)?, &lv[0].subm)?);
        self.out.forward(g, b0)
    }

    /// Per-point rows aligned with the cloud the input was built from.
    pub fn forward_points(&self, g: &Graph<T>, input: &VoxelInput<T>) -> Result<Var> {
        let v = self.forward_voxels(g, input)?;
        g.gather_rows(v, &input.map.point_rows)
    }
}

impl<T: Real> Module<T> for Extractor3D<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut v: Vec<&Parameter<T>> = [
            &self.e0a, &self.e0b, &self.down0, &self.e1, &self.down1, &self.e2, &self.u1, &self.u0,
        ]
        .into_iter()
        .flat_map(|c| c.parameters())
        .collect();
        v.extend(self.out.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut v: Vec<&mut Parameter<T>> = [
            &mut self.e0a,
            &mut self.e0b,
            &mut self.down0,
            &mut self.e1,
            &mut self.down1,
            &mut self.e2,
            &mut self.u1,
            &mut self.u0,
        ]
        .into_iter()
        .flat_map(|c| c.parameters_mut())
        .collect();
        v.extend(self.out.parameters_mut());
        v
    }
}

use super::layers::{component_rng, Conv2d, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::optim::{Parameter, Role};
use crate::tensor::Real;

/// Image encoder-decoder (backbone) followed by a 1x1 projection head.
///
/// The backbone halves the resolution twice and restores it with two
/// bilinear-upsample + conv stages joined to the encoder by additive skips.
/// The head maps backbone features to `out_channels` and resizes them to the
/// input resolution.
#[derive(Clone, Debug)]
pub struct Extractor2D<T: Real> {
    c1: Conv2d<T>,
    c2: Conv2d<T>,
    c3: Conv2d<T>,
    c4: Conv2d<T>,
    d1: Conv2d<T>,
    d2: Conv2d<T>,
    h1: Conv2d<T>,
    h2: Conv2d<T>,
}

impl<T: Real> Extractor2D<T> {
    pub fn new(out_channels: usize, seed: u64) -> Self {
        let mut rng = component_rng(seed, "extractor2d");
        let (b, h) = (Role::Backbone, Role::Head);
        Self {
            c1: Conv2d::new("bck.c1", b, 3, 16, 3, 1, &mut rng),
            c2: Conv2d::new("bck.c2", b, 16, 32, 3, 2, &mut rng),
            c3: Conv2d::new("bck.c3", b, 32, 64, 3, 2, &mut rng),
            c4: Conv2d::new("bck.c4", b, 64, 64, 3, 1, &mut rng),
            d1: Conv2d::new("bck.d1", b, 64, 32, 3, 1, &mut rng),
            d2: Conv2d::new("bck.d2", b, 32, 16, 3, 1, &mut rng),
            h1: Conv2d::new("hd.p1", h, 16, 64, 1, 1, &mut rng),
            h2: Conv2d::new("hd.p2", h, 64, out_channels, 1, 1, &mut rng),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.h2.weight.value().shape()[0]
    }

    pub fn backbone_channels(&self) -> usize {
        16
    }

    /// Backbone features (`16 x h x w`) of a `3 x h x w` image.
    pub fn backbone(&self, g: &Graph<T>, image: Var) -> Result<Var> {
        let shape = g.shape(image);
        ensure!(
            shape.len() == 3 && shape[0] == 3,
            Shape,
            "2D extractor expects a 3 x h x w image, got {:?}",
            shape
        );
        let x1 = g.relu(self.c1.forward(g, image)?);
        let x2 = g.relu(self.c2.forward(g, x1)?);
        let x3 = g.relu(self.c3.forward(g, x2)?);
        let x4 = g.relu(self.c4.forward(g, x3)?);
        let s2 = g.shape(x2);
        let u1 = g.upsample_bilinear(x4, s2[1], s2[2])?;
        let y1 = g.add(g.relu(self.d1.forward(g, u1)?), x2)?;
        let u2 = g.upsample_bilinear(y1, shape[1], shape[2])?;
        g.add(g.relu(self.d2.forward(g, u2)?), x1)
    }

    /// Projection head: `c x h' x w'` backbone map to `out_channels x h x w`.
    pub fn head(&self, g: &Graph<T>, features: Var, height: usize, width: usize) -> Result<Var> {
        let y = g.relu(self.h1.forward(g, features)?);
        let y = g.relu(self.h2.forward(g, y)?);
        let s = g.shape(y);
        if s[1] == height && s[2] == width {
            Ok(y)
        } else {
            g.upsample_bilinear(y, height, width)
        }
    }

    /// `F = head(backbone(image))` at the input resolution.
    pub fn forward(&self, g: &Graph<T>, image: Var) -> Result<Var> {
        let s = g.shape(image);
        let b = self.backbone(g, image)?;
        self.head(g, b, s[1], s[2])
    }

    pub fn set_backbone_trainable(&mut self, trainable: bool) {
        for c in [&mut self.c1, &mut self.c2, &mut self.c3, &mut self.c4, &mut self.d1, &mut self.d2] {
            c.set_trainable(trainable);
        }
    }

    pub fn set_head_trainable(&mut self, trainable: bool) {
        self.h1.set_trainable(trainable);
        self.h2.set_trainable(trainable);
    }
}

impl<T: Real> Module<T> for Extractor2D<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        [&self.c1, &self.c2, &self.c3, &self.c4, &self.d1, &self.d2, &self.h1, &self.h2]
            .into_iter()
            .flat_map(|c| c.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        [
            &mut self.c1,
            &mut self.c2,
            &mut self.c3,
            &mut self.c4,
            &mut self.d1,
            &mut self.d2,
            &mut self.h1,
            &mut self.h2,
        ]
        .into_iter()
        .flat_map(|c| c.parameters_mut())
        .collect()
    }
}

use super::layers::{component_rng, Dense, Module};
use crate::autodiff::{Graph, Var};
use crate::error::{ensure, Result};
use crate::optim::{Parameter, Role};
use crate::tensor::{Real, Tensor};

/// Per-location MLP with two hidden layers, shared by the 2D and 3D paths.
#[derive(Clone, Debug)]
pub struct SharedClassifier<T: Real> {
    pub l1: Dense<T>,
    pub l2: Dense<T>,
    pub l3: Dense<T>,
}

impl<T: Real> SharedClassifier<T> {
    pub fn new(in_channels: usize, hidden: usize, classes: usize, seed: u64, tag: &str) -> Self {
        let mut rng = component_rng(seed, tag);
        let r = Role::Classifier;
        Self {
            l1: Dense::new(&format!("{tag}.l1"), r, in_channels, hidden, &mut rng),
            l2: Dense::new(&format!("{tag}.l2"), r, hidden, hidden, &mut rng),
            l3: Dense::new(&format!("{tag}.l3"), r, hidden, classes, &mut rng),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.l1.in_features()
    }

    pub fn classes(&self) -> usize {
        self.l3.out_features()
    }

    /// Zeroes the output layer so every location starts at uniform logits.
    pub fn zero_output_layer(&mut self) {
        self.l3.weight.value_mut().fill(T::zero());
        self.l3.bias.value_mut().fill(T::zero());
    }

    /// `m x classes` logits for `m x in_channels` rows.
    pub fn logits(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let c = g.shape(x)[1];
        ensure!(
            c == self.in_channels(),
            Shape,
            "classifier expects {} channels, got {}",
            self.in_channels(),
            c
        );
        let h = g.relu(self.l1.forward(g, x)?);
        let h = g.relu(self.l2.forward(g, h)?);
        self.l3.forward(g, h)
    }

    /// Row-wise class distributions.
    pub fn probs(&self, g: &Graph<T>, x: Var) -> Result<Var> {
        let l = self.logits(g, x)?;
        g.softmax_rows(l)
    }

    /// Soft labels for a plain matrix of rows.
    pub fn classify(&self, rows: &Tensor<T>) -> Result<Tensor<T>> {
        let g = Graph::new();
        let x = g.constant(rows.clone());
        let p = self.probs(&g, x)?;
        Ok((*g.value(p)).clone())
    }
}

impl<T: Real> Module<T> for SharedClassifier<T> {
    fn parameters(&self) -> Vec<&Parameter<T>> {
        [&self.l1, &self.l2, &self.l3]
            .into_iter()
            .flat_map(|c| c.parameters())
            .collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        [&mut self.l1, &mut self.l2, &mut self.l3]
            .into_iter()
            .flat_map(|c| c.parameters_mut())
            .collect()
    }
}

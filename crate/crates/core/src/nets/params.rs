use rand::Rng;
use rand_distr::{Distribution, Normal};

/// A named parameter (or running-statistic buffer) array.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    /// Buffers such as batch-norm running statistics are not trainable.
    pub trainable: bool,
}

/// What a graph consumes and produces.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardSignature {
    pub in_channels: usize,
    pub out_channels: usize,
    /// Outputs one value per patch instead of per voxel.
    pub per_patch: bool,
}

/// Ordered parameter blocks of a network; shapes depend only on its config.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGraph {
    pub signature: ForwardSignature,
    pub blocks: Vec<ParamBlock>,
}

impl ParamGraph {
    pub fn new(signature: ForwardSignature) -> Self {
        Self {
            signature,
            blocks: Vec::new(),
        }
    }

    pub(crate) fn push(
        &mut self,
        name: String,
        shape: Vec<usize>,
        values: Vec<f64>,
        trainable: bool,
    ) -> usize {
        debug_assert_eq!(values.len(), shape.iter().product::<usize>());
        self.blocks.push(ParamBlock {
            name,
            shape,
            values,
            trainable,
        });
        self.blocks.len() - 1
    }

    /// He-normal initialised weights.
    pub(crate) fn push_normal<R: Rng>(
        &mut self,
        name: String,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> usize {
        let n = shape.iter().product();
        let dist = Normal::new(0.0, std).expect("positive std");
        let values = (0..n).map(|_| dist.sample(rng)).collect();
        self.push(name, shape, values, true)
    }

    pub(crate) fn push_const(
        &mut self,
        name: String,
        shape: Vec<usize>,
        v: f64,
        trainable: bool,
    ) -> usize {
        let n = shape.iter().product();
        self.push(name, shape, vec![v; n], trainable)
    }

    pub fn values(&self, block: usize) -> &[f64] {
        &self.blocks[block].values
    }

    pub fn block_index(&self, name: &str) -> Option<usize> {
        self.blocks.iter().position(|b| b.name == name)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .filter(|b| b.trainable)
            .map(|b| b.values.len())
            .sum()
    }

    pub fn zero_grads(&self) -> Grads {
        Grads {
            blocks: self
                .blocks
                .iter()
                .map(|b| vec![0.0; b.values.len()])
                .collect(),
        }
    }

    /// Shifts trainable values by `step * direction`.
    pub fn shifted(&self, direction: &Grads, step: f64) -> Self {
        let mut out = self.clone();
        for (b, d) in out.blocks.iter_mut().zip(&direction.blocks) {
            if b.trainable {
                for (v, dv) in b.values.iter_mut().zip(d) {
                    *v += step * dv;
                }
            }
        }
        out
    }

    /// Same block names and shapes.
    pub fn same_layout(&self, other: &ParamGraph) -> bool {
        self.signature == other.signature
            && self.blocks.len() == other.blocks.len()
            && self
                .blocks
                .iter()
                .zip(&other.blocks)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.trainable == b.trainable)
    }
}

/// Gradients parallel to a [`ParamGraph`]'s blocks.
#[derive(Debug, Clone, PartialEq)]
pub struct Grads {
    pub blocks: Vec<Vec<f64>>,
}

impl Grads {
    pub fn add(&mut self, block: usize, g: &[f64]) {
        for (a, b) in self.blocks[block].iter_mut().zip(g) {
            *a += b;
        }
    }

    pub fn accumulate(&mut self, other: &Grads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.blocks.iter_mut().flatten().for_each(|x| *x *= s);
    }

    pub fn dot(&self, other: &Grads) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .zip(other.blocks.iter().flatten())
            .map(|(a, b)| a * b)
            .sum()
    }

    pub fn is_finite(&self) -> bool {
        self.blocks.iter().flatten().all(|x| x.is_finite())
    }

    /// Random unit-variance direction over the trainable blocks of `graph`.
    pub fn random_direction<R: Rng>(graph: &ParamGraph, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, 1.0).unwrap();
        Grads {
            blocks: graph
                .blocks
                .iter()
                .map(|b| {
                    if b.trainable {
                        (0..b.values.len()).map(|_| normal.sample(rng)).collect()
                    } else {
                        vec![0.0; b.values.len()]
                    }
                })
                .collect(),
        }
    }
}

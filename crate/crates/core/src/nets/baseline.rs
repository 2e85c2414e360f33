//! Voxel-wise two-layer perceptron baseline: each voxel's channel vector is
//! mapped independently through one hidden LeakyReLU layer to a DVR value.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{ForwardSignature, Grads, ParamGraph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BaselineConfig {
    pub in_channels: usize,
    pub hidden: usize,
    pub leaky_slope: f64,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            hidden: 16,
            leaky_slope: 0.2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct VoxelMlp {
    cfg: BaselineConfig,
    graph: ParamGraph,
}

pub struct MlpCache {
    rows: Vec<f64>,
    hidden: Vec<f64>,
    shape: [usize; 5],
}

/// Two-layer baseline with default width.
pub fn build_baseline_2layer(in_channels: usize, seed: u64) -> Result<VoxelMlp> {
    VoxelMlp::new(
        BaselineConfig {
            in_channels,
            ..BaselineConfig::default()
        },
        seed,
    )
}

impl VoxelMlp {
    pub fn new(cfg: BaselineConfig, seed: u64) -> Result<Self> {
        if cfg.in_channels == 0 || cfg.hidden == 0 {
            return Err(Error::Config(
                "baseline needs at least one input and hidden unit".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph = ParamGraph::new(ForwardSignature {
            in_channels: cfg.in_channels,
            out_channels: 1,
            per_patch: false,
        });
        let gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        graph.push_normal(
            "hidden.weight".into(),
            vec![cfg.hidden, cfg.in_channels],
            (gain / cfg.in_channels as f64).sqrt(),
            &mut rng,
        );
        graph.push_const("hidden.bias".into(), vec![cfg.hidden], 0.0, true);
        graph.push_normal(
            "out.weight".into(),
            vec![1, cfg.hidden],
            (1.0 / cfg.hidden as f64).sqrt(),
            &mut rng,
        );
        graph.push_const("out.bias".into(), vec![1], 0.0, true);
        Ok(Self { cfg, graph })
    }

    pub fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }

    pub fn config(&self) -> &BaselineConfig {
        &self.cfg
    }

    /// Replaces the parameters; the layout must match this config.
    pub fn with_graph(&self, graph: ParamGraph) -> Result<Self> {
        if !graph.same_layout(&self.graph) {
            return Err(Error::Checkpoint(
                "baseline parameter layout mismatch".into(),
            ));
        }
        Ok(Self {
            cfg: self.cfg.clone(),
            graph,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Tensor) -> Result<(Tensor, MlpCache)> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Channels {
                expected: self.cfg.in_channels,
                found: x.channels(),
            });
        }
        let (c, v) = (x.channels(), x.voxels());
        let mut rows = Vec::with_capacity(x.data().len());
        for n in 0..x.batch() {
            for i in 0..v {
                rows.extend((0..c).map(|ch| x.plane(n, ch)[i]));
            }
        }
        let nrows = x.batch() * v;
        let pre = ops::linear(
            &rows,
            nrows,
            self.graph.values(0),
            self.graph.values(1),
            self.cfg.hidden,
        );
        let slope = self.cfg.leaky_slope;
        let hidden: Vec<f64> = pre
            .iter()
            .map(|&a| if a > 0.0 { a } else { slope * a })
            .collect();
        let out = ops::linear(
            &hidden,
            nrows,
            self.graph.values(2),
            self.graph.values(3),
            1,
        );
        let mut shape = x.shape();
        shape[1] = 1;
        Ok((
            Tensor::from_vec(shape, out),
            MlpCache {
                rows,
                hidden,
                shape,
            },
        ))
    }

    pub fn backward(&self, cache: &MlpCache, grad_out: &Tensor) -> Grads {
        let mut grads = self.graph.zero_grads();
        let nrows = cache.shape[0] * cache.shape[2] * cache.shape[3] * cache.shape[4];
        let (gh, gw2, gb2) = ops::linear_backward(
            &cache.hidden,
            nrows,
            self.graph.values(2),
            grad_out.data(),
            1,
        );
        grads.add(2, &gw2);
        grads.add(3, &gb2);
        let slope = self.cfg.leaky_slope;
        let gpre: Vec<f64> = gh
            .iter()
            .zip(&cache.hidden)
            .map(|(&g, &h)| if h > 0.0 { g } else { slope * g })
            .collect();
        let (_, gw1, gb1) = ops::linear_backward(
            &cache.rows,
            nrows,
            self.graph.values(0),
            &gpre,
            self.cfg.hidden,
        );
        grads.add(0, &gw1);
        grads.add(1, &gb1);
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_and_locality() {
        let m = build_baseline_2layer(4, 0).unwrap();
        let x = Tensor::from_vec(
            [1, 4, 4, 4, 4],
            [0.3, -0.1, 0.7, 1.2]
                .iter()
                .flat_map(|&v| vec![v; 64])
                .collect(),
        );
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), [1, 1, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == y.data()[0]));
    }

    #[test]
    fn backward_matches_finite_difference() {
        let m = build_baseline_2layer(4, 1).unwrap();
        let x = Tensor::from_vec(
            [1, 4, 2, 2, 2],
            (0..32).map(|i| (i as f64 * 0.37).sin()).collect(),
        );
        let loss = |mm: &VoxelMlp| {
            mm.forward(&x)
                .unwrap()
                .data()
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
        };
        let (y, cache) = m.forward_cached(&x).unwrap();
        let g = Tensor::from_vec(y.shape(), y.data().iter().map(|v| 2.0 * v).collect());
        let grads = m.backward(&cache, &g);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let dir = Grads::random_direction(m.graph(), &mut rng);
        let h = 1e-6;
        let mut plus = m.clone();
        *plus.graph_mut() = m.graph().shifted(&dir, h);
        let mut minus = m.clone();
        *minus.graph_mut() = m.graph().shifted(&dir, -h);
        let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
        let an = grads.dot(&dir);
        assert!((fd - an).abs() < 1e-6 * fd.abs().max(1.0));
    }
}

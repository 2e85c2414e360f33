//! 3D U-Net generator.
//!
//! Level `l` works with `base_filters * 2^l` channels at spatial scale
//! `1 / 2^l`. Encoder levels apply conv + LeakyReLU and average-pool into the
//! next level; the deepest level is a single conv block. Each decoder level
//! convolves the coarser features, upsamples them (nearest neighbour),
//! applies dropout, concatenates the mirrored encoder features and fuses them
//! with another conv. A final linear conv yields one channel.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops;
use super::params::{ForwardSignature, Grads, ParamGraph};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    /// 4 for the sketcher, 5 (MRI + sketch) for the refiner.
    pub in_channels: usize,
    pub base_filters: usize,
    pub depth: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub dropout_rate: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            in_channels: 4,
            base_filters: 16,
            depth: 3,
            kernel: 3,
            leaky_slope: 0.2,
            dropout_rate: 0.5,
        }
    }
}

impl GeneratorConfig {
    pub fn sketcher() -> Self {
        Self::default()
    }

    pub fn refiner() -> Self {
        Self {
            in_channels: 5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!(
                "generator depth must be >= 2, got {}",
                self.depth
            )));
        }
        if self.in_channels == 0 || self.base_filters == 0 {
            return Err(Error::Config("generator channels must be positive".into()));
        }
        if self.kernel.is_multiple_of(2) {
            return Err(Error::Config("generator kernel must be odd".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Config("dropout rate must lie in [0, 1)".into()));
        }
        if !(self.leaky_slope.is_finite() && self.leaky_slope >= 0.0) {
            return Err(Error::Config("leaky slope must be >= 0".into()));
        }
        Ok(())
    }

    /// Input dims must be divisible by this factor.
    pub fn divisor(&self) -> usize {
        1 << (self.depth - 1)
    }

    pub fn check_dims(&self, dims: [usize; 3]) -> Result<()> {
        let d = self.divisor();
        if dims.iter().any(|&n| n == 0 || n % d != 0) {
            return Err(Error::Dims(format!(
                "volume dims {dims:?} not divisible by 2^(depth-1) = {d}"
            )));
        }
        Ok(())
    }

    fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }
}

#[derive(Debug, Clone, Copy)]
struct Conv {
    weight: usize,
    bias: usize,
    cout: usize,
}

#[derive(Debug, Clone)]
pub struct Generator {
    cfg: GeneratorConfig,
    graph: ParamGraph,
    enc: Vec<Conv>,
    bottleneck: Conv,
    up: Vec<Conv>,
    dec: Vec<Conv>,
    out: Conv,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct GeneratorCache {
    enc_in: Vec<Tensor>,
    enc_act: Vec<Tensor>,
    bott_in: Tensor,
    bott_act: Tensor,
    up_in: Vec<Tensor>,
    up_act: Vec<Tensor>,
    masks: Vec<Option<Vec<f64>>>,
    dec_in: Vec<Tensor>,
    dec_act: Vec<Tensor>,
    out_in: Tensor,
}

/// Builds a generator with deterministic initial weights drawn from `seed`.
pub fn build_generator(cfg: &GeneratorConfig, seed: u64) -> Result<Generator> {
    Generator::new(cfg.clone(), seed)
}

impl Generator {
    pub fn new(cfg: GeneratorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph = ParamGraph::new(ForwardSignature {
            in_channels: cfg.in_channels,
            out_channels: 1,
            per_patch: false,
        });
        let k3 = cfg.kernel.pow(3);
        let gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        let mut conv = |graph: &mut ParamGraph, name: &str, cin: usize, cout: usize, gain: f64| {
            let std = (gain / (cin * k3) as f64).sqrt();
            let weight = graph.push_normal(
                format!("{name}.weight"),
                vec![cout, cin, cfg.kernel, cfg.kernel, cfg.kernel],
                std,
                &mut rng,
            );
            let bias = graph.push_const(format!("{name}.bias"), vec![cout], 0.0, true);
            Conv { weight, bias, cout }
        };
        let levels = cfg.depth - 1;
        let mut enc = Vec::with_capacity(levels);
        let mut cin = cfg.in_channels;
        for l in 0..levels {
            enc.push(conv(
                &mut graph,
                &format!("enc{l}"),
                cin,
                cfg.filters(l),
                gain,
            ));
            cin = cfg.filters(l);
        }
        let bottleneck = conv(&mut graph, "bottleneck", cin, cfg.filters(levels), gain);
        let mut up = vec![None; levels];
        let mut dec = vec![None; levels];
        for l in (0..levels).rev() {
            up[l] = Some(conv(
                &mut graph,
                &format!("up{l}"),
                cfg.filters(l + 1),
                cfg.filters(l),
                gain,
            ));
            dec[l] = Some(conv(
                &mut graph,
                &format!("dec{l}"),
                2 * cfg.filters(l),
                cfg.filters(l),
                gain,
            ));
        }
        let out = conv(&mut graph, "out", cfg.filters(0), 1, 1.0);
        Ok(Self {
            cfg,
            graph,
            enc,
            bottleneck,
            up: up.into_iter().map(Option::unwrap).collect(),
            dec: dec.into_iter().map(Option::unwrap).collect(),
            out,
        })
    }

    pub fn config(&self) -> &GeneratorConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }

    /// Replaces the parameters; the layout must match this config.
    pub fn with_graph(&self, graph: ParamGraph) -> Result<Self> {
        if !graph.same_layout(&self.graph) {
            return Err(Error::Checkpoint(
                "generator parameter layout mismatch".into(),
            ));
        }
        Ok(Self {
            graph,
            ..self.clone()
        })
    }

    fn conv(&self, x: &Tensor, c: Conv) -> Tensor {
        ops::conv3d(
            x,
            self.graph.values(c.weight),
            self.graph.values(c.bias),
            c.cout,
            self.cfg.kernel,
        )
    }

    fn check_input(&self, x: &Tensor) -> Result<()> {
        if x.channels() != self.cfg.in_channels {
            return Err(Error::Channels {
                expected: self.cfg.in_channels,
                found: x.channels(),
            });
        }
        self.cfg.check_dims(x.spatial_dims())
    }

    /// Evaluates the generator. With `dropout` set, decoder dropout masks are
    /// sampled from it (the generator's noise source); with `None` the pass is
    /// deterministic.
    pub fn forward(&self, x: &Tensor, dropout: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        Ok(self.forward_cached(x, dropout)?.0)
    }

    pub fn forward_cached(
        &self,
        x: &Tensor,
        mut dropout: Option<&mut ChaCha8Rng>,
    ) -> Result<(Tensor, GeneratorCache)> {
        self.check_input(x)?;
        let slope = self.cfg.leaky_slope;
        let levels = self.cfg.depth - 1;
        let mut enc_in = Vec::with_capacity(levels);
        let mut enc_act = Vec::with_capacity(levels);
        let mut h = x.clone();
        for l in 0..levels {
            let a = ops::leaky_relu(&self.conv(&h, self.enc[l]), slope);
            let pooled = ops::avg_pool2(&a);
            enc_in.push(h);
            enc_act.push(a);
            h = pooled;
        }
        let bott_act = ops::leaky_relu(&self.conv(&h, self.bottleneck), slope);
        let bott_in = h;
        h = bott_act.clone();

        let mut up_in = vec![None; levels];
        let mut up_act = vec![None; levels];
        let mut masks = vec![None; levels];
        let mut dec_in = vec![None; levels];
        let mut dec_act = vec![None; levels];
        for l in (0..levels).rev() {
            let u = ops::leaky_relu(&self.conv(&h, self.up[l]), slope);
            let mut upsampled = ops::upsample2(&u);
            if let Some(rng) = dropout.as_deref_mut() {
                let keep = 1.0 / (1.0 - self.cfg.dropout_rate);
                let mask: Vec<f64> = (0..upsampled.data().len())
                    .map(|_| {
                        if rng.random::<f64>() < self.cfg.dropout_rate {
                            0.0
                        } else {
                            keep
                        }
                    })
                    .collect();
                upsampled = ops::apply_mask(&upsampled, &mask);
                masks[l] = Some(mask);
            }
            let cat = Tensor::concat_channels(&upsampled, &enc_act[l]);
            let d = ops::leaky_relu(&self.conv(&cat, self.dec[l]), slope);
            up_in[l] = Some(h);
            up_act[l] = Some(u);
            dec_in[l] = Some(cat);
            h = d.clone();
            dec_act[l] = Some(d);
        }
        let y = self.conv(&h, self.out);
        let unwrap = |v: Vec<Option<Tensor>>| v.into_iter().map(Option::unwrap).collect();
        Ok((
            y,
            GeneratorCache {
                enc_in,
                enc_act,
                bott_in,
                bott_act,
                up_in: unwrap(up_in),
                up_act: unwrap(up_act),
                masks,
                dec_in: unwrap(dec_in),
                dec_act: unwrap(dec_act),
                out_in: h,
            },
        ))
    }

    /// Parameter gradients given dLoss/dOutput.
    pub fn backward(&self, cache: &GeneratorCache, grad_out: &Tensor) -> Grads {
        let k = self.cfg.kernel;
        let slope = self.cfg.leaky_slope;
        let levels = self.cfg.depth - 1;
        let mut grads = self.graph.zero_grads();
        let conv_back = |grads: &mut Grads, x: &Tensor, c: Conv, g: &Tensor, need: bool| {
            let (gx, gw, gb) = ops::conv3d_backward(x, self.graph.values(c.weight), g, k, need);
            grads.add(c.weight, &gw);
            grads.add(c.bias, &gb);
            gx
        };

        let mut gh = conv_back(&mut grads, &cache.out_in, self.out, grad_out, true).unwrap();
        let mut skip_grads = vec![None; levels];
        for l in 0..levels {
            let gd = ops::leaky_relu_backward(&cache.dec_act[l], &gh, slope);
            let gcat = conv_back(&mut grads, &cache.dec_in[l], self.dec[l], &gd, true).unwrap();
            let (mut gup, gskip) = gcat.split_channels(self.cfg.filters(l));
            if let Some(mask) = &cache.masks[l] {
                gup = ops::apply_mask(&gup, mask);
            }
            let gu =
                ops::leaky_relu_backward(&cache.up_act[l], &ops::upsample2_backward(&gup), slope);
            gh = conv_back(&mut grads, &cache.up_in[l], self.up[l], &gu, true).unwrap();
            skip_grads[l] = Some(gskip);
        }
        let gb = ops::leaky_relu_backward(&cache.bott_act, &gh, slope);
        gh = conv_back(&mut grads, &cache.bott_in, self.bottleneck, &gb, true).unwrap();
        for l in (0..levels).rev() {
            let mut ga = ops::avg_pool2_backward(&gh, cache.enc_act[l].shape());
            ga.add_assign(skip_grads[l].as_ref().unwrap());
            let ga = ops::leaky_relu_backward(&cache.enc_act[l], &ga, slope);
            if let Some(g) = conv_back(&mut grads, &cache.enc_in[l], self.enc[l], &ga, l > 0) {
                gh = g;
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(in_channels: usize, depth: usize) -> GeneratorConfig {
        GeneratorConfig {
            in_channels,
            base_filters: 2,
            depth,
            ..GeneratorConfig::default()
        }
    }

    fn input(c: usize, n: usize) -> Tensor {
        let len = c * n * n * n;
        Tensor::from_vec(
            [1, c, n, n, n],
            (0..len).map(|i| ((i * 37) % 101) as f64 / 101.0).collect(),
        )
    }

    #[test]
    fn output_matches_input_grid() {
        for (c, depth, n) in [(4, 3, 8), (5, 3, 8), (4, 2, 6), (4, 4, 16)] {
            let g = build_generator(&small(c, depth), 1).unwrap();
            let y = g.forward(&input(c, n), None).unwrap();
            assert_eq!(y.shape(), [1, 1, n, n, n]);
        }
    }

    #[test]
    fn rejects_bad_dims_and_channels() {
        let g = build_generator(&small(4, 3), 1).unwrap();
        assert!(matches!(g.forward(&input(4, 6), None), Err(Error::Dims(_))));
        assert!(matches!(
            g.forward(&input(5, 8), None),
            Err(Error::Channels { .. })
        ));
        assert!(build_generator(&small(4, 1), 1).is_err());
    }

    #[test]
    fn identical_builds() {
        let a = build_generator(&small(4, 3), 9).unwrap();
        let b = build_generator(&small(4, 3), 9).unwrap();
        assert_eq!(a.graph(), b.graph());
        let c = build_generator(&small(4, 3), 10).unwrap();
        assert_ne!(a.graph(), c.graph());
    }

    #[test]
    fn dropout_is_the_noise_source() {
        let g = build_generator(&small(4, 3), 3).unwrap();
        let x = input(4, 8);
        assert_eq!(g.forward(&x, None).unwrap(), g.forward(&x, None).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = g.forward(&x, Some(&mut rng)).unwrap();
        let b = g.forward(&x, Some(&mut rng)).unwrap();
        let diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p - q).abs())
            .fold(0.0, f64::max);
        assert!(diff > 0.0);
    }

    #[test]
    fn backward_matches_finite_difference() {
        let g = build_generator(&small(4, 3), 5).unwrap();
        let x = input(4, 8);
        let target: Vec<f64> = (0..512).map(|i| (i as f64 * 0.01).sin()).collect();
        // Loss = 0.5 * ||y - t||^2
        let loss = |gen: &Generator| -> f64 {
            let y = gen.forward(&x, None).unwrap();
            y.data()
                .iter()
                .zip(&target)
                .map(|(a, b)| 0.5 * (a - b).powi(2))
                .sum()
        };
        let (y, cache) = g.forward_cached(&x, None).unwrap();
        let gy: Vec<f64> = y.data().iter().zip(&target).map(|(a, b)| a - b).collect();
        let grads = g.backward(&cache, &Tensor::from_vec(y.shape(), gy));
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let dir = Grads::random_direction(g.graph(), &mut rng);
            let h = 1e-6;
            let plus = g.with_graph(g.graph().shifted(&dir, h)).unwrap();
            let minus = g.with_graph(g.graph().shifted(&dir, -h)).unwrap();
            let fd = (loss(&plus) - loss(&minus)) / (2.0 * h);
            let an = grads.dot(&dir);
            assert!(
                (fd - an).abs() <= 1e-5 * an.abs().max(fd.abs()),
                "fd {fd} vs {an}"
            );
        }
    }
}

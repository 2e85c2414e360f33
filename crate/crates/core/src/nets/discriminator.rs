//! 3D patch discriminator.
//!
//! The (condition, candidate) volume is cut into non-overlapping patches and
//! every patch is classified on its own by four Conv3D-BatchNorm-LeakyReLU-
//! AvgPool stages followed by a dense layer and a two-way softmax. Only the
//! batch-norm statistics (in training mode) are shared between patches.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::ops::{self, BatchNormCache};
use super::params::{ForwardSignature, Grads, ParamGraph};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::volume::PatchGrid;

pub const STAGE_COUNT: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DiscriminatorConfig {
    /// Condition channels plus one candidate channel.
    pub in_channels: usize,
    /// Patch extent as (l, w, h) along (x, y, z).
    pub patch_dims: [usize; 3],
    pub base_filters: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    /// When set, stages stop halving once a patch axis can no longer be
    /// halved, instead of rejecting patches smaller than 16 voxels.
    pub allow_reduced_downsampling: bool,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        Self {
            in_channels: 5,
            patch_dims: [16, 16, 16],
            base_filters: 8,
            kernel: 3,
            leaky_slope: 0.2,
            allow_reduced_downsampling: false,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl DiscriminatorConfig {
    /// Which of the four stages halve the patch.
    pub fn downsampling_schedule(&self) -> Result<[bool; STAGE_COUNT]> {
        let full = 1 << STAGE_COUNT;
        if self.patch_dims.iter().all(|&p| p % full == 0) {
            return Ok([true; STAGE_COUNT]);
        }
        if !self.allow_reduced_downsampling {
            return Err(Error::Config(format!(
                "patch {:?} cannot be halved {STAGE_COUNT} times (each axis must be a multiple of {full}); \
                 enlarge the patches or enable allow_reduced_downsampling",
                self.patch_dims
            )));
        }
        let mut dims = self.patch_dims;
        let mut schedule = [false; STAGE_COUNT];
        for s in schedule.iter_mut() {
            if dims.iter().all(|&d| d >= 2 && d % 2 == 0) {
                *s = true;
                dims.iter_mut().for_each(|d| *d /= 2);
            }
        }
        Ok(schedule)
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels < 2 {
            return Err(Error::Config(
                "discriminator needs condition + candidate channels".into(),
            ));
        }
        if self.base_filters == 0 || self.kernel.is_multiple_of(2) {
            return Err(Error::Config(
                "discriminator filters must be positive and kernel odd".into(),
            ));
        }
        if self.patch_dims.contains(&0) {
            return Err(Error::Config("patch dims must be positive".into()));
        }
        self.downsampling_schedule().map(|_| ())
    }

    fn final_voxels(&self) -> usize {
        let schedule = self.downsampling_schedule().expect("validated");
        let halvings = schedule.iter().filter(|&&s| s).count();
        self.patch_dims.iter().map(|&p| p >> halvings).product()
    }
}

#[derive(Debug, Clone, Copy)]
struct Stage {
    conv: usize,
    gamma: usize,
    beta: usize,
    running_mean: usize,
    running_var: usize,
    cout: usize,
    downsample: bool,
}

#[derive(Debug, Clone)]
pub struct Discriminator {
    cfg: DiscriminatorConfig,
    graph: ParamGraph,
    stages: Vec<Stage>,
    fc_weight: usize,
    fc_bias: usize,
}

#[derive(Debug, Clone)]
struct StageCache {
    input: Tensor,
    bn: BatchNormCache,
    act: Tensor,
}

#[derive(Debug, Clone)]
pub struct DiscriminatorCache {
    input_shape: [usize; 5],
    grid: PatchGrid,
    stages: Vec<StageCache>,
    fc_in: Vec<f64>,
    probs: Vec<f64>,
}

impl DiscriminatorCache {
    pub fn probs(&self) -> &[f64] {
        &self.probs
    }
}

pub fn build_patch_discriminator(cfg: &DiscriminatorConfig, seed: u64) -> Result<Discriminator> {
    Discriminator::new(cfg.clone(), seed)
}

impl Discriminator {
    pub fn new(cfg: DiscriminatorConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let schedule = cfg.downsampling_schedule()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut graph = ParamGraph::new(ForwardSignature {
            in_channels: cfg.in_channels,
            out_channels: 2,
            per_patch: true,
        });
        let k = cfg.kernel;
        let gain = 2.0 / (1.0 + cfg.leaky_slope * cfg.leaky_slope);
        let mut cin = cfg.in_channels;
        let mut stages = Vec::with_capacity(STAGE_COUNT);
        for (s, &downsample) in schedule.iter().enumerate() {
            let cout = cfg.base_filters << s;
            let std = (gain / (cin * k * k * k) as f64).sqrt();
            let conv = graph.push_normal(
                format!("stage{s}.conv.weight"),
                vec![cout, cin, k, k, k],
                std,
                &mut rng,
            );
            let gamma = graph.push_const(format!("stage{s}.bn.gamma"), vec![cout], 1.0, true);
            let beta = graph.push_const(format!("stage{s}.bn.beta"), vec![cout], 0.0, true);
            let running_mean =
                graph.push_const(format!("stage{s}.bn.running_mean"), vec![cout], 0.0, false);
            let running_var =
                graph.push_const(format!("stage{s}.bn.running_var"), vec![cout], 1.0, false);
            stages.push(Stage {
                conv,
                gamma,
                beta,
                running_mean,
                running_var,
                cout,
                downsample,
            });
            cin = cout;
        }
        let fin = cin * cfg.final_voxels();
        let fc_weight = graph.push_normal(
            "fc.weight".into(),
            vec![2, fin],
            (1.0 / fin as f64).sqrt(),
            &mut rng,
        );
        let fc_bias = graph.push_const("fc.bias".into(), vec![2], 0.0, true);
        Ok(Self {
            cfg,
            graph,
            stages,
            fc_weight,
            fc_bias,
        })
    }

    pub fn config(&self) -> &DiscriminatorConfig {
        &self.cfg
    }

    pub fn graph(&self) -> &ParamGraph {
        &self.graph
    }

    pub fn graph_mut(&mut self) -> &mut ParamGraph {
        &mut self.graph
    }

    pub fn with_graph(&self, graph: ParamGraph) -> Result<Self> {
        if !graph.same_layout(&self.graph) {
            return Err(Error::Checkpoint(
                "discriminator parameter layout mismatch".into(),
            ));
        }
        Ok(Self {
            graph,
            ..self.clone()
        })
    }

    /// Patch layout for a volume of the given dims.
    pub fn patch_grid(&self, dims: [usize; 3]) -> Result<PatchGrid> {
        let p = self.cfg.patch_dims;
        if (0..3).any(|a| !dims[a].is_multiple_of(p[a])) {
            return Err(Error::Dims(format!(
                "volume {dims:?} not divisible by patch {p:?}"
            )));
        }
        PatchGrid::new(dims, p, p)
    }

    /// Per-patch probability of "real" for every batch item, patches of
    /// item 0 first. Running statistics are used for batch norm.
    pub fn forward(&self, input: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward_cached(input, false)?.1.probs)
    }

    /// With `training` set, batch norm uses the statistics of this batch of
    /// patches; call [`Discriminator::update_running_stats`] to fold them
    /// into the running averages.
    pub fn forward_cached(
        &self,
        input: &Tensor,
        training: bool,
    ) -> Result<(Vec<f64>, DiscriminatorCache)> {
        if input.channels() != self.cfg.in_channels {
            return Err(Error::Channels {
                expected: self.cfg.in_channels,
                found: input.channels(),
            });
        }
        let dims = input.spatial_dims();
        let grid = self.patch_grid(dims)?;
        let patches = to_patches(input, &grid);
        let slope = self.cfg.leaky_slope;
        let mut h = patches;
        let mut caches = Vec::with_capacity(STAGE_COUNT);
        for st in &self.stages {
            let conv = ops::conv3d(
                &h,
                self.graph.values(st.conv),
                &[],
                st.cout,
                self.cfg.kernel,
            );
            let (bn, bn_cache) = ops::batch_norm(
                &conv,
                self.graph.values(st.gamma),
                self.graph.values(st.beta),
                (
                    self.graph.values(st.running_mean),
                    self.graph.values(st.running_var),
                ),
                self.cfg.bn_eps,
                training,
            );
            let act = ops::leaky_relu(&bn, slope);
            let next = if st.downsample {
                ops::avg_pool2(&act)
            } else {
                act.clone()
            };
            caches.push(StageCache {
                input: h,
                bn: bn_cache,
                act,
            });
            h = next;
        }
        let rows = h.batch();
        let fc_in = h.into_data();
        let logits = ops::linear(
            &fc_in,
            rows,
            self.graph.values(self.fc_weight),
            self.graph.values(self.fc_bias),
            2,
        );
        let probs: Vec<f64> = logits
            .chunks_exact(2)
            .map(|z| ops::softmax2(z[0], z[1]))
            .collect();
        Ok((
            probs.clone(),
            DiscriminatorCache {
                input_shape: input.shape(),
                grid,
                stages: caches,
                fc_in,
                probs,
            },
        ))
    }

    pub fn update_running_stats(&mut self, cache: &DiscriminatorCache) {
        let m = self.cfg.bn_momentum;
        for (st, sc) in self.stages.iter().zip(&cache.stages) {
            if !sc.bn.training {
                continue;
            }
            for (i, r) in [
                (st.running_mean, &sc.bn.batch_mean),
                (st.running_var, &sc.bn.batch_var_unbiased),
            ] {
                for (v, b) in self.graph.blocks[i].values.iter_mut().zip(r) {
                    *v = (1.0 - m) * *v + m * b;
                }
            }
        }
    }

    /// Back-propagates dLoss/dProb(real) per patch. Returns parameter
    /// gradients and, if requested, the gradient w.r.t. the full input volume.
    pub fn backward(
        &self,
        cache: &DiscriminatorCache,
        grad_probs: &[f64],
        need_input: bool,
    ) -> (Grads, Option<Tensor>) {
        let mut grads = self.graph.zero_grads();
        let rows = cache.probs.len();
        // p = softmax(z)[1] = sigmoid(z1 - z0)
        let mut glogits = vec![0.0; 2 * rows];
        for (r, (&p, &g)) in cache.probs.iter().zip(grad_probs).enumerate() {
            let d = g * p * (1.0 - p);
            glogits[2 * r] = -d;
            glogits[2 * r + 1] = d;
        }
        let (gfc, gw, gb) = ops::linear_backward(
            &cache.fc_in,
            rows,
            self.graph.values(self.fc_weight),
            &glogits,
            2,
        );
        grads.add(self.fc_weight, &gw);
        grads.add(self.fc_bias, &gb);

        let last = cache.stages.last().unwrap();
        let mut shape = last.act.shape();
        if self.stages.last().unwrap().downsample {
            shape[2] /= 2;
            shape[3] /= 2;
            shape[4] /= 2;
        }
        let mut gh = Tensor::from_vec(shape, gfc);
        let slope = self.cfg.leaky_slope;
        for (i, (st, sc)) in self.stages.iter().zip(&cache.stages).enumerate().rev() {
            let gact = if st.downsample {
                ops::avg_pool2_backward(&gh, sc.act.shape())
            } else {
                gh
            };
            let gbn = ops::leaky_relu_backward(&sc.act, &gact, slope);
            let (gconv, ggamma, gbeta) =
                ops::batch_norm_backward(&sc.bn, self.graph.values(st.gamma), &gbn);
            grads.add(st.gamma, &ggamma);
            grads.add(st.beta, &gbeta);
            let need = i > 0 || need_input;
            let (gx, gw, _) = ops::conv3d_backward(
                &sc.input,
                self.graph.values(st.conv),
                &gconv,
                self.cfg.kernel,
                need,
            );
            grads.add(st.conv, &gw);
            gh = gx.unwrap_or_else(|| Tensor::zeros([0; 5]));
        }
        let gin = need_input.then(|| from_patches(&gh, &cache.grid, cache.input_shape));
        (grads, gin)
    }
}

/// Rearranges `[n, c, z, y, x]` into `[n * P, c, h, w, l]` patch batches.
fn to_patches(x: &Tensor, grid: &PatchGrid) -> Tensor {
    let [l, w, h] = grid.patch_dims;
    let dims = x.spatial_dims();
    let (nb, c) = (x.batch(), x.channels());
    let mut out = Tensor::zeros([nb * grid.count(), c, h, w, l]);
    for n in 0..nb {
        for p in 0..grid.count() {
            for ch in 0..c {
                let src = x.plane(n, ch);
                let dst = out.plane_mut(n * grid.count() + p, ch);
                grid.for_each_voxel(p, dims, |k, i| dst[k] = src[i]);
            }
        }
    }
    out
}

fn from_patches(patches: &Tensor, grid: &PatchGrid, shape: [usize; 5]) -> Tensor {
    let mut out = Tensor::zeros(shape);
    let dims = out.spatial_dims();
    for n in 0..shape[0] {
        for p in 0..grid.count() {
            for ch in 0..shape[1] {
                let src = patches.plane(n * grid.count() + p, ch).to_vec();
                let dst = out.plane_mut(n, ch);
                grid.for_each_voxel(p, dims, |k, i| dst[i] += src[k]);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(patch: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            patch_dims: [patch; 3],
            base_filters: 2,
            ..DiscriminatorConfig::default()
        }
    }

    fn input(n: usize) -> Tensor {
        let len = 5 * n * n * n;
        Tensor::from_vec(
            [1, 5, n, n, n],
            (0..len).map(|i| ((i * 53) % 97) as f64 / 97.0).collect(),
        )
    }

    #[test]
    fn eight_patches_on_32_cube() {
        let d = build_patch_discriminator(&cfg(16), 0).unwrap();
        let p = d.forward(&input(32)).unwrap();
        assert_eq!(p.len(), 8);
        assert!(p.iter().all(|&x| (0.0..=1.0).contains(&x)));
    }

    #[test]
    fn small_patches_need_fallback() {
        let err = build_patch_discriminator(&cfg(8), 0).unwrap_err();
        assert!(err.to_string().contains("allow_reduced_downsampling"));
        let mut c = cfg(8);
        c.allow_reduced_downsampling = true;
        assert_eq!(
            c.downsampling_schedule().unwrap(),
            [true, true, true, false]
        );
        let d = build_patch_discriminator(&c, 0).unwrap();
        assert_eq!(d.forward(&input(16)).unwrap().len(), 8);
    }

    #[test]
    fn rejects_indivisible_volume() {
        let d = build_patch_discriminator(&cfg(16), 0).unwrap();
        assert!(matches!(d.forward(&input(24)), Err(Error::Dims(_))));
    }

    #[test]
    fn patch_round_trip() {
        let x = input(8);
        let grid = PatchGrid::new([8, 8, 8], [4, 4, 4], [4, 4, 4]).unwrap();
        let back = from_patches(&to_patches(&x, &grid), &grid, x.shape());
        assert_eq!(back, x);
    }

    #[test]
    fn backward_matches_finite_difference_in_training_mode() {
        let mut c = cfg(8);
        c.allow_reduced_downsampling = true;
        let d = build_patch_discriminator(&c, 4).unwrap();
        let x = input(16);
        let weights: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let loss = |dd: &Discriminator, xx: &Tensor| -> f64 {
            let (p, _) = dd.forward_cached(xx, true).unwrap();
            p.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let (_, cache) = d.forward_cached(&x, true).unwrap();
        let (grads, gin) = d.backward(&cache, &weights, true);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let h = 1e-6;
        let dir = Grads::random_direction(d.graph(), &mut rng);
        let fd = (loss(&d.with_graph(d.graph().shifted(&dir, h)).unwrap(), &x)
            - loss(&d.with_graph(d.graph().shifted(&dir, -h)).unwrap(), &x))
            / (2.0 * h);
        let an = grads.dot(&dir);
        assert!(
            (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()),
            "{fd} vs {an}"
        );

        let gin = gin.unwrap();
        let xdir: Vec<f64> = (0..x.data().len())
            .map(|i| ((i * 17) % 13) as f64 / 13.0 - 0.5)
            .collect();
        let shift = |s: f64| {
            Tensor::from_vec(
                x.shape(),
                x.data().iter().zip(&xdir).map(|(a, b)| a + s * b).collect(),
            )
        };
        let fd = (loss(&d, &shift(h)) - loss(&d, &shift(-h))) / (2.0 * h);
        let an: f64 = gin.data().iter().zip(&xdir).map(|(a, b)| a * b).sum();
        assert!(
            (fd - an).abs() <= 1e-5 * fd.abs().max(an.abs()),
            "{fd} vs {an}"
        );
    }
}

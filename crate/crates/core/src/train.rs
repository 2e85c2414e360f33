//! Two-stage training: the sketcher maps the MRI channels to a preliminary
//! DVR map, the refiner maps (MRI, sketch) to the final map. Each stage is a
//! conditional GAN trained with one discriminator step followed by one
//! generator step per batch, using Adam.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, RngState, Stage};
use crate::config::Provenance;
use crate::error::{Error, Result};
use crate::eval::{self, DemyelinationParams};
use crate::losses::{
    self, AdversarialForm, EmptyRegionPolicy, L1Normalization, LossReport, LossWeights,
};
use crate::nets::{
    self, BaselineConfig, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, Grads,
    ParamGraph, Tensor, VoxelMlp,
};
use crate::phantom::PhantomSubject;
use crate::report::{self, EvaluationReport, SubjectEval};
use crate::volume::{DvrMap, MultimodalStack, Region};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_sketcher: f64,
    pub lr_refiner: f64,
    /// Learning rate of the voxel-wise baseline.
    pub lr_baseline: f64,
    pub adam: AdamConfig,
    pub epochs: usize,
    /// Subjects per batch.
    pub batch_size: usize,
    /// Set from the run configuration's global seed.
    #[serde(skip)]
    pub seed: u64,
    pub weights: LossWeights,
    /// Weight of the adversarial term in the generator objective.
    pub adversarial_weight: f64,
    /// Discriminator steps per generator step.
    pub d_steps_per_g: usize,
    pub adversarial_form: AdversarialForm,
    pub l1_normalization: L1Normalization,
    /// Multiply `lambda_r` by the voxel count `M` of a subject, cancelling
    /// the `1/M` factor of the region-weighted loss so that it has the
    /// magnitude of a sum of three region means.
    pub refiner_l1_voxel_scaling: bool,
    /// Early stopping patience in epochs; 0 disables early stopping.
    pub patience: usize,
    /// Fraction of the training subjects held out to monitor the L1 term.
    pub validation_fraction: f64,
    /// Initialise the generator's output bias at the mean training DVR.
    pub init_output_bias: bool,
    /// Start the refiner from the sketcher's weights (sketch-channel
    /// weights zero) and its discriminator from the sketcher's, when the
    /// layouts allow it.
    pub refiner_warm_start: bool,
    pub sketcher: GeneratorConfig,
    pub refiner: GeneratorConfig,
    pub discriminator: DiscriminatorConfig,
    pub baseline: BaselineConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_sketcher: 1e-4,
            lr_refiner: 5e-5,
            lr_baseline: 1e-3,
            adam: AdamConfig::default(),
            epochs: 200,
            batch_size: 1,
            seed: 2019,
            weights: LossWeights::default(),
            adversarial_weight: 1.0,
            d_steps_per_g: 1,
            adversarial_form: AdversarialForm::Minimax,
            l1_normalization: L1Normalization::VoxelMean,
            refiner_l1_voxel_scaling: true,
            patience: 20,
            validation_fraction: 0.1,
            init_output_bias: true,
            refiner_warm_start: true,
            sketcher: GeneratorConfig::sketcher(),
            refiner: GeneratorConfig::refiner(),
            discriminator: DiscriminatorConfig::default(),
            baseline: BaselineConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, lr) in [
            ("lr_sketcher", self.lr_sketcher),
            ("lr_refiner", self.lr_refiner),
            ("lr_baseline", self.lr_baseline),
        ] {
            if !(lr.is_finite() && lr > 0.0) {
                return Err(Error::Config(format!("{name} must be > 0, got {lr}")));
            }
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.d_steps_per_g == 0 {
            return Err(Error::Config("d_steps_per_g must be >= 1".into()));
        }
        let a = &self.adam;
        if !((0.0..1.0).contains(&a.beta1) && (0.0..1.0).contains(&a.beta2) && a.epsilon > 0.0) {
            return Err(Error::Config(
                "adam decay rates must lie in [0, 1) and epsilon be > 0".into(),
            ));
        }
        if !(0.0..0.5).contains(&self.validation_fraction) {
            return Err(Error::Config(
                "validation_fraction must lie in [0, 0.5)".into(),
            ));
        }
        if !(self.adversarial_weight.is_finite() && self.adversarial_weight >= 0.0) {
            return Err(Error::Config(
                "adversarial_weight must be finite and >= 0".into(),
            ));
        }
        self.weights.validate()?;
        self.sketcher.validate()?;
        self.refiner.validate()?;
        self.discriminator.validate()?;
        if self.sketcher.in_channels != 4 {
            return Err(Error::Channels {
                expected: 4,
                found: self.sketcher.in_channels,
            });
        }
        if self.refiner.in_channels != 5 {
            return Err(Error::Channels {
                expected: 5,
                found: self.refiner.in_channels,
            });
        }
        if self.discriminator.in_channels != 5 {
            return Err(Error::Channels {
                expected: 5,
                found: self.discriminator.in_channels,
            });
        }
        Ok(())
    }
}

/// Adam state for one parameter graph.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    lr: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(graph: &ParamGraph, lr: f64, cfg: AdamConfig) -> Self {
        let zeros: Vec<Vec<f64>> = graph
            .blocks
            .iter()
            .map(|b| vec![0.0; b.values.len()])
            .collect();
        Self {
            cfg,
            lr,
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn step(&mut self, graph: &mut ParamGraph, grads: &Grads) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.cfg.beta1.powi(t);
        let c2 = 1.0 - self.cfg.beta2.powi(t);
        let AdamConfig {
            beta1,
            beta2,
            epsilon,
        } = self.cfg;
        for (((block, g), m), v) in graph
            .blocks
            .iter_mut()
            .zip(&grads.blocks)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            if !block.trainable {
                continue;
            }
            for (((p, &g), m), v) in block
                .values
                .iter_mut()
                .zip(g)
                .zip(m.iter_mut())
                .zip(v.iter_mut())
            {
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + epsilon);
            }
        }
    }
}

/// Training subject reduced to what the loops consume.
struct Sample {
    input: Tensor,
    condition: Vec<f64>,
    target: Vec<f64>,
    labels: Vec<Region>,
}

fn check_data(data: &[PhantomSubject]) -> Result<[usize; 3]> {
    let first = data
        .first()
        .ok_or_else(|| Error::InsufficientSubjects("training needs at least one subject".into()))?;
    let dims = first.stack.dims();
    if let Some(s) = data.iter().find(|s| s.stack.dims() != dims) {
        return Err(Error::Dims(format!(
            "subject {} has dims {:?}, expected {dims:?}",
            s.id,
            s.stack.dims()
        )));
    }
    Ok(dims)
}

fn sample(subject: &PhantomSubject, extra: Option<&DvrMap>) -> Result<Sample> {
    let extra: Vec<&DvrMap> = extra.into_iter().collect();
    Ok(Sample {
        input: nets::stack_tensor(&subject.stack, &extra)?,
        condition: subject.stack.to_f64(),
        target: subject.dvr.to_f64(),
        labels: subject.masks.labels(),
    })
}

fn d_input(s: &Sample, candidate: &[f64]) -> Tensor {
    let [_, _, nz, ny, nx] = s.input.shape();
    let mut data = s.condition.clone();
    data.extend_from_slice(candidate);
    Tensor::from_vec([1, 5, nz, ny, nx], data)
}

/// Splits training data into fitting and validation subjects.
fn split_validation(n: usize, fraction: f64, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let n_val = ((n as f64) * fraction).round() as usize;
    let n_val = if n - n_val == 0 { 0 } else { n_val };
    let val = order.split_off(n - n_val);
    (order, val)
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum L1Kind {
    Sketch,
    Refine,
}

/// Reconstruction term and its gradient for one batch.
fn reconstruction(
    kind: L1Kind,
    cfg: &TrainConfig,
    preds: &[&[f64]],
    batch: &[&Sample],
) -> Result<(f64, Option<[f64; 3]>, Vec<Vec<f64>>, f64)> {
    let targets: Vec<&[f64]> = batch.iter().map(|s| s.target.as_slice()).collect();
    match kind {
        L1Kind::Sketch => {
            let (l, g) = losses::l1_sketcher_grad(preds, &targets, cfg.l1_normalization)?;
            Ok((l, None, g, cfg.weights.lambda_s))
        }
        L1Kind::Refine => {
            let labels: Vec<&[Region]> = batch.iter().map(|s| s.labels.as_slice()).collect();
            let (w, g) = losses::weighted_l1_refiner_grad(
                preds,
                &targets,
                &labels,
                EmptyRegionPolicy::DropTerm,
            )?;
            let lambda = if cfg.refiner_l1_voxel_scaling {
                cfg.weights.lambda_r * preds[0].len() as f64
            } else {
                cfg.weights.lambda_r
            };
            Ok((w.total, Some(w.per_region), g, lambda))
        }
    }
}

fn set_output_bias(graph: &mut ParamGraph, samples: &[Sample], fit: &[usize]) {
    let (sum, count) = fit
        .iter()
        .map(|&i| &samples[i].target)
        .fold((0.0, 0usize), |(s, c), t| {
            (s + t.iter().sum::<f64>(), c + t.len())
        });
    if let Some(b) = graph.block_index("out.bias") {
        graph.blocks[b].values.fill(sum / count.max(1) as f64);
    }
}

/// Outcome of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// One tab-separated line per epoch run.
    pub log: Vec<String>,
    /// Validation L1 per epoch (empty without validation subjects).
    pub validation: Vec<f64>,
}

struct GanRun<'a> {
    cfg: &'a TrainConfig,
    init_bias: bool,
    kind: L1Kind,
    lr: f64,
    generator: Generator,
    discriminator: Discriminator,
}

impl GanRun<'_> {
    fn run(
        mut self,
        samples: &[Sample],
        mut rng: ChaCha8Rng,
        config_text: String,
        stage: Stage,
    ) -> Result<TrainOutcome> {
        let cfg = self.cfg;
        let (fit, val) = split_validation(samples.len(), cfg.validation_fraction, &mut rng);
        if self.init_bias {
            set_output_bias(self.generator.graph_mut(), samples, &fit);
        }
        let mut g_opt = Adam::new(self.generator.graph(), self.lr, cfg.adam);
        let mut d_opt = Adam::new(self.discriminator.graph(), self.lr, cfg.adam);
        let mut log = Vec::new();
        let mut validation = Vec::new();
        let mut best: Option<(f64, Generator, Discriminator)> = None;
        let mut since_best = 0;
        let start = Instant::now();
        let mut order = fit.clone();
        for epoch in 1..=cfg.epochs {
            order.shuffle(&mut rng);
            let mut sums = [0.0; 3];
            let mut regions = [0.0; 3];
            let mut batches = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
                let (d_loss, adv, l1, per_region) =
                    self.step(epoch, &batch, &mut g_opt, &mut d_opt, &mut rng)?;
                let report = LossReport::new(d_loss, adv, l1, 0.0, per_region);
                if !report.is_finite() {
                    return Err(Error::Diverged {
                        epoch,
                        detail: format!("non-finite losses: {}", report.log_fields()),
                    });
                }
                sums[0] += d_loss;
                sums[1] += adv;
                sums[2] += l1;
                if let Some(r) = per_region {
                    regions.iter_mut().zip(r).for_each(|(a, b)| *a += b);
                }
                batches += 1.0;
            }
            let per_region = (self.kind == L1Kind::Refine).then(|| regions.map(|r| r / batches));
            let report = LossReport::new(
                sums[0] / batches,
                sums[1] / batches,
                sums[2] / batches,
                1.0,
                per_region,
            );
            log.push(format!(
                "{epoch}\t{}\t{:.3}",
                report.log_fields(),
                start.elapsed().as_secs_f64()
            ));
            if val.is_empty() {
                continue;
            }
            let v = self.validation_l1(samples, &val)?;
            validation.push(v);
            if best.as_ref().is_none_or(|(b, _, _)| v < *b) {
                best = Some((v, self.generator.clone(), self.discriminator.clone()));
                since_best = 0;
            } else {
                since_best += 1;
                if cfg.patience > 0 && since_best >= cfg.patience {
                    break;
                }
            }
        }
        let epochs_run = log.len();
        if let Some((_, g, d)) = best {
            self.generator = g;
            self.discriminator = d;
        }
        Ok(TrainOutcome {
            checkpoint: Checkpoint {
                stage,
                config_text,
                epochs_run,
                generator: Some(self.generator.config().clone()),
                discriminator: Some(self.discriminator.config().clone()),
                baseline: None,
                rng: RngState::capture(&rng),
                graphs: vec![
                    self.generator.graph().clone(),
                    self.discriminator.graph().clone(),
                ],
            },
            log,
            validation,
        })
    }

    fn validation_l1(&self, samples: &[Sample], val: &[usize]) -> Result<f64> {
        let mut total = 0.0;
        for &i in val {
            let s = &samples[i];
            let pred = self.generator.forward(&s.input, None)?;
            let (l1, _, _, _) = reconstruction(self.kind, self.cfg, &[pred.data()], &[s])?;
            total += l1;
        }
        Ok(total / val.len() as f64)
    }

    /// One discriminator update (repeated `d_steps_per_g` times) followed by
    /// one generator update. Returns D loss, G adversarial, L1 and the
    /// per-region breakdown, all averaged over the batch.
    fn step(
        &mut self,
        epoch: usize,
        batch: &[&Sample],
        g_opt: &mut Adam,
        d_opt: &mut Adam,
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, f64, f64, Option<[f64; 3]>)> {
        let n = batch.len() as f64;
        let mut fakes = Vec::with_capacity(batch.len());
        for s in batch {
            fakes.push(self.generator.forward_cached(&s.input, Some(&mut *rng))?);
        }

        let mut d_loss = 0.0;
        for _ in 0..self.cfg.d_steps_per_g {
            d_loss = 0.0;
            let mut grads = self.discriminator.graph().zero_grads();
            let mut caches = Vec::new();
            for (s, (fake, _)) in batch.iter().zip(&fakes) {
                let (pr, cr) = self
                    .discriminator
                    .forward_cached(&d_input(s, &s.target), true)?;
                let (pf, cf) = self
                    .discriminator
                    .forward_cached(&d_input(s, fake.data()), true)?;
                let (l, gr, gf) = losses::patch_discriminator_loss_grad(&pr, &pf)?;
                d_loss += l / n;
                grads.accumulate(&self.discriminator.backward(&cr, &gr, false).0);
                grads.accumulate(&self.discriminator.backward(&cf, &gf, false).0);
                caches.push(cr);
                caches.push(cf);
            }
            grads.scale(1.0 / n);
            d_opt.step(self.discriminator.graph_mut(), &grads);
            for c in &caches {
                self.discriminator.update_running_stats(c);
            }
        }

        let mut adv = 0.0;
        let mut d_grads = Vec::with_capacity(batch.len());
        for (s, (fake, _)) in batch.iter().zip(&fakes) {
            let (pf, cf) = self
                .discriminator
                .forward_cached(&d_input(s, fake.data()), true)?;
            let (a, ga) = losses::generator_adversarial_loss_grad(&pf, self.cfg.adversarial_form);
            adv += a / n;
            let gin = self
                .discriminator
                .backward(&cf, &ga, true)
                .1
                .expect("input gradient requested");
            d_grads.push(gin.plane(0, 4).to_vec());
        }
        let preds: Vec<&[f64]> = fakes.iter().map(|(f, _)| f.data()).collect();
        let (l1, per_region, l1_grads, lambda) =
            reconstruction(self.kind, self.cfg, &preds, batch)?;
        let mut grads = self.generator.graph().zero_grads();
        for (((fake, cache), dg), lg) in fakes.iter().zip(&d_grads).zip(&l1_grads) {
            let w = self.cfg.adversarial_weight / n;
            let data = dg.iter().zip(lg).map(|(a, b)| w * a + lambda * b).collect();
            let grad_out = Tensor::from_vec(fake.shape(), data);
            grads.accumulate(&self.generator.backward(cache, &grad_out));
        }
        if !grads.is_finite() {
            return Err(Error::Diverged {
                epoch,
                detail: "non-finite generator gradient".into(),
            });
        }
        g_opt.step(self.generator.graph_mut(), &grads);
        Ok((d_loss, adv, l1, per_region))
    }
}

/// Seeds for the networks and the training stream of one stage.
fn stage_seeds(seed: u64, stage: Stage) -> (u64, u64, u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stage as u64 + 1);
    use rand::RngCore;
    (rng.next_u64(), rng.next_u64(), rng.next_u64())
}

/// Trains the sketcher cGAN on `data`.
pub fn train_sketcher(
    data: &[PhantomSubject],
    cfg: &TrainConfig,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = check_data(data)?;
    cfg.sketcher.check_dims(dims)?;
    let (g_seed, d_seed, t_seed) = stage_seeds(cfg.seed, Stage::Sketcher);
    let run = GanRun {
        cfg,
        init_bias: cfg.init_output_bias,
        kind: L1Kind::Sketch,
        lr: cfg.lr_sketcher,
        generator: nets::build_generator(&cfg.sketcher, g_seed)?,
        discriminator: nets::build_patch_discriminator(&cfg.discriminator, d_seed)?,
    };
    run.discriminator.patch_grid(dims)?;
    let samples = data
        .iter()
        .map(|s| sample(s, None))
        .collect::<Result<Vec<_>>>()?;
    run.run(
        &samples,
        ChaCha8Rng::seed_from_u64(t_seed),
        config_text.to_string(),
        Stage::Sketcher,
    )
}

/// Copies the sketcher's weights into a refiner with the same layout apart
/// from the extra input channel, whose weights are zeroed, so that the
/// refiner starts out reproducing the sketch. Returns false (leaving the
/// refiner untouched) when the layouts differ.
pub fn warm_start_generator(refiner: &mut Generator, sketcher: &Generator) -> bool {
    let (rc, sc) = (refiner.config(), sketcher.config());
    let same = GeneratorConfig {
        in_channels: sc.in_channels,
        ..rc.clone()
    } == *sc;
    if !same || rc.in_channels != sc.in_channels + 1 {
        return false;
    }
    let k3 = rc.kernel.pow(3);
    let (cin_s, cin_r) = (sc.in_channels, rc.in_channels);
    let src = sketcher.graph();
    let dst = refiner.graph_mut();
    for (d, s) in dst.blocks.iter_mut().zip(&src.blocks) {
        if d.shape == s.shape {
            d.values.clone_from(&s.values);
        } else {
            let cout = d.shape[0];
            d.values.fill(0.0);
            for o in 0..cout {
                for c in 0..cin_s {
                    let from = (o * cin_s + c) * k3;
                    let to = (o * cin_r + c) * k3;
                    d.values[to..to + k3].copy_from_slice(&s.values[from..from + k3]);
                }
            }
        }
    }
    true
}

/// Trains the refiner cGAN on `(MRI, sketch)` inputs; the sketcher is only
/// evaluated, never updated.
pub fn train_refiner(
    data: &[PhantomSubject],
    sketcher: &Checkpoint,
    cfg: &TrainConfig,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let dims = check_data(data)?;
    let sketch_net = sketcher.generator()?;
    if sketch_net.config().in_channels != 4 {
        return Err(Error::Channels {
            expected: 4,
            found: sketch_net.config().in_channels,
        });
    }
    sketch_net.config().check_dims(dims)?;
    cfg.refiner.check_dims(dims)?;
    let (g_seed, d_seed, t_seed) = stage_seeds(cfg.seed, Stage::Refiner);
    let mut generator = nets::build_generator(&cfg.refiner, g_seed)?;
    let mut discriminator = nets::build_patch_discriminator(&cfg.discriminator, d_seed)?;
    let mut warm = false;
    if cfg.refiner_warm_start {
        warm = warm_start_generator(&mut generator, &sketch_net);
        if let Ok(d) = sketcher.discriminator() {
            if d.graph().same_layout(discriminator.graph()) {
                discriminator = d;
            }
        }
    }
    let run = GanRun {
        cfg,
        init_bias: cfg.init_output_bias && !warm,
        kind: L1Kind::Refine,
        lr: cfg.lr_refiner,
        generator,
        discriminator,
    };
    run.discriminator.patch_grid(dims)?;
    let samples = data
        .iter()
        .map(|s| {
            let sketch = nets::generator_forward(&sketch_net, &s.stack, &[], None)?;
            sample(s, Some(&sketch))
        })
        .collect::<Result<Vec<_>>>()?;
    run.run(
        &samples,
        ChaCha8Rng::seed_from_u64(t_seed),
        config_text.to_string(),
        Stage::Refiner,
    )
}

/// Trains the voxel-wise two-layer baseline with the sketcher's L1 term.
pub fn train_baseline(
    data: &[PhantomSubject],
    cfg: &TrainConfig,
    config_text: &str,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_data(data)?;
    let (g_seed, _, t_seed) = stage_seeds(cfg.seed, Stage::Baseline);
    let mut rng = ChaCha8Rng::seed_from_u64(t_seed);
    let mut net = VoxelMlp::new(cfg.baseline.clone(), g_seed)?;
    let samples = data
        .iter()
        .map(|s| sample(s, None))
        .collect::<Result<Vec<_>>>()?;
    if cfg.init_output_bias {
        let all: Vec<usize> = (0..samples.len()).collect();
        set_output_bias(net.graph_mut(), &samples, &all);
    }
    let mut opt = Adam::new(net.graph(), cfg.lr_baseline, cfg.adam);
    let mut log = Vec::new();
    let start = Instant::now();
    let mut order: Vec<usize> = (0..samples.len()).collect();
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &samples[i]).collect();
            let outs = batch
                .iter()
                .map(|s| net.forward_cached(&s.input))
                .collect::<Result<Vec<_>>>()?;
            let preds: Vec<&[f64]> = outs.iter().map(|(y, _)| y.data()).collect();
            let targets: Vec<&[f64]> = batch.iter().map(|s| s.target.as_slice()).collect();
            let (l1, gs) = losses::l1_sketcher_grad(&preds, &targets, cfg.l1_normalization)?;
            if !l1.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    detail: format!("baseline L1 = {l1}"),
                });
            }
            let mut grads = net.graph().zero_grads();
            for ((y, cache), g) in outs.iter().zip(gs) {
                grads.accumulate(&net.backward(cache, &Tensor::from_vec(y.shape(), g)));
            }
            opt.step(net.graph_mut(), &grads);
            total += l1;
            batches += 1.0;
        }
        log.push(format!(
            "{epoch}\t-\t-\t{:e}\t-\t-\t-\t{:.3}",
            total / batches,
            start.elapsed().as_secs_f64()
        ));
    }
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Baseline,
            config_text: config_text.to_string(),
            epochs_run: log.len(),
            generator: None,
            discriminator: None,
            baseline: Some(net.config().clone()),
            rng: RngState::capture(&rng),
            graphs: vec![net.graph().clone()],
        },
        log,
        validation: Vec::new(),
    })
}

/// Sketch and refined map of one subject.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub sketch: DvrMap,
    pub refined: DvrMap,
}

/// Deterministic two-stage forward pass (dropout off).
pub fn predict(
    sketcher: &Checkpoint,
    refiner: &Checkpoint,
    stack: &MultimodalStack,
) -> Result<Prediction> {
    let s = sketcher.generator()?;
    let r = refiner.generator()?;
    predict_with(&s, &r, stack)
}

pub fn predict_with(
    sketcher: &Generator,
    refiner: &Generator,
    stack: &MultimodalStack,
) -> Result<Prediction> {
    let sketch = nets::generator_forward(sketcher, stack, &[], None)?;
    let refined = nets::generator_forward(refiner, stack, &[&sketch], None)?;
    Ok(Prediction { sketch, refined })
}

pub fn predict_baseline(baseline: &Checkpoint, stack: &MultimodalStack) -> Result<DvrMap> {
    let net = baseline.baseline_net()?;
    let y = net.forward(&nets::stack_tensor(stack, &[])?)?;
    DvrMap::from_f64(stack.reference(), y.data())
}

/// Test subject indices of each fold; train indices are the complement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FoldPlan {
    pub k: usize,
    pub test: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn train(&self, fold: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = self
            .test
            .iter()
            .enumerate()
            .filter(|(f, _)| *f != fold)
            .flat_map(|(_, t)| t.clone())
            .collect();
        idx.sort_unstable();
        idx
    }
}

/// Seeded shuffled partition into `k` folds whose sizes differ by at most
/// one; the first `n mod k` folds get the extra subject.
pub fn make_folds(n_subjects: usize, k: usize, seed: u64) -> Result<FoldPlan> {
    if k < 2 {
        return Err(Error::Config(format!("k must be >= 2, got {k}")));
    }
    if n_subjects < k {
        return Err(Error::InsufficientSubjects(format!(
            "{n_subjects} subjects cannot fill {k} folds"
        )));
    }
    let mut order: Vec<usize> = (0..n_subjects).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let base = n_subjects / k;
    let extra = n_subjects % k;
    let mut test = Vec::with_capacity(k);
    let mut start = 0;
    for f in 0..k {
        let len = base + usize::from(f < extra);
        let mut t = order[start..start + len].to_vec();
        t.sort_unstable();
        test.push(t);
        start += len;
    }
    Ok(FoldPlan { k, test })
}

/// Held-out results of one subject in a fold.
#[derive(Debug, Clone)]
pub struct SubjectResult {
    pub mae_sketch: f64,
    pub mae_refined: f64,
    pub mae_baseline: f64,
    /// Lesion-region errors (patients only).
    pub lesion_mae_sketch: Option<f64>,
    pub lesion_mae_refined: Option<f64>,
    /// Refined prediction against the reference map.
    pub eval: SubjectEval,
}

#[derive(Debug, Clone)]
pub struct FoldReport {
    pub fold: usize,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
    pub subjects: Vec<SubjectResult>,
    pub sketcher_log: Vec<String>,
    pub refiner_log: Vec<String>,
}

fn mean_of(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, c) = v.fold((0.0, 0usize), |(s, c), x| (s + x, c + 1));
    (c > 0).then(|| s / c as f64)
}

impl FoldReport {
    pub fn mean_mae_sketch(&self) -> f64 {
        mean_of(self.subjects.iter().map(|s| s.mae_sketch)).unwrap_or(f64::NAN)
    }

    pub fn mean_mae_refined(&self) -> f64 {
        mean_of(self.subjects.iter().map(|s| s.mae_refined)).unwrap_or(f64::NAN)
    }

    pub fn mean_mae_baseline(&self) -> f64 {
        mean_of(self.subjects.iter().map(|s| s.mae_baseline)).unwrap_or(f64::NAN)
    }

    pub fn lesion_mae_sketch(&self) -> Option<f64> {
        mean_of(self.subjects.iter().filter_map(|s| s.lesion_mae_sketch))
    }

    pub fn lesion_mae_refined(&self) -> Option<f64> {
        mean_of(self.subjects.iter().filter_map(|s| s.lesion_mae_refined))
    }
}

/// Trains sketcher, refiner and baseline on `subjects`, recording logs.
pub struct TrainedModels {
    pub sketcher: TrainOutcome,
    pub refiner: TrainOutcome,
    pub baseline: TrainOutcome,
}

pub fn train_all(
    data: &[PhantomSubject],
    cfg: &TrainConfig,
    config_text: &str,
) -> Result<TrainedModels> {
    let sketcher = train_sketcher(data, cfg, config_text)?;
    let refiner = train_refiner(data, &sketcher.checkpoint, cfg, config_text)?;
    let baseline = train_baseline(data, cfg, config_text)?;
    Ok(TrainedModels {
        sketcher,
        refiner,
        baseline,
    })
}

/// Evaluates trained models on held-out subjects.
pub fn evaluate_subjects(
    models: &TrainedModels,
    subjects: &[&PhantomSubject],
    params: &DemyelinationParams,
) -> Result<Vec<SubjectResult>> {
    let s = models.sketcher.checkpoint.generator()?;
    let r = models.refiner.checkpoint.generator()?;
    let b = models.baseline.checkpoint.baseline_net()?;
    subjects
        .iter()
        .map(|subj| {
            let p = predict_with(&s, &r, &subj.stack)?;
            let base = DvrMap::from_f64(
                subj.stack.reference(),
                b.forward(&nets::stack_tensor(&subj.stack, &[])?)?.data(),
            )?;
            let truth = &subj.dvr;
            let lesion_mask = (subj.masks.count(Region::Lesion) > 0).then_some(&subj.masks.lesion);
            let lesion_mae = |pred: &DvrMap| {
                lesion_mask
                    .map(|m| eval::mean_absolute_error(pred, truth, Some(m)))
                    .transpose()
            };
            Ok(SubjectResult {
                mae_sketch: eval::mean_absolute_error(&p.sketch, truth, None)?,
                mae_refined: eval::mean_absolute_error(&p.refined, truth, None)?,
                mae_baseline: eval::mean_absolute_error(&base, truth, None)?,
                lesion_mae_sketch: lesion_mae(&p.sketch)?,
                lesion_mae_refined: lesion_mae(&p.refined)?,
                eval: report::evaluate_subject(
                    &subj.id,
                    subj.is_patient,
                    &subj.masks,
                    truth,
                    &p.refined,
                    params,
                )?
                .0,
            })
        })
        .collect()
}

/// K-fold cross-validation: per fold, trains all models on the training
/// subjects and evaluates them on the held-out ones. Fold `f` trains with
/// seed `cfg.seed + f`.
pub fn cross_validate(
    data: &[PhantomSubject],
    cfg: &TrainConfig,
    k: usize,
    params: &DemyelinationParams,
    config_text: &str,
) -> Result<Vec<FoldReport>> {
    cfg.validate()?;
    params.validate()?;
    let plan = make_folds(data.len(), k, cfg.seed)?;
    let mut reports = Vec::with_capacity(k);
    for (fold, test) in plan.test.iter().enumerate() {
        let train = plan.train(fold);
        let train_data: Vec<PhantomSubject> = train.iter().map(|&i| data[i].clone()).collect();
        let fold_cfg = TrainConfig {
            seed: cfg.seed + fold as u64,
            ..cfg.clone()
        };
        let models = train_all(&train_data, &fold_cfg, config_text)?;
        let held_out: Vec<&PhantomSubject> = test.iter().map(|&i| &data[i]).collect();
        let subjects = evaluate_subjects(&models, &held_out, params)?;
        reports.push(FoldReport {
            fold,
            train,
            test: test.clone(),
            subjects,
            sketcher_log: models.sketcher.log,
            refiner_log: models.refiner.log,
        });
    }
    Ok(reports)
}

/// Mean Dice over the patients among `subjects`.
pub fn mean_dice(subjects: &[SubjectResult]) -> Option<f64> {
    let d: Vec<f64> = subjects
        .iter()
        .filter_map(|s| s.eval.demyelination.map(|d| d.dice))
        .collect();
    (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
}

/// Report over every held-out subject, in original subject order.
pub fn aggregate_report(provenance: Provenance, folds: &[FoldReport]) -> EvaluationReport {
    let mut all: Vec<(usize, SubjectEval)> = folds
        .iter()
        .flat_map(|f| {
            f.test
                .iter()
                .copied()
                .zip(f.subjects.iter().map(|s| s.eval.clone()))
        })
        .collect();
    all.sort_by_key(|(i, _)| *i);
    EvaluationReport::new(provenance, all.into_iter().map(|(_, e)| e).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::{generate_cohort, PhantomSpec};

    fn cohort() -> Vec<PhantomSubject> {
        let spec = PhantomSpec {
            dims: [16, 16, 16],
            lesion_radius_range: (1.5, 2.5),
            ..PhantomSpec::default()
        };
        generate_cohort(&spec, 2, 2).unwrap()
    }

    fn tiny() -> TrainConfig {
        let g = GeneratorConfig {
            base_filters: 2,
            depth: 2,
            ..GeneratorConfig::default()
        };
        TrainConfig {
            epochs: 2,
            lr_sketcher: 1e-3,
            lr_refiner: 1e-3,
            validation_fraction: 0.0,
            sketcher: g.clone(),
            refiner: GeneratorConfig {
                in_channels: 5,
                ..g
            },
            discriminator: DiscriminatorConfig {
                base_filters: 2,
                ..DiscriminatorConfig::default()
            },
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_rejected() {
        let cfg = TrainConfig {
            epochs: 0,
            ..tiny()
        };
        assert_eq!(cfg.validate().unwrap_err().kind(), "config");
        assert!(train_sketcher(&cohort(), &cfg, "").is_err());
    }

    #[test]
    fn fold_sizes() {
        let plan = make_folds(28, 3, 1).unwrap();
        let mut sizes: Vec<usize> = plan.test.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, [9, 9, 10]);
        let mut train: Vec<usize> = (0..3).map(|f| plan.train(f).len()).collect();
        train.sort_unstable();
        assert_eq!(train, [18, 19, 19]);
        let mut all: Vec<usize> = plan.test.concat();
        all.sort_unstable();
        assert_eq!(all, (0..28).collect::<Vec<_>>());
        let small = make_folds(4, 2, 0).unwrap();
        assert_eq!(small.test.iter().map(Vec::len).collect::<Vec<_>>(), [2, 2]);
        assert_eq!(
            make_folds(2, 3, 0).unwrap_err().kind(),
            "insufficient-subjects"
        );
        assert!(make_folds(5, 1, 0).is_err());
        assert_eq!(make_folds(28, 3, 1).unwrap(), plan);
    }

    #[test]
    fn adam_moves_against_the_gradient() {
        let mut g = ParamGraph::new(nets::ForwardSignature {
            in_channels: 1,
            out_channels: 1,
            per_patch: false,
        });
        g.push_const("w".into(), vec![2], 1.0, true);
        let mut opt = Adam::new(&g, 0.1, AdamConfig::default());
        let grads = Grads {
            blocks: vec![vec![2.0, -0.5]],
        };
        opt.step(&mut g, &grads);
        assert!((g.blocks[0].values[0] - 0.9).abs() < 1e-6);
        assert!((g.blocks[0].values[1] - 1.1).abs() < 1e-6);
    }

    #[test]
    fn training_is_deterministic_and_changes_parameters() {
        let data = cohort();
        let cfg = tiny();
        let a = train_sketcher(&data, &cfg, "cfg").unwrap();
        let b = train_sketcher(&data, &cfg, "cfg").unwrap();
        assert_eq!(
            a.checkpoint.to_bytes().unwrap(),
            b.checkpoint.to_bytes().unwrap()
        );
        assert_eq!(a.log.len(), 2);
        let (g_seed, _, _) = stage_seeds(cfg.seed, Stage::Sketcher);
        let init = nets::build_generator(&cfg.sketcher, g_seed).unwrap();
        let trained = a.checkpoint.generator().unwrap();
        let changed = init
            .graph()
            .blocks
            .iter()
            .zip(&trained.graph().blocks)
            .filter(|(x, y)| x.name != "out.bias" && x.values != y.values)
            .count();
        assert!(changed > 0);
    }

    #[test]
    fn refiner_leaves_sketcher_untouched() {
        let data = cohort();
        let cfg = tiny();
        let s = train_sketcher(&data, &cfg, "").unwrap().checkpoint;
        let before = s.to_bytes().unwrap();
        let r = train_refiner(&data, &s, &cfg, "").unwrap().checkpoint;
        assert_eq!(s.to_bytes().unwrap(), before);
        let p1 = predict(&s, &r, &data[0].stack).unwrap();
        let p2 = predict(&s, &r, &data[0].stack).unwrap();
        assert_eq!(p1, p2);
        assert_eq!(p1.refined.dims(), data[0].stack.dims());
        let (s2, r2) = (
            Checkpoint::from_bytes(&s.to_bytes().unwrap()).unwrap(),
            Checkpoint::from_bytes(&r.to_bytes().unwrap()).unwrap(),
        );
        assert_eq!(predict(&s2, &r2, &data[0].stack).unwrap(), p1);
    }

    #[test]
    fn refiner_rejects_channel_mismatch() {
        let data = cohort();
        let cfg = tiny();
        let mut s = train_sketcher(&data, &cfg, "").unwrap().checkpoint;
        s.generator.as_mut().unwrap().in_channels = 5;
        assert!(train_refiner(&data, &s, &cfg, "").is_err());
    }

    #[test]
    fn warm_start_reproduces_the_sketch() {
        let data = cohort();
        let cfg = tiny();
        let s = nets::build_generator(&cfg.sketcher, 3).unwrap();
        let mut r = nets::build_generator(&cfg.refiner, 4).unwrap();
        assert!(warm_start_generator(&mut r, &s));
        let p = predict_with(&s, &r, &data[0].stack).unwrap();
        for (a, b) in p.sketch.values().iter().zip(p.refined.values()) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
        let mut wider = nets::build_generator(
            &GeneratorConfig {
                base_filters: 3,
                ..cfg.refiner.clone()
            },
            4,
        )
        .unwrap();
        assert!(!warm_start_generator(&mut wider, &s));
    }

    #[test]
    fn no_learning_signal_leaves_refiner_unchanged() {
        let data = cohort();
        let base = tiny();
        let s = train_sketcher(&data, &base, "").unwrap().checkpoint;
        let cfg = TrainConfig {
            weights: LossWeights {
                lambda_s: 100.0,
                lambda_r: 0.0,
            },
            adversarial_weight: 0.0,
            ..base
        };
        let one = train_refiner(
            &data,
            &s,
            &TrainConfig {
                epochs: 1,
                ..cfg.clone()
            },
            "",
        )
        .unwrap();
        let three = train_refiner(&data, &s, &TrainConfig { epochs: 3, ..cfg }, "").unwrap();
        assert_eq!(one.checkpoint.graphs[0], three.checkpoint.graphs[0]);
    }

    #[test]
    fn early_stopping_respects_patience() {
        let data = cohort();
        let cfg = TrainConfig {
            epochs: 6,
            patience: 1,
            validation_fraction: 0.25,
            ..tiny()
        };
        let run = train_sketcher(&data, &cfg, "").unwrap();
        assert_eq!(run.validation.len(), run.log.len());
        assert!(run.log.len() <= 6);
        assert_eq!(run.checkpoint.epochs_run, run.log.len());
    }

    #[test]
    fn cross_validation_evaluates_each_subject_once() {
        let data = cohort();
        let cfg = TrainConfig {
            epochs: 1,
            ..tiny()
        };
        let folds = cross_validate(&data, &cfg, 2, &DemyelinationParams::default(), "").unwrap();
        assert_eq!(folds.len(), 2);
        let mut ids: Vec<String> = folds
            .iter()
            .flat_map(|f| f.subjects.iter().map(|s| s.eval.id.clone()))
            .collect();
        ids.sort();
        let mut expected: Vec<String> = data.iter().map(|s| s.id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
        let agg = aggregate_report(
            Provenance {
                config_hash: "x".into(),
                seed: 0,
            },
            &folds,
        );
        let all: Vec<SubjectResult> = folds.iter().flat_map(|f| f.subjects.clone()).collect();
        assert_eq!(agg.mean_dice(), mean_dice(&all));
    }
}

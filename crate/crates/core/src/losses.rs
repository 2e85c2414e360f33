//! Adversarial and reconstruction objectives with their analytic gradients.
//!
//! Sign conventions: the discriminator minimizes [`bce_pair`] summed over
//! patches (nonnegative). The generator minimizes
//! [`generator_adversarial_loss`], which in the default minimax form is
//! `Σ ln(1 - p_fake)` and therefore always negative, dropping below
//! `-ln 2` per patch once the discriminator rates a fake above 0.5. The L1
//! terms are nonnegative.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::volume::{DvrMap, Region, RoiMasks};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logs.
pub const EPS: f64 = 1e-7;

fn clamp(p: f64) -> (f64, bool) {
    if p < EPS {
        (EPS, true)
    } else if p > 1.0 - EPS {
        (1.0 - EPS, true)
    } else {
        (p, false)
    }
}

/// Subgradient of |d| with 0 at the kink.
fn sign(d: f64) -> f64 {
    if d > 0.0 {
        1.0
    } else if d < 0.0 {
        -1.0
    } else {
        0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_s: f64,
    pub lambda_r: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_s: 100.0,
            lambda_r: 100.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("lambda_s", self.lambda_s), ("lambda_r", self.lambda_r)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

/// Discriminator cross-entropy for one (real, fake) pair:
/// `-[ln p_real + ln(1 - p_fake)]`.
pub fn bce_pair(p_real: f64, p_fake: f64) -> f64 {
    let (r, _) = clamp(p_real);
    let (f, _) = clamp(p_fake);
    -(r.ln() + (1.0 - f).ln())
}

/// Sum of [`bce_pair`] over patches.
pub fn patch_discriminator_loss(real: &[f64], fake: &[f64]) -> Result<f64> {
    Ok(patch_discriminator_loss_grad(real, fake)?.0)
}

/// Loss and its derivatives with respect to each real and fake probability.
pub fn patch_discriminator_loss_grad(
    real: &[f64],
    fake: &[f64],
) -> Result<(f64, Vec<f64>, Vec<f64>)> {
    if real.is_empty() || real.len() != fake.len() {
        return Err(Error::Config(format!(
            "patch lists must be nonempty and equal length ({} vs {})",
            real.len(),
            fake.len()
        )));
    }
    let mut loss = 0.0;
    let mut greal = Vec::with_capacity(real.len());
    let mut gfake = Vec::with_capacity(fake.len());
    for (&pr, &pf) in real.iter().zip(fake) {
        loss += bce_pair(pr, pf);
        let (r, rc) = clamp(pr);
        let (f, fc) = clamp(pf);
        greal.push(if rc { 0.0 } else { -1.0 / r });
        gfake.push(if fc { 0.0 } else { 1.0 / (1.0 - f) });
    }
    Ok((loss, greal, gfake))
}

/// Generator side of the adversarial game.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AdversarialForm {
    /// Minimize `Σ ln(1 - p_fake)`.
    #[default]
    Minimax,
    /// Minimize `-Σ ln p_fake`.
    NonSaturating,
}

pub fn generator_adversarial_loss(fake: &[f64], form: AdversarialForm) -> f64 {
    generator_adversarial_loss_grad(fake, form).0
}

pub fn generator_adversarial_loss_grad(fake: &[f64], form: AdversarialForm) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let grad = fake
        .iter()
        .map(|&p| {
            let (q, clamped) = clamp(p);
            let (l, g) = match form {
                AdversarialForm::Minimax => ((1.0 - q).ln(), -1.0 / (1.0 - q)),
                AdversarialForm::NonSaturating => (-q.ln(), -1.0 / q),
            };
            loss += l;
            if clamped {
                0.0
            } else {
                g
            }
        })
        .collect();
    (loss, grad)
}

/// How the sketcher L1 term is normalized over voxels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum L1Normalization {
    /// Mean absolute difference per voxel, averaged over subjects.
    #[default]
    VoxelMean,
    /// Sum of absolute differences per volume, averaged over subjects.
    VoxelSum,
}

fn check_batch(preds: &[&[f64]], targets: &[&[f64]]) -> Result<()> {
    if preds.is_empty() || preds.len() != targets.len() {
        return Err(Error::Dims(format!(
            "{} predictions vs {} targets",
            preds.len(),
            targets.len()
        )));
    }
    for (p, t) in preds.iter().zip(targets) {
        if p.len() != t.len() {
            return Err(Error::Dims(format!(
                "prediction has {} voxels, target {}",
                p.len(),
                t.len()
            )));
        }
    }
    Ok(())
}

/// Sketcher reconstruction loss over a batch of subjects.
pub fn l1_sketcher(preds: &[&[f64]], targets: &[&[f64]], norm: L1Normalization) -> Result<f64> {
    Ok(l1_sketcher_grad(preds, targets, norm)?.0)
}

/// Loss and gradient w.r.t. each prediction.
pub fn l1_sketcher_grad(
    preds: &[&[f64]],
    targets: &[&[f64]],
    norm: L1Normalization,
) -> Result<(f64, Vec<Vec<f64>>)> {
    check_batch(preds, targets)?;
    let n = preds.len() as f64;
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(preds.len());
    for (p, t) in preds.iter().zip(targets) {
        let scale = match norm {
            L1Normalization::VoxelMean => 1.0 / (n * p.len() as f64),
            L1Normalization::VoxelSum => 1.0 / n,
        };
        let mut sum = 0.0;
        let g = p
            .iter()
            .zip(t.iter())
            .map(|(a, b)| {
                let d = a - b;
                sum += d.abs();
                scale * sign(d)
            })
            .collect();
        loss += scale * sum;
        grads.push(g);
    }
    Ok((loss, grads))
}

/// What to do when a region has no voxels in the region-weighted loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmptyRegionPolicy {
    #[default]
    Error,
    /// Omit the region's term (controls have no lesions); the `1/M`
    /// factor is kept.
    DropTerm,
}

/// Region-weighted L1 value with its per-region contributions, which sum to
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightedL1 {
    pub total: f64,
    /// Lesion, NAWM, other.
    pub per_region: [f64; 3],
}

fn region_slot(r: Region) -> usize {
    match r {
        Region::Lesion => 0,
        Region::Nawm => 1,
        Region::Other => 2,
    }
}

/// Refiner loss: per subject `(1/M) Σ_r (1/N_r) Σ_{j∈r} |diff_j|`, averaged
/// over the batch.
pub fn weighted_l1_refiner(
    preds: &[&[f64]],
    targets: &[&[f64]],
    labels: &[&[Region]],
    policy: EmptyRegionPolicy,
) -> Result<WeightedL1> {
    Ok(weighted_l1_refiner_grad(preds, targets, labels, policy)?.0)
}

pub fn weighted_l1_refiner_grad(
    preds: &[&[f64]],
    targets: &[&[f64]],
    labels: &[&[Region]],
    policy: EmptyRegionPolicy,
) -> Result<(WeightedL1, Vec<Vec<f64>>)> {
    check_batch(preds, targets)?;
    if labels.len() != preds.len() || labels.iter().zip(preds).any(|(l, p)| l.len() != p.len()) {
        return Err(Error::Dims("region labels do not match predictions".into()));
    }
    let n = preds.len() as f64;
    let mut per_region = [0.0; 3];
    let mut grads = Vec::with_capacity(preds.len());
    for ((p, t), lab) in preds.iter().zip(targets).zip(labels) {
        let m = p.len() as f64;
        let mut counts = [0usize; 3];
        for &r in lab.iter() {
            counts[region_slot(r)] += 1;
        }
        for r in Region::ALL {
            if counts[region_slot(r)] == 0 && policy == EmptyRegionPolicy::Error {
                return Err(Error::EmptyRegion(format!(
                    "{} region has no voxels; use EmptyRegionPolicy::DropTerm to omit its term",
                    r.name()
                )));
            }
        }
        let weight: Vec<f64> = counts
            .iter()
            .map(|&c| {
                if c == 0 {
                    0.0
                } else {
                    1.0 / (n * m * c as f64)
                }
            })
            .collect();
        let mut sums = [0.0; 3];
        let g = p
            .iter()
            .zip(t.iter())
            .zip(lab.iter())
            .map(|((a, b), &r)| {
                let s = region_slot(r);
                let d = a - b;
                sums[s] += d.abs();
                weight[s] * sign(d)
            })
            .collect();
        for s in 0..3 {
            per_region[s] += weight[s] * sums[s];
        }
        grads.push(g);
    }
    Ok((
        WeightedL1 {
            total: per_region.iter().sum(),
            per_region,
        },
        grads,
    ))
}

/// [`weighted_l1_refiner`] for a single subject given as volumes.
pub fn weighted_l1_volumes(
    pred: &DvrMap,
    target: &DvrMap,
    masks: &RoiMasks,
    policy: EmptyRegionPolicy,
) -> Result<WeightedL1> {
    if pred.dims() != target.dims() || pred.dims() != masks.dims() {
        return Err(Error::Dims(
            "prediction, target and masks must share dims".into(),
        ));
    }
    let labels = masks.labels();
    weighted_l1_refiner(&[&pred.to_f64()], &[&target.to_f64()], &[&labels], policy)
}

/// `adv + lambda * l1`.
pub fn total_objective(adv: f64, l1: f64, lambda: f64) -> f64 {
    adv + lambda * l1
}

/// One training-log record of the generator objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub discriminator: f64,
    pub adversarial: f64,
    pub l1: f64,
    pub total: f64,
    pub per_region: Option<[f64; 3]>,
}

impl LossReport {
    pub fn new(
        discriminator: f64,
        adversarial: f64,
        l1: f64,
        lambda: f64,
        per_region: Option<[f64; 3]>,
    ) -> Self {
        Self {
            discriminator,
            adversarial,
            l1,
            total: total_objective(adversarial, l1, lambda),
            per_region,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.discriminator.is_finite()
            && self.adversarial.is_finite()
            && self.l1.is_finite()
            && self.total.is_finite()
    }

    /// Tab-separated fields: D loss, G adversarial, L1, then the lesion,
    /// NAWM and other terms (`-` when not applicable).
    pub fn log_fields(&self) -> String {
        let regions = match self.per_region {
            Some([a, b, c]) => format!("{a:e}\t{b:e}\t{c:e}"),
            None => "-\t-\t-".to_string(),
        };
        format!(
            "{:e}\t{:e}\t{:e}\t{regions}",
            self.discriminator, self.adversarial, self.l1
        )
    }
}

/// Finite-difference helpers for checking analytic gradients.
pub mod gradcheck {
    /// Central difference `(f(h) - f(-h)) / 2h` of a scalar function of a step.
    pub fn central_difference(f: impl Fn(f64) -> f64, h: f64) -> f64 {
        (f(h) - f(-h)) / (2.0 * h)
    }

    /// `|a - b| / max(|a|, |b|)`, and 0 when both vanish.
    pub fn relative_error(a: f64, b: f64) -> f64 {
        let scale = a.abs().max(b.abs());
        if scale == 0.0 {
            0.0
        } else {
            (a - b).abs() / scale
        }
    }

    /// Directional derivative check of `loss` at `x` along `dir`.
    pub fn check_direction(
        loss: impl Fn(&[f64]) -> f64,
        x: &[f64],
        grad: &[f64],
        dir: &[f64],
        h: f64,
    ) -> f64 {
        let fd = central_difference(
            |s| {
                let shifted: Vec<f64> = x.iter().zip(dir).map(|(a, d)| a + s * d).collect();
                loss(&shifted)
            },
            h,
        );
        let an: f64 = grad.iter().zip(dir).map(|(g, d)| g * d).sum();
        relative_error(fd, an)
    }
}

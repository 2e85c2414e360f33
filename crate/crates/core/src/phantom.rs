//! Seeded synthetic cohorts: four MRI-like channels, a DVR map, ROI masks
//! and a ground-truth demyelination map per subject.
//!
//! Each subject is built from three latent tissue fields: myelin `m`, fibre
//! coherence `c` and free water `w`. The brain is an ellipsoid whose inner,
//! smoothly deformed core is white matter; the shell is grey matter and the
//! outside is background. Channels are fixed nonlinear functions of the
//! latents:
//!
//! ```text
//! MTR = 0.6 m / (0.3 + m) · (1 - 0.5 w)
//! FA  = 0.1 + 0.7 c √m (1 - w)
//! RD  = 0.3 + 0.9 w + 0.5 (1 - m)
//! AD  = 0.9 + 1.1 w + 0.4 c
//! ```
//!
//! Outside lesions the noise-free DVR is `DVR = base + s · g(MTR, FA, RD, AD)`
//! inside the brain and 0 in the background, with
//! `g = MTR (1 + 0.5 FA) / (0.25 + 0.5 RD)`, `s` fixed so that a prototypical
//! white-matter voxel lands on `nawm_dvr_mean`, and `base` a low-amplitude
//! smooth field. The white-matter myelin variability is scaled so the NAWM
//! DVR spread is close to `nawm_dvr_sd`.
//!
//! Lesions are non-overlapping spheres inside white matter, each with a
//! reduction factor `r`. Their latents are damaged with a per-lesion strength
//! `a` (`m → a m`, `c → c (1 + a) / 2`, `w → w + 0.4 (1 - a)`) and their DVR
//! follows the same rule as everywhere else. `a` is found by bisection so
//! that each lesion's mean noise-free DVR is `r` times the NAWM mean.
//! Gaussian noise is then added to every channel and to the DVR inside the
//! brain.

use rand::{Rng, RngCore};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::DemyelinationParams;
use crate::volume::{partition_masks, DvrMap, MultimodalStack, RoiMasks, Volume3D};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    /// Inclusive range of lesions per patient.
    pub lesion_count_range: (usize, usize),
    /// Lesion radius range in voxels.
    pub lesion_radius_range: (f64, f64),
    pub nawm_dvr_mean: f64,
    pub nawm_dvr_sd: f64,
    /// Lesion mean DVR over NAWM mean DVR, drawn per lesion.
    pub lesion_dvr_reduction_range: (f64, f64),
    /// Noise standard deviation of MTR, FA, RD, AD.
    pub noise_sd: [f64; 4],
    pub dvr_noise_sd: f64,
    /// Amplitude of the smooth additive DVR field.
    pub base_field_sd: f64,
    /// Threshold used to mark ground-truth demyelination; set from the run
    /// configuration.
    #[serde(skip)]
    pub demyelination: DemyelinationParams,
    /// Set from the run configuration's global seed.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        Self {
            dims: [32, 32, 32],
            spacing: [1.0, 1.0, 1.0],
            lesion_count_range: (3, 5),
            lesion_radius_range: (2.5, 4.0),
            nawm_dvr_mean: 1.6,
            nawm_dvr_sd: 0.08,
            lesion_dvr_reduction_range: (0.55, 0.95),
            noise_sd: [0.03, 0.03, 0.05, 0.05],
            dvr_noise_sd: 0.03,
            base_field_sd: 0.02,
            demyelination: DemyelinationParams::default(),
            seed: 2019,
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("phantom spec: {m}")));
        if self.dims.iter().any(|&d| d < 16) {
            return bad("dims must each be >= 16");
        }
        if self.spacing.iter().any(|s| !(s.is_finite() && *s > 0.0)) {
            return bad("spacing must be positive");
        }
        let (c0, c1) = self.lesion_count_range;
        if c0 < 1 || c0 > c1 {
            return bad("lesion_count_range must be a non-empty range starting at >= 1");
        }
        let (r0, r1) = self.lesion_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad("lesion_radius_range must be a non-empty positive range");
        }
        let (f0, f1) = self.lesion_dvr_reduction_range;
        if !(f0 > 0.0 && f0 <= f1 && f1 <= 1.0) {
            return bad("lesion_dvr_reduction_range must lie in (0, 1] and be non-empty");
        }
        if !(self.nawm_dvr_mean > 0.0 && self.nawm_dvr_sd > 0.0) {
            return bad("nawm_dvr_mean and nawm_dvr_sd must be positive");
        }
        if self.noise_sd.iter().any(|s| !(*s > 0.0 && s.is_finite()))
            || !(self.dvr_noise_sd > 0.0 && self.dvr_noise_sd.is_finite())
        {
            return bad("noise standard deviations must be positive");
        }
        if !(self.base_field_sd >= 0.0 && self.base_field_sd.is_finite()) {
            return bad("base_field_sd must be >= 0");
        }
        self.demyelination.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PhantomSubject {
    pub id: String,
    pub stack: MultimodalStack,
    pub dvr: DvrMap,
    /// DVR before noise.
    pub dvr_noise_free: DvrMap,
    pub masks: RoiMasks,
    pub demyelination_truth: Volume3D,
    pub is_patient: bool,
    /// Reduction factor of each lesion, in generation order.
    pub lesion_factors: Vec<f64>,
}

const WM_MYELIN: f64 = 0.85;
const WM_COHERENCE: f64 = 0.6;
const WM_WATER: f64 = 0.08;

#[derive(Debug, Clone, Copy)]
struct Latent {
    m: f64,
    c: f64,
    w: f64,
}

fn channels(l: Latent) -> [f64; 4] {
    let Latent { m, c, w } = l;
    [
        0.6 * m / (0.3 + m) * (1.0 - 0.5 * w),
        0.1 + 0.7 * c * m.sqrt() * (1.0 - w),
        0.3 + 0.9 * w + 0.5 * (1.0 - m),
        0.9 + 1.1 * w + 0.4 * c,
    ]
}

/// Fixed nonlinear map from noise-free channels to (unscaled) DVR.
pub fn dvr_signal(ch: [f64; 4]) -> f64 {
    let [mtr, fa, rd, _ad] = ch;
    mtr * (1.0 + 0.5 * fa) / (0.25 + 0.5 * rd)
}

/// Lesion damage of strength `1 - a`: less myelin, more free water, less
/// coherence. `a = 1` leaves the tissue intact.
fn damaged(l: Latent, a: f64) -> Latent {
    Latent {
        m: l.m * a,
        c: l.c * (0.5 + 0.5 * a),
        w: l.w + 0.4 * (1.0 - a),
    }
}

fn wm_signal(m: f64) -> f64 {
    dvr_signal(channels(Latent {
        m,
        c: WM_COHERENCE,
        w: WM_WATER,
    }))
}

/// Smooth random field with approximately unit standard deviation.
struct SmoothField {
    waves: Vec<([f64; 3], f64, f64)>,
    norm: f64,
}

impl SmoothField {
    fn new(rng: &mut ChaCha8Rng, dims: [usize; 3]) -> Self {
        let waves: Vec<_> = (0..6)
            .map(|_| {
                let k = [0, 1, 2]
                    .map(|a| rng.random_range(-2.0..2.0) * std::f64::consts::TAU / dims[a] as f64);
                let amp: f64 = StandardNormal.sample(rng);
                (k, rng.random_range(0.0..std::f64::consts::TAU), amp)
            })
            .collect();
        let var: f64 = waves.iter().map(|w| w.2 * w.2 / 2.0).sum();
        Self {
            waves,
            norm: 1.0 / var.sqrt().max(1e-12),
        }
    }

    fn at(&self, p: [f64; 3]) -> f64 {
        self.norm
            * self
                .waves
                .iter()
                .map(|(k, phase, amp)| {
                    amp * (k[0] * p[0] + k[1] * p[1] + k[2] * p[2] + phase).cos()
                })
                .sum::<f64>()
    }
}

/// Generates one subject deterministically from `(spec, subject_seed)`.
pub fn generate_subject(
    spec: &PhantomSpec,
    subject_seed: u64,
    is_patient: bool,
) -> Result<PhantomSubject> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(subject_seed);
    let [nx, ny, nz] = spec.dims;
    let n = nx * ny * nz;
    let coords = |i: usize| {
        [
            (i % nx) as f64,
            ((i / nx) % ny) as f64,
            (i / (nx * ny)) as f64,
        ]
    };

    // geometry
    let center = [0, 1, 2].map(|a| spec.dims[a] as f64 / 2.0 - 0.5 + rng.random_range(-1.0..1.0));
    let scale = rng.random_range(0.95..1.05);
    let brain_r = [0.42, 0.45, 0.40].map(|f| f * scale);
    let brain_r = [0, 1, 2].map(|a| brain_r[a] * spec.dims[a] as f64);
    let wm_shape = SmoothField::new(&mut rng, spec.dims);
    let myelin_field = SmoothField::new(&mut rng, spec.dims);
    let coherence_field = SmoothField::new(&mut rng, spec.dims);
    let base_field = SmoothField::new(&mut rng, spec.dims);

    let radius = |p: [f64; 3]| -> f64 {
        (0..3)
            .map(|a| ((p[a] - center[a]) / brain_r[a]).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    let in_brain: Vec<bool> = (0..n).map(|i| radius(coords(i)) < 1.0).collect();
    let in_wm: Vec<bool> = (0..n)
        .map(|i| {
            let p = coords(i);
            radius(p) < 0.62 + 0.06 * wm_shape.at(p)
        })
        .collect();

    // NAWM DVR spread comes from myelin variability through the signal map
    let signal_ref = wm_signal(WM_MYELIN);
    let slope = (wm_signal(WM_MYELIN + 1e-3) - wm_signal(WM_MYELIN - 1e-3)) / 2e-3;
    let dvr_scale = spec.nawm_dvr_mean / signal_ref;
    let myelin_sd = (spec.nawm_dvr_sd / (dvr_scale * slope)).min(0.12);

    let mut latent: Vec<Latent> = (0..n)
        .map(|i| {
            let p = coords(i);
            if in_wm[i] {
                Latent {
                    m: (WM_MYELIN + myelin_sd * myelin_field.at(p)).clamp(0.05, 1.0),
                    c: (WM_COHERENCE + 0.2 * coherence_field.at(p)).clamp(0.1, 1.0),
                    w: WM_WATER,
                }
            } else if in_brain[i] {
                Latent {
                    m: (0.35 + 0.03 * myelin_field.at(p)).clamp(0.05, 1.0),
                    c: 0.15,
                    w: 0.2,
                }
            } else {
                Latent {
                    m: 0.0,
                    c: 0.0,
                    w: 1.0,
                }
            }
        })
        .collect();
    let base: Vec<f64> = (0..n)
        .map(|i| spec.base_field_sd * base_field.at(coords(i)))
        .collect();
    let reference_dvr = |l: Latent, i: usize| -> f64 {
        if in_brain[i] {
            (base[i] + dvr_scale * dvr_signal(channels(l))).max(0.0)
        } else {
            0.0
        }
    };
    let as_nawm: Vec<f64> = (0..n).map(|i| reference_dvr(latent[i], i)).collect();

    // lesions
    let mut lesion_id: Vec<Option<usize>> = vec![None; n];
    let mut lesion_factors = Vec::new();
    if is_patient {
        let count = rng.random_range(spec.lesion_count_range.0..=spec.lesion_count_range.1);
        let wm_voxels: Vec<usize> = (0..n).filter(|&i| in_wm[i]).collect();
        if wm_voxels.is_empty() {
            return Err(Error::Config(
                "phantom has no white matter to place lesions".into(),
            ));
        }
        let mut placed: Vec<([f64; 3], f64)> = Vec::new();
        let mut attempts = 0;
        while placed.len() < count && attempts < 200 {
            attempts += 1;
            let c = coords(wm_voxels[rng.random_range(0..wm_voxels.len())]);
            let r = rng.random_range(spec.lesion_radius_range.0..=spec.lesion_radius_range.1);
            let clear = placed.iter().all(|(q, s)| {
                let d2: f64 = (0..3).map(|a| (c[a] - q[a]).powi(2)).sum();
                d2.sqrt() > r + s + 1.0
            });
            if clear {
                placed.push((c, r));
            }
        }
        for (k, (c, r)) in placed.iter().enumerate() {
            let factor = rng.random_range(
                spec.lesion_dvr_reduction_range.0..=spec.lesion_dvr_reduction_range.1,
            );
            let mut any = false;
            for i in 0..n {
                if !in_wm[i] {
                    continue;
                }
                let p = coords(i);
                let d2: f64 = (0..3).map(|a| (p[a] - c[a]).powi(2)).sum();
                if d2 <= r * r {
                    lesion_id[i] = Some(lesion_factors.len());
                    any = true;
                }
            }
            if any {
                lesion_factors.push(factor);
            } else {
                debug_assert!(k < placed.len());
            }
        }
    }

    // noise-free DVR
    let is_lesion = |i: usize| lesion_id[i].is_some();
    let nawm_values: Vec<f64> = (0..n)
        .filter(|&i| in_wm[i] && !is_lesion(i))
        .map(|i| as_nawm[i])
        .collect();
    let nawm_mean = mean(&nawm_values);
    let mut dvr_clean = as_nawm.clone();
    for (l, &factor) in lesion_factors.iter().enumerate() {
        let voxels: Vec<usize> = (0..n).filter(|&i| lesion_id[i] == Some(l)).collect();
        let lesion_mean = |a: f64| {
            voxels
                .iter()
                .map(|&i| reference_dvr(damaged(latent[i], a), i))
                .sum::<f64>()
                / voxels.len() as f64
        };
        let target = factor * nawm_mean;
        let (mut lo, mut hi) = (0.0, 1.0);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            if lesion_mean(mid) < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let a = 0.5 * (lo + hi);
        for &i in &voxels {
            latent[i] = damaged(latent[i], a);
            dvr_clean[i] = reference_dvr(latent[i], i);
        }
    }

    // ground-truth demyelination from the noise-free map
    let nawm_sd = sd(&nawm_values, nawm_mean);
    let threshold = spec.demyelination.threshold(nawm_mean, nawm_sd);
    let reference = Volume3D::filled(spec.dims, spec.spacing, 0.0)?;
    let demyelination_truth =
        Volume3D::mask_from(&reference, |i| is_lesion(i) && dvr_clean[i] < threshold);

    // noisy observations
    let mut chans: Vec<Vec<f32>> = vec![Vec::with_capacity(n); 4];
    let noise: Vec<Normal<f64>> = spec
        .noise_sd
        .iter()
        .map(|&s| Normal::new(0.0, s).unwrap())
        .collect();
    for l in &latent {
        let ch = channels(*l);
        for c in 0..4 {
            chans[c].push((ch[c] + noise[c].sample(&mut rng)) as f32);
        }
    }
    let dvr_noise = Normal::new(0.0, spec.dvr_noise_sd).unwrap();
    let dvr: Vec<f32> = (0..n)
        .map(|i| {
            if in_brain[i] {
                (dvr_clean[i] + dvr_noise.sample(&mut rng)) as f32
            } else {
                0.0
            }
        })
        .collect();

    let stack = MultimodalStack::new(
        chans
            .into_iter()
            .map(|v| Volume3D::new(spec.dims, spec.spacing, v))
            .collect::<Result<Vec<_>>>()?,
    )?;
    let lesion = Volume3D::mask_from(&reference, is_lesion);
    let nawm = Volume3D::mask_from(&reference, |i| in_wm[i] && !is_lesion(i));
    let masks = partition_masks(&lesion, &nawm)?;
    Ok(PhantomSubject {
        id: String::new(),
        stack,
        dvr: Volume3D::new(spec.dims, spec.spacing, dvr)?,
        dvr_noise_free: Volume3D::new(
            spec.dims,
            spec.spacing,
            dvr_clean.iter().map(|&v| v as f32).collect(),
        )?,
        masks,
        demyelination_truth,
        is_patient,
        lesion_factors,
    })
}

/// Patients (`P01`, …) followed by controls (`C01`, …); subject seeds are
/// drawn in order from a generator seeded with `spec.seed`.
pub fn generate_cohort(
    spec: &PhantomSpec,
    n_patients: usize,
    n_controls: usize,
) -> Result<Vec<PhantomSubject>> {
    spec.validate()?;
    let mut master = ChaCha8Rng::seed_from_u64(spec.seed);
    let seeds: Vec<u64> = (0..n_patients + n_controls)
        .map(|_| master.next_u64())
        .collect();
    seeds
        .iter()
        .enumerate()
        .map(|(k, &s)| {
            let is_patient = k < n_patients;
            let mut subj = generate_subject(spec, s, is_patient)?;
            subj.id = if is_patient {
                format!("P{:02}", k + 1)
            } else {
                format!("C{:02}", k - n_patients + 1)
            };
            Ok(subj)
        })
        .collect()
}

/// Cohort shape of the clinical study.
pub const DEFAULT_PATIENTS: usize = 18;
pub const DEFAULT_CONTROLS: usize = 10;

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

fn sd(v: &[f64], m: f64) -> f64 {
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len().max(1) as f64).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::Region;

    fn small() -> PhantomSpec {
        PhantomSpec {
            dims: [16, 16, 16],
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn deterministic_subjects() {
        let a = generate_subject(&small(), 7, true).unwrap();
        let b = generate_subject(&small(), 7, true).unwrap();
        assert_eq!(a, b);
        let c = generate_subject(&small(), 8, true).unwrap();
        assert_ne!(a.dvr, c.dvr);
    }

    #[test]
    fn controls_are_lesion_free() {
        let s = generate_subject(&small(), 3, false).unwrap();
        assert_eq!(s.masks.count(Region::Lesion), 0);
        assert_eq!(s.demyelination_truth.count_set(), 0);
        assert!(s.masks.count(Region::Nawm) > 0);
    }

    #[test]
    fn demyelination_only_in_lesions() {
        for seed in 0..5 {
            let s = generate_subject(&PhantomSpec::default(), seed, true).unwrap();
            assert!(s.masks.count(Region::Lesion) > 0);
            assert!(s.masks.is_partition());
            for i in 0..s.dvr.len() {
                if s.demyelination_truth.is_set(i) {
                    assert!(s.masks.lesion.is_set(i));
                }
            }
        }
    }

    #[test]
    fn single_lesion_ratio_within_range() {
        let spec = PhantomSpec {
            lesion_count_range: (1, 1),
            lesion_dvr_reduction_range: (0.4, 0.6),
            ..PhantomSpec::default()
        };
        for seed in 0..4 {
            let s = generate_subject(&spec, seed, true).unwrap();
            assert_eq!(s.lesion_factors.len(), 1);
            let clean = s.dvr_noise_free.values();
            let avg = |m: &Volume3D| {
                let idx: Vec<usize> = (0..m.len()).filter(|&i| m.is_set(i)).collect();
                idx.iter().map(|&i| clean[i] as f64).sum::<f64>() / idx.len() as f64
            };
            let ratio = avg(&s.masks.lesion) / avg(&s.masks.nawm);
            assert!((0.4..=0.6).contains(&ratio), "ratio {ratio}");
            assert!((ratio - s.lesion_factors[0]).abs() < 1e-5);
        }
    }

    #[test]
    fn nawm_statistics_near_spec() {
        let spec = PhantomSpec::default();
        let s = generate_subject(&spec, 11, false).unwrap();
        let v: Vec<f64> = (0..s.dvr.len())
            .filter(|&i| s.masks.nawm.is_set(i))
            .map(|i| s.dvr_noise_free.values()[i] as f64)
            .collect();
        let m = mean(&v);
        assert!((m - spec.nawm_dvr_mean).abs() < 0.1, "mean {m}");
        let d = sd(&v, m);
        assert!(
            d > 0.3 * spec.nawm_dvr_sd && d < 3.0 * spec.nawm_dvr_sd,
            "sd {d}"
        );
    }

    #[test]
    fn cohort_shape() {
        let spec = small();
        let c = generate_cohort(&spec, 0, 1).unwrap();
        assert_eq!(c.len(), 1);
        assert!(!c[0].is_patient);
        assert_eq!(c[0].id, "C01");
        let a = generate_cohort(&spec, 2, 1).unwrap();
        assert_eq!(a, generate_cohort(&spec, 2, 1).unwrap());
        assert_eq!(a.iter().filter(|s| s.is_patient).count(), 2);
    }

    #[test]
    fn rejects_invalid_spec() {
        let bad = PhantomSpec {
            dims: [8, 32, 32],
            ..PhantomSpec::default()
        };
        assert!(generate_subject(&bad, 0, true).is_err());
        let bad = PhantomSpec {
            lesion_dvr_reduction_range: (0.7, 0.6),
            ..PhantomSpec::default()
        };
        assert!(generate_cohort(&bad, 1, 0).is_err());
    }
}

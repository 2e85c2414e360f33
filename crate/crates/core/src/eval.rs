//! Global (per-ROI statistics, group rank tests) and voxel-wise
//! (demyelination classification, lesion-load percentage, Dice, agreement
//! maps) evaluation of DVR maps.

use std::fmt;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::volume::{DvrMap, RoiMasks, Volume3D};

/// The three regions compared at group level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Roi {
    /// White matter in healthy controls.
    WmHc,
    /// Normal-appearing white matter in patients.
    Nawm,
    /// Lesions in patients.
    Lesion,
}

impl Roi {
    pub const ALL: [Roi; 3] = [Roi::WmHc, Roi::Nawm, Roi::Lesion];

    pub fn name(self) -> &'static str {
        match self {
            Roi::WmHc => "wm_hc",
            Roi::Nawm => "nawm",
            Roi::Lesion => "lesion",
        }
    }
}

/// Which map a statistic was computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Source {
    Truth,
    Predicted,
}

impl fmt::Display for Source {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Source::Truth => "truth",
            Source::Predicted => "predicted",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl Summary {
    pub fn range(&self) -> f64 {
        self.max - self.min
    }
}

/// Mean, median, min and max of the DVR over a nonempty mask.
pub fn region_summary(dvr: &DvrMap, mask: &Volume3D) -> Result<Summary> {
    if dvr.dims() != mask.dims() {
        return Err(Error::Dims(format!(
            "dvr {:?} vs mask {:?}",
            dvr.dims(),
            mask.dims()
        )));
    }
    let mut v: Vec<f64> = (0..dvr.len())
        .filter(|&i| mask.is_set(i))
        .map(|i| f64::from(dvr.values()[i]))
        .collect();
    if v.is_empty() {
        return Err(Error::EmptyRegion("requested region has no voxels".into()));
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    let median = if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    };
    Ok(Summary {
        mean: v.iter().sum::<f64>() / n as f64,
        median,
        min: v[0],
        max: v[n - 1],
        count: n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct RoiStats {
    pub subject_id: String,
    pub source: Source,
    pub is_patient: bool,
    /// WM-HC for controls; NAWM and lesions for patients.
    pub rois: Vec<(Roi, Summary)>,
}

impl RoiStats {
    pub fn get(&self, roi: Roi) -> Option<&Summary> {
        self.rois.iter().find(|(r, _)| *r == roi).map(|(_, s)| s)
    }
}

/// Per-ROI statistics of one map. Controls contribute their white matter
/// (the NAWM mask) as WM-HC; patients contribute NAWM and lesions.
pub fn roi_statistics(
    dvr: &DvrMap,
    masks: &RoiMasks,
    is_patient: bool,
    subject_id: &str,
    source: Source,
) -> Result<RoiStats> {
    let named = |roi: Roi, mask: &Volume3D| -> Result<(Roi, Summary)> {
        region_summary(dvr, mask)
            .map(|s| (roi, s))
            .map_err(|e| match e {
                Error::EmptyRegion(_) => {
                    Error::EmptyRegion(format!("{} of subject {subject_id}", roi.name()))
                }
                e => e,
            })
    };
    let rois = if is_patient {
        vec![
            named(Roi::Nawm, &masks.nawm)?,
            named(Roi::Lesion, &masks.lesion)?,
        ]
    } else {
        vec![named(Roi::WmHc, &masks.nawm)?]
    };
    Ok(RoiStats {
        subject_id: subject_id.to_string(),
        source,
        is_patient,
        rois,
    })
}

/// Two-sided Mann-Whitney U test result.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RankTest {
    /// U statistic of the first sample.
    pub u: f64,
    pub n1: usize,
    pub n2: usize,
    pub p_value: f64,
    /// True when the exact null distribution was used.
    pub exact: bool,
}

/// Largest sample size for which the exact null distribution is enumerated.
const EXACT_LIMIT: usize = 50;

/// Two-sided Mann-Whitney U test. Uses the exact permutation distribution
/// when there are no ties and both samples are small, otherwise the normal
/// approximation with tie and continuity corrections.
pub fn mann_whitney(a: &[f64], b: &[f64]) -> Result<RankTest> {
    let (n1, n2) = (a.len(), b.len());
    if n1 < 2 || n2 < 2 {
        return Err(Error::InsufficientSubjects(format!(
            "rank test needs >= 2 per group, got {n1} and {n2}"
        )));
    }
    let mut all: Vec<(f64, usize)> = a
        .iter()
        .map(|&v| (v, 0))
        .chain(b.iter().map(|&v| (v, 1)))
        .collect();
    all.sort_by(|x, y| x.0.total_cmp(&y.0));
    let n = all.len();
    let mut ranks = vec![0.0; n];
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        ranks[i..=j].iter_mut().for_each(|x| *x = r);
        let t = (j - i + 1) as f64;
        tie_term += t * t * t - t;
        i = j + 1;
    }
    let r1: f64 = all
        .iter()
        .zip(&ranks)
        .filter(|((_, g), _)| *g == 0)
        .map(|(_, r)| r)
        .sum();
    let u = r1 - (n1 * (n1 + 1)) as f64 / 2.0;
    let (f1, f2) = (n1 as f64, n2 as f64);

    if tie_term == 0.0 && n1 <= EXACT_LIMIT && n2 <= EXACT_LIMIT {
        let dist = u_distribution(n1, n2);
        let total: f64 = dist.iter().sum();
        let k = u.round() as usize;
        let lower: f64 = dist[..=k].iter().sum::<f64>() / total;
        let upper: f64 = dist[k..].iter().sum::<f64>() / total;
        return Ok(RankTest {
            u,
            n1,
            n2,
            p_value: (2.0 * lower.min(upper)).min(1.0),
            exact: true,
        });
    }
    let mu = f1 * f2 / 2.0;
    let var = f1 * f2 / 12.0 * ((f1 + f2 + 1.0) - tie_term / ((f1 + f2) * (f1 + f2 - 1.0)));
    let p_value = if var <= 0.0 {
        1.0
    } else {
        let z = ((u - mu).abs() - 0.5).max(0.0) / var.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        (2.0 * (1.0 - normal.cdf(z))).min(1.0)
    };
    Ok(RankTest {
        u,
        n1,
        n2,
        p_value,
        exact: false,
    })
}

/// Number of arrangements giving each U value under the null.
fn u_distribution(n1: usize, n2: usize) -> Vec<f64> {
    // counts[m][n] over u, built up in m and n
    let maxu = n1 * n2;
    let mut prev: Vec<Vec<f64>> = (0..=n2)
        .map(|_| {
            let mut v = vec![0.0; maxu + 1];
            v[0] = 1.0;
            v
        })
        .collect();
    for m in 1..=n1 {
        let mut cur: Vec<Vec<f64>> = vec![vec![0.0; maxu + 1]; n2 + 1];
        cur[0][0] = 1.0;
        for n in 1..=n2 {
            for u in 0..=m * n {
                let from_a = if u >= n { prev[n][u - n] } else { 0.0 };
                cur[n][u] = from_a + cur[n - 1][u];
            }
        }
        prev = cur;
    }
    prev.swap_remove(n2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupComparison {
    pub nawm_vs_wm_hc: RankTest,
    pub lesion_vs_nawm: RankTest,
    /// Mean over subjects of the subject-level mean DVR per ROI.
    pub group_means: Vec<(Roi, f64)>,
}

/// Rank tests on subject-level mean DVR: NAWM (patients) vs WM (controls)
/// and lesions vs NAWM (patients).
pub fn group_comparison(
    patient_stats: &[RoiStats],
    hc_stats: &[RoiStats],
) -> Result<GroupComparison> {
    let means = |stats: &[RoiStats], roi: Roi| -> Result<Vec<f64>> {
        stats
            .iter()
            .map(|s| {
                s.get(roi).map(|x| x.mean).ok_or_else(|| {
                    Error::EmptyRegion(format!("{} missing for {}", roi.name(), s.subject_id))
                })
            })
            .collect()
    };
    let nawm = means(patient_stats, Roi::Nawm)?;
    let lesion = means(patient_stats, Roi::Lesion)?;
    let wm_hc = means(hc_stats, Roi::WmHc)?;
    let avg = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    Ok(GroupComparison {
        nawm_vs_wm_hc: mann_whitney(&nawm, &wm_hc)?,
        lesion_vs_nawm: mann_whitney(&lesion, &nawm)?,
        group_means: vec![
            (Roi::WmHc, avg(&wm_hc)),
            (Roi::Nawm, avg(&nawm)),
            (Roi::Lesion, avg(&lesion)),
        ],
    })
}

/// Lesion voxels are flagged when their DVR falls below
/// `mean_NAWM - k * sd_NAWM` of the same map (population sd).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DemyelinationParams {
    pub z_threshold: f64,
}

impl Default for DemyelinationParams {
    fn default() -> Self {
        Self { z_threshold: 1.645 }
    }
}

impl DemyelinationParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.z_threshold > 0.0 && self.z_threshold.is_finite()) {
            return Err(Error::Config(format!(
                "z_threshold must be > 0, got {}",
                self.z_threshold
            )));
        }
        Ok(())
    }

    pub fn threshold(&self, nawm_mean: f64, nawm_sd: f64) -> f64 {
        nawm_mean - self.z_threshold * nawm_sd
    }
}

/// Binary map of demyelinated lesion voxels.
pub fn classify_demyelinated(
    dvr: &DvrMap,
    masks: &RoiMasks,
    params: &DemyelinationParams,
) -> Result<Volume3D> {
    params.validate()?;
    if dvr.dims() != masks.dims() {
        return Err(Error::Dims(format!(
            "dvr {:?} vs masks {:?}",
            dvr.dims(),
            masks.dims()
        )));
    }
    if masks.lesion.count_set() == 0 {
        return Err(Error::EmptyRegion("no lesion voxels to classify".into()));
    }
    let nawm: Vec<f64> = (0..dvr.len())
        .filter(|&i| masks.nawm.is_set(i))
        .map(|i| f64::from(dvr.values()[i]))
        .collect();
    if nawm.is_empty() {
        return Err(Error::EmptyRegion(
            "no NAWM voxels for the reference distribution".into(),
        ));
    }
    let mean = nawm.iter().sum::<f64>() / nawm.len() as f64;
    let sd = (nawm.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / nawm.len() as f64).sqrt();
    let threshold = params.threshold(mean, sd);
    Ok(Volume3D::mask_from(dvr, |i| {
        masks.lesion.is_set(i) && f64::from(dvr.values()[i]) < threshold
    }))
}

/// Flagged voxels over lesion load.
pub fn demyelination_percentage(flags: &Volume3D, masks: &RoiMasks) -> Result<f64> {
    if flags.dims() != masks.dims() {
        return Err(Error::Dims(format!(
            "flags {:?} vs masks {:?}",
            flags.dims(),
            masks.dims()
        )));
    }
    let lesion = masks.lesion.count_set();
    if lesion == 0 {
        return Err(Error::EmptyRegion("no lesion voxels".into()));
    }
    if let Some(i) = (0..flags.len()).find(|&i| flags.is_set(i) && !masks.lesion.is_set(i)) {
        return Err(Error::Dims(format!(
            "flag at voxel {i} lies outside the lesion mask"
        )));
    }
    Ok(flags.count_set() as f64 / lesion as f64)
}

/// `2|A∩B| / (|A|+|B|)`, with 1 when both maps are empty.
pub fn dice(a: &Volume3D, b: &Volume3D) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::Dims(format!("{:?} vs {:?}", a.dims(), b.dims())));
    }
    let (na, nb) = (a.count_set(), b.count_set());
    if na + nb == 0 {
        return Ok(1.0);
    }
    let both = (0..a.len()).filter(|&i| a.is_set(i) && b.is_set(i)).count();
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Agreement {
    BothDemyelinated,
    BothNormal,
    TruthOnly,
    PredictionOnly,
}

impl Agreement {
    pub const ALL: [Agreement; 4] = [
        Agreement::BothDemyelinated,
        Agreement::BothNormal,
        Agreement::TruthOnly,
        Agreement::PredictionOnly,
    ];

    /// Volume code; 0 is reserved for voxels outside lesions.
    pub fn code(self) -> u8 {
        match self {
            Agreement::BothDemyelinated => 1,
            Agreement::BothNormal => 2,
            Agreement::TruthOnly => 3,
            Agreement::PredictionOnly => 4,
        }
    }

    /// Yellow, white, red and orange.
    pub fn color(self) -> &'static str {
        match self {
            Agreement::BothDemyelinated => "#ffd700",
            Agreement::BothNormal => "#ffffff",
            Agreement::TruthOnly => "#d62728",
            Agreement::PredictionOnly => "#ff8c00",
        }
    }
}

/// Per-lesion-voxel agreement between truth- and prediction-derived flags.
#[derive(Debug, Clone, PartialEq)]
pub struct AgreementMap {
    pub dims: [usize; 3],
    /// `None` outside the lesion mask.
    pub categories: Vec<Option<Agreement>>,
}

impl AgreementMap {
    pub fn count(&self, a: Agreement) -> usize {
        self.categories.iter().filter(|c| **c == Some(a)).count()
    }

    /// Categorical volume with [`Agreement::code`] values.
    pub fn to_volume(&self, like: &Volume3D) -> Volume3D {
        let codes: Vec<f32> = self
            .categories
            .iter()
            .map(|c| c.map_or(0.0, |a| f32::from(a.code())))
            .collect();
        Volume3D::new(like.dims(), like.spacing(), codes).expect("same grid")
    }
}

pub fn agreement_map(truth: &Volume3D, pred: &Volume3D, masks: &RoiMasks) -> Result<AgreementMap> {
    if truth.dims() != pred.dims() || truth.dims() != masks.dims() {
        return Err(Error::Dims("flag maps and masks must share dims".into()));
    }
    let categories = (0..truth.len())
        .map(|i| {
            if !masks.lesion.is_set(i) {
                return None;
            }
            Some(match (truth.is_set(i), pred.is_set(i)) {
                (true, true) => Agreement::BothDemyelinated,
                (false, false) => Agreement::BothNormal,
                (true, false) => Agreement::TruthOnly,
                (false, true) => Agreement::PredictionOnly,
            })
        })
        .collect();
    Ok(AgreementMap {
        dims: truth.dims(),
        categories,
    })
}

/// Mean absolute difference over a mask (or every voxel with `None`).
pub fn mean_absolute_error(a: &DvrMap, b: &DvrMap, mask: Option<&Volume3D>) -> Result<f64> {
    if a.dims() != b.dims() || mask.is_some_and(|m| m.dims() != a.dims()) {
        return Err(Error::Dims("maps must share dims".into()));
    }
    let mut sum = 0.0;
    let mut n = 0usize;
    for i in 0..a.len() {
        if mask.is_none_or(|m| m.is_set(i)) {
            sum += (f64::from(a.values()[i]) - f64::from(b.values()[i])).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptyRegion("mask selects no voxels".into()));
    }
    Ok(sum / n as f64)
}

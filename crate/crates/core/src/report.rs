//! Evaluation reports: per-subject ROI records for the reference and the
//! predicted maps, group rank tests, demyelination percentages and Dice.

use std::fmt::Write as _;

use crate::config::Provenance;
use crate::error::Result;
use crate::eval::{
    self, AgreementMap, DemyelinationParams, GroupComparison, Roi, RoiStats, Source,
};
use crate::volume::{DvrMap, Region, RoiMasks};

/// Demyelination of one patient, derived by the same rule from both maps.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DemyelinationRecord {
    pub truth_percent: f64,
    pub predicted_percent: f64,
    pub dice: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubjectEval {
    pub id: String,
    pub is_patient: bool,
    pub truth: RoiStats,
    pub predicted: RoiStats,
    pub demyelination: Option<DemyelinationRecord>,
}

/// Evaluates a predicted map against the reference map of one subject.
/// Also returns the agreement map for patients with lesions.
pub fn evaluate_subject(
    id: &str,
    is_patient: bool,
    masks: &RoiMasks,
    truth: &DvrMap,
    predicted: &DvrMap,
    params: &DemyelinationParams,
) -> Result<(SubjectEval, Option<AgreementMap>)> {
    let truth_stats = eval::roi_statistics(truth, masks, is_patient, id, Source::Truth)?;
    let pred_stats = eval::roi_statistics(predicted, masks, is_patient, id, Source::Predicted)?;
    let (demyelination, agreement) = if is_patient && masks.count(Region::Lesion) > 0 {
        let t = eval::classify_demyelinated(truth, masks, params)?;
        let p = eval::classify_demyelinated(predicted, masks, params)?;
        (
            Some(DemyelinationRecord {
                truth_percent: eval::demyelination_percentage(&t, masks)?,
                predicted_percent: eval::demyelination_percentage(&p, masks)?,
                dice: eval::dice(&t, &p)?,
            }),
            Some(eval::agreement_map(&t, &p, masks)?),
        )
    } else {
        (None, None)
    };
    Ok((
        SubjectEval {
            id: id.to_string(),
            is_patient,
            truth: truth_stats,
            predicted: pred_stats,
            demyelination,
        },
        agreement,
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvaluationReport {
    pub provenance: Provenance,
    pub subjects: Vec<SubjectEval>,
    /// `None` when a group has fewer than two subjects.
    pub truth_groups: Option<GroupComparison>,
    pub predicted_groups: Option<GroupComparison>,
}

impl EvaluationReport {
    pub fn new(provenance: Provenance, subjects: Vec<SubjectEval>) -> Self {
        let groups = |source: Source| {
            let pick = |patient: bool| -> Vec<RoiStats> {
                subjects
                    .iter()
                    .filter(|s| s.is_patient == patient)
                    .map(|s| match source {
                        Source::Truth => s.truth.clone(),
                        Source::Predicted => s.predicted.clone(),
                    })
                    .collect()
            };
            eval::group_comparison(&pick(true), &pick(false)).ok()
        };
        Self {
            provenance,
            truth_groups: groups(Source::Truth),
            predicted_groups: groups(Source::Predicted),
            subjects,
        }
    }

    pub fn groups(&self, source: Source) -> Option<&GroupComparison> {
        match source {
            Source::Truth => self.truth_groups.as_ref(),
            Source::Predicted => self.predicted_groups.as_ref(),
        }
    }

    /// Mean over patients of the per-subject Dice.
    pub fn mean_dice(&self) -> Option<f64> {
        let d: Vec<f64> = self
            .subjects
            .iter()
            .filter_map(|s| s.demyelination.map(|d| d.dice))
            .collect();
        (!d.is_empty()).then(|| d.iter().sum::<f64>() / d.len() as f64)
    }

    /// Report text: provenance, one `record` line per subject per source,
    /// then the summary block.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#sketch-refine-report v1");
        let _ = writeln!(out, "config_hash\t{}", self.provenance.config_hash);
        let _ = writeln!(out, "seed\t{}", self.provenance.seed);
        let _ = writeln!(out, "[records]");
        let _ = writeln!(
            out,
            "record\tid\tsource\tgroup\troi\tmean\tmedian\tmin\tmax\tcount"
        );
        for s in &self.subjects {
            for stats in [&s.truth, &s.predicted] {
                let mut line = format!(
                    "record\t{}\t{}\t{}",
                    s.id,
                    stats.source,
                    if s.is_patient { "patient" } else { "control" }
                );
                for (roi, sum) in &stats.rois {
                    let _ = write!(
                        line,
                        "\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}",
                        roi.name(),
                        sum.mean,
                        sum.median,
                        sum.min,
                        sum.max,
                        sum.count
                    );
                }
                let _ = writeln!(out, "{line}");
            }
        }
        let _ = writeln!(out, "[summary]");
        for source in [Source::Truth, Source::Predicted] {
            match self.groups(source) {
                Some(g) => {
                    for (roi, m) in &g.group_means {
                        let _ = writeln!(out, "group_mean\t{source}\t{}\t{m:.6}", roi.name());
                    }
                    for (name, t) in [
                        ("nawm_vs_wm_hc", &g.nawm_vs_wm_hc),
                        ("lesion_vs_nawm", &g.lesion_vs_nawm),
                    ] {
                        let _ = writeln!(
                            out,
                            "rank_test\t{source}\t{name}\tu={}\tn1={}\tn2={}\tp={:.6e}\t{}",
                            t.u,
                            t.n1,
                            t.n2,
                            t.p_value,
                            if t.exact { "exact" } else { "normal" }
                        );
                    }
                }
                None => {
                    let _ = writeln!(out, "rank_test\t{source}\tunavailable");
                }
            }
        }
        for s in &self.subjects {
            if let Some(d) = s.demyelination {
                let _ = writeln!(
                    out,
                    "demyelination\t{}\ttruth={:.6}\tpredicted={:.6}\tdice={:.6}",
                    s.id, d.truth_percent, d.predicted_percent, d.dice
                );
            }
        }
        match self.mean_dice() {
            Some(d) => {
                let _ = writeln!(out, "mean_dice\t{d:.6}");
            }
            None => {
                let _ = writeln!(out, "mean_dice\tunavailable");
            }
        }
        out
    }

    /// Subject-level mean DVR per ROI for one source.
    pub fn roi_means(&self, source: Source, roi: Roi) -> Vec<(String, f64)> {
        self.subjects
            .iter()
            .filter_map(|s| {
                let stats = match source {
                    Source::Truth => &s.truth,
                    Source::Predicted => &s.predicted,
                };
                stats.get(roi).map(|x| (s.id.clone(), x.mean))
            })
            .collect()
    }
}

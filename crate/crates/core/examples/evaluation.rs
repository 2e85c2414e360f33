//! Evaluates a degraded copy of each reference map: ROI statistics, group
//! rank tests, demyelination percentages, Dice and the report figures.
//!
//! cargo run --release --example evaluation -- [out_dir]

use std::fs;
use std::path::PathBuf;

use sketch_refine::config::Provenance;
use sketch_refine::eval::{DemyelinationParams, Source};
use sketch_refine::phantom::{generate_cohort, PhantomSpec};
use sketch_refine::plots;
use sketch_refine::report::{evaluate_subject, EvaluationReport};
use sketch_refine::volume::DvrMap;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let out = PathBuf::from(
        std::env::args()
            .nth(1)
            .unwrap_or_else(|| "target/evaluation-example".into()),
    );
    fs::create_dir_all(&out)?;
    let params = DemyelinationParams::default();
    let cohort = generate_cohort(&PhantomSpec::default(), 6, 4)?;
    let mut subjects = Vec::new();
    let mut agreements = Vec::new();
    for s in &cohort {
        let degraded: Vec<f64> = s
            .dvr
            .to_f64()
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.05 * ((i % 7) as f64 - 3.0) / 3.0)
            .collect();
        let predicted = DvrMap::from_f64(&s.dvr, &degraded)?;
        let (eval, agreement) =
            evaluate_subject(&s.id, s.is_patient, &s.masks, &s.dvr, &predicted, &params)?;
        if let Some(a) = agreement {
            agreements.push((s.id.clone(), a));
        }
        subjects.push(eval);
    }
    let provenance = Provenance {
        config_hash: "example".into(),
        seed: 2019,
    };
    let report = EvaluationReport::new(provenance.clone(), subjects);
    print!("{}", report.to_text());
    for source in [Source::Truth, Source::Predicted] {
        if let Some(g) = report.groups(source) {
            println!(
                "{source}: lesion vs NAWM p = {:.2e}",
                g.lesion_vs_nawm.p_value
            );
        }
    }
    fs::write(out.join("roi_boxplot.svg"), plots::roi_box_plot(&report))?;
    fs::write(out.join("subject_lines.svg"), plots::subject_lines(&report))?;
    fs::write(
        out.join("demyelination_bars.svg"),
        plots::demyelination_bars(&report),
    )?;
    for (id, map) in &agreements {
        fs::write(
            out.join(format!("agreement_{id}.svg")),
            plots::agreement_slice(map, plots::busiest_slice(map), id, &provenance),
        )?;
    }
    println!("figures written to {}", out.display());
    Ok(())
}

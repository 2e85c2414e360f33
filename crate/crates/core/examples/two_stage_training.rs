//! Trains the sketcher, the refiner and the two-layer baseline on a small
//! 16^3 cohort and compares their errors on held-out subjects.
//!
//! cargo run --release --example two_stage_training

use sketch_refine::eval::DemyelinationParams;
use sketch_refine::nets::{DiscriminatorConfig, GeneratorConfig};
use sketch_refine::phantom::{generate_cohort, PhantomSpec};
use sketch_refine::train::{self, TrainConfig};

fn main() -> sketch_refine::Result<()> {
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        lesion_radius_range: (1.5, 2.5),
        ..PhantomSpec::default()
    };
    let cohort = generate_cohort(&spec, 8, 4)?;
    let (held_out, training) = cohort.split_at(3);
    let generator = GeneratorConfig {
        base_filters: 4,
        depth: 2,
        ..GeneratorConfig::default()
    };
    let cfg = TrainConfig {
        epochs: 10,
        lr_sketcher: 1e-3,
        lr_refiner: 1e-3,
        validation_fraction: 0.0,
        patience: 0,
        sketcher: generator.clone(),
        refiner: GeneratorConfig {
            in_channels: 5,
            ..generator
        },
        discriminator: DiscriminatorConfig {
            base_filters: 4,
            patch_dims: [8, 8, 8],
            allow_reduced_downsampling: true,
            ..DiscriminatorConfig::default()
        },
        ..TrainConfig::default()
    };
    let models = train::train_all(training, &cfg, "")?;
    println!(
        "sketcher: {} epochs, refiner: {} epochs",
        models.sketcher.log.len(),
        models.refiner.log.len()
    );
    let held: Vec<_> = held_out.iter().collect();
    for r in train::evaluate_subjects(&models, &held, &DemyelinationParams::default())? {
        println!(
            "{}: MAE sketch {:.4}, refined {:.4}, baseline {:.4}; lesion MAE sketch {}, refined {}",
            r.eval.id,
            r.mae_sketch,
            r.mae_refined,
            r.mae_baseline,
            r.lesion_mae_sketch
                .map_or("-".into(), |v| format!("{v:.4}")),
            r.lesion_mae_refined
                .map_or("-".into(), |v| format!("{v:.4}"))
        );
    }
    Ok(())
}

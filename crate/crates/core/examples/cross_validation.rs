//! Runs a small 3-fold cross-validation and prints the per-fold summary.
//!
//! cargo run --release --example cross_validation

use sketch_refine::cli::fold_summary;
use sketch_refine::config::RunConfig;
use sketch_refine::manifest::DatasetManifest;
use sketch_refine::{cli, train};

const CONFIG: &str = r#"
seed = 5

[cohort]
patients = 6
controls = 3

[phantom]
dims = [16, 16, 16]
lesion_radius_range = [1.5, 2.5]

[train]
epochs = 4
patience = 0
validation_fraction = 0.0
lr_sketcher = 1e-3
lr_refiner = 1e-3

[train.sketcher]
base_filters = 4
depth = 2

[train.refiner]
in_channels = 5
base_filters = 4
depth = 2

[train.discriminator]
base_filters = 4
"#;

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let cfg = RunConfig::from_toml_str(CONFIG)?;
    let dir = std::env::temp_dir().join(format!("sketch-refine-cv-{}", std::process::id()));
    let manifest = cli::cmd_phantom_gen(&cfg, &dir)?;
    let subjects = DatasetManifest::load(&manifest)?.load_subjects()?;
    let folds = train::cross_validate(
        &subjects,
        &cfg.train,
        3,
        &cfg.demyelination,
        &cfg.canonical_text(),
    )?;
    print!(
        "{}",
        fold_summary(&sketch_refine::config::Provenance::of(&cfg), &folds)
    );
    let report = train::aggregate_report(sketch_refine::config::Provenance::of(&cfg), &folds);
    println!("mean Dice over held-out patients: {:?}", report.mean_dice());
    std::fs::remove_dir_all(&dir)?;
    Ok(())
}

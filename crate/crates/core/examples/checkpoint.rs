//! Trains a tiny sketcher, saves it, reloads it and checks that predictions
//! are bitwise identical.
//!
//! cargo run --release --example checkpoint

use sketch_refine::checkpoint::Checkpoint;
use sketch_refine::nets::{self, GeneratorConfig};
use sketch_refine::phantom::{generate_cohort, PhantomSpec};
use sketch_refine::train::{self, TrainConfig};

fn main() -> sketch_refine::Result<()> {
    let spec = PhantomSpec {
        dims: [16, 16, 16],
        lesion_radius_range: (1.5, 2.5),
        ..PhantomSpec::default()
    };
    let cohort = generate_cohort(&spec, 2, 1)?;
    let cfg = TrainConfig {
        epochs: 2,
        validation_fraction: 0.0,
        sketcher: GeneratorConfig {
            base_filters: 2,
            depth: 2,
            ..GeneratorConfig::default()
        },
        ..TrainConfig::default()
    };
    let run = train::train_sketcher(&cohort, &cfg, "")?;
    let path = std::env::temp_dir().join(format!("sketch-refine-{}.ckpt", std::process::id()));
    run.checkpoint.save(&path)?;
    let loaded = Checkpoint::load(&path)?;
    println!(
        "{}: stage {}, {} epochs, {} parameter blocks",
        path.display(),
        loaded.stage.name(),
        loaded.epochs_run,
        loaded.graphs.iter().map(|g| g.blocks.len()).sum::<usize>()
    );
    let stack = &cohort[0].stack;
    let before = nets::generator_forward(&run.checkpoint.generator()?, stack, &[], None)?;
    let after = nets::generator_forward(&loaded.generator()?, stack, &[], None)?;
    println!(
        "predictions bitwise identical after reload: {}",
        before == after
    );
    std::fs::remove_file(&path).map_err(|e| sketch_refine::Error::Config(e.to_string()))?;
    Ok(())
}

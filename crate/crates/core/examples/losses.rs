//! Evaluates every training loss on small hand-made inputs.
//!
//! cargo run --release --example losses

use sketch_refine::losses::{self, AdversarialForm, EmptyRegionPolicy, L1Normalization};
use sketch_refine::volume::Region;

fn main() -> sketch_refine::Result<()> {
    let pred = [0.4, 0.1, 0.3, 0.2];
    let target = [0.0; 4];
    let labels = [Region::Lesion, Region::Nawm, Region::Nawm, Region::Other];

    let sketch = losses::l1_sketcher(&[&pred], &[&target], L1Normalization::VoxelMean)?;
    println!("sketcher L1 (voxel mean): {sketch}");

    let refine =
        losses::weighted_l1_refiner(&[&pred], &[&target], &[&labels], EmptyRegionPolicy::Error)?;
    println!(
        "refiner region-weighted L1: {} (lesion, nawm, other terms {:?})",
        refine.total, refine.per_region
    );

    let real = [0.9, 0.8, 0.7];
    let fake = [0.2, 0.4, 0.6];
    println!(
        "patch discriminator loss: {:.6}",
        losses::patch_discriminator_loss(&real, &fake)?
    );
    for form in [AdversarialForm::Minimax, AdversarialForm::NonSaturating] {
        println!(
            "generator adversarial loss ({form:?}): {:.6}",
            losses::generator_adversarial_loss(&fake, form)
        );
    }
    println!(
        "total objective with lambda 100: {:.6}",
        losses::total_objective(
            losses::generator_adversarial_loss(&fake, AdversarialForm::Minimax),
            refine.total,
            100.0
        )
    );
    Ok(())
}

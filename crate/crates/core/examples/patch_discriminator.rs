//! Builds the patch discriminator, classifies a 32^3 (condition, candidate)
//! volume as eight 16^3 patches and shows that swapping two patch blocks
//! swaps their outputs.
//!
//! cargo run --release --example patch_discriminator

use sketch_refine::nets::{build_patch_discriminator, DiscriminatorConfig, Tensor};

fn main() -> sketch_refine::Result<()> {
    let d = build_patch_discriminator(&DiscriminatorConfig::default(), 1)?;
    let dims = [32, 32, 32];
    let len = 5 * 32 * 32 * 32;
    let x = Tensor::from_vec(
        [1, 5, 32, 32, 32],
        (0..len)
            .map(|i| ((i * 7919) % 1009) as f64 / 1009.0)
            .collect(),
    );
    let probs = d.forward(&x)?;
    println!(
        "{} patches, P(real) = {:?}",
        probs.len(),
        probs.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>()
    );

    let grid = d.patch_grid(dims)?;
    let (a, b) = (0, 7);
    let mut swapped = x.clone();
    let mut va = Vec::new();
    let mut vb = Vec::new();
    grid.for_each_voxel(a, dims, |_, i| va.push(i));
    grid.for_each_voxel(b, dims, |_, i| vb.push(i));
    for c in 0..5 {
        let src = x.plane(0, c).to_vec();
        let dst = swapped.plane_mut(0, c);
        for (&i, &j) in va.iter().zip(&vb) {
            dst[i] = src[j];
            dst[j] = src[i];
        }
    }
    let after = d.forward(&swapped)?;
    println!(
        "after swapping patches {a} and {b}: {:?}",
        after.iter().map(|p| format!("{p:.4}")).collect::<Vec<_>>()
    );
    Ok(())
}

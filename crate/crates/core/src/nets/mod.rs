//! Networks with explicit forward and backward passes in f64.

pub mod baseline;
pub mod discriminator;
pub mod generator;
pub mod ops;
pub mod params;
pub mod tensor;

pub use baseline::{build_baseline_2layer, BaselineConfig, VoxelMlp};
pub use discriminator::{
    build_patch_discriminator, Discriminator, DiscriminatorCache, DiscriminatorConfig,
};
pub use generator::{build_generator, Generator, GeneratorCache, GeneratorConfig};
pub use params::{ForwardSignature, Grads, ParamBlock, ParamGraph};
pub use tensor::Tensor;

use crate::error::{Error, Result};
use crate::volume::{DvrMap, MultimodalStack, Volume3D};

/// Single-item tensor from a channel stack, optionally followed by extra
/// single-channel volumes (the sketch for the refiner).
pub fn stack_tensor(stack: &MultimodalStack, extra: &[&Volume3D]) -> Result<Tensor> {
    let [nx, ny, nz] = stack.dims();
    let mut data = stack.to_f64();
    for v in extra {
        if v.dims() != stack.dims() {
            return Err(Error::Dims(format!(
                "extra channel {:?} vs stack {:?}",
                v.dims(),
                stack.dims()
            )));
        }
        data.extend(v.to_f64());
    }
    Ok(Tensor::from_vec([1, 4 + extra.len(), nz, ny, nx], data))
}

pub fn volume_tensor(v: &Volume3D) -> Tensor {
    let [nx, ny, nz] = v.dims();
    Tensor::from_vec([1, 1, nz, ny, nx], v.to_f64())
}

/// Runs a generator on a channel stack (plus optional extra channels).
pub fn generator_forward(
    g: &Generator,
    stack: &MultimodalStack,
    extra: &[&Volume3D],
    dropout: Option<&mut rand_chacha::ChaCha8Rng>,
) -> Result<DvrMap> {
    let y = g.forward(&stack_tensor(stack, extra)?, dropout)?;
    Volume3D::from_f64(stack.reference(), y.data())
}

/// Per-patch probability of "real" for a (condition, candidate) pair.
pub fn discriminator_forward(
    d: &Discriminator,
    condition: &MultimodalStack,
    candidate: &DvrMap,
) -> Result<Vec<f64>> {
    if candidate.dims() != condition.dims() {
        return Err(Error::Dims(format!(
            "candidate {:?} vs condition {:?}",
            candidate.dims(),
            condition.dims()
        )));
    }
    d.forward(&stack_tensor(condition, &[candidate])?)
}

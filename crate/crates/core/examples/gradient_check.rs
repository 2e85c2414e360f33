//! Compares the analytic gradient of the sketcher L1 loss through a
//! two-level generator with central finite differences.
//!
//! cargo run --release --example gradient_check

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sketch_refine::losses::{self, gradcheck::relative_error, L1Normalization};
use sketch_refine::nets::{build_generator, GeneratorConfig, Grads, Tensor};

fn main() -> sketch_refine::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let cfg = GeneratorConfig {
        base_filters: 4,
        depth: 2,
        ..GeneratorConfig::default()
    };
    let g = build_generator(&cfg, 1)?;
    let x = Tensor::from_vec(
        [1, 4, 16, 16, 16],
        (0..4 * 4096).map(|_| rng.random_range(0.0..1.0)).collect(),
    );
    let (y, cache) = g.forward_cached(&x, None)?;
    let target: Vec<f64> = y
        .data()
        .iter()
        .map(|v| v + rng.random_range(0.1..0.5))
        .collect();
    let (_, gy) = losses::l1_sketcher_grad(&[y.data()], &[&target], L1Normalization::VoxelMean)?;
    let grads = g.backward(&cache, &Tensor::from_vec(y.shape(), gy[0].clone()));
    let loss = |gen: &sketch_refine::nets::Generator| -> sketch_refine::Result<f64> {
        let y = gen.forward(&x, None)?;
        losses::l1_sketcher(&[y.data()], &[&target], L1Normalization::VoxelMean)
    };
    let h = 1e-7;
    for k in 0..5 {
        let dir = Grads::random_direction(g.graph(), &mut rng);
        let plus = loss(&g.with_graph(g.graph().shifted(&dir, h))?)?;
        let minus = loss(&g.with_graph(g.graph().shifted(&dir, -h))?)?;
        let fd = (plus - minus) / (2.0 * h);
        let an = grads.dot(&dir);
        println!(
            "direction {k}: analytic {an:.8e}, finite difference {fd:.8e}, rel err {:.2e}",
            relative_error(fd, an)
        );
    }
    Ok(())
}

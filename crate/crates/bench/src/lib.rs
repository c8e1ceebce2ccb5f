//! Deterministic inputs shared by the benchmarks.

use resihide_core::training::{sample_batch, AudioCorpus, Batch, ImageCorpus, TrainingConfig};
use resihide_core::{ModelConfig, StageModels, Tensor, Variant};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Fresh models at the toy-fixture size with perturbed heads, so the
/// reveal path does real work.
pub fn models(variant: Variant, stages: usize, width: usize) -> StageModels<f32> {
    let mut m = StageModels::init(ModelConfig {
        stages,
        blocks: 2,
        width,
        variant,
        seed: 7,
    })
    .expect("valid config");
    for p in m.param_slices_mut() {
        for (k, v) in p.iter_mut().enumerate() {
            *v += 1e-3 * ((k % 13) as f32 - 6.0);
        }
    }
    m
}

pub fn batch(stages: usize, side: usize, size: usize) -> Batch {
    let mut config = TrainingConfig::default().with_stages(stages);
    config.patch = side;
    config.batch_size = size;
    let images = ImageCorpus::synthetic(8, side, 1);
    let audio = AudioCorpus::synthetic(2, 4 * stages * side * side, 1);
    sample_batch(&images, &audio, &config, &mut ChaCha8Rng::seed_from_u64(3)).expect("corpus fits")
}

/// Uniform noise image in [0, 1].
pub fn image(side: usize, seed: u64) -> Tensor<f32> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..3 * side * side).map(|_| rng.random::<f32>()).collect();
    Tensor::from_vec(3, side, side, data).expect("length matches")
}

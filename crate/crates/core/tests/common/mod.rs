//! Fixtures shared by the integration test targets.

#![allow(dead_code)]

use qcea::data::{generate_synthetic, DatasetBundle, SyntheticSpec};
use qcea::graph::Direction;
use qcea::rng::{substream, Stream};
use qcea::training::{training_examples, Sampler, SamplingConfig, TrainBatch};

/// Four entities per side, two type families, every anchor in train.
pub fn tiny_fd_bundle(seed: u64) -> DatasetBundle {
    let spec = SyntheticSpec {
        tcm_entities: 4,
        wm_entities: 4,
        anchor_pairs: 3,
        many_to_many_fraction: 0.0,
        neighbors_per_entity: 1,
        latent_dim: 2,
        query_dim: 3,
        tcm_dim: 4,
        wm_dim: 5,
        noise: 0.1,
        split_ratios: [1.0, 0.0, 0.0],
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).expect("tiny fixture is feasible")
}

/// One batch per direction covering every training example.
pub fn full_batches(bundle: &DatasetBundle, positives: usize, negatives: usize, seed: u64) -> Vec<TrainBatch> {
    let sampler = Sampler::new(bundle, SamplingConfig { positives, negatives }, None).unwrap();
    let mut rng = substream(seed, Stream::Test);
    Direction::BOTH
        .iter()
        .filter_map(|&dir| {
            let ex = training_examples(bundle, dir, None);
            (!ex.is_empty()).then(|| sampler.sample_batch(dir, &ex, &mut rng).unwrap())
        })
        .collect()
}


//! Seeded inputs shared by the benchmarks.

use hybridq::exec::softmax;
use hybridq::fixtures::random_tree;
use hybridq::{ModuleNode, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn weights(n: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::vector((0..n).map(|_| rng.gen_range(-1.0f32..=1.0)).collect()).unwrap()
}

/// `rows` softmax-normalised rows of width `cols`.
pub fn attention_probs(rows: usize, cols: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let logits = (0..rows * cols)
        .map(|_| rng.gen_range(-4.0f32..=4.0))
        .collect();
    softmax(&Tensor::from_vec(vec![rows, cols], logits).unwrap()).unwrap()
}

/// Draws trees until one has at least `min_nodes` nodes.
pub fn large_tree(min_nodes: usize, seed: u64) -> ModuleNode {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    loop {
        let t = random_tree(&mut rng, min_nodes * 2, 6);
        if t.count() >= min_nodes {
            return t;
        }
    }
}

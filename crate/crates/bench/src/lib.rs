//! Shared inputs for the benchmarks.

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use spangrad::audit::random_matrix;
use spangrad::Matrix;

/// Seeded `(q, k, v, upstream)` with upstream shaped like the attention output.
pub fn attention_inputs(seed: u64, t: usize, d: usize) -> (Matrix, Matrix, Matrix, Matrix) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (
        random_matrix(&mut rng, t, d),
        random_matrix(&mut rng, t, d),
        random_matrix(&mut rng, t, d),
        random_matrix(&mut rng, t, d),
    )
}

/// Seeded square score gradient.
pub fn score_gradient(seed: u64, t: usize) -> Array2<f64> {
    random_matrix(&mut ChaCha8Rng::seed_from_u64(seed), t, t)
}

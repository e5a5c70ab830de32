//! Inputs shared by the attention benchmarks.

use gistkv::attention::{AttentionTensors, Scalar};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Uniform random q, k, v in [-0.5, 0.5) plus an upstream gradient of the same shape.
pub fn random_inputs<F: Scalar>(len: usize, heads: usize, head_dim: usize, seed: u64) -> (AttentionTensors<F>, Vec<F>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = len * heads * head_dim;
    let mut draw = || (0..n).map(|_| F::from_f64_lossy(rng.random::<f64>() - 0.5)).collect::<Vec<F>>();
    let (q, k, v, d_o) = (draw(), draw(), draw(), draw());
    let x = AttentionTensors::new(q, k, v, len, heads, head_dim).expect("consistent shapes");
    (x, d_o)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shapes_and_determinism() {
        let (a, g) = random_inputs::<f32>(16, 2, 4, 1);
        let (b, _) = random_inputs::<f32>(16, 2, 4, 1);
        assert_eq!(a.q.len(), 128);
        assert_eq!(g.len(), 128);
        assert_eq!(a.q, b.q);
    }
}

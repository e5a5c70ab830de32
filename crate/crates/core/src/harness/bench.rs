use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attended_entry_count, sparse_backward, sparse_forward, AttentionTensors, BlockPattern, CausalLayout, Scalar,
};
use crate::error::Result;
use crate::gistshift::BlockLayout;
use crate::layout::CompressionConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BenchRecord {
    #[serde(rename = "T")]
    pub len: usize,
    pub ratio: usize,
    pub direction: Direction,
    pub sparse_entries: u64,
    pub dense_entries: u64,
    pub entry_ratio: f64,
    /// Median wall-clock milliseconds; 0 when the length was above the timing cap.
    pub host_ms_sparse: f64,
    pub host_ms_dense: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchOptions {
    pub lengths: Vec<usize>,
    pub ratios: Vec<usize>,
    pub block_size: usize,
    pub sink_count: usize,
    pub window_units: usize,
    pub repeats: usize,
    /// Lengths above this get entry counts only.
    pub max_timed_len: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub precision: Precision,
    pub seed: u64,
}

impl Default for BenchOptions {
    fn default() -> Self {
        Self {
            lengths: vec![16384, 32768, 65536, 131072],
            ratios: vec![4, 8],
            block_size: 64,
            sink_count: 128,
            window_units: 32,
            repeats: 3,
            max_timed_len: 16384,
            heads: 1,
            head_dim: 64,
            precision: Precision::F32,
            seed: 0,
        }
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

fn random_tensors<F: Scalar>(len: usize, heads: usize, d: usize, rng: &mut ChaCha8Rng) -> AttentionTensors<F> {
    let n = len * heads * d;
    let mut draw = || (0..n).map(|_| F::from_f64_lossy(rng.random::<f64>() - 0.5)).collect::<Vec<F>>();
    let (q, k, v) = (draw(), draw(), draw());
    AttentionTensors::new(q, k, v, len, heads, d).expect("consistent shapes")
}

/// Median forward and backward milliseconds of one attention layer under `pattern`.
fn time_pattern<F: Scalar, P: BlockPattern>(pattern: &P, opts: &BenchOptions, rng: &mut ChaCha8Rng) -> Result<(f64, f64)> {
    let x = random_tensors::<F>(pattern.padded_len(), opts.heads, opts.head_dim, rng);
    let d_o: Vec<F> = (0..x.q.len()).map(|_| F::from_f64_lossy(rng.random::<f64>() - 0.5)).collect();
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    for _ in 0..opts.repeats.max(1) {
        let t0 = Instant::now();
        let out = sparse_forward(&x, pattern)?;
        fwd.push(t0.elapsed().as_secs_f64() * 1e3);
        let t1 = Instant::now();
        let g = sparse_backward(&x, &out, &d_o, pattern)?;
        bwd.push(t1.elapsed().as_secs_f64() * 1e3);
        std::hint::black_box(g);
    }
    Ok((median(fwd), median(bwd)))
}

/// Entry counts for every (T, r) pair, plus host timings up to `max_timed_len`.
pub fn bench(opts: &BenchOptions) -> Result<Vec<BenchRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = Vec::new();
    for &len in &opts.lengths {
        for &ratio in &opts.ratios {
            let cfg = CompressionConfig::new(ratio, opts.sink_count, opts.window_units, opts.block_size)?;
            let count = attended_entry_count(len, &cfg)?;
            let (mut sparse_ms, mut dense_ms) = ((0.0, 0.0), (0.0, 0.0));
            if len <= opts.max_timed_len {
                let layout = BlockLayout::new(&cfg, len)?;
                let causal = CausalLayout::new(len, opts.block_size);
                (sparse_ms, dense_ms) = match opts.precision {
                    Precision::F32 => (
                        time_pattern::<f32, _>(&layout, opts, &mut rng)?,
                        time_pattern::<f32, _>(&causal, opts, &mut rng)?,
                    ),
                    Precision::F64 => (
                        time_pattern::<f64, _>(&layout, opts, &mut rng)?,
                        time_pattern::<f64, _>(&causal, opts, &mut rng)?,
                    ),
                };
            }
            for (direction, s, d) in [
                (Direction::Forward, sparse_ms.0, dense_ms.0),
                (Direction::Backward, sparse_ms.1, dense_ms.1),
            ] {
                out.push(BenchRecord {
                    len,
                    ratio,
                    direction,
                    sparse_entries: count.sparse,
                    dense_entries: count.dense,
                    entry_ratio: count.ratio(),
                    host_ms_sparse: s,
                    host_ms_dense: d,
                });
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_arithmetic_and_counts() {
        let opts = BenchOptions {
            lengths: vec![16384, 131072],
            ratios: vec![4, 8],
            max_timed_len: 0,
            ..BenchOptions::default()
        };
        let rows = bench(&opts).unwrap();
        assert_eq!(rows.len(), 8);
        assert!(rows.iter().all(|r| r.entry_ratio > 0.0 && r.host_ms_sparse == 0.0));
        let r4 = rows.iter().find(|r| r.len == 131072 && r.ratio == 4).unwrap();
        assert!((3.0..=3.4).contains(&r4.entry_ratio));
    }

    #[test]
    fn timed_rows_are_finite() {
        let opts = BenchOptions {
            lengths: vec![512],
            ratios: vec![4],
            block_size: 16,
            sink_count: 4,
            window_units: 2,
            repeats: 1,
            max_timed_len: 512,
            heads: 1,
            head_dim: 8,
            ..BenchOptions::default()
        };
        for r in bench(&opts).unwrap() {
            assert!(r.host_ms_sparse > 0.0 && r.host_ms_dense > 0.0);
            assert!(r.host_ms_sparse.is_finite() && r.host_ms_dense.is_finite());
        }
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
        assert_eq!(median(vec![]), 0.0);
    }
}

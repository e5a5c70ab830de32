use rayon::prelude::*;

use super::tensors::{axpy, dot, AttentionGrads, AttentionOutput, AttentionTensors, Scalar};
use crate::error::{Error, Result};
use crate::visibility::DenseMask;

fn check_mask<F: Scalar>(x: &AttentionTensors<F>, mask: &DenseMask) -> Result<()> {
    if mask.rows() != x.len || mask.cols() != x.len {
        return Err(Error::ShapeMismatch(format!(
            "mask is {}x{}, tensors have {} rows",
            mask.rows(),
            mask.cols(),
            x.len
        )));
    }
    Ok(())
}

/// Reference masked softmax attention; full score row per query, max-subtracted.
pub fn dense_masked_attention<F: Scalar>(x: &AttentionTensors<F>, mask: &DenseMask) -> Result<AttentionOutput<F>> {
    check_mask(x, mask)?;
    let (h, d, w) = (x.heads, x.head_dim, x.row_width());
    let scale = x.scale();
    let mut o = vec![F::zero(); x.len * w];
    let mut lse = vec![F::neg_infinity(); x.len * h];

    o.par_chunks_mut(w)
        .zip(lse.par_chunks_mut(h))
        .enumerate()
        .for_each(|(t, (o_row, lse_row))| {
            let keys: Vec<usize> = (0..x.len).filter(|&j| mask.get(t, j)).collect();
            if keys.is_empty() {
                return;
            }
            for head in 0..h {
                let q = x.at(&x.q, t, head);
                let scores: Vec<F> = keys.iter().map(|&j| dot(q, x.at(&x.k, j, head)) * scale).collect();
                let m = scores.iter().copied().fold(F::neg_infinity(), F::max);
                let weights: Vec<F> = scores.iter().map(|&s| (s - m).exp()).collect();
                let z: F = weights.iter().copied().sum();
                let out = &mut o_row[head * d..(head + 1) * d];
                for (&j, &p) in keys.iter().zip(&weights) {
                    axpy(p / z, x.at(&x.v, j, head), out);
                }
                lse_row[head] = m + z.ln();
            }
        });
    Ok(AttentionOutput { o, lse })
}

/// Gradients of `sum(O * dO)` for [`dense_masked_attention`].
pub fn dense_masked_attention_backward<F: Scalar>(
    x: &AttentionTensors<F>,
    out: &AttentionOutput<F>,
    d_o: &[F],
    mask: &DenseMask,
) -> Result<AttentionGrads<F>> {
    check_mask(x, mask)?;
    let (h, d, w) = (x.heads, x.head_dim, x.row_width());
    if d_o.len() != x.len * w || out.o.len() != x.len * w || out.lse.len() != x.len * h {
        return Err(Error::ShapeMismatch("dO / forward output shapes".into()));
    }
    let scale = x.scale();
    let n = x.len;

    // Per-head buffers, filled in parallel and scattered afterwards.
    let per_head: Vec<(Vec<F>, Vec<F>, Vec<F>)> = (0..h)
        .into_par_iter()
        .map(|head| {
            let mut dq = vec![F::zero(); n * d];
            let mut dk = vec![F::zero(); n * d];
            let mut dv = vec![F::zero(); n * d];
            for t in 0..n {
                let lse = out.lse[t * h + head];
                if lse == F::neg_infinity() {
                    continue;
                }
                let q = x.at(&x.q, t, head);
                let g = x.at(d_o, t, head);
                let delta = dot(g, x.at(&out.o, t, head));
                for j in 0..n {
                    if !mask.get(t, j) {
                        continue;
                    }
                    let k = x.at(&x.k, j, head);
                    let p = (dot(q, k) * scale - lse).exp();
                    axpy(p, g, &mut dv[j * d..(j + 1) * d]);
                    let ds = p * (dot(g, x.at(&x.v, j, head)) - delta) * scale;
                    axpy(ds, k, &mut dq[t * d..(t + 1) * d]);
                    axpy(ds, q, &mut dk[j * d..(j + 1) * d]);
                }
            }
            (dq, dk, dv)
        })
        .collect();

    let mut grads = AttentionGrads {
        dq: vec![F::zero(); n * w],
        dk: vec![F::zero(); n * w],
        dv: vec![F::zero(); n * w],
    };
    for (head, (dq, dk, dv)) in per_head.into_iter().enumerate() {
        for row in 0..n {
            let dst = row * w + head * d;
            grads.dq[dst..dst + d].copy_from_slice(&dq[row * d..(row + 1) * d]);
            grads.dk[dst..dst + d].copy_from_slice(&dk[row * d..(row + 1) * d]);
            grads.dv[dst..dst + d].copy_from_slice(&dv[row * d..(row + 1) * d]);
        }
    }
    Ok(grads)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::{augment, CompressionConfig};
    use crate::visibility::build_unified_mask;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(len: usize, h: usize, d: usize, seed: u64) -> AttentionTensors<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut gen = |n| (0..n).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>();
        let n = len * h * d;
        AttentionTensors::new(gen(n), gen(n), gen(n), len, h, d).unwrap()
    }

    /// Textbook per-row loop: full score row with -inf masking.
    fn naive(x: &AttentionTensors<f64>, mask: &DenseMask) -> Vec<f64> {
        let (h, d) = (x.heads, x.head_dim);
        let mut o = vec![0.0; x.len * h * d];
        for t in 0..x.len {
            for head in 0..h {
                let mut s = vec![f64::NEG_INFINITY; x.len];
                for (j, sj) in s.iter_mut().enumerate() {
                    if mask.get(t, j) {
                        let mut acc = 0.0;
                        for e in 0..d {
                            acc += x.q[(t * h + head) * d + e] * x.k[(j * h + head) * d + e];
                        }
                        *sj = acc / (d as f64).sqrt();
                    }
                }
                let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = s.iter().map(|v| (v - m).exp()).collect();
                let z: f64 = e.iter().sum();
                for j in 0..x.len {
                    for c in 0..d {
                        o[(t * h + head) * d + c] += e[j] / z * x.v[(j * h + head) * d + c];
                    }
                }
            }
        }
        o
    }

    #[test]
    fn identity_mask_returns_values() {
        let x = random(7, 2, 4, 1);
        let out = dense_masked_attention(&x, &DenseMask::identity(7)).unwrap();
        for (a, b) in out.o.iter().zip(&x.v) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn two_key_closed_form() {
        let x = random(2, 1, 3, 2);
        let out = dense_masked_attention(&x, &DenseMask::causal(2)).unwrap();
        let s = |j: usize| (0..3).map(|c| x.q[3 + c] * x.k[j * 3 + c]).sum::<f64>() / 3f64.sqrt();
        let (e0, e1) = (s(0).exp(), s(1).exp());
        for c in 0..3 {
            let want = (e0 * x.v[c] + e1 * x.v[3 + c]) / (e0 + e1);
            assert!((out.o[3 + c] - want).abs() < 1e-14);
        }
        assert!((out.lse[1] - (e0 + e1).ln()).abs() < 1e-14);
    }

    #[test]
    fn matches_loop_oracle_on_unified_mask() {
        let c = CompressionConfig::new(4, 3, 1, 8).unwrap();
        let seq = augment(&vec![0; 64], &c, 10).unwrap();
        let mask = build_unified_mask(&seq);
        let x = random(seq.len(), 2, 8, 3);
        let out = dense_masked_attention(&x, &mask).unwrap();
        let want = naive(&x, &mask);
        let err = out.o.iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "err={err}");
    }

    #[test]
    fn shape_errors() {
        let x = random(4, 1, 2, 0);
        assert!(matches!(dense_masked_attention(&x, &DenseMask::causal(5)), Err(Error::ShapeMismatch(_))));
        assert!(AttentionTensors::new(vec![0.0; 3], vec![0.0; 4], vec![0.0; 4], 2, 1, 2).is_err());
    }

    #[test]
    fn backward_matches_finite_differences() {
        let c = CompressionConfig::new(2, 1, 0, 8).unwrap();
        let seq = augment(&vec![0; 8], &c, 10).unwrap();
        let mask = build_unified_mask(&seq);
        let x = random(seq.len(), 2, 3, 9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let d_o: Vec<f64> = (0..x.q.len()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = dense_masked_attention(&x, &mask).unwrap();
        let g = dense_masked_attention_backward(&x, &out, &d_o, &mask).unwrap();
        let loss = |x: &AttentionTensors<f64>| -> f64 {
            dense_masked_attention(x, &mask).unwrap().o.iter().zip(&d_o).map(|(a, b)| a * b).sum()
        };
        let h = 1e-6;
        for which in 0..3 {
            for i in 0..x.q.len() {
                let mut xp = x.clone();
                let mut xm = x.clone();
                let (p, m, an) = match which {
                    0 => (&mut xp.q, &mut xm.q, g.dq[i]),
                    1 => (&mut xp.k, &mut xm.k, g.dk[i]),
                    _ => (&mut xp.v, &mut xm.v, g.dv[i]),
                };
                p[i] += h;
                m[i] -= h;
                let fd = (loss(&xp) - loss(&xm)) / (2.0 * h);
                assert!((fd - an).abs() < 1e-7, "which={which} i={i} fd={fd} an={an}");
            }
        }
    }
}

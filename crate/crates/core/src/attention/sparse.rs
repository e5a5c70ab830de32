use rayon::prelude::*;

use super::tensors::{axpy, dot, AttentionGrads, AttentionOutput, AttentionTensors, Scalar};
use crate::error::{Error, Result};
use crate::gistshift::TileKind;

/// A block-sparse visibility plan over a padded, block-aligned sequence.
pub trait BlockPattern: Sync {
    fn block_size(&self) -> usize;

    fn padded_len(&self) -> usize;

    fn num_blocks(&self) -> usize {
        self.padded_len() / self.block_size()
    }

    /// Visible key blocks of query block `q`, ascending.
    fn blocks(&self, q: usize) -> &[(usize, TileKind)];

    /// Pair visibility in kernel (shifted) coordinates; only consulted for Partial tiles.
    fn visible(&self, row: usize, col: usize) -> bool;

    fn is_real_row(&self, row: usize) -> bool;
}

/// Plain causal attention over `len` rows, tiled like the sparse layouts.
/// Used as the dense baseline in timing runs.
#[derive(Debug, Clone)]
pub struct CausalLayout {
    len: usize,
    block_size: usize,
    blocks: Vec<Vec<(usize, TileKind)>>,
}

impl CausalLayout {
    pub fn new(len: usize, block_size: usize) -> Self {
        let nb = len.div_ceil(block_size);
        let blocks = (0..nb)
            .map(|q| {
                (0..=q)
                    .map(|kb| {
                        let tag = if kb < q { TileKind::Full } else { TileKind::Partial };
                        (kb, tag)
                    })
                    .collect()
            })
            .collect();
        Self { len, block_size, blocks }
    }
}

impl BlockPattern for CausalLayout {
    fn block_size(&self) -> usize {
        self.block_size
    }

    fn padded_len(&self) -> usize {
        self.blocks.len() * self.block_size
    }

    fn blocks(&self, q: usize) -> &[(usize, TileKind)] {
        &self.blocks[q]
    }

    fn visible(&self, row: usize, col: usize) -> bool {
        col <= row && row < self.len
    }

    fn is_real_row(&self, row: usize) -> bool {
        row < self.len
    }
}

fn check<F: Scalar, P: BlockPattern + ?Sized>(x: &AttentionTensors<F>, pattern: &P) -> Result<()> {
    if x.len != pattern.padded_len() {
        return Err(Error::LayoutMismatch(format!(
            "tensors have {} rows, layout expects {}",
            x.len,
            pattern.padded_len()
        )));
    }
    Ok(())
}

/// Keys of tile `(kb, tag)` visible from `row`.
#[inline]
fn tile_cols<P: BlockPattern + ?Sized>(
    pattern: &P,
    row: usize,
    kb: usize,
    tag: TileKind,
) -> impl Iterator<Item = usize> + '_ {
    let b = pattern.block_size();
    (kb * b..(kb + 1) * b).filter(move |&col| tag == TileKind::Full || pattern.visible(row, col))
}

/// Block-sparse attention forward with a streaming softmax across visited tiles.
///
/// Tensors are in kernel (shifted, padded) order. Pad rows produce zero
/// output and an `lse` of `-inf`.
pub fn sparse_forward<F: Scalar, P: BlockPattern + ?Sized>(
    x: &AttentionTensors<F>,
    pattern: &P,
) -> Result<AttentionOutput<F>> {
    check(x, pattern)?;
    let (h, d, w) = (x.heads, x.head_dim, x.row_width());
    let b = pattern.block_size();
    let scale = x.scale();
    let mut o = vec![F::zero(); x.len * w];
    let mut lse = vec![F::neg_infinity(); x.len * h];

    o.par_chunks_mut(b * w)
        .zip(lse.par_chunks_mut(b * h))
        .enumerate()
        .for_each(|(qb, (o_blk, lse_blk))| {
            let tiles = pattern.blocks(qb);
            let mut scores = vec![F::zero(); b];
            let mut cols = vec![0usize; b];
            for a in 0..b {
                let row = qb * b + a;
                if !pattern.is_real_row(row) {
                    continue;
                }
                for head in 0..h {
                    let q = x.at(&x.q, row, head);
                    let acc = &mut o_blk[a * w + head * d..a * w + (head + 1) * d];
                    let mut m = F::neg_infinity();
                    let mut l = F::zero();
                    for &(kb, tag) in tiles {
                        let mut n = 0;
                        let mut tile_max = F::neg_infinity();
                        for col in tile_cols(pattern, row, kb, tag) {
                            let s = dot(q, x.at(&x.k, col, head)) * scale;
                            scores[n] = s;
                            cols[n] = col;
                            tile_max = tile_max.max(s);
                            n += 1;
                        }
                        if n == 0 {
                            continue;
                        }
                        let m_new = m.max(tile_max);
                        let correction = (m - m_new).exp();
                        l = l * correction;
                        for v in acc.iter_mut() {
                            *v = *v * correction;
                        }
                        for (i, &col) in cols[..n].iter().enumerate() {
                            let p = (scores[i] - m_new).exp();
                            l = l + p;
                            axpy(p, x.at(&x.v, col, head), acc);
                        }
                        m = m_new;
                    }
                    if l > F::zero() {
                        let inv = F::one() / l;
                        for v in acc.iter_mut() {
                            *v = *v * inv;
                        }
                        lse_blk[a * h + head] = m + l.ln();
                    }
                }
            }
        });
    Ok(AttentionOutput { o, lse })
}

/// Sum of the softmax weights implied by `lse` over each row's visible keys.
/// Should be 1 for every real row.
pub fn sparse_row_weight_sums<F: Scalar, P: BlockPattern + ?Sized>(
    x: &AttentionTensors<F>,
    out: &AttentionOutput<F>,
    pattern: &P,
) -> Result<Vec<F>> {
    check(x, pattern)?;
    let (h, b) = (x.heads, pattern.block_size());
    let scale = x.scale();
    let mut sums = vec![F::zero(); x.len * h];
    sums.par_chunks_mut(h).enumerate().for_each(|(row, sums_row)| {
        if !pattern.is_real_row(row) {
            return;
        }
        for (head, total) in sums_row.iter_mut().enumerate() {
            let lse = out.lse[row * h + head];
            let q = x.at(&x.q, row, head);
            for &(kb, tag) in pattern.blocks(row / b) {
                for col in tile_cols(pattern, row, kb, tag) {
                    *total = *total + (dot(q, x.at(&x.k, col, head)) * scale - lse).exp();
                }
            }
        }
    });
    Ok(sums)
}

/// Gradients of `sum(O * dO)` through [`sparse_forward`].
///
/// Probabilities are recomputed per tile from the saved `lse`. `dQ` is
/// produced per query block; `dK`/`dV` per key block over the transposed
/// tile list, so every output row is written by exactly one task and the
/// result does not depend on thread scheduling.
pub fn sparse_backward<F: Scalar, P: BlockPattern + ?Sized>(
    x: &AttentionTensors<F>,
    out: &AttentionOutput<F>,
    d_o: &[F],
    pattern: &P,
) -> Result<AttentionGrads<F>> {
    check(x, pattern)?;
    let (h, d, w) = (x.heads, x.head_dim, x.row_width());
    if d_o.len() != x.len * w || out.o.len() != x.len * w || out.lse.len() != x.len * h {
        return Err(Error::ShapeMismatch("dO / forward output shapes".into()));
    }
    let b = pattern.block_size();
    let nb = pattern.num_blocks();
    let scale = x.scale();

    let delta: Vec<F> = (0..x.len * h)
        .into_par_iter()
        .map(|i| {
            let (row, head) = (i / h, i % h);
            dot(x.at(d_o, row, head), x.at(&out.o, row, head))
        })
        .collect();

    let prob = |row: usize, col: usize, head: usize| -> F {
        (dot(x.at(&x.q, row, head), x.at(&x.k, col, head)) * scale - out.lse[row * h + head]).exp()
    };

    let mut dq = vec![F::zero(); x.len * w];
    dq.par_chunks_mut(b * w).enumerate().for_each(|(qb, dq_blk)| {
        for a in 0..b {
            let row = qb * b + a;
            if !pattern.is_real_row(row) {
                continue;
            }
            for head in 0..h {
                let g = x.at(d_o, row, head);
                let dlt = delta[row * h + head];
                let acc = &mut dq_blk[a * w + head * d..a * w + (head + 1) * d];
                for &(kb, tag) in pattern.blocks(qb) {
                    for col in tile_cols(pattern, row, kb, tag) {
                        let p = prob(row, col, head);
                        let ds = p * (dot(g, x.at(&x.v, col, head)) - dlt) * scale;
                        axpy(ds, x.at(&x.k, col, head), acc);
                    }
                }
            }
        }
    });

    let mut transposed: Vec<Vec<(usize, TileKind)>> = vec![Vec::new(); nb];
    for qb in 0..nb {
        for &(kb, tag) in pattern.blocks(qb) {
            transposed[kb].push((qb, tag));
        }
    }

    let mut dk = vec![F::zero(); x.len * w];
    let mut dv = vec![F::zero(); x.len * w];
    dk.par_chunks_mut(b * w)
        .zip(dv.par_chunks_mut(b * w))
        .enumerate()
        .for_each(|(kb, (dk_blk, dv_blk))| {
            for c in 0..b {
                let col = kb * b + c;
                for head in 0..h {
                    let v = x.at(&x.v, col, head);
                    let span = c * w + head * d..c * w + (head + 1) * d;
                    for &(qb, tag) in &transposed[kb] {
                        for row in qb * b..(qb + 1) * b {
                            if !pattern.is_real_row(row) || (tag == TileKind::Partial && !pattern.visible(row, col)) {
                                continue;
                            }
                            let p = prob(row, col, head);
                            let g = x.at(d_o, row, head);
                            axpy(p, g, &mut dv_blk[span.clone()]);
                            let ds = p * (dot(g, v) - delta[row * h + head]) * scale;
                            axpy(ds, x.at(&x.q, row, head), &mut dk_blk[span.clone()]);
                        }
                    }
                }
            }
        });

    Ok(AttentionGrads { dq, dk, dv })
}

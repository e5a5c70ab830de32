//! Dense visibility masks: the unified sparse rule and the chunk-wise baseline.
//!
//! These are deliberately naive `T' x T'` constructions. Everything faster
//! (block layouts, sparse kernels, the cache engine) is checked against them.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::layout::{
    assign_sequential_position_ids, augment, AugmentedSequence, CompressionConfig, TokenKind,
};

/// Row-major boolean matrix; `get(t, j)` is true when key `j` is visible to query `t`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DenseMask {
    rows: usize,
    cols: usize,
    bits: Vec<bool>,
}

impl DenseMask {
    pub fn new(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            bits: vec![false; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for i in 0..n {
            m.set(i, i, true);
        }
        m
    }

    pub fn causal(n: usize) -> Self {
        let mut m = Self::new(n, n);
        for t in 0..n {
            for j in 0..=t {
                m.set(t, j, true);
            }
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, t: usize, j: usize) -> bool {
        self.bits[t * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, t: usize, j: usize, v: bool) {
        self.bits[t * self.cols + j] = v;
    }

    pub fn row(&self, t: usize) -> &[bool] {
        &self.bits[t * self.cols..(t + 1) * self.cols]
    }

    pub fn count_true(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Binary PBM (`P4`); set bits are black, queries run top to bottom.
    pub fn to_pbm(&self) -> Vec<u8> {
        let mut out = format!("P4\n{} {}\n", self.cols, self.rows).into_bytes();
        let stride = self.cols.div_ceil(8);
        for t in 0..self.rows {
            let mut line = vec![0u8; stride];
            for (j, &b) in self.row(t).iter().enumerate() {
                if b {
                    line[j / 8] |= 0x80 >> (j % 8);
                }
            }
            out.extend_from_slice(&line);
        }
        out
    }
}

/// Closed-form unified visibility between two augmented indices.
///
/// Causal, and a key is visible when it is a sink, a gist, or a raw token in
/// one of the `k` units preceding the query's unit (or in that unit itself).
#[inline]
pub fn unified_visible(t: usize, j: usize, config: &CompressionConfig) -> bool {
    if j > t {
        return false;
    }
    let s = config.sink_count;
    if j < s {
        return true;
    }
    let ul = config.unit_len();
    let j_off = j - s;
    if j_off % ul == config.ratio {
        return true;
    }
    // j is raw and t >= j > s, so t has a unit too.
    let unit_j = j_off / ul;
    let unit_t = (t - s) / ul;
    unit_j + config.window_units >= unit_t
}

/// Visible set of query `t`, built term by term: sinks, gists and the local
/// window, intersected with the causal prefix.
pub fn visible_set(seq: &AugmentedSequence, t: usize) -> Result<BTreeSet<usize>> {
    if t >= seq.len() {
        return Err(Error::IndexOutOfRange { index: t, len: seq.len() });
    }
    let k = seq.config.window_units;
    let sinks = seq.slots.iter().filter(|s| s.kind == TokenKind::Sink).map(|s| s.aug_index);
    let gists = seq.slots.iter().filter(|s| s.kind == TokenKind::Gist).map(|s| s.aug_index);
    let window: Vec<usize> = match seq.slots[t].unit_id {
        Some(ut) => seq
            .slots
            .iter()
            .filter(|s| s.kind != TokenKind::Sink)
            .filter(|s| {
                let u = s.unit_id.unwrap();
                u <= ut && u + k >= ut
            })
            .map(|s| s.aug_index)
            .collect(),
        None => Vec::new(),
    };
    Ok(sinks.chain(gists).chain(window).filter(|&j| j <= t).collect())
}

/// Dense unified mask assembled from [`visible_set`].
pub fn build_unified_mask(seq: &AugmentedSequence) -> DenseMask {
    let n = seq.len();
    let mut mask = DenseMask::new(n, n);
    for t in 0..n {
        for j in visible_set(seq, t).expect("t in range") {
            mask.set(t, j, true);
        }
    }
    mask
}

/// Dense unified mask from the closed-form predicate; `O(T'^2)` but no sets.
pub fn build_unified_mask_fast(config: &CompressionConfig, raw_len: usize) -> DenseMask {
    let n = config.augmented_len(raw_len);
    let mut mask = DenseMask::new(n, n);
    for t in 0..n {
        for j in 0..=t {
            if unified_visible(t, j, config) {
                mask.set(t, j, true);
            }
        }
    }
    mask
}

/// Chunk-wise baseline: chunks of `chunk_len` raw tokens with a gist after every `ratio`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChunkBaselineSpec {
    pub chunk_len: usize,
    pub ratio: usize,
}

impl ChunkBaselineSpec {
    pub fn new(chunk_len: usize, ratio: usize) -> Result<Self> {
        if ratio >= chunk_len || chunk_len % ratio != 0 {
            return Err(Error::InvalidConfig(format!(
                "chunk baseline needs ratio < chunk_len and chunk_len % ratio == 0 (L={chunk_len}, r={ratio})"
            )));
        }
        Ok(Self { chunk_len, ratio })
    }

    /// Gists per chunk.
    pub fn gists_per_chunk(&self) -> usize {
        self.chunk_len / self.ratio
    }

    /// Augmented slots per chunk.
    pub fn chunk_slots(&self) -> usize {
        self.chunk_len + self.gists_per_chunk()
    }

    /// Equivalent layout config: no sinks, ratio `r`; window and block size unused.
    pub fn layout_config(&self) -> CompressionConfig {
        CompressionConfig {
            ratio: self.ratio,
            sink_count: 0,
            window_units: 0,
            block_size: 8,
        }
    }

    /// Baseline augmented order with plain sequential position ids.
    pub fn sequence(&self, raw_tokens: &[u32], base_vocab: usize) -> Result<AugmentedSequence> {
        if raw_tokens.len() % self.chunk_len != 0 {
            return Err(Error::NonDivisibleLength {
                len: raw_tokens.len(),
                divisor: self.chunk_len,
            });
        }
        let mut seq = augment(raw_tokens, &self.layout_config(), base_vocab)?;
        assign_sequential_position_ids(&mut seq);
        Ok(seq)
    }
}

/// Chunk-wise baseline mask: a query in chunk `c` sees every gist of chunks
/// before `c` plus the causal prefix of its own chunk.
pub fn build_chunk_mask(raw_len: usize, spec: &ChunkBaselineSpec) -> Result<DenseMask> {
    if raw_len == 0 || raw_len % spec.chunk_len != 0 {
        return Err(Error::NonDivisibleLength {
            len: raw_len,
            divisor: spec.chunk_len,
        });
    }
    let per_chunk = spec.chunk_slots();
    let n = raw_len + raw_len / spec.ratio;
    let is_gist = |j: usize| j % (spec.ratio + 1) == spec.ratio;
    let mut mask = DenseMask::new(n, n);
    for t in 0..n {
        let chunk_start = t / per_chunk * per_chunk;
        for j in 0..chunk_start {
            if is_gist(j) {
                mask.set(t, j, true);
            }
        }
        for j in chunk_start..=t {
            mask.set(t, j, true);
        }
    }
    Ok(mask)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(r: usize, s: usize, k: usize, t: usize) -> AugmentedSequence {
        let c = CompressionConfig::new(r, s, k, 8).unwrap();
        augment(&(0..t as u32).collect::<Vec<_>>(), &c, 1000).unwrap()
    }

    #[test]
    fn visible_set_examples() {
        // [s1, x1, x2, g1, x3, x4, g2]; x4 is index 5.
        let z = seq(2, 1, 0, 4);
        assert_eq!(visible_set(&z, 5).unwrap(), BTreeSet::from([0, 3, 4, 5]));
        assert_eq!(visible_set(&z, 0).unwrap(), BTreeSet::from([0]));
        let z1 = seq(2, 1, 1, 4);
        assert_eq!(visible_set(&z1, 5).unwrap(), BTreeSet::from([0, 1, 2, 3, 4, 5]));
        assert!(visible_set(&z, 7).is_err());
    }

    #[test]
    fn unified_mask_basic_properties() {
        let z = seq(2, 1, 0, 4);
        let m = build_unified_mask(&z);
        assert_eq!(m.rows(), 7);
        for t in 0..7 {
            assert!(m.get(t, t));
            assert!(m.row(t).iter().any(|&b| b));
            for j in t + 1..7 {
                assert!(!m.get(t, j));
            }
        }
        // x1 (index 1) is invisible to x4 (index 5).
        assert!(!m.get(5, 1));
        let z = seq(4, 3, 1, 64);
        let m = build_unified_mask(&z);
        for g in z.slots.iter().filter(|s| s.kind == TokenKind::Gist) {
            for t in g.aug_index..z.len() {
                assert!(m.get(t, g.aug_index));
            }
        }
    }

    #[test]
    fn closed_form_matches_set_construction() {
        for r in [2, 4] {
            for k in [0, 1, 4] {
                for t in [r, 8, 40, 128, 512] {
                    let z = seq(r, 3, k, t);
                    assert_eq!(build_unified_mask(&z), build_unified_mask_fast(&z.config, t), "r={r} k={k} T={t}");
                }
            }
        }
    }

    #[test]
    fn window_monotone() {
        for k in 0..5 {
            let a = build_unified_mask_fast(&CompressionConfig::new(4, 2, k, 8).unwrap(), 96);
            let b = build_unified_mask_fast(&CompressionConfig::new(4, 2, k + 1, 8).unwrap(), 96);
            for t in 0..a.rows() {
                for j in 0..a.cols() {
                    assert!(!a.get(t, j) || b.get(t, j));
                }
            }
            assert!(b.count_true() >= a.count_true());
        }
    }

    #[test]
    fn row_density_far_from_start() {
        // For a raw query at offset i inside unit u (u >= k): s sinks + u gists
        // + the k previous full units (r raws + gist each, gists already counted)
        // + i+1 raws of its own unit.
        let (r, s, k, t) = (4, 5, 3, 400);
        let z = seq(r, s, k, t);
        let m = build_unified_mask_fast(&z.config, t);
        for slot in z.slots.iter().filter(|x| x.kind == TokenKind::Raw && x.unit_id.unwrap() >= k) {
            let u = slot.unit_id.unwrap();
            let i = slot.raw_index.unwrap() % r;
            let expected = s + u + k * r + i + 1;
            assert_eq!(m.row(slot.aug_index).iter().filter(|&&b| b).count(), expected);
            assert_eq!(u, (slot.aug_index - s) / (r + 1));
        }
    }

    #[test]
    fn chunk_mask_examples() {
        let spec = ChunkBaselineSpec::new(4, 2).unwrap();
        let m = build_chunk_mask(8, &spec).unwrap();
        // Chunk 1: [x1 x2 g1 x3 x4 g2] = 0..6; chunk 2 starts at 6.
        let visible: Vec<usize> = (0..12).filter(|&j| m.get(6, j)).collect();
        assert_eq!(visible, vec![2, 5, 6]);
        let causal = DenseMask::causal(6);
        for t in 0..6 {
            assert_eq!(&m.row(t)[..6], causal.row(t));
        }
        for t in 6..12 {
            for raw in [0, 1, 3, 4] {
                assert!(!m.get(t, raw));
            }
        }
        assert!(build_chunk_mask(6, &spec).is_err());
        assert!(ChunkBaselineSpec::new(4, 4).is_err());
        assert!(ChunkBaselineSpec::new(6, 4).is_err());
    }

    #[test]
    fn pbm_dimensions() {
        let m = build_unified_mask_fast(&CompressionConfig::new(4, 0, 1, 8).unwrap(), 64);
        let pbm = m.to_pbm();
        let header = b"P4\n80 80\n";
        assert_eq!(&pbm[..header.len()], header);
        assert_eq!(pbm.len(), header.len() + 80 * 10);
    }
}

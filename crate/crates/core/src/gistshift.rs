//! Gist shift: a stable permutation that moves every gist to the right end of
//! the sequence, plus the block-sparse layout it makes possible.
//!
//! Shifted order is `[sinks | raws | gists | pad]`. Sinks and raws keep their
//! relative order, as do gists, so for a fixed `(T, r, s, k, B)` the visible
//! key blocks of any query block follow from interval arithmetic and the
//! in-block masks from the original index of each shifted slot.

use std::collections::BTreeSet;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::layout::{AugmentedSequence, CompressionConfig, TokenKind};
use crate::visibility::unified_visible;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftPermutation {
    /// Shifted slot -> original aug index; `None` for trailing pad slots.
    pub perm: Vec<Option<usize>>,
    /// Original aug index -> shifted slot.
    pub inv: Vec<usize>,
    pub padded_len: usize,
}

impl ShiftPermutation {
    /// Number of real (non-pad) slots.
    pub fn len(&self) -> usize {
        self.inv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inv.is_empty()
    }

    /// Gathers `width`-wide rows from original order into shifted order, zero-filling pads.
    pub fn shift_rows<T: Copy + Default>(&self, rows: &[T], width: usize) -> Vec<T> {
        assert_eq!(rows.len(), self.len() * width);
        let mut out = vec![T::default(); self.padded_len * width];
        for (dst, src) in self.perm.iter().enumerate() {
            if let Some(src) = *src {
                out[dst * width..(dst + 1) * width].copy_from_slice(&rows[src * width..(src + 1) * width]);
            }
        }
        out
    }

    /// Inverse of [`shift_rows`](Self::shift_rows); pad rows are dropped.
    pub fn unshift_rows<T: Copy + Default>(&self, rows: &[T], width: usize) -> Vec<T> {
        assert_eq!(rows.len(), self.padded_len * width);
        let mut out = vec![T::default(); self.len() * width];
        for (src, &dst) in self.inv.iter().enumerate() {
            out[src * width..(src + 1) * width].copy_from_slice(&rows[dst * width..(dst + 1) * width]);
        }
        out
    }
}

/// Stable two-class partition of a materialized sequence, padded to a multiple of `block_size`.
pub fn gist_shift(seq: &AugmentedSequence, block_size: usize) -> ShiftPermutation {
    let n = seq.len();
    let padded_len = n.div_ceil(block_size) * block_size;
    let mut perm: Vec<Option<usize>> = seq
        .slots
        .iter()
        .filter(|s| s.kind != TokenKind::Gist)
        .chain(seq.slots.iter().filter(|s| s.kind == TokenKind::Gist))
        .map(|s| Some(s.aug_index))
        .collect();
    perm.resize(padded_len, None);
    let mut inv = vec![0; n];
    for (dst, src) in perm.iter().enumerate() {
        if let Some(src) = *src {
            inv[src] = dst;
        }
    }
    ShiftPermutation { perm, inv, padded_len }
}

/// Closed-form shift of an implicit sequence of `raw_len` raw tokens.
pub fn shift_for(config: &CompressionConfig, raw_len: usize) -> ShiftPermutation {
    let geo = Geometry::new(config, raw_len);
    let perm: Vec<Option<usize>> = (0..geo.padded_len).map(|i| geo.original_index(i)).collect();
    let mut inv = vec![0; geo.aug_len];
    for (dst, src) in perm.iter().enumerate() {
        if let Some(src) = *src {
            inv[src] = dst;
        }
    }
    ShiftPermutation {
        perm,
        inv,
        padded_len: geo.padded_len,
    }
}

/// Whether a visible tile needs its in-block mask evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TileKind {
    /// Every pair in the tile is visible.
    Full,
    Partial,
}

/// Shifted-order region boundaries for one configuration.
#[derive(Debug, Clone, Copy)]
struct Geometry {
    r: usize,
    s: usize,
    k: usize,
    b: usize,
    raw_len: usize,
    aug_len: usize,
    padded_len: usize,
}

/// Classes present in one block of shifted slots, as inclusive ranges.
#[derive(Debug, Clone, Copy, Default)]
struct BlockSummary {
    sinks: Option<(usize, usize)>,
    raws: Option<(usize, usize)>,
    gists: Option<(usize, usize)>,
    has_pad: bool,
}

fn clip(range: Range<usize>, lo: usize, hi: usize) -> Option<(usize, usize)> {
    let a = range.start.max(lo);
    let b = range.end.min(hi);
    (a < b).then(|| (a - lo, b - 1 - lo))
}

impl Geometry {
    fn new(config: &CompressionConfig, raw_len: usize) -> Self {
        let aug_len = config.augmented_len(raw_len);
        let b = config.block_size;
        Self {
            r: config.ratio,
            s: config.sink_count,
            k: config.window_units,
            b,
            raw_len,
            aug_len,
            padded_len: aug_len.div_ceil(b) * b,
        }
    }

    fn num_blocks(&self) -> usize {
        self.padded_len / self.b
    }

    fn raw_start(&self) -> usize {
        self.s
    }

    fn gist_start(&self) -> usize {
        self.s + self.raw_len
    }

    fn original_index(&self, shifted: usize) -> Option<usize> {
        if shifted < self.s {
            Some(shifted)
        } else if shifted < self.gist_start() {
            let j = shifted - self.s;
            Some(self.s + j / self.r * (self.r + 1) + j % self.r)
        } else if shifted < self.aug_len {
            let u = shifted - self.gist_start();
            Some(self.s + u * (self.r + 1) + self.r)
        } else {
            None
        }
    }

    fn summary(&self, block: usize) -> BlockSummary {
        let range = block * self.b..(block + 1) * self.b;
        BlockSummary {
            sinks: clip(range.clone(), 0, self.s),
            raws: clip(range.clone(), self.raw_start(), self.gist_start()),
            gists: clip(range.clone(), self.gist_start(), self.aug_len),
            has_pad: range.end > self.aug_len,
        }
    }

    fn unit(&self, raw: usize) -> usize {
        raw / self.r
    }

    /// Visible key intervals (shifted, half-open) for a query block.
    fn key_intervals(&self, q: &BlockSummary) -> Vec<Range<usize>> {
        let mut out = Vec::with_capacity(4);
        if q.raws.is_some() || q.gists.is_some() {
            out.push(0..self.s);
        } else if let Some((_, hi)) = q.sinks {
            out.push(0..hi + 1);
        }
        let mut gist_count = 0;
        if let Some((ra, rb)) = q.raws {
            let lo = self.unit(ra).saturating_sub(self.k) * self.r;
            out.push(self.raw_start() + lo..self.raw_start() + rb + 1);
            gist_count = gist_count.max(self.unit(rb));
        }
        if let Some((ga, gb)) = q.gists {
            let lo = ga.saturating_sub(self.k) * self.r;
            let hi = (gb + 1) * self.r;
            out.push(self.raw_start() + lo..self.raw_start() + hi);
            gist_count = gist_count.max(gb + 1);
        }
        if gist_count > 0 {
            out.push(self.gist_start()..self.gist_start() + gist_count);
        }
        out.retain(|r| !r.is_empty());
        out
    }

    /// True when every (query, key) pair of the tile is visible.
    fn is_full(&self, q: &BlockSummary, kv: &BlockSummary) -> bool {
        if q.has_pad || kv.has_pad {
            return false;
        }
        let k = self.k;
        if let (Some((_, ks1)), Some((qs0, _))) = (kv.sinks, q.sinks) {
            if ks1 > qs0 {
                return false;
            }
        }
        if let Some((kr0, kr1)) = kv.raws {
            if q.sinks.is_some() {
                return false;
            }
            if let Some((qr0, qr1)) = q.raws {
                if kr1 > qr0 || self.unit(kr0) + k < self.unit(qr1) {
                    return false;
                }
            }
            if let Some((qg0, qg1)) = q.gists {
                if self.unit(kr1) > qg0 || self.unit(kr0) + k < qg1 {
                    return false;
                }
            }
        }
        if let Some((_, kg1)) = kv.gists {
            if q.sinks.is_some() {
                return false;
            }
            if let Some((qr0, _)) = q.raws {
                if kg1 >= self.unit(qr0) {
                    return false;
                }
            }
            if let Some((qg0, _)) = q.gists {
                if kg1 > qg0 {
                    return false;
                }
            }
        }
        true
    }

    fn visible_blocks(&self, q: usize) -> Vec<(usize, TileKind)> {
        let qs = self.summary(q);
        let mut blocks = BTreeSet::new();
        for iv in self.key_intervals(&qs) {
            blocks.extend(iv.start / self.b..=(iv.end - 1) / self.b);
        }
        blocks
            .into_iter()
            .map(|kb| {
                let tag = if self.is_full(&qs, &self.summary(kb)) {
                    TileKind::Full
                } else {
                    TileKind::Partial
                };
                (kb, tag)
            })
            .collect()
    }
}

/// Visible key blocks of query block `q`, ascending, from `(q, T, r, s, k, B)` alone.
pub fn visible_blocks(q: usize, raw_len: usize, config: &CompressionConfig) -> Result<Vec<(usize, TileKind)>> {
    let geo = Geometry::new(config, raw_len);
    if q >= geo.num_blocks() {
        return Err(Error::IndexOutOfRange {
            index: q,
            len: geo.num_blocks(),
        });
    }
    Ok(geo.visible_blocks(q))
}

/// `B x B` tile (row-major) of unified visibility between query block `q`
/// and key block `kv`, computed from original indices only. Pad slots are false.
pub fn inblock_mask(q: usize, kv: usize, index_array: &[Option<usize>], config: &CompressionConfig) -> Vec<bool> {
    let b = config.block_size;
    let mut tile = vec![false; b * b];
    for a in 0..b {
        let Some(t) = index_array.get(q * b + a).copied().flatten() else {
            continue;
        };
        for c in 0..b {
            if let Some(j) = index_array.get(kv * b + c).copied().flatten() {
                tile[a * b + c] = unified_visible(t, j, config);
            }
        }
    }
    tile
}

/// Precomputed block-sparse plan for one `(T, config)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockLayout {
    pub config: CompressionConfig,
    pub raw_len: usize,
    pub block_size: usize,
    pub num_query_blocks: usize,
    /// Visible key blocks per query block.
    pub visible: Vec<Vec<(usize, TileKind)>>,
    /// Original aug index of each shifted slot; the kernel's only per-token input.
    pub index_array: Vec<Option<usize>>,
}

impl BlockLayout {
    pub fn new(config: &CompressionConfig, raw_len: usize) -> Result<Self> {
        config.validate()?;
        if raw_len % config.ratio != 0 {
            return Err(Error::NonDivisibleLength {
                len: raw_len,
                divisor: config.ratio,
            });
        }
        let geo = Geometry::new(config, raw_len);
        let n = geo.num_blocks();
        Ok(Self {
            config: *config,
            raw_len,
            block_size: config.block_size,
            num_query_blocks: n,
            visible: (0..n).map(|q| geo.visible_blocks(q)).collect(),
            index_array: (0..geo.padded_len).map(|i| geo.original_index(i)).collect(),
        })
    }

    pub fn padded_len(&self) -> usize {
        self.index_array.len()
    }

    pub fn aug_len(&self) -> usize {
        self.config.augmented_len(self.raw_len)
    }

    pub fn permutation(&self) -> ShiftPermutation {
        shift_for(&self.config, self.raw_len)
    }

    pub fn tile(&self, q: usize, kv: usize) -> Vec<bool> {
        inblock_mask(q, kv, &self.index_array, &self.config)
    }

    /// Total number of listed tiles.
    pub fn tile_count(&self) -> usize {
        self.visible.iter().map(Vec::len).sum()
    }
}

impl crate::attention::BlockPattern for BlockLayout {
    fn block_size(&self) -> usize {
        self.block_size
    }

    fn padded_len(&self) -> usize {
        self.index_array.len()
    }

    fn blocks(&self, q: usize) -> &[(usize, TileKind)] {
        &self.visible[q]
    }

    #[inline]
    fn visible(&self, row: usize, col: usize) -> bool {
        match (self.index_array[row], self.index_array[col]) {
            (Some(t), Some(j)) => unified_visible(t, j, &self.config),
            _ => false,
        }
    }

    fn is_real_row(&self, row: usize) -> bool {
        self.index_array[row].is_some()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::augment;
    use crate::visibility::{build_unified_mask_fast, visible_set};
    use proptest::prelude::*;

    fn cfg(r: usize, s: usize, k: usize, b: usize) -> CompressionConfig {
        CompressionConfig::new(r, s, k, b).unwrap()
    }

    #[test]
    fn shift_example() {
        let c = cfg(2, 1, 0, 8);
        let seq = augment(&[10, 11, 12, 13], &c, 100).unwrap();
        let p = gist_shift(&seq, 8);
        assert_eq!(p.padded_len, 8);
        assert_eq!(&p.perm[..7], &[Some(0), Some(1), Some(2), Some(4), Some(5), Some(3), Some(6)]);
        assert_eq!(p.perm[7], None);
        assert_eq!(p, shift_for(&c, 4));
    }

    #[test]
    fn gist_free_sequence_is_identity() {
        // The sink prefix alone contains no gists.
        let c = cfg(2, 5, 0, 8);
        let seq = augment(&[1, 2], &c, 10).unwrap();
        let sinks_only = AugmentedSequence {
            slots: seq.slots[..5].to_vec(),
            config: c,
            raw_len: 0,
        };
        let p = gist_shift(&sinks_only, 8);
        for i in 0..5 {
            assert_eq!(p.perm[i], Some(i));
            assert_eq!(p.inv[i], i);
        }
    }

    #[test]
    fn shift_is_stable_partition() {
        let c = cfg(4, 3, 1, 16);
        let seq = augment(&vec![1; 40], &c, 10).unwrap();
        let p = gist_shift(&seq, 16);
        let kinds: Vec<_> = p.perm.iter().flatten().map(|&i| seq.slots[i].kind).collect();
        let first_gist = kinds.iter().position(|&k| k == TokenKind::Gist).unwrap();
        assert!(kinds[first_gist..].iter().all(|&k| k == TokenKind::Gist));
        let real: Vec<usize> = p.perm.iter().flatten().copied().collect();
        assert!(real[..first_gist].windows(2).all(|w| w[0] < w[1]));
        assert!(real[first_gist..].windows(2).all(|w| w[0] < w[1]));
        for (orig, &shifted) in p.inv.iter().enumerate() {
            assert_eq!(p.perm[shifted], Some(orig));
        }
    }

    proptest! {
        #[test]
        fn shift_round_trip(r in 2usize..6, s in 0usize..5, units in 1usize..20, width in 1usize..4, seed in any::<u32>()) {
            let c = cfg(r, s, 0, 8);
            let p = shift_for(&c, units * r);
            let rows: Vec<u32> = (0..p.len() * width).map(|i| (i as u32).wrapping_mul(2654435761) ^ seed).collect();
            let shifted = p.shift_rows(&rows, width);
            prop_assert_eq!(shifted.len(), p.padded_len * width);
            prop_assert_eq!(p.unshift_rows(&shifted, width), rows);
        }
    }

    #[test]
    fn sink_only_query_block() {
        let c = cfg(4, 40, 2, 8);
        let v = visible_blocks(2, 64, &c).unwrap();
        assert_eq!(v, vec![(0, TileKind::Full), (1, TileKind::Full), (2, TileKind::Partial)]);
        assert!(visible_blocks(1000, 64, &c).is_err());
    }

    #[test]
    fn diagonal_raw_tile_is_lower_triangular() {
        let c = cfg(4, 0, 4, 8);
        let layout = BlockLayout::new(&c, 64).unwrap();
        let tile = layout.tile(1, 1);
        for a in 0..8 {
            for b in 0..8 {
                assert_eq!(tile[a * 8 + b], b <= a);
            }
        }
    }

    #[test]
    fn pad_rows_and_cols_are_false() {
        let c = cfg(4, 1, 1, 16);
        let layout = BlockLayout::new(&c, 12).unwrap(); // T' = 16 exactly
        assert_eq!(layout.padded_len(), 16);
        let layout = BlockLayout::new(&c, 16).unwrap(); // T' = 21 -> 32
        assert_eq!(layout.padded_len(), 32);
        let last = layout.num_query_blocks - 1;
        for &(kb, _) in &layout.visible[last] {
            let tile = layout.tile(last, kb);
            for a in 0..16 {
                for b in 0..16 {
                    let row_pad = layout.index_array[last * 16 + a].is_none();
                    let col_pad = layout.index_array[kb * 16 + b].is_none();
                    if row_pad || col_pad {
                        assert!(!tile[a * 16 + b]);
                    }
                }
            }
        }
    }

    #[test]
    fn full_tiles_are_all_true() {
        let c = cfg(4, 16, 1, 8);
        let layout = BlockLayout::new(&c, 256).unwrap();
        let mut fulls = 0;
        for q in 0..layout.num_query_blocks {
            for &(kb, tag) in &layout.visible[q] {
                let tile = layout.tile(q, kb);
                if tag == TileKind::Full {
                    fulls += 1;
                    assert!(tile.iter().all(|&b| b), "q={q} kb={kb}");
                } else {
                    assert!(!tile.iter().all(|&b| b), "q={q} kb={kb} tagged partial but full");
                }
            }
        }
        assert!(fulls > 0);
    }

    /// Brute-force tiling of dense mask rows from the set-based oracle.
    fn brute_blocks(seq: &AugmentedSequence, q: usize, b: usize) -> Vec<usize> {
        let p = gist_shift(seq, b);
        let mut blocks = BTreeSet::new();
        for row in q * b..(q + 1) * b {
            if let Some(t) = p.perm[row] {
                for j in visible_set(seq, t).unwrap() {
                    blocks.insert(p.inv[j] / b);
                }
            }
        }
        blocks.into_iter().collect()
    }

    #[test]
    fn late_query_block_matches_brute_force_at_default_scale() {
        let c = CompressionConfig::default();
        let t = 32768;
        let seq = augment(&vec![0; t], &c, 10).unwrap();
        // Last block lying entirely in the raw region.
        let q = (c.sink_count + t) / c.block_size - 1;
        let got: Vec<usize> = visible_blocks(q, t, &c).unwrap().into_iter().map(|(b, _)| b).collect();
        let want = brute_blocks(&seq, q, c.block_size);
        assert_eq!(got, want);
        // 2 sink blocks, a 3-block raw band, and the visible gist prefix.
        assert_eq!(got.len(), want.len());
        // Early raw key blocks are skipped.
        assert!(!got.contains(&10));
    }

    #[test]
    fn small_grid_matches_dense_mask() {
        for r in [2, 4] {
            for b in [8, 16] {
                for k in [0, 1, 3] {
                    for s in [0, 3, 9] {
                        for t in [r, 4 * r, 40, 64] {
                            let c = cfg(r, s, k, b);
                            assert_layout_complete(&c, t);
                        }
                    }
                }
            }
        }
    }

    pub(crate) fn assert_layout_complete(c: &CompressionConfig, t: usize) {
        let layout = BlockLayout::new(c, t).unwrap();
        let dense = build_unified_mask_fast(c, t);
        let n = layout.padded_len();
        let b = c.block_size;
        let mut covered = vec![false; n * n];
        for q in 0..layout.num_query_blocks {
            for &(kb, tag) in &layout.visible[q] {
                let tile = layout.tile(q, kb);
                if tag == TileKind::Full {
                    assert!(tile.iter().all(|&x| x));
                }
                for a in 0..b {
                    for cc in 0..b {
                        if tile[a * b + cc] {
                            let idx = (q * b + a) * n + kb * b + cc;
                            assert!(!covered[idx]);
                            covered[idx] = true;
                        }
                    }
                }
            }
        }
        for row in 0..n {
            for col in 0..n {
                let want = match (layout.index_array[row], layout.index_array[col]) {
                    (Some(ti), Some(j)) => dense.get(ti, j),
                    _ => false,
                };
                assert_eq!(covered[row * n + col], want, "cfg={c:?} T={t} row={row} col={col}");
            }
        }
    }

    #[test]
    fn skip_fraction_approaches_bound() {
        // Late raw query blocks skip almost all raw key blocks; what remains
        // is roughly the gist region, i.e. 1/(r+1) of the sequence.
        let c = cfg(4, 4, 1, 16);
        let t = 8192;
        let layout = BlockLayout::new(&c, t).unwrap();
        let q = (c.sink_count + t) / 16 - 2;
        let visited = layout.visible[q].len() as f64;
        let skipped = 1.0 - visited / layout.num_query_blocks as f64;
        let bound = 1.0 - 1.0 / (c.ratio as f64 + 1.0);
        assert!(skipped > bound - 0.01 && skipped <= bound + 1e-9, "skipped={skipped} bound={bound}");
    }

    #[test]
    fn deterministic() {
        let c = cfg(8, 5, 2, 16);
        assert_eq!(BlockLayout::new(&c, 800).unwrap(), BlockLayout::new(&c, 800).unwrap());
    }
}

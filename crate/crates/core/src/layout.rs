//! Gist-augmented sequence layout.
//!
//! A raw stream `x_1..x_T` becomes
//! `[s_1..s_s, x_1..x_r, g, x_{r+1}..x_{2r}, g, ..., x_T, g]` of length
//! `s + T + T/r`. Every per-slot attribute (kind, unit, position id) is a
//! closed-form function of the augmented index, so kernels and the cache
//! engine never need lookup tables.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Compression hyper-parameters shared by every layout decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompressionConfig {
    /// Raw tokens per gist token.
    pub ratio: usize,
    /// Number of attention-sink tokens prepended to the sequence.
    pub sink_count: usize,
    /// Previous complete gist units whose raw tokens stay visible.
    pub window_units: usize,
    /// Kernel tile edge.
    pub block_size: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        Self {
            ratio: 4,
            sink_count: 128,
            window_units: 32,
            block_size: 64,
        }
    }
}

impl CompressionConfig {
    pub fn new(ratio: usize, sink_count: usize, window_units: usize, block_size: usize) -> Result<Self> {
        let cfg = Self {
            ratio,
            sink_count,
            window_units,
            block_size,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.ratio < 2 {
            return Err(Error::InvalidConfig(format!("ratio must be >= 2, got {}", self.ratio)));
        }
        if self.block_size < 8 || !self.block_size.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "block_size must be a power of two >= 8, got {}",
                self.block_size
            )));
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Slots per gist unit (`r` raw tokens followed by one gist).
    #[inline]
    pub fn unit_len(&self) -> usize {
        self.ratio + 1
    }

    /// Augmented length `s + T + T/r`.
    #[inline]
    pub fn augmented_len(&self, raw_len: usize) -> usize {
        self.sink_count + raw_len + raw_len / self.ratio
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Sink,
    Raw,
    Gist,
}

/// Reserved embedding rows appended after the base vocabulary:
/// `s` sink ids followed by one shared gist id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialTokens {
    pub base_vocab: usize,
    pub sink_count: usize,
}

impl SpecialTokens {
    pub fn new(base_vocab: usize, sink_count: usize) -> Self {
        Self { base_vocab, sink_count }
    }

    pub fn sink(&self, i: usize) -> u32 {
        debug_assert!(i < self.sink_count);
        (self.base_vocab + i) as u32
    }

    pub fn gist(&self) -> u32 {
        (self.base_vocab + self.sink_count) as u32
    }

    /// Embedding table rows: base + sinks + gist.
    pub fn total_vocab(&self) -> usize {
        self.base_vocab + self.sink_count + 1
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenSlot {
    pub kind: TokenKind,
    pub aug_index: usize,
    /// Index into the raw stream; `None` for sinks and gists.
    pub raw_index: Option<usize>,
    /// Gist-unit ordinal; `None` for sinks.
    pub unit_id: Option<usize>,
    /// 1-based rotary position.
    pub position_id: usize,
    pub token_id: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedSequence {
    pub slots: Vec<TokenSlot>,
    pub config: CompressionConfig,
    pub raw_len: usize,
}

impl AugmentedSequence {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn token_ids(&self) -> Vec<u32> {
        self.slots.iter().map(|s| s.token_id).collect()
    }

    pub fn position_ids(&self) -> Vec<usize> {
        self.slots.iter().map(|s| s.position_id).collect()
    }

    /// Raw token ids in stream order.
    pub fn raw_tokens(&self) -> Vec<u32> {
        self.slots
            .iter()
            .filter(|s| s.kind == TokenKind::Raw)
            .map(|s| s.token_id)
            .collect()
    }

    /// Augmented index of raw token `j`.
    pub fn aug_index_of_raw(&self, j: usize) -> usize {
        raw_aug_index(j, &self.config)
    }

    /// Augmented index of the gist closing unit `u`.
    pub fn aug_index_of_gist(&self, u: usize) -> usize {
        gist_aug_index(u, &self.config)
    }
}

/// Appends the fewest `pad_id` tokens that make the length a multiple of `r`.
pub fn pad_to_ratio(raw_tokens: &[u32], pad_id: u32, config: &CompressionConfig) -> Vec<u32> {
    let r = config.ratio;
    let padded = raw_tokens.len().div_ceil(r) * r;
    let mut out = Vec::with_capacity(padded);
    out.extend_from_slice(raw_tokens);
    out.resize(padded, pad_id);
    out
}

/// Builds the augmented sequence with aligned position ids.
pub fn augment(raw_tokens: &[u32], config: &CompressionConfig, base_vocab: usize) -> Result<AugmentedSequence> {
    let r = config.ratio;
    let t = raw_tokens.len();
    if t == 0 || t % r != 0 {
        return Err(Error::NonDivisibleLength { len: t, divisor: r });
    }
    let specials = SpecialTokens::new(base_vocab, config.sink_count);
    let mut slots = Vec::with_capacity(config.augmented_len(t));

    for i in 0..config.sink_count {
        slots.push(TokenSlot {
            kind: TokenKind::Sink,
            aug_index: slots.len(),
            raw_index: None,
            unit_id: None,
            position_id: 0,
            token_id: specials.sink(i),
        });
    }
    for (unit, chunk) in raw_tokens.chunks(r).enumerate() {
        for (offset, &tok) in chunk.iter().enumerate() {
            slots.push(TokenSlot {
                kind: TokenKind::Raw,
                aug_index: slots.len(),
                raw_index: Some(unit * r + offset),
                unit_id: Some(unit),
                position_id: 0,
                token_id: tok,
            });
        }
        slots.push(TokenSlot {
            kind: TokenKind::Gist,
            aug_index: slots.len(),
            raw_index: None,
            unit_id: Some(unit),
            position_id: 0,
            token_id: specials.gist(),
        });
    }

    let mut seq = AugmentedSequence {
        slots,
        config: *config,
        raw_len: t,
    };
    assign_position_ids(&mut seq);
    Ok(seq)
}

/// Sink `i` gets `i+1`, raw `j` gets `s+j+1`, and each gist borrows the id of
/// the raw token right after it. The final gist has no successor and takes
/// `s+T+1`, which is what the same rule gives for a hypothetical next raw.
pub fn assign_position_ids(seq: &mut AugmentedSequence) {
    let s = seq.config.sink_count;
    let r = seq.config.ratio;
    for slot in &mut seq.slots {
        slot.position_id = match slot.kind {
            TokenKind::Sink => slot.aug_index + 1,
            TokenKind::Raw => s + slot.raw_index.expect("raw slot without raw index") + 1,
            TokenKind::Gist => s + (slot.unit_id.expect("gist slot without unit") + 1) * r + 1,
        };
    }
}

/// Plain `1..=T'` positions, used by the chunk-wise baseline which predates
/// position realignment.
pub fn assign_sequential_position_ids(seq: &mut AugmentedSequence) {
    for slot in &mut seq.slots {
        slot.position_id = slot.aug_index + 1;
    }
}

fn check_range(aug_index: usize, config: &CompressionConfig, raw_len: usize) -> Result<()> {
    let len = config.augmented_len(raw_len);
    if aug_index >= len {
        return Err(Error::IndexOutOfRange { index: aug_index, len });
    }
    Ok(())
}

/// Kind of the slot at `aug_index`, from index arithmetic alone.
pub fn kind_of(aug_index: usize, config: &CompressionConfig, raw_len: usize) -> Result<TokenKind> {
    check_range(aug_index, config, raw_len)?;
    Ok(kind_at(aug_index, config))
}

/// Gist unit of the slot at `aug_index`; `None` for sinks.
pub fn unit_of(aug_index: usize, config: &CompressionConfig, raw_len: usize) -> Result<Option<usize>> {
    check_range(aug_index, config, raw_len)?;
    Ok(unit_at(aug_index, config))
}

/// Unchecked [`kind_of`] for hot loops; valid for any index of an unbounded stream.
#[inline]
pub fn kind_at(aug_index: usize, config: &CompressionConfig) -> TokenKind {
    let s = config.sink_count;
    if aug_index < s {
        TokenKind::Sink
    } else if (aug_index - s) % config.unit_len() == config.ratio {
        TokenKind::Gist
    } else {
        TokenKind::Raw
    }
}

#[inline]
pub fn unit_at(aug_index: usize, config: &CompressionConfig) -> Option<usize> {
    let s = config.sink_count;
    (aug_index >= s).then(|| (aug_index - s) / config.unit_len())
}

/// Raw-stream index of a raw slot.
#[inline]
pub fn raw_index_at(aug_index: usize, config: &CompressionConfig) -> Option<usize> {
    match kind_at(aug_index, config) {
        TokenKind::Raw => {
            let off = aug_index - config.sink_count;
            Some(off / config.unit_len() * config.ratio + off % config.unit_len())
        }
        _ => None,
    }
}

/// Aligned position id of any slot.
#[inline]
pub fn position_at(aug_index: usize, config: &CompressionConfig) -> usize {
    let s = config.sink_count;
    match kind_at(aug_index, config) {
        TokenKind::Sink => aug_index + 1,
        TokenKind::Raw => s + raw_index_at(aug_index, config).unwrap() + 1,
        TokenKind::Gist => s + (unit_at(aug_index, config).unwrap() + 1) * config.ratio + 1,
    }
}

#[inline]
pub fn raw_aug_index(raw_index: usize, config: &CompressionConfig) -> usize {
    config.sink_count + raw_index / config.ratio * config.unit_len() + raw_index % config.ratio
}

#[inline]
pub fn gist_aug_index(unit: usize, config: &CompressionConfig) -> usize {
    config.sink_count + unit * config.unit_len() + config.ratio
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg(r: usize, s: usize) -> CompressionConfig {
        CompressionConfig::new(r, s, 0, 8).unwrap()
    }

    #[test]
    fn default_config() {
        let c = CompressionConfig::default();
        assert_eq!((c.ratio, c.sink_count, c.window_units, c.block_size), (4, 128, 32, 64));
    }

    #[test]
    fn config_validation() {
        assert!(CompressionConfig::new(1, 0, 0, 8).is_err());
        assert!(CompressionConfig::new(2, 0, 0, 4).is_err());
        assert!(CompressionConfig::new(2, 0, 0, 24).is_err());
        assert!(CompressionConfig::new(2, 0, 0, 16).is_ok());
    }

    #[test]
    fn config_json() {
        let c = CompressionConfig::from_json(r#"{"ratio":8,"sink_count":4,"window_units":2,"block_size":16}"#).unwrap();
        assert_eq!(c, CompressionConfig::new(8, 4, 2, 16).unwrap());
        assert!(CompressionConfig::from_json(r#"{"ratio":8,"sink_count":4,"window_units":2,"block_size":16,"x":1}"#).is_err());
        assert!(CompressionConfig::from_json(r#"{"ratio":8.5,"sink_count":4,"window_units":2,"block_size":16}"#).is_err());
        assert!(CompressionConfig::from_json(r#"{"ratio":8,"sink_count":4,"window_units":2}"#).is_err());
    }

    #[test]
    fn pad_examples() {
        assert_eq!(pad_to_ratio(&[1; 6], 0, &cfg(4, 0)).len(), 8);
        assert_eq!(pad_to_ratio(&[1; 6], 0, &cfg(4, 0))[6..], [0, 0]);
        assert_eq!(pad_to_ratio(&[1; 8], 0, &cfg(4, 0)), vec![1; 8]);
        assert_eq!(pad_to_ratio(&[1], 0, &cfg(2, 0)).len(), 2);
    }

    #[test]
    fn augment_small() {
        let seq = augment(&[10, 11, 12, 13], &cfg(2, 1), 100).unwrap();
        let kinds: Vec<_> = seq.slots.iter().map(|s| s.kind).collect();
        use TokenKind::*;
        assert_eq!(kinds, vec![Sink, Raw, Raw, Gist, Raw, Raw, Gist]);
        assert_eq!(seq.token_ids(), vec![100, 10, 11, 101, 12, 13, 101]);
        assert_eq!(seq.position_ids(), vec![1, 2, 3, 4, 4, 5, 6]);
    }

    #[test]
    fn augment_single_unit_and_default_scale() {
        let seq = augment(&[1, 2, 3, 4], &cfg(4, 0), 10).unwrap();
        assert_eq!(seq.len(), 5);
        assert_eq!(seq.slots[4].kind, TokenKind::Gist);
        assert_eq!(CompressionConfig::default().augmented_len(32768), 41088);
        let big = augment(&vec![0; 32768], &CompressionConfig::default(), 10).unwrap();
        assert_eq!(big.len(), 41088);
    }

    #[test]
    fn augment_rejects_non_divisible() {
        assert_eq!(
            augment(&[1, 2, 3], &cfg(2, 0), 10),
            Err(Error::NonDivisibleLength { len: 3, divisor: 2 })
        );
        assert!(augment(&[], &cfg(2, 0), 10).is_err());
    }

    #[test]
    fn ratio_one_positions() {
        // r = 1 is rejected by validation but the position rule still holds.
        let c = CompressionConfig {
            ratio: 1,
            sink_count: 0,
            window_units: 0,
            block_size: 8,
        };
        let seq = augment(&[7], &c, 10).unwrap();
        assert_eq!(seq.position_ids(), vec![1, 2]);
    }

    #[test]
    fn index_lookups() {
        let c = cfg(2, 1);
        assert_eq!(kind_of(3, &c, 4).unwrap(), TokenKind::Gist);
        assert_eq!(unit_of(3, &c, 4).unwrap(), Some(0));
        assert_eq!(kind_of(0, &c, 4).unwrap(), TokenKind::Sink);
        assert_eq!(kind_of(5, &c, 4).unwrap(), TokenKind::Raw);
        assert_eq!(unit_of(5, &c, 4).unwrap(), Some(1));
        assert_eq!(kind_of(7, &c, 4), Err(Error::IndexOutOfRange { index: 7, len: 7 }));
        assert!(unit_of(7, &c, 4).is_err());
    }

    #[test]
    fn closed_forms_match_materialized_slots() {
        for r in 2..=5 {
            for s in [0, 1, 3] {
                let c = cfg(r, s);
                for units in 1..6 {
                    let t = units * r;
                    let raw: Vec<u32> = (0..t as u32).collect();
                    let seq = augment(&raw, &c, 1000).unwrap();
                    for slot in &seq.slots {
                        let i = slot.aug_index;
                        assert_eq!(kind_of(i, &c, t).unwrap(), slot.kind);
                        assert_eq!(unit_of(i, &c, t).unwrap(), slot.unit_id);
                        assert_eq!(raw_index_at(i, &c), slot.raw_index);
                        assert_eq!(position_at(i, &c), slot.position_id);
                        if let Some(u) = slot.unit_id {
                            assert_eq!(u, (i - s) / (r + 1));
                        }
                    }
                    for j in 0..t {
                        assert_eq!(seq.slots[seq.aug_index_of_raw(j)].raw_index, Some(j));
                    }
                    for u in 0..units {
                        let g = seq.aug_index_of_gist(u);
                        assert_eq!(seq.slots[g].kind, TokenKind::Gist);
                        assert_eq!(seq.slots[g].unit_id, Some(u));
                    }
                }
            }
        }
    }

    #[test]
    fn length_law_grid() {
        for r in [2usize, 4, 8] {
            for t in (r..=4096).step_by(r) {
                let c = cfg(r, 3);
                let seq = augment(&vec![1; t], &c, 10).unwrap();
                assert_eq!(seq.len(), 3 + t + t / r);
            }
        }
    }

    proptest! {
        #[test]
        fn raw_positions_gap_free_and_content_preserved(
            r in 2usize..9, s in 0usize..6, units in 1usize..40, seed in any::<u64>()
        ) {
            let t = units * r;
            let raw: Vec<u32> = (0..t).map(|i| ((seed >> (i % 61)) as u32).wrapping_add(i as u32) % 500).collect();
            let seq = augment(&raw, &cfg(r, s), 500).unwrap();
            prop_assert_eq!(seq.raw_tokens(), raw);
            let raw_pos: Vec<usize> = seq.slots.iter().filter(|x| x.kind == TokenKind::Raw).map(|x| x.position_id).collect();
            prop_assert_eq!(raw_pos, (s + 1..=s + t).collect::<Vec<_>>());
            let all = seq.position_ids();
            prop_assert!(all.windows(2).all(|w| w[0] <= w[1]));
            for (i, slot) in seq.slots.iter().enumerate().take(s) {
                prop_assert_eq!(slot.position_id, i + 1);
            }
            prop_assert!(seq.slots.iter().filter(|x| x.kind == TokenKind::Gist).all(|x| x.token_id == 500 + s as u32));
        }
    }
}

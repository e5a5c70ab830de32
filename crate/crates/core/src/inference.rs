//! Chunked prefill and incremental decoding over a KV cache that drops raw
//! entries once they leave the local window.

use ndarray::Array2;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::layout::{kind_at, position_at, unit_at, CompressionConfig, TokenKind};
use crate::model::{argmax, Model};
use crate::visibility::unified_visible;

#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub layer: usize,
    /// Rotated key, `[heads * head_dim]`.
    pub key: Vec<f64>,
    pub value: Vec<f64>,
    pub kind: TokenKind,
    pub aug_index: usize,
    pub unit_id: Option<usize>,
    pub position_id: usize,
}

/// Per-layer cache entries in insertion order.
#[derive(Debug, Clone, PartialEq)]
pub struct KVCache {
    pub layers: Vec<Vec<CacheEntry>>,
    /// When false, nothing is ever evicted (used to check eviction safety).
    pub evict_enabled: bool,
}

/// Entry counts of one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CacheComposition {
    pub sinks: usize,
    pub gists: usize,
    pub raws: usize,
}

impl CacheComposition {
    pub fn total(&self) -> usize {
        self.sinks + self.gists + self.raws
    }
}

impl KVCache {
    pub fn new(layers: usize) -> Self {
        Self {
            layers: vec![Vec::new(); layers],
            evict_enabled: true,
        }
    }

    pub fn without_eviction(layers: usize) -> Self {
        Self {
            evict_enabled: false,
            ..Self::new(layers)
        }
    }

    pub fn composition(&self, layer: usize) -> CacheComposition {
        let mut c = CacheComposition { sinks: 0, gists: 0, raws: 0 };
        for e in &self.layers[layer] {
            match e.kind {
                TokenKind::Sink => c.sinks += 1,
                TokenKind::Gist => c.gists += 1,
                TokenKind::Raw => c.raws += 1,
            }
        }
        c
    }

    fn last_aug_index(&self) -> Option<usize> {
        self.layers.first().and_then(|l| l.last()).map(|e| e.aug_index)
    }
}

/// Removes raw entries of units `< current_unit - k`; sinks, gists and survivor order are kept.
pub fn evict(cache: &mut KVCache, current_unit: usize, config: &CompressionConfig) {
    let Some(cutoff) = current_unit.checked_sub(config.window_units) else {
        return;
    };
    for layer in &mut cache.layers {
        layer.retain(|e| e.kind != TokenKind::Raw || e.unit_id.is_some_and(|u| u >= cutoff));
    }
}

/// Decoding counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct DecodeState {
    pub raw_count: usize,
    /// Unit of the most recently processed slot (0 before any raw token).
    pub current_unit: usize,
    pub next_position_id: usize,
    pub pending_in_unit: usize,
    pub next_aug_index: usize,
}

impl DecodeState {
    fn check(&self, config: &CompressionConfig) -> Result<()> {
        let r = config.ratio;
        let s = config.sink_count;
        let ok = self.pending_in_unit == self.raw_count % r
            && self.next_aug_index == s + self.raw_count + self.raw_count / r
            && self.next_position_id == s + self.raw_count + 1;
        if ok {
            Ok(())
        } else {
            Err(Error::InconsistentState(format!("decode counters {self:?}")))
        }
    }
}

/// Raw entries visible to the next query after `raw_count` raw tokens under the eviction rule.
pub fn window_resident_raws(raw_count: usize, config: &CompressionConfig) -> usize {
    let (r, k) = (config.ratio, config.window_units);
    let complete = raw_count / r;
    let pending = raw_count % r;
    if pending == 0 {
        complete.min(k + 1) * r
    } else {
        complete.min(k) * r + pending
    }
}

/// Exact per-layer entry count after `raw_count` raw tokens.
pub fn expected_cache_len(raw_count: usize, config: &CompressionConfig) -> usize {
    config.sink_count + raw_count / config.ratio + window_resident_raws(raw_count, config)
}

/// Upper bound `s + ceil(t/r) + (k+1) r`.
pub fn cache_len_bound(raw_count: usize, config: &CompressionConfig) -> usize {
    config.sink_count + raw_count.div_ceil(config.ratio) + (config.window_units + 1) * config.ratio
}

#[derive(Debug, Clone, Copy)]
struct NewSlot {
    token: u32,
    aug_index: usize,
}

/// Runs `slots` through the model against the cache, appends their entries and
/// returns logits for every new slot.
fn process(model: &Model, cache: &mut KVCache, slots: &[NewSlot]) -> Result<Array2<f64>> {
    let cfg = &model.compression;
    let (heads, d) = (model.config.heads, model.config.head_dim);
    let width = heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    if cache.layers.len() != model.params.layers.len() {
        return Err(Error::InconsistentState(format!(
            "cache has {} layers, model {}",
            cache.layers.len(),
            model.params.layers.len()
        )));
    }
    let tokens: Vec<u32> = slots.iter().map(|s| s.token).collect();
    let positions: Vec<usize> = slots.iter().map(|s| position_at(s.aug_index, cfg)).collect();
    let mut x = model.embed_rows(&tokens)?;

    for (li, layer) in model.params.layers.iter().enumerate() {
        let (h_norm, _) = crate::model::rmsnorm(&x, &layer.attn_norm);
        let (q, k, v) = model.project_qkv(layer, &h_norm, &positions);
        let entries = &mut cache.layers[li];
        for (i, slot) in slots.iter().enumerate() {
            entries.push(CacheEntry {
                layer: li,
                key: k[i * width..(i + 1) * width].to_vec(),
                value: v[i * width..(i + 1) * width].to_vec(),
                kind: kind_at(slot.aug_index, cfg),
                aug_index: slot.aug_index,
                unit_id: unit_at(slot.aug_index, cfg),
                position_id: positions[i],
            });
        }
        let entries: &[CacheEntry] = entries;
        let mut o = vec![0.0; slots.len() * width];
        o.par_chunks_mut(width).enumerate().for_each(|(i, out)| {
            let t = slots[i].aug_index;
            let visible: Vec<&CacheEntry> = entries
                .iter()
                .filter(|e| e.aug_index <= t && unified_visible(t, e.aug_index, cfg))
                .collect();
            let mut scores = vec![0.0; visible.len()];
            for h in 0..heads {
                let qh = &q[i * width + h * d..i * width + (h + 1) * d];
                let mut m = f64::NEG_INFINITY;
                for (sc, e) in scores.iter_mut().zip(&visible) {
                    *sc = qh.iter().zip(&e.key[h * d..(h + 1) * d]).map(|(a, b)| a * b).sum::<f64>() * scale;
                    m = m.max(*sc);
                }
                let mut z = 0.0;
                for sc in scores.iter_mut() {
                    *sc = (*sc - m).exp();
                    z += *sc;
                }
                let oh = &mut out[h * d..(h + 1) * d];
                for (p, e) in scores.iter().zip(&visible) {
                    for (ov, vv) in oh.iter_mut().zip(&e.value[h * d..(h + 1) * d]) {
                        *ov += p / z * vv;
                    }
                }
            }
        });
        let attn_o = Array2::from_shape_vec((slots.len(), width), o).expect("attention output shape");
        let x_mid = &x + &attn_o.dot(&layer.wo);
        let (m_norm, _) = crate::model::rmsnorm(&x_mid, &layer.mlp_norm);
        let (_, _, _, mlp_out) = Model::mlp(layer, &m_norm);
        x = x_mid + mlp_out;
    }
    Ok(model.head(&x))
}

fn empty_state(config: &CompressionConfig) -> DecodeState {
    DecodeState {
        raw_count: 0,
        current_unit: 0,
        next_position_id: config.sink_count + 1,
        pending_in_unit: 0,
        next_aug_index: config.sink_count,
    }
}

/// Output of [`prefill`].
#[derive(Debug, Clone)]
pub struct Prefilled {
    pub cache: KVCache,
    pub state: DecodeState,
    /// Next-token logits after the prompt (from the last processed slot).
    pub logits: Vec<f64>,
    /// Logits of every processed slot in augmented order, `[s + T + T/r, vocab]`.
    pub slot_logits: Array2<f64>,
}

/// Encodes the sinks, then the prompt in chunks of `chunk` raw tokens, evicting after each chunk.
pub fn prefill(model: &Model, raw: &[u32], chunk: usize) -> Result<Prefilled> {
    prefill_with(model, raw, chunk, KVCache::new(model.params.layers.len()))
}

/// [`prefill`] into a caller-supplied empty cache (for example one with eviction disabled).
pub fn prefill_with(model: &Model, raw: &[u32], chunk: usize, mut cache: KVCache) -> Result<Prefilled> {
    let cfg = model.compression;
    let r = cfg.ratio;
    if chunk == 0 || chunk % r != 0 {
        return Err(Error::InvalidChunkSize { chunk, ratio: r });
    }
    if raw.len() % r != 0 {
        return Err(Error::NonDivisibleLength { len: raw.len(), divisor: r });
    }
    if cache.layers.iter().any(|l| !l.is_empty()) {
        return Err(Error::InconsistentState("prefill needs an empty cache".into()));
    }
    let specials = model.specials();
    let mut blocks: Vec<Array2<f64>> = Vec::new();
    if cfg.sink_count > 0 {
        let sinks: Vec<NewSlot> = (0..cfg.sink_count)
            .map(|i| NewSlot {
                token: specials.sink(i),
                aug_index: i,
            })
            .collect();
        blocks.push(process(model, &mut cache, &sinks)?);
    }
    let mut state = empty_state(&cfg);
    for piece in raw.chunks(chunk) {
        let mut slots = Vec::with_capacity(piece.len() + piece.len() / r);
        for unit in piece.chunks(r) {
            for &tok in unit {
                slots.push(NewSlot {
                    token: tok,
                    aug_index: slots.len() + state.next_aug_index,
                });
            }
            slots.push(NewSlot {
                token: specials.gist(),
                aug_index: slots.len() + state.next_aug_index,
            });
        }
        blocks.push(process(model, &mut cache, &slots)?);
        state.raw_count += piece.len();
        state.next_aug_index += slots.len();
        state.next_position_id = cfg.sink_count + state.raw_count + 1;
        state.current_unit = state.raw_count / r - 1;
        if cache.evict_enabled {
            evict(&mut cache, state.current_unit, &cfg);
        }
    }
    if blocks.is_empty() {
        return Err(Error::InvalidConfig("empty prompt and no sinks: nothing to condition on".into()));
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let slot_logits = ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths");
    let logits = slot_logits.row(slot_logits.nrows() - 1).to_vec();
    Ok(Prefilled {
        cache,
        state,
        logits,
        slot_logits,
    })
}

/// Appends one raw token and returns next-token logits. When the token completes
/// a unit, the gist slot is run as well and its logits are returned, since the
/// gist is the predecessor of the next raw token.
pub fn decode_step(model: &Model, cache: &mut KVCache, state: &mut DecodeState, token: u32) -> Result<Vec<f64>> {
    let cfg = model.compression;
    state.check(&cfg)?;
    if cache.last_aug_index().map_or(0, |a| a + 1) != state.next_aug_index {
        return Err(Error::InconsistentState(format!(
            "cache ends at {:?}, state expects next slot {}",
            cache.last_aug_index(),
            state.next_aug_index
        )));
    }
    if token as usize >= model.config.vocab {
        return Err(Error::InconsistentState(format!("token {token} is not a base-vocabulary id")));
    }
    let r = cfg.ratio;
    if state.pending_in_unit == 0 {
        state.current_unit = state.raw_count / r;
        if cache.evict_enabled {
            evict(cache, state.current_unit, &cfg);
        }
    }
    let raw_slot = NewSlot {
        token,
        aug_index: state.next_aug_index,
    };
    let mut logits = process(model, cache, &[raw_slot])?;
    state.raw_count += 1;
    state.next_aug_index += 1;
    state.next_position_id += 1;
    state.pending_in_unit += 1;
    if state.pending_in_unit == r {
        let gist = NewSlot {
            token: model.specials().gist(),
            aug_index: state.next_aug_index,
        };
        logits = process(model, cache, &[gist])?;
        state.next_aug_index += 1;
        state.pending_in_unit = 0;
        if cache.evict_enabled {
            evict(cache, state.current_unit, &cfg);
        }
    }
    Ok(logits.row(0).to_vec())
}

/// Greedy token over the base vocabulary only.
pub fn greedy(logits: &[f64], base_vocab: usize) -> u32 {
    argmax(ndarray::ArrayView1::from(&logits[..base_vocab])) as u32
}

/// One row of the cache trace: per-layer composition after each generation step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRow {
    pub step: usize,
    pub layer: usize,
    pub sinks: usize,
    pub gists: usize,
    pub raws: usize,
}

/// Greedy generation of `steps` tokens after `prompt`. The ratio-aligned prefix is
/// prefilled in chunks of `chunk`; any trailing partial unit is decoded token by token.
pub fn generate(model: &Model, prompt: &[u32], chunk: usize, steps: usize) -> Result<(Vec<u32>, Vec<TraceRow>)> {
    let split = prompt.len() / model.compression.ratio * model.compression.ratio;
    let Prefilled {
        mut cache,
        mut state,
        mut logits,
        ..
    } = prefill(model, &prompt[..split], chunk)?;
    for &tok in &prompt[split..] {
        logits = decode_step(model, &mut cache, &mut state, tok)?;
    }
    let mut out = Vec::with_capacity(steps);
    let mut trace = Vec::new();
    let push_trace = |trace: &mut Vec<TraceRow>, cache: &KVCache, step: usize| {
        for layer in 0..cache.layers.len() {
            let c = cache.composition(layer);
            trace.push(TraceRow {
                step,
                layer,
                sinks: c.sinks,
                gists: c.gists,
                raws: c.raws,
            });
        }
    };
    push_trace(&mut trace, &cache, 0);
    for step in 1..=steps {
        let tok = greedy(&logits, model.config.vocab);
        out.push(tok);
        logits = decode_step(model, &mut cache, &mut state, tok)?;
        push_trace(&mut trace, &cache, step);
    }
    Ok((out, trace))
}

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layout::{AugmentedSequence, TokenKind};
use crate::model::{AttentionMode, AttentionPlan, Model, TrainLayout};

/// Raw position a slot stands for: its own index for raw tokens, the unit's last raw index for gists.
fn raw_anchor(seq: &AugmentedSequence, slot: usize) -> Option<usize> {
    let s = &seq.slots[slot];
    match s.kind {
        TokenKind::Sink => None,
        TokenKind::Raw => s.raw_index,
        TokenKind::Gist => s.unit_id.map(|u| (u + 1) * seq.config.ratio - 1),
    }
}

/// Per-layer mean (over non-sink queries, heads and sequences) of the softmax mass
/// a query puts on keys anchored in an earlier chunk of `chunk_len` raw tokens.
pub fn attention_mass_profile(
    model: &Model,
    layout: &TrainLayout,
    data: &[Vec<u32>],
    chunk_len: usize,
) -> Result<Vec<f64>> {
    if chunk_len == 0 {
        return Err(Error::InvalidConfig("chunk_len must be positive".into()));
    }
    let layout = match layout {
        TrainLayout::Unified(_) => TrainLayout::Unified(AttentionMode::Oracle),
        chunk => *chunk,
    };
    let (heads, d) = (model.config.heads, model.config.head_dim);
    let width = heads * d;
    let scale = 1.0 / (d as f64).sqrt();
    let layers = model.params.layers.len();

    let per_seq = data
        .par_iter()
        .map(|raw| {
            let seq = layout.sequence(model, raw)?;
            let plan = layout.plan(model, raw.len())?;
            let AttentionPlan::Dense(mask) = &plan else {
                unreachable!("diagnostic layouts are dense");
            };
            let trace = model.forward_trace(&seq, &plan)?;
            let chunk_of = |slot: usize| raw_anchor(&seq, slot).map(|p| p / chunk_len);
            let mut sums = vec![0.0; layers];
            let mut queries = 0usize;
            for (li, sum) in sums.iter_mut().enumerate() {
                let (q, k, lse) = trace.attention_operands(li, &plan);
                queries = 0;
                for t in 0..seq.len() {
                    let Some(qc) = chunk_of(t) else { continue };
                    queries += 1;
                    for h in 0..heads {
                        let qh = &q[t * width + h * d..t * width + (h + 1) * d];
                        for j in 0..=t {
                            if !mask.get(t, j) || chunk_of(j).is_none_or(|c| c >= qc) {
                                continue;
                            }
                            let kh = &k[j * width + h * d..j * width + (h + 1) * d];
                            let s: f64 = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<f64>() * scale;
                            *sum += (s - lse[t * heads + h]).exp() / heads as f64;
                        }
                    }
                }
            }
            Ok((sums, queries))
        })
        .collect::<Result<Vec<_>>>()?;

    let total_queries: usize = per_seq.iter().map(|x| x.1).sum();
    let mut out = vec![0.0; layers];
    for (sums, _) in &per_seq {
        for (o, s) in out.iter_mut().zip(sums) {
            *o += s;
        }
    }
    if total_queries > 0 {
        for o in &mut out {
            *o /= total_queries as f64;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layout::CompressionConfig;
    use crate::model::ModelConfig;
    use crate::visibility::{build_unified_mask_fast, ChunkBaselineSpec};

    fn model(c: CompressionConfig) -> Model {
        Model::new(
            ModelConfig {
                layers: 2,
                heads: 2,
                head_dim: 4,
                vocab: 10,
                ..ModelConfig::default()
            },
            c,
        )
        .unwrap()
    }

    #[test]
    fn single_chunk_has_no_cross_chunk_mass() {
        let c = CompressionConfig::new(4, 2, 1, 8).unwrap();
        let m = model(c);
        let data = vec![(0..32).map(|i| i % 10).collect::<Vec<u32>>()];
        let prof = attention_mass_profile(&m, &TrainLayout::Unified(AttentionMode::Sparse), &data, 32).unwrap();
        assert_eq!(prof, vec![0.0, 0.0]);
    }

    #[test]
    fn uniform_scores_give_key_count_fraction() {
        let c = CompressionConfig::new(4, 2, 1, 8).unwrap();
        let mut m = model(c);
        for l in &mut m.params.layers {
            l.wq.fill(0.0);
        }
        let raw: Vec<u32> = (0..48).map(|i| (i * 7 % 10) as u32).collect();
        let l = 16;
        let prof = attention_mass_profile(&m, &TrainLayout::Unified(AttentionMode::Oracle), &[raw.clone()], l).unwrap();

        let seq = m.augment(&raw).unwrap();
        let mask = build_unified_mask_fast(&c, raw.len());
        let mut want = 0.0;
        let mut n = 0;
        for t in 0..seq.len() {
            let Some(qc) = raw_anchor(&seq, t).map(|p| p / l) else { continue };
            n += 1;
            let vis: Vec<usize> = (0..=t).filter(|&j| mask.get(t, j)).collect();
            let earlier = vis.iter().filter(|&&j| raw_anchor(&seq, j).is_some_and(|p| p / l < qc)).count();
            want += earlier as f64 / vis.len() as f64;
        }
        want /= n as f64;
        for p in prof {
            assert!((p - want).abs() < 1e-12, "{p} vs {want}");
        }
    }

    #[test]
    fn chunk_layout_profile_runs() {
        let spec = ChunkBaselineSpec::new(16, 4).unwrap();
        let m = model(spec.layout_config());
        let raw: Vec<u32> = (0..32).map(|i| i % 10).collect();
        let prof = attention_mass_profile(&m, &TrainLayout::Chunk(spec), &[raw], 16).unwrap();
        assert!(prof.iter().all(|p| (0.0..=1.0).contains(p)));
        assert!(prof.iter().any(|&p| p > 0.0));
    }
}
